#include "kd/feature_distill.hpp"

#include "kd/losses.hpp"

#include <cmath>
#include <set>
#include <stdexcept>

namespace kd {

void LayerPairing::validate() const {
  std::set<std::string> seen;
  for (const auto& [s, t] : pairs)
    if (!seen.insert(s).second)
      throw std::invalid_argument("LayerPairing: student layer '" + s + "' paired twice");
}

ImportanceMap importance_map(const FeatureMap& f) {
  if (f.values->value.ndim() != 4)
    throw std::invalid_argument("importance_map: features must be [B,C,H,W]");
  if (!all_finite(f.values->value)) throw std::invalid_argument("importance_map: non-finite features");
  return {l2_normalize_spatial(channel_sq_sum(f.values)), f.layer_id};
}

ImportanceMap align_spatial(const ImportanceMap& m, int target_h, int target_w) {
  if (target_h < 1 || target_w < 1)
    throw std::invalid_argument("align_spatial: non-positive target size");
  const int nd = m.values->value.ndim();
  if (m.values->value.dim(nd - 2) == target_h && m.values->value.dim(nd - 1) == target_w) return m;
  return {l2_normalize_spatial(upsample_bilinear(m.values, target_h, target_w)), m.layer_id};
}

namespace {

template <typename T>
const T& find_by_layer(const std::vector<T>& items, const std::string& id, const char* role) {
  for (const auto& it : items)
    if (it.layer_id == id) return it;
  throw std::invalid_argument(std::string("pairing: no ") + role + " layer named '" + id + "'");
}

}  // namespace

Var importance_loss(const std::vector<ImportanceMap>& student_maps,
                    const std::vector<ImportanceMap>& teacher_maps, const LayerPairing& pairing) {
  pairing.validate();
  if (pairing.pairs.empty()) return constant(Tensor::scalar(0.0));
  Var total;
  for (const auto& [sid, tid] : pairing.pairs) {
    const ImportanceMap& sm = find_by_layer(student_maps, sid, "student");
    const ImportanceMap& tm = find_by_layer(teacher_maps, tid, "teacher");
    const int nd = tm.values->value.ndim();
    const ImportanceMap aligned =
        align_spatial(sm, tm.values->value.dim(nd - 2), tm.values->value.dim(nd - 1));
    // mean over batch keeps the term's scale independent of batch size
    const double batch = static_cast<double>(tm.values->value.dim(0));
    Var term = scale(l1_diff_sum(aligned.values, tm.values), 1.0 / batch);
    total = total ? add(total, term) : term;
  }
  return scale(total, 1.0 / static_cast<double>(pairing.pairs.size()));
}

RegionContrastVector region_contrast_vector(const FeatureMap& f, const Tensor& mask) {
  const auto& fs = f.values->value.shape();
  if (fs.size() != 4) throw std::invalid_argument("region_contrast_vector: features must be [B,C,H,W]");
  if (mask.ndim() != 3 || mask.dim(0) != fs[0])
    throw std::invalid_argument("region_contrast_vector: mask must be [B,H,W] with matching batch");
  check_binary_mask(mask);

  const int batch = fs[0], h = fs[2], w = fs[3];
  const std::int64_t plane = static_cast<std::int64_t>(h) * w;
  const Tensor m = resize_nearest(mask, h, w);

  Var reduced = channel_sq_sum(f.values);  // un-normalized importance reduction
  Tensor out({batch});
  std::vector<double> n_fg(static_cast<std::size_t>(batch)), n_bg(static_cast<std::size_t>(batch));
  for (int b = 0; b < batch; ++b) {
    const double* r = reduced->value.data() + static_cast<std::int64_t>(b) * plane;
    const double* mp = m.data() + static_cast<std::int64_t>(b) * plane;
    double fg_sum = 0, bg_sum = 0, fg_n = 0, bg_n = 0;
    for (std::int64_t i = 0; i < plane; ++i) {
      if (mp[i] != 0.0) {
        fg_sum += r[i];
        fg_n += 1;
      } else {
        bg_sum += r[i];
        bg_n += 1;
      }
    }
    n_fg[static_cast<std::size_t>(b)] = fg_n;
    n_bg[static_cast<std::size_t>(b)] = bg_n;
    out[b] = (fg_n > 0 ? fg_sum / fg_n : 0.0) - (bg_n > 0 ? bg_sum / bg_n : 0.0);
  }

  Var v = make_var(std::move(out), reduced->requires_grad);
  if (v->requires_grad) {
    v->parents = {reduced};
    v->backprop = [batch, plane, m, n_fg = std::move(n_fg), n_bg = std::move(n_bg)](VarNode& n) {
      auto& gr = n.parents[0]->ensure_grad();
      for (int b = 0; b < batch; ++b) {
        const double g = n.grad[b];
        const double* mp = m.data() + static_cast<std::int64_t>(b) * plane;
        double* gp = gr.data() + static_cast<std::int64_t>(b) * plane;
        const double fg_n = n_fg[static_cast<std::size_t>(b)];
        const double bg_n = n_bg[static_cast<std::size_t>(b)];
        for (std::int64_t i = 0; i < plane; ++i) {
          if (mp[i] != 0.0) {
            if (fg_n > 0) gp[i] += g / fg_n;
          } else {
            if (bg_n > 0) gp[i] -= g / bg_n;
          }
        }
      }
    };
  }
  return {v, f.layer_id};
}

Var affinity_loss(const RegionContrastVector& v_s, const RegionContrastVector& v_t) {
  if (v_s.values->value.numel() != v_t.values->value.numel())
    throw std::invalid_argument("affinity_loss: length mismatch");
  return l2_diff_norm(v_s.values, v_t.values);
}

Var mid_loss(const std::vector<FeatureMap>& student_feats,
             const std::vector<FeatureMap>& teacher_feats, const Tensor& mask,
             const LayerPairing& pairing) {
  pairing.validate();
  if (pairing.pairs.empty()) return constant(Tensor::scalar(0.0));

  std::vector<ImportanceMap> s_maps, t_maps;
  for (const auto& f : student_feats) s_maps.push_back(importance_map(f));
  for (const auto& f : teacher_feats) t_maps.push_back(importance_map(f));
  Var imp = importance_loss(s_maps, t_maps, pairing);

  Var aff;
  for (const auto& [sid, tid] : pairing.pairs) {
    const FeatureMap& sf = find_by_layer(student_feats, sid, "student");
    const FeatureMap& tf = find_by_layer(teacher_feats, tid, "teacher");
    Var term = affinity_loss(region_contrast_vector(sf, mask), region_contrast_vector(tf, mask));
    aff = aff ? add(aff, term) : term;
  }
  return add(imp, scale(aff, 1.0 / static_cast<double>(pairing.pairs.size())));
}

LayerPairing nearest_depth_pairing(const std::vector<std::pair<std::string, double>>& student_taps,
                                   const std::vector<std::pair<std::string, double>>& teacher_taps) {
  if (teacher_taps.empty()) throw std::invalid_argument("nearest_depth_pairing: no teacher taps");
  LayerPairing p;
  for (const auto& [sid, sdepth] : student_taps) {
    std::size_t best = 0;
    double best_d = std::abs(teacher_taps[0].second - sdepth);
    for (std::size_t j = 1; j < teacher_taps.size(); ++j) {
      const double d = std::abs(teacher_taps[j].second - sdepth);
      if (d < best_d) {
        best_d = d;
        best = j;
      }
    }
    p.pairs.emplace_back(sid, teacher_taps[best].first);
  }
  p.validate();
  return p;
}

}  // namespace kd
