#include "kd/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>

#include "kd/eval.hpp"
#include "kd/multi_teacher.hpp"

namespace kd {

void TrainConfig::validate() const {
  if (!(lr_min < lr_max)) throw std::invalid_argument("TrainConfig: lr_min must be < lr_max");
  if (cyclic_step_size < 1) throw std::invalid_argument("TrainConfig: cyclic_step_size must be >= 1");
  if (epochs < 1) throw std::invalid_argument("TrainConfig: epochs must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch_size must be >= 1");
  loss_weights.validate();
}

double cyclic_lr(int step, const TrainConfig& cfg) {
  if (step < 0) throw std::invalid_argument("cyclic_lr: negative step");
  const int period = 2 * cfg.cyclic_step_size;
  const int phase = step % period;
  const double f = phase <= cfg.cyclic_step_size
                       ? static_cast<double>(phase) / cfg.cyclic_step_size
                       : static_cast<double>(period - phase) / cfg.cyclic_step_size;
  return cfg.lr_min + (cfg.lr_max - cfg.lr_min) * f;
}

Adam::Adam(std::vector<Var> params, double beta1, double beta2, double eps)
    : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const Var& p : params_) {
    m_.push_back(Tensor::zeros(p->value.shape()));
    v_.push_back(Tensor::zeros(p->value.shape()));
  }
}

void Adam::zero_grad() {
  for (Var& p : params_) {
    auto& g = p->ensure_grad();
    std::fill(g.vec().begin(), g.vec().end(), 0.0);
  }
}

void Adam::step(double lr) {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = params_[i]->value;
    const Tensor& g = params_[i]->ensure_grad();
    Tensor& m = m_[i];
    Tensor& v = v_[i];
    for (std::int64_t j = 0; j < p.numel(); ++j) {
      m[j] = beta1_ * m[j] + (1.0 - beta1_) * g[j];
      v[j] = beta2_ * v[j] + (1.0 - beta2_) * g[j] * g[j];
      p[j] -= lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + eps_);
    }
  }
}

namespace {

namespace fs = std::filesystem;

std::vector<std::pair<std::string, double>> tap_pairs(const SegmentationModelAdapter& m) {
  std::vector<std::pair<std::string, double>> out;
  for (const TapSpec& t : m.taps()) out.emplace_back(t.layer_id, t.depth_fraction);
  return out;
}

LayerPairing resolve_pairing(const SegmentationModelAdapter& student,
                             const SegmentationModelAdapter& teacher, const TrainConfig& cfg) {
  const auto s_taps = tap_pairs(student);
  const auto t_taps = tap_pairs(teacher);
  if (cfg.pairing.empty()) return nearest_depth_pairing(s_taps, t_taps);
  LayerPairing p;
  p.pairs = cfg.pairing;
  p.validate();
  auto has = [](const std::vector<std::pair<std::string, double>>& taps, const std::string& id) {
    return std::any_of(taps.begin(), taps.end(), [&](const auto& t) { return t.first == id; });
  };
  for (const auto& [sid, tid] : p.pairs) {
    if (!has(s_taps, sid))
      throw std::invalid_argument("pairing: student model '" + student.name() + "' has no tap '" +
                                  sid + "'");
    if (!has(t_taps, tid))
      throw std::invalid_argument("pairing: teacher model '" + teacher.name() + "' has no tap '" +
                                  tid + "'");
  }
  return p;
}

struct SliceCache {
  std::vector<std::vector<double>> images;  // per slice, H*W
  std::vector<std::vector<double>> masks;
  int h = 0, w = 0;
};

SliceCache preload(const Manifest& m, const TrainConfig& cfg) {
  SliceCache c;
  c.h = cfg.input_hw.first;
  c.w = cfg.input_hw.second;
  for (const SliceRecord& r : m.records) {
    auto [img, mask] = load_batch({r}, cfg.input_hw, cfg.normalization);
    c.images.push_back(img.vec());
    c.masks.push_back(mask.vec());
  }
  return c;
}

Tensor batch_sample(const Tensor& t, int b) {
  std::vector<int> shp(t.shape().begin() + 1, t.shape().end());
  Tensor out(shp);
  const std::int64_t n = out.numel();
  std::copy(t.data() + b * n, t.data() + (b + 1) * n, out.data());
  return out;
}

Tensor batch_stack(const std::vector<Tensor>& slices, const std::vector<std::size_t>& idx) {
  std::vector<int> shp{static_cast<int>(idx.size())};
  for (int d : slices[idx[0]].shape()) shp.push_back(d);
  Tensor out(shp);
  const std::int64_t n = slices[idx[0]].numel();
  for (std::size_t b = 0; b < idx.size(); ++b)
    std::copy(slices[idx[b]].data(), slices[idx[b]].data() + n,
              out.data() + static_cast<std::int64_t>(b) * n);
  return out;
}

std::pair<Tensor, Tensor> gather_batch(const SliceCache& c, const std::vector<std::size_t>& idx);

// Teachers are frozen, so their per-slice outputs never change across steps;
// forward each slice once up front instead of re-running teachers every epoch.
// conv2d and every other forward op act per sample, so cached values are
// bit-identical to what a batched forward would produce.
struct TeacherCache {
  struct Tap {
    std::string layer_id;
    double depth_fraction = 0.0;
    std::vector<Tensor> slices;  // per slice [C,Hc,Wc]
  };
  std::vector<Tensor> probs_eval;  // per slice [2,H,W], temperature 1
  std::vector<Tensor> probs_soft;  // per slice [2,H,W], temperature lambda
  std::vector<Tap> taps;
};

TeacherCache build_teacher_cache(SegmentationModelAdapter& teacher, const SliceCache& data,
                                 const LayerPairing* pairing, const TrainConfig& cfg,
                                 bool with_taps) {
  const LossWeights& w = cfg.loss_weights;
  TeacherCache out;
  std::vector<std::string> wanted;
  if (with_taps)
    for (const auto& [sid, tid] : pairing->pairs)
      if (std::find(wanted.begin(), wanted.end(), tid) == wanted.end()) wanted.push_back(tid);

  const std::size_t n = data.images.size();
  for (std::size_t start = 0; start < n; start += static_cast<std::size_t>(cfg.batch_size)) {
    const std::size_t end = std::min(n, start + static_cast<std::size_t>(cfg.batch_size));
    std::vector<std::size_t> idx(end - start);
    std::iota(idx.begin(), idx.end(), start);
    auto [images, masks] = gather_batch(data, idx);
    (void)masks;
    ForwardResult tr = teacher.forward(constant(std::move(images)), with_taps);
    const Tensor p1 = softened_softmax(tr.logits, 1.0)->value;
    const Tensor pt = softened_softmax(tr.logits, w.temperature)->value;
    for (int b = 0; b < static_cast<int>(idx.size()); ++b) {
      out.probs_eval.push_back(batch_sample(p1, b));
      out.probs_soft.push_back(batch_sample(pt, b));
    }
    if (with_taps) {
      if (out.taps.empty())
        for (const FeatureMap& f : tr.taps)
          if (std::find(wanted.begin(), wanted.end(), f.layer_id) != wanted.end())
            out.taps.push_back({f.layer_id, f.depth_fraction, {}});
      for (TeacherCache::Tap& tap : out.taps) {
        const FeatureMap* src = nullptr;
        for (const FeatureMap& f : tr.taps)
          if (f.layer_id == tap.layer_id) src = &f;
        if (!src) throw std::logic_error("teacher cache: tap '" + tap.layer_id + "' disappeared");
        for (int b = 0; b < static_cast<int>(idx.size()); ++b)
          tap.slices.push_back(batch_sample(src->values->value, b));
      }
    }
  }
  return out;
}

std::pair<Tensor, Tensor> gather_batch(const SliceCache& c, const std::vector<std::size_t>& idx) {
  const int n = static_cast<int>(idx.size());
  Tensor images({n, 1, c.h, c.w});
  Tensor masks({n, c.h, c.w});
  const std::int64_t plane = static_cast<std::int64_t>(c.h) * c.w;
  for (int b = 0; b < n; ++b) {
    std::copy(c.images[idx[static_cast<std::size_t>(b)]].begin(),
              c.images[idx[static_cast<std::size_t>(b)]].end(),
              images.vec().begin() + static_cast<std::int64_t>(b) * plane);
    std::copy(c.masks[idx[static_cast<std::size_t>(b)]].begin(),
              c.masks[idx[static_cast<std::size_t>(b)]].end(),
              masks.vec().begin() + static_cast<std::int64_t>(b) * plane);
  }
  return {std::move(images), std::move(masks)};
}

TrainResult run_training(const ModelPtr& model, const std::vector<ModelPtr>& teachers,
                         const Manifest& train, const Manifest& val, const TrainConfig& cfg,
                         const std::string& run_dir) {
  cfg.validate();
  if (train.records.empty()) throw std::invalid_argument("training: empty training manifest");
  if (!model->trainable()) throw std::invalid_argument("training: model is not trainable");
  fs::create_directories(run_dir);

  const LossWeights& w = cfg.loss_weights;
  const bool use_kd = !teachers.empty() && (w.alpha > 0 || w.beta > 0);
  const bool use_mid = use_kd && w.alpha > 0;

  std::vector<LayerPairing> pairings;
  if (use_mid)
    for (const ModelPtr& t : teachers) pairings.push_back(resolve_pairing(*model, *t, cfg));

  const auto t_start = std::chrono::steady_clock::now();
  SliceCache cache = preload(train, cfg);

  std::vector<TeacherCache> t_cache;
  if (use_kd)
    for (std::size_t j = 0; j < teachers.size(); ++j)
      t_cache.push_back(build_teacher_cache(*teachers[j], cache,
                                            use_mid ? &pairings[j] : nullptr, cfg, use_mid));

  Adam opt(model->parameters(), cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
  std::mt19937 shuffle_rng(static_cast<unsigned>(cfg.seed));
  RunHistory hist;
  int global_step = 0;
  double best_dice = -1.0;
  std::vector<Tensor> best_params;

  std::vector<std::size_t> order(train.records.size());
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double e_seg = 0, e_mid = 0, e_kl = 0, e_total = 0;
    int n_steps = 0;
    double last_lr = cfg.lr_min;

    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      const std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                         order.begin() + static_cast<std::ptrdiff_t>(end));
      auto [images, masks] = gather_batch(cache, idx);
      Var input = constant(std::move(images));

      ForwardResult sr = model->forward(input, use_mid);
      Var probs = softened_softmax(sr.logits, 1.0);
      Var seg = segmentation_loss(probs, masks, w);

      Var mid = constant(Tensor::scalar(0.0));
      Var kl = constant(Tensor::scalar(0.0));
      StepRecord step_rec;
      if (use_kd) {
        std::vector<Tensor> probs_eval;  // temperature 1, for the dice weights
        std::vector<Tensor> probs_soft;  // temperature lambda, for the KL target
        std::vector<std::vector<FeatureMap>> teacher_taps;
        for (const TeacherCache& tc : t_cache) {
          probs_eval.push_back(batch_stack(tc.probs_eval, idx));
          probs_soft.push_back(batch_stack(tc.probs_soft, idx));
          if (use_mid) {
            std::vector<FeatureMap> taps;
            for (const TeacherCache::Tap& tap : tc.taps)
              taps.push_back({constant(batch_stack(tap.slices, idx)), tap.layer_id,
                              tap.depth_fraction});
            teacher_taps.push_back(std::move(taps));
          }
        }
        for (const Tensor& p : probs_eval)
          step_rec.teacher_dice.push_back(soft_dice_loss_value(p, masks));
        step_rec.teacher_weights = adaptive_weights(
            probs_eval, masks, cfg.weighting_mode == WeightingMode::kInverse);

        if (w.beta > 0) {
          Tensor combined = combined_teacher_prediction(probs_soft, step_rec.teacher_weights);
          kl = kl_distillation_loss(sr.logits, combined, w.temperature, w.kl_reversed);
          if (w.kl_temperature_sq) kl = scale(kl, w.temperature * w.temperature);
        }
        if (use_mid)
          mid = multi_mid_loss(sr.taps, teacher_taps, step_rec.teacher_weights, masks, pairings);
      }

      Var total = kd_total_loss(seg, mid, kl, w);
      opt.zero_grad();
      backward(total);
      const double lr = cyclic_lr(global_step, cfg);
      opt.step(lr);
      last_lr = lr;

      step_rec.step = global_step;
      step_rec.seg = seg->value.item();
      step_rec.mid = mid->value.item();
      step_rec.kl = kl->value.item();
      step_rec.total = total->value.item();
      step_rec.lr = lr;
      hist.steps.push_back(std::move(step_rec));

      e_seg += hist.steps.back().seg;
      e_mid += hist.steps.back().mid;
      e_kl += hist.steps.back().kl;
      e_total += hist.steps.back().total;
      ++n_steps;
      ++global_step;
    }

    double val_dice = 0;
    if (!val.records.empty()) {
      const std::vector<double> d =
          per_slice_dice(*model, val, cfg.input_hw, cfg.normalization, cfg.batch_size);
      val_dice = std::accumulate(d.begin(), d.end(), 0.0) / static_cast<double>(d.size());
    }
    hist.epochs.push_back({epoch, e_seg / n_steps, e_mid / n_steps, e_kl / n_steps,
                           e_total / n_steps, val_dice, last_lr});
    if (val_dice > best_dice) {
      best_dice = val_dice;
      hist.best_epoch = epoch;
      best_params.clear();
      for (const Var& p : model->parameters()) best_params.push_back(p->value);
    }
  }

  // model selection: restore the best-validation-dice parameters
  if (!best_params.empty())
    for (std::size_t i = 0; i < best_params.size(); ++i)
      model->parameters()[i]->value = best_params[i];

  hist.wall_time_s =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();

  TrainResult res;
  res.checkpoint_path = (fs::path(run_dir) / "best.ckpt").string();
  save_checkpoint(*model, res.checkpoint_path);
  res.history = std::move(hist);
  write_history_csv(res.history, (fs::path(run_dir) / "history.csv").string());
  write_steps_csv(res.history, (fs::path(run_dir) / "steps.csv").string());
  return res;
}

std::vector<ModelPtr> load_frozen(const std::vector<std::string>& paths) {
  std::vector<ModelPtr> teachers;
  for (const std::string& p : paths) {
    ModelPtr t = load_checkpoint(p);
    t->set_trainable(false);
    teachers.push_back(std::move(t));
  }
  return teachers;
}

}  // namespace

TrainResult train_teacher(const ModelPtr& model, const Manifest& train, const Manifest& val,
                          const TrainConfig& cfg, const std::string& run_dir) {
  return run_training(model, {}, train, val, cfg, run_dir);
}

TrainResult distill_mono(const ModelPtr& student, const std::string& teacher_ckpt,
                         const Manifest& train, const Manifest& val, const TrainConfig& cfg,
                         const std::string& run_dir) {
  return run_training(student, load_frozen({teacher_ckpt}), train, val, cfg, run_dir);
}

TrainResult distill_multi(const ModelPtr& student, const std::vector<std::string>& teacher_ckpts,
                          const Manifest& train, const Manifest& val, const TrainConfig& cfg,
                          const std::string& run_dir) {
  if (teacher_ckpts.empty()) throw std::invalid_argument("distill_multi: need >= 1 teacher checkpoint");
  return run_training(student, load_frozen(teacher_ckpts), train, val, cfg, run_dir);
}

void write_history_csv(const RunHistory& h, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("write_history_csv: cannot write '" + path + "'");
  out << "epoch,seg,mid,kl,total,val_dice,lr\n";
  char buf[256];
  for (const EpochRecord& e : h.epochs) {
    std::snprintf(buf, sizeof(buf), "%d,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n", e.epoch, e.seg,
                  e.mid, e.kl, e.total, e.val_dice, e.lr);
    out << buf;
  }
}

void write_steps_csv(const RunHistory& h, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("write_steps_csv: cannot write '" + path + "'");
  const std::size_t n_teachers = h.steps.empty() ? 0 : h.steps.front().teacher_weights.size();
  out << "step,seg,mid,kl,total,lr";
  for (std::size_t j = 0; j < n_teachers; ++j) out << ",w" << (j + 1) << ",d" << (j + 1);
  out << "\n";
  char buf[128];
  for (const StepRecord& s : h.steps) {
    std::snprintf(buf, sizeof(buf), "%d,%.17g,%.17g,%.17g,%.17g,%.17g", s.step, s.seg, s.mid, s.kl,
                  s.total, s.lr);
    out << buf;
    for (std::size_t j = 0; j < s.teacher_weights.size(); ++j) {
      std::snprintf(buf, sizeof(buf), ",%.17g,%.17g", s.teacher_weights[j], s.teacher_dice[j]);
      out << buf;
    }
    out << "\n";
  }
}

}  // namespace kd
