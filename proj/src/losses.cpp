#include "kd/losses.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace kd {

void LossWeights::validate() const {
  if (alpha1 < 0 || alpha2 < 0 || alpha < 0 || beta < 0)
    throw std::invalid_argument("LossWeights: coefficients must be nonnegative");
  if (!(temperature > 0)) throw std::invalid_argument("LossWeights: temperature must be positive");
}

void check_probability_map(const Tensor& probs, double tol) {
  const auto& s = probs.shape();
  if (s.size() != 4) throw std::invalid_argument("probability map: need [B,C,H,W], got " + shape_str(s));
  const int c = s[1];
  if (c < 2) throw std::invalid_argument("probability map: C must be >= 2");
  const std::int64_t plane = static_cast<std::int64_t>(s[2]) * s[3];
  for (int b = 0; b < s[0]; ++b) {
    const double* p = probs.data() + static_cast<std::int64_t>(b) * c * plane;
    for (std::int64_t i = 0; i < plane; ++i) {
      double sum = 0;
      for (int ci = 0; ci < c; ++ci) {
        const double v = p[ci * plane + i];
        if (!(v >= 0.0 && v <= 1.0 + tol))
          throw std::invalid_argument("probability map: entry out of [0,1]");
        sum += v;
      }
      if (std::abs(sum - 1.0) > tol)
        throw std::invalid_argument("probability map: channel sums differ from 1");
    }
  }
}

void check_binary_mask(const Tensor& mask) {
  if (mask.ndim() != 3) throw std::invalid_argument("binary mask: need [B,H,W], got " + shape_str(mask.shape()));
  for (std::int64_t i = 0; i < mask.numel(); ++i)
    if (mask[i] != 0.0 && mask[i] != 1.0)
      throw std::invalid_argument("binary mask: entries must be exactly 0 or 1");
}

Var softened_softmax(const Var& logits, double temperature) {
  if (!(temperature > 0)) throw std::invalid_argument("softened_softmax: temperature must be positive");
  if (!all_finite(logits->value)) throw std::invalid_argument("softened_softmax: non-finite logits");
  return softmax_channels(logits, temperature);
}

Var kl_distillation_loss(const Var& student_logits, const Tensor& teacher_probs, double temperature,
                         bool reversed) {
  if (!(temperature > 0)) throw std::invalid_argument("kl_distillation_loss: temperature must be positive");
  if (!student_logits->value.same_shape(teacher_probs))
    throw std::invalid_argument("kl_distillation_loss: shape mismatch");
  check_probability_map(teacher_probs);

  const auto& s = student_logits->value.shape();
  const int batch = s[0], c = s[1];
  const std::int64_t plane = static_cast<std::int64_t>(s[2]) * s[3];
  const double norm = 1.0 / (static_cast<double>(batch) * static_cast<double>(plane));

  Var p_s = softmax_channels(student_logits, temperature);
  double total = 0;
  // per-pixel KL kept for the backward pass
  Tensor pixel_kl({batch, s[2], s[3]});
  for (int b = 0; b < batch; ++b) {
    const double* ps = p_s->value.data() + static_cast<std::int64_t>(b) * c * plane;
    const double* pt = teacher_probs.data() + static_cast<std::int64_t>(b) * c * plane;
    double* kl = pixel_kl.data() + static_cast<std::int64_t>(b) * plane;
    for (std::int64_t i = 0; i < plane; ++i) {
      double v = 0;
      for (int ci = 0; ci < c; ++ci) {
        const double qs = ps[ci * plane + i];
        const double qt = std::max(pt[ci * plane + i], kKlClamp);
        if (!reversed) {
          if (qs > 0) v += qs * (std::log(qs) - std::log(qt));
        } else {
          v += qt * (std::log(qt) - std::log(std::max(qs, kKlClamp)));
        }
      }
      kl[i] = v;
      total += v;
    }
  }
  Var r = make_var(Tensor::scalar(total * norm), p_s->requires_grad);
  if (!r->requires_grad) return r;
  r->parents = {p_s};
  Tensor teacher = teacher_probs;  // captured copy, frozen
  r->backprop = [batch, c, plane, norm, reversed, teacher = std::move(teacher),
                 pixel_kl = std::move(pixel_kl)](VarNode& n) {
    // chain rule into the softmax node's probability grad
    const double g = n.grad[0] * norm;
    auto& gp = n.parents[0]->ensure_grad();
    const Tensor& ps = n.parents[0]->value;
    for (int b = 0; b < batch; ++b) {
      const double* p = ps.data() + static_cast<std::int64_t>(b) * c * plane;
      const double* pt = teacher.data() + static_cast<std::int64_t>(b) * c * plane;
      double* gpp = gp.data() + static_cast<std::int64_t>(b) * c * plane;
      for (std::int64_t i = 0; i < plane; ++i) {
        for (int ci = 0; ci < c; ++ci) {
          const double qs = p[ci * plane + i];
          const double qt = std::max(pt[ci * plane + i], kKlClamp);
          double d;
          if (!reversed) {
            // d/dq of q ln(q/qt) = ln(q/qt) + 1
            d = (qs > 0 ? std::log(qs / qt) + 1.0 : 1.0 + std::log(kKlClamp / qt));
          } else {
            d = -qt / std::max(qs, kKlClamp);
          }
          gpp[ci * plane + i] += g * d;
        }
      }
    }
  };
  return r;
}

namespace {

void check_probs_vs_mask(const Tensor& probs, const Tensor& target, const char* op) {
  const auto& s = probs.shape();
  if (s.size() != 4) throw std::invalid_argument(std::string(op) + ": probs must be [B,C,H,W]");
  const auto& ts = target.shape();
  if (ts.size() != 3 || ts[0] != s[0] || ts[1] != s[2] || ts[2] != s[3])
    throw std::invalid_argument(std::string(op) + ": target shape mismatch " + shape_str(ts) +
                                " vs probs " + shape_str(s));
}

}  // namespace

Var soft_dice_loss(const Var& probs, const Tensor& target) {
  check_probs_vs_mask(probs->value, target, "soft_dice_loss");
  check_binary_mask(target);
  const auto& s = probs->value.shape();
  const int batch = s[0], c = s[1];
  const std::int64_t plane = static_cast<std::int64_t>(s[2]) * s[3];
  const int fg = 1;  // foreground channel

  std::vector<double> inter(static_cast<std::size_t>(batch)), uni(static_cast<std::size_t>(batch));
  double loss = 0;
  for (int b = 0; b < batch; ++b) {
    const double* p = probs->value.data() + (static_cast<std::int64_t>(b) * c + fg) * plane;
    const double* y = target.data() + static_cast<std::int64_t>(b) * plane;
    double i2 = 0, u = 0;
    for (std::int64_t i = 0; i < plane; ++i) {
      i2 += p[i] * y[i];
      u += p[i] + y[i];
    }
    inter[static_cast<std::size_t>(b)] = i2;
    uni[static_cast<std::size_t>(b)] = u;
    loss += 1.0 - (2.0 * i2 + kDiceSmooth) / (u + kDiceSmooth);
  }
  loss /= batch;

  Var r = make_var(Tensor::scalar(loss), probs->requires_grad);
  if (!r->requires_grad) return r;
  r->parents = {probs};
  Tensor tgt = target;
  r->backprop = [batch, c, plane, fg, inter = std::move(inter), uni = std::move(uni),
                 tgt = std::move(tgt)](VarNode& n) {
    const double g = n.grad[0] / batch;
    auto& gp = n.parents[0]->ensure_grad();
    for (int b = 0; b < batch; ++b) {
      const double* y = tgt.data() + static_cast<std::int64_t>(b) * plane;
      double* gpp = gp.data() + (static_cast<std::int64_t>(b) * c + fg) * plane;
      const double num = 2.0 * inter[static_cast<std::size_t>(b)] + kDiceSmooth;
      const double den = uni[static_cast<std::size_t>(b)] + kDiceSmooth;
      for (std::int64_t i = 0; i < plane; ++i)
        gpp[i] += g * (-(2.0 * y[i] * den - num) / (den * den));
    }
  };
  return r;
}

double soft_dice_loss_value(const Tensor& probs, const Tensor& target) {
  return soft_dice_loss(constant(probs), target)->value.item();
}

std::vector<double> jaccard_increments(const std::vector<double>& sorted_labels) {
  if (sorted_labels.empty()) throw std::invalid_argument("jaccard_increments: empty label vector");
  double total = 0;
  for (double v : sorted_labels) {
    if (v != 0.0 && v != 1.0) throw std::invalid_argument("jaccard_increments: labels must be 0/1");
    total += v;
  }
  std::vector<double> g(sorted_labels.size(), 0.0);
  if (total == 0) return g;  // no foreground, zero contribution
  double cum_fg = 0, cum_bg = 0, prev = 0;
  for (std::size_t k = 0; k < sorted_labels.size(); ++k) {
    cum_fg += sorted_labels[k];
    cum_bg += 1.0 - sorted_labels[k];
    const double inter = total - cum_fg;
    const double uni = total + cum_bg;
    const double j = 1.0 - inter / uni;
    g[k] = j - prev;
    prev = j;
  }
  return g;
}

namespace {

// One (sample, class) Lovasz term plus the data needed to backpropagate it.
struct LovaszTerm {
  int sample = 0;
  int cls = 0;
  double loss = 0;
  std::vector<std::int64_t> perm;  // descending-error pixel order
  std::vector<double> grad_coeff;  // d loss / d p_cls at each sorted position
};

LovaszTerm lovasz_term(const Tensor& probs, const Tensor& target, int b, int cls) {
  const auto& s = probs.shape();
  const int c = s[1];
  const std::int64_t plane = static_cast<std::int64_t>(s[2]) * s[3];
  const double* p = probs.data() + (static_cast<std::int64_t>(b) * c + cls) * plane;
  const double* y = target.data() + static_cast<std::int64_t>(b) * plane;

  std::vector<double> err(static_cast<std::size_t>(plane));
  std::vector<double> lbl(static_cast<std::size_t>(plane));
  for (std::int64_t i = 0; i < plane; ++i) {
    lbl[static_cast<std::size_t>(i)] = (y[i] == cls) ? 1.0 : 0.0;
    err[static_cast<std::size_t>(i)] = std::abs(lbl[static_cast<std::size_t>(i)] - p[i]);
  }
  LovaszTerm t;
  t.sample = b;
  t.cls = cls;
  t.perm.resize(static_cast<std::size_t>(plane));
  std::iota(t.perm.begin(), t.perm.end(), 0);
  std::stable_sort(t.perm.begin(), t.perm.end(), [&](std::int64_t a, std::int64_t bb) {
    return err[static_cast<std::size_t>(a)] > err[static_cast<std::size_t>(bb)];
  });
  std::vector<double> sorted_lbl(static_cast<std::size_t>(plane));
  for (std::size_t k = 0; k < t.perm.size(); ++k)
    sorted_lbl[k] = lbl[static_cast<std::size_t>(t.perm[k])];
  const std::vector<double> g = jaccard_increments(sorted_lbl);
  t.grad_coeff.resize(static_cast<std::size_t>(plane));
  for (std::size_t k = 0; k < t.perm.size(); ++k) {
    t.loss += err[static_cast<std::size_t>(t.perm[k])] * g[k];
    // d err / d p = -1 on foreground pixels, +1 on background pixels
    t.grad_coeff[k] = (sorted_lbl[k] == 1.0 ? -1.0 : 1.0) * g[k];
  }
  return t;
}

std::vector<int> present_classes(const Tensor& target, int b, int c) {
  const std::int64_t plane = static_cast<std::int64_t>(target.dim(1)) * target.dim(2);
  const double* y = target.data() + static_cast<std::int64_t>(b) * plane;
  std::vector<char> seen(static_cast<std::size_t>(c), 0);
  for (std::int64_t i = 0; i < plane; ++i) {
    const int v = static_cast<int>(y[i]);
    if (v >= 0 && v < c) seen[static_cast<std::size_t>(v)] = 1;
  }
  std::vector<int> out;
  for (int ci = 0; ci < c; ++ci)
    if (seen[static_cast<std::size_t>(ci)]) out.push_back(ci);
  return out;
}

}  // namespace

double lovasz_class_loss(const Tensor& probs, const Tensor& target, int sample, int cls) {
  check_probs_vs_mask(probs, target, "lovasz_class_loss");
  return lovasz_term(probs, target, sample, cls).loss;
}

Var lovasz_softmax_loss(const Var& probs, const Tensor& target) {
  check_probs_vs_mask(probs->value, target, "lovasz_softmax_loss");
  check_binary_mask(target);
  const auto& s = probs->value.shape();
  const int batch = s[0], c = s[1];
  const std::int64_t plane = static_cast<std::int64_t>(s[2]) * s[3];

  std::vector<LovaszTerm> terms;
  std::vector<double> term_scale;
  double loss = 0;
  for (int b = 0; b < batch; ++b) {
    const std::vector<int> classes = present_classes(target, b, c);
    const double inv = 1.0 / (static_cast<double>(batch) * static_cast<double>(classes.size()));
    for (int cls : classes) {
      LovaszTerm t = lovasz_term(probs->value, target, b, cls);
      loss += t.loss * inv;
      terms.push_back(std::move(t));
      term_scale.push_back(inv);
    }
  }

  Var r = make_var(Tensor::scalar(loss), probs->requires_grad);
  if (!r->requires_grad) return r;
  r->parents = {probs};
  r->backprop = [c, plane, terms = std::move(terms), term_scale = std::move(term_scale)](VarNode& n) {
    const double g = n.grad[0];
    auto& gp = n.parents[0]->ensure_grad();
    for (std::size_t ti = 0; ti < terms.size(); ++ti) {
      const LovaszTerm& t = terms[ti];
      double* gpp = gp.data() + (static_cast<std::int64_t>(t.sample) * c + t.cls) * plane;
      const double sc = g * term_scale[ti];
      for (std::size_t k = 0; k < t.perm.size(); ++k)
        gpp[t.perm[k]] += sc * t.grad_coeff[k];
    }
  };
  return r;
}

Var segmentation_loss(const Var& probs, const Tensor& target, const LossWeights& w) {
  w.validate();
  return add(scale(soft_dice_loss(probs, target), w.alpha1),
             scale(lovasz_softmax_loss(probs, target), w.alpha2));
}

Var kd_total_loss(const Var& seg, const Var& mid, const Var& kl, const LossWeights& w) {
  w.validate();
  if (!std::isfinite(seg->value.item()) || !std::isfinite(mid->value.item()) ||
      !std::isfinite(kl->value.item()))
    throw std::invalid_argument("kd_total_loss: non-finite component loss");
  return add(seg, add(scale(mid, w.alpha), scale(kl, w.beta)));
}

}  // namespace kd
