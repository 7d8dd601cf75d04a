#include "kd/multi_teacher.hpp"

#include <cmath>
#include <numeric>
#include <stdexcept>

namespace kd {

void TeacherEnsemble::validate() const {
  if (teachers.empty()) throw std::invalid_argument("TeacherEnsemble: need at least one teacher");
  if (weights.size() != teachers.size())
    throw std::invalid_argument("TeacherEnsemble: weight/teacher count mismatch");
  double sum = 0;
  for (double w : weights) {
    if (w < 0) throw std::invalid_argument("TeacherEnsemble: negative weight");
    sum += w;
  }
  if (std::abs(sum - 1.0) > 1e-9)
    throw std::invalid_argument("TeacherEnsemble: weights must sum to 1");
}

std::vector<double> adaptive_weights(const std::vector<Tensor>& teacher_probs, const Tensor& target,
                                     bool inverse) {
  if (teacher_probs.empty()) throw std::invalid_argument("adaptive_weights: empty teacher list");
  const std::size_t n = teacher_probs.size();
  std::vector<double> d(n);
  for (std::size_t j = 0; j < n; ++j) {
    if (!teacher_probs[j].same_shape(teacher_probs[0]))
      throw std::invalid_argument("adaptive_weights: teacher prediction shapes differ");
    d[j] = soft_dice_loss_value(teacher_probs[j], target);
  }
  constexpr double kDegenerate = 1e-12;
  std::vector<double> w(n);
  if (!inverse) {
    const double sum = std::accumulate(d.begin(), d.end(), 0.0);
    if (sum < kDegenerate) {
      std::fill(w.begin(), w.end(), 1.0 / static_cast<double>(n));
      return w;
    }
    for (std::size_t j = 0; j < n; ++j) w[j] = d[j] / sum;
  } else {
    double sum = 0;
    for (std::size_t j = 0; j < n; ++j) {
      w[j] = 1.0 / std::max(d[j], kDegenerate);
      sum += w[j];
    }
    for (std::size_t j = 0; j < n; ++j) w[j] /= sum;
  }
  return w;
}

Tensor combined_teacher_prediction(const std::vector<Tensor>& teacher_probs,
                                   const std::vector<double>& weights) {
  if (teacher_probs.empty()) throw std::invalid_argument("combined_teacher_prediction: empty teacher list");
  if (weights.size() != teacher_probs.size())
    throw std::invalid_argument("combined_teacher_prediction: weight/teacher count mismatch");
  for (const Tensor& p : teacher_probs) check_probability_map(p);

  Tensor out(teacher_probs[0].shape());
  for (std::size_t j = 0; j < teacher_probs.size(); ++j) {
    if (!teacher_probs[j].same_shape(out))
      throw std::invalid_argument("combined_teacher_prediction: shape mismatch");
    const double w = weights[j];
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] += w * teacher_probs[j][i];
  }
  return out;
}

Var multi_mid_loss(const std::vector<FeatureMap>& student_feats,
                   const std::vector<std::vector<FeatureMap>>& teacher_feat_lists,
                   const std::vector<double>& weights, const Tensor& mask,
                   const std::vector<LayerPairing>& pairings) {
  if (teacher_feat_lists.empty()) throw std::invalid_argument("multi_mid_loss: empty teacher list");
  if (weights.size() != teacher_feat_lists.size() || pairings.size() != teacher_feat_lists.size())
    throw std::invalid_argument("multi_mid_loss: teacher/weight/pairing count mismatch");

  Var total;
  for (std::size_t j = 0; j < teacher_feat_lists.size(); ++j) {
    Var term = scale(mid_loss(student_feats, teacher_feat_lists[j], mask, pairings[j]), weights[j]);
    total = total ? add(total, term) : term;
  }
  return total;
}

}  // namespace kd
