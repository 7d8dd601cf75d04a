#pragma once

#include <vector>

#include "kd/feature_distill.hpp"
#include "kd/losses.hpp"
#include "kd/model.hpp"

namespace kd {

// Frozen teacher adapters plus their current adaptive weights.
struct TeacherEnsemble {
  std::vector<ModelPtr> teachers;
  std::vector<double> weights;  // nonnegative, sums to 1

  void validate() const;
};

// w_j = dice_j / sum_k dice_k, computed from each teacher's soft dice loss
// against the hard target. All-perfect teachers fall back to uniform
// weights. With inverse=true, w_j is proportional to 1/dice_j instead.
std::vector<double> adaptive_weights(const std::vector<Tensor>& teacher_probs,
                                     const Tensor& target, bool inverse = false);

// Per-pixel convex combination of teacher distributions.
Tensor combined_teacher_prediction(const std::vector<Tensor>& teacher_probs,
                                   const std::vector<double>& weights);

// sum_j w_j * mid_loss(student, teacher_j) (Eq.-6 structure).
Var multi_mid_loss(const std::vector<FeatureMap>& student_feats,
                   const std::vector<std::vector<FeatureMap>>& teacher_feat_lists,
                   const std::vector<double>& weights, const Tensor& mask,
                   const std::vector<LayerPairing>& pairings);

}  // namespace kd
