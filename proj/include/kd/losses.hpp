#pragma once

#include <vector>

#include "kd/autograd.hpp"

namespace kd {

// Coefficients of the distillation objective:
//   total = alpha1*dice + alpha2*lovasz + alpha*mid + beta*kl
struct LossWeights {
  double alpha1 = 0.2;       // Dice coefficient
  double alpha2 = 0.3;       // Lovasz coefficient
  double alpha = 0.1;        // Mid (feature) coefficient
  double beta = 0.1;         // KL (prediction) coefficient
  double temperature = 2.0;  // softmax temperature

  // KL(student || teacher) as published; flag flips to the conventional order.
  bool kl_reversed = false;
  // Optional lambda^2 rescaling of the KL term (off: not part of the published loss).
  bool kl_temperature_sq = false;

  void validate() const;
};

inline constexpr double kDiceSmooth = 1e-5;
inline constexpr double kKlClamp = 1e-8;

// [B,C,H,W], entries in [0,1], channel sums 1 within tol.
void check_probability_map(const Tensor& probs, double tol = 1e-6);
// [B,H,W] with entries in {0,1}.
void check_binary_mask(const Tensor& mask);

// q_i = exp(z_i/T) / sum_j exp(z_j/T), per pixel, max-subtracted.
Var softened_softmax(const Var& logits, double temperature);

// Mean over batch and pixels of KL(softmax(student/T) || teacher).
Var kl_distillation_loss(const Var& student_logits, const Tensor& teacher_probs, double temperature,
                         bool reversed = false);

// 1 - (2*sum(p_fg*y)+eps)/(sum(p_fg)+sum(y)+eps), per sample, batch mean.
Var soft_dice_loss(const Var& probs, const Tensor& target);
double soft_dice_loss_value(const Tensor& probs, const Tensor& target);

// Gradient of the Jaccard loss set function along a descending-error ordering.
std::vector<double> jaccard_increments(const std::vector<double>& sorted_labels);

// Lovasz extension of the Jaccard loss; classes present per sample, batch mean.
Var lovasz_softmax_loss(const Var& probs, const Tensor& target);
// Single (sample, class) term; oracle/test surface.
double lovasz_class_loss(const Tensor& probs, const Tensor& target, int sample, int cls);

Var segmentation_loss(const Var& probs, const Tensor& target, const LossWeights& w);

Var kd_total_loss(const Var& seg, const Var& mid, const Var& kl, const LossWeights& w);

}  // namespace kd
