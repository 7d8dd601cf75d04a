#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "kd/tensor.hpp"

namespace kd {

// Reverse-mode tape node. Graphs are rebuilt per training step; parameters
// are long-lived leaf nodes whose grad buffers the optimizer consumes.
struct VarNode {
  Tensor value;
  Tensor grad;  // allocated on first use, same shape as value
  bool requires_grad = false;
  std::vector<std::shared_ptr<VarNode>> parents;
  std::function<void(VarNode&)> backprop;  // accumulates into parents' grads

  Tensor& ensure_grad() {
    if (grad.numel() == 0) grad = Tensor::zeros(value.shape());
    return grad;
  }
};

using Var = std::shared_ptr<VarNode>;

Var make_var(Tensor value, bool requires_grad = false);
inline Var constant(Tensor value) { return make_var(std::move(value), false); }

// Seeds root->grad with ones and propagates through the tape.
void backward(const Var& root);

// Elementwise / scalar ops
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var leaky_relu(const Var& a, double slope = 0.01);
Var vsum(const Var& a);   // -> scalar
Var vmean(const Var& a);  // -> scalar

// NCHW ops
Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad);
Var upsample_bilinear(const Var& x, int out_h, int out_w);
Var concat_channels(const Var& a, const Var& b);
// Per-pixel softmax over the channel dim of logits/temperature (Eq.-1 form).
Var softmax_channels(const Var& logits, double temperature);

// Per-leading-slice L2 normalization over the last two dims; all-zero
// slices pass through unchanged.
Var l2_normalize_spatial(const Var& x);
// Channel-wise sum of squares: [B,C,H,W] -> [B,H,W].
Var channel_sq_sum(const Var& x);
// sum |a - b| -> scalar
Var l1_diff_sum(const Var& a, const Var& b);
// ||a - b||_2 -> scalar
Var l2_diff_norm(const Var& a, const Var& b);

// Central finite differences of f at leaf, for gradient checks.
Tensor finite_difference(const std::function<double()>& f, Tensor& leaf_value, double h = 1e-5);

}  // namespace kd
