#pragma once

#include <cassert>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace kd {

// Dense row-major tensor of doubles. Layouts used throughout:
// images/logits/features [B,C,H,W], masks and importance maps [B,H,W].
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
    data_.assign(static_cast<std::size_t>(count(shape_)), 0.0);
  }
  Tensor(std::vector<int> shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (static_cast<std::int64_t>(data_.size()) != count(shape_))
      throw std::invalid_argument("Tensor: data size does not match shape");
  }

  static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }
  static Tensor full(std::vector<int> shape, double v) {
    Tensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), v);
    return t;
  }
  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  const std::vector<int>& shape() const { return shape_; }
  int dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
  int ndim() const { return static_cast<int>(shape_.size()); }
  std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::vector<double>& vec() { return data_; }
  const std::vector<double>& vec() const { return data_; }

  double& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
  double operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

  // 4-d accessor [B,C,H,W]
  double& at(int b, int c, int h, int w) {
    return data_[static_cast<std::size_t>(((static_cast<std::int64_t>(b) * shape_[1] + c) * shape_[2] + h) * shape_[3] + w)];
  }
  double at(int b, int c, int h, int w) const {
    return data_[static_cast<std::size_t>(((static_cast<std::int64_t>(b) * shape_[1] + c) * shape_[2] + h) * shape_[3] + w)];
  }
  // 3-d accessor [B,H,W]
  double& at3(int b, int h, int w) {
    return data_[static_cast<std::size_t>((static_cast<std::int64_t>(b) * shape_[1] + h) * shape_[2] + w)];
  }
  double at3(int b, int h, int w) const {
    return data_[static_cast<std::size_t>((static_cast<std::int64_t>(b) * shape_[1] + h) * shape_[2] + w)];
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }
  double item() const {
    if (numel() != 1) throw std::logic_error("Tensor::item on non-scalar");
    return data_[0];
  }

  static std::int64_t count(const std::vector<int>& shape) {
    std::int64_t n = 1;
    for (int d : shape) {
      if (d < 0) throw std::invalid_argument("Tensor: negative dimension");
      n *= d;
    }
    return n;
  }

 private:
  std::vector<int> shape_;
  std::vector<double> data_;
};

inline bool all_finite(const Tensor& t) {
  for (std::int64_t i = 0; i < t.numel(); ++i)
    if (!std::isfinite(t[i])) return false;
  return true;
}

std::string shape_str(const std::vector<int>& shape);

// Bilinear resample of the last two dimensions (half-pixel centers, clamped).
// Works for [B,C,H,W] and [B,H,W]; leading dims are carried through.
Tensor resize_bilinear(const Tensor& src, int out_h, int out_w);

// Nearest-neighbor resample of the last two dimensions; preserves value sets.
Tensor resize_nearest(const Tensor& src, int out_h, int out_w);

namespace detail {
// Per-output-pixel sample pair along one axis; shared by the forward
// resample and its adjoint in the autograd op.
struct BilinearAxis {
  std::vector<int> lo, hi;
  std::vector<double> w_hi;  // weight of hi sample; lo gets 1 - w_hi
};
BilinearAxis bilinear_axis(int in, int out);
}  // namespace detail

}  // namespace kd
