#include "kd/tensor.hpp"

#include <algorithm>
#include <sstream>

namespace kd {

std::string shape_str(const std::vector<int>& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << "]";
  return os.str();
}

namespace detail {

using Axis = BilinearAxis;

// Half-pixel-center source coordinates, clamped to the valid range.
Axis bilinear_axis(int in, int out) {
  Axis a;
  a.lo.resize(static_cast<std::size_t>(out));
  a.hi.resize(static_cast<std::size_t>(out));
  a.w_hi.resize(static_cast<std::size_t>(out));
  const double scale = static_cast<double>(in) / out;
  for (int o = 0; o < out; ++o) {
    double src = (o + 0.5) * scale - 0.5;
    if (src < 0) src = 0;
    if (src > in - 1) src = in - 1;
    int lo = static_cast<int>(std::floor(src));
    int hi = std::min(lo + 1, in - 1);
    a.lo[static_cast<std::size_t>(o)] = lo;
    a.hi[static_cast<std::size_t>(o)] = hi;
    a.w_hi[static_cast<std::size_t>(o)] = src - lo;
  }
  return a;
}

}  // namespace detail

Tensor resize_bilinear(const Tensor& src, int out_h, int out_w) {
  using detail::Axis;
  using detail::bilinear_axis;
  if (src.ndim() < 2) throw std::invalid_argument("resize_bilinear: need >= 2 dims");
  if (out_h < 1 || out_w < 1) throw std::invalid_argument("resize_bilinear: non-positive target size");
  const int in_h = src.dim(src.ndim() - 2);
  const int in_w = src.dim(src.ndim() - 1);
  std::vector<int> out_shape = src.shape();
  out_shape[out_shape.size() - 2] = out_h;
  out_shape[out_shape.size() - 1] = out_w;
  if (in_h == out_h && in_w == out_w) return Tensor(out_shape, src.vec());

  const std::int64_t planes = src.numel() / (static_cast<std::int64_t>(in_h) * in_w);
  Tensor dst(out_shape);
  const Axis ay = bilinear_axis(in_h, out_h);
  const Axis ax = bilinear_axis(in_w, out_w);
  for (std::int64_t p = 0; p < planes; ++p) {
    const double* s = src.data() + p * in_h * in_w;
    double* d = dst.data() + p * static_cast<std::int64_t>(out_h) * out_w;
    for (int y = 0; y < out_h; ++y) {
      const double wy = ay.w_hi[static_cast<std::size_t>(y)];
      const double* r0 = s + static_cast<std::int64_t>(ay.lo[static_cast<std::size_t>(y)]) * in_w;
      const double* r1 = s + static_cast<std::int64_t>(ay.hi[static_cast<std::size_t>(y)]) * in_w;
      for (int x = 0; x < out_w; ++x) {
        const double wx = ax.w_hi[static_cast<std::size_t>(x)];
        const int xl = ax.lo[static_cast<std::size_t>(x)], xh = ax.hi[static_cast<std::size_t>(x)];
        const double top = r0[xl] * (1.0 - wx) + r0[xh] * wx;
        const double bot = r1[xl] * (1.0 - wx) + r1[xh] * wx;
        d[static_cast<std::int64_t>(y) * out_w + x] = top * (1.0 - wy) + bot * wy;
      }
    }
  }
  return dst;
}

Tensor resize_nearest(const Tensor& src, int out_h, int out_w) {
  if (src.ndim() < 2) throw std::invalid_argument("resize_nearest: need >= 2 dims");
  if (out_h < 1 || out_w < 1) throw std::invalid_argument("resize_nearest: non-positive target size");
  const int in_h = src.dim(src.ndim() - 2);
  const int in_w = src.dim(src.ndim() - 1);
  std::vector<int> out_shape = src.shape();
  out_shape[out_shape.size() - 2] = out_h;
  out_shape[out_shape.size() - 1] = out_w;
  if (in_h == out_h && in_w == out_w) return Tensor(out_shape, src.vec());

  const std::int64_t planes = src.numel() / (static_cast<std::int64_t>(in_h) * in_w);
  Tensor dst(out_shape);
  std::vector<int> sy(static_cast<std::size_t>(out_h)), sx(static_cast<std::size_t>(out_w));
  for (int y = 0; y < out_h; ++y)
    sy[static_cast<std::size_t>(y)] = std::min(in_h - 1, static_cast<int>(std::floor((y + 0.5) * in_h / out_h)));
  for (int x = 0; x < out_w; ++x)
    sx[static_cast<std::size_t>(x)] = std::min(in_w - 1, static_cast<int>(std::floor((x + 0.5) * in_w / out_w)));
  for (std::int64_t p = 0; p < planes; ++p) {
    const double* s = src.data() + p * in_h * in_w;
    double* d = dst.data() + p * static_cast<std::int64_t>(out_h) * out_w;
    for (int y = 0; y < out_h; ++y)
      for (int x = 0; x < out_w; ++x)
        d[static_cast<std::int64_t>(y) * out_w + x] =
            s[static_cast<std::int64_t>(sy[static_cast<std::size_t>(y)]) * in_w + sx[static_cast<std::size_t>(x)]];
  }
  return dst;
}

}  // namespace kd
