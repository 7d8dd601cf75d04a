#include "kd/autograd.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace kd {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

void check_same_shape(const Var& a, const Var& b, const char* op) {
  if (!a->value.same_shape(b->value))
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a->value.shape()) +
                                " vs " + shape_str(b->value.shape()));
}

Var unary(const Var& a, Tensor out, std::function<void(VarNode&)> bp) {
  Var r = make_var(std::move(out), a->requires_grad);
  if (a->requires_grad) {
    r->parents = {a};
    r->backprop = std::move(bp);
  }
  return r;
}

Var binary(const Var& a, const Var& b, Tensor out, std::function<void(VarNode&)> bp) {
  Var r = make_var(std::move(out), a->requires_grad || b->requires_grad);
  if (r->requires_grad) {
    r->parents = {a, b};
    r->backprop = std::move(bp);
  }
  return r;
}

}  // namespace

Var make_var(Tensor value, bool requires_grad) {
  Var v = std::make_shared<VarNode>();
  v->value = std::move(value);
  v->requires_grad = requires_grad;
  return v;
}

void backward(const Var& root) {
  if (root->value.numel() != 1) throw std::logic_error("backward: root must be scalar");
  // iterative post-order DFS
  std::vector<VarNode*> order;
  std::unordered_set<VarNode*> seen;
  std::vector<std::pair<VarNode*, std::size_t>> stack{{root.get(), 0}};
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      VarNode* p = node->parents[idx++].get();
      if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  root->ensure_grad();
  root->grad[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    VarNode* n = *it;
    // grad can legitimately stay unallocated (e.g. an exactly-zero branch
    // upstream wrote nothing); such nodes contribute nothing downstream
    if (n->backprop && n->requires_grad && n->grad.numel() != 0) n->backprop(*n);
  }
}

Var add(const Var& a, const Var& b) {
  check_same_shape(a, b, "add");
  Tensor out = a->value;
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] += b->value[i];
  return binary(a, b, std::move(out), [](VarNode& n) {
    auto& ga = n.parents[0]->ensure_grad();
    auto& gb = n.parents[1]->ensure_grad();
    for (std::int64_t i = 0; i < n.grad.numel(); ++i) {
      if (n.parents[0]->requires_grad) ga[i] += n.grad[i];
      if (n.parents[1]->requires_grad) gb[i] += n.grad[i];
    }
  });
}

Var sub(const Var& a, const Var& b) {
  check_same_shape(a, b, "sub");
  Tensor out = a->value;
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] -= b->value[i];
  return binary(a, b, std::move(out), [](VarNode& n) {
    auto& ga = n.parents[0]->ensure_grad();
    auto& gb = n.parents[1]->ensure_grad();
    for (std::int64_t i = 0; i < n.grad.numel(); ++i) {
      if (n.parents[0]->requires_grad) ga[i] += n.grad[i];
      if (n.parents[1]->requires_grad) gb[i] -= n.grad[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  check_same_shape(a, b, "mul");
  Tensor out = a->value;
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] *= b->value[i];
  return binary(a, b, std::move(out), [](VarNode& n) {
    auto& va = n.parents[0]->value;
    auto& vb = n.parents[1]->value;
    auto& ga = n.parents[0]->ensure_grad();
    auto& gb = n.parents[1]->ensure_grad();
    for (std::int64_t i = 0; i < n.grad.numel(); ++i) {
      if (n.parents[0]->requires_grad) ga[i] += n.grad[i] * vb[i];
      if (n.parents[1]->requires_grad) gb[i] += n.grad[i] * va[i];
    }
  });
}

Var scale(const Var& a, double s) {
  Tensor out = a->value;
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] *= s;
  return unary(a, std::move(out), [s](VarNode& n) {
    auto& ga = n.parents[0]->ensure_grad();
    for (std::int64_t i = 0; i < n.grad.numel(); ++i) ga[i] += s * n.grad[i];
  });
}

Var leaky_relu(const Var& a, double slope) {
  Tensor out = a->value;
  for (std::int64_t i = 0; i < out.numel(); ++i)
    if (out[i] < 0) out[i] *= slope;
  return unary(a, std::move(out), [slope](VarNode& n) {
    auto& va = n.parents[0]->value;
    auto& ga = n.parents[0]->ensure_grad();
    for (std::int64_t i = 0; i < n.grad.numel(); ++i)
      ga[i] += n.grad[i] * (va[i] >= 0 ? 1.0 : slope);
  });
}

Var vsum(const Var& a) {
  double s = 0;
  for (std::int64_t i = 0; i < a->value.numel(); ++i) s += a->value[i];
  return unary(a, Tensor::scalar(s), [](VarNode& n) {
    auto& ga = n.parents[0]->ensure_grad();
    const double g = n.grad[0];
    for (std::int64_t i = 0; i < ga.numel(); ++i) ga[i] += g;
  });
}

Var vmean(const Var& a) { return scale(vsum(a), 1.0 / static_cast<double>(a->value.numel())); }

// ---------------------------------------------------------------------------
// conv2d via im2col + GEMM

namespace {

void im2col(const double* x, int c_in, int h, int w, int k, int stride, int pad, int ho, int wo,
            double* col) {
  // col layout: [c_in*k*k, ho*wo]
  for (int c = 0; c < c_in; ++c) {
    const double* xc = x + static_cast<std::int64_t>(c) * h * w;
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        double* row = col + (static_cast<std::int64_t>(c) * k * k + ky * k + kx) * ho * wo;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) {
            std::fill(row + static_cast<std::int64_t>(oy) * wo, row + static_cast<std::int64_t>(oy + 1) * wo, 0.0);
            continue;
          }
          const double* xr = xc + static_cast<std::int64_t>(iy) * w;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * stride - pad + kx;
            row[static_cast<std::int64_t>(oy) * wo + ox] = (ix >= 0 && ix < w) ? xr[ix] : 0.0;
          }
        }
      }
    }
  }
}

void col2im_add(const double* col, int c_in, int h, int w, int k, int stride, int pad, int ho,
                int wo, double* x) {
  for (int c = 0; c < c_in; ++c) {
    double* xc = x + static_cast<std::int64_t>(c) * h * w;
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const double* row = col + (static_cast<std::int64_t>(c) * k * k + ky * k + kx) * ho * wo;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) continue;
          double* xr = xc + static_cast<std::int64_t>(iy) * w;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < w) xr[ix] += row[static_cast<std::int64_t>(oy) * wo + ox];
          }
        }
      }
    }
  }
}

}  // namespace

Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad) {
  const auto& xs = x->value.shape();
  const auto& ws = w->value.shape();
  if (xs.size() != 4 || ws.size() != 4) throw std::invalid_argument("conv2d: need 4-d input and weight");
  const int batch = xs[0], c_in = xs[1], h = xs[2], wd = xs[3];
  const int c_out = ws[0], k = ws[2];
  if (ws[1] != c_in || ws[3] != k) throw std::invalid_argument("conv2d: weight shape mismatch");
  if (b->value.numel() != c_out) throw std::invalid_argument("conv2d: bias size mismatch");
  const int ho = (h + 2 * pad - k) / stride + 1;
  const int wo = (wd + 2 * pad - k) / stride + 1;
  if (ho < 1 || wo < 1) throw std::invalid_argument("conv2d: empty output");
  const std::int64_t kk = static_cast<std::int64_t>(c_in) * k * k;
  const std::int64_t pix = static_cast<std::int64_t>(ho) * wo;

  Tensor out({batch, c_out, ho, wo});
  std::vector<double> col(static_cast<std::size_t>(kk * pix));
  CMapMat wm(w->value.data(), c_out, kk);
  for (int bi = 0; bi < batch; ++bi) {
    im2col(x->value.data() + static_cast<std::int64_t>(bi) * c_in * h * wd, c_in, h, wd, k, stride,
           pad, ho, wo, col.data());
    CMapMat cm(col.data(), kk, pix);
    MapMat om(out.data() + static_cast<std::int64_t>(bi) * c_out * pix, c_out, pix);
    om.noalias() = wm * cm;
    for (int c = 0; c < c_out; ++c) om.row(c).array() += b->value[c];
  }

  Var r = make_var(std::move(out), x->requires_grad || w->requires_grad || b->requires_grad);
  if (!r->requires_grad) return r;
  r->parents = {x, w, b};
  r->backprop = [stride, pad, batch, c_in, h, wd, c_out, k, ho, wo, kk, pix](VarNode& n) {
    VarNode& xn = *n.parents[0];
    VarNode& wn = *n.parents[1];
    VarNode& bn = *n.parents[2];
    std::vector<double> col(static_cast<std::size_t>(kk * pix));
    std::vector<double> dcol(static_cast<std::size_t>(kk * pix));
    CMapMat wm(wn.value.data(), c_out, kk);
    for (int bi = 0; bi < batch; ++bi) {
      CMapMat gm(n.grad.data() + static_cast<std::int64_t>(bi) * c_out * pix, c_out, pix);
      if (wn.requires_grad || bn.requires_grad) {
        if (wn.requires_grad) {
          im2col(xn.value.data() + static_cast<std::int64_t>(bi) * c_in * h * wd, c_in, h, wd, k,
                 stride, pad, ho, wo, col.data());
          CMapMat cm(col.data(), kk, pix);
          MapMat gwm(wn.ensure_grad().data(), c_out, kk);
          gwm.noalias() += gm * cm.transpose();
        }
        if (bn.requires_grad) {
          auto& gb = bn.ensure_grad();
          // fixed-order accumulation: Eigen's redux order depends on buffer
          // alignment, which would break byte-identical reruns
          for (int c = 0; c < c_out; ++c) {
            const double* g = n.grad.data() + (static_cast<std::int64_t>(bi) * c_out + c) * pix;
            double s = 0.0;
            for (std::int64_t i = 0; i < pix; ++i) s += g[i];
            gb[c] += s;
          }
        }
      }
      if (xn.requires_grad) {
        MapMat dcm(dcol.data(), kk, pix);
        dcm.noalias() = wm.transpose() * gm;
        col2im_add(dcol.data(), c_in, h, wd, k, stride, pad, ho, wo,
                   xn.ensure_grad().data() + static_cast<std::int64_t>(bi) * c_in * h * wd);
      }
    }
  };
  return r;
}

Var upsample_bilinear(const Var& x, int out_h, int out_w) {
  if (out_h < 1 || out_w < 1) throw std::invalid_argument("upsample_bilinear: non-positive target size");
  const int in_h = x->value.dim(x->value.ndim() - 2);
  const int in_w = x->value.dim(x->value.ndim() - 1);
  Tensor out = resize_bilinear(x->value, out_h, out_w);
  return unary(x, std::move(out), [in_h, in_w, out_h, out_w](VarNode& n) {
    auto& gx = n.parents[0]->ensure_grad();
    const auto ay = detail::bilinear_axis(in_h, out_h);
    const auto ax = detail::bilinear_axis(in_w, out_w);
    const std::int64_t planes = gx.numel() / (static_cast<std::int64_t>(in_h) * in_w);
    for (std::int64_t p = 0; p < planes; ++p) {
      double* g = gx.data() + p * in_h * in_w;
      const double* go = n.grad.data() + p * static_cast<std::int64_t>(out_h) * out_w;
      for (int y = 0; y < out_h; ++y) {
        const double wy = ay.w_hi[static_cast<std::size_t>(y)];
        const int yl = ay.lo[static_cast<std::size_t>(y)], yh = ay.hi[static_cast<std::size_t>(y)];
        for (int xo = 0; xo < out_w; ++xo) {
          const double wx = ax.w_hi[static_cast<std::size_t>(xo)];
          const int xl = ax.lo[static_cast<std::size_t>(xo)], xh = ax.hi[static_cast<std::size_t>(xo)];
          const double gv = go[static_cast<std::int64_t>(y) * out_w + xo];
          g[static_cast<std::int64_t>(yl) * in_w + xl] += gv * (1 - wy) * (1 - wx);
          g[static_cast<std::int64_t>(yl) * in_w + xh] += gv * (1 - wy) * wx;
          g[static_cast<std::int64_t>(yh) * in_w + xl] += gv * wy * (1 - wx);
          g[static_cast<std::int64_t>(yh) * in_w + xh] += gv * wy * wx;
        }
      }
    }
  });
}

Var concat_channels(const Var& a, const Var& b) {
  const auto& as = a->value.shape();
  const auto& bs = b->value.shape();
  if (as.size() != 4 || bs.size() != 4 || as[0] != bs[0] || as[2] != bs[2] || as[3] != bs[3])
    throw std::invalid_argument("concat_channels: incompatible shapes");
  const int batch = as[0], ca = as[1], cb = bs[1], h = as[2], w = as[3];
  const std::int64_t plane = static_cast<std::int64_t>(h) * w;
  Tensor out({batch, ca + cb, h, w});
  for (int bi = 0; bi < batch; ++bi) {
    std::copy_n(a->value.data() + static_cast<std::int64_t>(bi) * ca * plane, ca * plane,
                out.data() + static_cast<std::int64_t>(bi) * (ca + cb) * plane);
    std::copy_n(b->value.data() + static_cast<std::int64_t>(bi) * cb * plane, cb * plane,
                out.data() + static_cast<std::int64_t>(bi) * (ca + cb) * plane + ca * plane);
  }
  return binary(a, b, std::move(out), [batch, ca, cb, plane](VarNode& n) {
    for (int bi = 0; bi < batch; ++bi) {
      const double* g = n.grad.data() + static_cast<std::int64_t>(bi) * (ca + cb) * plane;
      if (n.parents[0]->requires_grad) {
        double* ga = n.parents[0]->ensure_grad().data() + static_cast<std::int64_t>(bi) * ca * plane;
        for (std::int64_t i = 0; i < ca * plane; ++i) ga[i] += g[i];
      }
      if (n.parents[1]->requires_grad) {
        double* gb = n.parents[1]->ensure_grad().data() + static_cast<std::int64_t>(bi) * cb * plane;
        for (std::int64_t i = 0; i < cb * plane; ++i) gb[i] += g[ca * plane + i];
      }
    }
  });
}

Var softmax_channels(const Var& logits, double temperature) {
  if (!(temperature > 0)) throw std::invalid_argument("softmax_channels: temperature must be positive");
  const auto& s = logits->value.shape();
  if (s.size() != 4) throw std::invalid_argument("softmax_channels: need [B,C,H,W]");
  const int batch = s[0], c = s[1], h = s[2], w = s[3];
  const std::int64_t plane = static_cast<std::int64_t>(h) * w;
  Tensor out(s);
  for (int bi = 0; bi < batch; ++bi) {
    const double* z = logits->value.data() + static_cast<std::int64_t>(bi) * c * plane;
    double* q = out.data() + static_cast<std::int64_t>(bi) * c * plane;
    for (std::int64_t p = 0; p < plane; ++p) {
      double mx = z[p];
      for (int ci = 1; ci < c; ++ci) mx = std::max(mx, z[ci * plane + p]);
      double denom = 0;
      for (int ci = 0; ci < c; ++ci) {
        const double e = std::exp((z[ci * plane + p] - mx) / temperature);
        q[ci * plane + p] = e;
        denom += e;
      }
      for (int ci = 0; ci < c; ++ci) q[ci * plane + p] /= denom;
    }
  }
  Var r = make_var(std::move(out), logits->requires_grad);
  if (!r->requires_grad) return r;
  r->parents = {logits};
  r->backprop = [batch, c, plane, temperature](VarNode& n) {
    auto& gz = n.parents[0]->ensure_grad();
    for (int bi = 0; bi < batch; ++bi) {
      const double* q = n.value.data() + static_cast<std::int64_t>(bi) * c * plane;
      const double* g = n.grad.data() + static_cast<std::int64_t>(bi) * c * plane;
      double* gzp = gz.data() + static_cast<std::int64_t>(bi) * c * plane;
      for (std::int64_t p = 0; p < plane; ++p) {
        double dot = 0;
        for (int ci = 0; ci < c; ++ci) dot += g[ci * plane + p] * q[ci * plane + p];
        for (int ci = 0; ci < c; ++ci)
          gzp[ci * plane + p] += q[ci * plane + p] * (g[ci * plane + p] - dot) / temperature;
      }
    }
  };
  return r;
}

Var l2_normalize_spatial(const Var& x) {
  const int nd = x->value.ndim();
  if (nd < 2) throw std::invalid_argument("l2_normalize_spatial: need >= 2 dims");
  const std::int64_t plane = static_cast<std::int64_t>(x->value.dim(nd - 2)) * x->value.dim(nd - 1);
  const std::int64_t slices = x->value.numel() / plane;
  Tensor out = x->value;
  std::vector<double> norms(static_cast<std::size_t>(slices));
  for (std::int64_t s = 0; s < slices; ++s) {
    double ss = 0;
    const double* xp = x->value.data() + s * plane;
    for (std::int64_t i = 0; i < plane; ++i) ss += xp[i] * xp[i];
    const double nrm = std::sqrt(ss);
    norms[static_cast<std::size_t>(s)] = nrm;
    if (nrm > 0) {
      double* op = out.data() + s * plane;
      for (std::int64_t i = 0; i < plane; ++i) op[i] /= nrm;
    }
  }
  return unary(x, std::move(out), [plane, slices, norms](VarNode& n) {
    auto& gx = n.parents[0]->ensure_grad();
    for (std::int64_t s = 0; s < slices; ++s) {
      const double nrm = norms[static_cast<std::size_t>(s)];
      if (nrm <= 0) continue;
      const double* y = n.value.data() + s * plane;
      const double* g = n.grad.data() + s * plane;
      double* gp = gx.data() + s * plane;
      double dot = 0;
      for (std::int64_t i = 0; i < plane; ++i) dot += g[i] * y[i];
      for (std::int64_t i = 0; i < plane; ++i) gp[i] += (g[i] - y[i] * dot) / nrm;
    }
  });
}

Var channel_sq_sum(const Var& x) {
  const auto& s = x->value.shape();
  if (s.size() != 4) throw std::invalid_argument("channel_sq_sum: need [B,C,H,W]");
  const int batch = s[0], c = s[1], h = s[2], w = s[3];
  const std::int64_t plane = static_cast<std::int64_t>(h) * w;
  Tensor out({batch, h, w});
  // Squares summed in sorted order so the result is exactly invariant under
  // channel permutations of the input.
  std::vector<double> sq(static_cast<std::size_t>(c));
  for (int bi = 0; bi < batch; ++bi) {
    const double* xp = x->value.data() + static_cast<std::int64_t>(bi) * c * plane;
    double* op = out.data() + static_cast<std::int64_t>(bi) * plane;
    for (std::int64_t i = 0; i < plane; ++i) {
      for (int ci = 0; ci < c; ++ci) sq[static_cast<std::size_t>(ci)] = xp[ci * plane + i] * xp[ci * plane + i];
      std::sort(sq.begin(), sq.end());
      double acc = 0;
      for (double v : sq) acc += v;
      op[i] = acc;
    }
  }
  return unary(x, std::move(out), [batch, c, plane](VarNode& n) {
    auto& gx = n.parents[0]->ensure_grad();
    for (int bi = 0; bi < batch; ++bi) {
      const double* xp = n.parents[0]->value.data() + static_cast<std::int64_t>(bi) * c * plane;
      const double* g = n.grad.data() + static_cast<std::int64_t>(bi) * plane;
      double* gp = gx.data() + static_cast<std::int64_t>(bi) * c * plane;
      for (int ci = 0; ci < c; ++ci)
        for (std::int64_t i = 0; i < plane; ++i) gp[ci * plane + i] += 2.0 * xp[ci * plane + i] * g[i];
    }
  });
}

Var l1_diff_sum(const Var& a, const Var& b) {
  check_same_shape(a, b, "l1_diff_sum");
  double s = 0;
  for (std::int64_t i = 0; i < a->value.numel(); ++i) s += std::abs(a->value[i] - b->value[i]);
  return binary(a, b, Tensor::scalar(s), [](VarNode& n) {
    const double g = n.grad[0];
    auto& va = n.parents[0]->value;
    auto& vb = n.parents[1]->value;
    for (std::int64_t i = 0; i < va.numel(); ++i) {
      const double d = va[i] - vb[i];
      const double sg = d > 0 ? 1.0 : (d < 0 ? -1.0 : 0.0);
      if (n.parents[0]->requires_grad) n.parents[0]->ensure_grad()[i] += g * sg;
      if (n.parents[1]->requires_grad) n.parents[1]->ensure_grad()[i] -= g * sg;
    }
  });
}

Var l2_diff_norm(const Var& a, const Var& b) {
  check_same_shape(a, b, "l2_diff_norm");
  double ss = 0;
  for (std::int64_t i = 0; i < a->value.numel(); ++i) {
    const double d = a->value[i] - b->value[i];
    ss += d * d;
  }
  const double nrm = std::sqrt(ss);
  return binary(a, b, Tensor::scalar(nrm), [nrm](VarNode& n) {
    if (nrm <= 0) return;
    const double g = n.grad[0] / nrm;
    auto& va = n.parents[0]->value;
    auto& vb = n.parents[1]->value;
    for (std::int64_t i = 0; i < va.numel(); ++i) {
      const double d = va[i] - vb[i];
      if (n.parents[0]->requires_grad) n.parents[0]->ensure_grad()[i] += g * d;
      if (n.parents[1]->requires_grad) n.parents[1]->ensure_grad()[i] -= g * d;
    }
  });
}

Tensor finite_difference(const std::function<double()>& f, Tensor& leaf_value, double h) {
  Tensor grad(leaf_value.shape());
  for (std::int64_t i = 0; i < leaf_value.numel(); ++i) {
    const double orig = leaf_value[i];
    leaf_value[i] = orig + h;
    const double fp = f();
    leaf_value[i] = orig - h;
    const double fm = f();
    leaf_value[i] = orig;
    grad[i] = (fp - fm) / (2.0 * h);
  }
  return grad;
}

}  // namespace kd
