#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "dynflow/errors.hpp"
#include "dynflow/flops.hpp"
#include "dynflow/tensor.hpp"

namespace dynflow {

namespace detail {

// Four independent accumulators so the loop vectorizes without
// reassociation flags; the summation order is fixed and deterministic.
inline double dot(const double* a, const double* b, std::size_t n) {
  double s0 = 0, s1 = 0, s2 = 0, s3 = 0;
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 += a[i] * b[i];
    s1 += a[i + 1] * b[i + 1];
    s2 += a[i + 2] * b[i + 2];
    s3 += a[i + 3] * b[i + 3];
  }
  for (; i < n; ++i) s0 += a[i] * b[i];
  return (s0 + s1) + (s2 + s3);
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
  }
}

inline void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) +
                     ", got " + shape_str(t.shape()));
  }
}

inline Node& input(Node& out, std::size_t i) { return *out.inputs[i]; }

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowMap = Eigen::Map<RowMatrix>;
using ConstRowMap = Eigen::Map<const RowMatrix>;

struct ConvGeometry {
  std::size_t cin, in_h, in_w, k, stride, pad, out_h, out_w;
};

// cols[(ci*k + ky)*k + kx][oy*out_w + ox] = x[ci][oy*stride + ky - pad][ox*stride + kx - pad],
// zero outside the input.
inline void im2col(const ConvGeometry& g, const double* x, double* cols) {
  const long pad = static_cast<long>(g.pad);
  for (std::size_t ci = 0; ci < g.cin; ++ci) {
    const double* xp = x + ci * g.in_h * g.in_w;
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        double* row = cols + ((ci * g.k + ky) * g.k + kx) * g.out_h * g.out_w;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - pad;
          double* r = row + oy * g.out_w;
          if (iy < 0 || iy >= static_cast<long>(g.in_h)) {
            std::fill(r, r + g.out_w, 0.0);
            continue;
          }
          const double* xr = xp + static_cast<std::size_t>(iy) * g.in_w;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx) - pad;
            r[ox] = (ix < 0 || ix >= static_cast<long>(g.in_w)) ? 0.0
                                                                 : xr[static_cast<std::size_t>(ix)];
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatters cols back onto the input grid, accumulating.
inline void col2im_add(const ConvGeometry& g, const double* cols, double* x) {
  const long pad = static_cast<long>(g.pad);
  for (std::size_t ci = 0; ci < g.cin; ++ci) {
    double* xp = x + ci * g.in_h * g.in_w;
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        const double* row = cols + ((ci * g.k + ky) * g.k + kx) * g.out_h * g.out_w;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - pad;
          if (iy < 0 || iy >= static_cast<long>(g.in_h)) continue;
          const double* r = row + oy * g.out_w;
          double* xr = xp + static_cast<std::size_t>(iy) * g.in_w;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx) - pad;
            if (ix >= 0 && ix < static_cast<long>(g.in_w)) xr[static_cast<std::size_t>(ix)] += r[ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

// 2-D cross-correlation with square odd kernel. `bias` may be undefined.
// Lowered to im2col plus a matrix product per sample.
inline Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias,
                     std::size_t stride = 1, std::size_t padding = 0) {
  detail::require_rank(input, 4, "conv2d input");
  detail::require_rank(weight, 4, "conv2d weight");
  const std::size_t n_batch = input.size(0), cin = input.size(1), in_h = input.size(2),
                    in_w = input.size(3);
  const std::size_t cout = weight.size(0), k = weight.size(2);
  if (weight.size(1) != cin) {
    throw ShapeError("conv2d: input has " + std::to_string(cin) +
                     " channels but weight " + shape_str(weight.shape()) + " expects " +
                     std::to_string(weight.size(1)));
  }
  if (weight.size(3) != k || k % 2 == 0) {
    throw ShapeError("conv2d: kernel must be square and odd, got " + shape_str(weight.shape()));
  }
  if (stride == 0) throw ShapeError("conv2d: stride must be positive");
  if (in_h + 2 * padding < k || in_w + 2 * padding < k) {
    throw ShapeError("conv2d: kernel " + std::to_string(k) + " larger than padded input " +
                     shape_str(input.shape()));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.size(0) != cout)) {
    throw ShapeError("conv2d: bias shape " + shape_str(bias.shape()) + " does not match Cout=" +
                     std::to_string(cout));
  }
  const detail::ConvGeometry geo{cin, in_h, in_w, k, stride, padding,
                                 (in_h + 2 * padding - k) / stride + 1,
                                 (in_w + 2 * padding - k) / stride + 1};
  const std::size_t in_plane = in_h * in_w, out_plane = geo.out_h * geo.out_w;
  const std::size_t kdim = cin * k * k;
  const bool pointwise_1x1 = (k == 1 && stride == 1 && padding == 0);

  std::vector<double> out(n_batch * cout * out_plane);
  std::vector<double> cols(pointwise_1x1 ? 0 : kdim * out_plane);
  const detail::ConstRowMap w_mat(weight.data().data(), cout, kdim);
  for (std::size_t n = 0; n < n_batch; ++n) {
    const double* xn = input.data().data() + n * cin * in_plane;
    if (!pointwise_1x1) detail::im2col(geo, xn, cols.data());
    const detail::ConstRowMap x_mat(pointwise_1x1 ? xn : cols.data(), kdim, out_plane);
    detail::RowMap o_mat(out.data() + n * cout * out_plane, cout, out_plane);
    o_mat.noalias() = w_mat * x_mat;
    if (bias.defined()) {
      for (std::size_t co = 0; co < cout; ++co) o_mat.row(co).array() += bias[co];
    }
  }
  charge_flops(n_batch * count_flops(conv_layer("", k, cin, cout, geo.out_h, geo.out_w,
                                                bias.defined())));

  Shape out_shape{n_batch, cout, geo.out_h, geo.out_w};
  return Tensor::from_op(
      out_shape, std::move(out), {&input, &weight, &bias}, "conv2d",
      [=](detail::Node& node) {
        detail::Node& xin = detail::input(node, 0);
        detail::Node& win = detail::input(node, 1);
        double* gx = xin.requires_grad ? xin.ensure_grad().data() : nullptr;
        double* gw = win.requires_grad ? win.ensure_grad().data() : nullptr;
        double* gb = nullptr;
        if (node.inputs.size() > 2 && node.inputs[2] && node.inputs[2]->requires_grad) {
          gb = node.inputs[2]->ensure_grad().data();
        }
        const detail::ConstRowMap w_mat(win.data.data(), cout, kdim);
        std::vector<double> buf(pointwise_1x1 ? 0 : kdim * out_plane);
        for (std::size_t n = 0; n < n_batch; ++n) {
          const detail::ConstRowMap g_mat(node.grad.data() + n * cout * out_plane, cout,
                                          out_plane);
          if (gb) {
            for (std::size_t co = 0; co < cout; ++co) gb[co] += g_mat.row(co).sum();
          }
          const double* xn = xin.data.data() + n * cin * in_plane;
          double* gxn = gx ? gx + n * cin * in_plane : nullptr;
          if (pointwise_1x1) {
            if (gw) {
              detail::RowMap(gw, cout, kdim).noalias() +=
                  g_mat * detail::ConstRowMap(xn, kdim, out_plane).transpose();
            }
            if (gxn) {
              detail::RowMap(gxn, kdim, out_plane).noalias() += w_mat.transpose() * g_mat;
            }
            continue;
          }
          if (gw) {
            detail::im2col(geo, xn, buf.data());
            detail::RowMap(gw, cout, kdim).noalias() +=
                g_mat * detail::ConstRowMap(buf.data(), kdim, out_plane).transpose();
          }
          if (gxn) {
            detail::RowMap(buf.data(), kdim, out_plane).noalias() = w_mat.transpose() * g_mat;
            detail::col2im_add(geo, buf.data(), gxn);
          }
        }
      });
}

enum class Pointwise { kRelu, kSigmoid, kTanh };

inline double sigmoid_scalar(double v) {
  if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

// Elementwise activation. relu'(0) is taken as 0.
inline Tensor pointwise(const Tensor& input, Pointwise kind) {
  const auto in = input.data();
  std::vector<double> out(in.size());
  switch (kind) {
    case Pointwise::kRelu:
      for (std::size_t i = 0; i < in.size(); ++i) out[i] = in[i] > 0 ? in[i] : 0.0;
      charge_flops(flop_cost::kRelu * in.size());
      break;
    case Pointwise::kSigmoid:
      for (std::size_t i = 0; i < in.size(); ++i) out[i] = sigmoid_scalar(in[i]);
      charge_flops(flop_cost::kSigmoid * in.size());
      break;
    case Pointwise::kTanh:
      for (std::size_t i = 0; i < in.size(); ++i) out[i] = std::tanh(in[i]);
      charge_flops(flop_cost::kTanh * in.size());
      break;
  }
  const char* name = kind == Pointwise::kRelu ? "relu" : kind == Pointwise::kSigmoid ? "sigmoid" : "tanh";
  return Tensor::from_op(input.shape(), std::move(out), {&input}, name, [kind](detail::Node& node) {
    detail::Node& x = detail::input(node, 0);
    auto& gx = x.ensure_grad();
    const auto& g = node.grad;
    const auto& y = node.data;
    switch (kind) {
      case Pointwise::kRelu:
        for (std::size_t i = 0; i < g.size(); ++i)
          if (x.data[i] > 0) gx[i] += g[i];
        break;
      case Pointwise::kSigmoid:
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * y[i] * (1.0 - y[i]);
        break;
      case Pointwise::kTanh:
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * (1.0 - y[i] * y[i]);
        break;
    }
  });
}

inline Tensor relu(const Tensor& x) { return pointwise(x, Pointwise::kRelu); }
inline Tensor sigmoid(const Tensor& x) { return pointwise(x, Pointwise::kSigmoid); }
inline Tensor tanh(const Tensor& x) { return pointwise(x, Pointwise::kTanh); }

// [N,C,H,W] -> [N,C,1,1] spatial mean.
inline Tensor global_avg_pool(const Tensor& input) {
  detail::require_rank(input, 4, "global_avg_pool");
  const std::size_t nc = input.size(0) * input.size(1);
  const std::size_t plane = input.size(2) * input.size(3);
  if (plane == 0) throw ShapeError("global_avg_pool: empty spatial extent");
  std::vector<double> out(nc);
  const double* x = input.data().data();
  for (std::size_t i = 0; i < nc; ++i) {
    double s = 0;
    for (std::size_t j = 0; j < plane; ++j) s += x[i * plane + j];
    out[i] = s / static_cast<double>(plane);
  }
  charge_flops(flop_cost::kPoolPerInput * nc * plane + flop_cost::kPoolPerOutput * nc);
  return Tensor::from_op(Shape{input.size(0), input.size(1), 1, 1}, std::move(out), {&input},
                         "global_avg_pool", [nc, plane](detail::Node& node) {
                           auto& gx = detail::input(node, 0).ensure_grad();
                           const double inv = 1.0 / static_cast<double>(plane);
                           for (std::size_t i = 0; i < nc; ++i) {
                             const double gi = node.grad[i] * inv;
                             for (std::size_t j = 0; j < plane; ++j) gx[i * plane + j] += gi;
                           }
                         });
}

// Stacks [N,Ci,H,W] parts along the channel axis.
inline Tensor concat_channels(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("concat_channels: no parts");
  const Tensor& first = parts[0];
  detail::require_rank(first, 4, "concat_channels");
  const std::size_t n_batch = first.size(0), plane = first.size(2) * first.size(3);
  std::size_t total_c = 0;
  for (const Tensor& p : parts) {
    detail::require_rank(p, 4, "concat_channels");
    if (p.size(0) != n_batch || p.size(2) != first.size(2) || p.size(3) != first.size(3)) {
      throw ShapeError("concat_channels: part " + shape_str(p.shape()) +
                       " incompatible with " + shape_str(first.shape()));
    }
    total_c += p.size(1);
  }
  std::vector<double> out(n_batch * total_c * plane);
  std::vector<std::size_t> channels;
  for (std::size_t n = 0; n < n_batch; ++n) {
    std::size_t offset = 0;
    for (const Tensor& p : parts) {
      const std::size_t block = p.size(1) * plane;
      std::copy_n(p.data().data() + n * block, block,
                  out.data() + (n * total_c * plane) + offset);
      offset += block;
    }
  }
  for (const Tensor& p : parts) channels.push_back(p.size(1));
  return Tensor::from_op(
      Shape{n_batch, total_c, first.size(2), first.size(3)}, std::move(out), parts,
      "concat_channels", [channels, n_batch, total_c, plane](detail::Node& node) {
        std::size_t offset = 0;
        for (std::size_t i = 0; i < channels.size(); ++i) {
          detail::Node& part = detail::input(node, i);
          const std::size_t block = channels[i] * plane;
          if (part.requires_grad) {
            auto& gp = part.ensure_grad();
            for (std::size_t n = 0; n < n_batch; ++n) {
              const double* src = node.grad.data() + n * total_c * plane + offset;
              for (std::size_t j = 0; j < block; ++j) gp[n * block + j] += src[j];
            }
          }
          offset += block;
        }
      });
}

inline Tensor concat_channels(std::initializer_list<Tensor> parts) {
  return concat_channels(std::span<const Tensor>(parts.begin(), parts.size()));
}

// Channels [start, start+count) of a rank-4 tensor.
inline Tensor slice_channels(const Tensor& input, std::size_t start, std::size_t count) {
  detail::require_rank(input, 4, "slice_channels");
  const std::size_t n_batch = input.size(0), c = input.size(1),
                    plane = input.size(2) * input.size(3);
  if (start + count > c || count == 0) {
    throw ShapeError("slice_channels: [" + std::to_string(start) + "," +
                     std::to_string(start + count) + ") out of " + std::to_string(c));
  }
  std::vector<double> out(n_batch * count * plane);
  for (std::size_t n = 0; n < n_batch; ++n) {
    std::copy_n(input.data().data() + (n * c + start) * plane, count * plane,
                out.data() + n * count * plane);
  }
  return Tensor::from_op(Shape{n_batch, count, input.size(2), input.size(3)}, std::move(out),
                         {&input}, "slice_channels",
                         [n_batch, c, start, count, plane](detail::Node& node) {
                           auto& gx = detail::input(node, 0).ensure_grad();
                           for (std::size_t n = 0; n < n_batch; ++n) {
                             const double* src = node.grad.data() + n * count * plane;
                             double* dst = gx.data() + (n * c + start) * plane;
                             for (std::size_t j = 0; j < count * plane; ++j) dst[j] += src[j];
                           }
                         });
}

inline Tensor reshape(const Tensor& input, Shape shape) {
  if (shape_numel(shape) != input.numel()) {
    throw ShapeError("reshape: " + shape_str(input.shape()) + " -> " + shape_str(shape));
  }
  std::vector<double> out(input.data().begin(), input.data().end());
  return Tensor::from_op(std::move(shape), std::move(out), {&input}, "reshape",
                         [](detail::Node& node) {
                           auto& gx = detail::input(node, 0).ensure_grad();
                           for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += node.grad[i];
                         });
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  charge_flops(flop_cost::kElementwise * out.size());
  return Tensor::from_op(a.shape(), std::move(out), {&a, &b}, "add", [](detail::Node& node) {
    for (std::size_t k = 0; k < 2; ++k) {
      detail::Node& in = detail::input(node, k);
      if (!in.requires_grad) continue;
      auto& g = in.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += node.grad[i];
    }
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  charge_flops(flop_cost::kElementwise * out.size());
  return Tensor::from_op(a.shape(), std::move(out), {&a, &b}, "sub", [](detail::Node& node) {
    detail::Node& x = detail::input(node, 0);
    detail::Node& y = detail::input(node, 1);
    if (x.requires_grad) {
      auto& g = x.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += node.grad[i];
    }
    if (y.requires_grad) {
      auto& g = y.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= node.grad[i];
    }
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  charge_flops(flop_cost::kElementwise * out.size());
  return Tensor::from_op(a.shape(), std::move(out), {&a, &b}, "mul", [](detail::Node& node) {
    detail::Node& x = detail::input(node, 0);
    detail::Node& y = detail::input(node, 1);
    if (x.requires_grad) {
      auto& g = x.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += node.grad[i] * y.data[i];
    }
    if (y.requires_grad) {
      auto& g = y.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += node.grad[i] * x.data[i];
    }
  });
}

inline Tensor scale(const Tensor& a, double factor) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * factor;
  charge_flops(flop_cost::kElementwise * out.size());
  return Tensor::from_op(a.shape(), std::move(out), {&a}, "scale", [factor](detail::Node& node) {
    auto& g = detail::input(node, 0).ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += node.grad[i] * factor;
  });
}

inline Tensor add_scalar(const Tensor& a, double c) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + c;
  charge_flops(flop_cost::kElementwise * out.size());
  return Tensor::from_op(a.shape(), std::move(out), {&a}, "add_scalar", [](detail::Node& node) {
    auto& g = detail::input(node, 0).ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += node.grad[i];
  });
}

// 1 - x
inline Tensor one_minus(const Tensor& a) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = 1.0 - a[i];
  charge_flops(flop_cost::kElementwise * out.size());
  return Tensor::from_op(a.shape(), std::move(out), {&a}, "one_minus", [](detail::Node& node) {
    auto& g = detail::input(node, 0).ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] -= node.grad[i];
  });
}

// abs with subgradient 0 at 0.
inline Tensor abs(const Tensor& a) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::fabs(a[i]);
  charge_flops(flop_cost::kElementwise * out.size());
  return Tensor::from_op(a.shape(), std::move(out), {&a}, "abs", [](detail::Node& node) {
    detail::Node& x = detail::input(node, 0);
    auto& g = x.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (x.data[i] > 0) g[i] += node.grad[i];
      else if (x.data[i] < 0) g[i] -= node.grad[i];
    }
  });
}

// Multiplies every element of sample n (leading axis) by s[n].
inline Tensor mul_per_sample(const Tensor& x, const Tensor& s) {
  if (x.rank() == 0 || s.numel() != x.size(0)) {
    throw ShapeError("mul_per_sample: " + shape_str(x.shape()) + " with factors " +
                     shape_str(s.shape()));
  }
  const std::size_t n_batch = x.size(0), block = x.numel() / n_batch;
  std::vector<double> out(x.numel());
  for (std::size_t n = 0; n < n_batch; ++n)
    for (std::size_t j = 0; j < block; ++j) out[n * block + j] = x[n * block + j] * s[n];
  charge_flops(flop_cost::kElementwise * out.size());
  return Tensor::from_op(x.shape(), std::move(out), {&x, &s}, "mul_per_sample",
                         [n_batch, block](detail::Node& node) {
                           detail::Node& xv = detail::input(node, 0);
                           detail::Node& sv = detail::input(node, 1);
                           const auto& g = node.grad;
                           if (xv.requires_grad) {
                             auto& gx = xv.ensure_grad();
                             for (std::size_t n = 0; n < n_batch; ++n)
                               for (std::size_t j = 0; j < block; ++j)
                                 gx[n * block + j] += g[n * block + j] * sv.data[n];
                           }
                           if (sv.requires_grad) {
                             auto& gs = sv.ensure_grad();
                             for (std::size_t n = 0; n < n_batch; ++n)
                               gs[n] += detail::dot(g.data() + n * block,
                                                    xv.data.data() + n * block, block);
                           }
                         });
}

// curr * p + prev * (1 - p), p broadcast per sample.
inline Tensor blend(const Tensor& prev, const Tensor& curr, const Tensor& p) {
  detail::require_same_shape(prev, curr, "blend");
  if (prev.rank() == 0 || p.numel() != prev.size(0)) {
    throw ShapeError("blend: gate " + shape_str(p.shape()) + " for " + shape_str(prev.shape()));
  }
  const std::size_t n_batch = prev.size(0), block = prev.numel() / n_batch;
  std::vector<double> out(prev.numel());
  for (std::size_t n = 0; n < n_batch; ++n) {
    const double pn = p[n], qn = 1.0 - pn;
    for (std::size_t j = 0; j < block; ++j) {
      const std::size_t i = n * block + j;
      out[i] = curr[i] * pn + prev[i] * qn;
    }
  }
  charge_flops(3 * out.size() + n_batch);
  return Tensor::from_op(
      prev.shape(), std::move(out), {&prev, &curr, &p}, "blend",
      [n_batch, block](detail::Node& node) {
        detail::Node& pv = detail::input(node, 0);
        detail::Node& cv = detail::input(node, 1);
        detail::Node& gate = detail::input(node, 2);
        const auto& g = node.grad;
        for (std::size_t n = 0; n < n_batch; ++n) {
          const double pn = gate.data[n];
          if (cv.requires_grad) {
            auto& gc = cv.ensure_grad();
            for (std::size_t j = 0; j < block; ++j) gc[n * block + j] += g[n * block + j] * pn;
          }
          if (pv.requires_grad) {
            auto& gp = pv.ensure_grad();
            for (std::size_t j = 0; j < block; ++j)
              gp[n * block + j] += g[n * block + j] * (1.0 - pn);
          }
          if (gate.requires_grad) {
            double s = 0;
            for (std::size_t j = 0; j < block; ++j) {
              const std::size_t i = n * block + j;
              s += g[i] * (cv.data[i] - pv.data[i]);
            }
            gate.ensure_grad()[n] += s;
          }
        }
      });
}

// Sum of all elements -> shape [1].
inline Tensor sum(const Tensor& a) {
  double s = 0;
  for (double v : a.data()) s += v;
  charge_flops(a.numel());
  return Tensor::from_op(Shape{1}, {s}, {&a}, "sum", [](detail::Node& node) {
    auto& g = detail::input(node, 0).ensure_grad();
    for (double& v : g) v += node.grad[0];
  });
}

inline Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

// All-pairs correlation of two [N,C,h,w] feature maps:
// out[n, y1, x1, y2, x2] = <f1[n,:,y1,x1], f2[n,:,y2,x2]> / sqrt(C).
inline Tensor corr_volume(const Tensor& f1, const Tensor& f2) {
  detail::require_rank(f1, 4, "corr_volume");
  detail::require_same_shape(f1, f2, "corr_volume");
  const std::size_t n_batch = f1.size(0), c = f1.size(1), h = f1.size(2), w = f1.size(3);
  const std::size_t px = h * w;
  const double inv = 1.0 / std::sqrt(static_cast<double>(c));
  std::vector<double> out(n_batch * px * px);
  for (std::size_t n = 0; n < n_batch; ++n) {
    const detail::ConstRowMap a(f1.data().data() + n * c * px, c, px);
    const detail::ConstRowMap b(f2.data().data() + n * c * px, c, px);
    detail::RowMap o(out.data() + n * px * px, px, px);
    o.noalias() = a.transpose() * b;
    o *= inv;
  }
  LayerSpec spec;
  spec.kind = LayerKind::kCorrVolume;
  spec.samples = n_batch;
  spec.pixels = px;
  spec.channels = c;
  charge_flops(count_flops(spec));
  return Tensor::from_op(
      Shape{n_batch, h, w, h, w}, std::move(out), {&f1, &f2}, "corr_volume",
      [n_batch, c, px, inv](detail::Node& node) {
        detail::Node& a = detail::input(node, 0);
        detail::Node& b = detail::input(node, 1);
        for (std::size_t n = 0; n < n_batch; ++n) {
          const detail::ConstRowMap g(node.grad.data() + n * px * px, px, px);
          const std::size_t base = n * c * px;
          if (a.requires_grad) {
            detail::RowMap(a.ensure_grad().data() + base, c, px).noalias() +=
                inv * (detail::ConstRowMap(b.data.data() + base, c, px) * g.transpose());
          }
          if (b.requires_grad) {
            detail::RowMap(b.ensure_grad().data() + base, c, px).noalias() +=
                inv * (detail::ConstRowMap(a.data.data() + base, c, px) * g);
          }
        }
      });
}

// Bilinear window lookup into a correlation volume. For each source pixel
// x the output holds corr(x, x + flow(x) + d) for the (2r+1)^2 integer
// offsets d, channel index (dy + r) * (2r + 1) + (dx + r). Samples outside
// the target grid read as zero. Differentiable in both corr and flow.
inline Tensor corr_lookup(const Tensor& corr, const Tensor& flow, std::size_t radius) {
  detail::require_rank(corr, 5, "corr_lookup corr");
  detail::require_rank(flow, 4, "corr_lookup flow");
  const std::size_t n_batch = corr.size(0), h = corr.size(1), w = corr.size(2);
  if (corr.size(3) != h || corr.size(4) != w || flow.size(0) != n_batch || flow.size(1) != 2 ||
      flow.size(2) != h || flow.size(3) != w) {
    throw ShapeError("corr_lookup: corr " + shape_str(corr.shape()) + " vs flow " +
                     shape_str(flow.shape()));
  }
  const long r = static_cast<long>(radius);
  const std::size_t side = 2 * radius + 1, taps = side * side, px = h * w;
  const long H = static_cast<long>(h), W = static_cast<long>(w);
  std::vector<double> out(n_batch * taps * px);

  auto tap = [H, W](const double* plane, long y, long x) -> double {
    return (y >= 0 && y < H && x >= 0 && x < W) ? plane[y * W + x] : 0.0;
  };

  for (std::size_t n = 0; n < n_batch; ++n) {
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        const std::size_t a = y * w + x;
        const double* plane = corr.data().data() + (n * px + a) * px;
        const double fx = flow[(n * 2 + 0) * px + a];
        const double fy = flow[(n * 2 + 1) * px + a];
        const double X = static_cast<double>(x) + fx, Y = static_cast<double>(y) + fy;
        const double x0f = std::floor(X), y0f = std::floor(Y);
        const double ax = X - x0f, ay = Y - y0f;
        const long x0 = static_cast<long>(x0f), y0 = static_cast<long>(y0f);
        for (long dy = -r; dy <= r; ++dy) {
          for (long dx = -r; dx <= r; ++dx) {
            const long yy = y0 + dy, xx = x0 + dx;
            const double v = (1 - ax) * (1 - ay) * tap(plane, yy, xx) +
                             ax * (1 - ay) * tap(plane, yy, xx + 1) +
                             (1 - ax) * ay * tap(plane, yy + 1, xx) +
                             ax * ay * tap(plane, yy + 1, xx + 1);
            const std::size_t kidx = static_cast<std::size_t>((dy + r) * static_cast<long>(side) + (dx + r));
            out[(n * taps + kidx) * px + a] = v;
          }
        }
      }
    }
  }
  charge_flops(flop_cost::kLookupPerOutput * out.size());

  return Tensor::from_op(
      Shape{n_batch, taps, h, w}, std::move(out), {&corr, &flow}, "corr_lookup",
      [n_batch, h, w, r, side, taps, px, H, W](detail::Node& node) {
        detail::Node& cv = detail::input(node, 0);
        detail::Node& fv = detail::input(node, 1);
        double* gc = cv.requires_grad ? cv.ensure_grad().data() : nullptr;
        double* gf = fv.requires_grad ? fv.ensure_grad().data() : nullptr;
        auto in_grid = [H, W](long y, long x) { return y >= 0 && y < H && x >= 0 && x < W; };
        for (std::size_t n = 0; n < n_batch; ++n) {
          for (std::size_t y = 0; y < h; ++y) {
            for (std::size_t x = 0; x < w; ++x) {
              const std::size_t a = y * w + x;
              const std::size_t plane_off = (n * px + a) * px;
              const double* plane = cv.data.data() + plane_off;
              const double X = static_cast<double>(x) + fv.data[(n * 2 + 0) * px + a];
              const double Y = static_cast<double>(y) + fv.data[(n * 2 + 1) * px + a];
              const double x0f = std::floor(X), y0f = std::floor(Y);
              const double ax = X - x0f, ay = Y - y0f;
              const long x0 = static_cast<long>(x0f), y0 = static_cast<long>(y0f);
              double gX = 0, gY = 0;
              for (long dy = -r; dy <= r; ++dy) {
                for (long dx = -r; dx <= r; ++dx) {
                  const std::size_t kidx = static_cast<std::size_t>((dy + r) * static_cast<long>(side) + (dx + r));
                  const double g = node.grad[(n * taps + kidx) * px + a];
                  if (g == 0.0) continue;
                  const long yy = y0 + dy, xx = x0 + dx;
                  const bool i00 = in_grid(yy, xx), i01 = in_grid(yy, xx + 1),
                             i10 = in_grid(yy + 1, xx), i11 = in_grid(yy + 1, xx + 1);
                  const double c00 = i00 ? plane[yy * W + xx] : 0.0;
                  const double c01 = i01 ? plane[yy * W + xx + 1] : 0.0;
                  const double c10 = i10 ? plane[(yy + 1) * W + xx] : 0.0;
                  const double c11 = i11 ? plane[(yy + 1) * W + xx + 1] : 0.0;
                  if (gc) {
                    double* gp = gc + plane_off;
                    if (i00) gp[yy * W + xx] += g * (1 - ax) * (1 - ay);
                    if (i01) gp[yy * W + xx + 1] += g * ax * (1 - ay);
                    if (i10) gp[(yy + 1) * W + xx] += g * (1 - ax) * ay;
                    if (i11) gp[(yy + 1) * W + xx + 1] += g * ax * ay;
                  }
                  gX += g * ((1 - ay) * (c01 - c00) + ay * (c11 - c10));
                  gY += g * ((1 - ax) * (c10 - c00) + ax * (c11 - c01));
                }
              }
              if (gf) {
                gf[(n * 2 + 0) * px + a] += gX;
                gf[(n * 2 + 1) * px + a] += gY;
              }
            }
          }
        }
      });
}

// Per-sample mean absolute error over valid pixels and all channels.
// pred/target: [N,C,H,W]; valid: [N,1,H,W] of 0/1. Returns [N].
// The target receives no gradient.
inline Tensor masked_l1_mean(const Tensor& pred, const Tensor& target, const Tensor& valid) {
  detail::require_same_shape(pred, target, "masked_l1_mean");
  detail::require_rank(pred, 4, "masked_l1_mean");
  const std::size_t n_batch = pred.size(0), c = pred.size(1), plane = pred.size(2) * pred.size(3);
  if (valid.numel() != n_batch * plane) {
    throw ShapeError("masked_l1_mean: mask " + shape_str(valid.shape()) + " for " +
                     shape_str(pred.shape()));
  }
  std::vector<double> denom(n_batch);
  std::vector<double> out(n_batch);
  for (std::size_t n = 0; n < n_batch; ++n) {
    double count = 0;
    for (std::size_t j = 0; j < plane; ++j) count += valid[n * plane + j] != 0.0 ? 1.0 : 0.0;
    if (count == 0) {
      throw ContractError("masked_l1_mean: sample " + std::to_string(n) +
                          " has no valid pixels to supervise");
    }
    denom[n] = count * static_cast<double>(c);
    double s = 0;
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t j = 0; j < plane; ++j)
        if (valid[n * plane + j] != 0.0) {
          const std::size_t i = (n * c + ch) * plane + j;
          s += std::fabs(pred[i] - target[i]);
        }
    out[n] = s / denom[n];
  }
  charge_flops(3 * pred.numel());
  Tensor tgt = target.detach();
  Tensor mask = valid.detach();
  return Tensor::from_op(
      Shape{n_batch}, std::move(out), {&pred}, "masked_l1_mean",
      [tgt, mask, denom, n_batch, c, plane](detail::Node& node) {
        detail::Node& pv = detail::input(node, 0);
        auto& gp = pv.ensure_grad();
        for (std::size_t n = 0; n < n_batch; ++n) {
          const double gn = node.grad[n] / denom[n];
          for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t j = 0; j < plane; ++j) {
              if (mask[n * plane + j] == 0.0) continue;
              const std::size_t i = (n * c + ch) * plane + j;
              const double d = pv.data[i] - tgt[i];
              if (d > 0) gp[i] += gn;
              else if (d < 0) gp[i] -= gn;
            }
        }
      });
}

// Two-way Gumbel-softmax: p[n] = softmax((logits[n] + noise[n]) / tau)[0].
// `logits` holds 2 values per sample (any [N,2,...] layout with 2N
// elements); `noise` is empty (noise off) or 2N Gumbel samples.
inline Tensor gumbel_softmax_gate(const Tensor& logits, std::span<const double> noise, double tau) {
  if (!(tau > 0)) throw ContractError("gumbel_softmax_gate: tau must be positive");
  if (logits.rank() == 0 || logits.numel() != 2 * logits.size(0)) {
    throw ShapeError("gumbel_softmax_gate: expected 2 logits per sample, got " +
                     shape_str(logits.shape()));
  }
  const std::size_t n_batch = logits.size(0);
  if (!noise.empty() && noise.size() != 2 * n_batch) {
    throw ShapeError("gumbel_softmax_gate: noise size " + std::to_string(noise.size()));
  }
  std::vector<double> out(n_batch);
  for (std::size_t n = 0; n < n_batch; ++n) {
    double a = logits[2 * n], b = logits[2 * n + 1];
    if (!noise.empty()) {
      a += noise[2 * n];
      b += noise[2 * n + 1];
    }
    a /= tau;
    b /= tau;
    const double m = std::max(a, b);
    const double ea = std::exp(a - m), eb = std::exp(b - m);
    out[n] = ea / (ea + eb);
  }
  charge_flops(n_batch * (flop_cost::kGatePerSample +
                          (noise.empty() ? 0 : flop_cost::kGateNoisePerSample)));
  return Tensor::from_op(Shape{n_batch}, std::move(out), {&logits}, "gumbel_softmax_gate",
                         [n_batch, tau](detail::Node& node) {
                           auto& g = detail::input(node, 0).ensure_grad();
                           for (std::size_t n = 0; n < n_batch; ++n) {
                             const double p = node.data[n];
                             const double d = node.grad[n] * p * (1.0 - p) / tau;
                             g[2 * n] += d;
                             g[2 * n + 1] -= d;
                           }
                         });
}

}  // namespace dynflow
