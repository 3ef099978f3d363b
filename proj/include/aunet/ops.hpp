#pragma once

#include <cmath>
#include <limits>
#include <vector>

#include "aunet/tensor.hpp"

namespace aunet {

namespace detail {

// Elementwise plan for two equal-rank operands where mismatched axes have
// extent 1 on one side.
struct BroadcastPlan {
  Shape out;
  std::vector<std::size_t> stride_a, stride_b;
  bool same = false;
};

inline std::vector<std::size_t> contiguous_strides(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

inline BroadcastPlan broadcast_plan(const Shape& a, const Shape& b, const char* op) {
  BroadcastPlan p;
  if (a == b) {
    p.out = a;
    p.same = true;
    return p;
  }
  if (a.size() != b.size()) {
    throw DimensionError(std::string(op) + ": rank mismatch " + shape_str(a) + " vs " + shape_str(b));
  }
  const auto sa = contiguous_strides(a), sb = contiguous_strides(b);
  p.out.resize(a.size());
  p.stride_a.resize(a.size());
  p.stride_b.resize(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] != b[i] && a[i] != 1 && b[i] != 1) {
      throw DimensionError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " +
                           shape_str(b));
    }
    p.out[i] = std::max(a[i], b[i]);
    p.stride_a[i] = a[i] == 1 ? 0 : sa[i];
    p.stride_b[i] = b[i] == 1 ? 0 : sb[i];
  }
  return p;
}

// Calls f(out_index, a_offset, b_offset) for every output element in order.
template <class F>
void for_each_broadcast(const BroadcastPlan& p, F&& f) {
  const std::size_t n = shape_numel(p.out);
  if (p.same) {
    for (std::size_t i = 0; i < n; ++i) f(i, i, i);
    return;
  }
  const std::size_t r = p.out.size();
  std::vector<std::size_t> idx(r, 0);
  std::size_t oa = 0, ob = 0;
  for (std::size_t i = 0; i < n; ++i) {
    f(i, oa, ob);
    for (std::size_t ax = r; ax-- > 0;) {
      if (++idx[ax] < p.out[ax]) {
        oa += p.stride_a[ax];
        ob += p.stride_b[ax];
        break;
      }
      oa -= p.stride_a[ax] * (p.out[ax] - 1);
      ob -= p.stride_b[ax] * (p.out[ax] - 1);
      idx[ax] = 0;
    }
  }
}

inline void require_5d(const Tensor& x, const char* op) {
  if (x.rank() != 5) {
    throw DimensionError(std::string(op) + ": expected 5-D (N,C,D,H,W) tensor, got " +
                         shape_str(x.shape()));
  }
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  auto plan = detail::broadcast_plan(a.shape(), b.shape(), "add");
  std::vector<double> out(shape_numel(plan.out));
  auto da = a.data(), db = b.data();
  detail::for_each_broadcast(plan, [&](std::size_t i, std::size_t ia, std::size_t ib) {
    out[i] = da[ia] + db[ib];
  });
  return Tensor::from_op(plan.out, std::move(out), OpKind::Add, {a, b}, [plan](Node& self) {
    Node& na = *self.inputs[0];
    Node& nb = *self.inputs[1];
    const auto& g = self.grad;
    if (na.requires_grad) {
      auto& ga = na.grad_buffer();
      detail::for_each_broadcast(plan, [&](std::size_t i, std::size_t ia, std::size_t) { ga[ia] += g[i]; });
    }
    if (nb.requires_grad) {
      auto& gb = nb.grad_buffer();
      detail::for_each_broadcast(plan, [&](std::size_t i, std::size_t, std::size_t ib) { gb[ib] += g[i]; });
    }
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  auto plan = detail::broadcast_plan(a.shape(), b.shape(), "sub");
  std::vector<double> out(shape_numel(plan.out));
  auto da = a.data(), db = b.data();
  detail::for_each_broadcast(plan, [&](std::size_t i, std::size_t ia, std::size_t ib) {
    out[i] = da[ia] - db[ib];
  });
  return Tensor::from_op(plan.out, std::move(out), OpKind::Sub, {a, b}, [plan](Node& self) {
    Node& na = *self.inputs[0];
    Node& nb = *self.inputs[1];
    const auto& g = self.grad;
    if (na.requires_grad) {
      auto& ga = na.grad_buffer();
      detail::for_each_broadcast(plan, [&](std::size_t i, std::size_t ia, std::size_t) { ga[ia] += g[i]; });
    }
    if (nb.requires_grad) {
      auto& gb = nb.grad_buffer();
      detail::for_each_broadcast(plan, [&](std::size_t i, std::size_t, std::size_t ib) { gb[ib] -= g[i]; });
    }
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  auto plan = detail::broadcast_plan(a.shape(), b.shape(), "mul");
  std::vector<double> out(shape_numel(plan.out));
  auto da = a.data(), db = b.data();
  detail::for_each_broadcast(plan, [&](std::size_t i, std::size_t ia, std::size_t ib) {
    out[i] = da[ia] * db[ib];
  });
  return Tensor::from_op(plan.out, std::move(out), OpKind::Mul, {a, b}, [plan](Node& self) {
    Node& na = *self.inputs[0];
    Node& nb = *self.inputs[1];
    const auto& g = self.grad;
    if (na.requires_grad) {
      auto& ga = na.grad_buffer();
      detail::for_each_broadcast(plan, [&](std::size_t i, std::size_t ia, std::size_t ib) {
        ga[ia] += g[i] * nb.data[ib];
      });
    }
    if (nb.requires_grad) {
      auto& gb = nb.grad_buffer();
      detail::for_each_broadcast(plan, [&](std::size_t i, std::size_t ia, std::size_t ib) {
        gb[ib] += g[i] * na.data[ia];
      });
    }
  });
}

inline Tensor scale(const Tensor& x, double c) {
  std::vector<double> out(x.data().begin(), x.data().end());
  for (auto& v : out) v *= c;
  return Tensor::from_op(x.shape(), std::move(out), OpKind::Scale, {x}, [c](Node& self) {
    auto& gx = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += c * self.grad[i];
  });
}

/// max(0, x); the subgradient at exactly 0 is 0.
inline Tensor relu(const Tensor& x) {
  std::vector<double> out(x.numel());
  auto d = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = d[i] > 0.0 ? d[i] : 0.0;
  return Tensor::from_op(x.shape(), std::move(out), OpKind::Relu, {x}, [](Node& self) {
    Node& in = *self.inputs[0];
    auto& gx = in.grad_buffer();
    for (std::size_t i = 0; i < gx.size(); ++i) {
      if (in.data[i] > 0.0) gx[i] += self.grad[i];
    }
  });
}

/// Logistic sigmoid evaluated without overflow for any finite input. The
/// result is kept inside the open interval (0,1) even where it would round to
/// an endpoint.
inline double sigmoid_value(double v) {
  constexpr double lo = std::numeric_limits<double>::denorm_min();
  constexpr double hi = 1.0 - std::numeric_limits<double>::epsilon() / 2;
  double s;
  if (v >= 0.0) {
    s = 1.0 / (1.0 + std::exp(-v));
  } else {
    const double e = std::exp(v);
    s = e / (1.0 + e);
  }
  return std::clamp(s, lo, hi);
}

inline Tensor sigmoid(const Tensor& x) {
  std::vector<double> out(x.numel());
  auto d = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = sigmoid_value(d[i]);
  return Tensor::from_op(x.shape(), std::move(out), OpKind::Sigmoid, {x}, [](Node& self) {
    auto& gx = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < gx.size(); ++i) {
      const double s = self.data[i];
      gx[i] += self.grad[i] * s * (1.0 - s);
    }
  });
}

/// Per-voxel softmax over the channel axis of a (N,C,D,H,W) tensor.
inline Tensor softmax_channel(const Tensor& x) {
  detail::require_5d(x, "softmax_channel");
  const std::size_t n = x.dim(0), c = x.dim(1), s = x.dim(2) * x.dim(3) * x.dim(4);
  std::vector<double> out(x.numel());
  auto d = x.data();
  for (std::size_t b = 0; b < n; ++b) {
    const std::size_t base = b * c * s;
    for (std::size_t p = 0; p < s; ++p) {
      double m = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < c; ++k) m = std::max(m, d[base + k * s + p]);
      double z = 0.0;
      for (std::size_t k = 0; k < c; ++k) {
        const double e = std::exp(d[base + k * s + p] - m);
        out[base + k * s + p] = e;
        z += e;
      }
      for (std::size_t k = 0; k < c; ++k) out[base + k * s + p] /= z;
    }
  }
  return Tensor::from_op(x.shape(), std::move(out), OpKind::SoftmaxChannel, {x},
                         [n, c, s](Node& self) {
                           auto& gx = self.inputs[0]->grad_buffer();
                           const auto& y = self.data;
                           const auto& g = self.grad;
                           for (std::size_t b = 0; b < n; ++b) {
                             const std::size_t base = b * c * s;
                             for (std::size_t p = 0; p < s; ++p) {
                               double dot = 0.0;
                               for (std::size_t k = 0; k < c; ++k) dot += g[base + k * s + p] * y[base + k * s + p];
                               for (std::size_t k = 0; k < c; ++k) {
                                 const std::size_t i = base + k * s + p;
                                 gx[i] += y[i] * (g[i] - dot);
                               }
                             }
                           }
                         });
}

/// Concatenate (N,C_i,D,H,W) tensors along the channel axis.
inline Tensor concat_channels(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_channels: no inputs");
  for (const auto& p : parts) detail::require_5d(p, "concat_channels");
  const Shape& ref = parts.front().shape();
  std::size_t channels = 0;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (s[0] != ref[0] || s[2] != ref[2] || s[3] != ref[3] || s[4] != ref[4]) {
      throw DimensionError("concat_channels: " + detail::shape_str(s) + " does not match " +
                           detail::shape_str(ref) + " outside the channel axis");
    }
    offsets.push_back(channels);
    channels += s[1];
  }
  const std::size_t n = ref[0], sp = ref[2] * ref[3] * ref[4];
  Shape out_shape{n, channels, ref[2], ref[3], ref[4]};
  std::vector<double> out(shape_numel(out_shape));
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const std::size_t ck = parts[k].dim(1);
    auto d = parts[k].data();
    for (std::size_t b = 0; b < n; ++b) {
      std::copy_n(d.begin() + b * ck * sp, ck * sp, out.begin() + (b * channels + offsets[k]) * sp);
    }
  }
  return Tensor::from_op(out_shape, std::move(out), OpKind::ConcatChannels, parts,
                         [offsets, channels, n, sp](Node& self) {
                           for (std::size_t k = 0; k < self.inputs.size(); ++k) {
                             Node& in = *self.inputs[k];
                             if (!in.requires_grad) continue;
                             auto& gi = in.grad_buffer();
                             const std::size_t ck = in.shape[1];
                             for (std::size_t b = 0; b < n; ++b) {
                               const double* src = self.grad.data() + (b * channels + offsets[k]) * sp;
                               double* dst = gi.data() + b * ck * sp;
                               for (std::size_t i = 0; i < ck * sp; ++i) dst[i] += src[i];
                             }
                           }
                         });
}

/// Channels [begin, begin+count) of a 5-D tensor.
inline Tensor slice_channels(const Tensor& x, std::size_t begin, std::size_t count) {
  detail::require_5d(x, "slice_channels");
  const std::size_t n = x.dim(0), c = x.dim(1), sp = x.dim(2) * x.dim(3) * x.dim(4);
  if (count == 0 || begin + count > c) {
    throw DimensionError("slice_channels: range [" + std::to_string(begin) + "," +
                         std::to_string(begin + count) + ") outside " + std::to_string(c) + " channels");
  }
  Shape out_shape{n, count, x.dim(2), x.dim(3), x.dim(4)};
  std::vector<double> out(shape_numel(out_shape));
  auto d = x.data();
  for (std::size_t b = 0; b < n; ++b) {
    std::copy_n(d.begin() + (b * c + begin) * sp, count * sp, out.begin() + b * count * sp);
  }
  return Tensor::from_op(out_shape, std::move(out), OpKind::SliceChannels, {x},
                         [n, c, sp, begin, count](Node& self) {
                           auto& gx = self.inputs[0]->grad_buffer();
                           for (std::size_t b = 0; b < n; ++b) {
                             const double* src = self.grad.data() + b * count * sp;
                             double* dst = gx.data() + (b * c + begin) * sp;
                             for (std::size_t i = 0; i < count * sp; ++i) dst[i] += src[i];
                           }
                         });
}

/// Sum of all elements as a shape-(1) tensor.
inline Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  return Tensor::from_op(Shape{1}, {acc}, OpKind::Sum, {x}, [](Node& self) {
    auto& gx = self.inputs[0]->grad_buffer();
    const double g = self.grad[0];
    for (auto& v : gx) v += g;
  });
}

inline Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

}  // namespace aunet
