#include "dwdn/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <string>

namespace dwdn::ops {
namespace {

using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<Matrix>;
using ConstMatMap = Eigen::Map<const Matrix>;

using detail::Node;

[[noreturn]] void mismatch(const char* op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

void require_2d(const char* op, const Tensor& x) {
  if (x.ndim() != 2) {
    throw ShapeError(std::string(op) + ": expected a 2-d tensor, got " + shape_str(x.shape()));
  }
}

void require_axis(const char* op, const Tensor& x, std::size_t axis) {
  if (axis >= x.ndim()) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for " +
                     shape_str(x.shape()));
  }
}

// Splits a shape around `axis` into (outer, axis length, inner) strides.
struct AxisSplit {
  std::size_t outer = 1, len = 1, inner = 1;
};

AxisSplit split_axis(const Shape& s, std::size_t axis) {
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.len = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

Node& parent(Node& n, std::size_t i) { return *n.parents[i]; }

template <typename Fn>
Tensor elementwise_binary(const char* op, const Tensor& a, const Tensor& b, Fn fn,
                          std::function<void(Node&)> back) {
  if (a.shape() != b.shape()) mismatch(op, a.shape(), b.shape());
  auto x = a.data();
  auto y = b.data();
  Buffer out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fn(x[i], y[i]);
  return Tensor::make_result(a.shape(), std::move(out), {a, b}, op, std::move(back));
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_2d("matmul", a);
  require_2d("matmul", b);
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) mismatch("matmul", a.shape(), b.shape());
  Buffer out(m * n);
  MatMap(out.data(), m, n).noalias() =
      ConstMatMap(a.data().data(), m, k) * ConstMatMap(b.data().data(), k, n);
  return Tensor::make_result({m, n}, std::move(out), {a, b}, "matmul", [m, k, n](Node& self) {
    Node& pa = parent(self, 0);
    Node& pb = parent(self, 1);
    ConstMatMap g(self.grad.data(), m, n);
    if (pa.requires_grad) {
      pa.ensure_grad();
      MatMap(pa.grad.data(), m, k).noalias() += g * ConstMatMap(pb.data.data(), k, n).transpose();
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      MatMap(pb.grad.data(), k, n).noalias() += ConstMatMap(pa.data.data(), m, k).transpose() * g;
    }
  });
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  if (x.ndim() == 0 || bias.numel() != x.shape().back() ||
      (bias.ndim() != 1 && !(bias.ndim() == 2 && bias.dim(0) == 1))) {
    mismatch("add_bias", x.shape(), bias.shape());
  }
  const auto n = bias.numel();
  const auto rows = x.numel() / std::max<std::size_t>(n, 1);
  auto xd = x.data();
  auto bd = bias.data();
  Buffer out(xd.begin(), xd.end());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] += bd[j];
  return Tensor::make_result(x.shape(), std::move(out), {x, bias}, "add_bias",
                             [rows, n](Node& self) {
                               Node& px = parent(self, 0);
                               Node& pb = parent(self, 1);
                               if (px.requires_grad) {
                                 px.ensure_grad();
                                 for (std::size_t i = 0; i < self.grad.size(); ++i)
                                   px.grad[i] += self.grad[i];
                               }
                               if (pb.requires_grad) {
                                 pb.ensure_grad();
                                 for (std::size_t r = 0; r < rows; ++r)
                                   for (std::size_t j = 0; j < n; ++j)
                                     pb.grad[j] += self.grad[r * n + j];
                               }
                             });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  return add_bias(matmul(x, weight), bias);
}

Tensor add(const Tensor& a, const Tensor& b) {
  return elementwise_binary("add", a, b, [](Scalar u, Scalar v) { return u + v; }, [](Node& self) {
    for (std::size_t p = 0; p < 2; ++p) {
      Node& pn = parent(self, p);
      if (!pn.requires_grad) continue;
      pn.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) pn.grad[i] += self.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return elementwise_binary("sub", a, b, [](Scalar u, Scalar v) { return u - v; }, [](Node& self) {
    Node& pa = parent(self, 0);
    Node& pb = parent(self, 1);
    if (pa.requires_grad) {
      pa.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i];
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) pb.grad[i] -= self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return elementwise_binary("mul", a, b, [](Scalar u, Scalar v) { return u * v; }, [](Node& self) {
    Node& pa = parent(self, 0);
    Node& pb = parent(self, 1);
    if (pa.requires_grad) {
      pa.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i] * pb.data[i];
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) pb.grad[i] += self.grad[i] * pa.data[i];
    }
  });
}

Tensor scale(const Tensor& x, Scalar factor) {
  auto xd = x.data();
  Buffer out(xd.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xd[i] * factor;
  return Tensor::make_result(x.shape(), std::move(out), {x}, "scale", [factor](Node& self) {
    Node& px = parent(self, 0);
    px.ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) px.grad[i] += self.grad[i] * factor;
  });
}

Tensor tanh(const Tensor& x) {
  auto xd = x.data();
  Buffer out(xd.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(xd[i]);
  return Tensor::make_result(x.shape(), std::move(out), {x}, "tanh", [](Node& self) {
    Node& px = parent(self, 0);
    px.ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const Scalar y = self.data[i];
      px.grad[i] += self.grad[i] * (Scalar(1) - y * y);
    }
  });
}

Tensor sigmoid(const Tensor& x) {
  auto xd = x.data();
  Buffer out(xd.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const Scalar v = xd[i];
    // Split by sign so exp() never overflows.
    if (v >= 0) {
      out[i] = Scalar(1) / (Scalar(1) + std::exp(-v));
    } else {
      const Scalar e = std::exp(v);
      out[i] = e / (Scalar(1) + e);
    }
  }
  return Tensor::make_result(x.shape(), std::move(out), {x}, "sigmoid", [](Node& self) {
    Node& px = parent(self, 0);
    px.ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const Scalar y = self.data[i];
      px.grad[i] += self.grad[i] * y * (Scalar(1) - y);
    }
  });
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  require_axis("softmax", x, axis);
  if (x.dim(axis) == 0) throw ShapeError("softmax: axis " + std::to_string(axis) + " has size 0");
  const auto s = split_axis(x.shape(), axis);
  auto xd = x.data();
  Buffer out(xd.size());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.len * s.inner + in;
      Scalar mx = xd[base];
      for (std::size_t k = 1; k < s.len; ++k) mx = std::max(mx, xd[base + k * s.inner]);
      Scalar total = 0;
      for (std::size_t k = 0; k < s.len; ++k) {
        const Scalar e = std::exp(xd[base + k * s.inner] - mx);
        out[base + k * s.inner] = e;
        total += e;
      }
      for (std::size_t k = 0; k < s.len; ++k) out[base + k * s.inner] /= total;
    }
  }
  return Tensor::make_result(x.shape(), std::move(out), {x}, "softmax", [s](Node& self) {
    Node& px = parent(self, 0);
    px.ensure_grad();
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t in = 0; in < s.inner; ++in) {
        const std::size_t base = o * s.len * s.inner + in;
        Scalar dot = 0;
        for (std::size_t k = 0; k < s.len; ++k) {
          const auto i = base + k * s.inner;
          dot += self.grad[i] * self.data[i];
        }
        for (std::size_t k = 0; k < s.len; ++k) {
          const auto i = base + k * s.inner;
          px.grad[i] += self.data[i] * (self.grad[i] - dot);
        }
      }
    }
  });
}

Tensor mean(const Tensor& x, std::size_t axis) {
  require_axis("mean", x, axis);
  if (x.dim(axis) == 0) throw ShapeError("mean: axis " + std::to_string(axis) + " has size 0");
  const auto s = split_axis(x.shape(), axis);
  Shape out_shape = x.shape();
  out_shape[axis] = 1;
  auto xd = x.data();
  Buffer out(s.outer * s.inner, Scalar(0));
  const Scalar inv = Scalar(1) / static_cast<Scalar>(s.len);
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t k = 0; k < s.len; ++k)
      for (std::size_t in = 0; in < s.inner; ++in)
        out[o * s.inner + in] += xd[(o * s.len + k) * s.inner + in];
  for (auto& v : out) v *= inv;
  return Tensor::make_result(std::move(out_shape), std::move(out), {x}, "mean", [s, inv](Node& self) {
    Node& px = parent(self, 0);
    px.ensure_grad();
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t k = 0; k < s.len; ++k)
        for (std::size_t in = 0; in < s.inner; ++in)
          px.grad[(o * s.len + k) * s.inner + in] += self.grad[o * s.inner + in] * inv;
  });
}

Tensor sum(const Tensor& x) {
  Scalar total = 0;
  for (auto v : x.data()) total += v;
  return Tensor::make_result({1}, {total}, {x}, "sum", [](Node& self) {
    Node& px = parent(self, 0);
    px.ensure_grad();
    for (auto& g : px.grad) g += self.grad[0];
  });
}

Tensor concat(std::span<const Tensor> parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Tensor& first = parts.front();
  require_axis("concat", first, axis);
  Shape out_shape = first.shape();
  out_shape[axis] = 0;
  std::vector<std::size_t> lens;
  for (const auto& p : parts) {
    Shape a = p.shape();
    Shape b = first.shape();
    if (a.size() != b.size()) mismatch("concat", b, a);
    a[axis] = b[axis] = 0;
    if (a != b) mismatch("concat", first.shape(), p.shape());
    lens.push_back(p.dim(axis));
    out_shape[axis] += p.dim(axis);
  }
  const auto s = split_axis(out_shape, axis);
  Buffer out(shape_numel(out_shape));
  std::size_t offset = 0;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    auto pd = parts[i].data();
    const std::size_t block = lens[i] * s.inner;
    for (std::size_t o = 0; o < s.outer; ++o)
      std::copy_n(pd.begin() + o * block, block, out.begin() + o * s.len * s.inner + offset * s.inner);
    offset += lens[i];
  }
  std::vector<Tensor> parents(parts.begin(), parts.end());
  return Tensor::make_result(std::move(out_shape), std::move(out), std::move(parents), "concat",
                             [s, lens](Node& self) {
                               std::size_t offset = 0;
                               for (std::size_t i = 0; i < lens.size(); ++i) {
                                 Node& p = parent(self, i);
                                 const std::size_t block = lens[i] * s.inner;
                                 if (p.requires_grad) {
                                   p.ensure_grad();
                                   for (std::size_t o = 0; o < s.outer; ++o) {
                                     const Scalar* src = self.grad.data() + o * s.len * s.inner + offset * s.inner;
                                     Scalar* dst = p.grad.data() + o * block;
                                     for (std::size_t j = 0; j < block; ++j) dst[j] += src[j];
                                   }
                                 }
                                 offset += lens[i];
                               }
                             });
}

Tensor concat(std::initializer_list<Tensor> parts, std::size_t axis) {
  return concat(std::span<const Tensor>(parts.begin(), parts.size()), axis);
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end) {
  require_axis("slice", x, axis);
  if (begin > end || end > x.dim(axis)) {
    throw ShapeError("slice: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                     ") invalid for axis " + std::to_string(axis) + " of " + shape_str(x.shape()));
  }
  const auto s = split_axis(x.shape(), axis);
  Shape out_shape = x.shape();
  out_shape[axis] = end - begin;
  const std::size_t block = (end - begin) * s.inner;
  auto xd = x.data();
  Buffer out(s.outer * block);
  for (std::size_t o = 0; o < s.outer; ++o)
    std::copy_n(xd.begin() + (o * s.len + begin) * s.inner, block, out.begin() + o * block);
  return Tensor::make_result(std::move(out_shape), std::move(out), {x}, "slice",
                             [s, begin, block](Node& self) {
                               Node& px = parent(self, 0);
                               px.ensure_grad();
                               for (std::size_t o = 0; o < s.outer; ++o) {
                                 Scalar* dst = px.grad.data() + (o * s.len + begin) * s.inner;
                                 const Scalar* src = self.grad.data() + o * block;
                                 for (std::size_t j = 0; j < block; ++j) dst[j] += src[j];
                               }
                             });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) mismatch("reshape", x.shape(), shape);
  auto xd = x.data();
  return Tensor::make_result(std::move(shape), Buffer(xd.begin(), xd.end()), {x}, "reshape",
                             [](Node& self) {
                               Node& px = parent(self, 0);
                               px.ensure_grad();
                               for (std::size_t i = 0; i < self.grad.size(); ++i) px.grad[i] += self.grad[i];
                             });
}

Tensor tile(const Tensor& x, std::size_t row_reps, std::size_t col_reps) {
  require_2d("tile", x);
  const auto r = x.dim(0), c = x.dim(1);
  const auto rows = r * row_reps, cols = c * col_reps;
  auto xd = x.data();
  Buffer out(rows * cols);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) out[i * cols + j] = xd[(i % r) * c + (j % c)];
  return Tensor::make_result({rows, cols}, std::move(out), {x}, "tile", [r, c, rows, cols](Node& self) {
    Node& px = parent(self, 0);
    px.ensure_grad();
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < cols; ++j) px.grad[(i % r) * c + (j % c)] += self.grad[i * cols + j];
  });
}

Tensor permute_rows(const Tensor& x, std::span<const std::size_t> index) {
  require_2d("permute_rows", x);
  const auto rows = x.dim(0), cols = x.dim(1);
  if (index.size() != rows) {
    throw ShapeError("permute_rows: index has " + std::to_string(index.size()) + " entries for " +
                     shape_str(x.shape()));
  }
  std::vector<char> seen(rows, 0);
  for (auto i : index) {
    if (i >= rows || seen[i]) throw ShapeError("permute_rows: index is not a permutation");
    seen[i] = 1;
  }
  auto xd = x.data();
  Buffer out(xd.size());
  for (std::size_t i = 0; i < rows; ++i) std::copy_n(xd.begin() + index[i] * cols, cols, out.begin() + i * cols);
  std::vector<std::size_t> idx(index.begin(), index.end());
  return Tensor::make_result({rows, cols}, std::move(out), {x}, "permute_rows",
                             [idx = std::move(idx), cols](Node& self) {
                               Node& px = parent(self, 0);
                               px.ensure_grad();
                               for (std::size_t i = 0; i < idx.size(); ++i)
                                 for (std::size_t j = 0; j < cols; ++j)
                                   px.grad[idx[i] * cols + j] += self.grad[i * cols + j];
                             });
}

Tensor l1(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) mismatch("l1", a.shape(), b.shape());
  if (a.numel() == 0) throw ShapeError("l1: empty operands");
  auto x = a.data();
  auto y = b.data();
  Scalar total = 0;
  for (std::size_t i = 0; i < x.size(); ++i) total += std::abs(x[i] - y[i]);
  const Scalar inv = Scalar(1) / static_cast<Scalar>(x.size());
  return Tensor::make_result({1}, {total * inv}, {a, b}, "l1", [inv](Node& self) {
    Node& pa = parent(self, 0);
    Node& pb = parent(self, 1);
    const Scalar g = self.grad[0] * inv;
    for (std::size_t i = 0; i < pa.data.size(); ++i) {
      const Scalar d = pa.data[i] - pb.data[i];
      const Scalar sgn = d > 0 ? Scalar(1) : (d < 0 ? Scalar(-1) : Scalar(0));
      if (pa.requires_grad) {
        pa.ensure_grad();
        pa.grad[i] += g * sgn;
      }
      if (pb.requires_grad) {
        pb.ensure_grad();
        pb.grad[i] -= g * sgn;
      }
    }
  });
}

}  // namespace dwdn::ops
