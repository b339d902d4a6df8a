#pragma once

#include <span>
#include <vector>

#include "dwdn/tensor.hpp"

// Differentiable op suite. Shapes are checked when an op is applied; there is
// no implicit broadcasting. The only broadcast is add_bias over the trailing
// axis, and tile() is the explicit way to repeat a tensor.
namespace dwdn::ops {

/// [m, k] x [k, n] -> [m, n]
Tensor matmul(const Tensor& a, const Tensor& b);
/// x [..., n] + bias [n]
Tensor add_bias(const Tensor& x, const Tensor& bias);
/// x·weight + bias, weight [in, out].
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, Scalar factor);

Tensor tanh(const Tensor& x);
Tensor sigmoid(const Tensor& x);

Tensor softmax(const Tensor& x, std::size_t axis);
/// Mean over `axis`; the axis is kept with size 1.
Tensor mean(const Tensor& x, std::size_t axis);
/// Sum of all elements -> shape [1].
Tensor sum(const Tensor& x);

Tensor concat(std::span<const Tensor> parts, std::size_t axis);
Tensor concat(std::initializer_list<Tensor> parts, std::size_t axis);
/// Elements [begin, end) along `axis`.
Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end);
Tensor reshape(const Tensor& x, Shape shape);
/// 2-d tile: [r, c] -> [r·row_reps, c·col_reps]; out(i, j) = x(i mod r, j mod c).
Tensor tile(const Tensor& x, std::size_t row_reps, std::size_t col_reps);
/// 2-d row gather: out row i = x row index[i]. `index` must be a permutation.
Tensor permute_rows(const Tensor& x, std::span<const std::size_t> index);

/// Mean absolute difference over all elements -> shape [1].
///
/// The L1 terms of the training objective use this mean convention so loss
/// magnitudes do not depend on tensor size.
Tensor l1(const Tensor& a, const Tensor& b);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }

}  // namespace dwdn::ops
