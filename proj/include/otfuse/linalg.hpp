#pragma once

#include "otfuse/tensor.hpp"

namespace otfuse {

// All products accumulate in double regardless of element type.
template <typename T>
BasicTensor<T> matmul(const BasicTensor<T> &a, const BasicTensor<T> &b);

// aᵀ·b without materializing the transpose.
template <typename T>
BasicTensor<T> matmul_tn(const BasicTensor<T> &a, const BasicTensor<T> &b);

Tensor softmax_rows(const Tensor &a);

// Standardizes over the last axis then applies alpha/beta.
Tensor layer_norm(const Tensor &x, const Tensor &alpha, const Tensor &beta,
                  float eps);

// Exact erf form x * Phi(x).
Tensor gelu(const Tensor &x);
double gelu_scalar(double x);
double gelu_grad_scalar(double x);

Matrix pairwise_sq_dist(const Matrix &x, const Matrix &y);
Tensor pairwise_sq_dist(const Tensor &x, const Tensor &y);

} // namespace otfuse
