#include "otfuse/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace otfuse {

namespace {

template <typename T>
void require_matrix(const BasicTensor<T> &t, const char *what) {
  if (t.rank() != 2)
    throw Error(ErrorKind::Shape,
                std::string(what) + " expects a matrix, got " +
                    shape_str(t.shape()));
}

} // namespace

template <typename T>
BasicTensor<T> matmul(const BasicTensor<T> &a, const BasicTensor<T> &b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  if (a.cols() != b.rows())
    throw Error(ErrorKind::Shape, "matmul inner dimensions differ: " +
                                      shape_str(a.shape()) + " x " +
                                      shape_str(b.shape()));
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  BasicTensor<T> out({m, n});
  std::vector<double> acc(n);
  for (std::size_t i = 0; i < m; ++i) {
    std::fill(acc.begin(), acc.end(), 0.0);
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a(i, p);
      if (av == 0.0)
        continue;
      const T *brow = &b(p, 0);
      for (std::size_t j = 0; j < n; ++j)
        acc[j] += av * static_cast<double>(brow[j]);
    }
    for (std::size_t j = 0; j < n; ++j)
      out(i, j) = static_cast<T>(acc[j]);
  }
  return out;
}

template <typename T>
BasicTensor<T> matmul_tn(const BasicTensor<T> &a, const BasicTensor<T> &b) {
  require_matrix(a, "matmul_tn");
  require_matrix(b, "matmul_tn");
  if (a.rows() != b.rows())
    throw Error(ErrorKind::Shape, "matmul_tn inner dimensions differ: " +
                                      shape_str(a.shape()) + "^T x " +
                                      shape_str(b.shape()));
  const std::size_t k = a.rows(), m = a.cols(), n = b.cols();
  std::vector<double> acc(m * n, 0.0);
  for (std::size_t p = 0; p < k; ++p) {
    const T *brow = &b(p, 0);
    for (std::size_t i = 0; i < m; ++i) {
      const double av = a(p, i);
      if (av == 0.0)
        continue;
      double *orow = &acc[i * n];
      for (std::size_t j = 0; j < n; ++j)
        orow[j] += av * static_cast<double>(brow[j]);
    }
  }
  BasicTensor<T> out({m, n});
  for (std::size_t i = 0; i < m * n; ++i)
    out[i] = static_cast<T>(acc[i]);
  return out;
}

template Tensor matmul(const Tensor &, const Tensor &);
template Matrix matmul(const Matrix &, const Matrix &);
template Tensor matmul_tn(const Tensor &, const Tensor &);
template Matrix matmul_tn(const Matrix &, const Matrix &);

Tensor softmax_rows(const Tensor &a) {
  require_matrix(a, "softmax_rows");
  Tensor out(a.shape());
  const std::size_t n = a.cols();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto in = a.row(i);
    double mx = *std::max_element(in.begin(), in.end());
    double sum = 0.0;
    std::vector<double> e(n);
    for (std::size_t j = 0; j < n; ++j) {
      e[j] = std::exp(static_cast<double>(in[j]) - mx);
      sum += e[j];
    }
    for (std::size_t j = 0; j < n; ++j)
      out(i, j) = static_cast<float>(e[j] / sum);
  }
  return out;
}

Tensor layer_norm(const Tensor &x, const Tensor &alpha, const Tensor &beta,
                  float eps) {
  if (x.rank() == 0)
    throw Error(ErrorKind::Shape, "layer_norm needs at least one axis");
  const std::size_t d = x.shape().back();
  if (alpha.size() != d || beta.size() != d)
    throw Error(ErrorKind::Shape, "layer_norm parameter length " +
                                      std::to_string(alpha.size()) +
                                      " does not match last axis " +
                                      std::to_string(d));
  Tensor out(x.shape());
  const std::size_t vectors = d == 0 ? 0 : x.size() / d;
  for (std::size_t v = 0; v < vectors; ++v) {
    const float *in = &x[v * d];
    double mean = 0.0;
    for (std::size_t i = 0; i < d; ++i)
      mean += in[i];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      double c = in[i] - mean;
      var += c * c;
    }
    var /= static_cast<double>(d);
    double denom = std::sqrt(var + eps);
    for (std::size_t i = 0; i < d; ++i) {
      double xhat = denom > 0.0 ? (in[i] - mean) / denom : 0.0;
      out[v * d + i] = static_cast<float>(xhat * alpha[i] + beta[i]);
    }
  }
  return out;
}

double gelu_scalar(double x) {
  return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2));
}

double gelu_grad_scalar(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
  const double pdf =
      std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

Tensor gelu(const Tensor &x) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i)
    out[i] = static_cast<float>(gelu_scalar(x[i]));
  return out;
}

namespace {

template <typename T>
BasicTensor<T> sq_dist_impl(const BasicTensor<T> &x, const BasicTensor<T> &y) {
  require_matrix(x, "pairwise_sq_dist");
  require_matrix(y, "pairwise_sq_dist");
  if (x.cols() != y.cols())
    throw Error(ErrorKind::Shape, "pairwise_sq_dist feature dimensions differ: " +
                                      shape_str(x.shape()) + " vs " +
                                      shape_str(y.shape()));
  const bool self = &x == &y;
  const std::size_t d = x.cols();
  BasicTensor<T> out({x.rows(), y.rows()});
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const T *xi = &x(i, 0);
    for (std::size_t j = 0; j < y.rows(); ++j) {
      if (self && i == j)
        continue;
      const T *yj = &y(j, 0);
      double acc = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        double diff = static_cast<double>(xi[k]) - static_cast<double>(yj[k]);
        acc += diff * diff;
      }
      out(i, j) = static_cast<T>(acc);
    }
  }
  return out;
}

} // namespace

Matrix pairwise_sq_dist(const Matrix &x, const Matrix &y) {
  return sq_dist_impl(x, y);
}
Tensor pairwise_sq_dist(const Tensor &x, const Tensor &y) {
  return sq_dist_impl(x, y);
}

} // namespace otfuse
