#include "otfuse/tensor.hpp"

#include <cmath>
#include <sstream>

namespace otfuse {

const char *error_kind_name(ErrorKind kind) {
  switch (kind) {
  case ErrorKind::Shape:
    return "shape-mismatch";
  case ErrorKind::InvalidArg:
    return "invalid-argument";
  case ErrorKind::Numeric:
    return "numeric";
  case ErrorKind::Solver:
    return "solver-failure";
  case ErrorKind::Heterogeneous:
    return "heterogeneous";
  case ErrorKind::Io:
    return "bad-file";
  case ErrorKind::BadMagic:
    return "bad-magic";
  case ErrorKind::UnknownVersion:
    return "unknown-version";
  case ErrorKind::Truncated:
    return "truncated-payload";
  case ErrorKind::Inconsistent:
    return "inconsistent-directory";
  case ErrorKind::Config:
    return "config";
  }
  return "unknown";
}

std::size_t shape_numel(const Shape &shape) {
  std::size_t n = 1;
  for (auto e : shape)
    n *= e;
  return n;
}

std::string shape_str(const Shape &shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i)
      os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

template <typename T> bool all_finite(const BasicTensor<T> &t) {
  for (auto v : t.data())
    if (!std::isfinite(v))
      return false;
  return true;
}

template <typename T> BasicTensor<T> transpose(const BasicTensor<T> &a) {
  if (a.rank() != 2)
    throw Error(ErrorKind::Shape, "transpose needs a matrix, got " +
                                      shape_str(a.shape()));
  BasicTensor<T> out({a.cols(), a.rows()});
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j)
      out(j, i) = a(i, j);
  return out;
}

template bool all_finite(const BasicTensor<float> &);
template bool all_finite(const BasicTensor<double> &);
template BasicTensor<float> transpose(const BasicTensor<float> &);
template BasicTensor<double> transpose(const BasicTensor<double> &);

} // namespace otfuse
