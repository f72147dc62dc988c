#pragma once

#include <cstddef>
#include <vector>

#include "otfuse/tensor.hpp"

namespace otfuse::ot {

struct CostMatrix {
  Matrix c;
  bool normalized = false;
};

// Coupling between n source and m target neurons. `lambda == 0` marks an
// exact (assignment) plan.
struct TransportPlan {
  Matrix t;
  std::vector<double> row_marginal;
  std::vector<double> col_marginal;
  double lambda = 0.0;
  // Sinkhorn diagnostics; zero for exact plans.
  std::size_t iterations = 0;
  double marginal_violation = 0.0;
  bool converged = true;
};

// Column-stochastic map from source neurons (rows) to target neurons
// (columns). Applied as Mᵀ·W on an input axis and W·M on an output axis.
struct AlignmentMap {
  Matrix m;

  std::size_t source_size() const { return m.rows(); }
  std::size_t target_size() const { return m.cols(); }
  static AlignmentMap identity(std::size_t n) {
    return AlignmentMap{Matrix::identity(n)};
  }
  // True when every entry is exactly 0 or 1 and the matrix is square with
  // one 1 per row and column.
  bool is_permutation() const;
};

struct SinkhornOptions {
  double tol = 1e-9;
  std::size_t max_iter = 10000;
};

CostMatrix build_cost_matrix(const Matrix &x, const Matrix &y,
                             bool normalize_features, bool normalize_cost);

// Exact plan for a square cost under uniform marginals, returned as (1/n)·P.
TransportPlan solve_emd(const CostMatrix &cost);

// Row assignment minimizing sum_i c(i, col[i]); O(n^3) shortest augmenting
// paths. Exposed for the oracle tests.
std::vector<std::size_t> solve_assignment(const Matrix &c);

TransportPlan solve_sinkhorn(const CostMatrix &cost, double lambda,
                             const SinkhornOptions &options = {});

AlignmentMap to_alignment_map(const TransportPlan &plan);

// <T, C> in double.
double transport_cost(const TransportPlan &plan, const CostMatrix &cost);

// Max absolute deviation of row and column sums from the marginals.
double marginal_violation(const Matrix &t, const std::vector<double> &a,
                          const std::vector<double> &b);

} // namespace otfuse::ot
