#include "otfuse/ot.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>

#include "otfuse/linalg.hpp"

namespace otfuse::ot {

bool AlignmentMap::is_permutation() const {
  if (m.rank() != 2 || m.rows() != m.cols())
    return false;
  const std::size_t n = m.rows();
  std::vector<int> col_hits(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    int row_hits = 0;
    for (std::size_t j = 0; j < n; ++j) {
      double v = m(i, j);
      if (v == 1.0) {
        ++row_hits;
        ++col_hits[j];
      } else if (v != 0.0) {
        return false;
      }
    }
    if (row_hits != 1)
      return false;
  }
  return std::all_of(col_hits.begin(), col_hits.end(),
                     [](int h) { return h == 1; });
}

CostMatrix build_cost_matrix(const Matrix &x, const Matrix &y,
                             bool normalize_features, bool normalize_cost) {
  if (x.rank() != 2 || y.rank() != 2 || x.cols() != y.cols())
    throw Error(ErrorKind::Shape, "cost features differ: " +
                                      shape_str(x.shape()) + " vs " +
                                      shape_str(y.shape()));
  if (x.cols() == 0)
    throw Error(ErrorKind::InvalidArg, "cost features need d >= 1");
  if (!all_finite(x) || !all_finite(y))
    throw Error(ErrorKind::Numeric, "non-finite neuron features");

  auto unit_rows = [](const Matrix &in) {
    Matrix out = in;
    for (std::size_t i = 0; i < out.rows(); ++i) {
      auto r = out.row(i);
      double norm = 0.0;
      for (double v : r)
        norm += v * v;
      norm = std::sqrt(norm);
      if (norm > 0.0)
        for (double &v : r)
          v /= norm;
    }
    return out;
  };

  CostMatrix cost;
  if (normalize_features)
    cost.c = pairwise_sq_dist(unit_rows(x), unit_rows(y));
  else
    cost.c = pairwise_sq_dist(x, y);

  if (normalize_cost) {
    double mx = 0.0;
    for (double v : cost.c.data())
      mx = std::max(mx, v);
    if (mx > 0.0)
      for (double &v : cost.c.data())
        v /= mx;
    cost.normalized = true;
  }
  return cost;
}

std::vector<std::size_t> solve_assignment(const Matrix &c) {
  if (c.rank() != 2 || c.rows() != c.cols())
    throw Error(ErrorKind::Shape, "assignment needs a square cost, got " +
                                      shape_str(c.shape()));
  const std::size_t n = c.rows();
  constexpr double inf = std::numeric_limits<double>::infinity();
  // 1-based potentials; column 0 is the virtual root of each augmentation.
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<std::size_t> match(n + 1, 0), way(n + 1, 0);
  for (std::size_t row = 1; row <= n; ++row) {
    match[0] = row;
    std::size_t col0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<char> used(n + 1, 0);
    do {
      used[col0] = 1;
      const std::size_t i0 = match[col0];
      double delta = inf;
      std::size_t col1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j])
          continue;
        double cur = c(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = col0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          col1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[match[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      col0 = col1;
    } while (match[col0] != 0);
    do {
      std::size_t col1 = way[col0];
      match[col0] = match[col1];
      col0 = col1;
    } while (col0 != 0);
  }
  std::vector<std::size_t> assignment(n);
  for (std::size_t j = 1; j <= n; ++j)
    assignment[match[j] - 1] = j - 1;
  return assignment;
}

TransportPlan solve_emd(const CostMatrix &cost) {
  const Matrix &c = cost.c;
  if (c.rank() != 2 || c.rows() != c.cols())
    throw Error(ErrorKind::InvalidArg,
                "exact EMD is restricted to square costs with uniform "
                "marginals (got " +
                    shape_str(c.shape()) +
                    "); use the Sinkhorn solver for rectangular problems");
  if (!all_finite(c))
    throw Error(ErrorKind::Numeric, "non-finite cost matrix");
  const std::size_t n = c.rows();
  auto assignment = solve_assignment(c);
  TransportPlan plan;
  plan.t = Matrix({n, n});
  const double mass = 1.0 / static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i)
    plan.t(i, assignment[i]) = mass;
  plan.row_marginal.assign(n, mass);
  plan.col_marginal.assign(n, mass);
  plan.lambda = 0.0;
  return plan;
}

namespace {

double log_sum_exp(const double *v, std::size_t n, std::size_t stride) {
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < n; ++i)
    mx = std::max(mx, v[i * stride]);
  if (!std::isfinite(mx))
    return mx;
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    s += std::exp(v[i * stride] - mx);
  return mx + std::log(s);
}

} // namespace

namespace {
constexpr std::size_t kAnnealSweeps = 20;
constexpr std::size_t kSweepsBeforeNewton = 200;
} // namespace

TransportPlan solve_sinkhorn(const CostMatrix &cost, double lambda,
                             const SinkhornOptions &options) {
  if (!(lambda > 0.0) || !std::isfinite(lambda))
    throw Error(ErrorKind::InvalidArg,
                "Sinkhorn regularizer must be positive and finite");
  const Matrix &c = cost.c;
  if (c.rank() != 2 || c.rows() == 0 || c.cols() == 0)
    throw Error(ErrorKind::Shape, "Sinkhorn needs a non-empty cost matrix");
  if (!all_finite(c))
    throw Error(ErrorKind::Numeric, "non-finite cost matrix");

  const std::size_t n = c.rows(), m = c.cols();
  const double log_a = -std::log(static_cast<double>(n));
  const double log_b = -std::log(static_cast<double>(m));

  // Dual potentials f, g; plan_ij = exp((f_i + g_j - c_ij) / lambda).
  std::vector<double> f(n, 0.0), g(m, 0.0), scratch(std::max(n, m));
  Matrix plan({n, m});
  std::vector<double> a(n, 1.0 / static_cast<double>(n));
  std::vector<double> b(m, 1.0 / static_cast<double>(m));

  auto update_f = [&] {
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < m; ++j)
        scratch[j] = (g[j] - c(i, j)) / lambda;
      f[i] = lambda * (log_a - log_sum_exp(scratch.data(), m, 1));
    }
  };
  auto update_g = [&] {
    for (std::size_t j = 0; j < m; ++j) {
      for (std::size_t i = 0; i < n; ++i)
        scratch[i] = (f[i] - c(i, j)) / lambda;
      g[j] = lambda * (log_b - log_sum_exp(scratch.data(), n, 1));
    }
  };
  auto fill_plan = [&] {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j)
        plan(i, j) = std::exp((f[i] + g[j] - c(i, j)) / lambda);
  };

  // Warm start by annealing the regularizer down from the cost scale; the
  // potentials carry over because they live in cost units.
  double cmax = 0.0;
  for (double v : c.data())
    cmax = std::max(cmax, std::abs(v));
  const double target = lambda;
  for (double stage = cmax; stage > 2.0 * target; stage *= 0.5) {
    lambda = stage;
    for (std::size_t k = 0; k < kAnnealSweeps; ++k) {
      update_f();
      update_g();
    }
  }
  lambda = target;

  TransportPlan result;
  result.converged = false;
  double violation = std::numeric_limits<double>::infinity();
  std::size_t it = 0;
  while (it < options.max_iter) {
    update_f();
    update_g();
    ++it;
    // Columns are exact after the g-update; check rows every few sweeps.
    if (it % 10 == 0 || it == options.max_iter) {
      fill_plan();
      violation = marginal_violation(plan, a, b);
      if (violation < options.tol) {
        result.converged = true;
        break;
      }
      if (it >= kSweepsBeforeNewton)
        break;
    }
  }

  // Small lambda makes the sweeps crawl. Polish with Newton steps on g, the
  // rows being solved exactly through f, and fall back to sweeps whenever a
  // step fails to reduce the violation.
  std::vector<double> g_prev(m), f_prev(n), col(m);
  Eigen::MatrixXd jac(m, m);
  Eigen::VectorXd resid(m);
  while (!result.converged && it < options.max_iter) {
    ++it;
    update_f();
    fill_plan();
    const double start = marginal_violation(plan, a, b);
    for (std::size_t j = 0; j < m; ++j) {
      col[j] = 0.0;
      for (std::size_t i = 0; i < n; ++i)
        col[j] += plan(i, j);
      resid(static_cast<Eigen::Index>(j)) = col[j] - b[j];
    }
    jac.setZero();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) {
        const double pij = plan(i, j) / a[i];
        if (pij == 0.0)
          continue;
        for (std::size_t k = 0; k < m; ++k)
          jac(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(k)) -=
              pij * plan(i, k);
      }
    double trace = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      jac(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(j)) += col[j];
      trace += jac(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(j));
    }
    // The constant shift of g is a null direction; pin it with a rank-one term.
    jac.array() += trace / static_cast<double>(m * m);
    Eigen::LDLT<Eigen::MatrixXd> ldlt(jac);
    bool stepped = false;
    if (ldlt.info() == Eigen::Success) {
      Eigen::VectorXd step = -lambda * ldlt.solve(resid);
      if (step.allFinite()) {
        g_prev = g;
        f_prev = f;
        double t = 1.0;
        for (int tries = 0; tries < 30 && !stepped; ++tries, t *= 0.5) {
          for (std::size_t j = 0; j < m; ++j)
            g[j] = g_prev[j] + t * step(static_cast<Eigen::Index>(j));
          update_f();
          fill_plan();
          violation = marginal_violation(plan, a, b);
          stepped = violation < start;
        }
        if (!stepped) {
          g = g_prev;
          f = f_prev;
        }
      }
    }
    if (!stepped) {
      update_f();
      update_g();
      update_f();
      fill_plan();
      violation = marginal_violation(plan, a, b);
    }
    if (violation < options.tol)
      result.converged = true;
  }
  fill_plan();
  violation = marginal_violation(plan, a, b);
  result.converged = violation < options.tol;
  result.t = std::move(plan);
  result.row_marginal = std::move(a);
  result.col_marginal = std::move(b);
  result.lambda = lambda;
  result.iterations = it;
  result.marginal_violation = violation;
  return result;
}

AlignmentMap to_alignment_map(const TransportPlan &plan) {
  const Matrix &t = plan.t;
  if (t.rank() != 2)
    throw Error(ErrorKind::Shape, "transport plan must be a matrix");
  AlignmentMap out{Matrix(t.shape())};
  for (std::size_t j = 0; j < t.cols(); ++j) {
    double sum = 0.0;
    for (std::size_t i = 0; i < t.rows(); ++i)
      sum += t(i, j);
    if (!(sum > 0.0))
      throw Error(ErrorKind::Solver, "transport plan column " +
                                         std::to_string(j) +
                                         " carries no mass");
    for (std::size_t i = 0; i < t.rows(); ++i)
      out.m(i, j) = t(i, j) / sum;
  }
  return out;
}

double transport_cost(const TransportPlan &plan, const CostMatrix &cost) {
  if (plan.t.shape() != cost.c.shape())
    throw Error(ErrorKind::Shape, "plan/cost shapes differ");
  double total = 0.0;
  for (std::size_t i = 0; i < plan.t.size(); ++i)
    total += plan.t[i] * cost.c[i];
  return total;
}

double marginal_violation(const Matrix &t, const std::vector<double> &a,
                          const std::vector<double> &b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < t.rows(); ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < t.cols(); ++j)
      s += t(i, j);
    worst = std::max(worst, std::abs(s - a[i]));
  }
  for (std::size_t j = 0; j < t.cols(); ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < t.rows(); ++i)
      s += t(i, j);
    worst = std::max(worst, std::abs(s - b[j]));
  }
  return worst;
}

} // namespace otfuse::ot
