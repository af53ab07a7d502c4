#include "fedpals/aggregation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>

namespace fedpals {

namespace {

// Dense LU with partial pivoting for the small KKT systems (M <= hundreds).
// Factored in extended precision: the zero-lambda regularization leaves the
// free-set blocks within a hair of singular, and plain double factorizations
// of these Gram matrices lose the solution entirely.
bool lu_factor(std::vector<long double>& a, std::vector<int>& piv, int n) {
  piv.resize(static_cast<size_t>(n));
  for (int col = 0; col < n; ++col) {
    int best = col;
    long double best_abs = std::abs(a[static_cast<size_t>(col) * n + col]);
    for (int row = col + 1; row < n; ++row) {
      const long double v = std::abs(a[static_cast<size_t>(row) * n + col]);
      if (v > best_abs) {
        best_abs = v;
        best = row;
      }
    }
    if (best_abs == 0.0L) return false;
    piv[static_cast<size_t>(col)] = best;
    if (best != col) {
      for (int j = 0; j < n; ++j) {
        std::swap(a[static_cast<size_t>(col) * n + j], a[static_cast<size_t>(best) * n + j]);
      }
    }
    const long double inv_pivot = 1.0L / a[static_cast<size_t>(col) * n + col];
    for (int row = col + 1; row < n; ++row) {
      const long double factor = a[static_cast<size_t>(row) * n + col] * inv_pivot;
      a[static_cast<size_t>(row) * n + col] = factor;
      if (factor != 0.0L) {
        for (int j = col + 1; j < n; ++j) {
          a[static_cast<size_t>(row) * n + j] -= factor * a[static_cast<size_t>(col) * n + j];
        }
      }
    }
  }
  return true;
}

void lu_solve(const std::vector<long double>& lu, const std::vector<int>& piv, int n,
              std::vector<long double>& x) {
  for (int col = 0; col < n; ++col) {
    const int p = piv[static_cast<size_t>(col)];
    if (p != col) std::swap(x[static_cast<size_t>(col)], x[static_cast<size_t>(p)]);
    const long double xc = x[static_cast<size_t>(col)];
    if (xc != 0.0L) {
      for (int row = col + 1; row < n; ++row) {
        x[static_cast<size_t>(row)] -= lu[static_cast<size_t>(row) * n + col] * xc;
      }
    }
  }
  for (int row = n - 1; row >= 0; --row) {
    long double s = x[static_cast<size_t>(row)];
    for (int j = row + 1; j < n; ++j) {
      s -= lu[static_cast<size_t>(row) * n + j] * x[static_cast<size_t>(j)];
    }
    x[static_cast<size_t>(row)] = s / lu[static_cast<size_t>(row) * n + row];
  }
}

// Solves A x = rhs with iterative refinement until the correction stalls.
bool solve_refined(const std::vector<double>& a, const std::vector<double>& rhs, int n,
                   std::vector<double>& x) {
  std::vector<long double> lu(a.begin(), a.end());
  std::vector<int> piv;
  if (!lu_factor(lu, piv, n)) return false;
  std::vector<long double> xl(rhs.begin(), rhs.end());
  lu_solve(lu, piv, n, xl);
  std::vector<long double> correction(static_cast<size_t>(n));
  for (int pass = 0; pass < 30; ++pass) {
    for (int i = 0; i < n; ++i) {
      long double r = rhs[static_cast<size_t>(i)];
      for (int j = 0; j < n; ++j) {
        r -= static_cast<long double>(a[static_cast<size_t>(i) * n + j]) *
             xl[static_cast<size_t>(j)];
      }
      correction[static_cast<size_t>(i)] = r;
    }
    lu_solve(lu, piv, n, correction);
    long double max_corr = 0.0L;
    long double max_x = 0.0L;
    for (int i = 0; i < n; ++i) {
      xl[static_cast<size_t>(i)] += correction[static_cast<size_t>(i)];
      max_corr = std::max(max_corr, std::abs(correction[static_cast<size_t>(i)]));
      max_x = std::max(max_x, std::abs(xl[static_cast<size_t>(i)]));
    }
    if (max_corr <= 1e-18L * (1.0L + max_x)) break;
  }
  x.assign(xl.begin(), xl.end());
  return true;
}

struct Quadratic {
  // f(alpha) = 1/2 alpha^T Q alpha - b^T alpha + c, with
  // Q = 2 (S S^T + lambda diag(1/n)) and b = 2 S T.
  std::vector<double> q;  // M x M row-major
  std::vector<double> b;  // M
  int m = 0;
};

Quadratic build_quadratic(const ClientMarginalSet& clients, const LabelMarginal& target,
                          double lambda) {
  const int m = clients.num_clients();
  const int k = clients.num_classes();
  Quadratic quad;
  quad.m = m;
  quad.q.assign(static_cast<size_t>(m) * m, 0.0);
  quad.b.assign(static_cast<size_t>(m), 0.0);
  for (int i = 0; i < m; ++i) {
    const auto& si = clients.marginals[static_cast<size_t>(i)].probs();
    for (int j = i; j < m; ++j) {
      const auto& sj = clients.marginals[static_cast<size_t>(j)].probs();
      double dot = 0.0;
      for (int y = 0; y < k; ++y) dot += si[static_cast<size_t>(y)] * sj[static_cast<size_t>(y)];
      quad.q[static_cast<size_t>(i) * m + j] = 2.0 * dot;
      quad.q[static_cast<size_t>(j) * m + i] = 2.0 * dot;
    }
    quad.q[static_cast<size_t>(i) * m + i] +=
        2.0 * lambda / static_cast<double>(clients.sizes[static_cast<size_t>(i)]);
    double dot_t = 0.0;
    for (int y = 0; y < k; ++y) dot_t += si[static_cast<size_t>(y)] * target[y];
    quad.b[static_cast<size_t>(i)] = 2.0 * dot_t;
  }
  return quad;
}

double mixture_residual(const ClientMarginalSet& clients, const LabelMarginal& target,
                        const std::vector<double>& alpha) {
  const int k = clients.num_classes();
  double residual = 0.0;
  for (int y = 0; y < k; ++y) {
    double mix = 0.0;
    for (int i = 0; i < clients.num_clients(); ++i) {
      mix += alpha[static_cast<size_t>(i)] * clients.marginals[static_cast<size_t>(i)][y];
    }
    const double r = mix - target[y];
    residual += r * r;
  }
  return residual;
}

double weight_penalty(const std::vector<double>& alpha,
                      const std::vector<std::int64_t>& sizes) {
  double s = 0.0;
  for (size_t i = 0; i < alpha.size(); ++i) {
    s += alpha[i] * alpha[i] / static_cast<double>(sizes[i]);
  }
  return s;
}

}  // namespace

AggregationWeights::AggregationWeights(std::vector<double> alpha) : alpha_(std::move(alpha)) {
  if (alpha_.empty()) throw std::invalid_argument("weights must have at least one entry");
  double sum = 0.0;
  for (double a : alpha_) {
    if (!std::isfinite(a) || a < 0.0) {
      throw std::invalid_argument("weights must be finite and nonnegative");
    }
    sum += a;
  }
  if (std::abs(sum - 1.0) > kSumTolerance) {
    throw std::invalid_argument("weights sum to " + std::to_string(sum) +
                                ", expected 1 within tolerance");
  }
  if (sum != 1.0) {
    for (double& a : alpha_) a /= sum;
  }
}

FedPalsProblem::FedPalsProblem(ClientMarginalSet client_set, LabelMarginal target_marginal,
                               double lambda_value)
    : clients(std::move(client_set)), target(std::move(target_marginal)), lambda(lambda_value) {
  if (clients.num_classes() != target.num_classes()) {
    throw std::invalid_argument("client and target marginals have different class counts");
  }
  if (!std::isfinite(lambda) || lambda < 0.0) {
    throw std::invalid_argument("lambda must be finite and >= 0");
  }
}

AggregationWeights fedavg_weights(const std::vector<std::int64_t>& sizes) {
  if (sizes.empty()) throw std::invalid_argument("size vector is empty");
  std::int64_t total = 0;
  for (std::int64_t n : sizes) {
    if (n < 1) throw std::invalid_argument("client sizes must be >= 1");
    total += n;
  }
  std::vector<double> alpha(sizes.size());
  for (size_t i = 0; i < sizes.size(); ++i) {
    alpha[i] = static_cast<double>(sizes[i]) / static_cast<double>(total);
  }
  return AggregationWeights(std::move(alpha));
}

AggregationWeights project_to_simplex(const std::vector<double>& v) {
  if (v.empty()) throw std::invalid_argument("cannot project an empty vector");
  for (double x : v) {
    if (!std::isfinite(x)) throw std::invalid_argument("cannot project non-finite entries");
  }
  // Sort-based threshold rule: theta is the running-sum threshold of the
  // last sorted entry that stays positive after shifting.
  std::vector<double> u = v;
  std::sort(u.begin(), u.end(), std::greater<double>());
  double running = 0.0;
  double theta = 0.0;
  for (int j = 0; j < static_cast<int>(u.size()); ++j) {
    running += u[static_cast<size_t>(j)];
    const double candidate = (running - 1.0) / static_cast<double>(j + 1);
    if (u[static_cast<size_t>(j)] - candidate > 0.0) {
      theta = candidate;
    }
  }
  std::vector<double> alpha(v.size());
  for (size_t i = 0; i < v.size(); ++i) {
    alpha[i] = std::max(v[i] - theta, 0.0);
  }
  return AggregationWeights(std::move(alpha));
}

// Primal active-set method for min 1/2 a^T Q a - b^T a over the simplex.
// Q is positive definite (a zero lambda request is substituted with
// kZeroLambdaRegularization), so each equality-constrained subproblem has a
// unique solution and the iteration terminates finitely. The KKT systems are
// solved exactly up to refinement, which keeps the near-singular small-lambda
// regime accurate where a fixed-step first-order method stalls.
SolveReport solve_fedpals(const FedPalsProblem& problem, double tol, int max_iters) {
  if (!(tol > 0.0)) throw std::invalid_argument("tol must be > 0");
  if (max_iters < 1) throw std::invalid_argument("max_iters must be >= 1");

  const int m = problem.clients.num_clients();
  const double lambda_eff =
      problem.lambda == 0.0 ? kZeroLambdaRegularization : problem.lambda;
  const Quadratic quad = build_quadratic(problem.clients, problem.target, lambda_eff);

  double qnorm = 0.0;
  for (double x : quad.q) qnorm = std::max(qnorm, std::abs(x));
  const double dual_tol = tol * std::max(1.0, qnorm);
  constexpr double kFeasTol = 1e-11;

  std::vector<double> alpha = fedavg_weights(problem.clients.sizes).values();
  std::vector<bool> free_coord(static_cast<size_t>(m), true);

  int iterations = 0;
  bool converged = false;
  std::vector<double> kkt;
  std::vector<double> rhs;
  std::vector<double> sol;
  std::vector<int> free_index;

  while (iterations < max_iters) {
    ++iterations;
    free_index.clear();
    for (int i = 0; i < m; ++i) {
      if (free_coord[static_cast<size_t>(i)]) free_index.push_back(i);
    }
    const int f = static_cast<int>(free_index.size());
    const int dim = f + 1;

    // KKT system for the equality-constrained subproblem on the free set:
    // [Q_FF 1; 1^T 0] [x; nu] = [b_F; 1].
    kkt.assign(static_cast<size_t>(dim) * dim, 0.0);
    rhs.assign(static_cast<size_t>(dim), 0.0);
    for (int r = 0; r < f; ++r) {
      for (int c = 0; c < f; ++c) {
        kkt[static_cast<size_t>(r) * dim + c] =
            quad.q[static_cast<size_t>(free_index[static_cast<size_t>(r)]) * m +
                   free_index[static_cast<size_t>(c)]];
      }
      kkt[static_cast<size_t>(r) * dim + f] = 1.0;
      kkt[static_cast<size_t>(f) * dim + r] = 1.0;
      rhs[static_cast<size_t>(r)] = quad.b[static_cast<size_t>(free_index[static_cast<size_t>(r)])];
    }
    rhs[static_cast<size_t>(f)] = 1.0;

    if (!solve_refined(kkt, rhs, dim, sol)) {
      throw std::runtime_error("weight subproblem is singular");
    }
    const double nu = sol[static_cast<size_t>(f)];

    double min_x = std::numeric_limits<double>::infinity();
    for (int r = 0; r < f; ++r) min_x = std::min(min_x, sol[static_cast<size_t>(r)]);

    if (min_x >= -kFeasTol) {
      // Subproblem solution is feasible; adopt it and check bound multipliers.
      std::fill(alpha.begin(), alpha.end(), 0.0);
      for (int r = 0; r < f; ++r) {
        alpha[static_cast<size_t>(free_index[static_cast<size_t>(r)])] =
            std::max(sol[static_cast<size_t>(r)], 0.0);
      }
      // Free coordinates satisfy g_i = -nu; a bound coordinate is optimal
      // when moving mass into it cannot decrease the objective: g_i + nu >= 0.
      int release = -1;
      double worst = -dual_tol;
      for (int i = 0; i < m; ++i) {
        if (free_coord[static_cast<size_t>(i)]) continue;
        double g = -quad.b[static_cast<size_t>(i)];
        for (int j = 0; j < m; ++j) {
          g += quad.q[static_cast<size_t>(i) * m + j] * alpha[static_cast<size_t>(j)];
        }
        const double multiplier = g + nu;
        if (multiplier < worst) {
          worst = multiplier;
          release = i;
        }
      }
      if (release < 0) {
        converged = true;
        break;
      }
      free_coord[static_cast<size_t>(release)] = true;
    } else {
      // Partial step toward the subproblem solution; the first coordinate to
      // reach zero leaves the free set. Ties break on the lowest index.
      double step = 1.0;
      int blocking = -1;
      for (int r = 0; r < f; ++r) {
        const int i = free_index[static_cast<size_t>(r)];
        const double target_x = sol[static_cast<size_t>(r)];
        const double current = alpha[static_cast<size_t>(i)];
        if (target_x < current) {
          const double t = current / (current - target_x);
          if (t < step) {
            step = t;
            blocking = i;
          }
        }
      }
      for (int r = 0; r < f; ++r) {
        const int i = free_index[static_cast<size_t>(r)];
        alpha[static_cast<size_t>(i)] +=
            step * (sol[static_cast<size_t>(r)] - alpha[static_cast<size_t>(i)]);
        if (alpha[static_cast<size_t>(i)] < 0.0) alpha[static_cast<size_t>(i)] = 0.0;
      }
      if (blocking >= 0 && f > 1) {
        alpha[static_cast<size_t>(blocking)] = 0.0;
        free_coord[static_cast<size_t>(blocking)] = false;
      }
    }
  }

  double sum = std::accumulate(alpha.begin(), alpha.end(), 0.0);
  for (double& a : alpha) a /= sum;

  SolveReport report{AggregationWeights(alpha), 0.0, 0.0, 0.0, iterations, converged};
  report.residual = mixture_residual(problem.clients, problem.target, alpha);
  const double penalty = weight_penalty(alpha, problem.clients.sizes);
  report.ess = 1.0 / penalty;
  report.objective = report.residual + problem.lambda * penalty;
  return report;
}

AggregationWeights fedpals_limit_weights(const ClientMarginalSet& clients,
                                         const LabelMarginal& target, WeightLimit limit) {
  if (limit == WeightLimit::kLambdaToInfinity) {
    return fedavg_weights(clients.sizes);
  }
  return solve_fedpals(FedPalsProblem(clients, target, 0.0)).weights;
}

double effective_sample_size(const AggregationWeights& alpha,
                             const std::vector<std::int64_t>& sizes) {
  if (static_cast<size_t>(alpha.size()) != sizes.size()) {
    throw std::invalid_argument("weight and size vectors have different lengths");
  }
  for (std::int64_t n : sizes) {
    if (n < 1) throw std::invalid_argument("client sizes must be >= 1");
  }
  double denom = 0.0;
  for (int i = 0; i < alpha.size(); ++i) {
    denom += alpha[i] * alpha[i] / static_cast<double>(sizes[static_cast<size_t>(i)]);
  }
  return 1.0 / denom;
}

EssSearchResult lambda_for_ess(const ClientMarginalSet& clients, const LabelMarginal& target,
                               double target_fraction, double rel_tol) {
  if (!(target_fraction > 0.0) || target_fraction > 1.0) {
    throw std::invalid_argument("target fraction must lie in (0, 1]");
  }
  if (!(rel_tol > 0.0)) throw std::invalid_argument("rel_tol must be > 0");

  const double total = static_cast<double>(clients.total_size());
  const int k = clients.num_classes();

  // T equal to the size-weighted client mixture makes ESS/N identically 1.
  const AggregationWeights fa = fedavg_weights(clients.sizes);
  double mix_gap = 0.0;
  for (int y = 0; y < k; ++y) {
    double mix = 0.0;
    for (int i = 0; i < clients.num_clients(); ++i) {
      mix += fa[i] * clients.marginals[static_cast<size_t>(i)][y];
    }
    mix_gap = std::max(mix_gap, std::abs(mix - target[y]));
  }
  if (mix_gap < 1e-12) {
    if (target_fraction < 1.0 - rel_tol) {
      throw std::runtime_error("degenerate: target equals client aggregate");
    }
    return {0.0, 1.0, false};
  }

  const auto fraction_at = [&](double lambda) {
    const SolveReport r = solve_fedpals(FedPalsProblem(clients, target, lambda));
    return r.ess / total;
  };

  const double floor_fraction = fraction_at(0.0);
  if (floor_fraction >= target_fraction) {
    return {0.0, floor_fraction, floor_fraction > target_fraction * (1.0 + rel_tol)};
  }

  double lo = 0.0;
  double hi = 1.0;
  double hi_fraction = fraction_at(hi);
  int expansions = 0;
  while (hi_fraction < target_fraction * (1.0 - rel_tol) && expansions < 400) {
    lo = hi;
    hi *= 4.0;
    hi_fraction = fraction_at(hi);
    ++expansions;
  }
  if (std::abs(hi_fraction - target_fraction) <= rel_tol * target_fraction) {
    return {hi, hi_fraction, false};
  }

  double mid = hi;
  double mid_fraction = hi_fraction;
  for (int iter = 0; iter < 200; ++iter) {
    mid = 0.5 * (lo + hi);
    mid_fraction = fraction_at(mid);
    if (std::abs(mid_fraction - target_fraction) <= rel_tol * target_fraction) {
      return {mid, mid_fraction, false};
    }
    if (mid_fraction < target_fraction) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  return {mid, mid_fraction, false};
}

}  // namespace fedpals
