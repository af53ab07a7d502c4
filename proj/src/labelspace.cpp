#include "fedpals/labelspace.hpp"

#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

#include "fedpals/aggregation.hpp"

namespace fedpals {

LabelMarginal::LabelMarginal(std::vector<double> probs) : probs_(std::move(probs)) {
  if (probs_.empty()) {
    throw std::invalid_argument("marginal must have at least one class");
  }
  double sum = 0.0;
  for (double p : probs_) {
    if (!std::isfinite(p) || p < 0.0) {
      throw std::invalid_argument("marginal entries must be finite and nonnegative");
    }
    sum += p;
  }
  if (std::abs(sum - 1.0) > kSumTolerance) {
    throw std::invalid_argument("marginal entries sum to " + std::to_string(sum) +
                                ", expected 1 within tolerance");
  }
  if (sum != 1.0) {
    for (double& p : probs_) p /= sum;
  }
}

ClientMarginalSet::ClientMarginalSet(std::vector<LabelMarginal> client_marginals,
                                     std::vector<std::int64_t> client_sizes)
    : marginals(std::move(client_marginals)), sizes(std::move(client_sizes)) {
  if (marginals.empty()) {
    throw std::invalid_argument("marginal set must contain at least one client");
  }
  if (marginals.size() != sizes.size()) {
    throw std::invalid_argument("marginal count and size count differ");
  }
  const int k = marginals.front().num_classes();
  for (const auto& m : marginals) {
    if (m.num_classes() != k) {
      throw std::invalid_argument("all client marginals must share the same class count");
    }
  }
  for (std::int64_t n : sizes) {
    if (n < 1) throw std::invalid_argument("client sizes must be >= 1");
  }
}

std::int64_t ClientMarginalSet::total_size() const {
  return std::accumulate(sizes.begin(), sizes.end(), std::int64_t{0});
}

LabelMarginal empirical_marginal(const std::vector<int>& labels, int num_classes) {
  if (labels.empty()) throw std::invalid_argument("empty dataset");
  if (num_classes < 1) throw std::invalid_argument("class count must be >= 1");
  std::vector<std::int64_t> counts(static_cast<size_t>(num_classes), 0);
  for (int y : labels) {
    if (y < 0 || y >= num_classes) {
      throw std::invalid_argument("label " + std::to_string(y) + " outside [0, " +
                                  std::to_string(num_classes) + ")");
    }
    ++counts[static_cast<size_t>(y)];
  }
  std::vector<double> probs(static_cast<size_t>(num_classes));
  const double n = static_cast<double>(labels.size());
  for (size_t k = 0; k < probs.size(); ++k) {
    probs[k] = static_cast<double>(counts[k]) / n;
  }
  return LabelMarginal(std::move(probs));
}

CoverageResult check_coverage(const LabelMarginal& target,
                              const ClientMarginalSet& clients, double tol) {
  if (target.num_classes() != clients.num_classes()) {
    throw std::invalid_argument("target and client marginals have different class counts");
  }
  const double residual = projection_distance(target, clients);
  return {residual <= tol, residual};
}

double projection_distance(const LabelMarginal& target,
                           const ClientMarginalSet& clients) {
  if (target.num_classes() != clients.num_classes()) {
    throw std::invalid_argument("target and client marginals have different class counts");
  }
  return solve_fedpals(FedPalsProblem(clients, target, 0.0)).residual;
}

}  // namespace fedpals
