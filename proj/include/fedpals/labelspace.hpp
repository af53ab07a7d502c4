#pragma once

#include <cstdint>
#include <vector>

namespace fedpals {

/// A probability vector over K dense class ids 0..K-1.
///
/// Entries must be nonnegative and sum to 1 within kSumTolerance; inputs
/// within tolerance are renormalized exactly (divided by their sum) so that
/// file-sourced floats become valid marginals. Immutable after construction.
class LabelMarginal {
 public:
  static constexpr double kSumTolerance = 1e-9;

  explicit LabelMarginal(std::vector<double> probs);

  int num_classes() const { return static_cast<int>(probs_.size()); }
  double operator[](int k) const { return probs_[static_cast<size_t>(k)]; }
  const std::vector<double>& probs() const { return probs_; }

  bool operator==(const LabelMarginal& other) const = default;

 private:
  std::vector<double> probs_;
};

/// Client label marginals stacked row-wise plus per-client sample counts.
/// All marginals share the same K; every count is >= 1.
struct ClientMarginalSet {
  ClientMarginalSet(std::vector<LabelMarginal> client_marginals,
                    std::vector<std::int64_t> client_sizes);

  int num_clients() const { return static_cast<int>(marginals.size()); }
  int num_classes() const { return marginals.front().num_classes(); }
  std::int64_t total_size() const;

  std::vector<LabelMarginal> marginals;
  std::vector<std::int64_t> sizes;
};

/// Proportion of each class id in `labels`. Throws on an empty vector
/// ("empty dataset") or on a label outside [0, num_classes).
LabelMarginal empirical_marginal(const std::vector<int>& labels, int num_classes);

struct CoverageResult {
  bool covered = false;
  double residual = 0.0;  // min over the simplex of ||alpha^T S - T||^2
};

/// Checks whether the target marginal lies in the convex hull of the client
/// marginals, up to `tol` on the squared residual.
CoverageResult check_coverage(const LabelMarginal& target,
                              const ClientMarginalSet& clients, double tol);

/// Squared Euclidean distance from the target marginal to the convex hull of
/// the client marginals (the squared norm, not its square root).
double projection_distance(const LabelMarginal& target,
                           const ClientMarginalSet& clients);

}  // namespace fedpals
