#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "fedpals/labelspace.hpp"

namespace fedpals {

/// A labeled feature table: n rows of dim features plus class ids in [0, K).
struct Dataset {
  std::vector<double> features;  // row-major, size() * dim entries
  std::vector<int> labels;
  int dim = 0;
  int num_classes = 0;

  int size() const { return static_cast<int>(labels.size()); }
  std::span<const double> row(int i) const {
    return {features.data() + static_cast<size_t>(i) * dim, static_cast<size_t>(dim)};
  }
};

/// Class-conditional generator: feature rows for class y are drawn from a
/// unit-covariance Gaussian centered at means[y]. Shared by clients and
/// target, so all generated domains differ only in their label marginals.
struct GaussianTaskSpec {
  std::vector<std::vector<double>> means;  // K means in R^dim

  int num_classes() const { return static_cast<int>(means.size()); }
  int dim() const { return static_cast<int>(means.front().size()); }
};

/// The three-class planar task with the stock cluster means.
GaussianTaskSpec default_three_class_task();

/// K unit-variance clusters placed on a circle of the given radius;
/// neighboring classes overlap, so label weighting affects accuracy.
GaussianTaskSpec circle_task(int num_classes, double radius);

enum class LabelSampling {
  kStratifiedExact,  // counts = largest-remainder apportionment of n * marginal
  kIid,              // labels drawn i.i.d. from the marginal
};

/// Draws a dataset with the given label marginal. Deterministic given the
/// seed; feature streams are derived per (seed, class), so datasets that
/// share a seed but differ in marginals reuse the same class-conditional
/// draws.
Dataset sample_gaussian_dataset(const GaussianTaskSpec& spec, const LabelMarginal& marginal,
                                int n, std::uint64_t seed,
                                LabelSampling mode = LabelSampling::kStratifiedExact);

/// Assigns each of M clients C labels drawn uniformly without replacement
/// (independently across clients), with equal mass 1/C per chosen label and
/// size C * samples_per_label.
ClientMarginalSet sparsity_partition(int num_classes, int num_clients, int labels_per_client,
                                     int samples_per_label, std::uint64_t seed);

/// M independent draws from a symmetric Dirichlet(beta) over K classes.
std::vector<LabelMarginal> dirichlet_partition(int num_classes, int num_clients, double beta,
                                               std::uint64_t seed);

/// Interpolates between the in-hull target [0.5, 0.25, 0.25] (delta = 0) and
/// the out-of-hull target [0, 0.5, 0.5] (delta = 1) of the two-client planar
/// study.
LabelMarginal make_target_delta(double delta);

/// Adds clipped Gaussian noise to a target marginal and renormalizes:
/// normalize(T + delta * max(eps, 0)) with eps standard normal per entry.
LabelMarginal perturb_target(const LabelMarginal& target, double delta, std::uint64_t seed);

/// Delimited-text dataset table: a "d,K,n" header line followed by one row
/// per sample, features first and the label last. Values round-trip exactly.
void save_dataset(const Dataset& data, const std::string& path);
Dataset load_dataset(const std::string& path);

}  // namespace fedpals
