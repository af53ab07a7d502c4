#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <stdexcept>

#include "fedpals/distshift.hpp"
#include "fedpals/labelspace.hpp"

using namespace fedpals;

TEST_CASE("gaussian sampling is deterministic and stratified") {
  const GaussianTaskSpec spec = default_three_class_task();
  CHECK(spec.num_classes() == 3);
  CHECK(spec.dim() == 2);
  CHECK(spec.means[0][0] == 6.0);
  CHECK(spec.means[1][1] == -1.6);
  CHECK(spec.means[2][0] == 4.6);

  const Dataset a = sample_gaussian_dataset(spec, LabelMarginal({0.5, 0.5, 0.0}), 40, 7);
  const Dataset b = sample_gaussian_dataset(spec, LabelMarginal({0.5, 0.5, 0.0}), 40, 7);
  CHECK(a.features == b.features);
  CHECK(a.labels == b.labels);

  const LabelMarginal empirical = empirical_marginal(a.labels, 3);
  CHECK(empirical[0] == 0.5);
  CHECK(empirical[1] == 0.5);
  CHECK(empirical[2] == 0.0);

  const Dataset other_seed = sample_gaussian_dataset(spec, LabelMarginal({0.5, 0.5, 0.0}), 40, 8);
  CHECK(other_seed.features != a.features);

  CHECK_THROWS_AS(sample_gaussian_dataset(spec, LabelMarginal({1.0, 0.0, 0.0}), 0, 7),
                  std::invalid_argument);
  CHECK_THROWS_AS(sample_gaussian_dataset(spec, LabelMarginal({1.0, 0.0}), 4, 7),
                  std::invalid_argument);
}

TEST_CASE("degenerate marginal places every sample near its mean") {
  const GaussianTaskSpec spec = default_three_class_task();
  const Dataset d = sample_gaussian_dataset(spec, LabelMarginal({1.0, 0.0, 0.0}), 5, 11);
  for (int i = 0; i < d.size(); ++i) {
    CHECK(d.labels[static_cast<size_t>(i)] == 0);
    // Unit-variance draws stay within a few sigmas of mu_0.
    CHECK(std::abs(d.row(i)[0] - 6.0) < 6.0);
    CHECK(std::abs(d.row(i)[1] - 4.6) < 6.0);
  }
}

TEST_CASE("marginals sharing a seed share class-conditional draws") {
  // Changing only the marginal must not change the feature stream a class
  // draws from; the first row of each class block coincides.
  const GaussianTaskSpec spec = default_three_class_task();
  const Dataset wide = sample_gaussian_dataset(spec, LabelMarginal({0.5, 0.25, 0.25}), 40, 3);
  const Dataset narrow = sample_gaussian_dataset(spec, LabelMarginal({0.25, 0.5, 0.25}), 40, 3);
  CHECK(wide.row(0)[0] == narrow.row(0)[0]);  // first class-0 row
  const auto first_of_class = [](const Dataset& d, int cls) {
    for (int i = 0; i < d.size(); ++i) {
      if (d.labels[static_cast<size_t>(i)] == cls) return i;
    }
    return -1;
  };
  const int w1 = first_of_class(wide, 1);
  const int n1 = first_of_class(narrow, 1);
  CHECK(wide.row(w1)[0] == narrow.row(n1)[0]);
  CHECK(wide.row(w1)[1] == narrow.row(n1)[1]);
}

TEST_CASE("iid label sampling stays deterministic") {
  const GaussianTaskSpec spec = default_three_class_task();
  const Dataset a =
      sample_gaussian_dataset(spec, LabelMarginal({0.3, 0.3, 0.4}), 60, 5, LabelSampling::kIid);
  const Dataset b =
      sample_gaussian_dataset(spec, LabelMarginal({0.3, 0.3, 0.4}), 60, 5, LabelSampling::kIid);
  CHECK(a.labels == b.labels);
  CHECK(a.features == b.features);
  CHECK(a.size() == 60);
}

TEST_CASE("sparsity partition structure") {
  const ClientMarginalSet all = sparsity_partition(10, 10, 10, 20, 1);
  for (const auto& m : all.marginals) {
    for (int y = 0; y < 10; ++y) CHECK(m[y] == doctest::Approx(0.1));
  }
  CHECK(all.sizes[0] == 200);

  const ClientMarginalSet sparse = sparsity_partition(10, 10, 3, 20, 1);
  for (const auto& m : sparse.marginals) {
    int nonzero = 0;
    for (int y = 0; y < 10; ++y) {
      if (m[y] != 0.0) {
        ++nonzero;
        CHECK(m[y] == doctest::Approx(1.0 / 3.0));
      }
    }
    CHECK(nonzero == 3);
  }
  CHECK(sparse.sizes[0] == 60);

  const ClientMarginalSet onehot = sparsity_partition(3, 5, 1, 7, 2);
  for (const auto& m : onehot.marginals) {
    int nonzero = 0;
    for (int y = 0; y < 3; ++y) {
      if (m[y] != 0.0) {
        ++nonzero;
        CHECK(m[y] == 1.0);
      }
    }
    CHECK(nonzero == 1);
  }
  CHECK(onehot.sizes[0] == 7);

  CHECK_THROWS_AS(sparsity_partition(3, 5, 4, 7, 2), std::invalid_argument);
  CHECK_THROWS_AS(sparsity_partition(3, 5, 0, 7, 2), std::invalid_argument);
}

TEST_CASE("adding clients never perturbs existing draws") {
  const ClientMarginalSet small = sparsity_partition(10, 4, 3, 20, 9);
  const ClientMarginalSet large = sparsity_partition(10, 7, 3, 20, 9);
  for (int i = 0; i < 4; ++i) {
    CHECK(small.marginals[static_cast<size_t>(i)].probs() ==
          large.marginals[static_cast<size_t>(i)].probs());
  }
  const auto d_small = dirichlet_partition(6, 3, 0.5, 9);
  const auto d_large = dirichlet_partition(6, 5, 0.5, 9);
  for (int i = 0; i < 3; ++i) {
    CHECK(d_small[static_cast<size_t>(i)].probs() == d_large[static_cast<size_t>(i)].probs());
  }
}

TEST_CASE("dirichlet partition draws valid marginals") {
  const auto draws = dirichlet_partition(10, 50, 0.5, 3);
  CHECK(draws.size() == 50);
  for (const auto& m : draws) {
    double sum = 0.0;
    for (int y = 0; y < 10; ++y) {
      CHECK(m[y] >= 0.0);
      sum += m[y];
    }
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
  }
  CHECK_THROWS_AS(dirichlet_partition(10, 5, 0.0, 3), std::invalid_argument);
  CHECK_THROWS_AS(dirichlet_partition(10, 5, -1.0, 3), std::invalid_argument);
}

TEST_CASE("dirichlet concentration limits") {
  // Large beta approaches the uniform marginal.
  const auto flat = dirichlet_partition(10, 100, 1e6, 42);
  for (const auto& m : flat) {
    for (int y = 0; y < 10; ++y) CHECK(std::abs(m[y] - 0.1) < 0.01);
  }

  // Small beta produces spiky draws; frozen Monte-Carlo regression value for
  // the mean count of entries above 0.9 over 1000 draws at seed 42.
  const auto spiky = dirichlet_partition(10, 1000, 0.1, 42);
  double above = 0.0;
  for (const auto& m : spiky) {
    for (int y = 0; y < 10; ++y) {
      if (m[y] > 0.9) above += 1.0;
    }
  }
  const double mean_above = above / 1000.0;
  CHECK(mean_above > 0.0);
  CHECK(mean_above == doctest::Approx(0.121).epsilon(1e-12));
}

TEST_CASE("target delta interpolation") {
  const LabelMarginal proj = make_target_delta(0.0);
  CHECK(proj[0] == 0.5);
  CHECK(proj[1] == 0.25);
  CHECK(proj[2] == 0.25);

  const LabelMarginal ext = make_target_delta(1.0);
  CHECK(ext[0] == 0.0);
  CHECK(ext[1] == 0.5);
  CHECK(ext[2] == 0.5);

  const LabelMarginal mid = make_target_delta(0.5);
  CHECK(mid[0] == doctest::Approx(0.25));
  CHECK(mid[1] == doctest::Approx(0.375));
  CHECK(mid[2] == doctest::Approx(0.375));

  CHECK_THROWS_AS(make_target_delta(-0.1), std::invalid_argument);
  CHECK_THROWS_AS(make_target_delta(1.1), std::invalid_argument);
}

TEST_CASE("delta controls the projection distance monotonically") {
  const ClientMarginalSet clients(
      {LabelMarginal({0.5, 0.5, 0.0}), LabelMarginal({0.5, 0.0, 0.5})}, {40, 18});
  double prev = -1.0;
  for (double delta = 0.0; delta <= 1.0 + 1e-12; delta += 0.1) {
    const double dist = projection_distance(make_target_delta(std::min(delta, 1.0)), clients);
    CHECK(dist >= prev - 1e-12);
    prev = dist;
  }
  CHECK(projection_distance(make_target_delta(0.0), clients) < 1e-10);
}

TEST_CASE("dataset table round trip") {
  const GaussianTaskSpec spec = default_three_class_task();
  const Dataset data = sample_gaussian_dataset(spec, LabelMarginal({0.4, 0.3, 0.3}), 25, 13);
  const auto path =
      (std::filesystem::temp_directory_path() / "fedpals_dataset_test.csv").string();
  save_dataset(data, path);
  const Dataset loaded = load_dataset(path);
  CHECK(loaded.dim == data.dim);
  CHECK(loaded.num_classes == data.num_classes);
  CHECK(loaded.labels == data.labels);
  CHECK(loaded.features == data.features);  // %.17g round-trips exactly

  std::ofstream(path) << "2,3\n";  // malformed header
  CHECK_THROWS_AS(load_dataset(path), std::runtime_error);
  std::ofstream(path) << "2,3,2\n0.5,0.5,0\n";  // truncated
  CHECK_THROWS_AS(load_dataset(path), std::runtime_error);
  std::ofstream(path) << "2,3,1\n0.5,0.5,7\n";  // label out of range
  CHECK_THROWS_AS(load_dataset(path), std::runtime_error);
  std::filesystem::remove(path);
}

TEST_CASE("target perturbation") {
  const LabelMarginal t({0.5, 0.25, 0.25});
  const LabelMarginal unchanged = perturb_target(t, 0.0, 5);
  CHECK(unchanged.probs() == t.probs());

  const LabelMarginal noisy = perturb_target(t, 0.3, 5);
  double sum = 0.0;
  for (int y = 0; y < 3; ++y) {
    CHECK(noisy[y] >= 0.0);
    sum += noisy[y];
  }
  CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(perturb_target(t, 0.3, 5).probs() == noisy.probs());
  CHECK(perturb_target(t, 0.3, 6).probs() != noisy.probs());

  CHECK_THROWS_AS(perturb_target(t, -0.1, 5), std::invalid_argument);
}
