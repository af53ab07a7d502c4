#include "fedpals/distshift.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>

#include "fedpals/random.hpp"

namespace fedpals {

namespace {

// Stream tags keep the per-purpose generators independent of each other.
enum StreamTag : std::uint64_t {
  kLabelStream = 0x10,
  kClassStreamBase = 0x20,  // + class id
  kSubsetStream = 0x30,
  kPerturbStream = 0x40,
};

// Largest-remainder apportionment of n among the marginal's classes.
std::vector<int> stratified_counts(const LabelMarginal& marginal, int n) {
  const int k = marginal.num_classes();
  std::vector<int> counts(static_cast<size_t>(k), 0);
  std::vector<std::pair<double, int>> remainders;
  remainders.reserve(static_cast<size_t>(k));
  int assigned = 0;
  for (int y = 0; y < k; ++y) {
    const double exact = marginal[y] * static_cast<double>(n);
    const int base = static_cast<int>(std::floor(exact));
    counts[static_cast<size_t>(y)] = base;
    assigned += base;
    remainders.emplace_back(exact - base, y);
  }
  // Ties break toward the lower class id.
  std::stable_sort(remainders.begin(), remainders.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  for (int i = 0; i < n - assigned; ++i) {
    ++counts[static_cast<size_t>(remainders[static_cast<size_t>(i)].second)];
  }
  return counts;
}

}  // namespace

GaussianTaskSpec default_three_class_task() {
  return GaussianTaskSpec{{{6.0, 4.6}, {1.2, -1.6}, {4.6, -5.4}}};
}

GaussianTaskSpec circle_task(int num_classes, double radius) {
  if (num_classes < 2) throw std::invalid_argument("circle task needs at least two classes");
  GaussianTaskSpec spec;
  spec.means.reserve(static_cast<size_t>(num_classes));
  const double two_pi = 2.0 * std::acos(-1.0);
  for (int k = 0; k < num_classes; ++k) {
    const double angle = two_pi * static_cast<double>(k) / static_cast<double>(num_classes);
    spec.means.push_back({radius * std::cos(angle), radius * std::sin(angle)});
  }
  return spec;
}

Dataset sample_gaussian_dataset(const GaussianTaskSpec& spec, const LabelMarginal& marginal,
                                int n, std::uint64_t seed, LabelSampling mode) {
  if (n < 1) throw std::invalid_argument("dataset size must be >= 1");
  const int k = spec.num_classes();
  if (marginal.num_classes() != k) {
    throw std::invalid_argument("marginal class count does not match the task");
  }
  const int d = spec.dim();

  std::vector<int> counts;
  if (mode == LabelSampling::kStratifiedExact) {
    counts = stratified_counts(marginal, n);
  } else {
    counts.assign(static_cast<size_t>(k), 0);
    auto rng = make_rng(derive_seed(seed, kLabelStream));
    std::discrete_distribution<int> pick(marginal.probs().begin(), marginal.probs().end());
    for (int i = 0; i < n; ++i) ++counts[static_cast<size_t>(pick(rng))];
  }

  Dataset data;
  data.dim = d;
  data.num_classes = k;
  data.features.reserve(static_cast<size_t>(n) * d);
  data.labels.reserve(static_cast<size_t>(n));
  for (int y = 0; y < k; ++y) {
    auto rng = make_rng(derive_seed(seed, kClassStreamBase + static_cast<std::uint64_t>(y)));
    std::normal_distribution<double> unit(0.0, 1.0);
    for (int i = 0; i < counts[static_cast<size_t>(y)]; ++i) {
      data.labels.push_back(y);
      for (int j = 0; j < d; ++j) {
        data.features.push_back(spec.means[static_cast<size_t>(y)][static_cast<size_t>(j)] +
                                unit(rng));
      }
    }
  }
  return data;
}

ClientMarginalSet sparsity_partition(int num_classes, int num_clients, int labels_per_client,
                                     int samples_per_label, std::uint64_t seed) {
  if (labels_per_client < 1 || labels_per_client > num_classes) {
    throw std::invalid_argument("labels per client must lie in [1, K]");
  }
  if (num_clients < 1) throw std::invalid_argument("need at least one client");
  if (samples_per_label < 1) throw std::invalid_argument("samples per label must be >= 1");

  std::vector<LabelMarginal> marginals;
  std::vector<std::int64_t> sizes;
  marginals.reserve(static_cast<size_t>(num_clients));
  for (int c = 0; c < num_clients; ++c) {
    auto rng = make_rng(derive_seed(seed, static_cast<std::uint64_t>(c), kSubsetStream));
    // Partial Fisher-Yates draw of labels_per_client ids without replacement.
    std::vector<int> ids(static_cast<size_t>(num_classes));
    std::iota(ids.begin(), ids.end(), 0);
    for (int j = 0; j < labels_per_client; ++j) {
      std::uniform_int_distribution<int> pick(j, num_classes - 1);
      std::swap(ids[static_cast<size_t>(j)], ids[static_cast<size_t>(pick(rng))]);
    }
    std::vector<double> probs(static_cast<size_t>(num_classes), 0.0);
    for (int j = 0; j < labels_per_client; ++j) {
      probs[static_cast<size_t>(ids[static_cast<size_t>(j)])] =
          1.0 / static_cast<double>(labels_per_client);
    }
    marginals.emplace_back(std::move(probs));
    sizes.push_back(static_cast<std::int64_t>(labels_per_client) * samples_per_label);
  }
  return {std::move(marginals), std::move(sizes)};
}

std::vector<LabelMarginal> dirichlet_partition(int num_classes, int num_clients, double beta,
                                               std::uint64_t seed) {
  if (!(beta > 0.0)) throw std::invalid_argument("concentration must be > 0");
  if (num_clients < 1) throw std::invalid_argument("need at least one client");
  std::vector<LabelMarginal> marginals;
  marginals.reserve(static_cast<size_t>(num_clients));
  for (int c = 0; c < num_clients; ++c) {
    auto rng = make_rng(derive_seed(seed, static_cast<std::uint64_t>(c), kSubsetStream));
    std::gamma_distribution<double> gamma(beta, 1.0);
    std::vector<double> draw(static_cast<size_t>(num_classes));
    double sum = 0.0;
    for (double& g : draw) {
      g = gamma(rng);
      sum += g;
    }
    // A zero-sum draw is possible only for tiny beta underflowing; nudge it
    // to the uniform marginal rather than failing the run.
    if (sum <= 0.0) {
      std::fill(draw.begin(), draw.end(), 1.0 / static_cast<double>(num_classes));
    } else {
      for (double& g : draw) g /= sum;
    }
    marginals.emplace_back(std::move(draw));
  }
  return marginals;
}

LabelMarginal make_target_delta(double delta) {
  if (!(delta >= 0.0) || delta > 1.0) {
    throw std::invalid_argument("delta must lie in [0, 1]");
  }
  const std::vector<double> in_hull{0.5, 0.25, 0.25};
  const std::vector<double> out_of_hull{0.0, 0.5, 0.5};
  std::vector<double> probs(3);
  for (size_t i = 0; i < probs.size(); ++i) {
    probs[i] = (1.0 - delta) * in_hull[i] + delta * out_of_hull[i];
  }
  return LabelMarginal(std::move(probs));
}

LabelMarginal perturb_target(const LabelMarginal& target, double delta, std::uint64_t seed) {
  if (!(delta >= 0.0)) throw std::invalid_argument("delta must be >= 0");
  if (delta == 0.0) return target;
  auto rng = make_rng(derive_seed(seed, kPerturbStream));
  std::normal_distribution<double> unit(0.0, 1.0);
  std::vector<double> probs = target.probs();
  double sum = 0.0;
  for (double& p : probs) {
    p += delta * std::max(unit(rng), 0.0);
    sum += p;
  }
  for (double& p : probs) p /= sum;
  // Constructor-normalized again; the division above keeps it in tolerance.
  return LabelMarginal(std::move(probs));
}

void save_dataset(const Dataset& data, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  out << data.dim << ',' << data.num_classes << ',' << data.size() << '\n';
  char buf[64];
  for (int i = 0; i < data.size(); ++i) {
    const auto row = data.row(i);
    for (double v : row) {
      std::snprintf(buf, sizeof(buf), "%.17g", v);
      out << buf << ',';
    }
    out << data.labels[static_cast<size_t>(i)] << '\n';
  }
  if (!out) throw std::runtime_error("failed writing " + path);
}

Dataset load_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error(path + ": missing header");
  Dataset data;
  int n = 0;
  if (std::sscanf(line.c_str(), "%d,%d,%d", &data.dim, &data.num_classes, &n) != 3 ||
      data.dim < 1 || data.num_classes < 1 || n < 0) {
    throw std::runtime_error(path + ": bad header '" + line + "'");
  }
  data.features.reserve(static_cast<size_t>(n) * data.dim);
  data.labels.reserve(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    if (!std::getline(in, line)) {
      throw std::runtime_error(path + ": truncated at row " + std::to_string(i));
    }
    std::stringstream row(line);
    std::string field;
    for (int j = 0; j < data.dim; ++j) {
      if (!std::getline(row, field, ',')) {
        throw std::runtime_error(path + ": row " + std::to_string(i) + " too short");
      }
      data.features.push_back(std::stod(field));
    }
    if (!std::getline(row, field, ',')) {
      throw std::runtime_error(path + ": row " + std::to_string(i) + " missing label");
    }
    const int label = std::stoi(field);
    if (label < 0 || label >= data.num_classes) {
      throw std::runtime_error(path + ": row " + std::to_string(i) + " label out of range");
    }
    data.labels.push_back(label);
  }
  return data;
}

}  // namespace fedpals
