#include "fedpals/learners.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "fedpals/random.hpp"

namespace fedpals {

namespace {

constexpr char kParamMagic[4] = {'F', 'P', 'V', '1'};

void check_arch(const ModelArch& arch) {
  if (arch.input_dim < 1 || arch.num_classes < 2) {
    throw std::invalid_argument("model needs input_dim >= 1 and num_classes >= 2");
  }
  if (arch.kind == ModelKind::kMlp && arch.hidden_width < 1) {
    throw std::invalid_argument("mlp hidden width must be >= 1");
  }
}

// Stable softmax in place: shifts by the max logit before exponentiating.
void softmax_inplace(std::vector<double>& z) {
  double zmax = -std::numeric_limits<double>::infinity();
  for (double v : z) zmax = std::max(zmax, v);
  double denom = 0.0;
  for (double& v : z) {
    v = std::exp(v - zmax);
    denom += v;
  }
  for (double& v : z) v /= denom;
}

double log_sum_exp(const std::vector<double>& z) {
  double zmax = -std::numeric_limits<double>::infinity();
  for (double v : z) zmax = std::max(zmax, v);
  double s = 0.0;
  for (double v : z) s += std::exp(v - zmax);
  return zmax + std::log(s);
}

struct LogisticView {
  const double* w;  // d x K, input-major
  const double* b;  // K
};

struct MlpView {
  const double* w1;  // d x H
  const double* b1;  // H
  const double* w2;  // H x K
  const double* b2;  // K
};

LogisticView logistic_view(const double* p, const ModelArch& a) {
  return {p, p + static_cast<size_t>(a.input_dim) * a.num_classes};
}

MlpView mlp_view(const double* p, const ModelArch& a) {
  const size_t w1 = static_cast<size_t>(a.input_dim) * a.hidden_width;
  const size_t b1 = static_cast<size_t>(a.hidden_width);
  const size_t w2 = static_cast<size_t>(a.hidden_width) * a.num_classes;
  return {p, p + w1, p + w1 + b1, p + w1 + b1 + w2};
}

struct MutMlpView {
  double* w1;
  double* b1;
  double* w2;
  double* b2;
};

MutMlpView mut_mlp_view(double* p, const ModelArch& a) {
  const size_t w1 = static_cast<size_t>(a.input_dim) * a.hidden_width;
  const size_t b1 = static_cast<size_t>(a.hidden_width);
  const size_t w2 = static_cast<size_t>(a.hidden_width) * a.num_classes;
  return {p, p + w1, p + w1 + b1, p + w1 + b1 + w2};
}

void logits_for_row(const ParamVector& params, std::span<const double> x,
                    std::vector<double>& z, std::vector<double>* hidden) {
  const ModelArch& a = params.layout;
  z.assign(static_cast<size_t>(a.num_classes), 0.0);
  if (a.kind == ModelKind::kLogistic) {
    const LogisticView v = logistic_view(params.values.data(), a);
    for (int k = 0; k < a.num_classes; ++k) {
      double s = v.b[k];
      for (int j = 0; j < a.input_dim; ++j) {
        s += v.w[static_cast<size_t>(j) * a.num_classes + k] * x[static_cast<size_t>(j)];
      }
      z[static_cast<size_t>(k)] = s;
    }
  } else {
    const MlpView v = mlp_view(params.values.data(), a);
    hidden->assign(static_cast<size_t>(a.hidden_width), 0.0);
    for (int h = 0; h < a.hidden_width; ++h) {
      double s = v.b1[h];
      for (int j = 0; j < a.input_dim; ++j) {
        s += v.w1[static_cast<size_t>(j) * a.hidden_width + h] * x[static_cast<size_t>(j)];
      }
      (*hidden)[static_cast<size_t>(h)] = std::tanh(s);
    }
    for (int k = 0; k < a.num_classes; ++k) {
      double s = v.b2[k];
      for (int h = 0; h < a.hidden_width; ++h) {
        s += v.w2[static_cast<size_t>(h) * a.num_classes + k] * (*hidden)[static_cast<size_t>(h)];
      }
      z[static_cast<size_t>(k)] = s;
    }
  }
}

Dataset take_rows(const Dataset& data, const std::vector<int>& rows, int begin, int end) {
  Dataset batch;
  batch.dim = data.dim;
  batch.num_classes = data.num_classes;
  batch.features.reserve(static_cast<size_t>(end - begin) * data.dim);
  batch.labels.reserve(static_cast<size_t>(end - begin));
  for (int i = begin; i < end; ++i) {
    const auto r = data.row(rows[static_cast<size_t>(i)]);
    batch.features.insert(batch.features.end(), r.begin(), r.end());
    batch.labels.push_back(data.labels[static_cast<size_t>(rows[static_cast<size_t>(i)])]);
  }
  return batch;
}

template <class T>
void write_raw(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
void read_raw(std::istream& in, T& v) {
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw std::runtime_error("truncated parameter stream");
}

}  // namespace

int ModelArch::param_count() const {
  if (kind == ModelKind::kLogistic) {
    return input_dim * num_classes + num_classes;
  }
  return input_dim * hidden_width + hidden_width + hidden_width * num_classes + num_classes;
}

ParamVector init_params(const ModelArch& arch, std::uint64_t seed) {
  check_arch(arch);
  ParamVector params;
  params.layout = arch;
  params.values.assign(static_cast<size_t>(arch.param_count()), 0.0);
  if (arch.kind == ModelKind::kMlp) {
    auto rng = make_rng(derive_seed(seed, 0x1717));
    const auto fill_glorot = [&rng](double* w, int fan_in, int fan_out) {
      const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
      std::uniform_real_distribution<double> uniform(-a, a);
      const size_t count = static_cast<size_t>(fan_in) * fan_out;
      for (size_t i = 0; i < count; ++i) w[i] = uniform(rng);
    };
    MutMlpView v = mut_mlp_view(params.values.data(), arch);
    fill_glorot(v.w1, arch.input_dim, arch.hidden_width);
    fill_glorot(v.w2, arch.hidden_width, arch.num_classes);
  }
  return params;
}

LossGrad loss_and_grad(const ParamVector& params, const Dataset& batch, double prox_mu,
                       const ParamVector* anchor) {
  check_arch(params.layout);
  if (batch.size() == 0) throw std::invalid_argument("empty batch");
  const ModelArch& a = params.layout;
  if (batch.dim != a.input_dim || batch.num_classes != a.num_classes) {
    throw std::invalid_argument("batch shape does not match the model");
  }
  if (static_cast<int>(params.values.size()) != a.param_count()) {
    throw std::invalid_argument("parameter vector length does not match the layout");
  }
  if (prox_mu > 0.0 && anchor == nullptr) {
    throw std::invalid_argument("proximal term requires an anchor");
  }
  if (anchor != nullptr && anchor->values.size() != params.values.size()) {
    throw std::invalid_argument("anchor layout does not match the parameters");
  }

  LossGrad out;
  out.grad.layout = a;
  out.grad.values.assign(params.values.size(), 0.0);

  const int n = batch.size();
  const double inv_n = 1.0 / static_cast<double>(n);
  std::vector<double> z;
  std::vector<double> hidden;
  double loss = 0.0;

  for (int i = 0; i < n; ++i) {
    const auto x = batch.row(i);
    const int y = batch.labels[static_cast<size_t>(i)];
    logits_for_row(params, x, z, &hidden);
    loss += (log_sum_exp(z) - z[static_cast<size_t>(y)]) * inv_n;
    softmax_inplace(z);
    if (!std::isfinite(z[0])) {
      throw std::runtime_error("non-finite activation in forward pass at row " +
                               std::to_string(i));
    }
    z[static_cast<size_t>(y)] -= 1.0;  // dL/dlogits, unscaled

    if (a.kind == ModelKind::kLogistic) {
      double* gw = out.grad.values.data();
      double* gb = gw + static_cast<size_t>(a.input_dim) * a.num_classes;
      for (int k = 0; k < a.num_classes; ++k) {
        const double dk = z[static_cast<size_t>(k)] * inv_n;
        gb[k] += dk;
        for (int j = 0; j < a.input_dim; ++j) {
          gw[static_cast<size_t>(j) * a.num_classes + k] += dk * x[static_cast<size_t>(j)];
        }
      }
    } else {
      const MlpView v = mlp_view(params.values.data(), a);
      MutMlpView g = mut_mlp_view(out.grad.values.data(), a);
      for (int k = 0; k < a.num_classes; ++k) {
        const double dk = z[static_cast<size_t>(k)] * inv_n;
        g.b2[k] += dk;
        for (int h = 0; h < a.hidden_width; ++h) {
          g.w2[static_cast<size_t>(h) * a.num_classes + k] += dk * hidden[static_cast<size_t>(h)];
        }
      }
      for (int h = 0; h < a.hidden_width; ++h) {
        double dh = 0.0;
        for (int k = 0; k < a.num_classes; ++k) {
          dh += z[static_cast<size_t>(k)] * v.w2[static_cast<size_t>(h) * a.num_classes + k];
        }
        dh *= (1.0 - hidden[static_cast<size_t>(h)] * hidden[static_cast<size_t>(h)]) * inv_n;
        g.b1[h] += dh;
        for (int j = 0; j < a.input_dim; ++j) {
          g.w1[static_cast<size_t>(j) * a.hidden_width + h] += dh * x[static_cast<size_t>(j)];
        }
      }
    }
  }

  if (prox_mu > 0.0) {
    double sq = 0.0;
    for (size_t i = 0; i < params.values.size(); ++i) {
      const double diff = params.values[i] - anchor->values[i];
      sq += diff * diff;
      out.grad.values[i] += prox_mu * diff;
    }
    loss += 0.5 * prox_mu * sq;
  }
  out.loss = loss;
  return out;
}

ParamVector local_update(const ParamVector& params, const Dataset& data,
                         const LocalUpdateConfig& cfg, std::uint64_t seed) {
  if (data.size() == 0) throw std::invalid_argument("empty dataset");
  if (cfg.epochs < 1) throw std::invalid_argument("epochs must be >= 1");
  if (cfg.batch_size < 0) throw std::invalid_argument("batch size must be >= 0");
  if (!(cfg.learning_rate >= 0.0)) {
    throw std::invalid_argument("learning rate must be >= 0");
  }

  const int n = data.size();
  const int batch = (cfg.batch_size == 0 || cfg.batch_size >= n) ? n : cfg.batch_size;
  const ParamVector anchor = params;  // broadcast parameters; proximal target
  ParamVector current = params;

  std::vector<int> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  auto rng = make_rng(derive_seed(seed, 0x5e0f));

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    if (batch < n) {
      for (int i = n - 1; i > 0; --i) {
        std::uniform_int_distribution<int> pick(0, i);
        std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(pick(rng))]);
      }
    }
    for (int start = 0; start < n; start += batch) {
      const int end = std::min(start + batch, n);
      const Dataset view = (batch == n) ? data : take_rows(data, order, start, end);
      const LossGrad lg =
          loss_and_grad(current, view, cfg.prox_mu, cfg.prox_mu > 0.0 ? &anchor : nullptr);
      for (size_t i = 0; i < current.values.size(); ++i) {
        current.values[i] -= cfg.learning_rate * lg.grad.values[i];
      }
    }
  }
  return current;
}

EvalMetrics evaluate(const ParamVector& params, const Dataset& data) {
  check_arch(params.layout);
  if (data.size() == 0) throw std::invalid_argument("empty dataset");
  const int k = params.layout.num_classes;
  std::vector<std::int64_t> true_positive(static_cast<size_t>(k), 0);
  std::vector<std::int64_t> false_positive(static_cast<size_t>(k), 0);
  std::vector<std::int64_t> false_negative(static_cast<size_t>(k), 0);

  std::vector<double> z;
  std::vector<double> hidden;
  double loss = 0.0;
  std::int64_t correct = 0;
  const int n = data.size();
  for (int i = 0; i < n; ++i) {
    const int y = data.labels[static_cast<size_t>(i)];
    logits_for_row(params, data.row(i), z, &hidden);
    loss += log_sum_exp(z) - z[static_cast<size_t>(y)];
    int pred = 0;
    for (int c = 1; c < k; ++c) {
      if (z[static_cast<size_t>(c)] > z[static_cast<size_t>(pred)]) pred = c;
    }
    if (pred == y) {
      ++correct;
      ++true_positive[static_cast<size_t>(y)];
    } else {
      ++false_positive[static_cast<size_t>(pred)];
      ++false_negative[static_cast<size_t>(y)];
    }
  }

  double f1_sum = 0.0;
  for (int c = 0; c < k; ++c) {
    const double denom = 2.0 * static_cast<double>(true_positive[static_cast<size_t>(c)]) +
                         static_cast<double>(false_positive[static_cast<size_t>(c)]) +
                         static_cast<double>(false_negative[static_cast<size_t>(c)]);
    if (denom > 0.0) {
      f1_sum += 2.0 * static_cast<double>(true_positive[static_cast<size_t>(c)]) / denom;
    }
    // Classes with no predictions and no labels contribute 0 and stay counted.
  }

  EvalMetrics metrics;
  metrics.accuracy = static_cast<double>(correct) / static_cast<double>(n);
  metrics.mean_loss = loss / static_cast<double>(n);
  metrics.macro_f1 = f1_sum / static_cast<double>(k);
  return metrics;
}

void save_params(const ParamVector& params, std::ostream& out) {
  out.write(kParamMagic, sizeof(kParamMagic));
  const std::uint8_t kind = params.layout.kind == ModelKind::kLogistic ? 0 : 1;
  write_raw(out, kind);
  write_raw(out, static_cast<std::int32_t>(params.layout.input_dim));
  write_raw(out, static_cast<std::int32_t>(params.layout.num_classes));
  write_raw(out, static_cast<std::int32_t>(params.layout.hidden_width));
  write_raw(out, static_cast<std::uint64_t>(params.values.size()));
  out.write(reinterpret_cast<const char*>(params.values.data()),
            static_cast<std::streamsize>(params.values.size() * sizeof(double)));
  if (!out) throw std::runtime_error("failed to write parameter stream");
}

ParamVector load_params(std::istream& in) {
  char magic[4];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kParamMagic, sizeof(magic)) != 0) {
    throw std::runtime_error("bad parameter stream header");
  }
  std::uint8_t kind = 0;
  std::int32_t dim = 0;
  std::int32_t classes = 0;
  std::int32_t hidden = 0;
  std::uint64_t count = 0;
  read_raw(in, kind);
  read_raw(in, dim);
  read_raw(in, classes);
  read_raw(in, hidden);
  read_raw(in, count);
  ParamVector params;
  params.layout.kind = kind == 0 ? ModelKind::kLogistic : ModelKind::kMlp;
  params.layout.input_dim = dim;
  params.layout.num_classes = classes;
  params.layout.hidden_width = hidden;
  if (count != static_cast<std::uint64_t>(params.layout.param_count())) {
    throw std::runtime_error("parameter count does not match the layout");
  }
  params.values.resize(count);
  in.read(reinterpret_cast<char*>(params.values.data()),
          static_cast<std::streamsize>(count * sizeof(double)));
  if (!in) throw std::runtime_error("truncated parameter stream");
  return params;
}

void save_params_file(const ParamVector& params, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  save_params(params, out);
}

ParamVector load_params_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  return load_params(in);
}

}  // namespace fedpals
