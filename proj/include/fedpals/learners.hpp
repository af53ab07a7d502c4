#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "fedpals/distshift.hpp"

namespace fedpals {

enum class ModelKind { kLogistic, kMlp };

/// Architecture descriptor; doubles as the parameter layout.
struct ModelArch {
  ModelKind kind = ModelKind::kLogistic;
  int input_dim = 0;
  int num_classes = 0;
  int hidden_width = 0;  // mlp only

  int param_count() const;
  bool operator==(const ModelArch&) const = default;
};

/// Flat parameter vector plus its layout. Logistic layout is [W(d x K), b(K)];
/// the mlp adds a tanh hidden layer: [W1(d x H), b1(H), W2(H x K), b2(K)].
/// Weight matrices are stored input-major (row = input unit).
struct ParamVector {
  std::vector<double> values;
  ModelArch layout;
};

struct LocalUpdateConfig {
  int epochs = 1;
  int batch_size = 0;  // 0 or >= n means full batch
  double learning_rate = 0.1;
  double prox_mu = 0.0;  // proximal pull toward the broadcast parameters
};

/// Zeros for logistic; Glorot-uniform weight matrices (zero biases) for the
/// mlp. Deterministic given the seed.
ParamVector init_params(const ModelArch& arch, std::uint64_t seed);

struct LossGrad {
  double loss = 0.0;
  ParamVector grad;
};

/// Mean softmax cross-entropy over the batch plus, when prox_mu > 0,
/// (prox_mu / 2) ||params - anchor||^2. The gradient is exact. Accumulation
/// runs in dataset index order.
LossGrad loss_and_grad(const ParamVector& params, const Dataset& batch, double prox_mu = 0.0,
                       const ParamVector* anchor = nullptr);

/// Mini-batch SGD: `epochs` passes with a seeded shuffle per epoch, short
/// final batch kept. The proximal anchor is the parameter vector passed in.
ParamVector local_update(const ParamVector& params, const Dataset& data,
                         const LocalUpdateConfig& cfg, std::uint64_t seed);

struct EvalMetrics {
  double accuracy = 0.0;
  double mean_loss = 0.0;
  double macro_f1 = 0.0;
};

/// Argmax accuracy (ties to the lowest class id), mean cross-entropy, and
/// macro F1 where classes absent from both predictions and labels count as 0.
EvalMetrics evaluate(const ParamVector& params, const Dataset& data);

/// Length-prefixed little-endian binary round-trip for checkpointing.
void save_params(const ParamVector& params, std::ostream& out);
ParamVector load_params(std::istream& in);
void save_params_file(const ParamVector& params, const std::string& path);
ParamVector load_params_file(const std::string& path);

}  // namespace fedpals
