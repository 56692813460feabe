#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "talkback/data.hpp"
#include "talkback/explanation.hpp"
#include "talkback/json_io.hpp"

namespace talkback {

struct MLPConfig {
  std::vector<std::size_t> layers;  // input, hidden..., output
  std::size_t pinch_layer = 1;      // index into layers; must be hidden
  double learning_rate = 0.05;
  std::size_t epochs = 200;
  double clamp_weight = 1.0;
  double importance_factor = 1.0;  // kappa
  std::uint64_t seed = 1;

  void validate() const;
};

/// Known values for pinch-layer nodes, keyed by node index.
using Clamps = std::map<std::size_t, double>;

struct ClampAssignment {
  std::map<std::string, std::size_t> nodes;  // intermediate name -> pinch node
  friend bool operator==(const ClampAssignment&, const ClampAssignment&) = default;
};

/// weights[l] maps layer l to l + 1, row-major (layers[l+1] x layers[l]).
struct ClampedMLP {
  MLPConfig config;
  std::vector<std::vector<double>> weights;
  std::vector<std::vector<double>> biases;
  ClampAssignment clamp;

  std::size_t num_layers() const { return config.layers.size(); }
  double& w(std::size_t l, std::size_t i, std::size_t j) { return weights[l][i * config.layers[l] + j]; }
  double w(std::size_t l, std::size_t i, std::size_t j) const { return weights[l][i * config.layers[l] + j]; }
};

struct Activations {
  std::vector<std::vector<double>> z;  // pre-activations; z[0] unused
  std::vector<std::vector<double>> a;  // propagated values; a[0] is the input
  Clamps computed;                     // computed activation of each clamped node
};

struct Gradients {
  std::vector<std::vector<double>> w;
  std::vector<std::vector<double>> b;
};

/// Throws ConfigError on an invalid configuration.
ClampedMLP init_mlp(const MLPConfig& cfg);

/// Throws PreconditionError when the input length or a clamp is out of range.
Activations forward(const ClampedMLP& m, std::span<const double> input, const Clamps& clamps = {});
std::vector<double> predict_proba(const ClampedMLP& m, std::span<const double> input);

/// Gradient of cross-entropy plus clamp_weight/2 * sum (known - computed)^2.
Gradients backward(const ClampedMLP& m, const Activations& acts, std::size_t target, const Clamps& clamps = {});
double composite_loss(const ClampedMLP& m, std::span<const double> input, std::size_t target,
                      const Clamps& clamps = {});

/// Max over weights and biases of |g_a - g_n| / max(1e-8, |g_a| + |g_n|).
double grad_check(const ClampedMLP& m, std::span<const double> input, std::size_t target, const Clamps& clamps,
                  double eps);

struct TrainingExample {
  std::vector<double> input;
  std::size_t target = 0;
  Clamps clamps;
  std::vector<double> importance;  // |importance| per input; empty when no profile
};

struct TrainResult {
  ClampedMLP model;
  std::vector<double> losses;  // mean composite loss per epoch
};

/// Online SGD in a seeded shuffled order. First-layer weights from input j
/// use rate eta * (1 + kappa * importance_j). Throws DivergenceError when the
/// loss becomes non-finite.
TrainResult train(ClampedMLP m, const std::vector<TrainingExample>& examples, std::size_t epochs);

/// Min-max scaled numerics, one-hot categoricals, 0/1 booleans. Missing
/// numerics encode as the scaled training mean, missing categoricals as all
/// zeros.
class InputEncoder {
 public:
  InputEncoder() = default;
  explicit InputEncoder(const Dataset& training);

  std::size_t width() const { return sources_.size(); }
  std::vector<double> encode(std::span<const double> row) const;
  /// Dataset feature behind encoded input j.
  std::size_t source_feature(std::size_t j) const { return sources_.at(j); }
  const std::vector<FeatureSchema>& schema() const { return schema_; }

  Json to_json() const;
  static InputEncoder from_json(const Json& j);
  friend bool operator==(const InputEncoder&, const InputEncoder&) = default;

 private:
  std::vector<FeatureSchema> schema_;
  std::vector<double> lo_, hi_, mean_;
  std::vector<std::size_t> offsets_;
  std::vector<std::size_t> sources_;
};

/// Per-input |importance| expanded from a profile's feature weights.
std::vector<double> importance_inputs(const InputEncoder& enc, const ImportanceProfile& profile);

struct AugmentedData {
  Dataset dataset;  // original rows followed by clones
  std::vector<LabeledExample> labels;
  std::vector<RowId> clone_sources;  // source row of each clone, in order
};

/// Gaussian clouds around Local-constrained labeled rows, projected onto
/// each source row's Threshold and Direction constraints.
AugmentedData constraint_cloud_augment(const Dataset& d, const std::vector<LabeledExample>& labels,
                                       const CompiledConstraints& cc, std::size_t n_per_example, double radius,
                                       std::uint64_t seed);

/// Whether `row` meets every Threshold and Direction constraint of `source`.
bool clone_satisfies(const Dataset& d, std::span<const double> row, RowId source, const CompiledConstraints& cc);

Json mlp_to_json(const ClampedMLP& m);
ClampedMLP mlp_from_json(const Json& j);

/// A trained network together with its input encoding and class order.
struct MLPModel {
  InputEncoder encoder;
  ClampedMLP net;
  std::vector<ClassId> classes;  // output node i predicts classes[i]
  std::vector<double> losses;
  std::vector<std::string> warnings;

  std::vector<double> proba(std::span<const double> row) const;
  ClassId predict(std::span<const double> row) const;
};

/// Training examples for the labeled rows of `d`: importance from each row's
/// profile, clamps from intermediate annotations (real values min-max scaled).
std::vector<TrainingExample> mlp_examples(const MLPModel& model, const Dataset& d, const CompiledConstraints& cc,
                                          const std::vector<LabeledExample>& labels);

/// Builds input x hidden... x classes around `cfg` (whose `layers` lists the
/// hidden sizes only) and trains it. The pinch layer is widened to hold one
/// node per intermediate. Throws PreconditionError with fewer than two classes.
MLPModel fit_mlp(const Dataset& d, const CompiledConstraints& cc, const MLPConfig& cfg);

/// Continues training on `labels` for `epochs` epochs.
MLPModel continue_mlp(MLPModel model, const Dataset& d, const CompiledConstraints& cc,
                      const std::vector<LabeledExample>& labels, std::size_t epochs);

Json mlp_model_to_json(const MLPModel& m);
MLPModel mlp_model_from_json(const Json& j);

}  // namespace talkback
