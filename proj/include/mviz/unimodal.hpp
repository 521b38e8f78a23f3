#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "mviz/model.hpp"

namespace mviz {

struct AttributionTarget {
  // kLogitSum reads the sum of all logits.
  enum class Kind { kClassLogit, kFeatureNeuron, kLogitSum };
  Kind kind = Kind::kClassLogit;
  std::size_t class_id = 0;
  std::string layer;  // feature neurons only
  std::size_t neuron = 0;

  static AttributionTarget class_logit(std::size_t c) { return {Kind::kClassLogit, c, {}, 0}; }
  static AttributionTarget feature(std::string layer, std::size_t j) { return {Kind::kFeatureNeuron, 0, std::move(layer), j}; }
  static AttributionTarget logit_sum() { return {Kind::kLogitSum, 0, {}, 0}; }

  // Layer whose activation is read.
  std::string_view layer_name() const;

  friend bool operator==(const AttributionTarget&, const AttributionTarget&) = default;
};

// Throws UnknownLayer or InvalidArgument.
void validate_target(const Model& model, const AttributionTarget& target);

nlohmann::json to_json(const AttributionTarget& t);
AttributionTarget target_from_json(const nlohmann::json& j);

struct AttributionMap {
  std::string modality;
  std::vector<double> weights;  // one per atom
  std::string method;
  AttributionTarget target;
  std::string config_digest;

  friend bool operator==(const AttributionMap&, const AttributionMap&) = default;
};

nlohmann::json to_json(const AttributionMap& m);
AttributionMap attribution_from_json(const nlohmann::json& j);

enum class BaselineKind { kZero, kDatasetMean };

struct PerturbConfig {
  std::size_t num_samples = 1000;
  BaselineKind baseline = BaselineKind::kDatasetMean;
  // [atom_count, atom_dim] replacement values; required for kDatasetMean on
  // continuous modalities. Token modalities always use the zero embedding.
  std::optional<Tensor> baseline_values;
  std::optional<double> kernel_width;  // default 0.25 * atom_count
  double ridge = 1e-3;
  std::uint64_t seed = 0;
  // Use every mask exactly once instead of sampling (atom_count <= 20).
  bool enumerate = false;
};

struct ShapleyConfig {
  std::size_t num_permutations = 200;
  BaselineKind baseline = BaselineKind::kDatasetMean;
  std::optional<Tensor> baseline_values;
  std::uint64_t seed = 0;
  // Take the sampling path even when exact enumeration is possible.
  bool force_sampling = false;
};

inline constexpr std::size_t kExactShapleyMaxAtoms = 12;

// Copy of the target layer's graph with a scalar output: the target value
// summed over batch rows.
ad::Graph target_graph(const Model& model, const AttributionTarget& target);

// Target values for every row of a batch.
std::vector<double> evaluate_target(const Model& model, const ModalityBatch& batch, const AttributionTarget& target);

// Batch replicating dp once per mask, with masked-out atoms of `modality`
// replaced by `baseline` ([atom_count, atom_dim]).
ModalityBatch masked_batch(const Model& model, const Datapoint& dp, const std::string& modality,
                           std::span<const std::vector<std::uint8_t>> masks, const Tensor& baseline);

Tensor resolve_baseline(const ModalitySpec& modality, BaselineKind kind, const std::optional<Tensor>& values);

AttributionMap uni_gradient(const Model& model, const Datapoint& dp, const std::string& modality,
                            const AttributionTarget& target);

AttributionMap uni_lime(const Model& model, const Datapoint& dp, const std::string& modality,
                        const AttributionTarget& target, const PerturbConfig& cfg);

AttributionMap uni_shapley(const Model& model, const Datapoint& dp, const std::string& modality,
                           const AttributionTarget& target, const ShapleyConfig& cfg);

// Generic LIME core: fits weighted ridge of f(mask) on mask indicators.
// `f` receives a batch of masks (1 = atom kept) and returns one value each.
using MaskFunction = std::function<std::vector<double>(std::span<const std::vector<std::uint8_t>>)>;

struct LimeFit {
  std::vector<double> coefficients;
  double intercept = 0.0;
  std::size_t samples = 0;
};

LimeFit lime_fit(std::size_t atom_count, const MaskFunction& f, const PerturbConfig& cfg);

// Digest of the hyperparameters that determine a map.
std::string perturb_config_digest(const PerturbConfig& cfg, std::size_t atom_count);
std::string shapley_config_digest(const ShapleyConfig& cfg, std::size_t atom_count);

}  // namespace mviz
