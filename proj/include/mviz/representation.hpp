#pragma once

#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "mviz/crossmodal.hpp"
#include "mviz/unimodal.hpp"

namespace mviz {

struct FeatureRef {
  std::string layer = std::string(kPenultimate);
  std::size_t index = 0;

  AttributionTarget target() const { return AttributionTarget::feature(layer, index); }
  friend bool operator==(const FeatureRef&, const FeatureRef&) = default;
  friend auto operator<=>(const FeatureRef&, const FeatureRef&) = default;
};

nlohmann::json to_json(const FeatureRef& f);
FeatureRef feature_from_json(const nlohmann::json& j);

enum class UnimodalMethod { kGradient, kLime, kShapley };
std::string_view to_string(UnimodalMethod m);
UnimodalMethod unimodal_method_from_string(std::string_view s);

struct CmRequest {
  InteractionQuery query;
  std::string response_modality;
  friend bool operator==(const CmRequest&, const CmRequest&) = default;
};

struct MethodConfig {
  UnimodalMethod method = UnimodalMethod::kGradient;
  PerturbConfig lime;
  ShapleyConfig shapley;
  std::vector<CmRequest> interactions;
  InteractionMode mode = InteractionMode::kSigned;
  ad::Aggregation query_aggregation = ad::Aggregation::kSigned;
  // Per-modality dataset-mean baselines for LIME / Shapley; an entry
  // overrides the single baseline_values of lime and shapley.
  std::map<std::string, Tensor, std::less<>> baselines;
};

// Mean baselines of `dataset` installed in cfg.baselines.
MethodConfig with_dataset_baselines(MethodConfig cfg, const Dataset& dataset);

// Unimodal attribution of `modality` towards `target` with the configured method.
AttributionMap run_unimodal(const Model& model, const Datapoint& dp, const std::string& modality,
                            const AttributionTarget& target, const MethodConfig& cfg);

struct LocalFeatureAnalysis {
  FeatureRef feature;
  std::size_t datapoint = 0;
  double activation = 0.0;
  std::vector<AttributionMap> unimodal;  // schema order
  std::vector<InteractionMap> interactions;
};

nlohmann::json to_json(const LocalFeatureAnalysis& a);
LocalFeatureAnalysis local_from_json(const nlohmann::json& j);

enum class Direction { kMax, kMin };
std::string_view to_string(Direction d);
Direction direction_from_string(std::string_view s);

struct RankedPoint {
  std::size_t index = 0;
  double activation = 0.0;
  friend bool operator==(const RankedPoint&, const RankedPoint&) = default;
};

struct GlobalFeatureAnalysis {
  FeatureRef feature;
  Direction direction = Direction::kMax;
  std::string split;
  std::vector<RankedPoint> top;
  std::vector<LocalFeatureAnalysis> locals;  // aligned with top
};

nlohmann::json to_json(const GlobalFeatureAnalysis& g);
GlobalFeatureAnalysis global_from_json(const nlohmann::json& j);

// Throws UnknownLayer / InvalidArgument for an invalid feature.
void validate_feature(const Model& model, const FeatureRef& feature);

LocalFeatureAnalysis local_representation(const Model& model, const Datapoint& dp, std::size_t datapoint_index,
                                          const FeatureRef& feature, const MethodConfig& cfg);

// Activation of `feature` for every point of the dataset.
std::vector<double> feature_activations(const Model& model, const Dataset& dataset, const FeatureRef& feature);

// Exact top-k: descending for max, ascending for min, ties by lower index.
std::vector<RankedPoint> top_k(std::span<const double> activations, std::size_t k, Direction direction);

// Throws EmptyDataset.
GlobalFeatureAnalysis global_representation(const Model& model, const Dataset& dataset, const FeatureRef& feature,
                                            std::size_t k, Direction direction, const MethodConfig& cfg,
                                            std::string split = "val", bool attach_locals = true);

}  // namespace mviz
