#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <shared_mutex>
#include <string>
#include <vector>

#include "json.hpp"
#include "mviz/crossmodal.hpp"
#include "mviz/model.hpp"
#include "mviz/prediction.hpp"
#include "mviz/representation.hpp"

namespace mviz {

// Analysis stages, declared in execution order.
enum class Stage { kP, kU, kC, kRl, kRg };

std::string_view to_string(Stage s);  // "p", "u", "c", "rl", "rg"
Stage stage_from_string(std::string_view s);
// Comma-separated, case-insensitive; result sorted in execution order.
std::vector<Stage> parse_stages(std::string_view list);

struct RunConfig {
  std::vector<Stage> stages{Stage::kP, Stage::kU, Stage::kC, Stage::kRl, Stage::kRg};
  MethodConfig methods;
  // Use train-split means as LIME / Shapley baselines.
  bool dataset_baselines = true;
  // Stage C queries; empty means every atom of every modality against every
  // other modality.
  std::vector<CmRequest> interactions;
  bool emap = false;
  std::size_t emap_points = 64;
  std::size_t k = 3;
  Direction direction = Direction::kMax;
  std::string global_split = "val";
  std::optional<double> lambda1;
  std::optional<double> lambda2;
  std::size_t top_m = 5;
  // Explicit stage R features; otherwise the surrogate's top features of the
  // predicted class. Stage R cross-modal maps use methods.interactions, or
  // the stage C queries when that is empty.
  std::vector<FeatureRef> features;
  std::uint64_t seed = 0;

  bool has(Stage s) const;
  bool has_lambdas() const { return lambda1 && lambda2; }
  nlohmann::json to_json() const;
  static RunConfig from_json(const nlohmann::json& j);
  std::string digest() const;
};

struct PredictionSection {
  double lambda1 = 0.0;
  double lambda2 = 0.0;
  double sparsity = 0.0;
  double accuracy = 0.0;
  double agreement = 0.0;
  std::string surrogate_digest;
  std::size_t surrogate_prediction = 0;
  // predicted class and, when different, true class
  std::map<std::size_t, std::vector<RankedFeature>> top_features;
};

struct EmapSummary {
  std::string first;
  std::string second;
  std::size_t sample_size = 0;
  double energy = 0.0;
};

struct AnalysisBundle {
  std::string dataset_id;
  std::string model_id;
  std::string split;
  std::size_t index = 0;
  std::size_t predicted_label = 0;
  std::size_t true_label = 0;
  std::vector<double> logits;
  std::vector<Stage> stages;
  std::string config_digest;
  std::uint64_t seed = 0;

  std::optional<PredictionSection> prediction;
  std::optional<std::vector<AttributionMap>> unimodal;
  std::optional<std::vector<InteractionMap>> interactions;
  std::optional<EmapSummary> emap;
  std::optional<std::vector<LocalFeatureAnalysis>> local;
  std::optional<std::vector<GlobalFeatureAnalysis>> global;
};

nlohmann::json to_json(const AnalysisBundle& b);
AnalysisBundle bundle_from_json(const nlohmann::json& j);
// Metadata plus the P, U and C sections.
nlohmann::json overview_json(const AnalysisBundle& b);
std::string bundle_digest(const AnalysisBundle& b);

// sha256 of the schema and the named split.
std::string dataset_digest(const SplitSet& data, std::string_view split);

// Surrogate over train-split penultimate features.
SparseLinearSurrogate fit_surrogate(const Model& model, const SplitSet& data, double lambda1, double lambda2);

// Runs exactly the requested stages in order P, U, C, R_l, R_g. U and C
// target the predicted class. A supplied surrogate replaces the fit.
// Throws MissingSurrogate when P is requested, or R without explicit
// features, and neither lambdas nor a surrogate are available.
AnalysisBundle run_pipeline(const Model& model, const SplitSet& data, const std::string& split, std::size_t index,
                            const RunConfig& cfg, const SparseLinearSurrogate* surrogate = nullptr);

// bundle.json, one JSON file per map and manifest.json listing every file.
// Returns the written paths relative to dir. Throws IoFailure.
std::vector<std::string> export_bundle(const AnalysisBundle& bundle, const std::filesystem::path& dir);
AnalysisBundle read_bundle(const std::filesystem::path& dir);

// MVIZ_CACHE_DIR, else $XDG_CACHE_HOME/mviz, else ~/.cache/mviz, else ./.mviz-cache.
std::filesystem::path cache_directory();

// Digest-keyed store of surrogates and bundles: memory first, then the
// optional directory. Concurrent reads, exclusive inserts.
class AnalysisCache {
 public:
  explicit AnalysisCache(std::optional<std::filesystem::path> dir = std::nullopt);

  std::shared_ptr<const SparseLinearSurrogate> surrogate(const Model& model, const SplitSet& data, double lambda1,
                                                         double lambda2);
  std::shared_ptr<const AnalysisBundle> bundle(const Model& model, const SplitSet& data, const std::string& split,
                                               std::size_t index, const RunConfig& cfg);

  std::size_t bundle_hits() const;

 private:
  std::optional<std::filesystem::path> dir_;
  mutable std::shared_mutex mutex_;
  std::map<std::string, std::shared_ptr<const SparseLinearSurrogate>> surrogates_;
  std::map<std::string, std::shared_ptr<const AnalysisBundle>> bundles_;
  std::atomic<std::size_t> hits_{0};
};

}  // namespace mviz
