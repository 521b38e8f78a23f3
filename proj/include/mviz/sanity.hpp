#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "mviz/model.hpp"
#include "mviz/prediction.hpp"
#include "mviz/representation.hpp"

namespace mviz {

// ---------------------------------------------------------------------------
// Randomization sanity checks.

// Ranks with ties averaged. Two constant vectors correlate 1, a constant
// against a varying vector 0.
double spearman(std::span<const double> a, std::span<const double> b);

// Attribution of one datapoint for a fixed target, all modalities concatenated
// in schema order.
using AttributionFn =
    std::function<std::vector<double>(const Model&, const Datapoint&, const AttributionTarget&)>;

// Unimodal method over every modality of the schema.
AttributionFn attribution_method(const MethodConfig& cfg);
AttributionFn attribution_method(UnimodalMethod method, const PerturbConfig& lime = {},
                                 const ShapleyConfig& shapley = {});

enum class CheckKind { kModel, kData };

struct RandomizationReport {
  CheckKind kind = CheckKind::kModel;
  std::string method;
  double correlation = 0.0;  // mean over points
  std::vector<double> per_point;
  double threshold = 0.5;
  bool pass = false;
  // data check only: test accuracy of the true-label and permuted-label models
  std::optional<double> reference_accuracy;
  std::optional<double> permuted_accuracy;
};

nlohmann::json to_json(const RandomizationReport& r);

inline constexpr std::size_t kMinSanityPoints = 10;

// Compares maps of `model` and `randomized` on each point, targeting the
// class `model` predicts. Throws SampleTooSmall below 10 points.
RandomizationReport compare_attributions(CheckKind kind, const Model& model, const Model& randomized,
                                         std::span<const Datapoint> points, const AttributionFn& method,
                                         std::string method_name, double threshold = 0.5);

// Re-draws the head with `seed` and compares maps.
RandomizationReport model_randomization_check(const Model& model, std::span<const Datapoint> points,
                                              const AttributionFn& method, std::string method_name,
                                              std::uint64_t seed = 1, double threshold = 0.5);

struct DataRandomizationConfig {
  ModelConfig model;
  TrainConfig train;
  std::size_t num_points = 50;  // test points compared
  double threshold = 0.5;
};

// Trains twins on true and label-permuted train data and compares maps on
// the first test points. Throws Divergence (from training), SampleTooSmall.
RandomizationReport data_randomization_check(const SplitSet& data, const DataRandomizationConfig& cfg,
                                             const AttributionFn& method, std::string method_name);

// ---------------------------------------------------------------------------
// Error probe and active selection.

struct ErrorProbe {
  std::vector<double> weights;
  double intercept = 0.0;
  std::vector<std::size_t> top_features;  // largest positive weights first
  double ridge = 1e-3;
  std::size_t num_points = 0;
  std::size_t num_errors = 0;
  double train_accuracy = 0.0;  // probe score > 0.5 vs error flag

  friend bool operator==(const ErrorProbe&, const ErrorProbe&) = default;
};

nlohmann::json to_json(const ErrorProbe& p);

// Ridge least squares of the error flag on |features| with intercept:
// min (1/2N)|e - |Z| w - b|^2 + ridge |w|^2. Throws SingleClassLabels.
ErrorProbe fit_error_probe(const FeatureMatrix& fm, std::span<const std::uint8_t> error, std::size_t top = 5,
                           double ridge = 1e-3);

// 1 where the stored prediction differs from the label.
std::vector<std::uint8_t> error_flags(const FeatureMatrix& fm);

// Pool inputs with labels and metadata removed.
class UnlabeledPool {
 public:
  explicit UnlabeledPool(const Dataset& labeled);
  const Dataset& inputs() const noexcept { return inputs_; }
  std::size_t size() const noexcept { return inputs_.size(); }

 private:
  Dataset inputs_;
};

enum class Strategy { kRandom, kUncertainty, kFeatureTargeted };

std::string_view to_string(Strategy s);
Strategy strategy_from_string(std::string_view name);

double entropy(std::span<const double> probabilities);

// random: uniform without replacement. uncertainty: top-n softmax entropy.
// feature_targeted: top ceil(n/F) |activation| per penultimate feature,
// concatenated, deduplicated, truncated to n (may return fewer than n).
// Throws PoolTooSmall, InvalidArgument.
std::vector<std::size_t> select_active(Strategy strategy, const Model& model, const UnlabeledPool& pool, std::size_t n,
                                       std::span<const std::size_t> features = {}, std::uint64_t seed = 0);

// ---------------------------------------------------------------------------
// Debugging experiment.

struct StrategySpec {
  std::string name;
  Strategy strategy = Strategy::kRandom;
  std::vector<std::size_t> features;
};

struct DebugConfig {
  std::size_t n = 200;
  std::size_t epochs = 1;
  std::size_t batch = 32;
  std::vector<double> lr_grid{1e-2, 1e-1};
  Optimizer optimizer = Optimizer::kSgd;
  std::size_t num_seeds = 10;
  std::uint64_t base_seed = 0;
  // Also count test points the original model assigns to this class as targeted.
  std::optional<std::size_t> predicted_class;
  std::size_t threads = 0;  // 0: hardware concurrency
};

struct DebugOutcome {
  std::string strategy;
  std::size_t n = 0;
  std::vector<std::size_t> selected;
  double targeted_delta = 0.0;
  double overall_delta = 0.0;
  std::uint64_t seed = 0;
  double lr = 0.0;
};

struct Summary {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation, 0 for one value
};

Summary summarize(std::span<const double> values);

struct StrategyReport {
  std::string strategy;
  double lr = 0.0;  // grid entry with the best mean targeted delta
  Summary targeted;
  Summary overall;
  std::vector<DebugOutcome> rows;
  std::vector<std::pair<double, Summary>> targeted_by_lr;
};

struct DebugReport {
  double baseline_targeted = 0.0;
  double baseline_overall = 0.0;
  std::size_t targeted_count = 0;
  std::vector<StrategyReport> strategies;
  std::vector<DebugOutcome> outcomes;  // every strategy, seed and learning rate

  const StrategyReport& strategy(std::string_view name) const;
};

nlohmann::json to_json(const DebugOutcome& o);
nlohmann::json to_json(const DebugReport& r);

// Fills report.strategies from report.outcomes, choosing per strategy the
// learning rate with the best mean targeted delta.
void aggregate_outcomes(DebugReport& report, std::span<const std::string> strategies, std::span<const double> lr_grid);

// For every strategy and seed: select from the pool, fine-tune the head on the
// selected points with their labels, report accuracy deltas on `test`.
// Targeted points are those whose meta marks them bug-affected.
DebugReport debug_experiment(const Model& model, const Dataset& pool, const Dataset& test,
                             std::span<const StrategySpec> strategies, const DebugConfig& cfg);

// Planted-bug benchmark: model trained on the buggy train split, the
// validation split halved into a probe part and an unlabeled pool.
struct DebugBenchmark {
  SplitSet data;
  Dataset probe_split;
  Dataset pool;
  Model model;
  ErrorProbe probe;
  std::vector<std::size_t> non_error_features;  // smallest |probe weight| first
};

struct BenchmarkConfig {
  SyntheticSpec spec = bug_task_spec();
  std::uint64_t seed = 0;
  ModelConfig model;
  TrainConfig train;
};

DebugBenchmark make_debug_benchmark(const BenchmarkConfig& cfg);

// random, uncertainty, feature_targeted_2 / _1 (top probe features) and
// feature_targeted_non_error (two smallest |probe weight| features outside
// the probe's top list).
std::vector<StrategySpec> standard_strategies(const DebugBenchmark& b);

// One benchmark per seed (fresh data, model and probe), one selection and
// fine-tuning run each, aggregated over seeds. `only` keeps strategies whose
// name equals an entry or extends it with "_" ("feature_targeted" keeps all
// three targeted variants); empty keeps all. Throws InvalidArgument.
bool strategy_matches(std::string_view name, std::span<const std::string> only);
void check_strategy_names(std::span<const std::string> only);
DebugReport run_debug_benchmark(const BenchmarkConfig& base, std::size_t num_seeds, const DebugConfig& cfg,
                                std::span<const std::string> only = {});

}  // namespace mviz
