#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "mviz/autodiff.hpp"
#include "mviz/unimodal.hpp"

namespace mviz {

struct InteractionQuery {
  std::string modality;
  std::vector<std::size_t> atoms;
  friend bool operator==(const InteractionQuery&, const InteractionQuery&) = default;
};

// How components of the second-order gradient are pooled into one weight
// per response atom.
enum class InteractionMode { kSigned, kAbsolute };

std::string_view to_string(InteractionMode mode);
InteractionMode interaction_mode_from_string(std::string_view s);
std::string_view to_string(ad::Aggregation agg);
ad::Aggregation aggregation_from_string(std::string_view s);

struct InteractionMap {
  InteractionQuery query;
  std::string response_modality;
  std::vector<double> weights;  // one per response atom
  InteractionMode mode = InteractionMode::kSigned;
  // How the query gradient components are summed before differentiating again.
  ad::Aggregation query_aggregation = ad::Aggregation::kSigned;
  AttributionTarget target;

  friend bool operator==(const InteractionMap&, const InteractionMap&) = default;
};

nlohmann::json to_json(const InteractionMap& m);
InteractionMap interaction_from_json(const nlohmann::json& j);

InteractionMap cm_second_order(const Model& model, const Datapoint& dp, const InteractionQuery& query,
                               const std::string& response_modality, const AttributionTarget& target,
                               InteractionMode mode, ad::Aggregation query_aggregation = ad::Aggregation::kSigned);

struct EmapOptions {
  // Modality pair; defaults to the first two schema modalities.
  std::optional<std::string> first;
  std::optional<std::string> second;
  // Samples above this size are subsampled, stratified by label.
  std::size_t max_exact = 256;
  std::uint64_t seed = 0;
};

struct EmapEstimate {
  std::string first;
  std::string second;
  // Positions in the caller's sample that were used (all of them unless subsampled).
  std::vector<std::size_t> sample_indices;
  std::optional<std::uint64_t> subsample_seed;
  std::vector<double> f;
  std::vector<double> e_first;   // E over the first modality, second held fixed
  std::vector<double> e_second;  // E over the second modality, first held fixed
  double e_both = 0.0;
  std::vector<double> g12;
  double energy = 0.0;  // mean of g12^2
};

nlohmann::json to_json(const EmapEstimate& e);

// Throws SampleTooSmall when fewer than two points are given.
EmapEstimate emap_decompose(const Model& model, std::span<const Datapoint> sample, const AttributionTarget& target,
                            const EmapOptions& options = {});
double emap_interaction_energy(const Model& model, std::span<const Datapoint> sample, const AttributionTarget& target,
                               const EmapOptions& options = {});

struct DimeResult {
  std::map<std::string, AttributionMap> unimodal_part;
  std::map<std::string, AttributionMap> crossmodal_part;
};

nlohmann::json to_json(const DimeResult& r);

// LIME against the EMAP additive part a = E1 f + E2 f - E12 f and the
// residual r = f - a, both evaluated at masked versions of dp.
DimeResult dime_local(const Model& model, const Datapoint& dp, std::span<const Datapoint> sample,
                      const AttributionTarget& target, const PerturbConfig& cfg, const EmapOptions& options = {});

struct AlignmentRecord {
  std::size_t datapoint = 0;
  InteractionPair pair;
  std::vector<std::string> ranked_regions;
  std::vector<double> region_scores;  // aligned with ranked_regions
  std::string truth_region;
  // Regions scoring at least as high as the truth region (ties count against it).
  std::size_t truth_rank = 0;
};

struct AlignmentScore {
  double top1_hit_rate = 0.0;
  double top2_hit_rate = 0.0;
  std::vector<AlignmentRecord> records;
};

nlohmann::json to_json(const AlignmentScore& s);

struct AlignmentConfig {
  std::size_t max_queries = 200;
  // Target per query; unset means the sum of all logits.
  std::optional<AttributionTarget> target;
  // Use the planted pair's class logit as target.
  bool pair_class_target = false;
  InteractionMode mode = InteractionMode::kAbsolute;
  ad::Aggregation query_aggregation = ad::Aggregation::kAbsolute;
};

// Throws MissingGroundTruth when no point carries planted pairs or the
// partner modality has no regions.
AlignmentScore alignment_accuracy(const Model& model, const Dataset& dataset, const AlignmentConfig& cfg = {});

}  // namespace mviz
