#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "mviz/tensor.hpp"

namespace mviz {

enum class ModalityKind { kContinuous, kToken };

struct ModalitySpec {
  std::string name;
  std::size_t atom_count = 1;
  std::size_t atom_dim = 1;  // vocabulary size for token modalities
  ModalityKind kind = ModalityKind::kContinuous;

  std::size_t width() const noexcept { return atom_count * atom_dim; }
  friend bool operator==(const ModalitySpec&, const ModalitySpec&) = default;
};

struct Region {
  std::string name;
  std::vector<std::size_t> atoms;
  friend bool operator==(const Region&, const Region&) = default;
};

struct DatasetSchema {
  std::vector<ModalitySpec> modalities;
  std::size_t num_classes = 2;
  // modality name -> partition of its atoms, ordered by region name
  std::map<std::string, std::vector<Region>> regions;

  const ModalitySpec& modality(std::string_view name) const;
  bool has_modality(std::string_view name) const;
  std::size_t modality_index(std::string_view name) const;
  const std::vector<Region>& regions_of(std::string_view modality) const;
  std::optional<std::size_t> region_of(std::string_view modality, std::size_t atom) const;

  // Throws InvalidSpec when atom counts are zero or regions do not partition.
  void validate() const;

  friend bool operator==(const DatasetSchema&, const DatasetSchema&) = default;
};

struct ModalityAtom {
  std::string modality;
  std::size_t atom = 0;
  friend bool operator==(const ModalityAtom&, const ModalityAtom&) = default;
};

// strength * <atom_a, atom_b> added to the score of target_class.
struct InteractionPair {
  ModalityAtom a;
  ModalityAtom b;
  double strength = 1.0;
  std::size_t target_class = 0;
  friend bool operator==(const InteractionPair&, const InteractionPair&) = default;
};

struct DatapointMeta {
  std::optional<std::size_t> clean_label;
  bool noise_flipped = false;
  bool corrupted = false;
  bool bug_affected = false;
  std::map<std::string, std::map<std::string, bool>> region_active;
  std::vector<InteractionPair> planted_pairs;

  friend bool operator==(const DatapointMeta&, const DatapointMeta&) = default;
};

struct Datapoint {
  // modality name -> [atom_count, atom_dim]
  std::map<std::string, Tensor, std::less<>> modalities;
  std::size_t label = 0;
  DatapointMeta meta;

  friend bool operator==(const Datapoint&, const Datapoint&) = default;
};

struct Dataset {
  DatasetSchema schema;
  std::vector<Datapoint> points;

  std::size_t size() const noexcept { return points.size(); }
  bool empty() const noexcept { return points.empty(); }
  friend bool operator==(const Dataset&, const Dataset&) = default;
};

struct SplitSet {
  Dataset train;
  Dataset val;
  Dataset test;

  const Dataset& split(std::string_view name) const;
  friend bool operator==(const SplitSet&, const SplitSet&) = default;
};

// Throws SchemaMismatch when a datapoint does not match the schema.
void check_conforms(const DatasetSchema& schema, const Datapoint& dp);

// Per-modality row batch: name -> [B, atom_count * atom_dim].
using ModalityBatch = std::map<std::string, Tensor, std::less<>>;
ModalityBatch stack_inputs(const DatasetSchema& schema, std::span<const Datapoint> points);
ModalityBatch stack_inputs(const DatasetSchema& schema, std::span<const Datapoint* const> points);

// Mean squared component over a region's atoms.
double region_energy(const Tensor& atoms, const Region& region);

// Per-atom, per-component dataset mean (token modalities get zeros).
std::map<std::string, Tensor, std::less<>> dataset_mean(const Dataset& dataset);

// ---------------------------------------------------------------------------
// Synthetic tasks with planted ground truth.

struct BugSpec {
  std::size_t target_class = 0;
  std::string modality;
  std::string region;
  double corruption_rate = 1.0;
  // A region is active when its energy exceeds this threshold.
  double active_threshold = 0.45;
  std::optional<std::size_t> corrupt_to;  // default (target_class + 1) % C

  std::size_t corrupted_label(std::size_t num_classes) const;
  friend bool operator==(const BugSpec&, const BugSpec&) = default;
};

struct SyntheticSpec {
  DatasetSchema schema;
  std::uint64_t seed = 0;
  // modality -> [num_classes, width] linear weights on flattened atoms
  std::map<std::string, Tensor, std::less<>> unimodal_weights;
  std::vector<InteractionPair> interactions;
  double label_noise = 0.02;
  std::optional<BugSpec> bug;
  // Default split sizes used by the CLI.
  std::size_t n_train = 2000;
  std::size_t n_val = 500;
  std::size_t n_test = 500;

  // Throws InvalidSpec.
  void validate() const;
};

// Noise-free, bug-free label from the planted rule (argmax, lowest index wins ties).
std::size_t rule_label(const SyntheticSpec& spec, const Datapoint& dp);
std::vector<double> rule_scores(const SyntheticSpec& spec, const Datapoint& dp);

SplitSet make_synthetic_dataset(const SyntheticSpec& spec, std::size_t n_train, std::size_t n_val, std::size_t n_test,
                                std::uint64_t seed);

// Ready-made tasks shared by tests, the CLI and the acceptance suite.
SyntheticSpec unimodal_task_spec();     // linearly separable, no interactions
SyntheticSpec interaction_task_spec();  // dominated by planted cross-modal pairs
SyntheticSpec bug_task_spec();          // planted train-split label bug

// ---------------------------------------------------------------------------
// JSON and file formats.

nlohmann::json to_json(const DatasetSchema& schema);
DatasetSchema schema_from_json(const nlohmann::json& j);
nlohmann::json to_json(const Datapoint& dp, const DatasetSchema& schema);
Datapoint datapoint_from_json(const nlohmann::json& j, const DatasetSchema& schema);
nlohmann::json to_json(const DatapointMeta& meta);
DatapointMeta meta_from_json(const nlohmann::json& j);
nlohmann::json to_json(const InteractionPair& pair);
InteractionPair pair_from_json(const nlohmann::json& j);
nlohmann::json to_json(const SyntheticSpec& spec);
SyntheticSpec synthetic_spec_from_json(const nlohmann::json& j);

// dir/schema.json plus dir/{train,val,test}.jsonl
void write_splits(const SplitSet& splits, const std::filesystem::path& dir);
SplitSet read_splits(const std::filesystem::path& dir);
void write_split(const Dataset& dataset, const std::filesystem::path& file);
Dataset read_split(const DatasetSchema& schema, const std::filesystem::path& file);

}  // namespace mviz
