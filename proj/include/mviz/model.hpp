#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "mviz/autodiff.hpp"
#include "mviz/dataset.hpp"
#include "mviz/tensor.hpp"

namespace mviz {

enum class Architecture { kAdditive, kBilinear, kMlpFusion, kLateFusion, kCustom };
enum class Activation { kSoftplus, kRelu, kIdentity };

std::string_view to_string(Architecture arch);
Architecture architecture_from_string(std::string_view name);
std::string_view to_string(Activation act);
Activation activation_from_string(std::string_view name);

inline constexpr double kSoftplusSharpness = 10.0;
inline constexpr std::string_view kPenultimate = "penultimate";
inline constexpr std::string_view kLogits = "logits";

struct ModelConfig {
  Architecture architecture = Architecture::kMlpFusion;
  std::size_t penultimate_dim = 8;
  std::size_t hidden_dim = 64;
  std::size_t embed_dim = 4;  // token modalities only
  Activation activation = Activation::kSoftplus;
  std::uint64_t seed = 0;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

using ParamSet = std::map<std::string, Tensor, std::less<>>;

// Builder for hand-made models used in tests: receives the modality and
// parameter input nodes, returns named layers. Must include "penultimate";
// the model appends logits = head.W * penultimate + head.b.
using LayerBuilder = std::function<std::map<std::string, ad::Node>(
    ad::Graph& g, const std::map<std::string, ad::Node>& inputs, const std::map<std::string, ad::Node>& params)>;

// A trained multimodal classifier. Parameters are bound as graph inputs
// named "param:<name>", so graph structure is independent of their values
// and both are immutable after construction; copies share storage.
class Model {
 public:
  static Model create(const DatasetSchema& schema, const ModelConfig& config);
  static Model from_parameters(const DatasetSchema& schema, const ModelConfig& config, ParamSet params);
  static Model custom(const DatasetSchema& schema, const LayerBuilder& builder, ParamSet params);
  // Bilinear model with penultimate z_c = x1^T W_c x2 and identity head.
  static Model bilinear(const DatasetSchema& schema, std::span<const Tensor> class_matrices);

  const DatasetSchema& schema() const noexcept { return *schema_; }
  const ModelConfig& config() const noexcept { return config_; }
  Architecture architecture() const noexcept { return config_.architecture; }
  std::size_t num_classes() const noexcept { return schema_->num_classes; }
  std::size_t penultimate_dim() const;
  const std::vector<std::string>& layer_names() const noexcept { return layers_->names; }
  bool has_layer(std::string_view layer) const;
  std::size_t layer_width(std::string_view layer) const;

  const ParamSet& parameters() const noexcept { return *params_; }
  const Tensor& parameter(std::string_view name) const;
  Model with_parameters(ParamSet params) const;

  // Graph whose output is the requested layer ([B, width]).
  const ad::Graph& graph(std::string_view layer = kLogits) const;
  ad::Bindings bindings(const ModalityBatch& inputs) const;
  ad::Bindings bindings(const Datapoint& dp) const;

  Tensor forward(const Datapoint& dp) const;                   // [C]
  Tensor forward_batch(const ModalityBatch& inputs) const;     // [B, C]
  Tensor penultimate(const Datapoint& dp) const;               // [d]
  Tensor layer_activation(const Datapoint& dp, std::string_view layer) const;
  Tensor layer_activation_batch(const ModalityBatch& inputs, std::string_view layer) const;
  std::size_t predict_label(const Datapoint& dp) const;
  std::vector<std::size_t> predict_labels(const Dataset& dataset) const;

  // logits = head.W * features + head.b
  Tensor apply_head(const Tensor& features) const;

  nlohmann::json to_json() const;
  static Model from_json(const nlohmann::json& j);
  void save(const std::filesystem::path& file) const;
  static Model load(const std::filesystem::path& file);
  // sha256 of the full-precision checkpoint.
  const std::string& digest() const noexcept { return digest_; }

 private:
  struct Layers {
    std::vector<std::string> names;
    std::map<std::string, ad::Graph, std::less<>> graphs;
  };

  static Model build(const DatasetSchema& schema, const ModelConfig& config, ParamSet params,
                     const LayerBuilder* custom);
  void check_inputs(const ModalityBatch& inputs) const;

  std::shared_ptr<const DatasetSchema> schema_;
  ModelConfig config_;
  std::shared_ptr<const ParamSet> params_;
  std::shared_ptr<const Layers> layers_;
  std::string digest_;
};

std::size_t argmax_lowest(std::span<const double> values);
std::vector<double> softmax(std::span<const double> logits);
double accuracy(const Model& model, const Dataset& dataset);

struct TrainConfig {
  double lr = 0.01;
  std::size_t epochs = 30;
  std::size_t batch = 64;
  std::uint64_t seed = 0;
};

struct TrainResult {
  Model model;
  double train_accuracy = 0.0;
  double val_accuracy = 0.0;
  std::vector<double> epoch_loss;
};

// Adam on mean softmax cross-entropy over shuffled mini-batches. Throws
// Divergence when the loss becomes non-finite.
TrainResult train_model(const ModelConfig& config, const Dataset& train, const Dataset* val, const TrainConfig& cfg);

enum class Optimizer { kAdam, kSgd };

std::string_view to_string(Optimizer opt);
Optimizer optimizer_from_string(std::string_view name);

// Updates only head.W / head.b; every other parameter keeps its storage.
Model fine_tune_last_layer(const Model& model, std::span<const Datapoint> points, std::size_t epochs, double lr,
                           std::uint64_t seed, std::size_t batch = 32, Optimizer optimizer = Optimizer::kAdam);

// Fresh Glorot draw for the head only (model randomization sanity check).
Model reinitialize_head(const Model& model, std::uint64_t seed);

}  // namespace mviz
