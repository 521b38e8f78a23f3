#include "mviz/model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include "mviz/canonical.hpp"
#include "mviz/error.hpp"

namespace mviz {

using nlohmann::json;

std::string_view to_string(Architecture arch) {
  switch (arch) {
    case Architecture::kAdditive: return "additive";
    case Architecture::kBilinear: return "bilinear";
    case Architecture::kMlpFusion: return "mlp_fusion";
    case Architecture::kLateFusion: return "late_fusion";
    case Architecture::kCustom: return "custom";
  }
  return "?";
}

Architecture architecture_from_string(std::string_view name) {
  for (auto a : {Architecture::kAdditive, Architecture::kBilinear, Architecture::kMlpFusion, Architecture::kLateFusion}) {
    if (to_string(a) == name) return a;
  }
  throw Error(ErrorCode::kInvalidArgument, "unknown architecture '" + std::string(name) + "'");
}

std::string_view to_string(Activation act) {
  switch (act) {
    case Activation::kSoftplus: return "softplus";
    case Activation::kRelu: return "relu";
    case Activation::kIdentity: return "identity";
  }
  return "?";
}

Activation activation_from_string(std::string_view name) {
  for (auto a : {Activation::kSoftplus, Activation::kRelu, Activation::kIdentity}) {
    if (to_string(a) == name) return a;
  }
  throw Error(ErrorCode::kInvalidArgument, "unknown activation '" + std::string(name) + "'");
}

namespace {

constexpr std::string_view kParamPrefix = "param:";

std::string param_slot(std::string_view name) { return std::string(kParamPrefix) + std::string(name); }

ad::Node activate(ad::Graph& g, ad::Node x, Activation act) {
  switch (act) {
    case Activation::kSoftplus: return g.softplus(x, kSoftplusSharpness);
    case Activation::kRelu: return g.relu(x);
    case Activation::kIdentity: return x;
  }
  return x;
}

std::size_t encoded_width(const ModalitySpec& m, const ModelConfig& config) {
  return m.kind == ModalityKind::kToken ? m.atom_count * config.embed_dim : m.width();
}

// Split d units across M modalities; the first modalities take the remainder.
std::vector<std::size_t> split_units(std::size_t d, std::size_t parts) {
  std::vector<std::size_t> out(parts, d / parts);
  for (std::size_t i = 0; i < d % parts; ++i) ++out[i];
  return out;
}

std::map<std::string, Shape> expected_shapes(const DatasetSchema& schema, const ModelConfig& config) {
  std::map<std::string, Shape> shapes;
  const std::size_t d = config.penultimate_dim;
  const std::size_t h = config.hidden_dim;
  std::size_t in_total = 0;
  for (const auto& m : schema.modalities) {
    if (m.kind == ModalityKind::kToken) shapes["embed." + m.name] = {m.atom_dim, config.embed_dim};
    in_total += encoded_width(m, config);
  }
  switch (config.architecture) {
    case Architecture::kAdditive: {
      const auto units = split_units(d, schema.modalities.size());
      for (std::size_t i = 0; i < schema.modalities.size(); ++i) {
        const auto& m = schema.modalities[i];
        shapes["enc." + m.name + ".W"] = {units[i], encoded_width(m, config)};
        shapes["enc." + m.name + ".b"] = {units[i]};
      }
      break;
    }
    case Architecture::kLateFusion:
      for (const auto& m : schema.modalities) {
        shapes[m.name + ".W1"] = {h, encoded_width(m, config)};
        shapes[m.name + ".b1"] = {h};
        shapes[m.name + ".W2"] = {d, h};
        shapes[m.name + ".b2"] = {d};
      }
      break;
    case Architecture::kMlpFusion:
      shapes["fuse.W1"] = {h, in_total};
      shapes["fuse.b1"] = {h};
      shapes["fuse.W2"] = {d, h};
      shapes["fuse.b2"] = {d};
      break;
    case Architecture::kBilinear:
      shapes["bilinear.W"] = {encoded_width(schema.modalities[0], config),
                              d * encoded_width(schema.modalities[1], config)};
      break;
    case Architecture::kCustom:
      throw Error(ErrorCode::kInvalidArgument, "custom models have no fixed parameter layout");
  }
  shapes["head.W"] = {schema.num_classes, d};
  shapes["head.b"] = {schema.num_classes};
  return shapes;
}

void validate_config(const DatasetSchema& schema, const ModelConfig& config) {
  schema.validate();
  if (config.penultimate_dim < 1 || config.hidden_dim < 1 || config.embed_dim < 1) {
    throw Error(ErrorCode::kInvalidArgument, "layer widths must be positive");
  }
  if (config.architecture == Architecture::kBilinear && schema.modalities.size() != 2) {
    throw Error(ErrorCode::kInvalidArgument, "bilinear architecture needs exactly two modalities");
  }
  if (config.architecture == Architecture::kAdditive && config.penultimate_dim < schema.modalities.size()) {
    throw Error(ErrorCode::kInvalidArgument, "additive architecture needs penultimate_dim >= number of modalities");
  }
}

Tensor glorot(std::mt19937_64& rng, std::size_t out, std::size_t in) {
  const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
  std::uniform_real_distribution<double> u(-limit, limit);
  std::vector<double> v(out * in);
  for (double& x : v) x = u(rng);
  return Tensor::matrix(out, in, std::move(v));
}

// Column tiling [w, d*w] with T[j, k*w + j] = 1 and block summation [d*w, d].
Tensor tile_matrix(std::size_t w, std::size_t d) {
  Tensor t = Tensor::zeros({w, d * w});
  for (std::size_t k = 0; k < d; ++k)
    for (std::size_t j = 0; j < w; ++j) t.at(j, k * w + j) = 1.0;
  return t;
}

Tensor block_sum_matrix(std::size_t w, std::size_t d) {
  Tensor s = Tensor::zeros({d * w, d});
  for (std::size_t k = 0; k < d; ++k)
    for (std::size_t j = 0; j < w; ++j) s.at(k * w + j, k) = 1.0;
  return s;
}

json tensor_json(const Tensor& t) { return {{"shape", t.shape()}, {"data", t.values()}}; }

Tensor tensor_from(const json& j) {
  return Tensor(j.at("shape").get<Shape>(), j.at("data").get<std::vector<double>>());
}

}  // namespace

Model Model::build(const DatasetSchema& schema, const ModelConfig& config, ParamSet params, const LayerBuilder* custom) {
  for (const auto& [name, t] : params) {
    if (!t.all_finite()) throw Error(ErrorCode::kInvalidArgument, "parameter '" + name + "' is not finite");
  }
  ad::Graph g;
  std::map<std::string, ad::Node> inputs;
  for (const auto& m : schema.modalities) inputs.emplace(m.name, g.input(m.name));
  std::map<std::string, ad::Node> p;
  for (const auto& [name, t] : params) p.emplace(name, g.input(param_slot(name)));
  auto param = [&](const std::string& name) {
    auto it = p.find(name);
    if (it == p.end()) throw Error(ErrorCode::kInvalidArgument, "missing parameter '" + name + "'");
    return it->second;
  };

  std::vector<ad::Node> encoded;
  for (const auto& m : schema.modalities) {
    ad::Node x = inputs.at(m.name);
    if (m.kind == ModalityKind::kToken && !custom) {
      const ad::Node rows = g.reshape_cols(x, m.atom_dim);
      x = g.reshape_cols(g.matmul(rows, param("embed." + m.name)), m.atom_count * config.embed_dim);
    }
    encoded.push_back(x);
  }

  std::vector<std::pair<std::string, ad::Node>> layers;
  const ad::Node input_layer = g.concat_cols(encoded);
  layers.emplace_back("input", input_layer);
  ad::Node pen{};
  switch (custom ? Architecture::kCustom : config.architecture) {
    case Architecture::kAdditive: {
      std::vector<ad::Node> parts;
      for (std::size_t i = 0; i < schema.modalities.size(); ++i) {
        const std::string& name = schema.modalities[i].name;
        parts.push_back(
            activate(g, g.affine(encoded[i], param("enc." + name + ".W"), param("enc." + name + ".b")), config.activation));
      }
      pen = g.concat_cols(parts);
      break;
    }
    case Architecture::kLateFusion: {
      std::vector<ad::Node> hidden;
      std::optional<ad::Node> sum;
      for (std::size_t i = 0; i < schema.modalities.size(); ++i) {
        const std::string& name = schema.modalities[i].name;
        const ad::Node h = activate(g, g.affine(encoded[i], param(name + ".W1"), param(name + ".b1")), config.activation);
        hidden.push_back(h);
        const ad::Node o = activate(g, g.affine(h, param(name + ".W2"), param(name + ".b2")), config.activation);
        sum = sum ? g.add(*sum, o) : o;
      }
      layers.emplace_back("hidden", g.concat_cols(hidden));
      pen = *sum;
      break;
    }
    case Architecture::kMlpFusion: {
      const ad::Node h = activate(g, g.affine(input_layer, param("fuse.W1"), param("fuse.b1")), config.activation);
      layers.emplace_back("hidden", h);
      pen = activate(g, g.affine(h, param("fuse.W2"), param("fuse.b2")), config.activation);
      break;
    }
    case Architecture::kBilinear: {
      const std::size_t w2 = encoded_width(schema.modalities[1], config);
      const std::size_t d = config.penultimate_dim;
      const ad::Node left = g.matmul(encoded[0], param("bilinear.W"));
      const ad::Node right = g.matmul(encoded[1], g.constant(tile_matrix(w2, d)));
      pen = g.matmul(g.mul(left, right), g.constant(block_sum_matrix(w2, d)));
      break;
    }
    case Architecture::kCustom: {
      auto built = (*custom)(g, inputs, p);
      auto it = built.find(std::string(kPenultimate));
      if (it == built.end()) throw Error(ErrorCode::kInvalidArgument, "custom builder must return a penultimate layer");
      pen = it->second;
      built.erase(it);
      for (const auto& [name, node] : built) {
        if (name == "input" || name == kLogits) throw Error(ErrorCode::kInvalidArgument, "reserved layer name " + name);
        layers.emplace_back(name, node);
      }
      break;
    }
  }
  layers.emplace_back(std::string(kPenultimate), pen);
  layers.emplace_back(std::string(kLogits), g.affine(pen, param("head.W"), param("head.b")));

  auto shared_layers = std::make_shared<Layers>();
  for (const auto& [name, node] : layers) {
    shared_layers->names.push_back(name);
    ad::Graph copy = g;
    copy.set_output(node);
    shared_layers->graphs.emplace(name, std::move(copy));
  }

  Model model;
  model.schema_ = std::make_shared<const DatasetSchema>(schema);
  model.config_ = config;
  if (custom) model.config_.architecture = Architecture::kCustom;
  model.params_ = std::make_shared<const ParamSet>(std::move(params));
  model.layers_ = std::move(shared_layers);
  model.digest_ = sha256_hex(model.to_json().dump());
  return model;
}

Model Model::create(const DatasetSchema& schema, const ModelConfig& config) {
  validate_config(schema, config);
  std::mt19937_64 rng(config.seed);
  ParamSet params;
  // Shapes are iterated in name order so initialisation is layout-stable.
  for (const auto& [name, shape] : expected_shapes(schema, config)) {
    if (shape.size() == 1) {
      params.emplace(name, Tensor::zeros(shape));
    } else if (name.starts_with("embed.")) {
      std::uniform_real_distribution<double> u(-1.0, 1.0);
      Tensor t = Tensor::zeros(shape);
      for (std::size_t i = 0; i < t.size(); ++i) t[i] = u(rng);
      params.emplace(name, std::move(t));
    } else if (name == "head.W" && config.architecture == Architecture::kBilinear &&
               config.penultimate_dim == schema.num_classes) {
      Tensor eye = Tensor::zeros(shape);
      for (std::size_t c = 0; c < schema.num_classes; ++c) eye.at(c, c) = 1.0;
      params.emplace(name, std::move(eye));
    } else if (name == "bilinear.W") {
      // Glorot over one class block.
      const std::size_t w2 = shape[1] / config.penultimate_dim;
      const double limit = std::sqrt(6.0 / static_cast<double>(shape[0] + w2));
      std::uniform_real_distribution<double> u(-limit, limit);
      Tensor t = Tensor::zeros(shape);
      for (std::size_t i = 0; i < t.size(); ++i) t[i] = u(rng);
      params.emplace(name, std::move(t));
    } else {
      params.emplace(name, glorot(rng, shape[0], shape[1]));
    }
  }
  return build(schema, config, std::move(params), nullptr);
}

Model Model::from_parameters(const DatasetSchema& schema, const ModelConfig& config, ParamSet params) {
  validate_config(schema, config);
  const auto shapes = expected_shapes(schema, config);
  if (shapes.size() != params.size()) throw Error(ErrorCode::kInvalidArgument, "unexpected parameter set");
  for (const auto& [name, shape] : shapes) {
    auto it = params.find(name);
    if (it == params.end()) throw Error(ErrorCode::kInvalidArgument, "missing parameter '" + name + "'");
    if (it->second.shape() != shape) {
      throw Error(ErrorCode::kShapeMismatch, "parameter '" + name + "' has shape " + shape_string(it->second.shape()) +
                                                 ", expected " + shape_string(shape));
    }
  }
  return build(schema, config, std::move(params), nullptr);
}

Model Model::custom(const DatasetSchema& schema, const LayerBuilder& builder, ParamSet params) {
  schema.validate();
  auto it = params.find("head.W");
  if (it == params.end() || it->second.rank() != 2 || it->second.rows() != schema.num_classes) {
    throw Error(ErrorCode::kInvalidArgument, "custom model needs head.W of shape [num_classes, d]");
  }
  ModelConfig config;
  config.architecture = Architecture::kCustom;
  config.penultimate_dim = it->second.cols();
  config.activation = Activation::kIdentity;
  return build(schema, config, std::move(params), &builder);
}

Model Model::bilinear(const DatasetSchema& schema, std::span<const Tensor> class_matrices) {
  ModelConfig config;
  config.architecture = Architecture::kBilinear;
  config.penultimate_dim = class_matrices.size();
  config.activation = Activation::kIdentity;
  validate_config(schema, config);
  const std::size_t w1 = schema.modalities[0].width();
  const std::size_t w2 = schema.modalities[1].width();
  const std::size_t d = class_matrices.size();
  if (schema.modalities[0].kind != ModalityKind::kContinuous || schema.modalities[1].kind != ModalityKind::kContinuous) {
    throw Error(ErrorCode::kInvalidArgument, "hand-set bilinear models need continuous modalities");
  }
  Tensor w = Tensor::zeros({w1, d * w2});
  for (std::size_t k = 0; k < d; ++k) {
    const Tensor& m = class_matrices[k];
    if (m.rows() != w1 || m.cols() != w2) throw Error(ErrorCode::kShapeMismatch, "class matrix must be [w1, w2]");
    for (std::size_t i = 0; i < w1; ++i)
      for (std::size_t j = 0; j < w2; ++j) w.at(i, k * w2 + j) = m.at(i, j);
  }
  Tensor head = Tensor::zeros({schema.num_classes, d});
  for (std::size_t c = 0; c < std::min(d, schema.num_classes); ++c) head.at(c, c) = 1.0;
  ParamSet params;
  params.emplace("bilinear.W", std::move(w));
  params.emplace("head.W", std::move(head));
  params.emplace("head.b", Tensor::zeros({schema.num_classes}));
  return from_parameters(schema, config, std::move(params));
}

std::size_t Model::penultimate_dim() const { return parameter("head.W").cols(); }

bool Model::has_layer(std::string_view layer) const { return layers_->graphs.contains(layer); }

std::size_t Model::layer_width(std::string_view layer) const {
  ModalityBatch zeros;
  for (const auto& m : schema_->modalities) zeros.emplace(m.name, Tensor::zeros({1, m.width()}));
  return layer_activation_batch(zeros, layer).cols();
}

const Tensor& Model::parameter(std::string_view name) const {
  auto it = params_->find(name);
  if (it == params_->end()) throw Error(ErrorCode::kNotFound, "no parameter '" + std::string(name) + "'");
  return it->second;
}

Model Model::with_parameters(ParamSet params) const {
  if (params.size() != params_->size()) throw Error(ErrorCode::kInvalidArgument, "parameter set changed");
  for (const auto& [name, t] : *params_) {
    auto it = params.find(name);
    if (it == params.end() || it->second.shape() != t.shape()) {
      throw Error(ErrorCode::kShapeMismatch, "parameter '" + name + "' changed shape");
    }
    if (!it->second.all_finite()) throw Error(ErrorCode::kDivergence, "parameter '" + name + "' is not finite");
  }
  Model copy = *this;
  copy.params_ = std::make_shared<const ParamSet>(std::move(params));
  copy.digest_ = sha256_hex(copy.to_json().dump());
  return copy;
}

const ad::Graph& Model::graph(std::string_view layer) const {
  auto it = layers_->graphs.find(layer);
  if (it == layers_->graphs.end()) throw Error(ErrorCode::kUnknownLayer, "unknown layer '" + std::string(layer) + "'");
  return it->second;
}

void Model::check_inputs(const ModalityBatch& inputs) const {
  std::optional<std::size_t> rows;
  for (const auto& m : schema_->modalities) {
    auto it = inputs.find(m.name);
    if (it == inputs.end()) throw Error(ErrorCode::kSchemaMismatch, "missing modality '" + m.name + "'");
    if (it->second.rank() != 2 || it->second.cols() != m.width() || (rows && *rows != it->second.rows())) {
      throw Error(ErrorCode::kSchemaMismatch, "modality '" + m.name + "' batch has shape " +
                                                  shape_string(it->second.shape()));
    }
    rows = it->second.rows();
  }
}

ad::Bindings Model::bindings(const ModalityBatch& inputs) const {
  check_inputs(inputs);
  ad::Bindings b;
  for (const auto& m : schema_->modalities) b.emplace(m.name, inputs.find(m.name)->second);
  for (const auto& [name, t] : *params_) b.emplace(param_slot(name), t);
  return b;
}

ad::Bindings Model::bindings(const Datapoint& dp) const {
  check_conforms(*schema_, dp);
  return bindings(stack_inputs(*schema_, std::span<const Datapoint>(&dp, 1)));
}

Tensor Model::layer_activation_batch(const ModalityBatch& inputs, std::string_view layer) const {
  return evaluate(graph(layer), bindings(inputs));
}

Tensor Model::layer_activation(const Datapoint& dp, std::string_view layer) const {
  const Tensor row = evaluate(graph(layer), bindings(dp));
  return row.reshaped({row.size()});
}

Tensor Model::forward_batch(const ModalityBatch& inputs) const { return layer_activation_batch(inputs, kLogits); }
Tensor Model::forward(const Datapoint& dp) const { return layer_activation(dp, kLogits); }
Tensor Model::penultimate(const Datapoint& dp) const { return layer_activation(dp, kPenultimate); }

std::size_t Model::predict_label(const Datapoint& dp) const { return argmax_lowest(forward(dp).data()); }

std::vector<std::size_t> Model::predict_labels(const Dataset& dataset) const {
  std::vector<std::size_t> out;
  out.reserve(dataset.size());
  constexpr std::size_t kChunk = 512;
  for (std::size_t start = 0; start < dataset.size(); start += kChunk) {
    const std::size_t n = std::min(kChunk, dataset.size() - start);
    const Tensor logits = forward_batch(stack_inputs(*schema_, std::span<const Datapoint>(dataset.points).subspan(start, n)));
    for (std::size_t r = 0; r < n; ++r) {
      out.push_back(argmax_lowest(logits.data().subspan(r * logits.cols(), logits.cols())));
    }
  }
  return out;
}

Tensor Model::apply_head(const Tensor& features) const {
  const Tensor& w = parameter("head.W");
  const Tensor& b = parameter("head.b");
  const std::size_t rows = features.rank() <= 1 ? 1 : features.rows();
  const std::size_t d = features.size() / std::max<std::size_t>(rows, 1);
  if (d != w.cols()) throw Error(ErrorCode::kShapeMismatch, "features do not match head width");
  std::vector<double> out(rows * w.rows());
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < w.rows(); ++c) {
      double acc = b[c];
      for (std::size_t j = 0; j < d; ++j) acc += w.at(c, j) * features[r * d + j];
      out[r * w.rows() + c] = acc;
    }
  }
  if (features.rank() <= 1) return Tensor::vector(std::move(out));
  return Tensor::matrix(rows, w.rows(), std::move(out));
}

json Model::to_json() const {
  json params = json::object();
  for (const auto& [name, t] : *params_) params[name] = tensor_json(t);
  return {{"format", "mviz-checkpoint/1"},
          {"architecture", to_string(config_.architecture)},
          {"config",
           {{"penultimate_dim", config_.penultimate_dim},
            {"hidden_dim", config_.hidden_dim},
            {"embed_dim", config_.embed_dim},
            {"activation", to_string(config_.activation)},
            {"seed", config_.seed}}},
          {"schema", mviz::to_json(*schema_)},
          {"layer_names", layers_->names},
          {"parameters", params}};
}

Model Model::from_json(const json& j) {
  try {
    if (j.at("format") != "mviz-checkpoint/1") throw Error(ErrorCode::kInvalidArgument, "unsupported checkpoint format");
    ModelConfig config;
    config.architecture = architecture_from_string(j.at("architecture").get<std::string>());
    const auto& c = j.at("config");
    config.penultimate_dim = c.at("penultimate_dim").get<std::size_t>();
    config.hidden_dim = c.at("hidden_dim").get<std::size_t>();
    config.embed_dim = c.at("embed_dim").get<std::size_t>();
    config.activation = activation_from_string(c.at("activation").get<std::string>());
    config.seed = c.at("seed").get<std::uint64_t>();
    ParamSet params;
    for (const auto& [name, t] : j.at("parameters").items()) params.emplace(name, tensor_from(t));
    Model model = from_parameters(schema_from_json(j.at("schema")), config, std::move(params));
    if (j.contains("layer_names") && j.at("layer_names").get<std::vector<std::string>>() != model.layer_names()) {
      throw Error(ErrorCode::kInvalidArgument, "checkpoint layer names do not match architecture");
    }
    return model;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kInvalidArgument, std::string("malformed checkpoint: ") + e.what());
  }
}

void Model::save(const std::filesystem::path& file) const {
  if (config_.architecture == Architecture::kCustom) {
    throw Error(ErrorCode::kInvalidArgument, "custom models cannot be checkpointed");
  }
  std::ofstream out(file);
  if (!out) throw Error(ErrorCode::kIoFailure, "cannot write " + file.string());
  out << to_json().dump() << '\n';
  if (!out) throw Error(ErrorCode::kIoFailure, "write failed for " + file.string());
}

Model Model::load(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw Error(ErrorCode::kIoFailure, "cannot read " + file.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kIoFailure, file.string() + ": " + e.what());
  }
  return from_json(j);
}

// ---------------------------------------------------------------------------

std::size_t argmax_lowest(std::span<const double> values) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i)
    if (values[i] > values[best]) best = i;
  return best;
}

std::vector<double> softmax(std::span<const double> logits) {
  const double m = *std::max_element(logits.begin(), logits.end());
  std::vector<double> p(logits.size());
  double z = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) z += p[i] = std::exp(logits[i] - m);
  for (double& v : p) v /= z;
  return p;
}

double accuracy(const Model& model, const Dataset& dataset) {
  if (dataset.empty()) return 0.0;
  const auto pred = model.predict_labels(dataset);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == dataset.points[i].label;
  return static_cast<double>(hits) / static_cast<double>(pred.size());
}

namespace {

struct Adam {
  double lr;
  std::map<std::string, std::vector<double>, std::less<>> m, v;
  std::size_t t = 0;
  static constexpr double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

  void step(ParamSet& params, const std::map<std::string, Tensor, std::less<>>& grads) {
    ++t;
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (const auto& [name, g] : grads) {
      Tensor& p = params.find(name)->second;
      auto& mm = m[name];
      auto& vv = v[name];
      mm.resize(p.size(), 0.0);
      vv.resize(p.size(), 0.0);
      for (std::size_t i = 0; i < p.size(); ++i) {
        mm[i] = beta1 * mm[i] + (1 - beta1) * g[i];
        vv[i] = beta2 * vv[i] + (1 - beta2) * g[i] * g[i];
        p[i] -= lr * (mm[i] / c1) / (std::sqrt(vv[i] / c2) + eps);
      }
    }
  }
};

// Mean cross-entropy and its logit gradient, (softmax - onehot) / B.
double cross_entropy(const Tensor& logits, std::span<const std::size_t> labels, Tensor* dlogits) {
  const std::size_t b = logits.rows(), c = logits.cols();
  double loss = 0.0;
  if (dlogits) *dlogits = Tensor::zeros({b, c});
  for (std::size_t r = 0; r < b; ++r) {
    const auto p = softmax(logits.data().subspan(r * c, c));
    loss -= std::log(std::max(p[labels[r]], 1e-300));
    if (dlogits) {
      for (std::size_t k = 0; k < c; ++k) {
        dlogits->at(r, k) = (p[k] - (k == labels[r] ? 1.0 : 0.0)) / static_cast<double>(b);
      }
    }
  }
  return loss / static_cast<double>(b);
}

}  // namespace

TrainResult train_model(const ModelConfig& config, const Dataset& train, const Dataset* val, const TrainConfig& cfg) {
  if (train.empty()) throw Error(ErrorCode::kEmptyDataset, "training set is empty");
  if (cfg.batch < 1) throw Error(ErrorCode::kInvalidArgument, "batch size must be positive");
  Model model = Model::create(train.schema, config);
  TrainResult result{model, 0.0, 0.0, {}};
  if (cfg.epochs > 0) {
    ad::Graph g = model.graph(kLogits);
    const ad::Node seed = g.input("__dlogits");
    std::vector<std::string> names;
    std::vector<ad::Node> slots;
    for (const auto& [name, t] : model.parameters()) {
      names.push_back(name);
      slots.push_back(g.require_input(param_slot(name)));
    }
    const std::vector<ad::Node> grads = g.backward(g.output(), seed, slots);

    ParamSet params = model.parameters();
    Adam adam{cfg.lr, {}, {}};
    std::mt19937_64 rng(cfg.seed);
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);
    std::vector<const Datapoint*> batch;
    std::vector<std::size_t> labels;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
      std::shuffle(order.begin(), order.end(), rng);
      double epoch_loss = 0.0;
      for (std::size_t start = 0; start < order.size(); start += cfg.batch) {
        const std::size_t n = std::min(cfg.batch, order.size() - start);
        batch.clear();
        labels.clear();
        for (std::size_t i = start; i < start + n; ++i) {
          batch.push_back(&train.points[order[i]]);
          labels.push_back(train.points[order[i]].label);
        }
        ad::Bindings b;
        for (auto& [name, t] : stack_inputs(train.schema, std::span<const Datapoint* const>(batch))) b.emplace(name, std::move(t));
        for (const auto& [name, t] : params) b.emplace(param_slot(name), t);
        const Tensor logits = evaluate(model.graph(kLogits), b);
        Tensor dlogits;
        const double loss = cross_entropy(logits, labels, &dlogits);
        if (!std::isfinite(loss)) throw Error(ErrorCode::kDivergence, "loss became non-finite in epoch " + std::to_string(epoch));
        epoch_loss += loss * static_cast<double>(n);
        b.emplace("__dlogits", std::move(dlogits));
        const auto values = evaluate(g, b, grads);
        std::map<std::string, Tensor, std::less<>> named;
        for (std::size_t k = 0; k < names.size(); ++k) named.emplace(names[k], values[k]);
        adam.step(params, named);
      }
      result.epoch_loss.push_back(epoch_loss / static_cast<double>(train.size()));
    }
    for (const auto& [name, t] : params) {
      if (!t.all_finite()) throw Error(ErrorCode::kDivergence, "parameter '" + name + "' diverged");
    }
    result.model = model.with_parameters(std::move(params));
  }
  result.train_accuracy = accuracy(result.model, train);
  if (val) result.val_accuracy = accuracy(result.model, *val);
  return result;
}

std::string_view to_string(Optimizer opt) { return opt == Optimizer::kSgd ? "sgd" : "adam"; }

Optimizer optimizer_from_string(std::string_view name) {
  if (name == "adam") return Optimizer::kAdam;
  if (name == "sgd") return Optimizer::kSgd;
  throw Error(ErrorCode::kInvalidArgument, "unknown optimizer '" + std::string(name) + "'");
}

Model fine_tune_last_layer(const Model& model, std::span<const Datapoint> points, std::size_t epochs, double lr,
                           std::uint64_t seed, std::size_t batch, Optimizer optimizer) {
  if (points.empty()) throw Error(ErrorCode::kEmptyDataset, "fine-tuning needs at least one point");
  if (batch < 1) throw Error(ErrorCode::kInvalidArgument, "batch size must be positive");
  const Tensor features = model.layer_activation_batch(stack_inputs(model.schema(), points), kPenultimate);
  const std::size_t d = features.cols();
  const std::size_t c = model.num_classes();
  ParamSet params = model.parameters();
  Tensor& w = params.find("head.W")->second;
  Tensor& b = params.find("head.b")->second;
  ParamSet head;
  head.emplace("head.W", w);
  head.emplace("head.b", b);
  Adam adam{lr, {}, {}};
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> order(points.size());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += batch) {
      const std::size_t n = std::min(batch, order.size() - start);
      const Tensor& hw = head.at("head.W");
      const Tensor& hb = head.at("head.b");
      Tensor logits = Tensor::zeros({n, c});
      std::vector<std::size_t> labels(n);
      for (std::size_t r = 0; r < n; ++r) {
        const std::size_t i = order[start + r];
        labels[r] = points[i].label;
        for (std::size_t k = 0; k < c; ++k) {
          double acc = hb[k];
          for (std::size_t j = 0; j < d; ++j) acc += hw.at(k, j) * features.at(i, j);
          logits.at(r, k) = acc;
        }
      }
      Tensor dlogits;
      if (!std::isfinite(cross_entropy(logits, labels, &dlogits))) {
        throw Error(ErrorCode::kDivergence, "fine-tuning loss became non-finite");
      }
      std::map<std::string, Tensor, std::less<>> grads;
      Tensor gw = Tensor::zeros({c, d});
      Tensor gb = Tensor::zeros({c});
      for (std::size_t r = 0; r < n; ++r) {
        const std::size_t i = order[start + r];
        for (std::size_t k = 0; k < c; ++k) {
          gb[k] += dlogits.at(r, k);
          for (std::size_t j = 0; j < d; ++j) gw.at(k, j) += dlogits.at(r, k) * features.at(i, j);
        }
      }
      grads.emplace("head.W", std::move(gw));
      grads.emplace("head.b", std::move(gb));
      if (optimizer == Optimizer::kAdam) {
        adam.step(head, grads);
      } else {
        for (const auto& [name, g] : grads) {
          Tensor& p = head.find(name)->second;
          for (std::size_t i = 0; i < p.size(); ++i) p[i] -= lr * g[i];
        }
      }
    }
  }
  w = head.at("head.W");
  b = head.at("head.b");
  return model.with_parameters(std::move(params));
}

Model reinitialize_head(const Model& model, std::uint64_t seed) {
  ParamSet params = model.parameters();
  std::mt19937_64 rng(seed);
  Tensor& w = params.find("head.W")->second;
  w = glorot(rng, w.rows(), w.cols());
  Tensor& b = params.find("head.b")->second;
  b = Tensor::zeros(b.shape());
  return model.with_parameters(std::move(params));
}

}  // namespace mviz
