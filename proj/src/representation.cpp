#include "mviz/representation.hpp"

#include <algorithm>
#include <numeric>

#include "mviz/error.hpp"

namespace mviz {

using nlohmann::json;

json to_json(const FeatureRef& f) { return {{"layer", f.layer}, {"index", f.index}}; }

FeatureRef feature_from_json(const json& j) {
  return {j.value("layer", std::string(kPenultimate)), j.at("index").get<std::size_t>()};
}

std::string_view to_string(UnimodalMethod m) {
  switch (m) {
    case UnimodalMethod::kGradient: return "gradient";
    case UnimodalMethod::kLime: return "lime";
    case UnimodalMethod::kShapley: return "shapley";
  }
  return "?";
}

UnimodalMethod unimodal_method_from_string(std::string_view s) {
  for (auto m : {UnimodalMethod::kGradient, UnimodalMethod::kLime, UnimodalMethod::kShapley}) {
    if (to_string(m) == s) return m;
  }
  throw Error(ErrorCode::kInvalidArgument, "unknown unimodal method '" + std::string(s) + "'");
}

std::string_view to_string(Direction d) { return d == Direction::kMax ? "max" : "min"; }

Direction direction_from_string(std::string_view s) {
  if (s == "max") return Direction::kMax;
  if (s == "min") return Direction::kMin;
  throw Error(ErrorCode::kInvalidArgument, "direction must be max or min");
}

AttributionMap run_unimodal(const Model& model, const Datapoint& dp, const std::string& modality,
                            const AttributionTarget& target, const MethodConfig& cfg) {
  const auto base = cfg.baselines.find(modality);
  switch (cfg.method) {
    case UnimodalMethod::kGradient: return uni_gradient(model, dp, modality, target);
    case UnimodalMethod::kLime: {
      if (base == cfg.baselines.end()) return uni_lime(model, dp, modality, target, cfg.lime);
      PerturbConfig lime = cfg.lime;
      lime.baseline_values = base->second;
      return uni_lime(model, dp, modality, target, lime);
    }
    case UnimodalMethod::kShapley: {
      if (base == cfg.baselines.end()) return uni_shapley(model, dp, modality, target, cfg.shapley);
      ShapleyConfig shapley = cfg.shapley;
      shapley.baseline_values = base->second;
      return uni_shapley(model, dp, modality, target, shapley);
    }
  }
  throw Error(ErrorCode::kInvalidArgument, "unknown unimodal method");
}

MethodConfig with_dataset_baselines(MethodConfig cfg, const Dataset& dataset) {
  cfg.baselines = dataset_mean(dataset);
  return cfg;
}

json to_json(const LocalFeatureAnalysis& a) {
  json uni = json::array(), cm = json::array();
  for (const auto& m : a.unimodal) uni.push_back(to_json(m));
  for (const auto& m : a.interactions) cm.push_back(to_json(m));
  return {{"feature", to_json(a.feature)},
          {"datapoint", a.datapoint},
          {"activation", a.activation},
          {"unimodal", uni},
          {"interactions", cm}};
}

LocalFeatureAnalysis local_from_json(const json& j) {
  LocalFeatureAnalysis a;
  a.feature = feature_from_json(j.at("feature"));
  a.datapoint = j.at("datapoint").get<std::size_t>();
  a.activation = j.at("activation").get<double>();
  for (const auto& m : j.at("unimodal")) a.unimodal.push_back(attribution_from_json(m));
  for (const auto& m : j.at("interactions")) a.interactions.push_back(interaction_from_json(m));
  return a;
}

json to_json(const GlobalFeatureAnalysis& g) {
  json entries = json::array();
  for (std::size_t i = 0; i < g.top.size(); ++i) {
    json e = {{"index", g.top[i].index}, {"activation", g.top[i].activation}};
    if (i < g.locals.size()) e["maps"] = to_json(g.locals[i]);
    entries.push_back(std::move(e));
  }
  return {{"feature", to_json(g.feature)}, {"direction", to_string(g.direction)}, {"split", g.split}, {"entries", entries}};
}

GlobalFeatureAnalysis global_from_json(const json& j) {
  GlobalFeatureAnalysis g;
  g.feature = feature_from_json(j.at("feature"));
  g.direction = direction_from_string(j.at("direction").get<std::string>());
  g.split = j.value("split", std::string());
  for (const auto& e : j.at("entries")) {
    g.top.push_back({e.at("index").get<std::size_t>(), e.at("activation").get<double>()});
    if (e.contains("maps")) g.locals.push_back(local_from_json(e.at("maps")));
  }
  return g;
}

void validate_feature(const Model& model, const FeatureRef& feature) { validate_target(model, feature.target()); }

LocalFeatureAnalysis local_representation(const Model& model, const Datapoint& dp, std::size_t datapoint_index,
                                          const FeatureRef& feature, const MethodConfig& cfg) {
  validate_feature(model, feature);
  const AttributionTarget target = feature.target();
  LocalFeatureAnalysis out;
  out.feature = feature;
  out.datapoint = datapoint_index;
  out.activation = model.layer_activation(dp, feature.layer)[feature.index];
  for (const auto& m : model.schema().modalities) out.unimodal.push_back(run_unimodal(model, dp, m.name, target, cfg));
  for (const auto& req : cfg.interactions) {
    out.interactions.push_back(
        cm_second_order(model, dp, req.query, req.response_modality, target, cfg.mode, cfg.query_aggregation));
  }
  return out;
}

std::vector<double> feature_activations(const Model& model, const Dataset& dataset, const FeatureRef& feature) {
  validate_feature(model, feature);
  std::vector<double> out;
  out.reserve(dataset.size());
  constexpr std::size_t kChunk = 512;
  const std::span<const Datapoint> all(dataset.points);
  for (std::size_t start = 0; start < all.size(); start += kChunk) {
    const std::size_t n = std::min(kChunk, all.size() - start);
    const Tensor act = model.layer_activation_batch(stack_inputs(model.schema(), all.subspan(start, n)), feature.layer);
    for (std::size_t r = 0; r < n; ++r) out.push_back(act.at(r, feature.index));
  }
  return out;
}

std::vector<RankedPoint> top_k(std::span<const double> activations, std::size_t k, Direction direction) {
  std::vector<std::size_t> order(activations.size());
  std::iota(order.begin(), order.end(), 0);
  const auto before = [&](std::size_t a, std::size_t b) {
    if (activations[a] != activations[b]) {
      return direction == Direction::kMax ? activations[a] > activations[b] : activations[a] < activations[b];
    }
    return a < b;
  };
  const std::size_t m = std::min(k, order.size());
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(m), order.end(), before);
  std::vector<RankedPoint> out;
  for (std::size_t i = 0; i < m; ++i) out.push_back({order[i], activations[order[i]]});
  return out;
}

GlobalFeatureAnalysis global_representation(const Model& model, const Dataset& dataset, const FeatureRef& feature,
                                            std::size_t k, Direction direction, const MethodConfig& cfg,
                                            std::string split, bool attach_locals) {
  if (dataset.empty()) throw Error(ErrorCode::kEmptyDataset, "cannot rank an empty dataset");
  if (k < 1) throw Error(ErrorCode::kInvalidArgument, "k must be at least 1");
  const auto activations = feature_activations(model, dataset, feature);
  GlobalFeatureAnalysis out;
  out.feature = feature;
  out.direction = direction;
  out.split = std::move(split);
  out.top = top_k(activations, k, direction);
  if (attach_locals) {
    for (const auto& r : out.top) {
      out.locals.push_back(local_representation(model, dataset.points[r.index], r.index, feature, cfg));
    }
  }
  return out;
}

}  // namespace mviz
