#include "mviz/pipeline.hpp"

#include <algorithm>
#include <cctype>
#include <cstdlib>
#include <fstream>
#include <mutex>

#include "mviz/canonical.hpp"
#include "mviz/error.hpp"

namespace mviz {

using nlohmann::json;
namespace fs = std::filesystem;

std::string_view to_string(Stage s) {
  switch (s) {
    case Stage::kP: return "p";
    case Stage::kU: return "u";
    case Stage::kC: return "c";
    case Stage::kRl: return "rl";
    case Stage::kRg: return "rg";
  }
  return "?";
}

Stage stage_from_string(std::string_view s) {
  std::string lower(s);
  std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char c) { return std::tolower(c); });
  for (Stage st : {Stage::kP, Stage::kU, Stage::kC, Stage::kRl, Stage::kRg}) {
    if (to_string(st) == lower) return st;
  }
  throw Error(ErrorCode::kInvalidArgument, "unknown stage '" + std::string(s) + "'");
}

std::vector<Stage> parse_stages(std::string_view list) {
  std::vector<Stage> out;
  std::size_t start = 0;
  while (start <= list.size()) {
    const std::size_t comma = std::min(list.find(',', start), list.size());
    std::string_view item = list.substr(start, comma - start);
    while (!item.empty() && item.front() == ' ') item.remove_prefix(1);
    while (!item.empty() && item.back() == ' ') item.remove_suffix(1);
    if (!item.empty()) out.push_back(stage_from_string(item));
    start = comma + 1;
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

bool RunConfig::has(Stage s) const { return std::find(stages.begin(), stages.end(), s) != stages.end(); }

namespace {

std::string_view baseline_name(BaselineKind k) { return k == BaselineKind::kZero ? "zero" : "dataset_mean"; }

BaselineKind baseline_from(const std::string& s) {
  if (s == "zero") return BaselineKind::kZero;
  if (s == "dataset_mean") return BaselineKind::kDatasetMean;
  throw Error(ErrorCode::kInvalidArgument, "unknown baseline '" + s + "'");
}

json request_json(const CmRequest& r) {
  return {{"query_modality", r.query.modality}, {"atom_indices", r.query.atoms}, {"response_modality", r.response_modality}};
}

CmRequest request_from(const json& j) {
  return {{j.at("query_modality").get<std::string>(), j.at("atom_indices").get<std::vector<std::size_t>>()},
          j.at("response_modality").get<std::string>()};
}

json requests_json(const std::vector<CmRequest>& rs) {
  json a = json::array();
  for (const auto& r : rs) a.push_back(request_json(r));
  return a;
}

std::vector<CmRequest> requests_from(const json& j) {
  std::vector<CmRequest> out;
  for (const auto& r : j) out.push_back(request_from(r));
  return out;
}

}  // namespace

json RunConfig::to_json() const {
  json st = json::array();
  for (Stage s : stages) st.push_back(mviz::to_string(s));
  json feats = json::array();
  for (const auto& f : features) feats.push_back(mviz::to_json(f));
  json lime = {{"num_samples", methods.lime.num_samples},
               {"baseline", baseline_name(methods.lime.baseline)},
               {"ridge", methods.lime.ridge},
               {"seed", methods.lime.seed},
               {"enumerate", methods.lime.enumerate}};
  if (methods.lime.kernel_width) lime["kernel_width"] = *methods.lime.kernel_width;
  return {{"stages", st},
          {"method", mviz::to_string(methods.method)},
          {"lime", lime},
          {"shapley",
           {{"num_permutations", methods.shapley.num_permutations},
            {"baseline", baseline_name(methods.shapley.baseline)},
            {"seed", methods.shapley.seed},
            {"force_sampling", methods.shapley.force_sampling}}},
          {"feature_interactions", requests_json(methods.interactions)},
          {"mode", mviz::to_string(methods.mode)},
          {"query_aggregation", mviz::to_string(methods.query_aggregation)},
          {"dataset_baselines", dataset_baselines},
          {"interactions", requests_json(interactions)},
          {"emap", emap},
          {"emap_points", emap_points},
          {"k", k},
          {"direction", mviz::to_string(direction)},
          {"global_split", global_split},
          {"lambda1", lambda1 ? json(*lambda1) : json(nullptr)},
          {"lambda2", lambda2 ? json(*lambda2) : json(nullptr)},
          {"top_m", top_m},
          {"features", feats},
          {"seed", seed}};
}

RunConfig RunConfig::from_json(const json& j) {
  RunConfig c;
  if (j.contains("stages")) {
    c.stages.clear();
    for (const auto& s : j.at("stages")) c.stages.push_back(stage_from_string(s.get<std::string>()));
    std::sort(c.stages.begin(), c.stages.end());
    c.stages.erase(std::unique(c.stages.begin(), c.stages.end()), c.stages.end());
  }
  if (j.contains("method")) c.methods.method = unimodal_method_from_string(j.at("method").get<std::string>());
  if (j.contains("lime")) {
    const auto& l = j.at("lime");
    c.methods.lime.num_samples = l.value("num_samples", c.methods.lime.num_samples);
    c.methods.lime.baseline = baseline_from(l.value("baseline", std::string("dataset_mean")));
    c.methods.lime.ridge = l.value("ridge", c.methods.lime.ridge);
    c.methods.lime.seed = l.value("seed", c.methods.lime.seed);
    c.methods.lime.enumerate = l.value("enumerate", false);
    if (l.contains("kernel_width")) c.methods.lime.kernel_width = l.at("kernel_width").get<double>();
  }
  if (j.contains("shapley")) {
    const auto& s = j.at("shapley");
    c.methods.shapley.num_permutations = s.value("num_permutations", c.methods.shapley.num_permutations);
    c.methods.shapley.baseline = baseline_from(s.value("baseline", std::string("dataset_mean")));
    c.methods.shapley.seed = s.value("seed", c.methods.shapley.seed);
    c.methods.shapley.force_sampling = s.value("force_sampling", false);
  }
  if (j.contains("feature_interactions")) c.methods.interactions = requests_from(j.at("feature_interactions"));
  if (j.contains("mode")) c.methods.mode = interaction_mode_from_string(j.at("mode").get<std::string>());
  if (j.contains("query_aggregation")) {
    c.methods.query_aggregation = aggregation_from_string(j.at("query_aggregation").get<std::string>());
  }
  c.dataset_baselines = j.value("dataset_baselines", c.dataset_baselines);
  if (j.contains("interactions")) c.interactions = requests_from(j.at("interactions"));
  c.emap = j.value("emap", c.emap);
  c.emap_points = j.value("emap_points", c.emap_points);
  c.k = j.value("k", c.k);
  if (j.contains("direction")) c.direction = direction_from_string(j.at("direction").get<std::string>());
  c.global_split = j.value("global_split", c.global_split);
  if (j.contains("lambda1") && !j.at("lambda1").is_null()) c.lambda1 = j.at("lambda1").get<double>();
  if (j.contains("lambda2") && !j.at("lambda2").is_null()) c.lambda2 = j.at("lambda2").get<double>();
  c.top_m = j.value("top_m", c.top_m);
  if (j.contains("features")) {
    for (const auto& f : j.at("features")) c.features.push_back(feature_from_json(f));
  }
  c.seed = j.value("seed", c.seed);
  return c;
}

std::string RunConfig::digest() const { return json_digest(to_json()); }

// ---------------------------------------------------------------------------

namespace {

json prediction_json(const PredictionSection& p) {
  json top = json::object();
  for (const auto& [cls, feats] : p.top_features) {
    json a = json::array();
    for (const auto& f : feats) a.push_back(to_json(f));
    top[std::to_string(cls)] = a;
  }
  return {{"lambda1", p.lambda1},
          {"lambda2", p.lambda2},
          {"sparsity", p.sparsity},
          {"accuracy", p.accuracy},
          {"agreement", p.agreement},
          {"surrogate_digest", p.surrogate_digest},
          {"surrogate_prediction", p.surrogate_prediction},
          {"top_features", top}};
}

PredictionSection prediction_from(const json& j) {
  PredictionSection p;
  p.lambda1 = j.at("lambda1").get<double>();
  p.lambda2 = j.at("lambda2").get<double>();
  p.sparsity = j.at("sparsity").get<double>();
  p.accuracy = j.at("accuracy").get<double>();
  p.agreement = j.at("agreement").get<double>();
  p.surrogate_digest = j.at("surrogate_digest").get<std::string>();
  p.surrogate_prediction = j.at("surrogate_prediction").get<std::size_t>();
  for (const auto& [cls, feats] : j.at("top_features").items()) {
    std::vector<RankedFeature> v;
    for (const auto& f : feats) v.push_back({f.at("feature").get<std::size_t>(), f.at("coefficient").get<double>()});
    p.top_features.emplace(static_cast<std::size_t>(std::stoull(cls)), std::move(v));
  }
  return p;
}

json meta_json(const AnalysisBundle& b) {
  json st = json::array();
  for (Stage s : b.stages) st.push_back(to_string(s));
  return {{"dataset_id", b.dataset_id},
          {"model_id", b.model_id},
          {"split", b.split},
          {"index", b.index},
          {"predicted_label", b.predicted_label},
          {"true_label", b.true_label},
          {"logits", b.logits},
          {"stages", st},
          {"config_digest", b.config_digest},
          {"seed", b.seed}};
}

}  // namespace

json overview_json(const AnalysisBundle& b) {
  json j = meta_json(b);
  if (b.prediction) j["prediction"] = prediction_json(*b.prediction);
  if (b.unimodal) {
    json a = json::array();
    for (const auto& m : *b.unimodal) a.push_back(to_json(m));
    j["unimodal"] = a;
  }
  if (b.interactions) {
    json a = json::array();
    for (const auto& m : *b.interactions) a.push_back(to_json(m));
    j["crossmodal"] = a;
  }
  if (b.emap) {
    j["emap"] = {{"first", b.emap->first}, {"second", b.emap->second}, {"sample_size", b.emap->sample_size},
                 {"energy", b.emap->energy}};
  }
  return j;
}

json to_json(const AnalysisBundle& b) {
  json j = overview_json(b);
  if (b.local) {
    json a = json::array();
    for (const auto& l : *b.local) a.push_back(to_json(l));
    j["local"] = a;
  }
  if (b.global) {
    json a = json::array();
    for (const auto& g : *b.global) a.push_back(to_json(g));
    j["global"] = a;
  }
  return j;
}

AnalysisBundle bundle_from_json(const json& j) {
  AnalysisBundle b;
  b.dataset_id = j.at("dataset_id").get<std::string>();
  b.model_id = j.at("model_id").get<std::string>();
  b.split = j.at("split").get<std::string>();
  b.index = j.at("index").get<std::size_t>();
  b.predicted_label = j.at("predicted_label").get<std::size_t>();
  b.true_label = j.at("true_label").get<std::size_t>();
  b.logits = j.at("logits").get<std::vector<double>>();
  for (const auto& s : j.at("stages")) b.stages.push_back(stage_from_string(s.get<std::string>()));
  b.config_digest = j.at("config_digest").get<std::string>();
  b.seed = j.at("seed").get<std::uint64_t>();
  if (j.contains("prediction")) b.prediction = prediction_from(j.at("prediction"));
  if (j.contains("unimodal")) {
    b.unimodal.emplace();
    for (const auto& m : j.at("unimodal")) b.unimodal->push_back(attribution_from_json(m));
  }
  if (j.contains("crossmodal")) {
    b.interactions.emplace();
    for (const auto& m : j.at("crossmodal")) b.interactions->push_back(interaction_from_json(m));
  }
  if (j.contains("emap")) {
    const auto& e = j.at("emap");
    b.emap = EmapSummary{e.at("first").get<std::string>(), e.at("second").get<std::string>(),
                         e.at("sample_size").get<std::size_t>(), e.at("energy").get<double>()};
  }
  if (j.contains("local")) {
    b.local.emplace();
    for (const auto& l : j.at("local")) b.local->push_back(local_from_json(l));
  }
  if (j.contains("global")) {
    b.global.emplace();
    for (const auto& g : j.at("global")) b.global->push_back(global_from_json(g));
  }
  return b;
}

std::string bundle_digest(const AnalysisBundle& b) { return json_digest(to_json(b)); }

std::string dataset_digest(const SplitSet& data, std::string_view split) {
  const Dataset& ds = data.split(split);
  std::string text = canonical_dump(to_json(ds.schema));
  text += '\n';
  text += split;
  for (const auto& dp : ds.points) {
    text += '\n';
    text += canonical_dump(to_json(dp, ds.schema));
  }
  return sha256_hex(text);
}

SparseLinearSurrogate fit_surrogate(const Model& model, const SplitSet& data, double lambda1, double lambda2) {
  return fit_sparse_linear(extract_features(model, data.train, kPenultimate, "train"), lambda1, lambda2);
}

namespace {

std::vector<CmRequest> default_requests(const DatasetSchema& schema) {
  std::vector<CmRequest> out;
  for (const auto& q : schema.modalities) {
    for (const auto& r : schema.modalities) {
      if (q.name == r.name) continue;
      for (std::size_t a = 0; a < q.atom_count; ++a) out.push_back({{q.name, {a}}, r.name});
    }
  }
  return out;
}

}  // namespace

AnalysisBundle run_pipeline(const Model& model, const SplitSet& data, const std::string& split, std::size_t index,
                            const RunConfig& cfg, const SparseLinearSurrogate* surrogate) {
  const Dataset& ds = data.split(split);
  if (index >= ds.size()) {
    throw Error(ErrorCode::kNotFound, "datapoint " + std::to_string(index) + " is outside split '" + split + "'");
  }
  const bool needs_surrogate = cfg.has(Stage::kP) || ((cfg.has(Stage::kRl) || cfg.has(Stage::kRg)) && cfg.features.empty());
  if (needs_surrogate && !surrogate && !cfg.has_lambdas()) {
    throw Error(ErrorCode::kMissingSurrogate, "stage P and feature selection need lambda1 and lambda2");
  }
  const Datapoint& dp = ds.points[index];
  AnalysisBundle b;
  b.dataset_id = dataset_digest(data, split);
  b.model_id = model.digest();
  b.split = split;
  b.index = index;
  const Tensor logits = model.forward(dp);
  b.logits = logits.values();
  b.predicted_label = argmax_lowest(b.logits);
  b.true_label = dp.label;
  b.stages = cfg.stages;
  std::sort(b.stages.begin(), b.stages.end());
  b.config_digest = cfg.digest();
  b.seed = cfg.seed;

  MethodConfig methods = cfg.methods;
  if (cfg.dataset_baselines) methods = with_dataset_baselines(std::move(methods), data.train);
  const std::vector<CmRequest> c_requests = cfg.interactions.empty() ? default_requests(model.schema()) : cfg.interactions;
  if (methods.interactions.empty()) methods.interactions = c_requests;
  const AttributionTarget target = AttributionTarget::class_logit(b.predicted_label);

  // Stage P
  std::optional<SparseLinearSurrogate> fitted;
  if (needs_surrogate && !surrogate) {
    fitted = fit_surrogate(model, data, *cfg.lambda1, *cfg.lambda2);
    surrogate = &*fitted;
  }
  std::vector<FeatureRef> features = cfg.features;
  if (needs_surrogate) {
    if (surrogate->num_features != model.penultimate_dim() || surrogate->num_classes != model.num_classes()) {
      throw Error(ErrorCode::kShapeMismatch, "surrogate does not match the model's penultimate layer");
    }
    PredictionSection p;
    p.lambda1 = surrogate->lambda1;
    p.lambda2 = surrogate->lambda2;
    p.sparsity = surrogate->stats.sparsity;
    p.accuracy = surrogate->stats.accuracy;
    p.agreement = surrogate->stats.agreement;
    p.surrogate_digest = json_digest(to_json(*surrogate));
    p.surrogate_prediction = surrogate->predict(model.penultimate(dp).values());
    p.top_features[b.predicted_label] = top_features(*surrogate, b.predicted_label, cfg.top_m);
    if (b.true_label != b.predicted_label && b.true_label < model.num_classes()) {
      p.top_features[b.true_label] = top_features(*surrogate, b.true_label, cfg.top_m);
    }
    if (features.empty()) {
      for (const auto& f : p.top_features.at(b.predicted_label)) features.push_back({std::string(kPenultimate), f.feature});
    }
    if (cfg.has(Stage::kP)) b.prediction = std::move(p);
  }

  // Stage U
  if (cfg.has(Stage::kU)) {
    b.unimodal.emplace();
    for (const auto& m : model.schema().modalities) b.unimodal->push_back(run_unimodal(model, dp, m.name, target, methods));
  }

  // Stage C
  if (cfg.has(Stage::kC)) {
    b.interactions.emplace();
    for (const auto& r : c_requests) {
      b.interactions->push_back(
          cm_second_order(model, dp, r.query, r.response_modality, target, methods.mode, methods.query_aggregation));
    }
    if (cfg.emap) {
      const std::size_t n = std::min(cfg.emap_points, ds.size());
      EmapOptions opt;
      opt.seed = cfg.seed;
      const auto est = emap_decompose(model, std::span<const Datapoint>(ds.points.data(), n), target, opt);
      b.emap = EmapSummary{est.first, est.second, est.g12.size(), est.energy};
    }
  }

  // Stage R
  if (cfg.has(Stage::kRl)) {
    b.local.emplace();
    for (const auto& f : features) b.local->push_back(local_representation(model, dp, index, f, methods));
  }
  if (cfg.has(Stage::kRg)) {
    b.global.emplace();
    const Dataset& gds = data.split(cfg.global_split);
    for (const auto& f : features) {
      b.global->push_back(global_representation(model, gds, f, cfg.k, cfg.direction, methods, cfg.global_split, true));
    }
  }
  return b;
}

// ---------------------------------------------------------------------------

namespace {

void write_text(const fs::path& file, const std::string& text) {
  std::error_code ec;
  fs::create_directories(file.parent_path(), ec);
  if (ec) throw Error(ErrorCode::kIoFailure, "cannot create " + file.parent_path().string() + ": " + ec.message());
  std::ofstream out(file, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIoFailure, "cannot write " + file.string());
  out << text;
  out.flush();
  if (!out) throw Error(ErrorCode::kIoFailure, "write failed for " + file.string());
}

std::string read_text(const fs::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIoFailure, "cannot read " + file.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::string feature_tag(const FeatureRef& f) { return f.layer + "-" + std::to_string(f.index); }

}  // namespace

std::vector<std::string> export_bundle(const AnalysisBundle& bundle, const fs::path& dir) {
  std::vector<std::pair<std::string, std::string>> files;  // relative path, content
  files.emplace_back("bundle.json", canonical_dump(to_json(bundle)));
  if (bundle.unimodal) {
    for (const auto& m : *bundle.unimodal) files.emplace_back("maps/u/" + m.modality + ".json", canonical_dump(to_json(m)));
  }
  if (bundle.interactions) {
    for (std::size_t i = 0; i < bundle.interactions->size(); ++i) {
      files.emplace_back("maps/c/" + std::to_string(i) + ".json", canonical_dump(to_json((*bundle.interactions)[i])));
    }
  }
  if (bundle.local) {
    for (const auto& l : *bundle.local) {
      const std::string base = "maps/rl/" + feature_tag(l.feature) + "/";
      for (const auto& m : l.unimodal) files.emplace_back(base + "u-" + m.modality + ".json", canonical_dump(to_json(m)));
      for (std::size_t i = 0; i < l.interactions.size(); ++i) {
        files.emplace_back(base + "c-" + std::to_string(i) + ".json", canonical_dump(to_json(l.interactions[i])));
      }
    }
  }
  if (bundle.global) {
    for (const auto& g : *bundle.global) {
      for (std::size_t r = 0; r < g.locals.size(); ++r) {
        const auto& l = g.locals[r];
        const std::string base = "maps/rg/" + feature_tag(g.feature) + "/" + std::to_string(r) + "-";
        for (const auto& m : l.unimodal) files.emplace_back(base + "u-" + m.modality + ".json", canonical_dump(to_json(m)));
        for (std::size_t i = 0; i < l.interactions.size(); ++i) {
          files.emplace_back(base + "c-" + std::to_string(i) + ".json", canonical_dump(to_json(l.interactions[i])));
        }
      }
    }
  }
  json listing = json::array();
  std::vector<std::string> written;
  for (const auto& [rel, text] : files) {
    write_text(dir / rel, text);
    listing.push_back({{"path", rel}, {"sha256", sha256_hex(text)}});
    written.push_back(rel);
  }
  json manifest = {{"bundle", "bundle.json"}, {"bundle_digest", bundle_digest(bundle)}, {"files", listing}};
  write_text(dir / "manifest.json", canonical_dump(manifest));
  written.push_back("manifest.json");
  return written;
}

AnalysisBundle read_bundle(const fs::path& dir) {
  const std::string text = read_text(dir / "bundle.json");
  try {
    return bundle_from_json(json::parse(text));
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kIoFailure, "malformed bundle in " + dir.string() + ": " + e.what());
  }
}

fs::path cache_directory() {
  if (const char* v = std::getenv("MVIZ_CACHE_DIR"); v && *v) return fs::path(v);
  if (const char* v = std::getenv("XDG_CACHE_HOME"); v && *v) return fs::path(v) / "mviz";
  if (const char* v = std::getenv("HOME"); v && *v) return fs::path(v) / ".cache" / "mviz";
  return fs::path(".mviz-cache");
}

// ---------------------------------------------------------------------------

AnalysisCache::AnalysisCache(std::optional<fs::path> dir) : dir_(std::move(dir)) {}

std::shared_ptr<const SparseLinearSurrogate> AnalysisCache::surrogate(const Model& model, const SplitSet& data,
                                                                      double lambda1, double lambda2) {
  const std::string key = json_digest({{"model", model.digest()},
                                       {"train", dataset_digest(data, "train")},
                                       {"lambda1", lambda1},
                                       {"lambda2", lambda2}});
  {
    std::shared_lock lock(mutex_);
    if (auto it = surrogates_.find(key); it != surrogates_.end()) return it->second;
  }
  std::shared_ptr<const SparseLinearSurrogate> value;
  const fs::path file = dir_ ? *dir_ / ("surrogate-" + key + ".json") : fs::path();
  if (dir_ && fs::exists(file)) {
    // full precision dump, so the cached fit is bit-identical to a fresh one
    value = std::make_shared<const SparseLinearSurrogate>(surrogate_from_json(json::parse(read_text(file))));
  } else {
    value = std::make_shared<const SparseLinearSurrogate>(fit_surrogate(model, data, lambda1, lambda2));
    if (dir_) write_text(file, to_json(*value).dump());
  }
  std::unique_lock lock(mutex_);
  return surrogates_.emplace(key, value).first->second;
}

std::shared_ptr<const AnalysisBundle> AnalysisCache::bundle(const Model& model, const SplitSet& data,
                                                            const std::string& split, std::size_t index,
                                                            const RunConfig& cfg) {
  const std::string key = json_digest({{"model", model.digest()},
                                       {"data", dataset_digest(data, split)},
                                       {"train", dataset_digest(data, "train")},
                                       {"global", dataset_digest(data, cfg.global_split)},
                                       {"split", split},
                                       {"index", index},
                                       {"config", cfg.digest()}});
  {
    std::shared_lock lock(mutex_);
    if (auto it = bundles_.find(key); it != bundles_.end()) {
      hits_.fetch_add(1, std::memory_order_relaxed);
      return it->second;
    }
  }
  std::shared_ptr<const AnalysisBundle> value;
  const fs::path file = dir_ ? *dir_ / ("bundle-" + key + ".json") : fs::path();
  if (dir_ && fs::exists(file)) {
    value = std::make_shared<const AnalysisBundle>(bundle_from_json(json::parse(read_text(file))));
  } else {
    std::shared_ptr<const SparseLinearSurrogate> sur;
    if (cfg.has_lambdas()) sur = surrogate(model, data, *cfg.lambda1, *cfg.lambda2);
    value = std::make_shared<const AnalysisBundle>(run_pipeline(model, data, split, index, cfg, sur.get()));
    if (dir_) write_text(file, canonical_dump(to_json(*value)));
  }
  std::unique_lock lock(mutex_);
  return bundles_.emplace(key, value).first->second;
}

std::size_t AnalysisCache::bundle_hits() const { return hits_.load(std::memory_order_relaxed); }

}  // namespace mviz
