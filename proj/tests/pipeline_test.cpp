#include <filesystem>
#include <fstream>
#include <unistd.h>
#include <set>

#include "doctest.h"
#include "mviz/canonical.hpp"
#include "mviz/error.hpp"
#include "mviz/pipeline.hpp"
#include "support/fixtures.hpp"

using namespace mviz;
using namespace mviz::testing;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const SplitSet& task_data() {
  static const SplitSet data = make_synthetic_dataset(interaction_task_spec(), 400, 120, 60, 5);
  return data;
}

const Model& trained(Architecture arch) {
  static std::map<Architecture, Model> cache;
  auto it = cache.find(arch);
  if (it == cache.end()) {
    ModelConfig mc;
    mc.architecture = arch;
    mc.hidden_dim = 16;
    mc.seed = 3;
    TrainConfig tc;
    tc.epochs = 4;
    it = cache.emplace(arch, train_model(mc, task_data().train, nullptr, tc).model).first;
  }
  return it->second;
}

RunConfig full_config() {
  RunConfig cfg;
  cfg.lambda1 = 1e-3;
  cfg.lambda2 = 1e-3;
  cfg.top_m = 2;
  cfg.k = 2;
  return cfg;
}

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("mviz-pipeline-" + name + "-" + std::to_string(::getpid()));
  fs::remove_all(p);
  return p;
}

std::set<std::string> section_keys(const json& j) {
  std::set<std::string> out;
  for (const char* k : {"prediction", "unimodal", "crossmodal", "emap", "local", "global"}) {
    if (j.contains(k)) out.insert(k);
  }
  return out;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("stage parsing") {
  CHECK(parse_stages("u,c,rl,rg,p") == std::vector<Stage>{Stage::kP, Stage::kU, Stage::kC, Stage::kRl, Stage::kRg});
  CHECK(parse_stages("RG, U,u") == std::vector<Stage>{Stage::kU, Stage::kRg});
  CHECK(parse_stages("").empty());
  CHECK_THROWS_AS(parse_stages("u,x"), Error);
  for (Stage s : {Stage::kP, Stage::kU, Stage::kC, Stage::kRl, Stage::kRg}) CHECK(stage_from_string(to_string(s)) == s);
}

TEST_CASE("run config json round trip") {
  RunConfig cfg = full_config();
  cfg.methods.method = UnimodalMethod::kLime;
  cfg.methods.lime.num_samples = 77;
  cfg.methods.lime.kernel_width = 0.3;
  cfg.interactions = {{{"text", {0, 2}}, "image"}};
  cfg.features = {{"penultimate", 4}};
  cfg.direction = Direction::kMin;
  cfg.emap = true;
  cfg.seed = 9;
  const RunConfig back = RunConfig::from_json(json::parse(canonical_dump(cfg.to_json())));
  CHECK(back.digest() == cfg.digest());
  CHECK(back.methods.lime.num_samples == 77);
  CHECK(back.features.size() == 1);
  RunConfig other = cfg;
  other.seed = 10;
  CHECK(other.digest() != cfg.digest());
  CHECK(RunConfig::from_json(json::object()).digest() == RunConfig{}.digest());
}

TEST_CASE("stage gating is exact for the five ablation settings") {
  const Model& m = trained(Architecture::kMlpFusion);
  const auto sur = fit_surrogate(m, task_data(), 1e-3, 1e-3);
  const std::vector<std::pair<std::string, std::set<std::string>>> settings{
      {"u", {"unimodal"}},
      {"u,c", {"unimodal", "crossmodal"}},
      {"u,c,rl", {"unimodal", "crossmodal", "local"}},
      {"u,c,rl,rg", {"unimodal", "crossmodal", "local", "global"}},
      {"u,c,rl,rg,p", {"unimodal", "crossmodal", "local", "global", "prediction"}},
  };
  for (const auto& [stages, expected] : settings) {
    CAPTURE(stages);
    RunConfig cfg = full_config();
    cfg.stages = parse_stages(stages);
    const AnalysisBundle b = run_pipeline(m, task_data(), "test", 3, cfg, &sur);
    CHECK(section_keys(to_json(b)) == expected);
    CHECK(b.stages == cfg.stages);
    if (b.local) CHECK(b.local->size() == 2);
    if (b.global) {
      for (const auto& g : *b.global) {
        CHECK(g.top.size() == 2);
        CHECK(g.locals.size() == 2);
        CHECK(g.split == "val");
      }
    }
  }
}

TEST_CASE("full pipeline bundle contents") {
  const Model& m = trained(Architecture::kMlpFusion);
  const RunConfig cfg = full_config();
  const auto& dp = task_data().test.points[7];
  const AnalysisBundle b = run_pipeline(m, task_data(), "test", 7, cfg);
  const auto logits = m.forward(dp).values();
  CHECK(b.logits == logits);
  CHECK(b.predicted_label == argmax_lowest(logits));
  CHECK(b.true_label == dp.label);
  CHECK(b.model_id == m.digest());
  CHECK(b.dataset_id == dataset_digest(task_data(), "test"));
  CHECK(b.config_digest == cfg.digest());

  // U and C target the predicted class
  const auto target = AttributionTarget::class_logit(b.predicted_label);
  const MethodConfig methods = with_dataset_baselines(cfg.methods, task_data().train);
  REQUIRE(b.unimodal->size() == 2);
  CHECK((*b.unimodal)[0] == run_unimodal(m, dp, "text", target, methods));
  CHECK((*b.unimodal)[1] == run_unimodal(m, dp, "image", target, methods));
  // every atom of each modality against the other: 3 text + 6 image queries
  REQUIRE(b.interactions->size() == 9);
  CHECK((*b.interactions)[0] == cm_second_order(m, dp, {"text", {0}}, "image", target, methods.mode,
                                                methods.query_aggregation));
  CHECK((*b.interactions)[3].query.modality == "image");
  CHECK((*b.interactions)[3].response_modality == "text");

  // R features are the predicted class's top features from P
  const auto& top = b.prediction->top_features.at(b.predicted_label);
  REQUIRE(b.local->size() == top.size());
  for (std::size_t i = 0; i < top.size(); ++i) {
    CHECK((*b.local)[i].feature == FeatureRef{"penultimate", top[i].feature});
    CHECK((*b.global)[i].feature == FeatureRef{"penultimate", top[i].feature});
  }
  CHECK(b.prediction->top_features.count(b.true_label) == 1);
  const auto sur = fit_surrogate(m, task_data(), 1e-3, 1e-3);
  CHECK(b.prediction->surrogate_digest == json_digest(to_json(sur)));
  CHECK(b.prediction->surrogate_prediction == sur.predict(m.penultimate(dp).values()));
}

TEST_CASE("pipeline is deterministic") {
  const Model& m = trained(Architecture::kMlpFusion);
  for (UnimodalMethod method : {UnimodalMethod::kGradient, UnimodalMethod::kLime}) {
    RunConfig cfg = full_config();
    cfg.methods.method = method;
    cfg.methods.lime.num_samples = 64;
    cfg.emap = true;
    cfg.emap_points = 16;
    cfg.seed = 11;
    const std::string a = canonical_dump(to_json(run_pipeline(m, task_data(), "test", 5, cfg)));
    const std::string b = canonical_dump(to_json(run_pipeline(m, task_data(), "test", 5, cfg)));
    CHECK(a == b);
  }
}

TEST_CASE("additive model yields zero cross-modal maps") {
  const Model& m = trained(Architecture::kAdditive);
  RunConfig cfg = full_config();
  cfg.emap = true;
  cfg.emap_points = 20;
  for (std::size_t i : {0, 1, 2}) {
    const AnalysisBundle b = run_pipeline(m, task_data(), "test", i, cfg);
    REQUIRE(b.prediction);
    REQUIRE(b.interactions);
    for (const auto& map : *b.interactions) {
      for (double w : map.weights) CHECK(w == 0.0);
    }
    CHECK(b.emap->energy <= 1e-20);
    CHECK(b.emap->sample_size == 20);
  }
}

TEST_CASE("surrogate requirements") {
  const Model& m = trained(Architecture::kMlpFusion);
  RunConfig cfg;  // no lambdas
  cfg.stages = parse_stages("u,c");
  CHECK_NOTHROW(run_pipeline(m, task_data(), "test", 0, cfg));
  for (const char* stages : {"p", "rl", "rg", "u,rl"}) {
    cfg.stages = parse_stages(stages);
    CHECK_THROWS_WITH_AS(run_pipeline(m, task_data(), "test", 0, cfg), doctest::Contains("lambda"), Error);
    try {
      run_pipeline(m, task_data(), "test", 0, cfg);
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::kMissingSurrogate);
    }
  }
  // explicit features release R from the surrogate
  cfg.stages = parse_stages("rl,rg");
  cfg.features = {{"penultimate", 1}};
  const AnalysisBundle b = run_pipeline(m, task_data(), "test", 0, cfg);
  CHECK(b.local->at(0).feature.index == 1);
  CHECK(!b.prediction);
  // a supplied surrogate replaces the fit
  const auto sur = fit_surrogate(m, task_data(), 1e-2, 1e-3);
  cfg.stages = parse_stages("p");
  cfg.features.clear();
  CHECK(run_pipeline(m, task_data(), "test", 0, cfg, &sur).prediction->lambda1 == 1e-2);
  CHECK_THROWS_AS(run_pipeline(m, task_data(), "test", 60, cfg, &sur), Error);
}

TEST_CASE("export round trip and manifest") {
  const Model& m = trained(Architecture::kMlpFusion);
  const AnalysisBundle b = run_pipeline(m, task_data(), "test", 2, full_config());
  const fs::path dir = scratch_dir("export");
  const auto files = export_bundle(b, dir);
  const AnalysisBundle back = read_bundle(dir);
  CHECK(bundle_digest(back) == bundle_digest(b));
  CHECK(canonical_dump(to_json(back)) == slurp(dir / "bundle.json"));

  const json manifest = json::parse(slurp(dir / "manifest.json"));
  CHECK(manifest.at("bundle_digest") == bundle_digest(b));
  std::set<std::string> listed;
  for (const auto& f : manifest.at("files")) {
    const std::string rel = f.at("path");
    listed.insert(rel);
    CHECK(f.at("sha256") == sha256_hex(slurp(dir / rel)));
  }
  std::set<std::string> on_disk;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.is_regular_file()) on_disk.insert(fs::relative(e.path(), dir).generic_string());
  }
  on_disk.erase("manifest.json");
  CHECK(listed == on_disk);
  CHECK(files.size() == listed.size() + 1);
  // 2 unimodal + 9 cross-modal at the top level, and per-feature local maps
  std::size_t u = 0, c = 0;
  for (const auto& p : listed) {
    u += p.rfind("maps/u/", 0) == 0;
    c += p.rfind("maps/c/", 0) == 0;
  }
  CHECK(u == 2);
  CHECK(c == 9);
  fs::remove_all(dir);
}

TEST_CASE("empty-stage export lists only metadata") {
  const Model& m = trained(Architecture::kMlpFusion);
  RunConfig cfg;
  cfg.stages.clear();
  const AnalysisBundle b = run_pipeline(m, task_data(), "test", 0, cfg);
  CHECK(section_keys(to_json(b)).empty());
  const fs::path dir = scratch_dir("empty");
  export_bundle(b, dir);
  const json manifest = json::parse(slurp(dir / "manifest.json"));
  REQUIRE(manifest.at("files").size() == 1);
  CHECK(manifest.at("files")[0].at("path") == "bundle.json");
  fs::remove_all(dir);

  // a regular file in the way of the output directory
  const fs::path blocker = scratch_dir("blocker");
  std::ofstream(blocker) << "x";
  try {
    export_bundle(b, blocker / "sub");
    FAIL("expected IoFailure");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kIoFailure);
  }
  fs::remove(blocker);
  CHECK_THROWS_AS(read_bundle(blocker), Error);
}

TEST_CASE("analysis cache") {
  const Model& m = trained(Architecture::kMlpFusion);
  const RunConfig cfg = full_config();
  const fs::path dir = scratch_dir("cache");
  const std::string expected = bundle_digest(run_pipeline(m, task_data(), "test", 4, cfg));
  {
    AnalysisCache cache(dir);
    const auto a = cache.bundle(m, task_data(), "test", 4, cfg);
    CHECK(bundle_digest(*a) == expected);
    CHECK(cache.bundle_hits() == 0);
    const auto b = cache.bundle(m, task_data(), "test", 4, cfg);
    CHECK(a.get() == b.get());
    CHECK(cache.bundle_hits() == 1);
  }
  {
    // a fresh instance reads the on-disk copies
    AnalysisCache cache(dir);
    CHECK(bundle_digest(*cache.bundle(m, task_data(), "test", 4, cfg)) == expected);
    const auto sur = cache.surrogate(m, task_data(), 1e-3, 1e-3);
    const auto fresh = fit_surrogate(m, task_data(), 1e-3, 1e-3);
    CHECK(sur->beta == fresh.beta);
    CHECK(sur->beta0 == fresh.beta0);
    CHECK(json_digest(to_json(*sur)) == json_digest(to_json(fresh)));
  }
  fs::remove_all(dir);

  AnalysisCache memory_only;
  RunConfig other = cfg;
  other.seed = 1;
  CHECK(memory_only.bundle(m, task_data(), "test", 4, cfg).get() !=
        memory_only.bundle(m, task_data(), "test", 4, other).get());
}

TEST_CASE("cache directory resolution") {
  ::setenv("MVIZ_CACHE_DIR", "/tmp/mviz-x", 1);
  CHECK(cache_directory() == fs::path("/tmp/mviz-x"));
  ::unsetenv("MVIZ_CACHE_DIR");
  ::setenv("XDG_CACHE_HOME", "/tmp/xdg", 1);
  CHECK(cache_directory() == fs::path("/tmp/xdg/mviz"));
  ::unsetenv("XDG_CACHE_HOME");
}
