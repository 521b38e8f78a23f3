#include <chrono>
#include <filesystem>
#include <fstream>
#include <thread>
#include <unistd.h>

#include "doctest.h"
#include "httplib.h"
#include "mviz/canonical.hpp"
#include "mviz/error.hpp"
#include "mviz/service.hpp"
#include "support/fixtures.hpp"

using namespace mviz;
using namespace mviz::testing;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::shared_ptr<const SplitSet> task_data() {
  static const auto data =
      std::make_shared<const SplitSet>(make_synthetic_dataset(interaction_task_spec(), 400, 60, 40, 8));
  return data;
}

std::shared_ptr<const Model> trained(Architecture arch) {
  ModelConfig mc;
  mc.architecture = arch;
  mc.hidden_dim = 16;
  mc.seed = 2;
  TrainConfig tc;
  tc.epochs = 3;
  return std::make_shared<const Model>(train_model(mc, task_data()->train, nullptr, tc).model);
}

Registry test_registry() {
  static const auto mlp = trained(Architecture::kMlpFusion);
  static const auto additive = trained(Architecture::kAdditive);
  Registry r;
  r.datasets.emplace("inter", task_data());
  r.models.emplace("mlp", RegisteredModel{mlp, "inter"});
  r.models.emplace("add", RegisteredModel{additive, "inter"});
  return r;
}

ServiceConfig small_config() {
  ServiceConfig cfg;
  cfg.registry = test_registry();
  cfg.analysis.k = 2;
  cfg.analysis.top_m = 2;
  cfg.benchmark.spec.n_train = 600;
  cfg.benchmark.spec.n_val = 400;
  cfg.benchmark.spec.n_test = 300;
  cfg.benchmark.train.epochs = 5;
  cfg.debug.num_seeds = 1;
  cfg.debug.n = 40;
  return cfg;
}

// Service on a free localhost port, stopped on destruction.
struct Running {
  Service service;
  int port;
  httplib::Client client;

  explicit Running(ServiceConfig cfg)
      : service(std::move(cfg)), port(service.start("127.0.0.1", 0)), client("127.0.0.1", port) {
    client.set_read_timeout(60, 0);
  }
  ~Running() {
    service.wait_for_jobs();
    service.stop();
  }

  httplib::Result post(const std::string& path, const json& body) {
    return client.Post(path, body.dump(), "application/json");
  }
};

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("mviz-service-" + name + "-" + std::to_string(::getpid()));
  fs::remove_all(p);
  return p;
}

}  // namespace

TEST_CASE("registry and datapoint endpoints") {
  Running s(small_config());
  auto r = s.client.Get("/api/registry");
  REQUIRE(r);
  CHECK(r->status == 200);
  const json reg = json::parse(r->body);
  REQUIRE(reg.at("datasets").size() == 1);
  CHECK(reg.at("datasets")[0].at("splits").at("test") == 40);
  CHECK(reg.at("models").size() == 2);
  CHECK(reg.at("models")[1].at("id") == "mlp");

  r = s.client.Get("/api/dp/inter/test/3");
  REQUIRE(r);
  CHECK(r->status == 200);
  const json dp = json::parse(r->body);
  const auto& expected = task_data()->test.points[3];
  CHECK(dp.at("label") == expected.label);
  // canonical floats are rounded, so compare against the canonical form
  CHECK(canonical_dump(dp.at("datapoint")) == canonical_dump(to_json(expected, task_data()->train.schema)));

  CHECK(s.client.Get("/api/dp/nope/test/0")->status == 404);
  CHECK(s.client.Get("/api/dp/inter/test/40")->status == 404);
  CHECK(s.client.Get("/api/dp/inter/holdout/0")->status == 404);
  CHECK(s.client.Get("/api/dp/inter/test/abc")->status == 400);
}

TEST_CASE("overview is digest-identical to an exported bundle") {
  const ServiceConfig cfg = small_config();
  Running s(cfg);
  auto r = s.client.Get("/api/analysis/inter/mlp/5/overview");
  REQUIRE(r);
  REQUIRE(r->status == 200);

  RunConfig rc = cfg.analysis;
  rc.stages = {Stage::kP, Stage::kU, Stage::kC};
  const AnalysisBundle offline = run_pipeline(*cfg.registry.models.at("mlp").model, *task_data(), "test", 5, rc);
  const fs::path dir = scratch("export");
  export_bundle(offline, dir);
  const AnalysisBundle exported = read_bundle(dir);
  CHECK(r->body == canonical_dump(overview_json(exported)));
  CHECK(sha256_hex(r->body) == json_digest(overview_json(exported)));
  CHECK(r->get_header_value("X-Bundle-Digest") == json::parse(std::ifstream(dir / "manifest.json")).at("bundle_digest"));
  fs::remove_all(dir);

  // second request is served from the cache
  auto again = s.client.Get("/api/analysis/inter/mlp/5/overview");
  CHECK(again->body == r->body);

  const json gated = json::parse(s.client.Get("/api/analysis/inter/mlp/5/overview?stages=u")->body);
  CHECK(gated.contains("unimodal"));
  CHECK(!gated.contains("crossmodal"));
  CHECK(!gated.contains("prediction"));
  CHECK(s.client.Get("/api/analysis/inter/mlp/5/overview?stages=u,rl")->status == 400);
  CHECK(s.client.Get("/api/analysis/inter/mlp/5/overview?stages=q")->status == 400);
  CHECK(s.client.Get("/api/analysis/inter/ghost/5/overview")->status == 404);
  CHECK(s.client.Get("/api/analysis/inter/mlp/99/overview")->status == 404);
}

TEST_CASE("feature endpoint") {
  const ServiceConfig cfg = small_config();
  Running s(cfg);
  auto r = s.client.Get("/api/analysis/inter/mlp/2/feature/penultimate/3?k=3&dir=min");
  REQUIRE(r);
  REQUIRE(r->status == 200);
  const json j = json::parse(r->body);
  const Model& m = *cfg.registry.models.at("mlp").model;
  const FeatureRef f{"penultimate", 3};
  MethodConfig methods = with_dataset_baselines(cfg.analysis.methods, task_data()->train);
  methods.interactions = {};
  const auto g = global_from_json(j.at("global"));
  CHECK(g.direction == Direction::kMin);
  CHECK(g.split == "val");
  REQUIRE(g.top.size() == 3);
  const auto oracle = global_representation(m, task_data()->val, f, 3, Direction::kMin, methods, "val", false);
  for (std::size_t i = 0; i < 3; ++i) CHECK(g.top[i].index == oracle.top[i].index);
  CHECK(g.locals.size() == 3);
  const auto local = local_from_json(j.at("local"));
  CHECK(local.datapoint == 2);
  CHECK(local.activation == doctest::Approx(m.layer_activation(task_data()->test.points[2], "penultimate")[3]));

  CHECK(s.client.Get("/api/analysis/inter/mlp/2/feature/penultimate/99")->status == 400);
  CHECK(s.client.Get("/api/analysis/inter/mlp/2/feature/bogus/0")->status == 400);
  CHECK(s.client.Get("/api/analysis/inter/mlp/2/feature/penultimate/0?dir=sideways")->status == 400);
  CHECK(s.client.Get("/api/analysis/inter/mlp/2/feature/penultimate/0?k=0")->status == 400);
}

TEST_CASE("live second-order gradients match the offline computation bit for bit") {
  const ServiceConfig cfg = small_config();
  Running s(cfg);
  const Model& m = *cfg.registry.models.at("mlp").model;
  const Datapoint& dp = task_data()->test.points[4];
  const json body = {{"query_modality", "text"}, {"atom_indices", {0, 2}}, {"response_modality", "image"}};
  auto r = s.post("/api/analysis/inter/mlp/4/sog", body);
  REQUIRE(r);
  REQUIRE(r->status == 200);
  const auto target = AttributionTarget::class_logit(argmax_lowest(m.forward(dp).values()));
  const InteractionMap offline = cm_second_order(m, dp, {"text", {0, 2}}, "image", target, InteractionMode::kSigned,
                                                 ad::Aggregation::kSigned);
  CHECK(interaction_from_json(json::parse(r->body)) == offline);

  json explicit_target = body;
  explicit_target["target"] = to_json(AttributionTarget::class_logit(1));
  explicit_target["mode"] = "absolute";
  r = s.post("/api/analysis/inter/mlp/4/sog", explicit_target);
  REQUIRE(r->status == 200);
  CHECK(interaction_from_json(json::parse(r->body)) ==
        cm_second_order(m, dp, {"text", {0, 2}}, "image", AttributionTarget::class_logit(1), InteractionMode::kAbsolute,
                        ad::Aggregation::kSigned));

  // additive model: zero map
  r = s.post("/api/analysis/inter/add/4/sog", body);
  REQUIRE(r->status == 200);
  for (double w : json::parse(r->body).at("weights").get<std::vector<double>>()) CHECK(w == 0.0);

  CHECK(s.client.Post("/api/analysis/inter/mlp/4/sog", "{not json", "application/json")->status == 400);
  CHECK(s.post("/api/analysis/inter/mlp/4/sog", {{"query_modality", "text"}})->status == 400);
  json empty = body;
  empty["atom_indices"] = json::array();
  CHECK(s.post("/api/analysis/inter/mlp/4/sog", empty)->status == 400);
  json bad_mod = body;
  bad_mod["response_modality"] = "audio";
  CHECK(s.post("/api/analysis/inter/mlp/4/sog", bad_mod)->status == 400);
  CHECK(s.post("/api/analysis/nope/mlp/4/sog", body)->status == 404);
}

TEST_CASE("debug jobs run asynchronously and are polled by id") {
  Running s(small_config());
  const json body = {{"strategy", "random"}, {"n", 40}, {"seeds", 1}};
  auto r = s.post("/api/debug/run", body);
  REQUIRE(r);
  REQUIRE(r->status == 202);
  const std::string id = json::parse(r->body).at("job");
  // identical request while the first is running
  auto dup = s.post("/api/debug/run", body);
  if (dup->status == 409) CHECK(json::parse(dup->body).at("job") == id);
  s.service.wait_for_jobs();
  const json job = json::parse(s.client.Get("/api/debug/jobs/" + id)->body);
  CHECK(job.at("status") == "done");
  const json& report = job.at("report");
  REQUIRE(report.at("strategies").size() == 1);
  CHECK(report.at("strategies")[0].at("strategy") == "random");
  CHECK(s.client.Get("/api/debug/jobs/job-999")->status == 404);
  CHECK(s.post("/api/debug/run", {{"strategy", "bald"}})->status == 400);
  CHECK(s.post("/api/debug/run", {{"seeds", 0}})->status == 400);
}

TEST_CASE("debug job conflicts and budget") {
  ServiceConfig cfg = small_config();
  cfg.benchmark = BenchmarkConfig{};  // full-size benchmark keeps the job busy
  cfg.job_budget = 1;
  Running s(cfg);
  const json body = {{"strategy", "random"}, {"n", 50}, {"seeds", 3}};
  REQUIRE(s.post("/api/debug/run", body)->status == 202);
  auto dup = s.post("/api/debug/run", body);
  CHECK(dup->status == 409);
  auto other = s.post("/api/debug/run", {{"strategy", "uncertainty"}, {"n", 50}, {"seeds", 3}});
  CHECK(other->status == 503);
  s.service.wait_for_jobs();
  // budget frees up once the job is done
  auto after = s.post("/api/debug/run", {{"strategy", "uncertainty"}, {"n", 10}, {"seeds", 1}});
  CHECK(after->status == 202);
}

TEST_CASE("annotations round trip and persist") {
  const fs::path file = scratch("annotations.jsonl");
  ServiceConfig cfg = small_config();
  cfg.annotations_file = file;
  {
    Running s(cfg);
    auto r = s.post("/api/annotations", {{"model", "mlp"},
                                         {"feature", {{"layer", "penultimate"}, {"index", 2}}},
                                         {"concept", "red objects"}});
    REQUIRE(r->status == 201);
    CHECK(json::parse(r->body).at("id") == 1);
    s.post("/api/annotations",
           {{"model", "mlp"}, {"feature", {{"layer", "penultimate"}, {"index", 5}}}, {"concept", "counting"}});
    const json all = json::parse(s.client.Get("/api/annotations?model=mlp&index=2")->body).at("annotations");
    REQUIRE(all.size() == 1);
    CHECK(all[0].at("concept") == "red objects");
    CHECK(s.post("/api/annotations", {{"model", "mlp"}, {"feature", {{"layer", "penultimate"}, {"index", 99}}},
                                      {"concept", "x"}})
              ->status == 400);
    CHECK(s.post("/api/annotations", {{"model", "ghost"}, {"feature", {{"layer", "penultimate"}, {"index", 0}}},
                                      {"concept", "x"}})
              ->status == 404);
    CHECK(s.post("/api/annotations", {{"model", "mlp"}})->status == 400);
  }
  {
    Running s(cfg);
    const json all = json::parse(s.client.Get("/api/annotations")->body).at("annotations");
    REQUIRE(all.size() == 2);
    CHECK(all[1].at("concept") == "counting");
  }
  fs::remove(file);
}

TEST_CASE("registry file loading") {
  const fs::path dir = scratch("registry");
  fs::create_directories(dir);
  write_splits(*task_data(), dir / "data");
  test_registry().models.at("mlp").model->save(dir / "mlp.ckpt");
  std::ofstream(dir / "reg.json") << R"({"datasets": {"inter": "data"}, "models": {"mlp": {"path": "mlp.ckpt", "dataset": "inter"}}})";
  const Registry reg = load_registry(dir / "reg.json");
  CHECK(*reg.datasets.at("inter") == *task_data());
  CHECK(reg.models.at("mlp").model->digest() == test_registry().models.at("mlp").model->digest());

  std::ofstream(dir / "bad.json") << R"({"datasets": {}, "models": {"mlp": {"path": "mlp.ckpt", "dataset": "inter"}}})";
  CHECK_THROWS_AS(load_registry(dir / "bad.json"), Error);
  CHECK_THROWS_AS(load_registry(dir / "missing.json"), Error);
  CHECK_THROWS_AS(Service(ServiceConfig{}), Error);
  fs::remove_all(dir);
}
