#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>

#include "json.hpp"
#include "mviz/pipeline.hpp"
#include "mviz/sanity.hpp"

namespace mviz {

struct RegisteredModel {
  std::shared_ptr<const Model> model;
  std::string dataset;  // registry id of the dataset it was trained on
};

struct Registry {
  std::map<std::string, std::shared_ptr<const SplitSet>> datasets;
  std::map<std::string, RegisteredModel> models;
};

// {"datasets": {id: splits_dir}, "models": {id: {"path": ckpt, "dataset": id}}}
// with paths relative to the registry file. Throws IoFailure, NotFound
// (model names an unknown dataset), SchemaMismatch.
Registry load_registry(const std::filesystem::path& file);
nlohmann::json registry_json(const Registry& registry);

struct ServiceConfig {
  Registry registry;
  std::size_t threads = 8;     // HTTP handler threads
  std::size_t job_budget = 2;  // concurrently running debug jobs
  // Analysis defaults; requests override stages, feature, k and direction.
  RunConfig analysis = [] {
    RunConfig c;
    c.lambda1 = kDefaultLambda1;
    c.lambda2 = kDefaultLambda2;
    return c;
  }();
  std::optional<std::filesystem::path> cache_dir;
  std::optional<std::filesystem::path> annotations_file;  // JSON lines, reloaded on start
  BenchmarkConfig benchmark;
  DebugConfig debug;
};

// HTTP API over a fixed registry. Analysis endpoints answer synchronously
// through an AnalysisCache; debug runs are background jobs polled by id.
class Service {
 public:
  explicit Service(ServiceConfig cfg);
  ~Service();
  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  // Binds and serves on a background thread; port 0 picks a free port.
  // Returns the bound port. Throws IoFailure.
  int start(const std::string& host, int port);
  // Binds and serves on the calling thread until stop().
  void run(const std::string& host, int port);
  void stop();
  // Blocks until every debug job has finished.
  void wait_for_jobs();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace mviz
