#include "mviz/service.hpp"

#include <atomic>
#include <condition_variable>
#include <fstream>
#include <functional>
#include <mutex>
#include <thread>

#include "httplib.h"
#include "mviz/canonical.hpp"
#include "mviz/error.hpp"

namespace mviz {

using nlohmann::json;
namespace fs = std::filesystem;

Registry load_registry(const fs::path& file) {
  std::ifstream in(file);
  if (!in) throw Error(ErrorCode::kIoFailure, "cannot read registry " + file.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kIoFailure, "malformed registry " + file.string() + ": " + e.what());
  }
  const fs::path base = file.parent_path();
  auto resolve = [&](const std::string& p) { return fs::path(p).is_absolute() ? fs::path(p) : base / p; };
  Registry reg;
  const json datasets = j.value("datasets", json::object());
  const json models = j.value("models", json::object());
  for (const auto& [id, dir] : datasets.items()) {
    reg.datasets.emplace(id, std::make_shared<const SplitSet>(read_splits(resolve(dir.get<std::string>()))));
  }
  for (const auto& [id, entry] : models.items()) {
    const std::string ds = entry.at("dataset").get<std::string>();
    auto it = reg.datasets.find(ds);
    if (it == reg.datasets.end()) throw Error(ErrorCode::kNotFound, "model '" + id + "' names unknown dataset '" + ds + "'");
    auto model = std::make_shared<const Model>(Model::load(resolve(entry.at("path").get<std::string>())));
    if (!(model->schema() == it->second->train.schema)) {
      throw Error(ErrorCode::kSchemaMismatch, "model '" + id + "' does not match dataset '" + ds + "'");
    }
    reg.models.emplace(id, RegisteredModel{std::move(model), ds});
  }
  return reg;
}

json registry_json(const Registry& registry) {
  json datasets = json::array();
  for (const auto& [id, data] : registry.datasets) {
    datasets.push_back({{"id", id},
                        {"schema", to_json(data->train.schema)},
                        {"splits", {{"train", data->train.size()}, {"val", data->val.size()}, {"test", data->test.size()}}}});
  }
  json models = json::array();
  for (const auto& [id, m] : registry.models) {
    models.push_back({{"id", id},
                      {"dataset", m.dataset},
                      {"architecture", to_string(m.model->architecture())},
                      {"digest", m.model->digest()},
                      {"num_classes", m.model->num_classes()},
                      {"penultimate_dim", m.model->penultimate_dim()}});
  }
  return {{"datasets", datasets}, {"models", models}};
}

// ---------------------------------------------------------------------------

namespace {

struct HttpError {
  int status;
  std::string code;
  std::string message;
};

int status_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::kNotFound: return 404;
    case ErrorCode::kIoFailure:
    case ErrorCode::kDivergence: return 500;
    default: return 400;
  }
}

void send_json(httplib::Response& res, int status, const std::string& body) {
  res.status = status;
  res.set_content(body, "application/json");
}

void send_error(httplib::Response& res, int status, std::string_view code, const std::string& message) {
  send_json(res, status, json{{"error", code}, {"message", message}}.dump());
}

json parse_body(const httplib::Request& req) {
  try {
    json j = json::parse(req.body);
    if (!j.is_object()) throw HttpError{400, "BadRequest", "request body must be a JSON object"};
    return j;
  } catch (const json::exception& e) {
    throw HttpError{400, "BadRequest", std::string("malformed JSON body: ") + e.what()};
  }
}

std::size_t parse_index(const std::string& s) {
  try {
    std::size_t pos = 0;
    const unsigned long long v = std::stoull(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return static_cast<std::size_t>(v);
  } catch (const std::exception&) {
    throw HttpError{400, "BadRequest", "invalid index '" + s + "'"};
  }
}

std::string param(const httplib::Request& req, const std::string& key, const std::string& fallback) {
  return req.has_param(key) ? req.get_param_value(key) : fallback;
}

struct Annotation {
  std::size_t id = 0;
  std::string model;
  FeatureRef feature;
  std::string text;
};

json to_json(const Annotation& a) {
  return {{"id", a.id}, {"model", a.model}, {"feature", mviz::to_json(a.feature)}, {"concept", a.text}};
}

struct Job {
  std::string id;
  std::string key;
  json request;
  std::string status = "running";  // running | done | failed
  json report;
  std::string error;
};

}  // namespace

struct Service::Impl {
  ServiceConfig cfg;
  AnalysisCache cache;
  httplib::Server server;
  std::thread listener;

  std::mutex annotations_mutex;
  std::vector<Annotation> annotations;

  std::mutex jobs_mutex;
  std::condition_variable jobs_cv;
  std::map<std::string, Job> jobs;
  std::vector<std::thread> job_threads;
  std::size_t running = 0;
  std::size_t next_job = 1;

  explicit Impl(ServiceConfig c) : cfg(std::move(c)), cache(cfg.cache_dir) {
    if (cfg.registry.datasets.empty()) throw Error(ErrorCode::kInvalidArgument, "registry is empty");
    load_annotations();
    const std::size_t threads = std::max<std::size_t>(1, cfg.threads);
    server.new_task_queue = [threads] { return new httplib::ThreadPool(threads); };
    routes();
  }

  ~Impl() {
    server.stop();
    if (listener.joinable()) listener.join();
    std::vector<std::thread> pending;
    {
      std::lock_guard lock(jobs_mutex);
      pending.swap(job_threads);
    }
    for (auto& t : pending) t.join();
  }

  // -- lookups ---------------------------------------------------------------

  const SplitSet& dataset(const std::string& id) const {
    auto it = cfg.registry.datasets.find(id);
    if (it == cfg.registry.datasets.end()) throw HttpError{404, "NotFound", "unknown dataset '" + id + "'"};
    return *it->second;
  }

  const Model& model_for(const std::string& ds, const std::string& id) const {
    const SplitSet& data = dataset(ds);
    auto it = cfg.registry.models.find(id);
    if (it == cfg.registry.models.end()) throw HttpError{404, "NotFound", "unknown model '" + id + "'"};
    if (!(it->second.model->schema() == data.train.schema)) {
      throw HttpError{400, "SchemaMismatch", "model '" + id + "' does not accept dataset '" + ds + "'"};
    }
    return *it->second.model;
  }

  static const Datapoint& point(const SplitSet& data, const std::string& split, std::size_t i) {
    const Dataset& ds = data.split(split);
    if (i >= ds.size()) throw HttpError{404, "NotFound", "index " + std::to_string(i) + " outside split '" + split + "'"};
    return ds.points[i];
  }

  // -- handlers --------------------------------------------------------------

  using Handler = std::function<void(const httplib::Request&, httplib::Response&)>;

  static httplib::Server::Handler guarded(Handler h) {
    return [h = std::move(h)](const httplib::Request& req, httplib::Response& res) {
      try {
        h(req, res);
      } catch (const HttpError& e) {
        send_error(res, e.status, e.code, e.message);
      } catch (const Error& e) {
        send_error(res, status_for(e.code()), to_string(e.code()), e.what());
      } catch (const json::exception& e) {
        send_error(res, 400, "BadRequest", e.what());
      } catch (const std::exception& e) {
        send_error(res, 500, "Internal", e.what());
      }
    };
  }

  void routes() {
    server.Get("/api/registry", guarded([this](const auto&, auto& res) {
                 send_json(res, 200, canonical_dump(registry_json(cfg.registry)));
               }));

    server.Get(R"(/api/dp/([^/]+)/([^/]+)/([^/]+))", guarded([this](const auto& req, auto& res) {
                 const SplitSet& data = dataset(req.matches[1]);
                 const std::string split = req.matches[2];
                 const std::size_t i = parse_index(req.matches[3]);
                 const Datapoint& dp = point(data, split, i);
                 send_json(res, 200,
                           canonical_dump({{"dataset", req.matches[1].str()},
                                           {"split", split},
                                           {"index", i},
                                           {"label", dp.label},
                                           {"datapoint", to_json(dp, data.train.schema)}}));
               }));

    server.Get(R"(/api/analysis/([^/]+)/([^/]+)/([^/]+)/overview)", guarded([this](const auto& req, auto& res) {
                 const std::string ds = req.matches[1];
                 const SplitSet& data = dataset(ds);
                 const Model& model = model_for(ds, req.matches[2]);
                 const std::size_t i = parse_index(req.matches[3]);
                 const std::string split = param(req, "split", "test");
                 point(data, split, i);
                 RunConfig rc = cfg.analysis;
                 rc.stages.clear();
                 for (Stage s : parse_stages(param(req, "stages", "u,c,p"))) {
                   if (s == Stage::kRl || s == Stage::kRg) {
                     throw HttpError{400, "BadRequest", "feature stages are served by the feature endpoint"};
                   }
                   rc.stages.push_back(s);
                 }
                 const auto bundle = cache.bundle(model, data, split, i, rc);
                 res.set_header("X-Bundle-Digest", bundle_digest(*bundle));
                 send_json(res, 200, canonical_dump(overview_json(*bundle)));
               }));

    server.Get(R"(/api/analysis/([^/]+)/([^/]+)/([^/]+)/feature/([^/]+)/([^/]+))",
               guarded([this](const auto& req, auto& res) {
                 const std::string ds = req.matches[1];
                 const SplitSet& data = dataset(ds);
                 const Model& model = model_for(ds, req.matches[2]);
                 const std::size_t i = parse_index(req.matches[3]);
                 const std::string split = param(req, "split", "test");
                 point(data, split, i);
                 RunConfig rc = cfg.analysis;
                 rc.stages = {Stage::kRl, Stage::kRg};
                 rc.features = {FeatureRef{req.matches[4], parse_index(req.matches[5])}};
                 if (req.has_param("k")) rc.k = parse_index(req.get_param_value("k"));
                 if (rc.k == 0) throw HttpError{400, "BadRequest", "k must be positive"};
                 rc.direction = direction_from_string(param(req, "dir", std::string(to_string(rc.direction))));
                 rc.global_split = param(req, "global_split", rc.global_split);
                 data.split(rc.global_split);
                 validate_feature(model, rc.features[0]);
                 const auto bundle = cache.bundle(model, data, split, i, rc);
                 send_json(res, 200,
                           canonical_dump({{"dataset_id", bundle->dataset_id},
                                           {"model_id", bundle->model_id},
                                           {"split", split},
                                           {"index", i},
                                           {"feature", to_json(rc.features[0])},
                                           {"config_digest", bundle->config_digest},
                                           {"local", to_json(bundle->local->at(0))},
                                           {"global", to_json(bundle->global->at(0))}}));
               }));

    server.Post(R"(/api/analysis/([^/]+)/([^/]+)/([^/]+)/sog)", guarded([this](const auto& req, auto& res) {
                  const std::string ds = req.matches[1];
                  const SplitSet& data = dataset(ds);
                  const Model& model = model_for(ds, req.matches[2]);
                  const std::size_t i = parse_index(req.matches[3]);
                  const json body = parse_body(req);
                  const Datapoint& dp = point(data, body.value("split", std::string("test")), i);
                  if (!body.contains("query_modality") || !body.contains("atom_indices") ||
                      !body.contains("response_modality")) {
                    throw HttpError{400, "BadRequest", "query_modality, atom_indices and response_modality are required"};
                  }
                  const InteractionQuery query{body.at("query_modality").get<std::string>(),
                                               body.at("atom_indices").get<std::vector<std::size_t>>()};
                  const AttributionTarget target =
                      body.contains("target")
                          ? target_from_json(body.at("target"))
                          : AttributionTarget::class_logit(argmax_lowest(model.forward(dp).values()));
                  const InteractionMode mode = body.contains("mode")
                                                   ? interaction_mode_from_string(body.at("mode").get<std::string>())
                                                   : cfg.analysis.methods.mode;
                  const ad::Aggregation agg =
                      body.contains("aggregation") ? aggregation_from_string(body.at("aggregation").get<std::string>())
                                                   : cfg.analysis.methods.query_aggregation;
                  const InteractionMap map =
                      cm_second_order(model, dp, query, body.at("response_modality").get<std::string>(), target, mode, agg);
                  // full precision so clients see the exact weights
                  send_json(res, 200, to_json(map).dump());
                }));

    server.Post("/api/debug/run", guarded([this](const auto& req, auto& res) { start_job(parse_body(req), res); }));

    server.Get(R"(/api/debug/jobs/([^/]+))", guarded([this](const auto& req, auto& res) {
                 std::lock_guard lock(jobs_mutex);
                 auto it = jobs.find(req.matches[1]);
                 if (it == jobs.end()) throw HttpError{404, "NotFound", "unknown job '" + req.matches[1].str() + "'"};
                 send_json(res, 200, job_json(it->second).dump());
               }));

    server.Post("/api/annotations", guarded([this](const auto& req, auto& res) {
                  const json body = parse_body(req);
                  if (!body.contains("model") || !body.contains("feature") || !body.contains("concept")) {
                    throw HttpError{400, "BadRequest", "model, feature and concept are required"};
                  }
                  Annotation a;
                  a.model = body.at("model").get<std::string>();
                  a.feature = feature_from_json(body.at("feature"));
                  a.text = body.at("concept").get<std::string>();
                  if (a.text.empty()) throw HttpError{400, "BadRequest", "concept must not be empty"};
                  auto it = cfg.registry.models.find(a.model);
                  if (it == cfg.registry.models.end()) throw HttpError{404, "NotFound", "unknown model '" + a.model + "'"};
                  validate_feature(*it->second.model, a.feature);
                  json stored;
                  {
                    std::lock_guard lock(annotations_mutex);
                    a.id = annotations.size() + 1;
                    stored = to_json(a);
                    if (cfg.annotations_file) {
                      std::ofstream out(*cfg.annotations_file, std::ios::app);
                      if (!(out << stored.dump() << '\n')) {
                        throw Error(ErrorCode::kIoFailure, "cannot append to " + cfg.annotations_file->string());
                      }
                    }
                    annotations.push_back(a);
                  }
                  send_json(res, 201, stored.dump());
                }));

    server.Get("/api/annotations", guarded([this](const auto& req, auto& res) {
                 json list = json::array();
                 std::lock_guard lock(annotations_mutex);
                 for (const auto& a : annotations) {
                   if (req.has_param("model") && a.model != req.get_param_value("model")) continue;
                   if (req.has_param("layer") && a.feature.layer != req.get_param_value("layer")) continue;
                   if (req.has_param("index") && a.feature.index != parse_index(req.get_param_value("index"))) continue;
                   list.push_back(to_json(a));
                 }
                 send_json(res, 200, json{{"annotations", list}}.dump());
               }));
  }

  void load_annotations() {
    if (!cfg.annotations_file || !fs::exists(*cfg.annotations_file)) return;
    std::ifstream in(*cfg.annotations_file);
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const json j = json::parse(line);
      annotations.push_back({j.at("id").get<std::size_t>(), j.at("model").get<std::string>(),
                             feature_from_json(j.at("feature")), j.at("concept").get<std::string>()});
    }
  }

  // -- debug jobs --------------------------------------------------------------

  static json job_json(const Job& job) {
    json j = {{"job", job.id}, {"status", job.status}, {"request", job.request}};
    if (job.status == "done") j["report"] = job.report;
    if (job.status == "failed") j["error"] = job.error;
    return j;
  }

  void start_job(const json& body, httplib::Response& res) {
    std::vector<std::string> strategies;
    if (body.contains("strategy")) {
      const auto& s = body.at("strategy");
      if (s.is_string()) {
        if (s.get<std::string>() != "all") strategies.push_back(s.get<std::string>());
      } else {
        strategies = s.get<std::vector<std::string>>();
      }
    }
    DebugConfig dc = cfg.debug;
    if (body.contains("n")) dc.n = body.at("n").get<std::size_t>();
    const std::size_t seeds = body.value("seeds", cfg.debug.num_seeds);
    if (seeds == 0 || dc.n == 0) throw HttpError{400, "BadRequest", "n and seeds must be positive"};
    BenchmarkConfig bc = cfg.benchmark;
    bc.seed = body.value("base_seed", bc.seed);
    check_strategy_names(strategies);
    const json request = {{"strategy", strategies}, {"n", dc.n}, {"seeds", seeds}, {"base_seed", bc.seed}};
    const std::string key = json_digest(request);

    std::lock_guard lock(jobs_mutex);
    for (const auto& [id, job] : jobs) {
      if (job.key == key && job.status == "running") {
        send_json(res, 409, json{{"error", "Conflict"}, {"message", "identical job is running"}, {"job", id}}.dump());
        return;
      }
    }
    if (running >= cfg.job_budget) {
      send_error(res, 503, "Busy", "debug worker budget exhausted");
      return;
    }
    Job job;
    job.id = "job-" + std::to_string(next_job++);
    job.key = key;
    job.request = request;
    const std::string id = job.id;
    jobs.emplace(id, std::move(job));
    ++running;
    job_threads.emplace_back([this, id, bc, seeds, dc, strategies] {
      json report;
      std::string error;
      try {
        report = to_json(run_debug_benchmark(bc, seeds, dc, strategies));
      } catch (const std::exception& e) {
        error = e.what();
      }
      std::lock_guard lock(jobs_mutex);
      Job& j = jobs.at(id);
      j.status = error.empty() ? "done" : "failed";
      j.report = std::move(report);
      j.error = std::move(error);
      --running;
      jobs_cv.notify_all();
    });
    send_json(res, 202, job_json(jobs.at(id)).dump());
  }
};

Service::Service(ServiceConfig cfg) : impl_(std::make_unique<Impl>(std::move(cfg))) {}

Service::~Service() = default;

int Service::start(const std::string& host, int port) {
  int bound = port;
  if (port == 0) {
    bound = impl_->server.bind_to_any_port(host);
    if (bound < 0) throw Error(ErrorCode::kIoFailure, "cannot bind " + host);
  } else if (!impl_->server.bind_to_port(host, port)) {
    throw Error(ErrorCode::kIoFailure, "cannot bind " + host + ":" + std::to_string(port));
  }
  impl_->listener = std::thread([this] { impl_->server.listen_after_bind(); });
  impl_->server.wait_until_ready();
  return bound;
}

void Service::run(const std::string& host, int port) {
  if (!impl_->server.listen(host, port)) {
    throw Error(ErrorCode::kIoFailure, "cannot serve on " + host + ":" + std::to_string(port));
  }
}

void Service::stop() {
  impl_->server.stop();
  if (impl_->listener.joinable()) impl_->listener.join();
}

void Service::wait_for_jobs() {
  std::unique_lock lock(impl_->jobs_mutex);
  impl_->jobs_cv.wait(lock, [this] { return impl_->running == 0; });
}

}  // namespace mviz
