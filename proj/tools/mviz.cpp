// mviz command line: data generation, training, analysis, sanity checks,
// debugging experiments and the HTTP service.

#include <csignal>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "mviz/canonical.hpp"
#include "mviz/error.hpp"
#include "mviz/pipeline.hpp"
#include "mviz/sanity.hpp"
#include "mviz/service.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace mviz;

namespace {

constexpr int kUsageError = 1;
constexpr int kRuntimeError = 2;

json read_json(const fs::path& file) {
  std::ifstream in(file);
  if (!in) throw Error(ErrorCode::kIoFailure, "cannot read " + file.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kIoFailure, file.string() + ": " + e.what());
  }
}

void write_or_print(const std::optional<fs::path>& out, const std::string& text) {
  if (!out) {
    std::cout << text << '\n';
    return;
  }
  if (out->has_parent_path()) fs::create_directories(out->parent_path());
  std::ofstream f(*out);
  if (!(f << text << '\n')) throw Error(ErrorCode::kIoFailure, "cannot write " + out->string());
}

SyntheticSpec named_task(const std::string& name) {
  if (name == "unimodal") return unimodal_task_spec();
  if (name == "interaction") return interaction_task_spec();
  if (name == "bug") return bug_task_spec();
  throw Error(ErrorCode::kInvalidArgument, "unknown task '" + name + "'");
}

FeatureRef parse_feature(const std::string& s) {
  const auto colon = s.rfind(':');
  if (colon == std::string::npos) return {std::string(kPenultimate), std::stoull(s)};
  return {s.substr(0, colon), std::stoull(s.substr(colon + 1))};
}

struct TrainOptions {
  std::string arch = "mlp_fusion";
  std::size_t hidden = 64;
  std::size_t epochs = 30;
  double lr = 0.01;
  std::size_t batch = 64;
  std::uint64_t seed = 0;

  void add(CLI::App* app) {
    app->add_option("--arch", arch, "additive | bilinear | mlp_fusion | late_fusion")->capture_default_str();
    app->add_option("--hidden", hidden, "hidden width")->capture_default_str();
    app->add_option("--epochs", epochs)->capture_default_str();
    app->add_option("--lr", lr)->capture_default_str();
    app->add_option("--batch", batch)->capture_default_str();
    app->add_option("--seed", seed)->capture_default_str();
  }
  ModelConfig model() const {
    ModelConfig mc;
    mc.architecture = architecture_from_string(arch);
    mc.hidden_dim = hidden;
    mc.seed = seed;
    return mc;
  }
  TrainConfig train() const {
    TrainConfig tc;
    tc.epochs = epochs;
    tc.lr = lr;
    tc.batch = batch;
    tc.seed = seed;
    return tc;
  }
};

Service* g_service = nullptr;

void on_signal(int) {
  if (g_service) g_service->stop();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"mviz: multimodal model analysis"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
  std::optional<fs::path> gen_spec;
  std::string gen_task = "interaction";
  std::uint64_t gen_seed = 0;
  fs::path gen_out;
  std::optional<std::size_t> n_train, n_val, n_test;
  gen->add_option("--spec", gen_spec, "spec JSON file")->check(CLI::ExistingFile);
  gen->add_option("--task", gen_task, "built-in task: unimodal | interaction | bug")->capture_default_str();
  gen->add_option("--seed", gen_seed)->capture_default_str();
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--n-train", n_train);
  gen->add_option("--n-val", n_val);
  gen->add_option("--n-test", n_test);

  // train
  auto* train = app.add_subcommand("train", "train a model on a dataset directory");
  TrainOptions train_opts;
  fs::path train_data, train_out;
  train_opts.add(train);
  train->add_option("--data", train_data)->required()->check(CLI::ExistingDirectory);
  train->add_option("--out", train_out)->required();

  // analyze
  auto* analyze = app.add_subcommand("analyze", "run the analysis pipeline on one datapoint");
  fs::path an_model, an_data, an_out;
  std::size_t an_index = 0;
  std::string an_split = "test", an_stages = "p,u,c,rl,rg", an_method = "gradient", an_dir = "max";
  std::optional<fs::path> an_config;
  std::optional<double> an_l1, an_l2;
  std::optional<std::size_t> an_k, an_top;
  std::vector<std::string> an_features;
  bool an_emap = false;
  std::optional<std::uint64_t> an_seed;
  analyze->add_option("--model", an_model)->required()->check(CLI::ExistingFile);
  analyze->add_option("--data", an_data)->required()->check(CLI::ExistingDirectory);
  analyze->add_option("--index", an_index)->required();
  analyze->add_option("--split", an_split)->capture_default_str();
  analyze->add_option("--stages", an_stages, "comma-separated subset of u,c,rl,rg,p")->capture_default_str();
  analyze->add_option("--config", an_config, "RunConfig JSON; flags below override it")->check(CLI::ExistingFile);
  analyze->add_option("--method", an_method, "gradient | lime | shapley")->capture_default_str();
  analyze->add_option("--lambda1", an_l1);
  analyze->add_option("--lambda2", an_l2);
  analyze->add_option("--k", an_k);
  analyze->add_option("--top", an_top, "top features per class");
  analyze->add_option("--dir", an_dir, "max | min")->capture_default_str();
  analyze->add_option("--feature", an_features, "explicit feature, layer:index");
  analyze->add_flag("--emap", an_emap, "add the EMAP energy to stage C");
  analyze->add_option("--seed", an_seed);
  analyze->add_option("--out", an_out, "bundle directory")->required();

  // sanity
  auto* sanity = app.add_subcommand("sanity", "model or data randomization check");
  std::string sc_check, sc_method = "gradient";
  std::optional<fs::path> sc_model, sc_out;
  fs::path sc_data;
  std::size_t sc_points = 50;
  double sc_threshold = 0.5;
  std::uint64_t sc_rand_seed = 1;
  TrainOptions sc_train;
  sanity->add_option("--check", sc_check, "model | data")->required()->check(CLI::IsMember({"model", "data"}));
  sanity->add_option("--method", sc_method, "gradient | lime | shapley")->capture_default_str();
  sanity->add_option("--model", sc_model, "checkpoint (model check)")->check(CLI::ExistingFile);
  sanity->add_option("--data", sc_data)->required()->check(CLI::ExistingDirectory);
  sanity->add_option("--points", sc_points)->capture_default_str();
  sanity->add_option("--threshold", sc_threshold)->capture_default_str();
  sanity->add_option("--randomize-seed", sc_rand_seed, "head re-initialization seed")->capture_default_str();
  sanity->add_option("--out", sc_out);
  sc_train.add(sanity);

  // debug
  auto* debug = app.add_subcommand("debug", "planted-bug debugging experiment");
  std::vector<std::string> db_strategies;
  DebugConfig db_cfg;
  std::size_t db_seeds = 10;
  std::uint64_t db_base = 0;
  std::optional<fs::path> db_spec, db_out;
  debug->add_option("--strategy", db_strategies, "strategy name or prefix; repeatable, default all");
  debug->add_option("--n", db_cfg.n, "selections per strategy")->capture_default_str();
  debug->add_option("--seeds", db_seeds)->capture_default_str();
  debug->add_option("--base-seed", db_base)->capture_default_str();
  debug->add_option("--lr-grid", db_cfg.lr_grid)->capture_default_str();
  debug->add_option("--threads", db_cfg.threads, "0: hardware concurrency")->capture_default_str();
  debug->add_option("--spec", db_spec, "bug task spec JSON")->check(CLI::ExistingFile);
  debug->add_option("--out", db_out);

  // serve
  auto* serve = app.add_subcommand("serve", "HTTP API over a model and dataset registry");
  fs::path sv_registry;
  std::string sv_host = "127.0.0.1";
  int sv_port = 8080;
  ServiceConfig sv_cfg;
  std::optional<fs::path> sv_annotations;
  serve->add_option("--registry", sv_registry)->required()->check(CLI::ExistingFile);
  serve->add_option("--host", sv_host)->capture_default_str();
  serve->add_option("--port", sv_port)->capture_default_str();
  serve->add_option("--threads", sv_cfg.threads)->capture_default_str();
  serve->add_option("--job-budget", sv_cfg.job_budget)->capture_default_str();
  serve->add_option("--annotations", sv_annotations, "JSON lines file for concept annotations");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kUsageError;
  }

  try {
    if (*gen) {
      SyntheticSpec spec = gen_spec ? synthetic_spec_from_json(read_json(*gen_spec)) : named_task(gen_task);
      spec.validate();
      const SplitSet data = make_synthetic_dataset(spec, n_train.value_or(spec.n_train), n_val.value_or(spec.n_val),
                                                   n_test.value_or(spec.n_test), gen_seed);
      write_splits(data, gen_out);
      write_or_print(gen_out / "spec.json", to_json(spec).dump(2));
      std::cout << "wrote " << data.train.size() << "/" << data.val.size() << "/" << data.test.size()
                << " points to " << gen_out.string() << '\n';
    } else if (*train) {
      const SplitSet data = read_splits(train_data);
      const TrainResult r = train_model(train_opts.model(), data.train, &data.val, train_opts.train());
      r.model.save(train_out);
      std::cout << "train accuracy " << r.train_accuracy << ", val accuracy " << r.val_accuracy << ", test accuracy "
                << accuracy(r.model, data.test) << '\n';
    } else if (*analyze) {
      const Model model = Model::load(an_model);
      const SplitSet data = read_splits(an_data);
      RunConfig cfg = an_config ? RunConfig::from_json(read_json(*an_config)) : RunConfig{};
      if (!an_config || analyze->count("--stages") > 0) cfg.stages = parse_stages(an_stages);
      if (!an_config || analyze->count("--method") > 0) cfg.methods.method = unimodal_method_from_string(an_method);
      if (!an_config || analyze->count("--dir") > 0) cfg.direction = direction_from_string(an_dir);
      if (an_k) cfg.k = *an_k;
      if (an_top) cfg.top_m = *an_top;
      if (an_seed) cfg.seed = *an_seed;
      if (an_emap) cfg.emap = true;
      for (const auto& f : an_features) cfg.features.push_back(parse_feature(f));
      if (an_l1) cfg.lambda1 = *an_l1;
      if (an_l2) cfg.lambda2 = *an_l2;
      if (!cfg.lambda1) cfg.lambda1 = kDefaultLambda1;
      if (!cfg.lambda2) cfg.lambda2 = kDefaultLambda2;
      AnalysisCache cache(cache_directory());
      const auto bundle = cache.bundle(model, data, an_split, an_index, cfg);
      const auto files = export_bundle(*bundle, an_out);
      std::cout << "predicted " << bundle->predicted_label << ", true " << bundle->true_label << "; wrote "
                << files.size() << " files to " << an_out.string() << " (bundle " << bundle_digest(*bundle) << ")\n";
    } else if (*sanity) {
      const SplitSet data = read_splits(sc_data);
      const AttributionFn method = attribution_method(unimodal_method_from_string(sc_method));
      RandomizationReport report;
      if (sc_check == "model") {
        if (!sc_model) throw CLI::RequiredError("--model");
        const Model model = Model::load(*sc_model);
        const std::size_t n = std::min(sc_points, data.test.size());
        report = model_randomization_check(model, std::span<const Datapoint>(data.test.points.data(), n), method,
                                           sc_method, sc_rand_seed, sc_threshold);
      } else {
        DataRandomizationConfig dc;
        dc.model = sc_train.model();
        dc.train = sc_train.train();
        dc.num_points = sc_points;
        dc.threshold = sc_threshold;
        report = data_randomization_check(data, dc, method, sc_method);
      }
      write_or_print(sc_out, to_json(report).dump(2));
      std::cerr << sc_check << " randomization: mean spearman " << report.correlation
                << (report.pass ? " (pass)" : " (fail)") << '\n';
    } else if (*debug) {
      BenchmarkConfig bc;
      if (db_spec) bc.spec = synthetic_spec_from_json(read_json(*db_spec));
      bc.seed = db_base;
      const DebugReport report = run_debug_benchmark(bc, db_seeds, db_cfg, db_strategies);
      write_or_print(db_out, to_json(report).dump(2));
      for (const auto& s : report.strategies) {
        std::cerr << s.strategy << ": targeted " << s.targeted.mean << " +- " << s.targeted.std << ", overall "
                  << s.overall.mean << " +- " << s.overall.std << " (lr " << s.lr << ")\n";
      }
    } else if (*serve) {
      sv_cfg.registry = load_registry(sv_registry);
      sv_cfg.cache_dir = cache_directory();
      sv_cfg.annotations_file = sv_annotations;
      Service service(std::move(sv_cfg));
      g_service = &service;
      std::signal(SIGINT, on_signal);
      std::signal(SIGTERM, on_signal);
      std::cerr << "serving on " << sv_host << ":" << sv_port << '\n';
      service.run(sv_host, sv_port);
      g_service = nullptr;
      service.wait_for_jobs();
    }
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : kUsageError;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return e.code() == ErrorCode::kInvalidArgument ? kUsageError : kRuntimeError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kRuntimeError;
  }
  return 0;
}
