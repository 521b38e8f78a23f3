#include "mviz/sanity.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <mutex>
#include <numeric>
#include <random>
#include <thread>

#include "mviz/error.hpp"

namespace mviz {

using nlohmann::json;

namespace {

std::vector<double> ranks(std::span<const double> v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b] || (v[a] == v[b] && a < b); });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
    i = j + 1;
  }
  return r;
}

std::string_view kind_name(CheckKind k) { return k == CheckKind::kModel ? "model" : "data"; }

}  // namespace

double spearman(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw Error(ErrorCode::kShapeMismatch, "spearman needs equal lengths");
  if (a.empty()) throw Error(ErrorCode::kInvalidArgument, "spearman of empty vectors");
  const auto ra = ranks(a), rb = ranks(b);
  const double n = static_cast<double>(a.size());
  const double mean = (n + 1.0) / 2.0;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    sab += (ra[i] - mean) * (rb[i] - mean);
    saa += (ra[i] - mean) * (ra[i] - mean);
    sbb += (rb[i] - mean) * (rb[i] - mean);
  }
  if (saa == 0.0 && sbb == 0.0) return 1.0;
  if (saa == 0.0 || sbb == 0.0) return 0.0;
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

AttributionFn attribution_method(const MethodConfig& cfg) {
  return [cfg](const Model& model, const Datapoint& dp, const AttributionTarget& target) {
    std::vector<double> out;
    for (const auto& m : model.schema().modalities) {
      const AttributionMap map = run_unimodal(model, dp, m.name, target, cfg);
      out.insert(out.end(), map.weights.begin(), map.weights.end());
    }
    return out;
  };
}

AttributionFn attribution_method(UnimodalMethod method, const PerturbConfig& lime, const ShapleyConfig& shapley) {
  MethodConfig cfg;
  cfg.method = method;
  cfg.lime = lime;
  cfg.shapley = shapley;
  return attribution_method(cfg);
}

json to_json(const RandomizationReport& r) {
  json j = {{"kind", kind_name(r.kind)},     {"method", r.method},       {"correlation", r.correlation},
            {"per_point", r.per_point},     {"threshold", r.threshold}, {"pass", r.pass}};
  if (r.reference_accuracy) j["reference_accuracy"] = *r.reference_accuracy;
  if (r.permuted_accuracy) j["permuted_accuracy"] = *r.permuted_accuracy;
  return j;
}

RandomizationReport compare_attributions(CheckKind kind, const Model& model, const Model& randomized,
                                         std::span<const Datapoint> points, const AttributionFn& method,
                                         std::string method_name, double threshold) {
  if (points.size() < kMinSanityPoints) {
    throw Error(ErrorCode::kSampleTooSmall, "randomization check needs at least 10 points");
  }
  RandomizationReport r;
  r.kind = kind;
  r.method = std::move(method_name);
  r.threshold = threshold;
  for (const auto& dp : points) {
    const auto target = AttributionTarget::class_logit(model.predict_label(dp));
    const auto before = method(model, dp, target);
    const auto after = method(randomized, dp, target);
    r.per_point.push_back(spearman(before, after));
  }
  r.correlation = std::accumulate(r.per_point.begin(), r.per_point.end(), 0.0) / static_cast<double>(r.per_point.size());
  r.pass = r.correlation < threshold;
  return r;
}

RandomizationReport model_randomization_check(const Model& model, std::span<const Datapoint> points,
                                              const AttributionFn& method, std::string method_name,
                                              std::uint64_t seed, double threshold) {
  return compare_attributions(CheckKind::kModel, model, reinitialize_head(model, seed), points, method,
                              std::move(method_name), threshold);
}

RandomizationReport data_randomization_check(const SplitSet& data, const DataRandomizationConfig& cfg,
                                             const AttributionFn& method, std::string method_name) {
  if (std::min(cfg.num_points, data.test.size()) < kMinSanityPoints) {
    throw Error(ErrorCode::kSampleTooSmall, "randomization check needs at least 10 points");
  }
  Dataset permuted = data.train;
  std::vector<std::size_t> labels;
  for (const auto& dp : permuted.points) labels.push_back(dp.label);
  std::mt19937_64 rng(cfg.train.seed ^ 0x5EEDULL);
  std::shuffle(labels.begin(), labels.end(), rng);
  for (std::size_t i = 0; i < labels.size(); ++i) permuted.points[i].label = labels[i];

  const Model reference = train_model(cfg.model, data.train, nullptr, cfg.train).model;
  const Model shuffled = train_model(cfg.model, permuted, nullptr, cfg.train).model;
  const std::span<const Datapoint> points(data.test.points.data(), std::min(cfg.num_points, data.test.size()));
  auto r = compare_attributions(CheckKind::kData, reference, shuffled, points, method, std::move(method_name),
                                cfg.threshold);
  r.reference_accuracy = accuracy(reference, data.test);
  r.permuted_accuracy = accuracy(shuffled, data.test);
  return r;
}

// ---------------------------------------------------------------------------

json to_json(const ErrorProbe& p) {
  return {{"weights", p.weights},       {"intercept", p.intercept},   {"top_features", p.top_features},
          {"ridge", p.ridge},           {"num_points", p.num_points}, {"num_errors", p.num_errors},
          {"train_accuracy", p.train_accuracy}};
}

std::vector<std::uint8_t> error_flags(const FeatureMatrix& fm) {
  if (fm.predictions.size() != fm.rows) throw Error(ErrorCode::kInvalidArgument, "feature matrix has no predictions");
  std::vector<std::uint8_t> out(fm.rows);
  for (std::size_t i = 0; i < fm.rows; ++i) out[i] = fm.predictions[i] != fm.labels[i] ? 1 : 0;
  return out;
}

ErrorProbe fit_error_probe(const FeatureMatrix& fm, std::span<const std::uint8_t> error, std::size_t top, double ridge) {
  if (error.size() != fm.rows) throw Error(ErrorCode::kShapeMismatch, "one error flag per row expected");
  if (ridge < 0.0) throw Error(ErrorCode::kInvalidArgument, "ridge must be nonnegative");
  const std::size_t errors = static_cast<std::size_t>(std::count(error.begin(), error.end(), std::uint8_t{1}));
  if (errors == 0 || errors == fm.rows) throw Error(ErrorCode::kSingleClassLabels, "error labels need both classes");
  const auto n = static_cast<Eigen::Index>(fm.rows);
  const auto d = static_cast<Eigen::Index>(fm.cols);
  Eigen::MatrixXd x(n, d);
  Eigen::VectorXd y(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < d; ++j) x(i, j) = std::abs(fm.at(static_cast<std::size_t>(i), static_cast<std::size_t>(j)));
    y(i) = error[static_cast<std::size_t>(i)] ? 1.0 : 0.0;
  }
  const Eigen::RowVectorXd xm = x.colwise().mean();
  const double ym = y.mean();
  const Eigen::MatrixXd xc = x.rowwise() - xm;
  const Eigen::VectorXd yc = y.array() - ym;
  Eigen::MatrixXd gram = xc.transpose() * xc / static_cast<double>(n);
  gram.diagonal().array() += 2.0 * ridge;
  const Eigen::VectorXd w = gram.ldlt().solve(xc.transpose() * yc / static_cast<double>(n));

  ErrorProbe p;
  p.ridge = ridge;
  p.num_points = fm.rows;
  p.num_errors = errors;
  p.weights.assign(w.data(), w.data() + w.size());
  p.intercept = ym - xm.dot(w);
  std::vector<std::size_t> order;
  for (std::size_t j = 0; j < fm.cols; ++j) {
    if (p.weights[j] > 0.0) order.push_back(j);
  }
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return p.weights[a] > p.weights[b]; });
  if (order.size() > top) order.resize(top);
  p.top_features = std::move(order);
  std::size_t correct = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const bool flag = x.row(i).dot(w) + p.intercept > 0.5;
    correct += flag == (error[static_cast<std::size_t>(i)] != 0) ? 1 : 0;
  }
  p.train_accuracy = static_cast<double>(correct) / static_cast<double>(fm.rows);
  return p;
}

UnlabeledPool::UnlabeledPool(const Dataset& labeled) : inputs_{labeled.schema, {}} {
  inputs_.points.reserve(labeled.size());
  for (const auto& dp : labeled.points) {
    Datapoint stripped;
    stripped.modalities = dp.modalities;
    inputs_.points.push_back(std::move(stripped));
  }
}

std::string_view to_string(Strategy s) {
  switch (s) {
    case Strategy::kRandom: return "random";
    case Strategy::kUncertainty: return "uncertainty";
    case Strategy::kFeatureTargeted: return "feature_targeted";
  }
  return "?";
}

Strategy strategy_from_string(std::string_view name) {
  if (name == "random") return Strategy::kRandom;
  if (name == "uncertainty") return Strategy::kUncertainty;
  if (name == "feature_targeted") return Strategy::kFeatureTargeted;
  throw Error(ErrorCode::kInvalidArgument, "unknown strategy '" + std::string(name) + "'");
}

double entropy(std::span<const double> p) {
  double h = 0.0;
  for (double v : p) {
    if (v > 0.0) h -= v * std::log(v);
  }
  return h;
}

namespace {

// Top-n indices of `score`, descending, ties by lower index.
std::vector<std::size_t> top_indices(const std::vector<double>& score, std::size_t n) {
  std::vector<std::size_t> idx(score.size());
  std::iota(idx.begin(), idx.end(), 0);
  n = std::min(n, idx.size());
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n), idx.end(),
                    [&](std::size_t a, std::size_t b) { return score[a] > score[b] || (score[a] == score[b] && a < b); });
  idx.resize(n);
  return idx;
}

}  // namespace

std::vector<std::size_t> select_active(Strategy strategy, const Model& model, const UnlabeledPool& pool, std::size_t n,
                                       std::span<const std::size_t> features, std::uint64_t seed) {
  if (n > pool.size()) {
    throw Error(ErrorCode::kPoolTooSmall,
                "requested " + std::to_string(n) + " points from a pool of " + std::to_string(pool.size()));
  }
  if ((strategy == Strategy::kFeatureTargeted) == features.empty()) {
    throw Error(ErrorCode::kInvalidArgument, "feature ids are required exactly for feature_targeted");
  }
  if (n == 0) return {};
  const Dataset& inputs = pool.inputs();
  switch (strategy) {
    case Strategy::kRandom: {
      std::vector<std::size_t> idx(pool.size());
      std::iota(idx.begin(), idx.end(), 0);
      std::mt19937_64 rng(seed);
      for (std::size_t i = 0; i < n; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, idx.size() - 1);
        std::swap(idx[i], idx[pick(rng)]);
      }
      idx.resize(n);
      return idx;
    }
    case Strategy::kUncertainty: {
      const Tensor logits = model.forward_batch(stack_inputs(inputs.schema, inputs.points));
      std::vector<double> h(pool.size());
      for (std::size_t i = 0; i < pool.size(); ++i) h[i] = entropy(softmax(logits.row(i)));
      return top_indices(h, n);
    }
    case Strategy::kFeatureTargeted: {
      const std::size_t d = model.penultimate_dim();
      for (std::size_t f : features) {
        if (f >= d) throw Error(ErrorCode::kInvalidArgument, "feature " + std::to_string(f) + " out of range");
      }
      const Tensor acts = model.layer_activation_batch(stack_inputs(inputs.schema, inputs.points), kPenultimate);
      const std::size_t per = (n + features.size() - 1) / features.size();
      std::vector<std::size_t> out;
      std::vector<std::uint8_t> taken(pool.size(), 0);
      for (std::size_t f : features) {
        std::vector<double> score(pool.size());
        for (std::size_t i = 0; i < pool.size(); ++i) score[i] = std::abs(acts.at(i, f));
        for (std::size_t i : top_indices(score, per)) {
          if (!taken[i]) {
            taken[i] = 1;
            out.push_back(i);
          }
        }
      }
      if (out.size() > n) out.resize(n);
      return out;
    }
  }
  throw Error(ErrorCode::kInvalidArgument, "unknown strategy");
}

// ---------------------------------------------------------------------------

Summary summarize(std::span<const double> v) {
  Summary s;
  if (v.empty()) return s;
  s.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  if (v.size() > 1) {
    double ss = 0.0;
    for (double x : v) ss += (x - s.mean) * (x - s.mean);
    s.std = std::sqrt(ss / static_cast<double>(v.size() - 1));
  }
  return s;
}

const StrategyReport& DebugReport::strategy(std::string_view name) const {
  for (const auto& s : strategies) {
    if (s.strategy == name) return s;
  }
  throw Error(ErrorCode::kNotFound, "no strategy '" + std::string(name) + "' in report");
}

json to_json(const DebugOutcome& o) {
  return {{"strategy", o.strategy},         {"n", o.n},
          {"selected", o.selected},         {"targeted_delta", o.targeted_delta},
          {"overall_delta", o.overall_delta}, {"seed", o.seed},
          {"lr", o.lr}};
}

json to_json(const DebugReport& r) {
  json strategies = json::array();
  for (const auto& s : r.strategies) {
    json rows = json::array();
    for (const auto& o : s.rows) rows.push_back(to_json(o));
    json by_lr = json::array();
    for (const auto& [lr, sum] : s.targeted_by_lr) by_lr.push_back({{"lr", lr}, {"mean", sum.mean}, {"std", sum.std}});
    strategies.push_back({{"strategy", s.strategy},
                          {"lr", s.lr},
                          {"targeted_delta", {{"mean", s.targeted.mean}, {"std", s.targeted.std}}},
                          {"overall_delta", {{"mean", s.overall.mean}, {"std", s.overall.std}}},
                          {"targeted_by_lr", by_lr},
                          {"rows", rows}});
  }
  return {{"baseline_targeted", r.baseline_targeted},
          {"baseline_overall", r.baseline_overall},
          {"targeted_count", r.targeted_count},
          {"strategies", strategies}};
}

namespace {

struct Accuracies {
  double targeted = 0.0;
  double overall = 0.0;
};

Accuracies evaluate(const Model& model, const Dataset& test, const std::vector<std::uint8_t>& targeted) {
  const auto pred = model.predict_labels(test);
  std::size_t t_total = 0, t_ok = 0, ok = 0;
  for (std::size_t i = 0; i < test.size(); ++i) {
    const bool hit = pred[i] == test.points[i].label;
    ok += hit ? 1 : 0;
    if (targeted[i]) {
      ++t_total;
      t_ok += hit ? 1 : 0;
    }
  }
  Accuracies a;
  a.overall = static_cast<double>(ok) / static_cast<double>(test.size());
  a.targeted = t_total ? static_cast<double>(t_ok) / static_cast<double>(t_total) : 0.0;
  return a;
}

}  // namespace

void aggregate_outcomes(DebugReport& report, std::span<const std::string> strategies, std::span<const double> lr_grid) {
  report.strategies.clear();
  for (const auto& name : strategies) {
    StrategyReport sr;
    sr.strategy = name;
    double best = -std::numeric_limits<double>::infinity();
    for (double lr : lr_grid) {
      std::vector<double> t, o;
      std::vector<DebugOutcome> rows;
      for (const auto& row : report.outcomes) {
        if (row.strategy != name || row.lr != lr) continue;
        rows.push_back(row);
        t.push_back(row.targeted_delta);
        o.push_back(row.overall_delta);
      }
      const Summary ts = summarize(t), os = summarize(o);
      sr.targeted_by_lr.emplace_back(lr, ts);
      if (ts.mean > best) {
        best = ts.mean;
        sr.lr = lr;
        sr.targeted = ts;
        sr.overall = os;
        sr.rows = std::move(rows);
      }
    }
    report.strategies.push_back(std::move(sr));
  }
}

DebugReport debug_experiment(const Model& model, const Dataset& pool, const Dataset& test,
                             std::span<const StrategySpec> strategies, const DebugConfig& cfg) {
  if (test.empty()) throw Error(ErrorCode::kEmptyDataset, "debug experiment needs test points");
  if (cfg.lr_grid.empty() || cfg.num_seeds == 0) throw Error(ErrorCode::kInvalidArgument, "empty lr grid or seed list");
  const UnlabeledPool unlabeled(pool);

  std::vector<std::uint8_t> targeted(test.size(), 0);
  const auto base_pred = model.predict_labels(test);
  for (std::size_t i = 0; i < test.size(); ++i) {
    targeted[i] = test.points[i].meta.bug_affected || (cfg.predicted_class && base_pred[i] == *cfg.predicted_class);
  }
  DebugReport report;
  report.targeted_count = static_cast<std::size_t>(std::count(targeted.begin(), targeted.end(), std::uint8_t{1}));
  const Accuracies base = evaluate(model, test, targeted);
  report.baseline_targeted = base.targeted;
  report.baseline_overall = base.overall;

  // One job per (strategy, seed); each owns its model copy.
  struct Job {
    std::size_t strategy;
    std::size_t seed_index;
    std::vector<DebugOutcome> per_lr;
  };
  std::vector<Job> jobs;
  for (std::size_t s = 0; s < strategies.size(); ++s) {
    for (std::size_t k = 0; k < cfg.num_seeds; ++k) jobs.push_back({s, k, {}});
  }
  auto run = [&](Job& job) {
    const StrategySpec& spec = strategies[job.strategy];
    const std::uint64_t seed = cfg.base_seed + job.seed_index;
    const auto selected = select_active(spec.strategy, model, unlabeled, cfg.n, spec.features, seed);
    std::vector<Datapoint> chosen;
    chosen.reserve(selected.size());
    for (std::size_t i : selected) chosen.push_back(pool.points[i]);
    for (double lr : cfg.lr_grid) {
      DebugOutcome o;
      o.strategy = spec.name;
      o.n = selected.size();
      o.selected = selected;
      o.seed = seed;
      o.lr = lr;
      if (!chosen.empty()) {
        const Model tuned = fine_tune_last_layer(model, chosen, cfg.epochs, lr, seed, cfg.batch, cfg.optimizer);
        const Accuracies after = evaluate(tuned, test, targeted);
        o.targeted_delta = after.targeted - base.targeted;
        o.overall_delta = after.overall - base.overall;
      }
      job.per_lr.push_back(std::move(o));
    }
  };
  std::size_t threads = cfg.threads ? cfg.threads : std::max(1u, std::thread::hardware_concurrency());
  threads = std::min(threads, jobs.size());
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  std::vector<std::thread> pool_threads;
  for (std::size_t t = 0; t < threads; ++t) {
    pool_threads.emplace_back([&] {
      for (std::size_t j; (j = next.fetch_add(1)) < jobs.size();) {
        try {
          run(jobs[j]);
        } catch (...) {
          std::lock_guard lock(failure_mutex);
          if (!failure) failure = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool_threads) t.join();
  if (failure) std::rethrow_exception(failure);

  for (const auto& job : jobs) report.outcomes.insert(report.outcomes.end(), job.per_lr.begin(), job.per_lr.end());
  std::vector<std::string> names;
  for (const auto& spec : strategies) names.push_back(spec.name);
  aggregate_outcomes(report, names, cfg.lr_grid);
  return report;
}

DebugBenchmark make_debug_benchmark(const BenchmarkConfig& cfg) {
  const SyntheticSpec& spec = cfg.spec;
  DebugBenchmark b{make_synthetic_dataset(spec, spec.n_train, spec.n_val, spec.n_test, cfg.seed), {}, {}, Model{}, {}, {}};
  const std::size_t half = b.data.val.size() / 2;
  b.probe_split = Dataset{spec.schema, {b.data.val.points.begin(), b.data.val.points.begin() + static_cast<std::ptrdiff_t>(half)}};
  b.pool = Dataset{spec.schema, {b.data.val.points.begin() + static_cast<std::ptrdiff_t>(half), b.data.val.points.end()}};
  ModelConfig mc = cfg.model;
  mc.seed = cfg.seed;
  TrainConfig tc = cfg.train;
  tc.seed = cfg.seed;
  b.model = train_model(mc, b.data.train, nullptr, tc).model;
  const FeatureMatrix fm = extract_features(b.model, b.probe_split, kPenultimate, "probe");
  b.probe = fit_error_probe(fm, error_flags(fm));
  std::vector<std::size_t> idx(fm.cols);
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(),
                   [&](std::size_t x, std::size_t y) { return std::abs(b.probe.weights[x]) < std::abs(b.probe.weights[y]); });
  b.non_error_features = std::move(idx);
  return b;
}

std::vector<StrategySpec> standard_strategies(const DebugBenchmark& b) {
  std::vector<StrategySpec> out{{"random", Strategy::kRandom, {}}, {"uncertainty", Strategy::kUncertainty, {}}};
  const auto& top = b.probe.top_features;
  if (top.size() >= 2) out.push_back({"feature_targeted_2", Strategy::kFeatureTargeted, {top[0], top[1]}});
  if (!top.empty()) out.push_back({"feature_targeted_1", Strategy::kFeatureTargeted, {top[0]}});
  std::vector<std::size_t> non_error;
  for (std::size_t j : b.non_error_features) {
    if (std::find(top.begin(), top.end(), j) == top.end() && non_error.size() < 2) non_error.push_back(j);
  }
  out.push_back({"feature_targeted_non_error", Strategy::kFeatureTargeted, non_error});
  return out;
}

bool strategy_matches(std::string_view name, std::span<const std::string> only) {
  if (only.empty()) return true;
  for (const auto& o : only) {
    if (name == o || (name.size() > o.size() && name.starts_with(o) && name[o.size()] == '_')) return true;
  }
  return false;
}

void check_strategy_names(std::span<const std::string> only) {
  static const std::vector<std::string> known{"random", "uncertainty", "feature_targeted_2", "feature_targeted_1",
                                              "feature_targeted_non_error"};
  for (const auto& o : only) {
    if (std::none_of(known.begin(), known.end(), [&](const std::string& k) { return strategy_matches(k, {&o, 1}); })) {
      throw Error(ErrorCode::kInvalidArgument, "unknown strategy '" + o + "'");
    }
  }
}

DebugReport run_debug_benchmark(const BenchmarkConfig& base, std::size_t num_seeds, const DebugConfig& cfg,
                                std::span<const std::string> only) {
  if (num_seeds == 0) throw Error(ErrorCode::kInvalidArgument, "need at least one seed");
  check_strategy_names(only);
  DebugReport total;
  std::vector<std::string> names;
  for (std::size_t k = 0; k < num_seeds; ++k) {
    BenchmarkConfig bc = base;
    bc.seed = base.seed + k;
    const DebugBenchmark b = make_debug_benchmark(bc);
    std::vector<StrategySpec> strategies;
    for (auto& s : standard_strategies(b)) {
      if (strategy_matches(s.name, only)) strategies.push_back(std::move(s));
    }
    if (k == 0) {
      for (const auto& s : strategies) names.push_back(s.name);
    }
    DebugConfig dc = cfg;
    dc.num_seeds = 1;
    dc.base_seed = bc.seed;
    const DebugReport r = debug_experiment(b.model, b.pool, b.data.test, strategies, dc);
    total.baseline_targeted += r.baseline_targeted / static_cast<double>(num_seeds);
    total.baseline_overall += r.baseline_overall / static_cast<double>(num_seeds);
    total.targeted_count += r.targeted_count;
    total.outcomes.insert(total.outcomes.end(), r.outcomes.begin(), r.outcomes.end());
  }
  aggregate_outcomes(total, names, cfg.lr_grid);
  return total;
}

}  // namespace mviz
