// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any
// criterion fails. Oracles are computed here, independently of the library.

#include <Eigen/Dense>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "mviz/canonical.hpp"
#include "mviz/pipeline.hpp"
#include "mviz/sanity.hpp"
#include "support/fixtures.hpp"
#include "support/random_graphs.hpp"

using namespace mviz;
using namespace mviz::testing;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

const AttributionTarget kClass0 = AttributionTarget::class_logit(0);

double target_at(const Model& m, const Datapoint& dp, const AttributionTarget& t) {
  return evaluate_target(m, stack_inputs(m.schema(), std::span<const Datapoint>(&dp, 1)), t)[0];
}

// ---------------------------------------------------------------------------

Outcome autodiff_correctness() {
  double worst = 0.0;
  std::size_t graphs = 0;
  for (std::uint64_t seed = 0; seed < 120; ++seed, ++graphs) {
    const auto rg = make_random_graph(seed);
    for (const char* slot : {"a", "b"}) {
      worst = std::max(worst, ad::finite_difference_report(rg.graph, rg.bindings, slot, 1e-5).max_rel_error);
    }
    const std::size_t idx[] = {0, 1};
    worst = std::max(worst,
                     ad::second_order_finite_difference_report(rg.graph, rg.bindings, "a", idx, "b", 1e-5).max_rel_error);
    const std::size_t first[] = {0};
    worst = std::max(
        worst, ad::second_order_finite_difference_report(rg.graph, rg.bindings, "b", first, "a", 1e-5).max_rel_error);
  }
  return {worst < 1e-6, fmt("%zu graphs, max relative error %.2e (limit 1e-6)", graphs, worst)};
}

Outcome soundness_completeness() {
  const auto schema = interaction_task_spec().schema;
  std::mt19937_64 rng(17);
  std::size_t nonzero = 0, maps = 0;
  double energy = 0.0;
  for (Architecture arch : {Architecture::kAdditive, Architecture::kLateFusion}) {
    const Model m = random_model(schema, arch, 5);
    std::vector<Datapoint> pts;
    for (int i = 0; i < 100; ++i) pts.push_back(random_point(schema, rng));
    for (const auto& dp : pts) {
      for (const auto& [q, r] : {std::pair{"text", "image"}, std::pair{"image", "text"}}) {
        const std::size_t atoms = schema.modality(q).atom_count;
        for (std::size_t a = 0; a < atoms; ++a) {
          for (auto mode : {InteractionMode::kSigned, InteractionMode::kAbsolute}) {
            const auto map = cm_second_order(m, dp, {q, {a}}, r, kClass0, mode);
            ++maps;
            for (double w : map.weights) nonzero += w != 0.0;
          }
        }
      }
    }
    for (std::size_t c = 0; c < schema.num_classes; ++c) {
      energy = std::max(energy, emap_interaction_energy(m, pts, AttributionTarget::class_logit(c)));
    }
  }
  // bilinear f = a^T W b: query atom i reads row i, all atoms read column sums
  const auto bschema = scalar_schema(3, 4);
  const Tensor w = random_matrix(rng, 3, 4, 2.0);
  const Model bil = Model::bilinear(bschema, std::span<const Tensor>(&w, 1));
  double err = 0.0;
  for (int t = 0; t < 20; ++t) {
    const Datapoint dp = random_point(bschema, rng);
    for (std::size_t i = 0; i < 3; ++i) {
      const auto row = cm_second_order(bil, dp, {"a", {i}}, "b", kClass0, InteractionMode::kSigned);
      for (std::size_t j = 0; j < 4; ++j) err = std::max(err, std::abs(row.weights[j] - w.at(i, j)));
    }
    const auto all = cm_second_order(bil, dp, {"a", {0, 1, 2}}, "b", kClass0, InteractionMode::kSigned);
    for (std::size_t j = 0; j < 4; ++j) {
      err = std::max(err, std::abs(all.weights[j] - (w.at(0, j) + w.at(1, j) + w.at(2, j))));
    }
  }
  const bool pass = nonzero == 0 && energy <= 1e-18 && err <= 1e-9;
  return {pass, fmt("additive: %zu nonzero weights in %zu maps, max EMAP energy %.1e; bilinear max error %.1e", nonzero,
                    maps, energy, err)};
}

// g12 over every recombination of a scalar-pair sample.
std::vector<double> brute_g12(const std::vector<std::pair<double, double>>& pts,
                              const std::function<double(double, double)>& f) {
  const double n = static_cast<double>(pts.size());
  double both = 0.0;
  for (const auto& p : pts)
    for (const auto& q : pts) both += f(p.first, q.second);
  both /= n * n;
  std::vector<double> out;
  for (const auto& [a, b] : pts) {
    double e1 = 0.0, e2 = 0.0;
    for (const auto& s : pts) {
      e1 += f(s.first, b);
      e2 += f(a, s.second);
    }
    out.push_back(f(a, b) - e1 / n - e2 / n + both);
  }
  return out;
}

Outcome emap_algebra() {
  std::vector<Datapoint> sample;
  std::vector<std::pair<double, double>> pts;
  for (double a : {-1.0, 1.0}) {
    for (double b : {-1.0, 1.0}) {
      sample.push_back(scalar_point({a}, {b}));
      pts.emplace_back(a, b);
    }
  }
  const auto schema = scalar_schema(1, 1);
  const Model product = scalar_model(schema, [](ad::Graph& g, ad::Node a, ad::Node b) { return g.mul(a, b); });
  const Model mixed =
      scalar_model(schema, [](ad::Graph& g, ad::Node a, ad::Node b) { return g.add(g.add(a, b), g.mul(a, b)); });
  const double e_product = emap_interaction_energy(product, sample, kClass0);
  const auto est = emap_decompose(mixed, sample, kClass0);
  const auto oracle = brute_g12(pts, [](double a, double b) { return a + b + a * b; });
  double err = 0.0;
  for (std::size_t i = 0; i < 4; ++i) {
    err = std::max(err, std::abs(est.g12[i] - oracle[i]));
    err = std::max(err, std::abs(est.g12[i] - pts[i].first * pts[i].second));
  }
  const bool pass = std::abs(e_product - 1.0) <= 1e-9 && err <= 1e-9;
  return {pass, fmt("pure product energy %.12f; mixed g12 vs x1*x2 and brute force max error %.1e", e_product, err)};
}

Outcome planted_alignment() {
  const auto spec = interaction_task_spec();
  const SplitSet data = make_synthetic_dataset(spec, spec.n_train, spec.n_val, spec.n_test, 0);
  ModelConfig mc;
  TrainConfig tc;
  const Model fusion = train_model(mc, data.train, nullptr, tc).model;
  mc.architecture = Architecture::kAdditive;
  const Model additive = train_model(mc, data.train, nullptr, tc).model;
  ModelConfig rc;
  rc.seed = 99;
  const Model random_init = Model::create(spec.schema, rc);
  AlignmentConfig ac;
  ac.max_queries = 200;
  const double t = alignment_accuracy(fusion, data.test, ac).top2_hit_rate;
  const double a = alignment_accuracy(additive, data.test, ac).top2_hit_rate;
  const double r = alignment_accuracy(random_init, data.test, ac).top2_hit_rate;
  std::size_t regions = spec.schema.regions.begin()->second.size();
  const double chance = 2.0 / static_cast<double>(regions);
  const bool pass = t >= 0.8 && t - a >= 0.3 && std::abs(r - chance) <= 0.1;
  return {pass, fmt("top-2 hit rate over 200 queries: trained %.3f, additive %.3f, random init %.3f (chance %.3f)", t, a,
                    r, chance)};
}

// KKT residual of the standardized elastic net, recomputed from raw values.
double kkt_oracle(const FeatureMatrix& fm, const SparseLinearSurrogate& s) {
  const std::size_t n = fm.rows, d = fm.cols, C = fm.num_classes;
  std::vector<double> mean(d, 0.0), sd(d, 0.0);
  for (std::size_t j = 0; j < d; ++j) {
    for (std::size_t i = 0; i < n; ++i) mean[j] += fm.at(i, j);
    mean[j] /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) sd[j] += (fm.at(i, j) - mean[j]) * (fm.at(i, j) - mean[j]);
    sd[j] = std::sqrt(sd[j] / static_cast<double>(n));
  }
  double worst = 0.0;
  for (std::size_t c = 0; c < C; ++c) {
    std::vector<double> r(n);
    for (std::size_t i = 0; i < n; ++i) {
      double pred = s.beta0[c];
      for (std::size_t j = 0; j < d; ++j) pred += fm.at(i, j) * s.coef(j, c);
      r[i] = (fm.labels[i] == c ? 1.0 : 0.0) - pred;
    }
    for (std::size_t j = 0; j < d; ++j) {
      if (sd[j] == 0.0) continue;
      double g = 0.0;
      for (std::size_t i = 0; i < n; ++i) g += (fm.at(i, j) - mean[j]) / sd[j] * r[i];
      const double b = s.coef(j, c) * sd[j];
      g = g / static_cast<double>(n) - 2.0 * s.lambda2 * b;
      worst = std::max(worst, b != 0.0 ? std::abs(g - s.lambda1 * (b > 0 ? 1.0 : -1.0)) : std::max(0.0, std::abs(g) - s.lambda1));
    }
  }
  return worst;
}

Outcome solver() {
  const auto spec = interaction_task_spec();
  const auto data = make_synthetic_dataset(spec, 2000, 600, 1, 3);
  ModelConfig mc;
  TrainConfig tc;
  tc.epochs = 10;
  const Model m = train_model(mc, data.train, nullptr, tc).model;
  const FeatureMatrix fm = extract_features(m, data.val, kPenultimate, "val");

  double kkt = 0.0;
  for (double l1 : {0.001, 0.01, 0.05}) kkt = std::max(kkt, kkt_oracle(fm, fit_sparse_linear(fm, l1, 0.001)));

  // lambda = 0 against least squares with intercept; penultimate columns are
  // strongly correlated, so the solver runs to a tighter tolerance here
  ElasticNetOptions tight;
  tight.tol = 1e-10;
  tight.max_sweeps = 200000;
  const auto ls = fit_sparse_linear(fm, 0.0, 0.0, tight);
  Eigen::MatrixXd a(fm.rows, fm.cols + 1);
  for (std::size_t i = 0; i < fm.rows; ++i) {
    a(static_cast<Eigen::Index>(i), 0) = 1.0;
    for (std::size_t j = 0; j < fm.cols; ++j) a(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j + 1)) = fm.at(i, j);
  }
  double ls_err = 0.0;
  for (std::size_t c = 0; c < fm.num_classes; ++c) {
    Eigen::VectorXd y(fm.rows);
    for (std::size_t i = 0; i < fm.rows; ++i) y(static_cast<Eigen::Index>(i)) = fm.labels[i] == c ? 1.0 : 0.0;
    const Eigen::VectorXd sol = a.colPivHouseholderQr().solve(y);
    ls_err = std::max(ls_err, std::abs(ls.beta0[c] - sol(0)));
    for (std::size_t j = 0; j < fm.cols; ++j) {
      ls_err = std::max(ls_err, std::abs(ls.coef(j, c) - sol(static_cast<Eigen::Index>(j + 1))));
    }
  }

  // z = (1, -1), y = (1, -1), lambda1 = 1/2, lambda2 = 1/4:
  // minimize (1/4)(2(1-b)^2) + b/2 + b^2/4 gives b = 1/3
  const std::vector<double> z{1, -1}, yv{1, -1};
  const double closed = elastic_net(z, 2, 1, yv, 0.5, 0.25).coef[0];

  const double lmax = lambda1_max(fm);
  std::vector<double> grid;
  for (double f = 1.2; f > 1e-3; f *= 0.6) grid.push_back(lmax * f);
  const auto path = regularization_path(fm, grid, 0.001);
  bool monotone = true;
  for (std::size_t i = 1; i < path.size(); ++i) monotone = monotone && path[i].sparsity <= path[i - 1].sparsity;

  const bool pass = kkt <= 1e-6 && ls_err <= 1e-6 && std::abs(closed - 1.0 / 3.0) <= 1e-9 && monotone;
  return {pass, fmt("KKT residual %.1e, least-squares error %.1e, closed form %.17g, sparsity monotone over %zu lambdas: %s",
                    kkt, ls_err, closed, path.size(), monotone ? "yes" : "no")};
}

std::vector<double> brute_shapley(std::size_t n, const std::function<double(std::uint32_t)>& v) {
  std::vector<double> phi(n, 0.0);
  auto fact = [](std::size_t k) {
    double r = 1;
    for (std::size_t i = 2; i <= k; ++i) r *= static_cast<double>(i);
    return r;
  };
  for (std::size_t i = 0; i < n; ++i) {
    for (std::uint32_t s = 0; s < (1U << n); ++s) {
      if (s & (1U << i)) continue;
      const std::size_t size = static_cast<std::size_t>(__builtin_popcount(s));
      phi[i] += fact(size) * fact(n - size - 1) / fact(n) * (v(s | (1U << i)) - v(s));
    }
  }
  return phi;
}

Datapoint mask_point(const Datapoint& dp, const std::string& modality, std::uint32_t keep, const Tensor& baseline) {
  Datapoint out = dp;
  Tensor& x = out.modalities.at(modality);
  for (std::size_t a = 0; a < x.rows(); ++a) {
    if (keep & (1U << a)) continue;
    for (std::size_t k = 0; k < x.cols(); ++k) x.at(a, k) = baseline.at(a, k);
  }
  return out;
}

Outcome shapley_lime_oracles() {
  const auto spec = interaction_task_spec();
  std::mt19937_64 rng(5);
  double efficiency = 0.0, brute = 0.0;
  for (Architecture arch : {Architecture::kMlpFusion, Architecture::kLateFusion}) {
    const Model m = random_model(spec.schema, arch, 12);
    for (int t = 0; t < 5; ++t) {
      const Datapoint dp = random_point(spec.schema, rng);
      ShapleyConfig cfg;
      cfg.baseline_values = Tensor::filled({6, 2}, 0.1);
      const Tensor& base = *cfg.baseline_values;
      const auto map = uni_shapley(m, dp, "image", kClass0, cfg);
      const double total = std::accumulate(map.weights.begin(), map.weights.end(), 0.0);
      efficiency = std::max(efficiency, std::abs(total - (target_at(m, dp, kClass0) -
                                                          target_at(m, mask_point(dp, "image", 0, base), kClass0))));
      const auto oracle =
          brute_shapley(6, [&](std::uint32_t s) { return target_at(m, mask_point(dp, "image", s, base), kClass0); });
      for (std::size_t i = 0; i < 6; ++i) brute = std::max(brute, std::abs(map.weights[i] - oracle[i]));
    }
  }
  // atoms 0 and 1 symmetric, atom 3 a null player
  const auto schema4 = scalar_schema(4, 1);
  const Model sym = scalar_model(schema4, [](ad::Graph& g, ad::Node a, ad::Node) {
    const ad::Node s = weighted_sum(g, a, {1, 1, 0.5, 0});
    return g.tanh(g.mul(s, s));
  });
  ShapleyConfig zero;
  zero.baseline = BaselineKind::kZero;
  const auto sm = uni_shapley(sym, scalar_point({0.7, 0.7, -0.2, 0.9}, {0}), "a", kClass0, zero);
  const double symmetry = std::abs(sm.weights[0] - sm.weights[1]);
  const double null_player = std::abs(sm.weights[3]);

  // enumerated LIME on an additive model: isolated contributions
  const Model add = scalar_model(schema4, [](ad::Graph& g, ad::Node a, ad::Node b) {
    return g.add(weighted_sum(g, g.tanh(g.mul(a, a)), {1, -2, 0.5, 3}), weighted_sum(g, b, {1}));
  });
  PerturbConfig lime;
  lime.baseline = BaselineKind::kZero;
  lime.enumerate = true;
  lime.ridge = 0.0;
  const std::vector<double> x{0.3, -0.8, 1.0, 0.6};
  const auto lm = uni_lime(add, scalar_point(x, {0.2}), "a", kClass0, lime);
  const double coef[] = {1, -2, 0.5, 3};
  double lime_err = 0.0;
  for (std::size_t i = 0; i < 4; ++i) lime_err = std::max(lime_err, std::abs(lm.weights[i] - coef[i] * std::tanh(x[i] * x[i])));

  const bool pass = efficiency <= 1e-9 && brute <= 1e-9 && symmetry <= 1e-9 && null_player <= 1e-9 && lime_err <= 1e-9;
  return {pass, fmt("Shapley efficiency %.1e, vs enumeration %.1e, symmetry %.1e, null player %.1e; LIME additive %.1e",
                    efficiency, brute, symmetry, null_player, lime_err)};
}

Outcome global_topk() {
  const auto spec = interaction_task_spec();
  const auto data = make_synthetic_dataset(spec, 300, 200, 150, 4);
  ModelConfig mc;
  mc.penultimate_dim = 10;
  mc.hidden_dim = 16;
  mc.seed = 2;
  const Model m = Model::create(spec.schema, mc);
  MethodConfig cfg;
  std::size_t runs = 0, mismatches = 0;
  for (const std::string split : {"train", "val", "test"}) {
    const Dataset& ds = data.split(split);
    for (std::size_t j = 0; j < 10; ++j) {
      std::vector<double> acts;
      for (const auto& dp : ds.points) acts.push_back(m.layer_activation(dp, kPenultimate)[j]);
      for (Direction dir : {Direction::kMax, Direction::kMin}) {
        std::vector<std::size_t> idx(acts.size());
        std::iota(idx.begin(), idx.end(), 0);
        std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
          const double x = dir == Direction::kMax ? -acts[a] : acts[a];
          const double y = dir == Direction::kMax ? -acts[b] : acts[b];
          return x < y || (x == y && a < b);
        });
        const auto g = global_representation(m, ds, {std::string(kPenultimate), j}, 5, dir, cfg, split, false);
        ++runs;
        bool same = g.top.size() == 5;
        for (std::size_t r = 0; same && r < 5; ++r) same = g.top[r].index == idx[r] && g.top[r].activation == acts[idx[r]];
        mismatches += !same;
      }
    }
  }
  return {mismatches == 0, fmt("%zu runs (10 features x 3 splits x 2 directions), %zu mismatches", runs, mismatches)};
}

std::vector<double> constant_stub(const Model&, const Datapoint&, const AttributionTarget&) {
  return std::vector<double>(6, 1.0);
}

Outcome sanity_checks() {
  const SplitSet data = make_synthetic_dataset(unimodal_task_spec(), 2000, 200, 200, 1);
  const Model m = train_model(ModelConfig{}, data.train, nullptr, TrainConfig{}).model;
  const std::span<const Datapoint> pts(data.test.points.data(), 50);
  PerturbConfig lime;
  lime.baseline = BaselineKind::kZero;
  lime.num_samples = 500;
  const AttributionFn grad = attribution_method(UnimodalMethod::kGradient);
  const AttributionFn limer = attribution_method(UnimodalMethod::kLime, lime);
  const auto mg = model_randomization_check(m, pts, grad, "gradient");
  const auto ml = model_randomization_check(m, pts, limer, "lime");
  const auto ms = model_randomization_check(m, pts, constant_stub, "stub");
  DataRandomizationConfig dc;
  const auto dg = data_randomization_check(data, dc, grad, "gradient");
  const auto dl = data_randomization_check(data, dc, limer, "lime");
  const auto ds = data_randomization_check(data, dc, constant_stub, "stub");
  const bool pass = mg.pass && ml.pass && dg.pass && dl.pass && !ms.pass && !ds.pass;
  return {pass, fmt("mean Spearman model/data: gradient %.3f/%.3f, lime %.3f/%.3f (need < 0.5); stub %.3f/%.3f (must fail)",
                    mg.correlation, dg.correlation, ml.correlation, dl.correlation, ms.correlation, ds.correlation)};
}

Outcome debugging_ordering() {
  const DebugReport r = run_debug_benchmark(BenchmarkConfig{}, 10, DebugConfig{});
  const double ft2 = r.strategy("feature_targeted_2").targeted.mean;
  const double rnd = r.strategy("random").targeted.mean;
  const double non = r.strategy("feature_targeted_non_error").targeted.mean;
  const double unc = r.strategy("uncertainty").targeted.mean;
  const bool pass = ft2 - rnd >= 0.10 && ft2 - non >= 0.08 && unc - rnd <= 0.03;
  return {pass, fmt("mean targeted delta over 10 seeds, n=200: feature_targeted(2) %.3f, random %.3f, non-error %.3f, "
                    "uncertainty %.3f",
                    ft2, rnd, non, unc)};
}

Outcome pipeline_determinism() {
  const auto spec = interaction_task_spec();
  const auto data = make_synthetic_dataset(spec, 1000, 200, 100, 6);
  ModelConfig mc;
  mc.hidden_dim = 32;
  TrainConfig tc;
  tc.epochs = 8;
  const Model m = train_model(mc, data.train, nullptr, tc).model;
  RunConfig base;
  base.lambda1 = kDefaultLambda1;
  base.lambda2 = kDefaultLambda2;
  base.k = 2;
  base.top_m = 3;

  std::size_t identical = 0, compared = 0;
  for (UnimodalMethod method : {UnimodalMethod::kGradient, UnimodalMethod::kLime, UnimodalMethod::kShapley}) {
    RunConfig cfg = base;
    cfg.methods.method = method;
    cfg.methods.lime.num_samples = 100;
    cfg.methods.shapley.num_permutations = 20;
    cfg.methods.shapley.force_sampling = true;
    cfg.emap = true;
    cfg.emap_points = 32;
    cfg.seed = 7;
    for (std::size_t i : {0, 11}) {
      const std::string a = canonical_dump(to_json(run_pipeline(m, data, "test", i, cfg)));
      const std::string b = canonical_dump(to_json(run_pipeline(m, data, "test", i, cfg)));
      ++compared;
      identical += a == b;
    }
  }

  const std::vector<std::pair<std::string, std::set<std::string>>> settings{
      {"u", {"unimodal"}},
      {"u,c", {"unimodal", "crossmodal"}},
      {"u,c,rl", {"unimodal", "crossmodal", "local"}},
      {"u,c,rl,rg", {"unimodal", "crossmodal", "local", "global"}},
      {"u,c,rl,rg,p", {"unimodal", "crossmodal", "local", "global", "prediction"}},
  };
  std::size_t exact = 0;
  for (const auto& [stages, expected] : settings) {
    RunConfig cfg = base;
    cfg.stages = parse_stages(stages);
    const nlohmann::json j = to_json(run_pipeline(m, data, "test", 3, cfg));
    std::set<std::string> present;
    for (const char* k : {"prediction", "unimodal", "crossmodal", "emap", "local", "global"}) {
      if (j.contains(k)) present.insert(k);
    }
    exact += present == expected;
  }
  const bool pass = identical == compared && exact == settings.size();
  return {pass, fmt("%zu/%zu repeated runs byte-identical; stage gating exact for %zu/%zu ablation settings", identical,
                    compared, exact, settings.size())};
}

}  // namespace

int main() {
  struct Criterion {
    const char* name;
    std::function<Outcome()> run;
    double budget_s;  // 0: no runtime limit
  };
  const std::vector<Criterion> criteria{
      {"autodiff correctness", autodiff_correctness, 30},
      {"second-order soundness and completeness", soundness_completeness, 0},
      {"EMAP algebra", emap_algebra, 0},
      {"planted-alignment recovery", planted_alignment, 600},
      {"sparse linear solver", solver, 0},
      {"Shapley and LIME oracles", shapley_lime_oracles, 0},
      {"global top-k exactness", global_topk, 0},
      {"randomization sanity checks", sanity_checks, 0},
      {"debugging ordering", debugging_ordering, 1200},
      {"pipeline determinism and stage gating", pipeline_determinism, 0},
  };
  int failures = 0;
  for (const auto& c : criteria) {
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (c.budget_s > 0 && secs > c.budget_s) {
      o.pass = false;
      o.detail += fmt("; over the %.0f s budget", c.budget_s);
    }
    failures += !o.pass;
    std::printf("%s  %s: %s [%.1f s]\n", o.pass ? "PASS" : "FAIL", c.name, o.detail.c_str(), secs);
    std::fflush(stdout);
  }
  std::printf("%d of %zu criteria failed\n", failures, criteria.size());
  return failures == 0 ? 0 : 1;
}
