#include <Eigen/Dense>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "doctest.h"
#include "mviz/error.hpp"
#include "mviz/prediction.hpp"
#include "support/fixtures.hpp"

using namespace mviz;
using namespace mviz::testing;

namespace {

FeatureMatrix random_matrix_fm(std::size_t n, std::size_t d, std::size_t classes, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  FeatureMatrix fm;
  fm.rows = n;
  fm.cols = d;
  fm.num_classes = classes;
  std::vector<double> w(d * classes);
  for (double& v : w) v = g(rng);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> s(classes, 0.0);
    for (std::size_t j = 0; j < d; ++j) {
      const double x = g(rng) * (1.0 + static_cast<double>(j)) + 0.5 * static_cast<double>(j);
      fm.values.push_back(x);
      for (std::size_t c = 0; c < classes; ++c) s[c] += w[j * classes + c] * x / (1.0 + static_cast<double>(j));
    }
    for (double& v : s) v += 0.5 * g(rng);
    fm.labels.push_back(argmax_lowest(s));
  }
  fm.predictions = fm.labels;
  fm.update_moments();
  return fm;
}

FeatureMatrix trained_features(std::uint64_t seed) {
  const auto spec = interaction_task_spec();
  const auto data = make_synthetic_dataset(spec, 2000, 600, 1, seed);
  ModelConfig mc;
  mc.seed = seed;
  TrainConfig tc;
  tc.epochs = 10;
  const Model m = train_model(mc, data.train, nullptr, tc).model;
  return extract_features(m, data.val, kPenultimate, "val");
}

}  // namespace

TEST_CASE("single feature closed form") {
  const std::vector<double> z{1, -1}, y{1, -1};
  const auto fit = elastic_net(z, 2, 1, y, 0.5, 0.25);
  CHECK(fit.converged);
  CHECK(fit.coef[0] == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  CHECK(fit.intercept == 0.0);
  // Dense grid minimisation of the scalar objective.
  auto obj = [](double b) { return (0.25) * ((1 - b) * (1 - b) + (-1 + b) * (-1 + b)) + 0.5 * std::abs(b) + 0.25 * b * b; };
  double best = 0.0, best_val = obj(0.0);
  for (int k = -200000; k <= 200000; ++k) {
    const double b = k * 1e-5;
    if (obj(b) < best_val) {
      best_val = obj(b);
      best = b;
    }
  }
  CHECK(std::abs(best - fit.coef[0]) <= 1e-5);
}

TEST_CASE("unpenalized fit matches least squares") {
  const FeatureMatrix fm = random_matrix_fm(60, 5, 3, 2);
  const auto s = fit_sparse_linear(fm, 0.0, 0.0);
  for (bool nc : s.stats.not_converged) CHECK_FALSE(nc);
  Eigen::MatrixXd a(fm.rows, fm.cols + 1);
  for (std::size_t i = 0; i < fm.rows; ++i) {
    a(static_cast<Eigen::Index>(i), 0) = 1.0;
    for (std::size_t j = 0; j < fm.cols; ++j) a(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j + 1)) = fm.at(i, j);
  }
  for (std::size_t c = 0; c < 3; ++c) {
    Eigen::VectorXd y(fm.rows);
    for (std::size_t i = 0; i < fm.rows; ++i) y(static_cast<Eigen::Index>(i)) = fm.labels[i] == c ? 1.0 : 0.0;
    const Eigen::VectorXd sol = (a.transpose() * a).ldlt().solve(a.transpose() * y);
    CHECK(std::abs(s.beta0[c] - sol(0)) <= 1e-6);
    for (std::size_t j = 0; j < fm.cols; ++j) CHECK(std::abs(s.coef(j, c) - sol(static_cast<Eigen::Index>(j + 1))) <= 1e-6);
  }
}

TEST_CASE("lambda above the KKT threshold zeroes every coefficient") {
  const FeatureMatrix fm = random_matrix_fm(80, 6, 3, 5);
  const double lmax = lambda1_max(fm);
  const auto s = fit_sparse_linear(fm, lmax * 1.0001, 0.001);
  for (double b : s.beta) CHECK(b == 0.0);
  CHECK(s.stats.sparsity == 1.0);
  CHECK(top_features(s, 0).empty());
  const auto below = fit_sparse_linear(fm, lmax * 0.9, 0.001);
  CHECK(below.stats.sparsity < 1.0);
}

TEST_CASE("KKT conditions and monotone objective") {
  const FeatureMatrix fm = trained_features(3);
  for (double l1 : {0.0, 0.001, 0.01, 0.05}) {
    const auto s = fit_sparse_linear(fm, l1, 0.001);
    for (bool nc : s.stats.not_converged) CHECK_FALSE(nc);
    CHECK(kkt_violation(fm, s) <= 1e-6);
  }
  const auto defaults = fit_sparse_linear(fm);
  MESSAGE("default sparsity " << defaults.stats.sparsity << " accuracy " << defaults.stats.accuracy << " agreement "
                              << defaults.stats.agreement);
  CHECK(kkt_violation(fm, defaults) <= 1e-6);

  ElasticNetOptions opt;
  opt.record_objective = true;
  std::vector<double> y(fm.rows);
  for (std::size_t i = 0; i < fm.rows; ++i) y[i] = fm.labels[i] == 1 ? 1.0 : 0.0;
  const auto fit = elastic_net(fm.values, fm.rows, fm.cols, y, 0.01, 0.001, opt);
  REQUIRE(fit.objective.size() >= 2);
  for (std::size_t k = 1; k < fit.objective.size(); ++k) CHECK(fit.objective[k] <= fit.objective[k - 1] + 1e-15);
}

TEST_CASE("regularization path") {
  const FeatureMatrix fm = trained_features(4);
  const double lmax = lambda1_max(fm);
  std::vector<double> grid;
  for (double f = 1.2; f > 1e-3; f *= 0.6) grid.push_back(lmax * f);
  const auto path = regularization_path(fm, grid, 0.001);
  REQUIRE(path.size() == grid.size());
  CHECK(path.front().sparsity == 1.0);
  for (std::size_t i = 1; i < path.size(); ++i) {
    // lambda shrinks along the grid
    CHECK(path[i].sparsity <= path[i - 1].sparsity);
    CHECK(path[i - 1].accuracy <= path[i].accuracy + 0.02);
  }
  for (std::size_t i : {std::size_t{0}, path.size() - 1}) {
    const auto single = fit_sparse_linear(fm, grid[i], 0.001);
    CHECK(single.stats.sparsity == path[i].sparsity);
    CHECK(single.stats.accuracy == doctest::Approx(path[i].accuracy).epsilon(1e-12));
  }
  const std::vector<double> ascending{0.01, 0.1};
  CHECK_THROWS_AS(regularization_path(fm, ascending), Error);
}

TEST_CASE("top features") {
  SparseLinearSurrogate s;
  s.num_features = 4;
  s.num_classes = 1;
  s.beta = {0, 0.9, -0.3, 0.5};
  auto top = top_features(s, 0, 2);
  REQUIRE(top.size() == 2);
  CHECK(top[0] == RankedFeature{1, 0.9});
  CHECK(top[1] == RankedFeature{3, 0.5});
  s.beta = {0.5, 0, 0.5, -1};
  top = top_features(s, 0, 5);
  REQUIRE(top.size() == 3);
  CHECK(top[0].feature == 0);
  CHECK(top[1].feature == 2);
  CHECK(top[2].feature == 3);
  s.beta = {0, 0, 0, 0};
  CHECK(top_features(s, 0).empty());
  CHECK_THROWS_AS(top_features(s, 1), Error);
}

TEST_CASE("feature ranking survives rescaling every feature") {
  FeatureMatrix fm = random_matrix_fm(100, 6, 3, 8);
  const auto s = fit_sparse_linear(fm, 0.02, 0.001);
  FeatureMatrix scaled = fm;
  for (double& v : scaled.values) v *= 7.5;
  scaled.update_moments();
  const auto t = fit_sparse_linear(scaled, 0.02, 0.001);
  for (std::size_t c = 0; c < 3; ++c) {
    const auto a = top_features(s, c, 6), b = top_features(t, c, 6);
    REQUIRE(a.size() == b.size());
    for (std::size_t k = 0; k < a.size(); ++k) CHECK(a[k].feature == b[k].feature);
  }
}

TEST_CASE("constant columns are dropped and flagged") {
  FeatureMatrix fm = random_matrix_fm(50, 3, 2, 1);
  for (std::size_t i = 0; i < fm.rows; ++i) fm.values[i * 3 + 1] = 4.0;
  fm.update_moments();
  const auto s = fit_sparse_linear(fm, 0.0, 0.0);
  CHECK(s.stats.constant_columns == std::vector<std::size_t>{1});
  CHECK(s.coef(1, 0) == 0.0);
  CHECK(s.coef(1, 1) == 0.0);
}

TEST_CASE("sweep budget exhaustion is flagged") {
  const FeatureMatrix fm = random_matrix_fm(50, 5, 2, 3);
  ElasticNetOptions opt;
  opt.max_sweeps = 1;
  const auto s = fit_sparse_linear(fm, 0.0, 0.0, opt);
  CHECK(s.stats.not_converged[0]);
  CHECK_THROWS_AS(fit_sparse_linear(fm, -1.0, 0.0), Error);
}

TEST_CASE("stored coefficients reproduce the fit statistics") {
  const FeatureMatrix fm = random_matrix_fm(120, 6, 3, 11);
  const auto s = fit_sparse_linear(fm, 0.01, 0.001);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < fm.rows; ++i) {
    std::vector<double> sc(3);
    for (std::size_t c = 0; c < 3; ++c) {
      sc[c] = s.beta0[c];
      for (std::size_t j = 0; j < 6; ++j) sc[c] += fm.at(i, j) * s.coef(j, c);
    }
    correct += argmax_lowest(sc) == fm.labels[i] ? 1 : 0;
  }
  CHECK(std::abs(static_cast<double>(correct) / 120.0 - s.stats.accuracy) <= 1e-9);
  CHECK(s.stats.agreement == s.stats.accuracy);  // predictions equal labels here

  const auto back = surrogate_from_json(to_json(s));
  CHECK(back == s);
  const auto j = to_json(s);
  CHECK(j.at("beta").size() == 6);
  CHECK(j.at("beta")[0].size() == 3);
}

TEST_CASE("feature extraction") {
  const auto schema = scalar_schema(2, 3);
  const Tensor w0 = Tensor::matrix({{1, 0, 2}, {0, -1, 0.5}});
  const Tensor w1 = Tensor::matrix({{0.3, 0.2, 0.1}, {1, 1, 1}});
  const Tensor ws[] = {w0, w1};
  const Model m = Model::bilinear(schema, ws);
  std::mt19937_64 rng(1);
  Dataset ds;
  ds.schema = schema;
  for (int i = 0; i < 700; ++i) {
    ds.points.push_back(random_point(schema, rng));
    ds.points.back().label = static_cast<std::size_t>(i % 2);
  }
  const FeatureMatrix fm = extract_features(m, ds, kPenultimate, "val");
  CHECK(fm.rows == 700);
  CHECK(fm.cols == 2);
  for (std::size_t i = 0; i < fm.rows; ++i) {
    const Tensor logits = m.forward(ds.points[i]);
    CHECK(fm.at(i, 0) == logits[0]);
    CHECK(fm.at(i, 1) == logits[1]);
    CHECK(fm.labels[i] == ds.points[i].label);
    CHECK(fm.predictions[i] == m.predict_label(ds.points[i]));
  }
  const auto file = std::filesystem::temp_directory_path() / "mviz_fm_test.bin";
  write_feature_matrix(fm, file);
  const FeatureMatrix back = read_feature_matrix(file);
  CHECK(back == fm);
  {
    std::ofstream out(file, std::ios::binary | std::ios::trunc);
    out << "garbage";
  }
  CHECK_THROWS_AS(read_feature_matrix(file), Error);
  std::filesystem::remove(file);

  auto code_of = [&](auto&& fn) {
    try {
      fn();
    } catch (const Error& e) {
      return e.code();
    }
    return ErrorCode::kNotFound;
  };
  CHECK(code_of([&] { (void)extract_features(m, ds, "hidden"); }) == ErrorCode::kUnknownLayer);
  CHECK(code_of([&] { (void)extract_features(m, Dataset{schema, {}}); }) == ErrorCode::kEmptyDataset);
}
