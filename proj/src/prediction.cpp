#include "mviz/prediction.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

#include "mviz/canonical.hpp"
#include "mviz/error.hpp"

namespace mviz {

using nlohmann::json;

static_assert(std::endian::native == std::endian::little, "feature matrix files assume a little-endian host");

namespace {

constexpr char kMagic[8] = {'M', 'V', 'Z', 'F', 'E', 'A', 'T', '1'};

double soft_threshold(double z, double t) {
  if (z > t) return z - t;
  if (z < -t) return z + t;
  return 0.0;
}

bool is_constant(double std, double mean) { return !(std > 1e-12 * (1.0 + std::abs(mean))); }

// Standardized copy of the matrix; constant columns become zeros.
std::vector<double> standardize(const FeatureMatrix& fm, std::vector<std::size_t>* constant) {
  std::vector<double> z(fm.values.size(), 0.0);
  for (std::size_t j = 0; j < fm.cols; ++j) {
    if (is_constant(fm.column_stds[j], fm.column_means[j])) {
      if (constant) constant->push_back(j);
      continue;
    }
    for (std::size_t i = 0; i < fm.rows; ++i) {
      z[i * fm.cols + j] = (fm.at(i, j) - fm.column_means[j]) / fm.column_stds[j];
    }
  }
  return z;
}

std::vector<double> one_vs_rest(const FeatureMatrix& fm, std::size_t cls) {
  std::vector<double> y(fm.rows);
  for (std::size_t i = 0; i < fm.rows; ++i) y[i] = fm.labels[i] == cls ? 1.0 : 0.0;
  return y;
}

void write_u64(std::ostream& out, std::uint64_t v) { out.write(reinterpret_cast<const char*>(&v), sizeof v); }

std::uint64_t read_u64(std::istream& in) {
  std::uint64_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!in) throw Error(ErrorCode::kIoFailure, "truncated feature matrix file");
  return v;
}

void write_doubles(std::ostream& out, const std::vector<double>& v) {
  out.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
}

std::vector<double> read_doubles(std::istream& in, std::size_t n) {
  std::vector<double> v(n);
  in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(double)));
  if (!in) throw Error(ErrorCode::kIoFailure, "truncated feature matrix file");
  return v;
}

void fill_stats(const FeatureMatrix& fm, SparseLinearSurrogate& s) {
  std::size_t zeros = 0;
  for (double b : s.beta) zeros += b == 0.0 ? 1 : 0;
  s.stats.sparsity = s.beta.empty() ? 1.0 : static_cast<double>(zeros) / static_cast<double>(s.beta.size());
  std::size_t correct = 0, agree = 0;
  for (std::size_t i = 0; i < fm.rows; ++i) {
    const std::size_t p = s.predict(std::span<const double>(fm.values).subspan(i * fm.cols, fm.cols));
    correct += p == fm.labels[i] ? 1 : 0;
    if (!fm.predictions.empty()) agree += p == fm.predictions[i] ? 1 : 0;
  }
  const double n = static_cast<double>(fm.rows);
  s.stats.accuracy = static_cast<double>(correct) / n;
  s.stats.agreement = fm.predictions.empty() ? 0.0 : static_cast<double>(agree) / n;
}

}  // namespace

std::string FeatureMatrix::provenance_digest() const {
  return json_digest({{"model", model_digest}, {"layer", layer}, {"split", split}});
}

void FeatureMatrix::update_moments() {
  column_means.assign(cols, 0.0);
  column_stds.assign(cols, 0.0);
  if (rows == 0) return;
  const double n = static_cast<double>(rows);
  for (std::size_t j = 0; j < cols; ++j) {
    double mean = 0.0;
    for (std::size_t i = 0; i < rows; ++i) mean += at(i, j);
    mean /= n;
    double ss = 0.0;
    for (std::size_t i = 0; i < rows; ++i) ss += (at(i, j) - mean) * (at(i, j) - mean);
    column_means[j] = mean;
    column_stds[j] = std::sqrt(ss / n);
  }
}

FeatureMatrix extract_features(const Model& model, const Dataset& dataset, std::string_view layer, std::string split) {
  if (!model.has_layer(layer)) throw Error(ErrorCode::kUnknownLayer, "unknown layer '" + std::string(layer) + "'");
  if (dataset.empty()) throw Error(ErrorCode::kEmptyDataset, "cannot extract features from an empty split");
  FeatureMatrix fm;
  fm.rows = dataset.size();
  fm.num_classes = model.num_classes();
  fm.model_digest = model.digest();
  fm.layer = std::string(layer);
  fm.split = std::move(split);
  constexpr std::size_t kChunk = 512;
  const std::span<const Datapoint> all(dataset.points);
  for (std::size_t start = 0; start < all.size(); start += kChunk) {
    const auto chunk = all.subspan(start, std::min(kChunk, all.size() - start));
    const ModalityBatch batch = stack_inputs(model.schema(), chunk);
    const Tensor act = model.layer_activation_batch(batch, layer);
    const Tensor logits = model.forward_batch(batch);
    fm.cols = act.cols();
    fm.values.insert(fm.values.end(), act.values().begin(), act.values().end());
    for (std::size_t r = 0; r < chunk.size(); ++r) {
      fm.labels.push_back(chunk[r].label);
      fm.predictions.push_back(argmax_lowest(std::span<const double>(logits.values()).subspan(r * logits.cols(), logits.cols())));
    }
  }
  fm.update_moments();
  return fm;
}

void write_feature_matrix(const FeatureMatrix& fm, const std::filesystem::path& file) {
  std::ofstream out(file, std::ios::binary);
  if (!out) throw Error(ErrorCode::kIoFailure, "cannot write " + file.string());
  out.write(kMagic, sizeof kMagic);
  write_u64(out, fm.rows);
  write_u64(out, fm.cols);
  write_u64(out, fm.num_classes);
  const std::string prov =
      json{{"digest", fm.provenance_digest()}, {"model", fm.model_digest}, {"layer", fm.layer}, {"split", fm.split}}.dump();
  write_u64(out, prov.size());
  out.write(prov.data(), static_cast<std::streamsize>(prov.size()));
  write_doubles(out, fm.values);
  write_doubles(out, fm.column_means);
  write_doubles(out, fm.column_stds);
  for (std::size_t l : fm.labels) write_u64(out, l);
  write_u64(out, fm.predictions.size());
  for (std::size_t p : fm.predictions) write_u64(out, p);
  if (!out) throw Error(ErrorCode::kIoFailure, "failed writing " + file.string());
}

FeatureMatrix read_feature_matrix(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIoFailure, "cannot read " + file.string());
  char magic[sizeof kMagic];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kMagic, sizeof kMagic) != 0) {
    throw Error(ErrorCode::kIoFailure, file.string() + " is not a feature matrix file");
  }
  FeatureMatrix fm;
  fm.rows = read_u64(in);
  fm.cols = read_u64(in);
  fm.num_classes = read_u64(in);
  const std::uint64_t prov_len = read_u64(in);
  if (prov_len > (1U << 20)) throw Error(ErrorCode::kIoFailure, "corrupt provenance header");
  std::string prov(prov_len, '\0');
  in.read(prov.data(), static_cast<std::streamsize>(prov_len));
  if (!in) throw Error(ErrorCode::kIoFailure, "truncated feature matrix file");
  const json p = json::parse(prov);
  fm.model_digest = p.at("model").get<std::string>();
  fm.layer = p.at("layer").get<std::string>();
  fm.split = p.at("split").get<std::string>();
  if (p.at("digest").get<std::string>() != fm.provenance_digest()) {
    throw Error(ErrorCode::kIoFailure, "provenance digest mismatch in " + file.string());
  }
  fm.values = read_doubles(in, fm.rows * fm.cols);
  fm.column_means = read_doubles(in, fm.cols);
  fm.column_stds = read_doubles(in, fm.cols);
  fm.labels.resize(fm.rows);
  for (auto& l : fm.labels) l = read_u64(in);
  fm.predictions.resize(read_u64(in));
  for (auto& v : fm.predictions) v = read_u64(in);
  return fm;
}

ElasticNetFit elastic_net(std::span<const double> x, std::size_t n, std::size_t d, std::span<const double> y,
                          double lambda1, double lambda2, const ElasticNetOptions& options,
                          std::span<const double> warm_start) {
  if (n == 0) throw Error(ErrorCode::kInvalidArgument, "elastic net needs at least one row");
  if (x.size() != n * d || y.size() != n) throw Error(ErrorCode::kShapeMismatch, "elastic net input sizes disagree");
  if (!(lambda1 >= 0.0) || !(lambda2 >= 0.0)) throw Error(ErrorCode::kInvalidArgument, "lambdas must be nonnegative");
  if (!warm_start.empty() && warm_start.size() != d) throw Error(ErrorCode::kShapeMismatch, "warm start has wrong length");
  const double inv_n = 1.0 / static_cast<double>(n);

  // Centre columns and response; the intercept absorbs the means.
  std::vector<double> xmean(d, 0.0);
  double ymean = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    ymean += y[i];
    for (std::size_t j = 0; j < d; ++j) xmean[j] += x[i * d + j];
  }
  ymean *= inv_n;
  for (double& m : xmean) m *= inv_n;
  std::vector<double> xc(n * d);  // column-major
  std::vector<double> scale(d, 0.0);
  for (std::size_t j = 0; j < d; ++j) {
    for (std::size_t i = 0; i < n; ++i) {
      const double v = x[i * d + j] - xmean[j];
      xc[j * n + i] = v;
      scale[j] += v * v;
    }
    scale[j] *= inv_n;
  }

  ElasticNetFit fit;
  fit.coef.assign(d, 0.0);
  if (!warm_start.empty()) std::copy(warm_start.begin(), warm_start.end(), fit.coef.begin());
  std::vector<double> r(n);
  for (std::size_t i = 0; i < n; ++i) r[i] = y[i] - ymean;
  for (std::size_t j = 0; j < d; ++j) {
    if (scale[j] == 0.0) fit.coef[j] = 0.0;
    if (fit.coef[j] == 0.0) continue;
    for (std::size_t i = 0; i < n; ++i) r[i] -= xc[j * n + i] * fit.coef[j];
  }

  auto objective = [&] {
    double rss = 0.0, l1 = 0.0, l2 = 0.0;
    for (double v : r) rss += v * v;
    for (double b : fit.coef) {
      l1 += std::abs(b);
      l2 += b * b;
    }
    return 0.5 * inv_n * rss + lambda1 * l1 + lambda2 * l2;
  };
  auto column_dot = [&](std::size_t j) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += xc[j * n + i] * r[i];
    return s * inv_n;
  };
  auto kkt = [&] {
    double worst = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      if (scale[j] == 0.0) continue;
      const double g = column_dot(j) - 2.0 * lambda2 * fit.coef[j];
      const double v = fit.coef[j] != 0.0 ? std::abs(g - lambda1 * (fit.coef[j] > 0 ? 1.0 : -1.0))
                                          : std::max(0.0, std::abs(g) - lambda1);
      worst = std::max(worst, v);
    }
    return worst;
  };

  while (fit.sweeps < options.max_sweeps) {
    double max_change = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      if (scale[j] == 0.0) continue;
      const double old = fit.coef[j];
      const double rho = column_dot(j) + scale[j] * old;
      const double updated = soft_threshold(rho, lambda1) / (scale[j] + 2.0 * lambda2);
      const double delta = updated - old;
      if (delta != 0.0) {
        for (std::size_t i = 0; i < n; ++i) r[i] -= xc[j * n + i] * delta;
        fit.coef[j] = updated;
        max_change = std::max(max_change, std::abs(delta));
      }
    }
    ++fit.sweeps;
    if (options.record_objective) fit.objective.push_back(objective());
    if (max_change < options.tol && kkt() <= options.tol) {
      fit.converged = true;
      break;
    }
  }
  fit.intercept = ymean;
  for (std::size_t j = 0; j < d; ++j) fit.intercept -= xmean[j] * fit.coef[j];
  return fit;
}

std::vector<double> SparseLinearSurrogate::scores(std::span<const double> features) const {
  if (features.size() != num_features) throw Error(ErrorCode::kShapeMismatch, "feature vector has wrong length");
  std::vector<double> out(beta0);
  for (std::size_t j = 0; j < num_features; ++j) {
    if (features[j] == 0.0) continue;
    for (std::size_t c = 0; c < num_classes; ++c) out[c] += features[j] * beta[j * num_classes + c];
  }
  return out;
}

std::size_t SparseLinearSurrogate::predict(std::span<const double> features) const {
  const auto s = scores(features);
  return argmax_lowest(s);
}

SparseLinearSurrogate fit_sparse_linear(const FeatureMatrix& fm, double lambda1, double lambda2,
                                        const ElasticNetOptions& options, const SparseLinearSurrogate* warm_start) {
  if (fm.rows == 0 || fm.cols == 0) throw Error(ErrorCode::kInvalidArgument, "empty feature matrix");
  if (!(lambda1 >= 0.0) || !(lambda2 >= 0.0)) throw Error(ErrorCode::kInvalidArgument, "lambdas must be nonnegative");
  if (fm.column_means.size() != fm.cols || fm.column_stds.size() != fm.cols) {
    throw Error(ErrorCode::kInvalidArgument, "feature matrix moments are missing");
  }
  const std::size_t d = fm.cols, C = fm.num_classes;
  if (warm_start && (warm_start->num_features != d || warm_start->num_classes != C)) {
    throw Error(ErrorCode::kShapeMismatch, "warm start does not match the feature matrix");
  }
  SparseLinearSurrogate s;
  s.lambda1 = lambda1;
  s.lambda2 = lambda2;
  s.num_features = d;
  s.num_classes = C;
  s.means = fm.column_means;
  s.stds = fm.column_stds;
  s.provenance = fm.provenance_digest();
  s.beta.assign(d * C, 0.0);
  s.beta_standardized.assign(d * C, 0.0);
  s.beta0.assign(C, 0.0);
  const std::vector<double> z = standardize(fm, &s.stats.constant_columns);

  for (std::size_t c = 0; c < C; ++c) {
    const auto y = one_vs_rest(fm, c);
    std::vector<double> warm;
    if (warm_start) {
      warm.resize(d);
      for (std::size_t j = 0; j < d; ++j) warm[j] = warm_start->beta_standardized[j * C + c];
    }
    const ElasticNetFit fit = elastic_net(z, fm.rows, d, y, lambda1, lambda2, options, warm);
    s.stats.sweeps.push_back(fit.sweeps);
    s.stats.not_converged.push_back(!fit.converged);
    double intercept = fit.intercept;
    for (std::size_t j = 0; j < d; ++j) {
      const double b = fit.coef[j];
      s.beta_standardized[j * C + c] = b;
      if (b == 0.0) continue;
      const double raw = b / fm.column_stds[j];
      s.beta[j * C + c] = raw;
      intercept -= raw * fm.column_means[j];
    }
    s.beta0[c] = intercept;
  }
  fill_stats(fm, s);
  return s;
}

double lambda1_max(const FeatureMatrix& fm) {
  const std::vector<double> z = standardize(fm, nullptr);
  const double inv_n = 1.0 / static_cast<double>(fm.rows);
  double best = 0.0;
  for (std::size_t c = 0; c < fm.num_classes; ++c) {
    const auto y = one_vs_rest(fm, c);
    const double ybar = std::accumulate(y.begin(), y.end(), 0.0) * inv_n;
    for (std::size_t j = 0; j < fm.cols; ++j) {
      double g = 0.0;
      for (std::size_t i = 0; i < fm.rows; ++i) g += z[i * fm.cols + j] * (y[i] - ybar);
      best = std::max(best, std::abs(g * inv_n));
    }
  }
  return best;
}

double kkt_violation(const FeatureMatrix& fm, const SparseLinearSurrogate& s) {
  const std::vector<double> z = standardize(fm, nullptr);
  const std::size_t d = fm.cols, C = fm.num_classes;
  const double inv_n = 1.0 / static_cast<double>(fm.rows);
  double worst = 0.0;
  for (std::size_t c = 0; c < C; ++c) {
    const auto y = one_vs_rest(fm, c);
    const double ybar = std::accumulate(y.begin(), y.end(), 0.0) * inv_n;
    std::vector<double> r(fm.rows);
    for (std::size_t i = 0; i < fm.rows; ++i) {
      double pred = ybar;
      for (std::size_t j = 0; j < d; ++j) pred += z[i * d + j] * s.beta_standardized[j * C + c];
      r[i] = y[i] - pred;
    }
    for (std::size_t j = 0; j < d; ++j) {
      if (is_constant(fm.column_stds[j], fm.column_means[j])) continue;
      double g = 0.0;
      for (std::size_t i = 0; i < fm.rows; ++i) g += z[i * d + j] * r[i];
      const double b = s.beta_standardized[j * C + c];
      g = g * inv_n - 2.0 * s.lambda2 * b;
      const double v = b != 0.0 ? std::abs(g - s.lambda1 * (b > 0 ? 1.0 : -1.0)) : std::max(0.0, std::abs(g) - s.lambda1);
      worst = std::max(worst, v);
    }
  }
  return worst;
}

std::vector<PathPoint> regularization_path(const FeatureMatrix& fm, std::span<const double> lambda1_grid,
                                           double lambda2, const ElasticNetOptions& options) {
  for (std::size_t i = 1; i < lambda1_grid.size(); ++i) {
    if (lambda1_grid[i] > lambda1_grid[i - 1]) throw Error(ErrorCode::kInvalidArgument, "lambda1 grid must be descending");
  }
  std::vector<PathPoint> out;
  std::optional<SparseLinearSurrogate> prev;
  for (double l1 : lambda1_grid) {
    SparseLinearSurrogate s = fit_sparse_linear(fm, l1, lambda2, options, prev ? &*prev : nullptr);
    PathPoint p;
    p.lambda1 = l1;
    p.sparsity = s.stats.sparsity;
    p.accuracy = s.stats.accuracy;
    p.agreement = s.stats.agreement;
    p.nonzero = static_cast<std::size_t>(std::count_if(s.beta.begin(), s.beta.end(), [](double b) { return b != 0.0; }));
    out.push_back(p);
    prev = std::move(s);
  }
  return out;
}

std::vector<RankedFeature> top_features(const SparseLinearSurrogate& s, std::size_t cls, std::size_t m) {
  if (cls >= s.num_classes) throw Error(ErrorCode::kInvalidArgument, "class id out of range");
  std::vector<RankedFeature> out;
  for (std::size_t j = 0; j < s.num_features; ++j) {
    const double b = s.coef(j, cls);
    if (b != 0.0) out.push_back({j, b});
  }
  std::stable_sort(out.begin(), out.end(),
                   [](const RankedFeature& a, const RankedFeature& b) { return a.coefficient > b.coefficient; });
  if (out.size() > m) out.resize(m);
  return out;
}

json to_json(const RankedFeature& f) { return {{"feature", f.feature}, {"coefficient", f.coefficient}}; }

json to_json(const PathPoint& p) {
  return {{"lambda1", p.lambda1},
          {"sparsity", p.sparsity},
          {"accuracy", p.accuracy},
          {"agreement", p.agreement},
          {"nonzero", p.nonzero}};
}

json to_json(const SparseLinearSurrogate& s) {
  auto rows = [&](const std::vector<double>& flat) {
    json out = json::array();
    for (std::size_t j = 0; j < s.num_features; ++j) {
      out.push_back(std::vector<double>(flat.begin() + static_cast<std::ptrdiff_t>(j * s.num_classes),
                                        flat.begin() + static_cast<std::ptrdiff_t>((j + 1) * s.num_classes)));
    }
    return out;
  };
  std::vector<bool> nc = s.stats.not_converged;
  return {{"lambda1", s.lambda1},
          {"lambda2", s.lambda2},
          {"beta", rows(s.beta)},
          {"beta0", s.beta0},
          {"beta_standardized", rows(s.beta_standardized)},
          {"standardization", {{"mean", s.means}, {"std", s.stds}}},
          {"provenance", s.provenance},
          {"stats",
           {{"sparsity", s.stats.sparsity},
            {"accuracy", s.stats.accuracy},
            {"agreement", s.stats.agreement},
            {"sweeps", s.stats.sweeps},
            {"not_converged", nc},
            {"constant_columns", s.stats.constant_columns}}}};
}

SparseLinearSurrogate surrogate_from_json(const json& j) {
  SparseLinearSurrogate s;
  s.lambda1 = j.at("lambda1").get<double>();
  s.lambda2 = j.at("lambda2").get<double>();
  s.beta0 = j.at("beta0").get<std::vector<double>>();
  s.num_classes = s.beta0.size();
  const auto& beta = j.at("beta");
  s.num_features = beta.size();
  for (const auto& row : beta) {
    if (row.size() != s.num_classes) throw Error(ErrorCode::kInvalidArgument, "beta rows must have one entry per class");
    for (const auto& v : row) s.beta.push_back(v.get<double>());
  }
  for (const auto& row : j.at("beta_standardized"))
    for (const auto& v : row) s.beta_standardized.push_back(v.get<double>());
  s.means = j.at("standardization").at("mean").get<std::vector<double>>();
  s.stds = j.at("standardization").at("std").get<std::vector<double>>();
  s.provenance = j.value("provenance", std::string());
  const auto& st = j.at("stats");
  s.stats.sparsity = st.at("sparsity").get<double>();
  s.stats.accuracy = st.at("accuracy").get<double>();
  s.stats.agreement = st.at("agreement").get<double>();
  s.stats.sweeps = st.at("sweeps").get<std::vector<std::size_t>>();
  s.stats.not_converged = st.at("not_converged").get<std::vector<bool>>();
  s.stats.constant_columns = st.at("constant_columns").get<std::vector<std::size_t>>();
  return s;
}

}  // namespace mviz
