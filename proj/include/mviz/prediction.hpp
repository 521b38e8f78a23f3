#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "mviz/model.hpp"

namespace mviz {

// Row per datapoint, column per feature of one layer.
struct FeatureMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t num_classes = 0;
  std::vector<double> values;             // row-major [rows, cols]
  std::vector<std::size_t> labels;        // ground truth
  std::vector<std::size_t> predictions;   // model predictions, empty if unknown
  std::vector<double> column_means;
  std::vector<double> column_stds;        // population standard deviation
  std::string model_digest;
  std::string layer;
  std::string split;

  double at(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
  // Digest of (model digest, layer, split).
  std::string provenance_digest() const;
  // Recomputes column_means / column_stds from values.
  void update_moments();

  friend bool operator==(const FeatureMatrix&, const FeatureMatrix&) = default;
};

// Throws UnknownLayer, EmptyDataset.
FeatureMatrix extract_features(const Model& model, const Dataset& dataset, std::string_view layer = kPenultimate,
                               std::string split = "train");

// Binary layout (little endian): magic "MVZFEAT1", u64 N, u64 d, u64 C,
// u64 length + provenance JSON (contains the provenance digest), N*d f64
// row-major values, d f64 means, d f64 stds, N u64 labels, u64 P, P u64
// predictions.
void write_feature_matrix(const FeatureMatrix& fm, const std::filesystem::path& file);
FeatureMatrix read_feature_matrix(const std::filesystem::path& file);

inline constexpr double kDefaultLambda1 = 0.01;
inline constexpr double kDefaultLambda2 = 0.001;

struct ElasticNetOptions {
  double tol = 1e-6;
  std::size_t max_sweeps = 10000;
  bool record_objective = false;
};

// Single-response fit on already standardized columns:
// min (1/2N)|y - X b - b0|^2 + l1 |b|_1 + l2 |b|_2^2, intercept unpenalized.
struct ElasticNetFit {
  std::vector<double> coef;
  double intercept = 0.0;
  std::size_t sweeps = 0;
  bool converged = false;
  std::vector<double> objective;  // after each sweep, when recorded
};

// `x` is row-major [n, d]; columns are used as given (no standardization).
// Columns whose mean square is zero stay at zero.
ElasticNetFit elastic_net(std::span<const double> x, std::size_t n, std::size_t d, std::span<const double> y,
                          double lambda1, double lambda2, const ElasticNetOptions& options = {},
                          std::span<const double> warm_start = {});

struct SurrogateStats {
  double sparsity = 0.0;    // fraction of zero coefficients
  double accuracy = 0.0;    // surrogate vs ground truth
  double agreement = 0.0;   // surrogate vs model predictions
  std::vector<std::size_t> sweeps;          // per class
  std::vector<bool> not_converged;          // per class
  std::vector<std::size_t> constant_columns;

  friend bool operator==(const SurrogateStats&, const SurrogateStats&) = default;
};

struct SparseLinearSurrogate {
  double lambda1 = kDefaultLambda1;
  double lambda2 = kDefaultLambda2;
  std::size_t num_features = 0;
  std::size_t num_classes = 0;
  std::vector<double> beta;   // raw-space coefficients, row-major [d, C]
  std::vector<double> beta0;  // [C]
  // Coefficients in standardized space, row-major [d, C] (warm starts, KKT).
  std::vector<double> beta_standardized;
  std::vector<double> means;
  std::vector<double> stds;
  std::string provenance;
  SurrogateStats stats;

  double coef(std::size_t feature, std::size_t cls) const { return beta[feature * num_classes + cls]; }
  std::vector<double> scores(std::span<const double> features) const;
  std::size_t predict(std::span<const double> features) const;

  friend bool operator==(const SparseLinearSurrogate&, const SparseLinearSurrogate&) = default;
};

nlohmann::json to_json(const SparseLinearSurrogate& s);
SparseLinearSurrogate surrogate_from_json(const nlohmann::json& j);

// One-vs-rest elastic net per class on internally standardized columns.
// Lambdas are in standardized space. Throws InvalidArgument for negative
// lambdas or an empty matrix.
SparseLinearSurrogate fit_sparse_linear(const FeatureMatrix& fm, double lambda1 = kDefaultLambda1,
                                        double lambda2 = kDefaultLambda2, const ElasticNetOptions& options = {},
                                        const SparseLinearSurrogate* warm_start = nullptr);

// Smallest lambda1 giving all-zero coefficients: max over classes and
// standardized columns of |(1/N) x_j^T (y_c - mean(y_c))|.
double lambda1_max(const FeatureMatrix& fm);

// Largest KKT violation of the standardized problem across classes.
double kkt_violation(const FeatureMatrix& fm, const SparseLinearSurrogate& s);

struct PathPoint {
  double lambda1 = 0.0;
  double sparsity = 0.0;
  double accuracy = 0.0;
  double agreement = 0.0;
  std::size_t nonzero = 0;
};

nlohmann::json to_json(const PathPoint& p);

// Warm-started fits along a descending grid.
std::vector<PathPoint> regularization_path(const FeatureMatrix& fm, std::span<const double> lambda1_grid,
                                           double lambda2 = kDefaultLambda2, const ElasticNetOptions& options = {});

struct RankedFeature {
  std::size_t feature = 0;
  double coefficient = 0.0;
  friend bool operator==(const RankedFeature&, const RankedFeature&) = default;
};

// Nonzero coefficients of `cls`, descending by signed value, ties by lower index.
std::vector<RankedFeature> top_features(const SparseLinearSurrogate& s, std::size_t cls, std::size_t m = 5);

nlohmann::json to_json(const RankedFeature& f);

}  // namespace mviz
