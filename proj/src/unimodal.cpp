#include "mviz/unimodal.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <bit>
#include <cmath>
#include <numeric>
#include <random>

#include "mviz/canonical.hpp"
#include "mviz/error.hpp"

namespace mviz {

using nlohmann::json;

std::string_view AttributionTarget::layer_name() const {
  return kind == Kind::kFeatureNeuron ? std::string_view(layer) : kLogits;
}

void validate_target(const Model& model, const AttributionTarget& target) {
  if (target.kind == AttributionTarget::Kind::kLogitSum) return;
  if (target.kind == AttributionTarget::Kind::kClassLogit) {
    if (target.class_id >= model.num_classes()) {
      throw Error(ErrorCode::kInvalidArgument, "class " + std::to_string(target.class_id) + " out of range");
    }
    return;
  }
  if (!model.has_layer(target.layer)) throw Error(ErrorCode::kUnknownLayer, "unknown layer '" + target.layer + "'");
  const std::size_t width = model.layer_width(target.layer);
  if (target.neuron >= width) {
    throw Error(ErrorCode::kInvalidArgument, "neuron " + std::to_string(target.neuron) + " outside layer '" +
                                                 target.layer + "' of width " + std::to_string(width));
  }
}

json to_json(const AttributionTarget& t) {
  if (t.kind == AttributionTarget::Kind::kClassLogit) return {{"kind", "class"}, {"class", t.class_id}};
  if (t.kind == AttributionTarget::Kind::kLogitSum) return {{"kind", "logit_sum"}};
  return {{"kind", "feature"}, {"layer", t.layer}, {"index", t.neuron}};
}

AttributionTarget target_from_json(const json& j) {
  try {
    const std::string kind = j.at("kind").get<std::string>();
    if (kind == "class") return AttributionTarget::class_logit(j.at("class").get<std::size_t>());
    if (kind == "logit_sum") return AttributionTarget::logit_sum();
    if (kind == "feature") {
      return AttributionTarget::feature(j.value("layer", std::string(kPenultimate)), j.at("index").get<std::size_t>());
    }
    throw Error(ErrorCode::kInvalidArgument, "unknown target kind '" + kind + "'");
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kInvalidArgument, std::string("malformed target: ") + e.what());
  }
}

json to_json(const AttributionMap& m) {
  return {{"modality", m.modality},
          {"method", m.method},
          {"target", to_json(m.target)},
          {"weights", m.weights},
          {"config_digest", m.config_digest}};
}

AttributionMap attribution_from_json(const json& j) {
  return {j.at("modality").get<std::string>(), j.at("weights").get<std::vector<double>>(),
          j.at("method").get<std::string>(), target_from_json(j.at("target")),
          j.at("config_digest").get<std::string>()};
}

ad::Graph target_graph(const Model& model, const AttributionTarget& target) {
  ad::Graph g = model.graph(target.layer_name());
  const ad::Node out = g.output();
  if (target.kind == AttributionTarget::Kind::kLogitSum) {
    g.set_output(g.sum(out));
  } else {
    const std::size_t col = target.kind == AttributionTarget::Kind::kClassLogit ? target.class_id : target.neuron;
    g.set_output(g.sum(g.select_cols(out, {col})));
  }
  return g;
}

std::vector<double> evaluate_target(const Model& model, const ModalityBatch& batch, const AttributionTarget& target) {
  const Tensor out = model.layer_activation_batch(batch, target.layer_name());
  std::vector<double> values(out.rows(), 0.0);
  if (target.kind == AttributionTarget::Kind::kLogitSum) {
    for (std::size_t r = 0; r < out.rows(); ++r)
      for (std::size_t c = 0; c < out.cols(); ++c) values[r] += out.at(r, c);
    return values;
  }
  const std::size_t col = target.kind == AttributionTarget::Kind::kClassLogit ? target.class_id : target.neuron;
  if (col >= out.cols()) throw Error(ErrorCode::kInvalidArgument, "target column out of range");
  for (std::size_t r = 0; r < out.rows(); ++r) values[r] = out.at(r, col);
  return values;
}

Tensor resolve_baseline(const ModalitySpec& modality, BaselineKind kind, const std::optional<Tensor>& values) {
  if (modality.kind == ModalityKind::kToken || kind == BaselineKind::kZero) {
    return Tensor::zeros({modality.atom_count, modality.atom_dim});
  }
  if (!values) {
    throw Error(ErrorCode::kInvalidArgument, "dataset-mean baseline for '" + modality.name + "' needs baseline values");
  }
  if (values->size() != modality.width()) {
    throw Error(ErrorCode::kShapeMismatch, "baseline for '" + modality.name + "' has shape " +
                                               shape_string(values->shape()));
  }
  return values->reshaped({modality.atom_count, modality.atom_dim});
}

ModalityBatch masked_batch(const Model& model, const Datapoint& dp, const std::string& modality,
                           std::span<const std::vector<std::uint8_t>> masks, const Tensor& baseline) {
  const DatasetSchema& schema = model.schema();
  check_conforms(schema, dp);
  const ModalitySpec& spec = schema.modality(modality);
  const std::size_t n = masks.size();
  ModalityBatch batch;
  for (const auto& m : schema.modalities) {
    const Tensor& x = dp.modalities.find(m.name)->second;
    std::vector<double> values;
    values.reserve(n * m.width());
    if (m.name != modality) {
      for (std::size_t r = 0; r < n; ++r) values.insert(values.end(), x.data().begin(), x.data().end());
    } else {
      for (const auto& mask : masks) {
        if (mask.size() != spec.atom_count) throw Error(ErrorCode::kShapeMismatch, "mask length != atom count");
        for (std::size_t a = 0; a < spec.atom_count; ++a) {
          const Tensor& src = mask[a] ? x : baseline;
          for (std::size_t c = 0; c < spec.atom_dim; ++c) values.push_back(src.at(a, c));
        }
      }
    }
    batch.emplace(m.name, Tensor::matrix(n, m.width(), std::move(values)));
  }
  return batch;
}

namespace {

json baseline_json(BaselineKind kind, const std::optional<Tensor>& values) {
  json j = {{"kind", kind == BaselineKind::kZero ? "zero" : "dataset_mean"}};
  if (kind == BaselineKind::kDatasetMean && values) j["values"] = values->values();
  return j;
}

const json kGradientConfig = {{"method", "gradient"}};

}  // namespace

std::string perturb_config_digest(const PerturbConfig& cfg, std::size_t atom_count) {
  return json_digest({{"method", "lime"},
                      {"num_samples", cfg.num_samples},
                      {"baseline", baseline_json(cfg.baseline, cfg.baseline_values)},
                      {"kernel_width", cfg.kernel_width.value_or(0.25 * static_cast<double>(atom_count))},
                      {"ridge", cfg.ridge},
                      {"seed", cfg.seed},
                      {"enumerate", cfg.enumerate}});
}

std::string shapley_config_digest(const ShapleyConfig& cfg, std::size_t atom_count) {
  const bool exact = atom_count <= kExactShapleyMaxAtoms && !cfg.force_sampling;
  return json_digest({{"method", "shapley"},
                      {"num_permutations", exact ? 0 : cfg.num_permutations},
                      {"exact", exact},
                      {"baseline", baseline_json(cfg.baseline, cfg.baseline_values)},
                      {"seed", exact ? 0 : cfg.seed}});
}

AttributionMap uni_gradient(const Model& model, const Datapoint& dp, const std::string& modality,
                            const AttributionTarget& target) {
  validate_target(model, target);
  const ModalitySpec& spec = model.schema().modality(modality);
  const auto grad = ad::gradient(target_graph(model, target), model.bindings(dp), modality);
  const Tensor& x = dp.modalities.find(modality)->second;
  std::vector<double> weights(spec.atom_count, 0.0);
  for (std::size_t a = 0; a < spec.atom_count; ++a) {
    for (std::size_t c = 0; c < spec.atom_dim; ++c) {
      const double g = grad.values[a * spec.atom_dim + c];
      // A token atom's only meaningful component is its active vocabulary entry.
      weights[a] += spec.kind == ModalityKind::kToken ? g * x.at(a, c) : g;
    }
  }
  return {modality, std::move(weights), "gradient", target, json_digest(kGradientConfig)};
}

LimeFit lime_fit(std::size_t atom_count, const MaskFunction& f, const PerturbConfig& cfg) {
  if (atom_count < 1) throw Error(ErrorCode::kInvalidArgument, "need at least one atom");
  const double width = cfg.kernel_width.value_or(0.25 * static_cast<double>(atom_count));
  if (!(width > 0.0)) throw Error(ErrorCode::kInvalidArgument, "kernel width must be positive");
  if (cfg.ridge < 0.0) throw Error(ErrorCode::kInvalidArgument, "ridge must be nonnegative");

  std::vector<std::vector<std::uint8_t>> masks;
  if (cfg.enumerate) {
    if (atom_count > 20) throw Error(ErrorCode::kInvalidArgument, "mask enumeration limited to 20 atoms");
    const std::size_t total = std::size_t{1} << atom_count;
    masks.reserve(total);
    // Full mask first, then the rest in binary order.
    for (std::size_t code = total; code-- > 0;) {
      std::vector<std::uint8_t> m(atom_count);
      for (std::size_t a = 0; a < atom_count; ++a) m[a] = (code >> a) & 1U;
      masks.push_back(std::move(m));
    }
  } else {
    if (cfg.num_samples < atom_count + 1) {
      throw Error(ErrorCode::kInvalidArgument, "num_samples must be at least atom_count + 1");
    }
    std::mt19937_64 rng(cfg.seed);
    std::bernoulli_distribution keep(0.5);
    masks.emplace_back(atom_count, 1);
    while (masks.size() < cfg.num_samples) {
      std::vector<std::uint8_t> m(atom_count);
      for (auto& v : m) v = keep(rng) ? 1 : 0;
      masks.push_back(std::move(m));
    }
  }
  if (std::all_of(masks.begin(), masks.end(), [&](const auto& m) { return m == masks.front(); })) {
    throw Error(ErrorCode::kDegenerateDesign, "all sampled masks are identical; raise num_samples");
  }

  const std::vector<double> y = f(masks);
  if (y.size() != masks.size()) throw Error(ErrorCode::kInvalidArgument, "mask function returned wrong length");
  const std::size_t n = masks.size();
  const std::size_t p = atom_count;
  Eigen::VectorXd w(n);
  Eigen::MatrixXd z(n, p);
  Eigen::VectorXd yv(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t removed = 0;
    for (std::size_t a = 0; a < p; ++a) {
      z(i, a) = masks[i][a];
      removed += masks[i][a] ? 0 : 1;
    }
    const double d = static_cast<double>(removed);
    w(i) = std::exp(-(d * d) / (width * width));
    yv(i) = y[i];
  }
  // Weighted centring removes the unpenalised intercept.
  const double wsum = w.sum();
  const Eigen::RowVectorXd zbar = (w.asDiagonal() * z).colwise().sum() / wsum;
  const double ybar = w.dot(yv) / wsum;
  const Eigen::MatrixXd zc = z.rowwise() - zbar;
  const Eigen::VectorXd yc = yv.array() - ybar;
  Eigen::MatrixXd gram = zc.transpose() * w.asDiagonal() * zc;
  gram.diagonal().array() += cfg.ridge;
  const Eigen::VectorXd rhs = zc.transpose() * (w.asDiagonal() * yc);
  Eigen::LDLT<Eigen::MatrixXd> ldlt(gram);
  Eigen::VectorXd beta = ldlt.solve(rhs);
  if (ldlt.info() != Eigen::Success || !beta.allFinite() || (cfg.ridge == 0.0 && !ldlt.isPositive())) {
    // Rank-deficient designs fall back to a least-squares solve.
    beta = gram.completeOrthogonalDecomposition().solve(rhs);
  }
  if (!beta.allFinite()) throw Error(ErrorCode::kDegenerateDesign, "LIME design is singular");

  LimeFit fit;
  fit.coefficients.assign(beta.data(), beta.data() + p);
  fit.intercept = ybar - zbar.dot(beta);
  fit.samples = n;
  return fit;
}

AttributionMap uni_lime(const Model& model, const Datapoint& dp, const std::string& modality,
                        const AttributionTarget& target, const PerturbConfig& cfg) {
  validate_target(model, target);
  const ModalitySpec& spec = model.schema().modality(modality);
  const Tensor baseline = resolve_baseline(spec, cfg.baseline, cfg.baseline_values);
  const MaskFunction f = [&](std::span<const std::vector<std::uint8_t>> masks) {
    return evaluate_target(model, masked_batch(model, dp, modality, masks, baseline), target);
  };
  LimeFit fit = lime_fit(spec.atom_count, f, cfg);
  return {modality, std::move(fit.coefficients), "lime", target, perturb_config_digest(cfg, spec.atom_count)};
}

namespace {

std::vector<double> exact_shapley(std::size_t n, const MaskFunction& f) {
  const std::size_t total = std::size_t{1} << n;
  std::vector<std::vector<std::uint8_t>> masks(total, std::vector<std::uint8_t>(n));
  for (std::size_t code = 0; code < total; ++code)
    for (std::size_t a = 0; a < n; ++a) masks[code][a] = (code >> a) & 1U;
  const std::vector<double> v = f(masks);

  // weight(|S|) = |S|! (n - |S| - 1)! / n!
  std::vector<double> weight(n);
  for (std::size_t s = 0; s < n; ++s) {
    double w = 1.0 / static_cast<double>(n);
    // 1 / (n * C(n-1, s))
    double binom = 1.0;
    for (std::size_t k = 1; k <= s; ++k) binom = binom * static_cast<double>(n - 1 - s + k) / static_cast<double>(k);
    weight[s] = w / binom;
  }
  std::vector<double> phi(n, 0.0);
  for (std::size_t a = 0; a < n; ++a) {
    const std::size_t bit = std::size_t{1} << a;
    // Neumaier summation keeps efficiency at rounding level.
    double sum = 0.0, comp = 0.0;
    for (std::size_t code = 0; code < total; ++code) {
      if (code & bit) continue;
      const double term = weight[static_cast<std::size_t>(std::popcount(code))] * (v[code | bit] - v[code]);
      const double t = sum + term;
      comp += std::abs(sum) >= std::abs(term) ? (sum - t) + term : (term - t) + sum;
      sum = t;
    }
    phi[a] = sum + comp;
  }
  return phi;
}

std::vector<double> sampled_shapley(std::size_t n, const MaskFunction& f, std::size_t permutations, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> order(n);
  std::vector<double> phi(n, 0.0);
  std::vector<std::vector<std::uint8_t>> masks;
  std::vector<std::vector<std::size_t>> orders;
  masks.reserve(permutations * (n + 1));
  for (std::size_t p = 0; p < permutations; ++p) {
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    orders.push_back(order);
    std::vector<std::uint8_t> m(n, 0);
    masks.push_back(m);
    for (std::size_t a : order) {
      m[a] = 1;
      masks.push_back(m);
    }
  }
  const std::vector<double> v = f(masks);
  for (std::size_t p = 0; p < permutations; ++p) {
    const double* row = v.data() + p * (n + 1);
    for (std::size_t k = 0; k < n; ++k) phi[orders[p][k]] += row[k + 1] - row[k];
  }
  for (double& x : phi) x /= static_cast<double>(permutations);
  return phi;
}

}  // namespace

AttributionMap uni_shapley(const Model& model, const Datapoint& dp, const std::string& modality,
                           const AttributionTarget& target, const ShapleyConfig& cfg) {
  validate_target(model, target);
  const ModalitySpec& spec = model.schema().modality(modality);
  const Tensor baseline = resolve_baseline(spec, cfg.baseline, cfg.baseline_values);
  const MaskFunction f = [&](std::span<const std::vector<std::uint8_t>> masks) {
    return evaluate_target(model, masked_batch(model, dp, modality, masks, baseline), target);
  };
  const bool exact = spec.atom_count <= kExactShapleyMaxAtoms && !cfg.force_sampling;
  if (!exact && cfg.num_permutations < 1) throw Error(ErrorCode::kInvalidArgument, "num_permutations must be positive");
  std::vector<double> weights =
      exact ? exact_shapley(spec.atom_count, f) : sampled_shapley(spec.atom_count, f, cfg.num_permutations, cfg.seed);
  return {modality, std::move(weights), "shapley", target, shapley_config_digest(cfg, spec.atom_count)};
}

}  // namespace mviz
