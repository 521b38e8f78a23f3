#include "mviz/crossmodal.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "mviz/error.hpp"

namespace mviz {

using nlohmann::json;

namespace {

// Neumaier compensated sum.
class CompensatedSum {
 public:
  void add(double x) {
    const double t = sum_ + x;
    comp_ += std::abs(sum_) >= std::abs(x) ? (sum_ - t) + x : (x - t) + sum_;
    sum_ = t;
  }
  double value() const { return sum_ + comp_; }

 private:
  double sum_ = 0.0;
  double comp_ = 0.0;
};

// Flattened component indices that carry an atom's value: all components for
// continuous atoms, the active vocabulary entry for token atoms.
std::vector<std::size_t> atom_components(const ModalitySpec& spec, const Tensor& x, std::size_t atom) {
  std::vector<std::size_t> out;
  for (std::size_t c = 0; c < spec.atom_dim; ++c) {
    if (spec.kind == ModalityKind::kToken && x.at(atom, c) == 0.0) continue;
    out.push_back(atom * spec.atom_dim + c);
  }
  return out;
}

}  // namespace

std::string_view to_string(InteractionMode mode) { return mode == InteractionMode::kSigned ? "signed" : "absolute"; }

InteractionMode interaction_mode_from_string(std::string_view s) {
  if (s == "signed") return InteractionMode::kSigned;
  if (s == "absolute") return InteractionMode::kAbsolute;
  throw Error(ErrorCode::kInvalidArgument, "unknown interaction mode '" + std::string(s) + "'");
}

std::string_view to_string(ad::Aggregation agg) { return agg == ad::Aggregation::kSigned ? "signed" : "absolute"; }

ad::Aggregation aggregation_from_string(std::string_view s) {
  if (s == "signed") return ad::Aggregation::kSigned;
  if (s == "absolute") return ad::Aggregation::kAbsolute;
  throw Error(ErrorCode::kInvalidArgument, "unknown aggregation '" + std::string(s) + "'");
}

json to_json(const InteractionMap& m) {
  return {{"query", {{"modality", m.query.modality}, {"atoms", m.query.atoms}}},
          {"response_modality", m.response_modality},
          {"weights", m.weights},
          {"mode", to_string(m.mode)},
          {"query_aggregation", to_string(m.query_aggregation)},
          {"target", to_json(m.target)}};
}

InteractionMap interaction_from_json(const json& j) {
  InteractionMap m;
  m.query.modality = j.at("query").at("modality").get<std::string>();
  m.query.atoms = j.at("query").at("atoms").get<std::vector<std::size_t>>();
  m.response_modality = j.at("response_modality").get<std::string>();
  m.weights = j.at("weights").get<std::vector<double>>();
  m.mode = interaction_mode_from_string(j.at("mode").get<std::string>());
  m.query_aggregation = aggregation_from_string(j.at("query_aggregation").get<std::string>());
  m.target = target_from_json(j.at("target"));
  return m;
}

InteractionMap cm_second_order(const Model& model, const Datapoint& dp, const InteractionQuery& query,
                               const std::string& response_modality, const AttributionTarget& target,
                               InteractionMode mode, ad::Aggregation query_aggregation) {
  const DatasetSchema& schema = model.schema();
  const ModalitySpec& qspec = schema.modality(query.modality);
  const ModalitySpec& rspec = schema.modality(response_modality);
  if (query.modality == response_modality) {
    throw Error(ErrorCode::kInvalidArgument, "query and response must be different modalities");
  }
  if (query.atoms.empty()) throw Error(ErrorCode::kEmptyAtomSet, "query has no atoms");
  validate_target(model, target);
  check_conforms(schema, dp);

  const Tensor& xq = dp.modalities.find(query.modality)->second;
  const Tensor& xr = dp.modalities.find(response_modality)->second;
  std::vector<std::size_t> indices;
  for (std::size_t a : query.atoms) {
    if (a >= qspec.atom_count) {
      throw Error(ErrorCode::kSchemaMismatch, "query atom " + std::to_string(a) + " outside '" + query.modality + "'");
    }
    const auto comps = atom_components(qspec, xq, a);
    indices.insert(indices.end(), comps.begin(), comps.end());
  }
  std::sort(indices.begin(), indices.end());
  indices.erase(std::unique(indices.begin(), indices.end()), indices.end());

  const auto grad = ad::second_order_gradient(target_graph(model, target), model.bindings(dp), query.modality, indices,
                                              response_modality, std::nullopt, query_aggregation);
  InteractionMap out;
  out.query = query;
  out.response_modality = response_modality;
  out.mode = mode;
  out.query_aggregation = query_aggregation;
  out.target = target;
  out.weights.assign(rspec.atom_count, 0.0);
  for (std::size_t a = 0; a < rspec.atom_count; ++a) {
    for (std::size_t i : atom_components(rspec, xr, a)) {
      const double v = grad.values[i];
      out.weights[a] += mode == InteractionMode::kSigned ? v : std::abs(v);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// EMAP

namespace {

struct Pair {
  std::string first;
  std::string second;
};

Pair resolve_pair(const DatasetSchema& schema, const EmapOptions& options) {
  if (schema.modalities.size() < 2 && (!options.first || !options.second)) {
    throw Error(ErrorCode::kInvalidArgument, "EMAP needs two modalities");
  }
  Pair p{options.first.value_or(schema.modalities[0].name), options.second.value_or(schema.modalities[1].name)};
  schema.modality(p.first);
  schema.modality(p.second);
  if (p.first == p.second) throw Error(ErrorCode::kInvalidArgument, "EMAP modalities must differ");
  return p;
}

// Label-stratified subsample of `limit` positions, sorted.
std::vector<std::size_t> stratified_subsample(std::span<const Datapoint> sample, std::size_t limit, std::uint64_t seed) {
  std::map<std::size_t, std::vector<std::size_t>> by_label;
  for (std::size_t i = 0; i < sample.size(); ++i) by_label[sample[i].label].push_back(i);
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> chosen;
  // Largest-remainder allocation proportional to stratum size.
  std::vector<std::pair<double, std::size_t>> remainders;
  std::map<std::size_t, std::size_t> quota;
  std::size_t assigned = 0;
  for (const auto& [label, idx] : by_label) {
    const double exact = static_cast<double>(limit) * static_cast<double>(idx.size()) / static_cast<double>(sample.size());
    quota[label] = static_cast<std::size_t>(exact);
    assigned += quota[label];
    remainders.emplace_back(exact - std::floor(exact), label);
  }
  std::stable_sort(remainders.begin(), remainders.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t k = 0; assigned < limit && k < remainders.size(); ++k, ++assigned) ++quota[remainders[k].second];
  for (auto& [label, idx] : by_label) {
    std::shuffle(idx.begin(), idx.end(), rng);
    chosen.insert(chosen.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(std::min(quota[label], idx.size())));
  }
  std::sort(chosen.begin(), chosen.end());
  return chosen;
}

// Target value for x_first taken from `a` and everything else from `b`.
class Recombiner {
 public:
  Recombiner(const Model& model, const AttributionTarget& target, std::string first)
      : model_(model), target_(target), first_(std::move(first)) {}

  // values[k] = f(first from firsts[k], rest from rests[k])
  std::vector<double> eval(std::span<const Datapoint* const> firsts, std::span<const Datapoint* const> rests) const {
    ModalityBatch batch;
    const std::size_t n = firsts.size();
    for (const auto& m : model_.schema().modalities) {
      std::vector<double> values;
      values.reserve(n * m.width());
      for (std::size_t k = 0; k < n; ++k) {
        const Datapoint* src = m.name == first_ ? firsts[k] : rests[k];
        const Tensor& x = src->modalities.find(m.name)->second;
        values.insert(values.end(), x.data().begin(), x.data().end());
      }
      batch.emplace(m.name, Tensor::matrix(n, m.width(), std::move(values)));
    }
    return evaluate_target(model_, batch, target_);
  }

 private:
  const Model& model_;
  const AttributionTarget& target_;
  std::string first_;
};

}  // namespace

EmapEstimate emap_decompose(const Model& model, std::span<const Datapoint> sample, const AttributionTarget& target,
                            const EmapOptions& options) {
  if (sample.size() < 2) throw Error(ErrorCode::kSampleTooSmall, "EMAP needs at least two points");
  validate_target(model, target);
  const Pair pair = resolve_pair(model.schema(), options);
  for (const auto& dp : sample) check_conforms(model.schema(), dp);

  EmapEstimate est;
  est.first = pair.first;
  est.second = pair.second;
  if (sample.size() > options.max_exact) {
    est.sample_indices = stratified_subsample(sample, options.max_exact, options.seed);
    est.subsample_seed = options.seed;
  } else {
    est.sample_indices.resize(sample.size());
    std::iota(est.sample_indices.begin(), est.sample_indices.end(), 0);
  }
  const std::size_t n = est.sample_indices.size();
  std::vector<const Datapoint*> points(n);
  for (std::size_t i = 0; i < n; ++i) points[i] = &sample[est.sample_indices[i]];

  // grid[s * n + t] = f(first from s, second from t)
  const Recombiner rec(model, target, pair.first);
  std::vector<double> grid(n * n);
  std::vector<const Datapoint*> firsts(n);
  for (std::size_t s = 0; s < n; ++s) {
    std::fill(firsts.begin(), firsts.end(), points[s]);
    const auto row = rec.eval(firsts, points);
    std::copy(row.begin(), row.end(), grid.begin() + static_cast<std::ptrdiff_t>(s * n));
  }

  est.f.resize(n);
  est.e_first.resize(n);
  est.e_second.resize(n);
  est.g12.resize(n);
  CompensatedSum all;
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t t = 0; t < n; ++t) all.add(grid[s * n + t]);
  est.e_both = all.value() / static_cast<double>(n * n);
  CompensatedSum energy;
  for (std::size_t i = 0; i < n; ++i) {
    CompensatedSum over_first, over_second;
    for (std::size_t k = 0; k < n; ++k) {
      over_first.add(grid[k * n + i]);
      over_second.add(grid[i * n + k]);
    }
    est.f[i] = grid[i * n + i];
    est.e_first[i] = over_first.value() / static_cast<double>(n);
    est.e_second[i] = over_second.value() / static_cast<double>(n);
    est.g12[i] = est.f[i] - est.e_first[i] - est.e_second[i] + est.e_both;
    energy.add(est.g12[i] * est.g12[i]);
  }
  est.energy = energy.value() / static_cast<double>(n);
  return est;
}

double emap_interaction_energy(const Model& model, std::span<const Datapoint> sample, const AttributionTarget& target,
                               const EmapOptions& options) {
  return emap_decompose(model, sample, target, options).energy;
}

json to_json(const EmapEstimate& e) {
  json j = {{"first", e.first},
            {"second", e.second},
            {"sample_indices", e.sample_indices},
            {"f", e.f},
            {"e_first", e.e_first},
            {"e_second", e.e_second},
            {"e_both", e.e_both},
            {"g12", e.g12},
            {"energy", e.energy}};
  if (e.subsample_seed) j["subsample_seed"] = *e.subsample_seed;
  return j;
}

// ---------------------------------------------------------------------------
// Simplified local DIME

json to_json(const DimeResult& r) {
  json uni = json::object(), cross = json::object();
  for (const auto& [m, map] : r.unimodal_part) uni[m] = to_json(map);
  for (const auto& [m, map] : r.crossmodal_part) cross[m] = to_json(map);
  return {{"unimodal_part", uni}, {"crossmodal_part", cross}};
}

DimeResult dime_local(const Model& model, const Datapoint& dp, std::span<const Datapoint> sample,
                      const AttributionTarget& target, const PerturbConfig& cfg, const EmapOptions& options) {
  if (sample.size() < 2) throw Error(ErrorCode::kSampleTooSmall, "DIME needs at least two points");
  validate_target(model, target);
  const Pair pair = resolve_pair(model.schema(), options);
  check_conforms(model.schema(), dp);
  const EmapEstimate base = emap_decompose(model, sample, target, options);
  std::vector<const Datapoint*> points;
  for (std::size_t i : base.sample_indices) points.push_back(&sample[i]);
  const std::size_t n = points.size();
  const Recombiner rec(model, target, pair.first);

  DimeResult result;
  for (const std::string& modality : {pair.first, pair.second}) {
    const ModalitySpec& spec = model.schema().modality(modality);
    const Tensor baseline = resolve_baseline(spec, cfg.baseline, cfg.baseline_values);
    std::vector<double> residual;
    const MaskFunction additive = [&](std::span<const std::vector<std::uint8_t>> masks) {
      std::vector<Datapoint> variants;
      variants.reserve(masks.size());
      for (const auto& mask : masks) {
        Datapoint v = dp;
        Tensor& x = v.modalities.find(modality)->second;
        for (std::size_t a = 0; a < spec.atom_count; ++a) {
          if (mask[a]) continue;
          for (std::size_t c = 0; c < spec.atom_dim; ++c) x.at(a, c) = baseline.at(a, c);
        }
        variants.push_back(std::move(v));
      }
      std::vector<const Datapoint*> self, firsts, rests;
      for (const auto& v : variants) self.push_back(&v);
      const std::vector<double> f = rec.eval(self, self);
      // E over first: first from each sample point, rest from the variant.
      // E over second: first from the variant, rest from each sample point.
      std::vector<double> a(masks.size());
      residual.assign(masks.size(), 0.0);
      for (std::size_t k = 0; k < variants.size(); ++k) {
        firsts.assign(points.begin(), points.end());
        rests.assign(n, &variants[k]);
        const auto over_first = rec.eval(firsts, rests);
        firsts.assign(n, &variants[k]);
        const auto over_second = rec.eval(firsts, points);
        CompensatedSum s1, s2;
        for (std::size_t i = 0; i < n; ++i) {
          s1.add(over_first[i]);
          s2.add(over_second[i]);
        }
        a[k] = s1.value() / static_cast<double>(n) + s2.value() / static_cast<double>(n) - base.e_both;
        residual[k] = f[k] - a[k];
      }
      return a;
    };
    // Same configuration gives the same masks, so the residual fit reuses values
    // computed alongside the additive part.
    const MaskFunction stored = [&](std::span<const std::vector<std::uint8_t>>) { return residual; };
    LimeFit a_fit = lime_fit(spec.atom_count, additive, cfg);
    LimeFit r_fit = lime_fit(spec.atom_count, stored, cfg);
    const std::string digest = perturb_config_digest(cfg, spec.atom_count);
    result.unimodal_part.emplace(modality, AttributionMap{modality, std::move(a_fit.coefficients), "dime_unimodal", target, digest});
    result.crossmodal_part.emplace(modality,
                                   AttributionMap{modality, std::move(r_fit.coefficients), "dime_crossmodal", target, digest});
  }
  return result;
}

// ---------------------------------------------------------------------------
// Alignment accuracy

json to_json(const AlignmentScore& s) {
  json records = json::array();
  for (const auto& r : s.records) {
    records.push_back({{"datapoint", r.datapoint},
                       {"pair", to_json(r.pair)},
                       {"ranked_regions", r.ranked_regions},
                       {"region_scores", r.region_scores},
                       {"truth_region", r.truth_region},
                       {"truth_rank", r.truth_rank}});
  }
  return {{"top1_hit_rate", s.top1_hit_rate}, {"top2_hit_rate", s.top2_hit_rate}, {"records", records}};
}

AlignmentScore alignment_accuracy(const Model& model, const Dataset& dataset, const AlignmentConfig& cfg) {
  const DatasetSchema& schema = model.schema();
  AlignmentScore score;
  std::size_t hits1 = 0, hits2 = 0;
  for (std::size_t i = 0; i < dataset.size() && score.records.size() < cfg.max_queries; ++i) {
    const Datapoint& dp = dataset.points[i];
    for (const auto& pair : dp.meta.planted_pairs) {
      if (score.records.size() >= cfg.max_queries) break;
      auto regions_it = schema.regions.find(pair.b.modality);
      if (regions_it == schema.regions.end()) {
        throw Error(ErrorCode::kMissingGroundTruth, "no regions defined for '" + pair.b.modality + "'");
      }
      const auto& regions = regions_it->second;
      const auto truth = schema.region_of(pair.b.modality, pair.b.atom);
      if (!truth) throw Error(ErrorCode::kMissingGroundTruth, "partner atom is not in any region");

      AttributionTarget target = cfg.target.value_or(AttributionTarget::logit_sum());
      if (cfg.pair_class_target) target = AttributionTarget::class_logit(pair.target_class);
      const auto map = cm_second_order(model, dp, {pair.a.modality, {pair.a.atom}}, pair.b.modality, target, cfg.mode,
                                       cfg.query_aggregation);

      std::vector<double> region_score(regions.size(), 0.0);
      for (std::size_t r = 0; r < regions.size(); ++r) {
        for (std::size_t a : regions[r].atoms) region_score[r] += map.weights[a];
        region_score[r] /= static_cast<double>(regions[r].atoms.size());
      }
      std::vector<std::size_t> order(regions.size());
      std::iota(order.begin(), order.end(), 0);
      std::stable_sort(order.begin(), order.end(),
                       [&](std::size_t x, std::size_t y) { return region_score[x] > region_score[y]; });

      AlignmentRecord rec;
      rec.datapoint = i;
      rec.pair = pair;
      rec.truth_region = regions[*truth].name;
      for (std::size_t r : order) {
        rec.ranked_regions.push_back(regions[r].name);
        rec.region_scores.push_back(region_score[r]);
      }
      // Pessimistic rank: 1 + number of other regions scoring >= the truth.
      rec.truth_rank = 1;
      for (std::size_t r = 0; r < regions.size(); ++r) {
        if (r != *truth && region_score[r] >= region_score[*truth]) ++rec.truth_rank;
      }
      hits1 += rec.truth_rank <= 1;
      hits2 += rec.truth_rank <= 2;
      score.records.push_back(std::move(rec));
    }
  }
  if (score.records.empty()) throw Error(ErrorCode::kMissingGroundTruth, "dataset carries no planted pairs");
  score.top1_hit_rate = static_cast<double>(hits1) / static_cast<double>(score.records.size());
  score.top2_hit_rate = static_cast<double>(hits2) / static_cast<double>(score.records.size());
  return score;
}

}  // namespace mviz
