#include "mviz/dataset.hpp"

#include <algorithm>
#include <fstream>
#include <random>
#include <set>

#include "mviz/error.hpp"

namespace mviz {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Schema

const ModalitySpec& DatasetSchema::modality(std::string_view name) const {
  return modalities[modality_index(name)];
}

bool DatasetSchema::has_modality(std::string_view name) const {
  return std::any_of(modalities.begin(), modalities.end(), [&](const ModalitySpec& m) { return m.name == name; });
}

std::size_t DatasetSchema::modality_index(std::string_view name) const {
  for (std::size_t i = 0; i < modalities.size(); ++i)
    if (modalities[i].name == name) return i;
  throw Error(ErrorCode::kSchemaMismatch, "unknown modality '" + std::string(name) + "'");
}

const std::vector<Region>& DatasetSchema::regions_of(std::string_view modality_name) const {
  auto it = regions.find(std::string(modality_name));
  if (it == regions.end()) {
    throw Error(ErrorCode::kMissingGroundTruth, "no regions defined for modality '" + std::string(modality_name) + "'");
  }
  return it->second;
}

std::optional<std::size_t> DatasetSchema::region_of(std::string_view modality_name, std::size_t atom) const {
  auto it = regions.find(std::string(modality_name));
  if (it == regions.end()) return std::nullopt;
  for (std::size_t r = 0; r < it->second.size(); ++r) {
    const auto& atoms = it->second[r].atoms;
    if (std::find(atoms.begin(), atoms.end(), atom) != atoms.end()) return r;
  }
  return std::nullopt;
}

void DatasetSchema::validate() const {
  if (modalities.empty()) throw Error(ErrorCode::kInvalidSpec, "schema has no modalities");
  if (num_classes < 2) throw Error(ErrorCode::kInvalidSpec, "need at least two classes");
  std::set<std::string> names;
  for (const auto& m : modalities) {
    if (m.atom_count < 1 || m.atom_dim < 1) {
      throw Error(ErrorCode::kInvalidSpec, "modality '" + m.name + "' needs atom_count >= 1 and atom_dim >= 1");
    }
    if (!names.insert(m.name).second) throw Error(ErrorCode::kInvalidSpec, "duplicate modality '" + m.name + "'");
  }
  for (const auto& [name, parts] : regions) {
    if (!names.contains(name)) throw Error(ErrorCode::kInvalidSpec, "regions for unknown modality '" + name + "'");
    const std::size_t count = modality(name).atom_count;
    std::vector<int> seen(count, 0);
    for (const auto& region : parts) {
      for (std::size_t a : region.atoms) {
        if (a >= count) throw Error(ErrorCode::kInvalidSpec, "region '" + region.name + "' references atom " + std::to_string(a));
        ++seen[a];
      }
    }
    if (std::any_of(seen.begin(), seen.end(), [](int c) { return c != 1; })) {
      throw Error(ErrorCode::kInvalidSpec, "regions of '" + name + "' do not partition its atoms");
    }
  }
}

const Dataset& SplitSet::split(std::string_view name) const {
  if (name == "train") return train;
  if (name == "val" || name == "validation") return val;
  if (name == "test") return test;
  throw Error(ErrorCode::kNotFound, "unknown split '" + std::string(name) + "'");
}

void check_conforms(const DatasetSchema& schema, const Datapoint& dp) {
  for (const auto& m : schema.modalities) {
    auto it = dp.modalities.find(m.name);
    if (it == dp.modalities.end()) throw Error(ErrorCode::kSchemaMismatch, "datapoint lacks modality '" + m.name + "'");
    if (it->second.rows() != m.atom_count || it->second.cols() != m.atom_dim) {
      throw Error(ErrorCode::kSchemaMismatch, "modality '" + m.name + "' has shape " + shape_string(it->second.shape()));
    }
  }
  if (dp.label >= schema.num_classes) {
    throw Error(ErrorCode::kSchemaMismatch, "label " + std::to_string(dp.label) + " >= num_classes");
  }
}

namespace {

template <class Get>
ModalityBatch stack_impl(const DatasetSchema& schema, std::size_t n, Get get) {
  ModalityBatch batch;
  for (const auto& m : schema.modalities) {
    std::vector<double> values;
    values.reserve(n * m.width());
    for (std::size_t i = 0; i < n; ++i) {
      const Datapoint& dp = get(i);
      auto it = dp.modalities.find(m.name);
      if (it == dp.modalities.end() || it->second.size() != m.width()) {
        throw Error(ErrorCode::kSchemaMismatch, "datapoint does not match modality '" + m.name + "'");
      }
      values.insert(values.end(), it->second.data().begin(), it->second.data().end());
    }
    batch.emplace(m.name, Tensor::matrix(n, m.width(), std::move(values)));
  }
  return batch;
}

}  // namespace

ModalityBatch stack_inputs(const DatasetSchema& schema, std::span<const Datapoint> points) {
  return stack_impl(schema, points.size(), [&](std::size_t i) -> const Datapoint& { return points[i]; });
}

ModalityBatch stack_inputs(const DatasetSchema& schema, std::span<const Datapoint* const> points) {
  return stack_impl(schema, points.size(), [&](std::size_t i) -> const Datapoint& { return *points[i]; });
}

double region_energy(const Tensor& atoms, const Region& region) {
  double acc = 0.0;
  std::size_t n = 0;
  for (std::size_t a : region.atoms) {
    for (std::size_t c = 0; c < atoms.cols(); ++c) {
      const double v = atoms.at(a, c);
      acc += v * v;
      ++n;
    }
  }
  return n ? acc / static_cast<double>(n) : 0.0;
}

std::map<std::string, Tensor, std::less<>> dataset_mean(const Dataset& dataset) {
  if (dataset.empty()) throw Error(ErrorCode::kEmptyDataset, "cannot average an empty dataset");
  std::map<std::string, Tensor, std::less<>> out;
  for (const auto& m : dataset.schema.modalities) {
    Tensor mean = Tensor::zeros({m.atom_count, m.atom_dim});
    if (m.kind == ModalityKind::kContinuous) {
      for (const auto& dp : dataset.points) {
        const Tensor& x = dp.modalities.find(m.name)->second;
        for (std::size_t i = 0; i < x.size(); ++i) mean[i] += x[i];
      }
      for (std::size_t i = 0; i < mean.size(); ++i) mean[i] /= static_cast<double>(dataset.size());
    }
    out.emplace(m.name, std::move(mean));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic generation

std::size_t BugSpec::corrupted_label(std::size_t num_classes) const {
  return corrupt_to.value_or((target_class + 1) % num_classes);
}

void SyntheticSpec::validate() const {
  schema.validate();
  for (const auto& [name, w] : unimodal_weights) {
    const auto& m = schema.modality(name);
    if (w.rows() != schema.num_classes || w.cols() != m.width()) {
      throw Error(ErrorCode::kInvalidSpec, "unimodal weights for '" + name + "' must be [num_classes, width]");
    }
  }
  for (const auto& p : interactions) {
    for (const auto* atom : {&p.a, &p.b}) {
      if (!schema.has_modality(atom->modality) || atom->atom >= schema.modality(atom->modality).atom_count) {
        throw Error(ErrorCode::kInvalidSpec, "interaction references invalid atom");
      }
    }
    if (schema.modality(p.a.modality).atom_dim != schema.modality(p.b.modality).atom_dim) {
      throw Error(ErrorCode::kInvalidSpec, "interacting atoms must share a dimension");
    }
    if (p.a.modality == p.b.modality) throw Error(ErrorCode::kInvalidSpec, "interactions must be cross-modal");
    if (p.target_class >= schema.num_classes) throw Error(ErrorCode::kInvalidSpec, "interaction class out of range");
  }
  if (label_noise < 0.0 || label_noise > 1.0) throw Error(ErrorCode::kInvalidSpec, "label noise outside [0,1]");
  if (bug) {
    if (bug->corruption_rate < 0.0 || bug->corruption_rate > 1.0) {
      throw Error(ErrorCode::kInvalidSpec, "corruption rate outside [0,1]");
    }
    if (bug->target_class >= schema.num_classes || bug->corrupted_label(schema.num_classes) >= schema.num_classes) {
      throw Error(ErrorCode::kInvalidSpec, "bug classes out of range");
    }
    const auto& regions = schema.regions_of(bug->modality);
    if (std::none_of(regions.begin(), regions.end(), [&](const Region& r) { return r.name == bug->region; })) {
      throw Error(ErrorCode::kInvalidSpec, "bug region '" + bug->region + "' is not defined");
    }
  }
}

std::vector<double> rule_scores(const SyntheticSpec& spec, const Datapoint& dp) {
  std::vector<double> scores(spec.schema.num_classes, 0.0);
  for (const auto& [name, w] : spec.unimodal_weights) {
    const Tensor& x = dp.modalities.find(name)->second;
    for (std::size_t c = 0; c < scores.size(); ++c)
      for (std::size_t i = 0; i < x.size(); ++i) scores[c] += w.at(c, i) * x[i];
  }
  for (const auto& p : spec.interactions) {
    const Tensor& xa = dp.modalities.find(p.a.modality)->second;
    const Tensor& xb = dp.modalities.find(p.b.modality)->second;
    double dot = 0.0;
    for (std::size_t k = 0; k < xa.cols(); ++k) dot += xa.at(p.a.atom, k) * xb.at(p.b.atom, k);
    scores[p.target_class] += p.strength * dot;
  }
  return scores;
}

std::size_t rule_label(const SyntheticSpec& spec, const Datapoint& dp) {
  const auto scores = rule_scores(spec, dp);
  return static_cast<std::size_t>(std::max_element(scores.begin(), scores.end()) - scores.begin());
}

namespace {

Datapoint draw_point(const SyntheticSpec& spec, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  Datapoint dp;
  for (const auto& m : spec.schema.modalities) {
    Tensor atoms = Tensor::zeros({m.atom_count, m.atom_dim});
    if (m.kind == ModalityKind::kContinuous) {
      for (std::size_t i = 0; i < atoms.size(); ++i) atoms[i] = unit(rng);
    } else {
      std::uniform_int_distribution<std::size_t> token(0, m.atom_dim - 1);
      for (std::size_t a = 0; a < m.atom_count; ++a) atoms.at(a, token(rng)) = 1.0;
    }
    dp.modalities.emplace(m.name, std::move(atoms));
  }
  return dp;
}

Dataset make_split(const SyntheticSpec& spec, std::size_t n, bool apply_bug, std::mt19937_64& rng) {
  Dataset out{spec.schema, {}};
  out.points.reserve(n);
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> other(1, spec.schema.num_classes - 1);
  for (std::size_t i = 0; i < n; ++i) {
    Datapoint dp = draw_point(spec, rng);
    const std::size_t clean = rule_label(spec, dp);
    dp.meta.clean_label = clean;
    dp.meta.planted_pairs = spec.interactions;
    dp.label = clean;
    // Draw both variates unconditionally so splits stay aligned across specs.
    const double noise_draw = coin(rng);
    const std::size_t shift = other(rng);
    if (noise_draw < spec.label_noise) {
      dp.label = (clean + shift) % spec.schema.num_classes;
      dp.meta.noise_flipped = true;
    }
    for (const auto& [name, regions] : spec.schema.regions) {
      const double threshold = spec.bug ? spec.bug->active_threshold : 0.45;
      for (const auto& region : regions) {
        dp.meta.region_active[name][region.name] = region_energy(dp.modalities.find(name)->second, region) > threshold;
      }
    }
    const double bug_draw = coin(rng);
    if (spec.bug) {
      const auto& bug = *spec.bug;
      dp.meta.bug_affected = clean == bug.target_class && dp.meta.region_active[bug.modality][bug.region];
      if (apply_bug && dp.meta.bug_affected && bug_draw < bug.corruption_rate) {
        dp.label = bug.corrupted_label(spec.schema.num_classes);
        dp.meta.corrupted = true;
      }
    }
    out.points.push_back(std::move(dp));
  }
  return out;
}

}  // namespace

SplitSet make_synthetic_dataset(const SyntheticSpec& spec, std::size_t n_train, std::size_t n_val, std::size_t n_test,
                                std::uint64_t seed) {
  spec.validate();
  if (n_train < 1 || n_val < 1 || n_test < 1) throw Error(ErrorCode::kInvalidSpec, "every split needs at least one point");
  std::mt19937_64 rng(seed ^ (spec.seed * 0x9E3779B97F4A7C15ULL));
  SplitSet splits;
  splits.train = make_split(spec, n_train, true, rng);
  splits.val = make_split(spec, n_val, false, rng);
  splits.test = make_split(spec, n_test, false, rng);
  return splits;
}

namespace {

DatasetSchema two_modality_schema(std::size_t text_atoms, std::size_t image_atoms, std::size_t dim, std::size_t classes) {
  DatasetSchema schema;
  schema.modalities = {{"text", text_atoms, dim, ModalityKind::kContinuous},
                       {"image", image_atoms, dim, ModalityKind::kContinuous}};
  schema.num_classes = classes;
  std::vector<Region> regions;
  for (std::size_t r = 0; r * 2 < image_atoms; ++r) {
    Region region{"r" + std::to_string(r), {2 * r}};
    if (2 * r + 1 < image_atoms) region.atoms.push_back(2 * r + 1);
    regions.push_back(std::move(region));
  }
  schema.regions.emplace("image", std::move(regions));
  return schema;
}

Tensor seeded_weights(std::uint64_t seed, std::size_t rows, std::size_t cols, double scale) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-scale, scale);
  std::vector<double> v(rows * cols);
  for (double& x : v) x = u(rng);
  return Tensor::matrix(rows, cols, std::move(v));
}

}  // namespace

SyntheticSpec unimodal_task_spec() {
  SyntheticSpec spec;
  spec.schema = two_modality_schema(2, 4, 2, 2);
  spec.seed = 11;
  spec.unimodal_weights.emplace("text", seeded_weights(101, 2, 4, 2.0));
  spec.unimodal_weights.emplace("image", seeded_weights(102, 2, 8, 2.0));
  spec.label_noise = 0.0;
  spec.n_train = 1500;
  spec.n_val = 500;
  spec.n_test = 500;
  return spec;
}

SyntheticSpec interaction_task_spec() {
  SyntheticSpec spec;
  spec.schema = two_modality_schema(3, 6, 2, 3);
  spec.seed = 23;
  spec.unimodal_weights.emplace("text", seeded_weights(201, 3, 6, 0.3));
  spec.unimodal_weights.emplace("image", seeded_weights(202, 3, 12, 0.3));
  spec.interactions = {
      {{"text", 0}, {"image", 0}, 3.0, 0},
      {{"text", 1}, {"image", 3}, 3.0, 1},
      {{"text", 2}, {"image", 4}, 3.0, 2},
  };
  spec.label_noise = 0.02;
  spec.n_train = 10000;
  spec.n_val = 1000;
  spec.n_test = 1000;
  return spec;
}

SyntheticSpec bug_task_spec() {
  SyntheticSpec spec;
  spec.schema = two_modality_schema(3, 6, 2, 3);
  spec.seed = 37;
  spec.unimodal_weights.emplace("text", seeded_weights(301, 3, 6, 1.5));
  spec.unimodal_weights.emplace("image", seeded_weights(302, 3, 12, 1.5));
  spec.interactions = {{{"text", 0}, {"image", 1}, 1.5, 1}};
  spec.label_noise = 0.02;
  spec.bug = BugSpec{2, "image", "r1", 1.0, 0.45, std::nullopt};
  spec.n_train = 4000;
  spec.n_val = 4000;
  spec.n_test = 3000;
  return spec;
}

// ---------------------------------------------------------------------------
// JSON

namespace {

std::string kind_name(ModalityKind k) { return k == ModalityKind::kToken ? "token" : "continuous"; }

ModalityKind kind_from(const std::string& s) {
  if (s == "continuous") return ModalityKind::kContinuous;
  if (s == "token") return ModalityKind::kToken;
  throw Error(ErrorCode::kInvalidSpec, "unknown modality kind '" + s + "'");
}

json tensor_rows(const Tensor& t) {
  json rows = json::array();
  for (std::size_t r = 0; r < t.rows(); ++r) rows.push_back(t.row(r));
  return rows;
}

Tensor tensor_from_rows(const json& j, std::size_t rows, std::size_t cols) {
  if (!j.is_array() || j.size() != rows) throw Error(ErrorCode::kSchemaMismatch, "expected " + std::to_string(rows) + " rows");
  std::vector<double> values;
  values.reserve(rows * cols);
  for (const auto& r : j) {
    if (!r.is_array() || r.size() != cols) throw Error(ErrorCode::kSchemaMismatch, "expected rows of " + std::to_string(cols));
    for (const auto& v : r) values.push_back(v.get<double>());
  }
  return Tensor::matrix(rows, cols, std::move(values));
}

json atom_json(const ModalityAtom& a) { return {{"modality", a.modality}, {"atom", a.atom}}; }
ModalityAtom atom_from(const json& j) { return {j.at("modality").get<std::string>(), j.at("atom").get<std::size_t>()}; }

}  // namespace

json to_json(const DatasetSchema& schema) {
  json mods = json::array();
  for (const auto& m : schema.modalities) {
    mods.push_back({{"name", m.name}, {"atom_count", m.atom_count}, {"atom_dim", m.atom_dim}, {"kind", kind_name(m.kind)}});
  }
  json regions = json::object();
  for (const auto& [name, parts] : schema.regions) {
    json r = json::object();
    for (const auto& region : parts) r[region.name] = region.atoms;
    regions[name] = std::move(r);
  }
  return {{"modalities", mods}, {"num_classes", schema.num_classes}, {"regions", regions}};
}

DatasetSchema schema_from_json(const json& j) {
  try {
    DatasetSchema schema;
    for (const auto& m : j.at("modalities")) {
      schema.modalities.push_back({m.at("name").get<std::string>(), m.at("atom_count").get<std::size_t>(),
                                   m.at("atom_dim").get<std::size_t>(), kind_from(m.value("kind", "continuous"))});
    }
    schema.num_classes = j.at("num_classes").get<std::size_t>();
    if (j.contains("regions")) {
      for (const auto& [name, parts] : j.at("regions").items()) {
        std::vector<Region> regions;
        for (const auto& [rname, atoms] : parts.items()) regions.push_back({rname, atoms.get<std::vector<std::size_t>>()});
        schema.regions.emplace(name, std::move(regions));
      }
    }
    schema.validate();
    return schema;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kInvalidSpec, std::string("malformed schema: ") + e.what());
  }
}

json to_json(const InteractionPair& p) {
  return {{"a", atom_json(p.a)}, {"b", atom_json(p.b)}, {"strength", p.strength}, {"class", p.target_class}};
}

InteractionPair pair_from_json(const json& j) {
  return {atom_from(j.at("a")), atom_from(j.at("b")), j.at("strength").get<double>(), j.at("class").get<std::size_t>()};
}

json to_json(const DatapointMeta& meta) {
  json j = json::object();
  if (meta.clean_label) j["clean_label"] = *meta.clean_label;
  j["noise_flipped"] = meta.noise_flipped;
  j["corrupted"] = meta.corrupted;
  j["bug_affected"] = meta.bug_affected;
  j["region_active"] = meta.region_active;
  json pairs = json::array();
  for (const auto& p : meta.planted_pairs) pairs.push_back(to_json(p));
  j["planted_pairs"] = std::move(pairs);
  return j;
}

DatapointMeta meta_from_json(const json& j) {
  DatapointMeta meta;
  if (j.contains("clean_label")) meta.clean_label = j.at("clean_label").get<std::size_t>();
  meta.noise_flipped = j.value("noise_flipped", false);
  meta.corrupted = j.value("corrupted", false);
  meta.bug_affected = j.value("bug_affected", false);
  if (j.contains("region_active")) {
    meta.region_active = j.at("region_active").get<std::map<std::string, std::map<std::string, bool>>>();
  }
  if (j.contains("planted_pairs")) {
    for (const auto& p : j.at("planted_pairs")) meta.planted_pairs.push_back(pair_from_json(p));
  }
  return meta;
}

json to_json(const Datapoint& dp, const DatasetSchema& schema) {
  json mods = json::object();
  for (const auto& m : schema.modalities) mods[m.name] = tensor_rows(dp.modalities.find(m.name)->second);
  return {{"modalities", mods}, {"label", dp.label}, {"meta", to_json(dp.meta)}};
}

Datapoint datapoint_from_json(const json& j, const DatasetSchema& schema) {
  try {
    Datapoint dp;
    for (const auto& m : schema.modalities) {
      dp.modalities.emplace(m.name, tensor_from_rows(j.at("modalities").at(m.name), m.atom_count, m.atom_dim));
    }
    dp.label = j.at("label").get<std::size_t>();
    if (j.contains("meta")) dp.meta = meta_from_json(j.at("meta"));
    check_conforms(schema, dp);
    return dp;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kSchemaMismatch, std::string("malformed datapoint: ") + e.what());
  }
}

json to_json(const SyntheticSpec& spec) {
  json weights = json::object();
  for (const auto& [name, w] : spec.unimodal_weights) weights[name] = tensor_rows(w);
  json pairs = json::array();
  for (const auto& p : spec.interactions) pairs.push_back(to_json(p));
  json j = {{"schema", to_json(spec.schema)},
            {"seed", spec.seed},
            {"unimodal_weights", weights},
            {"interactions", pairs},
            {"label_noise", spec.label_noise},
            {"sizes", {{"train", spec.n_train}, {"val", spec.n_val}, {"test", spec.n_test}}}};
  if (spec.bug) {
    json bug = {{"target_class", spec.bug->target_class},
                {"modality", spec.bug->modality},
                {"region", spec.bug->region},
                {"corruption_rate", spec.bug->corruption_rate},
                {"active_threshold", spec.bug->active_threshold}};
    if (spec.bug->corrupt_to) bug["corrupt_to"] = *spec.bug->corrupt_to;
    j["bug"] = std::move(bug);
  }
  return j;
}

SyntheticSpec synthetic_spec_from_json(const json& j) {
  try {
    SyntheticSpec spec;
    spec.schema = schema_from_json(j.at("schema"));
    spec.seed = j.value("seed", std::uint64_t{0});
    if (j.contains("unimodal_weights")) {
      for (const auto& [name, rows] : j.at("unimodal_weights").items()) {
        spec.unimodal_weights.emplace(name, tensor_from_rows(rows, spec.schema.num_classes, spec.schema.modality(name).width()));
      }
    }
    if (j.contains("interactions")) {
      for (const auto& p : j.at("interactions")) spec.interactions.push_back(pair_from_json(p));
    }
    spec.label_noise = j.value("label_noise", 0.02);
    if (j.contains("bug") && !j.at("bug").is_null()) {
      const auto& b = j.at("bug");
      BugSpec bug;
      bug.target_class = b.at("target_class").get<std::size_t>();
      bug.modality = b.at("modality").get<std::string>();
      bug.region = b.at("region").get<std::string>();
      bug.corruption_rate = b.value("corruption_rate", 1.0);
      bug.active_threshold = b.value("active_threshold", 0.45);
      if (b.contains("corrupt_to")) bug.corrupt_to = b.at("corrupt_to").get<std::size_t>();
      spec.bug = bug;
    }
    if (j.contains("sizes")) {
      const auto& s = j.at("sizes");
      spec.n_train = s.value("train", spec.n_train);
      spec.n_val = s.value("val", spec.n_val);
      spec.n_test = s.value("test", spec.n_test);
    }
    spec.validate();
    return spec;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kInvalidSpec, std::string("malformed synthetic spec: ") + e.what());
  } catch (const Error& e) {
    if (e.code() == ErrorCode::kSchemaMismatch || e.code() == ErrorCode::kMissingGroundTruth) {
      throw Error(ErrorCode::kInvalidSpec, e.what());
    }
    throw;
  }
}

void write_split(const Dataset& dataset, const std::filesystem::path& file) {
  std::ofstream out(file);
  if (!out) throw Error(ErrorCode::kIoFailure, "cannot write " + file.string());
  for (const auto& dp : dataset.points) out << to_json(dp, dataset.schema).dump() << '\n';
  if (!out) throw Error(ErrorCode::kIoFailure, "write failed for " + file.string());
}

Dataset read_split(const DatasetSchema& schema, const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw Error(ErrorCode::kIoFailure, "cannot read " + file.string());
  Dataset dataset{schema, {}};
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      dataset.points.push_back(datapoint_from_json(json::parse(line), schema));
    } catch (const json::exception& e) {
      throw Error(ErrorCode::kIoFailure, file.string() + ": " + e.what());
    }
  }
  return dataset;
}

void write_splits(const SplitSet& splits, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw Error(ErrorCode::kIoFailure, "cannot create " + dir.string());
  {
    std::ofstream schema(dir / "schema.json");
    if (!schema) throw Error(ErrorCode::kIoFailure, "cannot write schema in " + dir.string());
    schema << to_json(splits.train.schema).dump(2) << '\n';
  }
  write_split(splits.train, dir / "train.jsonl");
  write_split(splits.val, dir / "val.jsonl");
  write_split(splits.test, dir / "test.jsonl");
}

SplitSet read_splits(const std::filesystem::path& dir) {
  std::ifstream in(dir / "schema.json");
  if (!in) throw Error(ErrorCode::kIoFailure, "no schema.json in " + dir.string());
  DatasetSchema schema;
  try {
    schema = schema_from_json(json::parse(in));
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kIoFailure, std::string("schema.json: ") + e.what());
  }
  SplitSet splits;
  splits.train = read_split(schema, dir / "train.jsonl");
  splits.val = read_split(schema, dir / "val.jsonl");
  splits.test = read_split(schema, dir / "test.jsonl");
  return splits;
}

}  // namespace mviz
