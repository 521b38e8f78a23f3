#pragma once

#include <functional>
#include <random>
#include <string>
#include <vector>

#include "mviz/model.hpp"

namespace mviz::testing {

// Continuous modalities "a" and "b" with one component per atom.
inline DatasetSchema scalar_schema(std::size_t a_atoms, std::size_t b_atoms, std::size_t classes = 2) {
  DatasetSchema s;
  s.modalities = {{"a", a_atoms, 1, ModalityKind::kContinuous}, {"b", b_atoms, 1, ModalityKind::kContinuous}};
  s.num_classes = classes;
  return s;
}

inline Datapoint scalar_point(const std::vector<double>& a, const std::vector<double>& b, std::size_t label = 0) {
  Datapoint dp;
  dp.modalities.emplace("a", Tensor::matrix(a.size(), 1, a));
  dp.modalities.emplace("b", Tensor::matrix(b.size(), 1, b));
  dp.label = label;
  return dp;
}

// Model whose class-0 logit is a hand-written scalar function of the two
// modality rows; class 1 logit is zero.
using ScalarBody = std::function<ad::Node(ad::Graph&, ad::Node a, ad::Node b)>;

inline Model scalar_model(const DatasetSchema& schema, ScalarBody body) {
  LayerBuilder builder = [body](ad::Graph& g, const std::map<std::string, ad::Node>& in,
                                const std::map<std::string, ad::Node>&) {
    return std::map<std::string, ad::Node>{{"penultimate", body(g, in.at("a"), in.at("b"))}};
  };
  Tensor head = Tensor::zeros({schema.num_classes, 1});
  head.at(0, 0) = 1.0;
  ParamSet params;
  params.emplace("head.W", std::move(head));
  params.emplace("head.b", Tensor::zeros({schema.num_classes}));
  return Model::custom(schema, builder, std::move(params));
}

// Row [B, n] times a constant column [n, 1].
inline ad::Node weighted_sum(ad::Graph& g, ad::Node x, const std::vector<double>& w) {
  return g.matmul(x, g.constant(Tensor::matrix(w.size(), 1, w)));
}

inline Datapoint random_point(const DatasetSchema& schema, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Datapoint dp;
  for (const auto& m : schema.modalities) {
    std::vector<double> v(m.width(), 0.0);
    if (m.kind == ModalityKind::kToken) {
      std::uniform_int_distribution<std::size_t> tok(0, m.atom_dim - 1);
      for (std::size_t i = 0; i < m.atom_count; ++i) v[i * m.atom_dim + tok(rng)] = 1.0;
    } else {
      for (double& x : v) x = u(rng);
    }
    dp.modalities.emplace(m.name, Tensor::matrix(m.atom_count, m.atom_dim, std::move(v)));
  }
  return dp;
}

inline Model random_model(const DatasetSchema& schema, Architecture arch, std::uint64_t seed) {
  ModelConfig cfg;
  cfg.architecture = arch;
  cfg.seed = seed;
  cfg.hidden_dim = 16;
  return Model::create(schema, cfg);
}

}  // namespace mviz::testing
