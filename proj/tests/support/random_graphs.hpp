#pragma once

#include <random>
#include <vector>

#include "mviz/autodiff.hpp"

namespace mviz::testing {

// Random smooth two-slot graph with a scalar output, used by the
// finite-difference property tests. Slots "a" and "b" are row vectors.
struct RandomGraph {
  ad::Graph graph;
  ad::Bindings bindings;
};

inline Tensor random_matrix(std::mt19937_64& rng, std::size_t rows, std::size_t cols, double scale) {
  std::uniform_real_distribution<double> u(-scale, scale);
  std::vector<double> v(rows * cols);
  for (double& x : v) x = u(rng);
  return Tensor::matrix(rows, cols, std::move(v));
}

inline RandomGraph make_random_graph(std::uint64_t seed, int depth = 6) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> dim(2, 4);
  std::uniform_real_distribution<double> unit(-2.0, 2.0);

  RandomGraph out;
  ad::Graph& g = out.graph;
  const std::size_t na = dim(rng), nb = dim(rng), width = dim(rng);
  const ad::Node a = g.input("a");
  const ad::Node b = g.input("b");
  {
    std::vector<double> av(na), bv(nb);
    for (double& x : av) x = unit(rng);
    for (double& x : bv) x = unit(rng);
    out.bindings.emplace("a", Tensor::matrix(1, na, av));
    out.bindings.emplace("b", Tensor::matrix(1, nb, bv));
  }

  auto project = [&](ad::Node x, std::size_t in) {
    const ad::Node w = g.constant(random_matrix(rng, width, in, 0.8));
    const ad::Node bias = g.constant(random_matrix(rng, 1, width, 0.3).reshaped({width}));
    return g.affine(x, w, bias);
  };

  std::vector<ad::Node> pool{project(a, na), project(b, nb)};
  std::uniform_int_distribution<int> op_pick(0, 9);
  for (int step = 0; step < depth; ++step) {
    std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
    const ad::Node x = pool[pick(rng)];
    const ad::Node y = pool[pick(rng)];
    ad::Node next;
    switch (op_pick(rng)) {
      case 0: next = g.add(x, y); break;
      case 1: next = g.sub(x, y); break;
      case 2: next = g.mul(x, y); break;
      case 3: next = g.tanh(x); break;
      case 4: next = g.softplus(x, 10.0); break;
      case 5: next = g.sigmoid(x, 2.0); break;
      case 6: next = g.scale(g.add_scalar(x, 0.5), 0.7); break;
      case 7: next = g.matmul(x, g.constant(random_matrix(rng, width, width, 0.6))); break;
      case 8: {
        const ad::Node parts[] = {x, y};
        const ad::Node cat = g.concat_cols(parts);
        std::vector<std::size_t> cols(width);
        for (std::size_t i = 0; i < width; ++i) cols[i] = (i * 2 + 1) % (2 * width);
        next = g.select_cols(cat, cols);
        break;
      }
      default: {
        const ad::Node t = g.transpose(x);
        next = g.transpose(g.mul(t, g.transpose(y)));
        break;
      }
    }
    pool.push_back(next);
  }
  // Guarantee both slots reach the output with an interaction.
  const ad::Node mixed = g.mul(g.tanh(pool[0]), g.softplus(pool[1], 10.0));
  const ad::Node parts[] = {pool.back(), mixed};
  g.set_output(g.sum(g.concat_cols(parts)));
  return out;
}

}  // namespace mviz::testing
