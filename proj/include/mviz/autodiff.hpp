#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mviz/tensor.hpp"

// Reverse-mode automatic differentiation over a symbolic graph of dense
// tensors. The backward pass appends its adjoint computation to the same
// graph using the same primitive set, so gradients can be differentiated
// again (exact second-order derivatives).
namespace mviz::ad {

enum class Op : std::uint8_t {
  kInput,
  kConstant,
  kAdd,
  kSub,
  kMul,
  kScale,
  kAddScalar,
  kMatMul,
  kTranspose,
  kAffine,
  kSum,
  kSumRows,
  kBroadcastRows,
  kFill,
  kTanh,
  kSoftplus,
  kSigmoid,
  kRelu,
  kStep,
  kAbs,
  kSign,
  kSelectCols,
  kScatterCols,
  kConcatCols,
  kReshapeCols,
  kReshapeLike,
  kFlatten,
  kSlicePart,
  kPadPart,
};

std::string_view op_name(Op op);

struct Node {
  std::uint32_t index = 0;
  friend bool operator==(Node, Node) = default;
};

struct NodeDef {
  Op op = Op::kConstant;
  std::vector<Node> args;
  double param = 0.0;                  // scale factor, scalar offset, or sharpness
  std::vector<std::size_t> indices;    // column set for select/scatter
  std::string name;                    // input slot name
  std::shared_ptr<const Tensor> value; // constant payload
};

using Bindings = std::map<std::string, Tensor, std::less<>>;

class Graph {
 public:
  Node input(std::string name);
  Node constant(Tensor value);

  Node add(Node a, Node b);
  Node sub(Node a, Node b);
  Node mul(Node a, Node b);
  Node scale(Node a, double factor);
  Node add_scalar(Node a, double offset);
  Node matmul(Node a, Node b);
  Node transpose(Node a);
  // x [B,in], w [out,in], b [out] -> x w^T + b
  Node affine(Node x, Node w, Node b);
  Node sum(Node a);
  Node sum_rows(Node a);
  Node broadcast_rows(Node row, Node like);
  Node fill(Node scalar, Node like);
  Node zeros_like(Node like);
  Node tanh(Node a);
  // log(1 + exp(k a)) / k
  Node softplus(Node a, double sharpness);
  // 1 / (1 + exp(-k a))
  Node sigmoid(Node a, double sharpness);
  Node relu(Node a);
  Node step(Node a);
  Node abs(Node a);
  Node sign(Node a);
  Node select_cols(Node a, std::vector<std::size_t> cols);
  Node scatter_cols(Node a, std::vector<std::size_t> cols, Node like);
  Node concat_cols(std::span<const Node> parts);
  Node reshape_cols(Node a, std::size_t cols);
  Node reshape_like(Node a, Node like);
  Node flatten(Node a);
  // Column block of `a` occupied by parts[part] in concat_cols(parts), and
  // its adjoint (zero-padding back to the concatenated width).
  Node slice_part(Node a, std::span<const Node> parts, std::size_t part);
  Node pad_part(Node a, std::span<const Node> parts, std::size_t part);

  void set_output(Node n);
  Node output() const;
  bool has_output() const noexcept { return output_.has_value(); }

  std::optional<Node> find_input(std::string_view name) const;
  Node require_input(std::string_view name) const;
  std::vector<std::string> input_names() const;

  std::size_t size() const noexcept { return nodes_.size(); }
  const NodeDef& def(Node n) const { return nodes_.at(n.index); }

  // True when `n` has a differentiable path from `source`.
  bool depends_on(Node n, Node source) const;

  // Appends nodes computing d<seed, out>/d wrt_k for every k. The seed node
  // must have the shape of `out`. Slots with no differentiable path to `out`
  // receive an explicit zeros node.
  std::vector<Node> backward(Node out, Node seed, std::span<const Node> wrt);

  // Appends s = sum_{i in first_indices} agg(d out/d first)_i and returns
  // ds/d second. `out` must evaluate to a single value.
  Node second_order(Node out, Node first, std::span<const std::size_t> first_indices, Node second,
                    bool absolute_aggregation);

 private:
  Node push(NodeDef def);

  std::vector<NodeDef> nodes_;
  std::optional<Node> output_;
};

// Evaluates the graph output. Throws UnboundInput / ShapeMismatch.
Tensor evaluate(const Graph& graph, const Bindings& bindings);
std::vector<Tensor> evaluate(const Graph& graph, const Bindings& bindings, std::span<const Node> outputs);

struct GradientResult {
  std::string wrt;
  Tensor values;
};

GradientResult gradient(const Graph& graph, const Bindings& bindings, std::string_view wrt,
                        std::optional<std::size_t> seed_output_index = std::nullopt);

enum class Aggregation { kSigned, kAbsolute };

GradientResult second_order_gradient(const Graph& graph, const Bindings& bindings, std::string_view wrt_first,
                                     std::span<const std::size_t> first_atom_indices, std::string_view wrt_second,
                                     std::optional<std::size_t> seed_output_index = std::nullopt,
                                     Aggregation aggregation = Aggregation::kSigned);

struct FiniteDifferenceReport {
  double max_abs_error = 0.0;
  // |analytic - numeric| / max(1, |numeric|)
  double max_rel_error = 0.0;
};

FiniteDifferenceReport finite_difference_report(const Graph& graph, const Bindings& bindings, std::string_view wrt,
                                                double eps,
                                                std::optional<std::size_t> seed_output_index = std::nullopt);

double finite_difference_check(const Graph& graph, const Bindings& bindings, std::string_view wrt, double eps,
                               std::optional<std::size_t> seed_output_index = std::nullopt);

// Differences the first-order aggregate s = sum_{i in I} df/d first_i along
// each component of `wrt_second` and compares with second_order_gradient.
FiniteDifferenceReport second_order_finite_difference_report(
    const Graph& graph, const Bindings& bindings, std::string_view wrt_first,
    std::span<const std::size_t> first_atom_indices, std::string_view wrt_second, double eps,
    std::optional<std::size_t> seed_output_index = std::nullopt);

}  // namespace mviz::ad
