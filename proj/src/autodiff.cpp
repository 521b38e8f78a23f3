#include "mviz/autodiff.hpp"

#include <algorithm>
#include <cmath>

#include "mviz/error.hpp"

namespace mviz::ad {

std::string_view op_name(Op op) {
  switch (op) {
    case Op::kInput: return "input";
    case Op::kConstant: return "constant";
    case Op::kAdd: return "add";
    case Op::kSub: return "sub";
    case Op::kMul: return "mul";
    case Op::kScale: return "scale";
    case Op::kAddScalar: return "add_scalar";
    case Op::kMatMul: return "matmul";
    case Op::kTranspose: return "transpose";
    case Op::kAffine: return "affine";
    case Op::kSum: return "sum";
    case Op::kSumRows: return "sum_rows";
    case Op::kBroadcastRows: return "broadcast_rows";
    case Op::kFill: return "fill";
    case Op::kTanh: return "tanh";
    case Op::kSoftplus: return "softplus";
    case Op::kSigmoid: return "sigmoid";
    case Op::kRelu: return "relu";
    case Op::kStep: return "step";
    case Op::kAbs: return "abs";
    case Op::kSign: return "sign";
    case Op::kSelectCols: return "select_cols";
    case Op::kScatterCols: return "scatter_cols";
    case Op::kConcatCols: return "concat_cols";
    case Op::kReshapeCols: return "reshape_cols";
    case Op::kReshapeLike: return "reshape_like";
    case Op::kFlatten: return "flatten";
    case Op::kSlicePart: return "slice_part";
    case Op::kPadPart: return "pad_part";
  }
  return "?";
}

namespace {

// Operands that only contribute a shape carry no derivative.
bool differentiable_arg(Op op, std::size_t k) {
  switch (op) {
    case Op::kInput:
    case Op::kConstant:
    case Op::kStep:
    case Op::kSign:
      return false;
    case Op::kFill:
    case Op::kBroadcastRows:
    case Op::kScatterCols:
    case Op::kReshapeLike:
    case Op::kSlicePart:
    case Op::kPadPart:
      return k == 0;
    default:
      return true;
  }
}

[[noreturn]] void shape_error(Op op, const std::string& detail) {
  throw Error(ErrorCode::kShapeMismatch, std::string(op_name(op)) + ": " + detail);
}

void require_same_shape(Op op, const Tensor& a, const Tensor& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    shape_error(op, shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
}

template <class F>
Tensor map_unary(const Tensor& a, F f) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i]);
  return Tensor(a.shape(), std::move(out));
}

template <class F>
Tensor map_binary(Op op, const Tensor& a, const Tensor& b, F f) {
  require_same_shape(op, a, b);
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i], b[i]);
  return Tensor(a.shape(), std::move(out));
}

Tensor matmul_kernel(const Tensor& a, const Tensor& b) {
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) shape_error(Op::kMatMul, shape_string(a.shape()) + " x " + shape_string(b.shape()));
  std::vector<double> out(m * n, 0.0);
  const auto ad = a.data();
  const auto bd = b.data();
  for (std::size_t i = 0; i < m; ++i) {
    double* orow = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ad[i * k + p];
      if (av == 0.0) continue;
      const double* brow = bd.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  return Tensor({m, n}, std::move(out));
}

Tensor transpose_kernel(const Tensor& a) {
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a[i * n + j];
  return Tensor({n, m}, std::move(out));
}

Tensor affine_kernel(const Tensor& x, const Tensor& w, const Tensor& b) {
  const std::size_t batch = x.rows(), in = x.cols(), out_dim = w.rows();
  if (w.cols() != in || b.size() != out_dim) {
    shape_error(Op::kAffine, "x " + shape_string(x.shape()) + ", w " + shape_string(w.shape()) + ", b " +
                                 shape_string(b.shape()));
  }
  std::vector<double> out(batch * out_dim);
  for (std::size_t r = 0; r < batch; ++r) {
    const double* xr = x.data().data() + r * in;
    for (std::size_t o = 0; o < out_dim; ++o) {
      const double* wr = w.data().data() + o * in;
      double acc = b[o];
      for (std::size_t i = 0; i < in; ++i) acc += wr[i] * xr[i];
      out[r * out_dim + o] = acc;
    }
  }
  return Tensor({batch, out_dim}, std::move(out));
}

double softplus_value(double a, double k) {
  const double z = k * a;
  return (std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z)))) / k;
}

double sigmoid_value(double a, double k) {
  const double z = k * a;
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

Shape row_shape_like(const Tensor& a, std::size_t cols) {
  if (a.rank() == 2) return {a.rows(), cols};
  return {cols};
}

Tensor compute(const NodeDef& def, const std::vector<const Tensor*>& in) {
  const Op op = def.op;
  switch (op) {
    case Op::kInput:
    case Op::kConstant:
      break;
    case Op::kAdd: return map_binary(op, *in[0], *in[1], [](double a, double b) { return a + b; });
    case Op::kSub: return map_binary(op, *in[0], *in[1], [](double a, double b) { return a - b; });
    case Op::kMul: return map_binary(op, *in[0], *in[1], [](double a, double b) { return a * b; });
    case Op::kScale: {
      const double c = def.param;
      return map_unary(*in[0], [c](double a) { return c * a; });
    }
    case Op::kAddScalar: {
      const double c = def.param;
      return map_unary(*in[0], [c](double a) { return a + c; });
    }
    case Op::kMatMul: return matmul_kernel(*in[0], *in[1]);
    case Op::kTranspose: return transpose_kernel(*in[0]);
    case Op::kAffine: return affine_kernel(*in[0], *in[1], *in[2]);
    case Op::kSum: {
      double acc = 0.0;
      for (double v : in[0]->data()) acc += v;
      return Tensor::scalar(acc);
    }
    case Op::kSumRows: {
      const Tensor& a = *in[0];
      std::vector<double> out(a.cols(), 0.0);
      for (std::size_t r = 0; r < a.rows(); ++r)
        for (std::size_t c = 0; c < a.cols(); ++c) out[c] += a.at(r, c);
      return Tensor({1, a.cols()}, std::move(out));
    }
    case Op::kBroadcastRows: {
      const Tensor& v = *in[0];
      const Tensor& like = *in[1];
      if (v.size() != like.cols()) shape_error(op, shape_string(v.shape()) + " onto " + shape_string(like.shape()));
      std::vector<double> out(like.size());
      for (std::size_t r = 0; r < like.rows(); ++r)
        std::copy(v.data().begin(), v.data().end(), out.begin() + static_cast<std::ptrdiff_t>(r * like.cols()));
      return Tensor(like.shape(), std::move(out));
    }
    case Op::kFill: {
      if (in[0]->size() != 1) shape_error(op, "fill value must be a single element");
      return Tensor::filled(in[1]->shape(), (*in[0])[0]);
    }
    case Op::kTanh: return map_unary(*in[0], [](double a) { return std::tanh(a); });
    case Op::kSoftplus: {
      const double k = def.param;
      return map_unary(*in[0], [k](double a) { return softplus_value(a, k); });
    }
    case Op::kSigmoid: {
      const double k = def.param;
      return map_unary(*in[0], [k](double a) { return sigmoid_value(a, k); });
    }
    case Op::kRelu: return map_unary(*in[0], [](double a) { return a > 0.0 ? a : 0.0; });
    case Op::kStep: return map_unary(*in[0], [](double a) { return a > 0.0 ? 1.0 : 0.0; });
    case Op::kAbs: return map_unary(*in[0], [](double a) { return std::abs(a); });
    case Op::kSign: return map_unary(*in[0], [](double a) { return a > 0.0 ? 1.0 : (a < 0.0 ? -1.0 : 0.0); });
    case Op::kSelectCols: {
      const Tensor& a = *in[0];
      for (std::size_t c : def.indices)
        if (c >= a.cols()) shape_error(op, "column " + std::to_string(c) + " of " + shape_string(a.shape()));
      std::vector<double> out;
      out.reserve(a.rows() * def.indices.size());
      for (std::size_t r = 0; r < a.rows(); ++r)
        for (std::size_t c : def.indices) out.push_back(a.at(r, c));
      return Tensor(row_shape_like(a, def.indices.size()), std::move(out));
    }
    case Op::kScatterCols: {
      const Tensor& v = *in[0];
      const Tensor& like = *in[1];
      if (v.cols() != def.indices.size() || v.rows() != like.rows()) {
        shape_error(op, shape_string(v.shape()) + " into " + shape_string(like.shape()));
      }
      Tensor out = Tensor::zeros(like.shape());
      for (std::size_t r = 0; r < v.rows(); ++r)
        for (std::size_t j = 0; j < def.indices.size(); ++j) {
          if (def.indices[j] >= like.cols()) shape_error(op, "column out of range");
          out.at(r, def.indices[j]) += v.at(r, j);
        }
      return out;
    }
    case Op::kConcatCols: {
      const std::size_t rows = in[0]->rows();
      std::size_t cols = 0;
      bool all_rank1 = true;
      for (const Tensor* t : in) {
        if (t->rows() != rows) shape_error(op, "row count mismatch");
        cols += t->cols();
        all_rank1 = all_rank1 && t->rank() <= 1;
      }
      std::vector<double> out(rows * cols);
      std::size_t offset = 0;
      for (const Tensor* t : in) {
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < t->cols(); ++c) out[r * cols + offset + c] = t->at(r, c);
        offset += t->cols();
      }
      return all_rank1 ? Tensor({cols}, std::move(out)) : Tensor({rows, cols}, std::move(out));
    }
    case Op::kReshapeCols: {
      const auto cols = static_cast<std::size_t>(def.param);
      if (cols == 0 || in[0]->size() % cols != 0) shape_error(op, "cannot split into columns of " + std::to_string(cols));
      return in[0]->reshaped({in[0]->size() / cols, cols});
    }
    case Op::kReshapeLike: {
      if (in[0]->size() != in[1]->size()) shape_error(op, shape_string(in[0]->shape()) + " as " + shape_string(in[1]->shape()));
      return in[0]->reshaped(in[1]->shape());
    }
    case Op::kFlatten: return in[0]->reshaped({1, in[0]->size()});
    case Op::kSlicePart:
    case Op::kPadPart: {
      const auto part = static_cast<std::size_t>(def.param);
      std::size_t offset = 0, total = 0;
      for (std::size_t k = 1; k < in.size(); ++k) {
        if (k - 1 < part) offset += in[k]->cols();
        total += in[k]->cols();
      }
      const Tensor& x = *in[0];
      const std::size_t width = in[part + 1]->cols();
      const std::size_t rows = x.rows();
      if (op == Op::kSlicePart) {
        if (x.cols() != total) shape_error(op, "upstream width " + std::to_string(x.cols()) + " != " + std::to_string(total));
        std::vector<double> out(rows * width);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < width; ++c) out[r * width + c] = x.at(r, offset + c);
        return Tensor(in[part + 1]->rank() == 2 ? Shape{rows, width} : Shape{width}, std::move(out));
      }
      if (x.cols() != width) shape_error(op, "part width " + std::to_string(x.cols()) + " != " + std::to_string(width));
      std::vector<double> out(rows * total, 0.0);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < width; ++c) out[r * total + offset + c] = x.at(r, c);
      return Tensor({rows, total}, std::move(out));
    }
  }
  throw Error(ErrorCode::kInvalidArgument, "cannot compute op " + std::string(op_name(op)));
}

NodeDef make_def(Op op, std::vector<Node> args, double param = 0.0) {
  NodeDef d;
  d.op = op;
  d.args = std::move(args);
  d.param = param;
  return d;
}

}  // namespace

Node Graph::push(NodeDef def) {
  for (Node a : def.args) {
    if (a.index >= nodes_.size()) throw Error(ErrorCode::kInvalidArgument, "operand refers to a later node");
  }
  nodes_.push_back(std::move(def));
  return Node{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Node Graph::input(std::string name) {
  if (find_input(name)) throw Error(ErrorCode::kInvalidArgument, "duplicate input slot '" + name + "'");
  NodeDef d;
  d.op = Op::kInput;
  d.name = std::move(name);
  return push(std::move(d));
}

Node Graph::constant(Tensor value) {
  NodeDef d;
  d.op = Op::kConstant;
  d.value = std::make_shared<const Tensor>(std::move(value));
  return push(std::move(d));
}

Node Graph::add(Node a, Node b) { return push(make_def(Op::kAdd, {a, b})); }
Node Graph::sub(Node a, Node b) { return push(make_def(Op::kSub, {a, b})); }
Node Graph::mul(Node a, Node b) { return push(make_def(Op::kMul, {a, b})); }
Node Graph::scale(Node a, double factor) { return push(make_def(Op::kScale, {a}, factor)); }
Node Graph::add_scalar(Node a, double offset) { return push(make_def(Op::kAddScalar, {a}, offset)); }
Node Graph::matmul(Node a, Node b) { return push(make_def(Op::kMatMul, {a, b})); }
Node Graph::transpose(Node a) { return push(make_def(Op::kTranspose, {a})); }
Node Graph::affine(Node x, Node w, Node b) { return push(make_def(Op::kAffine, {x, w, b})); }
Node Graph::sum(Node a) { return push(make_def(Op::kSum, {a})); }
Node Graph::sum_rows(Node a) { return push(make_def(Op::kSumRows, {a})); }
Node Graph::broadcast_rows(Node row, Node like) { return push(make_def(Op::kBroadcastRows, {row, like})); }
Node Graph::fill(Node scalar, Node like) { return push(make_def(Op::kFill, {scalar, like})); }
Node Graph::zeros_like(Node like) { return fill(constant(Tensor::scalar(0.0)), like); }
Node Graph::tanh(Node a) { return push(make_def(Op::kTanh, {a})); }
Node Graph::softplus(Node a, double sharpness) { return push(make_def(Op::kSoftplus, {a}, sharpness)); }
Node Graph::sigmoid(Node a, double sharpness) { return push(make_def(Op::kSigmoid, {a}, sharpness)); }
Node Graph::relu(Node a) { return push(make_def(Op::kRelu, {a})); }
Node Graph::step(Node a) { return push(make_def(Op::kStep, {a})); }
Node Graph::abs(Node a) { return push(make_def(Op::kAbs, {a})); }
Node Graph::sign(Node a) { return push(make_def(Op::kSign, {a})); }

Node Graph::select_cols(Node a, std::vector<std::size_t> cols) {
  NodeDef d = make_def(Op::kSelectCols, {a});
  d.indices = std::move(cols);
  return push(std::move(d));
}

Node Graph::scatter_cols(Node a, std::vector<std::size_t> cols, Node like) {
  NodeDef d = make_def(Op::kScatterCols, {a, like});
  d.indices = std::move(cols);
  return push(std::move(d));
}

Node Graph::concat_cols(std::span<const Node> parts) {
  if (parts.empty()) throw Error(ErrorCode::kInvalidArgument, "concat of nothing");
  return push(make_def(Op::kConcatCols, {parts.begin(), parts.end()}));
}

Node Graph::reshape_cols(Node a, std::size_t cols) {
  return push(make_def(Op::kReshapeCols, {a}, static_cast<double>(cols)));
}

Node Graph::reshape_like(Node a, Node like) { return push(make_def(Op::kReshapeLike, {a, like})); }
Node Graph::flatten(Node a) { return push(make_def(Op::kFlatten, {a})); }

Node Graph::slice_part(Node a, std::span<const Node> parts, std::size_t part) {
  NodeDef d = make_def(Op::kSlicePart, {a}, static_cast<double>(part));
  d.args.insert(d.args.end(), parts.begin(), parts.end());
  return push(std::move(d));
}

Node Graph::pad_part(Node a, std::span<const Node> parts, std::size_t part) {
  NodeDef d = make_def(Op::kPadPart, {a}, static_cast<double>(part));
  d.args.insert(d.args.end(), parts.begin(), parts.end());
  return push(std::move(d));
}

void Graph::set_output(Node n) {
  if (n.index >= nodes_.size()) throw Error(ErrorCode::kInvalidArgument, "output node out of range");
  output_ = n;
}

Node Graph::output() const {
  if (!output_) throw Error(ErrorCode::kInvalidArgument, "graph has no output");
  return *output_;
}

std::optional<Node> Graph::find_input(std::string_view name) const {
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    if (nodes_[i].op == Op::kInput && nodes_[i].name == name) return Node{static_cast<std::uint32_t>(i)};
  }
  return std::nullopt;
}

Node Graph::require_input(std::string_view name) const {
  auto n = find_input(name);
  if (!n) throw Error(ErrorCode::kUnboundInput, "no input slot named '" + std::string(name) + "'");
  return *n;
}

std::vector<std::string> Graph::input_names() const {
  std::vector<std::string> names;
  for (const auto& d : nodes_)
    if (d.op == Op::kInput) names.push_back(d.name);
  return names;
}

bool Graph::depends_on(Node n, Node source) const {
  std::vector<char> dep(n.index + 1, 0);
  if (source.index > n.index) return false;
  dep[source.index] = 1;
  for (std::size_t i = source.index + 1; i <= n.index; ++i) {
    const NodeDef& d = nodes_[i];
    for (std::size_t k = 0; k < d.args.size(); ++k) {
      if (differentiable_arg(d.op, k) && dep[d.args[k].index]) {
        dep[i] = 1;
        break;
      }
    }
  }
  return dep[n.index] != 0;
}

std::vector<Node> Graph::backward(Node out, Node seed, std::span<const Node> wrt) {
  const std::size_t n = nodes_.size();
  if (out.index >= n || seed.index >= n) throw Error(ErrorCode::kInvalidArgument, "backward: node out of range");

  // Nodes reachable from any wrt slot along differentiable edges.
  std::vector<char> dep(n, 0);
  for (Node w : wrt) dep[w.index] = 1;
  for (std::size_t i = 0; i < n; ++i) {
    if (dep[i]) continue;
    const NodeDef& d = nodes_[i];
    for (std::size_t k = 0; k < d.args.size(); ++k) {
      if (differentiable_arg(d.op, k) && dep[d.args[k].index]) {
        dep[i] = 1;
        break;
      }
    }
  }

  std::vector<std::optional<Node>> adj(n);
  if (dep[out.index]) adj[out.index] = seed;

  auto accumulate = [&](Node target, Node contribution) {
    auto& slot = adj[target.index];
    slot = slot ? add(*slot, contribution) : contribution;
  };

  for (std::size_t idx = out.index + 1; idx-- > 0;) {
    if (!adj[idx] || !dep[idx]) continue;
    // Copy: push() may reallocate nodes_.
    const NodeDef d = nodes_[idx];
    const Node self{static_cast<std::uint32_t>(idx)};
    const Node up = *adj[idx];
    auto wants = [&](std::size_t k) { return differentiable_arg(d.op, k) && dep[d.args[k].index]; };

    switch (d.op) {
      case Op::kInput:
      case Op::kConstant:
      case Op::kStep:
      case Op::kSign:
        break;
      case Op::kAdd:
        if (wants(0)) accumulate(d.args[0], up);
        if (wants(1)) accumulate(d.args[1], up);
        break;
      case Op::kSub:
        if (wants(0)) accumulate(d.args[0], up);
        if (wants(1)) accumulate(d.args[1], scale(up, -1.0));
        break;
      case Op::kMul:
        if (wants(0)) accumulate(d.args[0], mul(up, d.args[1]));
        if (wants(1)) accumulate(d.args[1], mul(up, d.args[0]));
        break;
      case Op::kScale:
        accumulate(d.args[0], scale(up, d.param));
        break;
      case Op::kAddScalar:
        accumulate(d.args[0], up);
        break;
      case Op::kMatMul:
        if (wants(0)) accumulate(d.args[0], reshape_like(matmul(up, transpose(d.args[1])), d.args[0]));
        if (wants(1)) accumulate(d.args[1], reshape_like(matmul(transpose(d.args[0]), up), d.args[1]));
        break;
      case Op::kTranspose:
        accumulate(d.args[0], reshape_like(transpose(up), d.args[0]));
        break;
      case Op::kAffine:
        if (wants(0)) accumulate(d.args[0], reshape_like(matmul(up, d.args[1]), d.args[0]));
        if (wants(1)) accumulate(d.args[1], matmul(transpose(up), d.args[0]));
        if (wants(2)) accumulate(d.args[2], reshape_like(sum_rows(up), d.args[2]));
        break;
      case Op::kSum:
        accumulate(d.args[0], fill(up, d.args[0]));
        break;
      case Op::kSumRows:
        accumulate(d.args[0], broadcast_rows(up, d.args[0]));
        break;
      case Op::kBroadcastRows:
        accumulate(d.args[0], reshape_like(sum_rows(up), d.args[0]));
        break;
      case Op::kFill:
        accumulate(d.args[0], reshape_like(sum(up), d.args[0]));
        break;
      case Op::kTanh: {
        // 1 - tanh^2
        const Node slope = add_scalar(scale(mul(self, self), -1.0), 1.0);
        accumulate(d.args[0], mul(up, slope));
        break;
      }
      case Op::kSoftplus:
        accumulate(d.args[0], mul(up, sigmoid(d.args[0], d.param)));
        break;
      case Op::kSigmoid: {
        // k s (1 - s)
        const Node slope = scale(mul(self, add_scalar(scale(self, -1.0), 1.0)), d.param);
        accumulate(d.args[0], mul(up, slope));
        break;
      }
      case Op::kRelu:
        accumulate(d.args[0], mul(up, step(d.args[0])));
        break;
      case Op::kAbs:
        accumulate(d.args[0], mul(up, sign(d.args[0])));
        break;
      case Op::kSelectCols:
        accumulate(d.args[0], scatter_cols(up, d.indices, d.args[0]));
        break;
      case Op::kScatterCols:
        accumulate(d.args[0], reshape_like(select_cols(up, d.indices), d.args[0]));
        break;
      case Op::kConcatCols:
        for (std::size_t k = 0; k < d.args.size(); ++k) {
          if (wants(k)) accumulate(d.args[k], slice_part(up, d.args, k));
        }
        break;
      case Op::kSlicePart:
        accumulate(d.args[0], pad_part(up, {d.args.begin() + 1, d.args.end()}, static_cast<std::size_t>(d.param)));
        break;
      case Op::kPadPart:
        accumulate(d.args[0], slice_part(up, {d.args.begin() + 1, d.args.end()}, static_cast<std::size_t>(d.param)));
        break;
      case Op::kReshapeCols:
      case Op::kReshapeLike:
      case Op::kFlatten:
        accumulate(d.args[0], reshape_like(up, d.args[0]));
        break;
    }
  }

  std::vector<Node> grads;
  grads.reserve(wrt.size());
  for (Node w : wrt) grads.push_back(adj[w.index] ? *adj[w.index] : zeros_like(w));
  return grads;
}

Node Graph::second_order(Node out, Node first, std::span<const std::size_t> first_indices, Node second,
                         bool absolute_aggregation) {
  if (first_indices.empty()) throw Error(ErrorCode::kEmptyAtomSet, "no first-order components selected");
  const Node one = constant(Tensor::scalar(1.0));
  const Node seed = fill(one, out);
  const Node grad_first = backward(out, seed, std::span<const Node>(&first, 1)).front();
  Node picked = select_cols(flatten(grad_first), {first_indices.begin(), first_indices.end()});
  if (absolute_aggregation) picked = abs(picked);
  const Node aggregate = sum(picked);
  const Node seed2 = fill(one, aggregate);
  return backward(aggregate, seed2, std::span<const Node>(&second, 1)).front();
}

// ---------------------------------------------------------------------------

std::vector<Tensor> evaluate(const Graph& graph, const Bindings& bindings, std::span<const Node> outputs) {
  const std::size_t n = graph.size();
  std::vector<char> needed(n, 0);
  for (Node o : outputs) {
    if (o.index >= n) throw Error(ErrorCode::kInvalidArgument, "evaluate: node out of range");
    needed[o.index] = 1;
  }
  for (std::size_t i = n; i-- > 0;) {
    if (!needed[i]) continue;
    for (Node a : graph.def(Node{static_cast<std::uint32_t>(i)}).args) needed[a.index] = 1;
  }

  std::vector<std::optional<Tensor>> values(n);
  std::vector<const Tensor*> operands;
  for (std::size_t i = 0; i < n; ++i) {
    if (!needed[i]) continue;
    const NodeDef& d = graph.def(Node{static_cast<std::uint32_t>(i)});
    if (d.op == Op::kInput) {
      auto it = bindings.find(d.name);
      if (it == bindings.end()) throw Error(ErrorCode::kUnboundInput, "input slot '" + d.name + "' is not bound");
      values[i] = it->second;
      continue;
    }
    if (d.op == Op::kConstant) {
      values[i] = *d.value;
      continue;
    }
    operands.clear();
    for (Node a : d.args) operands.push_back(&*values[a.index]);
    values[i] = compute(d, operands);
  }

  std::vector<Tensor> result;
  result.reserve(outputs.size());
  for (Node o : outputs) result.push_back(*values[o.index]);
  return result;
}

Tensor evaluate(const Graph& graph, const Bindings& bindings) {
  const Node out = graph.output();
  return std::move(evaluate(graph, bindings, std::span<const Node>(&out, 1)).front());
}

namespace {

// Output reduced to the scalar whose derivative is requested.
Node scalar_target(Graph& g, const Graph& original, const Bindings& bindings, std::optional<std::size_t> seed_index) {
  const Node out = original.output();
  if (seed_index) {
    const Tensor value = evaluate(original, bindings);
    if (*seed_index >= value.size()) {
      throw Error(ErrorCode::kInvalidArgument, "seed index " + std::to_string(*seed_index) + " outside output of size " +
                                                   std::to_string(value.size()));
    }
    return g.sum(g.select_cols(g.flatten(out), {*seed_index}));
  }
  const Tensor value = evaluate(original, bindings);
  if (value.size() != 1) {
    throw Error(ErrorCode::kNonScalarOutputWithoutSeed,
                "output has shape " + shape_string(value.shape()) + "; pass a seed index");
  }
  return out;
}

}  // namespace

GradientResult gradient(const Graph& graph, const Bindings& bindings, std::string_view wrt,
                        std::optional<std::size_t> seed_output_index) {
  Graph g = graph;
  const Node slot = g.require_input(wrt);
  if (!bindings.contains(wrt)) throw Error(ErrorCode::kUnboundInput, "input slot '" + std::string(wrt) + "' is not bound");
  const Node target = scalar_target(g, graph, bindings, seed_output_index);
  const Node seed = g.fill(g.constant(Tensor::scalar(1.0)), target);
  const Node grad = g.backward(target, seed, std::span<const Node>(&slot, 1)).front();
  Tensor values = std::move(evaluate(g, bindings, std::span<const Node>(&grad, 1)).front());
  return {std::string(wrt), values.reshaped(bindings.find(wrt)->second.shape())};
}

GradientResult second_order_gradient(const Graph& graph, const Bindings& bindings, std::string_view wrt_first,
                                     std::span<const std::size_t> first_atom_indices, std::string_view wrt_second,
                                     std::optional<std::size_t> seed_output_index, Aggregation aggregation) {
  if (first_atom_indices.empty()) throw Error(ErrorCode::kEmptyAtomSet, "no first-order components selected");
  Graph g = graph;
  const Node first = g.require_input(wrt_first);
  const Node second = g.require_input(wrt_second);
  for (auto name : {wrt_first, wrt_second}) {
    if (!bindings.contains(name)) throw Error(ErrorCode::kUnboundInput, "input slot '" + std::string(name) + "' is not bound");
  }
  const std::size_t first_size = bindings.find(wrt_first)->second.size();
  for (std::size_t i : first_atom_indices) {
    if (i >= first_size) throw Error(ErrorCode::kInvalidArgument, "first-order index " + std::to_string(i) + " out of range");
  }
  const Node target = scalar_target(g, graph, bindings, seed_output_index);
  const Node grad = g.second_order(target, first, first_atom_indices, second, aggregation == Aggregation::kAbsolute);
  Tensor values = std::move(evaluate(g, bindings, std::span<const Node>(&grad, 1)).front());
  return {std::string(wrt_second), values.reshaped(bindings.find(wrt_second)->second.shape())};
}

namespace {

double scalar_value(const Graph& graph, const Bindings& bindings, std::optional<std::size_t> seed_index) {
  const Tensor out = evaluate(graph, bindings);
  if (seed_index) return out[*seed_index];
  if (out.size() != 1) throw Error(ErrorCode::kNonScalarOutputWithoutSeed, "output is not scalar");
  return out[0];
}

void record(FiniteDifferenceReport& report, double analytic, double numeric) {
  const double err = std::abs(analytic - numeric);
  report.max_abs_error = std::max(report.max_abs_error, err);
  report.max_rel_error = std::max(report.max_rel_error, err / std::max(1.0, std::abs(numeric)));
}

}  // namespace

FiniteDifferenceReport finite_difference_report(const Graph& graph, const Bindings& bindings, std::string_view wrt,
                                                double eps, std::optional<std::size_t> seed_output_index) {
  if (!(eps > 0.0)) throw Error(ErrorCode::kInvalidArgument, "eps must be positive");
  const GradientResult analytic = gradient(graph, bindings, wrt, seed_output_index);
  Bindings probe = bindings;
  Tensor& x = probe.find(wrt)->second;
  FiniteDifferenceReport report;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double original = x[i];
    x[i] = original + eps;
    const double plus = scalar_value(graph, probe, seed_output_index);
    x[i] = original - eps;
    const double minus = scalar_value(graph, probe, seed_output_index);
    x[i] = original;
    record(report, analytic.values[i], (plus - minus) / (2.0 * eps));
  }
  return report;
}

double finite_difference_check(const Graph& graph, const Bindings& bindings, std::string_view wrt, double eps,
                               std::optional<std::size_t> seed_output_index) {
  return finite_difference_report(graph, bindings, wrt, eps, seed_output_index).max_abs_error;
}

FiniteDifferenceReport second_order_finite_difference_report(const Graph& graph, const Bindings& bindings,
                                                             std::string_view wrt_first,
                                                             std::span<const std::size_t> first_atom_indices,
                                                             std::string_view wrt_second, double eps,
                                                             std::optional<std::size_t> seed_output_index) {
  if (!(eps > 0.0)) throw Error(ErrorCode::kInvalidArgument, "eps must be positive");
  const GradientResult analytic =
      second_order_gradient(graph, bindings, wrt_first, first_atom_indices, wrt_second, seed_output_index);

  auto aggregate = [&](const Bindings& b) {
    const GradientResult g = gradient(graph, b, wrt_first, seed_output_index);
    double s = 0.0;
    for (std::size_t i : first_atom_indices) s += g.values[i];
    return s;
  };

  Bindings probe = bindings;
  Tensor& x = probe.find(wrt_second)->second;
  FiniteDifferenceReport report;
  for (std::size_t j = 0; j < x.size(); ++j) {
    const double original = x[j];
    x[j] = original + eps;
    const double plus = aggregate(probe);
    x[j] = original - eps;
    const double minus = aggregate(probe);
    x[j] = original;
    record(report, analytic.values[j], (plus - minus) / (2.0 * eps));
  }
  return report;
}

}  // namespace mviz::ad
