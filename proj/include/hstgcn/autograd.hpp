#pragma once

// Static compute graph with reverse-mode differentiation.
//
// A Graph is built once (shapes are fixed and checked at build time), then
// evaluated any number of times against bound inputs and a ParameterStore.
// Nodes are appended in construction order, which is also a valid
// topological order.

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "hstgcn/tensor.hpp"

namespace hstgcn {

using NamedTensors = std::map<std::string, Tensor>;

/// Named trainable tensors. Ordered so iteration (and serialization) is stable.
using ParameterStore = std::map<std::string, Tensor>;

enum class Op {
  Input,
  Parameter,
  Constant,
  MatMul,         // x[..., k] · w[k, n]
  AddBias,        // x[..., n] + b[n]
  SegmentAffine,  // x[b, i, t, :] · w[i] + bias[i]
  TemporalConv,   // valid 1D convolution along axis −2
  Add,
  Sub,
  Mul,
  Scale,
  Elu,
  Sigmoid,
  Abs,
  Concat,  // along the last axis
  Slice,   // along the last axis
  Reshape,
  Mean,
  Sum,
  Chebyshev,  // [b, n, t, c] -> [b, n, t, K·c], channel k·c + m holds T_k(L̃) x_m
};

std::string_view op_name(Op op);
/// Parses an operator name; throws std::invalid_argument for unknown names.
Op op_from_name(std::string_view name);

using NodeId = std::size_t;

/// Attributes for the generic Graph::add entry point.
struct OpAttrs {
  std::size_t start = 0;   // Slice
  std::size_t length = 0;  // Slice
  double factor = 1.0;     // Scale
  Shape shape;             // Reshape
};

class Graph {
public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;
  Graph(Graph&&) = default;
  Graph& operator=(Graph&&) = default;

  // Leaves.
  NodeId input(const std::string& name, Shape shape);
  NodeId parameter(const std::string& name, Shape shape);
  NodeId constant(Tensor value, const std::string& name = {});

  // Operators. Each validates shapes immediately and throws
  // std::invalid_argument naming the offending node.
  NodeId matmul(NodeId x, NodeId w);
  NodeId add_bias(NodeId x, NodeId b);
  NodeId segment_affine(NodeId x, NodeId w, NodeId b);
  NodeId temporal_conv(NodeId x, NodeId kernel);
  NodeId add(NodeId a, NodeId b);
  NodeId sub(NodeId a, NodeId b);
  NodeId mul(NodeId a, NodeId b);
  NodeId scale(NodeId x, double factor);
  NodeId elu(NodeId x);
  NodeId sigmoid(NodeId x);
  NodeId abs(NodeId x);
  NodeId concat(const std::vector<NodeId>& parts);
  NodeId slice(NodeId x, std::size_t start, std::size_t length);
  NodeId reshape(NodeId x, Shape shape);
  NodeId mean(NodeId x);
  NodeId sum(NodeId x);
  /// Chebyshev basis expansion with a fixed symmetric n×n operator.
  NodeId chebyshev(NodeId x, std::shared_ptr<const Tensor> scaled_laplacian, std::size_t order);

  /// Generic construction by operator name, e.g. add("elu", {x}).
  NodeId add(std::string_view op, const std::vector<NodeId>& inputs, const OpAttrs& attrs = {});

  /// Gives a node a human-readable name used in errors and outputs().
  void set_name(NodeId id, const std::string& name);

  /// Evaluates every node. Inputs are bound by name (shapes must match);
  /// parameter leaves read from params. Both must outlive the next
  /// backward() call.
  void forward(const NamedTensors& inputs, const ParameterStore& params);

  /// Reverse sweep from a scalar node. Returns the gradient of every
  /// parameter leaf, keyed by parameter name.
  NamedTensors backward(NodeId loss);

  const Tensor& value(NodeId id) const;
  /// Values of all sink nodes (nodes no other node consumes), keyed by name.
  NamedTensors outputs() const;

  const Shape& shape(NodeId id) const { return nodes_.at(id).shape; }
  Op op(NodeId id) const { return nodes_.at(id).op; }
  const std::string& name(NodeId id) const { return nodes_.at(id).name; }
  std::size_t size() const { return nodes_.size(); }
  std::vector<std::string> parameter_names() const;
  std::optional<NodeId> find(const std::string& name) const;

  /// Sign pattern of every Abs operand after the last forward(); used to
  /// detect when a finite-difference probe crosses a kink.
  std::vector<std::int8_t> abs_signature() const;

  /// Accumulates wall time per operator and direction while enabled.
  void set_profiling(bool on) { profiling_ = on; }
  const std::map<std::string, double>& profile() const { return profile_; }

private:
  struct Node {
    Op op = Op::Input;
    std::vector<NodeId> in;
    Shape shape;
    std::string name;
    Tensor value;                   // owned output (non-leaf and constants)
    const Tensor* bound = nullptr;  // leaf binding for Input/Parameter
    Tensor grad;
    bool needs_grad = false;
    OpAttrs attrs;
    std::size_t kt = 0;  // TemporalConv
    std::size_t order = 0;
    std::shared_ptr<const Tensor> laplacian;
    std::vector<double> scratch;
  };

  NodeId push(Node node);
  [[noreturn]] void fail(const Node& node, const std::string& what) const;
  const Tensor& val(NodeId id) const;
  void eval(Node& node);
  void backprop(Node& node);

  std::vector<Node> nodes_;
  std::vector<bool> consumed_;
  bool profiling_ = false;
  std::map<std::string, double> profile_;
};

/// Result of a central-difference gradient check on one parameter tensor.
struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t probes = 0;
  std::size_t resampled = 0;  // probes redrawn because they crossed an |·| kink
};

/// Compares analytic gradients of `loss` w.r.t. parameter `name` against
/// central differences at `probes` randomly chosen coordinates. Relative
/// error is |a − c| / max(|a|, |c|, 1e-6). params is restored on return.
GradCheckResult finite_difference_check(Graph& graph, ParameterStore& params,
                                        const NamedTensors& inputs, NodeId loss,
                                        const std::string& name, std::size_t probes, double h,
                                        std::uint64_t seed);

}  // namespace hstgcn
