#include "hstgcn/autograd.hpp"

#include <chrono>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>

#include "hstgcn/kernels.hpp"

namespace hstgcn {

namespace kp = kernels::parallel;

namespace {

struct OpEntry {
  Op op;
  std::string_view name;
};

constexpr OpEntry kOps[] = {
    {Op::Input, "input"},
    {Op::Parameter, "parameter"},
    {Op::Constant, "constant"},
    {Op::MatMul, "matmul"},
    {Op::AddBias, "add_bias"},
    {Op::SegmentAffine, "segment_affine"},
    {Op::TemporalConv, "temporal_conv"},
    {Op::Add, "add"},
    {Op::Sub, "sub"},
    {Op::Mul, "mul"},
    {Op::Scale, "scale"},
    {Op::Elu, "elu"},
    {Op::Sigmoid, "sigmoid"},
    {Op::Abs, "abs"},
    {Op::Concat, "concat"},
    {Op::Slice, "slice"},
    {Op::Reshape, "reshape"},
    {Op::Mean, "mean"},
    {Op::Sum, "sum"},
    {Op::Chebyshev, "chebyshev"},
};

constexpr std::size_t kParallelThreshold = 1 << 15;

double sigmoid_scalar(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

std::size_t leading(const Shape& s) { return shape_numel(s) / s.back(); }

}  // namespace

std::string_view op_name(Op op) {
  for (const auto& e : kOps)
    if (e.op == op) return e.name;
  return "?";
}

Op op_from_name(std::string_view name) {
  for (const auto& e : kOps)
    if (e.name == name) return e.op;
  throw std::invalid_argument("unknown operator '" + std::string(name) + "'");
}

// ---------------------------------------------------------------------------
// Construction

NodeId Graph::push(Node node) {
  for (auto i : node.in) {
    if (i >= nodes_.size()) fail(node, "input id " + std::to_string(i) + " does not exist");
    if (nodes_[i].needs_grad) node.needs_grad = true;
    consumed_[i] = true;
  }
  if (node.name.empty())
    node.name = std::string(op_name(node.op)) + "#" + std::to_string(nodes_.size());
  if (node.op != Op::Input && node.op != Op::Parameter && node.value.empty())
    node.value = Tensor(node.shape);
  if (node.needs_grad) node.grad = Tensor(node.shape);
  nodes_.push_back(std::move(node));
  consumed_.push_back(false);
  return nodes_.size() - 1;
}

void Graph::fail(const Node& node, const std::string& what) const {
  const std::string label = node.name.empty()
                                ? std::string(op_name(node.op)) + "#" + std::to_string(nodes_.size())
                                : node.name;
  throw std::invalid_argument("node '" + label + "' (" + std::string(op_name(node.op)) +
                              "): " + what);
}

NodeId Graph::input(const std::string& name, Shape shape) {
  Node n;
  n.op = Op::Input;
  n.name = name;
  n.shape = std::move(shape);
  if (shape_numel(n.shape) == 0 || n.shape.empty()) fail(n, "empty shape");
  if (find(name)) fail(n, "duplicate node name");
  return push(std::move(n));
}

NodeId Graph::parameter(const std::string& name, Shape shape) {
  if (auto existing = find(name)) {
    const Node& e = nodes_[*existing];
    if (e.op != Op::Parameter || e.shape != shape)
      fail(e, "redeclared with a different kind or shape " + shape_str(shape));
    return *existing;
  }
  Node n;
  n.op = Op::Parameter;
  n.name = name;
  n.shape = std::move(shape);
  n.needs_grad = true;
  if (shape_numel(n.shape) == 0 || n.shape.empty()) fail(n, "empty shape");
  return push(std::move(n));
}

NodeId Graph::constant(Tensor value, const std::string& name) {
  Node n;
  n.op = Op::Constant;
  n.name = name;
  n.shape = value.shape();
  n.value = std::move(value);
  return push(std::move(n));
}

NodeId Graph::matmul(NodeId x, NodeId w) {
  Node n;
  n.op = Op::MatMul;
  n.in = {x, w};
  const Shape& xs = shape(x);
  const Shape& ws = shape(w);
  if (ws.size() != 2) fail(n, "weight must be rank 2, got " + shape_str(ws));
  if (xs.back() != ws[0])
    fail(n, "inner dimensions differ: " + shape_str(xs) + " · " + shape_str(ws));
  n.shape = xs;
  n.shape.back() = ws[1];
  return push(std::move(n));
}

NodeId Graph::add_bias(NodeId x, NodeId b) {
  Node n;
  n.op = Op::AddBias;
  n.in = {x, b};
  const Shape& xs = shape(x);
  const Shape& bs = shape(b);
  if (bs.size() != 1 || bs[0] != xs.back())
    fail(n, "bias " + shape_str(bs) + " does not match last axis of " + shape_str(xs));
  n.shape = xs;
  return push(std::move(n));
}

NodeId Graph::segment_affine(NodeId x, NodeId w, NodeId b) {
  Node n;
  n.op = Op::SegmentAffine;
  n.in = {x, w, b};
  const Shape& xs = shape(x);
  const Shape& ws = shape(w);
  const Shape& bs = shape(b);
  if (xs.size() != 4) fail(n, "input must be [batch, segments, time, channels], got " + shape_str(xs));
  if (ws.size() != 3 || ws[0] != xs[1] || ws[1] != xs[3])
    fail(n, "segmentwise weight " + shape_str(ws) + " incompatible with input " + shape_str(xs) +
                " (segment count n=" + std::to_string(xs[1]) + ")");
  if (bs.size() != 2 || bs[0] != ws[0] || bs[1] != ws[2])
    fail(n, "segmentwise bias " + shape_str(bs) + " incompatible with weight " + shape_str(ws));
  n.shape = {xs[0], xs[1], xs[2], ws[2]};
  return push(std::move(n));
}

NodeId Graph::temporal_conv(NodeId x, NodeId kernel) {
  Node n;
  n.op = Op::TemporalConv;
  n.in = {x, kernel};
  const Shape& xs = shape(x);
  const Shape& ks = shape(kernel);
  if (xs.size() < 2) fail(n, "input must have time and channel axes, got " + shape_str(xs));
  if (ks.size() != 3 || ks[1] != xs.back())
    fail(n, "kernel " + shape_str(ks) + " incompatible with input " + shape_str(xs));
  const std::size_t len = xs[xs.size() - 2];
  if (len < ks[0])
    fail(n, "temporal length " + std::to_string(len) + " shorter than kernel " +
                std::to_string(ks[0]));
  n.kt = ks[0];
  n.shape = xs;
  n.shape[xs.size() - 2] = len - ks[0] + 1;
  n.shape.back() = ks[2];
  const std::size_t rows = shape_numel(xs) / (len * xs.back());
  n.scratch.assign(rows * (len - ks[0] + 1) * ks[0] * ks[1], 0.0);
  return push(std::move(n));
}

NodeId Graph::add(NodeId a, NodeId b) {
  Node n;
  n.op = Op::Add;
  n.in = {a, b};
  if (shape(a) != shape(b)) fail(n, "operand shapes differ: " + shape_str(shape(a)) + " vs " + shape_str(shape(b)));
  n.shape = shape(a);
  return push(std::move(n));
}

NodeId Graph::sub(NodeId a, NodeId b) {
  Node n;
  n.op = Op::Sub;
  n.in = {a, b};
  if (shape(a) != shape(b)) fail(n, "operand shapes differ: " + shape_str(shape(a)) + " vs " + shape_str(shape(b)));
  n.shape = shape(a);
  return push(std::move(n));
}

NodeId Graph::mul(NodeId a, NodeId b) {
  Node n;
  n.op = Op::Mul;
  n.in = {a, b};
  if (shape(a) != shape(b)) fail(n, "operand shapes differ: " + shape_str(shape(a)) + " vs " + shape_str(shape(b)));
  n.shape = shape(a);
  return push(std::move(n));
}

NodeId Graph::scale(NodeId x, double factor) {
  Node n;
  n.op = Op::Scale;
  n.in = {x};
  n.attrs.factor = factor;
  n.shape = shape(x);
  return push(std::move(n));
}

NodeId Graph::elu(NodeId x) {
  Node n;
  n.op = Op::Elu;
  n.in = {x};
  n.shape = shape(x);
  return push(std::move(n));
}

NodeId Graph::sigmoid(NodeId x) {
  Node n;
  n.op = Op::Sigmoid;
  n.in = {x};
  n.shape = shape(x);
  return push(std::move(n));
}

NodeId Graph::abs(NodeId x) {
  Node n;
  n.op = Op::Abs;
  n.in = {x};
  n.shape = shape(x);
  return push(std::move(n));
}

NodeId Graph::concat(const std::vector<NodeId>& parts) {
  Node n;
  n.op = Op::Concat;
  n.in = parts;
  if (parts.empty()) fail(n, "no operands");
  Shape lead = shape(parts[0]);
  std::size_t channels = 0;
  for (auto p : parts) {
    Shape s = shape(p);
    channels += s.back();
    s.back() = lead.back();
    if (s != lead) fail(n, "leading axes differ: " + shape_str(shape(p)) + " vs " + shape_str(shape(parts[0])));
  }
  n.shape = lead;
  n.shape.back() = channels;
  return push(std::move(n));
}

NodeId Graph::slice(NodeId x, std::size_t start, std::size_t length) {
  Node n;
  n.op = Op::Slice;
  n.in = {x};
  n.attrs.start = start;
  n.attrs.length = length;
  const Shape& xs = shape(x);
  if (length == 0 || start + length > xs.back())
    fail(n, "slice [" + std::to_string(start) + ", " + std::to_string(start + length) +
                ") outside last axis of " + shape_str(xs));
  n.shape = xs;
  n.shape.back() = length;
  return push(std::move(n));
}

NodeId Graph::reshape(NodeId x, Shape s) {
  Node n;
  n.op = Op::Reshape;
  n.in = {x};
  if (s.empty() || shape_numel(s) != shape_numel(shape(x)))
    fail(n, "cannot reshape " + shape_str(shape(x)) + " to " + shape_str(s));
  n.shape = s;
  n.attrs.shape = std::move(s);
  return push(std::move(n));
}

NodeId Graph::mean(NodeId x) {
  Node n;
  n.op = Op::Mean;
  n.in = {x};
  n.shape = {1};
  return push(std::move(n));
}

NodeId Graph::sum(NodeId x) {
  Node n;
  n.op = Op::Sum;
  n.in = {x};
  n.shape = {1};
  return push(std::move(n));
}

NodeId Graph::chebyshev(NodeId x, std::shared_ptr<const Tensor> lap, std::size_t order) {
  Node n;
  n.op = Op::Chebyshev;
  n.in = {x};
  const Shape& xs = shape(x);
  if (xs.size() != 4) fail(n, "input must be [batch, segments, time, channels], got " + shape_str(xs));
  if (!lap || lap->rank() != 2 || lap->dim(0) != xs[1] || lap->dim(1) != xs[1])
    fail(n, "operator must be " + std::to_string(xs[1]) + "x" + std::to_string(xs[1]));
  if (order == 0) fail(n, "Chebyshev order must be >= 1");
  const std::size_t nn = xs[1];
  for (std::size_t i = 0; i < nn; ++i)
    for (std::size_t j = 0; j < i; ++j)
      if ((*lap)[i * nn + j] != (*lap)[j * nn + i]) fail(n, "operator is not symmetric");
  n.laplacian = std::move(lap);
  n.order = order;
  n.shape = {xs[0], xs[1], xs[2], order * xs[3]};
  // K basis blocks plus Clenshaw workspace.
  n.scratch.assign((order + 3) * nn * xs[2] * xs[3], 0.0);
  return push(std::move(n));
}

NodeId Graph::add(std::string_view opname, const std::vector<NodeId>& in, const OpAttrs& attrs) {
  const Op op = op_from_name(opname);
  auto need = [&](std::size_t k) {
    if (in.size() != k)
      throw std::invalid_argument("operator '" + std::string(opname) + "' expects " +
                                  std::to_string(k) + " inputs, got " + std::to_string(in.size()));
  };
  switch (op) {
    case Op::MatMul: need(2); return matmul(in[0], in[1]);
    case Op::AddBias: need(2); return add_bias(in[0], in[1]);
    case Op::SegmentAffine: need(3); return segment_affine(in[0], in[1], in[2]);
    case Op::TemporalConv: need(2); return temporal_conv(in[0], in[1]);
    case Op::Add: need(2); return add(in[0], in[1]);
    case Op::Sub: need(2); return sub(in[0], in[1]);
    case Op::Mul: need(2); return mul(in[0], in[1]);
    case Op::Scale: need(1); return scale(in[0], attrs.factor);
    case Op::Elu: need(1); return elu(in[0]);
    case Op::Sigmoid: need(1); return sigmoid(in[0]);
    case Op::Abs: need(1); return abs(in[0]);
    case Op::Concat: return concat(in);
    case Op::Slice: need(1); return slice(in[0], attrs.start, attrs.length);
    case Op::Reshape: need(1); return reshape(in[0], attrs.shape);
    case Op::Mean: need(1); return mean(in[0]);
    case Op::Sum: need(1); return sum(in[0]);
    default:
      throw std::invalid_argument("operator '" + std::string(opname) +
                                  "' cannot be built through the generic entry point");
  }
}

void Graph::set_name(NodeId id, const std::string& name) {
  if (auto existing = find(name); existing && *existing != id)
    throw std::invalid_argument("node name '" + name + "' already in use");
  nodes_.at(id).name = name;
}

std::optional<NodeId> Graph::find(const std::string& name) const {
  for (std::size_t i = 0; i < nodes_.size(); ++i)
    if (nodes_[i].name == name) return i;
  return std::nullopt;
}

std::vector<std::string> Graph::parameter_names() const {
  std::vector<std::string> out;
  for (const auto& n : nodes_)
    if (n.op == Op::Parameter) out.push_back(n.name);
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation

const Tensor& Graph::val(NodeId id) const {
  const Node& n = nodes_[id];
  if (n.op == Op::Input || n.op == Op::Parameter) {
    if (!n.bound) fail(n, "leaf is not bound; call forward() first");
    return *n.bound;
  }
  return n.value;
}

const Tensor& Graph::value(NodeId id) const {
  if (id >= nodes_.size()) throw std::out_of_range("no node #" + std::to_string(id));
  return val(id);
}

NamedTensors Graph::outputs() const {
  NamedTensors out;
  for (std::size_t i = 0; i < nodes_.size(); ++i)
    if (!consumed_[i]) out.emplace(nodes_[i].name, val(i));
  return out;
}

void Graph::forward(const NamedTensors& inputs, const ParameterStore& params) {
  for (auto& node : nodes_) {
    if (node.op == Op::Input) {
      auto it = inputs.find(node.name);
      if (it == inputs.end()) fail(node, "input not bound");
      if (it->second.shape() != node.shape)
        fail(node, "bound tensor has shape " + shape_str(it->second.shape()) + ", expected " +
                       shape_str(node.shape));
      node.bound = &it->second;
    } else if (node.op == Op::Parameter) {
      auto it = params.find(node.name);
      if (it == params.end()) fail(node, "parameter missing from store");
      if (it->second.shape() != node.shape)
        fail(node, "stored parameter has shape " + shape_str(it->second.shape()) + ", expected " +
                       shape_str(node.shape));
      node.bound = &it->second;
    } else if (node.op != Op::Constant) {
      if (profiling_) {
        const auto t0 = std::chrono::steady_clock::now();
        eval(node);
        profile_[std::string(op_name(node.op)) + ".forward"] +=
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      } else {
        eval(node);
      }
    }
  }
}

void Graph::eval(Node& node) {
  double* y = node.value.ptr();
  const std::size_t count = node.value.size();
  switch (node.op) {
    case Op::MatMul: {
      const Tensor& x = val(node.in[0]);
      const Tensor& w = val(node.in[1]);
      kp::gemm(x.ptr(), w.ptr(), y, leading(x.shape()), w.dim(0), w.dim(1), false);
      break;
    }
    case Op::AddBias: {
      const double* x = val(node.in[0]).ptr();
      const double* b = val(node.in[1]).ptr();
      const std::size_t c = node.shape.back();
      const std::size_t rows = count / c;
#pragma omp parallel for schedule(static) if (count > kParallelThreshold)
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < c; ++j) y[r * c + j] = x[r * c + j] + b[j];
      break;
    }
    case Op::SegmentAffine: {
      const Tensor& x = val(node.in[0]);
      const Tensor& w = val(node.in[1]);
      const double* b = val(node.in[2]).ptr();
      const std::size_t batch = x.dim(0), n = x.dim(1), len = x.dim(2), cin = x.dim(3);
      const std::size_t cout = node.shape[3];
#pragma omp parallel for collapse(2) schedule(static) if (count > kParallelThreshold)
      for (std::size_t bi = 0; bi < batch; ++bi)
        for (std::size_t i = 0; i < n; ++i) {
          const std::size_t blk = bi * n + i;
          double* yb = y + blk * len * cout;
          kernels::serial::gemm(x.ptr() + blk * len * cin, w.ptr() + i * cin * cout, yb, len, cin,
                                cout, false);
          for (std::size_t t = 0; t < len; ++t)
            for (std::size_t j = 0; j < cout; ++j) yb[t * cout + j] += b[i * cout + j];
        }
      break;
    }
    case Op::TemporalConv: {
      const Tensor& x = val(node.in[0]);
      const Tensor& k = val(node.in[1]);
      const std::size_t len = x.shape()[x.rank() - 2];
      const std::size_t cin = x.cols();
      const std::size_t rows = x.size() / (len * cin);
      const std::size_t lout = len - node.kt + 1;
      kp::im2col_temporal(x.ptr(), rows, len, cin, node.kt, node.scratch.data());
      kp::gemm(node.scratch.data(), k.ptr(), y, rows * lout, node.kt * cin, k.dim(2), false);
      break;
    }
    case Op::Add:
    case Op::Sub:
    case Op::Mul: {
      const double* a = val(node.in[0]).ptr();
      const double* b = val(node.in[1]).ptr();
      if (node.op == Op::Add) {
#pragma omp parallel for simd if (count > kParallelThreshold)
        for (std::size_t i = 0; i < count; ++i) y[i] = a[i] + b[i];
      } else if (node.op == Op::Sub) {
#pragma omp parallel for simd if (count > kParallelThreshold)
        for (std::size_t i = 0; i < count; ++i) y[i] = a[i] - b[i];
      } else {
#pragma omp parallel for simd if (count > kParallelThreshold)
        for (std::size_t i = 0; i < count; ++i) y[i] = a[i] * b[i];
      }
      break;
    }
    case Op::Scale: {
      const double* x = val(node.in[0]).ptr();
      const double f = node.attrs.factor;
      for (std::size_t i = 0; i < count; ++i) y[i] = f * x[i];
      break;
    }
    case Op::Elu: {
      const double* x = val(node.in[0]).ptr();
#pragma omp parallel for if (count > kParallelThreshold)
      for (std::size_t i = 0; i < count; ++i) y[i] = x[i] > 0.0 ? x[i] : std::expm1(x[i]);
      break;
    }
    case Op::Sigmoid: {
      const double* x = val(node.in[0]).ptr();
#pragma omp parallel for if (count > kParallelThreshold)
      for (std::size_t i = 0; i < count; ++i) y[i] = sigmoid_scalar(x[i]);
      break;
    }
    case Op::Abs: {
      const double* x = val(node.in[0]).ptr();
      for (std::size_t i = 0; i < count; ++i) y[i] = std::abs(x[i]);
      break;
    }
    case Op::Concat: {
      const std::size_t c = node.shape.back();
      const std::size_t rows = count / c;
      std::size_t off = 0;
      for (auto id : node.in) {
        const Tensor& p = val(id);
        const std::size_t pc = p.cols();
        const double* src = p.ptr();
#pragma omp parallel for schedule(static) if (count > kParallelThreshold)
        for (std::size_t r = 0; r < rows; ++r)
          std::copy(src + r * pc, src + (r + 1) * pc, y + r * c + off);
        off += pc;
      }
      break;
    }
    case Op::Slice: {
      const Tensor& x = val(node.in[0]);
      const std::size_t xc = x.cols();
      const std::size_t c = node.attrs.length;
      const std::size_t rows = count / c;
      const double* src = x.ptr() + node.attrs.start;
#pragma omp parallel for schedule(static) if (count > kParallelThreshold)
      for (std::size_t r = 0; r < rows; ++r) std::copy(src + r * xc, src + r * xc + c, y + r * c);
      break;
    }
    case Op::Reshape: {
      const Tensor& x = val(node.in[0]);
      std::copy(x.ptr(), x.ptr() + count, y);
      break;
    }
    case Op::Mean:
    case Op::Sum: {
      const Tensor& x = val(node.in[0]);
      double s = 0.0;
      for (std::size_t i = 0; i < x.size(); ++i) s += x[i];
      y[0] = node.op == Op::Mean ? s / static_cast<double>(x.size()) : s;
      break;
    }
    case Op::Chebyshev: {
      const Tensor& x = val(node.in[0]);
      const std::size_t batch = x.dim(0), n = x.dim(1), len = x.dim(2), c = x.dim(3);
      const std::size_t cols = len * c;
      const std::size_t blk = n * cols;
      std::vector<double*> basis(node.order);
      for (std::size_t k = 0; k < node.order; ++k) basis[k] = node.scratch.data() + k * blk;
      const std::size_t kc = node.order * c;
      for (std::size_t b = 0; b < batch; ++b) {
        kp::chebyshev_basis(node.laplacian->ptr(), n, x.ptr() + b * blk, cols, node.order,
                            basis.data());
        double* yb = y + b * n * len * kc;
        for (std::size_t k = 0; k < node.order; ++k)
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t t = 0; t < len; ++t)
              std::copy(basis[k] + i * cols + t * c, basis[k] + i * cols + t * c + c,
                        yb + (i * len + t) * kc + k * c);
      }
      break;
    }
    default:
      fail(node, "cannot evaluate operator");
  }
}

// ---------------------------------------------------------------------------
// Differentiation

NamedTensors Graph::backward(NodeId loss) {
  Node& ln = nodes_.at(loss);
  if (shape_numel(ln.shape) != 1)
    fail(ln, "loss must be scalar, got shape " + shape_str(ln.shape));
  for (auto& n : nodes_)
    if (n.needs_grad) n.grad.fill(0.0);
  if (ln.needs_grad) {
    ln.grad[0] = 1.0;
    for (std::size_t i = loss + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.needs_grad || n.op == Op::Parameter || n.op == Op::Input || n.op == Op::Constant)
        continue;
      if (profiling_) {
        const auto t0 = std::chrono::steady_clock::now();
        backprop(n);
        profile_[std::string(op_name(n.op)) + ".backward"] +=
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      } else {
        backprop(n);
      }
    }
  }
  NamedTensors grads;
  for (const auto& n : nodes_)
    if (n.op == Op::Parameter) grads.emplace(n.name, n.grad);
  return grads;
}

void Graph::backprop(Node& node) {
  const double* dy = node.grad.ptr();
  const std::size_t count = node.grad.size();
  auto grad_of = [&](std::size_t k) -> double* {
    Node& in = nodes_[node.in[k]];
    return in.needs_grad ? in.grad.ptr() : nullptr;
  };
  switch (node.op) {
    case Op::MatMul: {
      const Tensor& x = val(node.in[0]);
      const Tensor& w = val(node.in[1]);
      const std::size_t rows = leading(x.shape());
      if (double* dx = grad_of(0)) kp::gemm_nt(dy, w.ptr(), dx, rows, w.dim(1), w.dim(0), true);
      if (double* dw = grad_of(1)) kp::gemm_tn(x.ptr(), dy, dw, rows, w.dim(0), w.dim(1), true);
      break;
    }
    case Op::AddBias: {
      const std::size_t c = node.shape.back();
      const std::size_t rows = count / c;
      if (double* dx = grad_of(0))
        for (std::size_t i = 0; i < count; ++i) dx[i] += dy[i];
      if (double* db = grad_of(1))
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < c; ++j) db[j] += dy[r * c + j];
      break;
    }
    case Op::SegmentAffine: {
      const Tensor& x = val(node.in[0]);
      const Tensor& w = val(node.in[1]);
      const std::size_t batch = x.dim(0), n = x.dim(1), len = x.dim(2), cin = x.dim(3);
      const std::size_t cout = node.shape[3];
      double* dx = grad_of(0);
      double* dw = grad_of(1);
      double* db = grad_of(2);
      // Parallel over segments; each segment's weight gradient is owned by one
      // thread and accumulated over the batch in order.
#pragma omp parallel for schedule(static) if (count > kParallelThreshold)
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t bi = 0; bi < batch; ++bi) {
          const std::size_t blk = bi * n + i;
          const double* dyb = dy + blk * len * cout;
          if (dx)
            kernels::serial::gemm_nt(dyb, w.ptr() + i * cin * cout, dx + blk * len * cin, len, cout,
                                     cin, true);
          if (dw)
            kernels::serial::gemm_tn(x.ptr() + blk * len * cin, dyb, dw + i * cin * cout, len, cin,
                                     cout, true);
          if (db)
            for (std::size_t t = 0; t < len; ++t)
              for (std::size_t j = 0; j < cout; ++j) db[i * cout + j] += dyb[t * cout + j];
        }
      }
      break;
    }
    case Op::TemporalConv: {
      const Tensor& x = val(node.in[0]);
      const Tensor& k = val(node.in[1]);
      const std::size_t len = x.shape()[x.rank() - 2];
      const std::size_t cin = x.cols();
      const std::size_t rows = x.size() / (len * cin);
      const std::size_t lout = len - node.kt + 1;
      const std::size_t m = rows * lout;
      const std::size_t span = node.kt * cin;
      if (double* dk = grad_of(1)) kp::gemm_tn(node.scratch.data(), dy, dk, m, span, k.dim(2), true);
      if (double* dx = grad_of(0)) {
        std::vector<double> dcol(m * span);
        kp::gemm_nt(dy, k.ptr(), dcol.data(), m, k.dim(2), span, false);
        kp::col2im_temporal_add(dcol.data(), rows, len, cin, node.kt, dx);
      }
      break;
    }
    case Op::Add:
    case Op::Sub: {
      const double sign = node.op == Op::Add ? 1.0 : -1.0;
      if (double* da = grad_of(0))
        for (std::size_t i = 0; i < count; ++i) da[i] += dy[i];
      if (double* db = grad_of(1))
        for (std::size_t i = 0; i < count; ++i) db[i] += sign * dy[i];
      break;
    }
    case Op::Mul: {
      const double* a = val(node.in[0]).ptr();
      const double* b = val(node.in[1]).ptr();
      double* da = grad_of(0);
      double* db = grad_of(1);
      // Same operand on both sides must accumulate both contributions.
#pragma omp parallel for if (count > kParallelThreshold)
      for (std::size_t i = 0; i < count; ++i) {
        const double ga = dy[i] * b[i];
        const double gb = dy[i] * a[i];
        if (da) da[i] += ga;
        if (db) db[i] += gb;
      }
      break;
    }
    case Op::Scale: {
      if (double* dx = grad_of(0))
        for (std::size_t i = 0; i < count; ++i) dx[i] += node.attrs.factor * dy[i];
      break;
    }
    case Op::Elu: {
      const double* x = val(node.in[0]).ptr();
      const double* y = node.value.ptr();
      if (double* dx = grad_of(0)) {
#pragma omp parallel for simd if (count > kParallelThreshold)
        for (std::size_t i = 0; i < count; ++i) dx[i] += dy[i] * (x[i] > 0.0 ? 1.0 : y[i] + 1.0);
      }
      break;
    }
    case Op::Sigmoid: {
      const double* y = node.value.ptr();
      if (double* dx = grad_of(0)) {
#pragma omp parallel for simd if (count > kParallelThreshold)
        for (std::size_t i = 0; i < count; ++i) dx[i] += dy[i] * y[i] * (1.0 - y[i]);
      }
      break;
    }
    case Op::Abs: {
      const double* x = val(node.in[0]).ptr();
      if (double* dx = grad_of(0))
        for (std::size_t i = 0; i < count; ++i)
          dx[i] += dy[i] * (x[i] > 0.0 ? 1.0 : (x[i] < 0.0 ? -1.0 : 0.0));
      break;
    }
    case Op::Concat: {
      const std::size_t c = node.shape.back();
      const std::size_t rows = count / c;
      std::size_t off = 0;
      for (std::size_t k = 0; k < node.in.size(); ++k) {
        const std::size_t pc = nodes_[node.in[k]].shape.back();
        if (double* dp = grad_of(k)) {
#pragma omp parallel for schedule(static) if (count > kParallelThreshold)
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < pc; ++j) dp[r * pc + j] += dy[r * c + off + j];
        }
        off += pc;
      }
      break;
    }
    case Op::Slice: {
      if (double* dx = grad_of(0)) {
        const std::size_t xc = nodes_[node.in[0]].shape.back();
        const std::size_t c = node.attrs.length;
        const std::size_t rows = count / c;
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < c; ++j) dx[r * xc + node.attrs.start + j] += dy[r * c + j];
      }
      break;
    }
    case Op::Reshape: {
      if (double* dx = grad_of(0))
        for (std::size_t i = 0; i < count; ++i) dx[i] += dy[i];
      break;
    }
    case Op::Mean:
    case Op::Sum: {
      if (double* dx = grad_of(0)) {
        const std::size_t m = nodes_[node.in[0]].grad.size();
        const double g = node.op == Op::Mean ? dy[0] / static_cast<double>(m) : dy[0];
        for (std::size_t i = 0; i < m; ++i) dx[i] += g;
      }
      break;
    }
    case Op::Chebyshev: {
      double* dx = grad_of(0);
      if (!dx) break;
      const Shape& xs = nodes_[node.in[0]].shape;
      const std::size_t batch = xs[0], n = xs[1], len = xs[2], c = xs[3];
      const std::size_t cols = len * c;
      const std::size_t blk = n * cols;
      const std::size_t kc = node.order * c;
      // Basis blocks are reused as gathered adjoint inputs G_k.
      std::vector<double*> g(node.order);
      for (std::size_t k = 0; k < node.order; ++k) g[k] = node.scratch.data() + k * blk;
      double* work = node.scratch.data() + node.order * blk;
      for (std::size_t b = 0; b < batch; ++b) {
        const double* dyb = dy + b * n * len * kc;
        for (std::size_t k = 0; k < node.order; ++k)
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t t = 0; t < len; ++t)
              std::copy(dyb + (i * len + t) * kc + k * c, dyb + (i * len + t) * kc + k * c + c,
                        g[k] + i * cols + t * c);
        kp::chebyshev_adjoint_add(node.laplacian->ptr(), n, g.data(), cols, node.order,
                                  dx + b * blk, work);
      }
      break;
    }
    default:
      fail(node, "cannot differentiate operator");
  }
}

std::vector<std::int8_t> Graph::abs_signature() const {
  std::vector<std::int8_t> sig;
  for (const auto& n : nodes_) {
    if (n.op != Op::Abs) continue;
    const Tensor& x = val(n.in[0]);
    for (std::size_t i = 0; i < x.size(); ++i)
      sig.push_back(x[i] > 0.0 ? 1 : (x[i] < 0.0 ? -1 : 0));
  }
  return sig;
}

// ---------------------------------------------------------------------------

GradCheckResult finite_difference_check(Graph& graph, ParameterStore& params,
                                        const NamedTensors& inputs, NodeId loss,
                                        const std::string& name, std::size_t probes, double h,
                                        std::uint64_t seed) {
  if (!(h > 0.0)) throw std::invalid_argument("finite difference step must be positive");
  auto pit = params.find(name);
  if (pit == params.end()) throw std::invalid_argument("no parameter named '" + name + "'");
  Tensor& theta = pit->second;

  graph.forward(inputs, params);
  const NamedTensors grads = graph.backward(loss);
  const Tensor& analytic = grads.at(name);
  const auto base_sig = graph.abs_signature();

  std::mt19937_64 rng(seed);
  std::vector<std::size_t> order(theta.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);

  GradCheckResult res;
  const std::size_t wanted = std::min(probes, theta.size());
  for (std::size_t idx = 0; idx < order.size() && res.probes < wanted; ++idx) {
    const std::size_t c = order[idx];
    const double orig = theta[c];
    theta[c] = orig + h;
    graph.forward(inputs, params);
    const double up = graph.value(loss)[0];
    const bool up_ok = graph.abs_signature() == base_sig;
    theta[c] = orig - h;
    graph.forward(inputs, params);
    const double down = graph.value(loss)[0];
    const bool down_ok = graph.abs_signature() == base_sig;
    theta[c] = orig;
    if (!up_ok || !down_ok) {
      ++res.resampled;
      continue;
    }
    const double central = (up - down) / (2.0 * h);
    const double a = analytic[c];
    // Exactly cancelling L1 signs give true zeros, where the central
    // difference is pure roundoff (~1e-11); the floor keeps those finite.
    const double denom = std::max({std::abs(a), std::abs(central), 1e-6});
    res.max_rel_error = std::max(res.max_rel_error, std::abs(a - central) / denom);
    ++res.probes;
  }
  graph.forward(inputs, params);
  return res;
}

}  // namespace hstgcn
