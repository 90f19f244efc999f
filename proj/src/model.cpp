#include "hstgcn/model.hpp"

#include <cctype>
#include <cmath>
#include <random>
#include <stdexcept>

#include "hstgcn/rng.hpp"

namespace hstgcn {

std::string_view to_string(Variant v) {
  switch (v) {
    case Variant::HStgcn: return "hstgcn";
    case Variant::HStgcnOnes: return "hstgcn1";
    case Variant::StgcnIm: return "stgcn-im";
    case Variant::Stgcn: return "stgcn";
  }
  return "?";
}

std::string_view display_name(Variant v) {
  switch (v) {
    case Variant::HStgcn: return "H-STGCN";
    case Variant::HStgcnOnes: return "H-STGCN(1)";
    case Variant::StgcnIm: return "STGCN(Im)";
    case Variant::Stgcn: return "STGCN";
  }
  return "?";
}

Variant parse_variant(std::string_view s) {
  for (Variant v : {Variant::HStgcn, Variant::HStgcnOnes, Variant::StgcnIm, Variant::Stgcn})
    if (s == to_string(v) || s == display_name(v)) return v;
  throw std::invalid_argument("unknown variant '" + std::string(s) + "' (expected hstgcn, hstgcn1, stgcn-im or stgcn)");
}

bool has_volume_branch(Variant v) { return v == Variant::HStgcn || v == Variant::HStgcnOnes; }
bool uses_compound_adjacency(Variant v) { return v != Variant::Stgcn; }

void ArchitectureConfig::validate() const {
  if (segments == 0) throw std::invalid_argument("segment count must be positive");
  if (history == 0 || horizon == 0) throw std::invalid_argument("history and horizon must be positive");
  for (auto c : transformer_channels)
    if (c == 0) throw std::invalid_argument("transformer channels must be positive");
  for (auto c : gated_channels)
    if (c == 0) throw std::invalid_argument("gated channels must be positive");
  for (auto k : kernel_sizes)
    if (k == 0) throw std::invalid_argument("temporal kernel sizes must be positive");
  if (graph_channels == 0 || chebyshev_order == 0)
    throw std::invalid_argument("graph channels and Chebyshev order must be positive");
  // Γ1 and Γ2 run in parallel on the P input slots and must agree.
  if (has_volume_branch(variant) && kernel_sizes[0] != kernel_sizes[1])
    throw std::invalid_argument("branch kernels differ: K_t " + std::to_string(kernel_sizes[0]) + " vs " +
                                std::to_string(kernel_sizes[1]));
  const std::size_t shrink = (kernel_sizes[1] - 1) + (kernel_sizes[2] - 1) + (kernel_sizes[3] - 1);
  if (history != shrink + 1)
    throw std::invalid_argument("temporal length " + std::to_string(history) + " shrinks to " +
                                std::to_string(static_cast<long>(history) - static_cast<long>(shrink)) +
                                " before the head; it must be exactly 1");
}

std::map<std::string, Shape> parameter_shapes(const ArchitectureConfig& c) {
  std::map<std::string, Shape> s;
  const std::size_t n = c.segments;
  const std::size_t* g = c.gated_channels;
  const std::size_t* k = c.kernel_sizes;
  std::size_t graph_in = g[1];
  if (has_volume_branch(c.variant)) {
    const std::size_t t0 = c.transformer_channels[0], t1 = c.transformer_channels[1];
    s["transformer.shared.weight"] = {c.volume_channels(), t0};
    s["transformer.shared.bias"] = {t0};
    s["transformer.segment.weight"] = {n, t0, t1};
    s["transformer.segment.bias"] = {n, t1};
    s["gated1.kernel"] = {k[0], t1, 2 * g[0]};
    s["gated1.bias"] = {2 * g[0]};
    graph_in += g[0];
  }
  s["gated2.kernel"] = {k[1], c.travel_time_channels(), 2 * g[1]};
  s["gated2.bias"] = {2 * g[1]};
  s["graph.theta"] = {c.chebyshev_order, graph_in, c.graph_channels};
  s["graph.bias"] = {c.graph_channels};
  s["gated3.kernel"] = {k[2], c.graph_channels, 2 * g[2]};
  s["gated3.bias"] = {2 * g[2]};
  s["gated4.kernel"] = {k[3], g[2], 2 * g[3]};
  s["gated4.bias"] = {2 * g[3]};
  s["head.weight"] = {g[3], c.horizon};
  s["head.bias"] = {c.horizon};
  return s;
}

ParameterStore init_parameters(const ArchitectureConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  ParameterStore p;
  for (const auto& [name, shape] : parameter_shapes(cfg)) {
    Tensor t(shape);
    if (name.ends_with(".bias")) {
      p.emplace(name, std::move(t));
      continue;
    }
    // fan_in/fan_out of the map applied at each output location.
    double fan_in = 0, fan_out = 0;
    if (name == "transformer.segment.weight") {
      fan_in = double(shape[1]);
      fan_out = double(shape[2]);
    } else if (shape.size() == 3) {
      fan_in = double(shape[0] * shape[1]);
      fan_out = double(shape[0] * shape[2]);
    } else {
      fan_in = double(shape[0]);
      fan_out = double(shape[1]);
    }
    const double limit = std::sqrt(6.0 / (fan_in + fan_out));
    SplitMix64 rng(derive_seed(seed, "init:" + name));
    for (auto& x : t.data()) x = (2.0 * rng.uniform() - 1.0) * limit;
    p.emplace(name, std::move(t));
  }
  return p;
}

void check_parameters(const ArchitectureConfig& cfg, const ParameterStore& params) {
  for (const auto& [name, shape] : parameter_shapes(cfg)) {
    auto it = params.find(name);
    if (it == params.end()) throw std::invalid_argument("missing parameter tensor '" + name + "'");
    if (it->second.shape() != shape) {
      if (name.starts_with("transformer.segment") && !it->second.shape().empty() &&
          it->second.shape()[0] != shape[0])
        throw std::invalid_argument("parameter '" + name + "' has segment dimension n=" +
                                    std::to_string(it->second.shape()[0]) + ", expected n=" +
                                    std::to_string(shape[0]));
      throw std::invalid_argument("parameter '" + name + "' has shape " + shape_str(it->second.shape()) +
                                  ", expected " + shape_str(shape));
    }
    if (!it->second.all_finite()) throw std::invalid_argument("parameter '" + name + "' is not finite");
  }
}

namespace {

NodeId gated_conv(Graph& g, NodeId x, const std::string& prefix, std::size_t kt, std::size_t cin, std::size_t cout) {
  const NodeId k = g.parameter(prefix + ".kernel", {kt, cin, 2 * cout});
  const NodeId b = g.parameter(prefix + ".bias", {2 * cout});
  const NodeId ab = g.add_bias(g.temporal_conv(x, k), b);
  const NodeId a = g.slice(ab, 0, cout);
  const NodeId gate = g.sigmoid(g.slice(ab, cout, cout));
  const NodeId out = g.mul(a, gate);
  g.set_name(out, prefix);
  return out;
}

}  // namespace

Model::Model(const ArchitectureConfig& cfg, const SpectralOperator& op, std::size_t batch)
    : cfg_(cfg), batch_(batch) {
  cfg_.validate();
  if (batch == 0) throw std::invalid_argument("batch must be positive");
  if (op.scaled_laplacian.rank() != 2 || op.scaled_laplacian.dim(0) != cfg.segments)
    throw std::invalid_argument("spectral operator size does not match segment count n=" +
                                std::to_string(cfg.segments));
  const std::size_t n = cfg.segments, P = cfg.history, F = cfg.horizon;
  const std::size_t* gc = cfg.gated_channels;
  const std::size_t* kt = cfg.kernel_sizes;
  Graph& g = graph_;

  const NodeId t_in = g.input("T", {batch, n, P, cfg.travel_time_channels()});
  const NodeId h_tau = gated_conv(g, t_in, "gated2", kt[1], cfg.travel_time_channels(), gc[1]);
  NodeId h = h_tau;
  std::size_t graph_in = gc[1];
  if (has_volume_branch(cfg.variant)) {
    const NodeId v_in = g.input("V", {batch, n, P, cfg.volume_channels()});
    const std::size_t c0 = cfg.transformer_channels[0], c1 = cfg.transformer_channels[1];
    NodeId x = g.matmul(v_in, g.parameter("transformer.shared.weight", {cfg.volume_channels(), c0}));
    x = g.elu(g.add_bias(x, g.parameter("transformer.shared.bias", {c0})));
    x = g.elu(g.segment_affine(x, g.parameter("transformer.segment.weight", {n, c0, c1}),
                               g.parameter("transformer.segment.bias", {n, c1})));
    g.set_name(x, "transformer");
    const NodeId h_nu = gated_conv(g, x, "gated1", kt[0], c1, gc[0]);
    h = g.concat({h_nu, h_tau});  // volume branch first
    graph_in += gc[0];
  }
  const std::size_t K = cfg.chebyshev_order;
  auto lap = std::make_shared<const Tensor>(op.scaled_laplacian);
  NodeId cheb = g.chebyshev(h, lap, K);
  const NodeId theta = g.reshape(g.parameter("graph.theta", {K, graph_in, cfg.graph_channels}),
                                 {K * graph_in, cfg.graph_channels});
  NodeId gcv = g.elu(g.add_bias(g.matmul(cheb, theta), g.parameter("graph.bias", {cfg.graph_channels})));
  g.set_name(gcv, "graph_conv");
  NodeId x3 = gated_conv(g, gcv, "gated3", kt[2], cfg.graph_channels, gc[2]);
  NodeId x4 = gated_conv(g, x3, "gated4", kt[3], gc[2], gc[3]);
  NodeId flat = g.reshape(x4, {batch, n, gc[3]});
  pred_ = g.add_bias(g.matmul(flat, g.parameter("head.weight", {gc[3], F})), g.parameter("head.bias", {F}));
  g.set_name(pred_, "prediction");
  const NodeId y = g.input("Y", {batch, n, F});
  loss_ = g.mean(g.abs(g.sub(pred_, y)));
  g.set_name(loss_, "loss");

  if (cfg.variant == Variant::HStgcnOnes) ones_ = Tensor({batch, n, P, cfg.volume_channels()}, 1.0);
}

NamedTensors Model::bind(const Tensor& v, const Tensor& t, const Tensor& labels) const {
  NamedTensors in;
  in.emplace("T", t);
  if (cfg_.variant == Variant::HStgcnOnes)
    in.emplace("V", ones_);
  else if (has_volume_branch(cfg_.variant))
    in.emplace("V", v);
  in.emplace("Y", labels.empty() ? Tensor({batch_, cfg_.segments, cfg_.horizon}) : labels);
  return in;
}

const Tensor& Model::forward(const Tensor& v, const Tensor& t, const ParameterStore& params) {
  inputs_ = bind(v, t, Tensor());
  graph_.forward(inputs_, params);
  return graph_.value(pred_);
}

double Model::loss_and_gradients(const Tensor& v, const Tensor& t, const Tensor& labels,
                                 const ParameterStore& params, NamedTensors& grads) {
  inputs_ = bind(v, t, labels);
  graph_.forward(inputs_, params);
  const double loss = graph_.value(loss_)[0];
  grads = graph_.backward(loss_);
  return loss;
}

}  // namespace hstgcn
