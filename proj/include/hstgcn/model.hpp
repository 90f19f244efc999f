#pragma once

// H-STGCN and its ablation variants assembled on the autograd graph.
//
// Every window in a batch is folded into the leading axis, so one graph
// evaluation handles B anchors: V [B, n, P, 2(F+1)], T [B, n, P, F+2],
// prediction [B, n, F].

#include <cstdint>
#include <memory>
#include <string>
#include <string_view>

#include "hstgcn/autograd.hpp"
#include "hstgcn/spectral.hpp"

namespace hstgcn {

enum class Variant { HStgcn, HStgcnOnes, StgcnIm, Stgcn };

std::string_view to_string(Variant v);      // hstgcn | hstgcn1 | stgcn-im | stgcn
std::string_view display_name(Variant v);   // H-STGCN | H-STGCN(1) | STGCN(Im) | STGCN
Variant parse_variant(std::string_view s);  // accepts either spelling

bool has_volume_branch(Variant v);
bool uses_compound_adjacency(Variant v);

struct ArchitectureConfig {
  Variant variant = Variant::HStgcn;
  std::size_t segments = 0;
  std::size_t history = 6;  // P
  std::size_t horizon = 12;  // F
  std::size_t transformer_channels[2] = {16, 16};
  std::size_t gated_channels[4] = {64, 128, 64, 64};  // Γ1 volume, Γ2 travel time, Γ3, Γ4
  std::size_t kernel_sizes[4] = {3, 3, 3, 2};
  std::size_t graph_channels = 64;
  std::size_t chebyshev_order = 3;

  std::size_t volume_channels() const { return 2 * (horizon + 1); }
  std::size_t travel_time_channels() const { return horizon + 2; }
  /// Throws std::invalid_argument when a size is zero, the two branches
  /// disagree on output length, or the head would not see length 1.
  void validate() const;
};

/// Glorot-uniform weights, zero biases. Deterministic in seed.
ParameterStore init_parameters(const ArchitectureConfig& cfg, std::uint64_t seed);

/// Name → shape table the graph expects.
std::map<std::string, Shape> parameter_shapes(const ArchitectureConfig& cfg);

/// Throws if params misses a tensor or a shape disagrees (the message names
/// the tensor and, for the segment axis, the dimension).
void check_parameters(const ArchitectureConfig& cfg, const ParameterStore& params);

class Model {
public:
  Model(const ArchitectureConfig& cfg, const SpectralOperator& op, std::size_t batch);

  const ArchitectureConfig& config() const { return cfg_; }
  std::size_t batch() const { return batch_; }

  /// Returns predictions [B, n, F]. For the ones variant the V argument is
  /// ignored and an all-ones tensor is used; branch-free variants ignore V.
  const Tensor& forward(const Tensor& v, const Tensor& t, const ParameterStore& params);

  /// Mean absolute error against labels [B, n, F]; fills grads.
  double loss_and_gradients(const Tensor& v, const Tensor& t, const Tensor& labels,
                            const ParameterStore& params, NamedTensors& grads);

  Graph& graph() { return graph_; }
  NodeId prediction_node() const { return pred_; }
  NodeId loss_node() const { return loss_; }
  /// Input bindings for graph-level tools (gradient checks).
  NamedTensors bind(const Tensor& v, const Tensor& t, const Tensor& labels) const;

private:
  ArchitectureConfig cfg_;
  std::size_t batch_;
  Graph graph_;
  NodeId pred_ = 0;
  NodeId loss_ = 0;
  Tensor ones_;
  NamedTensors inputs_;
};

}  // namespace hstgcn
