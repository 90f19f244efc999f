#pragma once

// Adjacency construction and the scaled-Laplacian Chebyshev basis used by the
// graph convolution. All matrices are n×n Tensors.

#include <cstddef>

#include "hstgcn/road_network.hpp"
#include "hstgcn/tensor.hpp"

namespace hstgcn {

struct AdjacencySet {
  Tensor dijkstra;    // Gaussian distance decay, cut at epsilon
  Tensor covariance;  // clipped positive co-deviation of training travel time
  Tensor compound;    // covariance ∘ dijkstra
  double sigma2 = 3.0;
  double epsilon = 0.0;
};

struct SpectralOperator {
  Tensor scaled_laplacian;
  double lambda_max = 0.0;
  std::size_t chebyshev_order = 3;
};

/// Midpoint-to-midpoint shortest directed path length in km, symmetrized by
/// min(d_ij, d_ji). Unreachable pairs are +inf, d_ii = 0.
Tensor shortest_path_distances(const RoadNetwork& net);

/// exp(−d²/σ²), zeroed where below epsilon. sigma2 in km².
Tensor dijkstra_matrix(const Tensor& dist_km, double sigma2, double epsilon);

/// travel_time is n×S (training slots only); entry (i, j) is
/// Σ_t (τ_it − τ̄_i)₊ (τ_jt − τ̄_j)₊ with no 1/S normalization.
Tensor covariance_matrix(const Tensor& travel_time);

/// Elementwise product; throws on shape mismatch.
Tensor compound_matrix(const Tensor& covariance, const Tensor& dijkstra);

AdjacencySet build_adjacency(const RoadNetwork& net, const Tensor& train_travel_time,
                             double sigma2, double epsilon);

/// Normalized Laplacian I − D^{-1/2} W D^{-1/2} (zero-degree rows use
/// D^{-1/2} = 0), λ_max by power iteration, and L̃ = 2L/λ_max − I.
/// Throws if W has no nonzero entry.
SpectralOperator scaled_laplacian(const Tensor& w, std::size_t chebyshev_order = 3);

/// Largest eigenvalue of a symmetric PSD matrix by power iteration from a
/// fixed pseudo-random start; stops when the Rayleigh quotient changes by
/// less than rel_tol (relative) or after max_iter iterations.
double power_iteration_lambda_max(const Tensor& m, double rel_tol = 1e-12, int max_iter = 10000);

/// T_k(L̃)·X for X of shape n×C, via the three-term recurrence.
Tensor chebyshev_apply(const SpectralOperator& spec, const Tensor& x, std::size_t k);

}  // namespace hstgcn
