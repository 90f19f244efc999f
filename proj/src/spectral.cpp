#include "hstgcn/spectral.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <queue>
#include <random>
#include <stdexcept>

#include "hstgcn/kernels.hpp"

namespace hstgcn {

namespace {

void require_square(const Tensor& m, const char* what) {
  if (m.rank() != 2 || m.dim(0) != m.dim(1))
    throw std::invalid_argument(std::string(what) + " must be square, got " + shape_str(m.shape()));
}

}  // namespace

Tensor shortest_path_distances(const RoadNetwork& net) {
  const std::size_t n = net.size();
  const double inf = std::numeric_limits<double>::infinity();
  Tensor directed({n, n}, inf);
  using Item = std::pair<double, std::size_t>;
#pragma omp parallel for schedule(dynamic)
  for (std::size_t src = 0; src < n; ++src) {
    double* dist = directed.ptr() + src * n;
    std::priority_queue<Item, std::vector<Item>, std::greater<>> pq;
    dist[src] = 0.0;
    pq.emplace(0.0, src);
    while (!pq.empty()) {
      auto [d, u] = pq.top();
      pq.pop();
      if (d > dist[u]) continue;
      const double half_u = 0.5 * net.segments[u].length_m;
      for (auto v : net.successors[u]) {
        const double nd = d + half_u + 0.5 * net.segments[v].length_m;
        if (nd < dist[v]) {
          dist[v] = nd;
          pq.emplace(nd, v);
        }
      }
    }
  }
  Tensor out({n, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      out[i * n + j] = std::min(directed[i * n + j], directed[j * n + i]) / 1000.0;
  return out;
}

Tensor dijkstra_matrix(const Tensor& dist_km, double sigma2, double epsilon) {
  require_square(dist_km, "distance matrix");
  if (!(sigma2 > 0.0)) throw std::invalid_argument("sigma2 must be > 0");
  if (!(epsilon >= 0.0 && epsilon < 1.0)) throw std::invalid_argument("epsilon must lie in [0, 1)");
  Tensor w(dist_km.shape());
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double d = dist_km[i];
    const double v = std::isinf(d) ? 0.0 : std::exp(-d * d / sigma2);
    w[i] = v >= epsilon ? v : 0.0;
  }
  return w;
}

Tensor covariance_matrix(const Tensor& tt) {
  if (tt.rank() != 2) throw std::invalid_argument("travel time must be n×S");
  const std::size_t n = tt.dim(0), s = tt.dim(1);
  if (s < 2) throw std::invalid_argument("covariance needs at least 2 training slots");
  Tensor dev({n, s});
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = tt.ptr() + i * s;
    double mean = 0.0;
    for (std::size_t t = 0; t < s; ++t) mean += row[t];
    mean /= static_cast<double>(s);
    for (std::size_t t = 0; t < s; ++t) dev[i * s + t] = std::max(0.0, row[t] - mean);
  }
  Tensor cov({n, n});
#pragma omp parallel for schedule(dynamic)
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j <= i; ++j) {
      const double* a = dev.ptr() + i * s;
      const double* b = dev.ptr() + j * s;
      double acc = 0.0;
      for (std::size_t t = 0; t < s; ++t) acc += a[t] * b[t];
      cov[i * n + j] = acc;
      cov[j * n + i] = acc;
    }
  }
  return cov;
}

Tensor compound_matrix(const Tensor& covariance, const Tensor& dijkstra) {
  if (covariance.shape() != dijkstra.shape())
    throw std::invalid_argument("compound matrix operands differ in shape: " +
                                shape_str(covariance.shape()) + " vs " + shape_str(dijkstra.shape()));
  Tensor w(covariance.shape());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = covariance[i] * dijkstra[i];
  return w;
}

AdjacencySet build_adjacency(const RoadNetwork& net, const Tensor& train_travel_time, double sigma2,
                             double epsilon) {
  if (train_travel_time.rank() != 2 || train_travel_time.dim(0) != net.size())
    throw std::invalid_argument("training travel time must have one row per segment");
  AdjacencySet adj;
  adj.sigma2 = sigma2;
  adj.epsilon = epsilon;
  adj.dijkstra = dijkstra_matrix(shortest_path_distances(net), sigma2, epsilon);
  adj.covariance = covariance_matrix(train_travel_time);
  adj.compound = compound_matrix(adj.covariance, adj.dijkstra);
  return adj;
}

double power_iteration_lambda_max(const Tensor& m, double rel_tol, int max_iter) {
  require_square(m, "matrix");
  const std::size_t n = m.dim(0);
  std::mt19937_64 rng(0x5eed);
  std::uniform_real_distribution<double> u(0.5, 1.5);
  std::vector<double> v(n), w(n);
  for (auto& x : v) x = u(rng);
  auto normalize = [](std::vector<double>& x) {
    double s = 0.0;
    for (double e : x) s += e * e;
    s = std::sqrt(s);
    if (s == 0.0) return false;
    for (double& e : x) e /= s;
    return true;
  };
  normalize(v);
  double lambda = 0.0;
  for (int it = 0; it < max_iter; ++it) {
    kernels::parallel::gemm(m.ptr(), v.data(), w.data(), n, n, 1, false);
    double rq = 0.0;
    for (std::size_t i = 0; i < n; ++i) rq += v[i] * w[i];
    if (!normalize(w)) return 0.0;
    v.swap(w);
    if (it > 0 && std::abs(rq - lambda) <= rel_tol * std::abs(rq)) {
      lambda = rq;
      break;
    }
    lambda = rq;
  }
  return lambda;
}

SpectralOperator scaled_laplacian(const Tensor& w, std::size_t chebyshev_order) {
  require_square(w, "adjacency");
  if (chebyshev_order == 0) throw std::invalid_argument("Chebyshev order must be >= 1");
  const std::size_t n = w.dim(0);
  bool any = false;
  for (std::size_t i = 0; i < w.size(); ++i) {
    if (w[i] < 0.0) throw std::invalid_argument("adjacency must be elementwise nonnegative");
    any = any || w[i] != 0.0;
  }
  if (!any) throw std::invalid_argument("adjacency is all zero (graph has no edges)");

  std::vector<double> inv_sqrt(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double d = 0.0;
    for (std::size_t j = 0; j < n; ++j) d += w[i * n + j];
    inv_sqrt[i] = d > 0.0 ? 1.0 / std::sqrt(d) : 0.0;
  }
  Tensor lap({n, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      lap[i * n + j] = (i == j ? 1.0 : 0.0) - inv_sqrt[i] * w[i * n + j] * inv_sqrt[j];
  // Exact symmetry regardless of rounding in the products above.
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < i; ++j) lap[j * n + i] = lap[i * n + j];

  SpectralOperator op;
  op.chebyshev_order = chebyshev_order;
  op.lambda_max = power_iteration_lambda_max(lap);
  if (!(op.lambda_max > 0.0)) throw std::invalid_argument("Laplacian has no positive eigenvalue");
  op.scaled_laplacian = Tensor({n, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      op.scaled_laplacian[i * n + j] = 2.0 * lap[i * n + j] / op.lambda_max - (i == j ? 1.0 : 0.0);
  return op;
}

Tensor chebyshev_apply(const SpectralOperator& spec, const Tensor& x, std::size_t k) {
  if (k >= spec.chebyshev_order)
    throw std::out_of_range("Chebyshev index " + std::to_string(k) + " outside order " +
                            std::to_string(spec.chebyshev_order));
  const std::size_t n = spec.scaled_laplacian.dim(0);
  if (x.rank() != 2 || x.dim(0) != n)
    throw std::invalid_argument("signal must be " + std::to_string(n) + "×C, got " + shape_str(x.shape()));
  const std::size_t cols = x.dim(1);
  std::vector<Tensor> basis(k + 1, Tensor({n, cols}));
  std::vector<double*> ptrs;
  for (auto& b : basis) ptrs.push_back(b.ptr());
  kernels::parallel::chebyshev_basis(spec.scaled_laplacian.ptr(), n, x.ptr(), cols, k + 1, ptrs.data());
  return basis[k];
}

}  // namespace hstgcn
