#include "doctest.h"

#include <cmath>
#include <memory>
#include <random>

#include "hstgcn/adam.hpp"
#include "hstgcn/autograd.hpp"
#include "hstgcn/kernels.hpp"

using namespace hstgcn;

namespace {

Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = u(rng);
  return t;
}

// Random symmetric matrix with entries in [-0.5, 0.5].
std::shared_ptr<const Tensor> random_symmetric(std::size_t n, std::mt19937_64& rng) {
  auto m = std::make_shared<Tensor>(Shape{n, n});
  std::uniform_real_distribution<double> u(-0.5, 0.5);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j <= i; ++j) (*m)[i * n + j] = (*m)[j * n + i] = u(rng);
  return m;
}

}  // namespace

TEST_CASE("ELU forward matches the definition") {
  Graph g;
  auto x = g.input("x", {3});
  auto y = g.elu(x);
  NamedTensors in{{"x", Tensor::from({3}, {-1.0, 0.0, 2.0})}};
  g.forward(in, {});
  const Tensor& out = g.value(y);
  CHECK(out[0] == doctest::Approx(-0.63212055882855767).epsilon(1e-15));
  CHECK(out[1] == 0.0);
  CHECK(out[2] == 2.0);
}

TEST_CASE("identity graph returns its input") {
  Graph g;
  g.input("x", {2, 2});
  NamedTensors in{{"x", Tensor::from({2, 2}, {1, 2, 3, 4})}};
  g.forward(in, {});
  auto out = g.outputs();
  REQUIRE(out.size() == 1);
  CHECK(out.at("x") == in.at("x"));
}

TEST_CASE("matmul by identity") {
  Graph g;
  auto a = g.input("a", {2, 2});
  auto i = g.input("i", {2, 2});
  auto y = g.matmul(a, i);
  NamedTensors in{{"a", Tensor::from({2, 2}, {1, 2, 3, 4})}, {"i", Tensor::from({2, 2}, {1, 0, 0, 1})}};
  g.forward(in, {});
  CHECK(g.value(y) == in.at("a"));
}

TEST_CASE("backward of single-term L1") {
  // loss = mean(|w·x − y|), w=1, x=2, y=0 → d/dw = sign(2)·x = 2
  Graph g;
  auto x = g.input("x", {1, 1});
  auto y = g.input("y", {1, 1});
  auto w = g.parameter("w", {1, 1});
  auto loss = g.mean(g.abs(g.sub(g.matmul(x, w), y)));
  ParameterStore p{{"w", Tensor::from({1, 1}, {1.0})}};
  NamedTensors in{{"x", Tensor::from({1, 1}, {2.0})}, {"y", Tensor::from({1, 1}, {0.0})}};
  g.forward(in, p);
  auto grads = g.backward(loss);
  CHECK(grads.at("w")[0] == 2.0);
}

TEST_CASE("gradient of an unused parameter is zero") {
  Graph g;
  auto w = g.parameter("w", {3});
  auto p = g.parameter("p", {2});
  auto loss = g.sum(g.mul(w, w));
  g.elu(p);  // p feeds a different sink
  ParameterStore ps{{"w", Tensor::from({3}, {1, 2, 3})}, {"p", Tensor::from({2}, {5, 6})}};
  g.forward({}, ps);
  auto grads = g.backward(loss);
  CHECK(grads.at("w") == Tensor::from({3}, {2, 4, 6}));
  CHECK(grads.at("p") == Tensor({2}, 0.0));
}

TEST_CASE("non-scalar loss is rejected") {
  Graph g;
  auto w = g.parameter("w", {3});
  auto y = g.elu(w);
  ParameterStore ps{{"w", Tensor({3}, 1.0)}};
  g.forward({}, ps);
  CHECK_THROWS_AS(g.backward(y), std::invalid_argument);
}

TEST_CASE("shape mismatch names the node") {
  Graph g;
  auto a = g.input("a", {2, 3});
  auto b = g.input("b", {4, 5});
  try {
    g.matmul(a, b);
    FAIL("expected throw");
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    CHECK(msg.find("matmul") != std::string::npos);
    CHECK(msg.find("[2, 3]") != std::string::npos);
  }
  CHECK_THROWS_AS(g.add("no_such_op", {a}), std::invalid_argument);
  CHECK_THROWS_AS(op_from_name("conv3d"), std::invalid_argument);
  CHECK(op_from_name("elu") == Op::Elu);
}

TEST_CASE("bound input with the wrong shape is an error naming the input") {
  Graph g;
  auto x = g.input("volume", {2, 3});
  g.elu(x);
  NamedTensors in{{"volume", Tensor({3, 2})}};
  CHECK_THROWS_WITH_AS(g.forward(in, {}), doctest::Contains("volume"), std::invalid_argument);
}

TEST_CASE("finite-difference check on a quadratic") {
  Graph g;
  auto w = g.parameter("w", {5});
  auto loss = g.sum(g.mul(w, w));
  std::mt19937_64 rng(1);
  ParameterStore ps{{"w", random_tensor({5}, rng)}};
  auto r = finite_difference_check(g, ps, {}, loss, "w", 5, 1e-5, 3);
  CHECK(r.probes == 5);
  CHECK(r.max_rel_error < 1e-6);
}

TEST_CASE("finite-difference check on a zero-gradient parameter") {
  Graph g;
  auto w = g.parameter("w", {3});
  auto p = g.parameter("p", {3});
  auto loss = g.sum(g.mul(w, w));
  g.sigmoid(p);
  ParameterStore ps{{"w", Tensor({3}, 1.0)}, {"p", Tensor({3}, 0.3)}};
  auto r = finite_difference_check(g, ps, {}, loss, "p", 3, 1e-5, 3);
  CHECK(r.max_rel_error == 0.0);
}

TEST_CASE("finite-difference check leaves parameters unchanged") {
  Graph g;
  auto w = g.parameter("w", {4});
  auto loss = g.mean(g.abs(g.elu(w)));
  std::mt19937_64 rng(2);
  ParameterStore ps{{"w", random_tensor({4}, rng)}};
  const Tensor before = ps.at("w");
  finite_difference_check(g, ps, {}, loss, "w", 4, 1e-5, 9);
  CHECK(ps.at("w") == before);
}

// Every operator, one at a time, at random smooth points.
TEST_CASE("operator gradients match central differences") {
  std::mt19937_64 rng(42);
  const double h = 1e-5;
  const double tol = 1e-4;
  ParameterStore ps;
  ps["a"] = random_tensor({2, 3, 4, 5}, rng);
  ps["b"] = random_tensor({2, 3, 4, 5}, rng);
  ps["w"] = random_tensor({5, 6}, rng);
  ps["bias"] = random_tensor({5}, rng);
  ps["sw"] = random_tensor({3, 5, 2}, rng);
  ps["sb"] = random_tensor({3, 2}, rng);
  ps["k"] = random_tensor({3, 5, 4}, rng);
  ps["c"] = random_tensor({2, 3, 4, 2}, rng);
  // Fixed random projection turns any output into a scalar with a generic gradient.
  auto project = [&](Graph& g, NodeId y) {
    Tensor r = random_tensor(g.shape(y), rng);
    auto rc = g.constant(std::move(r));
    return g.sum(g.mul(y, rc));
  };
  auto check_all = [&](Graph& g, NodeId loss, const char* label) {
    for (const auto& name : g.parameter_names()) {
      auto res = finite_difference_check(g, ps, {}, loss, name, 40, h, 11);
      INFO(label << " / " << name << " rel err " << res.max_rel_error);
      CHECK(res.max_rel_error < tol);
    }
  };
  const Shape s4{2, 3, 4, 5};

  SUBCASE("matmul + add_bias") {
    Graph g;
    auto y = g.matmul(g.add_bias(g.parameter("a", s4), g.parameter("bias", {5})), g.parameter("w", {5, 6}));
    check_all(g, project(g, y), "matmul");
  }
  SUBCASE("segment_affine") {
    Graph g;
    auto y = g.segment_affine(g.parameter("a", s4), g.parameter("sw", {3, 5, 2}), g.parameter("sb", {3, 2}));
    check_all(g, project(g, y), "segment_affine");
  }
  SUBCASE("temporal_conv") {
    Graph g;
    auto y = g.temporal_conv(g.parameter("a", s4), g.parameter("k", {3, 5, 4}));
    check_all(g, project(g, y), "temporal_conv");
  }
  SUBCASE("add/sub/mul/scale") {
    Graph g;
    auto a = g.parameter("a", s4);
    auto b = g.parameter("b", s4);
    auto y = g.scale(g.mul(g.add(a, b), g.sub(a, b)), 0.7);
    check_all(g, project(g, y), "arith");
  }
  SUBCASE("elu/sigmoid") {
    Graph g;
    auto a = g.parameter("a", s4);
    auto y = g.mul(g.elu(a), g.sigmoid(g.scale(a, 2.0)));
    check_all(g, project(g, y), "elu-sigmoid");
  }
  SUBCASE("abs/mean") {
    Graph g;
    auto y = g.mean(g.abs(g.sub(g.parameter("a", s4), g.parameter("b", s4))));
    check_all(g, y, "abs-mean");
  }
  SUBCASE("concat/slice/reshape") {
    Graph g;
    auto cat = g.concat({g.parameter("a", s4), g.parameter("c", {2, 3, 4, 2})});
    auto y = g.reshape(g.slice(cat, 3, 3), {6, 12});
    check_all(g, project(g, y), "concat-slice");
  }
  SUBCASE("chebyshev") {
    Graph g;
    auto lap = random_symmetric(3, rng);
    auto y = g.chebyshev(g.parameter("a", s4), lap, 4);
    check_all(g, project(g, y), "chebyshev");
  }
}

TEST_CASE("forward is deterministic") {
  std::mt19937_64 rng(5);
  Graph g;
  auto x = g.parameter("x", {2, 4, 6, 3});
  auto k = g.parameter("k", {3, 3, 8});
  auto y = g.sigmoid(g.temporal_conv(x, k));
  ParameterStore ps{{"x", random_tensor({2, 4, 6, 3}, rng)}, {"k", random_tensor({3, 3, 8}, rng)}};
  g.forward({}, ps);
  const Tensor first = g.value(y);
  g.forward({}, ps);
  CHECK(g.value(y) == first);
}

TEST_CASE("valid convolution output length is len - kt + 1") {
  for (std::size_t len : {3u, 6u, 9u})
    for (std::size_t kt : {1u, 2u, 3u}) {
      Graph g;
      auto y = g.temporal_conv(g.input("x", {4, len, 2}), g.input("k", {kt, 2, 5}));
      CHECK(g.shape(y) == Shape{4, len - kt + 1, 5});
    }
  Graph g;
  CHECK_THROWS(g.temporal_conv(g.input("x", {4, 2, 2}), g.input("k", {3, 2, 5})));
}

TEST_CASE("concat then slice at the seam recovers both operands") {
  std::mt19937_64 rng(8);
  Graph g;
  auto a = g.input("a", {3, 2, 4});
  auto b = g.input("b", {3, 2, 7});
  auto cat = g.concat({a, b});
  auto sa = g.slice(cat, 0, 4);
  auto sb = g.slice(cat, 4, 7);
  NamedTensors in{{"a", random_tensor({3, 2, 4}, rng)}, {"b", random_tensor({3, 2, 7}, rng)}};
  g.forward(in, {});
  CHECK(g.value(sa) == in.at("a"));
  CHECK(g.value(sb) == in.at("b"));
}

TEST_CASE("parallel kernels agree with the serial reference") {
  std::mt19937_64 rng(13);
  const std::size_t m = 37, k = 29, n = 23;
  Tensor a = random_tensor({m, k}, rng), b = random_tensor({k, n}, rng);
  Tensor c1({m, n}), c2({m, n});
  kernels::serial::gemm(a.ptr(), b.ptr(), c1.ptr(), m, k, n, false);
  kernels::parallel::gemm(a.ptr(), b.ptr(), c2.ptr(), m, k, n, false);
  CHECK(max_abs_diff(c1, c2) < 1e-12);

  Tensor bt = random_tensor({m, n}, rng);
  Tensor d1({k, n}), d2({k, n});
  kernels::serial::gemm_tn(a.ptr(), bt.ptr(), d1.ptr(), m, k, n, false);
  kernels::parallel::gemm_tn(a.ptr(), bt.ptr(), d2.ptr(), m, k, n, false);
  CHECK(max_abs_diff(d1, d2) < 1e-12);

  Tensor bn = random_tensor({n, k}, rng);
  Tensor e1({m, n}), e2({m, n});
  kernels::serial::gemm_nt(a.ptr(), bn.ptr(), e1.ptr(), m, k, n, false);
  kernels::parallel::gemm_nt(a.ptr(), bn.ptr(), e2.ptr(), m, k, n, false);
  CHECK(max_abs_diff(e1, e2) < 1e-12);

  const std::size_t rows = 5, len = 7, cin = 3, kt = 3;
  Tensor x = random_tensor({rows, len, cin}, rng);
  Tensor col1({rows * (len - kt + 1), kt * cin}), col2 = col1;
  kernels::serial::im2col_temporal(x.ptr(), rows, len, cin, kt, col1.ptr());
  kernels::parallel::im2col_temporal(x.ptr(), rows, len, cin, kt, col2.ptr());
  CHECK(col1 == col2);
  Tensor dx1({rows, len, cin}), dx2({rows, len, cin});
  kernels::serial::col2im_temporal_add(col1.ptr(), rows, len, cin, kt, dx1.ptr());
  kernels::parallel::col2im_temporal_add(col1.ptr(), rows, len, cin, kt, dx2.ptr());
  CHECK(dx1 == dx2);
}

TEST_CASE("Chebyshev adjoint equals the explicit sum of T_k G_k") {
  std::mt19937_64 rng(21);
  const std::size_t n = 6, cols = 4, order = 4;
  auto op = random_symmetric(n, rng);
  std::vector<Tensor> g;
  std::vector<const double*> gp;
  for (std::size_t k = 0; k < order; ++k) {
    g.push_back(random_tensor({n, cols}, rng));
    gp.push_back(g.back().ptr());
  }
  Tensor expected({n, cols});
  for (std::size_t k = 0; k < order; ++k) {
    std::vector<Tensor> basis(order, Tensor({n, cols}));
    std::vector<double*> bp;
    for (auto& t : basis) bp.push_back(t.ptr());
    kernels::serial::chebyshev_basis(op->ptr(), n, g[k].ptr(), cols, order, bp.data());
    for (std::size_t i = 0; i < n * cols; ++i) expected[i] += basis[k][i];
  }
  Tensor got({n, cols});
  std::vector<double> scratch(3 * n * cols);
  kernels::parallel::chebyshev_adjoint_add(op->ptr(), n, gp.data(), cols, order, got.ptr(), scratch.data());
  CHECK(max_abs_diff(expected, got) < 1e-12);
}

TEST_CASE("Adam first step moves by lr times sign of the gradient") {
  AdamState st;
  ParameterStore ps{{"w", Tensor::from({3}, {1.0, 1.0, 1.0})}};
  NamedTensors g{{"w", Tensor::from({3}, {0.5, -2.0, 1e-3})}};
  adam_step(st, ps, g, 0);
  CHECK(st.step_count == 1);
  // m̂ = g, v̂ = g² ⇒ Δ = −lr·g/(|g| + ε)
  for (std::size_t i = 0; i < 3; ++i) {
    const double gi = g.at("w")[i];
    CHECK(ps.at("w")[i] == doctest::Approx(1.0 - 1e-3 * gi / (std::abs(gi) + 1e-8)).epsilon(1e-12));
  }
}

TEST_CASE("Adam with zero gradient leaves parameters unchanged") {
  AdamState st;
  ParameterStore ps{{"w", Tensor::from({2}, {0.25, -3.0})}};
  const Tensor before = ps.at("w");
  adam_step(st, ps, {{"w", Tensor({2}, 0.0)}}, 0);
  CHECK(ps.at("w") == before);
}

TEST_CASE("Adam effective learning rate decays per epoch") {
  AdamState st;
  CHECK(st.effective_lr(0) == 0.001);
  CHECK(st.effective_lr(2) == doctest::Approx(0.0009604).epsilon(1e-12));
  CHECK_THROWS(st.effective_lr(-1));
}

TEST_CASE("Adam rejects non-finite gradients") {
  AdamState st;
  ParameterStore ps{{"w", Tensor({2}, 1.0)}};
  CHECK_THROWS_AS(adam_step(st, ps, {{"w", Tensor::from({2}, {1.0, NAN})}}, 0), std::runtime_error);
  CHECK(ps.at("w") == Tensor({2}, 1.0));
  CHECK(st.step_count == 0);
}

TEST_CASE("one Adam step decreases a fresh quadratic") {
  Graph g;
  auto w = g.parameter("w", {4});
  auto loss = g.sum(g.mul(w, w));
  ParameterStore ps{{"w", Tensor::from({4}, {0.3, -1.2, 2.0, 0.01})}};
  g.forward({}, ps);
  const double before = g.value(loss)[0];
  AdamState st;
  adam_step(st, ps, g.backward(loss), 0);
  g.forward({}, ps);
  CHECK(g.value(loss)[0] < before);
}
