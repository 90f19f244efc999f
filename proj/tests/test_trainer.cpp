#include "doctest.h"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "hstgcn/adam.hpp"
#include "hstgcn/scenario.hpp"
#include "hstgcn/trainer.hpp"

using namespace hstgcn;

namespace {

struct Fixture {
  RoadNetwork net;
  FeatureStore fs;
  SpectralOperator op;
};

// 24 segments, two-day weeks: three training weeks and one test week.
const Fixture& fixture() {
  static const Fixture fx = [] {
    Fixture f;
    f.net = generate_network(NetworkKind::Grid, 24, 4);
    TimeGrid g;
    g.days_per_week = 2;
    g.train_weeks = 3;
    g.test_weeks = 1;
    DemandSpec spec;
    spec.background_rate = 200.0;
    spec.commute_rate = 600.0;
    const auto dm = generate_demand(f.net, g, spec, 4);
    const auto sim = propagate_traffic(f.net, dm, class_diagrams(f.net), g, SimulationConfig{});
    f.fs = build_feature_store(sim.log, sim.travel_time, g, 6, 12);
    Tensor train({24, g.train_slots()});
    for (std::size_t s = 0; s < 24; ++s)
      for (std::size_t t = 0; t < g.train_slots(); ++t) train[s * g.train_slots() + t] = sim.travel_time[s * g.total_slots() + t];
    f.op = scaled_laplacian(build_adjacency(f.net, train, 3.0, 0.0).compound);
    return f;
  }();
  return fx;
}

ArchitectureConfig arch_for(Variant v) {
  ArchitectureConfig a;
  a.variant = v;
  a.segments = 24;
  return a;
}

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("hstgcn_test_" + name)).string();
}

}  // namespace

TEST_CASE("L1 loss examples") {
  CHECK(l1_loss(Tensor::from({1, 2}, {1, 2}), Tensor::from({1, 2}, {0, 4})) == 1.5);
  CHECK(l1_loss(Tensor::from({1, 2}, {1, 2}), Tensor::from({1, 2}, {1, 2})) == 0.0);
  CHECK(l1_loss(Tensor::from({1, 2}, {1 + 7.0, 2 + 7.0}), Tensor::from({1, 2}, {0 + 7.0, 4 + 7.0})) == 1.5);
  CHECK_THROWS_AS(l1_loss(Tensor::from({2}, {1, 2}), Tensor::from({1, 2}, {0, 4})), std::invalid_argument);
  CHECK_THROWS_AS(l1_loss(Tensor::from({1}, {NAN}), Tensor::from({1}, {0})), std::invalid_argument);
}

TEST_CASE("learning rate decays per epoch") {
  AdamState a;
  CHECK(a.effective_lr(0) == 1e-3);
  CHECK(a.effective_lr(2) == doctest::Approx(1e-3 * 0.98 * 0.98).epsilon(1e-14));
}

TEST_CASE("training and validation anchors") {
  const auto& fs = fixture().fs;
  const auto& g = fs.grid;
  const auto tr = training_anchors(fs);
  const auto va = validation_anchors(fs, 1);
  REQUIRE(!tr.empty());
  REQUIRE(!va.empty());
  const std::size_t last_week = g.train_slots() - g.slots_per_week();
  for (auto a : tr) CHECK(a + fs.horizon < last_week);
  for (auto a : va) {
    CHECK(a >= last_week + fs.history - 1);
    CHECK(a + fs.horizon < g.train_slots());
  }
  CHECK(validation_anchors(fs, 10).size() == (va.size() + 9) / 10);
  TrainConfig bad;
  bad.batch = 0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("a single window is overfit within 500 steps, reproducibly") {
  const auto& fx = fixture();
  const auto arch = arch_for(Variant::HStgcn);
  const std::size_t anchor = training_anchors(fx.fs)[100];
  TrainConfig cfg;
  cfg.epochs = 5;
  cfg.steps_per_epoch = 100;
  cfg.batch = 1;
  cfg.noise = false;
  cfg.seed = 3;
  const auto a = fit(fx.fs, fx.op, arch, cfg, {anchor}, {});
  REQUIRE(a.trace.step_losses.size() == 500);
  const double first = a.trace.step_losses.front();
  const double last = a.trace.step_losses.back();
  INFO("initial " << first << " final " << last);
  CHECK(last < 0.05 * first);

  const auto b = fit(fx.fs, fx.op, arch, cfg, {anchor}, {});
  CHECK(a.trace.step_losses == b.trace.step_losses);
  CHECK(a.params == b.params);
}

TEST_CASE("same seed gives bit-identical traces with noise and shuffling") {
  const auto& fx = fixture();
  const auto arch = arch_for(Variant::HStgcn);
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.steps_per_epoch = 6;
  cfg.batch = 4;
  cfg.validation_stride = 20;
  cfg.seed = 9;
  const auto a = fit(fx.fs, fx.op, arch, cfg);
  const auto b = fit(fx.fs, fx.op, arch, cfg);
  CHECK(a.trace.step_losses == b.trace.step_losses);
  REQUIRE(a.trace.epochs.size() == 2);
  CHECK(a.trace.epochs[1].val_loss == b.trace.epochs[1].val_loss);
  CHECK(a.trace.epochs[1].learning_rate == doctest::Approx(1e-3 * 0.98).epsilon(1e-14));
  cfg.seed = 10;
  const auto c = fit(fx.fs, fx.op, arch, cfg);
  CHECK(!(a.trace.step_losses == c.trace.step_losses));
}

TEST_CASE("the returned parameters are the best validation epoch") {
  const auto& fx = fixture();
  const auto arch = arch_for(Variant::Stgcn);
  TrainConfig cfg;
  cfg.epochs = 4;
  cfg.steps_per_epoch = 5;
  cfg.batch = 4;
  cfg.base_lr = 0.05;  // large steps make the validation curve bumpy
  cfg.validation_stride = 10;
  cfg.patience = 100;
  const auto r = fit(fx.fs, fx.op, arch, cfg);
  double best = INFINITY;
  std::size_t best_epoch = 0;
  for (const auto& e : r.trace.epochs)
    if (e.val_loss < best) {
      best = e.val_loss;
      best_epoch = e.epoch;
    }
  CHECK(r.trace.best_epoch == best_epoch);
  CHECK(r.trace.best_val_loss == best);
  // Re-evaluating the returned parameters reproduces the recorded loss.
  const auto va = validation_anchors(fx.fs, 10);
  const Forecast fc = predict(fx.fs, fx.op, arch, r.params, va);
  const std::size_t n = 24, F = 12, S = fx.fs.travel_time.dim(1);
  double s = 0.0;
  for (std::size_t a = 0; a < va.size(); ++a)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t f = 0; f < F; ++f)
        s += std::abs(fc.values[(a * n + i) * F + f] - fx.fs.travel_time[i * S + va[a] + 1 + f]);
  CHECK(s / double(va.size() * n * F) == doctest::Approx(best).epsilon(1e-12));
}

TEST_CASE("early stopping honours patience") {
  const auto& fx = fixture();
  TrainConfig cfg;
  cfg.epochs = 30;
  cfg.steps_per_epoch = 1;
  cfg.batch = 2;
  cfg.base_lr = 0.5;
  cfg.patience = 2;
  cfg.validation_stride = 20;
  const auto r = fit(fx.fs, fx.op, arch_for(Variant::Stgcn), cfg);
  CHECK(r.trace.epochs.size() <= r.trace.best_epoch + 3);
  CHECK(r.trace.epochs.size() < 30);
}

TEST_CASE("checkpoint round trip") {
  const auto& fx = fixture();
  Checkpoint ck;
  ck.arch = arch_for(Variant::HStgcn);
  ck.params = init_parameters(ck.arch, 77);
  ck.normalizer = fx.fs.normalizer;
  ck.adjacency_hash = std::string(64, 'a');
  ck.meta["seed"] = "77";
  ck.meta["note"] = "two words";
  const auto path = temp_path("ck.bin");
  save_checkpoint(ck, path);
  const Checkpoint back = load_checkpoint(path, 24);
  CHECK(back.params == ck.params);
  CHECK(back.normalizer.mean == ck.normalizer.mean);
  CHECK(back.normalizer.std == ck.normalizer.std);
  CHECK(back.adjacency_hash == ck.adjacency_hash);
  CHECK(back.meta == ck.meta);
  CHECK(back.arch.variant == Variant::HStgcn);
  CHECK(back.arch.segments == 24);

  CHECK_THROWS_WITH_AS(load_checkpoint(path, 48), doctest::Contains("n=24"), std::invalid_argument);

  // Truncated blob.
  std::string bytes;
  {
    std::ifstream is(path, std::ios::binary);
    bytes.assign(std::istreambuf_iterator<char>(is), {});
  }
  {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    os.write(bytes.data(), std::streamsize(bytes.size() - 100));
  }
  CHECK_THROWS_AS(load_checkpoint(path), std::runtime_error);
  {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    os << "hstgcn-checkpoint 99\nend\n";
  }
  CHECK_THROWS_WITH_AS(load_checkpoint(path), doctest::Contains("version 99"), std::runtime_error);
  std::filesystem::remove(path);
  CHECK_THROWS_AS(load_checkpoint(path), std::runtime_error);
}

TEST_CASE("predictions come back in seconds per metre") {
  const auto& fx = fixture();
  const auto arch = arch_for(Variant::StgcnIm);
  const auto params = init_parameters(arch, 1);
  const auto anchors = valid_anchors(fx.fs.grid, 6, 12, fx.fs.grid.train_slots(), fx.fs.grid.total_slots());
  const std::vector<std::size_t> few(anchors.begin(), anchors.begin() + 5);
  const Forecast a = predict(fx.fs, fx.op, arch, params, few, 2);
  const Forecast b = predict(fx.fs, fx.op, arch, params, few, 32);
  CHECK(a.values.size() == 5 * 24 * 12);
  for (std::size_t i = 0; i < a.values.size(); ++i) CHECK(a.values[i] == doctest::Approx(b.values[i]).epsilon(1e-12));
  auto bad = arch;
  bad.segments = 12;
  CHECK_THROWS_AS(predict(fx.fs, fx.op, bad, init_parameters(bad, 1), few), std::invalid_argument);
}
