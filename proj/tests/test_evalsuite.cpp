#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <random>

#include "hstgcn/evalsuite.hpp"

using namespace hstgcn;

namespace {

// Two segments (one per direction) between two nodes, both of one class.
RoadNetwork pair_network(RoadClass cls) {
  RoadNetwork net;
  net.nodes = {{0.0, 0.0}, {1.0, 0.0}};
  net.segments = {{0, 0, 1, 1000.0, cls, 60.0}, {1, 1, 0, 1000.0, cls, 60.0}};
  net.link_by_nodes();
  return net;
}

TimeGrid day_grid(std::size_t spd, std::size_t train_weeks, std::size_t test_weeks) {
  TimeGrid g;
  g.slots_per_day = spd;
  g.days_per_week = 1;
  g.train_weeks = train_weeks;
  g.test_weeks = test_weeks;
  return g;
}

Tensor filled(std::size_t n, std::size_t s, double v) { return Tensor({n, s}, v); }

}  // namespace

TEST_CASE("metrics hand examples") {
  std::vector<double> p{2.0, 4.0}, y{1.0, 4.0};
  const Metrics m = compute_metrics(p, y);
  CHECK(m.mae == 0.5);
  CHECK(m.mape == 50.0);
  CHECK(m.rmse == doctest::Approx(std::sqrt(0.5)).epsilon(1e-15));
  CHECK(std::abs(m.rmse - std::sqrt(0.5)) < 1e-12);
  CHECK(m.count == 2);

  const Metrics z = compute_metrics(y, y);
  CHECK(z.mae == 0.0);
  CHECK(z.mape == 0.0);
  CHECK(z.rmse == 0.0);
}

TEST_CASE("metrics mask, MAPE floor and errors") {
  std::vector<double> p{2.0, 4.0, 9.0}, y{1.0, 4.0, 0.01};
  std::vector<std::uint8_t> mask{1, 1, 0};
  const Metrics m = compute_metrics(p, y, mask);
  CHECK(m.count == 2);
  CHECK(m.mae == 0.5);

  // τ below the floor counts for MAE/RMSE only.
  const Metrics all = compute_metrics(p, y);
  CHECK(all.count == 3);
  CHECK(all.mape_count == 2);
  CHECK(all.mape == 50.0);

  std::vector<std::uint8_t> none{0, 0, 0};
  CHECK_THROWS_AS(compute_metrics(p, y, none), std::invalid_argument);
  std::vector<double> short_y{1.0};
  CHECK_THROWS_AS(compute_metrics(p, short_y), std::invalid_argument);
}

TEST_CASE("metrics are permutation invariant and MAE <= RMSE") {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.04, 0.4);
  std::vector<double> p(500), y(500);
  for (std::size_t i = 0; i < p.size(); ++i) {
    p[i] = u(rng);
    y[i] = u(rng);
  }
  const Metrics a = compute_metrics(p, y);
  std::vector<std::size_t> idx(p.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::shuffle(idx.begin(), idx.end(), rng);
  std::vector<double> p2, y2;
  for (auto i : idx) {
    p2.push_back(p[i]);
    y2.push_back(y[i]);
  }
  const Metrics b = compute_metrics(p2, y2);
  CHECK(b.mae == doctest::Approx(a.mae).epsilon(1e-12));
  CHECK(b.rmse == doctest::Approx(a.rmse).epsilon(1e-12));
  CHECK(b.mape == doctest::Approx(a.mape).epsilon(1e-12));
  CHECK(a.mae <= a.rmse);
}

TEST_CASE("expressway dip labels the dip plus an hour either side") {
  const auto net = pair_network(RoadClass::Expressway);
  const TimeGrid g = day_grid(60, 1, 0);
  const std::size_t S = g.total_slots();
  Tensor tt = filled(2, S, 3.6 / 50.0);
  Tensor ha = filled(2, S, 3.6 / 50.0);
  Tensor vol = filled(2, S, 60.0);  // 12 veh/min
  for (std::size_t t = 30; t < 33; ++t) tt[t] = 3.6 / 15.0;
  const auto lab = classify_slices(tt, ha, vol, net, g, SliceSpec{});

  CHECK(lab.high_volume[0] == 1);
  for (std::size_t t = 0; t < S; ++t) {
    CHECK(lab.congested_core[t] == (t >= 30 && t < 33));
    CHECK(lab.congested[t] == (t >= 18 && t < 45));
    CHECK(lab.congested[S + t] == 0);  // free-flow segment
  }
  CHECK(lab.count(SliceKind::Congested, 0, S) == 27);
  // 15 km/h against a 50 km/h HA is below half for 3 slots: NRC too.
  CHECK(lab.count(SliceKind::NonRecurring, 0, S) == 27);
  CHECK(lab.count(SliceKind::Full, 0, S) == 2 * S);
}

TEST_CASE("extension is clipped to the day and merges overlapping events") {
  std::vector<std::uint8_t> f(20, 0);
  f[1] = 1;
  f[4] = 1;
  f[11] = 1;
  const auto e = extend_within_day(f, 10, 2);
  const std::vector<std::uint8_t> want{1, 1, 1, 1, 1, 1, 1, 0, 0, 0, 1, 1, 1, 1, 0, 0, 0, 0, 0, 0};
  CHECK(e == want);

  std::vector<std::uint8_t> r{1, 0, 1, 1, 0, 0, 0, 0, 1, 1, 1, 1, 1, 0, 0, 0, 0, 0, 0, 0};
  // The run 8..12 crosses the day boundary at 10: two runs of 2 and 3.
  const auto q = qualifying_runs(r, 10, 3);
  const std::vector<std::uint8_t> wq{0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 1, 1, 1, 0, 0, 0, 0, 0, 0, 0};
  CHECK(q == wq);
}

TEST_CASE("speed exactly half of HA speed is not NRC") {
  const auto net = pair_network(RoadClass::Freeway);
  const TimeGrid g = day_grid(40, 1, 0);
  const std::size_t S = g.total_slots();
  // Powers of two keep 3.6/τ exact: 28.8 km/h vs HA 57.6 km/h.
  Tensor ha = filled(2, S, 0.0625);
  Tensor tt = filled(2, S, 0.0625);
  Tensor vol = filled(2, S, 60.0);
  for (std::size_t t = 10; t < 20; ++t) tt[t] = 0.125;
  auto lab = classify_slices(tt, ha, vol, net, g, SliceSpec{});
  CHECK(lab.count(SliceKind::NonRecurring, 0, S) == 0);
  CHECK(lab.count(SliceKind::Congested, 0, S) == 32);  // 28.8 < 30 on a freeway, slots 0..31

  for (std::size_t t = 10; t < 20; ++t) tt[t] = 0.126;
  lab = classify_slices(tt, ha, vol, net, g, SliceSpec{});
  CHECK(lab.count(SliceKind::NonRecurring, 0, S) == 32);
}

TEST_CASE("NRC needs a run of two slots and high volume") {
  const auto net = pair_network(RoadClass::Major);
  const TimeGrid g = day_grid(40, 1, 0);
  const std::size_t S = g.total_slots();
  Tensor ha = filled(2, S, 0.1);
  Tensor tt = filled(2, S, 0.1);
  Tensor vol = filled(2, S, 60.0);
  tt[15] = 0.5;  // single slot
  auto lab = classify_slices(tt, ha, vol, net, g, SliceSpec{});
  CHECK(lab.count(SliceKind::NonRecurring, 0, S) == 0);
  CHECK(lab.congested_core[15] == 1);  // 7.2 km/h is below 12
  tt[16] = 0.5;
  lab = classify_slices(tt, ha, vol, net, g, SliceSpec{});
  CHECK(lab.count(SliceKind::NonRecurring, 0, S) == 26);

  Tensor low = filled(2, S, 49.0);  // 9.8 veh/min
  lab = classify_slices(tt, ha, low, net, g, SliceSpec{});
  CHECK(lab.count(SliceKind::NonRecurring, 0, S) == 0);
  CHECK(lab.nrc_core[15] == 1);
}

TEST_CASE("slicing is deterministic") {
  const auto net = pair_network(RoadClass::Highway);
  const TimeGrid g = day_grid(48, 2, 1);
  const std::size_t S = g.total_slots();
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(0.05, 0.4);
  Tensor tt({2, S}), vol = filled(2, S, 55.0);
  for (auto& x : tt.data()) x = u(rng);
  const Tensor ha = historical_average_table(tt, g);
  const auto a = classify_slices(tt, ha, vol, net, g, SliceSpec{});
  const auto b = classify_slices(tt, ha, vol, net, g, SliceSpec{});
  CHECK(a.congested == b.congested);
  CHECK(a.nrc == b.nrc);
  CHECK(a.congested_core == b.congested_core);
}

TEST_CASE("slice inputs are validated") {
  const auto net = pair_network(RoadClass::Highway);
  const TimeGrid g = day_grid(10, 1, 0);
  Tensor tt = filled(2, 10, 0.1), bad = filled(3, 10, 0.1);
  CHECK_THROWS_AS(classify_slices(tt, bad, tt, net, g, SliceSpec{}), std::invalid_argument);
  SliceSpec spec;
  spec.nrc_fraction = 1.0;
  CHECK_THROWS_AS(classify_slices(tt, tt, tt, net, g, spec), std::invalid_argument);
  CHECK(parse_slice_kind("NRC") == SliceKind::NonRecurring);
  CHECK_THROWS_AS(parse_slice_kind("rush"), std::invalid_argument);
}

TEST_CASE("HA baseline predicts the mean of the two training weeks") {
  const TimeGrid g = day_grid(20, 2, 1);
  const std::size_t S = g.total_slots();
  Tensor tt = filled(1, S, 1.0);
  tt[7] = 3.0;
  tt[27] = 5.0;
  tt[40 + 2] = 100.0;  // recent test observations do not matter
  const Tensor ha = historical_average_table(tt, g);
  CHECK(ha[47] == 4.0);
  const Forecast fc = ha_baseline(ha, {40 + 2}, 6);
  CHECK(fc.values.size() == 6);
  CHECK(fc.values[4] == 4.0);  // target slot 47
  CHECK(fc.values[0] == 1.0);
  CHECK_THROWS_AS(ha_baseline(ha, {S - 3}, 6), std::out_of_range);
}

TEST_CASE("HA baseline is exact on weekly periodic truth") {
  const TimeGrid g = day_grid(30, 3, 1);
  const std::size_t S = g.total_slots();
  Tensor tt({2, S});
  for (std::size_t s = 0; s < 2; ++s)
    for (std::size_t t = 0; t < S; ++t) tt[s * S + t] = 0.05 + 0.01 * double((t % 30) % 7) + 0.02 * double(s);
  const Tensor ha = historical_average_table(tt, g);
  const RoadNetwork net = pair_network(RoadClass::Major);
  const auto lab = classify_slices(tt, ha, filled(2, S, 1.0), net, g, SliceSpec{});
  const auto anchors = valid_anchors(g, 2, 4, g.train_slots(), S);
  const auto m = evaluate_forecast(ha_baseline(ha, anchors, 4), tt, lab, SliceKind::Full);
  CHECK(m[0].mae == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(m.size() == 5);
  CHECK_THROWS_AS(evaluate_forecast(ha_baseline(ha, anchors, 4), tt, lab, SliceKind::Congested),
                  std::invalid_argument);
}

TEST_CASE("report cells, CSV round trip and slice mismatch") {
  EvalReport r;
  std::vector<Metrics> steps{{0.1, 10.0, 0.2, 8, 8}, {0.05, 5.0, 0.07, 4, 4}, {0.15, 15.0, 0.25, 4, 4}};
  r.add(SliceKind::Full, "H-STGCN", steps);
  CHECK(r.rows.size() == 9);
  CHECK(r.value("full", "H-STGCN", 0, "MAE") == 0.1);
  CHECK_THROWS_AS(r.value("NRC", "H-STGCN", 0, "MAE"), std::out_of_range);
  for (std::size_t h = 0; h < 3; ++h)
    CHECK(r.value("full", "H-STGCN", h, "MAE") <= r.value("full", "H-STGCN", h, "RMSE"));

  const EvalReport back = EvalReport::from_csv(r.to_csv());
  CHECK(back.to_csv() == r.to_csv());
  CHECK(r.to_svg("full").find("<polyline") != std::string::npos);

  EvalReport other;
  other.add(SliceKind::NonRecurring, "STGCN", steps);
  CHECK_THROWS_AS(merge_reports({r, other}), std::invalid_argument);
  other.add(SliceKind::Full, "STGCN", steps);
  EvalReport both = r;
  both.add(SliceKind::NonRecurring, "H-STGCN", steps);
  CHECK(merge_reports({both, other}).rows.size() == 36);
  // A cell present twice collapses when equal and is rejected when not.
  CHECK(merge_reports({both, other, other}).rows.size() == 36);
  EvalReport drifted = other;
  drifted.rows[0].value += 1e-9;
  CHECK_THROWS_AS(merge_reports({both, other, drifted}), std::invalid_argument);
  CHECK_THROWS_AS(EvalReport::from_csv("a,b\n"), std::invalid_argument);
}
