#include "doctest.h"

#include <algorithm>
#include <cmath>

#include "hstgcn/scenario.hpp"

using namespace hstgcn;

namespace {

TimeGrid week_grid(std::size_t weeks) {
  TimeGrid g;
  g.train_weeks = weeks;
  g.test_weeks = 0;
  return g;
}

// One-way loop: segment i runs node i -> node i+1, so every route is unique.
RoadNetwork loop_network(std::size_t m) {
  RoadNetwork net;
  for (std::size_t i = 0; i < m; ++i) net.nodes.push_back({double(i), 0.0});
  for (std::size_t i = 0; i < m; ++i) net.segments.push_back({i, i, (i + 1) % m, 800.0, RoadClass::Major, 40.0});
  net.link_by_nodes();
  return net;
}

DemandFlow uniform_flow(std::size_t n, const TimeGrid& g, double rate) {
  DemandFlow f;
  f.origin_weight.assign(n, 1.0);
  f.destination_weight.assign(n, 1.0);
  f.daily_rate.assign(g.slots_per_day, rate);
  f.weekday_factor.assign(g.days_per_week, 1.0);
  return f;
}

}  // namespace

TEST_CASE("grid network size, connectivity and reproducibility") {
  const auto net = generate_network(NetworkKind::Grid, 48, 3);
  CHECK(net.size() == 48);
  CHECK(net.nodes.size() == 16);
  CHECK(net.strongly_connected());
  const auto again = generate_network(NetworkKind::Grid, 48, 3);
  for (std::size_t s = 0; s < 48; ++s) {
    CHECK(net.segments[s].length_m == again.segments[s].length_m);
    CHECK(net.segments[s].free_flow_kmh == again.segments[s].free_flow_kmh);
    CHECK(net.segments[s].road_class == again.segments[s].road_class);
    CHECK(net.successors[s] == again.successors[s]);
  }
  const auto other = generate_network(NetworkKind::Grid, 48, 4);
  bool differs = false;
  for (std::size_t s = 0; s < 48; ++s) differs |= net.segments[s].length_m != other.segments[s].length_m;
  CHECK(differs);

  CHECK(generate_network(NetworkKind::Grid, 8, 1).size() == 8);
  CHECK(generate_network(NetworkKind::Grid, 100, 1).size() == 80);  // 80 and 120 tie; smaller wins
  CHECK_THROWS_AS(generate_network(NetworkKind::Grid, 7, 1), std::invalid_argument);
}

TEST_CASE("ring-radial network") {
  for (std::size_t target : {12u, 24u, 40u}) {
    const auto net = generate_network(NetworkKind::RingRadial, target, 2);
    CHECK(net.size() % 4 == 0);
    CHECK(net.size() == 4 * ((target + 2) / 4));
    CHECK(net.strongly_connected());
  }
  CHECK_THROWS_AS(generate_network(NetworkKind::RingRadial, 11, 1), std::invalid_argument);
  CHECK(parse_network_kind("ring-radial") == NetworkKind::RingRadial);
  CHECK_THROWS_AS(parse_network_kind("star"), std::invalid_argument);
}

TEST_CASE("triangular diagram") {
  const FundamentalDiagram fd{60.0, 30.0, 180.0};
  CHECK(fd.speed(0.0, 5.0) == 60.0);
  CHECK(fd.speed(30.0, 5.0) == 60.0);
  CHECK(fd.speed(180.0, 5.0) == 5.0);
  CHECK(fd.speed(500.0, 5.0) == 5.0);
  // Flow on the congested branch falls linearly to zero at jam density.
  const double k = 105.0;
  CHECK(k * fd.speed(k, 0.1) == doctest::Approx(fd.peak_flow() * 0.5).epsilon(1e-12));
  double prev = fd.speed(0.0, 5.0);
  for (double d = 1.0; d <= 200.0; d += 1.0) {
    const double v = fd.speed(d, 5.0);
    CHECK(v <= prev);
    prev = v;
  }
  CHECK_THROWS_AS((FundamentalDiagram{60.0, 200.0, 180.0}.validate()), std::invalid_argument);
}

TEST_CASE("planner picks the faster of two equal arms") {
  // 0 -A-> 1 =B1/B2=> 2 -D-> 3
  RoadNetwork net;
  net.nodes = {{0, 0}, {1, 0}, {2, 0}, {3, 0}};
  net.segments = {{0, 0, 1, 1000.0, RoadClass::Major, 40.0},
                  {1, 1, 2, 1000.0, RoadClass::Major, 40.0},
                  {2, 1, 2, 1000.0, RoadClass::Major, 40.0},
                  {3, 2, 3, 500.0, RoadClass::Major, 40.0}};
  net.link_by_nodes();
  std::vector<double> tt{0.1, 0.1, 0.05, 0.2};
  auto r = plan_route(net, tt, 0, 3, 250.0);
  CHECK(r.segments == std::vector<std::size_t>{0, 2, 3});
  CHECK(r.entry_seconds == std::vector<double>{250.0, 350.0, 400.0});
  CHECK(r.arrival_seconds == 500.0);
  tt = {0.1, 0.04, 0.05, 0.2};
  CHECK(plan_route(net, tt, 0, 3, 0.0).segments == std::vector<std::size_t>{0, 1, 3});

  const auto rec = to_record(plan_route(net, tt, 0, 3, 250.0), 7, 300.0);
  CHECK(rec.route_id == 7);
  CHECK(rec.launch_slot == 0);
  REQUIRE(rec.hops.size() == 3);
  CHECK(rec.hops[0].slot == 0);
  CHECK(rec.hops[1].slot == 1);  // 350 s
  CHECK(rec.hops[2].slot == 1);  // 390 s
  CHECK_NOTHROW(NavigationLog{{rec}}.validate(4));

  CHECK_THROWS_AS(plan_route(net, tt, 3, 3, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(plan_route(net, tt, 3, 0, 0.0), std::runtime_error);  // no way back
}

TEST_CASE("planned ETAs are non-decreasing and end at the arrival time") {
  const auto net = generate_network(NetworkKind::Grid, 48, 5);
  std::vector<double> tt(48);
  for (std::size_t s = 0; s < 48; ++s) tt[s] = 3.6 / net.segments[s].free_flow_kmh;
  for (std::size_t o = 0; o < 48; o += 5)
    for (std::size_t d = 0; d < 48; d += 7) {
      if (o == d) continue;
      const auto r = plan_route(net, tt, o, d, 1000.0);
      CHECK(r.segments.front() == o);
      CHECK(r.segments.back() == d);
      CHECK(std::is_sorted(r.entry_seconds.begin(), r.entry_seconds.end()));
      double t = 1000.0;
      for (auto s : r.segments) t += tt[s] * net.segments[s].length_m;
      CHECK(r.arrival_seconds == doctest::Approx(t).epsilon(1e-12));
      for (std::size_t l = 0; l + 1 < r.segments.size(); ++l) {
        const auto& succ = net.successors[r.segments[l]];
        CHECK(std::find(succ.begin(), succ.end(), r.segments[l + 1]) != succ.end());
      }
    }
}

TEST_CASE("zero demand runs at free flow") {
  const auto net = generate_network(NetworkKind::Grid, 24, 1);
  TimeGrid g = week_grid(1);
  g.days_per_week = 1;
  DemandModel dm;
  dm.flows.push_back(uniform_flow(net.size(), g, 0.0));
  SimulationConfig cfg;
  cfg.speed_noise = 0.0;
  const auto res = propagate_traffic(net, dm, class_diagrams(net), g, cfg);
  for (std::size_t s = 0; s < net.size(); ++s)
    for (std::size_t t = 0; t < g.total_slots(); ++t)
      CHECK(res.travel_time[s * g.total_slots() + t] == 3.6 / net.segments[s].free_flow_kmh);
  CHECK(res.tally.spawned == 0);
  CHECK(res.log.records.empty());
}

TEST_CASE("demand validation") {
  const auto net = generate_network(NetworkKind::Grid, 24, 1);
  const TimeGrid g = week_grid(1);
  DemandModel dm;
  dm.flows.push_back(uniform_flow(net.size(), g, 1.0));
  CHECK_NOTHROW(dm.validate(net.size(), g));
  dm.flows[0].daily_rate[3] = -1.0;
  CHECK_THROWS_AS(dm.validate(net.size(), g), std::invalid_argument);
  dm.flows[0].daily_rate[3] = 1.0;
  dm.p_nav = 0.0;
  CHECK_THROWS_AS(dm.validate(net.size(), g), std::invalid_argument);
  dm.p_nav = 0.5;
  dm.surges.push_back({{0}, 3, std::int64_t(g.total_slots()) - 2, 5, 2.0});
  CHECK_THROWS_AS(dm.validate(net.size(), g), std::invalid_argument);
}

TEST_CASE("generated demand is reproducible and places surges in the day") {
  const auto net = generate_network(NetworkKind::Grid, 48, 1);
  const TimeGrid g = week_grid(2);
  const DemandSpec spec;
  const auto a = generate_demand(net, g, spec, 11);
  const auto b = generate_demand(net, g, spec, 11);
  REQUIRE(a.surges.size() == b.surges.size());
  CHECK(!a.surges.empty());
  for (std::size_t i = 0; i < a.surges.size(); ++i) {
    CHECK(a.surges[i].start_slot == b.surges[i].start_slot);
    CHECK(a.surges[i].origins == b.surges[i].origins);
    const auto st = static_cast<std::size_t>(a.surges[i].start_slot);
    CHECK(g.day_of(st) == g.day_of(st + a.surges[i].duration - 1));
    CHECK(a.surges[i].intensity >= spec.surge_intensity_min);
    CHECK(a.surges[i].intensity <= spec.surge_intensity_max);
  }
  CHECK(a.day_factor == b.day_factor);
  CHECK_NOTHROW(a.validate(net.size(), g));
}

TEST_CASE("vehicles are conserved and the run is reproducible") {
  const auto net = generate_network(NetworkKind::Grid, 24, 2);
  TimeGrid g = week_grid(1);
  g.days_per_week = 2;
  DemandSpec spec;
  spec.background_rate = 60.0;
  spec.commute_rate = 200.0;
  const auto dm = generate_demand(net, g, spec, 2);
  SimulationConfig cfg;
  const auto a = propagate_traffic(net, dm, class_diagrams(net), g, cfg);
  CHECK(a.tally.conserved);
  CHECK(a.tally.spawned > 1000);
  CHECK(a.tally.spawned == a.tally.arrived + a.tally.in_flight_at_end);
  const auto b = propagate_traffic(net, dm, class_diagrams(net), g, cfg);
  CHECK(std::ranges::equal(a.travel_time.data(), b.travel_time.data()));
  CHECK(std::ranges::equal(a.volume.data(), b.volume.data()));
  CHECK(a.log.records.size() == b.log.records.size());
  CHECK_NOTHROW(a.log.validate(net.size()));
  // Navigation share near p_nav.
  double nav = 0, all = 0;
  for (std::size_t i = 0; i < a.volume.size(); ++i) {
    nav += a.nav_volume[i];
    all += a.volume[i];
    CHECK(a.nav_volume[i] <= a.volume[i]);
  }
  CHECK(nav / all == doctest::Approx(dm.p_nav).epsilon(0.1));
  for (double t : a.travel_time.data()) CHECK((t > 0.0 && std::isfinite(t)));
}

TEST_CASE("doubling a surge never speeds up its path") {
  const auto net = loop_network(6);
  TimeGrid g = week_grid(1);
  g.days_per_week = 1;
  g.slots_per_day = 60;
  DemandModel dm;
  dm.flows.push_back(uniform_flow(net.size(), g, 60.0));
  dm.surges.push_back({{0}, 3, 20, 10, 3.0});
  auto doubled = dm;
  doubled.surges[0].intensity = 6.0;
  SimulationConfig cfg;
  const auto fd = class_diagrams(net);
  const auto a = propagate_traffic(net, dm, fd, g, cfg);
  const auto b = propagate_traffic(net, doubled, fd, g, cfg);
  CHECK(b.tally.spawned > a.tally.spawned);
  const std::size_t S = g.total_slots();
  bool slower_somewhere = false;
  for (std::size_t s : {0u, 1u, 2u, 3u})
    for (std::size_t t = 0; t < S; ++t) {
      CHECK(b.travel_time[s * S + t] >= a.travel_time[s * S + t]);
      slower_somewhere |= b.travel_time[s * S + t] > a.travel_time[s * S + t];
    }
  CHECK(slower_somewhere);
}

TEST_CASE("ideal volume equals simulated entries when every vehicle navigates and follows its plan") {
  const auto net = generate_network(NetworkKind::Grid, 48, 1);
  const TimeGrid g = week_grid(1);
  auto dm = generate_demand(net, g, DemandSpec{}, 1);
  dm.p_nav = 1.0;
  SimulationConfig cfg;
  cfg.follow_plan = true;
  const auto res = propagate_traffic(net, dm, class_diagrams(net), g, cfg);
  const auto agg = aggregate_routes(res.log, g, net.size(), 12);
  const Tensor nu0 = agg.cube.lead0();
  std::size_t worst = 0;
  for (std::size_t i = 0; i < nu0.size(); ++i)
    worst = std::max<std::size_t>(worst, std::size_t(std::abs(nu0[i] - res.volume[i])));
  CHECK(worst <= 1);
  CHECK(res.tally.spawned == res.log.records.size());
}
