#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <map>
#include <random>
#include <tuple>
#include <unordered_map>

#include "hstgcn/features.hpp"

using namespace hstgcn;

namespace {

// One-day "weeks" keep the weekly period tiny.
TimeGrid tiny_grid(std::size_t slots_per_day, std::size_t train_weeks, std::size_t test_weeks) {
  TimeGrid g;
  g.slots_per_day = slots_per_day;
  g.days_per_week = 1;
  g.train_weeks = train_weeks;
  g.test_weeks = test_weeks;
  return g;
}

NavigationLog random_log(std::mt19937_64& rng, std::size_t n, std::int64_t total) {
  std::uniform_int_distribution<int> nroutes(0, 100), nhops(1, 20);
  std::uniform_int_distribution<std::size_t> seg(0, n - 1);
  std::uniform_int_distribution<std::int64_t> launch(-3, total), gap(0, 3);
  NavigationLog log;
  const int r = nroutes(rng);
  for (int i = 0; i < r; ++i) {
    NavigationRecord rec;
    rec.route_id = static_cast<std::uint64_t>(i);
    rec.launch_slot = launch(rng);
    std::int64_t t = rec.launch_slot + gap(rng);
    const int m = nhops(rng);
    for (int l = 0; l < m; ++l) {
      rec.hops.push_back({seg(rng), t});
      t += gap(rng);
    }
    log.records.push_back(std::move(rec));
  }
  return log;
}

struct KeyHash {
  std::size_t operator()(const std::tuple<std::size_t, std::int64_t, std::size_t>& k) const {
    auto [a, b, c] = k;
    return (a * 1000003u) ^ (static_cast<std::size_t>(b) * 10007u) ^ c;
  }
};

}  // namespace

TEST_CASE("historical average examples") {
  SUBCASE("constant series") {
    auto g = tiny_grid(4, 3, 1);
    Tensor s({2, g.total_slots()}, 7.25);
    for (std::size_t t = 0; t < g.total_slots(); ++t) CHECK(historical_average(s, g, 1, t) == 7.25);
  }
  SUBCASE("two training weeks, test slot") {
    auto g = tiny_grid(4, 2, 1);
    Tensor s({1, 12});
    s[1] = 3.0;
    s[5] = 5.0;
    CHECK(historical_average(s, g, 0, 9) == 4.0);
  }
  SUBCASE("three weeks, middle slot excludes itself") {
    auto g = tiny_grid(4, 3, 1);
    Tensor s({1, 16});
    s[2] = 2.0;
    s[6] = 4.0;
    s[10] = 6.0;
    CHECK(historical_average(s, g, 0, 6) == 4.0);
    // literal divisor W=3 biases the in-train value low
    CHECK(historical_average(s, g, 0, 6, HaDivisor::Literal) == doctest::Approx(8.0 / 3.0));
    CHECK(historical_average(s, g, 0, 14, HaDivisor::Literal) == 4.0);
  }
  SUBCASE("single training week has no term for its own slots") {
    auto g = tiny_grid(4, 1, 1);
    Tensor s({1, 8}, 1.0);
    CHECK_THROWS_AS(historical_average(s, g, 0, 2), std::invalid_argument);
    CHECK(historical_average(s, g, 0, 6) == 1.0);
  }
  SUBCASE("HA of HA on weekly-periodic series") {
    auto g = tiny_grid(5, 4, 2);
    Tensor s({3, g.total_slots()});
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t t = 0; t < g.total_slots(); ++t) s[i * g.total_slots() + t] = double(i + 1) * double(t % 5) + 0.5;
    auto once = historical_average_table(s, g);
    auto twice = historical_average_table(once, g);
    CHECK(max_abs_diff(once, twice) < 1e-12);
    CHECK(max_abs_diff(once, s) < 1e-12);
  }
}

TEST_CASE("route aggregation") {
  auto g = tiny_grid(48, 1, 1);
  SUBCASE("empty log") {
    auto r = aggregate_routes({}, g, 3, 12);
    CHECK(std::all_of(r.cube.raw().begin(), r.cube.raw().end(), [](auto c) { return c == 0; }));
    CHECK(r.skipped_hops == 0);
  }
  SUBCASE("hand trace: launch 10, arrival 12") {
    NavigationLog log;
    log.records.push_back({0, 10, {{1, 12}}});
    auto r = aggregate_routes(log, g, 3, 12);
    CHECK(r.cube.at(1, 12, 0) == 1);
    CHECK(r.cube.at(1, 11, 1) == 1);
    CHECK(r.cube.at(1, 10, 2) == 1);
    std::uint64_t total = 0;
    for (auto c : r.cube.raw()) total += c;
    CHECK(total == 3);
    SUBCASE("duplicating every route doubles every count") {
      auto twice = log;
      twice.records.push_back(log.records[0]);
      auto r2 = aggregate_routes(twice, g, 3, 12);
      for (std::size_t i = 0; i < r.cube.raw().size(); ++i) CHECK(r2.cube.raw()[i] == 2 * r.cube.raw()[i]);
    }
  }
  SUBCASE("out-of-grid arrivals are skipped and tallied") {
    NavigationLog log;
    log.records.push_back({0, 90, {{0, 95}, {1, 96}, {2, 97}}});
    auto r = aggregate_routes(log, g, 3, 4);
    CHECK(r.cube.at(0, 95, 0) == 1);
    CHECK(r.skipped_hops == 2);
  }
  SUBCASE("log validation") {
    NavigationLog bad;
    bad.records.push_back({7, 5, {{0, 6}, {1, 4}}});
    CHECK_THROWS_WITH(bad.validate(3), doctest::Contains("route 7"));
    NavigationLog late;
    late.records.push_back({1, 9, {{0, 6}}});
    CHECK_THROWS(late.validate(3));
    NavigationLog seg;
    seg.records.push_back({2, 0, {{3, 6}}});
    CHECK_THROWS(seg.validate(3));
  }
}

TEST_CASE("route aggregation matches a brute-force oracle on random logs") {
  std::mt19937_64 rng(2024);
  const std::size_t n = 7, horizon = 5;
  auto g = tiny_grid(30, 1, 1);
  const auto total = static_cast<std::int64_t>(g.total_slots());
  for (int trial = 0; trial < 200; ++trial) {
    auto log = random_log(rng, n, total);
    std::unordered_map<std::tuple<std::size_t, std::int64_t, std::size_t>, std::uint32_t, KeyHash> oracle;
    std::size_t expected_f0 = 0;
    for (const auto& rec : log.records)
      for (const auto& hop : rec.hops) {
        if (hop.slot < 0 || hop.slot >= total) continue;
        if (hop.slot >= rec.launch_slot) ++expected_f0;
        for (std::size_t f = 0; f <= horizon; ++f) {
          const std::int64_t t = hop.slot - static_cast<std::int64_t>(f);
          if (t < rec.launch_slot) break;
          if (t >= 0) ++oracle[{hop.segment, t, f}];
        }
      }
    auto r = aggregate_routes(log, g, n, horizon);
    bool equal = true;
    std::size_t sum_f0 = 0;
    for (std::size_t s = 0; s < n; ++s)
      for (std::size_t t = 0; t < g.total_slots(); ++t) {
        sum_f0 += r.cube.at(s, t, 0);
        for (std::size_t f = 0; f <= horizon; ++f) {
          auto it = oracle.find({s, static_cast<std::int64_t>(t), f});
          const std::uint32_t want = it == oracle.end() ? 0 : it->second;
          equal = equal && r.cube.at(s, t, f) == want;
        }
      }
    CHECK(equal);
    CHECK(sum_f0 == expected_f0);
  }
}

TEST_CASE("feature window layout") {
  auto g = tiny_grid(40, 2, 1);
  const std::size_t n = 3, S = g.total_slots(), P = 6, F = 12;
  VolumeCube cube(n, S, F);
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t t = 0; t < S; ++t)
      for (std::size_t f = 0; f <= F; ++f) cube.at(s, t, f) = static_cast<std::uint32_t>(s * 100000 + t * 100 + f);
  Tensor tt({n, S}), hv({n, S}), ht({n, S});
  for (std::size_t i = 0; i < n * S; ++i) {
    tt[i] = 1000.0 + double(i);
    hv[i] = 2000.0 + double(i);
    ht[i] = 3000.0 + double(i);
  }
  FeatureSources src{&cube, &tt, &hv, &ht};
  const std::size_t t0 = 20;
  auto w = build_feature_window(src, t0, P, F);
  CHECK(w.volume.shape() == Shape{n, P, 26});
  CHECK(w.travel_time.shape() == Shape{n, P, 14});
  CHECK(w.label.shape() == Shape{n, F});
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t p = 0; p < P; ++p) {
      const std::size_t slot = t0 - P + 1 + p;
      for (std::size_t f = 0; f <= F; ++f) {
        CHECK(w.volume.at({s, p, f}) == double(cube.at(s, slot, f)));
        CHECK(w.volume.at({s, p, F + 1 + f}) == hv[s * S + slot + f]);
        CHECK(w.travel_time.at({s, p, 1 + f}) == ht[s * S + slot + f]);
      }
      CHECK(w.travel_time.at({s, p, 0}) == tt[s * S + slot]);
    }
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t f = 0; f < F; ++f) CHECK(w.label.at({s, f}) == tt[s * S + t0 + 1 + f]);

  SUBCASE("HA channels are constant along P when the HA series is weekly periodic in target") {
    Tensor flat({n, S});
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t t = 0; t < S; ++t) flat[i * S + t] = double(i);
    FeatureSources s2{&cube, &tt, &flat, &flat};
    auto w2 = build_feature_window(s2, t0, P, F);
    for (std::size_t s = 0; s < n; ++s)
      for (std::size_t p = 1; p < P; ++p)
        for (std::size_t c = F + 1; c < 26; ++c) CHECK(w2.volume.at({s, p, c}) == w2.volume.at({s, 0, c}));
  }
  SUBCASE("windows leaving the grid are rejected") {
    CHECK_THROWS_AS(build_feature_window(src, P - 2, P, F), std::out_of_range);
    CHECK_THROWS_AS(build_feature_window(src, S - F, P, F), std::out_of_range);
    CHECK_NOTHROW(build_feature_window(src, S - F - 1, P, F));
    CHECK_NOTHROW(build_feature_window(src, P - 1, P, F));
  }
}

TEST_CASE("noise injection") {
  Tensor v({3}, std::vector<double>{5.0, 3.0, 1.0});
  auto out = inject_noise(v, 3.0, 0.3, 11);
  CHECK(out[0] == 5.0);
  CHECK(out[1] == 3.0);
  CHECK(out[2] != 1.0);
  CHECK(inject_noise(v, 3.0, 0.3, 11) == out);
  CHECK_THROWS(inject_noise(v, 3.0, 0.0, 1));

  Tensor zeros({10000});
  auto z = inject_noise(zeros, 3.0, 0.3, 5);
  double mean = 0.0;
  for (double x : z.data()) {
    CHECK(x >= 0.0);
    mean += x;
  }
  mean /= 10000.0;
  CHECK(mean >= 0.10);
  CHECK(mean <= 0.14);

  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(0.0, 8.0);
  Tensor mixed({2000});
  for (auto& x : mixed.data()) x = u(rng);
  auto m = inject_noise(mixed, 3.0, 1.0, 9);
  for (std::size_t i = 0; i < 2000; ++i) {
    if (mixed[i] >= 3.0) CHECK(m[i] == mixed[i]);
    CHECK(m[i] >= 0.0);
  }
}

TEST_CASE("window sampler") {
  TimeGrid g;  // 192 slots/day, 8+2 weeks
  g.train_weeks = 1;
  g.test_weeks = 1;
  auto day = valid_anchors(g, 6, 12, 0, 192);
  CHECK(day.size() == 175);
  CHECK(day.front() == 5);
  CHECK(day.back() == 179);
  auto test = window_sampler(g, 6, 12, SampleMode::Test, 1);
  CHECK(test.size() == 175 * 7);
  CHECK(test == window_sampler(g, 6, 12, SampleMode::Test, 99));
  CHECK(std::is_sorted(test.begin(), test.end()));
  for (auto t0 : test) {
    CHECK(g.day_of(t0 - 5) == g.day_of(t0 + 12));
    CHECK(t0 - 5 >= g.train_slots());
  }
  auto a = window_sampler(g, 6, 12, SampleMode::Train, 1);
  auto b = window_sampler(g, 6, 12, SampleMode::Train, 2);
  CHECK(a != b);
  CHECK(a == window_sampler(g, 6, 12, SampleMode::Train, 1));
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  CHECK(a == b);
  CHECK(a.size() == 175 * 7);
  CHECK(a.back() < g.train_slots());
}

TEST_CASE("travel-time normalizer and imputation") {
  auto g = tiny_grid(4, 2, 1);
  Tensor tt({1, 12}), ha({1, 12});
  for (std::size_t t = 0; t < 12; ++t) {
    tt[t] = double(t);
    ha[t] = 10.0;
  }
  auto norm = fit_normalizer(tt, ha, g, 3);
  CHECK(norm.mean.size() == 5);
  CHECK(norm.label_mean() == doctest::Approx(3.5));
  CHECK(norm.label_std() == doctest::Approx(std::sqrt(5.25)));
  CHECK(norm.mean[3] == 10.0);
  CHECK(norm.std[3] == 1.0);  // degenerate channel falls back to unit scale
  std::vector<double> w{3.5, 10.0, 11.0, 10.0, 10.0};
  norm.apply(w);
  CHECK(w[0] == 0.0);
  CHECK(w[2] == 1.0);

  const double nan = std::nan("");
  Tensor gaps = Tensor::from({1, 8}, {nan, 2.0, nan, nan, nan, 5.0, nan, 7.0});
  std::vector<double> ff{1.0};
  impute_travel_time(gaps, g, ff);
  CHECK(gaps == Tensor::from({1, 8}, {1.0, 2.0, 2.0, 2.0, 1.0, 5.0, 5.0, 7.0}));
}
