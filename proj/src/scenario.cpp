#include "hstgcn/scenario.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <queue>
#include <stdexcept>
#include <string>

#include "hstgcn/rng.hpp"

namespace hstgcn {

double FundamentalDiagram::speed(double k, double v_min) const {
  if (k <= critical_density) return free_flow_kmh;
  if (k >= jam_density) return v_min;
  const double v = peak_flow() * (jam_density - k) / (k * (jam_density - critical_density));
  return std::clamp(v, v_min, free_flow_kmh);
}

void FundamentalDiagram::validate() const {
  if (!(free_flow_kmh > 0.0)) throw std::invalid_argument("free-flow speed must be > 0");
  if (!(critical_density > 0.0 && critical_density < jam_density))
    throw std::invalid_argument("need 0 < critical density < jam density");
}

std::vector<FundamentalDiagram> class_diagrams(const RoadNetwork& net, const ClassDensities& dens) {
  std::vector<FundamentalDiagram> out;
  out.reserve(net.size());
  for (const auto& s : net.segments) {
    const auto c = static_cast<std::size_t>(s.road_class);
    FundamentalDiagram fd{s.free_flow_kmh, dens.critical[c], dens.jam[c]};
    fd.validate();
    out.push_back(fd);
  }
  return out;
}

NetworkKind parse_network_kind(std::string_view s) {
  if (s == "grid") return NetworkKind::Grid;
  if (s == "ring-radial") return NetworkKind::RingRadial;
  throw std::invalid_argument("unknown network kind '" + std::string(s) + "'");
}

namespace {

constexpr double kClassSpeed[4] = {90.0, 70.0, 60.0, 40.0};

void add_two_way(RoadNetwork& net, std::size_t a, std::size_t b, RoadClass cls, SplitMix64& rng) {
  const Point& p = net.nodes[a];
  const Point& q = net.nodes[b];
  const double straight = std::hypot(p.x_km - q.x_km, p.y_km - q.y_km) * 1000.0;
  const double len = straight * (1.0 + 0.15 * rng.uniform());
  const double vf = kClassSpeed[static_cast<int>(cls)] * (0.92 + 0.16 * rng.uniform());
  for (auto [u, v] : {std::pair{a, b}, std::pair{b, a}}) {
    const std::size_t id = net.segments.size();
    net.segments.push_back({id, u, v, len, cls, vf});
  }
}

}  // namespace

RoadNetwork generate_network(NetworkKind kind, std::size_t n_target, std::uint64_t seed, double spacing_km) {
  SplitMix64 rng(derive_seed(seed, "network"));
  RoadNetwork net;
  if (kind == NetworkKind::Grid) {
    if (n_target < 8) throw std::invalid_argument("grid network needs n_target >= 8, got " + std::to_string(n_target));
    std::size_t k = 2;
    auto count = [](std::size_t kk) { return 4 * kk * (kk - 1); };
    while (count(k + 1) <= n_target ||
           (count(k + 1) > n_target && count(k + 1) - n_target < n_target - count(k)))
      ++k;
    for (std::size_t i = 0; i < k; ++i)
      for (std::size_t j = 0; j < k; ++j) {
        const double jx = (rng.uniform() - 0.5) * 0.3 * spacing_km;
        const double jy = (rng.uniform() - 0.5) * 0.3 * spacing_km;
        net.nodes.push_back({double(j) * spacing_km + jx, double(i) * spacing_km + jy});
      }
    // One class per corridor (row or column line), shuffled.
    std::vector<RoadClass> lines(2 * k);
    for (std::size_t l = 0; l < lines.size(); ++l) lines[l] = static_cast<RoadClass>(l % 4);
    std::shuffle(lines.begin(), lines.end(), rng);
    for (std::size_t i = 0; i < k; ++i)
      for (std::size_t j = 0; j + 1 < k; ++j) add_two_way(net, i * k + j, i * k + j + 1, lines[i], rng);
    for (std::size_t j = 0; j < k; ++j)
      for (std::size_t i = 0; i + 1 < k; ++i) add_two_way(net, i * k + j, (i + 1) * k + j, lines[k + j], rng);
  } else {
    if (n_target < 12)
      throw std::invalid_argument("ring-radial network needs n_target >= 12, got " + std::to_string(n_target));
    const std::size_t m = (n_target + 2) / 4;
    net.nodes.push_back({0.0, 0.0});
    const double radius = 1.5 * spacing_km;
    for (std::size_t i = 0; i < m; ++i) {
      const double a = 2.0 * std::numbers::pi * double(i) / double(m) + 0.2 * (rng.uniform() - 0.5);
      const double r = radius * (0.9 + 0.2 * rng.uniform());
      net.nodes.push_back({r * std::cos(a), r * std::sin(a)});
    }
    for (std::size_t i = 0; i < m; ++i)
      add_two_way(net, 0, 1 + i, i % 2 ? RoadClass::Highway : RoadClass::Freeway, rng);
    for (std::size_t i = 0; i < m; ++i)
      add_two_way(net, 1 + i, 1 + (i + 1) % m, i % 2 ? RoadClass::Major : RoadClass::Expressway, rng);
  }
  net.link_by_nodes();
  net.validate();
  if (!net.strongly_connected()) throw std::logic_error("generated network is not strongly connected");
  return net;
}

double DemandModel::origin_rate(std::size_t origin, std::size_t slot, const TimeGrid& grid) const {
  const std::size_t day = grid.day_of(slot);
  const std::size_t sid = grid.slot_in_day(slot);
  const std::size_t dow = day % grid.days_per_week;
  const double dayf = day < day_factor.size() ? day_factor[day] : 1.0;
  double r = 0.0;
  for (const auto& f : flows) {
    double wsum = 0.0;
    for (double w : f.origin_weight) wsum += w;
    if (wsum <= 0.0) continue;
    r += f.daily_rate[sid] * f.weekday_factor[dow] * dayf * f.origin_weight[origin] / wsum;
  }
  return r;
}

void DemandModel::validate(std::size_t n, const TimeGrid& grid) const {
  if (!(p_nav > 0.0 && p_nav <= 1.0)) throw std::invalid_argument("p_nav must lie in (0, 1]");
  for (std::size_t i = 0; i < flows.size(); ++i) {
    const auto& f = flows[i];
    const std::string tag = "flow " + std::to_string(i);
    if (f.origin_weight.size() != n || f.destination_weight.size() != n)
      throw std::invalid_argument(tag + ": weight vectors must have one entry per segment");
    if (f.daily_rate.size() != grid.slots_per_day) throw std::invalid_argument(tag + ": daily profile length");
    if (f.weekday_factor.size() != grid.days_per_week) throw std::invalid_argument(tag + ": weekday factors");
    auto neg = [](const std::vector<double>& v) {
      return std::any_of(v.begin(), v.end(), [](double x) { return !(x >= 0.0) || !std::isfinite(x); });
    };
    if (neg(f.origin_weight) || neg(f.destination_weight) || neg(f.daily_rate) || neg(f.weekday_factor))
      throw std::invalid_argument(tag + ": rates and weights must be finite and >= 0");
  }
  for (double d : day_factor)
    if (!(d >= 0.0)) throw std::invalid_argument("day factors must be >= 0");
  const auto total = static_cast<std::int64_t>(grid.total_slots());
  for (const auto& s : surges) {
    if (s.origins.empty()) throw std::invalid_argument("surge without origins");
    if (s.destination >= n) throw std::invalid_argument("surge destination out of range");
    for (auto o : s.origins)
      if (o >= n) throw std::invalid_argument("surge origin out of range");
    if (s.start_slot < 0 || s.start_slot + static_cast<std::int64_t>(s.duration) > total)
      throw std::invalid_argument("surge outside the simulated span");
    if (!(s.intensity >= 1.0)) throw std::invalid_argument("surge intensity must be >= 1");
  }
}

namespace {

Point midpoint(const RoadNetwork& net, std::size_t s) {
  const Point& a = net.nodes[net.segments[s].from_node];
  const Point& b = net.nodes[net.segments[s].to_node];
  return {(a.x_km + b.x_km) / 2.0, (a.y_km + b.y_km) / 2.0};
}

double dist_km(Point a, Point b) { return std::hypot(a.x_km - b.x_km, a.y_km - b.y_km); }

}  // namespace

DemandModel generate_demand(const RoadNetwork& net, const TimeGrid& grid, const DemandSpec& spec,
                            std::uint64_t seed) {
  const std::size_t n = net.size();
  const std::size_t spd = grid.slots_per_day;
  SplitMix64 rng(derive_seed(seed, "demand"));
  Point centre{0.0, 0.0};
  for (const auto& p : net.nodes) {
    centre.x_km += p.x_km / double(net.nodes.size());
    centre.y_km += p.y_km / double(net.nodes.size());
  }
  double span = 0.0;
  for (std::size_t s = 0; s < n; ++s) span = std::max(span, dist_km(midpoint(net, s), centre));
  span = std::max(span, 1e-3);

  std::vector<double> work(n), home(n), bg_o(n), bg_d(n);
  for (std::size_t s = 0; s < n; ++s) {
    const double d = dist_km(midpoint(net, s), centre) / span;
    work[s] = std::exp(-d * d / (2.0 * 0.35 * 0.35)) + 0.05;
    home[s] = 0.3 + d;
    bg_o[s] = 0.5 + rng.uniform();
    bg_d[s] = 0.5 + rng.uniform();
  }
  // Profiles expressed as fractions of the 06:00-22:00 day.
  auto bump = [spd](double centre_frac, double width_frac) {
    std::vector<double> v(spd);
    for (std::size_t t = 0; t < spd; ++t) {
      const double z = (double(t) / double(spd) - centre_frac) / width_frac;
      v[t] = std::exp(-0.5 * z * z);
    }
    return v;
  };
  std::vector<double> bg(spd);
  for (std::size_t t = 0; t < spd; ++t)
    bg[t] = spec.background_rate * (0.35 + 0.65 * std::sin(std::numbers::pi * (double(t) + 0.5) / double(spd)));
  auto am = bump(2.0 / 16.0, 0.55 / 16.0);
  auto pm = bump(11.6 / 16.0, 0.65 / 16.0);
  for (auto& x : am) x *= spec.commute_rate;
  for (auto& x : pm) x *= spec.commute_rate;

  std::vector<double> bg_week(grid.days_per_week, 1.0), commute_week(grid.days_per_week, 1.0);
  for (std::size_t d = 5; d < grid.days_per_week; ++d) {
    bg_week[d] = 0.9;
    commute_week[d] = spec.weekend_commute;
  }
  DemandModel dm;
  dm.p_nav = spec.p_nav;
  dm.flows.push_back({bg_o, bg_d, bg, bg_week});
  dm.flows.push_back({home, work, am, commute_week});
  dm.flows.push_back({work, home, pm, commute_week});

  const std::size_t days = grid.total_slots() / spd;
  std::normal_distribution<double> jitter(0.0, 1.0);
  for (std::size_t d = 0; d < days; ++d) {
    const double z = jitter(rng);
    dm.day_factor.push_back(std::exp(spec.day_jitter * z - 0.5 * spec.day_jitter * spec.day_jitter));
  }

  const std::size_t weeks = days / grid.days_per_week;
  const std::size_t dur_lo = std::max<std::size_t>(1, spec.surge_duration_min);
  const std::size_t dur_hi = std::max(dur_lo, spec.surge_duration_max);
  for (std::size_t w = 0; w < weeks && spec.surges_per_week > 0.0; ++w) {
    std::poisson_distribution<int> count(spec.surges_per_week);
    const int events = count(rng);
    for (int e = 0; e < events; ++e) {
      SurgeEvent ev;
      const std::size_t day = w * grid.days_per_week + static_cast<std::size_t>(rng() % grid.days_per_week);
      ev.duration = dur_lo + static_cast<std::size_t>(rng() % (dur_hi - dur_lo + 1));
      if (ev.duration + 12 >= spd) continue;
      const std::size_t start = 6 + static_cast<std::size_t>(rng() % (spd - ev.duration - 12));
      ev.start_slot = static_cast<std::int64_t>(day * spd + start);
      ev.intensity = spec.surge_intensity_min + (spec.surge_intensity_max - spec.surge_intensity_min) * rng.uniform();
      const Point hub = net.nodes[rng() % net.nodes.size()];
      for (std::size_t s = 0; s < n; ++s)
        if (dist_km(net.nodes[net.segments[s].from_node], hub) <= spec.surge_radius_km) ev.origins.push_back(s);
      std::vector<std::size_t> far;
      for (std::size_t s = 0; s < n; ++s)
        if (dist_km(midpoint(net, s), hub) >= spec.surge_min_distance_km) far.push_back(s);
      if (ev.origins.empty() || far.empty()) continue;
      ev.destination = far[rng() % far.size()];
      std::erase(ev.origins, ev.destination);
      if (ev.origins.empty()) continue;
      dm.surges.push_back(std::move(ev));
    }
  }
  dm.validate(n, grid);
  return dm;
}

namespace {

/// Shortest remaining time from every segment to one destination (entering
/// the segment until leaving the destination), with the next hop.
struct RouteTree {
  std::vector<double> to_go;
  std::vector<std::size_t> next;
};

struct Predecessors {
  std::vector<std::vector<std::size_t>> of;
  explicit Predecessors(const RoadNetwork& net) : of(net.size()) {
    for (std::size_t u = 0; u < net.size(); ++u)
      for (auto v : net.successors[u]) of[v].push_back(u);
  }
};

void build_tree(const RoadNetwork& net, const Predecessors& pred, std::span<const double> cost,
                std::size_t dest, RouteTree& tree) {
  const std::size_t n = net.size();
  const double inf = std::numeric_limits<double>::infinity();
  tree.to_go.assign(n, inf);
  tree.next.assign(n, n);
  using Item = std::pair<double, std::size_t>;
  std::priority_queue<Item, std::vector<Item>, std::greater<>> pq;
  tree.to_go[dest] = cost[dest];
  pq.emplace(cost[dest], dest);
  while (!pq.empty()) {
    auto [d, v] = pq.top();
    pq.pop();
    if (d > tree.to_go[v]) continue;
    for (auto u : pred.of[v]) {
      const double nd = cost[u] + d;
      if (nd < tree.to_go[u] || (nd == tree.to_go[u] && v < tree.next[u])) {
        const bool improved = nd < tree.to_go[u];
        tree.to_go[u] = nd;
        tree.next[u] = v;
        if (improved) pq.emplace(nd, u);
      }
    }
  }
}

void follow_tree(const RouteTree& tree, std::span<const double> cost, std::size_t origin, std::size_t dest,
                 double launch, PlannedRoute& out) {
  out.segments.clear();
  out.entry_seconds.clear();
  double t = launch;
  std::size_t s = origin;
  for (;;) {
    out.segments.push_back(s);
    out.entry_seconds.push_back(t);
    t += cost[s];
    if (s == dest) break;
    s = tree.next[s];
  }
  out.arrival_seconds = t;
}

}  // namespace

PlannedRoute plan_route(const RoadNetwork& net, std::span<const double> travel_time, std::size_t origin,
                        std::size_t destination, double launch_seconds) {
  const std::size_t n = net.size();
  if (travel_time.size() != n) throw std::invalid_argument("travel time vector must have one entry per segment");
  if (origin >= n || destination >= n) throw std::invalid_argument("origin or destination out of range");
  if (origin == destination) throw std::invalid_argument("origin equals destination");
  std::vector<double> cost(n);
  for (std::size_t s = 0; s < n; ++s) cost[s] = travel_time[s] * net.segments[s].length_m;
  Predecessors pred(net);
  RouteTree tree;
  build_tree(net, pred, cost, destination, tree);
  if (std::isinf(tree.to_go[origin]))
    throw std::runtime_error("segment " + std::to_string(destination) + " unreachable from segment " +
                             std::to_string(origin));
  PlannedRoute r;
  follow_tree(tree, cost, origin, destination, launch_seconds, r);
  return r;
}

NavigationRecord to_record(const PlannedRoute& route, std::uint64_t route_id, double slot_seconds) {
  NavigationRecord rec;
  rec.route_id = route_id;
  rec.launch_slot = static_cast<std::int64_t>(std::floor(route.entry_seconds.front() / slot_seconds));
  rec.hops.reserve(route.segments.size());
  for (std::size_t l = 0; l < route.segments.size(); ++l)
    rec.hops.push_back({route.segments[l], static_cast<std::int64_t>(std::floor(route.entry_seconds[l] / slot_seconds))});
  return rec;
}

namespace {

/// Poisson quantile at u; monotone in lambda for fixed u, which keeps paired
/// runs with scaled rates coupled.
std::uint64_t poisson_quantile(double lambda, double u, SplitMix64& fallback) {
  if (!(lambda > 0.0)) return 0;
  if (lambda > 600.0) {
    std::poisson_distribution<std::uint64_t> p(lambda);
    return p(fallback);
  }
  double p = std::exp(-lambda);
  double cdf = p;
  std::uint64_t k = 0;
  while (u > cdf && k < 100000) {
    ++k;
    p *= lambda / double(k);
    cdf += p;
    if (p == 0.0 && cdf < u) break;
  }
  return k;
}

struct Vehicle {
  PlannedRoute plan;
  std::size_t hop = 0;
  double now = 0.0;          // seconds
  double remaining_m = 0.0;  // on the current segment
  bool nav = false;
};

struct Sampler {
  std::vector<double> cumulative;
  double total = 0.0;
  explicit Sampler(const std::vector<double>& w) : cumulative(w.size()) {
    for (std::size_t i = 0; i < w.size(); ++i) cumulative[i] = (total += w[i]);
  }
  std::size_t draw(double u) const {
    const auto it = std::upper_bound(cumulative.begin(), cumulative.end(), u * total);
    return std::min<std::size_t>(static_cast<std::size_t>(it - cumulative.begin()), cumulative.size() - 1);
  }
};

}  // namespace

SimulationResult propagate_traffic(const RoadNetwork& net, const DemandModel& demand,
                                   const std::vector<FundamentalDiagram>& fd, const TimeGrid& grid,
                                   const SimulationConfig& cfg) {
  const std::size_t n = net.size();
  const std::size_t total = grid.total_slots();
  const double dt = grid.slot_seconds();
  if (fd.size() != n) throw std::invalid_argument("one fundamental diagram per segment required");
  demand.validate(n, grid);

  SimulationResult res;
  res.travel_time = Tensor({n, total});
  res.speed = Tensor({n, total});
  res.volume = Tensor({n, total});
  res.nav_volume = Tensor({n, total});

  const Predecessors pred(net);
  std::vector<Sampler> dest_sampler;
  std::vector<double> origin_total;
  for (const auto& f : demand.flows) {
    dest_sampler.emplace_back(f.destination_weight);
    double w = 0.0;
    for (double x : f.origin_weight) w += x;
    origin_total.push_back(w);
  }

  std::vector<double> occupancy(n, 0.0), speed(n), cost(n);
  std::vector<RouteTree> trees(n);
  std::vector<std::size_t> tree_stamp(n, std::numeric_limits<std::size_t>::max());
  std::vector<Vehicle> active, spawned;
  std::uint64_t next_id = 0;
  const std::uint64_t flow_count = demand.flows.size();

  auto count_entry = [&](const Vehicle& v, std::size_t seg, double when) {
    const auto slot = static_cast<std::size_t>(std::floor(when / dt));
    if (slot >= total) return;
    res.volume[seg * total + slot] += 1.0;
    if (v.nav) res.nav_volume[seg * total + slot] += 1.0;
  };

  for (std::size_t t = 0; t < total; ++t) {
    const double t_begin = double(t) * dt, t_end = double(t + 1) * dt;
    // Speed for this slot from last slot's mean density.
    SplitMix64 noise_rng(derive_seed(cfg.seed, "speed-noise", t));
    std::normal_distribution<double> normal(0.0, 1.0);
    for (std::size_t s = 0; s < n; ++s) {
      const double len_km = net.segments[s].length_m / 1000.0;
      const double k = t == 0 ? 0.0 : occupancy[s] / dt / len_km;
      double v = fd[s].speed(k, cfg.v_min_kmh);
      const double z = normal(noise_rng);
      if (cfg.speed_noise > 0.0)
        v = std::clamp(v * std::exp(cfg.speed_noise * z - 0.5 * cfg.speed_noise * cfg.speed_noise), cfg.v_min_kmh,
                       fd[s].free_flow_kmh);
      speed[s] = v;
      res.speed[s * total + t] = v;
      res.travel_time[s * total + t] = 3.6 / v;
      cost[s] = 3.6 / v * net.segments[s].length_m;
      occupancy[s] = 0.0;
    }
    auto tree_for = [&](std::size_t dest) -> const RouteTree& {
      if (tree_stamp[dest] != t) {
        build_tree(net, pred, cost, dest, trees[dest]);
        tree_stamp[dest] = t;
      }
      return trees[dest];
    };

    spawned.clear();
    auto spawn = [&](std::size_t origin, std::size_t dest, SplitMix64& vr) {
      Vehicle v;
      const double launch = t_begin + vr.uniform() * dt;
      v.nav = vr.uniform() < demand.p_nav;
      follow_tree(tree_for(dest), cost, origin, dest, launch, v.plan);
      v.now = launch;
      v.remaining_m = net.segments[origin].length_m;
      spawned.push_back(std::move(v));
    };
    for (std::uint64_t f = 0; f < flow_count; ++f) {
      const auto& flow = demand.flows[f];
      if (origin_total[f] <= 0.0) continue;
      const std::size_t day = grid.day_of(t);
      const double dayf = day < demand.day_factor.size() ? demand.day_factor[day] : 1.0;
      const double slot_rate = flow.daily_rate[grid.slot_in_day(t)] *
                               flow.weekday_factor[day % grid.days_per_week] * dayf / origin_total[f];
      for (std::size_t o = 0; o < n; ++o) {
        const double lambda = slot_rate * flow.origin_weight[o];
        SplitMix64 cr(derive_seed(cfg.seed, "spawn", (t * flow_count + f) * n + o));
        const auto count = poisson_quantile(lambda, cr.uniform(), cr);
        for (std::uint64_t k = 0; k < count; ++k) {
          SplitMix64 vr(derive_seed(cfg.seed, "vehicle", ((t * flow_count + f) * n + o) * 4096 + k));
          std::size_t dest = o;
          for (int tries = 0; dest == o && tries < 64; ++tries) dest = dest_sampler[f].draw(vr.uniform());
          if (dest == o) continue;
          spawn(o, dest, vr);
        }
      }
    }
    for (std::size_t e = 0; e < demand.surges.size(); ++e) {
      const auto& ev = demand.surges[e];
      const auto st = static_cast<std::int64_t>(t);
      if (st < ev.start_slot || st >= ev.start_slot + static_cast<std::int64_t>(ev.duration)) continue;
      for (auto o : ev.origins) {
        const double lambda = (ev.intensity - 1.0) * demand.origin_rate(o, t, grid);
        SplitMix64 cr(derive_seed(cfg.seed, "surge", (e * total + t) * n + o));
        const auto count = poisson_quantile(lambda, cr.uniform(), cr);
        for (std::uint64_t k = 0; k < count; ++k) {
          SplitMix64 vr(derive_seed(cfg.seed, "surge-vehicle", ((e * total + t) * n + o) * 4096 + k));
          spawn(o, ev.destination, vr);
        }
      }
    }
    // Route ids follow launch order within the slot.
    std::stable_sort(spawned.begin(), spawned.end(),
                     [](const Vehicle& a, const Vehicle& b) { return a.now < b.now; });
    const std::uint64_t in_flight_before = active.size();
    for (auto& v : spawned) {
      const std::uint64_t id = next_id++;
      count_entry(v, v.plan.segments[0], v.now);
      if (v.nav) res.log.records.push_back(to_record(v.plan, id, dt));
      active.push_back(std::move(v));
    }

    std::uint64_t arrived = 0;
    for (auto& v : active) {
      if (v.now < t_begin) v.now = t_begin;
      const std::size_t m = v.plan.segments.size();
      while (v.hop < m) {
        const std::size_t s = v.plan.segments[v.hop];
        double exit;
        if (cfg.follow_plan) {
          exit = v.hop + 1 < m ? v.plan.entry_seconds[v.hop + 1] : v.plan.arrival_seconds;
        } else {
          exit = v.now + v.remaining_m / (speed[s] / 3.6);
        }
        if (exit >= t_end) {
          occupancy[s] += t_end - v.now;
          if (!cfg.follow_plan) v.remaining_m -= (t_end - v.now) * speed[s] / 3.6;
          v.now = t_end;
          break;
        }
        occupancy[s] += std::max(0.0, exit - v.now);
        v.now = exit;
        ++v.hop;
        if (v.hop < m) {
          v.remaining_m = net.segments[v.plan.segments[v.hop]].length_m;
          count_entry(v, v.plan.segments[v.hop], v.now);
        }
      }
      if (v.hop == m) ++arrived;
    }
    std::erase_if(active, [](const Vehicle& v) { return v.hop == v.plan.segments.size(); });
    res.tally.spawned += spawned.size();
    res.tally.arrived += arrived;
    if (spawned.size() != active.size() - in_flight_before + arrived) res.tally.conserved = false;
  }
  res.tally.in_flight_at_end = active.size();
  return res;
}

}  // namespace hstgcn
