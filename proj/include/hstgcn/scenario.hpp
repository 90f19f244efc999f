#pragma once

// Synthetic regional traffic: network generation, demand, Dijkstra route
// planning and a slot-level mesoscopic propagation loop driven by the
// triangular flow-density relationship.

#include <cstdint>
#include <vector>

#include "hstgcn/features.hpp"
#include "hstgcn/road_network.hpp"
#include "hstgcn/tensor.hpp"

namespace hstgcn {

struct FundamentalDiagram {
  double free_flow_kmh = 60.0;
  double critical_density = 30.0;  // veh/km
  double jam_density = 180.0;      // veh/km

  double peak_flow() const { return free_flow_kmh * critical_density; }  // veh/h
  /// Triangular speed-density curve, clamped to [v_min, v_f].
  double speed(double density, double v_min_kmh) const;
  void validate() const;
};

/// Critical and jam density per road class (all lanes of one direction).
struct ClassDensities {
  double critical[4] = {45.0, 35.0, 30.0, 25.0};
  double jam[4] = {240.0, 200.0, 180.0, 150.0};
};

std::vector<FundamentalDiagram> class_diagrams(const RoadNetwork& net, const ClassDensities& dens = {});

enum class NetworkKind { Grid, RingRadial };

NetworkKind parse_network_kind(std::string_view s);

/// Grid: k×k lattice, two-way, n = 4k(k−1) closest to n_target (k ≥ 2).
/// Ring-radial: m spokes + ring around a hub, n = 4m (m ≥ 3).
/// Road classes are assigned per corridor; node positions are jittered.
RoadNetwork generate_network(NetworkKind kind, std::size_t n_target, std::uint64_t seed,
                             double spacing_km = 2.0);

/// One OD stream: origins and destinations drawn by weight, total spawn rate
/// per slot given by a daily profile scaled per weekday.
struct DemandFlow {
  std::vector<double> origin_weight;       // per segment
  std::vector<double> destination_weight;  // per segment
  std::vector<double> daily_rate;          // veh/slot, one entry per slot of the day
  std::vector<double> weekday_factor;      // one per day of week
};

/// Extra trips from a set of origin segments to one destination. While
/// active, each origin's rate is multiplied by intensity; the added trips
/// all head for the destination.
struct SurgeEvent {
  std::vector<std::size_t> origins;
  std::size_t destination = 0;
  std::int64_t start_slot = 0;
  std::size_t duration = 1;
  double intensity = 2.0;
};

struct DemandModel {
  std::vector<DemandFlow> flows;
  std::vector<double> day_factor;  // per simulated day, multiplies every flow
  std::vector<SurgeEvent> surges;
  double p_nav = 0.3;

  /// Expected spawns per slot from origin o, surges excluded.
  double origin_rate(std::size_t origin, std::size_t slot, const TimeGrid& grid) const;
  void validate(std::size_t n, const TimeGrid& grid) const;
};

struct DemandSpec {
  double background_rate = 160.0;  // veh/slot network-wide at midday
  double commute_rate = 520.0;     // veh/slot at the AM/PM peak
  double weekend_commute = 0.25;
  double day_jitter = 0.05;  // lognormal sd of the per-day factor
  double surges_per_week = 8.0;
  double surge_intensity_min = 3.0;
  double surge_intensity_max = 6.0;
  std::size_t surge_duration_min = 4;
  std::size_t surge_duration_max = 12;
  double surge_radius_km = 2.5;
  double surge_min_distance_km = 3.0;
  double p_nav = 0.3;
};

DemandModel generate_demand(const RoadNetwork& net, const TimeGrid& grid, const DemandSpec& spec,
                            std::uint64_t seed);

/// Minimum-time route under per-segment traversal cost (seconds). Entry
/// times are launch + cumulative cost of the preceding hops.
struct PlannedRoute {
  std::vector<std::size_t> segments;
  std::vector<double> entry_seconds;
  double arrival_seconds = 0.0;  // leaving the last segment
};

PlannedRoute plan_route(const RoadNetwork& net, std::span<const double> travel_time, std::size_t origin,
                        std::size_t destination, double launch_seconds);

/// Converts a plan into the navigation-log record (arrival slots floored).
NavigationRecord to_record(const PlannedRoute& route, std::uint64_t route_id, double slot_seconds);

struct SimulationConfig {
  double v_min_kmh = 5.0;
  double speed_noise = 0.03;  // lognormal sd applied to each slot speed
  bool follow_plan = false;   // vehicles keep their planned entry times
  std::uint64_t seed = 1;
};

struct VehicleTally {
  std::uint64_t spawned = 0;
  std::uint64_t arrived = 0;
  std::uint64_t in_flight_at_end = 0;
  bool conserved = true;  // spawned_t = Δin_flight_t + arrived_t for every slot
};

struct SimulationResult {
  Tensor travel_time;  // n×S, s/m
  Tensor speed;        // n×S, km/h
  Tensor volume;       // n×S, entries of all vehicles
  Tensor nav_volume;   // n×S, entries of navigation vehicles
  NavigationLog log;
  VehicleTally tally;
};

SimulationResult propagate_traffic(const RoadNetwork& net, const DemandModel& demand,
                                   const std::vector<FundamentalDiagram>& fd, const TimeGrid& grid,
                                   const SimulationConfig& cfg);

}  // namespace hstgcn
