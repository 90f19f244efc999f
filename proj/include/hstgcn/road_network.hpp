#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

namespace hstgcn {

enum class RoadClass { Freeway, Highway, Expressway, Major };

std::string_view to_string(RoadClass c);
/// Throws std::invalid_argument on an unknown class name.
RoadClass parse_road_class(std::string_view s);

struct Point {
  double x_km = 0.0;
  double y_km = 0.0;
};

/// One directed road segment between two intersections.
struct Segment {
  std::size_t id = 0;
  std::size_t from_node = 0;
  std::size_t to_node = 0;
  double length_m = 0.0;
  RoadClass road_class = RoadClass::Major;
  double free_flow_kmh = 0.0;
};

/// Directed segment graph. successors[i] lists the segments a vehicle can
/// enter after leaving segment i.
struct RoadNetwork {
  std::vector<Point> nodes;
  std::vector<Segment> segments;
  std::vector<std::vector<std::size_t>> successors;

  std::size_t size() const { return segments.size(); }

  /// Checks ids are dense, lengths and speeds positive, references valid.
  /// Throws std::invalid_argument describing the first violation.
  void validate() const;

  /// Rebuilds successors from node incidence (every segment leaving the
  /// head node of i, U-turns included).
  void link_by_nodes();

  /// True when every segment can reach every other segment.
  bool strongly_connected() const;
};

}  // namespace hstgcn
