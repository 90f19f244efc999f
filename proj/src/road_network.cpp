#include "hstgcn/road_network.hpp"

#include <cmath>
#include <stdexcept>

namespace hstgcn {

std::string_view to_string(RoadClass c) {
  switch (c) {
    case RoadClass::Freeway: return "freeway";
    case RoadClass::Highway: return "highway";
    case RoadClass::Expressway: return "expressway";
    case RoadClass::Major: return "major";
  }
  return "?";
}

RoadClass parse_road_class(std::string_view s) {
  if (s == "freeway") return RoadClass::Freeway;
  if (s == "highway") return RoadClass::Highway;
  if (s == "expressway") return RoadClass::Expressway;
  if (s == "major") return RoadClass::Major;
  throw std::invalid_argument("unknown road class '" + std::string(s) + "'");
}

void RoadNetwork::validate() const {
  if (successors.size() != segments.size())
    throw std::invalid_argument("successor list count " + std::to_string(successors.size()) +
                                " != segment count " + std::to_string(segments.size()));
  for (std::size_t i = 0; i < segments.size(); ++i) {
    const Segment& s = segments[i];
    const std::string tag = "segment " + std::to_string(i);
    if (s.id != i) throw std::invalid_argument(tag + ": id " + std::to_string(s.id) + " is not dense");
    if (!(s.length_m > 0.0) || !std::isfinite(s.length_m))
      throw std::invalid_argument(tag + ": length must be > 0");
    if (!(s.free_flow_kmh > 0.0) || !std::isfinite(s.free_flow_kmh))
      throw std::invalid_argument(tag + ": free-flow speed must be > 0");
    if (s.from_node >= nodes.size() || s.to_node >= nodes.size())
      throw std::invalid_argument(tag + ": node reference out of range");
    for (auto j : successors[i])
      if (j >= segments.size())
        throw std::invalid_argument(tag + ": successor " + std::to_string(j) + " out of range");
  }
}

void RoadNetwork::link_by_nodes() {
  std::vector<std::vector<std::size_t>> leaving(nodes.size());
  for (const auto& s : segments) leaving.at(s.from_node).push_back(s.id);
  successors.assign(segments.size(), {});
  for (const auto& s : segments) successors[s.id] = leaving.at(s.to_node);
}

bool RoadNetwork::strongly_connected() const {
  const std::size_t n = segments.size();
  if (n == 0) return true;
  auto reach_all = [n](const std::vector<std::vector<std::size_t>>& adj) {
    std::vector<char> seen(n, 0);
    std::vector<std::size_t> stack{0};
    seen[0] = 1;
    std::size_t count = 1;
    while (!stack.empty()) {
      const auto u = stack.back();
      stack.pop_back();
      for (auto v : adj[u])
        if (!seen[v]) {
          seen[v] = 1;
          ++count;
          stack.push_back(v);
        }
    }
    return count == n;
  };
  std::vector<std::vector<std::size_t>> reverse(n);
  for (std::size_t u = 0; u < n; ++u)
    for (auto v : successors[u]) reverse[v].push_back(u);
  return reach_all(successors) && reach_all(reverse);
}

}  // namespace hstgcn
