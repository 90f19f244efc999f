#pragma once

// On-disk formats: network text, long-format series CSV, navigation log,
// the binary feature store and JSON manifests with SHA-256 content hashes.

#include <filesystem>
#include <string>
#include <string_view>

#include "json.hpp"

#include "hstgcn/features.hpp"
#include "hstgcn/road_network.hpp"
#include "hstgcn/spectral.hpp"
#include "hstgcn/tensor.hpp"

namespace hstgcn {

namespace fs = std::filesystem;

std::string sha256_hex(std::string_view bytes);
std::string sha256_file(const fs::path& path);

std::string read_file(const fs::path& path);
/// Writes through a sibling temp file and renames, so readers never see a
/// half-written file.
void write_file(const fs::path& path, std::string_view bytes);

/// Shortest decimal that round-trips.
std::string format_double(double x);

// Network: header, node table, segment table, successor lists.
std::string network_to_text(const RoadNetwork& net);
RoadNetwork network_from_text(const std::string& text);

/// n×S series as "segment,slot,value" rows in (segment, slot) order.
std::string series_to_csv(const Tensor& series);
/// Every (segment, slot) cell must appear exactly once.
Tensor series_from_csv(const std::string& text, std::size_t segments, std::size_t slots);

/// One record per line: route id, launch slot, then segment:slot hops.
std::string navlog_to_text(const NavigationLog& log);
NavigationLog navlog_from_text(const std::string& text);

/// Feature store plus the two adjacency matrices the model variants use.
struct FeatureBundle {
  FeatureStore store;
  Tensor dijkstra;
  Tensor compound;
  double sigma2 = 3.0;
  double epsilon = 0.0;

  std::string adjacency_hash(bool compound_matrix) const;
};

inline constexpr int kFeatureStoreVersion = 1;

/// Text header (grid, channel counts, normalizer) terminated by "end", then
/// little-endian arrays.
std::string feature_bundle_to_bytes(const FeatureBundle& b);
FeatureBundle feature_bundle_from_bytes(const std::string& bytes);

/// Hash of a tensor's shape and raw values.
std::string tensor_hash(const Tensor& t);

// Manifests. Keys are sorted, no timestamps: equal inputs give equal bytes.
using Json = nlohmann::json;

std::string manifest_to_text(const Json& m);
Json read_manifest(const fs::path& path);

}  // namespace hstgcn
