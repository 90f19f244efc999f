#pragma once

// Pipeline commands over a workspace directory:
//   simulate -> dataset/   features -> features/   train -> models/<variant>/
//   eval -> eval/<tag>/    report -> report/
// Every stage writes a manifest.json that names its inputs by hash.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "hstgcn/evalsuite.hpp"
#include "hstgcn/features.hpp"
#include "hstgcn/model.hpp"
#include "hstgcn/scenario.hpp"
#include "hstgcn/trainer.hpp"

namespace hstgcn {

/// Bad flag, config key or value. Maps to exit code 2.
class UsageError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

struct RunConfig {
  std::uint64_t seed = 1;

  // [scenario]
  NetworkKind network = NetworkKind::Grid;
  std::size_t segments = 48;
  double spacing_km = 2.0;
  TimeGrid grid;
  DemandSpec demand;
  SimulationConfig sim;

  // [features]
  std::size_t history = 6;
  std::size_t horizon = 12;
  HaDivisor ha_divisor = HaDivisor::TermCount;

  // [adjacency]
  double sigma2 = 3.0;
  double epsilon = 0.0;

  // [model]
  Variant variant = Variant::HStgcn;
  std::size_t chebyshev_order = 3;
  std::size_t graph_channels = 64;
  std::size_t transformer_channels = 16;

  // [train]
  TrainConfig train;
  std::size_t replicas = 3;

  // [eval]
  SliceSpec slices;
  std::size_t test_stride = 1;

  RunConfig();

  /// Parses key = value sections. Unknown sections or keys and malformed
  /// values throw UsageError naming the key.
  static RunConfig from_ini(const std::string& text);
  static RunConfig from_file(const std::filesystem::path& path);

  /// Canonical text of one section (every key, fixed order).
  std::string section_text(const std::string& section) const;
  std::string to_ini() const;

  ArchitectureConfig architecture(Variant v) const;
  void validate() const;
};

struct CommandOptions {
  std::filesystem::path workspace;
  RunConfig config;
  bool force = false;
  std::optional<Variant> variant;
  std::vector<SliceKind> slices = {SliceKind::Full, SliceKind::Congested, SliceKind::NonRecurring};
};

void cmd_simulate(const CommandOptions& opt, std::ostream& log);
void cmd_features(const CommandOptions& opt, std::ostream& log);
void cmd_train(const CommandOptions& opt, std::ostream& log);
void cmd_eval(const CommandOptions& opt, std::ostream& log);
void cmd_report(const CommandOptions& opt, std::ostream& log);

/// Full command-line entry point. Returns the process exit code:
/// 0 success, 1 runtime failure, 2 usage or config error.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace hstgcn
