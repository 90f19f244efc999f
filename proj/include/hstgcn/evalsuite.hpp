#pragma once

// Metrics, congestion / non-recurring-congestion slicing, the HA baseline
// and report writers.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "hstgcn/features.hpp"
#include "hstgcn/road_network.hpp"
#include "hstgcn/tensor.hpp"

namespace hstgcn {

enum class SliceKind { Full, Congested, NonRecurring };

std::string_view to_string(SliceKind k);  // "full", "C", "NRC"
SliceKind parse_slice_kind(std::string_view s);  // accepts full|c|nrc (any case)

struct SliceSpec {
  double high_volume_per_min = 10.0;
  // Congestion speed thresholds (km/h) by road class.
  double threshold_kmh[4] = {30.0, 20.0, 20.0, 12.0};
  double nrc_fraction = 0.5;  // below this share of the HA speed
  std::size_t min_nrc_run = 2;
  std::size_t extension = 12;  // slots added on both sides, clipped to the day

  void validate() const;
};

/// Per-(segment, slot) labels over the whole grid.
struct SliceLabels {
  std::size_t segments = 0;
  std::size_t slots = 0;
  std::vector<std::uint8_t> high_volume;    // per segment
  std::vector<std::uint8_t> congested_core;  // speed below class threshold
  std::vector<std::uint8_t> nrc_core;        // qualifying runs below half HA speed
  std::vector<std::uint8_t> congested;       // high volume and extended C period
  std::vector<std::uint8_t> nrc;             // high volume and extended NRC period

  bool contains(SliceKind k, std::size_t s, std::size_t t) const;
  std::size_t count(SliceKind k, std::size_t begin, std::size_t end) const;
};

SliceLabels classify_slices(const Tensor& travel_time, const Tensor& ha_travel_time, const Tensor& volume,
                            const RoadNetwork& net, const TimeGrid& grid, const SliceSpec& spec);

/// Marks maximal runs of `flag` of length >= min_run inside each day.
std::vector<std::uint8_t> qualifying_runs(const std::vector<std::uint8_t>& flag, std::size_t slots_per_day,
                                          std::size_t min_run);
/// Dilates set slots by ext on both sides without crossing day boundaries.
std::vector<std::uint8_t> extend_within_day(const std::vector<std::uint8_t>& flag, std::size_t slots_per_day,
                                            std::size_t ext);

struct Metrics {
  double mae = 0.0;
  double mape = 0.0;  // percent
  double rmse = 0.0;
  std::size_t count = 0;
  std::size_t mape_count = 0;
};

/// Samples with truth τ below this (faster than 120 km/h) are left out of MAPE.
inline constexpr double kMapeMinTravelTime = 0.03;

Metrics compute_metrics(std::span<const double> pred, std::span<const double> truth,
                        std::span<const std::uint8_t> mask);
Metrics compute_metrics(std::span<const double> pred, std::span<const double> truth);

/// Forecasts for a set of anchors: values[(a·n + s)·F + f] predicts τ at
/// slot anchors[a] + 1 + f.
struct Forecast {
  std::vector<std::size_t> anchors;
  std::size_t segments = 0;
  std::size_t horizon = 0;
  std::vector<double> values;
};

/// HA baseline: τ^h at each target slot.
Forecast ha_baseline(const Tensor& ha_travel_time, const std::vector<std::size_t>& anchors, std::size_t horizon);

/// Metrics of one forecast on one slice: entry 0 aggregates all horizon
/// steps, entry f+1 is step f. Throws if the slice selects nothing.
std::vector<Metrics> evaluate_forecast(const Forecast& fc, const Tensor& travel_time, const SliceLabels& labels,
                                       SliceKind kind);

struct ReportRow {
  std::string slice;
  std::string variant;
  std::size_t horizon = 0;  // 0 = all steps
  std::string metric;       // MAE | MAPE | RMSE
  double value = 0.0;
  std::size_t count = 0;
};

struct EvalReport {
  std::vector<ReportRow> rows;

  void add(SliceKind k, const std::string& variant, const std::vector<Metrics>& per_step);
  /// Value of one cell; throws if absent.
  double value(const std::string& slice, const std::string& variant, std::size_t horizon,
               const std::string& metric) const;
  std::string to_csv() const;
  /// Per-step MAE curves of every variant on one slice.
  std::string to_svg(const std::string& slice) const;
  static EvalReport from_csv(const std::string& text);
};

/// Merges reports; every variant must cover the same slice set. Duplicate
/// cells must agree and are kept once.
EvalReport merge_reports(const std::vector<EvalReport>& parts);

}  // namespace hstgcn
