#pragma once

// Turns simulator/navigation output into model inputs: historical averages,
// route aggregation into ideal future volume, the V/T window tensors and the
// training-time noise augmentation.

#include <cstdint>
#include <span>
#include <vector>

#include "hstgcn/tensor.hpp"

namespace hstgcn {

/// Slot calendar. Only the daily service window is represented; slot t of
/// day d is global slot d·slots_per_day + t.
struct TimeGrid {
  int slot_minutes = 5;
  int day_start_minute = 6 * 60;
  std::size_t slots_per_day = 192;  // 06:00–22:00 at 5 minutes
  std::size_t days_per_week = 7;
  std::size_t train_weeks = 8;
  std::size_t test_weeks = 2;

  std::size_t slots_per_week() const { return days_per_week * slots_per_day; }
  std::size_t train_slots() const { return train_weeks * slots_per_week(); }
  std::size_t test_slots() const { return test_weeks * slots_per_week(); }
  std::size_t total_slots() const { return train_slots() + test_slots(); }
  std::size_t day_of(std::size_t slot) const { return slot / slots_per_day; }
  std::size_t slot_in_day(std::size_t slot) const { return slot % slots_per_day; }
  double slot_seconds() const { return 60.0 * slot_minutes; }

  void validate() const;
};

struct NavigationHop {
  std::size_t segment = 0;
  std::int64_t slot = 0;  // planned arrival slot δ
};

struct NavigationRecord {
  std::uint64_t route_id = 0;
  std::int64_t launch_slot = 0;  // ψ
  std::vector<NavigationHop> hops;
};

struct NavigationLog {
  std::vector<NavigationRecord> records;

  std::size_t hop_count() const;
  /// δ non-decreasing, ψ ≤ δ_0, segment ids < n. Throws on the first violation.
  void validate(std::size_t n) const;
};

/// Ideal future volume ν[s, t, f], f = 0..F.
class VolumeCube {
public:
  VolumeCube() = default;
  VolumeCube(std::size_t segments, std::size_t slots, std::size_t horizon);

  std::size_t segments() const { return segments_; }
  std::size_t slots() const { return slots_; }
  std::size_t horizon() const { return horizon_; }  // F; there are F+1 lead channels

  std::uint32_t at(std::size_t s, std::size_t t, std::size_t f) const {
    return counts_[(s * slots_ + t) * (horizon_ + 1) + f];
  }
  std::uint32_t& at(std::size_t s, std::size_t t, std::size_t f) {
    return counts_[(s * slots_ + t) * (horizon_ + 1) + f];
  }
  std::span<const std::uint32_t> raw() const { return counts_; }
  std::span<std::uint32_t> raw() { return counts_; }

  /// ν[·, ·, 0] as an n×S tensor.
  Tensor lead0() const;

  friend bool operator==(const VolumeCube&, const VolumeCube&) = default;

private:
  std::size_t segments_ = 0;
  std::size_t slots_ = 0;
  std::size_t horizon_ = 0;
  std::vector<std::uint32_t> counts_;
};

struct AggregationResult {
  VolumeCube cube;
  std::size_t skipped_hops = 0;  // arrival slot outside the grid
};

/// Route aggregation: every hop (s, δ) of route r contributes one vehicle to
/// ν[s, δ − f, f] for f = 0..F while δ − f ≥ ψ_r.
AggregationResult aggregate_routes(const NavigationLog& log, const TimeGrid& grid, std::size_t n,
                                   std::size_t horizon);

enum class HaDivisor {
  TermCount,  // divide by the number of summed terms
  Literal,    // divide by the number of training weeks W, as written
};

/// Weekly historical average of series (n×S) at one (segment, slot): mean over
/// training slots r ≡ t (mod L), r ≠ t. Throws if no slot qualifies.
double historical_average(const Tensor& series, const TimeGrid& grid, std::size_t segment,
                          std::size_t slot, HaDivisor divisor = HaDivisor::TermCount);

/// historical_average for every (segment, slot) of the grid.
Tensor historical_average_table(const Tensor& series, const TimeGrid& grid,
                                HaDivisor divisor = HaDivisor::TermCount);

struct FeatureTensorPair {
  Tensor volume;       // V: n × P × 2(F+1)
  Tensor travel_time;  // T: n × P × (F+2)
  Tensor label;        // n × F, τ at t0+1 .. t0+F
  std::size_t anchor = 0;
};

/// All per-slot series a feature window draws on. Every tensor is n×S.
struct FeatureSources {
  const VolumeCube* cube = nullptr;
  const Tensor* travel_time = nullptr;
  const Tensor* ha_volume = nullptr;  // HA of ν[·, ·, 0]
  const Tensor* ha_travel_time = nullptr;
};

std::size_t volume_channels(std::size_t horizon);       // 2(F+1)
std::size_t travel_time_channels(std::size_t horizon);  // F+2

FeatureTensorPair build_feature_window(const FeatureSources& src, std::size_t anchor,
                                       std::size_t history, std::size_t horizon);

/// Writes one window straight into caller buffers (v: n·P·2(F+1),
/// t: n·P·(F+2), label: n·F). Used to fill batches without copies.
void write_feature_window(const FeatureSources& src, std::size_t anchor, std::size_t history,
                          std::size_t horizon, double* v, double* t, double* label);

/// Adds N(0, std²) to entries below threshold, clamped at zero. Entries at or
/// above threshold are untouched.
void inject_noise(std::span<double> values, double threshold, double std_dev, std::uint64_t seed);
Tensor inject_noise(const Tensor& v, double threshold, double std_dev, std::uint64_t seed);

enum class SampleMode { Train, Test };

/// Anchors t0 in [begin, end) whose whole window [t0−P+1, t0+F] sits inside
/// one service day and inside [begin, end). Ascending order.
std::vector<std::size_t> valid_anchors(const TimeGrid& grid, std::size_t history,
                                       std::size_t horizon, std::size_t begin, std::size_t end);

/// Train: shuffled anchors of the training span. Test: ordered anchors of the
/// test span.
std::vector<std::size_t> window_sampler(const TimeGrid& grid, std::size_t history,
                                        std::size_t horizon, SampleMode mode, std::uint64_t seed);

/// Per-channel z-score statistics for the T channels (and the label, which
/// shares channel 0's statistics).
struct TravelTimeNormalizer {
  std::vector<double> mean;
  std::vector<double> std;

  double label_mean() const { return mean.at(0); }
  double label_std() const { return std.at(0); }
  void apply(std::span<double> t_window) const;  // in place, channels innermost
};

/// Channel 0 from τ, channels 1..F+1 from HA τ, both over the training slots.
TravelTimeNormalizer fit_normalizer(const Tensor& travel_time, const Tensor& ha_travel_time,
                                    const TimeGrid& grid, std::size_t horizon);

/// Fills NaN entries (missing slots) by carrying the last observation of the
/// same day forward, falling back to the segment's free-flow value.
void impute_travel_time(Tensor& travel_time, const TimeGrid& grid,
                        std::span<const double> free_flow_travel_time);

/// Everything the model stages need from one dataset: ν cube, τ, both HA
/// tables and the T-channel normalizer.
struct FeatureStore {
  TimeGrid grid;
  std::size_t history = 6;
  std::size_t horizon = 12;
  VolumeCube cube;
  Tensor travel_time;
  Tensor ha_volume;
  Tensor ha_travel_time;
  TravelTimeNormalizer normalizer;
  std::size_t skipped_hops = 0;

  std::size_t segments() const { return travel_time.dim(0); }
  FeatureSources sources() const { return {&cube, &travel_time, &ha_volume, &ha_travel_time}; }
};

FeatureStore build_feature_store(const NavigationLog& log, const Tensor& travel_time, const TimeGrid& grid,
                                 std::size_t history, std::size_t horizon,
                                 HaDivisor divisor = HaDivisor::TermCount);

}  // namespace hstgcn
