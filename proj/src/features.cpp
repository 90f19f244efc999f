#include "hstgcn/features.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>

namespace hstgcn {

void TimeGrid::validate() const {
  if (slot_minutes <= 0) throw std::invalid_argument("slot length must be positive");
  if (slots_per_day == 0 || days_per_week == 0) throw std::invalid_argument("empty day or week");
  if (train_weeks == 0) throw std::invalid_argument("training range is empty");
}

std::size_t NavigationLog::hop_count() const {
  std::size_t c = 0;
  for (const auto& r : records) c += r.hops.size();
  return c;
}

void NavigationLog::validate(std::size_t n) const {
  for (const auto& r : records) {
    const std::string tag = "route " + std::to_string(r.route_id);
    if (r.hops.empty()) throw std::invalid_argument(tag + ": no hops");
    if (r.launch_slot > r.hops.front().slot)
      throw std::invalid_argument(tag + ": launch slot after first arrival");
    for (std::size_t l = 0; l < r.hops.size(); ++l) {
      if (r.hops[l].segment >= n)
        throw std::invalid_argument(tag + ": segment " + std::to_string(r.hops[l].segment) + " out of range");
      if (l > 0 && r.hops[l].slot < r.hops[l - 1].slot)
        throw std::invalid_argument(tag + ": arrival slots decrease at hop " + std::to_string(l));
    }
  }
}

VolumeCube::VolumeCube(std::size_t segments, std::size_t slots, std::size_t horizon)
    : segments_(segments), slots_(slots), horizon_(horizon), counts_(segments * slots * (horizon + 1), 0) {}

Tensor VolumeCube::lead0() const {
  Tensor out({segments_, slots_});
  for (std::size_t s = 0; s < segments_; ++s)
    for (std::size_t t = 0; t < slots_; ++t) out[s * slots_ + t] = at(s, t, 0);
  return out;
}

AggregationResult aggregate_routes(const NavigationLog& log, const TimeGrid& grid, std::size_t n,
                                   std::size_t horizon) {
  const auto total = static_cast<std::int64_t>(grid.total_slots());
  AggregationResult res{VolumeCube(n, grid.total_slots(), horizon), 0};
  std::uint32_t* counts = res.cube.raw().data();
  const std::size_t slots = grid.total_slots();
  std::size_t skipped = 0;
  const auto nrec = static_cast<std::ptrdiff_t>(log.records.size());
  // Integer increments commute, so the result is independent of scheduling.
#pragma omp parallel for schedule(dynamic, 256) reduction(+ : skipped)
  for (std::ptrdiff_t ri = 0; ri < nrec; ++ri) {
    const auto& rec = log.records[static_cast<std::size_t>(ri)];
    for (const auto& hop : rec.hops) {
      if (hop.slot < 0 || hop.slot >= total || hop.segment >= n) {
        ++skipped;
        continue;
      }
      std::int64_t t = hop.slot;
      for (std::size_t f = 0; f <= horizon; ++f, --t) {
        if (t < rec.launch_slot || t < 0) break;
        std::uint32_t& c = counts[(hop.segment * slots + static_cast<std::size_t>(t)) * (horizon + 1) + f];
#pragma omp atomic
        ++c;
      }
    }
  }
  res.skipped_hops = skipped;
  return res;
}

double historical_average(const Tensor& series, const TimeGrid& grid, std::size_t segment,
                          std::size_t slot, HaDivisor divisor) {
  if (series.rank() != 2) throw std::invalid_argument("series must be n×S");
  const std::size_t s = series.dim(1);
  const std::size_t period = grid.slots_per_week();
  const std::size_t train = std::min(grid.train_slots(), s);
  const double* row = series.ptr() + segment * s;
  double sum = 0.0;
  std::size_t terms = 0;
  for (std::size_t r = slot % period; r < train; r += period) {
    if (r == slot) continue;
    sum += row[r];
    ++terms;
  }
  if (terms == 0)
    throw std::invalid_argument("no training slot shares the weekly phase of slot " + std::to_string(slot));
  const double div = divisor == HaDivisor::TermCount ? static_cast<double>(terms)
                                                     : static_cast<double>(grid.train_weeks);
  return sum / div;
}

Tensor historical_average_table(const Tensor& series, const TimeGrid& grid, HaDivisor divisor) {
  if (series.rank() != 2) throw std::invalid_argument("series must be n×S");
  const std::size_t n = series.dim(0), s = series.dim(1);
  Tensor out({n, s});
#pragma omp parallel for schedule(static)
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t t = 0; t < s; ++t) out[i * s + t] = historical_average(series, grid, i, t, divisor);
  return out;
}

std::size_t volume_channels(std::size_t horizon) { return 2 * (horizon + 1); }
std::size_t travel_time_channels(std::size_t horizon) { return horizon + 2; }

void write_feature_window(const FeatureSources& src, std::size_t anchor, std::size_t history,
                          std::size_t horizon, double* v, double* t, double* label) {
  const VolumeCube& cube = *src.cube;
  const Tensor& tt = *src.travel_time;
  const Tensor& hv = *src.ha_volume;
  const Tensor& ht = *src.ha_travel_time;
  const std::size_t n = tt.dim(0), s = tt.dim(1);
  if (history == 0 || anchor + 1 < history || anchor + horizon >= s)
    throw std::out_of_range("window around anchor " + std::to_string(anchor) + " leaves the grid");
  if (cube.horizon() < horizon) throw std::invalid_argument("volume cube horizon shorter than F");
  const std::size_t vc = volume_channels(horizon);
  const std::size_t tc = travel_time_channels(horizon);
  const std::size_t first = anchor + 1 - history;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t p = 0; p < history; ++p) {
      const std::size_t slot = first + p;
      double* vrow = v + (i * history + p) * vc;
      double* trow = t + (i * history + p) * tc;
      for (std::size_t f = 0; f <= horizon; ++f) vrow[f] = cube.at(i, slot, f);
      for (std::size_t f = 0; f <= horizon; ++f) vrow[horizon + 1 + f] = hv[i * s + slot + f];
      trow[0] = tt[i * s + slot];
      for (std::size_t f = 0; f <= horizon; ++f) trow[1 + f] = ht[i * s + slot + f];
    }
    if (label)
      for (std::size_t f = 1; f <= horizon; ++f) label[i * horizon + f - 1] = tt[i * s + anchor + f];
  }
}

FeatureTensorPair build_feature_window(const FeatureSources& src, std::size_t anchor, std::size_t history,
                                       std::size_t horizon) {
  const std::size_t n = src.travel_time->dim(0);
  FeatureTensorPair out;
  out.anchor = anchor;
  if (history == 0 || horizon == 0) throw std::invalid_argument("history and horizon must be positive");
  out.volume = Tensor({n, history, volume_channels(horizon)});
  out.travel_time = Tensor({n, history, travel_time_channels(horizon)});
  out.label = Tensor({n, horizon});
  write_feature_window(src, anchor, history, horizon, out.volume.ptr(), out.travel_time.ptr(), out.label.ptr());
  return out;
}

void inject_noise(std::span<double> values, double threshold, double std_dev, std::uint64_t seed) {
  if (!(std_dev > 0.0)) throw std::invalid_argument("noise standard deviation must be > 0");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, std_dev);
  for (double& x : values)
    if (x < threshold) x = std::max(0.0, x + noise(rng));
}

Tensor inject_noise(const Tensor& v, double threshold, double std_dev, std::uint64_t seed) {
  Tensor out = v;
  inject_noise(out.data(), threshold, std_dev, seed);
  return out;
}

std::vector<std::size_t> valid_anchors(const TimeGrid& grid, std::size_t history, std::size_t horizon,
                                       std::size_t begin, std::size_t end) {
  std::vector<std::size_t> out;
  if (history == 0 || history + horizon > grid.slots_per_day) return out;
  const std::size_t day = grid.slots_per_day;
  for (std::size_t d = begin / day; d * day < end; ++d) {
    const std::size_t lo = std::max(begin, d * day);
    const std::size_t hi = std::min(end, (d + 1) * day);  // exclusive
    for (std::size_t t0 = lo + history - 1; t0 + horizon < hi; ++t0) out.push_back(t0);
  }
  return out;
}

std::vector<std::size_t> window_sampler(const TimeGrid& grid, std::size_t history, std::size_t horizon,
                                        SampleMode mode, std::uint64_t seed) {
  if (mode == SampleMode::Test)
    return valid_anchors(grid, history, horizon, grid.train_slots(), grid.total_slots());
  auto anchors = valid_anchors(grid, history, horizon, 0, grid.train_slots());
  std::mt19937_64 rng(seed);
  std::shuffle(anchors.begin(), anchors.end(), rng);
  return anchors;
}

void TravelTimeNormalizer::apply(std::span<double> t_window) const {
  const std::size_t c = mean.size();
  for (std::size_t i = 0; i < t_window.size(); ++i) {
    const std::size_t ch = i % c;
    t_window[i] = (t_window[i] - mean[ch]) / std[ch];
  }
}

TravelTimeNormalizer fit_normalizer(const Tensor& travel_time, const Tensor& ha_travel_time,
                                    const TimeGrid& grid, std::size_t horizon) {
  const std::size_t n = travel_time.dim(0), s = travel_time.dim(1);
  const std::size_t train = std::min(grid.train_slots(), s);
  auto stats = [&](const Tensor& x) {
    double sum = 0.0, sq = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t t = 0; t < train; ++t) sum += x[i * s + t];
    const double cnt = static_cast<double>(n * train);
    const double m = sum / cnt;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t t = 0; t < train; ++t) sq += (x[i * s + t] - m) * (x[i * s + t] - m);
    const double sd = std::sqrt(sq / cnt);
    return std::pair{m, sd > 1e-12 ? sd : 1.0};
  };
  TravelTimeNormalizer norm;
  const auto [mt, st] = stats(travel_time);
  const auto [mh, sh] = stats(ha_travel_time);
  norm.mean.assign(travel_time_channels(horizon), mh);
  norm.std.assign(travel_time_channels(horizon), sh);
  norm.mean[0] = mt;
  norm.std[0] = st;
  return norm;
}

void impute_travel_time(Tensor& travel_time, const TimeGrid& grid,
                        std::span<const double> free_flow_travel_time) {
  const std::size_t n = travel_time.dim(0), s = travel_time.dim(1);
  if (free_flow_travel_time.size() != n) throw std::invalid_argument("free-flow vector length mismatch");
  for (std::size_t i = 0; i < n; ++i) {
    double last = free_flow_travel_time[i];
    for (std::size_t t = 0; t < s; ++t) {
      if (grid.slot_in_day(t) == 0) last = free_flow_travel_time[i];
      double& x = travel_time[i * s + t];
      if (std::isnan(x))
        x = last;
      else
        last = x;
    }
  }
}

FeatureStore build_feature_store(const NavigationLog& log, const Tensor& travel_time, const TimeGrid& grid,
                                 std::size_t history, std::size_t horizon, HaDivisor divisor) {
  grid.validate();
  if (travel_time.rank() != 2 || travel_time.dim(1) != grid.total_slots())
    throw std::invalid_argument("travel time has " + shape_str(travel_time.shape()) + " but the grid has " +
                                std::to_string(grid.total_slots()) + " slots");
  const std::size_t n = travel_time.dim(0);
  log.validate(n);
  FeatureStore fs;
  fs.grid = grid;
  fs.history = history;
  fs.horizon = horizon;
  auto agg = aggregate_routes(log, grid, n, horizon);
  fs.cube = std::move(agg.cube);
  fs.skipped_hops = agg.skipped_hops;
  fs.travel_time = travel_time;
  fs.ha_volume = historical_average_table(fs.cube.lead0(), grid, divisor);
  fs.ha_travel_time = historical_average_table(travel_time, grid, divisor);
  fs.normalizer = fit_normalizer(travel_time, fs.ha_travel_time, grid, horizon);
  return fs;
}

}  // namespace hstgcn
