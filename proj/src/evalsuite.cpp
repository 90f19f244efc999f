#include "hstgcn/evalsuite.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <iomanip>
#include <set>
#include <tuple>
#include <sstream>
#include <stdexcept>

namespace hstgcn {

std::string_view to_string(SliceKind k) {
  switch (k) {
    case SliceKind::Full: return "full";
    case SliceKind::Congested: return "C";
    case SliceKind::NonRecurring: return "NRC";
  }
  return "?";
}

SliceKind parse_slice_kind(std::string_view s) {
  std::string low(s);
  for (auto& c : low) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  if (low == "full") return SliceKind::Full;
  if (low == "c") return SliceKind::Congested;
  if (low == "nrc") return SliceKind::NonRecurring;
  throw std::invalid_argument("unknown slice '" + std::string(s) + "'");
}

void SliceSpec::validate() const {
  if (!(high_volume_per_min > 0.0)) throw std::invalid_argument("high-volume threshold must be > 0");
  for (double t : threshold_kmh)
    if (!(t > 0.0)) throw std::invalid_argument("congestion thresholds must be > 0");
  if (!(nrc_fraction > 0.0 && nrc_fraction < 1.0)) throw std::invalid_argument("NRC fraction must lie in (0, 1)");
  if (min_nrc_run == 0) throw std::invalid_argument("minimum NRC run must be >= 1");
}

bool SliceLabels::contains(SliceKind k, std::size_t s, std::size_t t) const {
  switch (k) {
    case SliceKind::Full: return true;
    case SliceKind::Congested: return congested[s * slots + t] != 0;
    case SliceKind::NonRecurring: return nrc[s * slots + t] != 0;
  }
  return false;
}

std::size_t SliceLabels::count(SliceKind k, std::size_t begin, std::size_t end) const {
  std::size_t c = 0;
  for (std::size_t s = 0; s < segments; ++s)
    for (std::size_t t = begin; t < end; ++t) c += contains(k, s, t);
  return c;
}

std::vector<std::uint8_t> qualifying_runs(const std::vector<std::uint8_t>& flag, std::size_t spd,
                                          std::size_t min_run) {
  std::vector<std::uint8_t> out(flag.size(), 0);
  std::size_t t = 0;
  while (t < flag.size()) {
    if (!flag[t]) {
      ++t;
      continue;
    }
    const std::size_t day_end = (t / spd + 1) * spd;
    std::size_t e = t;
    while (e < flag.size() && e < day_end && flag[e]) ++e;
    if (e - t >= min_run) std::fill(out.begin() + std::ptrdiff_t(t), out.begin() + std::ptrdiff_t(e), 1);
    t = e;
  }
  return out;
}

std::vector<std::uint8_t> extend_within_day(const std::vector<std::uint8_t>& flag, std::size_t spd,
                                            std::size_t ext) {
  std::vector<std::uint8_t> out(flag.size(), 0);
  for (std::size_t t = 0; t < flag.size(); ++t) {
    if (!flag[t]) continue;
    const std::size_t day_begin = t / spd * spd;
    const std::size_t day_end = std::min(flag.size(), day_begin + spd);
    const std::size_t lo = t >= day_begin + ext ? t - ext : day_begin;
    const std::size_t hi = std::min(day_end, t + ext + 1);
    std::fill(out.begin() + std::ptrdiff_t(lo), out.begin() + std::ptrdiff_t(hi), 1);
  }
  return out;
}

SliceLabels classify_slices(const Tensor& tt, const Tensor& ha_tt, const Tensor& volume, const RoadNetwork& net,
                            const TimeGrid& grid, const SliceSpec& spec) {
  spec.validate();
  const std::size_t n = net.size();
  if (tt.rank() != 2 || tt.dim(0) != n || ha_tt.shape() != tt.shape() || volume.shape() != tt.shape())
    throw std::invalid_argument("slice inputs must all be n×S with n = segment count");
  const std::size_t slots = tt.dim(1);
  const std::size_t train = std::min(grid.train_slots(), slots);
  SliceLabels lab;
  lab.segments = n;
  lab.slots = slots;
  lab.high_volume.assign(n, 0);
  lab.congested_core.assign(n * slots, 0);
  lab.nrc_core.assign(n * slots, 0);
  lab.congested.assign(n * slots, 0);
  lab.nrc.assign(n * slots, 0);
  for (std::size_t s = 0; s < n; ++s) {
    const int cls = static_cast<int>(net.segments[s].road_class);
    if (cls < 0 || cls > 3) throw std::invalid_argument("unknown road class on segment " + std::to_string(s));
    double vol = 0.0;
    for (std::size_t t = 0; t < train; ++t) vol += volume[s * slots + t];
    const double per_min = train ? vol / double(train) / grid.slot_minutes : 0.0;
    lab.high_volume[s] = per_min >= spec.high_volume_per_min;

    std::vector<std::uint8_t> slow(slots), below(slots);
    for (std::size_t t = 0; t < slots; ++t) {
      const double v = 3.6 / tt[s * slots + t];
      const double v_ha = 3.6 / ha_tt[s * slots + t];
      slow[t] = v < spec.threshold_kmh[cls];
      below[t] = v < spec.nrc_fraction * v_ha;
    }
    const auto nrc_core = qualifying_runs(below, grid.slots_per_day, spec.min_nrc_run);
    const auto c_ext = extend_within_day(slow, grid.slots_per_day, spec.extension);
    const auto nrc_ext = extend_within_day(nrc_core, grid.slots_per_day, spec.extension);
    for (std::size_t t = 0; t < slots; ++t) {
      lab.congested_core[s * slots + t] = slow[t];
      lab.nrc_core[s * slots + t] = nrc_core[t];
      lab.congested[s * slots + t] = lab.high_volume[s] && c_ext[t];
      lab.nrc[s * slots + t] = lab.high_volume[s] && nrc_ext[t];
    }
  }
  return lab;
}

Metrics compute_metrics(std::span<const double> pred, std::span<const double> truth,
                        std::span<const std::uint8_t> mask) {
  if (pred.size() != truth.size() || (!mask.empty() && mask.size() != pred.size()))
    throw std::invalid_argument("prediction, truth and mask lengths differ");
  Metrics m;
  double abs_sum = 0.0, sq_sum = 0.0, pct_sum = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (!mask.empty() && !mask[i]) continue;
    const double e = pred[i] - truth[i];
    abs_sum += std::abs(e);
    sq_sum += e * e;
    ++m.count;
    if (truth[i] >= kMapeMinTravelTime && truth[i] >= 1e-4) {
      pct_sum += std::abs(e) / truth[i];
      ++m.mape_count;
    }
  }
  if (m.count == 0) throw std::invalid_argument("metric mask selects no samples");
  m.mae = abs_sum / double(m.count);
  m.rmse = std::sqrt(sq_sum / double(m.count));
  m.mape = m.mape_count ? 100.0 * pct_sum / double(m.mape_count) : 0.0;
  return m;
}

Metrics compute_metrics(std::span<const double> pred, std::span<const double> truth) {
  return compute_metrics(pred, truth, {});
}

Forecast ha_baseline(const Tensor& ha_tt, const std::vector<std::size_t>& anchors, std::size_t horizon) {
  const std::size_t n = ha_tt.dim(0), slots = ha_tt.dim(1);
  Forecast fc;
  fc.anchors = anchors;
  fc.segments = n;
  fc.horizon = horizon;
  fc.values.resize(anchors.size() * n * horizon);
  for (std::size_t a = 0; a < anchors.size(); ++a) {
    if (anchors[a] + horizon >= slots) throw std::out_of_range("anchor target beyond the grid");
    for (std::size_t s = 0; s < n; ++s)
      for (std::size_t f = 0; f < horizon; ++f)
        fc.values[(a * n + s) * horizon + f] = ha_tt[s * slots + anchors[a] + 1 + f];
  }
  return fc;
}

std::vector<Metrics> evaluate_forecast(const Forecast& fc, const Tensor& tt, const SliceLabels& labels,
                                       SliceKind kind) {
  const std::size_t n = fc.segments, F = fc.horizon, slots = tt.dim(1);
  if (tt.dim(0) != n || labels.segments != n || labels.slots != slots)
    throw std::invalid_argument("forecast, truth and slice labels disagree on shape");
  if (fc.values.size() != fc.anchors.size() * n * F) throw std::invalid_argument("forecast value count mismatch");
  std::vector<std::vector<double>> pred(F + 1), truth(F + 1);
  for (std::size_t a = 0; a < fc.anchors.size(); ++a)
    for (std::size_t s = 0; s < n; ++s)
      for (std::size_t f = 0; f < F; ++f) {
        const std::size_t slot = fc.anchors[a] + 1 + f;
        if (!labels.contains(kind, s, slot)) continue;
        const double p = fc.values[(a * n + s) * F + f];
        const double y = tt[s * slots + slot];
        pred[0].push_back(p);
        truth[0].push_back(y);
        pred[f + 1].push_back(p);
        truth[f + 1].push_back(y);
      }
  if (pred[0].empty()) throw std::invalid_argument("slice " + std::string(to_string(kind)) + " selects no samples");
  std::vector<Metrics> out;
  for (std::size_t h = 0; h <= F; ++h)
    out.push_back(pred[h].empty() ? Metrics{} : compute_metrics(pred[h], truth[h]));
  return out;
}

void EvalReport::add(SliceKind k, const std::string& variant, const std::vector<Metrics>& per_step) {
  for (std::size_t h = 0; h < per_step.size(); ++h) {
    const Metrics& m = per_step[h];
    if (m.count == 0) continue;
    const std::string sl(to_string(k));
    rows.push_back({sl, variant, h, "MAE", m.mae, m.count});
    rows.push_back({sl, variant, h, "MAPE", m.mape, m.mape_count});
    rows.push_back({sl, variant, h, "RMSE", m.rmse, m.count});
  }
}

double EvalReport::value(const std::string& slice, const std::string& variant, std::size_t horizon,
                         const std::string& metric) const {
  for (const auto& r : rows)
    if (r.slice == slice && r.variant == variant && r.horizon == horizon && r.metric == metric) return r.value;
  throw std::out_of_range("no report cell " + slice + "/" + variant + "/" + std::to_string(horizon) + "/" + metric);
}

std::string EvalReport::to_csv() const {
  std::ostringstream os;
  os << "slice,variant,horizon,metric,value,count\n";
  os << std::setprecision(17);
  for (const auto& r : rows)
    os << r.slice << ',' << r.variant << ',' << r.horizon << ',' << r.metric << ',' << r.value << ',' << r.count
       << '\n';
  return os.str();
}

EvalReport EvalReport::from_csv(const std::string& text) {
  EvalReport rep;
  std::istringstream is(text);
  std::string line;
  std::getline(is, line);
  if (line != "slice,variant,horizon,metric,value,count") throw std::invalid_argument("not a report CSV");
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) f.push_back(cell);
    if (f.size() != 6) throw std::invalid_argument("report CSV line " + std::to_string(lineno) + ": expected 6 fields");
    rep.rows.push_back({f[0], f[1], std::stoul(f[2]), f[3], std::stod(f[4]), std::stoul(f[5])});
  }
  return rep;
}

std::string EvalReport::to_svg(const std::string& slice) const {
  std::map<std::string, std::vector<std::pair<std::size_t, double>>> curves;
  double ymax = 0.0;
  std::size_t hmax = 1;
  for (const auto& r : rows)
    if (r.slice == slice && r.metric == "MAE" && r.horizon > 0) {
      curves[r.variant].push_back({r.horizon, r.value});
      ymax = std::max(ymax, r.value);
      hmax = std::max(hmax, r.horizon);
    }
  if (ymax <= 0.0) ymax = 1.0;
  const double w = 640, h = 400, left = 70, right = 150, top = 30, bottom = 50;
  auto px = [&](double x) { return left + (x - 1.0) / std::max<double>(1.0, double(hmax) - 1.0) * (w - left - right); };
  auto py = [&](double y) { return h - bottom - y / (ymax * 1.1) * (h - top - bottom); };
  static const char* colours[] = {"#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e", "#e6ab02", "#a6761d"};
  std::ostringstream os;
  os << std::fixed << std::setprecision(2);
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << left << "\" y=\"20\" font-size=\"14\">MAE by horizon step (" << slice << ")</text>\n";
  os << "<line x1=\"" << left << "\" y1=\"" << h - bottom << "\" x2=\"" << w - right << "\" y2=\"" << h - bottom
     << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\"" << h - bottom
     << "\" stroke=\"black\"/>\n";
  for (std::size_t k = 1; k <= hmax; ++k)
    os << "<text x=\"" << px(double(k)) << "\" y=\"" << h - bottom + 18 << "\" font-size=\"11\" text-anchor=\"middle\">"
       << k << "</text>\n";
  for (int i = 0; i <= 4; ++i) {
    const double y = ymax * 1.1 * i / 4.0;
    os << "<text x=\"" << left - 6 << "\" y=\"" << py(y) + 4 << "\" font-size=\"11\" text-anchor=\"end\">"
       << std::setprecision(4) << y << std::setprecision(2) << "</text>\n";
  }
  std::size_t c = 0;
  for (const auto& [variant, pts0] : curves) {
    auto pts = pts0;
    std::sort(pts.begin(), pts.end());
    const char* col = colours[c % 7];
    os << "<polyline fill=\"none\" stroke=\"" << col << "\" stroke-width=\"2\" points=\"";
    for (auto [x, y] : pts) os << px(double(x)) << ',' << py(y) << ' ';
    os << "\"/>\n";
    os << "<text x=\"" << w - right + 10 << "\" y=\"" << top + 18 * double(c + 1) << "\" font-size=\"12\" fill=\"" << col
       << "\">" << variant << "</text>\n";
    ++c;
  }
  os << "</svg>\n";
  return os.str();
}

EvalReport merge_reports(const std::vector<EvalReport>& parts) {
  EvalReport out;
  std::map<std::string, std::set<std::string>> slices_of;
  // The same cell may come from several parts (HA is in every evaluation);
  // identical copies collapse, disagreeing ones are an error.
  std::map<std::tuple<std::string, std::string, std::size_t, std::string>, const ReportRow*> seen;
  for (const auto& p : parts)
    for (const auto& r : p.rows) {
      const auto [it, fresh] = seen.try_emplace({r.slice, r.variant, r.horizon, r.metric}, &r);
      if (!fresh) {
        if (it->second->value != r.value || it->second->count != r.count)
          throw std::invalid_argument("reports disagree on " + r.slice + "/" + r.variant + "/" +
                                      std::to_string(r.horizon) + "/" + r.metric);
        continue;
      }
      slices_of[r.variant].insert(r.slice);
      out.rows.push_back(r);
    }
  if (!slices_of.empty()) {
    const auto& first = slices_of.begin()->second;
    for (const auto& [variant, sl] : slices_of)
      if (sl != first) throw std::invalid_argument("variant '" + variant + "' was evaluated on a different slice set");
  }
  return out;
}

}  // namespace hstgcn
