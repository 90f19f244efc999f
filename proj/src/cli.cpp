#include "hstgcn/cli.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <functional>
#include <iomanip>
#include <map>
#include <ostream>
#include <sstream>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "CLI11.hpp"
#include "hstgcn/io.hpp"
#include "hstgcn/rng.hpp"
#include "hstgcn/spectral.hpp"

namespace hstgcn {

namespace {

// ---- value codecs -------------------------------------------------------

bool parse_value(const std::string& s, double& out) {
  const auto r = std::from_chars(s.data(), s.data() + s.size(), out);
  return r.ec == std::errc() && r.ptr == s.data() + s.size() && std::isfinite(out);
}
template <class T>
  requires std::is_integral_v<T> && (!std::is_same_v<T, bool>)
bool parse_value(const std::string& s, T& out) {
  const auto r = std::from_chars(s.data(), s.data() + s.size(), out);
  return r.ec == std::errc() && r.ptr == s.data() + s.size();
}
bool parse_value(const std::string& s, bool& out) {
  if (s == "true" || s == "1" || s == "yes" || s == "on") return out = true, true;
  if (s == "false" || s == "0" || s == "no" || s == "off") return out = false, true;
  return false;
}
bool parse_value(const std::string& s, NetworkKind& out) {
  try {
    out = parse_network_kind(s);
    return true;
  } catch (const std::invalid_argument&) {
    return false;
  }
}
bool parse_value(const std::string& s, Variant& out) {
  try {
    out = parse_variant(s);
    return true;
  } catch (const std::invalid_argument&) {
    return false;
  }
}
bool parse_value(const std::string& s, HaDivisor& out) {
  if (s == "terms") return out = HaDivisor::TermCount, true;
  if (s == "weeks") return out = HaDivisor::Literal, true;
  return false;
}

std::string format_value(double x) { return format_double(x); }
template <class T>
  requires std::is_integral_v<T> && (!std::is_same_v<T, bool>)
std::string format_value(T x) {
  return std::to_string(x);
}
std::string format_value(bool x) { return x ? "true" : "false"; }
std::string format_value(NetworkKind k) { return k == NetworkKind::Grid ? "grid" : "ring-radial"; }
std::string format_value(Variant v) { return std::string(to_string(v)); }
std::string format_value(HaDivisor d) { return d == HaDivisor::TermCount ? "terms" : "weeks"; }

struct Field {
  std::string section;
  std::string key;
  std::function<bool(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <class Access>
Field field(std::string section, std::string key, Access acc) {
  return {std::move(section), std::move(key),
          [acc](RunConfig& c, const std::string& s) { return parse_value(s, acc(c)); },
          [acc](const RunConfig& c) { return format_value(acc(const_cast<RunConfig&>(c))); }};
}

#define HSTGCN_FIELD(sec, key, expr) field(sec, key, [](RunConfig& c) -> auto& { return expr; })

const std::vector<Field>& schema() {
  static const std::vector<Field> fields = {
      HSTGCN_FIELD("run", "seed", c.seed),

      HSTGCN_FIELD("scenario", "network", c.network),
      HSTGCN_FIELD("scenario", "segments", c.segments),
      HSTGCN_FIELD("scenario", "spacing_km", c.spacing_km),
      HSTGCN_FIELD("scenario", "slot_minutes", c.grid.slot_minutes),
      HSTGCN_FIELD("scenario", "day_start_minute", c.grid.day_start_minute),
      HSTGCN_FIELD("scenario", "slots_per_day", c.grid.slots_per_day),
      HSTGCN_FIELD("scenario", "days_per_week", c.grid.days_per_week),
      HSTGCN_FIELD("scenario", "train_weeks", c.grid.train_weeks),
      HSTGCN_FIELD("scenario", "test_weeks", c.grid.test_weeks),
      HSTGCN_FIELD("scenario", "background_rate", c.demand.background_rate),
      HSTGCN_FIELD("scenario", "commute_rate", c.demand.commute_rate),
      HSTGCN_FIELD("scenario", "weekend_commute", c.demand.weekend_commute),
      HSTGCN_FIELD("scenario", "day_jitter", c.demand.day_jitter),
      HSTGCN_FIELD("scenario", "surges_per_week", c.demand.surges_per_week),
      HSTGCN_FIELD("scenario", "surge_intensity_min", c.demand.surge_intensity_min),
      HSTGCN_FIELD("scenario", "surge_intensity_max", c.demand.surge_intensity_max),
      HSTGCN_FIELD("scenario", "surge_duration_min", c.demand.surge_duration_min),
      HSTGCN_FIELD("scenario", "surge_duration_max", c.demand.surge_duration_max),
      HSTGCN_FIELD("scenario", "surge_radius_km", c.demand.surge_radius_km),
      HSTGCN_FIELD("scenario", "surge_min_distance_km", c.demand.surge_min_distance_km),
      HSTGCN_FIELD("scenario", "p_nav", c.demand.p_nav),
      HSTGCN_FIELD("scenario", "v_min_kmh", c.sim.v_min_kmh),
      HSTGCN_FIELD("scenario", "speed_noise", c.sim.speed_noise),
      HSTGCN_FIELD("scenario", "follow_plan", c.sim.follow_plan),

      HSTGCN_FIELD("features", "history", c.history),
      HSTGCN_FIELD("features", "horizon", c.horizon),
      HSTGCN_FIELD("features", "ha_divisor", c.ha_divisor),

      HSTGCN_FIELD("adjacency", "sigma2", c.sigma2),
      HSTGCN_FIELD("adjacency", "epsilon", c.epsilon),

      HSTGCN_FIELD("model", "variant", c.variant),
      HSTGCN_FIELD("model", "chebyshev_order", c.chebyshev_order),
      HSTGCN_FIELD("model", "graph_channels", c.graph_channels),
      HSTGCN_FIELD("model", "transformer_channels", c.transformer_channels),

      HSTGCN_FIELD("train", "epochs", c.train.epochs),
      HSTGCN_FIELD("train", "batch", c.train.batch),
      HSTGCN_FIELD("train", "steps_per_epoch", c.train.steps_per_epoch),
      HSTGCN_FIELD("train", "patience", c.train.patience),
      HSTGCN_FIELD("train", "base_lr", c.train.base_lr),
      HSTGCN_FIELD("train", "decay", c.train.decay),
      HSTGCN_FIELD("train", "noise", c.train.noise),
      HSTGCN_FIELD("train", "noise_std", c.train.noise_std),
      HSTGCN_FIELD("train", "noise_threshold", c.train.noise_threshold),
      HSTGCN_FIELD("train", "clip_norm", c.train.clip_norm),
      HSTGCN_FIELD("train", "validation_stride", c.train.validation_stride),
      HSTGCN_FIELD("train", "replicas", c.replicas),

      HSTGCN_FIELD("eval", "high_volume_per_min", c.slices.high_volume_per_min),
      HSTGCN_FIELD("eval", "threshold_freeway_kmh", c.slices.threshold_kmh[0]),
      HSTGCN_FIELD("eval", "threshold_highway_kmh", c.slices.threshold_kmh[1]),
      HSTGCN_FIELD("eval", "threshold_expressway_kmh", c.slices.threshold_kmh[2]),
      HSTGCN_FIELD("eval", "threshold_major_kmh", c.slices.threshold_kmh[3]),
      HSTGCN_FIELD("eval", "nrc_fraction", c.slices.nrc_fraction),
      HSTGCN_FIELD("eval", "min_nrc_run", c.slices.min_nrc_run),
      HSTGCN_FIELD("eval", "extension", c.slices.extension),
      HSTGCN_FIELD("eval", "test_stride", c.test_stride),
  };
  return fields;
}

#undef HSTGCN_FIELD

const std::vector<std::string> kSections = {"run", "scenario", "features", "adjacency", "model", "train", "eval"};

}  // namespace

RunConfig::RunConfig() {
  // Laptop budget: ten short epochs get close to the validation plateau on the
  // default scenario.
  train.epochs = 10;
  train.steps_per_epoch = 200;
  train.validation_stride = 10;
  // Enough traffic on the 48-segment grid for daily congestion and NRC events.
  demand.background_rate = 480.0;
  demand.commute_rate = 1500.0;
}

RunConfig RunConfig::from_ini(const std::string& text) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  try {
    std::istringstream is(text);
    pt::read_ini(is, tree);
  } catch (const pt::ini_parser_error& e) {
    throw UsageError("config: " + std::string(e.message()) + " (line " + std::to_string(e.line()) + ")");
  }
  RunConfig c;
  for (const auto& [section, body] : tree) {
    if (std::find(kSections.begin(), kSections.end(), section) == kSections.end()) {
      if (body.empty()) throw UsageError("config key '" + section + "' must sit inside a section");
      throw UsageError("unknown config section '" + section + "'");
    }
    for (const auto& [key, value] : body) {
      const auto& fields = schema();
      const auto it = std::find_if(fields.begin(), fields.end(),
                                   [&](const Field& f) { return f.section == section && f.key == key; });
      if (it == fields.end()) throw UsageError("unknown config key '" + section + "." + key + "'");
      const std::string v = value.get_value<std::string>();
      if (!it->set(c, v)) throw UsageError("invalid value '" + v + "' for config key '" + section + "." + key + "'");
    }
  }
  c.validate();
  return c;
}

RunConfig RunConfig::from_file(const fs::path& path) {
  std::string text;
  try {
    text = read_file(path);
  } catch (const std::runtime_error& e) {
    throw UsageError(std::string("config: ") + e.what());
  }
  return from_ini(text);
}

std::string RunConfig::section_text(const std::string& section) const {
  std::string out;
  for (const auto& f : schema())
    if (f.section == section) out += f.key + " = " + f.get(*this) + "\n";
  return out;
}

std::string RunConfig::to_ini() const {
  std::string out;
  for (const auto& s : kSections) out += "[" + s + "]\n" + section_text(s) + "\n";
  return out;
}

ArchitectureConfig RunConfig::architecture(Variant v) const {
  ArchitectureConfig a;
  a.variant = v;
  a.segments = segments;
  a.history = history;
  a.horizon = horizon;
  a.chebyshev_order = chebyshev_order;
  a.graph_channels = graph_channels;
  a.transformer_channels[0] = a.transformer_channels[1] = transformer_channels;
  return a;
}

void RunConfig::validate() const {
  try {
    grid.validate();
    if (grid.slot_minutes != 5) throw std::invalid_argument("slot length must be 5 minutes");
    if (segments == 0) throw std::invalid_argument("segments must be positive");
    if (history == 0 || horizon == 0) throw std::invalid_argument("history and horizon must be positive");
    if (!(sigma2 > 0.0) || epsilon < 0.0 || epsilon >= 1.0)
      throw std::invalid_argument("adjacency needs sigma2 > 0 and epsilon in [0, 1)");
    if (!(demand.p_nav > 0.0 && demand.p_nav <= 1.0)) throw std::invalid_argument("p_nav must lie in (0, 1]");
    if (replicas == 0 || test_stride == 0) throw std::invalid_argument("replicas and test_stride must be positive");
    train.validate();
    slices.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(std::string("config: ") + e.what());
  }
}

// ---- workspace plumbing ---------------------------------------------------

namespace {

using clk = std::chrono::steady_clock;

double seconds_since(clk::time_point t0) { return std::chrono::duration<double>(clk::now() - t0).count(); }

/// Creates dir, refusing a non-empty one unless force (which clears it).
void prepare_output(const fs::path& dir, bool force) {
  if (fs::exists(dir)) {
    if (!fs::is_directory(dir)) throw UsageError("output path '" + dir.string() + "' is not a directory");
    if (!fs::is_empty(dir)) {
      if (!force) throw UsageError("output directory '" + dir.string() + "' is not empty (use --force to overwrite)");
      fs::remove_all(dir);
    }
  }
  fs::create_directories(dir);
}

Json config_json(const RunConfig& c, std::initializer_list<const char*> sections) {
  Json j = Json::object();
  for (const char* s : sections) {
    Json sec = Json::object();
    std::istringstream is(c.section_text(s));
    std::string line;
    while (std::getline(is, line)) {
      const auto eq = line.find(" = ");
      sec[line.substr(0, eq)] = line.substr(eq + 3);
    }
    j[s] = sec;
  }
  return j;
}

Json grid_json(const TimeGrid& g) {
  return {{"slot_minutes", g.slot_minutes},   {"day_start_minute", g.day_start_minute},
          {"slots_per_day", g.slots_per_day}, {"days_per_week", g.days_per_week},
          {"train_weeks", g.train_weeks},     {"test_weeks", g.test_weeks},
          {"train_slots", g.train_slots()},   {"test_slots", g.test_slots()}};
}

TimeGrid grid_from_json(const Json& j) {
  TimeGrid g;
  g.slot_minutes = j.at("slot_minutes").get<int>();
  g.day_start_minute = j.at("day_start_minute").get<int>();
  g.slots_per_day = j.at("slots_per_day").get<std::size_t>();
  g.days_per_week = j.at("days_per_week").get<std::size_t>();
  g.train_weeks = j.at("train_weeks").get<std::size_t>();
  g.test_weeks = j.at("test_weeks").get<std::size_t>();
  return g;
}

bool same_grid(const TimeGrid& a, const TimeGrid& b) {
  return a.slot_minutes == b.slot_minutes && a.day_start_minute == b.day_start_minute &&
         a.slots_per_day == b.slots_per_day && a.days_per_week == b.days_per_week &&
         a.train_weeks == b.train_weeks && a.test_weeks == b.test_weeks;
}

/// Writes files (name -> bytes) plus manifest.json; returns the manifest hash.
std::string write_stage(const fs::path& dir, const std::vector<std::pair<std::string, std::string>>& files,
                        Json manifest) {
  Json hashes = Json::object();
  for (const auto& [name, bytes] : files) {
    write_file(dir / name, bytes);
    hashes[name] = sha256_hex(bytes);
  }
  manifest["files"] = hashes;
  const std::string text = manifest_to_text(manifest);
  write_file(dir / "manifest.json", text);
  return sha256_hex(text);
}

/// Reads a stage manifest and checks every listed file against its hash.
Json verify_stage(const fs::path& dir, const std::string& stage) {
  const fs::path mpath = dir / "manifest.json";
  if (!fs::exists(mpath))
    throw std::runtime_error("no " + stage + " manifest at '" + mpath.string() + "'; run the " + stage +
                             " stage first");
  Json m = read_manifest(mpath);
  if (m.value("stage", "") != stage)
    throw std::runtime_error("'" + mpath.string() + "' is not a " + stage + " manifest");
  for (const auto& [name, h] : m.at("files").items())
    if (sha256_file(dir / name) != h.get<std::string>())
      throw std::runtime_error(stage + " file '" + (dir / name).string() + "' does not match its manifest hash");
  return m;
}

std::string manifest_hash(const fs::path& dir) { return sha256_file(dir / "manifest.json"); }

struct Dataset {
  Json manifest;
  TimeGrid grid;
  RoadNetwork net;
  Tensor travel_time;
  Tensor volume;
};

Dataset load_dataset(const fs::path& ws, bool with_volume) {
  const fs::path dir = ws / "dataset";
  Dataset d;
  d.manifest = verify_stage(dir, "dataset");
  d.grid = grid_from_json(d.manifest.at("grid"));
  d.net = network_from_text(read_file(dir / "network.txt"));
  const std::size_t n = d.net.size(), S = d.grid.total_slots();
  if (d.manifest.at("segments").get<std::size_t>() != n)
    throw std::runtime_error("dataset manifest and network disagree on the segment count");
  d.travel_time = series_from_csv(read_file(dir / "travel_time.csv"), n, S);
  if (with_volume) d.volume = series_from_csv(read_file(dir / "volume.csv"), n, S);
  return d;
}

struct Features {
  Json manifest;
  std::string hash;
  FeatureBundle bundle;
};

Features load_features(const fs::path& ws) {
  const fs::path dir = ws / "features";
  Features f;
  f.manifest = verify_stage(dir, "features");
  f.hash = manifest_hash(dir);
  f.bundle = feature_bundle_from_bytes(read_file(dir / "features.bin"));
  return f;
}

SpectralOperator operator_for(const FeatureBundle& b, Variant v, std::size_t order) {
  return scaled_laplacian(uses_compound_adjacency(v) ? b.compound : b.dijkstra, order);
}

std::string trace_csv(const TrainingTrace& tr) {
  std::string o = "epoch,learning_rate,train_loss,val_loss,clipped_steps\n";
  for (const auto& e : tr.epochs)
    o += std::to_string(e.epoch) + "," + format_double(e.learning_rate) + "," + format_double(e.train_loss) + "," +
         format_double(e.val_loss) + "," + std::to_string(e.clipped_steps) + "\n";
  return o;
}

std::string slice_list(const std::vector<SliceKind>& slices) {
  std::string s;
  for (auto k : slices) s += (s.empty() ? "" : ",") + std::string(to_string(k));
  return s;
}

}  // namespace

// ---- commands -------------------------------------------------------------

void cmd_simulate(const CommandOptions& opt, std::ostream& log) {
  const RunConfig& c = opt.config;
  c.validate();
  const fs::path dir = opt.workspace / "dataset";
  prepare_output(dir, opt.force);
  const auto t0 = clk::now();

  const RoadNetwork net = generate_network(c.network, c.segments, c.seed, c.spacing_km);
  if (net.size() != c.segments)
    log << "note: " << format_value(c.network) << " network has " << net.size() << " segments (requested "
        << c.segments << ")\n";
  const DemandModel demand = generate_demand(net, c.grid, c.demand, c.seed);
  SimulationConfig sim = c.sim;
  sim.seed = c.seed;
  const SimulationResult r = propagate_traffic(net, demand, class_diagrams(net), c.grid, sim);
  r.log.validate(net.size());
  log << "simulated " << c.grid.total_slots() << " slots on " << net.size() << " segments: " << r.tally.spawned
      << " vehicles, " << r.log.records.size() << " navigation records (" << std::fixed << std::setprecision(1)
      << seconds_since(t0) << " s)\n"
      << std::defaultfloat;

  Json m;
  m["stage"] = "dataset";
  m["format_version"] = 1;
  m["seed"] = c.seed;
  m["segments"] = net.size();
  m["grid"] = grid_json(c.grid);
  m["config"] = config_json(c, {"scenario"});
  m["config_sha256"] = sha256_hex(c.section_text("run") + c.section_text("scenario"));
  m["stats"] = {{"vehicles", r.tally.spawned},
                {"arrived", r.tally.arrived},
                {"in_flight_at_end", r.tally.in_flight_at_end},
                {"conserved", r.tally.conserved},
                {"navigation_records", r.log.records.size()},
                {"navigation_hops", r.log.hop_count()},
                {"surges", demand.surges.size()}};
  m["parents"] = Json::object();
  write_stage(dir,
              {{"network.txt", network_to_text(net)},
               {"travel_time.csv", series_to_csv(r.travel_time)},
               {"volume.csv", series_to_csv(r.volume)},
               {"navlog.txt", navlog_to_text(r.log)}},
              m);
  log << "dataset written to " << dir.string() << "\n";
}

void cmd_features(const CommandOptions& opt, std::ostream& log) {
  const RunConfig& c = opt.config;
  c.validate();
  const fs::path dir = opt.workspace / "features";
  const auto t0 = clk::now();
  Dataset d = load_dataset(opt.workspace, false);
  if (!same_grid(d.grid, c.grid))
    throw std::runtime_error("grid mismatch: the dataset was simulated on a different calendar than the config");
  const std::size_t n = d.net.size();
  const NavigationLog navlog = navlog_from_text(read_file(opt.workspace / "dataset" / "navlog.txt"));
  navlog.validate(n);
  prepare_output(dir, opt.force);

  std::vector<double> free_flow(n);
  for (std::size_t s = 0; s < n; ++s) free_flow[s] = 3.6 / d.net.segments[s].free_flow_kmh;
  std::size_t missing = 0;
  for (double x : d.travel_time.data()) missing += std::isnan(x) ? 1 : 0;
  impute_travel_time(d.travel_time, d.grid, free_flow);

  FeatureBundle b;
  b.store = build_feature_store(navlog, d.travel_time, d.grid, c.history, c.horizon, c.ha_divisor);
  const std::size_t Str = d.grid.train_slots(), S = d.grid.total_slots();
  Tensor train_tt({n, Str});
  for (std::size_t s = 0; s < n; ++s)
    std::copy_n(d.travel_time.ptr() + s * S, Str, train_tt.ptr() + s * Str);
  const AdjacencySet adj = build_adjacency(d.net, train_tt, c.sigma2, c.epsilon);
  b.dijkstra = adj.dijkstra;
  b.compound = adj.compound;
  b.sigma2 = c.sigma2;
  b.epsilon = c.epsilon;

  std::uint64_t cube_total = 0;
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t t = 0; t < S; ++t) cube_total += b.store.cube.at(s, t, 0);
  log << "features: " << navlog.hop_count() << " planned hops, " << cube_total << " aggregated at lead 0, "
      << b.store.skipped_hops << " skipped (ETA outside the grid), " << missing << " imputed travel times\n";
  log << "channels: volume " << volume_channels(c.horizon) << ", travel time " << travel_time_channels(c.horizon)
      << "\n";

  Json m;
  m["stage"] = "features";
  m["format_version"] = kFeatureStoreVersion;
  m["segments"] = n;
  m["grid"] = grid_json(d.grid);
  m["history"] = c.history;
  m["horizon"] = c.horizon;
  m["volume_channels"] = volume_channels(c.horizon);
  m["travel_time_channels"] = travel_time_channels(c.horizon);
  m["config"] = config_json(c, {"features", "adjacency"});
  m["adjacency_sha256"] = {{"dijkstra", b.adjacency_hash(false)}, {"compound", b.adjacency_hash(true)}};
  m["diagnostics"] = {{"planned_hops", navlog.hop_count()},
                      {"lead0_total", cube_total},
                      {"skipped_hops", b.store.skipped_hops},
                      {"imputed_travel_times", missing}};
  m["parents"] = {{"dataset", manifest_hash(opt.workspace / "dataset")}};
  write_stage(dir, {{"features.bin", feature_bundle_to_bytes(b)}}, m);
  log << "features written to " << dir.string() << " (" << std::fixed << std::setprecision(1) << seconds_since(t0)
      << " s)\n"
      << std::defaultfloat;
}

void cmd_train(const CommandOptions& opt, std::ostream& log) {
  const RunConfig& c = opt.config;
  c.validate();
  const Variant v = opt.variant.value_or(c.variant);
  const fs::path dir = opt.workspace / "models" / std::string(to_string(v));
  Features f = load_features(opt.workspace);
  const FeatureStore& store = f.bundle.store;
  ArchitectureConfig arch = c.architecture(v);
  if (store.segments() != arch.segments)
    throw std::runtime_error("dimension mismatch: features have n=" + std::to_string(store.segments()) +
                             " segments, the config asks for " + std::to_string(arch.segments));
  if (store.history != arch.history || store.horizon != arch.horizon)
    throw std::runtime_error("dimension mismatch: features were built with P=" + std::to_string(store.history) +
                             ", F=" + std::to_string(store.horizon));
  prepare_output(dir, opt.force);
  const SpectralOperator op = operator_for(f.bundle, v, c.chebyshev_order);
  const std::string adj_hash = f.bundle.adjacency_hash(uses_compound_adjacency(v));

  std::vector<std::pair<std::string, std::string>> files;
  Json replicas = Json::array();
  for (std::size_t k = 0; k < c.replicas; ++k) {
    const auto t0 = clk::now();
    TrainConfig tc = c.train;
    tc.seed = derive_seed(c.seed, "train", k);
    const FitResult r = fit(store, op, arch, tc);
    Checkpoint ck;
    ck.arch = arch;
    ck.normalizer = store.normalizer;
    ck.params = r.params;
    ck.adjacency_hash = adj_hash;
    ck.meta["features_manifest"] = f.hash;
    ck.meta["replica"] = std::to_string(k);
    ck.meta["seed"] = std::to_string(tc.seed);
    ck.meta["best_epoch"] = std::to_string(r.trace.best_epoch);
    const std::string name = "seed" + std::to_string(k);
    const fs::path tmp = dir / (name + ".ckpt.tmp");
    save_checkpoint(ck, tmp.string());
    files.push_back({name + ".ckpt", read_file(tmp)});
    fs::remove(tmp);
    files.push_back({name + "-trace.csv", trace_csv(r.trace)});
    replicas.push_back({{"replica", k},
                        {"seed", tc.seed},
                        {"best_epoch", r.trace.best_epoch},
                        {"best_val_loss", format_double(r.trace.best_val_loss)},
                        {"epochs_run", r.trace.epochs.size()},
                        {"steps", r.trace.step_losses.size()}});
    log << display_name(v) << " replica " << k << ": best epoch " << r.trace.best_epoch << ", validation L1 "
        << std::setprecision(5) << r.trace.best_val_loss << " s/m (" << std::fixed << std::setprecision(1)
        << seconds_since(t0) << " s)\n"
        << std::defaultfloat;
  }

  Json m;
  m["stage"] = "checkpoint";
  m["format_version"] = kCheckpointVersion;
  m["variant"] = std::string(to_string(v));
  m["segments"] = arch.segments;
  m["adjacency_sha256"] = adj_hash;
  m["config"] = config_json(c, {"run", "model", "train"});
  m["replicas"] = replicas;
  m["parents"] = {{"features", f.hash}};
  write_stage(dir, files, m);
  log << "checkpoints written to " << dir.string() << "\n";
}

void cmd_eval(const CommandOptions& opt, std::ostream& log) {
  const RunConfig& c = opt.config;
  c.validate();
  const auto t0 = clk::now();
  Features f = load_features(opt.workspace);
  const FeatureStore& store = f.bundle.store;
  const Dataset d = load_dataset(opt.workspace, true);
  if (d.net.size() != store.segments() || !same_grid(d.grid, store.grid))
    throw std::runtime_error("dimension mismatch between dataset and features");
  if (f.manifest.at("parents").at("dataset").get<std::string>() != manifest_hash(opt.workspace / "dataset"))
    log << "warning: features were built from a different dataset than the one in the workspace\n";

  // Checkpoint directories, in roster order.
  std::vector<Variant> variants;
  for (Variant v : {Variant::HStgcn, Variant::HStgcnOnes, Variant::StgcnIm, Variant::Stgcn}) {
    if (opt.variant && *opt.variant != v) continue;
    if (fs::exists(opt.workspace / "models" / std::string(to_string(v)) / "manifest.json")) variants.push_back(v);
  }
  if (opt.variant && variants.empty())
    throw std::runtime_error("no trained checkpoints for variant " + std::string(to_string(*opt.variant)));

  const std::string tag = opt.variant ? std::string(to_string(*opt.variant)) : "all";
  const fs::path dir = opt.workspace / "eval" / tag;
  prepare_output(dir, opt.force);

  const SliceLabels labels = classify_slices(store.travel_time, store.ha_travel_time, d.volume, d.net, store.grid,
                                             c.slices);
  const auto all_anchors = window_sampler(store.grid, store.history, store.horizon, SampleMode::Test, 0);
  std::vector<std::size_t> anchors;
  for (std::size_t i = 0; i < all_anchors.size(); i += c.test_stride) anchors.push_back(all_anchors[i]);
  const std::size_t test_begin = store.grid.train_slots(), test_end = store.grid.total_slots();
  EvalReport report;
  const Forecast ha = ha_baseline(store.ha_travel_time, anchors, store.horizon);
  std::vector<SliceKind> slices;
  for (auto k : opt.slices) {
    log << "slice " << to_string(k) << ": " << labels.count(k, test_begin, test_end) << " test cells\n";
    std::vector<Metrics> m;
    try {
      m = evaluate_forecast(ha, store.travel_time, labels, k);
    } catch (const std::invalid_argument&) {
      log << "warning: slice " << to_string(k) << " has no forecast targets in the test span; skipped\n";
      continue;
    }
    report.add(k, "HA", m);
    slices.push_back(k);
  }

  std::string seeds_csv = "variant,replica,slice,MAE,MAPE,RMSE\n";
  Json checkpoints = Json::object();
  for (Variant v : variants) {
    const fs::path mdir = opt.workspace / "models" / std::string(to_string(v));
    const Json mm = verify_stage(mdir, "checkpoint");
    checkpoints[std::string(to_string(v))] = manifest_hash(mdir);
    if (mm.at("parents").at("features").get<std::string>() != f.hash)
      log << "warning: " << display_name(v) << " was trained on a different feature store\n";
    const SpectralOperator op = operator_for(f.bundle, v, c.chebyshev_order);
    const std::string adj_hash = f.bundle.adjacency_hash(uses_compound_adjacency(v));

    // replica -> slice -> per-step metrics
    std::vector<std::map<SliceKind, std::vector<Metrics>>> per_replica;
    for (const auto& rep : mm.at("replicas")) {
      const std::size_t k = rep.at("replica").get<std::size_t>();
      const fs::path path = mdir / ("seed" + std::to_string(k) + ".ckpt");
      Checkpoint ck;
      try {
        ck = load_checkpoint(path.string(), store.segments());
      } catch (const std::invalid_argument& e) {
        throw std::runtime_error(std::string("dimension mismatch: ") + e.what());
      }
      if (ck.arch.horizon != store.horizon || ck.arch.history != store.history)
        throw std::runtime_error("dimension mismatch: checkpoint '" + path.string() + "' uses P=" +
                                 std::to_string(ck.arch.history) + ", F=" + std::to_string(ck.arch.horizon));
      if (ck.adjacency_hash != adj_hash)
        log << "warning: adjacency hash of '" << path.string() << "' differs from the feature store's\n";
      const SpectralOperator ck_op = ck.arch.chebyshev_order == op.chebyshev_order
                                         ? op
                                         : operator_for(f.bundle, v, ck.arch.chebyshev_order);
      FeatureStore view = store;  // the checkpoint carries its own normalizer
      view.normalizer = ck.normalizer;
      const Forecast fc = predict(view, ck_op, ck.arch, ck.params, anchors);
      std::map<SliceKind, std::vector<Metrics>> by_slice;
      for (auto sk : slices) {
        by_slice[sk] = evaluate_forecast(fc, store.travel_time, labels, sk);
        const Metrics& m0 = by_slice[sk][0];
        seeds_csv += std::string(display_name(v)) + "," + std::to_string(k) + "," + std::string(to_string(sk)) + "," +
                     format_double(m0.mae) + "," + format_double(m0.mape) + "," + format_double(m0.rmse) + "\n";
      }
      per_replica.push_back(std::move(by_slice));
    }
    if (per_replica.empty()) throw std::runtime_error("checkpoint manifest for " + std::string(to_string(v)) + " lists no replicas");

    // Mean over replicas, plus the replica spread of the all-step MAE.
    const double R = double(per_replica.size());
    for (auto sk : slices) {
      const std::size_t H = per_replica[0].at(sk).size();
      std::vector<Metrics> mean(H);
      for (std::size_t h = 0; h < H; ++h) {
        for (const auto& pr : per_replica) {
          const Metrics& m = pr.at(sk)[h];
          mean[h].mae += m.mae / R;
          mean[h].mape += m.mape / R;
          mean[h].rmse += m.rmse / R;
          mean[h].count = m.count;
          mean[h].mape_count = m.mape_count;
        }
      }
      const std::string name(display_name(v));
      report.add(sk, name, mean);
      double ss = 0.0;
      for (const auto& pr : per_replica) ss += std::pow(pr.at(sk)[0].mae - mean[0].mae, 2);
      const double sd = per_replica.size() > 1 ? std::sqrt(ss / (R - 1.0)) : 0.0;
      report.rows.push_back({std::string(to_string(sk)), name, 0, "MAE_SD", sd, per_replica.size()});
    }
    log << display_name(v) << ": evaluated " << per_replica.size() << " replicas\n";
  }

  std::ostringstream summary;
  summary << std::left << std::setw(12) << "variant";
  for (auto k : slices) summary << std::setw(12) << ("MAE " + std::string(to_string(k)));
  summary << "\n";
  std::vector<std::string> names = {"HA"};
  for (Variant v : variants) names.emplace_back(display_name(v));
  for (const auto& name : names) {
    summary << std::setw(12) << name;
    for (auto k : slices) summary << std::setw(12) << std::setprecision(5) << report.value(std::string(to_string(k)), name, 0, "MAE");
    summary << "\n";
  }
  log << summary.str();

  Json m;
  m["stage"] = "eval";
  m["variants"] = Json::array();
  for (Variant v : variants) m["variants"].push_back(std::string(to_string(v)));
  m["slices"] = slice_list(slices);
  m["test_anchors"] = anchors.size();
  m["config"] = config_json(c, {"eval"});
  m["parents"] = {{"features", f.hash}, {"dataset", manifest_hash(opt.workspace / "dataset")}, {"checkpoints", checkpoints}};
  write_stage(dir, {{"report.csv", report.to_csv()}, {"replicas.csv", seeds_csv}}, m);
  log << "evaluation written to " << dir.string() << " (" << std::fixed << std::setprecision(1) << seconds_since(t0)
      << " s)\n"
      << std::defaultfloat;
}

void cmd_report(const CommandOptions& opt, std::ostream& log) {
  const fs::path eval_root = opt.workspace / "eval";
  if (!fs::is_directory(eval_root)) throw std::runtime_error("no evaluations under '" + eval_root.string() + "'");
  std::vector<fs::path> dirs;
  for (const auto& e : fs::directory_iterator(eval_root))
    if (e.is_directory()) dirs.push_back(e.path());
  std::sort(dirs.begin(), dirs.end());
  if (dirs.empty()) throw std::runtime_error("no evaluations under '" + eval_root.string() + "'");

  std::vector<EvalReport> parts;
  Json parents = Json::object();
  Json checkpoints = Json::object();
  for (const auto& d : dirs) {
    const Json m = verify_stage(d, "eval");
    parents[d.filename().string()] = manifest_hash(d);
    for (const auto& [k, h] : m.at("parents").at("checkpoints").items()) checkpoints[k] = h;
    parts.push_back(EvalReport::from_csv(read_file(d / "report.csv")));
  }
  const EvalReport merged = merge_reports(parts);

  const fs::path dir = opt.workspace / "report";
  prepare_output(dir, opt.force);
  std::vector<std::pair<std::string, std::string>> files = {{"report.csv", merged.to_csv()}};
  std::vector<std::string> present;
  for (auto k : opt.slices) {
    const std::string s(to_string(k));
    if (std::any_of(merged.rows.begin(), merged.rows.end(), [&](const ReportRow& r) { return r.slice == s; }))
      present.push_back(s);
  }
  // One figure: the last requested slice present (NRC when all are).
  if (!present.empty()) files.push_back({"report.svg", merged.to_svg(present.back())});

  Json m;
  m["stage"] = "report";
  m["slices"] = present;
  m["parents"] = {{"evaluations", parents}, {"checkpoints", checkpoints}};
  write_stage(dir, files, m);
  log << "merged " << parts.size() << " evaluation(s) into " << (dir / "report.csv").string() << "\n";
}

// ---- command line -----------------------------------------------------------

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Traffic travel-time forecasting pipeline: simulate, features, train, eval, report"};
  app.require_subcommand(1, 1);

  std::string config_path, out_dir, variant_s, slice_s = "all";
  std::uint64_t seed = 0;
  std::vector<CLI::Option*> seed_opts;
  bool force = false;
  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "INI run configuration")->check(CLI::ExistingFile);
    seed_opts.push_back(sub->add_option("--seed", seed, "root seed (overrides [run] seed)"));
    sub->add_option("--out", out_dir, "workspace directory")->required();
    sub->add_flag("--force", force, "overwrite a non-empty stage directory");
  };
  const std::vector<std::string> variant_names = {"hstgcn", "hstgcn1", "stgcn-im", "stgcn"};
  const std::vector<std::string> slice_names = {"full", "c", "nrc", "all"};
  auto* sim = app.add_subcommand("simulate", "generate network, demand and traffic; write the dataset");
  auto* feat = app.add_subcommand("features", "aggregate routes and build the feature store");
  auto* train = app.add_subcommand("train", "train one model variant");
  auto* eval = app.add_subcommand("eval", "evaluate trained variants and the HA baseline");
  auto* report = app.add_subcommand("report", "merge evaluations into report.csv and report.svg");
  for (auto* s : {sim, feat, train, eval, report}) common(s);
  for (auto* s : {train, eval})
    s->add_option("--variant", variant_s, "model variant")->check(CLI::IsMember(variant_names));
  for (auto* s : {eval, report})
    s->add_option("--slice", slice_s, "evaluation slice")->check(CLI::IsMember(slice_names));

  std::vector<std::string> rev(args.rbegin(), args.rend());
  if (!rev.empty()) rev.pop_back();  // program name
  try {
    app.parse(rev);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }

  try {
    CommandOptions opt;
    opt.workspace = out_dir;
    opt.force = force;
    opt.config = config_path.empty() ? RunConfig{} : RunConfig::from_file(config_path);
    for (auto* o : seed_opts)
      if (o->count() > 0) opt.config.seed = seed;
    if (!variant_s.empty()) opt.variant = parse_variant(variant_s);
    if (slice_s != "all") opt.slices = {parse_slice_kind(slice_s)};

    if (sim->parsed()) cmd_simulate(opt, out);
    else if (feat->parsed()) cmd_features(opt, out);
    else if (train->parsed()) cmd_train(opt, out);
    else if (eval->parsed()) cmd_eval(opt, out);
    else cmd_report(opt, out);
    return 0;
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace hstgcn
