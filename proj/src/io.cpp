#include "hstgcn/io.hpp"

#include <bit>
#include <charconv>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>
#include <stdexcept>

#include <openssl/evp.h>

namespace hstgcn {

namespace {

struct Sha256 {
  EVP_MD_CTX* ctx;
  Sha256() : ctx(EVP_MD_CTX_new()) {
    if (!ctx || EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr) != 1) throw std::runtime_error("SHA-256 init failed");
  }
  ~Sha256() { EVP_MD_CTX_free(ctx); }
  Sha256(const Sha256&) = delete;
  Sha256& operator=(const Sha256&) = delete;
  void update(const void* p, std::size_t n) {
    if (EVP_DigestUpdate(ctx, p, n) != 1) throw std::runtime_error("SHA-256 update failed");
  }
  std::string hex() {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_DigestFinal_ex(ctx, md, &len) != 1) throw std::runtime_error("SHA-256 final failed");
    static const char* digits = "0123456789abcdef";
    std::string out(2 * len, '0');
    for (unsigned i = 0; i < len; ++i) {
      out[2 * i] = digits[md[i] >> 4];
      out[2 * i + 1] = digits[md[i] & 15];
    }
    return out;
  }
};

void append_double(std::string& out, double x) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, x);
  out.append(buf, r.ptr);
}

template <class T>
void append_int(std::string& out, T x) {
  char buf[24];
  const auto r = std::to_chars(buf, buf + sizeof buf, x);
  out.append(buf, r.ptr);
}

// Cursor over a text buffer with from_chars-based field parsing.
struct Scanner {
  std::string_view s;
  std::size_t pos = 0;
  std::size_t line = 1;
  std::string what;

  [[noreturn]] void fail(const std::string& msg) const {
    throw std::runtime_error(what + " line " + std::to_string(line) + ": " + msg);
  }
  bool at_end() const { return pos >= s.size(); }
  void skip_spaces() {
    while (pos < s.size() && (s[pos] == ' ' || s[pos] == '\t' || s[pos] == '\r')) ++pos;
  }
  bool at_eol() {
    skip_spaces();
    return pos >= s.size() || s[pos] == '\n';
  }
  void end_line() {
    if (!at_eol()) fail("trailing characters");
    if (pos < s.size()) ++pos;
    ++line;
  }
  std::string_view rest_of_line() {
    const auto e = s.find('\n', pos);
    const auto out = s.substr(pos, e == std::string_view::npos ? s.size() - pos : e - pos);
    pos = e == std::string_view::npos ? s.size() : e + 1;
    ++line;
    return out;
  }
  std::string_view word() {
    skip_spaces();
    const auto b = pos;
    while (pos < s.size() && s[pos] != ' ' && s[pos] != '\t' && s[pos] != '\n' && s[pos] != '\r') ++pos;
    if (b == pos) fail("missing field");
    return s.substr(b, pos - b);
  }
  template <class T>
  T number(char stop = 0) {
    skip_spaces();
    T v{};
    const char* b = s.data() + pos;
    const char* e = s.data() + s.size();
    const auto r = std::from_chars(b, e, v);
    if (r.ec != std::errc()) fail("bad number");
    pos = static_cast<std::size_t>(r.ptr - s.data());
    if (stop) {
      if (pos >= s.size() || s[pos] != stop) fail(std::string("expected '") + stop + "'");
      ++pos;
    }
    return v;
  }
  void expect(std::string_view w) {
    const auto got = word();
    if (got != w) fail("expected '" + std::string(w) + "', got '" + std::string(got) + "'");
  }
};

void put_u64(std::string& out, std::uint64_t x) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((x >> (8 * i)) & 0xff));
}
std::uint64_t get_u64(const unsigned char* p) {
  std::uint64_t x = 0;
  for (int i = 0; i < 8; ++i) x |= std::uint64_t(p[i]) << (8 * i);
  return x;
}

}  // namespace

std::string sha256_hex(std::string_view bytes) {
  Sha256 h;
  h.update(bytes.data(), bytes.size());
  return h.hex();
}

std::string sha256_file(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open '" + path.string() + "'");
  Sha256 h;
  std::vector<char> buf(1 << 20);
  while (is) {
    is.read(buf.data(), std::streamsize(buf.size()));
    h.update(buf.data(), static_cast<std::size_t>(is.gcount()));
  }
  return h.hex();
}

std::string read_file(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open '" + path.string() + "'");
  std::string out;
  is.seekg(0, std::ios::end);
  out.resize(static_cast<std::size_t>(is.tellg()));
  is.seekg(0);
  is.read(out.data(), std::streamsize(out.size()));
  if (!is) throw std::runtime_error("read of '" + path.string() + "' failed");
  return out;
}

void write_file(const fs::path& path, std::string_view bytes) {
  const fs::path tmp = path.string() + ".part";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open '" + tmp.string() + "' for writing");
    os.write(bytes.data(), std::streamsize(bytes.size()));
    os.flush();
    if (!os) throw std::runtime_error("write to '" + tmp.string() + "' failed");
  }
  fs::rename(tmp, path);
}

std::string format_double(double x) {
  std::string s;
  append_double(s, x);
  return s;
}

std::string network_to_text(const RoadNetwork& net) {
  net.validate();
  std::string o = "hstgcn-network 1\nnodes ";
  append_int(o, net.nodes.size());
  o += '\n';
  for (std::size_t i = 0; i < net.nodes.size(); ++i) {
    append_int(o, i);
    o += ' ';
    append_double(o, net.nodes[i].x_km);
    o += ' ';
    append_double(o, net.nodes[i].y_km);
    o += '\n';
  }
  o += "segments ";
  append_int(o, net.size());
  o += "\n# id from to length_m class free_flow_kmh\n";
  for (const auto& s : net.segments) {
    append_int(o, s.id);
    o += ' ';
    append_int(o, s.from_node);
    o += ' ';
    append_int(o, s.to_node);
    o += ' ';
    append_double(o, s.length_m);
    o += ' ';
    o += to_string(s.road_class);
    o += ' ';
    append_double(o, s.free_flow_kmh);
    o += '\n';
  }
  o += "successors\n";
  for (std::size_t i = 0; i < net.size(); ++i) {
    append_int(o, i);
    o += ':';
    for (auto j : net.successors[i]) {
      o += ' ';
      append_int(o, j);
    }
    o += '\n';
  }
  o += "end\n";
  return o;
}

RoadNetwork network_from_text(const std::string& text) {
  Scanner sc{text, 0, 1, "network"};
  auto next_line = [&] {
    // comments only appear on their own line
    while (!sc.at_end() && sc.s[sc.pos] == '#') sc.rest_of_line();
  };
  sc.expect("hstgcn-network");
  if (sc.number<int>() != 1) sc.fail("unsupported network version");
  sc.end_line();
  RoadNetwork net;
  next_line();
  sc.expect("nodes");
  net.nodes.resize(sc.number<std::size_t>());
  sc.end_line();
  for (std::size_t i = 0; i < net.nodes.size(); ++i) {
    next_line();
    if (sc.number<std::size_t>() != i) sc.fail("node ids must be dense and ordered");
    net.nodes[i].x_km = sc.number<double>();
    net.nodes[i].y_km = sc.number<double>();
    sc.end_line();
  }
  next_line();
  sc.expect("segments");
  net.segments.resize(sc.number<std::size_t>());
  sc.end_line();
  for (std::size_t i = 0; i < net.segments.size(); ++i) {
    next_line();
    auto& s = net.segments[i];
    s.id = sc.number<std::size_t>();
    if (s.id != i) sc.fail("segment ids must be dense and ordered");
    s.from_node = sc.number<std::size_t>();
    s.to_node = sc.number<std::size_t>();
    s.length_m = sc.number<double>();
    try {
      s.road_class = parse_road_class(sc.word());
    } catch (const std::invalid_argument& e) {
      sc.fail(e.what());
    }
    s.free_flow_kmh = sc.number<double>();
    sc.end_line();
  }
  next_line();
  sc.expect("successors");
  sc.end_line();
  net.successors.resize(net.segments.size());
  for (std::size_t i = 0; i < net.segments.size(); ++i) {
    next_line();
    if (sc.number<std::size_t>(':') != i) sc.fail("successor lists must be ordered");
    while (!sc.at_eol()) net.successors[i].push_back(sc.number<std::size_t>());
    sc.end_line();
  }
  next_line();
  sc.expect("end");
  try {
    net.validate();
  } catch (const std::invalid_argument& e) {
    throw std::runtime_error(std::string("network: ") + e.what());
  }
  return net;
}

std::string series_to_csv(const Tensor& series) {
  if (series.rank() != 2) throw std::invalid_argument("series must be n x S");
  const std::size_t n = series.dim(0), S = series.dim(1);
  std::string o = "segment,slot,value\n";
  o.reserve(n * S * 20);
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t t = 0; t < S; ++t) {
      append_int(o, s);
      o += ',';
      append_int(o, t);
      o += ',';
      append_double(o, series[s * S + t]);
      o += '\n';
    }
  return o;
}

Tensor series_from_csv(const std::string& text, std::size_t segments, std::size_t slots) {
  Scanner sc{text, 0, 1, "series"};
  if (sc.rest_of_line() != "segment,slot,value") sc.fail("expected header 'segment,slot,value'");
  Tensor out({segments, slots}, 0.0);
  std::vector<std::uint8_t> seen(segments * slots, 0);
  std::size_t filled = 0;
  while (!sc.at_end()) {
    if (sc.at_eol()) {
      sc.end_line();
      continue;
    }
    const auto s = sc.number<std::size_t>(',');
    const auto t = sc.number<std::size_t>(',');
    double v = 0.0;
    if (text.compare(sc.pos, 3, "nan") == 0) {
      v = std::numeric_limits<double>::quiet_NaN();
      sc.pos += 3;
    } else {
      v = sc.number<double>();
    }
    if (s >= segments || t >= slots) sc.fail("cell (" + std::to_string(s) + "," + std::to_string(t) + ") outside the grid");
    if (seen[s * slots + t]) sc.fail("duplicate cell (" + std::to_string(s) + "," + std::to_string(t) + ")");
    seen[s * slots + t] = 1;
    out[s * slots + t] = v;
    ++filled;
    sc.end_line();
  }
  if (filled != segments * slots)
    throw std::runtime_error("series: " + std::to_string(segments * slots - filled) + " cells missing");
  return out;
}

std::string navlog_to_text(const NavigationLog& log) {
  std::string o = "# route_id launch_slot segment:arrival_slot ...\n";
  o.reserve(log.records.size() * 64);
  for (const auto& r : log.records) {
    append_int(o, r.route_id);
    o += ' ';
    append_int(o, r.launch_slot);
    for (const auto& h : r.hops) {
      o += ' ';
      append_int(o, h.segment);
      o += ':';
      append_int(o, h.slot);
    }
    o += '\n';
  }
  return o;
}

NavigationLog navlog_from_text(const std::string& text) {
  Scanner sc{text, 0, 1, "navlog"};
  NavigationLog log;
  while (!sc.at_end()) {
    if (sc.s[sc.pos] == '#') {
      sc.rest_of_line();
      continue;
    }
    if (sc.at_eol()) {
      sc.end_line();
      continue;
    }
    NavigationRecord r;
    r.route_id = sc.number<std::uint64_t>();
    r.launch_slot = sc.number<std::int64_t>();
    while (!sc.at_eol()) {
      NavigationHop h;
      h.segment = sc.number<std::size_t>(':');
      h.slot = sc.number<std::int64_t>();
      r.hops.push_back(h);
    }
    if (r.hops.empty()) sc.fail("record without hops");
    log.records.push_back(std::move(r));
    sc.end_line();
  }
  return log;
}

std::string tensor_hash(const Tensor& t) {
  Sha256 h;
  for (auto d : t.shape()) {
    const std::uint64_t x = d;
    h.update(&x, sizeof x);
  }
  h.update(t.ptr(), t.size() * sizeof(double));
  return h.hex();
}

std::string FeatureBundle::adjacency_hash(bool compound_matrix) const {
  return tensor_hash(compound_matrix ? compound : dijkstra);
}

namespace {

void put_tensor(std::string& blob, const Tensor& t) {
  for (double x : t.data()) put_u64(blob, std::bit_cast<std::uint64_t>(x));
}

}  // namespace

std::string feature_bundle_to_bytes(const FeatureBundle& b) {
  const auto& fs = b.store;
  const auto& g = fs.grid;
  const std::size_t n = fs.segments(), S = g.total_slots();
  if (fs.travel_time.shape() != Shape{n, S} || fs.cube.segments() != n || fs.cube.slots() != S ||
      fs.cube.horizon() != fs.horizon || b.compound.shape() != Shape{n, n} || b.dijkstra.shape() != Shape{n, n})
    throw std::invalid_argument("feature bundle shapes are inconsistent");
  std::ostringstream m;
  m << "hstgcn-features " << kFeatureStoreVersion << '\n';
  m << "segments " << n << '\n';
  m << "grid " << g.slot_minutes << ' ' << g.day_start_minute << ' ' << g.slots_per_day << ' ' << g.days_per_week << ' '
    << g.train_weeks << ' ' << g.test_weeks << '\n';
  m << "history " << fs.history << '\n';
  m << "horizon " << fs.horizon << '\n';
  m << "volume_channels " << volume_channels(fs.horizon) << '\n';
  m << "travel_time_channels " << travel_time_channels(fs.horizon) << '\n';
  m << "skipped_hops " << fs.skipped_hops << '\n';
  m << "sigma2 " << format_double(b.sigma2) << '\n';
  m << "epsilon " << format_double(b.epsilon) << '\n';
  m << "normalizer " << fs.normalizer.mean.size();
  for (std::size_t c = 0; c < fs.normalizer.mean.size(); ++c)
    m << ' ' << format_double(fs.normalizer.mean[c]) << ' ' << format_double(fs.normalizer.std[c]);
  m << "\narrays cube:u32 travel_time:f64 ha_volume:f64 ha_travel_time:f64 dijkstra:f64 compound:f64\nend\n";

  std::string blob = m.str();
  blob.reserve(blob.size() + fs.cube.raw().size() * 4 + 3 * n * S * 8 + 2 * n * n * 8);
  for (auto c : fs.cube.raw())
    for (int i = 0; i < 4; ++i) blob.push_back(static_cast<char>((c >> (8 * i)) & 0xff));
  put_tensor(blob, fs.travel_time);
  put_tensor(blob, fs.ha_volume);
  put_tensor(blob, fs.ha_travel_time);
  put_tensor(blob, b.dijkstra);
  put_tensor(blob, b.compound);
  return blob;
}

FeatureBundle feature_bundle_from_bytes(const std::string& bytes) {
  const auto end_pos = bytes.find("\nend\n");
  if (end_pos == std::string::npos) throw std::runtime_error("feature store is corrupt: no header terminator");
  const std::string head = bytes.substr(0, end_pos + 1);
  Scanner sc{head, 0, 1, "feature store"};
  sc.expect("hstgcn-features");
  const int version = sc.number<int>();
  if (version != kFeatureStoreVersion)
    throw std::runtime_error("feature store version " + std::to_string(version) + " unsupported (expected " +
                             std::to_string(kFeatureStoreVersion) + ")");
  sc.end_line();
  FeatureBundle b;
  auto& fs = b.store;
  auto& g = fs.grid;
  sc.expect("segments");
  const auto n = sc.number<std::size_t>();
  sc.end_line();
  sc.expect("grid");
  g.slot_minutes = sc.number<int>();
  g.day_start_minute = sc.number<int>();
  g.slots_per_day = sc.number<std::size_t>();
  g.days_per_week = sc.number<std::size_t>();
  g.train_weeks = sc.number<std::size_t>();
  g.test_weeks = sc.number<std::size_t>();
  sc.end_line();
  g.validate();
  sc.expect("history");
  fs.history = sc.number<std::size_t>();
  sc.end_line();
  sc.expect("horizon");
  fs.horizon = sc.number<std::size_t>();
  sc.end_line();
  sc.expect("volume_channels");
  if (sc.number<std::size_t>() != volume_channels(fs.horizon)) sc.fail("volume channel count disagrees with horizon");
  sc.end_line();
  sc.expect("travel_time_channels");
  if (sc.number<std::size_t>() != travel_time_channels(fs.horizon))
    sc.fail("travel-time channel count disagrees with horizon");
  sc.end_line();
  sc.expect("skipped_hops");
  fs.skipped_hops = sc.number<std::size_t>();
  sc.end_line();
  sc.expect("sigma2");
  b.sigma2 = sc.number<double>();
  sc.end_line();
  sc.expect("epsilon");
  b.epsilon = sc.number<double>();
  sc.end_line();
  sc.expect("normalizer");
  const auto nc = sc.number<std::size_t>();
  for (std::size_t c = 0; c < nc; ++c) {
    fs.normalizer.mean.push_back(sc.number<double>());
    fs.normalizer.std.push_back(sc.number<double>());
  }
  sc.end_line();
  sc.expect("arrays");
  sc.rest_of_line();

  const std::size_t S = g.total_slots();
  const std::size_t cube_n = n * S * (fs.horizon + 1);
  const std::size_t need = cube_n * 4 + (3 * n * S + 2 * n * n) * 8;
  const std::size_t off0 = end_pos + 5;
  if (bytes.size() - off0 != need)
    throw std::runtime_error("feature store is corrupt: expected " + std::to_string(need) + " data bytes, found " +
                             std::to_string(bytes.size() - off0));
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data() + off0);
  fs.cube = VolumeCube(n, S, fs.horizon);
  auto raw = fs.cube.raw();
  for (std::size_t i = 0; i < cube_n; ++i, p += 4)
    raw[i] = std::uint32_t(p[0]) | std::uint32_t(p[1]) << 8 | std::uint32_t(p[2]) << 16 | std::uint32_t(p[3]) << 24;
  auto take = [&](Shape shape) {
    Tensor t(shape);
    for (auto& x : t.data()) {
      x = std::bit_cast<double>(get_u64(p));
      p += 8;
    }
    return t;
  };
  fs.travel_time = take({n, S});
  fs.ha_volume = take({n, S});
  fs.ha_travel_time = take({n, S});
  b.dijkstra = take({n, n});
  b.compound = take({n, n});
  return b;
}

std::string manifest_to_text(const Json& m) { return m.dump(2) + "\n"; }

Json read_manifest(const fs::path& path) {
  try {
    return Json::parse(read_file(path));
  } catch (const Json::exception& e) {
    throw std::runtime_error("manifest '" + path.string() + "' is not valid JSON: " + e.what());
  }
}

}  // namespace hstgcn
