#include "hstgcn/trainer.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>

#include "hstgcn/adam.hpp"
#include "hstgcn/rng.hpp"

namespace hstgcn {

double l1_loss(const Tensor& pred, const Tensor& truth) {
  if (pred.shape() != truth.shape())
    throw std::invalid_argument("l1_loss shapes differ: " + shape_str(pred.shape()) + " vs " + shape_str(truth.shape()));
  double s = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (!std::isfinite(pred[i])) throw std::invalid_argument("non-finite prediction at index " + std::to_string(i));
    s += std::abs(pred[i] - truth[i]);
  }
  return s / double(pred.size());
}

void TrainConfig::validate() const {
  if (epochs == 0 || batch == 0 || patience == 0 || validation_stride == 0)
    throw std::invalid_argument("epochs, batch, patience and validation stride must be positive");
  if (!(base_lr > 0.0) || !(decay > 0.0)) throw std::invalid_argument("learning rate and decay must be positive");
  if (noise && !(noise_std > 0.0)) throw std::invalid_argument("noise std must be positive");
  if (clip_norm < 0.0) throw std::invalid_argument("clip norm must be >= 0");
}

std::vector<std::size_t> training_anchors(const FeatureStore& fs) {
  const auto& g = fs.grid;
  const std::size_t end = g.train_weeks > 1 ? g.train_slots() - g.slots_per_week() : g.train_slots();
  return valid_anchors(g, fs.history, fs.horizon, 0, end);
}

std::vector<std::size_t> validation_anchors(const FeatureStore& fs, std::size_t stride) {
  const auto& g = fs.grid;
  if (g.train_weeks < 2) return {};
  auto all = valid_anchors(g, fs.history, fs.horizon, g.train_slots() - g.slots_per_week(), g.train_slots());
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < all.size(); i += std::max<std::size_t>(1, stride)) out.push_back(all[i]);
  return out;
}

namespace {

struct BatchBuffers {
  Tensor v, t, y;
  BatchBuffers(std::size_t b, std::size_t n, const FeatureStore& fs)
      : v({b, n, fs.history, volume_channels(fs.horizon)}),
        t({b, n, fs.history, travel_time_channels(fs.horizon)}),
        y({b, n, fs.horizon}) {}
};

/// Fills slot j of the batch with one window; T and labels normalized.
void fill_window(const FeatureStore& fs, std::size_t anchor, std::size_t j, BatchBuffers& bb) {
  const std::size_t n = fs.segments();
  const std::size_t vsz = n * fs.history * volume_channels(fs.horizon);
  const std::size_t tsz = n * fs.history * travel_time_channels(fs.horizon);
  const std::size_t ysz = n * fs.horizon;
  double* v = bb.v.ptr() + j * vsz;
  double* t = bb.t.ptr() + j * tsz;
  double* y = bb.y.ptr() + j * ysz;
  write_feature_window(fs.sources(), anchor, fs.history, fs.horizon, v, t, y);
  fs.normalizer.apply({t, tsz});
  const double m = fs.normalizer.label_mean(), s = fs.normalizer.label_std();
  for (std::size_t i = 0; i < ysz; ++i) y[i] = (y[i] - m) / s;
}

double global_norm(const NamedTensors& g) {
  double s = 0.0;
  for (const auto& [name, t] : g)
    for (double x : t.data()) s += x * x;
  return std::sqrt(s);
}

void check_store(const FeatureStore& fs, const ArchitectureConfig& arch) {
  if (fs.segments() != arch.segments)
    throw std::invalid_argument("feature store has n=" + std::to_string(fs.segments()) + " segments, model expects n=" +
                                std::to_string(arch.segments));
  if (fs.history != arch.history || fs.horizon != arch.horizon)
    throw std::invalid_argument("feature store window (P, F) does not match the model");
}

/// Validation L1 in s/m over the anchors, no augmentation.
double validation_loss(const FeatureStore& fs, const SpectralOperator& op, const ArchitectureConfig& arch,
                       const ParameterStore& params, const std::vector<std::size_t>& anchors) {
  const Forecast fc = predict(fs, op, arch, params, anchors);
  const std::size_t n = fs.segments(), F = fs.horizon, S = fs.travel_time.dim(1);
  double s = 0.0;
  for (std::size_t a = 0; a < anchors.size(); ++a)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t f = 0; f < F; ++f)
        s += std::abs(fc.values[(a * n + i) * F + f] - fs.travel_time[i * S + anchors[a] + 1 + f]);
  return s / double(anchors.size() * n * F);
}

}  // namespace

FitResult fit(const FeatureStore& fs, const SpectralOperator& op, const ArchitectureConfig& arch,
              const TrainConfig& cfg) {
  return fit(fs, op, arch, cfg, training_anchors(fs), validation_anchors(fs, cfg.validation_stride));
}

FitResult fit(const FeatureStore& fs, const SpectralOperator& op, const ArchitectureConfig& arch,
              const TrainConfig& cfg, const std::vector<std::size_t>& train,
              const std::vector<std::size_t>& validation) {
  cfg.validate();
  check_store(fs, arch);
  if (train.empty()) throw std::invalid_argument("no training anchors");
  const std::size_t n = fs.segments();
  Model model(arch, op, cfg.batch);
  FitResult res;
  ParameterStore params = init_parameters(arch, derive_seed(cfg.seed, "init"));
  AdamState adam;
  adam.base_lr = cfg.base_lr;
  adam.decay_rate = cfg.decay;
  BatchBuffers bb(cfg.batch, n, fs);
  const bool noisy = cfg.noise && arch.variant == Variant::HStgcn;
  const std::size_t steps = cfg.steps_per_epoch ? cfg.steps_per_epoch : (train.size() + cfg.batch - 1) / cfg.batch;

  std::vector<std::size_t> order = train;
  std::size_t cursor = order.size();  // forces a shuffle on first use
  std::uint64_t reshuffles = 0;
  std::size_t since_best = 0;
  bool have_best = false;
  NamedTensors grads;
  std::uint64_t global_step = 0;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    EpochRecord rec;
    rec.epoch = epoch;
    rec.learning_rate = adam.effective_lr(static_cast<int>(epoch));
    double loss_sum = 0.0;
    for (std::size_t step = 0; step < steps; ++step, ++global_step) {
      for (std::size_t j = 0; j < cfg.batch; ++j) {
        if (cursor == order.size()) {
          std::mt19937_64 rng(derive_seed(cfg.seed, "shuffle", reshuffles++));
          std::shuffle(order.begin(), order.end(), rng);
          cursor = 0;
        }
        fill_window(fs, order[cursor++], j, bb);
      }
      if (noisy) inject_noise(bb.v.data(), cfg.noise_threshold, cfg.noise_std, derive_seed(cfg.seed, "noise", global_step));
      const double loss = model.loss_and_gradients(bb.v, bb.t, bb.y, params, grads);
      if (!std::isfinite(loss)) {
        res.trace.step_losses.push_back(loss);
        throw TrainingDiverged("training loss became non-finite at epoch " + std::to_string(epoch) + ", step " +
                                   std::to_string(step),
                               res.trace);
      }
      res.trace.step_losses.push_back(loss);
      loss_sum += loss;
      if (cfg.clip_norm > 0.0) {
        const double norm = global_norm(grads);
        if (norm > cfg.clip_norm) {
          const double k = cfg.clip_norm / norm;
          for (auto& [name, g] : grads)
            for (double& x : g.data()) x *= k;
          ++rec.clipped_steps;
        }
      }
      try {
        adam_step(adam, params, grads, static_cast<int>(epoch));
      } catch (const std::runtime_error& e) {
        throw TrainingDiverged(std::string("optimizer rejected the update: ") + e.what(), res.trace);
      }
    }
    rec.train_loss = loss_sum / double(steps);
    rec.val_loss = validation.empty() ? rec.train_loss : validation_loss(fs, op, arch, params, validation);
    res.trace.epochs.push_back(rec);
    if (!have_best || rec.val_loss < res.trace.best_val_loss) {
      have_best = true;
      res.trace.best_val_loss = rec.val_loss;
      res.trace.best_epoch = epoch;
      res.params = params;
      since_best = 0;
    } else if (++since_best >= cfg.patience) {
      break;
    }
  }
  if (validation.empty()) res.params = params;
  return res;
}

Forecast predict(const FeatureStore& fs, const SpectralOperator& op, const ArchitectureConfig& arch,
                 const ParameterStore& params, const std::vector<std::size_t>& anchors, std::size_t batch) {
  check_store(fs, arch);
  check_parameters(arch, params);
  const std::size_t n = fs.segments(), F = fs.horizon;
  Forecast fc;
  fc.anchors = anchors;
  fc.segments = n;
  fc.horizon = F;
  fc.values.resize(anchors.size() * n * F);
  if (anchors.empty()) return fc;
  batch = std::min(batch, anchors.size());
  Model model(arch, op, batch);
  BatchBuffers bb(batch, n, fs);
  const double m = fs.normalizer.label_mean(), s = fs.normalizer.label_std();
  for (std::size_t start = 0; start < anchors.size(); start += batch) {
    const std::size_t count = std::min(batch, anchors.size() - start);
    for (std::size_t j = 0; j < batch; ++j) fill_window(fs, anchors[start + std::min(j, count - 1)], j, bb);
    const Tensor& out = model.forward(bb.v, bb.t, params);
    for (std::size_t j = 0; j < count; ++j)
      for (std::size_t i = 0; i < n * F; ++i) fc.values[(start + j) * n * F + i] = out[j * n * F + i] * s + m;
  }
  return fc;
}

// ---------------------------------------------------------------------------
// Checkpoint files: a text manifest terminated by "end\n", then the raw
// little-endian float64 blob. Doubles in the manifest use hex-float
// notation so they round-trip exactly.

namespace {

std::string hexd(double x) {
  std::ostringstream os;
  os << std::hexfloat << x;
  return os.str();
}

double parse_hexd(const std::string& s) {
  // std::stod handles hex-float input via strtod.
  std::size_t used = 0;
  const double v = std::stod(s, &used);
  if (used != s.size()) throw std::runtime_error("bad number '" + s + "' in checkpoint manifest");
  return v;
}

void put_le(std::string& out, double x) {
  auto u = std::bit_cast<std::uint64_t>(x);
  for (int b = 0; b < 8; ++b) out.push_back(static_cast<char>((u >> (8 * b)) & 0xff));
}

double get_le(const unsigned char* p) {
  std::uint64_t u = 0;
  for (int b = 0; b < 8; ++b) u |= std::uint64_t(p[b]) << (8 * b);
  return std::bit_cast<double>(u);
}

std::string join_shape(const Shape& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "x" : "") + std::to_string(s[i]);
  return out;
}

}  // namespace

void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  check_parameters(ck.arch, ck.params);
  std::ostringstream m;
  const auto& a = ck.arch;
  m << "hstgcn-checkpoint " << kCheckpointVersion << '\n';
  m << "variant " << to_string(a.variant) << '\n';
  m << "segments " << a.segments << '\n';
  m << "history " << a.history << '\n';
  m << "horizon " << a.horizon << '\n';
  m << "transformer_channels " << a.transformer_channels[0] << ' ' << a.transformer_channels[1] << '\n';
  m << "gated_channels";
  for (auto c : a.gated_channels) m << ' ' << c;
  m << "\nkernel_sizes";
  for (auto c : a.kernel_sizes) m << ' ' << c;
  m << "\ngraph_channels " << a.graph_channels << '\n';
  m << "chebyshev_order " << a.chebyshev_order << '\n';
  m << "normalizer.mean " << ck.normalizer.mean.size();
  for (double x : ck.normalizer.mean) m << ' ' << hexd(x);
  m << "\nnormalizer.std " << ck.normalizer.std.size();
  for (double x : ck.normalizer.std) m << ' ' << hexd(x);
  m << "\nadjacency_sha256 " << (ck.adjacency_hash.empty() ? "-" : ck.adjacency_hash) << '\n';
  for (const auto& [k, v] : ck.meta) {
    if (k.find_first_of(" \n") != std::string::npos || v.find('\n') != std::string::npos)
      throw std::invalid_argument("checkpoint metadata must be single-line and keys space-free");
    m << "meta " << k << ' ' << v << '\n';
  }
  std::string blob;
  std::size_t offset = 0;
  for (const auto& [name, t] : ck.params) {
    m << "tensor " << name << ' ' << join_shape(t.shape()) << ' ' << offset << ' ' << t.size() << '\n';
    for (double x : t.data()) put_le(blob, x);
    offset += t.size();
  }
  m << "end\n";
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open '" + path + "' for writing");
  const std::string head = m.str();
  os.write(head.data(), std::streamsize(head.size()));
  os.write(blob.data(), std::streamsize(blob.size()));
  if (!os) throw std::runtime_error("write to '" + path + "' failed");
}

Checkpoint load_checkpoint(const std::string& path, std::optional<std::size_t> expected_segments) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint '" + path + "'");
  std::string all((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  const auto end_pos = all.find("\nend\n");
  if (end_pos == std::string::npos) throw std::runtime_error("checkpoint '" + path + "' is corrupt: no manifest terminator");
  std::istringstream ms(all.substr(0, end_pos + 1));
  const auto* blob = reinterpret_cast<const unsigned char*>(all.data() + end_pos + 5);
  const std::size_t blob_len = all.size() - (end_pos + 5);

  Checkpoint ck;
  std::string line;
  if (!std::getline(ms, line) || !line.starts_with("hstgcn-checkpoint "))
    throw std::runtime_error("'" + path + "' is not a checkpoint file");
  const int version = std::stoi(line.substr(18));
  if (version != kCheckpointVersion)
    throw std::runtime_error("checkpoint version " + std::to_string(version) + " unsupported (expected " +
                             std::to_string(kCheckpointVersion) + ")");
  struct Entry {
    std::string name;
    Shape shape;
    std::size_t offset, count;
  };
  std::vector<Entry> entries;
  auto bad = [&](const std::string& why) { return std::runtime_error("checkpoint '" + path + "' is corrupt: " + why); };
  while (std::getline(ms, line)) {
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    auto& a = ck.arch;
    if (key == "variant") {
      std::string v;
      ls >> v;
      a.variant = parse_variant(v);
    } else if (key == "segments") {
      ls >> a.segments;
    } else if (key == "history") {
      ls >> a.history;
    } else if (key == "horizon") {
      ls >> a.horizon;
    } else if (key == "transformer_channels") {
      ls >> a.transformer_channels[0] >> a.transformer_channels[1];
    } else if (key == "gated_channels") {
      for (auto& c : a.gated_channels) ls >> c;
    } else if (key == "kernel_sizes") {
      for (auto& c : a.kernel_sizes) ls >> c;
    } else if (key == "graph_channels") {
      ls >> a.graph_channels;
    } else if (key == "chebyshev_order") {
      ls >> a.chebyshev_order;
    } else if (key == "normalizer.mean" || key == "normalizer.std") {
      std::size_t k = 0;
      ls >> k;
      auto& dst = key == "normalizer.mean" ? ck.normalizer.mean : ck.normalizer.std;
      dst.clear();
      std::string tok;
      for (std::size_t i = 0; i < k && ls >> tok; ++i) dst.push_back(parse_hexd(tok));
      if (dst.size() != k) throw bad("short normalizer line");
    } else if (key == "adjacency_sha256") {
      ls >> ck.adjacency_hash;
      if (ck.adjacency_hash == "-") ck.adjacency_hash.clear();
    } else if (key == "meta") {
      std::string k, v;
      ls >> k;
      std::getline(ls, v);
      if (!v.empty() && v[0] == ' ') v.erase(0, 1);
      ck.meta[k] = v;
    } else if (key == "tensor") {
      Entry e;
      std::string shape;
      ls >> e.name >> shape >> e.offset >> e.count;
      if (!ls) throw bad("malformed tensor line '" + line + "'");
      std::stringstream ss(shape);
      std::string d;
      while (std::getline(ss, d, 'x')) e.shape.push_back(std::stoul(d));
      entries.push_back(e);
    } else if (!key.empty()) {
      throw bad("unknown manifest key '" + key + "'");
    }
    if (ls.fail() && key != "meta") throw bad("malformed line '" + line + "'");
  }
  if (expected_segments && ck.arch.segments != *expected_segments)
    throw std::invalid_argument("checkpoint was trained with segment count n=" + std::to_string(ck.arch.segments) +
                                " but the data has n=" + std::to_string(*expected_segments));
  for (const auto& e : entries) {
    if (shape_numel(e.shape) != e.count) throw bad("tensor '" + e.name + "' shape/count mismatch");
    if ((e.offset + e.count) * 8 > blob_len) throw bad("tensor '" + e.name + "' extends past the data blob");
    Tensor t(e.shape);
    for (std::size_t i = 0; i < e.count; ++i) t[i] = get_le(blob + (e.offset + i) * 8);
    ck.params.emplace(e.name, std::move(t));
  }
  try {
    ck.arch.validate();
    check_parameters(ck.arch, ck.params);
  } catch (const std::invalid_argument& e) {
    throw bad(e.what());
  }
  return ck;
}

}  // namespace hstgcn
