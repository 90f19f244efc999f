#pragma once

// L1 training loop with Adam, volume-noise augmentation, validation on the
// last training week, best-checkpoint selection and checkpoint files.

#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "hstgcn/evalsuite.hpp"
#include "hstgcn/features.hpp"
#include "hstgcn/model.hpp"

namespace hstgcn {

/// Mean absolute error over all entries. Throws on shape mismatch or a
/// non-finite prediction.
double l1_loss(const Tensor& pred, const Tensor& truth);

struct TrainConfig {
  std::size_t epochs = 100;
  std::size_t batch = 8;
  std::size_t steps_per_epoch = 0;  // 0 = one pass over the training anchors
  std::size_t patience = 10;
  double base_lr = 1e-3;
  double decay = 0.98;
  bool noise = true;
  double noise_std = 0.3;
  double noise_threshold = 3.0;
  double clip_norm = 5.0;  // 0 disables clipping
  std::size_t validation_stride = 1;  // keep every k-th validation anchor
  std::uint64_t seed = 1;

  void validate() const;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double learning_rate = 0.0;
  double train_loss = 0.0;  // mean over the epoch's steps (normalized units)
  double val_loss = 0.0;    // L1 in s/m, augmentation off
  std::size_t clipped_steps = 0;
};

struct TrainingTrace {
  std::vector<double> step_losses;
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;
  double best_val_loss = 0.0;
};

class TrainingDiverged : public std::runtime_error {
public:
  TrainingDiverged(const std::string& what, TrainingTrace trace)
      : std::runtime_error(what), trace_(std::move(trace)) {}
  const TrainingTrace& trace() const { return trace_; }

private:
  TrainingTrace trace_;
};

struct FitResult {
  ParameterStore params;  // best-validation parameters
  TrainingTrace trace;
};

/// Training anchors: the training span minus its last week. Validation:
/// the last training week, thinned by validation_stride.
std::vector<std::size_t> training_anchors(const FeatureStore& fs);
std::vector<std::size_t> validation_anchors(const FeatureStore& fs, std::size_t stride);

FitResult fit(const FeatureStore& fs, const SpectralOperator& op, const ArchitectureConfig& arch,
              const TrainConfig& cfg);

/// Same loop on explicit anchor lists (empty validation list: the returned
/// parameters are the last ones and val_loss is reported as the train loss).
FitResult fit(const FeatureStore& fs, const SpectralOperator& op, const ArchitectureConfig& arch,
              const TrainConfig& cfg, const std::vector<std::size_t>& train,
              const std::vector<std::size_t>& validation);

/// Denormalized forecasts for the anchors, evaluated in batches.
Forecast predict(const FeatureStore& fs, const SpectralOperator& op, const ArchitectureConfig& arch,
                 const ParameterStore& params, const std::vector<std::size_t>& anchors, std::size_t batch = 32);

struct Checkpoint {
  ArchitectureConfig arch;
  TravelTimeNormalizer normalizer;
  ParameterStore params;
  std::string adjacency_hash;               // SHA-256 of the adjacency the model was trained on
  std::map<std::string, std::string> meta;  // free-form provenance (seed, features hash, ...)
};

inline constexpr int kCheckpointVersion = 1;

void save_checkpoint(const Checkpoint& ck, const std::string& path);
/// Throws std::runtime_error on a corrupt file or version mismatch and
/// std::invalid_argument when expected_segments disagrees with the file.
Checkpoint load_checkpoint(const std::string& path, std::optional<std::size_t> expected_segments = std::nullopt);

}  // namespace hstgcn
