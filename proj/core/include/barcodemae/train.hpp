#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "barcodemae/model.hpp"
#include "barcodemae/seqdata.hpp"

namespace barcodemae {

struct TrainConfig {
  int epochs = 35;
  int batch_size = 32;
  double max_lr = 1e-4;
  double weight_decay = 1e-5;
  double mask_ratio = 0.5;
  double warmup_fraction = 0.3;
  double grad_clip = 1.0;  // global L2 norm; <= 0 disables clipping
  std::uint64_t seed = 0;

  void validate() const;
  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;

  /// "method": lr 1e-4, batch 32 (desk scale). "appendix": lr 2e-4, batch 128, 35 epochs.
  static TrainConfig preset(std::string_view name);
};

inline constexpr double kAdamBeta1 = 0.9;
inline constexpr double kAdamBeta2 = 0.999;
inline constexpr double kAdamEpsilon = 1e-8;

template <typename Real>
struct AdamState {
  std::vector<Real> m;
  std::vector<Real> v;
  std::int64_t step = 0;

  friend bool operator==(const AdamState&, const AdamState&) = default;
};

/// One AdamW update with decoupled weight decay. `flags` carries kDecay /
/// kFrozen per element (empty means every element decays). Throws
/// DivergenceError naming the step when a gradient is non-finite.
template <typename Real>
void adamw_step(std::span<Real> params, std::span<const Real> grads, AdamState<Real>& state, double lr,
                double weight_decay, std::span<const std::uint8_t> flags = {});

/// Cosine warm-up from max_lr/25 to max_lr over warmup_fraction of the steps,
/// then cosine decay towards max_lr/1e4.
double onecycle_lr(std::int64_t step, std::int64_t total_steps, double max_lr, double warmup_fraction);

/// Rescales `grads` in place to global L2 norm <= max_norm. Returns the pre-clip norm.
template <typename Real>
double clip_grad_norm(std::span<Real> grads, double max_norm);

struct EpochMetrics {
  int epoch = 0;
  std::int64_t step = 0;
  double loss = 0.0;
  double masked_acc = 0.0;
  double lr = 0.0;

  friend bool operator==(const EpochMetrics&, const EpochMetrics&) = default;
};

std::string format_metrics_tsv(const std::vector<EpochMetrics>& metrics);

struct Checkpoint {
  static constexpr std::uint32_t kFormatVersion = 1;

  ModelConfig model;
  TrainConfig train;
  ModelParams<float> params;
  AdamState<float> optimizer;
  int epoch = 0;  // completed epochs
  std::int64_t step = 0;
  std::string rng_state;
  std::vector<EpochMetrics> history;

  TokenizerConfig tokenizer() const { return model.tokenizer(); }
  Vocab vocab() const { return Vocab(model.k); }
};

std::string serialize_checkpoint(const Checkpoint& checkpoint);
Checkpoint deserialize_checkpoint(std::string_view bytes);
void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

struct TrainOptions {
  /// Per-epoch checkpoints `epoch_NNN.ckpt` plus `last.ckpt`; empty disables.
  std::filesystem::path checkpoint_dir;
  /// Metrics TSV rewritten after each epoch; empty disables.
  std::filesystem::path metrics_path;
  /// Continue from this state instead of initialising.
  std::optional<Checkpoint> resume;
  /// Stop after this many completed epochs (simulated interruption); < 0 runs to the end.
  int stop_after_epoch = -1;
  /// Observes every example before its forward pass.
  std::function<void(const PretrainExample&)> inspect_example;
  std::function<void(const EpochMetrics&)> on_epoch;
};

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<EpochMetrics> metrics;
};

/// Masked-token pretraining: per-epoch seeded shuffling, fresh frame-shift
/// offsets and mask plans, gradient-clipped AdamW under the OneCycle schedule.
TrainResult train(const RecordSet& records, const ModelConfig& model_config,
                  const TrainConfig& train_config, const TrainOptions& options = {});

}  // namespace barcodemae
