#include "barcodemae/train.hpp"

#include <cmath>
#include <cstdio>
#include <numbers>

#include "barcodemae/error.hpp"
#include "barcodemae/io.hpp"
#include "barcodemae/random.hpp"

namespace barcodemae {

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(max_lr > 0.0)) throw ConfigError("max_lr must be positive");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be non-negative");
  if (!(mask_ratio > 0.0 && mask_ratio < 1.0)) throw ConfigError("mask_ratio must lie in (0,1)");
  if (!(warmup_fraction > 0.0 && warmup_fraction < 1.0)) {
    throw ConfigError("warmup_fraction must lie in (0,1)");
  }
  if (!(grad_clip >= 0.0)) throw ConfigError("grad_clip must be non-negative");
}

TrainConfig TrainConfig::preset(std::string_view name) {
  TrainConfig cfg;
  if (name == "method") return cfg;
  if (name == "appendix") {
    cfg.max_lr = 2e-4;
    cfg.batch_size = 128;
    cfg.epochs = 35;
    return cfg;
  }
  throw ConfigError("unknown preset '" + std::string(name) + "' (expected method or appendix)");
}

template <typename Real>
void adamw_step(std::span<Real> params, std::span<const Real> grads, AdamState<Real>& state, double lr,
                double weight_decay, std::span<const std::uint8_t> flags) {
  if (grads.size() != params.size() || (!flags.empty() && flags.size() != params.size())) {
    throw ConfigError("adamw_step: parameter, gradient and flag sizes differ");
  }
  if (state.m.empty()) {
    state.m.assign(params.size(), Real(0));
    state.v.assign(params.size(), Real(0));
  }
  if (state.m.size() != params.size() || state.v.size() != params.size()) {
    throw ConfigError("adamw_step: optimizer state size mismatch");
  }
  const std::int64_t t = state.step + 1;
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (!std::isfinite(static_cast<double>(grads[i]))) {
      throw DivergenceError("non-finite gradient at optimizer step " + std::to_string(t));
    }
  }
  state.step = t;
  const double bias1 = 1.0 - std::pow(kAdamBeta1, static_cast<double>(t));
  const double bias2 = 1.0 - std::pow(kAdamBeta2, static_cast<double>(t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const std::uint8_t f = flags.empty() ? std::uint8_t{kDecay} : flags[i];
    if (f & kFrozen) continue;
    double p = static_cast<double>(params[i]);
    const double g = static_cast<double>(grads[i]);
    if (f & kDecay) p -= lr * weight_decay * p;
    const double m = kAdamBeta1 * static_cast<double>(state.m[i]) + (1.0 - kAdamBeta1) * g;
    const double v = kAdamBeta2 * static_cast<double>(state.v[i]) + (1.0 - kAdamBeta2) * g * g;
    state.m[i] = static_cast<Real>(m);
    state.v[i] = static_cast<Real>(v);
    p -= lr * (m / bias1) / (std::sqrt(v / bias2) + kAdamEpsilon);
    params[i] = static_cast<Real>(p);
  }
}

double onecycle_lr(std::int64_t step, std::int64_t total_steps, double max_lr, double warmup_fraction) {
  if (total_steps <= 0) throw ConfigError("onecycle_lr: total_steps must be positive");
  if (step < 0 || step > total_steps) {
    throw ConfigError("onecycle_lr: step " + std::to_string(step) + " outside [0," +
                      std::to_string(total_steps) + "]");
  }
  const double initial = max_lr / 25.0;
  const double final_lr = max_lr / 1e4;
  const std::int64_t peak = std::clamp<std::int64_t>(
      std::llround(warmup_fraction * static_cast<double>(total_steps)), 0, total_steps);
  auto anneal = [](double from, double to, double frac) {
    return to + (from - to) * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
  };
  if (step == peak) return max_lr;
  if (step < peak) {
    if (step == 0) return initial;
    return anneal(initial, max_lr, static_cast<double>(step) / static_cast<double>(peak));
  }
  return anneal(max_lr, final_lr,
                static_cast<double>(step - peak) / static_cast<double>(total_steps - peak));
}

template <typename Real>
double clip_grad_norm(std::span<Real> grads, double max_norm) {
  double sq = 0.0;
  for (Real g : grads) sq += static_cast<double>(g) * static_cast<double>(g);
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const Real scale = static_cast<Real>(max_norm / (norm + 1e-6));
    for (Real& g : grads) g *= scale;
  }
  return norm;
}

std::string format_metrics_tsv(const std::vector<EpochMetrics>& metrics) {
  std::string out = "epoch\tstep\tloss\tmasked_acc\tlr\n";
  for (const auto& m : metrics) {
    out += std::to_string(m.epoch) + '\t' + std::to_string(m.step) + '\t' + format_double(m.loss) +
           '\t' + format_double(m.masked_acc) + '\t' + format_double(m.lr) + '\n';
  }
  return out;
}

namespace {

// Training stream is decorrelated from the initialisation stream.
constexpr std::uint64_t kTrainStreamSalt = 0x9E3779B97F4A7C15ULL;

std::string epoch_file(int epoch) {
  char buffer[32];
  std::snprintf(buffer, sizeof(buffer), "epoch_%03d.ckpt", epoch);
  return buffer;
}

}  // namespace

TrainResult train(const RecordSet& records, const ModelConfig& model_config,
                  const TrainConfig& train_config, const TrainOptions& options) {
  model_config.validate();
  train_config.validate();
  if (records.empty()) throw DataError("cannot train on an empty record set");

  Checkpoint state;
  Rng rng;
  if (options.resume) {
    state = *options.resume;
    if (!(state.model == model_config)) throw ConfigError("resume checkpoint has a different model config");
    if (!(state.train == train_config)) throw ConfigError("resume checkpoint has a different train config");
    rng = Rng::deserialize(state.rng_state);
  } else {
    state.model = model_config;
    state.train = train_config;
    state.params = init_params<float>(model_config, train_config.seed);
    rng = Rng(train_config.seed ^ kTrainStreamSalt);
  }

  const Vocab vocab(model_config.k);
  const TokenizerConfig tokenizer = model_config.tokenizer();
  const MaskMode mode = model_config.mask_mode();
  const std::size_t n_records = records.size();
  const std::size_t batch_size = static_cast<std::size_t>(train_config.batch_size);
  const std::int64_t batches_per_epoch =
      static_cast<std::int64_t>((n_records + batch_size - 1) / batch_size);
  const std::int64_t total_steps = batches_per_epoch * train_config.epochs;
  const std::vector<std::uint8_t> flags = state.params.layout().element_flags(vocab.pad());
  std::vector<float> grads(state.params.parameter_count());
  std::vector<PretrainExample> batch;

  TrainResult result;
  for (int epoch = state.epoch; epoch < train_config.epochs; ++epoch) {
    std::vector<std::size_t> order(n_records);
    for (std::size_t i = 0; i < n_records; ++i) order[i] = i;
    rng.shuffle(order);

    LossStats epoch_stats;
    double lr = 0.0;
    for (std::size_t start = 0; start < n_records; start += batch_size) {
      const std::size_t stop = std::min(n_records, start + batch_size);
      batch.clear();
      std::int64_t masked_total = 0;
      for (std::size_t i = start; i < stop; ++i) {
        const BarcodeRecord& r = records[order[i]];
        const int offset = sample_offset(tokenizer, rng);
        TokenSequence ts;
        try {
          ts = tokenize(r.sequence, tokenizer, offset);
        } catch (const DataError& e) {
          throw DataError("record '" + r.record_id + "': " + e.what());
        }
        MaskPlan plan = sample_mask(static_cast<int>(ts.size()), train_config.mask_ratio, mode, rng);
        if (plan.masked_positions.empty()) continue;
        masked_total += static_cast<std::int64_t>(plan.masked_positions.size());
        batch.push_back(make_pretrain_example(ts, plan, vocab, rng));
      }

      std::fill(grads.begin(), grads.end(), 0.0f);
      LossStats batch_stats;
      if (masked_total > 0) {
        const float scale = 1.0f / static_cast<float>(masked_total);
        for (const PretrainExample& ex : batch) {
          if (options.inspect_example) options.inspect_example(ex);
          batch_stats += forward_backward<float>(state.params, ex, grads, scale, &rng);
        }
      }
      if (!std::isfinite(batch_stats.loss_sum)) {
        throw DivergenceError("non-finite loss at step " + std::to_string(state.step));
      }
      epoch_stats += batch_stats;
      clip_grad_norm<float>(grads, train_config.grad_clip);
      lr = onecycle_lr(state.step, total_steps, train_config.max_lr, train_config.warmup_fraction);
      adamw_step<float>(state.params.values(), grads, state.optimizer, lr, train_config.weight_decay,
                        flags);
      ++state.step;
    }

    EpochMetrics metrics{epoch + 1, state.step, epoch_stats.mean(), epoch_stats.accuracy(), lr};
    state.epoch = epoch + 1;
    state.history.push_back(metrics);
    state.rng_state = rng.serialize();
    result.metrics.push_back(metrics);

    if (!options.checkpoint_dir.empty()) {
      const std::string bytes = serialize_checkpoint(state);
      write_file_atomic(options.checkpoint_dir / epoch_file(state.epoch), bytes);
      write_file_atomic(options.checkpoint_dir / "last.ckpt", bytes);
    }
    if (!options.metrics_path.empty()) {
      write_file_atomic(options.metrics_path, format_metrics_tsv(state.history));
    }
    if (options.on_epoch) options.on_epoch(metrics);
    if (options.stop_after_epoch >= 0 && state.epoch >= options.stop_after_epoch) break;
  }
  state.rng_state = rng.serialize();
  result.checkpoint = std::move(state);
  return result;
}

template void adamw_step<float>(std::span<float>, std::span<const float>, AdamState<float>&, double,
                                double, std::span<const std::uint8_t>);
template void adamw_step<double>(std::span<double>, std::span<const double>, AdamState<double>&,
                                 double, double, std::span<const std::uint8_t>);
template double clip_grad_norm<float>(std::span<float>, double);
template double clip_grad_norm<double>(std::span<double>, double);

}  // namespace barcodemae
