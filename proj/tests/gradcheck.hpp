#pragma once

// Central finite-difference check of forward_backward against forward_pretrain.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "barcodemae/masking.hpp"
#include "barcodemae/model.hpp"
#include "barcodemae/random.hpp"
#include "barcodemae/tokenizer.hpp"

namespace gradcheck {

struct TensorError {
  std::string name;
  double max_rel = 0.0;   // worst element, informational
  double norm_rel = 0.0;  // ||a - f|| / max(||a||, ||f||)
  double max_abs_grad = 0.0;
  double max_abs_fd = 0.0;
  /// Relative norm error below tol, or both gradients identically ~0.
  bool passes(double tol) const { return norm_rel < tol || std::max(max_abs_grad, max_abs_fd) < 1e-10; }
};

struct Report {
  std::vector<TensorError> tensors;
  double worst_norm_rel = 0.0;  // over tensors with a non-vanishing gradient
  std::size_t checked = 0;

  bool passes(double tol) const {
    return std::all_of(tensors.begin(), tensors.end(), [&](const TensorError& t) { return t.passes(tol); });
  }
};

/// Small gradient-check configuration: d_model 8, enc:1-1 dec:1-1, k 2.
inline barcodemae::ModelConfig small_config(barcodemae::Variant variant) {
  barcodemae::ModelConfig cfg;
  cfg.variant = variant;
  cfg.d_model = 8;
  cfg.d_ff = 16;
  cfg.enc_layers = 1;
  cfg.enc_heads = 1;
  cfg.dec_layers = variant == barcodemae::Variant::encoder_only ? 0 : 1;
  cfg.dec_heads = 1;
  cfg.k = 2;
  cfg.max_tokens = 12;
  cfg.dropout = 0.0;
  return cfg;
}

/// Parameters spread well away from zero so that every tensor carries signal.
inline barcodemae::ModelParams<double> spread_params(const barcodemae::ModelConfig& cfg,
                                                      std::uint64_t seed, double spread) {
  auto params = barcodemae::init_params<double>(cfg, seed);
  barcodemae::Rng rng(seed + 1);
  const auto flags = params.layout().element_flags(params.vocab().pad());
  auto values = params.values();
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (flags[i] & barcodemae::kFrozen) continue;
    values[i] += spread * rng.normal();
  }
  return params;
}

inline barcodemae::PretrainExample example_for(const barcodemae::ModelConfig& cfg, std::uint64_t seed,
                                               int n_tokens) {
  barcodemae::Rng rng(seed);
  const barcodemae::Vocab vocab(cfg.k);
  barcodemae::TokenSequence ts;
  for (int i = 0; i < n_tokens; ++i) {
    ts.ids.push_back(static_cast<barcodemae::TokenId>(rng.uniform_index(static_cast<std::size_t>(vocab.kmer_count()))));
    ts.positions.push_back(i);
  }
  const auto plan = barcodemae::sample_mask(n_tokens, 0.5, cfg.mask_mode(), rng);
  return barcodemae::make_pretrain_example(ts, plan, vocab, rng);
}

/// Compares analytic gradients with (L(t+h) - L(t-h)) / 2h for every parameter.
/// Frozen elements must have zero analytic gradient contribution after masking
/// and are skipped.
inline Report check(barcodemae::ModelParams<double> params, const barcodemae::PretrainExample& ex,
                    double h) {
  using barcodemae::forward_backward;
  using barcodemae::forward_pretrain;
  std::vector<double> analytic(params.parameter_count(), 0.0);
  forward_backward<double>(params, ex, analytic, 1.0, nullptr);
  const auto flags = params.layout().element_flags(params.vocab().pad());

  Report report;
  for (const auto& t : params.layout().tensors()) {
    TensorError te;
    te.name = t.name;
    double diff2 = 0, a2 = 0, f2 = 0;
    for (std::size_t j = 0; j < t.size(); ++j) {
      const std::size_t i = t.offset + j;
      if (flags[i] & barcodemae::kFrozen) continue;
      const double saved = params.values()[i];
      params.values()[i] = saved + h;
      const double up = forward_pretrain<double>(params, ex).loss_sum;
      params.values()[i] = saved - h;
      const double down = forward_pretrain<double>(params, ex).loss_sum;
      params.values()[i] = saved;
      const double fd = (up - down) / (2 * h);
      const double a = analytic[i];
      te.max_rel = std::max(te.max_rel, std::abs(a - fd) / std::max({std::abs(a), std::abs(fd), 1e-12}));
      te.max_abs_grad = std::max(te.max_abs_grad, std::abs(a));
      te.max_abs_fd = std::max(te.max_abs_fd, std::abs(fd));
      diff2 += (a - fd) * (a - fd);
      a2 += a * a;
      f2 += fd * fd;
      ++report.checked;
    }
    const double denom = std::sqrt(std::max(a2, f2));
    te.norm_rel = denom > 0 ? std::sqrt(diff2) / denom : 0.0;
    if (std::max(te.max_abs_grad, te.max_abs_fd) >= 1e-10) {
      report.worst_norm_rel = std::max(report.worst_norm_rel, te.norm_rel);
    }
    report.tensors.push_back(te);
  }
  return report;
}

}  // namespace gradcheck
