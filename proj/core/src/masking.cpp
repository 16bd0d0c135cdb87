#include "barcodemae/masking.hpp"

#include <algorithm>
#include <array>
#include <cmath>

#include "barcodemae/error.hpp"
#include "barcodemae/random.hpp"

namespace barcodemae {

std::string_view to_string(MaskMode mode) {
  switch (mode) {
    case MaskMode::mae: return "mae";
    case MaskMode::with_mask: return "with_mask";
    case MaskMode::bert_80_10_10: return "bert_80_10_10";
  }
  return "?";
}

MaskMode parse_mask_mode(std::string_view name) {
  if (name == "mae") return MaskMode::mae;
  if (name == "with_mask") return MaskMode::with_mask;
  if (name == "bert_80_10_10") return MaskMode::bert_80_10_10;
  throw ConfigError("unknown mask mode '" + std::string(name) + "'");
}

bool MaskPlan::contains(int position) const {
  return std::binary_search(masked_positions.begin(), masked_positions.end(), position);
}

int masked_count(int n_valid, double ratio) {
  // nearbyint honours the default round-to-nearest-even mode.
  return static_cast<int>(std::nearbyint(ratio * static_cast<double>(n_valid)));
}

namespace {

// Partial Fisher-Yates: the first m slots become a uniform m-subset.
std::vector<int> draw_subset(std::vector<int> candidates, int m, Rng& rng) {
  for (int i = 0; i < m; ++i) {
    const std::size_t j = static_cast<std::size_t>(i) +
                          rng.uniform_index(candidates.size() - static_cast<std::size_t>(i));
    std::swap(candidates[static_cast<std::size_t>(i)], candidates[j]);
  }
  candidates.resize(static_cast<std::size_t>(m));
  std::sort(candidates.begin(), candidates.end());
  return candidates;
}

}  // namespace

MaskPlan sample_mask(int n, double ratio, MaskMode mode, Rng& rng,
                     std::span<const std::uint8_t> valid) {
  if (n <= 0) throw ConfigError("sample_mask: token count must be positive");
  if (!(ratio >= 0.0 && ratio <= 1.0)) throw ConfigError("mask ratio must lie in [0,1]");
  if (!valid.empty() && static_cast<int>(valid.size()) != n) {
    throw ConfigError("sample_mask: validity mask length differs from n");
  }
  std::vector<int> candidates;
  candidates.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    if (valid.empty() || valid[static_cast<std::size_t>(i)]) candidates.push_back(i);
  }
  const int m = masked_count(static_cast<int>(candidates.size()), ratio);
  return MaskPlan{draw_subset(std::move(candidates), m, rng), mode, n};
}

MaskPlan sample_mask_exact(int n, int count, MaskMode mode, Rng& rng) {
  if (n <= 0) throw ConfigError("sample_mask_exact: token count must be positive");
  if (count < 0 || count > n) throw ConfigError("sample_mask_exact: count outside [0,n]");
  std::vector<int> candidates(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) candidates[static_cast<std::size_t>(i)] = i;
  return MaskPlan{draw_subset(std::move(candidates), count, rng), mode, n};
}

MaskPlan make_plan(int n, std::vector<int> positions, MaskMode mode) {
  std::sort(positions.begin(), positions.end());
  if (std::adjacent_find(positions.begin(), positions.end()) != positions.end()) {
    throw ConfigError("mask plan has duplicate positions");
  }
  for (int p : positions) {
    if (p < 0 || p >= n) {
      throw ConfigError("masked position " + std::to_string(p) + " out of range for n=" +
                        std::to_string(n));
    }
  }
  return MaskPlan{std::move(positions), mode, n};
}

namespace {

void check_plan(const TokenSequence& ts, const MaskPlan& plan) {
  for (int p : plan.masked_positions) {
    if (p < 0 || static_cast<std::size_t>(p) >= ts.size()) {
      throw ConfigError("masked position " + std::to_string(p) + " out of range for sequence of " +
                        std::to_string(ts.size()) + " tokens");
    }
  }
}

std::vector<std::uint8_t> validity(const std::vector<TokenId>& ids, const Vocab& vocab) {
  std::vector<std::uint8_t> valid(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) valid[i] = ids[i] != vocab.pad();
  return valid;
}

}  // namespace

EncoderInput full_encoder_input(const TokenSequence& ts, const Vocab& vocab) {
  return EncoderInput{ts.ids, ts.positions, validity(ts.ids, vocab)};
}

BertCorruption bert_corrupt(const TokenSequence& ts, const MaskPlan& plan, const Vocab& vocab,
                            Rng& rng) {
  if (plan.mode != MaskMode::bert_80_10_10) {
    throw ConfigError("bert_corrupt requires a bert_80_10_10 plan, got " +
                      std::string(to_string(plan.mode)));
  }
  check_plan(ts, plan);
  const int m = static_cast<int>(plan.masked_positions.size());

  // Largest-remainder apportionment of m into (mask, keep, random) = (.8,.1,.1).
  // Ties go to the earlier category.
  const std::array<double, 3> quota = {0.8 * m, 0.1 * m, 0.1 * m};
  std::array<int, 3> counts{};
  int assigned = 0;
  for (std::size_t c = 0; c < 3; ++c) {
    counts[c] = static_cast<int>(std::floor(quota[c] + 1e-9));
    assigned += counts[c];
  }
  std::array<std::size_t, 3> by_remainder = {0, 1, 2};
  std::stable_sort(by_remainder.begin(), by_remainder.end(), [&](std::size_t a, std::size_t b) {
    return quota[a] - counts[a] > quota[b] - counts[b] + 1e-9;
  });
  for (std::size_t i = 0; assigned < m; ++i, ++assigned) ++counts[by_remainder[i % 3]];

  BertCorruption out;
  out.ids = ts.ids;
  out.targets = gather_targets(ts, plan);
  out.n_mask = counts[0];
  out.n_keep = counts[1];
  out.n_random = counts[2];

  std::vector<int> order = plan.masked_positions;
  rng.shuffle(order);
  for (int i = 0; i < m; ++i) {
    const std::size_t pos = static_cast<std::size_t>(order[static_cast<std::size_t>(i)]);
    if (i < counts[0]) {
      out.ids[pos] = vocab.mask();
    } else if (i >= counts[0] + counts[1]) {
      out.ids[pos] =
          static_cast<TokenId>(rng.uniform_index(static_cast<std::size_t>(vocab.kmer_count())));
    }
  }
  return out;
}

EncoderInput build_encoder_input(const TokenSequence& ts, const MaskPlan& plan, const Vocab& vocab,
                                 Rng* rng) {
  check_plan(ts, plan);
  EncoderInput in;
  switch (plan.mode) {
    case MaskMode::mae: {
      in.ids.reserve(ts.size() - plan.masked_positions.size());
      auto next_masked = plan.masked_positions.begin();
      for (std::size_t i = 0; i < ts.size(); ++i) {
        if (next_masked != plan.masked_positions.end() && *next_masked == static_cast<int>(i)) {
          ++next_masked;
          continue;
        }
        in.ids.push_back(ts.ids[i]);
        in.positions.push_back(ts.positions[i]);
      }
      break;
    }
    case MaskMode::with_mask:
      in.ids = ts.ids;
      in.positions = ts.positions;
      for (int p : plan.masked_positions) in.ids[static_cast<std::size_t>(p)] = vocab.mask();
      break;
    case MaskMode::bert_80_10_10:
      if (rng == nullptr) throw ConfigError("bert_80_10_10 encoder input needs a random stream");
      in.ids = bert_corrupt(ts, plan, vocab, *rng).ids;
      in.positions = ts.positions;
      break;
  }
  in.valid = validity(in.ids, vocab);
  return in;
}

DecoderInput build_decoder_input(const MaskPlan& plan, int n) {
  if (plan.length != n) {
    throw ConfigError("decoder input: plan drawn for n=" + std::to_string(plan.length) +
                      " but sequence has n=" + std::to_string(n));
  }
  for (int p : plan.masked_positions) {
    if (p < 0 || p >= n) throw ConfigError("masked position out of range in decoder input");
  }
  DecoderInput dec;
  dec.slots.resize(static_cast<std::size_t>(n));
  dec.positions.resize(static_cast<std::size_t>(n));
  int encoder_row = 0;
  for (int i = 0; i < n; ++i) {
    dec.positions[static_cast<std::size_t>(i)] = i;
    DecoderSlot& slot = dec.slots[static_cast<std::size_t>(i)];
    if (plan.mode == MaskMode::mae && plan.contains(i)) {
      slot.mask_slot = true;
    } else {
      slot.encoder_index = plan.mode == MaskMode::mae ? encoder_row++ : i;
    }
  }
  if (plan.mode == MaskMode::mae &&
      encoder_row + static_cast<int>(plan.masked_positions.size()) != n) {
    throw ConfigError("decoder input: kept + masked != n");
  }
  return dec;
}

std::vector<TokenId> gather_targets(const TokenSequence& ts, const MaskPlan& plan) {
  std::vector<TokenId> targets;
  targets.reserve(plan.masked_positions.size());
  for (int p : plan.masked_positions) targets.push_back(ts.ids[static_cast<std::size_t>(p)]);
  return targets;
}

PretrainExample make_pretrain_example(const TokenSequence& ts, const MaskPlan& plan,
                                      const Vocab& vocab, Rng& rng) {
  PretrainExample ex;
  ex.plan = plan;
  ex.targets = gather_targets(ts, plan);
  ex.encoder = build_encoder_input(ts, plan, vocab, &rng);
  ex.decoder = build_decoder_input(plan, static_cast<int>(ts.size()));
  return ex;
}

}  // namespace barcodemae
