#pragma once

#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "barcodemae/tokenizer.hpp"

namespace barcodemae {

class Rng;

/// How the encoder sees masked positions.
enum class MaskMode {
  mae,            ///< masked tokens withheld from the encoder entirely
  with_mask,      ///< every selected token replaced by [MASK]
  bert_80_10_10,  ///< 80% [MASK], 10% unchanged, 10% random k-mer
};

std::string_view to_string(MaskMode mode);
MaskMode parse_mask_mode(std::string_view name);

struct MaskPlan {
  std::vector<int> masked_positions;  // sorted, unique
  MaskMode mode = MaskMode::mae;
  int length = 0;  // token count n the plan was drawn for

  bool contains(int position) const;
  friend bool operator==(const MaskPlan&, const MaskPlan&) = default;
};

/// round(ratio * n_valid) with ties to even.
int masked_count(int n_valid, double ratio);

/// Draws exactly masked_count() positions uniformly without replacement.
/// When `valid` is non-empty, positions with valid[i] == 0 (PAD) are never drawn.
MaskPlan sample_mask(int n, double ratio, MaskMode mode, Rng& rng,
                     std::span<const std::uint8_t> valid = {});

/// Draws exactly `count` positions uniformly without replacement from [0, n).
MaskPlan sample_mask_exact(int n, int count, MaskMode mode, Rng& rng);

/// Builds a plan from an explicit position list (sorted and validated).
MaskPlan make_plan(int n, std::vector<int> positions, MaskMode mode);

struct EncoderInput {
  std::vector<TokenId> ids;
  std::vector<int> positions;       // original token indices
  std::vector<std::uint8_t> valid;  // 0 marks PAD
  std::size_t size() const { return ids.size(); }

  friend bool operator==(const EncoderInput&, const EncoderInput&) = default;
};

/// Uncorrupted encoder input covering the whole sequence.
EncoderInput full_encoder_input(const TokenSequence& ts, const Vocab& vocab);

struct BertCorruption {
  std::vector<TokenId> ids;      // full-length corrupted sequence
  std::vector<TokenId> targets;  // original ids at plan.masked_positions
  int n_mask = 0;
  int n_keep = 0;
  int n_random = 0;
};

/// 80/10/10 corruption with exact counts by largest-remainder rounding.
BertCorruption bert_corrupt(const TokenSequence& ts, const MaskPlan& plan, const Vocab& vocab,
                            Rng& rng);

/// mae: masked positions removed, kept positions keep their original index.
/// with_mask: [MASK] substituted in place. bert_80_10_10: requires `rng`.
EncoderInput build_encoder_input(const TokenSequence& ts, const MaskPlan& plan, const Vocab& vocab,
                                 Rng* rng = nullptr);

struct DecoderSlot {
  bool mask_slot = false;
  int encoder_index = -1;  // row of the encoder output when !mask_slot

  friend bool operator==(const DecoderSlot&, const DecoderSlot&) = default;
};

struct DecoderInput {
  std::vector<DecoderSlot> slots;  // one per position 0..n-1
  std::vector<int> positions;

  std::size_t size() const { return slots.size(); }
};

/// In mae mode positions in M become mask slots and the others reference
/// encoder rows in order. In the other modes the encoder already saw the whole
/// sequence, so every slot references the encoder row at the same index.
DecoderInput build_decoder_input(const MaskPlan& plan, int n);

std::vector<TokenId> gather_targets(const TokenSequence& ts, const MaskPlan& plan);

/// Everything one forward/backward pretraining pass needs for a sequence.
struct PretrainExample {
  EncoderInput encoder;
  DecoderInput decoder;
  MaskPlan plan;
  std::vector<TokenId> targets;  // aligned with plan.masked_positions
};

PretrainExample make_pretrain_example(const TokenSequence& ts, const MaskPlan& plan,
                                      const Vocab& vocab, Rng& rng);

}  // namespace barcodemae
