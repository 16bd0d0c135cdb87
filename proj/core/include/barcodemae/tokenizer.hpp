#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace barcodemae {

class Rng;

using TokenId = std::int32_t;

struct TokenizerConfig {
  int k = 4;
  int max_tokens = 128;

  void validate() const;
  friend bool operator==(const TokenizerConfig&, const TokenizerConfig&) = default;
};

/// Non-overlapping k-mer vocabulary.
///
/// Ids 0..4^k-1 are k-mers in lexicographic A<C<G<T order (base-4 digits,
/// most significant first), followed by UNK = 4^k, MASK = 4^k+1 and
/// PAD = 4^k+2.
class Vocab {
 public:
  explicit Vocab(int k);

  int k() const { return k_; }
  TokenId kmer_count() const { return kmer_count_; }
  TokenId size() const { return kmer_count_ + 3; }
  TokenId unk() const { return kmer_count_; }
  TokenId mask() const { return kmer_count_ + 1; }
  TokenId pad() const { return kmer_count_ + 2; }

  bool is_kmer(TokenId id) const { return id >= 0 && id < kmer_count_; }
  bool is_special(TokenId id) const { return id >= kmer_count_ && id < size(); }

  /// Lexicographic index, or UNK if any character is outside ACGT.
  TokenId kmer_to_id(std::string_view kmer) const;
  std::string id_to_kmer(TokenId id) const;

  friend bool operator==(const Vocab&, const Vocab&) = default;

 private:
  int k_;
  TokenId kmer_count_;
};

struct TokenSequence {
  std::vector<TokenId> ids;
  std::vector<int> positions;
  int offset = 0;

  std::size_t size() const { return ids.size(); }
  friend bool operator==(const TokenSequence&, const TokenSequence&) = default;
};

/// Drops `offset` leading nucleotides, then emits floor((len - offset) / k)
/// k-mers capped at cfg.max_tokens. Positions are 0..n-1.
TokenSequence tokenize(std::string_view sequence, const TokenizerConfig& cfg, int offset = 0);

/// Frame-shift augmentation: uniform over [0, k).
int sample_offset(const TokenizerConfig& cfg, Rng& rng);

std::string detokenize(const TokenSequence& ts, const Vocab& vocab);

struct PaddedSequence {
  TokenSequence tokens;
  std::vector<std::uint8_t> valid;
};

/// Sentinel position carried by PAD slots.
PaddedSequence pad_or_truncate(const TokenSequence& ts, int max_tokens, const Vocab& vocab);

}  // namespace barcodemae
