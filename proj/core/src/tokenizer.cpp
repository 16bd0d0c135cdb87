#include "barcodemae/tokenizer.hpp"

#include "barcodemae/error.hpp"
#include "barcodemae/random.hpp"

namespace barcodemae {

namespace {

int base_digit(char c) {
  switch (c) {
    case 'A': return 0;
    case 'C': return 1;
    case 'G': return 2;
    case 'T': return 3;
    default: return -1;
  }
}

}  // namespace

void TokenizerConfig::validate() const {
  if (k < 1 || k > 8) throw ConfigError("k must lie in [1,8], got " + std::to_string(k));
  if (max_tokens < 1) throw ConfigError("max_tokens must be >= 1");
}

Vocab::Vocab(int k) : k_(k), kmer_count_(0) {
  if (k < 1 || k > 8) throw ConfigError("k must lie in [1,8], got " + std::to_string(k));
  kmer_count_ = TokenId{1} << (2 * k);
}

TokenId Vocab::kmer_to_id(std::string_view kmer) const {
  if (static_cast<int>(kmer.size()) != k_) {
    throw ConfigError("k-mer '" + std::string(kmer) + "' has length " + std::to_string(kmer.size()) +
                      ", expected " + std::to_string(k_));
  }
  TokenId id = 0;
  for (char c : kmer) {
    const int d = base_digit(c);
    if (d < 0) return unk();
    id = id * 4 + d;
  }
  return id;
}

std::string Vocab::id_to_kmer(TokenId id) const {
  if (!is_kmer(id)) throw ConfigError("token id " + std::to_string(id) + " is not a k-mer");
  static constexpr char kBases[] = {'A', 'C', 'G', 'T'};
  std::string kmer(static_cast<std::size_t>(k_), 'A');
  for (int i = k_ - 1; i >= 0; --i) {
    kmer[static_cast<std::size_t>(i)] = kBases[id & 3];
    id >>= 2;
  }
  return kmer;
}

TokenSequence tokenize(std::string_view sequence, const TokenizerConfig& cfg, int offset) {
  cfg.validate();
  if (offset < 0 || offset >= cfg.k) {
    throw ConfigError("offset " + std::to_string(offset) + " outside [0," + std::to_string(cfg.k) +
                      ")");
  }
  const Vocab vocab(cfg.k);
  const std::size_t k = static_cast<std::size_t>(cfg.k);
  const std::size_t start = static_cast<std::size_t>(offset);
  if (sequence.size() < start + k) {
    throw DataError("sequence of length " + std::to_string(sequence.size()) +
                    " is too short for one k-mer at offset " + std::to_string(offset));
  }
  std::size_t n = (sequence.size() - start) / k;
  n = std::min(n, static_cast<std::size_t>(cfg.max_tokens));

  TokenSequence ts;
  ts.offset = offset;
  ts.ids.reserve(n);
  ts.positions.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    ts.ids.push_back(vocab.kmer_to_id(sequence.substr(start + i * k, k)));
    ts.positions.push_back(static_cast<int>(i));
  }
  return ts;
}

int sample_offset(const TokenizerConfig& cfg, Rng& rng) {
  return static_cast<int>(rng.uniform_index(static_cast<std::size_t>(cfg.k)));
}

std::string detokenize(const TokenSequence& ts, const Vocab& vocab) {
  std::string out;
  out.reserve(ts.size() * static_cast<std::size_t>(vocab.k()));
  for (TokenId id : ts.ids) {
    if (!vocab.is_kmer(id)) {
      throw DataError("cannot detokenize special token id " + std::to_string(id));
    }
    out += vocab.id_to_kmer(id);
  }
  return out;
}

PaddedSequence pad_or_truncate(const TokenSequence& ts, int max_tokens, const Vocab& vocab) {
  if (max_tokens < 1) throw ConfigError("max_tokens must be >= 1");
  const std::size_t target = static_cast<std::size_t>(max_tokens);
  const std::size_t kept = std::min(ts.size(), target);
  PaddedSequence out;
  out.tokens.offset = ts.offset;
  out.tokens.ids.assign(ts.ids.begin(), ts.ids.begin() + static_cast<std::ptrdiff_t>(kept));
  out.tokens.positions.assign(ts.positions.begin(),
                              ts.positions.begin() + static_cast<std::ptrdiff_t>(kept));
  out.valid.assign(kept, 1);
  out.tokens.ids.resize(target, vocab.pad());
  out.tokens.positions.resize(target, max_tokens);
  out.valid.resize(target, 0);
  return out;
}

}  // namespace barcodemae
