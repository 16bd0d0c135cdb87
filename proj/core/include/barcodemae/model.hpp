#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "barcodemae/masking.hpp"
#include "barcodemae/seqdata.hpp"
#include "barcodemae/tokenizer.hpp"

namespace barcodemae {

class Rng;

enum class Variant {
  barcode_mae,    ///< encoder never sees [MASK]; decoder reconstructs masked slots
  mae_with_mask,  ///< same encoder-decoder, standard in-place masking
  encoder_only,   ///< BERT-style encoder with the output head on top
};

enum class Positional { learned, sinusoidal };

std::string_view to_string(Variant variant);
Variant parse_variant(std::string_view name);  // accepts '-' or '_' separators
std::string_view to_string(Positional positional);
Positional parse_positional(std::string_view name);

struct ModelConfig {
  Variant variant = Variant::barcode_mae;
  int enc_layers = 2;
  int enc_heads = 2;
  int dec_layers = 2;
  int dec_heads = 2;
  int d_model = 64;
  int d_ff = 256;
  int k = 4;
  int max_tokens = 128;
  double dropout = 0.1;
  Positional positional = Positional::learned;
  bool tie_output_embeddings = false;
  /// with_mask variant: use 80/10/10 corruption instead of 100% [MASK].
  bool with_mask_bert = false;

  void validate() const;
  int vocab_size() const { return Vocab(k).size(); }
  TokenizerConfig tokenizer() const { return TokenizerConfig{k, max_tokens}; }
  /// Corruption the variant pretrains with.
  MaskMode mask_mode() const;
  /// "enc:L-H dec:M-J"
  std::string arch_string() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Parses "enc:L-H dec:M-J" into the four layer/head fields of `cfg`.
void apply_arch_string(std::string_view arch, ModelConfig& cfg);

struct TensorInfo {
  std::string name;
  int rows = 0;
  int cols = 0;
  std::size_t offset = 0;
  bool decay = true;  // false for layer-norm parameters

  std::size_t size() const { return static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols); }
};

struct LayerNormIndex {
  int gain = -1;
  int bias = -1;
};

struct BlockIndex {
  LayerNormIndex norm1;
  int wq, bq, wk, bk, wv, bv, wo, bo;
  LayerNormIndex norm2;
  int w1, b1, w2, b2;
};

/// Per-element optimizer flags.
enum ParamFlag : std::uint8_t { kDecay = 1, kFrozen = 2 };

/// Names, shapes and offsets of every learnable tensor inside one flat buffer.
class ParamLayout {
 public:
  ParamLayout() = default;
  explicit ParamLayout(const ModelConfig& cfg);

  const std::vector<TensorInfo>& tensors() const { return tensors_; }
  const TensorInfo& operator[](int index) const { return tensors_[static_cast<std::size_t>(index)]; }
  std::size_t size() const { return total_; }

  /// kDecay / kFrozen per scalar. The PAD embedding row is frozen.
  std::vector<std::uint8_t> element_flags(TokenId pad_id) const;

  int token_embedding = -1;
  int position_embedding = -1;  // -1 when sinusoidal
  std::vector<BlockIndex> encoder;
  LayerNormIndex encoder_norm;
  std::vector<BlockIndex> decoder;
  LayerNormIndex decoder_norm;  // unset for encoder_only
  int head_weight = -1;         // -1 when tied to the token embedding
  int head_bias = -1;

 private:
  int add(std::string name, int rows, int cols, bool decay = true);
  LayerNormIndex add_norm(const std::string& prefix, int d);
  BlockIndex add_block(const std::string& prefix, int d, int d_ff);

  std::vector<TensorInfo> tensors_;
  std::size_t total_ = 0;
};

template <typename Real>
using Matrix = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Real>
using RowVector = Eigen::Matrix<Real, 1, Eigen::Dynamic>;

/// All learnable tensors in one flat row-major buffer laid out by ParamLayout.
template <typename Real>
class ModelParams {
 public:
  using MatrixMap = Eigen::Map<Matrix<Real>>;
  using ConstMatrixMap = Eigen::Map<const Matrix<Real>>;

  ModelParams() = default;
  /// Zero-filled parameters for `cfg`.
  explicit ModelParams(const ModelConfig& cfg);

  const ModelConfig& config() const { return config_; }
  const ParamLayout& layout() const { return layout_; }
  const Vocab& vocab() const { return vocab_; }

  std::span<Real> values() { return values_; }
  std::span<const Real> values() const { return values_; }
  std::size_t parameter_count() const { return values_.size(); }

  MatrixMap tensor(int index);
  ConstMatrixMap tensor(int index) const;

  /// p_i: learned row or fixed sinusoid.
  RowVector<Real> position(int index) const;
  /// e_x
  RowVector<Real> token(TokenId id) const;

  template <typename Other>
  ModelParams<Other> cast() const {
    ModelParams<Other> out(config_);
    for (std::size_t i = 0; i < values_.size(); ++i) out.values()[i] = static_cast<Other>(values_[i]);
    return out;
  }

 private:
  ModelConfig config_;
  ParamLayout layout_;
  Vocab vocab_{1};
  std::vector<Real> values_;
  Matrix<Real> fixed_positions_;
};

/// Scaled-normal init (std 0.02), layer-norm gain 1 / bias 0, PAD row zero.
template <typename Real>
ModelParams<Real> init_params(const ModelConfig& cfg, std::uint64_t seed);

/// Closed-form learnable parameter count for `cfg`.
std::size_t expected_parameter_count(const ModelConfig& cfg);

template <typename Real>
struct EncoderOutput {
  /// One row per encoder input row (h^L after the final norm). PAD rows are zero.
  Matrix<Real> hidden;
};

/// Softmax weights per encoder layer and head over the padded input.
template <typename Real>
struct AttentionTrace {
  std::vector<std::vector<Matrix<Real>>> probs;  // [layer][head], n x n
};

template <typename Real>
EncoderOutput<Real> encoder_forward(const ModelParams<Real>& params, const EncoderInput& input,
                                    AttentionTrace<Real>* trace = nullptr);

/// Vocabulary logits at every decoder position, shape (n, vocab_size).
template <typename Real>
Matrix<Real> decoder_forward(const ModelParams<Real>& params, const EncoderOutput<Real>& encoded,
                             const DecoderInput& input);

/// Output head applied directly to encoder rows (encoder_only variant).
template <typename Real>
Matrix<Real> encoder_head_logits(const ModelParams<Real>& params, const EncoderOutput<Real>& encoded);

/// Mean cross-entropy over plan.masked_positions; logits has one row per position.
template <typename Real>
double mlm_loss(const Matrix<Real>& logits, const MaskPlan& plan, std::span<const TokenId> targets);

struct LossStats {
  double loss_sum = 0.0;  // summed cross-entropy over masked tokens
  std::int64_t count = 0;
  std::int64_t correct = 0;

  double mean() const { return count == 0 ? 0.0 : loss_sum / static_cast<double>(count); }
  double accuracy() const {
    return count == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(count);
  }
  LossStats& operator+=(const LossStats& other) {
    loss_sum += other.loss_sum;
    count += other.count;
    correct += other.correct;
    return *this;
  }
};

/// Pretraining loss for one example, dispatched by variant. No dropout.
template <typename Real>
LossStats forward_pretrain(const ModelParams<Real>& params, const PretrainExample& example);

/// Mean masked-token loss over a batch (token-weighted).
template <typename Real>
double forward_pretrain(const ModelParams<Real>& params, std::span<const PretrainExample> batch);

/// Forward plus reverse-mode pass. Adds scale * d(loss_sum)/d(theta) into
/// `grads` (same layout as params). Dropout is drawn from `dropout_rng` when
/// non-null and cfg.dropout > 0.
template <typename Real>
LossStats forward_backward(const ModelParams<Real>& params, const PretrainExample& example,
                           std::span<Real> grads, Real scale, Rng* dropout_rng);

/// Mean of encoder rows whose token is a k-mer or UNK (MASK and PAD excluded).
template <typename Real>
RowVector<Real> pool_embedding(const ModelParams<Real>& params, const EncoderInput& input);

/// Encoder over the full, uncorrupted sequence, then pooled. The decoder is never used.
template <typename Real>
RowVector<Real> embed_sequence(const ModelParams<Real>& params, const TokenSequence& ts);

/// N pooled embeddings aligned with record ids and labels.
struct EmbeddingMatrix {
  Matrix<double> vectors;
  std::vector<std::string> record_ids;
  std::vector<std::string> genus;
  std::vector<std::string> species;
  std::vector<std::string> bin_id;

  std::size_t rows() const { return record_ids.size(); }
  void validate() const;
};

/// Offset 0, no augmentation, rows in record order.
EmbeddingMatrix embed_corpus(const ModelParams<float>& params, const RecordSet& records);

std::string format_embedding_tsv(const EmbeddingMatrix& embeddings);
EmbeddingMatrix parse_embedding_tsv(std::string_view text);

}  // namespace barcodemae
