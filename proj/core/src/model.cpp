#include "barcodemae/model.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

#include "barcodemae/error.hpp"
#include "barcodemae/io.hpp"
#include "barcodemae/random.hpp"

namespace barcodemae {

// ---------------------------------------------------------------------------
// Configuration

std::string_view to_string(Variant variant) {
  switch (variant) {
    case Variant::barcode_mae: return "barcode_mae";
    case Variant::mae_with_mask: return "mae_with_mask";
    case Variant::encoder_only: return "encoder_only";
  }
  return "?";
}

Variant parse_variant(std::string_view name) {
  std::string norm(name);
  std::replace(norm.begin(), norm.end(), '-', '_');
  if (norm == "barcode_mae") return Variant::barcode_mae;
  if (norm == "mae_with_mask") return Variant::mae_with_mask;
  if (norm == "encoder_only") return Variant::encoder_only;
  throw ConfigError("unknown variant '" + std::string(name) + "'");
}

std::string_view to_string(Positional positional) {
  return positional == Positional::learned ? "learned" : "sinusoidal";
}

Positional parse_positional(std::string_view name) {
  if (name == "learned") return Positional::learned;
  if (name == "sinusoidal") return Positional::sinusoidal;
  throw ConfigError("unknown positional scheme '" + std::string(name) + "'");
}

void ModelConfig::validate() const {
  if (k < 1 || k > 8) throw ConfigError("k must lie in [1,8]");
  if (d_model < 1 || d_ff < 1 || max_tokens < 1) {
    throw ConfigError("d_model, d_ff and max_tokens must be positive");
  }
  if (enc_layers < 0 || dec_layers < 0) throw ConfigError("layer counts must be non-negative");
  if (enc_heads < 1 || d_model % enc_heads != 0) {
    throw ConfigError("d_model (" + std::to_string(d_model) + ") must be divisible by enc_heads (" +
                      std::to_string(enc_heads) + ")");
  }
  if (variant == Variant::encoder_only) {
    if (dec_layers != 0) throw ConfigError("encoder_only variant requires dec_layers == 0");
  } else if (dec_heads < 1 || d_model % dec_heads != 0) {
    throw ConfigError("d_model (" + std::to_string(d_model) + ") must be divisible by dec_heads (" +
                      std::to_string(dec_heads) + ")");
  }
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must lie in [0,1)");
}

MaskMode ModelConfig::mask_mode() const {
  switch (variant) {
    case Variant::barcode_mae: return MaskMode::mae;
    case Variant::mae_with_mask: return with_mask_bert ? MaskMode::bert_80_10_10 : MaskMode::with_mask;
    case Variant::encoder_only: return MaskMode::bert_80_10_10;
  }
  return MaskMode::mae;
}

std::string ModelConfig::arch_string() const {
  return "enc:" + std::to_string(enc_layers) + "-" + std::to_string(enc_heads) +
         " dec:" + std::to_string(dec_layers) + "-" + std::to_string(dec_heads);
}

void apply_arch_string(std::string_view arch, ModelConfig& cfg) {
  std::istringstream in{std::string(arch)};
  std::string token;
  bool seen_enc = false;
  bool seen_dec = false;
  while (in >> token) {
    const auto colon = token.find(':');
    const std::string part = colon == std::string::npos ? "" : token.substr(0, colon);
    const std::string spec = colon == std::string::npos ? "" : token.substr(colon + 1);
    const auto dash = spec.find('-');
    if ((part != "enc" && part != "dec") || dash == std::string::npos) {
      throw ConfigError("malformed architecture token '" + token + "' (expected enc:L-H or dec:M-J)");
    }
    int layers = 0;
    int heads = 0;
    try {
      layers = static_cast<int>(parse_int(spec.substr(0, dash)));
      heads = static_cast<int>(parse_int(spec.substr(dash + 1)));
    } catch (const ConfigError&) {
      throw ConfigError("malformed architecture token '" + token + "' (expected enc:L-H or dec:M-J)");
    }
    if (part == "enc") {
      cfg.enc_layers = layers;
      cfg.enc_heads = heads;
      seen_enc = true;
    } else {
      cfg.dec_layers = layers;
      cfg.dec_heads = heads;
      seen_dec = true;
    }
  }
  if (!seen_enc || !seen_dec) {
    throw ConfigError("architecture '" + std::string(arch) + "' must name both enc:L-H and dec:M-J");
  }
}

// ---------------------------------------------------------------------------
// Parameter layout

int ParamLayout::add(std::string name, int rows, int cols, bool decay) {
  TensorInfo info{std::move(name), rows, cols, total_, decay};
  total_ += info.size();
  tensors_.push_back(std::move(info));
  return static_cast<int>(tensors_.size()) - 1;
}

LayerNormIndex ParamLayout::add_norm(const std::string& prefix, int d) {
  LayerNormIndex idx;
  idx.gain = add(prefix + ".gain", 1, d, false);
  idx.bias = add(prefix + ".bias", 1, d, false);
  return idx;
}

BlockIndex ParamLayout::add_block(const std::string& prefix, int d, int d_ff) {
  BlockIndex b{};
  b.norm1 = add_norm(prefix + ".norm1", d);
  b.wq = add(prefix + ".attn.wq", d, d);
  b.bq = add(prefix + ".attn.bq", 1, d);
  b.wk = add(prefix + ".attn.wk", d, d);
  b.bk = add(prefix + ".attn.bk", 1, d);
  b.wv = add(prefix + ".attn.wv", d, d);
  b.bv = add(prefix + ".attn.bv", 1, d);
  b.wo = add(prefix + ".attn.wo", d, d);
  b.bo = add(prefix + ".attn.bo", 1, d);
  b.norm2 = add_norm(prefix + ".norm2", d);
  b.w1 = add(prefix + ".ffn.w1", d, d_ff);
  b.b1 = add(prefix + ".ffn.b1", 1, d_ff);
  b.w2 = add(prefix + ".ffn.w2", d_ff, d);
  b.b2 = add(prefix + ".ffn.b2", 1, d);
  return b;
}

ParamLayout::ParamLayout(const ModelConfig& cfg) {
  cfg.validate();
  const int d = cfg.d_model;
  const int vocab = cfg.vocab_size();
  token_embedding = add("token_embedding", vocab, d);
  if (cfg.positional == Positional::learned) {
    position_embedding = add("position_embedding", cfg.max_tokens, d);
  }
  for (int l = 0; l < cfg.enc_layers; ++l) {
    encoder.push_back(add_block("encoder." + std::to_string(l), d, cfg.d_ff));
  }
  encoder_norm = add_norm("encoder.norm", d);
  if (cfg.variant != Variant::encoder_only) {
    for (int l = 0; l < cfg.dec_layers; ++l) {
      decoder.push_back(add_block("decoder." + std::to_string(l), d, cfg.d_ff));
    }
    decoder_norm = add_norm("decoder.norm", d);
  }
  if (!cfg.tie_output_embeddings) head_weight = add("head.weight", d, vocab);
  head_bias = add("head.bias", 1, vocab);
}

std::vector<std::uint8_t> ParamLayout::element_flags(TokenId pad_id) const {
  std::vector<std::uint8_t> flags(total_, 0);
  for (const auto& t : tensors_) {
    if (t.decay) std::fill_n(flags.begin() + static_cast<std::ptrdiff_t>(t.offset), t.size(), kDecay);
  }
  const TensorInfo& emb = tensors_[static_cast<std::size_t>(token_embedding)];
  const std::size_t pad_start = emb.offset + static_cast<std::size_t>(pad_id) * emb.cols;
  std::fill_n(flags.begin() + static_cast<std::ptrdiff_t>(pad_start), emb.cols, kFrozen);
  return flags;
}

std::size_t expected_parameter_count(const ModelConfig& cfg) {
  cfg.validate();
  const std::size_t d = cfg.d_model;
  const std::size_t ff = cfg.d_ff;
  const std::size_t v = static_cast<std::size_t>(cfg.vocab_size());
  const std::size_t block = 4 * (d * d + d) + 2 * (2 * d) + (d * ff + ff) + (ff * d + d);
  std::size_t n = v * d;
  if (cfg.positional == Positional::learned) n += static_cast<std::size_t>(cfg.max_tokens) * d;
  n += static_cast<std::size_t>(cfg.enc_layers) * block + 2 * d;
  if (cfg.variant != Variant::encoder_only) {
    n += static_cast<std::size_t>(cfg.dec_layers) * block + 2 * d;
  }
  if (!cfg.tie_output_embeddings) n += d * v;
  n += v;
  return n;
}

// ---------------------------------------------------------------------------
// Parameters

template <typename Real>
ModelParams<Real>::ModelParams(const ModelConfig& cfg)
    : config_(cfg), layout_(cfg), vocab_(cfg.k), values_(layout_.size(), Real(0)) {
  if (cfg.positional == Positional::sinusoidal) {
    fixed_positions_.resize(cfg.max_tokens, cfg.d_model);
    for (int pos = 0; pos < cfg.max_tokens; ++pos) {
      for (int i = 0; i < cfg.d_model; ++i) {
        const double rate = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / cfg.d_model);
        const double angle = pos * rate;
        fixed_positions_(pos, i) = static_cast<Real>(i % 2 == 0 ? std::sin(angle) : std::cos(angle));
      }
    }
  }
}

template <typename Real>
typename ModelParams<Real>::MatrixMap ModelParams<Real>::tensor(int index) {
  const TensorInfo& t = layout_[index];
  return MatrixMap(values_.data() + t.offset, t.rows, t.cols);
}

template <typename Real>
typename ModelParams<Real>::ConstMatrixMap ModelParams<Real>::tensor(int index) const {
  const TensorInfo& t = layout_[index];
  return ConstMatrixMap(values_.data() + t.offset, t.rows, t.cols);
}

template <typename Real>
RowVector<Real> ModelParams<Real>::position(int index) const {
  if (index < 0 || index >= config_.max_tokens) {
    throw ConfigError("position index " + std::to_string(index) + " exceeds max_tokens " +
                      std::to_string(config_.max_tokens));
  }
  if (layout_.position_embedding < 0) return fixed_positions_.row(index);
  return tensor(layout_.position_embedding).row(index);
}

template <typename Real>
RowVector<Real> ModelParams<Real>::token(TokenId id) const {
  return tensor(layout_.token_embedding).row(id);
}

template <typename Real>
ModelParams<Real> init_params(const ModelConfig& cfg, std::uint64_t seed) {
  ModelParams<Real> params(cfg);
  Rng rng(seed);
  const ParamLayout& layout = params.layout();
  for (int i = 0; i < static_cast<int>(layout.tensors().size()); ++i) {
    const TensorInfo& t = layout[i];
    auto values = params.values().subspan(t.offset, t.size());
    const bool is_norm = !t.decay;
    const bool is_gain = is_norm && t.name.ends_with(".gain");
    const bool is_bias = t.rows == 1 && !is_norm;
    for (Real& v : values) {
      if (is_gain) v = Real(1);
      else if (is_norm || is_bias) v = Real(0);
      else v = static_cast<Real>(0.02 * rng.normal());
    }
  }
  params.tensor(layout.token_embedding).row(params.vocab().pad()).setZero();
  return params;
}

// ---------------------------------------------------------------------------
// Layers

namespace {

constexpr double kNormEps = 1e-5;

template <typename Real>
using ColVector = Eigen::Matrix<Real, Eigen::Dynamic, 1>;

template <typename Real>
class GradBuffer {
 public:
  GradBuffer(std::span<Real> values, const ParamLayout& layout) : values_(values), layout_(layout) {}

  Eigen::Map<Matrix<Real>> tensor(int index) {
    const TensorInfo& t = layout_[index];
    return Eigen::Map<Matrix<Real>>(values_.data() + t.offset, t.rows, t.cols);
  }

 private:
  std::span<Real> values_;
  const ParamLayout& layout_;
};

template <typename Real>
struct NormCache {
  Matrix<Real> normalized;
  ColVector<Real> inv_std;
};

template <typename Real>
Matrix<Real> norm_forward(const Matrix<Real>& x, const ModelParams<Real>& p, LayerNormIndex idx,
                          NormCache<Real>& cache) {
  const auto gain = p.tensor(idx.gain);
  const auto bias = p.tensor(idx.bias);
  const Eigen::Index n = x.rows();
  const Eigen::Index d = x.cols();
  cache.normalized.resize(n, d);
  cache.inv_std.resize(n);
  Matrix<Real> out(n, d);
  for (Eigen::Index r = 0; r < n; ++r) {
    const Real mean = x.row(r).mean();
    const auto centered = (x.row(r).array() - mean).eval();
    const Real var = centered.square().mean();
    const Real inv = Real(1) / std::sqrt(var + static_cast<Real>(kNormEps));
    cache.inv_std(r) = inv;
    cache.normalized.row(r) = centered * inv;
    out.row(r) = cache.normalized.row(r).array() * gain.row(0).array() + bias.row(0).array();
  }
  return out;
}

template <typename Real>
Matrix<Real> norm_backward(const Matrix<Real>& dy, const ModelParams<Real>& p, LayerNormIndex idx,
                           const NormCache<Real>& cache, GradBuffer<Real>& grads) {
  const auto gain = p.tensor(idx.gain);
  grads.tensor(idx.gain) += (dy.array() * cache.normalized.array()).colwise().sum().matrix();
  grads.tensor(idx.bias) += dy.colwise().sum();
  const Eigen::Index d = dy.cols();
  Matrix<Real> dx(dy.rows(), d);
  for (Eigen::Index r = 0; r < dy.rows(); ++r) {
    const RowVector<Real> dxhat = (dy.row(r).array() * gain.row(0).array()).matrix();
    const Real sum = dxhat.sum();
    const Real dot = dxhat.dot(cache.normalized.row(r));
    dx.row(r) = (cache.inv_std(r) / static_cast<Real>(d)) *
                (static_cast<Real>(d) * dxhat.array() - sum - cache.normalized.row(r).array() * dot)
                    .matrix();
  }
  return dx;
}

template <typename Real>
Real gelu(Real x) {
  return Real(0.5) * x * (Real(1) + std::erf(x / std::numbers::sqrt2_v<Real>));
}

template <typename Real>
Real gelu_grad(Real x) {
  const Real cdf = Real(0.5) * (Real(1) + std::erf(x / std::numbers::sqrt2_v<Real>));
  const Real pdf = std::exp(Real(-0.5) * x * x) * std::numbers::inv_sqrtpi_v<Real> /
                   std::numbers::sqrt2_v<Real>;
  return cdf + x * pdf;
}

template <typename Real>
Matrix<Real> affine(const Matrix<Real>& x, const ModelParams<Real>& p, int w, int b) {
  Matrix<Real> y = x * p.tensor(w);
  y.rowwise() += p.tensor(b).row(0);
  return y;
}

/// Inverted dropout mask; empty when inactive.
template <typename Real>
Matrix<Real> dropout_mask(Eigen::Index rows, Eigen::Index cols, double rate, Rng* rng) {
  if (rng == nullptr || rate <= 0.0) return {};
  Matrix<Real> mask(rows, cols);
  const Real keep_scale = static_cast<Real>(1.0 / (1.0 - rate));
  for (Eigen::Index i = 0; i < mask.size(); ++i) {
    mask.data()[i] = rng->bernoulli(rate) ? Real(0) : keep_scale;
  }
  return mask;
}

template <typename Real>
struct BlockCache {
  Matrix<Real> input;
  NormCache<Real> norm1;
  Matrix<Real> normed1;
  Matrix<Real> q, k, v;
  std::vector<Matrix<Real>> probs;
  Matrix<Real> context;
  Matrix<Real> attn_drop;
  Matrix<Real> mid;
  NormCache<Real> norm2;
  Matrix<Real> normed2;
  Matrix<Real> pre_act;
  Matrix<Real> act;
  Matrix<Real> ffn_drop;
};

template <typename Real>
Matrix<Real> block_forward(const ModelParams<Real>& p, const BlockIndex& b, int heads,
                           const Matrix<Real>& x, BlockCache<Real>& c, Rng* rng, double rate) {
  const Eigen::Index n = x.rows();
  const Eigen::Index d = x.cols();
  const Eigen::Index dh = d / heads;
  const Real scale = Real(1) / std::sqrt(static_cast<Real>(dh));

  c.input = x;
  c.normed1 = norm_forward(x, p, b.norm1, c.norm1);
  c.q = affine(c.normed1, p, b.wq, b.bq);
  c.k = affine(c.normed1, p, b.wk, b.bk);
  c.v = affine(c.normed1, p, b.wv, b.bv);
  c.context.resize(n, d);
  c.probs.resize(static_cast<std::size_t>(heads));
  for (int h = 0; h < heads; ++h) {
    const Eigen::Index col = h * dh;
    Matrix<Real> scores = (c.q.middleCols(col, dh) * c.k.middleCols(col, dh).transpose()) * scale;
    for (Eigen::Index r = 0; r < n; ++r) {
      const Real top = scores.row(r).maxCoeff();
      scores.row(r) = (scores.row(r).array() - top).exp().matrix();
      scores.row(r) /= scores.row(r).sum();
    }
    c.context.middleCols(col, dh) = scores * c.v.middleCols(col, dh);
    c.probs[static_cast<std::size_t>(h)] = std::move(scores);
  }
  Matrix<Real> attn_out = affine(c.context, p, b.wo, b.bo);
  c.attn_drop = dropout_mask<Real>(n, d, rate, rng);
  if (c.attn_drop.size() != 0) attn_out.array() *= c.attn_drop.array();
  c.mid = x + attn_out;

  c.normed2 = norm_forward(c.mid, p, b.norm2, c.norm2);
  c.pre_act = affine(c.normed2, p, b.w1, b.b1);
  c.act = c.pre_act.unaryExpr([](Real u) { return gelu(u); });
  Matrix<Real> ffn_out = affine(c.act, p, b.w2, b.b2);
  c.ffn_drop = dropout_mask<Real>(n, d, rate, rng);
  if (c.ffn_drop.size() != 0) ffn_out.array() *= c.ffn_drop.array();
  return c.mid + ffn_out;
}

template <typename Real>
void accumulate_affine(const Matrix<Real>& x, const Matrix<Real>& dy, int w, int b,
                       GradBuffer<Real>& grads) {
  grads.tensor(w).noalias() += x.transpose() * dy;
  grads.tensor(b) += dy.colwise().sum();
}

template <typename Real>
Matrix<Real> block_backward(const ModelParams<Real>& p, const BlockIndex& b, int heads,
                            const Matrix<Real>& dout, const BlockCache<Real>& c,
                            GradBuffer<Real>& grads) {
  const Eigen::Index d = dout.cols();
  const Eigen::Index dh = d / heads;
  const Real scale = Real(1) / std::sqrt(static_cast<Real>(dh));

  // Feed-forward branch.
  Matrix<Real> dffn = dout;
  if (c.ffn_drop.size() != 0) dffn.array() *= c.ffn_drop.array();
  accumulate_affine(c.act, dffn, b.w2, b.b2, grads);
  Matrix<Real> dpre = dffn * p.tensor(b.w2).transpose();
  dpre.array() *= c.pre_act.unaryExpr([](Real u) { return gelu_grad(u); }).array();
  accumulate_affine(c.normed2, dpre, b.w1, b.b1, grads);
  const Matrix<Real> dnormed2 = dpre * p.tensor(b.w1).transpose();
  Matrix<Real> dmid = dout + norm_backward(dnormed2, p, b.norm2, c.norm2, grads);

  // Attention branch.
  Matrix<Real> dattn = dmid;
  if (c.attn_drop.size() != 0) dattn.array() *= c.attn_drop.array();
  accumulate_affine(c.context, dattn, b.wo, b.bo, grads);
  const Matrix<Real> dcontext = dattn * p.tensor(b.wo).transpose();

  Matrix<Real> dq(c.q.rows(), d), dk(c.k.rows(), d), dv(c.v.rows(), d);
  for (int h = 0; h < heads; ++h) {
    const Eigen::Index col = h * dh;
    const Matrix<Real>& probs = c.probs[static_cast<std::size_t>(h)];
    const Matrix<Real> dctx = dcontext.middleCols(col, dh);
    Matrix<Real> dprobs = dctx * c.v.middleCols(col, dh).transpose();
    dv.middleCols(col, dh) = probs.transpose() * dctx;
    const ColVector<Real> row_dot = (dprobs.array() * probs.array()).rowwise().sum();
    Matrix<Real> dscores = (probs.array() * (dprobs.colwise() - row_dot).array()).matrix() * scale;
    dq.middleCols(col, dh) = dscores * c.k.middleCols(col, dh);
    dk.middleCols(col, dh) = dscores.transpose() * c.q.middleCols(col, dh);
  }
  accumulate_affine(c.normed1, dq, b.wq, b.bq, grads);
  accumulate_affine(c.normed1, dk, b.wk, b.bk, grads);
  accumulate_affine(c.normed1, dv, b.wv, b.bv, grads);
  const Matrix<Real> dnormed1 = dq * p.tensor(b.wq).transpose() + dk * p.tensor(b.wk).transpose() +
                                dv * p.tensor(b.wv).transpose();
  return dmid + norm_backward(dnormed1, p, b.norm1, c.norm1, grads);
}

template <typename Real>
struct StackCache {
  std::vector<BlockCache<Real>> blocks;
  NormCache<Real> final_norm;
};

template <typename Real>
Matrix<Real> stack_forward(const ModelParams<Real>& p, const std::vector<BlockIndex>& blocks,
                           int heads, LayerNormIndex final_norm, Matrix<Real> x,
                           StackCache<Real>& cache, Rng* rng, double rate) {
  cache.blocks.resize(blocks.size());
  for (std::size_t l = 0; l < blocks.size(); ++l) {
    x = block_forward(p, blocks[l], heads, x, cache.blocks[l], rng, rate);
  }
  return norm_forward(x, p, final_norm, cache.final_norm);
}

template <typename Real>
Matrix<Real> stack_backward(const ModelParams<Real>& p, const std::vector<BlockIndex>& blocks,
                            int heads, LayerNormIndex final_norm, const Matrix<Real>& dout,
                            const StackCache<Real>& cache, GradBuffer<Real>& grads) {
  Matrix<Real> dx = norm_backward(dout, p, final_norm, cache.final_norm, grads);
  for (std::size_t l = blocks.size(); l-- > 0;) {
    dx = block_backward(p, blocks[l], heads, dx, cache.blocks[l], grads);
  }
  return dx;
}

/// Rows of `input` that are not PAD, in order.
std::vector<Eigen::Index> valid_rows(const EncoderInput& input) {
  std::vector<Eigen::Index> rows;
  rows.reserve(input.size());
  for (std::size_t i = 0; i < input.size(); ++i) {
    if (input.valid.empty() || input.valid[i]) rows.push_back(static_cast<Eigen::Index>(i));
  }
  return rows;
}

template <typename Real>
Matrix<Real> embed_inputs(const ModelParams<Real>& p, const EncoderInput& input,
                          const std::vector<Eigen::Index>& rows) {
  const ModelConfig& cfg = p.config();
  Matrix<Real> x(static_cast<Eigen::Index>(rows.size()), cfg.d_model);
  for (std::size_t c = 0; c < rows.size(); ++c) {
    const auto r = static_cast<std::size_t>(rows[c]);
    const TokenId id = input.ids[r];
    if (id < 0 || id >= p.vocab().size()) {
      throw ConfigError("token id " + std::to_string(id) + " outside vocabulary");
    }
    const int pos = input.positions[r];
    if (pos < 0 || pos >= cfg.max_tokens) {
      throw ConfigError("position " + std::to_string(pos) + " overflows max_tokens " +
                        std::to_string(cfg.max_tokens));
    }
    x.row(static_cast<Eigen::Index>(c)) = p.token(id) + p.position(pos);
  }
  return x;
}

template <typename Real>
Matrix<Real> head_forward(const ModelParams<Real>& p, const Matrix<Real>& z) {
  const ParamLayout& layout = p.layout();
  Matrix<Real> logits = layout.head_weight >= 0
                            ? Matrix<Real>(z * p.tensor(layout.head_weight))
                            : Matrix<Real>(z * p.tensor(layout.token_embedding).transpose());
  logits.rowwise() += p.tensor(layout.head_bias).row(0);
  return logits;
}

template <typename Real>
Matrix<Real> head_backward(const ModelParams<Real>& p, const Matrix<Real>& z,
                           const Matrix<Real>& dlogits, GradBuffer<Real>& grads) {
  const ParamLayout& layout = p.layout();
  grads.tensor(layout.head_bias) += dlogits.colwise().sum();
  if (layout.head_weight >= 0) {
    grads.tensor(layout.head_weight).noalias() += z.transpose() * dlogits;
    return dlogits * p.tensor(layout.head_weight).transpose();
  }
  grads.tensor(layout.token_embedding).noalias() += dlogits.transpose() * z;
  return dlogits * p.tensor(layout.token_embedding);
}

template <typename Real, typename Row>
void add_position_grad(const ModelParams<Real>& p, GradBuffer<Real>& grads, int pos, const Row& g) {
  if (p.layout().position_embedding >= 0) grads.tensor(p.layout().position_embedding).row(pos) += g;
}

void check_variant_mode(Variant variant, MaskMode mode) {
  const bool ok = variant == Variant::barcode_mae ? mode == MaskMode::mae : mode != MaskMode::mae;
  if (!ok) {
    throw ConfigError("variant " + std::string(to_string(variant)) + " cannot train on " +
                      std::string(to_string(mode)) + " mask plans");
  }
}

template <typename Real>
LossStats run_example(const ModelParams<Real>& p, const PretrainExample& ex, GradBuffer<Real>* grads,
                      Real scale, Rng* rng) {
  const ModelConfig& cfg = p.config();
  const ParamLayout& layout = p.layout();
  const Vocab& vocab = p.vocab();
  check_variant_mode(cfg.variant, ex.plan.mode);
  if (ex.plan.masked_positions.empty()) throw ConfigError("pretraining example has no masked tokens");
  if (ex.targets.size() != ex.plan.masked_positions.size()) {
    throw ConfigError("targets do not align with masked positions");
  }
  const double rate = rng != nullptr ? cfg.dropout : 0.0;

  // Encoder over non-PAD rows.
  const auto rows = valid_rows(ex.encoder);
  std::vector<Eigen::Index> compact(ex.encoder.size(), -1);
  for (std::size_t c = 0; c < rows.size(); ++c) compact[static_cast<std::size_t>(rows[c])] = static_cast<Eigen::Index>(c);
  if (cfg.variant == Variant::barcode_mae) {
    for (TokenId id : ex.encoder.ids) {
      if (id == vocab.mask()) throw ConfigError("[MASK] reached the barcode_mae encoder");
    }
  }
  StackCache<Real> enc_cache;
  const Matrix<Real> encoded = stack_forward(p, layout.encoder, cfg.enc_heads, layout.encoder_norm,
                                             embed_inputs(p, ex.encoder, rows), enc_cache, rng, rate);

  const Eigen::Index m = static_cast<Eigen::Index>(ex.plan.masked_positions.size());
  Matrix<Real> selected(m, cfg.d_model);
  StackCache<Real> dec_cache;
  const bool has_decoder = cfg.variant != Variant::encoder_only;
  if (has_decoder) {
    const Eigen::Index n = static_cast<Eigen::Index>(ex.decoder.size());
    Matrix<Real> dec_in(n, cfg.d_model);
    for (Eigen::Index i = 0; i < n; ++i) {
      const DecoderSlot& slot = ex.decoder.slots[static_cast<std::size_t>(i)];
      const RowVector<Real> pos = p.position(ex.decoder.positions[static_cast<std::size_t>(i)]);
      if (slot.mask_slot) {
        dec_in.row(i) = p.token(vocab.mask()) + pos;
      } else {
        const Eigen::Index row = compact.at(static_cast<std::size_t>(slot.encoder_index));
        if (row < 0) throw ConfigError("decoder slot references a PAD encoder row");
        dec_in.row(i) = encoded.row(row) + pos;
      }
    }
    const Matrix<Real> decoded = stack_forward(p, layout.decoder, cfg.dec_heads, layout.decoder_norm,
                                               std::move(dec_in), dec_cache, rng, rate);
    for (Eigen::Index j = 0; j < m; ++j) {
      selected.row(j) = decoded.row(ex.plan.masked_positions[static_cast<std::size_t>(j)]);
    }
  } else {
    for (Eigen::Index j = 0; j < m; ++j) {
      const Eigen::Index row = compact.at(static_cast<std::size_t>(ex.plan.masked_positions[static_cast<std::size_t>(j)]));
      if (row < 0) throw ConfigError("masked position is PAD");
      selected.row(j) = encoded.row(row);
    }
  }

  Matrix<Real> logits = head_forward(p, selected);
  LossStats stats;
  Matrix<Real> dlogits(m, logits.cols());
  for (Eigen::Index j = 0; j < m; ++j) {
    const TokenId target = ex.targets[static_cast<std::size_t>(j)];
    Eigen::Index best = 0;
    const Real top = logits.row(j).maxCoeff(&best);
    const auto shifted = (logits.row(j).array() - top).exp().eval();
    const Real total = shifted.sum();
    stats.loss_sum += static_cast<double>(std::log(total) - (logits(j, target) - top));
    stats.count += 1;
    stats.correct += best == target ? 1 : 0;
    if (grads != nullptr) {
      dlogits.row(j) = (shifted / total).matrix() * scale;
      dlogits(j, target) -= scale;
    }
  }
  if (!std::isfinite(stats.loss_sum)) throw DivergenceError("non-finite pretraining loss");
  if (grads == nullptr) return stats;

  const Matrix<Real> dselected = head_backward(p, selected, dlogits, *grads);
  Matrix<Real> dencoded = Matrix<Real>::Zero(encoded.rows(), encoded.cols());
  if (has_decoder) {
    Matrix<Real> ddecoded = Matrix<Real>::Zero(static_cast<Eigen::Index>(ex.decoder.size()), cfg.d_model);
    for (Eigen::Index j = 0; j < m; ++j) {
      ddecoded.row(ex.plan.masked_positions[static_cast<std::size_t>(j)]) += dselected.row(j);
    }
    const Matrix<Real> ddec_in = stack_backward(p, layout.decoder, cfg.dec_heads, layout.decoder_norm,
                                                ddecoded, dec_cache, *grads);
    auto dtoken = grads->tensor(layout.token_embedding);
    for (Eigen::Index i = 0; i < ddec_in.rows(); ++i) {
      const DecoderSlot& slot = ex.decoder.slots[static_cast<std::size_t>(i)];
      add_position_grad(p, *grads, ex.decoder.positions[static_cast<std::size_t>(i)], ddec_in.row(i));
      if (slot.mask_slot) {
        dtoken.row(vocab.mask()) += ddec_in.row(i);
      } else {
        dencoded.row(compact[static_cast<std::size_t>(slot.encoder_index)]) += ddec_in.row(i);
      }
    }
  } else {
    for (Eigen::Index j = 0; j < m; ++j) {
      dencoded.row(compact[static_cast<std::size_t>(ex.plan.masked_positions[static_cast<std::size_t>(j)])]) +=
          dselected.row(j);
    }
  }
  const Matrix<Real> dinput = stack_backward(p, layout.encoder, cfg.enc_heads, layout.encoder_norm,
                                             dencoded, enc_cache, *grads);
  auto dtoken = grads->tensor(layout.token_embedding);
  for (std::size_t c = 0; c < rows.size(); ++c) {
    const auto r = static_cast<std::size_t>(rows[c]);
    dtoken.row(ex.encoder.ids[r]) += dinput.row(static_cast<Eigen::Index>(c));
    add_position_grad(p, *grads, ex.encoder.positions[r], dinput.row(static_cast<Eigen::Index>(c)));
  }
  return stats;
}

}  // namespace

// ---------------------------------------------------------------------------
// Public forward passes

template <typename Real>
EncoderOutput<Real> encoder_forward(const ModelParams<Real>& params, const EncoderInput& input,
                                    AttentionTrace<Real>* trace) {
  const ModelConfig& cfg = params.config();
  const ParamLayout& layout = params.layout();
  if (input.positions.size() != input.ids.size() ||
      (!input.valid.empty() && input.valid.size() != input.ids.size())) {
    throw ConfigError("encoder input fields have inconsistent lengths");
  }
  const auto rows = valid_rows(input);
  StackCache<Real> cache;
  const Matrix<Real> compact = stack_forward(params, layout.encoder, cfg.enc_heads, layout.encoder_norm,
                                             embed_inputs(params, input, rows), cache, nullptr, 0.0);
  if (!compact.allFinite()) throw DivergenceError("non-finite encoder activations");

  const Eigen::Index n = static_cast<Eigen::Index>(input.size());
  EncoderOutput<Real> out;
  out.hidden = Matrix<Real>::Zero(n, cfg.d_model);
  for (std::size_t c = 0; c < rows.size(); ++c) out.hidden.row(rows[c]) = compact.row(static_cast<Eigen::Index>(c));

  if (trace != nullptr) {
    trace->probs.assign(cache.blocks.size(), {});
    for (std::size_t l = 0; l < cache.blocks.size(); ++l) {
      for (const Matrix<Real>& probs : cache.blocks[l].probs) {
        Matrix<Real> full = Matrix<Real>::Zero(n, n);
        for (std::size_t a = 0; a < rows.size(); ++a) {
          for (std::size_t b = 0; b < rows.size(); ++b) {
            full(rows[a], rows[b]) = probs(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b));
          }
        }
        trace->probs[l].push_back(std::move(full));
      }
    }
  }
  return out;
}

template <typename Real>
Matrix<Real> decoder_forward(const ModelParams<Real>& params, const EncoderOutput<Real>& encoded,
                             const DecoderInput& input) {
  const ModelConfig& cfg = params.config();
  if (cfg.variant == Variant::encoder_only) throw ConfigError("encoder_only model has no decoder");
  const Eigen::Index n = static_cast<Eigen::Index>(input.size());
  if (input.positions.size() != input.slots.size()) throw ConfigError("decoder input shape mismatch");
  Matrix<Real> dec_in(n, cfg.d_model);
  for (Eigen::Index i = 0; i < n; ++i) {
    const DecoderSlot& slot = input.slots[static_cast<std::size_t>(i)];
    const RowVector<Real> pos = params.position(input.positions[static_cast<std::size_t>(i)]);
    if (slot.mask_slot) {
      dec_in.row(i) = params.token(params.vocab().mask()) + pos;
    } else {
      if (slot.encoder_index < 0 || slot.encoder_index >= encoded.hidden.rows()) {
        throw ConfigError("decoder slot " + std::to_string(i) + " references encoder row " +
                          std::to_string(slot.encoder_index) + " of " +
                          std::to_string(encoded.hidden.rows()));
      }
      dec_in.row(i) = encoded.hidden.row(slot.encoder_index) + pos;
    }
  }
  StackCache<Real> cache;
  const ParamLayout& layout = params.layout();
  const Matrix<Real> decoded = stack_forward(params, layout.decoder, cfg.dec_heads, layout.decoder_norm,
                                             std::move(dec_in), cache, nullptr, 0.0);
  return head_forward(params, decoded);
}

template <typename Real>
Matrix<Real> encoder_head_logits(const ModelParams<Real>& params, const EncoderOutput<Real>& encoded) {
  return head_forward(params, encoded.hidden);
}

template <typename Real>
double mlm_loss(const Matrix<Real>& logits, const MaskPlan& plan, std::span<const TokenId> targets) {
  if (plan.masked_positions.empty()) throw ConfigError("mlm_loss: no masked positions");
  if (targets.size() != plan.masked_positions.size()) {
    throw ConfigError("mlm_loss: targets do not align with masked positions");
  }
  double total = 0.0;
  for (std::size_t j = 0; j < targets.size(); ++j) {
    const Eigen::Index row = plan.masked_positions[j];
    if (row >= logits.rows()) throw ConfigError("mlm_loss: masked position outside logits");
    const auto values = logits.row(row).template cast<double>().eval();
    const double top = values.maxCoeff();
    const double lse = top + std::log((values.array() - top).exp().sum());
    total += lse - values(targets[j]);
  }
  return total / static_cast<double>(targets.size());
}

template <typename Real>
LossStats forward_pretrain(const ModelParams<Real>& params, const PretrainExample& example) {
  return run_example<Real>(params, example, nullptr, Real(1), nullptr);
}

template <typename Real>
double forward_pretrain(const ModelParams<Real>& params, std::span<const PretrainExample> batch) {
  LossStats total;
  for (const auto& ex : batch) total += forward_pretrain(params, ex);
  return total.mean();
}

template <typename Real>
LossStats forward_backward(const ModelParams<Real>& params, const PretrainExample& example,
                           std::span<Real> grads, Real scale, Rng* dropout_rng) {
  if (grads.size() != params.parameter_count()) throw ConfigError("gradient buffer size mismatch");
  GradBuffer<Real> buffer(grads, params.layout());
  return run_example<Real>(params, example, &buffer, scale, dropout_rng);
}

template <typename Real>
RowVector<Real> pool_embedding(const ModelParams<Real>& params, const EncoderInput& input) {
  const EncoderOutput<Real> out = encoder_forward(params, input);
  const Vocab& vocab = params.vocab();
  RowVector<Real> sum = RowVector<Real>::Zero(params.config().d_model);
  int count = 0;
  for (std::size_t i = 0; i < input.size(); ++i) {
    const TokenId id = input.ids[i];
    const bool valid = input.valid.empty() || input.valid[i];
    if (valid && (vocab.is_kmer(id) || id == vocab.unk())) {
      sum += out.hidden.row(static_cast<Eigen::Index>(i));
      ++count;
    }
  }
  if (count == 0) throw DataError("sequence has no poolable tokens");
  return sum / static_cast<Real>(count);
}

template <typename Real>
RowVector<Real> embed_sequence(const ModelParams<Real>& params, const TokenSequence& ts) {
  return pool_embedding(params, full_encoder_input(ts, params.vocab()));
}

// ---------------------------------------------------------------------------
// Corpus embeddings

void EmbeddingMatrix::validate() const {
  const std::size_t n = record_ids.size();
  if (static_cast<std::size_t>(vectors.rows()) != n || genus.size() != n || species.size() != n ||
      bin_id.size() != n) {
    throw DataError("embedding matrix rows do not align with labels");
  }
  if (!vectors.allFinite()) throw DivergenceError("embedding matrix has non-finite entries");
}

EmbeddingMatrix embed_corpus(const ModelParams<float>& params, const RecordSet& records) {
  const TokenizerConfig tok = params.config().tokenizer();
  EmbeddingMatrix out;
  out.vectors.resize(static_cast<Eigen::Index>(records.size()), params.config().d_model);
  for (std::size_t i = 0; i < records.size(); ++i) {
    const BarcodeRecord& r = records[i];
    try {
      const RowVector<float> v = embed_sequence(params, tokenize(r.sequence, tok, 0));
      out.vectors.row(static_cast<Eigen::Index>(i)) = v.cast<double>();
    } catch (const std::exception& e) {
      throw DataError("record '" + r.record_id + "': " + e.what());
    }
    out.record_ids.push_back(r.record_id);
    out.genus.push_back(r.genus);
    out.species.push_back(r.species);
    out.bin_id.push_back(r.bin_id);
  }
  out.validate();
  return out;
}

std::string format_embedding_tsv(const EmbeddingMatrix& e) {
  e.validate();
  std::string out = "record_id\tgenus\tspecies\tbin_id";
  for (Eigen::Index c = 0; c < e.vectors.cols(); ++c) out += "\tv" + std::to_string(c);
  out += '\n';
  for (std::size_t i = 0; i < e.rows(); ++i) {
    out += e.record_ids[i] + '\t' + e.genus[i] + '\t' + e.species[i] + '\t' + e.bin_id[i];
    for (Eigen::Index c = 0; c < e.vectors.cols(); ++c) {
      out += '\t';
      out += format_double(e.vectors(static_cast<Eigen::Index>(i), c));
    }
    out += '\n';
  }
  return out;
}

EmbeddingMatrix parse_embedding_tsv(std::string_view text) {
  auto lines = split(text, '\n');
  if (!lines.empty() && lines.back().empty()) lines.pop_back();
  if (lines.empty()) throw DataError("embedding TSV is empty");
  const auto header = split(lines[0], '\t');
  if (header.size() < 4 || header[0] != "record_id") throw DataError("line 1: bad embedding header");
  const Eigen::Index dims = static_cast<Eigen::Index>(header.size() - 4);
  EmbeddingMatrix e;
  e.vectors.resize(static_cast<Eigen::Index>(lines.size() - 1), dims);
  for (std::size_t ln = 1; ln < lines.size(); ++ln) {
    const auto f = split(lines[ln], '\t');
    if (f.size() != header.size()) throw DataError("line " + std::to_string(ln + 1) + ": wrong field count");
    e.record_ids.emplace_back(f[0]);
    e.genus.emplace_back(f[1]);
    e.species.emplace_back(f[2]);
    e.bin_id.emplace_back(f[3]);
    for (Eigen::Index c = 0; c < dims; ++c) {
      e.vectors(static_cast<Eigen::Index>(ln - 1), c) = parse_double(f[static_cast<std::size_t>(c) + 4]);
    }
  }
  e.validate();
  return e;
}

// ---------------------------------------------------------------------------
// Explicit instantiations

#define BARCODEMAE_INSTANTIATE(Real)                                                              \
  template class ModelParams<Real>;                                                                \
  template ModelParams<Real> init_params<Real>(const ModelConfig&, std::uint64_t);                 \
  template EncoderOutput<Real> encoder_forward<Real>(const ModelParams<Real>&, const EncoderInput&, \
                                                     AttentionTrace<Real>*);                        \
  template Matrix<Real> decoder_forward<Real>(const ModelParams<Real>&, const EncoderOutput<Real>&, \
                                              const DecoderInput&);                                 \
  template Matrix<Real> encoder_head_logits<Real>(const ModelParams<Real>&,                        \
                                                  const EncoderOutput<Real>&);                      \
  template double mlm_loss<Real>(const Matrix<Real>&, const MaskPlan&, std::span<const TokenId>);  \
  template LossStats forward_pretrain<Real>(const ModelParams<Real>&, const PretrainExample&);      \
  template double forward_pretrain<Real>(const ModelParams<Real>&,                                 \
                                         std::span<const PretrainExample>);                         \
  template LossStats forward_backward<Real>(const ModelParams<Real>&, const PretrainExample&,      \
                                            std::span<Real>, Real, Rng*);                           \
  template RowVector<Real> pool_embedding<Real>(const ModelParams<Real>&, const EncoderInput&);    \
  template RowVector<Real> embed_sequence<Real>(const ModelParams<Real>&, const TokenSequence&);

BARCODEMAE_INSTANTIATE(float)
BARCODEMAE_INSTANTIATE(double)

#undef BARCODEMAE_INSTANTIATE

}  // namespace barcodemae
