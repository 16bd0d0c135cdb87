#include <bit>
#include <cstring>
#include <map>

#include "barcodemae/error.hpp"
#include "barcodemae/io.hpp"
#include "barcodemae/train.hpp"

// Binary container, all integers little-endian:
//   "BMAECKPT" | u32 version | u64 metadata length | metadata (key=value lines)
//   | params f32[] | adam m f32[] | adam v f32[] (tensor declaration order)
//   | u64 FNV-1a checksum of every preceding byte

namespace barcodemae {

namespace {

constexpr char kMagic[8] = {'B', 'M', 'A', 'E', 'C', 'K', 'P', 'T'};

std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t hash = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    hash ^= c;
    hash *= 0x100000001b3ULL;
  }
  return hash;
}

template <typename T>
void put_le(std::string& out, T value) {
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    out.push_back(static_cast<char>((static_cast<std::uint64_t>(value) >> (8 * i)) & 0xff));
  }
}

template <typename T>
T get_le(std::string_view bytes, std::size_t at) {
  std::uint64_t value = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    value |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[at + i])) << (8 * i);
  }
  return static_cast<T>(value);
}

void put_floats(std::string& out, std::span<const float> values) {
  for (float v : values) put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(v));
}

class Metadata {
 public:
  void set(const std::string& key, const std::string& value) {
    lines_ += key + '=' + value + '\n';
  }
  const std::string& text() const { return lines_; }

 private:
  std::string lines_;
};

std::map<std::string, std::string> parse_metadata(std::string_view text) {
  std::map<std::string, std::string> kv;
  for (std::string_view line : split(text, '\n')) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) throw CheckpointError("corrupt checkpoint metadata line");
    kv.emplace(std::string(line.substr(0, eq)), std::string(line.substr(eq + 1)));
  }
  return kv;
}

const std::string& need(const std::map<std::string, std::string>& kv, const std::string& key) {
  const auto it = kv.find(key);
  if (it == kv.end()) throw CheckpointError("checkpoint metadata lacks '" + key + "'");
  return it->second;
}

}  // namespace

std::string serialize_checkpoint(const Checkpoint& c) {
  const ModelConfig& m = c.model;
  const TrainConfig& t = c.train;
  const Vocab vocab(m.k);
  Metadata meta;
  meta.set("model.variant", std::string(to_string(m.variant)));
  meta.set("model.enc_layers", std::to_string(m.enc_layers));
  meta.set("model.enc_heads", std::to_string(m.enc_heads));
  meta.set("model.dec_layers", std::to_string(m.dec_layers));
  meta.set("model.dec_heads", std::to_string(m.dec_heads));
  meta.set("model.d_model", std::to_string(m.d_model));
  meta.set("model.d_ff", std::to_string(m.d_ff));
  meta.set("model.dropout", format_double(m.dropout));
  meta.set("model.positional", std::string(to_string(m.positional)));
  meta.set("model.tie_output_embeddings", m.tie_output_embeddings ? "1" : "0");
  meta.set("model.with_mask_bert", m.with_mask_bert ? "1" : "0");
  meta.set("tokenizer.k", std::to_string(m.k));
  meta.set("tokenizer.max_tokens", std::to_string(m.max_tokens));
  meta.set("vocab.size", std::to_string(vocab.size()));
  meta.set("vocab.unk", std::to_string(vocab.unk()));
  meta.set("vocab.mask", std::to_string(vocab.mask()));
  meta.set("vocab.pad", std::to_string(vocab.pad()));
  meta.set("train.epochs", std::to_string(t.epochs));
  meta.set("train.batch_size", std::to_string(t.batch_size));
  meta.set("train.max_lr", format_double(t.max_lr));
  meta.set("train.weight_decay", format_double(t.weight_decay));
  meta.set("train.mask_ratio", format_double(t.mask_ratio));
  meta.set("train.warmup_fraction", format_double(t.warmup_fraction));
  meta.set("train.grad_clip", format_double(t.grad_clip));
  meta.set("train.seed", std::to_string(t.seed));
  meta.set("state.epoch", std::to_string(c.epoch));
  meta.set("state.step", std::to_string(c.step));
  meta.set("optimizer.step", std::to_string(c.optimizer.step));
  meta.set("rng", c.rng_state);
  meta.set("history.count", std::to_string(c.history.size()));
  for (std::size_t i = 0; i < c.history.size(); ++i) {
    const EpochMetrics& h = c.history[i];
    meta.set("history." + std::to_string(i), std::to_string(h.epoch) + ' ' + std::to_string(h.step) +
                                                 ' ' + format_double(h.loss) + ' ' +
                                                 format_double(h.masked_acc) + ' ' + format_double(h.lr));
  }
  const auto& tensors = c.params.layout().tensors();
  meta.set("tensor.count", std::to_string(tensors.size()));
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    meta.set("tensor." + std::to_string(i),
             tensors[i].name + ' ' + std::to_string(tensors[i].rows) + ' ' + std::to_string(tensors[i].cols));
  }

  const std::size_t n = c.params.parameter_count();
  const bool has_moments = !c.optimizer.m.empty();
  if (has_moments && (c.optimizer.m.size() != n || c.optimizer.v.size() != n)) {
    throw CheckpointError("optimizer state does not match parameter count");
  }

  std::string out(kMagic, sizeof(kMagic));
  put_le<std::uint32_t>(out, Checkpoint::kFormatVersion);
  put_le<std::uint64_t>(out, meta.text().size());
  out += meta.text();
  out.reserve(out.size() + 3 * 4 * n + 8);
  put_floats(out, c.params.values());
  const std::vector<float> zeros(has_moments ? 0 : n, 0.0f);
  put_floats(out, has_moments ? std::span<const float>(c.optimizer.m) : std::span<const float>(zeros));
  put_floats(out, has_moments ? std::span<const float>(c.optimizer.v) : std::span<const float>(zeros));
  put_le<std::uint64_t>(out, fnv1a(out));
  return out;
}

Checkpoint deserialize_checkpoint(std::string_view bytes) {
  constexpr std::size_t kHeader = sizeof(kMagic) + 4 + 8;
  if (bytes.size() < kHeader + 8 || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw CheckpointError("not a barcodemae checkpoint (bad magic or truncated)");
  }
  const std::uint64_t stored = get_le<std::uint64_t>(bytes, bytes.size() - 8);
  if (stored != fnv1a(bytes.substr(0, bytes.size() - 8))) {
    throw CheckpointError("checkpoint checksum mismatch (corrupt or truncated file)");
  }
  const auto version = get_le<std::uint32_t>(bytes, sizeof(kMagic));
  if (version != Checkpoint::kFormatVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  }
  const auto meta_len = get_le<std::uint64_t>(bytes, sizeof(kMagic) + 4);
  if (kHeader + meta_len + 8 > bytes.size()) throw CheckpointError("checkpoint metadata overruns file");
  const auto kv = parse_metadata(bytes.substr(kHeader, meta_len));

  auto as_int = [&](const std::string& key) { return static_cast<int>(parse_int(need(kv, key))); };
  Checkpoint c;
  ModelConfig& m = c.model;
  m.variant = parse_variant(need(kv, "model.variant"));
  m.enc_layers = as_int("model.enc_layers");
  m.enc_heads = as_int("model.enc_heads");
  m.dec_layers = as_int("model.dec_layers");
  m.dec_heads = as_int("model.dec_heads");
  m.d_model = as_int("model.d_model");
  m.d_ff = as_int("model.d_ff");
  m.dropout = parse_double(need(kv, "model.dropout"));
  m.positional = parse_positional(need(kv, "model.positional"));
  m.tie_output_embeddings = need(kv, "model.tie_output_embeddings") == "1";
  m.with_mask_bert = need(kv, "model.with_mask_bert") == "1";
  m.k = as_int("tokenizer.k");
  m.max_tokens = as_int("tokenizer.max_tokens");
  m.validate();
  const Vocab vocab(m.k);
  if (as_int("vocab.size") != vocab.size() || as_int("vocab.unk") != vocab.unk() ||
      as_int("vocab.mask") != vocab.mask() || as_int("vocab.pad") != vocab.pad()) {
    throw CheckpointError("checkpoint vocabulary does not match k=" + std::to_string(m.k));
  }
  TrainConfig& t = c.train;
  t.epochs = as_int("train.epochs");
  t.batch_size = as_int("train.batch_size");
  t.max_lr = parse_double(need(kv, "train.max_lr"));
  t.weight_decay = parse_double(need(kv, "train.weight_decay"));
  t.mask_ratio = parse_double(need(kv, "train.mask_ratio"));
  t.warmup_fraction = parse_double(need(kv, "train.warmup_fraction"));
  t.grad_clip = parse_double(need(kv, "train.grad_clip"));
  t.seed = std::stoull(need(kv, "train.seed"));
  c.epoch = as_int("state.epoch");
  c.step = parse_int(need(kv, "state.step"));
  c.optimizer.step = parse_int(need(kv, "optimizer.step"));
  c.rng_state = need(kv, "rng");
  const int history = as_int("history.count");
  for (int i = 0; i < history; ++i) {
    const auto f = split(need(kv, "history." + std::to_string(i)), ' ');
    if (f.size() != 5) throw CheckpointError("corrupt history entry");
    c.history.push_back(EpochMetrics{static_cast<int>(parse_int(f[0])), parse_int(f[1]),
                                     parse_double(f[2]), parse_double(f[3]), parse_double(f[4])});
  }

  c.params = ModelParams<float>(m);
  const auto& tensors = c.params.layout().tensors();
  if (static_cast<std::size_t>(as_int("tensor.count")) != tensors.size()) {
    throw CheckpointError("checkpoint tensor table does not match the model config");
  }
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    const std::string expected =
        tensors[i].name + ' ' + std::to_string(tensors[i].rows) + ' ' + std::to_string(tensors[i].cols);
    if (need(kv, "tensor." + std::to_string(i)) != expected) {
      throw CheckpointError("checkpoint tensor " + std::to_string(i) + " does not match '" + expected + "'");
    }
  }
  const std::size_t n = c.params.parameter_count();
  std::size_t at = kHeader + meta_len;
  if (at + 3 * 4 * n + 8 != bytes.size()) throw CheckpointError("checkpoint tensor data has wrong length");
  auto read_into = [&](std::span<float> dst) {
    for (float& v : dst) {
      v = std::bit_cast<float>(get_le<std::uint32_t>(bytes, at));
      at += 4;
    }
  };
  read_into(c.params.values());
  c.optimizer.m.resize(n);
  c.optimizer.v.resize(n);
  read_into(c.optimizer.m);
  read_into(c.optimizer.v);
  return c;
}

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path) {
  write_file_atomic(path, serialize_checkpoint(checkpoint));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw CheckpointError("no such checkpoint: " + path.string());
  return deserialize_checkpoint(read_file(path));
}

}  // namespace barcodemae
