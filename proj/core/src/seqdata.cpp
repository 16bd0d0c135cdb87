#include "barcodemae/seqdata.hpp"

#include <array>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <unordered_set>

#include "barcodemae/error.hpp"
#include "barcodemae/io.hpp"
#include "barcodemae/random.hpp"

namespace barcodemae {

namespace {

constexpr std::array<std::string_view, 7> kPartitionNames = {
    "pretrain", "seen_train", "seen_val", "seen_test", "unseen_keys", "unseen_val", "unseen_test",
};

constexpr std::string_view kTsvHeader = "record_id\tsequence\tgenus\tspecies\tbin_id\tpartition";

bool is_labelled_partition(Partition p) { return p != Partition::pretrain; }

void validate_record(const BarcodeRecord& r) {
  if (r.record_id.empty()) throw DataError("record with empty record_id");
  if (r.sequence.empty()) throw DataError("record '" + r.record_id + "' has an empty sequence");
  for (char c : r.sequence) {
    if (c != 'A' && c != 'C' && c != 'G' && c != 'T' && c != 'N' && c != '-') {
      throw DataError("record '" + r.record_id + "' contains illegal character '" +
                      std::string(1, c) + "'");
    }
  }
  if (is_labelled_partition(r.partition) && r.genus.empty()) {
    throw DataError("record '" + r.record_id + "' in partition " +
                    std::string(to_string(r.partition)) + " must carry a genus label");
  }
  for (const std::string* field : {&r.record_id, &r.genus, &r.species, &r.bin_id}) {
    if (field->find_first_of("\t\r\n") != std::string::npos) {
      throw DataError("record '" + r.record_id + "' has a field containing tab or newline");
    }
  }
}

std::string_view strip_cr(std::string_view line) {
  if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
  return line;
}

char substitute_base(char base, Rng& rng) {
  static constexpr std::array<char, 4> kBases = {'A', 'C', 'G', 'T'};
  std::array<char, 3> others{};
  std::size_t n = 0;
  for (char b : kBases) {
    if (b != base) others[n++] = b;
  }
  return others[rng.uniform_index(3)];
}

std::string mutate(const std::string& parent, double rate, Rng& rng) {
  std::string child = parent;
  for (char& c : child) {
    if (rng.bernoulli(rate)) c = substitute_base(c, rng);
  }
  return child;
}

std::string numbered(std::string_view prefix, int value, int width) {
  char buffer[32];
  std::snprintf(buffer, sizeof(buffer), "%0*d", width, value);
  return std::string(prefix) + buffer;
}

}  // namespace

std::string_view to_string(Partition partition) {
  return kPartitionNames[static_cast<std::size_t>(partition)];
}

Partition parse_partition(std::string_view name) {
  for (std::size_t i = 0; i < kPartitionNames.size(); ++i) {
    if (kPartitionNames[i] == name) return static_cast<Partition>(i);
  }
  throw DataError("unknown partition '" + std::string(name) + "'");
}

RecordSet::RecordSet(std::vector<BarcodeRecord> records, Provenance provenance,
                     std::optional<std::uint64_t> seed)
    : records_(std::move(records)), provenance_(provenance), seed_(seed) {
  std::unordered_set<std::string_view> ids;
  ids.reserve(records_.size());
  for (const auto& r : records_) {
    validate_record(r);
    if (!ids.insert(r.record_id).second) {
      throw DataError("duplicate record_id '" + r.record_id + "'");
    }
  }
}

std::string normalize_sequence(std::string_view sequence, std::string_view record_id) {
  std::string out;
  out.reserve(sequence.size());
  for (char c : sequence) {
    const char u = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
    if (u != 'A' && u != 'C' && u != 'G' && u != 'T' && u != 'N' && u != '-') {
      throw DataError("record '" + std::string(record_id) + "' contains illegal character '" +
                      std::string(1, c) + "'");
    }
    out.push_back(u);
  }
  return out;
}

RecordSet parse_tsv(std::string_view text) {
  std::vector<std::string_view> lines = split(text, '\n');
  if (!lines.empty() && lines.back().empty()) lines.pop_back();
  if (lines.empty()) throw DataError("line 1: missing TSV header");

  const auto header = split(strip_cr(lines[0]), '\t');
  int col_id = -1, col_seq = -1, col_genus = -1, col_species = -1, col_bin = -1, col_part = -1;
  for (std::size_t i = 0; i < header.size(); ++i) {
    const std::string_view h = header[i];
    const int idx = static_cast<int>(i);
    if (h == "record_id") col_id = idx;
    else if (h == "sequence") col_seq = idx;
    else if (h == "genus") col_genus = idx;
    else if (h == "species") col_species = idx;
    else if (h == "bin_id") col_bin = idx;
    else if (h == "partition") col_part = idx;
  }
  if (col_id < 0 || col_seq < 0) {
    throw DataError("line 1: header must name at least record_id and sequence");
  }

  std::vector<BarcodeRecord> records;
  records.reserve(lines.size() - 1);
  std::unordered_set<std::string> ids;
  for (std::size_t ln = 1; ln < lines.size(); ++ln) {
    const std::string_view line = strip_cr(lines[ln]);
    const std::string where = "line " + std::to_string(ln + 1);
    if (line.empty()) continue;
    const auto fields = split(line, '\t');
    if (fields.size() != header.size()) {
      throw DataError(where + ": expected " + std::to_string(header.size()) + " fields, found " +
                      std::to_string(fields.size()));
    }
    auto get = [&](int col) { return col < 0 ? std::string() : std::string(fields[col]); };
    BarcodeRecord r;
    r.record_id = get(col_id);
    if (r.record_id.empty()) throw DataError(where + ": empty record_id");
    if (!ids.insert(r.record_id).second) {
      throw DataError(where + ": duplicate record_id '" + r.record_id + "'");
    }
    r.sequence = normalize_sequence(fields[col_seq], r.record_id);
    if (r.sequence.empty()) throw DataError(where + ": empty sequence for '" + r.record_id + "'");
    r.genus = get(col_genus);
    r.species = get(col_species);
    r.bin_id = get(col_bin);
    const std::string part = get(col_part);
    try {
      r.partition = part.empty() ? Partition::pretrain : parse_partition(part);
    } catch (const DataError& e) {
      throw DataError(where + ": " + e.what());
    }
    records.push_back(std::move(r));
  }
  return RecordSet(std::move(records), Provenance::file);
}

RecordSet parse_fasta(std::string_view text) {
  std::vector<BarcodeRecord> records;
  BarcodeRecord* current = nullptr;
  const auto lines = split(text, '\n');
  for (std::size_t ln = 0; ln < lines.size(); ++ln) {
    const std::string_view line = strip_cr(lines[ln]);
    if (line.empty()) continue;
    if (line.front() == '>') {
      const auto fields = split(line.substr(1), '|');
      if (fields[0].empty() || fields.size() > 5) {
        throw DataError("line " + std::to_string(ln + 1) + ": malformed FASTA header");
      }
      BarcodeRecord r;
      r.record_id = std::string(fields[0]);
      if (fields.size() > 1) r.genus = std::string(fields[1]);
      if (fields.size() > 2) r.species = std::string(fields[2]);
      if (fields.size() > 3) r.bin_id = std::string(fields[3]);
      if (fields.size() > 4 && !fields[4].empty()) r.partition = parse_partition(fields[4]);
      records.push_back(std::move(r));
      current = &records.back();
    } else {
      if (current == nullptr) {
        throw DataError("line " + std::to_string(ln + 1) + ": sequence data before first header");
      }
      current->sequence += normalize_sequence(line, current->record_id);
    }
  }
  return RecordSet(std::move(records), Provenance::file);
}

RecordSet load_records(const std::filesystem::path& path, RecordFormat format) {
  if (!std::filesystem::exists(path)) throw DataError("no such file: " + path.string());
  const std::string text = read_file(path);
  return format == RecordFormat::tsv ? parse_tsv(text) : parse_fasta(text);
}

RecordSet load_records(const std::filesystem::path& path) {
  const std::string ext = path.extension().string();
  const bool fasta = ext == ".fa" || ext == ".fasta" || ext == ".fna";
  return load_records(path, fasta ? RecordFormat::fasta : RecordFormat::tsv);
}

std::string format_tsv(const RecordSet& set) {
  std::string out(kTsvHeader);
  out += '\n';
  for (const auto& r : set) {
    out += r.record_id;
    out += '\t';
    out += r.sequence;
    out += '\t';
    out += r.genus;
    out += '\t';
    out += r.species;
    out += '\t';
    out += r.bin_id;
    out += '\t';
    out += to_string(r.partition);
    out += '\n';
  }
  return out;
}

void save_records(const RecordSet& set, const std::filesystem::path& path) {
  write_file_atomic(path, format_tsv(set));
}

void SyntheticCorpusConfig::validate() const {
  if (n_genera < 1 || species_per_genus < 1 || records_per_species < 1 || seq_len < 1) {
    throw ConfigError("synthetic corpus counts must be positive");
  }
  auto unit = [](double v) { return v >= 0.0 && v <= 1.0; };
  if (!unit(genus_divergence) || !unit(species_divergence) || !unit(noise_rate)) {
    throw ConfigError("divergence and noise rates must lie in [0,1]");
  }
  if (!(species_divergence < genus_divergence)) {
    throw ConfigError("species_divergence must be < genus_divergence");
  }
  if (!(noise_rate < species_divergence)) {
    throw ConfigError("noise_rate must be < species_divergence");
  }
  if (!(unseen_species_fraction >= 0.0 && unseen_species_fraction < 1.0)) {
    throw ConfigError("unseen_species_fraction must lie in [0,1)");
  }
  if (!(pretrain_fraction >= 0.0 && pretrain_fraction < 1.0)) {
    throw ConfigError("pretrain_fraction must lie in [0,1)");
  }
}

RecordSet generate_synthetic(const SyntheticCorpusConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(seed);

  static constexpr std::array<char, 4> kBases = {'A', 'C', 'G', 'T'};
  std::string root(static_cast<std::size_t>(config.seq_len), 'A');
  for (char& c : root) c = kBases[rng.uniform_index(4)];

  const int n_species = config.species_per_genus;
  const int n_records = config.records_per_species;
  // Keep at least one seen species per genus and one labelled record per species.
  const int n_unseen = std::min(
      static_cast<int>(std::nearbyint(config.unseen_species_fraction * n_species)), n_species - 1);
  const int n_pretrain = std::min(
      static_cast<int>(std::nearbyint(config.pretrain_fraction * n_records)), n_records - 1);

  static constexpr Partition kSeenCycle[] = {Partition::seen_train, Partition::seen_train,
                                             Partition::seen_val, Partition::seen_test};
  static constexpr Partition kUnseenCycle[] = {Partition::unseen_keys, Partition::unseen_keys,
                                               Partition::unseen_val, Partition::unseen_test};

  std::vector<BarcodeRecord> records;
  records.reserve(static_cast<std::size_t>(config.n_genera) * n_species * n_records);
  for (int g = 0; g < config.n_genera; ++g) {
    const std::string genus_seq = mutate(root, config.genus_divergence, rng);
    const std::string genus = numbered("genus_", g, 3);

    std::vector<int> order(static_cast<std::size_t>(n_species));
    for (int s = 0; s < n_species; ++s) order[static_cast<std::size_t>(s)] = s;
    rng.shuffle(order);
    std::vector<bool> unseen(static_cast<std::size_t>(n_species), false);
    for (int i = 0; i < n_unseen; ++i) unseen[static_cast<std::size_t>(order[i])] = true;

    for (int s = 0; s < n_species; ++s) {
      const std::string species_seq = mutate(genus_seq, config.species_divergence, rng);
      const std::string species = genus + numbered("_sp", s, 3);
      const bool is_unseen = unseen[static_cast<std::size_t>(s)];
      for (int r = 0; r < n_records; ++r) {
        BarcodeRecord rec;
        rec.record_id = numbered("syn-g", g, 3) + numbered("-s", s, 3) + numbered("-r", r, 4);
        rec.sequence = mutate(species_seq, config.noise_rate, rng);
        rec.genus = genus;
        rec.species = species;
        rec.bin_id = species;
        if (r < n_pretrain) {
          rec.partition = Partition::pretrain;
        } else {
          const auto& cycle = is_unseen ? kUnseenCycle : kSeenCycle;
          rec.partition = cycle[(r - n_pretrain) % 4];
        }
        records.push_back(std::move(rec));
      }
    }
  }
  return RecordSet(std::move(records), Provenance::synthetic, seed);
}

RecordSet partition_view(const RecordSet& set, Partition partition) {
  return partition_view(set, std::vector<Partition>{partition});
}

RecordSet partition_view(const RecordSet& set, const std::vector<Partition>& partitions) {
  std::vector<BarcodeRecord> kept;
  for (const auto& r : set) {
    for (Partition p : partitions) {
      if (r.partition == p) {
        kept.push_back(r);
        break;
      }
    }
  }
  return RecordSet(std::move(kept), set.provenance(), set.seed());
}

}  // namespace barcodemae
