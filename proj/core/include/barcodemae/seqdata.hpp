#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace barcodemae {

enum class Partition {
  pretrain,
  seen_train,
  seen_val,
  seen_test,
  unseen_keys,
  unseen_val,
  unseen_test,
};

inline constexpr Partition kAllPartitions[] = {
    Partition::pretrain,   Partition::seen_train,  Partition::seen_val,   Partition::seen_test,
    Partition::unseen_keys, Partition::unseen_val, Partition::unseen_test,
};

std::string_view to_string(Partition partition);
Partition parse_partition(std::string_view name);

/// One specimen. Empty label strings mean "absent".
struct BarcodeRecord {
  std::string record_id;
  std::string sequence;
  std::string genus;
  std::string species;
  std::string bin_id;
  Partition partition = Partition::pretrain;

  friend bool operator==(const BarcodeRecord&, const BarcodeRecord&) = default;
};

enum class Provenance { file, synthetic };

/// Ordered, immutable-after-construction collection with unique record ids.
class RecordSet {
 public:
  RecordSet() = default;
  /// Validates every record and id uniqueness; throws DataError otherwise.
  explicit RecordSet(std::vector<BarcodeRecord> records, Provenance provenance = Provenance::file,
                     std::optional<std::uint64_t> seed = std::nullopt);

  const std::vector<BarcodeRecord>& records() const { return records_; }
  std::size_t size() const { return records_.size(); }
  bool empty() const { return records_.empty(); }
  const BarcodeRecord& operator[](std::size_t i) const { return records_[i]; }
  auto begin() const { return records_.begin(); }
  auto end() const { return records_.end(); }

  Provenance provenance() const { return provenance_; }
  std::optional<std::uint64_t> seed() const { return seed_; }

  friend bool operator==(const RecordSet&, const RecordSet&) = default;

 private:
  std::vector<BarcodeRecord> records_;
  Provenance provenance_ = Provenance::file;
  std::optional<std::uint64_t> seed_;
};

/// Upper-cases `sequence` and checks it against {A,C,G,T,N,-}.
/// Throws DataError naming the record and the offending character.
std::string normalize_sequence(std::string_view sequence, std::string_view record_id);

enum class RecordFormat { tsv, fasta };

RecordSet load_records(const std::filesystem::path& path, RecordFormat format);
RecordSet load_records(const std::filesystem::path& path);  // format from extension
RecordSet parse_tsv(std::string_view text);
RecordSet parse_fasta(std::string_view text);

std::string format_tsv(const RecordSet& set);
void save_records(const RecordSet& set, const std::filesystem::path& path);

struct SyntheticCorpusConfig {
  int n_genera = 4;
  int species_per_genus = 3;
  int records_per_species = 10;
  int seq_len = 658;
  double genus_divergence = 0.15;
  double species_divergence = 0.05;
  double noise_rate = 0.01;
  double unseen_species_fraction = 0.34;
  /// Share of every species' records tagged `pretrain`; the rest go to the
  /// labelled seen_* / unseen_* splits.
  double pretrain_fraction = 0.5;

  void validate() const;
};

/// Deterministic corpus with a root -> genus -> species -> record hierarchy.
RecordSet generate_synthetic(const SyntheticCorpusConfig& config, std::uint64_t seed);

RecordSet partition_view(const RecordSet& set, Partition partition);
RecordSet partition_view(const RecordSet& set, const std::vector<Partition>& partitions);

}  // namespace barcodemae
