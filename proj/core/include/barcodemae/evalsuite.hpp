#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "barcodemae/model.hpp"
#include "barcodemae/seqdata.hpp"

namespace barcodemae {

enum class LabelLevel { genus, species, bin };

std::string_view to_string(LabelLevel level);
LabelLevel parse_label_level(std::string_view name);

/// Labels of `e` at `level`.
const std::vector<std::string>& labels_at(const EmbeddingMatrix& e, LabelLevel level);

/// Rows whose label at `level` is non-empty.
EmbeddingMatrix labelled_rows(const EmbeddingMatrix& e, LabelLevel level);

struct LabelAccuracy {
  std::size_t correct = 0;
  std::size_t total = 0;
};

struct ProbeResult {
  double accuracy = 0.0;
  std::size_t correct = 0;
  std::size_t n_queries = 0;
  std::map<std::string, LabelAccuracy> per_label;  // keyed by the query's true label
  std::vector<std::size_t> nearest;                // reference row chosen per query
  std::vector<std::string> predicted;
};

/// 1-NN by cosine similarity; ties go to the lowest reference index.
ProbeResult knn_probe(const EmbeddingMatrix& reference, const EmbeddingMatrix& query,
                      LabelLevel level = LabelLevel::genus);

/// Interface for the dimensionality reduction step of zero-shot clustering.
class Reducer {
 public:
  virtual ~Reducer() = default;
  virtual Matrix<double> reduce(const Matrix<double>& data, int target_dim) const = 0;
};

/// Mean-centred principal-component projection. Each component's
/// largest-magnitude loading is made positive.
class PcaReducer final : public Reducer {
 public:
  Matrix<double> reduce(const Matrix<double>& data, int target_dim) const override;
};

Matrix<double> reduce_dims(const Matrix<double>& data, int target_dim = 50);

/// One agglomeration step in scipy linkage style: clusters `left` < `right`
/// (ids >= N denote earlier merges), Ward cost, and merged size.
struct Merge {
  int left = 0;
  int right = 0;
  double cost = 0.0;
  int size = 0;
};

/// Ward linkage on L2-normalised rows, cut at n_clusters. Cluster ids are
/// numbered by first appearance in row order. `merges`, when given, receives
/// the full merge sequence down to the cut.
std::vector<int> agglomerative_cluster(const Matrix<double>& data, int n_clusters,
                                       std::vector<Merge>* merges = nullptr);

/// Adjusted mutual information, natural log, arithmetic-mean normaliser,
/// expectation under the permutation (hypergeometric) model.
double ami(std::span<const int> labels_a, std::span<const int> labels_b);
double ami(std::span<const std::string> labels_a, std::span<const std::string> labels_b);

/// Dense 0..K-1 codes in first-appearance order.
std::vector<int> encode_labels(std::span<const std::string> labels);

struct ClusterResult {
  double ami = 0.0;
  int n_clusters = 0;
  std::vector<std::string> record_ids;  // canonical (sorted) order
  std::vector<int> assignment;          // aligned with record_ids
};

struct ZscOptions {
  int target_dim = 50;
  const Reducer* reducer = nullptr;  // defaults to PcaReducer
};

/// Zero-shot BIN reconstruction: embed -> reduce -> Ward -> AMI against bin
/// labels. Records are processed in record_id order, so the result depends on
/// the input only as a set.
ClusterResult bin_reconstruction_eval(const ModelParams<float>& params, const RecordSet& records,
                                      const ZscOptions& options = {});
ClusterResult cluster_embeddings(const EmbeddingMatrix& embeddings, const ZscOptions& options = {});

/// 2ab/(a+b); 0 when either side is 0.
double harmonic_mean(double a, double b);

enum class CorruptionMode { mask_substitute, delete_tokens };

std::string_view to_string(CorruptionMode mode);
CorruptionMode parse_corruption_mode(std::string_view name);

struct RobustnessPoint {
  double drop_ratio = 0.0;
  double accuracy = 0.0;
};

struct RobustnessCurve {
  CorruptionMode mode = CorruptionMode::delete_tokens;
  std::vector<RobustnessPoint> points;
  std::vector<std::string> warnings;
};

/// Default sweep grid {0.0, 0.1, ..., 0.9}.
std::vector<double> default_ratios();

/// Parses "a:b:step" or a comma list.
std::vector<double> parse_ratios(std::string_view text);

/// Corrupts query sequences at each ratio (at least one token is always kept),
/// re-embeds them and runs the 1-NN probe against clean reference embeddings.
RobustnessCurve robustness_sweep(const ModelParams<float>& params, const RecordSet& reference,
                                 const RecordSet& query, std::span<const double> ratios,
                                 CorruptionMode mode, std::uint64_t seed,
                                 LabelLevel level = LabelLevel::genus);

std::string format_probe_tsv(const ProbeResult& result, LabelLevel level);
std::string format_cluster_tsv(const ClusterResult& result);
std::string format_curve_tsv(const std::vector<RobustnessCurve>& curves);

}  // namespace barcodemae
