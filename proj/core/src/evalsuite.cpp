#include "barcodemae/evalsuite.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <unordered_map>

#include "barcodemae/error.hpp"
#include "barcodemae/io.hpp"
#include "barcodemae/random.hpp"

namespace barcodemae {

std::string_view to_string(LabelLevel level) {
  switch (level) {
    case LabelLevel::genus: return "genus";
    case LabelLevel::species: return "species";
    case LabelLevel::bin: return "bin";
  }
  return "?";
}

LabelLevel parse_label_level(std::string_view name) {
  if (name == "genus") return LabelLevel::genus;
  if (name == "species") return LabelLevel::species;
  if (name == "bin" || name == "bin_id") return LabelLevel::bin;
  throw ConfigError("unknown label level '" + std::string(name) + "'");
}

const std::vector<std::string>& labels_at(const EmbeddingMatrix& e, LabelLevel level) {
  switch (level) {
    case LabelLevel::genus: return e.genus;
    case LabelLevel::species: return e.species;
    case LabelLevel::bin: return e.bin_id;
  }
  return e.genus;
}

EmbeddingMatrix labelled_rows(const EmbeddingMatrix& e, LabelLevel level) {
  const auto& labels = labels_at(e, level);
  std::vector<Eigen::Index> keep;
  for (std::size_t i = 0; i < e.rows(); ++i) {
    if (!labels[i].empty()) keep.push_back(static_cast<Eigen::Index>(i));
  }
  EmbeddingMatrix out;
  out.vectors.resize(static_cast<Eigen::Index>(keep.size()), e.vectors.cols());
  for (std::size_t r = 0; r < keep.size(); ++r) {
    const auto i = static_cast<std::size_t>(keep[r]);
    out.vectors.row(static_cast<Eigen::Index>(r)) = e.vectors.row(keep[r]);
    out.record_ids.push_back(e.record_ids[i]);
    out.genus.push_back(e.genus[i]);
    out.species.push_back(e.species[i]);
    out.bin_id.push_back(e.bin_id[i]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// 1-NN probe

namespace {

std::vector<double> row_norms(const EmbeddingMatrix& e) {
  std::vector<double> norms(e.rows());
  for (std::size_t i = 0; i < e.rows(); ++i) {
    norms[i] = e.vectors.row(static_cast<Eigen::Index>(i)).norm();
    if (!(norms[i] > 0.0)) {
      throw DataError("record '" + e.record_ids[i] + "' has a zero-norm embedding");
    }
  }
  return norms;
}

}  // namespace

ProbeResult knn_probe(const EmbeddingMatrix& reference_in, const EmbeddingMatrix& query_in,
                      LabelLevel level) {
  reference_in.validate();
  query_in.validate();
  const EmbeddingMatrix reference = labelled_rows(reference_in, level);
  const EmbeddingMatrix query = labelled_rows(query_in, level);
  if (reference.rows() == 0 || query.rows() == 0) {
    throw DataError("knn_probe needs non-empty labelled reference and query sets");
  }
  if (reference.vectors.cols() != query.vectors.cols()) {
    throw DataError("reference and query embeddings differ in dimension");
  }
  const auto ref_norms = row_norms(reference);
  const auto query_norms = row_norms(query);
  const auto& ref_labels = labels_at(reference, level);
  const auto& query_labels = labels_at(query, level);

  ProbeResult result;
  result.n_queries = query.rows();
  for (std::size_t q = 0; q < query.rows(); ++q) {
    const auto qv = query.vectors.row(static_cast<Eigen::Index>(q));
    std::size_t best = 0;
    double best_sim = -std::numeric_limits<double>::infinity();
    for (std::size_t r = 0; r < reference.rows(); ++r) {
      const double sim = qv.dot(reference.vectors.row(static_cast<Eigen::Index>(r))) /
                         (query_norms[q] * ref_norms[r]);
      if (sim > best_sim) {
        best_sim = sim;
        best = r;
      }
    }
    const bool hit = ref_labels[best] == query_labels[q];
    result.nearest.push_back(best);
    result.predicted.push_back(ref_labels[best]);
    result.correct += hit ? 1 : 0;
    LabelAccuracy& acc = result.per_label[query_labels[q]];
    acc.total += 1;
    acc.correct += hit ? 1 : 0;
  }
  result.accuracy = static_cast<double>(result.correct) / static_cast<double>(result.n_queries);
  return result;
}

// ---------------------------------------------------------------------------
// Dimensionality reduction

Matrix<double> PcaReducer::reduce(const Matrix<double>& data, int target_dim) const {
  const Eigen::Index n = data.rows();
  const Eigen::Index d = data.cols();
  if (n < 2) throw DataError("reduce_dims needs at least 2 rows");
  if (target_dim < 1 || target_dim > d || target_dim > n) {
    throw ConfigError("reduce_dims: target_dim " + std::to_string(target_dim) +
                      " must lie in [1, min(N=" + std::to_string(n) + ", d=" + std::to_string(d) + ")]");
  }
  const RowVector<double> mean = data.colwise().mean();
  const Matrix<double> centred = data.rowwise() - mean;
  const Eigen::MatrixXd cov = (centred.transpose() * centred) / static_cast<double>(n - 1);
  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
  if (solver.info() != Eigen::Success) throw DivergenceError("eigendecomposition failed");

  Eigen::MatrixXd components(d, target_dim);
  for (int c = 0; c < target_dim; ++c) {
    // Eigenvalues come back ascending.
    Eigen::VectorXd v = solver.eigenvectors().col(d - 1 - c);
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0.0) v = -v;
    components.col(c) = v;
  }
  return centred * components;
}

Matrix<double> reduce_dims(const Matrix<double>& data, int target_dim) {
  return PcaReducer().reduce(data, target_dim);
}

// ---------------------------------------------------------------------------
// Ward agglomeration

std::vector<int> agglomerative_cluster(const Matrix<double>& data, int n_clusters,
                                       std::vector<Merge>* merges) {
  const int n = static_cast<int>(data.rows());
  if (n_clusters < 1) throw ConfigError("n_clusters must be >= 1");
  if (n_clusters > n) {
    throw ConfigError("n_clusters (" + std::to_string(n_clusters) + ") exceeds row count (" +
                      std::to_string(n) + ")");
  }
  Matrix<double> x = data;
  for (int i = 0; i < n; ++i) {
    const double norm = x.row(i).norm();
    if (norm > 0.0) x.row(i) /= norm;
  }

  // Ward merge cost n_a n_b / (n_a + n_b) * |c_a - c_b|^2, updated by Lance-Williams.
  Eigen::MatrixXd cost(n, n);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) cost(i, j) = 0.5 * (x.row(i) - x.row(j)).squaredNorm();
  }
  std::vector<int> size(static_cast<std::size_t>(n), 1);
  std::vector<int> cluster_id(static_cast<std::size_t>(n));
  std::vector<int> owner(static_cast<std::size_t>(n));  // slot holding each point
  std::vector<bool> active(static_cast<std::size_t>(n), true);
  std::iota(cluster_id.begin(), cluster_id.end(), 0);
  std::iota(owner.begin(), owner.end(), 0);
  if (merges != nullptr) merges->clear();

  for (int step = 0; step < n - n_clusters; ++step) {
    int best_a = -1;
    int best_b = -1;
    double best = std::numeric_limits<double>::infinity();
    for (int a = 0; a < n; ++a) {
      if (!active[static_cast<std::size_t>(a)]) continue;
      for (int b = a + 1; b < n; ++b) {
        if (active[static_cast<std::size_t>(b)] && cost(a, b) < best) {
          best = cost(a, b);
          best_a = a;
          best_b = b;
        }
      }
    }
    const double na = size[static_cast<std::size_t>(best_a)];
    const double nb = size[static_cast<std::size_t>(best_b)];
    for (int k = 0; k < n; ++k) {
      if (!active[static_cast<std::size_t>(k)] || k == best_a || k == best_b) continue;
      const double nk = size[static_cast<std::size_t>(k)];
      const double updated =
          ((na + nk) * cost(k, best_a) + (nb + nk) * cost(k, best_b) - nk * best) / (na + nb + nk);
      cost(k, best_a) = updated;
      cost(best_a, k) = updated;
    }
    const int merged_size = static_cast<int>(na + nb);
    if (merges != nullptr) {
      const int left = cluster_id[static_cast<std::size_t>(best_a)];
      const int right = cluster_id[static_cast<std::size_t>(best_b)];
      merges->push_back(Merge{std::min(left, right), std::max(left, right), best, merged_size});
    }
    size[static_cast<std::size_t>(best_a)] = merged_size;
    cluster_id[static_cast<std::size_t>(best_a)] = n + step;
    active[static_cast<std::size_t>(best_b)] = false;
    for (int& o : owner) {
      if (o == best_b) o = best_a;
    }
  }

  std::vector<int> label_of_slot(static_cast<std::size_t>(n), -1);
  std::vector<int> assignment(static_cast<std::size_t>(n));
  int next = 0;
  for (int i = 0; i < n; ++i) {
    int& label = label_of_slot[static_cast<std::size_t>(owner[static_cast<std::size_t>(i)])];
    if (label < 0) label = next++;
    assignment[static_cast<std::size_t>(i)] = label;
  }
  return assignment;
}

// ---------------------------------------------------------------------------
// Adjusted mutual information

std::vector<int> encode_labels(std::span<const std::string> labels) {
  std::unordered_map<std::string, int> codes;
  std::vector<int> out;
  out.reserve(labels.size());
  for (const auto& l : labels) {
    out.push_back(codes.emplace(l, static_cast<int>(codes.size())).first->second);
  }
  return out;
}

namespace {

std::vector<int> dense(std::span<const int> labels) {
  std::unordered_map<int, int> codes;
  std::vector<int> out;
  out.reserve(labels.size());
  for (int l : labels) out.push_back(codes.emplace(l, static_cast<int>(codes.size())).first->second);
  return out;
}

}  // namespace

double ami(std::span<const int> labels_a, std::span<const int> labels_b) {
  if (labels_a.size() != labels_b.size()) throw ConfigError("ami: labelings differ in length");
  if (labels_a.empty()) throw ConfigError("ami: empty labelings");
  const std::vector<int> a = dense(labels_a);
  const std::vector<int> b = dense(labels_b);
  const int ka = *std::max_element(a.begin(), a.end()) + 1;
  const int kb = *std::max_element(b.begin(), b.end()) + 1;
  if (ka == 1 || kb == 1) return 0.0;
  if (a == b) return 1.0;

  const double n = static_cast<double>(a.size());
  std::vector<double> rows(static_cast<std::size_t>(ka), 0.0);
  std::vector<double> cols(static_cast<std::size_t>(kb), 0.0);
  std::vector<double> table(static_cast<std::size_t>(ka * kb), 0.0);
  for (std::size_t i = 0; i < a.size(); ++i) {
    rows[static_cast<std::size_t>(a[i])] += 1.0;
    cols[static_cast<std::size_t>(b[i])] += 1.0;
    table[static_cast<std::size_t>(a[i] * kb + b[i])] += 1.0;
  }

  double mi = 0.0;
  for (int i = 0; i < ka; ++i) {
    for (int j = 0; j < kb; ++j) {
      const double nij = table[static_cast<std::size_t>(i * kb + j)];
      if (nij > 0.0) {
        mi += nij / n * std::log(n * nij / (rows[static_cast<std::size_t>(i)] * cols[static_cast<std::size_t>(j)]));
      }
    }
  }
  auto entropy = [n](const std::vector<double>& counts) {
    double h = 0.0;
    for (double c : counts) h -= c / n * std::log(c / n);
    return h;
  };
  const double ha = entropy(rows);
  const double hb = entropy(cols);

  // Expected MI under the hypergeometric model.
  const double lg_n = std::lgamma(n + 1.0);
  double emi = 0.0;
  for (double ai : rows) {
    for (double bj : cols) {
      const double lo = std::max(1.0, ai + bj - n);
      const double hi = std::min(ai, bj);
      const double base = std::lgamma(ai + 1.0) + std::lgamma(bj + 1.0) +
                          std::lgamma(n - ai + 1.0) + std::lgamma(n - bj + 1.0) - lg_n;
      for (double nij = lo; nij <= hi; nij += 1.0) {
        const double log_p = base - std::lgamma(nij + 1.0) - std::lgamma(ai - nij + 1.0) -
                             std::lgamma(bj - nij + 1.0) - std::lgamma(n - ai - bj + nij + 1.0);
        emi += nij / n * std::log(n * nij / (ai * bj)) * std::exp(log_p);
      }
    }
  }
  const double denominator = 0.5 * (ha + hb) - emi;
  if (std::abs(denominator) < 1e-15) return 0.0;
  return (mi - emi) / denominator;
}

double ami(std::span<const std::string> labels_a, std::span<const std::string> labels_b) {
  const auto a = encode_labels(labels_a);
  const auto b = encode_labels(labels_b);
  return ami(std::span<const int>(a), std::span<const int>(b));
}

// ---------------------------------------------------------------------------
// Zero-shot clustering

ClusterResult cluster_embeddings(const EmbeddingMatrix& input, const ZscOptions& options) {
  input.validate();
  const EmbeddingMatrix e = labelled_rows(input, LabelLevel::bin);
  if (e.rows() < 2) throw DataError("zero-shot clustering needs at least 2 labelled records");

  // Canonical record order makes the result independent of input order.
  std::vector<std::size_t> order(e.rows());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t x, std::size_t y) { return e.record_ids[x] < e.record_ids[y]; });
  Matrix<double> vectors(static_cast<Eigen::Index>(e.rows()), e.vectors.cols());
  std::vector<std::string> bins;
  ClusterResult result;
  for (std::size_t r = 0; r < order.size(); ++r) {
    vectors.row(static_cast<Eigen::Index>(r)) = e.vectors.row(static_cast<Eigen::Index>(order[r]));
    bins.push_back(e.bin_id[order[r]]);
    result.record_ids.push_back(e.record_ids[order[r]]);
  }

  const PcaReducer pca;
  const Reducer& reducer = options.reducer != nullptr ? *options.reducer : pca;
  const int dims = std::min<int>({options.target_dim, static_cast<int>(vectors.cols()),
                                  static_cast<int>(vectors.rows())});
  const Matrix<double> reduced = reducer.reduce(vectors, dims);

  const auto codes = encode_labels(bins);
  result.n_clusters = *std::max_element(codes.begin(), codes.end()) + 1;
  result.assignment = agglomerative_cluster(reduced, result.n_clusters);
  result.ami = ami(std::span<const int>(result.assignment), std::span<const int>(codes));
  return result;
}

ClusterResult bin_reconstruction_eval(const ModelParams<float>& params, const RecordSet& records,
                                      const ZscOptions& options) {
  return cluster_embeddings(embed_corpus(params, records), options);
}

double harmonic_mean(double a, double b) {
  if (a < 0.0 || b < 0.0) throw ConfigError("harmonic_mean: inputs must be non-negative");
  if (a == 0.0 || b == 0.0) return 0.0;
  return 2.0 * a * b / (a + b);
}

// ---------------------------------------------------------------------------
// Robustness sweep

std::string_view to_string(CorruptionMode mode) {
  return mode == CorruptionMode::mask_substitute ? "mask" : "delete";
}

CorruptionMode parse_corruption_mode(std::string_view name) {
  if (name == "mask" || name == "mask_substitute") return CorruptionMode::mask_substitute;
  if (name == "delete" || name == "delete_tokens") return CorruptionMode::delete_tokens;
  throw ConfigError("unknown corruption mode '" + std::string(name) + "'");
}

std::vector<double> default_ratios() {
  std::vector<double> ratios;
  for (int i = 0; i <= 9; ++i) ratios.push_back(i / 10.0);
  return ratios;
}

std::vector<double> parse_ratios(std::string_view text) {
  std::vector<double> out;
  const auto colon = split(text, ':');
  if (colon.size() == 3) {
    const double start = parse_double(colon[0]);
    const double stop = parse_double(colon[1]);
    const double step = parse_double(colon[2]);
    if (!(step > 0.0)) throw ConfigError("ratio step must be positive");
    for (int i = 0;; ++i) {
      const double v = std::round((start + i * step) * 1e12) / 1e12;
      if (v > stop + 1e-9) break;
      out.push_back(v);
    }
  } else if (colon.size() == 1) {
    for (auto part : split(text, ',')) out.push_back(parse_double(part));
  } else {
    throw ConfigError("ratios must be 'start:stop:step' or a comma list");
  }
  return out;
}

RobustnessCurve robustness_sweep(const ModelParams<float>& params, const RecordSet& reference,
                                 const RecordSet& query, std::span<const double> ratios,
                                 CorruptionMode mode, std::uint64_t seed, LabelLevel level) {
  for (std::size_t i = 0; i < ratios.size(); ++i) {
    if (!(ratios[i] >= 0.0 && ratios[i] < 1.0)) throw ConfigError("drop ratios must lie in [0,1)");
    if (i > 0 && !(ratios[i] > ratios[i - 1])) throw ConfigError("drop ratios must be strictly increasing");
  }
  RobustnessCurve curve;
  curve.mode = mode;
  if (mode == CorruptionMode::mask_substitute && params.config().variant == Variant::barcode_mae) {
    curve.warnings.push_back(
        "mask substitution on a barcode_mae checkpoint: its encoder never saw [MASK] in training");
  }
  const EmbeddingMatrix ref = embed_corpus(params, reference);
  const TokenizerConfig tok = params.config().tokenizer();
  const Vocab& vocab = params.vocab();
  const MaskMode plan_mode = mode == CorruptionMode::mask_substitute ? MaskMode::with_mask : MaskMode::mae;

  for (std::size_t ri = 0; ri < ratios.size(); ++ri) {
    // Same stream per ratio index for both modes, so they corrupt identical positions.
    Rng rng(seed + 0x632BE59BD9B4E019ULL * (ri + 1));
    EmbeddingMatrix q;
    q.vectors.resize(static_cast<Eigen::Index>(query.size()), params.config().d_model);
    for (std::size_t i = 0; i < query.size(); ++i) {
      const BarcodeRecord& r = query[i];
      const TokenSequence ts = tokenize(r.sequence, tok, 0);
      const int n = static_cast<int>(ts.size());
      const int dropped = std::min(masked_count(n, ratios[ri]), n - 1);
      const MaskPlan plan = sample_mask_exact(n, dropped, plan_mode, rng);
      const EncoderInput input = build_encoder_input(ts, plan, vocab);
      q.vectors.row(static_cast<Eigen::Index>(i)) = pool_embedding(params, input).cast<double>();
      q.record_ids.push_back(r.record_id);
      q.genus.push_back(r.genus);
      q.species.push_back(r.species);
      q.bin_id.push_back(r.bin_id);
    }
    curve.points.push_back(RobustnessPoint{ratios[ri], knn_probe(ref, q, level).accuracy});
  }
  return curve;
}

// ---------------------------------------------------------------------------
// Result tables

std::string format_probe_tsv(const ProbeResult& result, LabelLevel level) {
  std::string out = std::string(to_string(level)) + "\tcorrect\ttotal\taccuracy\n";
  out += "ALL\t" + std::to_string(result.correct) + '\t' + std::to_string(result.n_queries) + '\t' +
         format_double(result.accuracy) + '\n';
  for (const auto& [label, acc] : result.per_label) {
    out += label + '\t' + std::to_string(acc.correct) + '\t' + std::to_string(acc.total) + '\t' +
           format_double(static_cast<double>(acc.correct) / static_cast<double>(acc.total)) + '\n';
  }
  return out;
}

std::string format_cluster_tsv(const ClusterResult& result) {
  std::string out = "record_id\tcluster\n";
  for (std::size_t i = 0; i < result.record_ids.size(); ++i) {
    out += result.record_ids[i] + '\t' + std::to_string(result.assignment[i]) + '\n';
  }
  return out;
}

std::string format_curve_tsv(const std::vector<RobustnessCurve>& curves) {
  std::string out = "mode\tdrop_ratio\taccuracy\n";
  for (const auto& c : curves) {
    for (const auto& p : c.points) {
      out += std::string(to_string(c.mode)) + '\t' + format_double(p.drop_ratio) + '\t' +
             format_double(p.accuracy) + '\n';
    }
  }
  return out;
}

}  // namespace barcodemae
