#include "doctest.h"

#include <cmath>
#include <set>

#include "barcodemae/error.hpp"
#include "barcodemae/evalsuite.hpp"
#include "barcodemae/random.hpp"
#include "oracles.hpp"

using namespace barcodemae;

namespace {

EmbeddingMatrix make_embeddings(const std::vector<std::vector<double>>& rows,
                                const std::vector<std::string>& labels) {
  EmbeddingMatrix e;
  e.vectors.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.front().size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t j = 0; j < rows[i].size(); ++j) e.vectors(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
    e.record_ids.push_back("id" + std::to_string(i));
    e.genus.push_back(labels[i]);
    e.species.push_back(labels[i] + "_sp");
    e.bin_id.push_back(labels[i] + "_bin");
  }
  return e;
}

ModelConfig tiny_model() {
  ModelConfig cfg;
  cfg.d_model = 16;
  cfg.d_ff = 32;
  cfg.enc_layers = 1;
  cfg.enc_heads = 2;
  cfg.dec_layers = 1;
  cfg.dec_heads = 2;
  cfg.k = 4;
  cfg.max_tokens = 64;
  return cfg;
}

double round1(double x) { return std::round(x * 10.0) / 10.0; }

}  // namespace

TEST_SUITE("evalsuite") {
  TEST_CASE("knn geometry") {
    const auto ref = make_embeddings({{1, 0}, {0, 1}}, {"G1", "G2"});
    const auto q = make_embeddings({{0.9, 0.1}}, {"G1"});
    const ProbeResult r = knn_probe(ref, q);
    CHECK(r.accuracy == 1.0);
    CHECK(r.nearest == std::vector<std::size_t>{0});

    const auto same = make_embeddings({{0, 1}}, {"G2"});
    CHECK(knn_probe(ref, same).predicted == std::vector<std::string>{"G2"});

    const auto tie_ref = make_embeddings({{1, 0}, {2, 0}}, {"A", "B"});
    CHECK(knn_probe(tie_ref, make_embeddings({{3, 0}}, {"A"})).nearest == std::vector<std::size_t>{0});

    const auto zero = make_embeddings({{0, 0}}, {"A"});
    CHECK_THROWS_AS(knn_probe(ref, zero), DataError);
  }

  TEST_CASE("knn matches a brute-force double loop and is scale invariant") {
    Rng rng(1);
    std::vector<std::vector<double>> refs, queries;
    std::vector<std::string> ref_labels, query_labels;
    for (int i = 0; i < 50; ++i) {
      std::vector<double> v(6);
      for (double& x : v) x = rng.normal();
      const std::string label = "L" + std::to_string(rng.uniform_index(3));
      if (i < 30) {
        refs.push_back(v);
        ref_labels.push_back(label);
      } else {
        queries.push_back(v);
        query_labels.push_back(label);
      }
    }
    const auto ref = make_embeddings(refs, ref_labels);
    const auto q = make_embeddings(queries, query_labels);
    const ProbeResult r = knn_probe(ref, q);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < queries.size(); ++i) {
      const std::size_t nn = oracle::nearest_cosine(refs, queries[i]);
      CHECK(r.nearest[i] == nn);
      correct += ref_labels[nn] == query_labels[i];
    }
    CHECK(r.correct == correct);
    CHECK(r.accuracy == static_cast<double>(correct) / 20.0);

    auto scaled = q;
    for (Eigen::Index i = 0; i < scaled.vectors.rows(); ++i) scaled.vectors.row(i) *= (1.0 + static_cast<double>(i));
    CHECK(knn_probe(ref, scaled).nearest == r.nearest);
  }

  TEST_CASE("pca recovers an exact subspace") {
    Rng rng(2);
    Matrix<double> basis(2, 5), data(40, 5);
    for (int i = 0; i < 2; ++i)
      for (int j = 0; j < 5; ++j) basis(i, j) = rng.normal();
    RowVector<double> shift(5);
    for (int j = 0; j < 5; ++j) shift(j) = 3.0 * rng.normal();
    for (int r = 0; r < 40; ++r) {
      data.row(r) = shift + rng.normal() * basis.row(0) + rng.normal() * basis.row(1);
    }
    const Matrix<double> z = reduce_dims(data, 2);
    REQUIRE(z.cols() == 2);
    for (int a = 0; a < 40; ++a) {
      for (int b = a + 1; b < 40; ++b) {
        CHECK(std::abs((z.row(a) - z.row(b)).norm() - (data.row(a) - data.row(b)).norm()) < 1e-6);
      }
    }
  }

  TEST_CASE("pca component variances are non-increasing") {
    Rng rng(3);
    Matrix<double> data(60, 8);
    for (int r = 0; r < 60; ++r)
      for (int j = 0; j < 8; ++j) data(r, j) = rng.normal() * (1.0 + j);
    const Matrix<double> z = reduce_dims(data, 8);
    double prev = std::numeric_limits<double>::infinity();
    for (int j = 0; j < 8; ++j) {
      const double var = (z.col(j).array() - z.col(j).mean()).square().sum();
      CHECK(var <= prev + 1e-9);
      prev = var;
    }
    CHECK_THROWS(reduce_dims(data, 9));
  }

  TEST_CASE("pca on a three-point set matches the hand-solved axis") {
    // Points (0,0), (r,r), (0,r) with r = sqrt(2). Centred covariance has
    // eigenvalues 2 and 2/3; the principal axis is (1,1)/sqrt(2) and the
    // projections are -1, 1, 0.
    const double r = std::sqrt(2.0);
    Matrix<double> data(3, 2);
    data << 0, 0, r, r, 0, r;
    const Matrix<double> z = reduce_dims(data, 1);
    CHECK(z(0, 0) == doctest::Approx(-1.0).epsilon(1e-12));
    CHECK(z(1, 0) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(std::abs(z(2, 0)) < 1e-12);
  }

  TEST_CASE("ward merge sequence equals brute-force criterion evaluation") {
    const std::vector<std::vector<double>> raw = {
        {1.0, 0.1, 0.0},  {1.0, 0.25, 0.05}, {0.9, 0.0, 0.4},  {0.1, 1.0, 0.0},
        {0.0, 1.0, 0.3},  {0.2, 0.8, 0.9},   {0.0, 0.05, 1.0}, {0.5, 0.5, 0.45},
    };
    std::vector<std::vector<double>> unit;
    Matrix<double> data(8, 3);
    for (int i = 0; i < 8; ++i) {
      double nrm = 0;
      for (double x : raw[static_cast<std::size_t>(i)]) nrm += x * x;
      nrm = std::sqrt(nrm);
      std::vector<double> u;
      for (int j = 0; j < 3; ++j) {
        data(i, j) = raw[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
        u.push_back(raw[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] / nrm);
      }
      unit.push_back(u);
    }
    std::vector<Merge> merges;
    agglomerative_cluster(data, 1, &merges);
    const auto steps = oracle::ward_brute_force(unit, 1);
    REQUIRE(merges.size() == 7);
    REQUIRE(steps.size() == 7);

    std::vector<std::vector<int>> members;
    for (int i = 0; i < 8; ++i) members.push_back({i});
    for (std::size_t s = 0; s < merges.size(); ++s) {
      const auto& m = merges[s];
      std::set<int> got_l(members[static_cast<std::size_t>(m.left)].begin(), members[static_cast<std::size_t>(m.left)].end());
      std::set<int> got_r(members[static_cast<std::size_t>(m.right)].begin(), members[static_cast<std::size_t>(m.right)].end());
      const std::set<int> want_l(steps[s].left.begin(), steps[s].left.end());
      const std::set<int> want_r(steps[s].right.begin(), steps[s].right.end());
      CHECK(((got_l == want_l && got_r == want_r) || (got_l == want_r && got_r == want_l)));
      CHECK(m.cost == doctest::Approx(steps[s].cost).epsilon(1e-10));
      std::vector<int> merged = members[static_cast<std::size_t>(m.left)];
      merged.insert(merged.end(), members[static_cast<std::size_t>(m.right)].begin(), members[static_cast<std::size_t>(m.right)].end());
      CHECK(m.size == static_cast<int>(merged.size()));
      members.push_back(merged);
    }
  }

  TEST_CASE("two separated blobs are recovered exactly") {
    Rng rng(4);
    Matrix<double> data(40, 3);
    std::vector<int> truth;
    for (int i = 0; i < 40; ++i) {
      const int blob = static_cast<int>(rng.uniform_index(2));
      truth.push_back(blob);
      data(i, 0) = (blob == 0 ? 10.0 : 0.0) + 0.5 * rng.normal();
      data(i, 1) = (blob == 1 ? 10.0 : 0.0) + 0.5 * rng.normal();
      data(i, 2) = 3.0 + 0.5 * rng.normal();
    }
    const auto labels = agglomerative_cluster(data, 2);
    CHECK(oracle::first_appearance(labels) == oracle::first_appearance(truth));

    const auto singletons = agglomerative_cluster(data, 40);
    for (int i = 0; i < 40; ++i) CHECK(singletons[static_cast<std::size_t>(i)] == i);
  }

  TEST_CASE("ami equals the exhaustive oracle on every labeling pair up to six elements") {
    double worst = 0.0;
    std::size_t pairs = 0;
    for (int n = 1; n <= 6; ++n) {
      const auto parts = oracle::set_partitions(n);
      for (const auto& a : parts) {
        for (const auto& b : parts) {
          const double got = ami(std::span<const int>(a), std::span<const int>(b));
          worst = std::max(worst, std::abs(got - oracle::ami(a, b)));
          ++pairs;
        }
      }
    }
    CHECK(pairs == 1 + 4 + 25 + 225 + 2704 + 41209);
    CHECK(worst < 1e-10);
  }

  TEST_CASE("ami conventions, symmetry and relabelling") {
    const std::vector<int> a = {0, 0, 1, 1, 2, 2, 2};
    const std::vector<int> b = {1, 1, 0, 0, 0, 2, 2};
    const std::vector<int> constant(7, 4);
    CHECK(ami(std::span<const int>(a), std::span<const int>(a)) == 1.0);
    CHECK(ami(std::span<const int>(constant), std::span<const int>(b)) == 0.0);
    CHECK(ami(std::span<const int>(a), std::span<const int>(constant)) == 0.0);
    const double ab = ami(std::span<const int>(a), std::span<const int>(b));
    CHECK(ab == doctest::Approx(ami(std::span<const int>(b), std::span<const int>(a))).epsilon(1e-14));
    const std::vector<int> relabelled = {7, 7, 3, 3, 5, 5, 5};
    CHECK(ami(std::span<const int>(relabelled), std::span<const int>(b)) == doctest::Approx(ab).epsilon(1e-14));
    const std::vector<std::string> sa = {"x", "x", "y", "y", "z", "z", "z"};
    const std::vector<std::string> sb = {"p", "p", "q", "q", "q", "r", "r"};
    CHECK(ami(std::span<const std::string>(sa), std::span<const std::string>(sb)) == doctest::Approx(ab).epsilon(1e-14));
    CHECK_THROWS(ami(std::span<const int>(a), std::span<const int>(constant).subspan(1)));
  }

  TEST_CASE("harmonic mean") {
    CHECK(round1(harmonic_mean(69.0, 80.3)) == 74.2);
    CHECK(round1(harmonic_mean(58.3, 79.3)) == 67.2);
    CHECK(round1(harmonic_mean(65.4, 80.6)) == 72.2);
    CHECK(harmonic_mean(42.5, 42.5) == 42.5);
    CHECK(harmonic_mean(0.0, 10.0) == 0.0);
  }

  TEST_CASE("zero-noise corpus clusters perfectly and order does not matter") {
    SyntheticCorpusConfig sc;
    sc.noise_rate = 0.0;
    sc.seq_len = 200;
    const RecordSet corpus = generate_synthetic(sc, 5);
    const auto params = init_params<float>(tiny_model(), 6);
    const ClusterResult r = bin_reconstruction_eval(params, corpus);
    CHECK(std::abs(r.ami - 1.0) < 1e-9);
    CHECK(r.n_clusters == 12);

    std::vector<BarcodeRecord> recs = corpus.records();
    Rng rng(7);
    rng.shuffle(recs);
    const ClusterResult s = bin_reconstruction_eval(params, RecordSet(recs));
    CHECK(s.ami == r.ami);
    CHECK(s.record_ids == r.record_ids);
    CHECK(s.assignment == r.assignment);
  }

  TEST_CASE("untrained model on random sequences scores near zero AMI") {
    for (std::uint64_t seed : {11u, 12u, 13u}) {
      Rng rng(seed);
      std::vector<BarcodeRecord> recs;
      for (int i = 0; i < 150; ++i) {
        std::string s(200, 'A');
        for (char& c : s) c = "ACGT"[rng.uniform_index(4)];
        const std::string bin = "BIN" + std::to_string(rng.uniform_index(5));
        recs.push_back({"r" + std::to_string(i), s, "G", "G_" + bin, bin, Partition::seen_train});
      }
      const auto params = init_params<float>(tiny_model(), seed);
      const ClusterResult r = bin_reconstruction_eval(params, RecordSet(recs));
      CHECK(std::abs(r.ami) < 0.1);
    }
  }

  TEST_CASE("ratio parsing") {
    const auto r = parse_ratios("0.1:0.9:0.1");
    REQUIRE(r.size() == 9);
    CHECK(r.front() == 0.1);
    CHECK(r[2] == 0.3);
    CHECK(r.back() == 0.9);
    CHECK(parse_ratios("0,0.5") == std::vector<double>{0.0, 0.5});
    CHECK(default_ratios().size() == 10);
  }

  TEST_CASE("robustness sweep: ratio zero agrees across modes, runs are reproducible") {
    SyntheticCorpusConfig sc;
    sc.seq_len = 200;
    const RecordSet corpus = generate_synthetic(sc, 8);
    const RecordSet ref = partition_view(corpus, Partition::seen_train);
    const RecordSet query = partition_view(corpus, {Partition::unseen_val, Partition::unseen_test});
    const auto params = init_params<float>(tiny_model(), 9);
    const std::vector<double> ratios = {0.0, 0.5, 0.9};
    const auto mask = robustness_sweep(params, ref, query, ratios, CorruptionMode::mask_substitute, 3);
    const auto del = robustness_sweep(params, ref, query, ratios, CorruptionMode::delete_tokens, 3);
    const auto again = robustness_sweep(params, ref, query, ratios, CorruptionMode::delete_tokens, 3);
    CHECK(mask.points[0].accuracy == del.points[0].accuracy);
    CHECK_FALSE(mask.warnings.empty());
    CHECK(del.warnings.empty());
    for (std::size_t i = 0; i < ratios.size(); ++i) CHECK(again.points[i].accuracy == del.points[i].accuracy);
    CHECK(format_curve_tsv({mask, del}).rfind("mode\tdrop_ratio\taccuracy\n", 0) == 0);
    const std::vector<double> bad = {0.5, 0.2};
    CHECK_THROWS(robustness_sweep(params, ref, query, bad, CorruptionMode::delete_tokens, 3));
  }
}
