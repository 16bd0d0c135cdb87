#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <limits>

#include "barcodemae/error.hpp"
#include "barcodemae/io.hpp"
#include "barcodemae/train.hpp"

using namespace barcodemae;

namespace {

ModelConfig small_model(Variant variant = Variant::barcode_mae) {
  ModelConfig cfg;
  cfg.variant = variant;
  cfg.d_model = 16;
  cfg.d_ff = 32;
  cfg.enc_layers = 1;
  cfg.enc_heads = 2;
  cfg.dec_layers = variant == Variant::encoder_only ? 0 : 1;
  cfg.dec_heads = 2;
  cfg.k = 3;
  cfg.max_tokens = 32;
  return cfg;
}

RecordSet small_corpus(std::uint64_t seed, int n_records = 64) {
  SyntheticCorpusConfig sc;
  sc.n_genera = 2;
  sc.species_per_genus = 2;
  sc.records_per_species = n_records / 4;
  sc.seq_len = 60;
  return generate_synthetic(sc, seed);
}

TrainConfig quick(int epochs) {
  TrainConfig t;
  t.epochs = epochs;
  t.batch_size = 16;
  t.max_lr = 1e-3;
  t.seed = 42;
  return t;
}

std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("barcodemae_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace

TEST_SUITE("train") {
  TEST_CASE("adamw: zero gradient and zero decay leave parameters unchanged") {
    std::vector<double> p = {1.0, -2.0, 3.5};
    const std::vector<double> g(3, 0.0);
    AdamState<double> s;
    for (int i = 0; i < 5; ++i) adamw_step<double>(p, g, s, 0.1, 0.0);
    CHECK(p == std::vector<double>{1.0, -2.0, 3.5});
  }

  TEST_CASE("adamw: one step on a scalar matches the hand-evaluated recurrence") {
    const double lr = 0.1, wd = 0.01, g = 0.5;
    // decoupled decay then bias-corrected Adam:
    // p <- 1 - 0.1*0.01*1 = 0.999
    // m = 0.1*0.5 = 0.05, v = 0.001*0.25 = 0.00025
    // m_hat = 0.5, v_hat = 0.25, step = 0.1 * 0.5 / (0.5 + 1e-8)
    const double expected = 0.999 - 0.1 * 0.5 / (0.5 + 1e-8);
    std::vector<double> p = {1.0};
    const std::vector<double> grad = {g};
    AdamState<double> s;
    adamw_step<double>(p, grad, s, lr, wd);
    CHECK(std::abs(p[0] - expected) < 1e-12);
    CHECK(std::abs(p[0] - 0.899000002) < 1e-12);
    CHECK(s.step == 1);
  }

  TEST_CASE("adamw: decay shrinks an unused weight monotonically, flags are honoured") {
    std::vector<double> p = {50.0, 50.0, 50.0};
    const std::vector<double> g(3, 0.0);
    const std::vector<std::uint8_t> flags = {kDecay, 0, kFrozen};
    AdamState<double> s;
    double prev = p[0];
    for (int i = 0; i < 100; ++i) {
      adamw_step<double>(p, g, s, 1e-2, 1e-5, flags);
      CHECK(p[0] < prev);
      prev = p[0];
    }
    CHECK(p[1] == 50.0);
    CHECK(p[2] == 50.0);

    std::vector<double> q = {1.0, 1.0};
    const std::vector<double> gq = {1.0, 1.0};
    const std::vector<std::uint8_t> fq = {kDecay, kFrozen};
    AdamState<double> sq;
    adamw_step<double>(q, gq, sq, 0.1, 0.0, fq);
    CHECK(q[1] == 1.0);
    CHECK(q[0] < 1.0);
  }

  TEST_CASE("adamw: non-finite gradient names the step") {
    std::vector<float> p = {1.0f};
    AdamState<float> s;
    adamw_step<float>(p, std::vector<float>{0.1f}, s, 0.1, 0.0);
    try {
      adamw_step<float>(p, std::vector<float>{std::numeric_limits<float>::quiet_NaN()}, s, 0.1, 0.0);
      FAIL("expected DivergenceError");
    } catch (const DivergenceError& e) {
      CHECK(std::string(e.what()).find("step 2") != std::string::npos);
    }
  }

  TEST_CASE("onecycle endpoints and shape") {
    const double max_lr = 1e-4;
    const std::int64_t total = 1000;
    CHECK(onecycle_lr(0, total, max_lr, 0.3) == max_lr / 25.0);
    CHECK(onecycle_lr(300, total, max_lr, 0.3) == max_lr);
    CHECK(onecycle_lr(total, total, max_lr, 0.3) == doctest::Approx(max_lr / 1e4).epsilon(1e-12));
    for (std::int64_t s = 1; s <= 300; ++s) CHECK(onecycle_lr(s, total, max_lr, 0.3) > onecycle_lr(s - 1, total, max_lr, 0.3));
    for (std::int64_t s = 301; s <= total; ++s) CHECK(onecycle_lr(s, total, max_lr, 0.3) < onecycle_lr(s - 1, total, max_lr, 0.3));
    CHECK_THROWS_AS(onecycle_lr(total + 1, total, max_lr, 0.3), ConfigError);
  }

  TEST_CASE("gradient clipping") {
    std::vector<double> g = {3.0, 4.0};
    CHECK(clip_grad_norm<double>(g, 1.0) == 5.0);
    CHECK(std::hypot(g[0], g[1]) == doctest::Approx(1.0).epsilon(1e-6));
    std::vector<double> h = {0.3, 0.4};
    clip_grad_norm<double>(h, 1.0);
    CHECK(h == std::vector<double>{0.3, 0.4});
  }

  TEST_CASE("presets and validation") {
    const TrainConfig a = TrainConfig::preset("appendix");
    CHECK(a.max_lr == 2e-4);
    CHECK(a.batch_size == 128);
    CHECK(a.epochs == 35);
    CHECK(TrainConfig::preset("method").max_lr == 1e-4);
    CHECK_THROWS(TrainConfig::preset("other"));
    TrainConfig bad;
    bad.mask_ratio = 1.5;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
  }

  TEST_CASE("layer norms and the PAD row are exempt from decay") {
    const ParamLayout layout(small_model());
    const Vocab v(3);
    const auto flags = layout.element_flags(v.pad());
    for (const auto& t : layout.tensors()) {
      const bool is_norm = t.name.find("norm") != std::string::npos;
      CHECK(t.decay == !is_norm);
    }
    const auto& emb = layout[layout.token_embedding];
    for (int j = 0; j < emb.cols; ++j) {
      const std::size_t i = emb.offset + static_cast<std::size_t>(v.pad()) * static_cast<std::size_t>(emb.cols) + static_cast<std::size_t>(j);
      CHECK((flags[i] & kFrozen) != 0);
    }
  }

  TEST_CASE("training runs are reproducible and write metrics") {
    const RecordSet corpus = small_corpus(1);
    const auto dir = scratch_dir("train_det");
    TrainOptions a;
    a.metrics_path = dir / "a.tsv";
    a.checkpoint_dir = dir / "ckpt_a";
    TrainOptions b;
    b.metrics_path = dir / "b.tsv";
    b.checkpoint_dir = dir / "ckpt_b";
    train(corpus, small_model(), quick(2), a);
    train(corpus, small_model(), quick(2), b);
    CHECK(read_file(a.metrics_path) == read_file(b.metrics_path));
    CHECK(read_file(dir / "ckpt_a" / "last.ckpt") == read_file(dir / "ckpt_b" / "last.ckpt"));
    CHECK(std::filesystem::exists(dir / "ckpt_a" / "epoch_001.ckpt"));
    CHECK(std::filesystem::exists(dir / "ckpt_a" / "epoch_002.ckpt"));
    const std::string text = read_file(a.metrics_path);
    CHECK(text.rfind("epoch\tstep\tloss\tmasked_acc\tlr\n", 0) == 0);
  }

  TEST_CASE("resume reproduces uninterrupted training exactly") {
    const RecordSet corpus = small_corpus(2);
    const auto dir = scratch_dir("train_resume");
    TrainOptions full_opts;
    full_opts.metrics_path = dir / "full.tsv";
    const TrainResult full = train(corpus, small_model(), quick(3), full_opts);

    TrainOptions first;
    first.checkpoint_dir = dir / "ckpt";
    first.stop_after_epoch = 1;
    const TrainResult part = train(corpus, small_model(), quick(3), first);
    CHECK(part.checkpoint.epoch == 1);

    TrainOptions second;
    second.metrics_path = dir / "resumed.tsv";
    second.resume = load_checkpoint(dir / "ckpt" / "last.ckpt");
    const TrainResult rest = train(corpus, small_model(), quick(3), second);
    REQUIRE(rest.metrics.size() == 2);
    CHECK(rest.metrics[0] == full.metrics[1]);
    CHECK(rest.metrics[1] == full.metrics[2]);
    const auto x = full.checkpoint.params.values();
    const auto y = rest.checkpoint.params.values();
    CHECK(std::equal(x.begin(), x.end(), y.begin(), y.end()));
    CHECK(read_file(full_opts.metrics_path) == read_file(second.metrics_path));

    TrainOptions mismatch;
    mismatch.resume = load_checkpoint(dir / "ckpt" / "last.ckpt");
    CHECK_THROWS_AS(train(corpus, small_model(), quick(4), mismatch), ConfigError);
  }

  TEST_CASE("loss is taken only over masked positions and the mae encoder never sees MASK") {
    const RecordSet corpus = small_corpus(3);
    const Vocab v(3);
    std::size_t seen = 0;
    TrainOptions opts;
    opts.inspect_example = [&](const PretrainExample& ex) {
      ++seen;
      CHECK(ex.targets.size() == ex.plan.masked_positions.size());
      CHECK(ex.plan.masked_positions.size() == static_cast<std::size_t>(masked_count(ex.plan.length, 0.5)));
      for (TokenId id : ex.encoder.ids) CHECK(id != v.mask());
    };
    train(corpus, small_model(), quick(1), opts);
    CHECK(seen == corpus.size());
  }

  TEST_CASE("loss decreases on structured data") {
    const RecordSet corpus = small_corpus(4);
    TrainConfig t = quick(6);
    t.max_lr = 3e-3;
    const TrainResult r = train(corpus, small_model(), t);
    CHECK(r.metrics.back().loss < r.metrics.front().loss);
  }
}
