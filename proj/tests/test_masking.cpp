#include "doctest.h"

#include <cmath>
#include <set>

#include "barcodemae/error.hpp"
#include "barcodemae/masking.hpp"
#include "barcodemae/random.hpp"

using namespace barcodemae;

namespace {

TokenSequence make_ts(std::vector<TokenId> ids) {
  TokenSequence ts;
  ts.ids = std::move(ids);
  for (std::size_t i = 0; i < ts.ids.size(); ++i) ts.positions.push_back(static_cast<int>(i));
  return ts;
}

}  // namespace

TEST_SUITE("masking") {
  TEST_CASE("mask counts") {
    CHECK(masked_count(10, 0.5) == 5);
    CHECK(masked_count(10, 0.0) == 0);
    CHECK(masked_count(10, 0.33) == 3);
    CHECK(masked_count(109, 0.5) == 54);  // 54.5 ties to even
    CHECK(masked_count(3, 0.5) == 2);     // 1.5 ties to even
    Rng rng(1);
    CHECK(sample_mask(10, 0.5, MaskMode::mae, rng).masked_positions.size() == 5);
    CHECK(sample_mask(10, 0.0, MaskMode::mae, rng).masked_positions.empty());
    CHECK(sample_mask(10, 0.33, MaskMode::mae, rng).masked_positions.size() == 3);
  }

  TEST_CASE("plans are sorted, unique and avoid PAD") {
    Rng rng(2);
    std::vector<std::uint8_t> valid(20, 1);
    for (int i = 14; i < 20; ++i) valid[static_cast<std::size_t>(i)] = 0;
    for (int trial = 0; trial < 200; ++trial) {
      const MaskPlan plan = sample_mask(20, 0.5, MaskMode::mae, rng, valid);
      CHECK(plan.masked_positions.size() == 7);
      for (std::size_t i = 0; i < plan.masked_positions.size(); ++i) {
        CHECK(plan.masked_positions[i] < 14);
        if (i > 0) CHECK(plan.masked_positions[i - 1] < plan.masked_positions[i]);
      }
    }
  }

  TEST_CASE("positions are drawn uniformly") {
    Rng rng(3);
    const int n = 10, trials = 20000;
    std::vector<int> hits(n, 0);
    for (int t = 0; t < trials; ++t) {
      for (int p : sample_mask(n, 0.3, MaskMode::mae, rng).masked_positions) ++hits[static_cast<std::size_t>(p)];
    }
    const double p = 0.3;
    const double sigma = std::sqrt(trials * p * (1 - p));
    for (int h : hits) CHECK(std::abs(h - trials * p) <= 3.5 * sigma);
  }

  TEST_CASE("encoder input by mode") {
    const Vocab v(4);
    const auto ts = make_ts({10, 11, 12, 13, 14});
    const MaskPlan mae = make_plan(5, {1, 3}, MaskMode::mae);
    const EncoderInput a = build_encoder_input(ts, mae, v);
    CHECK(a.ids == std::vector<TokenId>{10, 12, 14});
    CHECK(a.positions == std::vector<int>{0, 2, 4});

    const MaskPlan wm = make_plan(5, {1, 3}, MaskMode::with_mask);
    const EncoderInput b = build_encoder_input(ts, wm, v);
    CHECK(b.ids == std::vector<TokenId>{10, v.mask(), 12, v.mask(), 14});
    CHECK(b.positions == std::vector<int>{0, 1, 2, 3, 4});

    for (MaskMode mode : {MaskMode::mae, MaskMode::with_mask}) {
      const EncoderInput c = build_encoder_input(ts, make_plan(5, {}, mode), v);
      CHECK(c.ids == ts.ids);
      CHECK(c.positions == ts.positions);
    }
    Rng rng(1);
    const EncoderInput d = build_encoder_input(ts, make_plan(5, {}, MaskMode::bert_80_10_10), v, &rng);
    CHECK(d.ids == ts.ids);
    CHECK_THROWS(build_encoder_input(ts, make_plan(5, {1}, MaskMode::bert_80_10_10), v));
  }

  TEST_CASE("mae encoder input never holds MASK and keeps increasing positions") {
    const Vocab v(4);
    Rng rng(4);
    for (int trial = 0; trial < 100; ++trial) {
      std::vector<TokenId> ids;
      const int n = 1 + static_cast<int>(rng.uniform_index(60));
      for (int i = 0; i < n; ++i) ids.push_back(static_cast<TokenId>(rng.uniform_index(257)));
      const auto ts = make_ts(ids);
      const MaskPlan plan = sample_mask(n, 0.5, MaskMode::mae, rng);
      const EncoderInput in = build_encoder_input(ts, plan, v);
      CHECK(in.size() == static_cast<std::size_t>(n) - plan.masked_positions.size());
      for (std::size_t i = 0; i < in.size(); ++i) {
        CHECK(in.ids[i] != v.mask());
        CHECK_FALSE(plan.contains(in.positions[i]));
        if (i > 0) CHECK(in.positions[i - 1] < in.positions[i]);
      }
    }
  }

  TEST_CASE("decoder input interleaving") {
    const DecoderInput d = build_decoder_input(make_plan(5, {1, 3}, MaskMode::mae), 5);
    REQUIRE(d.size() == 5);
    CHECK(d.slots[0] == DecoderSlot{false, 0});
    CHECK(d.slots[1] == DecoderSlot{true, -1});
    CHECK(d.slots[2] == DecoderSlot{false, 1});
    CHECK(d.slots[3] == DecoderSlot{true, -1});
    CHECK(d.slots[4] == DecoderSlot{false, 2});
    CHECK(d.positions == std::vector<int>{0, 1, 2, 3, 4});

    const DecoderInput e = build_decoder_input(make_plan(4, {}, MaskMode::mae), 4);
    for (int i = 0; i < 4; ++i) CHECK(e.slots[static_cast<std::size_t>(i)] == DecoderSlot{false, i});

    Rng rng(5);
    const MaskPlan plan = sample_mask(109, 0.5, MaskMode::mae, rng);
    const DecoderInput f = build_decoder_input(plan, 109);
    int mask_slots = 0;
    std::set<int> enc;
    for (const auto& s : f.slots) {
      if (s.mask_slot) {
        ++mask_slots;
      } else {
        enc.insert(s.encoder_index);
      }
    }
    CHECK(mask_slots == 54);
    CHECK(enc.size() == 55);
    CHECK(*enc.begin() == 0);
    CHECK(*enc.rbegin() == 54);
    CHECK_THROWS(build_decoder_input(plan, 100));
  }

  TEST_CASE("bert 80/10/10 counts") {
    const Vocab v(4);
    Rng rng(6);
    std::vector<TokenId> ids(30);
    for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = static_cast<TokenId>(i);
    const auto ts = make_ts(ids);
    const MaskPlan ten = make_plan(30, {0, 2, 4, 6, 8, 10, 12, 14, 16, 18}, MaskMode::bert_80_10_10);
    const BertCorruption c = bert_corrupt(ts, ten, v, rng);
    CHECK(c.n_mask == 8);
    CHECK(c.n_keep == 1);
    CHECK(c.n_random == 1);
    int masks = 0;
    for (int p : ten.masked_positions) masks += c.ids[static_cast<std::size_t>(p)] == v.mask();
    CHECK(masks == 8);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (!ten.contains(static_cast<int>(i))) CHECK(c.ids[i] == ids[i]);
    }
    CHECK(c.targets == gather_targets(ts, ten));

    const MaskPlan one = make_plan(30, {7}, MaskMode::bert_80_10_10);
    const BertCorruption d = bert_corrupt(ts, one, v, rng);
    CHECK(d.n_mask == 1);
    CHECK(d.ids[7] == v.mask());
    CHECK_THROWS(bert_corrupt(ts, make_plan(30, {1}, MaskMode::mae), v, rng));
  }

  TEST_CASE("random substitutions are always k-mers") {
    const Vocab v(2);
    Rng rng(7);
    std::vector<TokenId> ids(10, 3);
    const auto ts = make_ts(ids);
    const MaskPlan all = make_plan(10, {0, 1, 2, 3, 4, 5, 6, 7, 8, 9}, MaskMode::bert_80_10_10);
    int randoms = 0;
    for (int t = 0; t < 1000; ++t) {
      const BertCorruption c = bert_corrupt(ts, all, v, rng);
      for (TokenId id : c.ids) {
        CHECK((v.is_kmer(id) || id == v.mask()));
        randoms += v.is_kmer(id) && id != 3;
      }
    }
    CHECK(randoms > 0);
  }

  TEST_CASE("pretrain example aligns targets with the plan") {
    const Vocab v(4);
    Rng rng(8);
    const auto ts = make_ts({5, 6, 7, 8, 9, 10});
    const MaskPlan plan = make_plan(6, {0, 5}, MaskMode::mae);
    const PretrainExample ex = make_pretrain_example(ts, plan, v, rng);
    CHECK(ex.targets == std::vector<TokenId>{5, 10});
    CHECK(ex.encoder.ids == std::vector<TokenId>{6, 7, 8, 9});
    CHECK(ex.decoder.size() == 6);
  }
}
