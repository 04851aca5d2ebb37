// Copyright (c) 2026 UVDT contributors
// SPDX-License-Identifier: Apache-2.0
#include "uvdt/model.hpp"

#include "test_util.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <cstring>

using namespace uvdt;
using namespace uvdt::data;
using namespace uvdt::encoding;
using namespace uvdt::model;

namespace {

struct Fixture {
  Dataset ds;
  Vocab vocab;
  ModelConfig cfg;
  Parameters params;

  explicit Fixture(int layers = 2, int hidden = 16, uint64_t seed = 1)
      : ds(make_ds()), vocab(induce_vocab(ds)), cfg(make_cfg(layers, hidden)), params(make_params(seed)) {}

  static Dataset make_ds() {
    SynthConfig scfg;
    scfg.num_images = 4;
    scfg.num_objects = 2;
    scfg.num_candidates = 5;
    scfg.turns_per_image = 2;
    return generate_synthetic(scfg, 11);
  }

  ModelConfig make_cfg(int layers, int hidden) const {
    ModelConfig c;
    c.layers = layers;
    c.num_heads = 2;
    c.hidden = hidden;
    c.vocab_size = vocab.size();
    c.max_positions = 64;
    c.vision_dim = ds.d_v;
    return c;
  }

  Parameters make_params(uint64_t seed) const { return Parameters::init(cfg, seed); }

  EncodedInput encode(int img = 0, int turn = 0, const char* answer = nullptr,
                      HistoryMode mode = HistoryMode::one_turn) const {
    const auto& t = ds.images[(size_t)img].turns[(size_t)turn];
    const std::string ans = answer ? answer : t.answer;
    return assemble(ds.images[(size_t)img], turn, ans, mode, vocab, cfg.max_positions);
  }
};

}  // namespace

TEST_CASE("config validation") {
  ModelConfig c;
  c.hidden = 10;
  c.num_heads = 4;
  c.vocab_size = 100;
  REQUIRE_THROWS_AS(c.validate(), Error);
}

TEST_CASE("embed produces position-distinct rows and the right shape") {
  Fixture f;
  EncodedInput enc = f.encode();
  Tensor h0 = embed(enc, f.ds.images[0], f.ds.num_classes, f.params);
  REQUIRE(h0.shape() == Shape{enc.length(), f.cfg.hidden});

  // two [EOT]-free duplicate ids: craft a sequence with the same token twice
  const int d = f.cfg.hidden;
  bool found_pair = false;
  for (int i = 0; i < enc.length() && !found_pair; ++i)
    for (int j = i + 1; j < enc.length() && !found_pair; ++j)
      if (enc.token_ids[(size_t)i] == enc.token_ids[(size_t)j] &&
          enc.segment_ids[(size_t)i] == enc.segment_ids[(size_t)j]) {
        found_pair = true;
        bool differ = false;
        for (int c = 0; c < d; ++c)
          if (h0.values()[(size_t)(i * d + c)] != h0.values()[(size_t)(j * d + c)]) differ = true;
        REQUIRE(differ);  // position embeddings separate identical tokens
      }
  REQUIRE(found_pair);
}

TEST_CASE("embed reacts to vision features") {
  Fixture f;
  EncodedInput enc = f.encode();
  DialogInstance zeroed = f.ds.images[0];
  for (auto& v : zeroed.objects[0].feature) v = 0;
  Tensor a = embed(enc, f.ds.images[0], f.ds.num_classes, f.params);
  Tensor b = embed(enc, zeroed, f.ds.num_classes, f.params);
  const auto pos = static_cast<size_t>(enc.vision_slots[0].first) * f.cfg.hidden;
  bool differ = false;
  for (int c = 0; c < f.cfg.hidden; ++c)
    if (a.values()[pos + (size_t)c] != b.values()[pos + (size_t)c]) differ = true;
  REQUIRE(differ);
}

TEST_CASE("embed rejects unknown token ids") {
  Fixture f;
  EncodedInput enc = f.encode();
  enc.token_ids[5] = f.cfg.vocab_size + 3;
  REQUIRE_THROWS_AS(embed(enc, f.ds.images[0], f.ds.num_classes, f.params), ValidationError);
}

TEST_CASE("zero-layer forward returns the embedding") {
  Fixture f(0);
  EncodedInput enc = f.encode();
  Tensor h0 = embed(enc, f.ds.images[0], f.ds.num_classes, f.params);
  AttentionMask m = build_mask(MaskKind::bidirectional, enc.length(), enc.length());
  ForwardResult r = encoder_forward(h0, m, f.params);
  REQUIRE(r.hidden.size() == 1);
  REQUIRE(r.final_hidden().values() == h0.values());
}

TEST_CASE("attention rows are stochastic over unmasked columns") {
  Fixture f;
  EncodedInput enc = f.encode();
  Tensor h0 = embed(enc, f.ds.images[0], f.ds.num_classes, f.params);
  AttentionMask m = build_mask(MaskKind::seq2seq, enc.length(), enc.context_len);
  ForwardResult r = encoder_forward(h0, m, f.params);
  REQUIRE(r.attention.size() == 2);
  for (const auto& heads : r.attention) {
    REQUIRE(static_cast<int>(heads.size()) == f.cfg.num_heads);
    for (const auto& a : heads) {
      const int n = enc.length();
      for (int i = 0; i < n; ++i) {
        double s = 0;
        for (int j = 0; j < n; ++j) s += a.values()[(size_t)(i * n + j)];
        REQUIRE(std::abs(s - 1.0) < 1e-9);
      }
    }
  }
}

TEST_CASE("forward rejects a mismatched mask") {
  Fixture f;
  EncodedInput enc = f.encode();
  Tensor h0 = embed(enc, f.ds.images[0], f.ds.num_classes, f.params);
  AttentionMask m = build_mask(MaskKind::bidirectional, enc.length() + 1, enc.length() + 1);
  REQUIRE_THROWS_AS(encoder_forward(h0, m, f.params), ShapeError);
}

TEST_CASE("seq2seq context positions ignore answer content") {
  Fixture f;
  // same turn, two different candidate answers of equal length
  EncodedInput e1 = f.encode(0, 0, "red");
  EncodedInput e2 = f.encode(0, 0, "blue");
  REQUIRE(e1.length() == e2.length());
  REQUIRE(e1.context_len == e2.context_len);
  AttentionMask m = build_mask(MaskKind::seq2seq, e1.length(), e1.context_len);
  Tensor h1 = embed(e1, f.ds.images[0], f.ds.num_classes, f.params);
  Tensor h2 = embed(e2, f.ds.images[0], f.ds.num_classes, f.params);
  ForwardResult r1 = encoder_forward(h1, m, f.params);
  ForwardResult r2 = encoder_forward(h2, m, f.params);
  const int d = f.cfg.hidden;
  for (int pos = 0; pos < e1.context_len; ++pos)
    for (int c = 0; c < d; ++c) {
      const size_t at = (size_t)(pos * d + c);
      REQUIRE(std::abs(r1.final_hidden().values()[at] - r2.final_hidden().values()[at]) <= 1e-9);
    }
  // and under the bidirectional mask they genuinely differ
  AttentionMask bi = build_mask(MaskKind::bidirectional, e1.length(), e1.length());
  ForwardResult b1 = encoder_forward(h1, bi, f.params);
  ForwardResult b2 = encoder_forward(h2, bi, f.params);
  double diff = 0;
  for (int c = 0; c < d; ++c) diff += std::abs(b1.final_hidden().values()[(size_t)c] -
                                               b2.final_hidden().values()[(size_t)c]);
  REQUIRE(diff > 1e-9);
}

TEST_CASE("seq2seq answer position t ignores later answer tokens") {
  Fixture f;
  EncodedInput e1 = f.encode(0, 0, "red ball yes");
  EncodedInput e2 = f.encode(0, 0, "red ball no");
  REQUIRE(e1.length() == e2.length());
  REQUIRE(e1.token_ids != e2.token_ids);  // the perturbed tail genuinely differs
  AttentionMask m = build_mask(MaskKind::seq2seq, e1.length(), e1.context_len);
  Tensor h1 = embed(e1, f.ds.images[0], f.ds.num_classes, f.params);
  Tensor h2 = embed(e2, f.ds.images[0], f.ds.num_classes, f.params);
  ForwardResult r1 = encoder_forward(h1, m, f.params);
  ForwardResult r2 = encoder_forward(h2, m, f.params);
  const int d = f.cfg.hidden;
  // positions up to and including answer_start+1 ("red", "ball") match
  for (int pos = 0; pos < e1.answer_start + 2; ++pos)
    for (int c = 0; c < d; ++c) {
      const size_t at = (size_t)(pos * d + c);
      REQUIRE(std::abs(r1.final_hidden().values()[at] - r2.final_hidden().values()[at]) <= 1e-9);
    }
}

TEST_CASE("mlm logits expose the tied-embedding structure") {
  Fixture f;
  EncodedInput enc = f.encode();
  Tensor h0 = embed(enc, f.ds.images[0], f.ds.num_classes, f.params);
  AttentionMask m = build_mask(MaskKind::bidirectional, enc.length(), enc.length());
  ForwardResult r = encoder_forward(h0, m, f.params);
  const std::vector<int64_t> positions = {4, 7};
  Tensor logits = mlm_logits(r.final_hidden(), positions, f.params);
  REQUIRE(logits.shape() == Shape{2, f.cfg.vocab_size});
  // logit(v) = dot(hidden, emb_v) + bias_v
  const int d = f.cfg.hidden;
  for (int check = 0; check < 2; ++check) {
    const int v = check == 0 ? 3 : f.cfg.vocab_size - 1;
    double dot = 0;
    for (int c = 0; c < d; ++c)
      dot += static_cast<double>(r.final_hidden().values()[(size_t)(positions[(size_t)check] * d + c)]) *
             static_cast<double>(f.params.tok_emb.values()[(size_t)(v * d + c)]);
    dot += static_cast<double>(f.params.mlm_bias.values()[(size_t)v]);
    REQUIRE(testutil::scaled_err(logits.values()[(size_t)(check * f.cfg.vocab_size + v)], dot) < 1e-12);
  }
  REQUIRE_THROWS_AS(mlm_logits(r.final_hidden(), {enc.length()}, f.params), ShapeError);
}

TEST_CASE("nsp score sits at one half for a symmetric head and stays in (0,1)") {
  Fixture f;
  // zero the head: both class logits equal -> p = 0.5
  for (auto& v : f.params.nsp_w.values()) v = 0;
  EncodedInput enc = f.encode();
  Tensor h0 = embed(enc, f.ds.images[0], f.ds.num_classes, f.params);
  AttentionMask m = build_mask(MaskKind::bidirectional, enc.length(), enc.length());
  ForwardResult r = encoder_forward(h0, m, f.params);
  REQUIRE(nsp_score(r.final_hidden(), f.params) == Catch::Approx(0.5));

  Fixture f2(2, 16, 3);
  ForwardResult r2 = encoder_forward(embed(enc, f.ds.images[0], f.ds.num_classes, f2.params), m, f2.params);
  const double p = nsp_score(r2.final_hidden(), f2.params);
  REQUIRE(p > 0.0);
  REQUIRE(p < 1.0);
}

TEST_CASE("parameter count matches the closed form") {
  Fixture f(2, 16);
  REQUIRE(f.params.count() == Parameters::expected_count(f.cfg));
  Fixture g(4, 32);
  REQUIRE(g.params.count() == Parameters::expected_count(g.cfg));
}

TEST_CASE("checkpoint round trip preserves outputs exactly") {
  const std::string dir = testutil::scratch_dir("model_ckpt");
  Fixture f;
  EncodedInput enc = f.encode();
  AttentionMask m = build_mask(MaskKind::bidirectional, enc.length(), enc.length());
  NoGradGuard ng;
  Tensor h0 = embed(enc, f.ds.images[0], f.ds.num_classes, f.params);
  ForwardResult before = encoder_forward(h0, m, f.params);

  f.params.save(dir + "/m.ckpt");
  Parameters loaded = Parameters::load(dir + "/m.ckpt");
  REQUIRE(loaded.cfg.hidden == f.cfg.hidden);
  REQUIRE(loaded.cfg.layers == f.cfg.layers);
  Tensor h0b = embed(enc, f.ds.images[0], f.ds.num_classes, loaded);
  ForwardResult after = encoder_forward(h0b, m, loaded);
  REQUIRE(std::memcmp(before.final_hidden().values().data(), after.final_hidden().values().data(),
                      before.final_hidden().values().size() * sizeof(real)) == 0);

  // saving the loaded params is byte-identical
  loaded.save(dir + "/m2.ckpt");
  REQUIRE(testutil::read_file(dir + "/m.ckpt") == testutil::read_file(dir + "/m2.ckpt"));
}

TEST_CASE("full tiny-model gradients match finite differences") {
  Fixture f(2, 16, 5);
  EncodedInput enc = f.encode();
  Rng g = make_rng(17);
  enc = apply_mlm_masking(enc, 0.3, g);
  if (enc.mlm_labels.empty()) enc.mlm_labels[4] = enc.token_ids[4];

  auto build = [&] {
    Tensor h0 = embed(enc, f.ds.images[0], f.ds.num_classes, f.params);
    AttentionMask m = build_mask(MaskKind::bidirectional, enc.length(), enc.length());
    ForwardResult r = encoder_forward(h0, m, f.params);
    std::vector<int64_t> positions;
    std::vector<int64_t> labels;
    for (const auto& [pos, orig] : enc.mlm_labels) {
      positions.push_back(pos);
      labels.push_back(orig);
    }
    Tensor mlm = cross_entropy_rows(mlm_logits(r.final_hidden(), positions, f.params), labels);
    Tensor nsp = cross_entropy_rows(nsp_logits(r.final_hidden(), f.params), {1});
    return add(mlm, nsp);
  };

  // spot-check a representative subset of parameters elementwise; the
  // acceptance suite sweeps every element
  std::vector<Tensor> wrt = {f.params.layers[0].wq,   f.params.layers[1].ff_w2,
                             f.params.layers[0].ln1_g, f.params.vis_w,
                             f.params.seg_emb,         f.params.nsp_w,
                             f.params.mlm_bias};
  REQUIRE(testutil::max_grad_error(build, wrt) < 1e-4);
}
