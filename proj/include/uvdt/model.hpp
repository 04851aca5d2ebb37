// Copyright (c) 2026 UVDT contributors
// SPDX-License-Identifier: Apache-2.0
//
// The unified vision-dialog transformer encoder: embeddings for the packed
// token/vision sequence, L post-norm blocks of masked multi-head attention,
// and the MLM / NSP output heads.
#pragma once

#include "uvdt/checkpoint.hpp"
#include "uvdt/data.hpp"
#include "uvdt/encoding.hpp"
#include "uvdt/rng.hpp"
#include "uvdt/tensor.hpp"

#include <json.hpp>

#include <cmath>
#include <string>
#include <utility>
#include <vector>

namespace uvdt::model {

struct ModelConfig {
  int layers = 4;
  int num_heads = 4;
  int hidden = 128;
  int vocab_size = 0;
  int max_positions = 250;
  int vision_dim = 16;
  int num_segments = 2;

  int head_dim() const { return hidden / num_heads; }
  int ff_dim() const { return 4 * hidden; }

  void validate() const {
    if (hidden % num_heads != 0) throw Error("model config: hidden not divisible by num_heads");
    if (layers < 0 || num_heads < 1 || hidden < 2) throw Error("model config: bad dimensions");
    if (vocab_size < data::kNumSpecials) throw Error("model config: vocab_size too small");
  }

  nlohmann::json to_json() const {
    return {{"layers", layers},       {"num_heads", num_heads},
            {"hidden", hidden},       {"vocab_size", vocab_size},
            {"max_positions", max_positions}, {"vision_dim", vision_dim},
            {"num_segments", num_segments}};
  }

  static ModelConfig from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.layers = j.at("layers").get<int>();
    c.num_heads = j.at("num_heads").get<int>();
    c.hidden = j.at("hidden").get<int>();
    c.vocab_size = j.at("vocab_size").get<int>();
    c.max_positions = j.at("max_positions").get<int>();
    c.vision_dim = j.at("vision_dim").get<int>();
    c.num_segments = j.at("num_segments").get<int>();
    c.validate();
    return c;
  }
};

struct Parameters {
  ModelConfig cfg;

  Tensor tok_emb, pos_emb, seg_emb;
  Tensor vis_w, vis_b;
  Tensor emb_ln_g, emb_ln_b;

  struct Layer {
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor ln1_g, ln1_b;
    Tensor ff_w1, ff_b1, ff_w2, ff_b2;
    Tensor ln2_g, ln2_b;
  };
  std::vector<Layer> layers;

  Tensor mlm_bias;      // output bias; projection weights are tied to tok_emb
  Tensor nsp_w, nsp_b;  // binary classifier on [CLS]

  static Parameters init(const ModelConfig& cfg, uint64_t seed) {
    cfg.validate();
    Rng g = make_rng(mix_seed(seed, 0x9a6a));
    auto randn = [&](Shape shape, real std) {
      std::vector<real> v(static_cast<size_t>(shape_numel(shape)));
      for (real& x : v) x = static_cast<real>(rand_normal(g)) * std;
      Tensor t = Tensor::from(std::move(shape), std::move(v));
      t.set_requires_grad(true);
      return t;
    };
    auto constant = [&](Shape shape, real val) {
      Tensor t = Tensor::filled(std::move(shape), val);
      t.set_requires_grad(true);
      return t;
    };
    const real std = real(0.02);
    const int d = cfg.hidden;
    Parameters p;
    p.cfg = cfg;
    p.tok_emb = randn({cfg.vocab_size, d}, std);
    p.pos_emb = randn({cfg.max_positions, d}, std);
    p.seg_emb = randn({cfg.num_segments, d}, std);
    p.vis_w = randn({cfg.vision_dim + data::kSpatialDim, d}, std);
    p.vis_b = constant({d}, 0);
    p.emb_ln_g = constant({d}, 1);
    p.emb_ln_b = constant({d}, 0);
    for (int l = 0; l < cfg.layers; ++l) {
      Layer lay;
      lay.wq = randn({d, d}, std);
      lay.bq = constant({d}, 0);
      lay.wk = randn({d, d}, std);
      lay.bk = constant({d}, 0);
      lay.wv = randn({d, d}, std);
      lay.bv = constant({d}, 0);
      lay.wo = randn({d, d}, std);
      lay.bo = constant({d}, 0);
      lay.ln1_g = constant({d}, 1);
      lay.ln1_b = constant({d}, 0);
      lay.ff_w1 = randn({d, cfg.ff_dim()}, std);
      lay.ff_b1 = constant({cfg.ff_dim()}, 0);
      lay.ff_w2 = randn({cfg.ff_dim(), d}, std);
      lay.ff_b2 = constant({d}, 0);
      lay.ln2_g = constant({d}, 1);
      lay.ln2_b = constant({d}, 0);
      p.layers.push_back(std::move(lay));
    }
    p.mlm_bias = constant({cfg.vocab_size}, 0);
    p.nsp_w = randn({d, 2}, std);
    p.nsp_b = constant({2}, 0);
    return p;
  }

  std::vector<std::pair<std::string, Tensor>> named() const {
    std::vector<std::pair<std::string, Tensor>> out = {
        {"tok_emb", tok_emb}, {"pos_emb", pos_emb}, {"seg_emb", seg_emb},
        {"vis_w", vis_w},     {"vis_b", vis_b},     {"emb_ln_g", emb_ln_g},
        {"emb_ln_b", emb_ln_b}};
    for (size_t l = 0; l < layers.size(); ++l) {
      const std::string pre = "layer" + std::to_string(l) + ".";
      const Layer& lay = layers[l];
      out.emplace_back(pre + "wq", lay.wq);
      out.emplace_back(pre + "bq", lay.bq);
      out.emplace_back(pre + "wk", lay.wk);
      out.emplace_back(pre + "bk", lay.bk);
      out.emplace_back(pre + "wv", lay.wv);
      out.emplace_back(pre + "bv", lay.bv);
      out.emplace_back(pre + "wo", lay.wo);
      out.emplace_back(pre + "bo", lay.bo);
      out.emplace_back(pre + "ln1_g", lay.ln1_g);
      out.emplace_back(pre + "ln1_b", lay.ln1_b);
      out.emplace_back(pre + "ff_w1", lay.ff_w1);
      out.emplace_back(pre + "ff_b1", lay.ff_b1);
      out.emplace_back(pre + "ff_w2", lay.ff_w2);
      out.emplace_back(pre + "ff_b2", lay.ff_b2);
      out.emplace_back(pre + "ln2_g", lay.ln2_g);
      out.emplace_back(pre + "ln2_b", lay.ln2_b);
    }
    out.emplace_back("mlm_bias", mlm_bias);
    out.emplace_back("nsp_w", nsp_w);
    out.emplace_back("nsp_b", nsp_b);
    return out;
  }

  std::vector<Tensor> all() const {
    std::vector<Tensor> out;
    for (auto& [name, t] : named()) out.push_back(t);
    return out;
  }

  int64_t count() const {
    int64_t n = 0;
    for (const auto& [name, t] : named()) n += t.numel();
    return n;
  }

  // Closed-form parameter count implied by the config alone.
  static int64_t expected_count(const ModelConfig& c) {
    const int64_t d = c.hidden;
    int64_t n = 0;
    n += static_cast<int64_t>(c.vocab_size) * d;                  // tok_emb
    n += static_cast<int64_t>(c.max_positions) * d;               // pos_emb
    n += static_cast<int64_t>(c.num_segments) * d;                // seg_emb
    n += static_cast<int64_t>(c.vision_dim + data::kSpatialDim) * d + d;  // vis proj
    n += 2 * d;                                                   // emb layer norm
    n += static_cast<int64_t>(c.layers) *
         (4 * (d * d + d) + 2 * d +                               // attention + ln1
          d * static_cast<int64_t>(c.ff_dim()) + c.ff_dim() +     // ff in
          static_cast<int64_t>(c.ff_dim()) * d + d + 2 * d);      // ff out + ln2
    n += c.vocab_size;                                            // mlm bias
    n += d * 2 + 2;                                               // nsp head
    return n;
  }

  void zero_grad() {
    for (Tensor& t : all()) t.zero_grad();
  }

  void save(const std::string& path) const {
    save_checkpoint(path, named(), cfg.to_json().dump());
  }

  static Parameters load(const std::string& path) {
    Checkpoint ck = load_checkpoint(path);
    ModelConfig cfg = ModelConfig::from_json(nlohmann::json::parse(ck.meta));
    Parameters p = Parameters::init(cfg, 0);
    for (auto& [name, t] : p.named()) {
      const Tensor& src = ck.at(name);
      if (src.shape() != t.shape())
        throw IoError("checkpoint: shape mismatch for '" + name + "'");
      Tensor dst = t;
      dst.values() = src.values();
    }
    return p;
  }
};

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

// H^0: text rows are tok+pos+seg embeddings, vision rows project the RoI
// feature concatenated with its spatial encoding; both are layer-normed.
inline Tensor embed(const encoding::EncodedInput& enc, const data::DialogInstance& inst,
                    int num_classes, const Parameters& p) {
  for (int id : enc.token_ids)
    if (id < 0 || id >= p.cfg.vocab_size)
      throw data::ValidationError("embed: token id " + std::to_string(id) + " outside vocab");
  std::vector<int64_t> tok_ids(enc.token_ids.begin(), enc.token_ids.end());
  std::vector<int64_t> pos_ids(enc.position_ids.begin(), enc.position_ids.end());
  std::vector<int64_t> seg_ids(enc.segment_ids.begin(), enc.segment_ids.end());
  Tensor h = gather_rows(p.tok_emb, tok_ids);

  if (!enc.vision_slots.empty()) {
    const int k = static_cast<int>(inst.objects.size());
    const int fdim = p.cfg.vision_dim + data::kSpatialDim;
    std::vector<real> feats(static_cast<size_t>(k) * static_cast<size_t>(fdim));
    for (int oi = 0; oi < k; ++oi) {
      const auto& obj = inst.objects[static_cast<size_t>(oi)];
      if (static_cast<int>(obj.feature.size()) != p.cfg.vision_dim)
        throw data::ValidationError("embed: object feature dim " +
                                    std::to_string(obj.feature.size()) + ", model expects " +
                                    std::to_string(p.cfg.vision_dim));
      auto spatial = data::encode_spatial(obj, inst.width, inst.height, num_classes);
      real* row = feats.data() + static_cast<size_t>(oi) * fdim;
      std::copy(obj.feature.begin(), obj.feature.end(), row);
      std::copy(spatial.begin(), spatial.end(), row + p.cfg.vision_dim);
    }
    Tensor vis_in = Tensor::from({k, fdim}, std::move(feats));
    Tensor vis_rows = add_rowvec(matmul(vis_in, p.vis_w), p.vis_b);
    h = merge_rows(h, vis_rows, enc.vision_slots);
  }

  h = add(h, gather_rows(p.pos_emb, pos_ids));
  h = add(h, gather_rows(p.seg_emb, seg_ids));
  return layer_norm(h, p.emb_ln_g, p.emb_ln_b);
}

struct ForwardResult {
  std::vector<Tensor> hidden;                   // hidden[l] = H^l, l = 0..L
  std::vector<std::vector<Tensor>> attention;   // [layer][head], each [n x n]

  const Tensor& final_hidden() const { return hidden.back(); }
};

inline ForwardResult encoder_forward(const Tensor& h0, const encoding::AttentionMask& mask,
                                     const Parameters& p) {
  const int64_t n = h0.dim(0);
  if (mask.matrix.dim(0) != n || mask.matrix.dim(1) != n)
    throw ShapeError("forward: mask size " + shape_str(mask.matrix.shape()) +
                     " vs sequence length " + std::to_string(n));
  const int dk = p.cfg.head_dim();
  const real inv_sqrt_dk = real(1) / std::sqrt(static_cast<real>(dk));
  ForwardResult res;
  res.hidden.push_back(h0);
  Tensor h = h0;
  for (const auto& lay : p.layers) {
    Tensor q = add_rowvec(matmul(h, lay.wq), lay.bq);
    Tensor k = add_rowvec(matmul(h, lay.wk), lay.bk);
    Tensor v = add_rowvec(matmul(h, lay.wv), lay.bv);
    std::vector<Tensor> head_ctx;
    std::vector<Tensor> head_attn;
    for (int hd = 0; hd < p.cfg.num_heads; ++hd) {
      Tensor qh = slice_cols(q, hd * dk, dk);
      Tensor kh = slice_cols(k, hd * dk, dk);
      Tensor vh = slice_cols(v, hd * dk, dk);
      Tensor scores = scale(matmul_nt(qh, kh), inv_sqrt_dk);
      Tensor probs = masked_softmax(scores, mask.matrix);
      head_attn.push_back(probs);
      head_ctx.push_back(matmul(probs, vh));
    }
    Tensor attn_out = add_rowvec(matmul(concat_cols(head_ctx), lay.wo), lay.bo);
    h = layer_norm(add(h, attn_out), lay.ln1_g, lay.ln1_b);
    Tensor ff = add_rowvec(matmul(gelu(add_rowvec(matmul(h, lay.ff_w1), lay.ff_b1)), lay.ff_w2),
                           lay.ff_b2);
    h = layer_norm(add(h, ff), lay.ln2_g, lay.ln2_b);
    res.hidden.push_back(h);
    res.attention.push_back(std::move(head_attn));
  }
  return res;
}

// Vocabulary logits at the given positions; weights tied to the token
// embedding table, so logit(v) = dot(hidden, emb_v) + bias_v.
inline Tensor mlm_logits(const Tensor& h_final, const std::vector<int64_t>& positions,
                         const Parameters& p) {
  for (int64_t pos : positions)
    if (pos < 0 || pos >= h_final.dim(0))
      throw ShapeError("mlm_logits: position out of range");
  Tensor rows = gather_rows(h_final, positions);
  return add_rowvec(matmul_nt(rows, p.tok_emb), p.mlm_bias);
}

// Two-way classifier logits on the [CLS] row (position 0).
inline Tensor nsp_logits(const Tensor& h_final, const Parameters& p) {
  Tensor cls = gather_rows(h_final, {0});
  return add_rowvec(matmul(cls, p.nsp_w), p.nsp_b);
}

// Positive-class probability in (0,1).
inline double nsp_score(const Tensor& h_final, const Parameters& p) {
  NoGradGuard ng;
  Tensor logits = nsp_logits(h_final, p);
  const real z0 = logits.values()[0];
  const real z1 = logits.values()[1];
  const real m = std::max(z0, z1);
  const real e0 = std::exp(z0 - m), e1 = std::exp(z1 - m);
  return static_cast<double>(e1 / (e0 + e1));
}

}  // namespace uvdt::model
