// Copyright (c) 2026 UVDT contributors
// SPDX-License-Identifier: Apache-2.0
//
// Training: visually grounded MLM+NSP with 1:1 positive/negative sampling,
// the two-phase schedule, and dense-annotation fine-tuning with listwise
// ranking losses (CE, ListNet, ListMLE, ApproxNDCG).
#pragma once

#include "uvdt/data.hpp"
#include "uvdt/encoding.hpp"
#include "uvdt/inference.hpp"
#include "uvdt/model.hpp"
#include "uvdt/optim.hpp"
#include "uvdt/rng.hpp"
#include "uvdt/tensor.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace uvdt::training {

using data::Dataset;
using data::Vocab;
using encoding::HistoryMode;

enum class Setting { discriminative, generative };

inline Setting setting_from(const std::string& s) {
  if (s == "disc" || s == "discriminative") return Setting::discriminative;
  if (s == "gen" || s == "generative") return Setting::generative;
  throw Error("unknown setting '" + s + "'");
}

enum class RankLossKind { ce, listnet, listmle, approxndcg };

inline RankLossKind rank_loss_from(const std::string& s) {
  if (s == "ce") return RankLossKind::ce;
  if (s == "listnet") return RankLossKind::listnet;
  if (s == "listmle") return RankLossKind::listmle;
  if (s == "approxndcg") return RankLossKind::approxndcg;
  throw Error("unknown rank loss '" + s + "'");
}

inline const char* to_string(RankLossKind k) {
  switch (k) {
    case RankLossKind::ce: return "ce";
    case RankLossKind::listnet: return "listnet";
    case RankLossKind::listmle: return "listmle";
    case RankLossKind::approxndcg: return "approxndcg";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// Listwise ranking losses (graded relevance is a constant, gradients flow to
// the predicted scores only)
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<double> stable_softmax(const std::vector<double>& x) {
  const double mx = *std::max_element(x.begin(), x.end());
  std::vector<double> out(x.size());
  double denom = 0;
  for (size_t i = 0; i < x.size(); ++i) {
    out[i] = std::exp(x[i] - mx);
    denom += out[i];
  }
  for (double& v : out) v /= denom;
  return out;
}

inline std::vector<double> as_doubles(const Tensor& t) {
  return std::vector<double>(t.values().begin(), t.values().end());
}

inline void check_rank_inputs(const Tensor& pred, const std::vector<double>& relevance,
                              const char* op) {
  if (pred.numel() < 2) throw ShapeError(std::string(op) + ": needs at least 2 candidates");
  if (relevance.size() != static_cast<size_t>(pred.numel()))
    throw ShapeError(std::string(op) + ": relevance length mismatch");
}

}  // namespace detail

// Top-1 ListNet: cross-entropy between softmax(relevance) and softmax(pred).
inline Tensor listnet_loss(const Tensor& pred, const std::vector<double>& relevance) {
  detail::check_rank_inputs(pred, relevance, "listnet_loss");
  const auto p = detail::as_doubles(pred);
  const auto fp = detail::stable_softmax(p);
  const auto fs = detail::stable_softmax(relevance);
  double loss = 0;
  for (size_t i = 0; i < p.size(); ++i) loss -= fs[i] * std::log(fp[i]);
  return make_op({1}, {static_cast<real>(loss)}, {pred},
                 [fp, fs](TensorNode& self) {
                   auto& pp = self.parents[0];
                   if (!pp->requires_grad) return;
                   pp->ensure_grad();
                   const real g = self.grad[0];
                   for (size_t i = 0; i < fp.size(); ++i)
                     pp->grad[i] += g * static_cast<real>(fp[i] - fs[i]);
                 },
                 "listnet_loss");
}

// Softmax cross-entropy against relevance normalized to a distribution.
inline Tensor rank_ce_loss(const Tensor& pred, const std::vector<double>& relevance) {
  detail::check_rank_inputs(pred, relevance, "rank_ce_loss");
  double total = 0;
  for (double r : relevance) total += r;
  if (total <= 0)
    throw data::ValidationError("rank_ce_loss: relevance sums to zero");
  std::vector<double> q(relevance);
  for (double& v : q) v /= total;
  const auto fp = detail::stable_softmax(detail::as_doubles(pred));
  double loss = 0;
  for (size_t i = 0; i < q.size(); ++i)
    if (q[i] > 0) loss -= q[i] * std::log(fp[i]);
  return make_op({1}, {static_cast<real>(loss)}, {pred},
                 [fp, q](TensorNode& self) {
                   auto& pp = self.parents[0];
                   if (!pp->requires_grad) return;
                   pp->ensure_grad();
                   const real g = self.grad[0];
                   for (size_t i = 0; i < fp.size(); ++i)
                     pp->grad[i] += g * static_cast<real>(fp[i] - q[i]);
                 },
                 "rank_ce_loss");
}

// Permutation induced by the relevance grades: descending, ties broken by
// candidate index.
inline std::vector<int> relevance_order(const std::vector<double>& relevance) {
  std::vector<int> order(relevance.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return relevance[(size_t)a] > relevance[(size_t)b]; });
  return order;
}

// Plackett-Luce negative log-likelihood of the relevance-sorted permutation.
inline Tensor listmle_loss(const Tensor& pred, const std::vector<double>& relevance) {
  detail::check_rank_inputs(pred, relevance, "listmle_loss");
  const auto p = detail::as_doubles(pred);
  const auto order = relevance_order(relevance);
  const size_t n = p.size();
  // suffix log-sum-exp over the sorted tail
  std::vector<double> lse(n);
  double mx = -std::numeric_limits<double>::infinity();
  double acc = 0;
  for (size_t i = n; i-- > 0;) {
    const double v = p[(size_t)order[i]];
    if (v > mx) {
      acc = acc * std::exp(mx - v) + 1.0;
      mx = v;
    } else {
      acc += std::exp(v - mx);
    }
    lse[i] = mx + std::log(acc);
  }
  double loss = 0;
  for (size_t i = 0; i < n; ++i) loss += lse[i] - p[(size_t)order[i]];
  return make_op({1}, {static_cast<real>(loss)}, {pred},
                 [p, order, lse](TensorNode& self) {
                   auto& pp = self.parents[0];
                   if (!pp->requires_grad) return;
                   pp->ensure_grad();
                   const real g = self.grad[0];
                   const size_t n = p.size();
                   for (size_t i = 0; i < n; ++i) {
                     for (size_t k = i; k < n; ++k) {
                       const int idx = order[k];
                       pp->grad[(size_t)idx] +=
                           g * static_cast<real>(std::exp(p[(size_t)idx] - lse[i]));
                     }
                     pp->grad[(size_t)order[i]] -= g;
                   }
                 },
                 "listmle_loss");
}

// 1 - NDCG with the smoothed rank r_i = 1 + sum_j sigmoid((p_j - p_i)/T);
// linear gains, full-list cutoff.
inline Tensor approx_ndcg_loss(const Tensor& pred, const std::vector<double>& relevance,
                               double temperature = 0.1) {
  detail::check_rank_inputs(pred, relevance, "approx_ndcg_loss");
  if (temperature <= 0)
    throw data::ValidationError("approx_ndcg_loss: temperature must be positive");
  const auto p = detail::as_doubles(pred);
  const size_t n = p.size();
  std::vector<double> ideal(relevance);
  std::sort(ideal.begin(), ideal.end(), std::greater<double>());
  double idcg = 0;
  for (size_t k = 0; k < n; ++k) idcg += ideal[k] / std::log2(2.0 + k);
  if (idcg <= 0)
    throw data::ValidationError("approx_ndcg_loss: relevance has no gain");
  auto sigmoid = [](double x) { return 1.0 / (1.0 + std::exp(-x)); };
  std::vector<double> rank(n, 1.0);
  for (size_t i = 0; i < n; ++i)
    for (size_t j = 0; j < n; ++j)
      if (j != i) rank[i] += sigmoid((p[j] - p[i]) / temperature);
  double dcg = 0;
  for (size_t i = 0; i < n; ++i) dcg += relevance[i] / std::log2(1.0 + rank[i]);
  const double loss = 1.0 - dcg / idcg;
  return make_op(
      {1}, {static_cast<real>(loss)}, {pred},
      [p, relevance, rank, idcg, temperature, sigmoid](TensorNode& self) {
        auto& pp = self.parents[0];
        if (!pp->requires_grad) return;
        pp->ensure_grad();
        const double g = static_cast<double>(self.grad[0]);
        const size_t n = p.size();
        const double ln2 = std::log(2.0);
        // d(1/log2(1+r))/dr = -ln2 / ((1+r) * ln(1+r)^2)
        std::vector<double> dcoef(n);
        for (size_t i = 0; i < n; ++i) {
          const double lr = std::log(1.0 + rank[i]);
          dcoef[i] = relevance[i] * (-ln2) / ((1.0 + rank[i]) * lr * lr);
        }
        for (size_t k = 0; k < n; ++k) {
          double acc = 0;
          for (size_t i = 0; i < n; ++i) {
            if (i == k) continue;
            const double s_ik = sigmoid((p[k] - p[i]) / temperature);
            const double ds = s_ik * (1.0 - s_ik) / temperature;
            acc += dcoef[i] * ds;          // dr_i/dp_k, i != k
            const double s_ki = sigmoid((p[i] - p[k]) / temperature);
            acc -= dcoef[k] * s_ki * (1.0 - s_ki) / temperature;  // dr_k/dp_k part
          }
          pp->grad[k] += static_cast<real>(g * (-1.0 / idcg) * acc);
        }
      },
      "approx_ndcg_loss");
}

inline Tensor rank_loss(RankLossKind kind, const Tensor& pred,
                        const std::vector<double>& relevance, double temperature = 0.1) {
  switch (kind) {
    case RankLossKind::ce: return rank_ce_loss(pred, relevance);
    case RankLossKind::listnet: return listnet_loss(pred, relevance);
    case RankLossKind::listmle: return listmle_loss(pred, relevance);
    case RankLossKind::approxndcg: return approx_ndcg_loss(pred, relevance, temperature);
  }
  throw Error("rank_loss: bad kind");
}

// ---------------------------------------------------------------------------
// Candidate sub-sampling for dense fine-tuning
// ---------------------------------------------------------------------------

// Non-zero relevance candidates first (random order, uniformly sub-selected
// when they overflow), zeros fill the remainder.
inline std::vector<int> subsample_candidates(const std::vector<double>& relevance, int n,
                                             Rng& rng) {
  if (n > static_cast<int>(relevance.size())) n = static_cast<int>(relevance.size());
  std::vector<int> nonzero, zero;
  for (size_t i = 0; i < relevance.size(); ++i)
    (relevance[i] > 0 ? nonzero : zero).push_back(static_cast<int>(i));
  fisher_yates(nonzero, rng);
  fisher_yates(zero, rng);
  std::vector<int> out;
  for (int idx : nonzero) {
    if (static_cast<int>(out.size()) >= n) break;
    out.push_back(idx);
  }
  for (int idx : zero) {
    if (static_cast<int>(out.size()) >= n) break;
    out.push_back(idx);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Pair sampling and the joint MLM+NSP loss
// ---------------------------------------------------------------------------

struct TrainExample {
  encoding::EncodedInput enc;
  int image_index = 0;
  int nsp_label = 1;  // 1 iff the appended candidate is the gt answer
  encoding::MaskKind mask = encoding::MaskKind::bidirectional;
  bool use_mlm = true;
  bool use_nsp = true;
};

struct SampleOptions {
  HistoryMode history = HistoryMode::one_turn;
  double mlm_rate = 0.15;
  int max_len = 250;
};

// One positive (gt answer, full MLM) and one negative (uniform among the
// other candidates, answer span exempt from MLM), per turn and epoch.
inline std::pair<TrainExample, TrainExample> sample_pairs(const Dataset& ds, const Vocab& vocab,
                                                          int image_index, int turn,
                                                          const SampleOptions& opts, Rng& rng) {
  const auto& inst = ds.images[(size_t)image_index];
  const auto& t = inst.turns[(size_t)turn];
  TrainExample pos;
  pos.image_index = image_index;
  pos.nsp_label = 1;
  pos.enc = encoding::apply_mlm_masking(
      encoding::assemble(inst, turn, t.answer, opts.history, vocab, opts.max_len), opts.mlm_rate,
      rng, /*mask_answer=*/true);

  const int pool = static_cast<int>(t.candidate_ids.size());
  int neg_pick = static_cast<int>(rand_index(rng, static_cast<size_t>(pool - 1)));
  if (neg_pick >= t.gt_index) ++neg_pick;
  TrainExample neg;
  neg.image_index = image_index;
  neg.nsp_label = 0;
  const std::string& neg_text = ds.answers[(size_t)t.candidate_ids[(size_t)neg_pick]];
  neg.enc = encoding::apply_mlm_masking(
      encoding::assemble(inst, turn, neg_text, opts.history, vocab, opts.max_len), opts.mlm_rate,
      rng, /*mask_answer=*/false);
  return {std::move(pos), std::move(neg)};
}

struct LossParts {
  Tensor total;
  double mlm = 0;
  double nsp = 0;
};

// Mean over the batch of mlm_coef * MLM + nsp_coef * NSP. Examples without
// masked positions contribute no MLM term.
inline LossParts joint_loss(const std::vector<TrainExample>& batch, const Dataset& ds,
                            const model::Parameters& params, double mlm_coef, double nsp_coef) {
  if (batch.empty()) throw data::ValidationError("joint_loss: empty batch");
  Tensor total;
  double mlm_sum = 0, nsp_sum = 0;
  int mlm_n = 0, nsp_n = 0;
  for (const auto& ex : batch) {
    const auto& inst = ds.images[(size_t)ex.image_index];
    auto mask = encoding::build_mask(
        ex.mask, ex.enc.length(),
        ex.mask == encoding::MaskKind::seq2seq ? ex.enc.context_len : ex.enc.length());
    Tensor h0 = model::embed(ex.enc, inst, ds.num_classes, params);
    auto res = model::encoder_forward(h0, mask, params);
    Tensor ex_loss;
    if (ex.use_mlm && !ex.enc.mlm_labels.empty()) {
      std::vector<int64_t> positions, labels;
      for (const auto& [pos, orig] : ex.enc.mlm_labels) {
        positions.push_back(pos);
        labels.push_back(orig);
      }
      Tensor mlm = cross_entropy_rows(model::mlm_logits(res.final_hidden(), positions, params),
                                      labels);
      mlm_sum += mlm.item();
      ++mlm_n;
      ex_loss = scale(mlm, static_cast<real>(mlm_coef));
    }
    if (ex.use_nsp) {
      Tensor nsp = cross_entropy_rows(model::nsp_logits(res.final_hidden(), params),
                                      {ex.nsp_label});
      nsp_sum += nsp.item();
      ++nsp_n;
      Tensor term = scale(nsp, static_cast<real>(nsp_coef));
      ex_loss = ex_loss.defined() ? add(ex_loss, term) : term;
    }
    if (!ex_loss.defined()) continue;
    total = total.defined() ? add(total, ex_loss) : ex_loss;
  }
  LossParts parts;
  if (total.defined())
    parts.total = scale(total, real(1) / static_cast<real>(batch.size()));
  parts.mlm = mlm_n ? mlm_sum / mlm_n : 0;
  parts.nsp = nsp_n ? nsp_sum / nsp_n : 0;
  return parts;
}

// ---------------------------------------------------------------------------
// Schedule
// ---------------------------------------------------------------------------

struct TrainConfig {
  int phase1_epochs = 20;
  int phase2_epochs = 5;
  int dense_epochs = 0;
  HistoryMode history_phase1 = HistoryMode::one_turn;
  HistoryMode history_phase2 = HistoryMode::full;
  double lr = 1e-3;
  double dense_lr = 0;  // 0: reuse lr
  int batch_size = 16;
  double warmup_fraction = 0.1;
  double mlm_coef = 1.0;
  double nsp_coef = 1.0;
  Setting setting = Setting::discriminative;
  int n_subsample = 30;
  double mlm_rate = 0.15;
  double answer_mlm_rate = 0.7;
  RankLossKind dense_loss = RankLossKind::listnet;
  double approx_ndcg_temperature = 0.1;
  uint64_t seed = 1;
  int eval_every = 1;     // 0: skip metric evaluation entirely
  int eval_max_turns = 0; // 0: evaluate everything
  double early_stop_loss = 0;  // both > 0: stop the phase once reached
  double early_stop_r1 = 0;

  void validate() const {
    if (phase1_epochs < 0 || phase2_epochs < 0 || dense_epochs < 0)
      throw data::ValidationError("train config: negative epoch count");
    if (mlm_coef < 0 || nsp_coef < 0)
      throw data::ValidationError("train config: loss coefficients must be >= 0");
    if (n_subsample < 2 || n_subsample > 100)
      throw data::ValidationError("train config: n_subsample outside [2,100]");
    if (batch_size < 1) throw data::ValidationError("train config: batch_size must be >= 1");
    if (warmup_fraction < 0 || warmup_fraction >= 1)
      throw data::ValidationError("train config: warmup_fraction outside [0,1)");
    if (mlm_rate < 0 || mlm_rate > 1 || answer_mlm_rate < 0 || answer_mlm_rate > 1)
      throw data::ValidationError("train config: masking rates outside [0,1]");
  }
};

struct EpochLog {
  int epoch = 0;  // global, 1-based across phases
  std::string phase;
  double loss = 0;
  double loss_mlm = 0;
  double loss_nsp = 0;
  std::optional<double> r1, mrr, mean_rank, ndcg;

  nlohmann::json to_json() const {
    nlohmann::json j = {{"epoch", epoch},
                        {"phase", phase},
                        {"loss", loss},
                        {"loss_mlm", loss_mlm},
                        {"loss_nsp", loss_nsp}};
    if (r1) j["r1"] = *r1;
    if (mrr) j["mrr"] = *mrr;
    if (mean_rank) j["mean_rank"] = *mean_rank;
    if (ndcg) j["ndcg"] = *ndcg;
    return j;
  }
};

namespace detail {

struct TurnRef {
  int image = 0;
  int turn = 0;
};

inline std::vector<TurnRef> all_turns(const Dataset& ds, bool dense_only = false) {
  std::vector<TurnRef> out;
  for (size_t i = 0; i < ds.images.size(); ++i)
    for (size_t t = 0; t < ds.images[i].turns.size(); ++t)
      if (!dense_only || ds.images[i].turns[t].relevance)
        out.push_back({static_cast<int>(i), static_cast<int>(t)});
  return out;
}

inline void eval_into(EpochLog& log, const Dataset& eval_ds, const model::Parameters& params,
                      const Vocab& vocab, HistoryMode history, int max_turns) {
  std::vector<inference::RankedPrediction> preds;
  const auto turns = all_turns(eval_ds);
  for (const auto& tr : turns) {
    if (max_turns > 0 && static_cast<int>(preds.size()) >= max_turns) break;
    preds.push_back(
        inference::rank_discriminative(eval_ds, tr.image, tr.turn, params, vocab, history));
  }
  if (preds.empty()) return;
  const auto report = inference::compute_metrics(preds, eval_ds);
  log.r1 = report.overall.r1;
  log.mrr = report.overall.mrr;
  log.mean_rank = report.overall.mean_rank;
  if (report.overall.ndcg) log.ndcg = *report.overall.ndcg;
}

}  // namespace detail

// Runs phase 1 (MLM+NSP, short history), phase 2 (setting-specific), and the
// optional dense fine-tuning phase. Mutates `params`; returns per-epoch logs
// and, when out_dir is set, writes train_log.jsonl plus per-phase checkpoints.
inline std::vector<EpochLog> run_schedule(const TrainConfig& cfg, model::Parameters& params,
                                          const Dataset& train, const Vocab& vocab,
                                          const Dataset* val = nullptr,
                                          const std::string& out_dir = "") {
  cfg.validate();
  if (train.images.empty()) throw data::ValidationError("run_schedule: empty dataset");
  const Dataset& eval_ds = val ? *val : train;

  std::ofstream log_os;
  if (!out_dir.empty()) {
    log_os.open(out_dir + "/train_log.jsonl", std::ios::binary);
    if (!log_os) throw IoError("run_schedule: cannot write log in " + out_dir);
  }
  std::vector<EpochLog> logs;
  int global_epoch = 0;

  auto emit = [&](EpochLog log) {
    if (log_os.is_open()) log_os << log.to_json().dump() << "\n" << std::flush;
    logs.push_back(std::move(log));
  };

  auto params_vec = params.all();

  // ---- joint phases (1 and 2) ----
  auto run_joint_phase = [&](const std::string& name, int phase_id, int epochs,
                             HistoryMode history, double mlm_coef, double nsp_coef,
                             bool negatives, bool answer_mlm_only) {
    if (epochs == 0) return;
    const auto turns = detail::all_turns(train);
    const int per_turn = negatives ? 2 : 1;
    const int examples = static_cast<int>(turns.size()) * per_turn;
    const int steps_per_epoch = (examples + cfg.batch_size - 1) / cfg.batch_size;
    AdamConfig acfg;
    acfg.lr = cfg.lr;
    acfg.warmup_fraction = cfg.warmup_fraction;
    acfg.total_steps = static_cast<int64_t>(steps_per_epoch) * epochs;
    AdamState state = AdamState::init(params_vec);
    int64_t step = 0;
    for (int epoch = 1; epoch <= epochs; ++epoch) {
      Rng rng = make_rng(mix_seed(cfg.seed, static_cast<uint64_t>(phase_id), static_cast<uint64_t>(epoch)));
      std::vector<detail::TurnRef> order = turns;
      fisher_yates(order, rng);
      SampleOptions sopts;
      sopts.history = history;
      sopts.mlm_rate = mlm_coef > 0 ? cfg.mlm_rate : 0.0;  // NSP-only phases see clean text
      sopts.max_len = params.cfg.max_positions;

      std::vector<TrainExample> batch;
      double loss_sum = 0, mlm_sum = 0, nsp_sum = 0;
      int steps_done = 0;
      auto flush = [&] {
        if (batch.empty()) return;
        LossParts parts = joint_loss(batch, train, params, mlm_coef, nsp_coef);
        if (parts.total.defined()) {
          params.zero_grad();
          backward(parts.total);
          adam_step(params_vec, state, acfg, std::min<int64_t>(++step, acfg.total_steps));
          loss_sum += parts.total.item();
          mlm_sum += parts.mlm;
          nsp_sum += parts.nsp;
          ++steps_done;
        }
        batch.clear();
      };
      for (const auto& tr : order) {
        if (answer_mlm_only) {
          const auto& inst = train.images[(size_t)tr.image];
          const auto& t = inst.turns[(size_t)tr.turn];
          TrainExample pos;
          pos.image_index = tr.image;
          pos.nsp_label = 1;
          pos.mask = encoding::MaskKind::seq2seq;
          pos.use_nsp = false;
          pos.enc = encoding::apply_answer_masking(
              encoding::assemble(inst, tr.turn, t.answer, history, vocab, sopts.max_len),
              cfg.answer_mlm_rate, rng);
          if (pos.enc.mlm_labels.empty()) {
            // guarantee a prediction target
            const int pos_at = pos.enc.answer_start < pos.enc.length() ? pos.enc.answer_start
                                                                       : pos.enc.length() - 1;
            pos.enc.mlm_labels[pos_at] = pos.enc.token_ids[(size_t)pos_at];
            pos.enc.token_ids[(size_t)pos_at] = data::kMaskId;
          }
          batch.push_back(std::move(pos));
          if (static_cast<int>(batch.size()) >= cfg.batch_size) flush();
        } else {
          auto [pos, neg] = sample_pairs(train, vocab, tr.image, tr.turn, sopts, rng);
          pos.use_mlm = neg.use_mlm = mlm_coef > 0;
          pos.use_nsp = neg.use_nsp = nsp_coef > 0;
          batch.push_back(std::move(pos));
          batch.push_back(std::move(neg));
          if (static_cast<int>(batch.size()) >= cfg.batch_size) flush();
        }
      }
      flush();

      EpochLog log;
      log.epoch = ++global_epoch;
      log.phase = name;
      log.loss = steps_done ? loss_sum / steps_done : 0;
      log.loss_mlm = steps_done ? mlm_sum / steps_done : 0;
      log.loss_nsp = steps_done ? nsp_sum / steps_done : 0;
      const bool eval_now =
          cfg.eval_every > 0 && (epoch % cfg.eval_every == 0 || epoch == epochs);
      if (eval_now)
        detail::eval_into(log, eval_ds, params, vocab, history, cfg.eval_max_turns);
      const bool stop = cfg.early_stop_loss > 0 && cfg.early_stop_r1 > 0 &&
                        log.loss < cfg.early_stop_loss && log.r1 &&
                        *log.r1 >= cfg.early_stop_r1;
      emit(std::move(log));
      if (stop) break;
    }
  };

  run_joint_phase("phase1", 1, cfg.phase1_epochs, cfg.history_phase1, cfg.mlm_coef, cfg.nsp_coef,
                  /*negatives=*/true, /*answer_mlm_only=*/false);
  if (!out_dir.empty() && cfg.phase1_epochs > 0) params.save(out_dir + "/phase1.ckpt");

  if (cfg.setting == Setting::discriminative) {
    run_joint_phase("phase2_disc", 2, cfg.phase2_epochs, cfg.history_phase2, 0.0, cfg.nsp_coef,
                    /*negatives=*/true, /*answer_mlm_only=*/false);
  } else {
    run_joint_phase("phase2_gen", 2, cfg.phase2_epochs, cfg.history_phase2, cfg.mlm_coef, 0.0,
                    /*negatives=*/false, /*answer_mlm_only=*/true);
  }
  if (!out_dir.empty() && cfg.phase2_epochs > 0) params.save(out_dir + "/phase2.ckpt");

  // ---- dense fine-tuning on NSP log-odds ----
  if (cfg.dense_epochs > 0) {
    const auto dense_turns = detail::all_turns(train, /*dense_only=*/true);
    if (dense_turns.empty())
      throw data::ValidationError("run_schedule: dense fine-tuning needs relevance annotations");
    AdamConfig acfg;
    acfg.lr = cfg.dense_lr > 0 ? cfg.dense_lr : cfg.lr;
    acfg.warmup_fraction = cfg.warmup_fraction;
    acfg.total_steps = static_cast<int64_t>(dense_turns.size()) * cfg.dense_epochs;
    AdamState state = AdamState::init(params_vec);
    int64_t step = 0;
    const std::string phase_name = std::string("dense_") + to_string(cfg.dense_loss);
    for (int epoch = 1; epoch <= cfg.dense_epochs; ++epoch) {
      Rng rng = make_rng(mix_seed(cfg.seed, 3, static_cast<uint64_t>(epoch)));
      std::vector<detail::TurnRef> order = dense_turns;
      fisher_yates(order, rng);
      double loss_sum = 0;
      int steps_done = 0;
      for (const auto& tr : order) {
        const auto& inst = train.images[(size_t)tr.image];
        const auto& t = inst.turns[(size_t)tr.turn];
        const auto subset = subsample_candidates(*t.relevance, cfg.n_subsample, rng);
        std::vector<double> rel;
        std::vector<Tensor> scores;
        for (int ci : subset) {
          rel.push_back((*t.relevance)[(size_t)ci]);
          const std::string& text = train.answers[(size_t)t.candidate_ids[(size_t)ci]];
          auto enc = encoding::assemble(inst, tr.turn, text, cfg.history_phase2, vocab,
                                        params.cfg.max_positions);
          auto mask = encoding::build_mask(encoding::MaskKind::bidirectional, enc.length(),
                                           enc.length());
          Tensor h0 = model::embed(enc, inst, train.num_classes, params);
          auto res = model::encoder_forward(h0, mask, params);
          Tensor logits = model::nsp_logits(res.final_hidden(), params);  // [1 x 2]
          scores.push_back(sub(slice_cols(logits, 1, 1), slice_cols(logits, 0, 1)));
        }
        double rel_total = 0;
        for (double r : rel) rel_total += r;
        if (rel_total <= 0) continue;  // nothing to rank against
        Tensor pred = reshape(concat_cols(scores), {static_cast<int64_t>(scores.size())});
        Tensor loss = rank_loss(cfg.dense_loss, pred, rel, cfg.approx_ndcg_temperature);
        params.zero_grad();
        backward(loss);
        adam_step(params_vec, state, acfg, std::min<int64_t>(++step, acfg.total_steps));
        loss_sum += loss.item();
        ++steps_done;
      }
      EpochLog log;
      log.epoch = ++global_epoch;
      log.phase = phase_name;
      log.loss = steps_done ? loss_sum / steps_done : 0;
      const bool eval_now =
          cfg.eval_every > 0 && (epoch % cfg.eval_every == 0 || epoch == cfg.dense_epochs);
      if (eval_now)
        detail::eval_into(log, eval_ds, params, vocab, cfg.history_phase2, cfg.eval_max_turns);
      emit(std::move(log));
    }
    if (!out_dir.empty()) params.save(out_dir + "/dense.ckpt");
  }

  if (!out_dir.empty()) params.save(out_dir + "/final.ckpt");
  return logs;
}

}  // namespace uvdt::training
