// Copyright (c) 2026 UVDT contributors
// SPDX-License-Identifier: Apache-2.0
//
// Inference over a trained encoder: NSP candidate ranking, recursive masked
// decoding, log-likelihood ranking, evaluation metrics and score ensembling.
#pragma once

#include "uvdt/data.hpp"
#include "uvdt/encoding.hpp"
#include "uvdt/model.hpp"
#include "uvdt/tensor.hpp"

#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <thread>
#include <vector>

namespace uvdt::inference {

using data::Dataset;
using data::DialogInstance;
using data::Vocab;
using encoding::HistoryMode;

// UVDT_THREADS caps intra-command parallelism; default is sequential.
inline int num_threads() {
  const char* env = std::getenv("UVDT_THREADS");
  if (!env) return 1;
  const int n = std::atoi(env);
  return n < 1 ? 1 : n;
}

struct AlignmentError : Error {
  explicit AlignmentError(const std::string& msg) : Error(msg) {}
};

enum class ScoreMode { nsp, loglik, ensemble };

inline const char* to_string(ScoreMode m) {
  switch (m) {
    case ScoreMode::nsp: return "nsp";
    case ScoreMode::loglik: return "loglik";
    case ScoreMode::ensemble: return "ensemble";
  }
  return "?";
}

struct RankedPrediction {
  int64_t image_id = 0;
  int turn = 0;
  std::vector<double> scores;
  std::vector<int> ranking;  // candidate indices, best first
  ScoreMode mode = ScoreMode::nsp;
};

// Descending scores; ties broken by candidate index.
inline std::vector<int> ranking_from_scores(const std::vector<double>& scores) {
  std::vector<int> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return scores[(size_t)a] > scores[(size_t)b]; });
  return order;
}

inline int rank_of(const RankedPrediction& pred, int candidate_index) {
  for (size_t r = 0; r < pred.ranking.size(); ++r)
    if (pred.ranking[r] == candidate_index) return static_cast<int>(r) + 1;
  throw Error("rank_of: candidate index not present in ranking");
}

namespace detail {

template <typename Fn>
void parallel_for(int n, Fn&& fn) {
  const int threads = std::min(num_threads(), n);
  if (threads <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::atomic<int> next{0};
  for (int t = 0; t < threads; ++t)
    pool.emplace_back([&] {
      for (int i = next.fetch_add(1); i < n; i = next.fetch_add(1)) fn(i);
    });
  for (auto& th : pool) th.join();
}

}  // namespace detail

// Each candidate is appended to the context, encoded with the bidirectional
// mask and scored by the NSP head's positive-class probability.
inline RankedPrediction rank_discriminative(const Dataset& ds, int image_index, int turn,
                                            const model::Parameters& params, const Vocab& vocab,
                                            HistoryMode history = HistoryMode::full) {
  const DialogInstance& inst = ds.images[(size_t)image_index];
  const auto& t = inst.turns[(size_t)turn];
  RankedPrediction pred;
  pred.image_id = inst.image_id;
  pred.turn = turn;
  pred.mode = ScoreMode::nsp;
  pred.scores.resize(t.candidate_ids.size());
  detail::parallel_for(static_cast<int>(t.candidate_ids.size()), [&](int ci) {
    NoGradGuard ng;
    const std::string& text = ds.answers[(size_t)t.candidate_ids[(size_t)ci]];
    auto enc = encoding::assemble(inst, turn, text, history, vocab, params.cfg.max_positions);
    auto mask = encoding::build_mask(encoding::MaskKind::bidirectional, enc.length(), enc.length());
    Tensor h0 = model::embed(enc, inst, ds.num_classes, params);
    auto res = model::encoder_forward(h0, mask, params);
    pred.scores[(size_t)ci] = model::nsp_score(res.final_hidden(), params);
  });
  pred.ranking = ranking_from_scores(pred.scores);
  return pred;
}

namespace detail {

// log P(original token at `pos`) with that single position masked, under the
// seq2seq mask: only context and earlier answer tokens are visible.
inline double masked_token_logprob(const Dataset& ds, const DialogInstance& inst,
                                   const encoding::EncodedInput& enc, int pos,
                                   const model::Parameters& params) {
  NoGradGuard ng;
  encoding::EncodedInput step = enc;
  const int original = step.token_ids[(size_t)pos];
  step.token_ids[(size_t)pos] = data::kMaskId;
  auto mask = encoding::build_mask(encoding::MaskKind::seq2seq, step.length(), step.context_len);
  Tensor h0 = model::embed(step, inst, ds.num_classes, params);
  auto res = model::encoder_forward(h0, mask, params);
  Tensor logits = model::mlm_logits(res.final_hidden(), {pos}, params);
  const auto& z = logits.values();
  real mx = z[0];
  for (real v : z) mx = std::max(mx, v);
  double lse = 0;
  for (real v : z) lse += std::exp(static_cast<double>(v - mx));
  return static_cast<double>(z[(size_t)original] - mx) - std::log(lse);
}

}  // namespace detail

// Candidates scored by the summed log-likelihood of their tokens under
// one-step masked prediction; unnormalized by length.
inline RankedPrediction rank_generative(const Dataset& ds, int image_index, int turn,
                                        const model::Parameters& params, const Vocab& vocab,
                                        HistoryMode history = HistoryMode::full) {
  const DialogInstance& inst = ds.images[(size_t)image_index];
  const auto& t = inst.turns[(size_t)turn];
  RankedPrediction pred;
  pred.image_id = inst.image_id;
  pred.turn = turn;
  pred.mode = ScoreMode::loglik;
  pred.scores.resize(t.candidate_ids.size());
  detail::parallel_for(static_cast<int>(t.candidate_ids.size()), [&](int ci) {
    const std::string& text = ds.answers[(size_t)t.candidate_ids[(size_t)ci]];
    auto enc = encoding::assemble(inst, turn, text, history, vocab, params.cfg.max_positions);
    double total = 0;
    for (int pos = enc.answer_start; pos < enc.answer_end; ++pos)
      total += detail::masked_token_logprob(ds, inst, enc, pos, params);
    pred.scores[(size_t)ci] = total;
  });
  pred.ranking = ranking_from_scores(pred.scores);
  return pred;
}

// Greedy recursive decoding: append [MASK], predict, replace, repeat until
// [SEP] or max_len. Returns token ids without the terminating [SEP].
inline std::vector<int> generate_answer(const Dataset& ds, int image_index, int turn,
                                        const model::Parameters& params, const Vocab& vocab,
                                        HistoryMode history = HistoryMode::full, int max_len = 25) {
  NoGradGuard ng;
  const DialogInstance& inst = ds.images[(size_t)image_index];
  const int ctx_budget = params.cfg.max_positions - max_len - 1;
  auto ctx = encoding::assemble_decode_context(inst, turn, history, vocab, ctx_budget);
  std::vector<int> generated;
  for (int step = 0; step < max_len; ++step) {
    encoding::EncodedInput cur = ctx;
    for (int id : generated) {
      cur.token_ids.push_back(id);
      cur.segment_ids.push_back(1);
    }
    cur.token_ids.push_back(data::kMaskId);
    cur.segment_ids.push_back(1);
    cur.position_ids.resize(cur.token_ids.size());
    for (size_t i = 0; i < cur.position_ids.size(); ++i)
      cur.position_ids[i] = static_cast<int>(i);
    cur.answer_end = cur.length();

    auto mask = encoding::build_mask(encoding::MaskKind::seq2seq, cur.length(), cur.context_len);
    Tensor h0 = model::embed(cur, inst, ds.num_classes, params);
    auto res = model::encoder_forward(h0, mask, params);
    Tensor logits = model::mlm_logits(res.final_hidden(), {cur.length() - 1}, params);
    const auto& z = logits.values();
    int best = -1;
    for (int v = 0; v < static_cast<int>(z.size()); ++v) {
      if (v == data::kPadId || v == data::kClsId || v == data::kMaskId || v == data::kPredId ||
          v == data::kImgId)
        continue;
      if (best < 0 || z[(size_t)v] > z[(size_t)best]) best = v;
    }
    if (best == data::kSepId) break;
    generated.push_back(best);
  }
  return generated;
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

struct MetricValues {
  double mrr = 0;
  double r1 = 0, r5 = 0, r10 = 0;
  double mean_rank = 0;
  std::optional<double> ndcg;
  int num_turns = 0;
  int ndcg_turns = 0;
};

struct MetricReport {
  MetricValues overall;
  std::map<std::string, MetricValues> by_question_type;
};

// First-token rule for the Table-5-style breakdown.
inline std::string question_type(const std::string& question) {
  const auto words = data::split_words(question);
  if (words.empty()) return "others";
  static const std::vector<std::string> yn = {"is", "are", "do", "does", "was", "did", "has", "can"};
  if (std::find(yn.begin(), yn.end(), words[0]) != yn.end()) return "yes_no";
  if (words.size() >= 2 && words[0] == "how" && words[1] == "many") return "number";
  for (const auto& w : words)
    if (w == "color") return "color";
  return "others";
}

// NDCG@K with K = number of non-zero relevance candidates, gain = relevance,
// discount 1/log2(1+rank).
inline double turn_ndcg(const std::vector<int>& ranking, const std::vector<double>& relevance) {
  int k = 0;
  for (double r : relevance)
    if (r > 0) ++k;
  if (k == 0) return std::numeric_limits<double>::quiet_NaN();
  double dcg = 0;
  for (int r = 1; r <= k; ++r)
    dcg += relevance[(size_t)ranking[(size_t)(r - 1)]] / std::log2(1.0 + r);
  std::vector<double> ideal(relevance);
  std::sort(ideal.begin(), ideal.end(), std::greater<double>());
  double idcg = 0;
  for (int r = 1; r <= k; ++r) idcg += ideal[(size_t)(r - 1)] / std::log2(1.0 + r);
  return dcg / idcg;
}

// Metrics against the dataset's sparse gt (and dense relevance when present).
inline MetricReport compute_metrics(const std::vector<RankedPrediction>& preds, const Dataset& ds) {
  std::map<int64_t, const DialogInstance*> by_id;
  for (const auto& img : ds.images) by_id[img.image_id] = &img;

  struct Acc {
    double mrr = 0, rank_sum = 0, ndcg = 0;
    int r1 = 0, r5 = 0, r10 = 0, n = 0, ndcg_n = 0;
  };
  std::map<std::string, Acc> acc;

  for (const auto& pred : preds) {
    auto it = by_id.find(pred.image_id);
    if (it == by_id.end())
      throw data::ValidationError("metrics: prediction references unknown image " +
                                  std::to_string(pred.image_id));
    const DialogInstance& inst = *it->second;
    if (pred.turn < 0 || pred.turn >= static_cast<int>(inst.turns.size()))
      throw data::ValidationError("metrics: prediction references missing turn");
    const auto& t = inst.turns[(size_t)pred.turn];
    const int rank = rank_of(pred, t.gt_index);
    const std::string type = question_type(t.question);
    for (const std::string& key : {std::string("__all__"), type}) {
      Acc& a = acc[key];
      a.mrr += 1.0 / rank;
      a.rank_sum += rank;
      a.r1 += rank <= 1;
      a.r5 += rank <= 5;
      a.r10 += rank <= 10;
      a.n += 1;
      if (t.relevance) {
        const double nd = turn_ndcg(pred.ranking, *t.relevance);
        if (!std::isnan(nd)) {
          a.ndcg += nd;
          a.ndcg_n += 1;
        }
      }
    }
  }

  auto to_values = [](const Acc& a) {
    MetricValues v;
    if (a.n > 0) {
      v.mrr = a.mrr / a.n;
      v.r1 = static_cast<double>(a.r1) / a.n;
      v.r5 = static_cast<double>(a.r5) / a.n;
      v.r10 = static_cast<double>(a.r10) / a.n;
      v.mean_rank = a.rank_sum / a.n;
    }
    v.num_turns = a.n;
    v.ndcg_turns = a.ndcg_n;
    if (a.ndcg_n > 0) v.ndcg = a.ndcg / a.ndcg_n;
    return v;
  };

  MetricReport report;
  report.overall = to_values(acc["__all__"]);
  for (const auto& [key, a] : acc)
    if (key != "__all__") report.by_question_type[key] = to_values(a);
  return report;
}

inline nlohmann::json metric_values_json(const MetricValues& v) {
  nlohmann::json j = {{"mrr", v.mrr},   {"r1", v.r1},
                      {"r5", v.r5},     {"r10", v.r10},
                      {"mean_rank", v.mean_rank}, {"num_turns", v.num_turns}};
  if (v.ndcg) {
    j["ndcg"] = *v.ndcg;
    j["ndcg_turns"] = v.ndcg_turns;
  }
  return j;
}

inline nlohmann::json metric_report_json(const MetricReport& r) {
  nlohmann::json j = metric_values_json(r.overall);
  nlohmann::json by;
  for (const auto& [k, v] : r.by_question_type) by[k] = metric_values_json(v);
  j["by_question_type"] = std::move(by);
  return j;
}

// ---------------------------------------------------------------------------
// Ensemble
// ---------------------------------------------------------------------------

// Per turn, each member's scores are min-max normalized to [0,1] and summed;
// the combined scores are re-ranked. Sets must align on (image, turn).
inline std::vector<RankedPrediction> ensemble(
    const std::vector<std::vector<RankedPrediction>>& sets) {
  if (sets.size() < 2) throw AlignmentError("ensemble: needs at least 2 prediction sets");
  const size_t n = sets[0].size();
  for (const auto& s : sets)
    if (s.size() != n) throw AlignmentError("ensemble: prediction sets differ in length");
  std::vector<RankedPrediction> out;
  out.reserve(n);
  for (size_t i = 0; i < n; ++i) {
    RankedPrediction combined;
    combined.image_id = sets[0][i].image_id;
    combined.turn = sets[0][i].turn;
    combined.mode = ScoreMode::ensemble;
    combined.scores.assign(sets[0][i].scores.size(), 0.0);
    for (const auto& s : sets) {
      const RankedPrediction& p = s[i];
      if (p.image_id != combined.image_id || p.turn != combined.turn)
        throw AlignmentError("ensemble: prediction sets are misaligned at record " +
                             std::to_string(i));
      if (p.scores.size() != combined.scores.size())
        throw AlignmentError("ensemble: candidate counts differ at record " +
                             std::to_string(i));
      const double lo = *std::min_element(p.scores.begin(), p.scores.end());
      const double hi = *std::max_element(p.scores.begin(), p.scores.end());
      const double span = hi - lo;
      for (size_t c = 0; c < p.scores.size(); ++c)
        combined.scores[c] += span > 0 ? (p.scores[c] - lo) / span : 0.0;
    }
    combined.ranking = ranking_from_scores(combined.scores);
    out.push_back(std::move(combined));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Prediction files: one JSON record {image_id, turn, scores[...]} per line
// ---------------------------------------------------------------------------

inline void write_predictions(const std::string& path, const std::vector<RankedPrediction>& preds) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("predictions: cannot open " + path + " for writing");
  for (const auto& p : preds) {
    nlohmann::json j = {{"image_id", p.image_id},
                        {"turn", p.turn},
                        {"scores", p.scores},
                        {"mode", to_string(p.mode)}};
    os << j.dump() << "\n";
  }
}

inline std::vector<RankedPrediction> read_predictions(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("predictions: cannot open " + path);
  std::vector<RankedPrediction> preds;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const std::exception& e) {
      throw data::ParseError("predictions " + path + ":" + std::to_string(lineno) + ": " + e.what());
    }
    RankedPrediction p;
    p.image_id = j.at("image_id").get<int64_t>();
    p.turn = j.at("turn").get<int>();
    p.scores = j.at("scores").get<std::vector<double>>();
    const std::string mode = j.value("mode", "nsp");
    p.mode = mode == "loglik" ? ScoreMode::loglik
                              : (mode == "ensemble" ? ScoreMode::ensemble : ScoreMode::nsp);
    p.ranking = ranking_from_scores(p.scores);
    preds.push_back(std::move(p));
  }
  return preds;
}

}  // namespace uvdt::inference
