// Copyright (c) 2026 UVDT contributors
// SPDX-License-Identifier: Apache-2.0
//
// Packs one (image, dialog turn, answer candidate) triple into the model's
// input sequence and builds the bidirectional / seq2seq attention masks.
#pragma once

#include "uvdt/data.hpp"
#include "uvdt/rng.hpp"
#include "uvdt/tensor.hpp"

#include <map>
#include <string>
#include <utility>
#include <vector>

namespace uvdt::encoding {

enum class HistoryMode { none, one_turn, full };

inline HistoryMode history_mode_from(const std::string& s) {
  if (s == "none") return HistoryMode::none;
  if (s == "one" || s == "one_turn") return HistoryMode::one_turn;
  if (s == "full") return HistoryMode::full;
  throw Error("unknown history mode '" + s + "'");
}

inline const char* to_string(HistoryMode m) {
  switch (m) {
    case HistoryMode::none: return "none";
    case HistoryMode::one_turn: return "one";
    case HistoryMode::full: return "full";
  }
  return "?";
}

struct EncodedInput {
  std::vector<int> token_ids;                        // vision slots carry [IMG]
  std::vector<std::pair<int64_t, int64_t>> vision_slots;  // (position, object index)
  std::vector<int> segment_ids;                      // 0 = image, 1 = text
  std::vector<int> position_ids;
  int context_len = 0;      // first answer position (seq2seq split point)
  int answer_start = 0;     // [answer_start, answer_end) covers the candidate
  int answer_end = 0;
  int pred_position = -1;
  std::map<int, int> mlm_labels;  // masked position -> original token id

  int length() const { return static_cast<int>(token_ids.size()); }
};

enum class MaskKind { bidirectional, seq2seq };

struct AttentionMask {
  MaskKind kind = MaskKind::bidirectional;
  int total_len = 0;
  int context_len = 0;
  Tensor matrix;  // [len x len], entries 0 or the -inf sentinel
};

// Layout: [CLS] o_1..o_k [SEP] C [EOT] {Q_i A_i [EOT]}* Q_t [PRED] A_t [SEP].
// When over max_len, oldest history turns are dropped first, then the caption
// is cut from its tail; the caption's [EOT] and everything else stays.
inline EncodedInput assemble(const data::DialogInstance& inst, int turn_index,
                             const std::string& candidate_text, HistoryMode mode,
                             const data::Vocab& vocab, int max_len = 250,
                             bool include_answer = true) {
  if (turn_index < 0 || turn_index >= static_cast<int>(inst.turns.size()))
    throw data::ValidationError("assemble: turn index out of range");

  const int k = static_cast<int>(inst.objects.size());
  std::vector<int> caption = data::tokenize(inst.caption, vocab);
  std::vector<std::vector<int>> history;  // each entry: Q_i A_i tokens (no [EOT])
  int first_history = 0;
  if (mode == HistoryMode::one_turn) first_history = std::max(0, turn_index - 1);
  if (mode == HistoryMode::none) first_history = turn_index;
  for (int i = first_history; i < turn_index; ++i) {
    std::vector<int> h = data::tokenize(inst.turns[static_cast<size_t>(i)].question, vocab);
    std::vector<int> a = data::tokenize(inst.turns[static_cast<size_t>(i)].answer, vocab);
    h.insert(h.end(), a.begin(), a.end());
    history.push_back(std::move(h));
  }
  std::vector<int> question = data::tokenize(inst.turns[static_cast<size_t>(turn_index)].question, vocab);
  std::vector<int> answer = data::tokenize(candidate_text, vocab);

  auto total = [&] {
    int n = 1 + k + 1 + static_cast<int>(caption.size()) + 1;  // [CLS] objs [SEP] C [EOT]
    for (const auto& h : history) n += static_cast<int>(h.size()) + 1;
    n += static_cast<int>(question.size()) + 1;  // Q_t [PRED]
    if (include_answer) n += static_cast<int>(answer.size()) + 1;  // A_t [SEP]
    return n;
  };
  while (total() > max_len && !history.empty()) history.erase(history.begin());
  while (total() > max_len && !caption.empty()) caption.pop_back();
  if (total() > max_len)
    throw data::ValidationError("assemble: sequence of length " + std::to_string(total()) +
                                " exceeds max_len " + std::to_string(max_len) +
                                " even after truncation");

  EncodedInput enc;
  auto push = [&](int id, int seg) {
    enc.token_ids.push_back(id);
    enc.segment_ids.push_back(seg);
  };
  push(data::kClsId, 0);
  for (int oi = 0; oi < k; ++oi) {
    enc.vision_slots.emplace_back(static_cast<int64_t>(enc.token_ids.size()), oi);
    push(data::kImgId, 0);
  }
  push(data::kSepId, 0);
  for (int id : caption) push(id, 1);
  push(data::kEotId, 1);
  for (const auto& h : history) {
    for (int id : h) push(id, 1);
    push(data::kEotId, 1);
  }
  for (int id : question) push(id, 1);
  enc.pred_position = static_cast<int>(enc.token_ids.size());
  push(data::kPredId, 1);
  enc.context_len = static_cast<int>(enc.token_ids.size());
  enc.answer_start = enc.context_len;
  if (include_answer) {
    for (int id : answer) push(id, 1);
    enc.answer_end = static_cast<int>(enc.token_ids.size());
    push(data::kSepId, 1);
  } else {
    enc.answer_end = enc.answer_start;
  }
  enc.position_ids.resize(enc.token_ids.size());
  for (size_t i = 0; i < enc.position_ids.size(); ++i)
    enc.position_ids[i] = static_cast<int>(i);
  return enc;
}

// Context-only sequence for recursive decoding: ends at [PRED], no trailing
// [SEP]; generated tokens are appended by the caller.
inline EncodedInput assemble_decode_context(const data::DialogInstance& inst, int turn_index,
                                            HistoryMode mode, const data::Vocab& vocab,
                                            int max_len = 250) {
  return assemble(inst, turn_index, "", mode, vocab, max_len, /*include_answer=*/false);
}

inline AttentionMask build_mask(MaskKind kind, int total_len, int context_len) {
  if (total_len < 0 || context_len < 0 || context_len > total_len)
    throw data::ValidationError("build_mask: context_len " + std::to_string(context_len) +
                                " exceeds total_len " + std::to_string(total_len));
  AttentionMask m;
  m.kind = kind;
  m.total_len = total_len;
  m.context_len = context_len;
  std::vector<real> vals(static_cast<size_t>(total_len) * static_cast<size_t>(total_len), real(0));
  if (kind == MaskKind::seq2seq) {
    // column j is attendable from row i iff j < context_len or j <= i
    for (int i = 0; i < total_len; ++i)
      for (int j = std::max(context_len, i + 1); j < total_len; ++j)
        vals[static_cast<size_t>(i) * total_len + static_cast<size_t>(j)] = kMaskedOut;
  }
  m.matrix = Tensor::from({total_len, total_len}, std::move(vals));
  return m;
}

// Masks eligible text positions with [MASK] at the given rate, remembering
// the originals. Vision slots, [CLS], the segment-0 [SEP] and [PRED] are
// never masked; with mask_answer=false the answer span is exempt too.
inline EncodedInput apply_mlm_masking(EncodedInput enc, double rate, Rng& rng,
                                      bool mask_answer = true) {
  for (int pos = 0; pos < enc.length(); ++pos) {
    if (enc.segment_ids[static_cast<size_t>(pos)] != 1) continue;
    if (pos == enc.pred_position) continue;
    if (!mask_answer && pos >= enc.answer_start && pos < enc.answer_end) continue;
    if (rand_bernoulli(rng, rate)) {
      enc.mlm_labels[pos] = enc.token_ids[static_cast<size_t>(pos)];
      enc.token_ids[static_cast<size_t>(pos)] = data::kMaskId;
    }
  }
  return enc;
}

// Variant used by generative phase-2 training: only the answer span and its
// closing [SEP] are eligible.
inline EncodedInput apply_answer_masking(EncodedInput enc, double rate, Rng& rng) {
  const int sep_pos = enc.answer_end;  // closing [SEP] right after the span
  for (int pos = enc.answer_start; pos <= sep_pos && pos < enc.length(); ++pos) {
    if (rand_bernoulli(rng, rate)) {
      enc.mlm_labels[pos] = enc.token_ids[static_cast<size_t>(pos)];
      enc.token_ids[static_cast<size_t>(pos)] = data::kMaskId;
    }
  }
  return enc;
}

}  // namespace uvdt::encoding
