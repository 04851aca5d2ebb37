// Copyright (c) 2026 UVDT contributors
// SPDX-License-Identifier: Apache-2.0
//
// Run configuration file: strict JSON with model/training/data sections.
// Unknown keys are rejected so typos fail loudly.
#pragma once

#include "uvdt/model.hpp"
#include "uvdt/training.hpp"

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <string>

namespace uvdt::cli {

using njson = nlohmann::json;

struct ConfigError : Error {
  explicit ConfigError(const std::string& msg) : Error(msg) {}
};

inline void check_keys(const njson& j, std::initializer_list<const char*> allowed,
                       const std::string& where) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* k : allowed)
      if (it.key() == k) ok = true;
    if (!ok) throw ConfigError("config " + where + ": unknown key '" + it.key() + "'");
  }
}

struct RunConfig {
  model::ModelConfig model;  // vocab_size is filled in from the dataset
  training::TrainConfig train;
  std::string train_path;
  std::string val_path;
  std::string vocab_path;
  std::string out_dir;
  uint64_t seed = 1;

  static RunConfig defaults() {
    RunConfig c;
    c.model.layers = 4;
    c.model.num_heads = 4;
    c.model.hidden = 128;
    c.model.vision_dim = 16;
    c.model.max_positions = 250;
    return c;
  }
};

inline RunConfig parse_run_config(const njson& root) {
  RunConfig cfg = RunConfig::defaults();
  check_keys(root, {"model", "training", "data", "out", "seed"}, "(top level)");
  if (root.contains("model")) {
    const auto& m = root["model"];
    check_keys(m, {"layers", "heads", "hidden", "vision_dim", "max_len"}, "model");
    cfg.model.layers = m.value("layers", cfg.model.layers);
    cfg.model.num_heads = m.value("heads", cfg.model.num_heads);
    cfg.model.hidden = m.value("hidden", cfg.model.hidden);
    cfg.model.vision_dim = m.value("vision_dim", cfg.model.vision_dim);
    cfg.model.max_positions = m.value("max_len", cfg.model.max_positions);
  }
  if (root.contains("training")) {
    const auto& t = root["training"];
    check_keys(t,
               {"phase1_epochs", "phase2_epochs", "dense_epochs", "history_phase1",
                "history_phase2", "lr", "dense_lr", "batch_size", "warmup_fraction", "mlm_coef",
                "nsp_coef", "setting", "n_subsample", "mlm_rate", "answer_mlm_rate", "rank_loss",
                "approx_ndcg_temperature", "eval_every", "eval_max_turns", "early_stop_loss",
                "early_stop_r1"},
               "training");
    auto& tc = cfg.train;
    tc.phase1_epochs = t.value("phase1_epochs", tc.phase1_epochs);
    tc.phase2_epochs = t.value("phase2_epochs", tc.phase2_epochs);
    tc.dense_epochs = t.value("dense_epochs", tc.dense_epochs);
    if (t.contains("history_phase1"))
      tc.history_phase1 = encoding::history_mode_from(t["history_phase1"].get<std::string>());
    if (t.contains("history_phase2"))
      tc.history_phase2 = encoding::history_mode_from(t["history_phase2"].get<std::string>());
    tc.lr = t.value("lr", tc.lr);
    tc.dense_lr = t.value("dense_lr", tc.dense_lr);
    tc.batch_size = t.value("batch_size", tc.batch_size);
    tc.warmup_fraction = t.value("warmup_fraction", tc.warmup_fraction);
    tc.mlm_coef = t.value("mlm_coef", tc.mlm_coef);
    tc.nsp_coef = t.value("nsp_coef", tc.nsp_coef);
    if (t.contains("setting")) tc.setting = training::setting_from(t["setting"].get<std::string>());
    tc.n_subsample = t.value("n_subsample", tc.n_subsample);
    tc.mlm_rate = t.value("mlm_rate", tc.mlm_rate);
    tc.answer_mlm_rate = t.value("answer_mlm_rate", tc.answer_mlm_rate);
    if (t.contains("rank_loss"))
      tc.dense_loss = training::rank_loss_from(t["rank_loss"].get<std::string>());
    tc.approx_ndcg_temperature = t.value("approx_ndcg_temperature", tc.approx_ndcg_temperature);
    tc.eval_every = t.value("eval_every", tc.eval_every);
    tc.eval_max_turns = t.value("eval_max_turns", tc.eval_max_turns);
    tc.early_stop_loss = t.value("early_stop_loss", tc.early_stop_loss);
    tc.early_stop_r1 = t.value("early_stop_r1", tc.early_stop_r1);
  }
  if (root.contains("data")) {
    const auto& d = root["data"];
    check_keys(d, {"train", "val", "vocab"}, "data");
    cfg.train_path = d.value("train", "");
    cfg.val_path = d.value("val", "");
    cfg.vocab_path = d.value("vocab", "");
  }
  cfg.out_dir = root.value("out", "");
  cfg.seed = root.value("seed", cfg.seed);
  cfg.train.seed = cfg.seed;
  return cfg;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("config: cannot open " + path);
  njson root;
  try {
    is >> root;
  } catch (const std::exception& e) {
    throw ConfigError("config " + path + ": invalid JSON: " + e.what());
  }
  return parse_run_config(root);
}

inline void require_exists(const std::string& path, const char* what) {
  if (path.empty()) return;
  if (!std::filesystem::exists(path))
    throw IoError(std::string(what) + " path does not exist: " + path);
}

}  // namespace uvdt::cli
