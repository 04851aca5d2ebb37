// Copyright (c) 2026 UVDT contributors
// SPDX-License-Identifier: Apache-2.0
//
// Command-line surface: data generation, training, dense fine-tuning,
// ranking, generation, evaluation, ensembling and attention export.
#include "uvdt/config.hpp"
#include "uvdt/data.hpp"
#include "uvdt/inference.hpp"
#include "uvdt/model.hpp"
#include "uvdt/training.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace uvdt;

namespace {

// Distinct exit codes per failure class.
constexpr int kOk = 0;
constexpr int kUsage = 2;        // bad flags, bad config file
constexpr int kMissingFile = 3;  // dataset/checkpoint/prediction file absent
constexpr int kBadData = 4;      // schema or invariant violations
constexpr int kMisaligned = 5;   // ensemble inputs disagree
constexpr int kInternal = 6;

struct DataBundle {
  data::Dataset ds;
  data::Vocab vocab;
};

DataBundle load_bundle(const std::string& data_path, const std::string& vocab_path) {
  cli::require_exists(data_path, "dataset");
  cli::require_exists(vocab_path, "vocab");
  auto [ds, vocab] = data::load_dataset(data_path, vocab_path);
  return {std::move(ds), std::move(vocab)};
}

model::Parameters load_params(const std::string& ckpt) {
  cli::require_exists(ckpt, "checkpoint");
  return model::Parameters::load(ckpt);
}

std::vector<std::pair<int, int>> all_turn_refs(const data::Dataset& ds) {
  std::vector<std::pair<int, int>> refs;
  for (size_t i = 0; i < ds.images.size(); ++i)
    for (size_t t = 0; t < ds.images[i].turns.size(); ++t)
      refs.emplace_back(static_cast<int>(i), static_cast<int>(t));
  return refs;
}

double nonzero_relevance_fraction(const data::Dataset& ds) {
  double total = 0;
  int turns = 0;
  for (const auto& img : ds.images)
    for (const auto& t : img.turns) {
      if (!t.relevance) continue;
      int nz = 0;
      for (double r : *t.relevance)
        if (r > 0) ++nz;
      total += static_cast<double>(nz) / static_cast<double>(t.relevance->size());
      ++turns;
    }
  return turns ? total / turns : 0.0;
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

struct GenDataArgs {
  std::string out;
  uint64_t seed = 1;
  int images = 64;
  int val_images = 0;
  int objects = 4;
  int candidates = 100;
  int turns = 3;
  int d_v = 16;
  double dense_fraction = 0.0;
  double misalign_fraction = 0.0;
  uint64_t vocab_seed = 0;
  bool sidecar = false;
};

int cmd_gen_data(const GenDataArgs& a) {
  data::SynthConfig cfg;
  cfg.num_images = a.images;
  cfg.num_objects = a.objects;
  cfg.num_candidates = a.candidates;
  cfg.turns_per_image = a.turns;
  cfg.d_v = a.d_v;
  cfg.dense_fraction = a.dense_fraction;
  cfg.misalign_fraction = a.misalign_fraction;
  cfg.vocab_seed = a.vocab_seed;

  fs::create_directories(a.out);
  data::Dataset train = data::generate_synthetic(cfg, a.seed);
  save_dataset(a.out + "/train.json", train, a.sidecar);

  int val_turns = 0;
  if (a.val_images > 0) {
    data::SynthConfig vcfg = cfg;
    vcfg.num_images = a.val_images;
    data::Dataset val = data::generate_synthetic(vcfg, mix_seed(a.seed, 0x7a11));
    for (auto& img : val.images) img.image_id += a.images;  // keep ids disjoint
    save_dataset(a.out + "/val.json", val, a.sidecar);
    for (const auto& img : val.images) val_turns += static_cast<int>(img.turns.size());
    // one vocabulary covering both splits
    std::vector<std::string> words;
    for (const auto& v : {data::induce_vocab(train), data::induce_vocab(val)})
      for (int i = data::kNumSpecials; i < v.size(); ++i) words.push_back(v.tokens[(size_t)i]);
    save_vocab(a.out + "/vocab.txt", data::Vocab::from_words(std::move(words)));
  } else {
    save_vocab(a.out + "/vocab.txt", data::induce_vocab(train));
  }

  int train_turns = 0;
  for (const auto& img : train.images) train_turns += static_cast<int>(img.turns.size());
  json summary = {{"images", a.images},
                  {"val_images", a.val_images},
                  {"turns", train_turns},
                  {"val_turns", val_turns},
                  {"answers", train.answers.size()},
                  {"nonzero_relevance_fraction", nonzero_relevance_fraction(train)}};
  std::cout << summary.dump() << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------
// train / finetune-dense
// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string config_path;
  std::string train_path, val_path, vocab_path;
  std::string out;
  std::string init_ckpt;
  std::optional<uint64_t> seed;
  std::optional<std::string> setting;
  std::optional<std::string> history;
  std::optional<int> epochs1, epochs2, epochs_dense;
  std::optional<double> lr;
  std::optional<int> batch_size;
  std::optional<std::string> rank_loss;
};

int cmd_train(const TrainArgs& a) {
  cli::RunConfig cfg =
      a.config_path.empty() ? cli::RunConfig::defaults() : cli::load_run_config(a.config_path);
  if (!a.train_path.empty()) cfg.train_path = a.train_path;
  if (!a.val_path.empty()) cfg.val_path = a.val_path;
  if (!a.vocab_path.empty()) cfg.vocab_path = a.vocab_path;
  if (!a.out.empty()) cfg.out_dir = a.out;
  if (a.seed) {
    cfg.seed = *a.seed;
    cfg.train.seed = *a.seed;
  }
  if (a.setting) cfg.train.setting = training::setting_from(*a.setting);
  if (a.history) {
    cfg.train.history_phase1 = encoding::history_mode_from(*a.history);
    cfg.train.history_phase2 = cfg.train.history_phase1;
  }
  if (a.epochs1) cfg.train.phase1_epochs = *a.epochs1;
  if (a.epochs2) cfg.train.phase2_epochs = *a.epochs2;
  if (a.epochs_dense) cfg.train.dense_epochs = *a.epochs_dense;
  if (a.lr) cfg.train.lr = *a.lr;
  if (a.batch_size) cfg.train.batch_size = *a.batch_size;
  if (a.rank_loss) cfg.train.dense_loss = training::rank_loss_from(*a.rank_loss);
  if (cfg.train_path.empty()) throw cli::ConfigError("train: no training dataset given");
  if (cfg.out_dir.empty()) throw cli::ConfigError("train: no output directory given");
  cfg.train.validate();

  DataBundle train = load_bundle(cfg.train_path, cfg.vocab_path);
  std::optional<DataBundle> val;
  if (!cfg.val_path.empty()) val = load_bundle(cfg.val_path, cfg.vocab_path);

  model::Parameters params = [&] {
    if (!a.init_ckpt.empty()) {
      model::Parameters p = load_params(a.init_ckpt);
      if (p.cfg.vocab_size != train.vocab.size())
        throw data::ValidationError("train: checkpoint vocab size " +
                                    std::to_string(p.cfg.vocab_size) + " != vocabulary size " +
                                    std::to_string(train.vocab.size()));
      return p;
    }
    model::ModelConfig mc = cfg.model;
    mc.vocab_size = train.vocab.size();
    mc.vision_dim = train.ds.d_v;
    mc.validate();
    return model::Parameters::init(mc, cfg.seed);
  }();

  fs::create_directories(cfg.out_dir);
  const auto logs = training::run_schedule(cfg.train, params, train.ds, train.vocab,
                                           val ? &val->ds : nullptr, cfg.out_dir);
  json summary = {{"epochs", logs.size()}, {"out", cfg.out_dir}};
  if (!logs.empty()) {
    summary["final_loss"] = logs.back().loss;
    if (logs.back().r1) summary["final_r1"] = *logs.back().r1;
    if (logs.back().ndcg) summary["final_ndcg"] = *logs.back().ndcg;
  }
  std::cout << summary.dump() << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------
// rank / generate
// ---------------------------------------------------------------------------

struct RankArgs {
  std::string ckpt, data_path, vocab_path, out;
  std::string mode = "disc";
  std::string history = "full";
};

int cmd_rank(const RankArgs& a) {
  DataBundle bundle = load_bundle(a.data_path, a.vocab_path);
  model::Parameters params = load_params(a.ckpt);
  const auto history = encoding::history_mode_from(a.history);
  std::vector<inference::RankedPrediction> preds;
  for (auto [img, turn] : all_turn_refs(bundle.ds)) {
    preds.push_back(a.mode == "gen"
                        ? inference::rank_generative(bundle.ds, img, turn, params, bundle.vocab,
                                                     history)
                        : inference::rank_discriminative(bundle.ds, img, turn, params,
                                                         bundle.vocab, history));
  }
  inference::write_predictions(a.out, preds);
  json summary = {{"turns", preds.size()}, {"mode", a.mode == "gen" ? "loglik" : "nsp"},
                  {"out", a.out}};
  std::cout << summary.dump() << "\n";
  return kOk;
}

struct GenerateArgs {
  std::string ckpt, data_path, vocab_path, out;
  std::string history = "full";
  int max_len = 25;
};

int cmd_generate(const GenerateArgs& a) {
  DataBundle bundle = load_bundle(a.data_path, a.vocab_path);
  model::Parameters params = load_params(a.ckpt);
  const auto history = encoding::history_mode_from(a.history);
  std::ofstream os(a.out, std::ios::binary);
  if (!os) throw IoError("generate: cannot open " + a.out + " for writing");
  int exact = 0, total = 0;
  for (auto [img, turn] : all_turn_refs(bundle.ds)) {
    const auto ids =
        inference::generate_answer(bundle.ds, img, turn, params, bundle.vocab, history, a.max_len);
    const std::string text = data::detokenize(ids, bundle.vocab);
    const auto& gt = bundle.ds.images[(size_t)img].turns[(size_t)turn].answer;
    const bool match = text == gt;
    exact += match;
    ++total;
    json rec = {{"image_id", bundle.ds.images[(size_t)img].image_id},
                {"turn", turn},
                {"answer", text},
                {"exact_match", match}};
    os << rec.dump() << "\n";
  }
  json summary = {{"turns", total},
                  {"exact_match_rate", total ? static_cast<double>(exact) / total : 0.0},
                  {"out", a.out}};
  std::cout << summary.dump() << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------
// eval / ensemble
// ---------------------------------------------------------------------------

struct EvalArgs {
  std::string predictions, data_path, vocab_path, out;
};

int cmd_eval(const EvalArgs& a) {
  cli::require_exists(a.predictions, "predictions");
  DataBundle bundle = load_bundle(a.data_path, a.vocab_path);
  const auto preds = inference::read_predictions(a.predictions);
  const auto report = inference::compute_metrics(preds, bundle.ds);
  const json j = inference::metric_report_json(report);
  if (!a.out.empty()) {
    std::ofstream os(a.out, std::ios::binary);
    if (!os) throw IoError("eval: cannot open " + a.out + " for writing");
    os << j.dump(2) << "\n";
  }
  // paper-style x100 summary on stdout, raw values in the report file
  std::ostringstream line;
  line << "turns " << report.overall.num_turns;
  if (report.overall.ndcg) line << "  NDCG " << 100.0 * *report.overall.ndcg;
  line << "  MRR " << 100.0 * report.overall.mrr << "  R@1 " << 100.0 * report.overall.r1
       << "  R@5 " << 100.0 * report.overall.r5 << "  R@10 " << 100.0 * report.overall.r10
       << "  Mean " << report.overall.mean_rank;
  std::cout << line.str() << "\n";
  std::cout << j.dump() << "\n";
  return kOk;
}

struct EnsembleArgs {
  std::vector<std::string> inputs;
  std::string out;
};

int cmd_ensemble(const EnsembleArgs& a) {
  std::vector<std::vector<inference::RankedPrediction>> sets;
  for (const auto& path : a.inputs) {
    cli::require_exists(path, "predictions");
    sets.push_back(inference::read_predictions(path));
  }
  const auto combined = inference::ensemble(sets);
  inference::write_predictions(a.out, combined);
  json summary = {{"members", sets.size()}, {"turns", combined.size()}, {"out", a.out}};
  std::cout << summary.dump() << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------
// dump-attention
// ---------------------------------------------------------------------------

struct DumpAttentionArgs {
  std::string ckpt, data_path, vocab_path, out;
  int64_t image_id = 0;
  int turn = 0;
  int layer = -1;
  int head = -1;
  std::string history = "full";
};

int cmd_dump_attention(const DumpAttentionArgs& a) {
  DataBundle bundle = load_bundle(a.data_path, a.vocab_path);
  model::Parameters params = load_params(a.ckpt);
  int image_index = -1;
  for (size_t i = 0; i < bundle.ds.images.size(); ++i)
    if (bundle.ds.images[i].image_id == a.image_id) image_index = static_cast<int>(i);
  if (image_index < 0)
    throw data::ValidationError("dump-attention: image " + std::to_string(a.image_id) +
                                " not in dataset");
  const auto& inst = bundle.ds.images[(size_t)image_index];
  if (a.turn < 0 || a.turn >= static_cast<int>(inst.turns.size()))
    throw data::ValidationError("dump-attention: turn out of range");
  if (a.layer >= params.cfg.layers)
    throw cli::ConfigError("dump-attention: layer out of range");
  if (a.head >= params.cfg.num_heads)
    throw cli::ConfigError("dump-attention: head out of range");

  NoGradGuard ng;
  const auto& turn = inst.turns[(size_t)a.turn];
  auto enc = encoding::assemble(inst, a.turn, turn.answer, encoding::history_mode_from(a.history),
                                bundle.vocab, params.cfg.max_positions);
  auto mask = encoding::build_mask(encoding::MaskKind::bidirectional, enc.length(), enc.length());
  auto res = model::encoder_forward(model::embed(enc, inst, bundle.ds.num_classes, params), mask,
                                    params);

  std::vector<std::string> labels;
  for (int pos = 0; pos < enc.length(); ++pos) {
    bool vision = false;
    for (auto [vpos, oi] : enc.vision_slots)
      if (vpos == pos) {
        labels.push_back("obj" + std::to_string(oi));
        vision = true;
      }
    if (!vision) labels.push_back(bundle.vocab.token_of(enc.token_ids[(size_t)pos]));
  }

  fs::create_directories(a.out);
  int files = 0;
  for (int l = 0; l < params.cfg.layers; ++l) {
    if (a.layer >= 0 && l != a.layer) continue;
    for (int h = 0; h < params.cfg.num_heads; ++h) {
      if (a.head >= 0 && h != a.head) continue;
      const Tensor& attn = res.attention[(size_t)l][(size_t)h];
      const std::string path =
          a.out + "/attn_l" + std::to_string(l) + "_h" + std::to_string(h) + ".csv";
      std::ofstream os(path, std::ios::binary);
      if (!os) throw IoError("dump-attention: cannot write " + path);
      os << "query";
      for (const auto& lab : labels) os << ",\"" << lab << "\"";
      os << "\n";
      const int n = enc.length();
      for (int i = 0; i < n; ++i) {
        os << "\"" << labels[(size_t)i] << "\"";
        for (int j = 0; j < n; ++j) os << "," << attn.values()[(size_t)(i * n + j)];
        os << "\n";
      }
      ++files;
    }
  }
  json summary = {{"files", files}, {"length", enc.length()}, {"out", a.out}};
  std::cout << summary.dump() << "\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"uvdt: a unified vision-dialog transformer, trained from scratch at desk scale"};
  app.require_subcommand(1);

  GenDataArgs gen;
  auto* cmd_gen = app.add_subcommand("gen-data", "Generate a synthetic dialog dataset");
  cmd_gen->add_option("--out", gen.out, "Output directory")->required();
  cmd_gen->add_option("--seed", gen.seed, "RNG seed");
  cmd_gen->add_option("--images", gen.images, "Number of training images");
  cmd_gen->add_option("--val-images", gen.val_images, "Held-out images (written to val.json)");
  cmd_gen->add_option("--objects", gen.objects, "Objects per image");
  cmd_gen->add_option("--candidates", gen.candidates, "Answer candidates per turn");
  cmd_gen->add_option("--turns", gen.turns, "Dialog turns per image");
  cmd_gen->add_option("--d-v", gen.d_v, "Vision feature dimension");
  cmd_gen->add_option("--dense-fraction", gen.dense_fraction,
                      "Expected fraction of non-zero relevance candidates (0 disables)");
  cmd_gen->add_option("--misalign-fraction", gen.misalign_fraction,
                      "Fraction of turns whose gt relevance is demoted");
  cmd_gen->add_option("--vocab-seed", gen.vocab_seed, "Answer list shuffling seed");
  cmd_gen->add_flag("--sidecar", gen.sidecar, "Write features to binary sidecar files");

  TrainArgs train;
  auto* cmd_tr = app.add_subcommand("train", "Run the multi-phase training schedule");
  cmd_tr->add_option("--config", train.config_path, "Run configuration file (JSON)");
  cmd_tr->add_option("--train", train.train_path, "Training dataset");
  cmd_tr->add_option("--val", train.val_path, "Validation dataset");
  cmd_tr->add_option("--vocab", train.vocab_path, "Vocabulary file");
  cmd_tr->add_option("--out", train.out, "Output directory");
  cmd_tr->add_option("--init", train.init_ckpt, "Initialize from a checkpoint");
  cmd_tr->add_option("--seed", train.seed, "RNG seed");
  cmd_tr->add_option("--setting", train.setting, "disc or gen")
      ->check(CLI::IsMember({"disc", "gen"}));
  cmd_tr->add_option("--history", train.history, "History mode for both phases")
      ->check(CLI::IsMember({"none", "one", "full"}));
  cmd_tr->add_option("--epochs1", train.epochs1, "Phase 1 epochs");
  cmd_tr->add_option("--epochs2", train.epochs2, "Phase 2 epochs");
  cmd_tr->add_option("--epochs-dense", train.epochs_dense, "Dense fine-tuning epochs");
  cmd_tr->add_option("--lr", train.lr, "Learning rate");
  cmd_tr->add_option("--batch-size", train.batch_size, "Batch size");
  cmd_tr->add_option("--rank-loss", train.rank_loss, "Dense loss")
      ->check(CLI::IsMember({"ce", "listnet", "listmle", "approxndcg"}));

  TrainArgs dense;
  auto* cmd_dense = app.add_subcommand("finetune-dense", "Fine-tune on dense relevance");
  cmd_dense->add_option("--ckpt", dense.init_ckpt, "Checkpoint to start from")->required();
  cmd_dense->add_option("--train", dense.train_path, "Training dataset")->required();
  cmd_dense->add_option("--val", dense.val_path, "Validation dataset");
  cmd_dense->add_option("--vocab", dense.vocab_path, "Vocabulary file");
  cmd_dense->add_option("--out", dense.out, "Output directory")->required();
  cmd_dense->add_option("--seed", dense.seed, "RNG seed");
  cmd_dense->add_option("--rank-loss", dense.rank_loss, "Ranking loss")
      ->check(CLI::IsMember({"ce", "listnet", "listmle", "approxndcg"}));
  std::optional<int> dense_epochs_opt;
  cmd_dense->add_option("--epochs", dense_epochs_opt, "Fine-tuning epochs");
  std::optional<int> dense_nsub;
  cmd_dense->add_option("--n-subsample", dense_nsub, "Candidates per turn");
  cmd_dense->add_option("--lr", dense.lr, "Learning rate");

  RankArgs rank;
  auto* cmd_rk = app.add_subcommand("rank", "Rank answer candidates for every turn");
  cmd_rk->add_option("--ckpt", rank.ckpt, "Checkpoint")->required();
  cmd_rk->add_option("--data", rank.data_path, "Dataset")->required();
  cmd_rk->add_option("--vocab", rank.vocab_path, "Vocabulary file");
  cmd_rk->add_option("--out", rank.out, "Prediction file")->required();
  cmd_rk->add_option("--mode", rank.mode, "disc (NSP) or gen (log-likelihood)")
      ->check(CLI::IsMember({"disc", "gen"}));
  cmd_rk->add_option("--history", rank.history, "History mode")
      ->check(CLI::IsMember({"none", "one", "full"}));

  GenerateArgs genans;
  auto* cmd_ga = app.add_subcommand("generate", "Decode answers with recursive masking");
  cmd_ga->add_option("--ckpt", genans.ckpt, "Checkpoint")->required();
  cmd_ga->add_option("--data", genans.data_path, "Dataset")->required();
  cmd_ga->add_option("--vocab", genans.vocab_path, "Vocabulary file");
  cmd_ga->add_option("--out", genans.out, "Decoded answers (JSONL)")->required();
  cmd_ga->add_option("--history", genans.history, "History mode")
      ->check(CLI::IsMember({"none", "one", "full"}));
  cmd_ga->add_option("--max-len", genans.max_len, "Decoding budget");

  EvalArgs eval;
  auto* cmd_ev = app.add_subcommand("eval", "Score a prediction file against a dataset");
  cmd_ev->add_option("--predictions", eval.predictions, "Prediction file")->required();
  cmd_ev->add_option("--data", eval.data_path, "Dataset")->required();
  cmd_ev->add_option("--vocab", eval.vocab_path, "Vocabulary file");
  cmd_ev->add_option("--out", eval.out, "Metric report (JSON)");

  EnsembleArgs ens;
  auto* cmd_en = app.add_subcommand("ensemble", "Combine prediction files");
  cmd_en->add_option("--out", ens.out, "Combined prediction file")->required();
  cmd_en->add_option("inputs", ens.inputs, "Prediction files")->expected(-2);

  DumpAttentionArgs dump;
  auto* cmd_da = app.add_subcommand("dump-attention", "Export attention maps as CSV");
  cmd_da->add_option("--ckpt", dump.ckpt, "Checkpoint")->required();
  cmd_da->add_option("--data", dump.data_path, "Dataset")->required();
  cmd_da->add_option("--vocab", dump.vocab_path, "Vocabulary file");
  cmd_da->add_option("--image", dump.image_id, "Image id")->required();
  cmd_da->add_option("--turn", dump.turn, "Turn index")->required();
  cmd_da->add_option("--layer", dump.layer, "Restrict to one layer");
  cmd_da->add_option("--head", dump.head, "Restrict to one head");
  cmd_da->add_option("--history", dump.history, "History mode")
      ->check(CLI::IsMember({"none", "one", "full"}));
  cmd_da->add_option("--out", dump.out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }

  try {
    if (cmd_gen->parsed()) return cmd_gen_data(gen);
    if (cmd_tr->parsed()) return cmd_train(train);
    if (cmd_dense->parsed()) {
      dense.epochs1 = 0;
      dense.epochs2 = 0;
      dense.epochs_dense = dense_epochs_opt.value_or(5);
      TrainArgs args = dense;
      // the dense learning rate flag feeds the dense phase directly
      cli::RunConfig cfg = cli::RunConfig::defaults();
      cfg.train_path = args.train_path;
      cfg.val_path = args.val_path;
      cfg.vocab_path = args.vocab_path;
      cfg.out_dir = args.out;
      if (args.seed) {
        cfg.seed = *args.seed;
        cfg.train.seed = *args.seed;
      }
      cfg.train.phase1_epochs = 0;
      cfg.train.phase2_epochs = 0;
      cfg.train.dense_epochs = *args.epochs_dense;
      if (args.rank_loss) cfg.train.dense_loss = training::rank_loss_from(*args.rank_loss);
      if (dense_nsub) cfg.train.n_subsample = *dense_nsub;
      if (args.lr) cfg.train.dense_lr = *args.lr;
      cfg.train.validate();
      DataBundle train_b = load_bundle(cfg.train_path, cfg.vocab_path);
      std::optional<DataBundle> val_b;
      if (!cfg.val_path.empty()) val_b = load_bundle(cfg.val_path, cfg.vocab_path);
      model::Parameters params = load_params(args.init_ckpt);
      fs::create_directories(cfg.out_dir);
      const auto logs = training::run_schedule(cfg.train, params, train_b.ds, train_b.vocab,
                                               val_b ? &val_b->ds : nullptr, cfg.out_dir);
      json summary = {{"epochs", logs.size()}, {"out", cfg.out_dir}};
      if (!logs.empty() && logs.back().ndcg) summary["final_ndcg"] = *logs.back().ndcg;
      std::cout << summary.dump() << "\n";
      return kOk;
    }
    if (cmd_rk->parsed()) return cmd_rank(rank);
    if (cmd_ga->parsed()) return cmd_generate(genans);
    if (cmd_ev->parsed()) return cmd_eval(eval);
    if (cmd_en->parsed()) return cmd_ensemble(ens);
    if (cmd_da->parsed()) return cmd_dump_attention(dump);
  } catch (const cli::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kMissingFile;
  } catch (const inference::AlignmentError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kMisaligned;
  } catch (const data::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kBadData;
  } catch (const data::ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kBadData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kInternal;
  }
  return kUsage;
}
