// Copyright (c) 2026 UVDT contributors
// SPDX-License-Identifier: Apache-2.0
//
// Dataset model, tokenizer, file ingestion and the synthetic dialog world
// used for desk-scale training.
#pragma once

#include "uvdt/rng.hpp"
#include "uvdt/tensor.hpp"

#include <json.hpp>

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

namespace uvdt::data {

using njson = nlohmann::json;

struct ParseError : Error {
  explicit ParseError(const std::string& msg) : Error(msg) {}
};
struct ValidationError : Error {
  explicit ValidationError(const std::string& msg) : Error(msg) {}
};

// ---------------------------------------------------------------------------
// Vocabulary and tokenizer
// ---------------------------------------------------------------------------

inline constexpr int kPadId = 0;
inline constexpr int kUnkId = 1;
inline constexpr int kClsId = 2;
inline constexpr int kSepId = 3;
inline constexpr int kMaskId = 4;
inline constexpr int kEotId = 5;
inline constexpr int kPredId = 6;
inline constexpr int kImgId = 7;  // placeholder id carried by vision positions
inline constexpr int kNumSpecials = 8;

inline const std::vector<std::string>& special_tokens() {
  static const std::vector<std::string> specials = {
      "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]", "[EOT]", "[PRED]", "[IMG]"};
  return specials;
}

struct Vocab {
  std::vector<std::string> tokens;               // id -> token
  std::unordered_map<std::string, int> ids;      // token -> id

  int size() const { return static_cast<int>(tokens.size()); }

  int id_of(const std::string& tok) const {
    auto it = ids.find(tok);
    return it == ids.end() ? kUnkId : it->second;
  }

  const std::string& token_of(int id) const {
    if (id < 0 || id >= size()) throw ValidationError("vocab: id out of range");
    return tokens[static_cast<size_t>(id)];
  }

  static Vocab from_words(std::vector<std::string> words) {
    Vocab v;
    v.tokens = special_tokens();
    std::sort(words.begin(), words.end());
    words.erase(std::unique(words.begin(), words.end()), words.end());
    for (auto& w : words) {
      if (std::find(v.tokens.begin(), v.tokens.end(), w) == v.tokens.end())
        v.tokens.push_back(w);
    }
    for (int i = 0; i < v.size(); ++i) v.ids.emplace(v.tokens[static_cast<size_t>(i)], i);
    return v;
  }
};

// Lowercase, split on whitespace; punctuation characters become their own
// tokens. Deterministic and total.
inline std::vector<std::string> split_words(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) {
      out.push_back(cur);
      cur.clear();
    }
  };
  for (char raw : text) {
    const unsigned char c = static_cast<unsigned char>(raw);
    if (std::isspace(c)) {
      flush();
    } else if (std::isalnum(c)) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else {
      flush();
      out.push_back(std::string(1, static_cast<char>(std::tolower(c))));
    }
  }
  flush();
  return out;
}

inline std::vector<int> tokenize(const std::string& text, const Vocab& vocab) {
  std::vector<int> ids;
  for (const auto& w : split_words(text)) ids.push_back(vocab.id_of(w));
  return ids;
}

inline std::string detokenize(const std::vector<int>& ids, const Vocab& vocab) {
  std::string out;
  for (size_t i = 0; i < ids.size(); ++i) {
    if (i) out.push_back(' ');
    out += vocab.token_of(ids[i]);
  }
  return out;
}

inline void save_vocab(const std::string& path, const Vocab& vocab) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("vocab: cannot open " + path + " for writing");
  for (const auto& t : vocab.tokens) os << t << "\n";
}

inline Vocab load_vocab(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("vocab: cannot open " + path);
  Vocab v;
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty()) v.tokens.push_back(line);
  }
  for (int i = 0; i < v.size(); ++i) {
    if (!v.ids.emplace(v.tokens[static_cast<size_t>(i)], i).second)
      throw ValidationError("vocab: duplicate token '" + v.tokens[static_cast<size_t>(i)] + "'");
  }
  for (int i = 0; i < kNumSpecials; ++i) {
    const auto& want = special_tokens()[static_cast<size_t>(i)];
    if (i >= v.size() || v.tokens[static_cast<size_t>(i)] != want)
      throw ValidationError("vocab: special token " + want + " missing at id " + std::to_string(i));
  }
  return v;
}

// ---------------------------------------------------------------------------
// Domain types
// ---------------------------------------------------------------------------

struct VisionObject {
  std::vector<real> feature;
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;
  int class_id = 0;
  double confidence = 1.0;
};

struct DialogTurn {
  std::string question;
  std::string answer;               // ground-truth answer text
  std::vector<int> candidate_ids;   // indices into Dataset::answers
  int gt_index = 0;                 // index into candidate_ids
  std::optional<std::vector<double>> relevance;
};

struct DialogInstance {
  int64_t image_id = 0;
  std::string caption;
  std::vector<VisionObject> objects;
  std::vector<DialogTurn> turns;
  int width = 0;
  int height = 0;
};

struct Dataset {
  std::vector<std::string> answers;
  std::vector<DialogInstance> images;
  int num_candidates = 100;
  int d_v = 0;
  int num_classes = 1;
};

inline constexpr int kMaxTurns = 10;

// Normalized box coordinates, relative area, normalized class id, confidence.
inline std::vector<real> encode_spatial(const VisionObject& o, double W, double H,
                                        int num_classes) {
  if (W <= 0 || H <= 0) throw ValidationError("encode_spatial: image size must be positive");
  if (!(o.x1 < o.x2) || !(o.y1 < o.y2))
    throw ValidationError("encode_spatial: degenerate box");
  if (o.x1 < 0 || o.y1 < 0 || o.x2 > W || o.y2 > H)
    throw ValidationError("encode_spatial: box outside image");
  const double nx1 = o.x1 / W, ny1 = o.y1 / H, nx2 = o.x2 / W, ny2 = o.y2 / H;
  const double area = (o.x2 - o.x1) * (o.y2 - o.y1) / (W * H);
  const double cls = num_classes > 0 ? static_cast<double>(o.class_id) / num_classes : 0.0;
  return {static_cast<real>(nx1), static_cast<real>(ny1), static_cast<real>(nx2),
          static_cast<real>(ny2), static_cast<real>(area), static_cast<real>(cls),
          static_cast<real>(o.confidence)};
}

inline constexpr int kSpatialDim = 7;

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

inline void validate_dataset(const Dataset& ds) {
  if (ds.num_candidates < 2) throw ValidationError("dataset: num_candidates must be >= 2");
  const size_t num_objects = ds.images.empty() ? 0 : ds.images[0].objects.size();
  for (size_t ii = 0; ii < ds.images.size(); ++ii) {
    const auto& img = ds.images[ii];
    const std::string where = "image " + std::to_string(img.image_id);
    if (img.width <= 0 || img.height <= 0)
      throw ValidationError(where + ": non-positive image size");
    if (img.objects.size() != num_objects)
      throw ValidationError(where + ": " + std::to_string(img.objects.size()) +
                            " objects, expected " + std::to_string(num_objects));
    for (size_t oi = 0; oi < img.objects.size(); ++oi) {
      const auto& o = img.objects[oi];
      const std::string owhere = where + " object " + std::to_string(oi);
      if (static_cast<int>(o.feature.size()) != ds.d_v)
        throw ValidationError(owhere + ": feature length " + std::to_string(o.feature.size()) +
                              ", expected " + std::to_string(ds.d_v));
      if (!(o.x1 < o.x2) || !(o.y1 < o.y2)) throw ValidationError(owhere + ": degenerate box");
      if (o.confidence < 0.0 || o.confidence > 1.0)
        throw ValidationError(owhere + ": confidence outside [0,1]");
      if (o.class_id < 0) throw ValidationError(owhere + ": negative class id");
    }
    if (img.turns.empty() || img.turns.size() > kMaxTurns)
      throw ValidationError(where + ": turn count " + std::to_string(img.turns.size()) +
                            " outside [1," + std::to_string(kMaxTurns) + "]");
    for (size_t ti = 0; ti < img.turns.size(); ++ti) {
      const auto& t = img.turns[ti];
      const std::string twhere = where + " turn " + std::to_string(ti);
      if (static_cast<int>(t.candidate_ids.size()) != ds.num_candidates)
        throw ValidationError(twhere + ": " + std::to_string(t.candidate_ids.size()) +
                              " candidates, expected " + std::to_string(ds.num_candidates));
      if (t.gt_index < 0 || t.gt_index >= ds.num_candidates)
        throw ValidationError(twhere + ": gt_index out of range");
      for (int cid : t.candidate_ids)
        if (cid < 0 || cid >= static_cast<int>(ds.answers.size()))
          throw ValidationError(twhere + ": candidate id out of range");
      if (t.answer != ds.answers[static_cast<size_t>(t.candidate_ids[static_cast<size_t>(t.gt_index)])])
        throw ValidationError(twhere + ": answer text does not match gt candidate");
      if (t.relevance) {
        if (static_cast<int>(t.relevance->size()) != ds.num_candidates)
          throw ValidationError(twhere + ": relevance length mismatch");
        for (double rv : *t.relevance)
          if (rv < 0.0 || rv > 1.0) throw ValidationError(twhere + ": relevance outside [0,1]");
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Dataset file format (JSON, optional binary feature sidecars)
// ---------------------------------------------------------------------------

namespace detail {

inline const njson& require(const njson& j, const char* key, const std::string& where) {
  auto it = j.find(key);
  if (it == j.end()) throw ParseError(where + ": missing field '" + key + "'");
  return *it;
}

}  // namespace detail

inline void save_dataset(const std::string& path, const Dataset& ds, bool feature_sidecar = false) {
  namespace fs = std::filesystem;
  njson root;
  root["answers"] = ds.answers;
  root["num_candidates"] = ds.num_candidates;
  root["d_v"] = ds.d_v;
  root["num_classes"] = ds.num_classes;
  njson images = njson::array();
  const fs::path base = fs::path(path).parent_path();
  const std::string stem = fs::path(path).stem().string();
  for (const auto& img : ds.images) {
    njson ji;
    ji["id"] = img.image_id;
    ji["caption"] = img.caption;
    ji["width"] = img.width;
    ji["height"] = img.height;
    njson objs = njson::array();
    for (const auto& o : img.objects) {
      njson jo;
      if (!feature_sidecar) {
        jo["features"] = std::vector<double>(o.feature.begin(), o.feature.end());
      }
      jo["box"] = {o.x1, o.y1, o.x2, o.y2};
      jo["class_id"] = o.class_id;
      jo["confidence"] = o.confidence;
      objs.push_back(std::move(jo));
    }
    ji["objects"] = std::move(objs);
    if (feature_sidecar) {
      const std::string fname = stem + ".img" + std::to_string(img.image_id) + ".feat";
      std::ofstream fb((base / fname).string(), std::ios::binary);
      if (!fb) throw IoError("dataset: cannot write sidecar " + fname);
      for (const auto& o : img.objects)
        for (real v : o.feature) {
          const float f = static_cast<float>(v);
          fb.write(reinterpret_cast<const char*>(&f), 4);
        }
      ji["features_file"] = fname;
    }
    njson turns = njson::array();
    for (const auto& t : img.turns) {
      njson jt;
      jt["question"] = t.question;
      jt["answer"] = t.candidate_ids[static_cast<size_t>(t.gt_index)];
      jt["candidates"] = t.candidate_ids;
      jt["gt_index"] = t.gt_index;
      if (t.relevance) jt["relevance"] = *t.relevance;
      turns.push_back(std::move(jt));
    }
    ji["turns"] = std::move(turns);
    images.push_back(std::move(ji));
  }
  root["images"] = std::move(images);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("dataset: cannot open " + path + " for writing");
  os << root.dump() << "\n";
}

inline Dataset load_dataset_file(const std::string& path) {
  namespace fs = std::filesystem;
  std::ifstream is(path);
  if (!is) throw IoError("dataset: cannot open " + path);
  njson root;
  try {
    is >> root;
  } catch (const std::exception& e) {
    throw ParseError("dataset " + path + ": invalid JSON: " + e.what());
  }
  Dataset ds;
  ds.answers = detail::require(root, "answers", "dataset").get<std::vector<std::string>>();
  ds.num_candidates = root.value("num_candidates", 100);
  ds.d_v = root.value("d_v", -1);
  ds.num_classes = root.value("num_classes", 0);
  const fs::path base = fs::path(path).parent_path();
  int max_class = -1;
  for (const auto& ji : detail::require(root, "images", "dataset")) {
    DialogInstance img;
    img.image_id = detail::require(ji, "id", "image").get<int64_t>();
    const std::string where = "image " + std::to_string(img.image_id);
    img.caption = detail::require(ji, "caption", where).get<std::string>();
    img.width = detail::require(ji, "width", where).get<int>();
    img.height = detail::require(ji, "height", where).get<int>();
    std::vector<float> sidecar;
    bool use_sidecar = false;
    if (ji.contains("features_file")) {
      use_sidecar = true;
      if (ds.d_v <= 0)
        throw ParseError(where + ": feature sidecar requires top-level d_v");
      const std::string fname = ji["features_file"].get<std::string>();
      std::ifstream fb((base / fname).string(), std::ios::binary);
      if (!fb) throw IoError(where + ": cannot open sidecar " + fname);
      fb.seekg(0, std::ios::end);
      const auto bytes = fb.tellg();
      fb.seekg(0);
      sidecar.resize(static_cast<size_t>(bytes) / 4);
      fb.read(reinterpret_cast<char*>(sidecar.data()), bytes);
      if (!fb) throw IoError(where + ": truncated sidecar " + fname);
    }
    size_t oi = 0;
    for (const auto& jo : detail::require(ji, "objects", where)) {
      VisionObject o;
      const auto& box = detail::require(jo, "box", where);
      if (!box.is_array() || box.size() != 4)
        throw ParseError(where + " object " + std::to_string(oi) + ": box must have 4 entries");
      o.x1 = box[0].get<double>();
      o.y1 = box[1].get<double>();
      o.x2 = box[2].get<double>();
      o.y2 = box[3].get<double>();
      o.class_id = detail::require(jo, "class_id", where).get<int>();
      o.confidence = detail::require(jo, "confidence", where).get<double>();
      max_class = std::max(max_class, o.class_id);
      if (use_sidecar) {
        const size_t off = oi * static_cast<size_t>(ds.d_v);
        if (off + static_cast<size_t>(ds.d_v) > sidecar.size())
          throw ParseError(where + ": sidecar too small for object " + std::to_string(oi));
        o.feature.assign(sidecar.begin() + static_cast<long>(off),
                         sidecar.begin() + static_cast<long>(off + static_cast<size_t>(ds.d_v)));
      } else {
        auto feats = detail::require(jo, "features", where).get<std::vector<double>>();
        o.feature.assign(feats.begin(), feats.end());
        if (ds.d_v < 0) ds.d_v = static_cast<int>(o.feature.size());
      }
      img.objects.push_back(std::move(o));
      ++oi;
    }
    size_t ti = 0;
    for (const auto& jt : detail::require(ji, "turns", where)) {
      DialogTurn t;
      const std::string twhere = where + " turn " + std::to_string(ti);
      t.question = detail::require(jt, "question", twhere).get<std::string>();
      t.candidate_ids = detail::require(jt, "candidates", twhere).get<std::vector<int>>();
      t.gt_index = detail::require(jt, "gt_index", twhere).get<int>();
      const int answer_id = detail::require(jt, "answer", twhere).get<int>();
      if (answer_id < 0 || answer_id >= static_cast<int>(ds.answers.size()))
        throw ParseError(twhere + ": answer id out of range");
      t.answer = ds.answers[static_cast<size_t>(answer_id)];
      if (jt.contains("relevance"))
        t.relevance = jt["relevance"].get<std::vector<double>>();
      img.turns.push_back(std::move(t));
      ++ti;
    }
    ds.images.push_back(std::move(img));
  }
  if (ds.num_classes <= 0) ds.num_classes = max_class + 1 > 0 ? max_class + 1 : 1;
  validate_dataset(ds);
  return ds;
}

inline Vocab induce_vocab(const Dataset& ds) {
  std::vector<std::string> words;
  auto collect = [&](const std::string& text) {
    for (auto& w : split_words(text)) words.push_back(std::move(w));
  };
  for (const auto& a : ds.answers) collect(a);
  for (const auto& img : ds.images) {
    collect(img.caption);
    for (const auto& t : img.turns) collect(t.question);
  }
  return Vocab::from_words(std::move(words));
}

// Loads a dataset plus its vocabulary (from `vocab_path` when given, induced
// from the corpus otherwise).
inline std::pair<Dataset, Vocab> load_dataset(const std::string& path,
                                              const std::string& vocab_path = "") {
  Dataset ds = load_dataset_file(path);
  Vocab v = vocab_path.empty() ? induce_vocab(ds) : load_vocab(vocab_path);
  return {std::move(ds), std::move(v)};
}

// ---------------------------------------------------------------------------
// Synthetic shape-color world
// ---------------------------------------------------------------------------

struct SynthConfig {
  int num_images = 64;
  int num_objects = 4;
  int num_candidates = 100;
  int turns_per_image = 3;
  int d_v = 16;
  double dense_fraction = 0.0;     // expected fraction of non-zero relevance entries
  double misalign_fraction = 0.0;  // fraction of turns whose gt relevance is demoted
  uint64_t vocab_seed = 0;         // shuffles the global answer list
};

namespace synth {

inline const std::vector<std::string>& shapes() {
  static const std::vector<std::string> v = {"ball", "cube", "cone", "star", "ring", "disk"};
  return v;
}
inline const std::vector<std::string>& colors() {
  static const std::vector<std::string> v = {"red",    "blue",   "green", "yellow",
                                             "purple", "orange", "pink",  "brown"};
  return v;
}
inline constexpr int kMaxCount = 9;
inline constexpr int kFeatureDim = 16;  // shape one-hot | color one-hot | size | bias

enum class AnswerKind { color, yesno, number, shape };

struct AnswerInfo {
  std::string text;
  AnswerKind kind;
  int base;    // color idx / 0=yes 1=no / count / shape idx
  bool exact;  // true for the canonical ground-truth form
};

inline std::vector<std::string> variants_of(AnswerKind kind, const std::string& base) {
  switch (kind) {
    case AnswerKind::color:
      return {base,          "dark " + base,       "light " + base, "bright " + base,
              "pale " + base, "mostly " + base,     base + " color", "kind of " + base,
              "deep " + base, "very " + base,       base + " ish",   "looks " + base};
    case AnswerKind::yesno:
      if (base == "yes")
        return {"yes",      "yep",        "yeah",     "yes it is", "i think so", "sure",
                "definitely", "of course", "yes sure", "it is",     "indeed",     "absolutely"};
      return {"no",         "nope",           "not at all", "no it is not",
              "i do not think so", "not really", "no way",     "definitely not",
              "i think not", "it is not",      "never",      "absolutely not"};
    case AnswerKind::number:
      return {base,           base + " of them", "i see " + base,  "exactly " + base,
              "maybe " + base, "about " + base,   base + " i think", "just " + base,
              "around " + base, base + " total",  "only " + base,   "probably " + base};
    case AnswerKind::shape:
      return {base,           "a " + base,          "it is a " + base, "some kind of " + base,
              "maybe a " + base, "looks like a " + base, "probably a " + base, "a small " + base,
              "a big " + base, "i see a " + base,    base + " i think", "just a " + base};
  }
  return {};
}

struct AnswerTable {
  std::vector<AnswerInfo> infos;                  // aligned with Dataset::answers
  std::map<std::pair<int, int>, int> exact_id;    // (kind, base) -> answer id
  std::map<std::pair<int, int>, std::vector<int>> group;  // (kind, base) -> all ids

  static AnswerTable build(uint64_t vocab_seed) {
    AnswerTable t;
    auto add_group = [&](AnswerKind kind, int base, const std::string& word) {
      auto vars = variants_of(kind, word);
      for (size_t i = 0; i < vars.size(); ++i)
        t.infos.push_back({vars[i], kind, base, i == 0});
    };
    for (size_t c = 0; c < colors().size(); ++c)
      add_group(AnswerKind::color, static_cast<int>(c), colors()[c]);
    add_group(AnswerKind::yesno, 0, "yes");
    add_group(AnswerKind::yesno, 1, "no");
    for (int n = 0; n <= kMaxCount; ++n)
      add_group(AnswerKind::number, n, std::to_string(n));
    for (size_t s = 0; s < shapes().size(); ++s)
      add_group(AnswerKind::shape, static_cast<int>(s), shapes()[s]);
    Rng g = make_rng(mix_seed(vocab_seed, 0x5eed));
    fisher_yates(t.infos, g);
    for (size_t i = 0; i < t.infos.size(); ++i) {
      const auto& info = t.infos[i];
      const auto key = std::make_pair(static_cast<int>(info.kind), info.base);
      if (info.exact) t.exact_id[key] = static_cast<int>(i);
      t.group[key].push_back(static_cast<int>(i));
    }
    return t;
  }
};

struct ObjectAttrs {
  int shape;
  int color;
  int size;  // 0 small, 1 big
};

// The deterministic attribute -> feature encoding (and its inverse, used by
// tests to check answers against the scene).
inline std::vector<real> encode_feature(const ObjectAttrs& a, int d_v) {
  std::vector<real> f(static_cast<size_t>(d_v), real(0));
  f[static_cast<size_t>(a.shape)] = real(1);
  f[static_cast<size_t>(shapes().size() + static_cast<size_t>(a.color))] = real(1);
  f[shapes().size() + colors().size()] = a.size ? real(1) : real(0.5);
  f[shapes().size() + colors().size() + 1] = real(1);
  return f;
}

inline ObjectAttrs decode_feature(const std::vector<real>& f) {
  ObjectAttrs a{0, 0, 0};
  for (size_t i = 0; i < shapes().size(); ++i)
    if (f[i] == real(1)) a.shape = static_cast<int>(i);
  for (size_t i = 0; i < colors().size(); ++i)
    if (f[shapes().size() + i] == real(1)) a.color = static_cast<int>(i);
  a.size = f[shapes().size() + colors().size()] == real(1) ? 1 : 0;
  return a;
}

}  // namespace synth

inline Dataset generate_synthetic(const SynthConfig& cfg, uint64_t seed) {
  using namespace synth;
  if (cfg.num_candidates < 2)
    throw ValidationError("generate_synthetic: num_candidates must be >= 2");
  if (cfg.d_v < kFeatureDim)
    throw ValidationError("generate_synthetic: d_v must be >= " + std::to_string(kFeatureDim));
  if (cfg.turns_per_image < 1 || cfg.turns_per_image > kMaxTurns)
    throw ValidationError("generate_synthetic: turns_per_image outside [1,10]");
  if (cfg.num_objects < 1 || cfg.num_objects > kMaxCount)
    throw ValidationError("generate_synthetic: num_objects outside [1," +
                          std::to_string(kMaxCount) + "]");

  const AnswerTable table = AnswerTable::build(cfg.vocab_seed);
  Dataset ds;
  ds.num_candidates = cfg.num_candidates;
  ds.d_v = cfg.d_v;
  ds.num_classes = static_cast<int>(shapes().size());
  ds.answers.reserve(table.infos.size());
  for (const auto& info : table.infos) ds.answers.push_back(info.text);

  const int W = 384, H = 288;
  Rng g = make_rng(mix_seed(seed, 0xda7a));

  auto build_pool = [&](int gt_id, DialogTurn& turn) {
    const auto& gt = table.infos[static_cast<size_t>(gt_id)];
    const auto key = std::make_pair(static_cast<int>(gt.kind), gt.base);
    std::vector<int> pool = {gt_id};
    std::optional<std::vector<double>> rel;
    bool misaligned = false;
    if (cfg.dense_fraction > 0.0) {
      int m = 0;  // non-zero relevance count
      for (int i = 0; i < cfg.num_candidates; ++i)
        if (rand_bernoulli(g, cfg.dense_fraction)) ++m;
      m = std::max(1, m);
      misaligned = rand_bernoulli(g, cfg.misalign_fraction);
      if (misaligned) m = std::max(2, m);
      std::vector<int> synonyms;
      for (int id : table.group.at(key))
        if (id != gt_id) synonyms.push_back(id);
      fisher_yates(synonyms, g);
      const int take = std::min<int>(m - 1, static_cast<int>(synonyms.size()));
      for (int i = 0; i < take; ++i) pool.push_back(synonyms[static_cast<size_t>(i)]);
    }
    while (static_cast<int>(pool.size()) < cfg.num_candidates) {
      int cand;
      if (rand_bernoulli(g, 0.7)) {
        // same answer kind but a different base: plausible wrong answer
        std::vector<int> bases;
        for (const auto& [k, ids] : table.group)
          if (k.first == static_cast<int>(gt.kind) && k.second != gt.base)
            bases.push_back(k.second);
        const int b = bases[rand_index(g, bases.size())];
        const auto& ids = table.group.at({static_cast<int>(gt.kind), b});
        cand = ids[rand_index(g, ids.size())];
      } else {
        cand = static_cast<int>(rand_index(g, table.infos.size()));
        const auto& info = table.infos[static_cast<size_t>(cand)];
        if (static_cast<int>(info.kind) == key.first && info.base == key.second) continue;
      }
      if (std::find(pool.begin(), pool.end(), cand) == pool.end()) pool.push_back(cand);
    }
    std::vector<int> order = rand_permutation(pool.size(), g);
    std::vector<int> shuffled(pool.size());
    for (size_t i = 0; i < pool.size(); ++i)
      shuffled[static_cast<size_t>(order[i])] = pool[i];
    turn.candidate_ids = shuffled;
    turn.gt_index = order[0];
    if (cfg.dense_fraction > 0.0) {
      std::vector<double> r(static_cast<size_t>(cfg.num_candidates), 0.0);
      for (size_t i = 0; i < turn.candidate_ids.size(); ++i) {
        const int id = turn.candidate_ids[i];
        const auto& info = table.infos[static_cast<size_t>(id)];
        if (static_cast<int>(info.kind) == key.first && info.base == key.second)
          r[i] = (id == gt_id) ? 1.0 : 0.5;
      }
      // one paraphrase is graded fully correct, like "yep" next to "yes"
      for (size_t i = 0; i < turn.candidate_ids.size(); ++i) {
        if (r[i] == 0.5) {
          r[i] = 1.0;
          break;
        }
      }
      if (misaligned) {
        // the sparse gt is judged irrelevant on top of that
        r[static_cast<size_t>(turn.gt_index)] = 0.0;
      }
      turn.relevance = std::move(r);
    }
    turn.answer = ds.answers[static_cast<size_t>(gt_id)];
  };

  for (int ii = 0; ii < cfg.num_images; ++ii) {
    DialogInstance img;
    img.image_id = ii;
    img.width = W;
    img.height = H;
    std::vector<ObjectAttrs> attrs;
    for (int oi = 0; oi < cfg.num_objects; ++oi) {
      ObjectAttrs a;
      a.shape = static_cast<int>(rand_index(g, shapes().size()));
      a.color = static_cast<int>(rand_index(g, colors().size()));
      a.size = rand_bernoulli(g, 0.5) ? 1 : 0;
      attrs.push_back(a);
      VisionObject o;
      o.feature = encode_feature(a, cfg.d_v);
      const double side = a.size ? rand_range(g, 80, 140) : rand_range(g, 30, 70);
      o.x1 = rand_range(g, 0, W - side - 1);
      o.y1 = rand_range(g, 0, H - side - 1);
      o.x2 = o.x1 + side;
      o.y2 = o.y1 + side * rand_range(g, 0.8, 1.0);
      o.class_id = a.shape;
      o.confidence = rand_range(g, 0.7, 1.0);
      img.objects.push_back(std::move(o));
    }

    // caption grounds the first one or two objects
    {
      const auto& a0 = attrs[0];
      img.caption = "a " + colors()[static_cast<size_t>(a0.color)] + " " +
                    shapes()[static_cast<size_t>(a0.shape)];
      if (attrs.size() > 1) {
        const auto& a1 = attrs[1];
        img.caption += " and a " + colors()[static_cast<size_t>(a1.color)] + " " +
                       shapes()[static_cast<size_t>(a1.shape)];
      }
    }

    auto shape_count = [&](int s) {
      int n = 0;
      for (const auto& a : attrs)
        if (a.shape == s) ++n;
      return n;
    };
    std::vector<int> unique_shapes, unique_colors;
    for (size_t s = 0; s < shapes().size(); ++s)
      if (shape_count(static_cast<int>(s)) == 1) unique_shapes.push_back(static_cast<int>(s));
    for (size_t c = 0; c < colors().size(); ++c) {
      int n = 0;
      for (const auto& a : attrs)
        if (a.color == static_cast<int>(c)) ++n;
      if (n == 1) unique_colors.push_back(static_cast<int>(c));
    }

    for (int ti = 0; ti < cfg.turns_per_image; ++ti) {
      std::vector<AnswerKind> feasible = {AnswerKind::yesno, AnswerKind::number};
      if (!unique_shapes.empty()) feasible.push_back(AnswerKind::color);
      if (!unique_colors.empty()) feasible.push_back(AnswerKind::shape);
      const AnswerKind kind = feasible[rand_index(g, feasible.size())];
      DialogTurn turn;
      int gt_id = -1;
      switch (kind) {
        case AnswerKind::color: {
          const int s = unique_shapes[rand_index(g, unique_shapes.size())];
          int color = -1;
          for (const auto& a : attrs)
            if (a.shape == s) color = a.color;
          turn.question = "what color is the " + shapes()[static_cast<size_t>(s)] + "?";
          gt_id = table.exact_id.at({static_cast<int>(AnswerKind::color), color});
          break;
        }
        case AnswerKind::shape: {
          const int c = unique_colors[rand_index(g, unique_colors.size())];
          int shape = -1;
          for (const auto& a : attrs)
            if (a.color == c) shape = a.shape;
          turn.question = "what shape is the " + colors()[static_cast<size_t>(c)] + " thing?";
          gt_id = table.exact_id.at({static_cast<int>(AnswerKind::shape), shape});
          break;
        }
        case AnswerKind::number: {
          const int s = static_cast<int>(rand_index(g, shapes().size()));
          const int n = shape_count(s);
          turn.question = "how many " + shapes()[static_cast<size_t>(s)] + "s are there?";
          gt_id = table.exact_id.at({static_cast<int>(AnswerKind::number), n});
          break;
        }
        case AnswerKind::yesno: {
          int c, s;
          if (rand_bernoulli(g, 0.5)) {
            const auto& a = attrs[rand_index(g, attrs.size())];
            c = a.color;
            s = a.shape;
          } else {
            c = static_cast<int>(rand_index(g, colors().size()));
            s = static_cast<int>(rand_index(g, shapes().size()));
          }
          bool present = false;
          for (const auto& a : attrs)
            if (a.color == c && a.shape == s) present = true;
          turn.question = "is there a " + colors()[static_cast<size_t>(c)] + " " +
                          shapes()[static_cast<size_t>(s)] + "?";
          gt_id = table.exact_id.at({static_cast<int>(AnswerKind::yesno), present ? 0 : 1});
          break;
        }
      }
      build_pool(gt_id, turn);
      img.turns.push_back(std::move(turn));
    }
    ds.images.push_back(std::move(img));
  }
  validate_dataset(ds);
  return ds;
}

}  // namespace uvdt::data
