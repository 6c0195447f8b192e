#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "rvgtree/common.hpp"
#include "rvgtree/encoders.hpp"
#include "rvgtree/grounding.hpp"
#include "rvgtree/training.hpp"
#include "rvgtree/treebuilder.hpp"

namespace rvg {

// ---------------------------------------------------------------------------
// Vocabulary
// ---------------------------------------------------------------------------

class Vocabulary {
 public:
  static constexpr int kPadId = 0;
  static constexpr int kUnkId = 1;

  // Tokens appearing fewer than min_freq times map to `unk`. Ids are assigned
  // by (frequency desc, token asc), so identical frequency tables give
  // identical vocabularies.
  static Vocabulary build(const std::vector<std::vector<std::string>>& corpus,
                          int min_freq = 5) {
    if (corpus.empty()) throw DataError("build_vocab: empty corpus");
    std::map<std::string, long long> freq;
    for (const auto& sentence : corpus)
      for (const auto& tok : sentence) ++freq[tok];
    std::vector<std::pair<std::string, long long>> kept(freq.begin(), freq.end());
    std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
      if (a.second != b.second) return a.second > b.second;
      return a.first < b.first;
    });
    Vocabulary v;
    for (const auto& [tok, count] : kept) {
      if (count < min_freq) continue;
      v.add_token(tok, count);
    }
    return v;
  }

  Vocabulary() {
    tokens_ = {"pad", "unk"};
    freqs_ = {0, 0};
  }

  int size() const { return static_cast<int>(tokens_.size()); }

  // unk for unseen words
  int id(const std::string& tok) const {
    auto it = index_.find(tok);
    return it == index_.end() ? kUnkId : it->second;
  }

  // -1 for unseen words (warm-start lookups must not clobber the unk row)
  int exact_id(const std::string& tok) const {
    auto it = index_.find(tok);
    return it == index_.end() ? -1 : it->second;
  }

  const std::string& token(int id) const {
    if (id < 0 || id >= size()) throw DataError("vocabulary: id out of range");
    return tokens_[static_cast<std::size_t>(id)];
  }

  long long frequency(int id) const { return freqs_[static_cast<std::size_t>(id)]; }

  std::uint64_t checksum() const {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
      h = fnv1a64(tokens_[i].data(), tokens_[i].size(), h);
      const char sep = '\n';
      h = fnv1a64(&sep, 1, h);
    }
    return h;
  }

  // Pruned tokens -> padded id sequence. Truncation keeps the sentence head.
  SentenceTokens encode(const std::vector<std::string>& pruned, int max_len,
                        bool pad_to_max) const {
    if (pruned.empty()) throw DataError("encode: empty token list");
    SentenceTokens out;
    int keep = std::min<int>(max_len, static_cast<int>(pruned.size()));
    for (int i = 0; i < keep; ++i) {
      out.ids.push_back(id(pruned[static_cast<std::size_t>(i)]));
      out.mask.push_back(1);
      out.tokens.push_back(pruned[static_cast<std::size_t>(i)]);
    }
    if (pad_to_max) {
      while (static_cast<int>(out.ids.size()) < max_len) {
        out.ids.push_back(kPadId);
        out.mask.push_back(0);
      }
    }
    return out;
  }

  void save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write vocabulary: " + path);
    out << "rvg-vocab v1\n";
    for (std::size_t i = 0; i < tokens_.size(); ++i)
      out << i << " " << tokens_[i] << " " << freqs_[i] << "\n";
  }

  static Vocabulary load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open vocabulary: " + path);
    std::string line;
    if (!std::getline(in, line) || line != "rvg-vocab v1")
      throw DataError(path + ": not a vocabulary file");
    Vocabulary v;
    v.tokens_.clear();
    v.freqs_.clear();
    v.index_.clear();
    int lineno = 1;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty()) continue;
      std::istringstream ss(line);
      int id;
      std::string tok;
      long long f;
      if (!(ss >> id >> tok >> f))
        throw DataError(path + ":" + std::to_string(lineno) + ": malformed row");
      if (id != static_cast<int>(v.tokens_.size()))
        throw DataError(path + ":" + std::to_string(lineno) + ": ids must be dense");
      v.tokens_.push_back(tok);
      v.freqs_.push_back(f);
      v.index_[tok] = id;
    }
    if (v.size() < 2 || v.tokens_[0] != "pad" || v.tokens_[1] != "unk")
      throw DataError(path + ": reserved rows pad/unk missing");
    return v;
  }

 private:
  void add_token(const std::string& tok, long long freq) {
    if (index_.count(tok)) return;
    index_[tok] = static_cast<int>(tokens_.size());
    tokens_.push_back(tok);
    freqs_.push_back(freq);
  }

  std::vector<std::string> tokens_;
  std::vector<long long> freqs_;
  std::map<std::string, int> index_{{"pad", 0}, {"unk", 1}};
};

// ---------------------------------------------------------------------------
// Synthetic compositional scenes
// ---------------------------------------------------------------------------

enum class Relation { Left, Right, Above, Below };

struct Grammar {
  std::vector<std::string> categories = {"dog", "cat", "tree", "sofa", "car", "table"};
  std::vector<std::string> colors = {"black", "white", "red", "green"};
  std::vector<std::string> sizes = {"small", "big"};

  // surface realizations per relation; the first form is the canonical one
  std::vector<std::vector<std::vector<std::string>>> relation_surfaces = {
      {{"left", "of"}},          // Left
      {{"right", "of"}},         // Right
      {{"above"}, {"on"}},       // Above
      {{"below"}},               // Below
  };

  int find_category(const std::string& t) const { return find(categories, t); }
  int find_color(const std::string& t) const { return find(colors, t); }
  int find_size(const std::string& t) const { return find(sizes, t); }

 private:
  static int find(const std::vector<std::string>& v, const std::string& t) {
    for (std::size_t i = 0; i < v.size(); ++i)
      if (v[i] == t) return static_cast<int>(i);
    return -1;
  }
};

struct SymbolicObject {
  int category = 0;
  int color = 0;
  int size = 0;
  int cx = 0;  // grid cell, x grows rightward
  int cy = 0;  // grid cell, y grows downward
};

struct SymbolicScene {
  std::string id;
  std::vector<SymbolicObject> objects;
};

// Grid-cell relation semantics: left/right compare x strictly; above/below
// compare y with horizontal overlap (adjacent or same column).
inline bool relation_holds(Relation rel, const SymbolicObject& a, const SymbolicObject& b) {
  switch (rel) {
    case Relation::Left: return a.cx < b.cx;
    case Relation::Right: return a.cx > b.cx;
    case Relation::Above: return a.cy < b.cy && std::abs(a.cx - b.cx) <= 1;
    case Relation::Below: return a.cy > b.cy && std::abs(a.cx - b.cx) <= 1;
  }
  return false;
}

// Parsed expression: `[attr] noun [rel [attr] noun]` over the pruned tokens.
struct ParsedExpression {
  int head_category = -1;
  int head_color = -1;  // -1 = unconstrained
  int head_size = -1;
  bool has_relation = false;
  Relation relation = Relation::Left;
  int ctx_category = -1;
  int ctx_color = -1;
  int ctx_size = -1;
};

namespace detail {

struct NounPhrase {
  int category = -1, color = -1, size = -1;
  std::size_t consumed = 0;
};

inline std::optional<NounPhrase> parse_np(const Grammar& g,
                                          const std::vector<std::string>& toks,
                                          std::size_t pos) {
  NounPhrase np;
  std::size_t p = pos;
  if (p < toks.size()) {
    int c = g.find_color(toks[p]);
    int s = g.find_size(toks[p]);
    if (c >= 0) {
      np.color = c;
      ++p;
    } else if (s >= 0) {
      np.size = s;
      ++p;
    }
  }
  if (p >= toks.size()) return std::nullopt;
  int cat = g.find_category(toks[p]);
  if (cat < 0) return std::nullopt;
  np.category = cat;
  ++p;
  np.consumed = p - pos;
  return np;
}

inline std::optional<std::pair<Relation, std::size_t>> parse_relation(
    const Grammar& g, const std::vector<std::string>& toks, std::size_t pos) {
  for (std::size_t r = 0; r < g.relation_surfaces.size(); ++r) {
    for (const auto& surface : g.relation_surfaces[r]) {
      if (pos + surface.size() > toks.size()) continue;
      bool match = true;
      for (std::size_t i = 0; i < surface.size(); ++i)
        match = match && toks[pos + i] == surface[i];
      if (match) return std::make_pair(static_cast<Relation>(r), surface.size());
    }
  }
  return std::nullopt;
}

}  // namespace detail

inline ParsedExpression parse_expression(const Grammar& g,
                                         const std::vector<std::string>& pruned) {
  auto head = detail::parse_np(g, pruned, 0);
  if (!head)
    throw DataError("expression outside grammar: no head noun phrase");
  ParsedExpression out;
  out.head_category = head->category;
  out.head_color = head->color;
  out.head_size = head->size;
  std::size_t pos = head->consumed;
  if (pos == pruned.size()) return out;
  auto rel = detail::parse_relation(g, pruned, pos);
  if (!rel) throw DataError("expression outside grammar: expected relation");
  out.has_relation = true;
  out.relation = rel->first;
  pos += rel->second;
  auto ctx = detail::parse_np(g, pruned, pos);
  if (!ctx) throw DataError("expression outside grammar: no context noun phrase");
  out.ctx_category = ctx->category;
  out.ctx_color = ctx->color;
  out.ctx_size = ctx->size;
  pos += ctx->consumed;
  if (pos != pruned.size())
    throw DataError("expression outside grammar: trailing tokens");
  return out;
}

inline bool np_matches(const SymbolicObject& o, int category, int color, int size) {
  if (category >= 0 && o.category != category) return false;
  if (color >= 0 && o.color != color) return false;
  if (size >= 0 && o.size != size) return false;
  return true;
}

enum class OracleOutcome { Unique, Ambiguous, None };

struct OracleResult {
  OracleOutcome outcome = OracleOutcome::None;
  int index = -1;
};

// Exhaustive predicate evaluation over all objects; the independent ground
// truth for every generated example.
inline OracleResult oracle_referent(const Grammar& g, const SymbolicScene& scene,
                                    const std::vector<std::string>& pruned) {
  ParsedExpression expr = parse_expression(g, pruned);
  std::vector<int> matches;
  for (std::size_t i = 0; i < scene.objects.size(); ++i) {
    const SymbolicObject& o = scene.objects[i];
    if (!np_matches(o, expr.head_category, expr.head_color, expr.head_size)) continue;
    if (expr.has_relation) {
      bool supported = false;
      for (std::size_t j = 0; j < scene.objects.size(); ++j) {
        if (j == i) continue;
        const SymbolicObject& c = scene.objects[j];
        if (!np_matches(c, expr.ctx_category, expr.ctx_color, expr.ctx_size)) continue;
        if (relation_holds(expr.relation, o, c)) {
          supported = true;
          break;
        }
      }
      if (!supported) continue;
    }
    matches.push_back(static_cast<int>(i));
  }
  OracleResult result;
  if (matches.size() == 1) {
    result.outcome = OracleOutcome::Unique;
    result.index = matches[0];
  } else if (matches.size() > 1) {
    result.outcome = OracleOutcome::Ambiguous;
  }
  return result;
}

// ---------------------------------------------------------------------------
// Feature encoding and generation
// ---------------------------------------------------------------------------

struct GenConfig {
  int n_scenes = 100;
  int objects_per_scene = 5;
  int feature_dim = 32;
  int grid = 8;
  double noise_sigma = 0.05;
  double frac_train = 0.70;
  double frac_val = 0.15;
  double frac_test = 0.15;
  bool emit_boxes = false;
  int max_attempts = 1000;
  std::uint64_t seed = 7;

  void validate(const Grammar& g) const {
    if (objects_per_scene < 2) throw DataError("gen: objects_per_scene must be >= 2");
    if (n_scenes < 1) throw DataError("gen: n_scenes must be >= 1");
    int needed = static_cast<int>(g.categories.size() + g.colors.size() +
                                  g.sizes.size()) + 2;
    if (feature_dim < needed)
      throw DataError("gen: feature_dim must be >= " + std::to_string(needed));
    if (grid < 2) throw DataError("gen: grid must be >= 2");
    if (objects_per_scene > grid * grid)
      throw DataError("gen: more objects than grid cells");
    double fsum = frac_train + frac_val + frac_test;
    if (std::fabs(fsum - 1.0) > 1e-9)
      throw DataError("gen: split fractions must sum to 1");
  }
};

// One-hot attribute blocks plus normalized grid position, then seeded
// Gaussian jitter over the whole vector.
inline std::vector<double> encode_object_features(const Grammar& g,
                                                  const SymbolicObject& o,
                                                  const GenConfig& cfg, Rng& rng) {
  std::vector<double> f(static_cast<std::size_t>(cfg.feature_dim), 0.0);
  std::size_t pos = 0;
  f[pos + static_cast<std::size_t>(o.category)] = 1.0;
  pos += g.categories.size();
  f[pos + static_cast<std::size_t>(o.color)] = 1.0;
  pos += g.colors.size();
  f[pos + static_cast<std::size_t>(o.size)] = 1.0;
  pos += g.sizes.size();
  f[pos++] = static_cast<double>(o.cx) / static_cast<double>(cfg.grid - 1);
  f[pos++] = static_cast<double>(o.cy) / static_cast<double>(cfg.grid - 1);
  for (double& x : f) x += cfg.noise_sigma * rng.gaussian();
  return f;
}

struct ExpressionRecord {
  std::string id;
  std::string scene_id;
  int gt = 0;
  std::string text;  // raw (unpruned) expression
};

struct Scene {
  std::string id;
  int feature_dim = 0;
  std::vector<Region> regions;
};

struct SplitData {
  std::vector<Scene> scenes;
  std::map<std::string, std::size_t> scene_index;
  std::vector<ExpressionRecord> expressions;
  ExpertTreeMap expert_trees;
};

struct GeneratedCorpus {
  SplitData train, val, test;
  std::vector<SymbolicScene> symbolic;  // all scenes, generation order
  Grammar grammar;
  GenConfig config;
};

namespace detail {

struct DraftExample {
  std::vector<std::string> raw_tokens;
  MultiNode parse;
  int gt = -1;
};

// Builds an expression about `target`, biased toward attributes and relations
// that actually hold, then lets the oracle arbitrate uniqueness.
inline std::optional<DraftExample> draft_expression(const Grammar& g,
                                                    const SymbolicScene& scene,
                                                    int target, Rng& rng) {
  const SymbolicObject& t = scene.objects[static_cast<std::size_t>(target)];
  double form = rng.uniform();
  bool with_attr = form >= 0.15 && form < 0.65;
  bool with_rel = form >= 0.45;

  auto np_tokens = [&](const SymbolicObject& o, bool attr) {
    std::vector<std::string> toks;
    if (attr) {
      if (rng.uniform() < 0.6)
        toks.push_back(g.colors[static_cast<std::size_t>(o.color)]);
      else
        toks.push_back(g.sizes[static_cast<std::size_t>(o.size)]);
    }
    toks.push_back(g.categories[static_cast<std::size_t>(o.category)]);
    return toks;
  };

  DraftExample draft;
  std::vector<std::string> head = np_tokens(t, with_attr);

  MultiNode head_node;
  if (head.size() == 1) {
    head_node.token = head[0];
  } else {
    for (const auto& tok : head) {
      MultiNode leaf;
      leaf.token = tok;
      head_node.children.push_back(leaf);
    }
  }

  std::vector<std::string> pruned = head;
  MultiNode root;
  if (!with_rel) {
    root = head_node;
  } else {
    int other = rng.uniform_int(static_cast<int>(scene.objects.size()));
    if (other == target) return std::nullopt;
    const SymbolicObject& c = scene.objects[static_cast<std::size_t>(other)];
    std::vector<Relation> holding;
    for (Relation r : {Relation::Left, Relation::Right, Relation::Above, Relation::Below})
      if (relation_holds(r, t, c)) holding.push_back(r);
    if (holding.empty()) return std::nullopt;
    Relation rel = holding[static_cast<std::size_t>(
        rng.uniform_int(static_cast<int>(holding.size())))];
    const auto& surfaces = g.relation_surfaces[static_cast<int>(rel)];
    const auto& surface = surfaces[static_cast<std::size_t>(
        rng.uniform_int(static_cast<int>(surfaces.size())))];
    bool ctx_attr = rng.uniform() < 0.4;
    std::vector<std::string> ctx = np_tokens(c, ctx_attr);

    MultiNode pp;
    for (const auto& tok : surface) {
      MultiNode leaf;
      leaf.token = tok;
      pp.children.push_back(leaf);
    }
    MultiNode ctx_node;
    if (ctx.size() == 1) {
      ctx_node.token = ctx[0];
    } else {
      for (const auto& tok : ctx) {
        MultiNode leaf;
        leaf.token = tok;
        ctx_node.children.push_back(leaf);
      }
    }
    pp.children.push_back(ctx_node);

    root.children.push_back(head_node);
    root.children.push_back(pp);
    for (const auto& tok : surface) pruned.push_back(tok);
    for (const auto& tok : ctx) pruned.push_back(tok);
  }

  OracleResult check = oracle_referent(g, scene, pruned);
  if (check.outcome != OracleOutcome::Unique || check.index != target)
    return std::nullopt;

  draft.raw_tokens = pruned;
  if (rng.uniform() < 0.3) draft.raw_tokens.insert(draft.raw_tokens.begin(), "a");
  if (rng.uniform() < 0.2) draft.raw_tokens.push_back(".");
  draft.parse = root;
  draft.gt = check.index;
  return draft;
}

}  // namespace detail

// Rejection-sampled corpus: a scene/expression pair is kept only when the
// oracle identifies exactly one referent. Identical seeds give bitwise
// identical corpora. Split is by scene.
inline GeneratedCorpus generate_corpus(const GenConfig& cfg,
                                       const Grammar& grammar = Grammar()) {
  cfg.validate(grammar);
  Rng rng(cfg.seed);
  GeneratedCorpus corpus;
  corpus.grammar = grammar;
  corpus.config = cfg;

  long long n_train = std::llround(cfg.frac_train * cfg.n_scenes);
  long long n_val = std::llround(cfg.frac_val * cfg.n_scenes);
  if (n_train + n_val > cfg.n_scenes) n_val = cfg.n_scenes - n_train;

  for (int s = 0; s < cfg.n_scenes; ++s) {
    bool done = false;
    for (int attempt = 0; attempt < cfg.max_attempts && !done; ++attempt) {
      SymbolicScene scene;
      char sid[32];
      std::snprintf(sid, sizeof(sid), "s%05d", s);
      scene.id = sid;
      std::vector<int> cells;
      while (static_cast<int>(cells.size()) < cfg.objects_per_scene) {
        int cell = rng.uniform_int(cfg.grid * cfg.grid);
        bool used = false;
        for (int c : cells) used = used || c == cell;
        if (!used) cells.push_back(cell);
      }
      for (int i = 0; i < cfg.objects_per_scene; ++i) {
        SymbolicObject o;
        o.category = rng.uniform_int(static_cast<int>(grammar.categories.size()));
        o.color = rng.uniform_int(static_cast<int>(grammar.colors.size()));
        o.size = rng.uniform_int(static_cast<int>(grammar.sizes.size()));
        o.cx = cells[static_cast<std::size_t>(i)] % cfg.grid;
        o.cy = cells[static_cast<std::size_t>(i)] / cfg.grid;
        scene.objects.push_back(o);
      }
      int target = rng.uniform_int(cfg.objects_per_scene);
      auto draft = detail::draft_expression(grammar, scene, target, rng);
      if (!draft) continue;

      SplitData* split = s < n_train ? &corpus.train
                         : s < n_train + n_val ? &corpus.val
                                               : &corpus.test;
      Scene out_scene;
      out_scene.id = scene.id;
      out_scene.feature_dim = cfg.feature_dim;
      for (int i = 0; i < cfg.objects_per_scene; ++i) {
        Region r;
        r.feature = encode_object_features(grammar, scene.objects[static_cast<std::size_t>(i)], cfg, rng);
        if (cfg.emit_boxes) {
          const SymbolicObject& o = scene.objects[static_cast<std::size_t>(i)];
          r.has_box = true;
          r.box = {o.cx * 32.0, o.cy * 32.0, (o.cx + 1) * 32.0, (o.cy + 1) * 32.0};
        }
        out_scene.regions.push_back(std::move(r));
      }
      split->scene_index[out_scene.id] = split->scenes.size();
      split->scenes.push_back(std::move(out_scene));

      ExpressionRecord rec;
      char eid[32];
      std::snprintf(eid, sizeof(eid), "e%05d", s);
      rec.id = eid;
      rec.scene_id = scene.id;
      rec.gt = draft->gt;
      for (std::size_t i = 0; i < draft->raw_tokens.size(); ++i)
        rec.text += (i ? " " : "") + draft->raw_tokens[i];
      split->expressions.push_back(rec);
      split->expert_trees.emplace(rec.id, binarize_constituency(draft->parse));

      corpus.symbolic.push_back(std::move(scene));
      done = true;
    }
    if (!done)
      throw DataError("generate_corpus: could not satisfy config for scene " +
                      std::to_string(s) + " after " +
                      std::to_string(cfg.max_attempts) + " attempts");
  }
  return corpus;
}

// ---------------------------------------------------------------------------
// Dataset files
// ---------------------------------------------------------------------------

inline void save_scenes(const std::string& path, const std::vector<Scene>& scenes) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write scenes: " + path);
  out << "rvg-scenes v1\n";
  for (const Scene& s : scenes) {
    out << "scene " << s.id << " " << s.regions.size() << " " << s.feature_dim << "\n";
    for (const Region& r : s.regions) {
      for (std::size_t i = 0; i < r.feature.size(); ++i)
        out << (i ? " " : "") << format_double(r.feature[i]);
      if (r.has_box)
        for (double b : r.box) out << " " << format_double(b);
      out << "\n";
    }
  }
}

inline std::vector<Scene> load_scenes(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open scenes: " + path);
  std::string line;
  int lineno = 0;
  auto fail = [&](const std::string& msg) -> DataError {
    return DataError(path + ":" + std::to_string(lineno) + ": " + msg);
  };
  if (!std::getline(in, line) || line != "rvg-scenes v1")
    throw DataError(path + ": not a scene file");
  lineno = 1;
  std::vector<Scene> scenes;
  std::map<std::string, bool> seen;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string kw;
    Scene s;
    int n = 0;
    if (!(ss >> kw >> s.id >> n >> s.feature_dim) || kw != "scene")
      throw fail("expected 'scene <id> <n> <d>'");
    if (n < 1 || s.feature_dim < 1) throw fail("bad region count or width");
    if (seen.count(s.id)) throw fail("duplicate scene id " + s.id);
    seen[s.id] = true;
    for (int i = 0; i < n; ++i) {
      if (!std::getline(in, line)) throw fail("truncated scene " + s.id);
      ++lineno;
      std::vector<std::string> parts = split_ws(line);
      std::size_t d = static_cast<std::size_t>(s.feature_dim);
      if (parts.size() != d && parts.size() != d + 4)
        throw fail("region row needs " + std::to_string(d) + " or " +
                   std::to_string(d + 4) + " values, got " +
                   std::to_string(parts.size()));
      Region r;
      try {
        for (std::size_t j = 0; j < d; ++j) r.feature.push_back(std::stod(parts[j]));
        if (parts.size() == d + 4) {
          r.has_box = true;
          for (std::size_t j = 0; j < 4; ++j) r.box[j] = std::stod(parts[d + j]);
        }
      } catch (const std::exception&) {
        throw fail("non-numeric value in region row");
      }
      if (r.has_box && (r.box[2] <= r.box[0] || r.box[3] <= r.box[1]))
        throw fail("degenerate box");
      s.regions.push_back(std::move(r));
    }
    scenes.push_back(std::move(s));
  }
  return scenes;
}

inline void save_expressions(const std::string& path,
                             const std::vector<ExpressionRecord>& records) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write expressions: " + path);
  out << "rvg-expressions v1\n";
  for (const ExpressionRecord& r : records)
    out << r.id << "\t" << r.scene_id << "\t" << r.gt << "\t" << r.text << "\n";
}

inline std::vector<ExpressionRecord> load_expressions(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open expressions: " + path);
  std::string line;
  if (!std::getline(in, line) || line != "rvg-expressions v1")
    throw DataError(path + ": not an expression file");
  std::vector<ExpressionRecord> out;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> cols;
    std::size_t start = 0;
    for (int c = 0; c < 3; ++c) {
      auto tab = line.find('\t', start);
      if (tab == std::string::npos)
        throw DataError(path + ":" + std::to_string(lineno) +
                        ": expected <id>\\t<scene>\\t<gt>\\t<text>");
      cols.push_back(line.substr(start, tab - start));
      start = tab + 1;
    }
    cols.push_back(line.substr(start));
    ExpressionRecord r;
    r.id = cols[0];
    r.scene_id = cols[1];
    try {
      r.gt = std::stoi(cols[2]);
    } catch (const std::exception&) {
      throw DataError(path + ":" + std::to_string(lineno) + ": bad gt index");
    }
    r.text = cols[3];
    out.push_back(std::move(r));
  }
  return out;
}

inline void save_expert_trees(const std::string& path, const ExpertTreeMap& trees) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write expert trees: " + path);
  for (const auto& [id, tree] : trees) out << id << "\t" << to_sexpr(tree) << "\n";
}

// Loads one split directory (scenes + expressions + optional expert trees)
// and validates cross-references.
inline SplitData load_split(const std::string& dir, const std::string& name) {
  namespace fs = std::filesystem;
  SplitData split;
  std::string scene_path = dir + "/" + name + ".scenes";
  std::string expr_path = dir + "/" + name + ".expr";
  std::string tree_path = dir + "/" + name + ".trees";
  split.scenes = load_scenes(scene_path);
  for (std::size_t i = 0; i < split.scenes.size(); ++i)
    split.scene_index[split.scenes[i].id] = i;
  split.expressions = load_expressions(expr_path);
  for (std::size_t i = 0; i < split.expressions.size(); ++i) {
    const ExpressionRecord& r = split.expressions[i];
    auto it = split.scene_index.find(r.scene_id);
    if (it == split.scene_index.end())
      throw DataError(expr_path + ": record " + r.id + " references unknown scene " +
                      r.scene_id);
    const Scene& s = split.scenes[it->second];
    if (r.gt < 0 || r.gt >= static_cast<int>(s.regions.size()))
      throw DataError(expr_path + ": record " + r.id + " gt index " +
                      std::to_string(r.gt) + " out of range");
  }
  if (fs::exists(tree_path)) split.expert_trees = load_expert_trees(tree_path);
  return split;
}

inline void save_split(const std::string& dir, const std::string& name,
                       const SplitData& split) {
  save_scenes(dir + "/" + name + ".scenes", split.scenes);
  save_expressions(dir + "/" + name + ".expr", split.expressions);
  save_expert_trees(dir + "/" + name + ".trees", split.expert_trees);
}

// ---------------------------------------------------------------------------
// Bridging datasets to the model
// ---------------------------------------------------------------------------

inline std::vector<std::string> tokenize_expression(const std::string& text) {
  return split_ws(lowercase(text));
}

// corpus rows for vocabulary building: pruned token lists of a split
inline std::vector<std::vector<std::string>> pruned_corpus(const SplitData& split) {
  std::vector<std::vector<std::string>> out;
  for (const ExpressionRecord& r : split.expressions)
    out.push_back(prune_sentence(tokenize_expression(r.text)));
  return out;
}

inline std::vector<TrainingExample> prepare_examples(const SplitData& split,
                                                     const Vocabulary& vocab,
                                                     int max_sentence_length,
                                                     bool pad_to_max) {
  std::vector<TrainingExample> out;
  out.reserve(split.expressions.size());
  for (const ExpressionRecord& r : split.expressions) {
    TrainingExample ex;
    ex.id = r.id;
    ex.scene_id = r.scene_id;
    ex.gt = r.gt;
    std::vector<std::string> pruned = prune_sentence(tokenize_expression(r.text));
    ex.tokens = vocab.encode(pruned, max_sentence_length, pad_to_max);
    const Scene& scene = split.scenes[split.scene_index.at(r.scene_id)];
    ex.regions = scene.regions;
    out.push_back(std::move(ex));
  }
  return out;
}

// Expert trees must sit over the already-pruned (and possibly truncated)
// token sequence; mismatches are reported, not repaired.
inline void validate_split_expert_trees(const SplitData& split,
                                        const std::vector<TrainingExample>& examples) {
  for (const TrainingExample& ex : examples) {
    auto it = split.expert_trees.find(ex.id);
    if (it == split.expert_trees.end()) continue;
    validate_expert_tree(it->second, ex.tokens.tokens, ex.id);
  }
}

}  // namespace rvg
