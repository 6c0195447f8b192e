#pragma once

#include <cmath>
#include <set>
#include <string>
#include <vector>

#include "rvgtree/encoders.hpp"
#include "rvgtree/grounding.hpp"
#include "rvgtree/params.hpp"
#include "rvgtree/treebuilder.hpp"

namespace rvg {

enum class Variant { Full, Chain, Fix, Scratch, NoNode, NoS, NoF };

inline const char* variant_name(Variant v) {
  switch (v) {
    case Variant::Full: return "Full";
    case Variant::Chain: return "Chain";
    case Variant::Fix: return "Fix";
    case Variant::Scratch: return "Scratch";
    case Variant::NoNode: return "NoNode";
    case Variant::NoS: return "NoS";
    case Variant::NoF: return "NoF";
  }
  return "?";
}

inline Variant parse_variant(const std::string& s) {
  for (Variant v : {Variant::Full, Variant::Chain, Variant::Fix, Variant::Scratch,
                    Variant::NoNode, Variant::NoS, Variant::NoF})
    if (s == variant_name(v)) return v;
  throw DataError("unknown variant: " + s +
                  " (expected Full|Chain|Fix|Scratch|NoNode|NoS|NoF)");
}

struct ModelConfig {
  int vocab_size = 0;
  int embed_dim = 64;    // word embedding width b
  int hidden_dim = 64;   // LSTM width H per direction; node states have width 4H
  int feature_dim = 32;  // region feature width d
  Variant variant = Variant::Full;

  int state_dim() const { return 4 * hidden_dim; }
};

// Ablation wiring for the recursive evaluator.
inline GroundingOptions grounding_options(Variant v, RoleMode role_mode) {
  GroundingOptions opts;
  opts.use_in_node = (v != Variant::NoNode);
  opts.use_pair = (v != Variant::NoF);
  opts.use_accumulation = (v != Variant::NoS);
  opts.role_mode = role_mode;
  return opts;
}

// All trainable tensors, registered by name in a ParameterStore.
class Model {
 public:
  Model(const ModelConfig& cfg, std::uint64_t init_seed) : cfg_(cfg) {
    if (cfg.vocab_size < 2) throw DataError("model: vocabulary too small");
    int b = cfg.embed_dim, H = cfg.hidden_dim, d = cfg.feature_dim;
    int Hn = 2 * H;  // internal-node hidden width
    embeddings_ = &store_.create("embeddings", {cfg.vocab_size, b});
    bilstm_fwd_W_ = &store_.create("bilstm.fwd.W", {4 * H, b + H});
    bilstm_fwd_b_ = &store_.create("bilstm.fwd.b", {4 * H});
    bilstm_bwd_W_ = &store_.create("bilstm.bwd.W", {4 * H, b + H});
    bilstm_bwd_b_ = &store_.create("bilstm.bwd.b", {4 * H});
    tree_W_in_ = &store_.create("treelstm.W_in", {Hn, 2 * Hn});
    tree_W_fl_ = &store_.create("treelstm.W_fl", {Hn, 2 * Hn});
    tree_W_fr_ = &store_.create("treelstm.W_fr", {Hn, 2 * Hn});
    tree_W_out_ = &store_.create("treelstm.W_out", {Hn, 2 * Hn});
    tree_W_cand_ = &store_.create("treelstm.W_cand", {Hn, 2 * Hn});
    tree_b_in_ = &store_.create("treelstm.b_in", {Hn});
    tree_b_f_ = &store_.create("treelstm.b_f", {Hn});
    tree_b_out_ = &store_.create("treelstm.b_out", {Hn});
    tree_b_cand_ = &store_.create("treelstm.b_cand", {Hn});
    merge_query_ = &store_.create("merge.query", {4 * H});
    role_query_ = &store_.create("role.query", {4 * H});
    att_single_ = &store_.create("attn.single", {4 * H});
    att_pair_ = &store_.create("attn.pair", {4 * H});
    score_s2_ = &store_.create("score.single.proj", {b, d});
    score_s1_ = &store_.create("score.single.read", {b});
    score_p2_ = &store_.create("score.pair.proj", {b, 2 * d});
    score_p1_ = &store_.create("score.pair.read", {b});
    init_parameters(init_seed);
  }

  static std::vector<std::string> parameter_manifest() {
    return {"embeddings",
            "bilstm.fwd.W", "bilstm.fwd.b", "bilstm.bwd.W", "bilstm.bwd.b",
            "treelstm.W_in", "treelstm.W_fl", "treelstm.W_fr", "treelstm.W_out",
            "treelstm.W_cand", "treelstm.b_in", "treelstm.b_f", "treelstm.b_out",
            "treelstm.b_cand",
            "merge.query", "role.query", "attn.single", "attn.pair",
            "score.single.proj", "score.single.read",
            "score.pair.proj", "score.pair.read"};
  }

  const ModelConfig& config() const { return cfg_; }
  ParameterStore& store() { return store_; }
  const ParameterStore& store() const { return store_; }
  Tensor& embeddings() { return *embeddings_; }

  struct ForwardOptions {
    TreeMode tree_mode = TreeMode::Eval;
    RoleMode role_mode = RoleMode::Argmax;
    const ExpertTree* expert = nullptr;
    const std::vector<int>* forced_merge_positions = nullptr;
    const std::vector<int>* forced_feature_child = nullptr;
    bool want_tree_loss = false;
  };

  struct ForwardResult {
    Var root_scores;
    bool has_tree = false;
    RvGTree tree;
    GroundingTrace trace;
    Var tree_loss;  // mean per-layer cross-entropy against the forced merges
    std::vector<int> real_positions;  // unmasked token positions, leaf order
  };

  ForwardResult forward(Tape& tape, const SentenceTokens& tokens,
                        const std::vector<Region>& regions,
                        const ForwardOptions& opts, GumbelSampler& sampler) {
    if (regions.empty()) throw DataError("forward: no regions");
    for (const Region& r : regions)
      if (static_cast<int>(r.feature.size()) != cfg_.feature_dim)
        throw DataError("forward: region feature width " +
                        std::to_string(r.feature.size()) + " != configured " +
                        std::to_string(cfg_.feature_dim));
    if (tokens.real_length() == 0) throw DataError("forward: empty sentence");

    Var table = tape.leaf(*embeddings_);
    std::vector<Var> all_embeddings =
        embed_tokens(tape, table, tokens, cfg_.vocab_size, cfg_.embed_dim);

    BiLstmVars bilstm;
    bilstm.fwd_W = tape.leaf(*bilstm_fwd_W_);
    bilstm.fwd_b = tape.leaf(*bilstm_fwd_b_);
    bilstm.bwd_W = tape.leaf(*bilstm_bwd_W_);
    bilstm.bwd_b = tape.leaf(*bilstm_bwd_b_);
    bilstm.hidden = cfg_.hidden_dim;
    std::vector<NodeState> all_states = bilstm_leaf_states(tape, all_embeddings, bilstm);

    ForwardResult result;
    std::vector<Var> word_embeddings;
    std::vector<NodeState> leaf_states;
    for (int i = 0; i < tokens.length(); ++i) {
      if (!tokens.mask[static_cast<std::size_t>(i)]) continue;
      result.real_positions.push_back(i);
      word_embeddings.push_back(all_embeddings[static_cast<std::size_t>(i)]);
      leaf_states.push_back(all_states[static_cast<std::size_t>(i)]);
    }

    std::vector<Var> region_vars;
    region_vars.reserve(regions.size());
    for (const Region& r : regions) region_vars.push_back(tape.constant(r.feature));

    GroundingVars gvars;
    gvars.role_query = tape.leaf(*role_query_);
    gvars.att_single = tape.leaf(*att_single_);
    gvars.att_pair = tape.leaf(*att_pair_);
    gvars.score_s2 = tape.leaf(*score_s2_);
    gvars.score_s1 = tape.leaf(*score_s1_);
    gvars.score_p2 = tape.leaf(*score_p2_);
    gvars.score_p1 = tape.leaf(*score_p1_);

    if (cfg_.variant == Variant::Chain) {
      // structureless baseline: one single-head score over the whole-sentence
      // attention feature
      int m = static_cast<int>(leaf_states.size());
      LanguageFeatures lang = language_features(tape, 0, m, leaf_states,
                                                word_embeddings, gvars.att_single,
                                                gvars.att_pair);
      std::vector<Var> singles;
      for (Var x : region_vars)
        singles.push_back(score_single(tape, x, lang.y_single, gvars));
      result.root_scores = tape.stack(singles);
      result.trace.single_head_evals = 1;
      result.tree_loss = tape.scalar_const(0.0);
      return result;
    }

    TreeLstmVars tvars;
    tvars.W_in = tape.leaf(*tree_W_in_);
    tvars.W_fl = tape.leaf(*tree_W_fl_);
    tvars.W_fr = tape.leaf(*tree_W_fr_);
    tvars.W_out = tape.leaf(*tree_W_out_);
    tvars.W_cand = tape.leaf(*tree_W_cand_);
    tvars.b_in = tape.leaf(*tree_b_in_);
    tvars.b_f = tape.leaf(*tree_b_f_);
    tvars.b_out = tape.leaf(*tree_b_out_);
    tvars.b_cand = tape.leaf(*tree_b_cand_);
    tvars.hidden = 2 * cfg_.hidden_dim;
    Var merge_query = tape.leaf(*merge_query_);

    result.tree = build_tree(tape, leaf_states, merge_query, tvars, opts.tree_mode,
                             sampler, opts.expert, opts.forced_merge_positions);
    result.has_tree = true;

    GroundingOptions gopts = grounding_options(cfg_.variant, opts.role_mode);
    gopts.forced_feature_child = opts.forced_feature_child;
    GroundingResult ground = recursive_ground(tape, result.tree, region_vars,
                                              word_embeddings, gvars, sampler, gopts);
    result.root_scores = ground.root_scores;
    result.trace = std::move(ground.trace);

    if (opts.want_tree_loss) {
      if (result.tree.merge_log.empty()) {
        result.tree_loss = tape.scalar_const(0.0);
      } else {
        std::vector<Var> layer_losses;
        for (const MergeStep& step : result.tree.merge_log)
          layer_losses.push_back(
              tape.neg(tape.pick(tape.log_softmax(step.logits), step.position)));
        result.tree_loss = tape.scale(tape.sum(tape.stack(layer_losses)),
                                      1.0 / static_cast<double>(layer_losses.size()));
      }
    }
    return result;
  }

 private:
  void init_parameters(std::uint64_t seed) {
    static const std::set<std::string> kBiases = {
        "bilstm.fwd.b", "bilstm.bwd.b", "treelstm.b_in",
        "treelstm.b_f", "treelstm.b_out", "treelstm.b_cand"};
    Rng rng(seed);
    for (std::size_t i = 0; i < store_.count(); ++i) {
      auto& e = store_.entry(i);
      if (kBiases.count(e.name)) continue;  // biases set below
      int fan_in = e.tensor.shape.size() == 2 ? e.tensor.shape[1] : e.tensor.shape[0];
      double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
      for (double& v : e.tensor.value) v = rng.uniform(-bound, bound);
    }
    // biases: zero except forget gates at +1
    int H = cfg_.hidden_dim;
    for (Tensor* b : {bilstm_fwd_b_, bilstm_bwd_b_}) {
      b->fill(0.0);
      for (int i = H; i < 2 * H; ++i) b->value[static_cast<std::size_t>(i)] = 1.0;
    }
    tree_b_in_->fill(0.0);
    tree_b_out_->fill(0.0);
    tree_b_cand_->fill(0.0);
    tree_b_f_->fill(1.0);
  }

  ModelConfig cfg_;
  ParameterStore store_;
  Tensor* embeddings_ = nullptr;
  Tensor* bilstm_fwd_W_ = nullptr;
  Tensor* bilstm_fwd_b_ = nullptr;
  Tensor* bilstm_bwd_W_ = nullptr;
  Tensor* bilstm_bwd_b_ = nullptr;
  Tensor* tree_W_in_ = nullptr;
  Tensor* tree_W_fl_ = nullptr;
  Tensor* tree_W_fr_ = nullptr;
  Tensor* tree_W_out_ = nullptr;
  Tensor* tree_W_cand_ = nullptr;
  Tensor* tree_b_in_ = nullptr;
  Tensor* tree_b_f_ = nullptr;
  Tensor* tree_b_out_ = nullptr;
  Tensor* tree_b_cand_ = nullptr;
  Tensor* merge_query_ = nullptr;
  Tensor* role_query_ = nullptr;
  Tensor* att_single_ = nullptr;
  Tensor* att_pair_ = nullptr;
  Tensor* score_s2_ = nullptr;
  Tensor* score_s1_ = nullptr;
  Tensor* score_p2_ = nullptr;
  Tensor* score_p1_ = nullptr;
};

// Structure snapshot helpers used to replay a fixed tree and fixed roles.
inline std::vector<int> merge_positions(const RvGTree& tree) {
  std::vector<int> out;
  for (const MergeStep& s : tree.merge_log) out.push_back(s.position);
  return out;
}

inline std::vector<int> feature_child_sides(const RvGTree& tree,
                                            const GroundingTrace& trace) {
  std::vector<int> out;
  for (std::size_t i = 0; i < tree.nodes.size(); ++i) {
    if (tree.nodes[i].is_leaf()) continue;
    const NodeTraceEntry& e = trace.per_node[i];
    out.push_back(e.feature_child == tree.nodes[i].left ? 0 : 1);
  }
  return out;
}

}  // namespace rvg
