#pragma once

#include <array>
#include <string>
#include <vector>

#include "rvgtree/gumbel.hpp"
#include "rvgtree/tape.hpp"
#include "rvgtree/treebuilder.hpp"

namespace rvg {

// One visual object: a fixed-length feature vector plus an optional pixel box.
struct Region {
  std::vector<double> feature;
  bool has_box = false;
  std::array<double, 4> box{};  // x1, y1, x2, y2
};

inline double box_area(const std::array<double, 4>& b) {
  return (b[2] - b[0]) * (b[3] - b[1]);
}

inline double iou(const std::array<double, 4>& a, const std::array<double, 4>& b) {
  if (a[2] <= a[0] || a[3] <= a[1] || b[2] <= b[0] || b[3] <= b[1])
    throw DataError("iou: degenerate box");
  double ix = std::max(0.0, std::min(a[2], b[2]) - std::max(a[0], b[0]));
  double iy = std::max(0.0, std::min(a[3], b[3]) - std::max(a[1], b[1]));
  double inter = ix * iy;
  double uni = box_area(a) + box_area(b) - inter;
  return inter / uni;
}

// ---------------------------------------------------------------------------
// Node-role classification
// ---------------------------------------------------------------------------

enum class RoleMode { Sample, Argmax, Forced };

struct RoleDecision {
  int feature_child = 0;  // 0 = left child is the feature node, 1 = right
  Var probs;              // {2}: [p(left is feature), p(right is feature)]
  Var st_weights;         // straight-through one-hot (Sample mode only)
};

// Binary softmax over the children states decides which child returns a
// feature and which returns a score. Sampled with straight-through Gumbel in
// training, argmax at evaluation (ties pick the left child).
inline RoleDecision classify_children(Tape& tape, const NodeState& left,
                                      const NodeState& right, Var role_query,
                                      RoleMode mode, GumbelSampler& sampler,
                                      int forced = -1) {
  Var logits = tape.stack({tape.dot(role_query, left.v), tape.dot(role_query, right.v)});
  RoleDecision out;
  out.probs = tape.softmax(logits);
  switch (mode) {
    case RoleMode::Sample: {
      GumbelSample gs = gumbel_st_sample(tape, sampler, logits);
      out.feature_child = gs.index;
      out.st_weights = gs.onehot;
      break;
    }
    case RoleMode::Argmax:
      out.feature_child = argmax_index(tape.value(out.probs));
      break;
    case RoleMode::Forced:
      if (forced != 0 && forced != 1)
        throw DataError("classify_children: forced role out of range");
      out.feature_child = forced;
      break;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Language features
// ---------------------------------------------------------------------------

struct LanguageFeatures {
  Var y_single;      // attention-pooled word embedding for the single-region head
  Var y_pair;        // attention-pooled word embedding for the pairwise head
  Var alpha_single;  // attention weights over the span
  Var alpha_pair;
};

// Word-level attention over exactly the leaves spanned by a node, keyed by
// the leaf BiLSTM states and pooled over the word embeddings.
inline LanguageFeatures language_features(Tape& tape, int span_begin, int span_end,
                                          const std::vector<NodeState>& leaf_states,
                                          const std::vector<Var>& word_embeddings,
                                          Var att_single, Var att_pair) {
  if (span_begin >= span_end) throw DataError("language_features: empty span");
  std::vector<Var> ks, kp, words;
  for (int i = span_begin; i < span_end; ++i) {
    ks.push_back(tape.dot(att_single, leaf_states[static_cast<std::size_t>(i)].v));
    kp.push_back(tape.dot(att_pair, leaf_states[static_cast<std::size_t>(i)].v));
    words.push_back(word_embeddings[static_cast<std::size_t>(i)]);
  }
  LanguageFeatures out;
  out.alpha_single = tape.softmax(tape.stack(ks));
  out.alpha_pair = tape.softmax(tape.stack(kp));
  out.y_single = tape.convex_combine(out.alpha_single, words);
  out.y_pair = tape.convex_combine(out.alpha_pair, words);
  return out;
}

// ---------------------------------------------------------------------------
// Score heads
// ---------------------------------------------------------------------------

struct GroundingVars {
  Var role_query;            // {4H}
  Var att_single, att_pair;  // {4H}
  Var score_s2;              // {b, d}
  Var score_s1;              // {b}
  Var score_p2;              // {b, 2d}
  Var score_p1;              // {b}
};

inline Var score_single(Tape& tape, Var region_feature, Var y_single,
                        const GroundingVars& vars) {
  Var proj = tape.mul(tape.matvec(vars.score_s2, region_feature), y_single);
  return tape.dot(vars.score_s1, tape.l2_normalize(proj));
}

inline Var score_pair(Tape& tape, Var region_feature, Var context_feature, Var y_pair,
                      const GroundingVars& vars) {
  Var both = tape.concat(region_feature, context_feature);
  Var proj = tape.mul(tape.matvec(vars.score_p2, both), y_pair);
  return tape.dot(vars.score_p1, tape.l2_normalize(proj));
}

// Score-weighted pooling of region features; the result lies in their convex hull.
inline Var aggregate_feature(Tape& tape, Var scores, const std::vector<Var>& region_vars) {
  if (region_vars.empty()) throw DataError("aggregate_feature: no regions");
  if (tape.numel(scores) != static_cast<int>(region_vars.size()))
    throw DataError("aggregate_feature: score/region count mismatch");
  return tape.convex_combine(tape.softmax(scores), region_vars);
}

// ---------------------------------------------------------------------------
// Recursive grounding
// ---------------------------------------------------------------------------

struct GroundingOptions {
  bool use_in_node = true;        // keep the per-node single+pair terms
  bool use_pair = true;           // keep the pairwise context term
  bool use_accumulation = true;   // keep the accumulated child score
  RoleMode role_mode = RoleMode::Argmax;
  // Forced feature-child index (0/1) per internal node in construction
  // order; only read in RoleMode::Forced.
  const std::vector<int>* forced_feature_child = nullptr;
};

struct NodeTraceEntry {
  bool is_internal = false;
  int feature_child = -1;              // tree node id (internal nodes)
  std::vector<double> single_scores;   // per region, when evaluated
  std::vector<double> pair_scores;
  std::vector<double> total_scores;    // accumulated score vector at this node
  std::vector<double> context_feature; // x_lv consumed by this node's pair term
};

struct GroundingTrace {
  std::vector<NodeTraceEntry> per_node;  // indexed by tree node id
  int single_head_evals = 0;             // in-node families at internal nodes
  int pair_head_evals = 0;
  int leaf_single_evals = 0;             // degenerate leaf families
};

struct GroundingResult {
  Var root_scores;  // {n}
  GroundingTrace trace;
};

// Bottom-up evaluation over a constructed tree. At every internal node the
// children are classified into a feature node and a score node; the node
// score is the in-node single + pairwise terms plus the score child's
// accumulated vector; leaves contribute a zero vector to the accumulation.
// A leaf consumed as feature child (and a single-leaf root) falls back to its
// own single-head scores with the word embedding as language feature.
inline GroundingResult recursive_ground(Tape& tape, const RvGTree& tree,
                                        const std::vector<Var>& region_vars,
                                        const std::vector<Var>& word_embeddings,
                                        const GroundingVars& vars,
                                        GumbelSampler& sampler,
                                        const GroundingOptions& opts) {
  if (region_vars.empty()) throw DataError("recursive_ground: no regions");
  int n_nodes = static_cast<int>(tree.nodes.size());
  int n_regions = static_cast<int>(region_vars.size());

  std::vector<NodeState> leaf_states;
  for (const TreeNode& node : tree.nodes)
    if (node.is_leaf()) leaf_states.push_back(node.state);

  GroundingResult result;
  result.trace.per_node.resize(static_cast<std::size_t>(n_nodes));

  std::vector<Var> scores(static_cast<std::size_t>(n_nodes));      // accumulated S per node
  std::vector<Var> features(static_cast<std::size_t>(n_nodes));    // aggregated context per node
  std::vector<Var> leaf_singles(static_cast<std::size_t>(n_nodes));

  Var zero_scores = tape.constant(std::vector<double>(static_cast<std::size_t>(n_regions), 0.0));

  auto leaf_single_scores = [&](int id) -> Var {
    if (leaf_singles[static_cast<std::size_t>(id)].valid())
      return leaf_singles[static_cast<std::size_t>(id)];
    const TreeNode& leaf = tree.nodes[static_cast<std::size_t>(id)];
    Var emb = word_embeddings[static_cast<std::size_t>(leaf.token_index)];
    std::vector<Var> per_region;
    for (Var x : region_vars) per_region.push_back(score_single(tape, x, emb, vars));
    Var stacked = tape.stack(per_region);
    leaf_singles[static_cast<std::size_t>(id)] = stacked;
    ++result.trace.leaf_single_evals;
    result.trace.per_node[static_cast<std::size_t>(id)].single_scores = tape.value(stacked);
    return stacked;
  };

  auto node_feature = [&](int id) -> Var {
    if (features[static_cast<std::size_t>(id)].valid())
      return features[static_cast<std::size_t>(id)];
    // only leaves are lazy; internal features are filled in the main loop
    Var feat = aggregate_feature(tape, leaf_single_scores(id), region_vars);
    features[static_cast<std::size_t>(id)] = feat;
    return feat;
  };

  int internal_index = 0;
  for (int id = 0; id < n_nodes; ++id) {
    const TreeNode& node = tree.nodes[static_cast<std::size_t>(id)];
    NodeTraceEntry& entry = result.trace.per_node[static_cast<std::size_t>(id)];
    if (node.is_leaf()) {
      scores[static_cast<std::size_t>(id)] = zero_scores;  // recursion exit
      entry.total_scores.assign(static_cast<std::size_t>(n_regions), 0.0);
      continue;
    }
    entry.is_internal = true;
    int c1 = node.left, c2 = node.right;

    int forced = -1;
    if (opts.role_mode == RoleMode::Forced) {
      if (!opts.forced_feature_child ||
          internal_index >= static_cast<int>(opts.forced_feature_child->size()))
        throw DataError("recursive_ground: missing forced role assignment");
      forced = (*opts.forced_feature_child)[static_cast<std::size_t>(internal_index)];
    }
    RoleDecision role = classify_children(
        tape, tree.nodes[static_cast<std::size_t>(c1)].state,
        tree.nodes[static_cast<std::size_t>(c2)].state, vars.role_query,
        opts.role_mode, sampler, forced);
    ++internal_index;
    int feature_id = role.feature_child == 0 ? c1 : c2;
    int score_id = role.feature_child == 0 ? c2 : c1;
    entry.feature_child = feature_id;

    bool need_context = opts.use_in_node && opts.use_pair;
    Var context;
    if (need_context) {
      if (opts.role_mode == RoleMode::Sample) {
        context = tape.convex_combine(role.st_weights,
                                      {node_feature(c1), node_feature(c2)});
      } else {
        context = node_feature(feature_id);
      }
      entry.context_feature = tape.value(context);
    }

    Var accumulated;
    if (opts.use_accumulation) {
      if (opts.role_mode == RoleMode::Sample) {
        // weight 0 = P(left is feature) -> accumulate the right child's score
        accumulated = tape.convex_combine(
            role.st_weights,
            {scores[static_cast<std::size_t>(c2)], scores[static_cast<std::size_t>(c1)]});
      } else {
        accumulated = scores[static_cast<std::size_t>(score_id)];
      }
    }

    Var total;
    if (opts.use_in_node) {
      LanguageFeatures lang = language_features(tape, node.span_begin, node.span_end,
                                                leaf_states, word_embeddings,
                                                vars.att_single, vars.att_pair);
      std::vector<Var> singles;
      for (Var x : region_vars) singles.push_back(score_single(tape, x, lang.y_single, vars));
      Var single_vec = tape.stack(singles);
      ++result.trace.single_head_evals;
      entry.single_scores = tape.value(single_vec);
      total = single_vec;
      if (opts.use_pair) {
        std::vector<Var> pairs;
        for (Var x : region_vars)
          pairs.push_back(score_pair(tape, x, context, lang.y_pair, vars));
        Var pair_vec = tape.stack(pairs);
        ++result.trace.pair_head_evals;
        entry.pair_scores = tape.value(pair_vec);
        total = tape.add(total, pair_vec);
      }
      if (opts.use_accumulation) total = tape.add(total, accumulated);
    } else if (opts.use_accumulation) {
      total = accumulated;
    } else {
      total = zero_scores;
    }

    scores[static_cast<std::size_t>(id)] = total;
    features[static_cast<std::size_t>(id)] = aggregate_feature(tape, total, region_vars);
    entry.total_scores = tape.value(total);
  }

  int root = tree.root;
  if (tree.nodes[static_cast<std::size_t>(root)].is_leaf()) {
    // single-token expression: the root score is the in-node single score only
    result.root_scores = leaf_single_scores(root);
    result.trace.per_node[static_cast<std::size_t>(root)].total_scores =
        tape.value(result.root_scores);
  } else {
    result.root_scores = scores[static_cast<std::size_t>(root)];
  }
  return result;
}

}  // namespace rvg
