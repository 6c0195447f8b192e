#pragma once

#include <algorithm>
#include <cctype>
#include <map>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include "rvgtree/encoders.hpp"
#include "rvgtree/gumbel.hpp"
#include "rvgtree/tape.hpp"

namespace rvg {

// ---------------------------------------------------------------------------
// Sentence pruning
// ---------------------------------------------------------------------------

inline const std::set<std::string>& prune_stop_list() {
  static const std::set<std::string> kStop = {
      "a", "an", "another", "any", "both", "each", "either", "those", "that"};
  return kStop;
}

inline bool is_punctuation_token(const std::string& tok) {
  if (tok.empty()) return false;
  for (char ch : tok)
    if (!std::ispunct(static_cast<unsigned char>(ch))) return false;
  return true;
}

// Drops the determiner stop list and punctuation-only tokens, preserving the
// order of survivors.
inline std::vector<std::string> prune_sentence(const std::vector<std::string>& tokens) {
  std::vector<std::string> out;
  for (const std::string& t : tokens) {
    if (prune_stop_list().count(t)) continue;
    if (is_punctuation_token(t)) continue;
    out.push_back(t);
  }
  if (out.empty()) throw DataError("unparseable expression: no tokens after pruning");
  return out;
}

// ---------------------------------------------------------------------------
// Trees
// ---------------------------------------------------------------------------

struct TreeNode {
  int left = -1;
  int right = -1;
  int span_begin = 0;  // [begin, end) over the pruned token sequence
  int span_end = 0;
  int layer = 1;       // construction layer; leaves are layer 1
  int token_index = -1;
  NodeState state;

  bool is_leaf() const { return left < 0; }
};

struct MergeStep {
  int layer = 0;
  int position = 0;   // merged pair index within the layer
  Var logits;         // raw candidate validity scores
  Var distribution;   // softmax of logits (merge policy distribution)
};

// Binary tree over the pruned sentence. Nodes are stored children-before-
// parents: leaves 0..m-1 in token order, then internal nodes in merge order,
// so index order is a valid bottom-up evaluation order.
struct RvGTree {
  std::vector<TreeNode> nodes;
  int root = -1;
  std::vector<MergeStep> merge_log;

  int leaf_count() const {
    int n = 0;
    for (const TreeNode& t : nodes) n += t.is_leaf() ? 1 : 0;
    return n;
  }
  int internal_count() const { return static_cast<int>(nodes.size()) - leaf_count(); }
};

// Expert layout: same structure, no states. Nodes children-before-parents.
struct ExpertTree {
  struct Node {
    int left = -1;
    int right = -1;
    std::string token;  // leaves only
    bool is_leaf() const { return left < 0; }
  };
  std::vector<Node> nodes;
  int root = -1;

  void leaf_tokens_rec(int id, std::vector<std::string>& out) const {
    const Node& n = nodes[static_cast<std::size_t>(id)];
    if (n.is_leaf()) {
      out.push_back(n.token);
      return;
    }
    leaf_tokens_rec(n.left, out);
    leaf_tokens_rec(n.right, out);
  }

  std::vector<std::string> leaf_tokens() const {
    std::vector<std::string> out;
    if (root >= 0) leaf_tokens_rec(root, out);
    return out;
  }

  int leaf_count() const {
    int n = 0;
    for (const Node& t : nodes) n += t.is_leaf() ? 1 : 0;
    return n;
  }
};

// ---------------------------------------------------------------------------
// Merge policy
// ---------------------------------------------------------------------------

struct MergeCandidates {
  std::vector<NodeState> states;  // candidate parent for each adjacent pair
  Var logits;                     // {k-1}
  Var distribution;               // softmax(logits)
};

// Materializes every adjacent-pair candidate parent via the TreeLSTM and
// scores it with the merge query vector.
inline MergeCandidates candidate_scores(Tape& tape, const std::vector<NodeState>& layer,
                                        Var merge_query, const TreeLstmVars& tree_params) {
  if (layer.size() < 2) throw DataError("candidate_scores: need at least two nodes");
  MergeCandidates out;
  std::vector<Var> scores;
  for (std::size_t j = 0; j + 1 < layer.size(); ++j) {
    NodeState cand = treelstm_merge(tape, layer[j], layer[j + 1], tree_params);
    scores.push_back(tape.dot(merge_query, cand.v));
    out.states.push_back(cand);
  }
  out.logits = tape.stack(scores);
  out.distribution = tape.softmax(out.logits);
  return out;
}

enum class TreeMode { Train, Eval, Expert };

struct MergeChoice {
  int position = -1;
  Var st_weights;  // straight-through one-hot over candidates (Train mode only)
};

// Train: straight-through Gumbel sample over the candidate logits.
// Eval: plain argmax, lowest index on ties, no noise.
// Expert: forced to `expert_target`; the policy distribution stays available
// for the supervision loss.
inline MergeChoice select_merge(Tape& tape, const MergeCandidates& candidates,
                                TreeMode mode, GumbelSampler& sampler,
                                int expert_target = -1) {
  MergeChoice choice;
  int k = tape.numel(candidates.logits);
  switch (mode) {
    case TreeMode::Train: {
      GumbelSample gs = gumbel_st_sample(tape, sampler, candidates.logits);
      choice.position = gs.index;
      choice.st_weights = gs.onehot;
      break;
    }
    case TreeMode::Eval: {
      choice.position = argmax_index(tape.value(candidates.distribution));
      break;
    }
    case TreeMode::Expert: {
      if (expert_target < 0 || expert_target >= k)
        throw DataError("select_merge: expert target out of range");
      choice.position = expert_target;
      break;
    }
  }
  return choice;
}

namespace detail {

// Walks an expert tree alongside bottom-up construction: at every layer the
// forced merge is the leftmost adjacent pair that forms a complete expert
// node (both children already built). For a valid binary tree over the leaf
// sequence such a pair always exists.
class ExpertWalker {
 public:
  explicit ExpertWalker(const ExpertTree& tree) : tree_(&tree) {
    parent_.assign(tree.nodes.size(), -1);
    for (std::size_t i = 0; i < tree.nodes.size(); ++i) {
      const auto& n = tree.nodes[i];
      if (!n.is_leaf()) {
        parent_[static_cast<std::size_t>(n.left)] = static_cast<int>(i);
        parent_[static_cast<std::size_t>(n.right)] = static_cast<int>(i);
      }
    }
    current_ = in_order_leaves();
  }

  int next_position() {
    for (std::size_t j = 0; j + 1 < current_.size(); ++j) {
      int p1 = parent_[static_cast<std::size_t>(current_[j])];
      int p2 = parent_[static_cast<std::size_t>(current_[j + 1])];
      if (p1 >= 0 && p1 == p2 &&
          tree_->nodes[static_cast<std::size_t>(p1)].left == current_[j] &&
          tree_->nodes[static_cast<std::size_t>(p1)].right == current_[j + 1]) {
        pending_ = static_cast<int>(j);
        return pending_;
      }
    }
    throw DataError("expert tree walk: no mergeable adjacent pair (malformed tree)");
  }

  void commit() {
    int j = pending_;
    int parent = parent_[static_cast<std::size_t>(current_[static_cast<std::size_t>(j)])];
    current_[static_cast<std::size_t>(j)] = parent;
    current_.erase(current_.begin() + j + 1);
  }

 private:
  std::vector<int> in_order_leaves() const {
    std::vector<int> out;
    in_order(tree_->root, out);
    return out;
  }
  void in_order(int id, std::vector<int>& out) const {
    const auto& n = tree_->nodes[static_cast<std::size_t>(id)];
    if (n.is_leaf()) {
      out.push_back(id);
      return;
    }
    in_order(n.left, out);
    in_order(n.right, out);
  }

  const ExpertTree* tree_;
  std::vector<int> parent_;
  std::vector<int> current_;
  int pending_ = -1;
};

}  // namespace detail

// Bottom-up construction: score adjacent pairs, select one merge, carry the
// other states unchanged into the next layer, repeat until a single root
// remains. In Train mode the parent state is the straight-through mixture of
// candidates, which forwards exactly the selected candidate while letting
// gradients reach every candidate through the soft path.
inline RvGTree build_tree(Tape& tape, const std::vector<NodeState>& leaf_states,
                          Var merge_query, const TreeLstmVars& tree_params,
                          TreeMode mode, GumbelSampler& sampler,
                          const ExpertTree* expert = nullptr,
                          const std::vector<int>* forced_positions = nullptr) {
  if (leaf_states.empty()) throw DataError("build_tree: no leaves");
  RvGTree tree;
  int m = static_cast<int>(leaf_states.size());
  for (int i = 0; i < m; ++i) {
    TreeNode leaf;
    leaf.span_begin = i;
    leaf.span_end = i + 1;
    leaf.layer = 1;
    leaf.token_index = i;
    leaf.state = leaf_states[static_cast<std::size_t>(i)];
    tree.nodes.push_back(leaf);
  }
  std::vector<int> current(static_cast<std::size_t>(m));
  for (int i = 0; i < m; ++i) current[static_cast<std::size_t>(i)] = i;

  if (mode == TreeMode::Expert && !expert && !forced_positions)
    throw DataError("build_tree: expert mode requires an expert tree or positions");
  std::unique_ptr<detail::ExpertWalker> walker;
  if (mode == TreeMode::Expert && !forced_positions) {
    if (expert->leaf_count() != m)
      throw DataError("build_tree: expert tree leaf count mismatch");
    walker = std::make_unique<detail::ExpertWalker>(*expert);
  }
  if (forced_positions && static_cast<int>(forced_positions->size()) != m - 1)
    throw DataError("build_tree: forced position count mismatch");

  int layer = 1;
  while (current.size() > 1) {
    std::vector<NodeState> layer_states;
    layer_states.reserve(current.size());
    for (int id : current) layer_states.push_back(tree.nodes[static_cast<std::size_t>(id)].state);

    MergeCandidates cands = candidate_scores(tape, layer_states, merge_query, tree_params);
    int expert_target = -1;
    if (mode == TreeMode::Expert)
      expert_target = forced_positions
                          ? (*forced_positions)[static_cast<std::size_t>(layer - 1)]
                          : walker->next_position();
    MergeChoice choice = select_merge(tape, cands, mode, sampler, expert_target);
    int pos = choice.position;

    NodeState parent_state;
    if (mode == TreeMode::Train) {
      std::vector<Var> hs, cs;
      for (const NodeState& s : cands.states) {
        hs.push_back(s.h);
        cs.push_back(s.c);
      }
      Var h = tape.convex_combine(choice.st_weights, hs);
      Var c = tape.convex_combine(choice.st_weights, cs);
      parent_state = make_node_state(tape, h, c);
    } else {
      parent_state = cands.states[static_cast<std::size_t>(pos)];
    }

    int left_id = current[static_cast<std::size_t>(pos)];
    int right_id = current[static_cast<std::size_t>(pos) + 1];
    TreeNode parent;
    parent.left = left_id;
    parent.right = right_id;
    parent.span_begin = tree.nodes[static_cast<std::size_t>(left_id)].span_begin;
    parent.span_end = tree.nodes[static_cast<std::size_t>(right_id)].span_end;
    parent.layer = layer + 1;
    parent.state = parent_state;
    tree.nodes.push_back(parent);
    int parent_id = static_cast<int>(tree.nodes.size()) - 1;

    tree.merge_log.push_back(MergeStep{layer, pos, cands.logits, cands.distribution});
    current[static_cast<std::size_t>(pos)] = parent_id;
    current.erase(current.begin() + pos + 1);
    if (walker) walker->commit();
    ++layer;
  }
  tree.root = current[0];
  return tree;
}

// ---------------------------------------------------------------------------
// Constituency binarization
// ---------------------------------------------------------------------------

// Multi-branch constituency tree; a leaf carries a token and no children.
struct MultiNode {
  std::string token;
  std::vector<MultiNode> children;
  bool is_leaf() const { return children.empty(); }
};

namespace detail {

inline int binarize_rec(const MultiNode& node, ExpertTree& out) {
  if (node.is_leaf()) {
    out.nodes.push_back(ExpertTree::Node{-1, -1, node.token});
    return static_cast<int>(out.nodes.size()) - 1;
  }
  std::vector<int> level;
  for (const MultiNode& child : node.children)
    level.push_back(binarize_rec(child, out));
  // Pair consecutive sub-trees left to right; an odd rightmost one stands
  // alone and is carried up unchanged. Repeat until a single tree remains.
  while (level.size() > 1) {
    std::vector<int> next;
    for (std::size_t j = 0; j + 1 < level.size(); j += 2) {
      out.nodes.push_back(ExpertTree::Node{level[j], level[j + 1], ""});
      next.push_back(static_cast<int>(out.nodes.size()) - 1);
    }
    if (level.size() % 2 == 1) next.push_back(level.back());
    level = std::move(next);
  }
  return level[0];
}

}  // namespace detail

inline ExpertTree binarize_constituency(const MultiNode& root) {
  if (root.is_leaf() && root.token.empty())
    throw DataError("binarize_constituency: empty tree");
  ExpertTree out;
  out.root = detail::binarize_rec(root, out);
  return out;
}

// ---------------------------------------------------------------------------
// Bracketed s-expression I/O
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<std::string> sexpr_tokens(const std::string& text) {
  std::vector<std::string> toks;
  std::string cur;
  for (char ch : text) {
    if (ch == '(' || ch == ')') {
      if (!cur.empty()) {
        toks.push_back(cur);
        cur.clear();
      }
      toks.push_back(std::string(1, ch));
    } else if (std::isspace(static_cast<unsigned char>(ch))) {
      if (!cur.empty()) {
        toks.push_back(cur);
        cur.clear();
      }
    } else {
      cur.push_back(ch);
    }
  }
  if (!cur.empty()) toks.push_back(cur);
  return toks;
}

inline int parse_binary_rec(const std::vector<std::string>& toks, std::size_t& pos,
                            ExpertTree& out) {
  if (pos >= toks.size()) throw DataError("unexpected end of tree expression");
  if (toks[pos] == ")") throw DataError("unexpected ')'");
  if (toks[pos] != "(") {
    out.nodes.push_back(ExpertTree::Node{-1, -1, toks[pos]});
    ++pos;
    return static_cast<int>(out.nodes.size()) - 1;
  }
  ++pos;  // consume '('
  int left = parse_binary_rec(toks, pos, out);
  if (pos >= toks.size() || toks[pos] == ")")
    throw DataError("binary tree node needs exactly two children");
  int right = parse_binary_rec(toks, pos, out);
  if (pos >= toks.size() || toks[pos] != ")")
    throw DataError("binary tree node needs exactly two children (missing ')')");
  ++pos;  // consume ')'
  out.nodes.push_back(ExpertTree::Node{left, right, ""});
  return static_cast<int>(out.nodes.size()) - 1;
}

inline MultiNode parse_multi_rec(const std::vector<std::string>& toks, std::size_t& pos) {
  if (pos >= toks.size()) throw DataError("unexpected end of tree expression");
  if (toks[pos] == ")") throw DataError("unexpected ')'");
  if (toks[pos] != "(") {
    MultiNode leaf;
    leaf.token = toks[pos];
    ++pos;
    return leaf;
  }
  ++pos;
  MultiNode node;
  while (pos < toks.size() && toks[pos] != ")")
    node.children.push_back(parse_multi_rec(toks, pos));
  if (pos >= toks.size()) throw DataError("missing ')'");
  ++pos;
  if (node.children.empty()) throw DataError("empty '()' group");
  if (node.children.size() == 1) return node.children[0];  // collapse unary
  return node;
}

}  // namespace detail

inline ExpertTree parse_binary_sexpr(const std::string& text) {
  auto toks = detail::sexpr_tokens(text);
  if (toks.empty()) throw DataError("empty tree expression");
  std::size_t pos = 0;
  ExpertTree out;
  out.root = detail::parse_binary_rec(toks, pos, out);
  if (pos != toks.size()) throw DataError("trailing tokens after tree expression");
  return out;
}

inline MultiNode parse_multi_sexpr(const std::string& text) {
  auto toks = detail::sexpr_tokens(text);
  if (toks.empty()) throw DataError("empty tree expression");
  std::size_t pos = 0;
  MultiNode out = detail::parse_multi_rec(toks, pos);
  if (pos != toks.size()) throw DataError("trailing tokens after tree expression");
  return out;
}

inline void write_sexpr_rec(const ExpertTree& tree, int id, std::string& out) {
  const auto& n = tree.nodes[static_cast<std::size_t>(id)];
  if (n.is_leaf()) {
    out += n.token;
    return;
  }
  out += "(";
  write_sexpr_rec(tree, n.left, out);
  out += " ";
  write_sexpr_rec(tree, n.right, out);
  out += ")";
}

inline std::string to_sexpr(const ExpertTree& tree) {
  std::string out;
  if (tree.root >= 0) write_sexpr_rec(tree, tree.root, out);
  return out;
}

// Expert-tree file: one record per line, `<expression-id>\t<bracketed-tree>`.
inline std::map<std::string, ExpertTree> load_expert_trees(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open expert-tree file: " + path);
  std::map<std::string, ExpertTree> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    auto tab = line.find('\t');
    if (tab == std::string::npos)
      throw DataError(path + ":" + std::to_string(lineno) + ": expected <id>\\t<tree>");
    std::string id = line.substr(0, tab);
    try {
      ExpertTree tree = parse_binary_sexpr(line.substr(tab + 1));
      if (out.count(id))
        throw DataError("duplicate expression id: " + id);
      out.emplace(std::move(id), std::move(tree));
    } catch (const DataError& e) {
      throw DataError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

// Leaves must equal the pruned token sequence exactly (order included).
inline void validate_expert_tree(const ExpertTree& tree,
                                 const std::vector<std::string>& pruned_tokens,
                                 const std::string& context = "") {
  std::vector<std::string> leaves = tree.leaf_tokens();
  if (leaves != pruned_tokens) {
    std::string got, want;
    for (const auto& t : leaves) got += (got.empty() ? "" : " ") + t;
    for (const auto& t : pruned_tokens) want += (want.empty() ? "" : " ") + t;
    throw DataError((context.empty() ? "" : context + ": ") +
                    "expert tree leaves [" + got +
                    "] do not match pruned expression [" + want + "]");
  }
}

}  // namespace rvg
