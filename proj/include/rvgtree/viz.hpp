#pragma once

#include <algorithm>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "rvgtree/grounding.hpp"
#include "rvgtree/treebuilder.hpp"

namespace rvg {

namespace detail {

inline std::string dot_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (c == '"' || c == '\\') out.push_back('\\');
    out.push_back(c);
  }
  return out;
}

inline void collect_leaf_tokens(const RvGTree& tree, int id,
                                const std::vector<std::string>& tokens,
                                std::vector<std::string>& out) {
  const TreeNode& n = tree.nodes[static_cast<std::size_t>(id)];
  if (n.is_leaf()) {
    out.push_back(tokens[static_cast<std::size_t>(n.token_index)]);
    return;
  }
  collect_leaf_tokens(tree, n.left, tokens, out);
  collect_leaf_tokens(tree, n.right, tokens, out);
}

}  // namespace detail

inline std::string span_text(const RvGTree& tree, int id,
                             const std::vector<std::string>& tokens) {
  std::vector<std::string> words;
  detail::collect_leaf_tokens(tree, id, tokens, words);
  std::string out;
  for (std::size_t i = 0; i < words.size(); ++i) out += (i ? " " : "") + words[i];
  return out;
}

// Role of a node as seen by its parent; the root always acts as a score node.
inline std::string node_role(const RvGTree& tree, const GroundingTrace& trace, int id) {
  if (id == tree.root) return tree.nodes[static_cast<std::size_t>(id)].is_leaf()
                                  ? "root-leaf"
                                  : "root-score";
  for (std::size_t p = 0; p < tree.nodes.size(); ++p) {
    const TreeNode& parent = tree.nodes[p];
    if (parent.is_leaf()) continue;
    if (parent.left == id || parent.right == id)
      return trace.per_node[p].feature_child == id ? "feature" : "score";
  }
  return "unknown";
}

// One graph node per tree node, labeled with span, role and the top-3 region
// scores; children edges in (left, right) order; deterministic ordering.
inline std::string tree_to_dot(const RvGTree& tree, const GroundingTrace& trace,
                               const std::vector<std::string>& tokens,
                               const std::string& graph_name = "rvgtree") {
  std::ostringstream out;
  out << "digraph " << graph_name << " {\n";
  for (std::size_t id = 0; id < tree.nodes.size(); ++id) {
    const NodeTraceEntry& entry = trace.per_node[id];
    const std::vector<double>& scores =
        entry.total_scores.empty() ? entry.single_scores : entry.total_scores;
    std::vector<std::pair<double, int>> ranked;
    for (std::size_t r = 0; r < scores.size(); ++r)
      ranked.emplace_back(scores[r], static_cast<int>(r));
    std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
      if (a.first != b.first) return a.first > b.first;
      return a.second < b.second;
    });
    std::string top;
    for (std::size_t r = 0; r < std::min<std::size_t>(3, ranked.size()); ++r) {
      char buf[48];
      std::snprintf(buf, sizeof(buf), "%sr%d:%.3f", r ? " " : "", ranked[r].second,
                    ranked[r].first);
      top += buf;
    }
    out << "  n" << id << " [label=\""
        << detail::dot_escape(span_text(tree, static_cast<int>(id), tokens)) << " | "
        << node_role(tree, trace, static_cast<int>(id)) << " | " << top << "\"];\n";
  }
  for (std::size_t id = 0; id < tree.nodes.size(); ++id) {
    const TreeNode& n = tree.nodes[id];
    if (n.is_leaf()) continue;
    out << "  n" << id << " -> n" << n.left << ";\n";
    out << "  n" << id << " -> n" << n.right << ";\n";
  }
  out << "}\n";
  return out.str();
}

// ---------------------------------------------------------------------------
// Minimal DOT reader for round-trip validation
// ---------------------------------------------------------------------------

struct DotGraph {
  std::string name;
  std::map<std::string, std::string> node_labels;
  std::vector<std::pair<std::string, std::string>> edges;
};

namespace detail {

struct DotLexer {
  const std::string& text;
  std::size_t pos = 0;

  void skip_ws() {
    while (pos < text.size() &&
           std::isspace(static_cast<unsigned char>(text[pos])))
      ++pos;
  }

  bool eof() {
    skip_ws();
    return pos >= text.size();
  }

  std::string next() {
    skip_ws();
    if (pos >= text.size()) throw DataError("dot: unexpected end of input");
    char c = text[pos];
    if (c == '{' || c == '}' || c == '[' || c == ']' || c == ';' || c == '=') {
      ++pos;
      return std::string(1, c);
    }
    if (c == '-') {
      if (pos + 1 < text.size() && text[pos + 1] == '>') {
        pos += 2;
        return "->";
      }
      throw DataError("dot: stray '-'");
    }
    if (c == '"') {
      ++pos;
      std::string s;
      while (pos < text.size() && text[pos] != '"') {
        if (text[pos] == '\\' && pos + 1 < text.size()) ++pos;
        s.push_back(text[pos++]);
      }
      if (pos >= text.size()) throw DataError("dot: unterminated string");
      ++pos;
      return "\"" + s;  // marker prefix distinguishes strings from ids
    }
    std::string s;
    while (pos < text.size() && (std::isalnum(static_cast<unsigned char>(text[pos])) ||
                                 text[pos] == '_')) {
      s.push_back(text[pos++]);
    }
    if (s.empty()) throw DataError(std::string("dot: unexpected character '") + c + "'");
    return s;
  }
};

}  // namespace detail

// Accepts the digraph subset this project emits: node statements with a label
// attribute and plain edge statements.
inline DotGraph parse_dot(const std::string& text) {
  detail::DotLexer lex{text};
  DotGraph g;
  if (lex.next() != "digraph") throw DataError("dot: expected 'digraph'");
  g.name = lex.next();
  if (lex.next() != "{") throw DataError("dot: expected '{'");
  while (true) {
    std::string tok = lex.next();
    if (tok == "}") break;
    std::string id = tok;
    std::string follow = lex.next();
    if (follow == "->") {
      std::string dst = lex.next();
      g.edges.emplace_back(id, dst);
      if (lex.next() != ";") throw DataError("dot: expected ';' after edge");
    } else if (follow == "[") {
      if (lex.next() != "label") throw DataError("dot: expected 'label'");
      if (lex.next() != "=") throw DataError("dot: expected '='");
      std::string label = lex.next();
      if (label.empty() || label[0] != '"')
        throw DataError("dot: label must be quoted");
      g.node_labels[id] = label.substr(1);
      if (lex.next() != "]") throw DataError("dot: expected ']'");
      if (lex.next() != ";") throw DataError("dot: expected ';' after node");
    } else {
      throw DataError("dot: expected '->' or '[' after identifier");
    }
  }
  if (!lex.eof()) throw DataError("dot: trailing content");
  return g;
}

// ---------------------------------------------------------------------------
// Node-role frequency report
// ---------------------------------------------------------------------------

// Every leaf word under a feature (score) child counts once per internal node
// that classified it.
class RoleFrequency {
 public:
  void accumulate(const RvGTree& tree, const GroundingTrace& trace,
                  const std::vector<std::string>& tokens) {
    for (std::size_t id = 0; id < tree.nodes.size(); ++id) {
      const TreeNode& n = tree.nodes[id];
      if (n.is_leaf()) continue;
      int feature_id = trace.per_node[id].feature_child;
      int score_id = feature_id == n.left ? n.right : n.left;
      std::vector<std::string> words;
      detail::collect_leaf_tokens(tree, feature_id, tokens, words);
      for (const auto& w : words) ++counts_[w].first;
      words.clear();
      detail::collect_leaf_tokens(tree, score_id, tokens, words);
      for (const auto& w : words) ++counts_[w].second;
    }
  }

  long long total() const {
    long long t = 0;
    for (const auto& [w, c] : counts_) t += c.first + c.second;
    return t;
  }

  std::string to_tsv() const {
    std::ostringstream out;
    out << "word\tfeature_count\tscore_count\n";
    for (const auto& [w, c] : counts_)
      out << w << "\t" << c.first << "\t" << c.second << "\n";
    return out.str();
  }

  const std::map<std::string, std::pair<long long, long long>>& counts() const {
    return counts_;
  }

 private:
  std::map<std::string, std::pair<long long, long long>> counts_;
};

}  // namespace rvg
