#include <catch2/catch_amalgamated.hpp>

#include <fstream>
#include <set>

#include "rvgtree/model.hpp"
#include "rvgtree/treebuilder.hpp"
#include "support/test_util.hpp"

using namespace rvg;

namespace {

// structural invariants shared by several tests
void check_tree_invariants(const RvGTree& tree, int m) {
  REQUIRE(tree.leaf_count() == m);
  REQUIRE(tree.internal_count() == (m > 0 ? m - 1 : 0));
  REQUIRE(static_cast<int>(tree.merge_log.size()) == m - 1);
  for (int i = 0; i < m; ++i) {
    const TreeNode& leaf = tree.nodes[static_cast<std::size_t>(i)];
    REQUIRE(leaf.is_leaf());
    REQUIRE(leaf.token_index == i);
    REQUIRE(leaf.span_begin == i);
    REQUIRE(leaf.span_end == i + 1);
  }
  for (std::size_t id = static_cast<std::size_t>(m); id < tree.nodes.size(); ++id) {
    const TreeNode& n = tree.nodes[id];
    REQUIRE_FALSE(n.is_leaf());
    REQUIRE(n.left < static_cast<int>(id));
    REQUIRE(n.right < static_cast<int>(id));
    const TreeNode& l = tree.nodes[static_cast<std::size_t>(n.left)];
    const TreeNode& r = tree.nodes[static_cast<std::size_t>(n.right)];
    // contiguous span concatenation
    REQUIRE(l.span_end == r.span_begin);
    REQUIRE(n.span_begin == l.span_begin);
    REQUIRE(n.span_end == r.span_end);
  }
  const TreeNode& root = tree.nodes[static_cast<std::size_t>(tree.root)];
  REQUIRE(root.span_begin == 0);
  REQUIRE(root.span_end == m);
}

struct BuilderHarness {
  Model model;
  BuilderHarness(int vocab, std::uint64_t seed)
      : model([&] {
          ModelConfig mc;
          mc.vocab_size = vocab;
          mc.embed_dim = 5;
          mc.hidden_dim = 3;
          mc.feature_dim = 4;
          return mc;
        }(), seed) {}

  Model::ForwardResult build(Tape& tape, int m, TreeMode mode, GumbelSampler& sampler,
                             const ExpertTree* expert = nullptr) {
    Rng rng(m * 31 + 7);
    SentenceTokens toks = testutil::random_tokens(rng, m, model.config().vocab_size);
    auto regions = testutil::random_regions(rng, 3, model.config().feature_dim);
    Model::ForwardOptions opts;
    opts.tree_mode = mode;
    opts.role_mode = RoleMode::Argmax;
    opts.expert = expert;
    return model.forward(tape, toks, regions, opts, sampler);
  }
};

ExpertTree random_binary_tree(Rng& rng, const std::vector<std::string>& tokens) {
  // grow bottom-up with random adjacent merges
  ExpertTree tree;
  std::vector<int> layer;
  for (const std::string& t : tokens) {
    tree.nodes.push_back(ExpertTree::Node{-1, -1, t});
    layer.push_back(static_cast<int>(tree.nodes.size()) - 1);
  }
  while (layer.size() > 1) {
    int j = rng.uniform_int(static_cast<int>(layer.size()) - 1);
    tree.nodes.push_back(ExpertTree::Node{layer[static_cast<std::size_t>(j)],
                                          layer[static_cast<std::size_t>(j) + 1], ""});
    layer[static_cast<std::size_t>(j)] = static_cast<int>(tree.nodes.size()) - 1;
    layer.erase(layer.begin() + j + 1);
  }
  tree.root = layer.empty() ? -1 : layer[0];
  return tree;
}

}  // namespace

TEST_CASE("pruning removes the stop list and punctuation in order") {
  REQUIRE(prune_sentence({"a", "black", "dog"}) ==
          std::vector<std::string>{"black", "dog"});
  REQUIRE(prune_sentence({"that", "is", "red"}) ==
          std::vector<std::string>{"is", "red"});
  REQUIRE(prune_sentence({"black", "dog"}) ==
          std::vector<std::string>{"black", "dog"});
  REQUIRE(prune_sentence({"dog", ",", "on", "sofa", "."}) ==
          std::vector<std::string>{"dog", "on", "sofa"});
  // the stop list verbatim
  for (const std::string w :
       {"a", "an", "another", "any", "both", "each", "either", "those", "that"})
    REQUIRE(prune_sentence({w, "dog"}) == std::vector<std::string>{"dog"});
  // "the" is not on the list
  REQUIRE(prune_sentence({"the", "dog"}) == std::vector<std::string>{"the", "dog"});
  REQUIRE_THROWS_WITH(prune_sentence({"a", "."}),
                      Catch::Matchers::ContainsSubstring("unparseable expression"));
}

TEST_CASE("candidate scores form a distribution over adjacent pairs") {
  BuilderHarness h(12, 3);
  Tape tape;
  GumbelSampler sampler(1.0, false, 0);
  auto fwd = h.build(tape, 5, TreeMode::Eval, sampler);
  const MergeStep& first = fwd.tree.merge_log[0];
  const auto& dist = tape.value(first.distribution);
  REQUIRE(dist.size() == 4);  // k=5 nodes -> 4 candidates
  double sum = 0;
  for (double p : dist) sum += p;
  REQUIRE(sum == Catch::Approx(1.0).margin(1e-12));
}

TEST_CASE("identical candidates and zero query give uniform distributions") {
  BuilderHarness h(12, 4);
  h.model.store().get("merge.query").fill(0.0);
  Tape tape;
  GumbelSampler sampler(1.0, false, 0);
  auto fwd = h.build(tape, 4, TreeMode::Eval, sampler);
  for (const MergeStep& step : fwd.tree.merge_log)
    for (double p : tape.value(step.distribution))
      REQUIRE(p == Catch::Approx(1.0 / tape.value(step.distribution).size())
                       .margin(1e-12));
}

TEST_CASE("two identical candidate parents split the probability") {
  // layer of three identical states -> both candidate parents identical
  ModelConfig mc;
  mc.vocab_size = 8;
  mc.embed_dim = 4;
  mc.hidden_dim = 2;
  mc.feature_dim = 3;
  Model model(mc, 5);
  Tape tape;
  Rng rng(9);
  std::vector<double> h(4), c(4);
  for (double& x : h) x = rng.uniform(-1, 1);
  for (double& x : c) x = rng.uniform(-1, 1);
  std::vector<NodeState> layer;
  for (int i = 0; i < 3; ++i)
    layer.push_back(make_node_state(tape, tape.constant(h), tape.constant(c)));

  TreeLstmVars tv;
  tv.W_in = tape.leaf(model.store().get("treelstm.W_in"));
  tv.W_fl = tape.leaf(model.store().get("treelstm.W_fl"));
  tv.W_fr = tape.leaf(model.store().get("treelstm.W_fr"));
  tv.W_out = tape.leaf(model.store().get("treelstm.W_out"));
  tv.W_cand = tape.leaf(model.store().get("treelstm.W_cand"));
  tv.b_in = tape.leaf(model.store().get("treelstm.b_in"));
  tv.b_f = tape.leaf(model.store().get("treelstm.b_f"));
  tv.b_out = tape.leaf(model.store().get("treelstm.b_out"));
  tv.b_cand = tape.leaf(model.store().get("treelstm.b_cand"));
  tv.hidden = 4;
  MergeCandidates cands =
      candidate_scores(tape, layer, tape.leaf(model.store().get("merge.query")), tv);
  const auto& dist = tape.value(cands.distribution);
  REQUIRE(dist[0] == 0.5);
  REQUIRE(dist[1] == 0.5);
  REQUIRE_THROWS_AS(candidate_scores(tape, {layer[0]},
                                     tape.leaf(model.store().get("merge.query")), tv),
                    DataError);
}

TEST_CASE("select_merge implements eval argmax, expert forcing and train sampling") {
  Tape tape;
  GumbelSampler sampler(1.0, false, 0);
  MergeCandidates cands;
  cands.logits = tape.constant({std::log(0.1), std::log(0.7), std::log(0.2)});
  cands.distribution = tape.softmax(cands.logits);

  REQUIRE(select_merge(tape, cands, TreeMode::Eval, sampler).position == 1);
  REQUIRE(select_merge(tape, cands, TreeMode::Expert, sampler, 2).position == 2);
  REQUIRE_THROWS_AS(select_merge(tape, cands, TreeMode::Expert, sampler, 3), DataError);

  auto train_choice = [&](std::uint64_t seed, double shift) {
    Tape t2;
    GumbelSampler s2(1.0, true, seed);
    MergeCandidates c2;
    std::vector<double> logits = {0.0, 0.4, -0.3};
    for (double& x : logits) x += shift;
    c2.logits = t2.constant(logits);
    c2.distribution = t2.softmax(c2.logits);
    return select_merge(t2, c2, TreeMode::Train, s2).position;
  };
  int first = train_choice(42, 0.0);
  for (int i = 0; i < 4; ++i) REQUIRE(train_choice(42, 0.0) == first);
  // selection shift invariance under the same noise realization
  for (std::uint64_t seed : {1ull, 9ull, 77ull, 123ull})
    REQUIRE(train_choice(seed, 0.0) == train_choice(seed, 5.0));
}

TEST_CASE("single token sentences yield a one-leaf tree") {
  BuilderHarness h(12, 6);
  Tape tape;
  GumbelSampler sampler(1.0, false, 0);
  auto fwd = h.build(tape, 1, TreeMode::Eval, sampler);
  REQUIRE(fwd.tree.nodes.size() == 1);
  REQUIRE(fwd.tree.merge_log.empty());
  REQUIRE(fwd.tree.root == 0);
}

TEST_CASE("two tokens merge exactly once") {
  BuilderHarness h(12, 7);
  Tape tape;
  GumbelSampler sampler(1.0, false, 0);
  auto fwd = h.build(tape, 2, TreeMode::Eval, sampler);
  check_tree_invariants(fwd.tree, 2);
  REQUIRE(fwd.tree.nodes[2].span_begin == 0);
  REQUIRE(fwd.tree.nodes[2].span_end == 2);
}

TEST_CASE("random constructions satisfy the structural invariants") {
  BuilderHarness h(20, 8);
  Rng rng(17);
  for (int trial = 0; trial < 30; ++trial) {
    int m = 1 + rng.uniform_int(8);
    Tape tape;
    GumbelSampler sampler(1.0, true, rng.bits());
    TreeMode mode = trial % 2 == 0 ? TreeMode::Train : TreeMode::Eval;
    auto fwd = h.build(tape, m, mode, sampler);
    check_tree_invariants(fwd.tree, m);
  }
}

TEST_CASE("layer bookkeeping is monotone") {
  BuilderHarness h(12, 9);
  Tape tape;
  GumbelSampler sampler(1.0, false, 0);
  auto fwd = h.build(tape, 6, TreeMode::Eval, sampler);
  for (std::size_t i = 0; i < fwd.tree.merge_log.size(); ++i) {
    REQUIRE(fwd.tree.merge_log[i].layer == static_cast<int>(i) + 1);
    // layer t has m - t + 1 nodes, so t's candidate vector has m - t entries
    REQUIRE(tape.numel(fwd.tree.merge_log[i].logits) == 6 - static_cast<int>(i) - 1);
  }
}

TEST_CASE("expert mode reproduces arbitrary expert trees for any parameters") {
  Rng rng(23);
  for (int trial = 0; trial < 25; ++trial) {
    int m = 2 + rng.uniform_int(7);
    std::vector<std::string> tokens;
    for (int i = 0; i < m; ++i) tokens.push_back("w" + std::to_string(2 + i));
    ExpertTree expert = random_binary_tree(rng, tokens);

    BuilderHarness h(12, rng.bits());
    Tape tape;
    GumbelSampler sampler(1.0, true, rng.bits());
    std::vector<int> ids;
    for (int i = 0; i < m; ++i) ids.push_back(2 + i % 9);
    Rng region_rng(5);
    Model::ForwardOptions opts;
    opts.tree_mode = TreeMode::Expert;
    opts.expert = &expert;
    auto fwd = h.model.forward(tape, testutil::make_tokens(ids),
                               testutil::random_regions(region_rng, 3, 4), opts,
                               sampler);
    check_tree_invariants(fwd.tree, m);

    // structural equality: compare child span pairs of every internal node
    std::set<std::pair<std::pair<int, int>, std::pair<int, int>>> got, want;
    for (const TreeNode& n : fwd.tree.nodes) {
      if (n.is_leaf()) continue;
      const TreeNode& l = fwd.tree.nodes[static_cast<std::size_t>(n.left)];
      const TreeNode& r = fwd.tree.nodes[static_cast<std::size_t>(n.right)];
      got.insert({{l.span_begin, l.span_end}, {r.span_begin, r.span_end}});
    }
    // leaf order in the expert tree equals token order; recover spans
    std::vector<std::pair<int, int>> spans(expert.nodes.size(), {-1, -1});
    int next_leaf = 0;
    std::function<void(int)> fill = [&](int id) {
      auto& n = expert.nodes[static_cast<std::size_t>(id)];
      if (n.is_leaf()) {
        spans[static_cast<std::size_t>(id)] = {next_leaf, next_leaf + 1};
        ++next_leaf;
        return;
      }
      fill(n.left);
      fill(n.right);
      spans[static_cast<std::size_t>(id)] = {
          spans[static_cast<std::size_t>(n.left)].first,
          spans[static_cast<std::size_t>(n.right)].second};
    };
    fill(expert.root);
    for (std::size_t i = 0; i < expert.nodes.size(); ++i)
      if (!expert.nodes[i].is_leaf())
        want.insert({spans[static_cast<std::size_t>(expert.nodes[i].left)],
                     spans[static_cast<std::size_t>(expert.nodes[i].right)]});
    REQUIRE(got == want);
  }
}

TEST_CASE("binarization reproduces the five-child grouping") {
  MultiNode flat = parse_multi_sexpr("(a furry and black dog)");
  REQUIRE(flat.children.size() == 5);
  ExpertTree tree = binarize_constituency(flat);
  REQUIRE(to_sexpr(tree) == "(((a furry) (and black)) dog)");
}

TEST_CASE("binarization keeps binary nodes and applies the pairing rule") {
  REQUIRE(to_sexpr(binarize_constituency(parse_multi_sexpr("(black dog)"))) ==
          "(black dog)");
  REQUIRE(to_sexpr(binarize_constituency(parse_multi_sexpr("(w1 w2 w3)"))) ==
          "((w1 w2) w3)");
  // idempotence on an already-binary tree
  ExpertTree once = binarize_constituency(parse_multi_sexpr("((black dog) (on sofa))"));
  MultiNode again = parse_multi_sexpr(to_sexpr(once));
  REQUIRE(to_sexpr(binarize_constituency(again)) == to_sexpr(once));
  // nested multi-branch children are binarized before their parent
  ExpertTree deep =
      binarize_constituency(parse_multi_sexpr("((x y z) (left of) dog)"));
  REQUIRE(deep.leaf_tokens() ==
          std::vector<std::string>{"x", "y", "z", "left", "of", "dog"});
  REQUIRE(to_sexpr(deep) == "((((x y) z) (left of)) dog)");
}

TEST_CASE("bracketed tree parsing accepts binary trees and rejects malformed input") {
  ExpertTree t = parse_binary_sexpr("((black dog) (left tree))");
  REQUIRE(t.leaf_count() == 4);
  REQUIRE(static_cast<int>(t.nodes.size()) - t.leaf_count() == 3);
  REQUIRE(t.leaf_tokens() ==
          std::vector<std::string>{"black", "dog", "left", "tree"});

  REQUIRE(parse_binary_sexpr("dog").leaf_count() == 1);
  REQUIRE_THROWS_AS(parse_binary_sexpr("((a b)"), DataError);
  REQUIRE_THROWS_AS(parse_binary_sexpr("(a b c)"), DataError);
  REQUIRE_THROWS_AS(parse_binary_sexpr("(a)"), DataError);
  REQUIRE_THROWS_AS(parse_binary_sexpr(""), DataError);
  REQUIRE_THROWS_AS(parse_binary_sexpr("(a b) extra"), DataError);
}

TEST_CASE("expert tree files parse with line diagnostics and validate leaves") {
  std::string path = "expert_trees_test.tsv";
  {
    std::ofstream out(path);
    out << "e1\t((black dog) (left tree))\n";
    out << "e2\tdog\n";
  }
  auto trees = load_expert_trees(path);
  REQUIRE(trees.size() == 2);
  validate_expert_tree(trees.at("e1"), {"black", "dog", "left", "tree"});
  REQUIRE_THROWS_AS(validate_expert_tree(trees.at("e1"), {"black", "dog"}), DataError);

  {
    std::ofstream out(path);
    out << "e1\t((black dog)\n";
  }
  REQUIRE_THROWS_WITH(load_expert_trees(path),
                      Catch::Matchers::ContainsSubstring(":1:"));
  {
    std::ofstream out(path);
    out << "no-tab-here\n";
  }
  REQUIRE_THROWS_AS(load_expert_trees(path), DataError);
  std::remove(path.c_str());
}
