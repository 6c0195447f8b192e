#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "rvgtree/grounding.hpp"
#include "rvgtree/model.hpp"
#include "rvgtree/model_checks.hpp"
#include "support/reference_eval.hpp"
#include "support/test_util.hpp"

using namespace rvg;

namespace {

Model make_model(int b, int H, int d, Variant v, std::uint64_t seed, int vocab = 16) {
  ModelConfig mc;
  mc.vocab_size = vocab;
  mc.embed_dim = b;
  mc.hidden_dim = H;
  mc.feature_dim = d;
  mc.variant = v;
  return Model(mc, seed);
}

struct EvalRun {
  Tape tape;
  Model::ForwardResult fwd;
  SentenceTokens tokens;
  std::vector<Region> regions;
};

EvalRun run_eval(Model& model, int m, int n, std::uint64_t seed) {
  EvalRun run;
  Rng rng(seed);
  run.tokens = testutil::random_tokens(rng, m, model.config().vocab_size);
  run.regions = testutil::random_regions(rng, n, model.config().feature_dim);
  GumbelSampler sampler(1.0, false, 0);
  Model::ForwardOptions opts;
  opts.tree_mode = TreeMode::Eval;
  opts.role_mode = RoleMode::Argmax;
  run.fwd = model.forward(run.tape, run.tokens, run.regions, opts, sampler);
  return run;
}

}  // namespace

TEST_CASE("iou matches area arithmetic") {
  std::array<double, 4> a = {0, 0, 2, 2};
  REQUIRE(iou(a, a) == 1.0);
  REQUIRE(iou(a, {5, 5, 7, 9}) == 0.0);
  REQUIRE(iou(a, {1, 0, 3, 2}) == Catch::Approx(1.0 / 3.0).margin(1e-15));
  REQUIRE_THROWS_AS(iou(a, {1, 1, 1, 2}), DataError);
}

TEST_CASE("children classification is a complementary binary softmax") {
  Model model = make_model(4, 3, 4, Variant::Full, 1);
  Tape tape;
  GumbelSampler sampler(1.0, false, 0);
  Rng rng(2);
  std::vector<double> h(6), c(6);
  for (double& x : h) x = rng.uniform(-1, 1);
  for (double& x : c) x = rng.uniform(-1, 1);
  NodeState same1 = make_node_state(tape, tape.constant(h), tape.constant(c));
  NodeState same2 = make_node_state(tape, tape.constant(h), tape.constant(c));
  Var query = tape.leaf(model.store().get("role.query"));

  RoleDecision tie = classify_children(tape, same1, same2, query, RoleMode::Argmax,
                                       sampler);
  REQUIRE(tape.value(tie.probs)[0] == 0.5);
  REQUIRE(tape.value(tie.probs)[1] == 0.5);
  REQUIRE(tie.feature_child == 0);  // ties go to the left child

  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> h2(6), c2(6);
    for (double& x : h2) x = rng.uniform(-1, 1);
    for (double& x : c2) x = rng.uniform(-1, 1);
    NodeState other = make_node_state(tape, tape.constant(h2), tape.constant(c2));
    RoleDecision d = classify_children(tape, same1, other, query, RoleMode::Argmax,
                                       sampler);
    const auto& p = tape.value(d.probs);
    REQUIRE(std::fabs(p[0] + p[1] - 1.0) <= 1e-15);
    // argmax side is the feature node
    double s1 = 0, s2 = 0;
    const auto& q = model.store().get("role.query").value;
    const auto& v1 = tape.value(same1.v);
    const auto& v2 = tape.value(other.v);
    for (std::size_t i = 0; i < q.size(); ++i) {
      s1 += q[i] * v1[i];
      s2 += q[i] * v2[i];
    }
    REQUIRE(d.feature_child == (s1 >= s2 ? 0 : 1));
  }
}

TEST_CASE("forced and sampled role modes") {
  Model model = make_model(4, 3, 4, Variant::Full, 3);
  Tape tape;
  GumbelSampler sampler(1.0, true, 9);
  Rng rng(4);
  std::vector<double> h(6), c(6);
  for (double& x : h) x = rng.uniform(-1, 1);
  for (double& x : c) x = rng.uniform(-1, 1);
  NodeState a = make_node_state(tape, tape.constant(h), tape.constant(c));
  for (double& x : h) x = rng.uniform(-1, 1);
  NodeState b = make_node_state(tape, tape.constant(h), tape.constant(c));
  Var query = tape.leaf(model.store().get("role.query"));

  RoleDecision forced =
      classify_children(tape, a, b, query, RoleMode::Forced, sampler, 1);
  REQUIRE(forced.feature_child == 1);
  REQUIRE_THROWS_AS(
      classify_children(tape, a, b, query, RoleMode::Forced, sampler, 2), DataError);

  RoleDecision sampled =
      classify_children(tape, a, b, query, RoleMode::Sample, sampler);
  REQUIRE((sampled.feature_child == 0 || sampled.feature_child == 1));
  REQUIRE(sampled.st_weights.valid());
  const auto& hard = tape.value(sampled.st_weights);
  REQUIRE(hard[static_cast<std::size_t>(sampled.feature_child)] == 1.0);
}

TEST_CASE("language features reduce to the word embedding on single-word spans") {
  Model model = make_model(5, 3, 4, Variant::Full, 5);
  EvalRun run = run_eval(model, 3, 2, 11);
  Tape& tape = run.tape;

  std::vector<NodeState> leaf_states;
  std::vector<Var> word_embs;
  Var table = tape.leaf(model.embeddings());
  for (int i = 0; i < 3; ++i) {
    leaf_states.push_back(run.fwd.tree.nodes[static_cast<std::size_t>(i)].state);
    word_embs.push_back(
        embed_token(tape, table, run.tokens.ids[static_cast<std::size_t>(i)], 16, 5));
  }
  Var att_s = tape.leaf(model.store().get("attn.single"));
  Var att_p = tape.leaf(model.store().get("attn.pair"));

  LanguageFeatures lf =
      language_features(tape, 1, 2, leaf_states, word_embs, att_s, att_p);
  REQUIRE(tape.value(lf.y_single) == tape.value(word_embs[1]));
  REQUIRE(tape.value(lf.y_pair) == tape.value(word_embs[1]));
  REQUIRE(tape.value(lf.alpha_single) == std::vector<double>{1.0});

  LanguageFeatures span =
      language_features(tape, 0, 3, leaf_states, word_embs, att_s, att_p);
  double sum = 0;
  for (double a : tape.value(span.alpha_single)) sum += a;
  REQUIRE(sum == Catch::Approx(1.0).margin(1e-12));
  REQUIRE_THROWS_AS(language_features(tape, 2, 2, leaf_states, word_embs, att_s, att_p),
                    DataError);
}

TEST_CASE("zero attention queries give the mean of span embeddings") {
  Model model = make_model(5, 3, 4, Variant::Full, 6);
  model.store().get("attn.single").fill(0.0);
  model.store().get("attn.pair").fill(0.0);
  EvalRun run = run_eval(model, 3, 2, 12);
  Tape& tape = run.tape;
  std::vector<NodeState> leaf_states;
  std::vector<Var> word_embs;
  Var table = tape.leaf(model.embeddings());
  for (int i = 0; i < 3; ++i) {
    leaf_states.push_back(run.fwd.tree.nodes[static_cast<std::size_t>(i)].state);
    word_embs.push_back(
        embed_token(tape, table, run.tokens.ids[static_cast<std::size_t>(i)], 16, 5));
  }
  LanguageFeatures lf = language_features(tape, 0, 3, leaf_states, word_embs,
                                          tape.leaf(model.store().get("attn.single")),
                                          tape.leaf(model.store().get("attn.pair")));
  for (int k = 0; k < 5; ++k) {
    double mean = 0;
    for (int i = 0; i < 3; ++i)
      mean += tape.value(word_embs[static_cast<std::size_t>(i)])[static_cast<std::size_t>(k)] / 3.0;
    REQUIRE(tape.value(lf.y_single)[static_cast<std::size_t>(k)] ==
            Catch::Approx(mean).margin(1e-14));
  }
}

TEST_CASE("score heads: zero readout, positive-scale invariance, gradients") {
  Model model = make_model(5, 3, 4, Variant::Full, 7);
  Rng rng(13);

  GroundingVars gv;
  Tape tape;
  gv.role_query = tape.leaf(model.store().get("role.query"));
  gv.att_single = tape.leaf(model.store().get("attn.single"));
  gv.att_pair = tape.leaf(model.store().get("attn.pair"));
  gv.score_s2 = tape.leaf(model.store().get("score.single.proj"));
  gv.score_s1 = tape.leaf(model.store().get("score.single.read"));
  gv.score_p2 = tape.leaf(model.store().get("score.pair.proj"));
  gv.score_p1 = tape.leaf(model.store().get("score.pair.read"));

  std::vector<double> x(4), ctx(4), y(5);
  for (double& v : x) v = rng.uniform(-1, 1);
  for (double& v : ctx) v = rng.uniform(-1, 1);
  for (double& v : y) v = rng.uniform(-1, 1);

  double base_s = tape.scalar(score_single(tape, tape.constant(x), tape.constant(y), gv));
  double base_p = tape.scalar(score_pair(tape, tape.constant(x), tape.constant(ctx),
                                         tape.constant(y), gv));
  for (double c : {0.5, 3.0, 250.0}) {
    std::vector<double> xs = x, cs = ctx;
    for (double& v : xs) v *= c;
    for (double& v : cs) v *= c;
    REQUIRE(tape.scalar(score_single(tape, tape.constant(xs), tape.constant(y), gv)) ==
            Catch::Approx(base_s).margin(1e-12));
    REQUIRE(tape.scalar(score_pair(tape, tape.constant(xs), tape.constant(cs),
                                   tape.constant(y), gv)) ==
            Catch::Approx(base_p).margin(1e-12));
  }

  model.store().get("score.single.read").fill(0.0);
  model.store().get("score.pair.read").fill(0.0);
  Tape t2;
  GroundingVars gv2;
  gv2.score_s2 = t2.leaf(model.store().get("score.single.proj"));
  gv2.score_s1 = t2.leaf(model.store().get("score.single.read"));
  gv2.score_p2 = t2.leaf(model.store().get("score.pair.proj"));
  gv2.score_p1 = t2.leaf(model.store().get("score.pair.read"));
  REQUIRE(t2.scalar(score_single(t2, t2.constant(x), t2.constant(y), gv2)) == 0.0);
  REQUIRE(t2.scalar(score_pair(t2, t2.constant(x), t2.constant(ctx), t2.constant(y),
                               gv2)) == 0.0);

  // head parameters against finite differences
  Tensor& p2 = model.store().get("score.pair.proj");
  Tensor& p1 = model.store().get("score.pair.read");
  Rng rng2(14);
  for (double& v : p1.value) v = rng2.uniform(-1, 1);
  auto loss = [&]() {
    Tape t3;
    GroundingVars gv3;
    gv3.score_p2 = t3.leaf(p2);
    gv3.score_p1 = t3.leaf(p1);
    Var out = score_pair(t3, t3.constant(x), t3.constant(ctx), t3.constant(y), gv3);
    t3.backward(out);
    return t3.scalar(out);
  };
  GradCheckReport r = check_gradients(loss, {{"p2", &p2}, {"p1", &p1}}, 1e-5, 1e-4);
  INFO(r.summary());
  REQUIRE(r.ok());
}

TEST_CASE("aggregate_feature pools regions by softmax weight") {
  Tape tape;
  std::vector<Var> regions = {tape.constant({1.0, 0.0}), tape.constant({0.0, 2.0})};
  Var mean = aggregate_feature(tape, tape.constant({0.7, 0.7}), regions);
  REQUIRE(tape.value(mean)[0] == Catch::Approx(0.5).margin(1e-14));
  REQUIRE(tape.value(mean)[1] == Catch::Approx(1.0).margin(1e-14));

  Var saturated = aggregate_feature(tape, tape.constant({100.0, 0.0}), regions);
  REQUIRE(tape.value(saturated)[0] == Catch::Approx(1.0).margin(1e-10));
  REQUIRE(tape.value(saturated)[1] == Catch::Approx(0.0).margin(1e-10));

  Var shifted = aggregate_feature(tape, tape.constant({103.0, 3.0}), regions);
  for (int k = 0; k < 2; ++k)
    REQUIRE(tape.value(shifted)[static_cast<std::size_t>(k)] ==
            Catch::Approx(tape.value(saturated)[static_cast<std::size_t>(k)]).margin(1e-12));
}

TEST_CASE("single-leaf trees ground with the word embedding single score only") {
  Model model = make_model(5, 3, 4, Variant::Full, 8);
  EvalRun run = run_eval(model, 1, 3, 21);
  REQUIRE(run.fwd.tree.nodes.size() == 1);
  REQUIRE(run.fwd.trace.single_head_evals == 0);
  REQUIRE(run.fwd.trace.pair_head_evals == 0);
  REQUIRE(run.fwd.trace.leaf_single_evals == 1);

  refeval::Instance in = testutil::make_reference_instance(run.tape, model, run.fwd,
                                                           run.tokens, run.regions);
  std::vector<double> expected = refeval::root_scores(in);
  const auto& got = run.tape.value(run.fwd.root_scores);
  for (std::size_t i = 0; i < expected.size(); ++i)
    REQUIRE(got[i] == Catch::Approx(expected[i]).margin(1e-12));
}

TEST_CASE("two-leaf tree matches a hand-unrolled evaluation") {
  Model model = make_model(4, 2, 3, Variant::Full, 9);
  EvalRun run = run_eval(model, 2, 3, 22);
  Tape& tape = run.tape;
  const RvGTree& tree = run.fwd.tree;
  REQUIRE(tree.nodes.size() == 3);

  // hand-unrolled: roles, leaf feature pooling, in-node scores, zero accumulation
  auto dotv = [](const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
  };
  const auto& q = model.store().get("role.query").value;
  const auto& v0 = tape.value(tree.nodes[0].state.v);
  const auto& v1 = tape.value(tree.nodes[1].state.v);
  int feature_leaf = dotv(q, v0) >= dotv(q, v1) ? 0 : 1;

  const Tensor& emb = model.embeddings();
  const int b = 4, d = 3;
  auto embedding_row = [&](int pos) {
    int id = run.tokens.ids[static_cast<std::size_t>(pos)];
    return std::vector<double>(emb.value.begin() + id * b,
                               emb.value.begin() + (id + 1) * b);
  };
  auto head = [&](const Tensor& proj, const Tensor& read, std::vector<double> x,
                  const std::vector<double>& lang) {
    std::vector<double> p;
    int rows = proj.shape[0], cols = proj.shape[1];
    REQUIRE(static_cast<int>(x.size()) == cols);
    for (int i = 0; i < rows; ++i) {
      double s = 0;
      for (int j = 0; j < cols; ++j)
        s += proj.value[static_cast<std::size_t>(i * cols + j)] *
             x[static_cast<std::size_t>(j)];
      p.push_back(s * lang[static_cast<std::size_t>(i)]);
    }
    double nrm = std::sqrt(dotv(p, p));
    if (nrm <= 1e-8) return 0.0;
    double out = 0;
    for (int i = 0; i < rows; ++i)
      out += read.value[static_cast<std::size_t>(i)] *
             p[static_cast<std::size_t>(i)] / nrm;
    return out;
  };

  // the feature leaf pools regions with its own word-embedding single scores
  std::vector<double> leaf_scores;
  for (const Region& r : run.regions)
    leaf_scores.push_back(head(model.store().get("score.single.proj"),
                               model.store().get("score.single.read"), r.feature,
                               embedding_row(feature_leaf)));
  std::vector<double> w(leaf_scores.size());
  double z = 0;
  for (double s : leaf_scores) z += std::exp(s);
  for (std::size_t i = 0; i < leaf_scores.size(); ++i)
    w[i] = std::exp(leaf_scores[i]) / z;
  std::vector<double> ctx(static_cast<std::size_t>(d), 0.0);
  for (std::size_t i = 0; i < run.regions.size(); ++i)
    for (int k = 0; k < d; ++k)
      ctx[static_cast<std::size_t>(k)] +=
          w[i] * run.regions[i].feature[static_cast<std::size_t>(k)];

  // root language features over both words
  const auto& att_s = model.store().get("attn.single").value;
  const auto& att_p = model.store().get("attn.pair").value;
  auto span_pool = [&](const std::vector<double>& query) {
    double e0 = std::exp(dotv(query, v0)), e1 = std::exp(dotv(query, v1));
    std::vector<double> y(static_cast<std::size_t>(b), 0.0);
    auto w0 = embedding_row(0);
    auto w1 = embedding_row(1);
    for (int k = 0; k < b; ++k)
      y[static_cast<std::size_t>(k)] = (e0 * w0[static_cast<std::size_t>(k)] +
                                        e1 * w1[static_cast<std::size_t>(k)]) /
                                       (e0 + e1);
    return y;
  };
  std::vector<double> ys = span_pool(att_s), yp = span_pool(att_p);

  for (std::size_t i = 0; i < run.regions.size(); ++i) {
    double ss = head(model.store().get("score.single.proj"),
                     model.store().get("score.single.read"), run.regions[i].feature, ys);
    std::vector<double> both = run.regions[i].feature;
    both.insert(both.end(), ctx.begin(), ctx.end());
    double sp = head(model.store().get("score.pair.proj"),
                     model.store().get("score.pair.read"), both, yp);
    double expected = ss + sp + 0.0;  // leaf score child contributes zero
    REQUIRE(run.tape.value(run.fwd.root_scores)[i] ==
            Catch::Approx(expected).margin(1e-9));
  }
}

TEST_CASE("recursive grounding agrees with the independent oracle") {
  Rng rng(31);
  for (int trial = 0; trial < 60; ++trial) {
    int m = 1 + rng.uniform_int(8);
    int n = 1 + rng.uniform_int(6);
    int d = 2 + rng.uniform_int(15);
    Variant v = trial % 4 == 0   ? Variant::NoNode
                : trial % 4 == 1 ? Variant::NoS
                : trial % 4 == 2 ? Variant::NoF
                                 : Variant::Full;
    Model model = make_model(4 + rng.uniform_int(4), 2 + rng.uniform_int(3), d, v,
                             rng.bits());
    EvalRun run = run_eval(model, m, n, rng.bits());
    refeval::Instance in = testutil::make_reference_instance(run.tape, model, run.fwd,
                                                             run.tokens, run.regions);
    std::vector<double> expected = refeval::root_scores(in);
    const auto& got = run.tape.value(run.fwd.root_scores);
    REQUIRE(got.size() == expected.size());
    for (std::size_t i = 0; i < expected.size(); ++i)
      REQUIRE(got[i] == Catch::Approx(expected[i]).margin(1e-9));
  }
}

TEST_CASE("role assignments agree with the oracle and are exclusive") {
  Rng rng(37);
  for (int trial = 0; trial < 15; ++trial) {
    int m = 2 + rng.uniform_int(6);
    Model model = make_model(5, 3, 6, Variant::Full, rng.bits());
    EvalRun run = run_eval(model, m, 4, rng.bits());
    refeval::Instance in = testutil::make_reference_instance(run.tape, model, run.fwd,
                                                             run.tokens, run.regions);
    auto ref_nodes = refeval::evaluate(in);
    for (std::size_t id = 0; id < run.fwd.tree.nodes.size(); ++id) {
      const TreeNode& node = run.fwd.tree.nodes[id];
      if (node.is_leaf()) continue;
      int fc = run.fwd.trace.per_node[id].feature_child;
      REQUIRE((fc == node.left || fc == node.right));
      REQUIRE(fc == ref_nodes[id].feature_child);
    }
  }
}

TEST_CASE("per-node constant shifts change neither argmax nor score margins") {
  Rng rng(41);
  Model model = make_model(5, 3, 6, Variant::Full, 99);
  EvalRun run = run_eval(model, 5, 4, 55);
  refeval::Instance in = testutil::make_reference_instance(run.tape, model, run.fwd,
                                                           run.tokens, run.regions);
  std::vector<double> base = refeval::root_scores(in);
  int base_argmax = 0;
  for (std::size_t i = 1; i < base.size(); ++i)
    if (base[i] > base[static_cast<std::size_t>(base_argmax)])
      base_argmax = static_cast<int>(i);

  for (int trial = 0; trial < 10; ++trial) {
    in.node_shift.assign(in.tree.left.size(), 0.0);
    for (double& s : in.node_shift)
      if (rng.uniform() < 0.5) s = rng.uniform(-3.0, 3.0);
    std::vector<double> shifted = refeval::root_scores(in);
    int argmax = 0;
    for (std::size_t i = 1; i < shifted.size(); ++i)
      if (shifted[i] > shifted[static_cast<std::size_t>(argmax)])
        argmax = static_cast<int>(i);
    REQUIRE(argmax == base_argmax);
    // between-region margins are preserved
    for (std::size_t i = 1; i < base.size(); ++i)
      REQUIRE(shifted[i] - shifted[0] ==
              Catch::Approx(base[i] - base[0]).margin(1e-9));
  }
}

TEST_CASE("evaluator performs one single and one pair family per internal node") {
  Rng rng(43);
  for (int m : {2, 3, 5, 8}) {
    Model model = make_model(5, 3, 6, Variant::Full, rng.bits());
    EvalRun run = run_eval(model, m, 4, rng.bits());
    REQUIRE(run.fwd.trace.single_head_evals == m - 1);
    REQUIRE(run.fwd.trace.pair_head_evals == m - 1);
  }
}

TEST_CASE("ablation wiring drops the declared scoring terms") {
  const int m = 4, n = 3;
  auto scores_for = [&](Variant v, std::uint64_t seed) {
    Model model = make_model(5, 3, 6, v, seed);
    EvalRun run = run_eval(model, m, n, 777);
    return std::make_pair(run.tape.value(run.fwd.root_scores), run.fwd.trace);
  };
  auto [nonode, trace_nonode] = scores_for(Variant::NoNode, 4242);
  // with the in-node terms dropped every accumulated score is zero
  for (double s : nonode) REQUIRE(s == 0.0);
  REQUIRE(trace_nonode.single_head_evals == 0);
  REQUIRE(trace_nonode.pair_head_evals == 0);

  auto [nof, trace_nof] = scores_for(Variant::NoF, 4242);
  REQUIRE(trace_nof.pair_head_evals == 0);
  REQUIRE(trace_nof.single_head_evals == m - 1);
  (void)nof;

  auto [nos, trace_nos] = scores_for(Variant::NoS, 4242);
  REQUIRE(trace_nos.single_head_evals == m - 1);
  REQUIRE(trace_nos.pair_head_evals == m - 1);
  (void)nos;
}

TEST_CASE("full one-example loss passes the gradient check with locked structure") {
  ModelCheckConfig cc;
  cc.seed = 2024;
  cc.sentence_length = 4;
  cc.regions = 3;
  GradCheckReport r = check_model_gradients(cc);
  INFO(r.summary());
  REQUIRE(r.ok());
  REQUIRE(r.max_rel_err < 1e-3);
}
