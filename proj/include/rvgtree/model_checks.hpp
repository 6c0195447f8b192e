#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "rvgtree/gradcheck.hpp"
#include "rvgtree/model.hpp"
#include "rvgtree/training.hpp"

namespace rvg {

// ---------------------------------------------------------------------------
// Per-primitive finite-difference checks
// ---------------------------------------------------------------------------

namespace detail {

inline Tensor random_tensor(std::vector<int> shape, Rng& rng, double lo = -1.0,
                            double hi = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.value) v = rng.uniform(lo, hi);
  return t;
}

template <typename BuildFn>
GradCheckEntry check_primitive(const std::string& name,
                               std::vector<std::pair<std::string, Tensor*>> params,
                               const BuildFn& build, double eps, double tol) {
  auto loss = [&]() {
    Tape tape;
    Var out = build(tape);
    tape.backward(out);
    return tape.scalar(out);
  };
  GradCheckReport r = check_gradients(loss, params, eps, tol);
  GradCheckEntry combined;
  combined.name = name;
  for (const auto& e : r.entries) {
    if (e.max_rel_err > combined.max_rel_err) {
      combined.max_rel_err = e.max_rel_err;
      combined.worst_index = e.worst_index;
      combined.analytic = e.analytic;
      combined.numeric = e.numeric;
    }
    combined.flagged += e.flagged;
  }
  return combined;
}

}  // namespace detail

// Finite-difference sweep over every differentiable tape primitive. The
// straight-through selection is intentionally excluded: its backward path is
// a biased estimator, not the derivative of its forward value.
inline GradCheckReport check_primitive_gradients(std::uint64_t seed, double eps = 1e-5,
                                                 double tol = 1e-4) {
  Rng rng(seed);
  GradCheckReport report;
  report.tol = tol;
  auto add_entry = [&](GradCheckEntry e) {
    report.max_rel_err = std::max(report.max_rel_err, e.max_rel_err);
    report.entries.push_back(std::move(e));
  };

  Tensor a = detail::random_tensor({7}, rng);
  Tensor b = detail::random_tensor({7}, rng);
  Tensor W = detail::random_tensor({5, 7}, rng);
  Tensor pos = detail::random_tensor({6}, rng, 0.5, 2.0);
  Tensor s1 = detail::random_tensor({1}, rng);
  Tensor s2 = detail::random_tensor({1}, rng);
  Tensor wts = detail::random_tensor({3}, rng);
  Tensor i0 = detail::random_tensor({4}, rng);
  Tensor i1 = detail::random_tensor({4}, rng);
  Tensor i2 = detail::random_tensor({4}, rng);
  std::vector<double> readout7, readout5, readout4, readout6, readout14;
  for (int i = 0; i < 7; ++i) readout7.push_back(rng.uniform(-1, 1));
  for (int i = 0; i < 5; ++i) readout5.push_back(rng.uniform(-1, 1));
  for (int i = 0; i < 4; ++i) readout4.push_back(rng.uniform(-1, 1));
  for (int i = 0; i < 6; ++i) readout6.push_back(rng.uniform(-1, 1));
  for (int i = 0; i < 14; ++i) readout14.push_back(rng.uniform(-1, 1));

  add_entry(detail::check_primitive(
      "add", {{"a", &a}, {"b", &b}},
      [&](Tape& t) {
        return t.dot(t.constant(readout7), t.add(t.leaf(a), t.leaf(b)));
      },
      eps, tol));
  add_entry(detail::check_primitive(
      "sub", {{"a", &a}, {"b", &b}},
      [&](Tape& t) {
        return t.dot(t.constant(readout7), t.sub(t.leaf(a), t.leaf(b)));
      },
      eps, tol));
  add_entry(detail::check_primitive(
      "mul", {{"a", &a}, {"b", &b}},
      [&](Tape& t) {
        return t.dot(t.constant(readout7), t.mul(t.leaf(a), t.leaf(b)));
      },
      eps, tol));
  add_entry(detail::check_primitive(
      "scale", {{"a", &a}},
      [&](Tape& t) {
        return t.dot(t.constant(readout7), t.scale(t.leaf(a), -1.7));
      },
      eps, tol));
  add_entry(detail::check_primitive(
      "matvec", {{"W", &W}, {"x", &a}},
      [&](Tape& t) {
        return t.dot(t.constant(readout5), t.matvec(t.leaf(W), t.leaf(a)));
      },
      eps, tol));
  add_entry(detail::check_primitive(
      "dot", {{"a", &a}, {"b", &b}},
      [&](Tape& t) { return t.dot(t.leaf(a), t.leaf(b)); }, eps, tol));
  add_entry(detail::check_primitive(
      "concat", {{"a", &a}, {"b", &b}},
      [&](Tape& t) {
        return t.dot(t.constant(readout14), t.concat(t.leaf(a), t.leaf(b)));
      },
      eps, tol));
  add_entry(detail::check_primitive(
      "slice", {{"a", &a}},
      [&](Tape& t) {
        return t.dot(t.constant(readout4), t.slice(t.leaf(a), 2, 4));
      },
      eps, tol));
  add_entry(detail::check_primitive(
      "sigmoid", {{"a", &a}},
      [&](Tape& t) { return t.dot(t.constant(readout7), t.sigmoid(t.leaf(a))); },
      eps, tol));
  add_entry(detail::check_primitive(
      "tanh", {{"a", &a}},
      [&](Tape& t) { return t.dot(t.constant(readout7), t.tanh(t.leaf(a))); }, eps,
      tol));
  add_entry(detail::check_primitive(
      "log", {{"p", &pos}},
      [&](Tape& t) { return t.dot(t.constant(readout6), t.log(t.leaf(pos))); }, eps,
      tol));
  add_entry(detail::check_primitive(
      "softmax", {{"a", &a}},
      [&](Tape& t) { return t.dot(t.constant(readout7), t.softmax(t.leaf(a))); },
      eps, tol));
  std::vector<std::uint8_t> mask = {1, 0, 1, 1, 0, 1, 1};
  add_entry(detail::check_primitive(
      "softmax_masked", {{"a", &a}},
      [&](Tape& t) {
        return t.dot(t.constant(readout7), t.softmax(t.leaf(a), &mask));
      },
      eps, tol));
  add_entry(detail::check_primitive(
      "log_softmax", {{"a", &a}},
      [&](Tape& t) {
        return t.dot(t.constant(readout7), t.log_softmax(t.leaf(a)));
      },
      eps, tol));
  add_entry(detail::check_primitive(
      "pick", {{"a", &a}},
      [&](Tape& t) { return t.pick(t.leaf(a), 3); }, eps, tol));
  add_entry(detail::check_primitive(
      "stack", {{"s1", &s1}, {"s2", &s2}},
      [&](Tape& t) {
        return t.dot(t.constant({0.3, -1.2}), t.stack({t.leaf(s1), t.leaf(s2)}));
      },
      eps, tol));
  add_entry(detail::check_primitive(
      "sum", {{"a", &a}},
      [&](Tape& t) { return t.sum(t.leaf(a)); }, eps, tol));
  add_entry(detail::check_primitive(
      "l2_normalize", {{"a", &a}},
      [&](Tape& t) {
        return t.dot(t.constant(readout7), t.l2_normalize(t.leaf(a)));
      },
      eps, tol));
  add_entry(detail::check_primitive(
      "convex_combine", {{"w", &wts}, {"i0", &i0}, {"i1", &i1}, {"i2", &i2}},
      [&](Tape& t) {
        return t.dot(t.constant(readout4),
                     t.convex_combine(t.leaf(wts),
                                      {t.leaf(i0), t.leaf(i1), t.leaf(i2)}));
      },
      eps, tol));
  return report;
}

// ---------------------------------------------------------------------------
// Full-model gradient check
// ---------------------------------------------------------------------------

struct ModelCheckConfig {
  int sentence_length = 4;  // m
  int regions = 4;          // n
  int embed_dim = 8;        // b
  int hidden_dim = 8;       // H
  int feature_dim = 8;      // d
  int vocab_size = 12;
  Variant variant = Variant::Full;
  std::uint64_t seed = 1;
  double eps = 1e-5;
  double tol = 1e-3;
};

// Checks the full one-example objective (grounding loss plus merge
// supervision) against finite differences with the tree and node roles
// locked, so the checked function is smooth in every parameter.
inline GradCheckReport check_model_gradients(const ModelCheckConfig& cc) {
  Rng rng(cc.seed);
  ModelConfig mc;
  mc.vocab_size = cc.vocab_size;
  mc.embed_dim = cc.embed_dim;
  mc.hidden_dim = cc.hidden_dim;
  mc.feature_dim = cc.feature_dim;
  mc.variant = cc.variant;
  Model model(mc, rng.bits());

  SentenceTokens tokens;
  for (int i = 0; i < cc.sentence_length; ++i) {
    tokens.ids.push_back(2 + rng.uniform_int(cc.vocab_size - 2));
    tokens.mask.push_back(1);
    tokens.tokens.push_back("w" + std::to_string(i));
  }
  std::vector<Region> regions(static_cast<std::size_t>(cc.regions));
  for (Region& r : regions) {
    r.feature.resize(static_cast<std::size_t>(cc.feature_dim));
    for (double& v : r.feature) v = rng.uniform(-1.0, 1.0);
  }
  int gt = rng.uniform_int(cc.regions);

  // record structure once with a deterministic pass
  GumbelSampler quiet(1.0, false, 0);
  std::vector<int> positions, roles;
  {
    Tape tape;
    Model::ForwardOptions opts;
    opts.tree_mode = TreeMode::Eval;
    opts.role_mode = RoleMode::Argmax;
    auto fwd = model.forward(tape, tokens, regions, opts, quiet);
    positions = merge_positions(fwd.tree);
    roles = feature_child_sides(fwd.tree, fwd.trace);
  }

  bool tree_used = cc.variant != Variant::Chain;
  auto loss = [&]() {
    Tape tape;
    Model::ForwardOptions opts;
    if (tree_used) {
      opts.tree_mode = TreeMode::Expert;
      opts.forced_merge_positions = &positions;
      opts.role_mode = RoleMode::Forced;
      opts.forced_feature_child = &roles;
      opts.want_tree_loss = cc.sentence_length > 1;
    }
    auto fwd = model.forward(tape, tokens, regions, opts, quiet);
    Var total = grounding_loss(tape, fwd.root_scores, gt);
    if (tree_used && opts.want_tree_loss) total = tape.add(total, fwd.tree_loss);
    tape.backward(total);
    return tape.scalar(total);
  };

  std::vector<std::pair<std::string, Tensor*>> params;
  for (std::size_t i = 0; i < model.store().count(); ++i) {
    auto& e = model.store().entry(i);
    params.emplace_back(e.name, &e.tensor);
  }
  return check_gradients(loss, params, cc.eps, cc.tol);
}

}  // namespace rvg
