#pragma once

#include <string>
#include <vector>

#include "rvgtree/dataio.hpp"
#include "rvgtree/model.hpp"
#include "support/reference_eval.hpp"

namespace testutil {

inline rvg::SentenceTokens make_tokens(const std::vector<int>& ids) {
  rvg::SentenceTokens t;
  for (int id : ids) {
    t.ids.push_back(id);
    t.mask.push_back(1);
    t.tokens.push_back("w" + std::to_string(id));
  }
  return t;
}

inline rvg::SentenceTokens random_tokens(rvg::Rng& rng, int m, int vocab) {
  std::vector<int> ids;
  for (int i = 0; i < m; ++i) ids.push_back(2 + rng.uniform_int(vocab - 2));
  return make_tokens(ids);
}

inline std::vector<rvg::Region> random_regions(rvg::Rng& rng, int n, int d) {
  std::vector<rvg::Region> out(static_cast<std::size_t>(n));
  for (auto& r : out) {
    r.feature.resize(static_cast<std::size_t>(d));
    for (double& v : r.feature) v = rng.uniform(-1.0, 1.0);
  }
  return out;
}

inline std::vector<std::vector<double>> tensor_rows(const rvg::Tensor& t) {
  std::vector<std::vector<double>> rows;
  int r = t.shape[0], c = t.shape[1];
  for (int i = 0; i < r; ++i)
    rows.emplace_back(t.value.begin() + static_cast<std::size_t>(i) * c,
                      t.value.begin() + static_cast<std::size_t>(i + 1) * c);
  return rows;
}

// Reference-oracle view of an executed forward pass: tree structure and node
// states are taken as given, everything downstream is recomputed in plain
// doubles by the oracle.
inline refeval::Instance make_reference_instance(
    const rvg::Tape& tape, rvg::Model& model, const rvg::Model::ForwardResult& fwd,
    const rvg::SentenceTokens& tokens, const std::vector<rvg::Region>& regions) {
  refeval::Instance in;
  const rvg::RvGTree& tree = fwd.tree;
  for (const rvg::TreeNode& n : tree.nodes) {
    in.tree.left.push_back(n.left);
    in.tree.right.push_back(n.right);
    in.tree.token_index.push_back(n.token_index);
    in.tree.span_begin.push_back(n.span_begin);
    in.tree.span_end.push_back(n.span_end);
    in.node_v.push_back(tape.value(n.state.v));
  }
  in.tree.root = tree.root;

  const rvg::Tensor& emb = model.store().get("embeddings");
  int b = model.config().embed_dim;
  for (std::size_t i = 0; i < tokens.ids.size(); ++i) {
    if (!tokens.mask[i]) continue;
    int id = tokens.ids[i];
    in.word_emb.emplace_back(emb.value.begin() + static_cast<std::size_t>(id) * b,
                             emb.value.begin() + static_cast<std::size_t>(id + 1) * b);
  }
  for (const rvg::Region& r : regions) in.regions.push_back(r.feature);

  in.params.role_query = model.store().get("role.query").value;
  in.params.att_single = model.store().get("attn.single").value;
  in.params.att_pair = model.store().get("attn.pair").value;
  in.params.proj_single = tensor_rows(model.store().get("score.single.proj"));
  in.params.read_single = model.store().get("score.single.read").value;
  in.params.proj_pair = tensor_rows(model.store().get("score.pair.proj"));
  in.params.read_pair = model.store().get("score.pair.read").value;

  rvg::Variant v = model.config().variant;
  in.use_in_node = v != rvg::Variant::NoNode;
  in.use_pair = v != rvg::Variant::NoF;
  in.use_accum = v != rvg::Variant::NoS;
  return in;
}

}  // namespace testutil
