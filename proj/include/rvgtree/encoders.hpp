#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "rvgtree/tape.hpp"
#include "rvgtree/tensor.hpp"

namespace rvg {

// Pruned token-id sequence, optionally padded. mask[i] == 1 marks a real
// token; pad positions run through the recurrence but are excluded from
// merging, attention and scoring downstream.
struct SentenceTokens {
  std::vector<int> ids;
  std::vector<std::uint8_t> mask;
  std::vector<std::string> tokens;  // surface forms of the real positions

  int length() const { return static_cast<int>(ids.size()); }
  int real_length() const {
    int n = 0;
    for (auto m : mask) n += m ? 1 : 0;
    return n;
  }
};

// Per-node vector state. v is always the concatenation [h; c] on the tape.
struct NodeState {
  Var h;
  Var c;
  Var v;
};

inline NodeState make_node_state(Tape& tape, Var h, Var c) {
  return NodeState{h, c, tape.concat(h, c)};
}

// Leased tape handles for the recurrent weights. BiLSTM weights are fused
// over the four gates (input, forget, output, candidate); the TreeLSTM keeps
// one weight matrix per gate with a shared forget bias.
struct BiLstmVars {
  Var fwd_W, fwd_b;  // {4H, b+H}, {4H}
  Var bwd_W, bwd_b;
  int hidden = 0;
};

struct TreeLstmVars {
  Var W_in, W_fl, W_fr, W_out, W_cand;  // {Hn, 2Hn} each
  Var b_in, b_f, b_out, b_cand;         // {Hn} each
  int hidden = 0;                       // Hn
};

// Embedding rows as tape slices of the full table, so gradients land in the
// right rows of the table tensor.
inline Var embed_token(Tape& tape, Var table, int token_id, int vocab_size, int dim) {
  if (token_id < 0 || token_id >= vocab_size)
    throw DataError("embed_token: token id " + std::to_string(token_id) +
                    " out of range (vocab " + std::to_string(vocab_size) + ")");
  return tape.slice(table, token_id * dim, dim);
}

inline std::vector<Var> embed_tokens(Tape& tape, Var table, const SentenceTokens& tokens,
                                     int vocab_size, int dim) {
  std::vector<Var> out;
  out.reserve(tokens.ids.size());
  for (int id : tokens.ids) out.push_back(embed_token(tape, table, id, vocab_size, dim));
  return out;
}

// One LSTM cell step with fused gate layout [input; forget; output; candidate].
inline std::pair<Var, Var> lstm_step(Tape& tape, Var x, Var h_prev, Var c_prev,
                                     Var W, Var b, int hidden) {
  Var z = tape.concat(x, h_prev);
  Var pre = tape.affine(W, z, b);
  Var gi = tape.sigmoid(tape.slice(pre, 0, hidden));
  Var gf = tape.sigmoid(tape.slice(pre, hidden, hidden));
  Var go = tape.sigmoid(tape.slice(pre, 2 * hidden, hidden));
  Var gu = tape.tanh(tape.slice(pre, 3 * hidden, hidden));
  Var c = tape.add(tape.mul(gf, c_prev), tape.mul(gi, gu));
  Var h = tape.mul(go, tape.tanh(c));
  return {h, c};
}

// Bidirectional LSTM over the (possibly padded) embedding sequence. Each
// position yields h = [h_fwd; h_bwd], c = [c_fwd; c_bwd], v = [h; c], so a
// leaf state has width 4H.
inline std::vector<NodeState> bilstm_leaf_states(Tape& tape,
                                                 const std::vector<Var>& embeddings,
                                                 const BiLstmVars& params) {
  if (embeddings.empty()) throw DataError("bilstm_leaf_states: empty sequence");
  int m = static_cast<int>(embeddings.size());
  int H = params.hidden;
  std::vector<double> zeros(static_cast<std::size_t>(H), 0.0);
  Var h0 = tape.constant(zeros);
  Var c0 = tape.constant(zeros);

  std::vector<Var> hf(m), cf(m), hb(m), cb(m);
  Var h = h0, c = c0;
  for (int i = 0; i < m; ++i) {
    std::tie(h, c) = lstm_step(tape, embeddings[i], h, c, params.fwd_W, params.fwd_b, H);
    hf[i] = h;
    cf[i] = c;
  }
  h = h0;
  c = c0;
  for (int i = m - 1; i >= 0; --i) {
    std::tie(h, c) = lstm_step(tape, embeddings[i], h, c, params.bwd_W, params.bwd_b, H);
    hb[i] = h;
    cb[i] = c;
  }

  std::vector<NodeState> out;
  out.reserve(m);
  for (int i = 0; i < m; ++i)
    out.push_back(make_node_state(tape, tape.concat(hf[i], hb[i]), tape.concat(cf[i], cb[i])));
  return out;
}

// Binary TreeLSTM composition with separate left/right forget gates over the
// concatenated children hidden states.
inline NodeState treelstm_merge(Tape& tape, const NodeState& left, const NodeState& right,
                                const TreeLstmVars& params) {
  if (tape.numel(left.h) != tape.numel(right.h) ||
      tape.numel(left.c) != tape.numel(right.c))
    throw DataError("treelstm_merge: child dimension mismatch");
  Var z = tape.concat(left.h, right.h);
  Var gi = tape.sigmoid(tape.affine(params.W_in, z, params.b_in));
  Var fl = tape.sigmoid(tape.affine(params.W_fl, z, params.b_f));
  Var fr = tape.sigmoid(tape.affine(params.W_fr, z, params.b_f));
  Var go = tape.sigmoid(tape.affine(params.W_out, z, params.b_out));
  Var gu = tape.tanh(tape.affine(params.W_cand, z, params.b_cand));
  Var c = tape.add(tape.add(tape.mul(fl, left.c), tape.mul(fr, right.c)), tape.mul(gi, gu));
  Var h = tape.mul(go, tape.tanh(c));
  return make_node_state(tape, h, c);
}

// Optional warm start from a whitespace-delimited word-vector text file
// (token followed by `dim` reals per line). Tokens absent from the vocabulary
// are ignored; vocabulary tokens absent from the file keep their random init.
// Returns the number of rows loaded.
template <typename TokenToId>
int load_word_vectors(const std::string& path, Tensor& table, int dim,
                      const TokenToId& token_to_id) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open word-vector file: " + path);
  std::string line;
  int loaded = 0, lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string token;
    ss >> token;
    int id = token_to_id(token);
    if (id < 0) {
      continue;  // not in vocabulary
    }
    for (int j = 0; j < dim; ++j) {
      double v;
      if (!(ss >> v))
        throw DataError(path + ":" + std::to_string(lineno) +
                        ": expected " + std::to_string(dim) + " values");
      table.value[static_cast<std::size_t>(id) * dim + j] = v;
    }
    ++loaded;
  }
  return loaded;
}

}  // namespace rvg
