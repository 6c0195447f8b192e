#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <map>
#include <ostream>
#include <string>
#include <thread>
#include <vector>

#include "rvgtree/grounding.hpp"
#include "rvgtree/model.hpp"
#include "rvgtree/params.hpp"

namespace rvg {

struct TrainConfig {
  double learning_rate = 0.001;
  double adam_beta1 = 0.8;  // first-moment decay
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  int batch_size = 32;
  double tau = 1.0;
  bool noise = true;  // Gumbel noise while training; always off at evaluation
  int max_sentence_length = 10;
  bool pad_to_max = false;
  std::uint64_t seed = 42;
  Variant variant = Variant::Full;
  int pretrain_epochs = 5;
  int finetune_epochs = 20;
  double tree_loss_weight = 1.0;

  void validate() const {
    if (learning_rate <= 0 || adam_beta1 <= 0 || adam_beta2 <= 0 || adam_eps <= 0)
      throw DataError("train config: rates must be positive");
    if (adam_beta1 >= 1 || adam_beta2 >= 1)
      throw DataError("train config: moment decays must be < 1");
    if (batch_size < 1) throw DataError("train config: batch size must be >= 1");
    if (max_sentence_length < 1) throw DataError("train config: max length must be >= 1");
    if (tau <= 0) throw DataError("train config: tau must be positive");
  }
};

// Cross-entropy over regions against the ground-truth referent.
inline Var grounding_loss(Tape& tape, Var root_scores, int gt) {
  int n = tape.numel(root_scores);
  if (gt < 0 || gt >= n)
    throw DataError("grounding_loss: ground-truth index " + std::to_string(gt) +
                    " out of range for " + std::to_string(n) + " regions");
  return tape.neg(tape.pick(tape.log_softmax(root_scores), gt));
}

// Standard bias-corrected Adam over every registered tensor; grads are zeroed
// after the update.
inline void adam_step(ParameterStore& store, const TrainConfig& cfg) {
  std::int64_t t = ++store.adam_step_count;
  double bc1 = 1.0 - std::pow(cfg.adam_beta1, static_cast<double>(t));
  double bc2 = 1.0 - std::pow(cfg.adam_beta2, static_cast<double>(t));
  for (std::size_t e = 0; e < store.count(); ++e) {
    auto& entry = store.entry(e);
    for (std::size_t i = 0; i < entry.tensor.value.size(); ++i) {
      double g = entry.tensor.grad[i];
      if (!std::isfinite(g))
        throw NumericError("adam_step: non-finite gradient in " + entry.name +
                           "[" + std::to_string(i) + "]");
      entry.adam_m[i] = cfg.adam_beta1 * entry.adam_m[i] + (1.0 - cfg.adam_beta1) * g;
      entry.adam_v[i] = cfg.adam_beta2 * entry.adam_v[i] + (1.0 - cfg.adam_beta2) * g * g;
      double mhat = entry.adam_m[i] / bc1;
      double vhat = entry.adam_v[i] / bc2;
      entry.tensor.value[i] -= cfg.learning_rate * mhat / (std::sqrt(vhat) + cfg.adam_eps);
    }
    entry.tensor.zero_grad();
  }
}

// ---------------------------------------------------------------------------
// Batched steps
// ---------------------------------------------------------------------------

struct TrainingExample {
  std::string id;
  std::string scene_id;
  SentenceTokens tokens;
  std::vector<Region> regions;
  int gt = 0;
};

struct StepResult {
  double loss = 0.0;       // mean grounding loss over processed examples
  double tree_loss = 0.0;  // mean merge supervision loss (pretrain only)
  int processed = 0;
  int skipped = 0;  // pretrain examples without an expert tree
  int correct = 0;  // argmax matches within the batch
};

using ExpertTreeMap = std::map<std::string, ExpertTree>;

// Supervised pretraining step: trees are forced to the expert layout, node
// roles are sampled as usual, and the merge policy is trained with
// cross-entropy on its own distribution at every layer.
inline StepResult pretrain_step(Model& model, const std::vector<TrainingExample>& batch,
                                const ExpertTreeMap& experts, GumbelSampler& sampler,
                                const TrainConfig& cfg) {
  StepResult result;
  std::vector<const TrainingExample*> valid;
  for (const TrainingExample& ex : batch) {
    if (experts.count(ex.id)) {
      valid.push_back(&ex);
    } else {
      ++result.skipped;
    }
  }
  if (valid.empty()) return result;
  // Fix keeps the expert layout at inference and has no merge policy to train
  double tree_weight =
      model.config().variant == Variant::Fix ? 0.0 : cfg.tree_loss_weight;
  double inv = 1.0 / static_cast<double>(valid.size());
  for (const TrainingExample* ex : valid) {
    Tape tape;
    Model::ForwardOptions opts;
    opts.tree_mode = TreeMode::Expert;
    opts.role_mode = RoleMode::Sample;
    opts.expert = &experts.at(ex->id);
    opts.want_tree_loss = tree_weight != 0.0;
    auto fwd = model.forward(tape, ex->tokens, ex->regions, opts, sampler);
    Var gl = grounding_loss(tape, fwd.root_scores, ex->gt);
    Var total = tree_weight != 0.0
                    ? tape.add(gl, tape.scale(fwd.tree_loss, tree_weight))
                    : gl;
    tape.backward(tape.scale(total, inv));
    result.loss += tape.scalar(gl) * inv;
    if (tree_weight != 0.0) result.tree_loss += tape.scalar(fwd.tree_loss) * inv;
    if (argmax_index(tape.value(fwd.root_scores)) == ex->gt) ++result.correct;
    ++result.processed;
  }
  adam_step(model.store(), cfg);
  return result;
}

// Weakly supervised fine-tuning step: trees and roles sampled straight-through.
inline StepResult finetune_step(Model& model, const std::vector<TrainingExample>& batch,
                                GumbelSampler& sampler, const TrainConfig& cfg) {
  StepResult result;
  if (batch.empty()) return result;
  double inv = 1.0 / static_cast<double>(batch.size());
  for (const TrainingExample& ex : batch) {
    Tape tape;
    Model::ForwardOptions opts;
    opts.tree_mode = TreeMode::Train;
    opts.role_mode = RoleMode::Sample;
    if (model.config().variant == Variant::Fix)
      throw DataError("finetune_step: Fix variant requires expert trees; use pretrain_step");
    auto fwd = model.forward(tape, ex.tokens, ex.regions, opts, sampler);
    Var gl = grounding_loss(tape, fwd.root_scores, ex.gt);
    tape.backward(tape.scale(gl, inv));
    result.loss += tape.scalar(gl) * inv;
    if (argmax_index(tape.value(fwd.root_scores)) == ex.gt) ++result.correct;
    ++result.processed;
  }
  adam_step(model.store(), cfg);
  return result;
}

// ---------------------------------------------------------------------------
// Epoch loops and evaluation
// ---------------------------------------------------------------------------

enum class Phase { Pretrain, Finetune };

inline const char* phase_name(Phase p) {
  return p == Phase::Pretrain ? "pretrain" : "finetune";
}

struct TrainLogger {
  std::ostream* out = nullptr;
  long long step = 0;
  long long seen = 0;
  long long correct = 0;

  void log(Phase phase, const StepResult& r) {
    ++step;
    seen += r.processed;
    correct += r.correct;
    if (!out) return;
    double acc = seen > 0 ? static_cast<double>(correct) / static_cast<double>(seen) : 0.0;
    (*out) << "step " << step << " phase " << phase_name(phase) << " loss "
           << format_double(r.loss) << " tree_loss " << format_double(r.tree_loss)
           << " acc_so_far " << format_double(acc) << "\n";
  }
};

inline int env_thread_cap() {
  const char* env = std::getenv("RVG_THREADS");
  if (!env) return 0;
  int v = std::atoi(env);
  return v > 0 ? v : 1;
}

struct EvalResult {
  double accuracy = 0.0;
  int correct = 0;
  int total = 0;
  bool iou_based = false;
  std::vector<int> predictions;
};

// Argmax grounding over a frozen model. Noise is always off. Examples are
// independent, so evaluation parallelizes over a read-only parameter store;
// RVG_THREADS caps the worker count.
inline EvalResult evaluate(Model& model, const std::vector<TrainingExample>& examples,
                           double tau, const ExpertTreeMap* experts = nullptr,
                           int max_threads = 0) {
  EvalResult result;
  result.total = static_cast<int>(examples.size());
  result.predictions.assign(examples.size(), -1);
  if (examples.empty()) return result;

  bool fix_variant = model.config().variant == Variant::Fix;
  if (fix_variant && !experts)
    throw DataError("evaluate: Fix variant requires expert trees");

  auto run_one = [&](std::size_t i) {
    const TrainingExample& ex = examples[i];
    Tape tape;
    GumbelSampler sampler(tau, /*noise=*/false, /*seed=*/0);
    Model::ForwardOptions opts;
    opts.tree_mode = TreeMode::Eval;
    opts.role_mode = RoleMode::Argmax;
    if (fix_variant) {
      auto it = experts->find(ex.id);
      if (it == experts->end())
        throw DataError("evaluate: missing expert tree for " + ex.id);
      opts.tree_mode = TreeMode::Expert;
      opts.expert = &it->second;
    }
    auto fwd = model.forward(tape, ex.tokens, ex.regions, opts, sampler);
    result.predictions[i] = argmax_index(tape.value(fwd.root_scores));
  };

  int hw = static_cast<int>(std::thread::hardware_concurrency());
  int cap = env_thread_cap();
  int threads = max_threads > 0 ? max_threads : (hw > 0 ? hw : 1);
  if (cap > 0) threads = std::min(threads, cap);
  threads = std::min<int>(threads, static_cast<int>(examples.size()));

  if (threads <= 1) {
    for (std::size_t i = 0; i < examples.size(); ++i) run_one(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(threads));
    for (int t = 0; t < threads; ++t) {
      pool.emplace_back([&, t] {
        try {
          for (std::size_t i = next.fetch_add(1); i < examples.size();
               i = next.fetch_add(1))
            run_one(i);
        } catch (...) {
          errors[static_cast<std::size_t>(t)] = std::current_exception();
        }
      });
    }
    for (auto& th : pool) th.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }

  bool all_boxed = true;
  for (const TrainingExample& ex : examples)
    for (const Region& r : ex.regions) all_boxed = all_boxed && r.has_box;
  result.iou_based = all_boxed;

  for (std::size_t i = 0; i < examples.size(); ++i) {
    const TrainingExample& ex = examples[i];
    int pred = result.predictions[i];
    bool ok;
    if (result.iou_based) {
      ok = iou(ex.regions[static_cast<std::size_t>(pred)].box,
               ex.regions[static_cast<std::size_t>(ex.gt)].box) > 0.5;
    } else {
      ok = pred == ex.gt;
    }
    if (ok) ++result.correct;
  }
  result.accuracy = static_cast<double>(result.correct) / static_cast<double>(result.total);
  return result;
}

// Full two-phase schedule. Pretraining is skipped for the Scratch variant
// (and when no expert trees are supplied for variants that do not need them).
inline void run_training(Model& model, std::vector<TrainingExample> examples,
                         const ExpertTreeMap* experts, const TrainConfig& cfg,
                         TrainLogger& logger) {
  cfg.validate();
  Rng order_rng(cfg.seed ^ 0x9e3779b97f4a7c15ull);
  GumbelSampler sampler(cfg.tau, cfg.noise, cfg.seed ^ 0xd1b54a32d192ed03ull);

  auto run_phase = [&](Phase phase, int epochs) {
    for (int epoch = 0; epoch < epochs; ++epoch) {
      // Fisher-Yates shuffle with the run's own stream
      for (std::size_t i = examples.size(); i > 1; --i) {
        std::size_t j = static_cast<std::size_t>(order_rng.uniform_int(static_cast<int>(i)));
        std::swap(examples[i - 1], examples[j]);
      }
      for (std::size_t start = 0; start < examples.size();
           start += static_cast<std::size_t>(cfg.batch_size)) {
        std::size_t end = std::min(examples.size(),
                                   start + static_cast<std::size_t>(cfg.batch_size));
        std::vector<TrainingExample> batch(examples.begin() + start,
                                           examples.begin() + end);
        StepResult r;
        if (phase == Phase::Pretrain) {
          r = pretrain_step(model, batch, *experts, sampler, cfg);
        } else if (model.config().variant == Variant::Fix) {
          r = pretrain_step(model, batch, *experts, sampler, cfg);
        } else {
          r = finetune_step(model, batch, sampler, cfg);
        }
        logger.log(phase, r);
      }
    }
  };

  bool pretrain = cfg.variant != Variant::Scratch && cfg.variant != Variant::Chain &&
                  experts != nullptr && cfg.pretrain_epochs > 0;
  if (pretrain) run_phase(Phase::Pretrain, cfg.pretrain_epochs);
  run_phase(Phase::Finetune, cfg.finetune_epochs);
}

}  // namespace rvg
