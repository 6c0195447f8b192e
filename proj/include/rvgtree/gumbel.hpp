#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "rvgtree/common.hpp"
#include "rvgtree/tape.hpp"

namespace rvg {

// Temperature-controlled stochastic relaxation of argmax selection. With
// noise disabled the sampler is deterministic given its inputs.
class GumbelSampler {
 public:
  GumbelSampler(double tau, bool noise_enabled, std::uint64_t seed)
      : tau_(check_tau(tau)), noise_(noise_enabled), rng_(seed) {}

  double tau() const { return tau_; }
  void set_tau(double t) { tau_ = check_tau(t); }

  bool noise_enabled() const { return noise_; }
  void set_noise_enabled(bool on) { noise_ = on; }

  double gumbel_noise() {
    double u = rng_.uniform_open();
    return -std::log(-std::log(u));
  }

  Rng& rng() { return rng_; }

 private:
  static double check_tau(double t) {
    if (!(t > 0.0)) throw std::invalid_argument("gumbel temperature must be positive");
    return t;
  }

  double tau_;
  bool noise_;
  Rng rng_;
};

struct GumbelSample {
  Var onehot;  // forward: exact one-hot of the selection; backward: straight-through
  Var soft;    // softmax of the (perturbed) logits at temperature tau
  int index = -1;
};

// Straight-through Gumbel-Softmax over raw logits. Forward selects the argmax
// of (logits + noise) / tau and emits its one-hot; the gradient flows through
// the soft distribution unchanged. Noise is drawn per entry when enabled.
inline GumbelSample gumbel_st_sample(Tape& tape, GumbelSampler& sampler, Var logits,
                                     const std::vector<std::uint8_t>* mask = nullptr) {
  int k = tape.numel(logits);
  if (mask && static_cast<int>(mask->size()) != k)
    throw DataError("gumbel_st_sample: mask length mismatch");
  Var perturbed = logits;
  if (sampler.noise_enabled()) {
    std::vector<double> noise(static_cast<std::size_t>(k));
    for (double& g : noise) g = sampler.gumbel_noise();
    perturbed = tape.add(perturbed, tape.constant(std::move(noise)));
  }
  if (sampler.tau() != 1.0) perturbed = tape.scale(perturbed, 1.0 / sampler.tau());

  GumbelSample out;
  out.soft = tape.softmax(perturbed, mask);
  out.index = argmax_index(tape.value(perturbed), mask);
  out.onehot = tape.st_onehot(out.soft, out.index);
  return out;
}

}  // namespace rvg
