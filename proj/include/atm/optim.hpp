#pragma once

#include <atm/autodiff.hpp>
#include <atm/error.hpp>

#include <cmath>
#include <numbers>
#include <span>
#include <vector>

namespace atm {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.1;
};

// Adam with decoupled weight decay (decay scales the weights directly and
// never enters the moment estimates).
template <typename T>
class AdamW {
 public:
  struct State {
    Mat<T> m;
    Mat<T> v;
  };

  explicit AdamW(AdamConfig config = {}) : config_(config) {}

  const AdamConfig& config() const { return config_; }
  long steps() const { return steps_; }
  std::vector<State>& state() { return state_; }
  const std::vector<State>& state() const { return state_; }
  void restore(long steps, std::vector<State> state) {
    steps_ = steps;
    state_ = std::move(state);
  }

  void step(std::span<Parameter<T>* const> params, double lr) {
    if (state_.empty()) {
      for (Parameter<T>* p : params) {
        state_.push_back({Mat<T>::Zero(p->value.rows(), p->value.cols()), Mat<T>::Zero(p->value.rows(), p->value.cols())});
      }
    }
    if (state_.size() != params.size()) throw NumericError("optimizer state does not match parameter list");
    ++steps_;
    const T b1 = static_cast<T>(config_.beta1);
    const T b2 = static_cast<T>(config_.beta2);
    const T bc1 = static_cast<T>(1.0 - std::pow(config_.beta1, static_cast<double>(steps_)));
    const T bc2 = static_cast<T>(1.0 - std::pow(config_.beta2, static_cast<double>(steps_)));
    const T step_size = static_cast<T>(lr) / bc1;
    const T sqrt_bc2 = std::sqrt(bc2);
    const T eps = static_cast<T>(config_.eps);
    for (std::size_t i = 0; i < params.size(); ++i) {
      Parameter<T>& p = *params[i];
      if (p.grad.size() == 0) p.zero_grad();
      State& s = state_[i];
      if (p.decay && config_.weight_decay != 0.0) p.value *= static_cast<T>(1.0 - lr * config_.weight_decay);
      s.m = b1 * s.m + (T(1) - b1) * p.grad;
      s.v = b2 * s.v + (T(1) - b2) * p.grad.cwiseProduct(p.grad);
      p.value.array() -= step_size * s.m.array() / (s.v.array().sqrt() / sqrt_bc2 + eps);
      if (!all_finite(p.value)) throw NumericError("non-finite value in " + p.name + " after optimizer step");
    }
  }

 private:
  AdamConfig config_;
  long steps_ = 0;
  std::vector<State> state_;
};

// Scales all gradients so their global L2 norm is at most max_norm.
// Returns the norm before clipping.
template <typename T>
double clip_grad_norm(std::span<Parameter<T>* const> params, double max_norm) {
  double sq = 0.0;
  for (const Parameter<T>* p : params) {
    if (p->grad.size() != 0) sq += static_cast<double>(p->grad.squaredNorm());
  }
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) throw NumericError("non-finite gradient norm");
  if (max_norm > 0.0 && norm > max_norm) {
    const T s = static_cast<T>(max_norm / (norm + 1e-6));
    for (Parameter<T>* p : params) {
      if (p->grad.size() != 0) p->grad *= s;
    }
  }
  return norm;
}

// Linear warm-up to the peak, then cosine annealing that restarts at the
// peak on every cycle boundary. Cycle boundaries fall on multiples of
// cycle_steps, so the first cycle is whatever remains of the cycle in which
// warm-up ends; later cycles grow by cycle_mult.
struct LrSchedule {
  double peak = 1e-5;
  long warmup_steps = 1200;
  long cycle_steps = 0;  // 0 = a single cosine without restarts
  double cycle_mult = 1.0;
  long total_steps = 0;  // used when cycle_steps == 0
};

inline double lr_at(long step, const LrSchedule& s) {
  if (step < 0) return 0.0;
  if (s.warmup_steps > 0 && step < s.warmup_steps) {
    return s.peak * static_cast<double>(step) / static_cast<double>(s.warmup_steps);
  }
  long start = s.warmup_steps;
  long end = 0;
  if (s.cycle_steps <= 0) {
    end = std::max(s.total_steps, start + 1);
    if (step >= end) return 0.0;
  } else {
    end = (start / s.cycle_steps + 1) * s.cycle_steps;
    double len = static_cast<double>(s.cycle_steps);
    while (step >= end) {
      start = end;
      len *= s.cycle_mult;
      end = start + std::max(1L, static_cast<long>(std::llround(len)));
    }
  }
  const double progress = static_cast<double>(step - start) / static_cast<double>(end - start);
  return s.peak * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

}  // namespace atm
