#pragma once

// Central finite-difference verification of tape gradients (64-bit only).

#include <atm/autodiff.hpp>
#include <atm/error.hpp>
#include <atm/losses.hpp>
#include <atm/model.hpp>

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace atm {

struct GradCheckOptions {
  double step = 1e-5;
  // Denominator floor of the relative error; with it, entries whose true
  // gradient is ~0 are judged by absolute error (floor * tolerance).
  double floor = 1e-5;
};

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::string worst_parameter;
  std::size_t entries_checked = 0;
};

inline double relative_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

// build_loss must construct a fresh scalar loss on the given tape from the
// current parameter values.
inline GradCheckResult check_gradients(std::span<Parameter<double>* const> params,
                                       const std::function<Var(Tape<double>&)>& build_loss,
                                       const GradCheckOptions& options = {}) {
  for (Parameter<double>* p : params) p->zero_grad();
  {
    Tape<double> tape;
    Var loss = build_loss(tape);
    tape.backward(loss);
  }
  auto eval = [&] {
    Tape<double> tape;
    return tape.value(build_loss(tape))(0, 0);
  };

  GradCheckResult result;
  for (Parameter<double>* p : params) {
    if (!all_finite(p->grad)) throw NumericError("non-finite gradient in " + p->name);
    for (Eigen::Index i = 0; i < p->value.size(); ++i) {
      double& w = p->value.data()[i];
      const double saved = w;
      w = saved + options.step;
      const double up = eval();
      w = saved - options.step;
      const double down = eval();
      w = saved;
      const double numeric = (up - down) / (2.0 * options.step);
      if (!std::isfinite(numeric)) throw NumericError("non-finite finite-difference estimate in " + p->name);
      const double err = relative_error(p->grad.data()[i], numeric, options.floor);
      ++result.entries_checked;
      if (err > result.max_relative_error) {
        result.max_relative_error = err;
        result.worst_parameter = p->name + "[" + std::to_string(i) + "]";
      }
    }
  }
  return result;
}

// Gradient check of the mean masked next-token loss of one example.
inline GradCheckResult backward_check(TinyTransformer<double>& model, const ShiftedExample& example,
                                      const GradCheckOptions& options = {}) {
  const double weight = 1.0 / static_cast<double>(example.scored());
  auto params = model.parameters();
  return check_gradients(params, [&](Tape<double>& tape) {
    Var logits = model.forward(tape, example.inputs);
    return tape.cross_entropy_sum(logits, example.targets, example.mask, weight);
  }, options);
}

}  // namespace atm
