#pragma once

#include <atm/error.hpp>
#include <atm/sequences.hpp>
#include <atm/tensor.hpp>

#include <cmath>
#include <span>
#include <vector>

namespace atm {

// Next-token view of a target sequence: inputs[t] predicts targets[t].
struct ShiftedExample {
  TokenIds inputs;
  TokenIds targets;
  std::vector<bool> mask;

  std::size_t scored() const {
    std::size_t n = 0;
    for (bool b : mask) n += b ? 1 : 0;
    return n;
  }
};

inline ShiftedExample shift(std::span<const TokenId> ids, const std::vector<bool>& mask) {
  if (ids.size() < 2 || mask.size() != ids.size()) throw InputError("target sequence too short to shift");
  ShiftedExample ex;
  ex.inputs.assign(ids.begin(), ids.end() - 1);
  ex.targets.assign(ids.begin() + 1, ids.end());
  ex.mask.assign(mask.begin() + 1, mask.end());
  return ex;
}

inline ShiftedExample shift(const TargetSequence& seq) { return shift(seq.ids, seq.mask); }

// Mean over scored positions of -log softmax(logits)[target].
template <typename T>
double nll_loss(const Mat<T>& logits, std::span<const TokenId> targets, const std::vector<bool>& mask) {
  if (static_cast<std::size_t>(logits.rows()) != targets.size() || targets.size() != mask.size()) {
    throw InputError("nll_loss: logits, targets and mask lengths differ");
  }
  double total = 0.0;
  std::size_t count = 0;
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    if (!mask[static_cast<std::size_t>(r)]) continue;
    const TokenId t = targets[static_cast<std::size_t>(r)];
    if (t < 0 || t >= logits.cols()) throw InputError("nll_loss: target id out of range");
    const double mx = static_cast<double>(logits.row(r).maxCoeff());
    double sum = 0.0;
    for (Eigen::Index c = 0; c < logits.cols(); ++c) sum += std::exp(static_cast<double>(logits(r, c)) - mx);
    total += -(static_cast<double>(logits(r, t)) - mx - std::log(sum));
    ++count;
  }
  if (count == 0) throw InputError("nll_loss: every position is masked");
  return total / static_cast<double>(count);
}

// Row-wise softmax, for inspection and invariant checks.
template <typename T>
Mat<T> softmax_rows(const Mat<T>& logits) {
  Mat<T> p(logits.rows(), logits.cols());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const T mx = logits.row(r).maxCoeff();
    p.row(r) = (logits.row(r).array() - mx).exp().matrix();
    p.row(r) /= p.row(r).sum();
  }
  return p;
}

}  // namespace atm
