#pragma once

// Tape-based reverse-mode differentiation over dense row-major matrices.
//
// Every op records its output as a node and a closure that pushes the node's
// gradient back into its inputs. Nodes are appended in evaluation order, so
// replaying the closures in reverse is a valid topological order.

#include <atm/error.hpp>
#include <atm/tensor.hpp>

#include <cassert>
#include <cmath>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

namespace atm {

template <typename T>
struct Parameter {
  std::string name;
  Mat<T> value;
  Mat<T> grad;
  bool decay = true;  // participates in decoupled weight decay

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

template <typename P>
P* find_parameter(const std::vector<P*>& params, const std::string& name) {
  for (P* p : params) {
    if (p->name == name) return p;
  }
  throw std::out_of_range("no parameter named " + name);
}

struct Var {
  std::size_t id = 0;
};

template <typename T>
class Tape {
 public:
  Tape() { nodes_.reserve(256); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  const Mat<T>& value(Var v) const { return nodes_[v.id].value; }
  const Mat<T>& grad(Var v) const { return nodes_[v.id].grad; }
  std::size_t size() const { return nodes_.size(); }

  Var constant(Mat<T> value) { return push(std::move(value), false); }

  // A free input that records its own gradient (used by perturbation tests).
  Var input(Mat<T> value) { return push(std::move(value), true); }

  Var param(Parameter<T>& p) {
    Var v = push(p.value, true);
    nodes_[v.id].param = &p;
    return v;
  }

  Var matmul(Var a, Var b) {
    Var out = push(value(a) * value(b), needs(a) || needs(b));
    on_backward(out, [this, a, b, out] {
      const Mat<T>& g = nodes_[out.id].grad;
      if (needs(a)) accumulate(a, g * value(b).transpose());
      if (needs(b)) accumulate(b, value(a).transpose() * g);
    });
    return out;
  }

  // a * b^T
  Var matmul_nt(Var a, Var b) {
    Var out = push(value(a) * value(b).transpose(), needs(a) || needs(b));
    on_backward(out, [this, a, b, out] {
      const Mat<T>& g = nodes_[out.id].grad;
      if (needs(a)) accumulate(a, g * value(b));
      if (needs(b)) accumulate(b, g.transpose() * value(a));
    });
    return out;
  }

  Var add(Var a, Var b) {
    assert(value(a).rows() == value(b).rows() && value(a).cols() == value(b).cols());
    Var out = push(value(a) + value(b), needs(a) || needs(b));
    on_backward(out, [this, a, b, out] {
      const Mat<T>& g = nodes_[out.id].grad;
      if (needs(a)) accumulate(a, g);
      if (needs(b)) accumulate(b, g);
    });
    return out;
  }

  // Adds a 1 x n row to every row of a.
  Var add_row(Var a, Var row) {
    Mat<T> v = value(a);
    v.rowwise() += value(row).row(0);
    Var out = push(std::move(v), needs(a) || needs(row));
    on_backward(out, [this, a, row, out] {
      const Mat<T>& g = nodes_[out.id].grad;
      if (needs(a)) accumulate(a, g);
      if (needs(row)) accumulate(row, g.colwise().sum());
    });
    return out;
  }

  // tanh approximation, as in GPT-2.
  Var gelu(Var a) {
    const Mat<T>& x = value(a);
    Mat<T> y(x.rows(), x.cols());
    const T c = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
    const T k = static_cast<T>(0.044715);
    for (Eigen::Index i = 0; i < x.size(); ++i) {
      const T xi = x.data()[i];
      y.data()[i] = T(0.5) * xi * (T(1) + std::tanh(c * (xi + k * xi * xi * xi)));
    }
    Var out = push(std::move(y), needs(a));
    on_backward(out, [this, a, out, c, k] {
      const Mat<T>& g = nodes_[out.id].grad;
      const Mat<T>& xv = value(a);
      Mat<T> gx(xv.rows(), xv.cols());
      for (Eigen::Index i = 0; i < xv.size(); ++i) {
        const T xi = xv.data()[i];
        const T u = c * (xi + k * xi * xi * xi);
        const T t = std::tanh(u);
        const T du = c * (T(1) + T(3) * k * xi * xi);
        gx.data()[i] = g.data()[i] * (T(0.5) * (T(1) + t) + T(0.5) * xi * (T(1) - t * t) * du);
      }
      accumulate(a, gx);
    });
    return out;
  }

  Var layer_norm(Var x, Var gamma, Var beta, T eps = T(1e-5)) {
    const Mat<T>& xv = value(x);
    const Eigen::Index n = xv.cols();
    Mat<T> xhat(xv.rows(), n);
    std::vector<T> rstd(static_cast<std::size_t>(xv.rows()));
    for (Eigen::Index r = 0; r < xv.rows(); ++r) {
      const T mean = xv.row(r).mean();
      const T var = (xv.row(r).array() - mean).square().mean();
      const T rs = T(1) / std::sqrt(var + eps);
      rstd[static_cast<std::size_t>(r)] = rs;
      xhat.row(r) = (xv.row(r).array() - mean) * rs;
    }
    Mat<T> y = xhat;
    y.array().rowwise() *= value(gamma).row(0).array();
    y.rowwise() += value(beta).row(0);
    Var out = push(std::move(y), needs(x) || needs(gamma) || needs(beta));
    on_backward(out, [this, x, gamma, beta, out, xhat = std::move(xhat), rstd = std::move(rstd)] {
      const Mat<T>& g = nodes_[out.id].grad;
      if (needs(gamma)) accumulate(gamma, (g.array() * xhat.array()).colwise().sum().matrix());
      if (needs(beta)) accumulate(beta, g.colwise().sum());
      if (needs(x)) {
        Mat<T> dxhat = g;
        dxhat.array().rowwise() *= value(gamma).row(0).array();
        Mat<T> dx(g.rows(), g.cols());
        for (Eigen::Index r = 0; r < g.rows(); ++r) {
          const T m1 = dxhat.row(r).mean();
          const T m2 = (dxhat.row(r).array() * xhat.row(r).array()).mean();
          dx.row(r) = rstd[static_cast<std::size_t>(r)] *
                      (dxhat.row(r).array() - m1 - xhat.row(r).array() * m2);
        }
        accumulate(x, dx);
      }
    });
    return out;
  }

  // Gathers rows of a V x H table.
  Var embed(Var table, std::span<const TokenId> ids) {
    const Mat<T>& tv = value(table);
    Mat<T> y(static_cast<Eigen::Index>(ids.size()), tv.cols());
    for (std::size_t i = 0; i < ids.size(); ++i) y.row(static_cast<Eigen::Index>(i)) = tv.row(ids[i]);
    Var out = push(std::move(y), needs(table));
    on_backward(out, [this, table, out, idv = std::vector<TokenId>(ids.begin(), ids.end())] {
      const Mat<T>& g = nodes_[out.id].grad;
      Node& tn = nodes_[table.id];
      if (tn.grad.size() == 0) tn.grad.setZero(tn.value.rows(), tn.value.cols());
      for (std::size_t i = 0; i < idv.size(); ++i) tn.grad.row(idv[i]) += g.row(static_cast<Eigen::Index>(i));
    });
    return out;
  }

  Var rows(Var a, Eigen::Index start, Eigen::Index count) {
    Var out = push(value(a).middleRows(start, count), needs(a));
    on_backward(out, [this, a, out, start, count] {
      const Mat<T>& g = nodes_[out.id].grad;
      Node& an = nodes_[a.id];
      if (an.grad.size() == 0) an.grad.setZero(an.value.rows(), an.value.cols());
      an.grad.middleRows(start, count) += g;
    });
    return out;
  }

  Var concat_rows(Var a, Var b) {
    const Mat<T>& av = value(a);
    const Mat<T>& bv = value(b);
    Mat<T> y(av.rows() + bv.rows(), av.cols());
    y.topRows(av.rows()) = av;
    y.bottomRows(bv.rows()) = bv;
    Var out = push(std::move(y), needs(a) || needs(b));
    on_backward(out, [this, a, b, out] {
      const Mat<T>& g = nodes_[out.id].grad;
      const Eigen::Index ra = value(a).rows();
      if (needs(a)) accumulate(a, g.topRows(ra));
      if (needs(b)) accumulate(b, g.bottomRows(g.rows() - ra));
    });
    return out;
  }

  // Replaces the leading rows of x with p; x receives no gradient for them.
  Var overwrite_rows(Var x, Var p) {
    Mat<T> y = value(x);
    const Eigen::Index k = value(p).rows();
    y.topRows(k) = value(p);
    Var out = push(std::move(y), needs(x) || needs(p));
    on_backward(out, [this, x, p, out, k] {
      const Mat<T>& g = nodes_[out.id].grad;
      if (needs(p)) accumulate(p, g.topRows(k));
      if (needs(x)) {
        Mat<T> gx = g;
        gx.topRows(k).setZero();
        accumulate(x, gx);
      }
    });
    return out;
  }

  // Multi-head attention over pre-projected q (Lq x H), k and v (Lk x H).
  // Causal attention requires Lq == Lk. When probs_out is given it receives
  // one Lq x Lk probability matrix per head.
  Var attention(Var q, Var k, Var v, int heads, bool causal, T scale,
                std::vector<Mat<T>>* probs_out = nullptr) {
    const Mat<T>& qv = value(q);
    const Mat<T>& kv = value(k);
    const Mat<T>& vv = value(v);
    const Eigen::Index lq = qv.rows();
    const Eigen::Index lk = kv.rows();
    const Eigen::Index hd = qv.cols() / heads;
    assert(!causal || lq == lk);
    std::vector<Mat<T>> probs(static_cast<std::size_t>(heads));
    Mat<T> y(lq, qv.cols());
    for (int h = 0; h < heads; ++h) {
      Mat<T> s = (qv.middleCols(h * hd, hd) * kv.middleCols(h * hd, hd).transpose()) * scale;
      for (Eigen::Index r = 0; r < lq; ++r) {
        const Eigen::Index visible = causal ? r + 1 : lk;
        const T mx = s.row(r).head(visible).maxCoeff();
        T sum = 0;
        for (Eigen::Index c = 0; c < visible; ++c) {
          const T e = std::exp(s(r, c) - mx);
          s(r, c) = e;
          sum += e;
        }
        s.row(r).head(visible) /= sum;
        if (visible < lk) s.row(r).tail(lk - visible).setZero();
      }
      y.middleCols(h * hd, hd) = s * vv.middleCols(h * hd, hd);
      probs[static_cast<std::size_t>(h)] = std::move(s);
    }
    if (probs_out != nullptr) *probs_out = probs;
    Var out = push(std::move(y), needs(q) || needs(k) || needs(v));
    on_backward(out, [this, q, k, v, out, heads, hd, scale, probs = std::move(probs)] {
      const Mat<T>& g = nodes_[out.id].grad;
      const Mat<T>& qv2 = value(q);
      const Mat<T>& kv2 = value(k);
      const Mat<T>& vv2 = value(v);
      Mat<T> gq = Mat<T>::Zero(qv2.rows(), qv2.cols());
      Mat<T> gk = Mat<T>::Zero(kv2.rows(), kv2.cols());
      Mat<T> gv = Mat<T>::Zero(vv2.rows(), vv2.cols());
      for (int h = 0; h < heads; ++h) {
        const Mat<T>& pr = probs[static_cast<std::size_t>(h)];
        const auto go = g.middleCols(h * hd, hd);
        gv.middleCols(h * hd, hd).noalias() += pr.transpose() * go;
        Mat<T> dp = go * vv2.middleCols(h * hd, hd).transpose();
        // softmax Jacobian: ds = p * (dp - rowsum(dp * p)); masked entries have p = 0.
        Mat<T> ds = pr.cwiseProduct(dp);
        const Eigen::Matrix<T, Eigen::Dynamic, 1> rowdot = ds.rowwise().sum();
        ds.array() -= pr.array().colwise() * rowdot.array();
        ds *= scale;
        gq.middleCols(h * hd, hd).noalias() += ds * kv2.middleCols(h * hd, hd);
        gk.middleCols(h * hd, hd).noalias() += ds.transpose() * qv2.middleCols(h * hd, hd);
      }
      if (needs(q)) accumulate(q, gq);
      if (needs(k)) accumulate(k, gk);
      if (needs(v)) accumulate(v, gv);
    });
    return out;
  }

  // weight * sum over scored rows of -log softmax(logits)[target]; a 1 x 1 node.
  Var cross_entropy_sum(Var logits, std::span<const TokenId> targets, const std::vector<bool>& mask, T weight) {
    const Mat<T>& lv = value(logits);
    assert(static_cast<Eigen::Index>(targets.size()) == lv.rows());
    assert(targets.size() == mask.size());
    Mat<T> probs = Mat<T>::Zero(lv.rows(), lv.cols());
    T total = 0;
    for (Eigen::Index r = 0; r < lv.rows(); ++r) {
      if (!mask[static_cast<std::size_t>(r)]) continue;
      const T mx = lv.row(r).maxCoeff();
      T sum = 0;
      for (Eigen::Index c = 0; c < lv.cols(); ++c) {
        const T e = std::exp(lv(r, c) - mx);
        probs(r, c) = e;
        sum += e;
      }
      probs.row(r) /= sum;
      const TokenId t = targets[static_cast<std::size_t>(r)];
      total += -(lv(r, t) - mx - std::log(sum));
    }
    Mat<T> y(1, 1);
    y(0, 0) = weight * total;
    Var out = push(std::move(y), needs(logits));
    on_backward(out, [this, logits, out, weight, probs = std::move(probs),
                      tv = std::vector<TokenId>(targets.begin(), targets.end()),
                      mv = mask] {
      const T g = nodes_[out.id].grad(0, 0) * weight;
      Mat<T> gl = probs;
      for (Eigen::Index r = 0; r < gl.rows(); ++r) {
        if (mv[static_cast<std::size_t>(r)]) gl(r, tv[static_cast<std::size_t>(r)]) -= T(1);
      }
      gl *= g;
      accumulate(logits, gl);
    });
    return out;
  }

  // Seeds d(loss)/d(loss) = 1, replays the tape, and adds gradients of
  // parameter nodes into their Parameter::grad.
  void backward(Var loss) {
    if (value(loss).size() != 1) throw NumericError("backward() needs a scalar loss");
    Node& ln = nodes_[loss.id];
    ln.grad = Mat<T>::Ones(1, 1);
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.grad.size() == 0) continue;
      if (n.backward) n.backward();
    }
    for (Node& n : nodes_) {
      if (n.param == nullptr || n.grad.size() == 0) continue;
      if (n.param->grad.size() == 0) n.param->zero_grad();
      n.param->grad += n.grad;
    }
  }

 private:
  struct Node {
    Mat<T> value;
    Mat<T> grad;
    bool requires_grad = false;
    Parameter<T>* param = nullptr;
    std::function<void()> backward;
  };

  Var push(Mat<T> value, bool requires_grad) {
    nodes_.push_back(Node{std::move(value), Mat<T>(), requires_grad, nullptr, {}});
    return Var{nodes_.size() - 1};
  }

  bool needs(Var v) const { return nodes_[v.id].requires_grad; }

  template <typename F>
  void on_backward(Var out, F&& fn) {
    if (nodes_[out.id].requires_grad) nodes_[out.id].backward = std::forward<F>(fn);
  }

  template <typename Expr>
  void accumulate(Var v, const Expr& g) {
    Node& n = nodes_[v.id];
    if (n.grad.size() == 0) {
      n.grad = g;
    } else {
      n.grad += g;
    }
  }

  std::vector<Node> nodes_;
};

}  // namespace atm
