#pragma once

#include <atm/error.hpp>
#include <atm/model.hpp>

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

namespace atm {

// Incremental causal inference with cached keys and values. Produces the
// same logits as TinyTransformer::logits, one position at a time.
template <typename T>
class DecodeSession {
 public:
  DecodeSession(const TinyTransformer<T>& model, const Mat<T>* prefix = nullptr) : model_(model) {
    const ModelConfig& cfg = model.config();
    prefix_len_ = (prefix != nullptr) ? prefix->rows() : 0;
    if (prefix_len_ > 0 && prefix->cols() != cfg.hidden) throw InputError("prefix width does not match hidden size");
    if (prefix_len_ > cfg.max_seq_len) throw InputError("prefix longer than max_seq_len");
    caches_.resize(model.blocks_.size());
    for (auto& c : caches_) {
      c.k.resize(cfg.max_seq_len, cfg.hidden);
      c.v.resize(cfg.max_seq_len, cfg.hidden);
    }
    if (prefix_len_ > 0) {
      // Prefix rows enter every layer as p, so their keys/values only depend on p.
      for (std::size_t l = 0; l < caches_.size(); ++l) {
        const BlockWeights<T>& b = model.blocks_[l];
        for (Eigen::Index r = 0; r < prefix_len_; ++r) {
          RowVec<T> h = layer_norm(prefix->row(r), b.ln1_g, b.ln1_b);
          caches_[l].k.row(r) = h * b.wk.value + b.bk.value;
          caches_[l].v.row(r) = h * b.wv.value + b.bv.value;
        }
      }
    }
    length_ = prefix_len_;
  }

  Eigen::Index position() const { return length_; }
  Eigen::Index prefix_length() const { return prefix_len_; }
  Eigen::Index capacity() const { return model_.config().max_seq_len; }

  // Appends one token and returns the next-token logits (1 x V).
  RowVec<T> step(TokenId id) {
    const ModelConfig& cfg = model_.config();
    if (id < 0 || id >= cfg.vocab) throw InputError("invalid token id " + std::to_string(id));
    if (length_ >= cfg.max_seq_len) throw InputError("sequence too long for max_seq_len");
    const Eigen::Index pos = length_;
    const int heads = cfg.heads;
    const Eigen::Index hd = cfg.hidden / heads;
    const T scale = T(1) / std::sqrt(static_cast<T>(hd));

    RowVec<T> x = model_.wte_.value.row(id) + model_.wpe_.value.row(pos);
    for (std::size_t l = 0; l < caches_.size(); ++l) {
      const BlockWeights<T>& b = model_.blocks_[l];
      Cache& c = caches_[l];
      RowVec<T> h = layer_norm(x, b.ln1_g, b.ln1_b);
      RowVec<T> q = h * b.wq.value + b.bq.value;
      c.k.row(pos) = h * b.wk.value + b.bk.value;
      c.v.row(pos) = h * b.wv.value + b.bv.value;
      RowVec<T> att(cfg.hidden);
      for (int hh = 0; hh < heads; ++hh) {
        const auto keys = c.k.block(0, hh * hd, pos + 1, hd);
        RowVec<T> s = (q.segment(hh * hd, hd) * keys.transpose()) * scale;
        const T mx = s.maxCoeff();
        s = (s.array() - mx).exp();
        s /= s.sum();
        att.segment(hh * hd, hd) = s * c.v.block(0, hh * hd, pos + 1, hd);
      }
      x += att * b.wo.value + b.bo.value;
      RowVec<T> h2 = layer_norm(x, b.ln2_g, b.ln2_b);
      RowVec<T> m = h2 * b.w1.value + b.b1.value;
      gelu_inplace(m);
      x += m * b.w2.value + b.b2.value;
    }
    ++length_;
    RowVec<T> hf = layer_norm(x, model_.lnf_g_, model_.lnf_b_);
    return hf * model_.wte_.value.transpose();
  }

 private:
  struct Cache {
    Mat<T> k, v;
  };

  template <typename Row>
  RowVec<T> layer_norm(const Row& x, const Parameter<T>& g, const Parameter<T>& b) const {
    const T eps = static_cast<T>(model_.config().ln_eps);
    const T mean = x.mean();
    const T var = (x.array() - mean).square().mean();
    RowVec<T> y = ((x.array() - mean) * (T(1) / std::sqrt(var + eps))).matrix();
    return (y.array() * g.value.row(0).array()).matrix() + b.value.row(0);
  }

  static void gelu_inplace(RowVec<T>& m) {
    const T c = static_cast<T>(0.7978845608028654);
    const T k = static_cast<T>(0.044715);
    for (Eigen::Index i = 0; i < m.size(); ++i) {
      const T xi = m(i);
      m(i) = T(0.5) * xi * (T(1) + std::tanh(c * (xi + k * xi * xi * xi)));
    }
  }

  const TinyTransformer<T>& model_;
  std::vector<Cache> caches_;
  Eigen::Index prefix_len_ = 0;
  Eigen::Index length_ = 0;
};

struct DecodeOptions {
  int max_new_tokens = 64;
  std::vector<TokenId> stop_tokens;
};

struct DecodeResult {
  TokenIds tokens;  // generated tokens only, including the stop token if hit
  bool truncated = false;  // max_new_tokens or max_seq_len reached without a stop token
};

// Lowest index wins ties.
template <typename T>
TokenId argmax_token(const RowVec<T>& logits) {
  Eigen::Index best = 0;
  for (Eigen::Index i = 1; i < logits.size(); ++i) {
    if (logits(i) > logits(best)) best = i;
  }
  return static_cast<TokenId>(best);
}

template <typename T>
DecodeResult greedy_decode(const TinyTransformer<T>& model, std::span<const TokenId> prompt,
                           const Mat<T>* prefix, const DecodeOptions& options) {
  if (prompt.empty()) throw InputError("greedy_decode needs a non-empty prompt");
  DecodeSession<T> session(model, prefix);
  if (session.position() + static_cast<Eigen::Index>(prompt.size()) > session.capacity()) {
    throw InputError("prompt longer than max_seq_len");
  }
  RowVec<T> logits;
  for (TokenId id : prompt) logits = session.step(id);

  DecodeResult out;
  for (int i = 0; i < options.max_new_tokens; ++i) {
    const TokenId next = argmax_token(logits);
    out.tokens.push_back(next);
    if (std::find(options.stop_tokens.begin(), options.stop_tokens.end(), next) != options.stop_tokens.end()) {
      return out;
    }
    if (i + 1 == options.max_new_tokens || session.position() >= session.capacity()) break;
    logits = session.step(next);
  }
  out.truncated = true;
  return out;
}

}  // namespace atm
