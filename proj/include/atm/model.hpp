#pragma once

// Decoder-only transformer backend (GPT-2 style pre-norm blocks, learned
// absolute positions, tied input/output embeddings) with optional per-layer
// prefix injection.
//
// Prefix semantics: with a K x H prefix p, the first K positions of the
// residual stream are reserved. Before every layer their incoming hidden
// states are overwritten with p; at the end those rows are dropped, so
// logits are returned for the real tokens only. Real tokens occupy
// positions K..K+L-1.

#include <atm/autodiff.hpp>
#include <atm/error.hpp>
#include <atm/tensor.hpp>

#include <concepts>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

namespace atm {

template <typename T>
class DecodeSession;

struct ModelConfig {
  int layers = 4;
  int hidden = 64;
  int heads = 4;
  int vocab = 0;
  int max_seq_len = 256;
  int ffn_mult = 4;
  double init_std = 0.02;
  double ln_eps = 1e-5;

  void validate() const {
    if (layers <= 0 || hidden <= 0 || heads <= 0 || vocab <= 0 || max_seq_len <= 0 || ffn_mult <= 0) {
      throw ConfigError("model dimensions must be positive");
    }
    if (hidden % heads != 0) {
      throw ConfigError("hidden size " + std::to_string(hidden) + " is not divisible by head count " +
                        std::to_string(heads));
    }
  }

  bool operator==(const ModelConfig&) const = default;
};

template <typename T>
struct BlockWeights {
  Parameter<T> ln1_g, ln1_b;
  Parameter<T> wq, wk, wv, wo;
  Parameter<T> bq, bk, bv, bo;
  Parameter<T> ln2_g, ln2_b;
  Parameter<T> w1, b1, w2, b2;
};

// Final-layer attention probabilities, one (K+L) x (K+L) matrix per head.
template <typename T>
struct AttentionCapture {
  std::vector<Mat<T>> final_layer;
};

template <typename T>
class TinyTransformer {
 public:
  using scalar_type = T;

  TinyTransformer() = default;

  TinyTransformer(const ModelConfig& config, std::uint64_t seed) : config_(config) {
    config_.validate();
    Rng rng(seed);
    allocate([&](Eigen::Index r, Eigen::Index c) { return normal_matrix<T>(r, c, config_.init_std, rng); });
  }

  // All weight matrices zero, layer-norm gains one.
  static TinyTransformer zeros(const ModelConfig& config) {
    TinyTransformer m;
    m.config_ = config;
    m.config_.validate();
    m.allocate([](Eigen::Index r, Eigen::Index c) { return Mat<T>::Zero(r, c); });
    return m;
  }

  const ModelConfig& config() const { return config_; }

  std::vector<Parameter<T>*> parameters() {
    std::vector<Parameter<T>*> out{&wte_, &wpe_};
    for (auto& b : blocks_) {
      for (Parameter<T>* p : {&b.ln1_g, &b.ln1_b, &b.wq, &b.wk, &b.wv, &b.wo, &b.bq, &b.bk, &b.bv, &b.bo,
                              &b.ln2_g, &b.ln2_b, &b.w1, &b.b1, &b.w2, &b.b2}) {
        out.push_back(p);
      }
    }
    out.push_back(&lnf_g_);
    out.push_back(&lnf_b_);
    return out;
  }

  std::vector<const Parameter<T>*> parameters() const {
    auto ps = const_cast<TinyTransformer*>(this)->parameters();
    return {ps.begin(), ps.end()};
  }

  const Parameter<T>& token_embedding() const { return wte_; }
  Parameter<T>& token_embedding() { return wte_; }

  // Differentiable forward; returns an L x V logits node. prefix, when
  // present, must be a K x H node on the same tape.
  Var forward(Tape<T>& tape, std::span<const TokenId> ids, std::optional<Var> prefix = std::nullopt,
              AttentionCapture<T>* capture = nullptr) {
    return forward_impl(*this, tape, ids, prefix, capture);
  }

  // Non-differentiable forward for inference and scoring.
  Mat<T> logits(std::span<const TokenId> ids, const Mat<T>* prefix = nullptr,
                AttentionCapture<T>* capture = nullptr) const {
    Tape<T> tape;
    std::optional<Var> pv;
    if (prefix != nullptr) pv = tape.constant(*prefix);
    return tape.value(forward_impl(*this, tape, ids, pv, capture));
  }

  // Token embedding rows for ids; used by the perception module.
  Var embed_tokens(Tape<T>& tape, std::span<const TokenId> ids) {
    check_ids(ids);
    return tape.embed(tape.param(wte_), ids);
  }

 private:
  template <typename Self>
  static Var bind(Self& self, Tape<T>& tape, const Parameter<T>& p) {
    if constexpr (std::is_const_v<Self>) {
      return tape.constant(p.value);
    } else {
      (void)self;
      return tape.param(const_cast<Parameter<T>&>(p));
    }
  }

  template <typename Self>
  static Var forward_impl(Self& self, Tape<T>& tape, std::span<const TokenId> ids, std::optional<Var> prefix,
                          AttentionCapture<T>* capture) {
    const ModelConfig& cfg = self.config_;
    const auto len = static_cast<Eigen::Index>(ids.size());
    if (len == 0) throw InputError("forward() on an empty sequence");
    Eigen::Index k = 0;
    if (prefix) {
      const Mat<T>& pv = tape.value(*prefix);
      if (pv.cols() != cfg.hidden) throw InputError("prefix width does not match hidden size");
      k = pv.rows();
      if (k == 0) prefix.reset();
    }
    if (len + k > cfg.max_seq_len) {
      throw InputError("sequence too long: " + std::to_string(len) + " tokens + " + std::to_string(k) +
                       " prefix > max_seq_len " + std::to_string(cfg.max_seq_len));
    }
    self.check_ids(ids);

    auto P = [&](const Parameter<T>& p) { return bind(self, tape, p); };
    const T eps = static_cast<T>(cfg.ln_eps);
    const int hd = cfg.hidden / cfg.heads;
    const T scale = T(1) / std::sqrt(static_cast<T>(hd));

    Var wte = P(self.wte_);
    Var x = tape.add(tape.embed(wte, ids), tape.rows(P(self.wpe_), k, len));
    if (prefix) x = tape.concat_rows(*prefix, x);

    for (std::size_t l = 0; l < self.blocks_.size(); ++l) {
      const BlockWeights<T>& b = self.blocks_[l];
      if (prefix && l > 0) x = tape.overwrite_rows(x, *prefix);
      Var h = tape.layer_norm(x, P(b.ln1_g), P(b.ln1_b), eps);
      Var q = tape.add_row(tape.matmul(h, P(b.wq)), P(b.bq));
      Var kk = tape.add_row(tape.matmul(h, P(b.wk)), P(b.bk));
      Var v = tape.add_row(tape.matmul(h, P(b.wv)), P(b.bv));
      const bool last = l + 1 == self.blocks_.size();
      Var a = tape.attention(q, kk, v, cfg.heads, true, scale,
                             (last && capture != nullptr) ? &capture->final_layer : nullptr);
      x = tape.add(x, tape.add_row(tape.matmul(a, P(b.wo)), P(b.bo)));
      Var h2 = tape.layer_norm(x, P(b.ln2_g), P(b.ln2_b), eps);
      Var m = tape.gelu(tape.add_row(tape.matmul(h2, P(b.w1)), P(b.b1)));
      x = tape.add(x, tape.add_row(tape.matmul(m, P(b.w2)), P(b.b2)));
    }
    if (prefix) x = tape.rows(x, k, len);
    x = tape.layer_norm(x, P(self.lnf_g_), P(self.lnf_b_), eps);
    return tape.matmul_nt(x, wte);
  }

  void check_ids(std::span<const TokenId> ids) const {
    for (TokenId id : ids) {
      if (id < 0 || id >= config_.vocab) {
        throw InputError("invalid token id " + std::to_string(id) + " (vocab " + std::to_string(config_.vocab) +
                         ")");
      }
    }
  }

  template <typename Init>
  void allocate(Init&& init) {
    const Eigen::Index h = config_.hidden;
    const Eigen::Index f = static_cast<Eigen::Index>(config_.hidden) * config_.ffn_mult;
    auto weight = [&](std::string name, Eigen::Index r, Eigen::Index c) {
      return Parameter<T>{std::move(name), init(r, c), Mat<T>(), true};
    };
    auto fixed = [](std::string name, Eigen::Index c, T fill) {
      return Parameter<T>{std::move(name), Mat<T>::Constant(1, c, fill), Mat<T>(), false};
    };
    wte_ = weight("wte", config_.vocab, h);
    wpe_ = weight("wpe", config_.max_seq_len, h);
    blocks_.clear();
    for (int l = 0; l < config_.layers; ++l) {
      const std::string pre = "h." + std::to_string(l) + ".";
      BlockWeights<T> b;
      b.ln1_g = fixed(pre + "ln1.g", h, T(1));
      b.ln1_b = fixed(pre + "ln1.b", h, T(0));
      b.wq = weight(pre + "attn.wq", h, h);
      b.wk = weight(pre + "attn.wk", h, h);
      b.wv = weight(pre + "attn.wv", h, h);
      b.wo = weight(pre + "attn.wo", h, h);
      b.bq = fixed(pre + "attn.bq", h, T(0));
      b.bk = fixed(pre + "attn.bk", h, T(0));
      b.bv = fixed(pre + "attn.bv", h, T(0));
      b.bo = fixed(pre + "attn.bo", h, T(0));
      b.ln2_g = fixed(pre + "ln2.g", h, T(1));
      b.ln2_b = fixed(pre + "ln2.b", h, T(0));
      b.w1 = weight(pre + "mlp.w1", h, f);
      b.b1 = fixed(pre + "mlp.b1", f, T(0));
      b.w2 = weight(pre + "mlp.w2", f, h);
      b.b2 = fixed(pre + "mlp.b2", h, T(0));
      blocks_.push_back(std::move(b));
    }
    lnf_g_ = fixed("lnf.g", h, T(1));
    lnf_b_ = fixed("lnf.b", h, T(0));
  }

  template <typename U>
  friend class DecodeSession;

  ModelConfig config_{};
  Parameter<T> wte_, wpe_;
  std::vector<BlockWeights<T>> blocks_;
  Parameter<T> lnf_g_, lnf_b_;
};

// What any pluggable language-model backend must offer to the trainer,
// the decoder and the evaluators.
template <typename B>
concept LanguageBackend = requires(B& b, const B& cb, Tape<typename B::scalar_type>& tape,
                                   std::span<const TokenId> ids) {
  typename B::scalar_type;
  { cb.config() } -> std::convertible_to<const ModelConfig&>;
  { b.parameters() } -> std::same_as<std::vector<Parameter<typename B::scalar_type>*>>;
  { b.forward(tape, ids, std::optional<Var>{}) } -> std::same_as<Var>;
  { cb.logits(ids) } -> std::same_as<Mat<typename B::scalar_type>>;
  { b.embed_tokens(tape, ids) } -> std::same_as<Var>;
};

static_assert(LanguageBackend<TinyTransformer<float>>);
static_assert(LanguageBackend<TinyTransformer<double>>);

// Copies parameters between precisions (float training <-> double checks).
template <typename To, typename From>
TinyTransformer<To> convert(const TinyTransformer<From>& src) {
  TinyTransformer<To> dst = TinyTransformer<To>::zeros(src.config());
  auto s = src.parameters();
  auto d = dst.parameters();
  for (std::size_t i = 0; i < s.size(); ++i) d[i]->value = s[i]->value.template cast<To>();
  return dst;
}

}  // namespace atm
