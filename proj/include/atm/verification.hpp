#pragma once

// Independent oracles for the numerical core. The reference computations
// below use plain nested loops over std::vector and never call into the
// tape, Eigen expressions, or the production loss helpers.

#include <atm/gradcheck.hpp>
#include <atm/labeling.hpp>
#include <atm/model.hpp>
#include <atm/optim.hpp>
#include <atm/perception.hpp>
#include <atm/student.hpp>
#include <atm/tasks.hpp>

#include <chrono>
#include <cmath>
#include <ostream>
#include <random>
#include <regex>
#include <string>
#include <vector>

namespace atm {

namespace oracle {

using Grid = std::vector<std::vector<double>>;

inline Grid grid(std::size_t r, std::size_t c) { return Grid(r, std::vector<double>(c, 0.0)); }

template <typename M>
Grid copy(const M& m) {
  Grid g = grid(static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols()));
  for (std::size_t i = 0; i < g.size(); ++i) {
    for (std::size_t j = 0; j < g[i].size(); ++j) g[i][j] = static_cast<double>(m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)));
  }
  return g;
}

inline Grid matmul(const Grid& a, const Grid& b) {
  Grid c = grid(a.size(), b.empty() ? 0 : b[0].size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    for (std::size_t k = 0; k < b.size(); ++k) {
      for (std::size_t j = 0; j < c[i].size(); ++j) c[i][j] += a[i][k] * b[k][j];
    }
  }
  return c;
}

inline void add_bias(Grid& a, const Grid& bias) {
  for (auto& row : a) {
    for (std::size_t j = 0; j < row.size(); ++j) row[j] += bias[0][j];
  }
}

inline Grid layer_norm(const Grid& x, const Grid& g, const Grid& b, double eps) {
  Grid y = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double n = static_cast<double>(x[i].size());
    double mean = 0.0;
    for (double v : x[i]) mean += v;
    mean /= n;
    double var = 0.0;
    for (double v : x[i]) var += (v - mean) * (v - mean);
    var /= n;
    for (std::size_t j = 0; j < x[i].size(); ++j) y[i][j] = (x[i][j] - mean) / std::sqrt(var + eps) * g[0][j] + b[0][j];
  }
  return y;
}

// softmax(q_h k_h^T * scale) v_h per head, optionally causal.
inline Grid attention(const Grid& q, const Grid& k, const Grid& v, int heads, bool causal, double scale) {
  const std::size_t width = q[0].size();
  const std::size_t hd = width / static_cast<std::size_t>(heads);
  Grid out = grid(q.size(), width);
  for (int h = 0; h < heads; ++h) {
    const std::size_t off = static_cast<std::size_t>(h) * hd;
    for (std::size_t i = 0; i < q.size(); ++i) {
      const std::size_t keys = causal ? i + 1 : k.size();
      std::vector<double> s(keys);
      double mx = -INFINITY;
      for (std::size_t j = 0; j < keys; ++j) {
        double dot = 0.0;
        for (std::size_t d = 0; d < hd; ++d) dot += q[i][off + d] * k[j][off + d];
        s[j] = dot * scale;
        mx = std::max(mx, s[j]);
      }
      double z = 0.0;
      for (double& e : s) z += (e = std::exp(e - mx));
      for (std::size_t j = 0; j < keys; ++j) {
        for (std::size_t d = 0; d < hd; ++d) out[i][off + d] += s[j] / z * v[j][off + d];
      }
    }
  }
  return out;
}

// p = softmax(q W_Q (d W_K)^T) d W_V + q, multi-head.
inline Grid perceive(const Grid& q, const Grid& wq, const Grid& wk, const Grid& wv, const Grid& d, int heads,
                     double scale) {
  Grid p = attention(matmul(q, wq), matmul(d, wk), matmul(d, wv), heads, false, scale);
  for (std::size_t i = 0; i < p.size(); ++i) {
    for (std::size_t j = 0; j < p[i].size(); ++j) p[i][j] += q[i][j];
  }
  return p;
}

inline double gelu(double x) {
  return 0.5 * x * (1.0 + std::tanh(std::sqrt(2.0 / 3.14159265358979323846) * (x + 0.044715 * x * x * x)));
}

// Logits of the decoder for ids with an optional K x H prefix overwritten
// into the first K positions before every layer.
template <typename T>
Grid forward(TinyTransformer<T>& model, const std::vector<TokenId>& ids, const Grid& prefix) {
  const ModelConfig& cfg = model.config();
  auto params = model.parameters();
  auto W = [&](const std::string& name) { return copy(find_parameter(params, name)->value); };
  const Grid wte = W("wte");
  const Grid wpe = W("wpe");
  const std::size_t k = prefix.size();
  const std::size_t len = ids.size();
  Grid x = grid(k + len, static_cast<std::size_t>(cfg.hidden));
  for (std::size_t i = 0; i < k; ++i) x[i] = prefix[i];
  for (std::size_t i = 0; i < len; ++i) {
    for (std::size_t j = 0; j < x[0].size(); ++j) x[k + i][j] = wte[static_cast<std::size_t>(ids[i])][j] + wpe[k + i][j];
  }
  const double scale = 1.0 / std::sqrt(static_cast<double>(cfg.hidden / cfg.heads));
  for (int l = 0; l < cfg.layers; ++l) {
    const std::string pre = "h." + std::to_string(l) + ".";
    if (l > 0) {
      for (std::size_t i = 0; i < k; ++i) x[i] = prefix[i];
    }
    Grid h = layer_norm(x, W(pre + "ln1.g"), W(pre + "ln1.b"), cfg.ln_eps);
    Grid q = matmul(h, W(pre + "attn.wq"));
    add_bias(q, W(pre + "attn.bq"));
    Grid kk = matmul(h, W(pre + "attn.wk"));
    add_bias(kk, W(pre + "attn.bk"));
    Grid v = matmul(h, W(pre + "attn.wv"));
    add_bias(v, W(pre + "attn.bv"));
    Grid a = matmul(attention(q, kk, v, cfg.heads, true, scale), W(pre + "attn.wo"));
    add_bias(a, W(pre + "attn.bo"));
    for (std::size_t i = 0; i < x.size(); ++i) {
      for (std::size_t j = 0; j < x[i].size(); ++j) x[i][j] += a[i][j];
    }
    Grid h2 = layer_norm(x, W(pre + "ln2.g"), W(pre + "ln2.b"), cfg.ln_eps);
    Grid m = matmul(h2, W(pre + "mlp.w1"));
    add_bias(m, W(pre + "mlp.b1"));
    for (auto& row : m) {
      for (double& e : row) e = gelu(e);
    }
    Grid o = matmul(m, W(pre + "mlp.w2"));
    add_bias(o, W(pre + "mlp.b2"));
    for (std::size_t i = 0; i < x.size(); ++i) {
      for (std::size_t j = 0; j < x[i].size(); ++j) x[i][j] += o[i][j];
    }
  }
  Grid real(x.begin() + static_cast<std::ptrdiff_t>(k), x.end());
  Grid y = layer_norm(real, W("lnf.g"), W("lnf.b"), cfg.ln_eps);
  Grid logits = grid(len, wte.size());
  for (std::size_t i = 0; i < len; ++i) {
    for (std::size_t t = 0; t < wte.size(); ++t) {
      for (std::size_t j = 0; j < y[i].size(); ++j) logits[i][t] += y[i][j] * wte[t][j];
    }
  }
  return logits;
}

// Cross-entropy between the output-distribution matrix D (rows = scored
// positions) and the one-hot golden-token matrix O, averaged over rows.
inline double matrix_cross_entropy(const Grid& logits, const std::vector<TokenId>& targets,
                                   const std::vector<bool>& scored) {
  Grid D;
  Grid O;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (!scored[i]) continue;
    double mx = -INFINITY;
    for (double v : logits[i]) mx = std::max(mx, v);
    double z = 0.0;
    for (double v : logits[i]) z += std::exp(v - mx);
    std::vector<double> row;
    for (double v : logits[i]) row.push_back(std::exp(v - mx) / z);
    D.push_back(row);
    std::vector<double> one(logits[i].size(), 0.0);
    one[static_cast<std::size_t>(targets[i])] = 1.0;
    O.push_back(one);
  }
  double ce = 0.0;
  for (std::size_t b = 0; b < D.size(); ++b) {
    for (std::size_t v = 0; v < D[b].size(); ++v) {
      if (O[b][v] != 0.0) ce -= O[b][v] * std::log(D[b][v]);
    }
  }
  return ce / static_cast<double>(D.size());
}

// Adam with decoupled decay, textbook form with bias-corrected moments.
struct ScalarAdam {
  double b1, b2, eps, wd;
  double m = 0.0, v = 0.0;
  long t = 0;
  double step(double theta, double g, double lr) {
    ++t;
    theta *= 1.0 - lr * wd;
    m = b1 * m + (1.0 - b1) * g;
    v = b2 * v + (1.0 - b2) * g * g;
    const double mhat = m / (1.0 - std::pow(b1, static_cast<double>(t)));
    const double vhat = v / (1.0 - std::pow(b2, static_cast<double>(t)));
    return theta - lr * mhat / (std::sqrt(vhat) + eps);
  }
};

// Heads up after the flips named in the question?
inline std::string coin_answer(const std::string& question) {
  static const std::regex flips(R"(\b[A-Z][a-z]+ flips the coin\.)");
  long n = std::distance(std::sregex_iterator(question.begin(), question.end(), flips), std::sregex_iterator());
  return n % 2 == 0 ? "yes" : "no";
}

inline std::string last_letters(const std::string& question) {
  const auto a = question.find('"');
  const auto b = question.rfind('"');
  std::string out;
  std::string word;
  for (char ch : question.substr(a + 1, b - a - 1) + " ") {
    if (ch == ' ') {
      if (!word.empty()) out += word.substr(word.size() - 1);
      word.clear();
    } else {
      word += ch;
    }
  }
  return out;
}

}  // namespace oracle

struct OracleRow {
  std::string name;
  long instances = 0;
  double max_deviation = 0.0;
  double tolerance = 0.0;
  bool passed = false;
};

struct OracleReport {
  std::vector<OracleRow> rows;
  double seconds = 0.0;

  bool passed() const {
    return std::all_of(rows.begin(), rows.end(), [](const OracleRow& r) { return r.passed; });
  }
  const OracleRow& row(const std::string& name) const {
    for (const OracleRow& r : rows) {
      if (r.name == name) return r;
    }
    throw InputError("no oracle named " + name);
  }
};

namespace detail {

inline void fill_normal(Mat<double>& m, double std, Rng& rng) {
  std::normal_distribution<double> n(0.0, std);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
}

inline TinyTransformer<double> random_model(Rng& rng, int vocab, int hidden, int layers, double std) {
  ModelConfig cfg;
  cfg.layers = layers;
  cfg.hidden = hidden;
  cfg.heads = 1;
  cfg.vocab = vocab;
  cfg.max_seq_len = 16;
  cfg.init_std = std;
  TinyTransformer<double> m(cfg, rng());
  // Non-trivial norms and biases, so every parameter group matters.
  for (Parameter<double>* p : m.parameters()) {
    if (!p->decay) {
      Mat<double> noise(p->value.rows(), p->value.cols());
      fill_normal(noise, 0.2, rng);
      p->value += noise;
    }
  }
  return m;
}

}  // namespace detail

inline OracleRow perception_oracle(std::uint64_t seed, int instances) {
  Rng rng(seed);
  OracleRow row{"perception", instances, 0.0, 1e-9, false};
  for (int n = 0; n < instances; ++n) {
    std::uniform_int_distribution<int> dim(1, 8);
    const int k = std::uniform_int_distribution<int>(1, 4)(rng);
    const int h = dim(rng);
    const int len = dim(rng);
    const bool scaled = n % 2 == 1;
    PerceptionModule<double> mod(k, h, 1, scaled, rng(), 0.5);
    Mat<double> d(len, h);
    detail::fill_normal(d, 1.0, rng);
    const Mat<double> got = mod.perceive(d);
    const double scale = scaled ? 1.0 / std::sqrt(static_cast<double>(h)) : 1.0;
    const oracle::Grid want = oracle::perceive(oracle::copy(mod.query().value), oracle::copy(mod.w_q().value),
                                               oracle::copy(mod.w_k().value), oracle::copy(mod.w_v().value),
                                               oracle::copy(d), 1, scale);
    for (int i = 0; i < k; ++i) {
      for (int j = 0; j < h; ++j) row.max_deviation = std::max(row.max_deviation, std::abs(got(i, j) - want[i][j]));
    }
  }
  row.passed = row.max_deviation < row.tolerance;
  return row;
}

// Production forward (with random prefix) against the loop forward.
inline OracleRow forward_oracle(std::uint64_t seed, int instances) {
  Rng rng(seed);
  OracleRow row{"forward", instances, 0.0, 1e-9, false};
  for (int n = 0; n < instances; ++n) {
    const int vocab = std::uniform_int_distribution<int>(2, 16)(rng);
    const int hidden = std::uniform_int_distribution<int>(1, 8)(rng);
    const int len = std::uniform_int_distribution<int>(1, 8)(rng);
    const int k = std::uniform_int_distribution<int>(0, 3)(rng);
    auto model = detail::random_model(rng, vocab, hidden, 1 + n % 2, 0.5);
    std::vector<TokenId> ids(static_cast<std::size_t>(len));
    for (TokenId& t : ids) t = std::uniform_int_distribution<TokenId>(0, vocab - 1)(rng);
    Mat<double> prefix(k, hidden);
    detail::fill_normal(prefix, 1.0, rng);
    const Mat<double> got = model.logits(ids, k > 0 ? &prefix : nullptr);
    const oracle::Grid want = oracle::forward(model, ids, oracle::copy(prefix));
    for (int i = 0; i < len; ++i) {
      for (int j = 0; j < vocab; ++j) row.max_deviation = std::max(row.max_deviation, std::abs(got(i, j) - want[i][j]));
    }
  }
  row.passed = row.max_deviation < row.tolerance;
  return row;
}

// score_discrepancy against the explicit D, O matrix cross-entropy.
inline OracleRow discrepancy_oracle(std::uint64_t seed, int instances) {
  Rng rng(seed);
  OracleRow row{"discrepancy", instances, 0.0, 1e-9, false};
  for (int n = 0; n < instances; ++n) {
    const int vocab = std::uniform_int_distribution<int>(2, 16)(rng);
    const int hidden = std::uniform_int_distribution<int>(1, 8)(rng);
    const int len = std::uniform_int_distribution<int>(3, 9)(rng);  // ids; the model sees len - 1
    auto model = detail::random_model(rng, vocab, hidden, 1 + n % 2, 0.5);
    TargetSequence seq;
    seq.ids.resize(static_cast<std::size_t>(len));
    for (TokenId& t : seq.ids) t = std::uniform_int_distribution<TokenId>(0, vocab - 1)(rng);
    // Answer and rationale spans anywhere after position 0.
    const auto cut = static_cast<std::size_t>(std::uniform_int_distribution<int>(1, len - 1)(rng));
    seq.answer = {cut, std::min<std::size_t>(cut + 1 + rng() % 3, seq.ids.size())};
    seq.rationale = Span{seq.answer.end, seq.answer.end + rng() % (seq.ids.size() - seq.answer.end + 1)};
    seq.mask.assign(seq.ids.size(), true);
    const double got = score_discrepancy(model, seq);

    const std::vector<TokenId> inputs(seq.ids.begin(), seq.ids.end() - 1);
    const std::vector<TokenId> targets(seq.ids.begin() + 1, seq.ids.end());
    std::vector<bool> scored(targets.size(), false);
    for (std::size_t i = 0; i < targets.size(); ++i) {
      const std::size_t pos = i + 1;
      scored[i] = (pos >= seq.answer.begin && pos < seq.answer.end) ||
                  (pos >= seq.rationale->begin && pos < seq.rationale->end);
    }
    const double want = oracle::matrix_cross_entropy(oracle::forward(model, inputs, {}), targets, scored);
    row.max_deviation = std::max(row.max_deviation, std::abs(got - want));
  }
  row.passed = row.max_deviation < row.tolerance;
  return row;
}

// Finite differences over every parameter of the backbone and the
// perception module through the adaptive-thinking loss.
inline OracleRow gradient_oracle(std::uint64_t seed) {
  Rng rng(seed);
  OracleRow row{"gradients", 0, 0.0, 1e-4, false};
  Student<double> s;
  ModelConfig cfg;
  cfg.layers = 2;
  cfg.hidden = 8;
  cfg.heads = 1;
  cfg.vocab = 16;
  cfg.max_seq_len = 16;
  cfg.init_std = 0.3;
  s.slm = TinyTransformer<double>(cfg, rng());
  s.perception.emplace(2, 8, 1, false, rng(), 0.3);
  std::vector<TokenId> ids(7);
  for (TokenId& t : ids) t = std::uniform_int_distribution<TokenId>(0, 15)(rng);
  std::vector<bool> mask{false, false, true, true, false, true, true};
  const ShiftedExample ex = shift(ids, mask);
  const TokenIds perception_ids{3, 9, 1, 14};
  auto params = s.parameters();
  const GradCheckResult r = check_gradients(params, [&](Tape<double>& tape) {
    return s.loss(tape, ex, perception_ids, 1.0 / static_cast<double>(ex.scored()));
  });
  row.instances = static_cast<long>(r.entries_checked);
  row.max_deviation = r.max_relative_error;
  row.passed = row.max_deviation < row.tolerance;
  return row;
}

inline OracleRow adam_oracle(std::uint64_t seed) {
  Rng rng(seed);
  OracleRow row{"adam", 200, 0.0, 1e-12, false};
  AdamConfig ac{0.9, 0.95, 1e-8, 0.1};
  AdamW<double> opt(ac);
  Parameter<double> p{"theta", Mat<double>::Constant(1, 1, 1.5), Mat<double>(), true};
  oracle::ScalarAdam ref{ac.beta1, ac.beta2, ac.eps, ac.weight_decay};
  double theta = 1.5;
  std::vector<Parameter<double>*> params{&p};
  std::uniform_real_distribution<double> lr(1e-4, 1e-2);
  for (int i = 0; i < 200; ++i) {
    const double g = 2.0 * (theta - 3.0);  // d/dtheta (theta - 3)^2
    p.grad = Mat<double>::Constant(1, 1, g);
    const double rate = lr(rng);
    opt.step(params, rate);
    theta = ref.step(theta, g, rate);
    row.max_deviation = std::max(row.max_deviation, std::abs(p.value(0, 0) - theta));
  }
  row.passed = row.max_deviation < row.tolerance;
  return row;
}

inline OracleRow parity_oracle(std::uint64_t seed) {
  OracleRow row{"coin_flip_parity", 1000, 0.0, 0.0, true};
  for (const Sample& s : gen_coin_flip(1000, 1, 8, seed)) {
    if (oracle::coin_answer(s.question) != s.answer) {
      row.max_deviation += 1.0;
      row.passed = false;
    }
  }
  return row;
}

inline OracleRow last_letter_oracle(std::uint64_t seed) {
  OracleRow row{"last_letter", 1000, 0.0, 0.0, true};
  for (const Sample& s : gen_last_letter(1000, 1, 6, seed)) {
    if (oracle::last_letters(s.question) != s.answer) {
      row.max_deviation += 1.0;
      row.passed = false;
    }
  }
  return row;
}

inline OracleReport oracle_suite(std::uint64_t seed, int instances = 100) {
  const auto t0 = std::chrono::steady_clock::now();
  OracleReport r;
  r.rows.push_back(perception_oracle(seed, instances));
  r.rows.push_back(forward_oracle(seed + 1, instances));
  r.rows.push_back(discrepancy_oracle(seed + 2, instances));
  r.rows.push_back(gradient_oracle(seed + 3));
  r.rows.push_back(adam_oracle(seed + 4));
  r.rows.push_back(parity_oracle(seed + 5));
  r.rows.push_back(last_letter_oracle(seed + 6));
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

inline void write_report_text(std::ostream& out, const OracleReport& r) {
  for (const OracleRow& row : r.rows) {
    out << (row.passed ? "ok   " : "FAIL ") << row.name << ": " << row.instances << " checks, max deviation "
        << row.max_deviation << " (tolerance " << row.tolerance << ")\n";
  }
  out << (r.passed() ? "all oracles agree" : "oracle mismatch") << " in " << r.seconds << " s\n";
}

inline void write_report_csv(std::ostream& out, const OracleReport& r) {
  out << "oracle,instances,max_deviation,tolerance,passed\n";
  out.precision(17);
  for (const OracleRow& row : r.rows) {
    out << row.name << ',' << row.instances << ',' << row.max_deviation << ',' << row.tolerance << ','
        << (row.passed ? 1 : 0) << '\n';
  }
}

}  // namespace atm
