#include "oracle.hpp"

#include <cmath>
#include <numbers>

namespace clab::testing {

namespace {

using Vec = std::vector<double>;

Vec layer_norm(const Vec& x, const Matrix<double>& g, const Matrix<double>& b) {
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= static_cast<double>(x.size());
  double var = 0.0;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= static_cast<double>(x.size());
  Vec y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = (x[i] - mean) / std::sqrt(var + 1e-5) * g.data[i] + b.data[i];
  return y;
}

// y[o] = sum_i W[o][i] x[i]
Vec apply(const Matrix<double>& w, const Vec& x) {
  Vec y(w.rows, 0.0);
  for (std::size_t o = 0; o < w.rows; ++o)
    for (std::size_t i = 0; i < w.cols; ++i) y[o] += w(o, i) * x[i];
  return y;
}

double gelu(double x) {
  const double c = std::sqrt(2.0 / std::numbers::pi);
  return 0.5 * x * (1.0 + std::tanh(c * (x + 0.044715 * x * x * x)));
}

}  // namespace

std::vector<double> softmax(const std::vector<double>& logits, double temperature) {
  double mx = logits[0] / temperature;
  for (double v : logits) mx = std::max(mx, v / temperature);
  Vec p(logits.size());
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) z += p[i] = std::exp(logits[i] / temperature - mx);
  for (double& v : p) v /= z;
  return p;
}

double kl(const std::vector<double>& p, const std::vector<double>& q) {
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i)
    if (p[i] > 0.0) s += p[i] * std::log(p[i] / q[i]);
  return s;
}

double naive_nll(const std::vector<double>& row, int target) {
  double mx = row[0];
  for (double v : row) mx = std::max(mx, v);
  double z = 0.0;
  for (double v : row) z += std::exp(v - mx);
  return -(row[static_cast<std::size_t>(target)] - mx - std::log(z));
}

NaiveForward naive_forward(const ModelD& model, std::span<const Token> tokens) {
  const auto& c = model.config;
  const auto& w = model.weights;
  const std::size_t n = tokens.size(), d = static_cast<std::size_t>(c.d_model);
  const std::size_t H = static_cast<std::size_t>(c.n_heads), dh = d / H;

  std::vector<Vec> x(n, Vec(d));
  for (std::size_t t = 0; t < n; ++t)
    for (std::size_t j = 0; j < d; ++j)
      x[t][j] = w.tok_emb(static_cast<std::size_t>(tokens[t]), j) + w.pos_emb(t, j);

  NaiveForward out;
  for (std::size_t l = 0; l < w.layers.size(); ++l) {
    const auto& L = w.layers[l];
    std::vector<Vec> q(n), k(n), v(n);
    for (std::size_t t = 0; t < n; ++t) {
      const Vec h = layer_norm(x[t], L.ln1_gain, L.ln1_bias);
      q[t] = apply(L.wq, h);
      k[t] = apply(L.wk, h);
      v[t] = apply(L.wv, h);
    }
    std::vector<Vec> concat(n, Vec(d, 0.0));
    for (std::size_t head = 0; head < H; ++head) {
      std::vector<Vec> a(n, Vec(n, 0.0));
      for (std::size_t i = 0; i < n; ++i) {
        Vec s(i + 1);
        for (std::size_t j = 0; j <= i; ++j) {
          double dot = 0.0;
          for (std::size_t e = 0; e < dh; ++e) dot += q[i][head * dh + e] * k[j][head * dh + e];
          s[j] = dot / std::sqrt(static_cast<double>(dh));
        }
        const Vec p = softmax(s);
        for (std::size_t j = 0; j <= i; ++j) a[i][j] = p[j];
        if (model.head_mask.is_pruned(static_cast<int>(l), static_cast<int>(head))) continue;
        for (std::size_t j = 0; j <= i; ++j)
          for (std::size_t e = 0; e < dh; ++e) concat[i][head * dh + e] += p[j] * v[j][head * dh + e];
      }
      out.attn.push_back(std::move(a));
    }
    for (std::size_t t = 0; t < n; ++t) {
      const Vec o = apply(L.wo, concat[t]);
      for (std::size_t j = 0; j < d; ++j) x[t][j] += o[j];
      const Vec h = layer_norm(x[t], L.ln2_gain, L.ln2_bias);
      Vec f = apply(L.ff_in, h);
      for (double& e : f) e = gelu(e);
      const Vec g = apply(L.ff_out, f);
      for (std::size_t j = 0; j < d; ++j) x[t][j] += g[j];
    }
  }
  for (std::size_t t = 0; t < n; ++t) {
    const Vec h = layer_norm(x[t], w.lnf_gain, w.lnf_bias);
    out.logits.push_back(apply(w.tok_emb, h));
  }
  return out;
}

double naive_perplexity(const ModelD& model, std::span<const Token> corpus, int window) {
  double nll = 0.0;
  std::size_t count = 0;
  const auto W = static_cast<std::size_t>(window);
  for (std::size_t begin = 0; begin + 1 < corpus.size(); begin += W) {
    const std::size_t len = std::min(W, corpus.size() - 1 - begin);
    const auto f = naive_forward(model, corpus.subspan(begin, len));
    for (std::size_t i = 0; i < len; ++i) {
      nll += naive_nll(f.logits[i], corpus[begin + i + 1]);
      ++count;
    }
  }
  return std::exp(nll / static_cast<double>(count));
}

}  // namespace clab::testing
