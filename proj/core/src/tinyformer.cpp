#include "clab/tinyformer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <random>

#include "clab/detail/forward_cache.hpp"
#include "clab/errors.hpp"

namespace clab {

void ModelConfig::validate() const {
  if (n_layers < 1 || n_heads < 1 || d_model < 1 || d_ff < 1)
    throw DomainError("model dimensions must be positive");
  if (d_model % n_heads != 0) throw DomainError("d_model must be divisible by n_heads");
  if (d_model % 4 != 0 || d_ff % 4 != 0) throw DomainError("d_model and d_ff must be multiples of 4");
  if (vocab_size < 2) throw DomainError("vocab_size must be at least 2");
  if (context_len < 1) throw DomainError("context_len must be at least 1");
}

std::size_t parameter_count(const ModelConfig& c) {
  const auto d = static_cast<std::size_t>(c.d_model);
  const auto f = static_cast<std::size_t>(c.d_ff);
  const std::size_t per_layer = 4 * d + 4 * d * d + 2 * d * f;
  return static_cast<std::size_t>(c.vocab_size + c.context_len) * d +
         static_cast<std::size_t>(c.n_layers) * per_layer + 2 * d;
}

template <typename T>
Weights<T> Weights<T>::zeros(const ModelConfig& cfg) {
  cfg.validate();
  const auto d = static_cast<std::size_t>(cfg.d_model);
  const auto f = static_cast<std::size_t>(cfg.d_ff);
  Weights<T> w;
  w.tok_emb = Matrix<T>(static_cast<std::size_t>(cfg.vocab_size), d);
  w.pos_emb = Matrix<T>(static_cast<std::size_t>(cfg.context_len), d);
  w.layers.resize(static_cast<std::size_t>(cfg.n_layers));
  for (auto& l : w.layers) {
    l.ln1_gain = Matrix<T>(1, d);
    l.ln1_bias = Matrix<T>(1, d);
    l.wq = Matrix<T>(d, d);
    l.wk = Matrix<T>(d, d);
    l.wv = Matrix<T>(d, d);
    l.wo = Matrix<T>(d, d);
    l.ln2_gain = Matrix<T>(1, d);
    l.ln2_bias = Matrix<T>(1, d);
    l.ff_in = Matrix<T>(f, d);
    l.ff_out = Matrix<T>(d, f);
  }
  w.lnf_gain = Matrix<T>(1, d);
  w.lnf_bias = Matrix<T>(1, d);
  return w;
}

HeadMask HeadMask::none(const ModelConfig& cfg) {
  return HeadMask{cfg.n_layers, cfg.n_heads,
                  std::vector<std::uint8_t>(static_cast<std::size_t>(cfg.n_layers * cfg.n_heads), 0)};
}

int HeadMask::count() const {
  return static_cast<int>(std::count(pruned.begin(), pruned.end(), std::uint8_t{1}));
}

template <typename T>
Model<T> zero_model(const ModelConfig& cfg) {
  return Model<T>{cfg, Weights<T>::zeros(cfg), HeadMask::none(cfg), std::nullopt};
}

template <typename T>
Model<T> init_model(const ModelConfig& cfg, std::uint64_t seed, double stddev) {
  Model<T> m = zero_model<T>(cfg);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, stddev);
  m.weights.for_each([&](const std::string& name, Matrix<T>& t) {
    const bool is_gain = name.ends_with(".gain");
    const bool is_bias = name.ends_with(".bias");
    for (auto& v : t.data) v = is_gain ? T(1) : is_bias ? T(0) : static_cast<T>(normal(rng));
  });
  return m;
}

template <typename T>
void validate_model(const Model<T>& m) {
  m.config.validate();
  const Weights<T> ref = Weights<T>::zeros(m.config);
  if (m.weights.layers.size() != ref.layers.size()) throw DomainError("layer count does not match config");
  std::vector<std::pair<std::size_t, std::size_t>> shapes;
  ref.for_each([&](const std::string&, const Matrix<T>& t) { shapes.emplace_back(t.rows, t.cols); });
  std::size_t i = 0;
  m.weights.for_each([&](const std::string& name, const Matrix<T>& t) {
    if (t.rows != shapes[i].first || t.cols != shapes[i].second || t.data.size() != t.rows * t.cols)
      throw DomainError("tensor '" + name + "' has the wrong shape");
    for (T v : t.data)
      if (!std::isfinite(static_cast<double>(v))) throw DomainError("tensor '" + name + "' is not finite");
    ++i;
  });
  if (m.head_mask.n_layers != m.config.n_layers || m.head_mask.n_heads != m.config.n_heads ||
      m.head_mask.pruned.size() != static_cast<std::size_t>(m.config.n_layers * m.config.n_heads))
    throw DomainError("head mask layout does not match config");
}

std::vector<Token> tokenize(std::string_view text) {
  std::vector<Token> out;
  out.reserve(text.size());
  for (char c : text) out.push_back(static_cast<Token>(static_cast<unsigned char>(c)));
  return out;
}

std::string detokenize(std::span<const Token> tokens, int vocab_size) {
  std::string out;
  out.reserve(tokens.size());
  for (Token t : tokens) {
    if (t < 0 || t >= vocab_size || t > 255) throw DomainError("token id out of range: " + std::to_string(t));
    out.push_back(static_cast<char>(static_cast<unsigned char>(t)));
  }
  return out;
}

namespace detail {

double gelu(double x) {
  constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
  return 0.5 * x * (1.0 + std::tanh(k * (x + 0.044715 * x * x * x)));
}

double gelu_grad(double x) {
  constexpr double k = 0.7978845608028654;
  const double u = k * (x + 0.044715 * x * x * x);
  const double t = std::tanh(u);
  const double du = k * (1.0 + 3.0 * 0.044715 * x * x);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}

template <typename T>
std::vector<double> softmax_row(std::span<const T> logits, double temperature) {
  std::vector<double> p(logits.size());
  double mx = -std::numeric_limits<double>::infinity();
  for (T v : logits) mx = std::max(mx, static_cast<double>(v) / temperature);
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp(static_cast<double>(logits[i]) / temperature - mx);
    sum += p[i];
  }
  for (auto& v : p) v /= sum;
  return p;
}

template <typename T>
std::vector<double> log_softmax_row(std::span<const T> logits, double temperature) {
  std::vector<double> out(logits.size());
  double mx = -std::numeric_limits<double>::infinity();
  for (T v : logits) mx = std::max(mx, static_cast<double>(v) / temperature);
  double sum = 0.0;
  for (T v : logits) sum += std::exp(static_cast<double>(v) / temperature - mx);
  const double lse = mx + std::log(sum);
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = static_cast<double>(logits[i]) / temperature - lse;
  return out;
}

template <typename T>
Matrix<T> matmul_nt(const Matrix<T>& x, const Matrix<T>& w) {
  if (x.cols != w.cols) throw ShapeError("matmul_nt: inner dimensions differ");
  Matrix<T> y(x.rows, w.rows);
  for (std::size_t i = 0; i < x.rows; ++i) {
    const T* xi = x.data.data() + i * x.cols;
    for (std::size_t o = 0; o < w.rows; ++o) {
      const T* wo = w.data.data() + o * w.cols;
      double acc = 0.0;
      for (std::size_t k = 0; k < x.cols; ++k) acc += static_cast<double>(xi[k]) * static_cast<double>(wo[k]);
      y(i, o) = static_cast<T>(acc);
    }
  }
  return y;
}

namespace {

template <typename T>
LayerNormCache<T> layer_norm(const Matrix<T>& x, const Matrix<T>& gain, const Matrix<T>& bias) {
  LayerNormCache<T> c{Matrix<T>(x.rows, x.cols), std::vector<double>(x.rows), Matrix<T>(x.rows, x.cols)};
  const double n = static_cast<double>(x.cols);
  for (std::size_t i = 0; i < x.rows; ++i) {
    double mean = 0.0;
    for (std::size_t j = 0; j < x.cols; ++j) mean += static_cast<double>(x(i, j));
    mean /= n;
    double var = 0.0;
    for (std::size_t j = 0; j < x.cols; ++j) {
      const double d = static_cast<double>(x(i, j)) - mean;
      var += d * d;
    }
    var /= n;
    const double rstd = 1.0 / std::sqrt(var + kLayerNormEps);
    c.rstd[i] = rstd;
    for (std::size_t j = 0; j < x.cols; ++j) {
      const double xh = (static_cast<double>(x(i, j)) - mean) * rstd;
      c.xhat(i, j) = static_cast<T>(xh);
      c.out(i, j) = static_cast<T>(xh * static_cast<double>(gain.data[j]) + static_cast<double>(bias.data[j]));
    }
  }
  return c;
}

template <typename T>
void add_inplace(Matrix<T>& a, const Matrix<T>& b) {
  for (std::size_t i = 0; i < a.data.size(); ++i) a.data[i] += b.data[i];
}

void check_tokens(const ModelConfig& cfg, std::span<const Token> tokens) {
  if (tokens.empty()) throw DomainError("forward needs at least one token");
  if (tokens.size() > static_cast<std::size_t>(cfg.context_len))
    throw DomainError("sequence of " + std::to_string(tokens.size()) + " tokens exceeds context_len " +
                      std::to_string(cfg.context_len));
  for (Token t : tokens)
    if (t < 0 || t >= cfg.vocab_size) throw DomainError("token id out of range: " + std::to_string(t));
}

}  // namespace

template <typename T>
ForwardCache<T> forward_with_cache(const Model<T>& model, std::span<const Token> tokens) {
  const ModelConfig& cfg = model.config;
  check_tokens(cfg, tokens);
  const std::size_t seq = tokens.size();
  const auto d = static_cast<std::size_t>(cfg.d_model);
  const auto dh = static_cast<std::size_t>(cfg.d_head());
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const auto& w = model.weights;

  ForwardCache<T> cache;
  cache.tokens.assign(tokens.begin(), tokens.end());
  Matrix<T> x(seq, d);
  for (std::size_t i = 0; i < seq; ++i)
    for (std::size_t j = 0; j < d; ++j)
      x(i, j) = w.tok_emb(static_cast<std::size_t>(tokens[i]), j) + w.pos_emb(i, j);

  cache.layers.resize(w.layers.size());
  for (std::size_t li = 0; li < w.layers.size(); ++li) {
    const auto& lw = w.layers[li];
    auto& lc = cache.layers[li];
    lc.x_in = x;
    lc.ln1 = layer_norm(x, lw.ln1_gain, lw.ln1_bias);
    lc.q = matmul_nt(lc.ln1.out, lw.wq);
    lc.k = matmul_nt(lc.ln1.out, lw.wk);
    lc.v = matmul_nt(lc.ln1.out, lw.wv);
    lc.attn_concat = Matrix<T>(seq, d);
    lc.probs.assign(static_cast<std::size_t>(cfg.n_heads), Matrix<T>(seq, seq));
    for (int h = 0; h < cfg.n_heads; ++h) {
      const std::size_t off = static_cast<std::size_t>(h) * dh;
      auto& probs = lc.probs[static_cast<std::size_t>(h)];
      std::vector<double> scores(seq);
      for (std::size_t qi = 0; qi < seq; ++qi) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t kj = 0; kj <= qi; ++kj) {
          double s = 0.0;
          for (std::size_t c = 0; c < dh; ++c)
            s += static_cast<double>(lc.q(qi, off + c)) * static_cast<double>(lc.k(kj, off + c));
          scores[kj] = s * scale;
          mx = std::max(mx, scores[kj]);
        }
        double sum = 0.0;
        for (std::size_t kj = 0; kj <= qi; ++kj) {
          scores[kj] = std::exp(scores[kj] - mx);
          sum += scores[kj];
        }
        for (std::size_t kj = 0; kj <= qi; ++kj) probs(qi, kj) = static_cast<T>(scores[kj] / sum);
      }
      if (model.head_mask.is_pruned(static_cast<int>(li), h)) continue;
      for (std::size_t qi = 0; qi < seq; ++qi) {
        for (std::size_t c = 0; c < dh; ++c) {
          double acc = 0.0;
          for (std::size_t kj = 0; kj <= qi; ++kj)
            acc += static_cast<double>(probs(qi, kj)) * static_cast<double>(lc.v(kj, off + c));
          lc.attn_concat(qi, off + c) = static_cast<T>(acc);
        }
      }
    }
    Matrix<T> attn_out = matmul_nt(lc.attn_concat, lw.wo);
    add_inplace(x, attn_out);
    lc.x_mid = x;
    lc.ln2 = layer_norm(x, lw.ln2_gain, lw.ln2_bias);
    lc.ff_pre = matmul_nt(lc.ln2.out, lw.ff_in);
    lc.ff_act = Matrix<T>(lc.ff_pre.rows, lc.ff_pre.cols);
    for (std::size_t i = 0; i < lc.ff_pre.data.size(); ++i)
      lc.ff_act.data[i] = static_cast<T>(gelu(static_cast<double>(lc.ff_pre.data[i])));
    Matrix<T> ff_out = matmul_nt(lc.ff_act, lw.ff_out);
    add_inplace(x, ff_out);
  }
  cache.x_final = x;
  cache.lnf = layer_norm(x, w.lnf_gain, w.lnf_bias);
  cache.logits = matmul_nt(cache.lnf.out, w.tok_emb);
  return cache;
}

}  // namespace detail

template <typename T>
ForwardResult<T> forward(const Model<T>& model, std::span<const Token> tokens, const ForwardOptions& options) {
  auto cache = detail::forward_with_cache(model, tokens);
  ForwardResult<T> result;
  result.logits = std::move(cache.logits);
  result.trace.n_layers = model.config.n_layers;
  result.trace.n_heads = model.config.n_heads;
  if (options.record_attention) {
    for (auto& lc : cache.layers) {
      for (auto& p : lc.probs) {
        Matrix<double> m(p.rows, p.cols);
        for (std::size_t i = 0; i < p.data.size(); ++i) m.data[i] = static_cast<double>(p.data[i]);
        result.trace.maps.push_back(std::move(m));
      }
    }
  }
  return result;
}

template <typename T>
double mean_nll(const Matrix<T>& logits, std::span<const Token> targets) {
  if (logits.rows != targets.size())
    throw DomainError("mean_nll: " + std::to_string(logits.rows) + " logit rows but " +
                      std::to_string(targets.size()) + " targets");
  if (targets.empty()) throw DomainError("mean_nll: no positions");
  double total = 0.0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const Token t = targets[i];
    if (t < 0 || static_cast<std::size_t>(t) >= logits.cols) throw DomainError("mean_nll: target out of range");
    total -= detail::log_softmax_row(logits.row(i))[static_cast<std::size_t>(t)];
  }
  return total / static_cast<double>(targets.size());
}

template <typename T>
PerplexityResult perplexity(const Model<T>& model, std::span<const Token> corpus, const PerplexityOptions& options) {
  if (corpus.size() < 2) throw DomainError("perplexity needs a corpus of at least 2 tokens");
  const int window = options.window > 0 ? options.window : model.config.context_len;
  const int stride = options.stride > 0 ? options.stride : window;
  if (window > model.config.context_len) throw DomainError("perplexity window exceeds context_len");
  if (stride < 1 || stride > window) throw DomainError("perplexity stride must be in [1, window]");

  // Window starting at `begin` feeds corpus[begin, end) and predicts
  // corpus[begin + 1, end + 1); only targets past `scored_until` count.
  const std::size_t last = corpus.size() - 1;
  double nll_sum = 0.0;
  std::size_t scored = 0;
  std::size_t scored_until = 0;  // highest target index already scored
  for (std::size_t begin = 0; scored_until < last; begin += static_cast<std::size_t>(stride)) {
    const std::size_t end = std::min(begin + static_cast<std::size_t>(window), last);
    auto result = forward(model, corpus.subspan(begin, end - begin), ForwardOptions{false});
    for (std::size_t pos = begin; pos < end; ++pos) {
      const std::size_t target = pos + 1;
      if (target <= scored_until) continue;
      nll_sum -= detail::log_softmax_row(result.logits.row(pos - begin))[static_cast<std::size_t>(corpus[target])];
      ++scored;
    }
    scored_until = end;
  }
  const double mean = nll_sum / static_cast<double>(scored);
  return PerplexityResult{std::exp(mean), mean, scored};
}

template <typename T>
std::vector<Token> generate(const Model<T>& model, std::span<const Token> prompt, int steps, const GenerateMode& mode) {
  if (prompt.empty()) throw DomainError("generate needs a non-empty prompt");
  if (steps < 0) throw DomainError("generate: negative step count");
  if (prompt.size() + static_cast<std::size_t>(steps) > static_cast<std::size_t>(model.config.context_len))
    throw DomainError("generate: prompt + steps exceeds context_len");
  std::vector<Token> seq(prompt.begin(), prompt.end());
  std::mt19937_64 rng(std::holds_alternative<Sample>(mode) ? std::get<Sample>(mode).seed : 0);
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  for (int s = 0; s < steps; ++s) {
    auto result = forward(model, std::span<const Token>(seq), ForwardOptions{false});
    auto last = result.logits.row(result.logits.rows - 1);
    Token next = 0;
    if (const auto* sample = std::get_if<Sample>(&mode)) {
      if (!(sample->temperature > 0.0)) throw DomainError("sampling temperature must be positive");
      const auto probs = detail::softmax_row(last, sample->temperature);
      const double u = uniform(rng);
      double cum = 0.0;
      next = static_cast<Token>(probs.size() - 1);
      for (std::size_t i = 0; i < probs.size(); ++i) {
        cum += probs[i];
        if (u < cum) {
          next = static_cast<Token>(i);
          break;
        }
      }
    } else {
      next = static_cast<Token>(std::max_element(last.begin(), last.end()) - last.begin());
    }
    seq.push_back(next);
  }
  return seq;
}

#define CLAB_INSTANTIATE(T)                                                                          \
  template struct Weights<T>;                                                                        \
  template Model<T> zero_model<T>(const ModelConfig&);                                               \
  template Model<T> init_model<T>(const ModelConfig&, std::uint64_t, double);                        \
  template void validate_model<T>(const Model<T>&);                                                  \
  template ForwardResult<T> forward<T>(const Model<T>&, std::span<const Token>, const ForwardOptions&); \
  template double mean_nll<T>(const Matrix<T>&, std::span<const Token>);                             \
  template PerplexityResult perplexity<T>(const Model<T>&, std::span<const Token>,                   \
                                          const PerplexityOptions&);                                 \
  template std::vector<Token> generate<T>(const Model<T>&, std::span<const Token>, int,              \
                                          const GenerateMode&);                                      \
  template detail::ForwardCache<T> detail::forward_with_cache<T>(const Model<T>&,                    \
                                                                 std::span<const Token>);            \
  template Matrix<T> detail::matmul_nt<T>(const Matrix<T>&, const Matrix<T>&);                       \
  template std::vector<double> detail::softmax_row<T>(std::span<const T>, double);                   \
  template std::vector<double> detail::log_softmax_row<T>(std::span<const T>, double);

CLAB_INSTANTIATE(float)
CLAB_INSTANTIATE(double)

#undef CLAB_INSTANTIATE

}  // namespace clab
