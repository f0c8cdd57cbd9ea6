#pragma once

// A minimal pre-norm GPT-style decoder: learned positional embeddings,
// causal multi-head self-attention, GELU feed-forward, and an output head
// tied to the token embedding.
//
// Linear weights are stored [out x in] and applied as y = x * W^T, so each
// matrix row is one output channel spanning the input dimension.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <variant>
#include <vector>

namespace clab {

using Token = std::int32_t;

struct ModelConfig {
  int n_layers = 2;
  int n_heads = 4;
  int d_model = 64;
  int d_ff = 256;
  int vocab_size = 256;
  int context_len = 64;

  /// Throws DomainError when the configuration is unusable.
  void validate() const;
  int d_head() const { return d_model / n_heads; }

  bool operator==(const ModelConfig&) const = default;
};

template <typename T>
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<T> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, T fill = T{}) : rows(r), cols(c), data(r * c, fill) {}

  T& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  std::span<T> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const T> row(std::size_t r) const { return {data.data() + r * cols, cols}; }
  std::size_t size() const { return data.size(); }

  bool operator==(const Matrix&) const = default;
};

template <typename T>
struct LayerWeights {
  Matrix<T> ln1_gain, ln1_bias;  // [1 x d_model]
  Matrix<T> wq, wk, wv, wo;      // [d_model x d_model]
  Matrix<T> ln2_gain, ln2_bias;  // [1 x d_model]
  Matrix<T> ff_in;               // [d_ff x d_model]
  Matrix<T> ff_out;              // [d_model x d_ff]
};

template <typename T>
struct Weights {
  Matrix<T> tok_emb;  // [vocab x d_model], also the output head
  Matrix<T> pos_emb;  // [context x d_model]
  std::vector<LayerWeights<T>> layers;
  Matrix<T> lnf_gain, lnf_bias;

  static Weights zeros(const ModelConfig& cfg);

  /// Visits every tensor in canonical (file) order as f(name, matrix).
  template <typename F>
  void for_each(F&& f) {
    visit_impl(*this, f);
  }
  template <typename F>
  void for_each(F&& f) const {
    visit_impl(*this, f);
  }

 private:
  template <typename Self, typename F>
  static void visit_impl(Self& w, F& f) {
    f(std::string("tok_emb"), w.tok_emb);
    f(std::string("pos_emb"), w.pos_emb);
    for (std::size_t i = 0; i < w.layers.size(); ++i) {
      auto& l = w.layers[i];
      const std::string p = "layers." + std::to_string(i) + ".";
      f(p + "ln1.gain", l.ln1_gain);
      f(p + "ln1.bias", l.ln1_bias);
      f(p + "attn.wq", l.wq);
      f(p + "attn.wk", l.wk);
      f(p + "attn.wv", l.wv);
      f(p + "attn.wo", l.wo);
      f(p + "ln2.gain", l.ln2_gain);
      f(p + "ln2.bias", l.ln2_bias);
      f(p + "ff.in", l.ff_in);
      f(p + "ff.out", l.ff_out);
    }
    f(std::string("lnf.gain"), w.lnf_gain);
    f(std::string("lnf.bias"), w.lnf_bias);
  }
};

/// Per (layer, head) pruning flags. A pruned head's value contribution is zero.
struct HeadMask {
  int n_layers = 0;
  int n_heads = 0;
  std::vector<std::uint8_t> pruned;

  static HeadMask none(const ModelConfig& cfg);
  bool is_pruned(int layer, int head) const {
    return pruned[static_cast<std::size_t>(layer * n_heads + head)] != 0;
  }
  void set(int layer, int head, bool value) {
    pruned[static_cast<std::size_t>(layer * n_heads + head)] = value ? 1 : 0;
  }
  int count() const;
  bool operator==(const HeadMask&) const = default;
};

template <typename T>
struct Model {
  ModelConfig config;
  Weights<T> weights;
  HeadMask head_mask;
  /// Set when the linear weights hold dequantized low-bit values.
  std::optional<int> quantized_bits;
};

using ModelF = Model<float>;
using ModelD = Model<double>;

/// All parameters zero (including layer-norm gains): uniform logits and
/// uniform causal attention for any input.
template <typename T>
Model<T> zero_model(const ModelConfig& cfg);

/// Gaussian(0, stddev) matrices, unit layer-norm gains, zero biases.
template <typename T>
Model<T> init_model(const ModelConfig& cfg, std::uint64_t seed, double stddev = 0.02);

template <typename To, typename From>
Model<To> model_cast(const Model<From>& m) {
  Model<To> out;
  out.config = m.config;
  out.head_mask = m.head_mask;
  out.quantized_bits = m.quantized_bits;
  out.weights = Weights<To>::zeros(m.config);
  std::vector<const Matrix<From>*> src;
  m.weights.for_each([&](const std::string&, const Matrix<From>& t) { src.push_back(&t); });
  std::size_t i = 0;
  out.weights.for_each([&](const std::string&, Matrix<To>& t) {
    const auto& s = *src[i++];
    for (std::size_t k = 0; k < s.data.size(); ++k) t.data[k] = static_cast<To>(s.data[k]);
  });
  return out;
}

/// Throws DomainError when shapes disagree with the config or values are non-finite.
template <typename T>
void validate_model(const Model<T>& m);

std::size_t parameter_count(const ModelConfig& cfg);

// --- tokenizer ---------------------------------------------------------------

std::vector<Token> tokenize(std::string_view text);
std::string detokenize(std::span<const Token> tokens, int vocab_size = 256);

// --- forward -----------------------------------------------------------------

/// Attention probabilities for every (layer, head): [seq x seq], rows are
/// queries, columns keys.
struct AttentionTrace {
  int n_layers = 0;
  int n_heads = 0;
  std::vector<Matrix<double>> maps;

  const Matrix<double>& at(int layer, int head) const {
    return maps[static_cast<std::size_t>(layer * n_heads + head)];
  }
};

template <typename T>
struct ForwardResult {
  Matrix<T> logits;  // [seq x vocab]
  AttentionTrace trace;
};

struct ForwardOptions {
  bool record_attention = true;
};

template <typename T>
ForwardResult<T> forward(const Model<T>& model, std::span<const Token> tokens,
                         const ForwardOptions& options = {});

/// Mean over rows of -log softmax(logits[row])[targets[row]], in nats.
template <typename T>
double mean_nll(const Matrix<T>& logits, std::span<const Token> targets);

struct PerplexityOptions {
  int window = 0;  // 0 = context_len
  int stride = 0;  // 0 = window
};

struct PerplexityResult {
  double perplexity = 0.0;
  double mean_nll = 0.0;
  std::size_t scored_tokens = 0;
};

template <typename T>
PerplexityResult perplexity(const Model<T>& model, std::span<const Token> corpus,
                            const PerplexityOptions& options = {});

// --- generation --------------------------------------------------------------

struct Greedy {};
struct Sample {
  double temperature = 1.0;
  std::uint64_t seed = 0;
};
using GenerateMode = std::variant<Greedy, Sample>;

/// Returns prompt followed by `steps` generated tokens.
template <typename T>
std::vector<Token> generate(const Model<T>& model, std::span<const Token> prompt, int steps,
                            const GenerateMode& mode = Greedy{});

// --- persistence -------------------------------------------------------------

/// Header line (JSON) followed by little-endian float32 payloads.
void save_model(const ModelF& model, const std::string& path);
ModelF load_model(const std::string& path);

std::string encode_model(const ModelF& model);
ModelF decode_model(std::string_view bytes);

}  // namespace clab
