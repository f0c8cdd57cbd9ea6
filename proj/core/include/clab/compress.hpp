#pragma once

// Compression passes over a tiny transformer: symmetric absmax quantization,
// attention-head masking driven by attention concentration, and 2:4
// magnitude pruning, plus left-to-right composition of passes.

#include <cstdint>
#include <functional>
#include <string>
#include <variant>
#include <vector>

#include "clab/tinyformer.hpp"

namespace clab {

// --- quantization ------------------------------------------------------------

/// Largest code magnitude for a bit width: 127 for 8, 7 for 4.
int quant_max(int bits);

struct QuantizedTensor {
  int bits = 8;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> scales;       // one per row; 1.0 for an all-zero row
  std::vector<std::int8_t> codes;  // row-major, within [-quant_max, quant_max]

  /// code * row scale, in double.
  double value(std::size_t r, std::size_t c) const {
    return static_cast<double>(codes[r * cols + c]) * scales[r];
  }
};

/// Per-row symmetric absmax quantization with round-half-away-from-zero.
template <typename T>
QuantizedTensor quantize_tensor(const Matrix<T>& matrix, int bits);

Matrix<float> dequantize(const QuantizedTensor& q);

enum class LinearKind { Q, K, V, O, FfIn, FfOut };
inline constexpr LinearKind kAllLinears[] = {LinearKind::Q, LinearKind::K,    LinearKind::V,
                                             LinearKind::O, LinearKind::FfIn, LinearKind::FfOut};

template <typename T>
Matrix<T>& linear_weight(LayerWeights<T>& layer, LinearKind kind);
template <typename T>
const Matrix<T>& linear_weight(const LayerWeights<T>& layer, LinearKind kind);

/// A model whose six per-layer projections are held as QuantizedTensors.
/// Embeddings and layer norms stay in full precision. Forward dequantizes the
/// projections on every call.
class QuantizedModel {
 public:
  QuantizedModel(const ModelF& model, int bits);

  int bits() const { return bits_; }
  const ModelConfig& config() const { return shell_.config; }
  const QuantizedTensor& linear(int layer, LinearKind kind) const;

  /// Dense model carrying the dequantized projections; quantized_bits is set.
  ModelF materialize() const;

  ForwardResult<float> forward(std::span<const Token> tokens, const ForwardOptions& options = {}) const;

 private:
  int bits_;
  ModelF shell_;  // projections emptied
  std::vector<std::vector<QuantizedTensor>> linears_;  // [layer][LinearKind]
};

QuantizedModel quantize_model(const ModelF& model, int bits);

// --- 2:4 pruning -------------------------------------------------------------

/// In each aligned group of 4 along a row keeps the 2 largest magnitudes
/// (ties keep the lower index) and zeroes the rest. Row length must be a
/// multiple of 4 (ShapeError otherwise).
template <typename T>
Matrix<T> prune_2_4(const Matrix<T>& matrix);

/// Applies prune_2_4 to every projection of every layer.
ModelF prune_model_2_4(const ModelF& model);

// --- attention-head pruning --------------------------------------------------

/// Only query positions with at least this many earlier keys are scored.
inline constexpr int kMinEarlierKeys = 4;

struct HeadConcentrationReport {
  int n_layers = 0;
  int n_heads = 0;
  std::vector<double> scores;  // [layer * n_heads + head], each in [0, 1]
  std::size_t n_samples = 0;   // scored (sequence, query) pairs

  double score(int layer, int head) const {
    return scores[static_cast<std::size_t>(layer * n_heads + head)];
  }
};

/// score = mean over calibration (sequence, query) pairs of the row maximum
/// of the head's attention map. Sequences shorter than kMinEarlierKeys + 1
/// are skipped; DomainError if nothing remains.
template <typename T>
HeadConcentrationReport head_concentration(const Model<T>& model,
                                           const std::vector<std::vector<Token>>& calibration);

std::string to_json(const HeadConcentrationReport& report);

/// Masks every head whose score >= threshold; already-masked heads stay masked.
template <typename T>
Model<T> prune_heads(const Model<T>& model, const HeadConcentrationReport& report, double threshold);

// --- composition -------------------------------------------------------------

struct QuantizePass {
  int bits = 8;
};
struct PruneHeadsPass {
  double threshold = 0.9;
};
struct Prune24Pass {};
struct DistillRefPass {
  std::string student;
};

using CompressionPass = std::variant<QuantizePass, PruneHeadsPass, Prune24Pass, DistillRefPass>;

void validate(const CompressionPass& pass);
std::string describe(const CompressionPass& pass);

struct PassContext {
  std::vector<std::vector<Token>> calibration;
  /// Resolves a DistillRef student id to a model.
  std::function<ModelF(const std::string&)> student;
};

/// Applies passes left to right; an empty list is the identity.
class Pipeline {
 public:
  Pipeline(std::vector<CompressionPass> passes, PassContext context);

  ModelF operator()(const ModelF& model) const;
  const std::vector<CompressionPass>& passes() const { return passes_; }

 private:
  std::vector<CompressionPass> passes_;
  PassContext context_;
};

Pipeline compose(std::vector<CompressionPass> passes, PassContext context = {});

}  // namespace clab
