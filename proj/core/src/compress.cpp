#include "clab/compress.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>

#include <json.hpp>

#include "clab/errors.hpp"

namespace clab {

int quant_max(int bits) {
  if (bits != 4 && bits != 8) throw DomainError("quantization supports 4 or 8 bits, got " + std::to_string(bits));
  return (1 << (bits - 1)) - 1;
}

template <typename T>
QuantizedTensor quantize_tensor(const Matrix<T>& matrix, int bits) {
  const int qmax = quant_max(bits);
  QuantizedTensor q;
  q.bits = bits;
  q.rows = matrix.rows;
  q.cols = matrix.cols;
  q.scales.assign(matrix.rows, 1.0);
  q.codes.assign(matrix.size(), 0);
  for (std::size_t r = 0; r < matrix.rows; ++r) {
    double absmax = 0.0;
    for (T v : matrix.row(r)) {
      const double d = static_cast<double>(v);
      if (!std::isfinite(d)) throw DomainError("quantize_tensor: non-finite value");
      absmax = std::max(absmax, std::abs(d));
    }
    if (absmax == 0.0) continue;
    q.scales[r] = absmax / qmax;
    for (std::size_t c = 0; c < matrix.cols; ++c) {
      // w / absmax * qmax keeps exact midpoints exact (e.g. -0.2 / 0.4 * 127).
      const double x = static_cast<double>(matrix(r, c)) / absmax * qmax;
      const double code = std::clamp(std::round(x), -static_cast<double>(qmax), static_cast<double>(qmax));
      q.codes[r * matrix.cols + c] = static_cast<std::int8_t>(code);
    }
  }
  return q;
}

Matrix<float> dequantize(const QuantizedTensor& q) {
  Matrix<float> m(q.rows, q.cols);
  for (std::size_t r = 0; r < q.rows; ++r)
    for (std::size_t c = 0; c < q.cols; ++c) m(r, c) = static_cast<float>(q.value(r, c));
  return m;
}

template <typename T>
Matrix<T>& linear_weight(LayerWeights<T>& l, LinearKind kind) {
  switch (kind) {
    case LinearKind::Q: return l.wq;
    case LinearKind::K: return l.wk;
    case LinearKind::V: return l.wv;
    case LinearKind::O: return l.wo;
    case LinearKind::FfIn: return l.ff_in;
    case LinearKind::FfOut: return l.ff_out;
  }
  throw DomainError("unknown linear kind");
}

template <typename T>
const Matrix<T>& linear_weight(const LayerWeights<T>& l, LinearKind kind) {
  return linear_weight(const_cast<LayerWeights<T>&>(l), kind);
}

QuantizedModel::QuantizedModel(const ModelF& model, int bits) : bits_(bits), shell_(model) {
  quant_max(bits);
  validate_model(model);
  linears_.resize(model.weights.layers.size());
  for (std::size_t l = 0; l < model.weights.layers.size(); ++l) {
    for (LinearKind kind : kAllLinears) {
      linears_[l].push_back(quantize_tensor(linear_weight(model.weights.layers[l], kind), bits));
      linear_weight(shell_.weights.layers[l], kind) = Matrix<float>();
    }
  }
  shell_.quantized_bits = bits;
}

const QuantizedTensor& QuantizedModel::linear(int layer, LinearKind kind) const {
  return linears_.at(static_cast<std::size_t>(layer)).at(static_cast<std::size_t>(kind));
}

ModelF QuantizedModel::materialize() const {
  ModelF m = shell_;
  for (std::size_t l = 0; l < linears_.size(); ++l)
    for (LinearKind kind : kAllLinears)
      linear_weight(m.weights.layers[l], kind) = dequantize(linears_[l][static_cast<std::size_t>(kind)]);
  return m;
}

ForwardResult<float> QuantizedModel::forward(std::span<const Token> tokens, const ForwardOptions& options) const {
  return clab::forward(materialize(), tokens, options);
}

QuantizedModel quantize_model(const ModelF& model, int bits) { return QuantizedModel(model, bits); }

template <typename T>
Matrix<T> prune_2_4(const Matrix<T>& matrix) {
  if (matrix.cols % 4 != 0)
    throw ShapeError("prune_2_4: row length " + std::to_string(matrix.cols) + " is not a multiple of 4");
  Matrix<T> out = matrix;
  for (std::size_t r = 0; r < out.rows; ++r) {
    auto row = out.row(r);
    for (std::size_t g = 0; g < row.size(); g += 4) {
      std::array<std::size_t, 4> idx{g, g + 1, g + 2, g + 3};
      std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        return std::abs(static_cast<double>(row[a])) > std::abs(static_cast<double>(row[b]));
      });
      row[idx[2]] = T(0);
      row[idx[3]] = T(0);
    }
  }
  return out;
}

ModelF prune_model_2_4(const ModelF& model) {
  validate_model(model);
  ModelF out = model;
  for (auto& layer : out.weights.layers)
    for (LinearKind kind : kAllLinears) linear_weight(layer, kind) = prune_2_4(linear_weight(layer, kind));
  return out;
}

template <typename T>
HeadConcentrationReport head_concentration(const Model<T>& model,
                                           const std::vector<std::vector<Token>>& calibration) {
  if (calibration.empty()) throw DomainError("head_concentration: empty calibration set");
  const ModelConfig& cfg = model.config;
  HeadConcentrationReport report;
  report.n_layers = cfg.n_layers;
  report.n_heads = cfg.n_heads;
  report.scores.assign(static_cast<std::size_t>(cfg.n_layers * cfg.n_heads), 0.0);
  for (const auto& seq : calibration) {
    if (seq.size() < static_cast<std::size_t>(kMinEarlierKeys + 1)) continue;
    const auto result = forward(model, std::span<const Token>(seq));
    for (std::size_t q = kMinEarlierKeys; q < seq.size(); ++q) {
      for (int l = 0; l < cfg.n_layers; ++l) {
        for (int h = 0; h < cfg.n_heads; ++h) {
          const auto row = result.trace.at(l, h).row(q);
          report.scores[static_cast<std::size_t>(l * cfg.n_heads + h)] +=
              *std::max_element(row.begin(), row.begin() + static_cast<std::ptrdiff_t>(q + 1));
        }
      }
      ++report.n_samples;
    }
  }
  if (report.n_samples == 0)
    throw DomainError("head_concentration: every calibration sequence is shorter than " +
                      std::to_string(kMinEarlierKeys + 1) + " tokens");
  for (auto& s : report.scores) s = std::clamp(s / static_cast<double>(report.n_samples), 0.0, 1.0);
  return report;
}

std::string to_json(const HeadConcentrationReport& report) {
  nlohmann::json heads = nlohmann::json::array();
  for (int l = 0; l < report.n_layers; ++l)
    for (int h = 0; h < report.n_heads; ++h)
      heads.push_back({{"layer", l}, {"head", h}, {"score", report.score(l, h)}});
  return nlohmann::json{{"n_samples", report.n_samples}, {"heads", heads}}.dump(2);
}

template <typename T>
Model<T> prune_heads(const Model<T>& model, const HeadConcentrationReport& report, double threshold) {
  if (!(threshold > 0.0 && threshold <= 1.0)) throw DomainError("head pruning threshold must be in (0, 1]");
  if (report.n_layers != model.config.n_layers || report.n_heads != model.config.n_heads ||
      report.scores.size() != static_cast<std::size_t>(report.n_layers * report.n_heads))
    throw DomainError("head concentration report does not match the model's layer/head layout");
  Model<T> out = model;
  for (int l = 0; l < report.n_layers; ++l)
    for (int h = 0; h < report.n_heads; ++h)
      if (report.score(l, h) >= threshold) out.head_mask.set(l, h, true);
  return out;
}

void validate(const CompressionPass& pass) {
  std::visit(
      [](const auto& p) {
        using P = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<P, QuantizePass>) {
          quant_max(p.bits);
        } else if constexpr (std::is_same_v<P, PruneHeadsPass>) {
          if (!(p.threshold > 0.0 && p.threshold <= 1.0))
            throw DomainError("head pruning threshold must be in (0, 1]");
        } else if constexpr (std::is_same_v<P, DistillRefPass>) {
          if (p.student.empty()) throw DomainError("distill pass needs a student id");
        }
      },
      pass);
}

std::string describe(const CompressionPass& pass) {
  return std::visit(
      [](const auto& p) -> std::string {
        using P = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<P, QuantizePass>) {
          return "quantize(" + std::to_string(p.bits) + ")";
        } else if constexpr (std::is_same_v<P, PruneHeadsPass>) {
          char buf[32];
          std::snprintf(buf, sizeof buf, "%g", p.threshold);
          return std::string("prune_heads(") + buf + ")";
        } else if constexpr (std::is_same_v<P, Prune24Pass>) {
          return "prune_24";
        } else {
          return "distill(" + p.student + ")";
        }
      },
      pass);
}

Pipeline::Pipeline(std::vector<CompressionPass> passes, PassContext context)
    : passes_(std::move(passes)), context_(std::move(context)) {
  for (const auto& p : passes_) validate(p);
}

ModelF Pipeline::operator()(const ModelF& model) const {
  ModelF current = model;
  for (const auto& pass : passes_) {
    if (const auto* q = std::get_if<QuantizePass>(&pass)) {
      current = quantize_model(current, q->bits).materialize();
    } else if (const auto* ph = std::get_if<PruneHeadsPass>(&pass)) {
      current = prune_heads(current, head_concentration(current, context_.calibration), ph->threshold);
    } else if (std::holds_alternative<Prune24Pass>(pass)) {
      current = prune_model_2_4(current);
    } else {
      const auto& d = std::get<DistillRefPass>(pass);
      if (!context_.student) throw DomainError("no student provider for distill pass '" + d.student + "'");
      current = context_.student(d.student);
    }
  }
  return current;
}

Pipeline compose(std::vector<CompressionPass> passes, PassContext context) {
  return Pipeline(std::move(passes), std::move(context));
}

template QuantizedTensor quantize_tensor<float>(const Matrix<float>&, int);
template QuantizedTensor quantize_tensor<double>(const Matrix<double>&, int);
template Matrix<float> prune_2_4<float>(const Matrix<float>&);
template Matrix<double> prune_2_4<double>(const Matrix<double>&);
template Matrix<float>& linear_weight<float>(LayerWeights<float>&, LinearKind);
template Matrix<double>& linear_weight<double>(LayerWeights<double>&, LinearKind);
template const Matrix<float>& linear_weight<float>(const LayerWeights<float>&, LinearKind);
template const Matrix<double>& linear_weight<double>(const LayerWeights<double>&, LinearKind);
template HeadConcentrationReport head_concentration<float>(const Model<float>&, const std::vector<std::vector<Token>>&);
template HeadConcentrationReport head_concentration<double>(const Model<double>&, const std::vector<std::vector<Token>>&);
template Model<float> prune_heads<float>(const Model<float>&, const HeadConcentrationReport&, double);
template Model<double> prune_heads<double>(const Model<double>&, const HeadConcentrationReport&, double);

}  // namespace clab
