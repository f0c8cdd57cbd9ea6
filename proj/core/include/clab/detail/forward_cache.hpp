#pragma once

// Intermediate activations of one forward pass, kept for reverse-mode
// differentiation. Not part of the stable API.

#include <type_traits>
#include <vector>

#include "clab/tinyformer.hpp"

namespace clab::detail {

inline constexpr double kLayerNormEps = 1e-5;

template <typename T>
struct LayerNormCache {
  Matrix<T> xhat;            // normalized input, before gain/bias
  std::vector<double> rstd;  // per row
  Matrix<T> out;
};

template <typename T>
struct LayerCache {
  Matrix<T> x_in;
  LayerNormCache<T> ln1;
  Matrix<T> q, k, v;             // [seq x d_model]
  std::vector<Matrix<T>> probs;  // per head [seq x seq]
  Matrix<T> attn_concat;         // [seq x d_model], masked heads zeroed
  Matrix<T> x_mid;
  LayerNormCache<T> ln2;
  Matrix<T> ff_pre;  // [seq x d_ff]
  Matrix<T> ff_act;
};

template <typename T>
struct ForwardCache {
  std::vector<Token> tokens;
  std::vector<LayerCache<T>> layers;
  Matrix<T> x_final;
  LayerNormCache<T> lnf;
  Matrix<T> logits;
};

template <typename T>
ForwardCache<T> forward_with_cache(const Model<T>& model, std::span<const Token> tokens);

/// y = x * W^T, accumulated in double.
template <typename T>
Matrix<T> matmul_nt(const Matrix<T>& x, const Matrix<T>& w);

double gelu(double x);
double gelu_grad(double x);

/// Numerically stable softmax of one row, in double.
template <typename T>
std::vector<double> softmax_row(std::span<const T> logits, double temperature = 1.0);

/// log-softmax of one row, in double.
template <typename T>
std::vector<double> log_softmax_row(std::span<const T> logits, double temperature = 1.0);

template <typename T>
  requires(!std::is_const_v<T>)
std::vector<double> softmax_row(std::span<T> logits, double temperature = 1.0) {
  return softmax_row(std::span<const T>(logits), temperature);
}

template <typename T>
  requires(!std::is_const_v<T>)
std::vector<double> log_softmax_row(std::span<T> logits, double temperature = 1.0) {
  return log_softmax_row(std::span<const T>(logits), temperature);
}

}  // namespace clab::detail
