#pragma once

// Straightforward re-implementations used as test oracles. Nothing here calls
// into the library's forward or loss code.

#include <span>
#include <vector>

#include "clab/tinyformer.hpp"

namespace clab::testing {

struct NaiveForward {
  std::vector<std::vector<double>> logits;             // [seq][vocab]
  std::vector<std::vector<std::vector<double>>> attn;  // [layer * n_heads + head][q][k]
};

/// Dense textbook forward in double. Masked heads contribute nothing.
NaiveForward naive_forward(const ModelD& model, std::span<const Token> tokens);

/// exp(mean NLL) over non-overlapping windows, logits from naive_forward.
double naive_perplexity(const ModelD& model, std::span<const Token> corpus, int window);

/// -log softmax(row)[target] with a plain log-sum-exp.
double naive_nll(const std::vector<double>& row, int target);

/// KL(p || q) for explicit probability vectors.
double kl(const std::vector<double>& p, const std::vector<double>& q);

std::vector<double> softmax(const std::vector<double>& logits, double temperature = 1.0);

}  // namespace clab::testing
