#pragma once

// Toy-scale knowledge distillation: forward/reverse KL objectives, sequence
// level distillation, reverse-mode gradients for the tiny transformer, and an
// Adam trainer. Training runs in double precision.

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "clab/tinyformer.hpp"

namespace clab {

enum class DistillMethod { ForwardKLD, ReverseKLD, SeqKD };

std::string_view to_string(DistillMethod m);
DistillMethod parse_distill_method(std::string_view s);

struct DistillConfig {
  DistillMethod method = DistillMethod::ForwardKLD;
  double temperature = 1.0;
  double ce_mix_lambda = 0.0;  // weight on ground-truth cross-entropy
  int steps = 200;
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;
  int seqkd_prompts = 16;       // SeqKD: prompts sampled from the corpus
  int seqkd_prompt_len = 8;

  void validate() const;
};

/// T^2 * KL(softmax(teacher/T) || softmax(student/T)), averaged over rows.
template <typename T>
double forward_kld_loss(const Matrix<T>& teacher_logits, const Matrix<T>& student_logits, double temperature);

/// T^2 * KL(softmax(student/T) || softmax(teacher/T)), averaged over rows.
template <typename T>
double reverse_kld_loss(const Matrix<T>& teacher_logits, const Matrix<T>& student_logits, double temperature);

/// Concatenated teacher generations, one per prompt.
std::vector<Token> seqkd_corpus(const ModelF& teacher, const std::vector<std::vector<Token>>& prompts,
                                int length, const GenerateMode& mode = Greedy{});

// --- losses and gradients ----------------------------------------------------

struct CrossEntropyLoss {
  std::vector<Token> targets;
};

struct KldLoss {
  Matrix<double> teacher_logits;
  double temperature = 1.0;
  bool reverse = false;
  double ce_mix_lambda = 0.0;
  std::vector<Token> targets;  // needed when ce_mix_lambda > 0
};

using LossSpec = std::variant<CrossEntropyLoss, KldLoss>;

struct LogitGrad {
  double loss = 0.0;
  Matrix<double> grad;  // dL/dlogits
};

/// Loss value and its gradient with respect to the logits.
LogitGrad loss_and_logit_grad(const Matrix<double>& logits, const LossSpec& loss);

struct Gradients {
  double loss = 0.0;
  Weights<double> grad;
};

/// Reverse-mode gradient of the loss for one input sequence.
Gradients backward(const ModelD& model, std::span<const Token> inputs, const LossSpec& loss);

double evaluate_loss(const ModelD& model, std::span<const Token> inputs, const LossSpec& loss);

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  double epsilon = 0.0;
  /// Max error per parameter class: embedding, attention, ffn, layernorm.
  std::map<std::string, double> per_class;
};

/// |analytic - numeric| / max(1, |analytic|, |numeric|) over a seeded sample
/// of parameters (sample_size <= 0 checks every parameter), using central
/// differences.
GradCheckReport grad_check(const ModelD& model, std::span<const Token> inputs, const LossSpec& loss,
                           double epsilon, int sample_size, std::uint64_t seed = 0);

/// Same check for an arbitrary scalar function of a flat parameter vector.
GradCheckReport grad_check(const std::function<double(std::span<const double>)>& f,
                           const std::function<std::vector<double>(std::span<const double>)>& grad,
                           std::span<const double> params, double epsilon, int sample_size,
                           std::uint64_t seed = 0);

// --- training ----------------------------------------------------------------

struct AdamOptions {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct TrainResult {
  ModelF model;
  std::vector<double> losses;  // one per step
};

/// Trains a freshly initialized student against the teacher. SeqKD first
/// builds a greedy teacher corpus from prompts drawn out of `corpus`, then fits
/// it with cross-entropy.
TrainResult train_student(const ModelF& teacher, const ModelConfig& student_config, std::span<const Token> corpus,
                          const DistillConfig& config);

/// Plain next-token cross-entropy training from a seeded initialization.
TrainResult train_language_model(const ModelConfig& config, std::span<const Token> corpus, int steps,
                                 double learning_rate, std::uint64_t seed);

/// Mean of the first and last `window` losses.
std::pair<double, double> smoothed_endpoints(std::span<const double> losses, std::size_t window);

std::string loss_log_csv(std::span<const double> losses);

}  // namespace clab
