#include "clab/distill.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "clab/detail/forward_cache.hpp"
#include "clab/errors.hpp"

namespace clab {

using detail::log_softmax_row;
using detail::softmax_row;

std::string_view to_string(DistillMethod m) {
  switch (m) {
    case DistillMethod::ForwardKLD: return "forward_kld";
    case DistillMethod::ReverseKLD: return "reverse_kld";
    case DistillMethod::SeqKD: return "seqkd";
  }
  return "?";
}

DistillMethod parse_distill_method(std::string_view s) {
  if (s == "forward_kld" || s == "kd" || s == "forward") return DistillMethod::ForwardKLD;
  if (s == "reverse_kld" || s == "minillm" || s == "reverse") return DistillMethod::ReverseKLD;
  if (s == "seqkd") return DistillMethod::SeqKD;
  throw DomainError("unknown distillation method '" + std::string(s) + "'");
}

void DistillConfig::validate() const {
  if (!(temperature > 0.0)) throw DomainError("distillation temperature must be positive");
  if (!(ce_mix_lambda >= 0.0 && ce_mix_lambda <= 1.0)) throw DomainError("ce_mix_lambda must be in [0, 1]");
  if (steps < 0) throw DomainError("steps must be non-negative");
  if (!(learning_rate > 0.0)) throw DomainError("learning rate must be positive");
  if (method == DistillMethod::SeqKD && (seqkd_prompts < 1 || seqkd_prompt_len < 1))
    throw DomainError("SeqKD needs at least one non-empty prompt");
}

namespace {

template <typename T>
void check_same_shape(const Matrix<T>& a, const Matrix<T>& b) {
  if (a.rows != b.rows || a.cols != b.cols) throw DomainError("teacher and student logits differ in shape");
  if (a.rows == 0) throw DomainError("KL loss needs at least one position");
}

// KL(p || q) for one row where p = softmax(a/T), q = softmax(b/T).
template <typename T>
double kl_row(std::span<const T> a, std::span<const T> b, double temperature) {
  const auto la = log_softmax_row(a, temperature);
  const auto lb = log_softmax_row(b, temperature);
  double kl = 0.0;
  for (std::size_t i = 0; i < la.size(); ++i) {
    const double p = std::exp(la[i]);
    if (p > 0.0) kl += p * (la[i] - lb[i]);
  }
  return std::max(kl, 0.0);
}

}  // namespace

template <typename T>
double forward_kld_loss(const Matrix<T>& teacher, const Matrix<T>& student, double temperature) {
  if (!(temperature > 0.0)) throw DomainError("temperature must be positive");
  check_same_shape(teacher, student);
  double total = 0.0;
  for (std::size_t r = 0; r < teacher.rows; ++r) total += kl_row(teacher.row(r), student.row(r), temperature);
  return temperature * temperature * total / static_cast<double>(teacher.rows);
}

template <typename T>
double reverse_kld_loss(const Matrix<T>& teacher, const Matrix<T>& student, double temperature) {
  if (!(temperature > 0.0)) throw DomainError("temperature must be positive");
  check_same_shape(teacher, student);
  double total = 0.0;
  for (std::size_t r = 0; r < teacher.rows; ++r) total += kl_row(student.row(r), teacher.row(r), temperature);
  return temperature * temperature * total / static_cast<double>(teacher.rows);
}

std::vector<Token> seqkd_corpus(const ModelF& teacher, const std::vector<std::vector<Token>>& prompts, int length,
                                const GenerateMode& mode) {
  std::vector<Token> corpus;
  std::uint64_t index = 0;
  for (const auto& prompt : prompts) {
    GenerateMode m = mode;
    // Each prompt gets its own stream so the corpus does not depend on prompt order.
    if (auto* s = std::get_if<Sample>(&m)) s->seed += index;
    auto seq = generate(teacher, std::span<const Token>(prompt), length, m);
    corpus.insert(corpus.end(), seq.begin(), seq.end());
    ++index;
  }
  return corpus;
}

LogitGrad loss_and_logit_grad(const Matrix<double>& logits, const LossSpec& spec) {
  const std::size_t n = logits.rows;
  if (n == 0) throw DomainError("loss over zero positions");
  const double inv_n = 1.0 / static_cast<double>(n);
  LogitGrad out{0.0, Matrix<double>(n, logits.cols)};

  auto add_ce = [&](const std::vector<Token>& targets, double weight) {
    if (targets.size() != n) throw DomainError("targets do not match the number of positions");
    for (std::size_t r = 0; r < n; ++r) {
      const auto t = static_cast<std::size_t>(targets[r]);
      if (targets[r] < 0 || t >= logits.cols) throw DomainError("target out of range");
      const auto lp = log_softmax_row(logits.row(r));
      out.loss -= weight * lp[t] * inv_n;
      for (std::size_t c = 0; c < logits.cols; ++c) out.grad(r, c) += weight * inv_n * std::exp(lp[c]);
      out.grad(r, t) -= weight * inv_n;
    }
  };

  if (const auto* ce = std::get_if<CrossEntropyLoss>(&spec)) {
    add_ce(ce->targets, 1.0);
    return out;
  }
  const auto& kld = std::get<KldLoss>(spec);
  check_same_shape(kld.teacher_logits, logits);
  if (!(kld.temperature > 0.0)) throw DomainError("temperature must be positive");
  const double t = kld.temperature;
  const double w = 1.0 - kld.ce_mix_lambda;
  for (std::size_t r = 0; r < n; ++r) {
    const auto lt = log_softmax_row(kld.teacher_logits.row(r), t);
    const auto ls = log_softmax_row(logits.row(r), t);
    if (!kld.reverse) {
      // d/dz_s of T^2 KL(p_t || p_s) = T (p_s - p_t)
      double kl = 0.0;
      for (std::size_t c = 0; c < logits.cols; ++c) {
        const double pt = std::exp(lt[c]);
        if (pt > 0.0) kl += pt * (lt[c] - ls[c]);
        out.grad(r, c) += w * inv_n * t * (std::exp(ls[c]) - pt);
      }
      out.loss += w * inv_n * t * t * kl;
    } else {
      // d/dz_s of T^2 KL(q || p) = T q_i (log q_i - log p_i - KL)
      double kl = 0.0;
      for (std::size_t c = 0; c < logits.cols; ++c) {
        const double q = std::exp(ls[c]);
        if (q > 0.0) kl += q * (ls[c] - lt[c]);
      }
      for (std::size_t c = 0; c < logits.cols; ++c) {
        const double q = std::exp(ls[c]);
        out.grad(r, c) += w * inv_n * t * q * (ls[c] - lt[c] - kl);
      }
      out.loss += w * inv_n * t * t * kl;
    }
  }
  if (kld.ce_mix_lambda > 0.0) add_ce(kld.targets, kld.ce_mix_lambda);
  return out;
}

namespace {

using MatD = Matrix<double>;

// dW += dY^T X   (dY [s x out], X [s x in], dW [out x in])
void accum_weight_grad(MatD& dw, const MatD& dy, const MatD& x) {
  for (std::size_t i = 0; i < dy.rows; ++i) {
    for (std::size_t o = 0; o < dy.cols; ++o) {
      const double g = dy(i, o);
      if (g == 0.0) continue;
      double* row = dw.data.data() + o * dw.cols;
      const double* xi = x.data.data() + i * x.cols;
      for (std::size_t k = 0; k < x.cols; ++k) row[k] += g * xi[k];
    }
  }
}

// dX = dY W   (W [out x in])
MatD input_grad(const MatD& dy, const MatD& w) {
  MatD dx(dy.rows, w.cols);
  for (std::size_t i = 0; i < dy.rows; ++i) {
    double* out = dx.data.data() + i * dx.cols;
    for (std::size_t o = 0; o < dy.cols; ++o) {
      const double g = dy(i, o);
      if (g == 0.0) continue;
      const double* wo = w.data.data() + o * w.cols;
      for (std::size_t k = 0; k < w.cols; ++k) out[k] += g * wo[k];
    }
  }
  return dx;
}

MatD layer_norm_backward(const detail::LayerNormCache<double>& c, const MatD& dy, const MatD& gain, MatD& dgain,
                         MatD& dbias) {
  const std::size_t n = dy.cols;
  MatD dx(dy.rows, n);
  for (std::size_t i = 0; i < dy.rows; ++i) {
    double mean_g = 0.0, mean_gx = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double g = dy(i, j) * gain.data[j];
      dgain.data[j] += dy(i, j) * c.xhat(i, j);
      dbias.data[j] += dy(i, j);
      mean_g += g;
      mean_gx += g * c.xhat(i, j);
    }
    mean_g /= static_cast<double>(n);
    mean_gx /= static_cast<double>(n);
    for (std::size_t j = 0; j < n; ++j)
      dx(i, j) = c.rstd[i] * (dy(i, j) * gain.data[j] - mean_g - c.xhat(i, j) * mean_gx);
  }
  return dx;
}

void add_inplace(MatD& a, const MatD& b) {
  for (std::size_t i = 0; i < a.data.size(); ++i) a.data[i] += b.data[i];
}

}  // namespace

Gradients backward(const ModelD& model, std::span<const Token> inputs, const LossSpec& loss) {
  const auto cache = detail::forward_with_cache(model, inputs);
  const auto lg = loss_and_logit_grad(cache.logits, loss);
  const auto& w = model.weights;
  const ModelConfig& cfg = model.config;
  const std::size_t seq = inputs.size();
  const auto dh = static_cast<std::size_t>(cfg.d_head());
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  Gradients g{lg.loss, Weights<double>::zeros(cfg)};
  auto& gw = g.grad;

  // Tied output head.
  accum_weight_grad(gw.tok_emb, lg.grad, cache.lnf.out);
  MatD dx = layer_norm_backward(cache.lnf, input_grad(lg.grad, w.tok_emb), w.lnf_gain, gw.lnf_gain, gw.lnf_bias);

  for (std::size_t li = w.layers.size(); li-- > 0;) {
    const auto& lw = w.layers[li];
    const auto& lc = cache.layers[li];
    auto& gl = gw.layers[li];

    // Feed-forward residual branch.
    accum_weight_grad(gl.ff_out, dx, lc.ff_act);
    MatD dpre = input_grad(dx, lw.ff_out);
    for (std::size_t i = 0; i < dpre.data.size(); ++i) dpre.data[i] *= detail::gelu_grad(lc.ff_pre.data[i]);
    accum_weight_grad(gl.ff_in, dpre, lc.ln2.out);
    add_inplace(dx, layer_norm_backward(lc.ln2, input_grad(dpre, lw.ff_in), lw.ln2_gain, gl.ln2_gain, gl.ln2_bias));

    // Attention residual branch.
    accum_weight_grad(gl.wo, dx, lc.attn_concat);
    const MatD dconcat = input_grad(dx, lw.wo);
    MatD dq(seq, dh * static_cast<std::size_t>(cfg.n_heads));
    MatD dk(dq.rows, dq.cols), dv(dq.rows, dq.cols);
    for (int h = 0; h < cfg.n_heads; ++h) {
      if (model.head_mask.is_pruned(static_cast<int>(li), h)) continue;
      const std::size_t off = static_cast<std::size_t>(h) * dh;
      const auto& p = lc.probs[static_cast<std::size_t>(h)];
      std::vector<double> dp(seq);
      for (std::size_t qi = 0; qi < seq; ++qi) {
        double dot = 0.0;
        for (std::size_t kj = 0; kj <= qi; ++kj) {
          double s = 0.0;
          for (std::size_t c = 0; c < dh; ++c) {
            s += dconcat(qi, off + c) * lc.v(kj, off + c);
            dv(kj, off + c) += p(qi, kj) * dconcat(qi, off + c);
          }
          dp[kj] = s;
          dot += p(qi, kj) * s;
        }
        for (std::size_t kj = 0; kj <= qi; ++kj) {
          const double ds = p(qi, kj) * (dp[kj] - dot) * scale;
          for (std::size_t c = 0; c < dh; ++c) {
            dq(qi, off + c) += ds * lc.k(kj, off + c);
            dk(kj, off + c) += ds * lc.q(qi, off + c);
          }
        }
      }
    }
    accum_weight_grad(gl.wq, dq, lc.ln1.out);
    accum_weight_grad(gl.wk, dk, lc.ln1.out);
    accum_weight_grad(gl.wv, dv, lc.ln1.out);
    MatD dln1 = input_grad(dq, lw.wq);
    add_inplace(dln1, input_grad(dk, lw.wk));
    add_inplace(dln1, input_grad(dv, lw.wv));
    add_inplace(dx, layer_norm_backward(lc.ln1, dln1, lw.ln1_gain, gl.ln1_gain, gl.ln1_bias));
  }

  for (std::size_t i = 0; i < seq; ++i) {
    const auto t = static_cast<std::size_t>(inputs[i]);
    for (std::size_t j = 0; j < dx.cols; ++j) {
      gw.tok_emb(t, j) += dx(i, j);
      gw.pos_emb(i, j) += dx(i, j);
    }
  }
  return g;
}

double evaluate_loss(const ModelD& model, std::span<const Token> inputs, const LossSpec& loss) {
  const auto result = forward(model, inputs, ForwardOptions{false});
  return loss_and_logit_grad(result.logits, loss).loss;
}

namespace {

double rel_error(double a, double n) { return std::abs(a - n) / std::max({1.0, std::abs(a), std::abs(n)}); }

std::string param_class(const std::string& name) {
  if (name == "tok_emb" || name == "pos_emb") return "embedding";
  if (name.find(".gain") != std::string::npos || name.find(".bias") != std::string::npos) return "layernorm";
  if (name.find("attn.") != std::string::npos) return "attention";
  return "ffn";
}

std::vector<std::size_t> sample_indices(std::size_t total, int sample_size, std::uint64_t seed) {
  std::vector<std::size_t> idx(total);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  if (sample_size <= 0 || static_cast<std::size_t>(sample_size) >= total) return idx;
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(static_cast<std::size_t>(sample_size));
  std::sort(idx.begin(), idx.end());
  return idx;
}

}  // namespace

GradCheckReport grad_check(const ModelD& model, std::span<const Token> inputs, const LossSpec& loss, double epsilon,
                           int sample_size, std::uint64_t seed) {
  if (!(epsilon > 0.0)) throw DomainError("grad_check epsilon must be positive");
  const auto analytic = backward(model, inputs, loss);

  struct Slot {
    std::string cls;
    std::size_t tensor;
    std::size_t index;
  };
  std::vector<Slot> slots;
  std::size_t tensor_id = 0;
  model.weights.for_each([&](const std::string& name, const Matrix<double>& t) {
    for (std::size_t i = 0; i < t.size(); ++i) slots.push_back({param_class(name), tensor_id, i});
    ++tensor_id;
  });

  std::vector<const Matrix<double>*> grads;
  analytic.grad.for_each([&](const std::string&, const Matrix<double>& t) { grads.push_back(&t); });

  // Sample per class so every class is represented.
  std::map<std::string, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < slots.size(); ++i) by_class[slots[i].cls].push_back(i);
  const int per_class = sample_size <= 0 ? 0 : std::max(1, sample_size / static_cast<int>(by_class.size()));

  GradCheckReport report;
  report.epsilon = epsilon;
  ModelD probe = model;
  std::vector<Matrix<double>*> params;
  probe.weights.for_each([&](const std::string&, Matrix<double>& t) { params.push_back(&t); });

  std::uint64_t class_seed = seed;
  for (const auto& [cls, members] : by_class) {
    double worst = 0.0;
    for (std::size_t k : sample_indices(members.size(), per_class, class_seed++)) {
      const Slot& s = slots[members[k]];
      double& p = params[s.tensor]->data[s.index];
      const double saved = p;
      p = saved + epsilon;
      const double up = evaluate_loss(probe, inputs, loss);
      p = saved - epsilon;
      const double down = evaluate_loss(probe, inputs, loss);
      p = saved;
      const double numeric = (up - down) / (2.0 * epsilon);
      worst = std::max(worst, rel_error(grads[s.tensor]->data[s.index], numeric));
      ++report.checked;
    }
    report.per_class[cls] = worst;
    report.max_rel_error = std::max(report.max_rel_error, worst);
  }
  return report;
}

GradCheckReport grad_check(const std::function<double(std::span<const double>)>& f,
                           const std::function<std::vector<double>(std::span<const double>)>& grad,
                           std::span<const double> params, double epsilon, int sample_size, std::uint64_t seed) {
  if (!(epsilon > 0.0)) throw DomainError("grad_check epsilon must be positive");
  const auto analytic = grad(params);
  if (analytic.size() != params.size()) throw DomainError("gradient size does not match parameter count");
  std::vector<double> probe(params.begin(), params.end());
  GradCheckReport report;
  report.epsilon = epsilon;
  for (std::size_t i : sample_indices(params.size(), sample_size, seed)) {
    const double saved = probe[i];
    probe[i] = saved + epsilon;
    const double up = f(probe);
    probe[i] = saved - epsilon;
    const double down = f(probe);
    probe[i] = saved;
    report.max_rel_error = std::max(report.max_rel_error, rel_error(analytic[i], (up - down) / (2.0 * epsilon)));
    ++report.checked;
  }
  report.per_class["all"] = report.max_rel_error;
  return report;
}

namespace {

class Adam {
 public:
  Adam(const ModelConfig& cfg, AdamOptions options)
      : options_(options), m_(Weights<double>::zeros(cfg)), v_(Weights<double>::zeros(cfg)) {}

  void step(Weights<double>& params, const Weights<double>& grads) {
    ++t_;
    const double c1 = 1.0 - std::pow(options_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(options_.beta2, static_cast<double>(t_));
    std::vector<Matrix<double>*> ps, ms, vs;
    std::vector<const Matrix<double>*> gs;
    params.for_each([&](const std::string&, Matrix<double>& t) { ps.push_back(&t); });
    m_.for_each([&](const std::string&, Matrix<double>& t) { ms.push_back(&t); });
    v_.for_each([&](const std::string&, Matrix<double>& t) { vs.push_back(&t); });
    grads.for_each([&](const std::string&, const Matrix<double>& t) { gs.push_back(&t); });
    for (std::size_t k = 0; k < ps.size(); ++k) {
      auto& p = ps[k]->data;
      auto& m = ms[k]->data;
      auto& v = vs[k]->data;
      const auto& g = gs[k]->data;
      for (std::size_t i = 0; i < p.size(); ++i) {
        m[i] = options_.beta1 * m[i] + (1.0 - options_.beta1) * g[i];
        v[i] = options_.beta2 * v[i] + (1.0 - options_.beta2) * g[i] * g[i];
        p[i] -= options_.learning_rate * (m[i] / c1) / (std::sqrt(v[i] / c2) + options_.eps);
      }
    }
  }

 private:
  AdamOptions options_;
  Weights<double> m_, v_;
  long t_ = 0;
};

// Uniform offset in [0, n) from the raw generator output so the sequence does
// not depend on the standard library's distribution implementation.
std::size_t draw_offset(std::mt19937_64& rng, std::size_t n) { return n <= 1 ? 0 : static_cast<std::size_t>(rng() % n); }

using LossBuilder = std::function<LossSpec(std::span<const Token> inputs, std::span<const Token> targets)>;

TrainResult run_training(ModelD model, std::span<const Token> corpus, int window, int steps, double lr,
                         std::uint64_t seed, const LossBuilder& build_loss) {
  if (corpus.size() < 2) throw DomainError("training corpus needs at least 2 tokens");
  const auto len = std::min(static_cast<std::size_t>(window), corpus.size() - 1);
  Adam adam(model.config, AdamOptions{lr});
  std::mt19937_64 rng(seed ^ 0x9E3779B97F4A7C15ull);
  TrainResult result;
  result.losses.reserve(static_cast<std::size_t>(steps));
  for (int s = 0; s < steps; ++s) {
    const std::size_t off = draw_offset(rng, corpus.size() - len);
    const auto inputs = corpus.subspan(off, len);
    const auto targets = corpus.subspan(off + 1, len);
    auto g = backward(model, inputs, build_loss(inputs, targets));
    adam.step(model.weights, g.grad);
    result.losses.push_back(g.loss);
  }
  result.model = model_cast<float>(model);
  return result;
}

}  // namespace

TrainResult train_student(const ModelF& teacher, const ModelConfig& student_config, std::span<const Token> corpus,
                          const DistillConfig& config) {
  config.validate();
  student_config.validate();
  if (student_config.vocab_size != teacher.config.vocab_size)
    throw DomainError("student vocab_size " + std::to_string(student_config.vocab_size) +
                      " does not match teacher vocab_size " + std::to_string(teacher.config.vocab_size));
  ModelD student = init_model<double>(student_config, config.seed);
  const int window = std::min(student_config.context_len, teacher.config.context_len);

  if (config.method == DistillMethod::SeqKD) {
    const auto plen = static_cast<std::size_t>(std::min(config.seqkd_prompt_len, window));
    if (corpus.size() < plen) throw DomainError("corpus shorter than the SeqKD prompt length");
    std::mt19937_64 rng(config.seed);
    std::vector<std::vector<Token>> prompts;
    for (int i = 0; i < config.seqkd_prompts; ++i) {
      const std::size_t off = draw_offset(rng, corpus.size() - plen + 1);
      prompts.emplace_back(corpus.begin() + static_cast<std::ptrdiff_t>(off),
                           corpus.begin() + static_cast<std::ptrdiff_t>(off + plen));
    }
    const auto generated = seqkd_corpus(teacher, prompts, window - static_cast<int>(plen));
    return run_training(std::move(student), generated, window, config.steps, config.learning_rate, config.seed,
                        [](std::span<const Token>, std::span<const Token> targets) -> LossSpec {
                          return CrossEntropyLoss{{targets.begin(), targets.end()}};
                        });
  }

  const bool reverse = config.method == DistillMethod::ReverseKLD;
  return run_training(std::move(student), corpus, window, config.steps, config.learning_rate, config.seed,
                      [&](std::span<const Token> inputs, std::span<const Token> targets) -> LossSpec {
                        const auto t = forward(teacher, inputs, ForwardOptions{false});
                        KldLoss loss;
                        loss.teacher_logits = Matrix<double>(t.logits.rows, t.logits.cols);
                        for (std::size_t i = 0; i < t.logits.data.size(); ++i)
                          loss.teacher_logits.data[i] = static_cast<double>(t.logits.data[i]);
                        loss.temperature = config.temperature;
                        loss.reverse = reverse;
                        loss.ce_mix_lambda = config.ce_mix_lambda;
                        loss.targets.assign(targets.begin(), targets.end());
                        return loss;
                      });
}

TrainResult train_language_model(const ModelConfig& config, std::span<const Token> corpus, int steps,
                                 double learning_rate, std::uint64_t seed) {
  if (steps < 0) throw DomainError("steps must be non-negative");
  return run_training(init_model<double>(config, seed), corpus, config.context_len, steps, learning_rate, seed,
                      [](std::span<const Token>, std::span<const Token> targets) -> LossSpec {
                        return CrossEntropyLoss{{targets.begin(), targets.end()}};
                      });
}

std::pair<double, double> smoothed_endpoints(std::span<const double> losses, std::size_t window) {
  if (losses.empty() || window == 0) throw DomainError("smoothed_endpoints needs losses and a window");
  window = std::min(window, losses.size());
  const double first = std::accumulate(losses.begin(), losses.begin() + static_cast<std::ptrdiff_t>(window), 0.0);
  const double last = std::accumulate(losses.end() - static_cast<std::ptrdiff_t>(window), losses.end(), 0.0);
  return {first / static_cast<double>(window), last / static_cast<double>(window)};
}

std::string loss_log_csv(std::span<const double> losses) {
  std::ostringstream out;
  out.precision(17);
  out << "step,loss\n";
  for (std::size_t i = 0; i < losses.size(); ++i) out << i << ',' << losses[i] << '\n';
  return out.str();
}

template double forward_kld_loss<float>(const Matrix<float>&, const Matrix<float>&, double);
template double forward_kld_loss<double>(const Matrix<double>&, const Matrix<double>&, double);
template double reverse_kld_loss<float>(const Matrix<float>&, const Matrix<float>&, double);
template double reverse_kld_loss<double>(const Matrix<double>&, const Matrix<double>&, double);

}  // namespace clab
