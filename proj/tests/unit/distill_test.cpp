#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "clab/distill.hpp"
#include "clab/errors.hpp"
#include "oracle.hpp"
#include "toy.hpp"

namespace clab {
namespace {

Matrix<double> log_rows(const std::vector<std::vector<double>>& probs) {
  Matrix<double> m(probs.size(), probs[0].size());
  for (std::size_t r = 0; r < probs.size(); ++r)
    for (std::size_t c = 0; c < probs[r].size(); ++c) m(r, c) = std::log(probs[r][c]);
  return m;
}

ModelConfig tiny_config() {
  ModelConfig c;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_model = 8;
  c.d_ff = 16;
  c.vocab_size = 12;
  c.context_len = 8;
  return c;
}

std::vector<Token> seq(std::size_t n, int vocab, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<Token> t(n);
  for (auto& x : t) x = static_cast<Token>(rng() % static_cast<std::uint64_t>(vocab));
  return t;
}

ModelConfig student_config() {
  auto c = testing::toy_config();
  c.n_layers = 1;
  return c;
}

TEST(KldLoss, HandValues) {
  const auto t = log_rows({{0.9, 0.1}});
  const auto s = log_rows({{0.5, 0.5}});
  // 0.9 ln(0.9/0.5) + 0.1 ln(0.1/0.5) and 0.5 ln(0.5/0.9) + 0.5 ln(0.5/0.1).
  EXPECT_NEAR(forward_kld_loss(t, s, 1.0), 0.368064, 1e-6);
  EXPECT_NEAR(reverse_kld_loss(t, s, 1.0), 0.510826, 1e-6);
  EXPECT_NEAR(forward_kld_loss(t, s, 1.0), testing::kl({0.9, 0.1}, {0.5, 0.5}), 1e-12);
  EXPECT_NEAR(reverse_kld_loss(t, s, 1.0), testing::kl({0.5, 0.5}, {0.9, 0.1}), 1e-12);
  EXPECT_EQ(forward_kld_loss(t, t, 1.0), 0.0);
  EXPECT_EQ(reverse_kld_loss(s, s, 3.0), 0.0);
}

TEST(KldLoss, TemperatureScaling) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n(0, 2);
  Matrix<double> t(3, 5), s(3, 5);
  for (auto& v : t.data) v = n(rng);
  for (auto& v : s.data) v = n(rng);
  for (double temp : {0.5, 2.0, 4.0}) {
    double fwd = 0.0, rev = 0.0;
    for (std::size_t r = 0; r < 3; ++r) {
      const std::vector<double> tr(t.row(r).begin(), t.row(r).end()), sr(s.row(r).begin(), s.row(r).end());
      const auto p = testing::softmax(tr, temp), q = testing::softmax(sr, temp);
      fwd += temp * temp * testing::kl(p, q) / 3;
      rev += temp * temp * testing::kl(q, p) / 3;
    }
    EXPECT_NEAR(forward_kld_loss(t, s, temp), fwd, 1e-12);
    EXPECT_NEAR(reverse_kld_loss(t, s, temp), rev, 1e-12);
  }
}

TEST(KldLoss, ModeSeekingFixture) {
  const auto teacher = log_rows({{0.49, 0.02, 0.49}});
  const auto student = log_rows({{0.98, 0.01, 0.01}});
  const double fwd = forward_kld_loss(teacher, student, 1.0);
  const double rev = reverse_kld_loss(teacher, student, 1.0);
  EXPECT_NEAR(fwd, testing::kl({0.49, 0.02, 0.49}, {0.98, 0.01, 0.01}), 1e-12);
  EXPECT_LT(rev, fwd);
}

TEST(KldLoss, ShiftInvariantAndNonNegative) {
  std::mt19937_64 rng(8);
  std::normal_distribution<double> n(0, 3);
  for (int trial = 0; trial < 100; ++trial) {
    Matrix<double> t(2, 6), s(2, 6);
    for (auto& v : t.data) v = n(rng);
    for (auto& v : s.data) v = n(rng);
    auto t2 = t, s2 = s;
    for (std::size_t r = 0; r < 2; ++r) {
      const double a = n(rng) * 5, b = n(rng) * 5;
      for (auto& v : t2.row(r)) v += a;
      for (auto& v : s2.row(r)) v += b;
    }
    EXPECT_GE(forward_kld_loss(t, s, 1.5), 0.0);
    EXPECT_GE(reverse_kld_loss(t, s, 1.5), 0.0);
    EXPECT_NEAR(forward_kld_loss(t, s, 1.5), forward_kld_loss(t2, s2, 1.5), 1e-9);
    EXPECT_NEAR(reverse_kld_loss(t, s, 1.5), reverse_kld_loss(t2, s2, 1.5), 1e-9);
  }
}

TEST(KldLoss, Errors) {
  EXPECT_THROW(forward_kld_loss(Matrix<double>(2, 3), Matrix<double>(2, 4), 1.0), DomainError);
  EXPECT_THROW(reverse_kld_loss(Matrix<double>(2, 3), Matrix<double>(2, 3), 0.0), DomainError);
}

TEST(LogitGrad, CrossEntropyClosedForm) {
  Matrix<double> logits(2, 3);
  logits.data = {1, 2, 3, -1, 0.5, 0};
  const std::vector<Token> targets{2, 0};
  const auto g = loss_and_logit_grad(logits, CrossEntropyLoss{targets});
  EXPECT_NEAR(g.loss, (testing::naive_nll({1, 2, 3}, 2) + testing::naive_nll({-1, 0.5, 0}, 0)) / 2, 1e-12);
  for (std::size_t r = 0; r < 2; ++r) {
    const auto p = testing::softmax({logits(r, 0), logits(r, 1), logits(r, 2)});
    for (std::size_t c = 0; c < 3; ++c)
      EXPECT_NEAR(g.grad(r, c), (p[c] - (static_cast<Token>(c) == targets[r] ? 1.0 : 0.0)) / 2, 1e-12);
  }
}

// Linear model logits = x W^T with cross-entropy: analytic gradient from the
// softmax-minus-onehot identity, checked by central differences.
TEST(GradCheck, LinearModel) {
  const std::size_t in = 5, out = 4;
  std::mt19937_64 rng(2);
  std::normal_distribution<double> n(0, 1);
  std::vector<double> x(in), w(in * out);
  for (auto& v : x) v = n(rng);
  for (auto& v : w) v = n(rng);
  const int target = 1;
  auto logits = [&](std::span<const double> p) {
    std::vector<double> z(out, 0.0);
    for (std::size_t o = 0; o < out; ++o)
      for (std::size_t i = 0; i < in; ++i) z[o] += p[o * in + i] * x[i];
    return z;
  };
  auto f = [&](std::span<const double> p) { return testing::naive_nll(logits(p), target); };
  auto grad = [&](std::span<const double> p) {
    const auto s = testing::softmax(logits(p));
    std::vector<double> g(p.size());
    for (std::size_t o = 0; o < out; ++o)
      for (std::size_t i = 0; i < in; ++i)
        g[o * in + i] = (s[o] - (static_cast<int>(o) == target ? 1.0 : 0.0)) * x[i];
    return g;
  };
  const auto r = grad_check(f, grad, w, 1e-5, 0);
  EXPECT_EQ(r.checked, w.size());
  EXPECT_LT(r.max_rel_error, 1e-8);
  EXPECT_THROW(grad_check(f, grad, w, 0.0, 0), DomainError);
}

TEST(GradCheck, FullModelEveryParameterClass) {
  const auto cfg = tiny_config();
  const auto model = init_model<double>(cfg, 5, 0.5);
  const auto toks = seq(8, cfg.vocab_size, 6);
  const auto targets = seq(8, cfg.vocab_size, 7);
  const auto teacher = forward(init_model<double>(cfg, 9, 0.5), toks).logits;

  const std::vector<LossSpec> losses{
      CrossEntropyLoss{targets},
      KldLoss{teacher, 2.0, false, 0.0, {}},
      KldLoss{teacher, 1.5, true, 0.0, {}},
      KldLoss{teacher, 2.0, false, 0.3, targets},
  };
  for (const auto& loss : losses) {
    const auto r = grad_check(model, toks, loss, 1e-4, 400, 1);
    EXPECT_LT(r.max_rel_error, 1e-4);
    for (const char* cls : {"embedding", "attention", "ffn", "layernorm"}) {
      ASSERT_TRUE(r.per_class.count(cls)) << cls;
      EXPECT_LT(r.per_class.at(cls), 1e-4) << cls;
    }
  }
  EXPECT_THROW(grad_check(model, toks, losses[0], 0.0, 10), DomainError);
}

TEST(GradCheck, PrunedHeadsGetNoAttentionGradientThroughValues) {
  auto model = init_model<double>(tiny_config(), 5, 0.5);
  model.head_mask.set(0, 1, true);
  const auto toks = seq(8, 12, 6);
  const auto r = grad_check(model, toks, CrossEntropyLoss{seq(8, 12, 3)}, 1e-4, 200, 2);
  EXPECT_LT(r.max_rel_error, 1e-4);
}

TEST(Backward, ZeroAtMatchingTeacher) {
  const auto model = init_model<double>(tiny_config(), 3, 0.5);
  const auto toks = seq(8, 12, 1);
  const auto own = forward(model, toks).logits;
  for (bool reverse : {false, true}) {
    const auto g = backward(model, toks, KldLoss{own, 2.0, reverse, 0.0, {}});
    EXPECT_LE(std::abs(g.loss), 1e-12);
    double worst = 0.0;
    g.grad.for_each([&](const std::string&, const Matrix<double>& t) {
      for (double v : t.data) worst = std::max(worst, std::abs(v));
    });
    EXPECT_LE(worst, 1e-8);
  }
}

TEST(Train, ZeroStepsReturnsInitialization) {
  const auto corpus = seq(100, 256, 4);
  DistillConfig dc;
  dc.steps = 0;
  dc.seed = 13;
  const auto r = train_student(testing::toy_teacher(), student_config(), corpus, dc);
  EXPECT_TRUE(r.losses.empty());
  EXPECT_EQ(encode_model(r.model), encode_model(model_cast<float>(init_model<double>(student_config(), 13))));
}

TEST(Train, ForwardKldDecreasesLoss) {
  DistillConfig dc;
  dc.method = DistillMethod::ForwardKLD;
  dc.temperature = 2.0;
  dc.steps = 200;
  dc.learning_rate = 3e-3;
  dc.seed = 1;
  const auto r = train_student(testing::toy_teacher(), student_config(), testing::train_tokens(), dc);
  ASSERT_EQ(r.losses.size(), 200u);
  const auto [first, last] = smoothed_endpoints(r.losses, 20);
  EXPECT_LT(last, first);
}

TEST(Train, SeededRunsAreBitIdentical) {
  for (auto method : {DistillMethod::ForwardKLD, DistillMethod::ReverseKLD, DistillMethod::SeqKD}) {
    DistillConfig dc;
    dc.method = method;
    dc.steps = 8;
    dc.seed = 5;
    dc.ce_mix_lambda = 0.25;
    dc.seqkd_prompts = 4;
    const auto a = train_student(testing::toy_teacher(), student_config(), testing::train_tokens(), dc);
    const auto b = train_student(testing::toy_teacher(), student_config(), testing::train_tokens(), dc);
    EXPECT_EQ(a.losses, b.losses);
    EXPECT_EQ(encode_model(a.model), encode_model(b.model));
  }
}

TEST(Train, Errors) {
  auto bad = student_config();
  bad.vocab_size = 128;
  EXPECT_THROW(train_student(testing::toy_teacher(), bad, testing::train_tokens(), DistillConfig{}), DomainError);
  DistillConfig dc;
  dc.temperature = 0.0;
  EXPECT_THROW(dc.validate(), DomainError);
  dc.temperature = 1.0;
  dc.ce_mix_lambda = 1.5;
  EXPECT_THROW(dc.validate(), DomainError);
  EXPECT_EQ(parse_distill_method("minillm"), DistillMethod::ReverseKLD);
  EXPECT_EQ(parse_distill_method("seqkd"), DistillMethod::SeqKD);
  EXPECT_THROW(parse_distill_method("nope"), DomainError);
}

TEST(SeqKd, CorpusProperties) {
  auto cfg = tiny_config();
  auto constant = zero_model<float>(cfg);
  constant.weights.lnf_bias.data[0] = 1.0f;
  constant.weights.tok_emb(5, 0) = 1.0f;
  const std::vector<std::vector<Token>> prompts{{1, 2}, {3}};
  const auto c = seqkd_corpus(constant, prompts, 6);
  EXPECT_EQ(c, (std::vector<Token>{1, 2, 5, 5, 5, 5, 5, 5, 3, 5, 5, 5, 5, 5, 5}));

  const auto m = init_model<float>(cfg, 4, 0.5);
  EXPECT_EQ(seqkd_corpus(m, prompts, 6), seqkd_corpus(m, prompts, 6));
  EXPECT_EQ(seqkd_corpus(m, prompts, 6, Sample{1.0, 3}), seqkd_corpus(m, prompts, 6, Sample{1.0, 3}));
}

TEST(LossLog, Csv) {
  const std::vector<double> l{2.5, 1.25};
  EXPECT_EQ(loss_log_csv(l), "step,loss\n0,2.5\n1,1.25\n");
}

}  // namespace
}  // namespace clab
