#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "clab/compress.hpp"
#include "clab/errors.hpp"
#include "clab/suite.hpp"
#include "oracle.hpp"
#include "toy.hpp"

namespace clab {
namespace {

Matrix<double> row_matrix(std::vector<double> values) {
  Matrix<double> m(1, values.size());
  m.data = std::move(values);
  return m;
}

Matrix<double> random_matrix(std::size_t rows, std::size_t cols, std::mt19937_64& rng, double sd = 1.0) {
  std::normal_distribution<double> n(0.0, sd);
  Matrix<double> m(rows, cols);
  for (auto& v : m.data) v = n(rng);
  return m;
}

ModelConfig two_head_config() {
  ModelConfig c;
  c.n_layers = 1;
  c.n_heads = 2;
  c.d_model = 16;
  c.d_ff = 16;
  c.vocab_size = 16;
  c.context_len = 12;
  return c;
}

// Head 0 puts all of its attention on position 0; head 1 is uniform.
ModelD concentrated_head_model() {
  auto m = zero_model<double>(two_head_config());
  auto& l = m.weights.layers[0];
  for (auto& g : l.ln1_gain.data) g = 1.0;
  l.ln1_bias.data[0] = 1.0;
  m.weights.pos_emb(0, 1) = 1.0;
  l.wq(0, 0) = 1.0;
  l.wk(0, 1) = 1000.0;
  return m;
}

// --- quantization ------------------------------------------------------------

TEST(Quantize, HandExamples) {
  const auto q = quantize_tensor(row_matrix({0.1, -0.2, 0.4}), 8);
  EXPECT_DOUBLE_EQ(q.scales[0], 0.4 / 127);
  EXPECT_EQ(q.codes, (std::vector<std::int8_t>{32, -64, 127}));

  const auto q4 = quantize_tensor(row_matrix({0.7, -0.7}), 4);
  EXPECT_DOUBLE_EQ(q4.scales[0], 0.1);
  EXPECT_EQ(q4.codes, (std::vector<std::int8_t>{7, -7}));

  const auto z = quantize_tensor(Matrix<double>(2, 5, 0.0), 8);
  EXPECT_EQ(z.scales, (std::vector<double>{1.0, 1.0}));
  for (auto c : z.codes) EXPECT_EQ(c, 0);
  EXPECT_EQ(dequantize(z), Matrix<float>(2, 5, 0.0f));
}

TEST(Quantize, Errors) {
  EXPECT_THROW(quantize_tensor(row_matrix({1.0, NAN}), 8), DomainError);
  EXPECT_THROW(quantize_tensor(row_matrix({1.0, INFINITY}), 8), DomainError);
  EXPECT_THROW(quantize_tensor(row_matrix({1.0}), 3), DomainError);
  EXPECT_EQ(quant_max(8), 127);
  EXPECT_EQ(quant_max(4), 7);
}

TEST(Quantize, MultiplesOfScaleAreExact) {
  const auto q4 = quantize_tensor(row_matrix({-7.0, 3.0, 1.0, 7.0}), 4);
  EXPECT_EQ(dequantize(q4).data, (std::vector<float>{-7.0f, 3.0f, 1.0f, 7.0f}));
}

TEST(Quantize, ErrorBoundedByHalfScale) {
  std::mt19937_64 rng(42);
  std::uniform_real_distribution<double> mag(-6, 2);
  for (int bits : {8, 4}) {
    for (int trial = 0; trial < 50; ++trial) {
      const auto m = random_matrix(8, 24, rng, std::pow(10.0, mag(rng)));
      const auto q = quantize_tensor(m, bits);
      for (std::size_t r = 0; r < m.rows; ++r) {
        EXPECT_GT(q.scales[r], 0.0);
        for (std::size_t c = 0; c < m.cols; ++c) {
          EXPECT_LE(std::abs(q.codes[r * m.cols + c]), quant_max(bits));
          EXPECT_LE(std::abs(q.value(r, c) - m(r, c)), q.scales[r] / 2 * (1 + 1e-12));
        }
      }
    }
  }
}

TEST(Quantize, RequantizingReproducesCodes) {
  std::mt19937_64 rng(7);
  for (int bits : {8, 4}) {
    const auto m = random_matrix(6, 20, rng);
    const auto q = quantize_tensor(m, bits);
    const auto again = quantize_tensor(dequantize(q), bits);
    EXPECT_EQ(again.codes, q.codes);
  }
}

TEST(QuantizeModel, ZeroModelUnchanged) {
  const auto m = zero_model<float>(two_head_config());
  const std::vector<Token> toks{1, 2, 3, 4, 5};
  const auto qm = quantize_model(m, 4);
  EXPECT_EQ(qm.forward(toks).logits, forward(m, toks).logits);
  EXPECT_EQ(qm.materialize().quantized_bits, 4);
}

TEST(QuantizeModel, ForwardUsesDequantizedWeights) {
  const auto m = init_model<float>(two_head_config(), 3, 0.3);
  const std::vector<Token> toks{1, 5, 9, 2, 0, 7};
  const auto qm = quantize_model(m, 8);
  EXPECT_EQ(qm.forward(toks).logits, forward(qm.materialize(), toks).logits);
  const auto dense = qm.materialize();
  EXPECT_EQ(dense.weights.layers[0].wq, dequantize(qm.linear(0, LinearKind::Q)));
  EXPECT_EQ(dense.weights.tok_emb, m.weights.tok_emb);
}

TEST(QuantizeModel, ToyPerplexityDrift) {
  const auto& teacher = testing::toy_teacher();
  const auto eval = testing::eval_tokens();
  const double base = perplexity(teacher, eval).perplexity;
  const double q8 = perplexity(quantize_model(teacher, 8).materialize(), eval).perplexity;
  const double q4 = perplexity(quantize_model(teacher, 4).materialize(), eval).perplexity;
  EXPECT_LE(std::abs(q8 - base) / base, 0.05);
  EXPECT_TRUE(std::isfinite(q4));
  EXPECT_LE(std::abs(q4 - base) / base, 0.50);
}

// --- 2:4 ---------------------------------------------------------------------

TEST(Prune24, Examples) {
  EXPECT_EQ(prune_2_4(row_matrix({0.1, -0.5, 0.3, 0.05})).data, (std::vector<double>{0, -0.5, 0.3, 0}));
  EXPECT_EQ(prune_2_4(row_matrix({1, 1, 1, 1})).data, (std::vector<double>{1, 1, 0, 0}));
  EXPECT_EQ(prune_2_4(row_matrix({-2, 1, 2, 1})).data, (std::vector<double>{-2, 0, 2, 0}));
  EXPECT_THROW(prune_2_4(row_matrix({1, 2, 3})), ShapeError);
}

TEST(Prune24, BruteForceTopTwo) {
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<int> small(-2, 2);
  for (int trial = 0; trial < 100; ++trial) {
    auto m = random_matrix(8, 16, rng);
    if (trial % 2) for (auto& v : m.data) v = small(rng);  // many ties
    const auto p = prune_2_4(m);
    for (std::size_t r = 0; r < m.rows; ++r)
      for (std::size_t g = 0; g < m.cols; g += 4) {
        std::array<int, 4> idx{0, 1, 2, 3};
        std::stable_sort(idx.begin(), idx.end(),
                         [&](int a, int b) { return std::abs(m(r, g + a)) > std::abs(m(r, g + b)); });
        for (int k = 0; k < 4; ++k) {
          const auto c = g + static_cast<std::size_t>(idx[k]);
          EXPECT_EQ(p(r, c), k < 2 ? m(r, c) : 0.0);
        }
      }
    EXPECT_EQ(prune_2_4(p), p);
  }
}

TEST(Prune24, ModelPassTouchesOnlyProjections) {
  const auto m = init_model<float>(two_head_config(), 5, 0.2);
  const auto p = prune_model_2_4(m);
  EXPECT_EQ(p.weights.tok_emb, m.weights.tok_emb);
  for (LinearKind k : kAllLinears) {
    const auto& w = linear_weight(p.weights.layers[0], k);
    EXPECT_EQ(w, prune_2_4(linear_weight(m.weights.layers[0], k)));
    EXPECT_EQ(std::count(w.data.begin(), w.data.end(), 0.0f), static_cast<std::ptrdiff_t>(w.size() / 2));
  }
}

// --- head concentration / pruning --------------------------------------------

TEST(HeadConcentration, ConcentratedAndUniformHeads) {
  const auto m = concentrated_head_model();
  const std::vector<std::vector<Token>> calib{{1, 2, 3, 4, 5, 6, 7, 8, 9}, {3, 3, 3, 3, 3, 3}};
  const auto r = head_concentration(m, calib);
  EXPECT_NEAR(r.score(0, 0), 1.0, 1e-12);
  EXPECT_LT(r.score(0, 1), 0.5);
  EXPECT_EQ(r.n_samples, 5u + 2u);
}

TEST(HeadConcentration, UniformModelOnLengthNine) {
  const auto m = zero_model<double>(two_head_config());
  const std::vector<std::vector<Token>> calib{{1, 2, 3, 4, 5, 6, 7, 8, 9}};
  const auto r = head_concentration(m, calib);
  // Uniform rows: max = 1/(q+1) for zero-based q = 4..8.
  double want = 0.0;
  for (int q = 4; q <= 8; ++q) want += 1.0 / (q + 1);
  want /= 5;
  EXPECT_NEAR(want, 0.149127, 1e-6);
  for (double s : r.scores) EXPECT_NEAR(s, want, 1e-12);
  EXPECT_EQ(r.n_samples, 5u);
}

TEST(HeadConcentration, Errors) {
  const auto m = zero_model<double>(two_head_config());
  EXPECT_THROW(head_concentration(m, {}), DomainError);
  EXPECT_THROW(head_concentration(m, {{1, 2, 3, 4}}), DomainError);
}

TEST(HeadConcentration, Json) {
  const auto r = head_concentration(concentrated_head_model(), {{1, 2, 3, 4, 5}});
  const auto j = to_json(r);
  EXPECT_NE(j.find("\"n_samples\": 1"), std::string::npos);
  EXPECT_NE(j.find("\"head\": 1"), std::string::npos);
}

TEST(PruneHeads, Examples) {
  auto m = zero_model<double>(two_head_config());
  HeadConcentrationReport r{1, 2, {1.0, 0.3}, 4};
  const auto p = prune_heads(m, r, 0.9);
  EXPECT_TRUE(p.head_mask.is_pruned(0, 0));
  EXPECT_FALSE(p.head_mask.is_pruned(0, 1));
  EXPECT_EQ(prune_heads(p, r, 0.9).head_mask, p.head_mask);

  const auto base = init_model<double>(two_head_config(), 9, 0.3);
  HeadConcentrationReport low{1, 2, {0.2, 0.3}, 4};
  const std::vector<Token> toks{1, 2, 3, 4, 5};
  EXPECT_EQ(forward(prune_heads(base, low, 0.9), toks).logits, forward(base, toks).logits);

  EXPECT_THROW(prune_heads(m, HeadConcentrationReport{2, 2, {0, 0, 0, 0}, 1}, 0.9), DomainError);
  EXPECT_THROW(prune_heads(m, r, 0.0), DomainError);
  EXPECT_THROW(prune_heads(m, r, 1.5), DomainError);
}

TEST(PruneHeads, MaskedForwardEqualsZeroedValueRows) {
  auto cfg = two_head_config();
  cfg.n_layers = 2;
  cfg.n_heads = 4;
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const auto base = init_model<double>(cfg, seed, 0.3);
    HeadConcentrationReport r{2, 4, {0.95, 0.1, 0.2, 0.91, 0.3, 0.92, 0.1, 0.1}, 1};
    const auto pruned = prune_heads(base, r, 0.9);
    auto zeroed = base;
    const int dh = cfg.d_head();
    for (int l = 0; l < cfg.n_layers; ++l)
      for (int h = 0; h < cfg.n_heads; ++h)
        if (pruned.head_mask.is_pruned(l, h))
          for (int row = h * dh; row < (h + 1) * dh; ++row)
            for (auto& v : zeroed.weights.layers[static_cast<std::size_t>(l)].wv.row(static_cast<std::size_t>(row)))
              v = 0.0;
    const std::vector<Token> toks{3, 1, 4, 1, 5, 9, 2, 6};
    const auto got = forward(pruned, toks);
    const auto want = testing::naive_forward(zeroed, toks);
    for (std::size_t i = 0; i < toks.size(); ++i)
      for (std::size_t v = 0; v < 16; ++v) EXPECT_NEAR(got.logits(i, v), want.logits[i][v], 1e-6);
  }
}

TEST(PruneHeads, ThresholdMonotonicity) {
  auto cfg = two_head_config();
  cfg.n_heads = 4;
  cfg.n_layers = 2;
  std::mt19937_64 rng(99);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto m = init_model<double>(cfg, seed, 1.5);
    std::vector<std::vector<Token>> calib(3, std::vector<Token>(10));
    for (auto& s : calib)
      for (auto& t : s) t = static_cast<Token>(rng() % 16);
    const auto r = head_concentration(m, calib);
    const auto p9 = prune_heads(m, r, 0.9);
    const auto p8 = prune_heads(m, r, 0.8);
    for (int l = 0; l < 2; ++l)
      for (int h = 0; h < 4; ++h)
        if (p9.head_mask.is_pruned(l, h)) {
          EXPECT_TRUE(p8.head_mask.is_pruned(l, h));
        }
  }
}

// --- composition -------------------------------------------------------------

TEST(Compose, EmptyIsIdentity) {
  const auto m = init_model<float>(two_head_config(), 1);
  const auto out = compose({})(m);
  EXPECT_EQ(encode_model(out), encode_model(m));
}

TEST(Compose, OrderMatters) {
  const auto m = init_model<float>(two_head_config(), 4, 0.3);
  const auto a = compose({Prune24Pass{}, QuantizePass{8}})(m);
  const auto b = compose({QuantizePass{8}, Prune24Pass{}})(m);
  EXPECT_NE(a.weights.layers[0].wq, b.weights.layers[0].wq);
}

TEST(Compose, MatrixCombinationsInstantiate) {
  const auto cfg = SuiteConfig::load(testing::config_dir() / "matrix.json");
  ASSERT_EQ(cfg.pipelines.size(), 12u);
  auto model_cfg = two_head_config();
  model_cfg.vocab_size = 256;
  const auto base = init_model<float>(model_cfg, 1);
  PassContext ctx;
  ctx.calibration = {{1, 2, 3, 4, 5, 6, 7, 8}};
  ctx.student = [&](const std::string& name) {
    EXPECT_EQ(name, "kd");
    auto c = model_cfg;
    c.n_layers = 1;
    return init_model<float>(c, 2);
  };
  for (const auto& p : cfg.pipelines) {
    const auto out = compose(p.passes, ctx)(base);
    EXPECT_NO_THROW(validate_model(out)) << p.name;
  }
  EXPECT_THROW(compose({DistillRefPass{"kd"}})(base), DomainError);
}

}  // namespace
}  // namespace clab
