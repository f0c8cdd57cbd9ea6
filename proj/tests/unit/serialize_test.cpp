#include <gtest/gtest.h>

#include <cstring>
#include <fstream>

#include "clab/compress.hpp"
#include "clab/errors.hpp"
#include "clab/tinyformer.hpp"
#include "toy.hpp"

namespace clab {
namespace {

ModelF sample_model() {
  ModelConfig c;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_model = 8;
  c.d_ff = 16;
  c.vocab_size = 20;
  c.context_len = 6;
  return init_model<float>(c, 17, 0.7);
}

bool bit_identical(const ModelF& a, const ModelF& b) {
  std::vector<const Matrix<float>*> xs;
  a.weights.for_each([&](const std::string&, const Matrix<float>& t) { xs.push_back(&t); });
  std::size_t i = 0;
  bool same = a.config == b.config && a.head_mask == b.head_mask && a.quantized_bits == b.quantized_bits;
  b.weights.for_each([&](const std::string&, const Matrix<float>& t) {
    const auto& x = *xs[i++];
    same = same && x.rows == t.rows && x.cols == t.cols &&
           std::memcmp(x.data.data(), t.data.data(), 4 * t.size()) == 0;
  });
  return same;
}

std::size_t header_end(const std::string& bytes) { return bytes.find('\n'); }

TEST(WeightsFile, RoundTripIsBitExact) {
  testing::TempDir dir;
  auto m = sample_model();
  m.weights.layers[1].wq.data[3] = -0.0f;
  m.weights.tok_emb.data[0] = 1e-42f;  // subnormal
  m.head_mask.set(1, 0, true);
  const auto path = (dir.path() / "m.bin").string();
  save_model(m, path);
  EXPECT_TRUE(bit_identical(load_model(path), m));

  const auto q = quantize_model(sample_model(), 4).materialize();
  EXPECT_TRUE(bit_identical(decode_model(encode_model(q)), q));
}

TEST(WeightsFile, HeaderIsJsonLine) {
  const auto bytes = encode_model(sample_model());
  const auto header = bytes.substr(0, header_end(bytes));
  EXPECT_NE(header.find("\"vocab_size\":20"), std::string::npos);
  EXPECT_NE(header.find("\"layers.1.ff.out\""), std::string::npos);
}

TEST(WeightsFile, EmptyFileIsFormatError) {
  try {
    decode_model("");
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), 0u);
  }
}

TEST(WeightsFile, EditedVocabIsFormatError) {
  auto bytes = encode_model(sample_model());
  const auto pos = bytes.find("\"vocab_size\":20");
  bytes.replace(pos, 15, "\"vocab_size\":21");
  EXPECT_THROW(decode_model(bytes), FormatError);
}

TEST(WeightsFile, TruncatedPayloadReportsOffset) {
  const auto bytes = encode_model(sample_model());
  try {
    decode_model(std::string_view(bytes).substr(0, bytes.size() - 5));
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), bytes.size() - 5);
  }
  EXPECT_THROW(decode_model(bytes + "xx"), FormatError);
}

TEST(WeightsFile, MalformedHeaders) {
  const auto bytes = encode_model(sample_model());
  const auto nl = header_end(bytes);
  EXPECT_THROW(decode_model(bytes.substr(0, nl)), FormatError);  // no newline
  EXPECT_THROW(decode_model("{not json\n"), FormatError);
  auto wrong_type = bytes;
  wrong_type.replace(wrong_type.find("\"vocab_size\":20"), 15, "\"vocab_size\":\"x\"");
  EXPECT_THROW(decode_model(wrong_type), FormatError);
  auto shape = bytes;
  const auto s = shape.find("[20,8]");
  ASSERT_NE(s, std::string::npos);
  shape.replace(s, 6, "[8,20]");
  EXPECT_THROW(decode_model(shape), FormatError);
}

TEST(WeightsFile, MissingFileIsIoError) {
  EXPECT_THROW(load_model("/nonexistent/clab/model.bin"), IoError);
}

}  // namespace
}  // namespace clab
