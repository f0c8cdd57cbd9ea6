// Weights file: one line of JSON describing config, head mask and tensors,
// a '\n', then each tensor's float32 values little-endian, in header order.
// Tensor "offset" values are relative to the first payload byte.

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

#include <json.hpp>

#include "clab/errors.hpp"
#include "clab/tinyformer.hpp"

namespace clab {

namespace {

using json = nlohmann::json;

constexpr const char* kFormatName = "clab-weights";
constexpr int kFormatVersion = 1;

json config_to_json(const ModelConfig& c) {
  return json{{"n_layers", c.n_layers},     {"n_heads", c.n_heads},       {"d_model", c.d_model},
              {"d_ff", c.d_ff},             {"vocab_size", c.vocab_size}, {"context_len", c.context_len}};
}

void put_f32(std::string& out, float v) {
  const auto bits = std::bit_cast<std::uint32_t>(v);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFFu));
}

float get_f32(const unsigned char* p) {
  std::uint32_t bits = 0;
  for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  return std::bit_cast<float>(bits);
}

int get_int(const json& obj, const char* key, std::size_t offset) {
  if (!obj.contains(key) || !obj.at(key).is_number_integer())
    throw FormatError(std::string("header field '") + key + "' missing or not an integer", offset);
  return obj.at(key).get<int>();
}

}  // namespace

std::string encode_model(const ModelF& model) {
  validate_model(model);
  json header;
  header["format"] = kFormatName;
  header["version"] = kFormatVersion;
  header["config"] = config_to_json(model.config);
  header["quantized_bits"] = model.quantized_bits ? json(*model.quantized_bits) : json(nullptr);
  json mask = json::array();
  for (int l = 0; l < model.config.n_layers; ++l) {
    json row = json::array();
    for (int h = 0; h < model.config.n_heads; ++h) row.push_back(model.head_mask.is_pruned(l, h) ? 1 : 0);
    mask.push_back(row);
  }
  header["head_mask"] = mask;
  json tensors = json::array();
  std::size_t offset = 0;
  model.weights.for_each([&](const std::string& name, const Matrix<float>& t) {
    tensors.push_back(json{{"name", name}, {"shape", {t.rows, t.cols}}, {"offset", offset}});
    offset += t.size() * 4;
  });
  header["tensors"] = tensors;

  std::string out = header.dump();
  out.push_back('\n');
  out.reserve(out.size() + offset);
  model.weights.for_each([&](const std::string&, const Matrix<float>& t) {
    for (float v : t.data) put_f32(out, v);
  });
  return out;
}

namespace {

ModelF decode_impl(std::string_view bytes) {
  if (bytes.empty()) throw FormatError("empty weights file", 0);
  const std::size_t newline = bytes.find('\n');
  if (newline == std::string_view::npos) throw FormatError("header line is not terminated", bytes.size());

  json header;
  try {
    header = json::parse(bytes.substr(0, newline));
  } catch (const json::parse_error& e) {
    throw FormatError(std::string("header is not valid JSON: ") + e.what(), e.byte > 0 ? e.byte - 1 : 0);
  }
  if (!header.is_object() || header.value("format", "") != kFormatName)
    throw FormatError("not a clab weights file", 0);
  if (header.value("version", 0) != kFormatVersion) throw FormatError("unsupported format version", 0);
  if (!header.contains("config") || !header["config"].is_object()) throw FormatError("header lacks config", 0);

  const json& jc = header["config"];
  ModelConfig cfg;
  cfg.n_layers = get_int(jc, "n_layers", 0);
  cfg.n_heads = get_int(jc, "n_heads", 0);
  cfg.d_model = get_int(jc, "d_model", 0);
  cfg.d_ff = get_int(jc, "d_ff", 0);
  cfg.vocab_size = get_int(jc, "vocab_size", 0);
  cfg.context_len = get_int(jc, "context_len", 0);
  try {
    cfg.validate();
  } catch (const DomainError& e) {
    throw FormatError(std::string("invalid config: ") + e.what(), 0);
  }

  ModelF model = zero_model<float>(cfg);
  if (header.contains("quantized_bits") && !header["quantized_bits"].is_null()) {
    const int bits = header["quantized_bits"].get<int>();
    if (bits != 4 && bits != 8) throw FormatError("quantized_bits must be 4 or 8", 0);
    model.quantized_bits = bits;
  }
  if (header.contains("head_mask")) {
    const json& mask = header["head_mask"];
    if (!mask.is_array() || mask.size() != static_cast<std::size_t>(cfg.n_layers))
      throw FormatError("head_mask does not match n_layers", 0);
    for (int l = 0; l < cfg.n_layers; ++l) {
      const json& row = mask[static_cast<std::size_t>(l)];
      if (!row.is_array() || row.size() != static_cast<std::size_t>(cfg.n_heads))
        throw FormatError("head_mask row does not match n_heads", 0);
      for (int h = 0; h < cfg.n_heads; ++h) model.head_mask.set(l, h, row[static_cast<std::size_t>(h)].get<int>() != 0);
    }
  }

  const json& tensors = header.value("tensors", json::array());
  std::vector<Matrix<float>*> slots;
  std::vector<std::string> names;
  model.weights.for_each([&](const std::string& name, Matrix<float>& t) {
    slots.push_back(&t);
    names.push_back(name);
  });
  if (!tensors.is_array() || tensors.size() != slots.size())
    throw FormatError("expected " + std::to_string(slots.size()) + " tensors in header", 0);

  const std::size_t payload_start = newline + 1;
  const auto* payload = reinterpret_cast<const unsigned char*>(bytes.data() + payload_start);
  const std::size_t payload_size = bytes.size() - payload_start;
  std::size_t expected_offset = 0;
  for (std::size_t i = 0; i < slots.size(); ++i) {
    const json& jt = tensors[i];
    Matrix<float>& t = *slots[i];
    if (jt.value("name", "") != names[i])
      throw FormatError("tensor " + std::to_string(i) + " should be '" + names[i] + "'", 0);
    const json& shape = jt.value("shape", json::array());
    if (!shape.is_array() || shape.size() != 2 || shape[0].get<std::size_t>() != t.rows ||
        shape[1].get<std::size_t>() != t.cols)
      throw FormatError("tensor '" + names[i] + "' shape disagrees with config", 0);
    if (jt.value("offset", std::size_t{0}) != expected_offset)
      throw FormatError("tensor '" + names[i] + "' offset is inconsistent", 0);
    const std::size_t nbytes = t.size() * 4;
    if (expected_offset + nbytes > payload_size)
      throw FormatError("truncated payload in tensor '" + names[i] + "'", payload_start + payload_size);
    for (std::size_t k = 0; k < t.size(); ++k) t.data[k] = get_f32(payload + expected_offset + 4 * k);
    expected_offset += nbytes;
  }
  if (expected_offset != payload_size)
    throw FormatError("trailing bytes after payload", payload_start + expected_offset);
  return model;
}

}  // namespace

ModelF decode_model(std::string_view bytes) {
  try {
    return decode_impl(bytes);
  } catch (const json::exception& e) {
    // Wrong JSON types inside an otherwise parseable header.
    throw FormatError(std::string("malformed header: ") + e.what(), 0);
  }
}

void save_model(const ModelF& model, const std::string& path) {
  const std::string bytes = encode_model(model);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write to '" + path + "' failed");
}

ModelF load_model(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_model(bytes);
}

}  // namespace clab
