#pragma once

// Benchmark suites: a base model, a list of named compression pipelines, and
// a measurement protocol. Every pipeline is evaluated on the same held-out
// slice of the corpus, measured, and scored against the base row.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "clab/compress.hpp"
#include "clab/distill.hpp"
#include "clab/meter.hpp"
#include "clab/metrics_csv.hpp"
#include "clab/scorecore.hpp"
#include "clab/tinyformer.hpp"

namespace clab {

inline constexpr std::string_view kBasePipeline = "base";

/// Either a weights file, or a seeded model pretrained on the suite corpus.
struct ModelSource {
  std::string path;
  std::uint64_t seed = 0;
  ModelConfig config;
  int pretrain_steps = 300;
  double learning_rate = 3e-3;
};

struct StudentSpec {
  std::string name;
  ModelConfig config;
  DistillConfig distill;
};

struct PipelineSpec {
  std::string name;
  std::vector<CompressionPass> passes;
};

struct SuiteConfig {
  std::filesystem::path base_dir;  // relative paths resolve here; not part of the digest
  ModelSource model;
  std::string corpus;
  int eval_tokens = 512;  // held-out tail of the corpus
  int eval_window = 0;    // 0 = context_len
  int eval_stride = 0;    // 0 = window
  int calibration_sequences = 8;
  int calibration_length = 16;
  std::vector<StudentSpec> students;
  std::vector<PipelineSpec> pipelines;  // excluding the implicit base row
  int repetitions = 30;
  EnergySourceSpec energy_source;
  std::vector<WeightProfile> profiles{builtin_profiles().begin(), builtin_profiles().end()};
  double carbon_intensity_g_per_kwh = kDefaultCarbonIntensity;
  double quality_exponent = kQualityExponent;
  std::string output_dir;
  std::uint64_t seed = 0;

  /// Rejects unknown keys and invalid values (DomainError / ParseError).
  static SuiteConfig parse(std::string_view json, std::filesystem::path base_dir = {});
  static SuiteConfig load(const std::filesystem::path& path);

  void validate() const;
  /// Canonical JSON of every setting (sorted keys).
  std::string canonical_json() const;
  /// FNV-1a 64 of canonical_json(), as 16 hex digits.
  std::string digest() const;
  std::filesystem::path resolve(const std::string& path) const;
};

std::uint64_t fnv1a64(std::string_view bytes);

/// Deterministic work model behind the synthetic energy source.
struct CostModel {
  double seconds_per_mac = 1e-9;
  double joules_per_mac_fp32 = 4e-9;
  double seconds_per_dequant = 2e-9;  // per quantized weight, per forward call
  double joules_per_dequant = 1e-9;
};

struct WorkEstimate {
  double macs = 0.0;
  double dequant_ops = 0.0;
  double seconds(const CostModel& c) const;
  double joules(const CostModel& c, std::optional<int> bits) const;
};

/// Multiply-accumulates executed for one forward over `length` tokens,
/// counting only nonzero weights and skipping masked heads.
double forward_macs(const ModelF& model, std::size_t length);

/// Work of one evaluation pass (all perplexity windows over `eval_tokens`).
WorkEstimate evaluation_work(const ModelF& model, std::size_t eval_tokens, const PerplexityOptions& options);

struct ReportRow {
  std::string pipeline;
  std::string passes;  // human-readable pass list
  std::optional<double> perplexity;
  ResourceRecord resources;
  std::vector<OptResult> opt;  // one per profile, in config order
  std::optional<std::string> error;
};

struct Report {
  std::string config_digest;
  std::vector<WeightProfile> profiles;
  std::vector<ReportRow> rows;  // base first

  std::string to_json() const;
};

struct SuiteHooks {
  std::function<void(std::string_view)> log;
  /// Pre-built base model; skips loading/pretraining when set.
  const ModelF* base_model = nullptr;
};

/// IoError for unreadable inputs; a failing pipeline is recorded on its row.
Report run_suite(const SuiteConfig& config, const SuiteHooks& hooks = {});

/// Base row against every successful row, in metrics-CSV form.
std::vector<MethodEntry> report_metrics(const Report& report);

/// Empty when the document matches the report schema.
std::vector<std::string> report_schema_errors(std::string_view json);

/// Successful rows with their per-profile results and rankings.
OptTable report_opt_table(const Report& report);

/// Writes report.json, metrics.csv and plot_data.csv into `dir`.
void write_report_outputs(const Report& report, const std::filesystem::path& dir);

/// Loads and tokenizes a text corpus.
std::vector<Token> load_corpus(const std::filesystem::path& path);

}  // namespace clab
