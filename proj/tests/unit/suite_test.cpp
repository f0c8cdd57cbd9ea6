#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "clab/errors.hpp"
#include "clab/suite.hpp"
#include "toy.hpp"

namespace clab {
namespace {

const char* kSmallModel = R"({"n_layers": 1, "n_heads": 2, "d_model": 16, "d_ff": 32, "vocab_size": 256, "context_len": 16})";

std::string small_suite(const std::string& pipelines, const std::string& students = "[]") {
  std::ostringstream s;
  s << R"({"model": {"seed": 3, "pretrain_steps": 10, "learning_rate": 0.01, "config": )" << kSmallModel << R"(},
    "corpus": "corpus.txt",
    "eval": {"tokens": 128},
    "calibration": {"sequences": 4, "length": 16},
    "students": )" << students << R"(,
    "pipelines": )" << pipelines << R"(,
    "repetitions": 3,
    "seed": 7})";
  return s.str();
}

SuiteConfig parse(const std::string& text) { return SuiteConfig::parse(text, testing::data_dir()); }

TEST(SuiteConfig, ParsesMatrix) {
  const auto c = SuiteConfig::load(testing::config_dir() / "matrix.json");
  EXPECT_EQ(c.pipelines.size(), 12u);
  EXPECT_EQ(c.students.size(), 1u);
  EXPECT_EQ(c.repetitions, 30);
  EXPECT_EQ(c.digest().size(), 16u);
  EXPECT_EQ(c.digest(), SuiteConfig::load(testing::config_dir() / "matrix.json").digest());
}

TEST(SuiteConfig, RejectsBadInput) {
  EXPECT_THROW(parse(R"({"model": {"seed": 1}, "corpus": "c.txt", "colour": 1})"), DomainError);
  EXPECT_THROW(parse(R"({"model": {"seed": 1, "extra": 2}, "corpus": "c.txt"})"), DomainError);
  try {
    parse("{\n\"model\": \n}");
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 3u);
  }
  EXPECT_THROW(parse(small_suite(R"([{"name": "a", "passes": []}, {"name": "a", "passes": []}])")), DomainError);
  EXPECT_THROW(parse(small_suite(R"([{"name": "base", "passes": []}])")), DomainError);
  EXPECT_THROW(parse(small_suite(R"([{"name": "q", "passes": [{"type": "quantize", "bits": 3}]}])")), DomainError);
  EXPECT_THROW(parse(small_suite(R"([{"name": "h", "passes": [{"type": "prune_heads", "threshold": 0}]}])")),
               DomainError);
  EXPECT_THROW(parse(small_suite(R"([{"name": "d", "passes": [{"type": "distill", "student": "ghost"}]}])")),
               DomainError);
  EXPECT_THROW(SuiteConfig::load("/nonexistent/suite.json"), IoError);
}

TEST(Suite, BaseOnlyScoresOne) {
  const auto report = run_suite(parse(small_suite("[]")));
  ASSERT_EQ(report.rows.size(), 1u);
  const auto& base = report.rows[0];
  EXPECT_EQ(base.pipeline, "base");
  ASSERT_TRUE(base.perplexity.has_value());
  EXPECT_TRUE(std::isfinite(*base.perplexity));
  EXPECT_EQ(base.resources.runs, 3);
  ASSERT_EQ(base.opt.size(), 3u);
  for (const auto& o : base.opt) EXPECT_DOUBLE_EQ(o.opt, 1.0);
  EXPECT_TRUE(report_schema_errors(report.to_json()).empty());
}

TEST(Suite, PipelinesAreScoredAndReproducible) {
  const std::string students =
      R"([{"name": "kd", "config": {"n_layers": 1, "n_heads": 2, "d_model": 8, "d_ff": 16, "vocab_size": 256, "context_len": 16},
          "method": "reverse_kld", "temperature": 2.0, "steps": 3}])";
  const std::string pipelines = R"([
      {"name": "8bit", "passes": [{"type": "quantize", "bits": 8}]},
      {"name": "2:4", "passes": [{"type": "prune_24"}]},
      {"name": "ah80", "passes": [{"type": "prune_heads", "threshold": 0.8}]},
      {"name": "kd+4bit", "passes": [{"type": "distill", "student": "kd"}, {"type": "quantize", "bits": 4}]}])";
  const auto cfg = parse(small_suite(pipelines, students));
  const auto a = run_suite(cfg);
  const auto b = run_suite(cfg);
  ASSERT_EQ(a.rows.size(), 5u);
  EXPECT_EQ(a.to_json(), b.to_json());
  for (const auto& row : a.rows) {
    EXPECT_FALSE(row.error.has_value()) << row.pipeline << ": " << row.error.value_or("");
    for (const auto& o : row.opt) EXPECT_TRUE(std::isfinite(o.opt));
  }
  // Every opt entry is recomputable from the stored raw values.
  const auto& base = a.rows[0];
  for (const auto& row : a.rows) {
    const auto ratios = ResourceRatios::from_measurements(base.resources.wall_time_s, row.resources.wall_time_s,
                                                          base.resources.energy_kwh, row.resources.energy_kwh);
    for (const auto& o : row.opt) {
      const auto again = opt_score(*base.perplexity, *row.perplexity, ratios, o.profile);
      EXPECT_NEAR(again.opt, o.opt, 1e-12);
    }
  }
  EXPECT_TRUE(report_schema_errors(a.to_json()).empty());
  // The distilled student has fewer layers, so its synthetic cost is lower.
  EXPECT_LT(a.rows[4].resources.energy_kwh, base.resources.energy_kwh);
}

TEST(Suite, FailingPipelineIsRecorded) {
  const std::string students =
      R"([{"name": "bad", "config": {"n_layers": 1, "n_heads": 2, "d_model": 8, "d_ff": 16, "vocab_size": 128, "context_len": 16},
          "steps": 2}])";
  const auto report = run_suite(parse(small_suite(
      R"([{"name": "d", "passes": [{"type": "distill", "student": "bad"}]},
          {"name": "q", "passes": [{"type": "quantize", "bits": 8}]}])",
      students)));
  ASSERT_EQ(report.rows.size(), 3u);
  EXPECT_TRUE(report.rows[1].error.has_value());
  EXPECT_FALSE(report.rows[1].perplexity.has_value());
  EXPECT_FALSE(report.rows[2].error.has_value());
  EXPECT_TRUE(report_schema_errors(report.to_json()).empty());
  EXPECT_EQ(report_opt_table(report).methods.size(), 2u);
}

TEST(Suite, MissingCorpusIsIoError) {
  auto cfg = parse(small_suite("[]"));
  cfg.corpus = "does_not_exist.txt";
  EXPECT_THROW(run_suite(cfg), IoError);
}

TEST(Suite, OutputsWritten) {
  const auto report = run_suite(parse(small_suite(R"([{"name": "8bit", "passes": [{"type": "quantize", "bits": 8}]}])")));
  testing::TempDir dir;
  write_report_outputs(report, dir.path());
  for (const char* f : {"report.json", "metrics.csv", "plot_data.csv"})
    EXPECT_TRUE(std::filesystem::exists(dir.path() / f)) << f;
  const auto back = ingest_metrics(dir.path() / "metrics.csv");
  ASSERT_EQ(back.size(), 2u);
  const auto table = score_report(back, builtin_profiles());
  EXPECT_NEAR(table.at("base", "Balanced").opt, 1.0, 1e-12);
  EXPECT_NEAR(table.at("8bit", "Balanced").opt, report.rows[1].opt[0].opt, 1e-12);
}

TEST(ReportSchema, FlagsProblems) {
  EXPECT_FALSE(report_schema_errors("not json").empty());
  EXPECT_FALSE(report_schema_errors("{}").empty());
  auto j = nlohmann::json::parse(run_suite(parse(small_suite("[]"))).to_json());
  j["rows"][0].erase("time_s");
  EXPECT_FALSE(report_schema_errors(j.dump()).empty());
}

TEST(CostModel, MaskedHeadsAndSparsityReduceWork) {
  const auto m = init_model<float>(testing::toy_config(), 1);
  const double dense = forward_macs(m, 64);
  auto masked = m;
  masked.head_mask.set(0, 0, true);
  EXPECT_LT(forward_macs(masked, 64), dense);
  EXPECT_LT(forward_macs(prune_model_2_4(m), 64), dense);
}

}  // namespace
}  // namespace clab
