// clab: command-line front end for the compression lab.

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "clab/compress.hpp"
#include "clab/distill.hpp"
#include "clab/errors.hpp"
#include "clab/meter.hpp"
#include "clab/metrics_csv.hpp"
#include "clab/scorecore.hpp"
#include "clab/suite.hpp"
#include "clab/tinyformer.hpp"

namespace {

using namespace clab;

std::vector<WeightProfile> profiles_or_builtin(const std::vector<std::string>& names) {
  if (names.empty()) return {builtin_profiles().begin(), builtin_profiles().end()};
  std::vector<WeightProfile> out;
  for (const auto& n : names) out.push_back(parse_profile(n));
  return out;
}

void add_model_dims(CLI::App* cmd, ModelConfig& cfg) {
  cmd->add_option("--layers", cfg.n_layers, "Transformer layers")->capture_default_str();
  cmd->add_option("--heads", cfg.n_heads, "Attention heads per layer")->capture_default_str();
  cmd->add_option("--d-model", cfg.d_model, "Model width")->capture_default_str();
  cmd->add_option("--d-ff", cfg.d_ff, "Feed-forward width")->capture_default_str();
  cmd->add_option("--context", cfg.context_len, "Context length")->capture_default_str();
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  out << text;
}

std::vector<std::vector<Token>> calibration_windows(const std::vector<Token>& corpus, int count, int length) {
  std::vector<std::vector<Token>> out;
  const auto len = static_cast<std::size_t>(length);
  if (corpus.size() < len) throw DomainError("calibration corpus shorter than one sequence");
  const std::size_t span = corpus.size() - len;
  for (int i = 0; i < count; ++i) {
    const std::size_t off = count > 1 ? span * static_cast<std::size_t>(i) / static_cast<std::size_t>(count - 1) : 0;
    out.emplace_back(corpus.begin() + static_cast<std::ptrdiff_t>(off),
                     corpus.begin() + static_cast<std::ptrdiff_t>(off + len));
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Compression lab: compress tiny transformers, measure them, and score the trade-offs."};
  app.require_subcommand(1);

  // run
  std::string config_path, out_dir, energy_source;
  std::optional<int> reps;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> profile_names;
  auto* run = app.add_subcommand("run", "Run a benchmark suite and write report.json, metrics.csv, plot_data.csv");
  run->add_option("--config", config_path, "Suite configuration (JSON)")->required()->check(CLI::ExistingFile);
  run->add_option("--reps", reps, "Repetitions per pipeline (default 30, or the config value)");
  run->add_option("--seed", seed, "Override every seed in the configuration");
  run->add_option("--out", out_dir, "Output directory (default: the config's output_dir)");
  run->add_option("--energy-source", energy_source, "synthetic | power:<watts> | counter:<path>,<wrap>");
  run->add_option("--profile", profile_names, "Weight profile name or alpha,beta (repeatable)");

  // score / rank / plot-data
  std::string csv_path, plot_out;
  auto* score = app.add_subcommand("score", "Score a metrics CSV and print the opt table");
  score->add_option("csv", csv_path, "Metrics CSV")->required()->check(CLI::ExistingFile);
  score->add_option("--profile", profile_names, "Weight profile name or alpha,beta (repeatable)");
  auto* rank = app.add_subcommand("rank", "Rank the methods of a metrics CSV per profile (best first)");
  rank->add_option("csv", csv_path, "Metrics CSV")->required()->check(CLI::ExistingFile);
  rank->add_option("--profile", profile_names, "Weight profile name or alpha,beta (repeatable)");
  auto* plot = app.add_subcommand("plot-data", "Write method,profile,opt rows for plotting");
  plot->add_option("csv", csv_path, "Metrics CSV")->required()->check(CLI::ExistingFile);
  plot->add_option("--profile", profile_names, "Weight profile name or alpha,beta (repeatable)");
  plot->add_option("--out", plot_out, "Output CSV")->required();

  // model tools
  std::string model_path, corpus_path, out_path, report_path;
  int window = 0, stride = 0, bits = 8, steps = 300, calib_count = 8, calib_len = 32;
  double threshold = 0.9, lr = 3e-3;
  std::uint64_t model_seed = 0;
  ModelConfig model_cfg;

  auto* ppl = app.add_subcommand("perplexity", "Perplexity of a model on a text corpus");
  ppl->add_option("--model", model_path, "Weights file")->required()->check(CLI::ExistingFile);
  ppl->add_option("--corpus", corpus_path, "Text corpus")->required()->check(CLI::ExistingFile);
  ppl->add_option("--window", window, "Window length (0 = context length)");
  ppl->add_option("--stride", stride, "Stride (0 = window)");

  auto* quant = app.add_subcommand("quantize", "Per-row absmax weight quantization");
  quant->add_option("--model", model_path, "Weights file")->required()->check(CLI::ExistingFile);
  quant->add_option("--bits", bits, "4 or 8")->capture_default_str();
  quant->add_option("--out", out_path, "Output weights file")->required();

  auto* heads = app.add_subcommand("prune-heads", "Mask attention heads that concentrate on a single token");
  heads->add_option("--model", model_path, "Weights file")->required()->check(CLI::ExistingFile);
  heads->add_option("--corpus", corpus_path, "Calibration text")->required()->check(CLI::ExistingFile);
  heads->add_option("--threshold", threshold, "Prune heads scoring at least this")->capture_default_str();
  heads->add_option("--sequences", calib_count, "Calibration sequences")->capture_default_str();
  heads->add_option("--length", calib_len, "Calibration sequence length")->capture_default_str();
  heads->add_option("--report", report_path, "Write per-head scores as JSON");
  heads->add_option("--out", out_path, "Output weights file")->required();

  auto* p24 = app.add_subcommand("prune-24", "2:4 magnitude pruning of every linear layer");
  p24->add_option("--model", model_path, "Weights file")->required()->check(CLI::ExistingFile);
  p24->add_option("--out", out_path, "Output weights file")->required();

  DistillConfig dcfg;
  std::string method = "forward_kld", loss_log;
  ModelConfig student_cfg;
  student_cfg.n_layers = 1;
  auto* dist = app.add_subcommand("distill", "Train a student against a teacher");
  dist->add_option("--teacher", model_path, "Teacher weights")->required()->check(CLI::ExistingFile);
  dist->add_option("--corpus", corpus_path, "Training text")->required()->check(CLI::ExistingFile);
  dist->add_option("--method", method, "forward_kld | reverse_kld | seqkd")->capture_default_str();
  dist->add_option("--temperature", dcfg.temperature, "Softmax temperature")->capture_default_str();
  dist->add_option("--ce-mix", dcfg.ce_mix_lambda, "Weight on ground-truth cross-entropy")->capture_default_str();
  dist->add_option("--steps", dcfg.steps, "Optimizer steps")->capture_default_str();
  dist->add_option("--lr", dcfg.learning_rate, "Adam learning rate")->capture_default_str();
  dist->add_option("--seed", dcfg.seed, "Seed")->capture_default_str();
  dist->add_option("--loss-log", loss_log, "Write step,loss CSV");
  dist->add_option("--out", out_path, "Student weights file")->required();
  add_model_dims(dist, student_cfg);

  auto* pre = app.add_subcommand("pretrain", "Train a seeded toy model on a text corpus");
  pre->add_option("--corpus", corpus_path, "Training text")->required()->check(CLI::ExistingFile);
  pre->add_option("--steps", steps, "Optimizer steps")->capture_default_str();
  pre->add_option("--lr", lr, "Adam learning rate")->capture_default_str();
  pre->add_option("--seed", model_seed, "Seed")->capture_default_str();
  pre->add_option("--out", out_path, "Output weights file")->required();
  add_model_dims(pre, model_cfg);

  CLI11_PARSE(app, argc, argv);

  try {
    if (run->parsed()) {
      auto cfg = SuiteConfig::load(config_path);
      if (reps) cfg.repetitions = *reps;
      if (seed) {
        cfg.seed = *seed;
        cfg.model.seed = *seed;
        for (std::size_t i = 0; i < cfg.students.size(); ++i) cfg.students[i].distill.seed = *seed + i + 1;
      }
      if (!energy_source.empty()) cfg.energy_source = EnergySourceSpec::parse(energy_source);
      if (!profile_names.empty()) cfg.profiles = profiles_or_builtin(profile_names);
      if (out_dir.empty()) out_dir = cfg.output_dir.empty() ? "." : cfg.resolve(cfg.output_dir).string();
      SuiteHooks hooks;
      hooks.log = [](std::string_view m) { std::cerr << m << '\n'; };
      const auto report = run_suite(cfg, hooks);
      write_report_outputs(report, out_dir);
      std::cout << format_opt_table(report_opt_table(report));
      for (const auto& r : report.rows)
        if (r.error) std::cout << r.pipeline << ": FAILED: " << *r.error << '\n';
      std::cout << "wrote " << out_dir << "/report.json (digest " << report.config_digest << ")\n";
    } else if (score->parsed()) {
      const auto table = score_report(ingest_metrics(csv_path), profiles_or_builtin(profile_names));
      std::cout << format_opt_table(table);
    } else if (rank->parsed()) {
      const auto table = score_report(ingest_metrics(csv_path), profiles_or_builtin(profile_names));
      for (std::size_t p = 0; p < table.profiles.size(); ++p) {
        std::cout << table.profiles[p].name << ":\n";
        int i = 1;
        for (const auto& r : table.rankings[p]) std::printf("  %2d. %-32s %.6f\n", i++, r.label.c_str(), r.result.opt);
      }
    } else if (plot->parsed()) {
      const auto table = score_report(ingest_metrics(csv_path), profiles_or_builtin(profile_names));
      emit_plot_data(table, plot_out);
      std::cout << "wrote " << plot_out << '\n';
    } else if (ppl->parsed()) {
      const auto model = load_model(model_path);
      const auto corpus = load_corpus(corpus_path);
      const auto r = perplexity(model, corpus, PerplexityOptions{window, stride});
      std::printf("perplexity %.6f  mean_nll %.6f  tokens %zu\n", r.perplexity, r.mean_nll, r.scored_tokens);
    } else if (quant->parsed()) {
      save_model(quantize_model(load_model(model_path), bits).materialize(), out_path);
      std::cout << "wrote " << out_path << '\n';
    } else if (heads->parsed()) {
      const auto model = load_model(model_path);
      const auto calib = calibration_windows(load_corpus(corpus_path), calib_count,
                                             std::min(calib_len, model.config.context_len));
      const auto rep = head_concentration(model, calib);
      const auto pruned = prune_heads(model, rep, threshold);
      if (!report_path.empty()) write_text(report_path, to_json(rep) + "\n");
      save_model(pruned, out_path);
      std::cout << "masked " << pruned.head_mask.count() << " of " << model.config.n_layers * model.config.n_heads
                << " heads; wrote " << out_path << '\n';
    } else if (p24->parsed()) {
      save_model(prune_model_2_4(load_model(model_path)), out_path);
      std::cout << "wrote " << out_path << '\n';
    } else if (dist->parsed()) {
      dcfg.method = parse_distill_method(method);
      const auto teacher = load_model(model_path);
      student_cfg.vocab_size = teacher.config.vocab_size;
      const auto corpus = load_corpus(corpus_path);
      const auto result = train_student(teacher, student_cfg, corpus, dcfg);
      save_model(result.model, out_path);
      if (!loss_log.empty()) write_text(loss_log, loss_log_csv(result.losses));
      const auto [first, last] = smoothed_endpoints(result.losses, 20);
      std::printf("loss %.4f -> %.4f over %d steps; wrote %s\n", first, last, dcfg.steps, out_path.c_str());
    } else if (pre->parsed()) {
      const auto corpus = load_corpus(corpus_path);
      const auto result = train_language_model(model_cfg, corpus, steps, lr, model_seed);
      save_model(result.model, out_path);
      if (!result.losses.empty()) {
        const auto [first, last] = smoothed_endpoints(result.losses, 20);
        std::printf("loss %.4f -> %.4f over %d steps; ", first, last, steps);
      }
      std::cout << "wrote " << out_path << '\n';
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
