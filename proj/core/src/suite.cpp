#include "clab/suite.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <sstream>

#include <json.hpp>

#include "clab/errors.hpp"

namespace clab {

using json = nlohmann::json;

namespace {

// --- config parsing ----------------------------------------------------------

void check_keys(const json& obj, std::string_view where, std::initializer_list<std::string_view> allowed) {
  if (!obj.is_object()) throw DomainError(std::string(where) + " must be an object");
  for (const auto& [key, value] : obj.items()) {
    (void)value;
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end())
      throw DomainError("unknown key '" + key + "' in " + std::string(where));
  }
}

template <typename T>
T get_or(const json& obj, const char* key, T fallback, std::string_view where) {
  if (!obj.contains(key)) return fallback;
  try {
    return obj.at(key).get<T>();
  } catch (const json::exception&) {
    throw DomainError(std::string(where) + "." + key + " has the wrong type");
  }
}

ModelConfig parse_model_config(const json& j, std::string_view where) {
  check_keys(j, where, {"n_layers", "n_heads", "d_model", "d_ff", "vocab_size", "context_len"});
  ModelConfig c;
  c.n_layers = get_or(j, "n_layers", c.n_layers, where);
  c.n_heads = get_or(j, "n_heads", c.n_heads, where);
  c.d_model = get_or(j, "d_model", c.d_model, where);
  c.d_ff = get_or(j, "d_ff", c.d_ff, where);
  c.vocab_size = get_or(j, "vocab_size", c.vocab_size, where);
  c.context_len = get_or(j, "context_len", c.context_len, where);
  c.validate();
  return c;
}

json model_config_json(const ModelConfig& c) {
  return json{{"n_layers", c.n_layers}, {"n_heads", c.n_heads},       {"d_model", c.d_model},
              {"d_ff", c.d_ff},         {"vocab_size", c.vocab_size}, {"context_len", c.context_len}};
}

CompressionPass parse_pass(const json& j, const std::string& where) {
  if (!j.is_object() || !j.contains("type")) throw DomainError(where + " needs a \"type\"");
  const auto type = get_or<std::string>(j, "type", "", where);
  CompressionPass pass;
  if (type == "quantize") {
    check_keys(j, where, {"type", "bits"});
    pass = QuantizePass{get_or(j, "bits", 8, where)};
  } else if (type == "prune_heads") {
    check_keys(j, where, {"type", "threshold"});
    pass = PruneHeadsPass{get_or(j, "threshold", 0.9, where)};
  } else if (type == "prune_24") {
    check_keys(j, where, {"type"});
    pass = Prune24Pass{};
  } else if (type == "distill") {
    check_keys(j, where, {"type", "student"});
    pass = DistillRefPass{get_or<std::string>(j, "student", "", where)};
  } else {
    throw DomainError(where + ": unknown pass type '" + type + "'");
  }
  validate(pass);
  return pass;
}

json pass_json(const CompressionPass& pass) {
  return std::visit(
      [](const auto& p) -> json {
        using P = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<P, QuantizePass>) return json{{"type", "quantize"}, {"bits", p.bits}};
        else if constexpr (std::is_same_v<P, PruneHeadsPass>)
          return json{{"type", "prune_heads"}, {"threshold", p.threshold}};
        else if constexpr (std::is_same_v<P, Prune24Pass>) return json{{"type", "prune_24"}};
        else return json{{"type", "distill"}, {"student", p.student}};
      },
      pass);
}

std::string join_passes(const std::vector<CompressionPass>& passes) {
  if (passes.empty()) return "none";
  std::string out;
  for (const auto& p : passes) out += (out.empty() ? "" : " > ") + describe(p);
  return out;
}

}  // namespace

SuiteConfig SuiteConfig::parse(std::string_view text, std::filesystem::path base_dir) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    // Report the 1-based line of the failing byte.
    const auto upto = text.substr(0, std::min<std::size_t>(e.byte, text.size()));
    throw ParseError(std::string("invalid suite config: ") + e.what(),
                     static_cast<std::size_t>(std::count(upto.begin(), upto.end(), '\n')) + 1);
  }
  check_keys(j, "config",
             {"model", "corpus", "eval", "calibration", "students", "pipelines", "repetitions", "energy_source",
              "profiles", "carbon_intensity_g_per_kwh", "quality_exponent", "output_dir", "seed"});
  SuiteConfig c;
  c.base_dir = std::move(base_dir);
  c.seed = get_or<std::uint64_t>(j, "seed", 0, "config");

  if (!j.contains("model")) throw DomainError("config needs a \"model\"");
  const json& m = j.at("model");
  check_keys(m, "model", {"path", "seed", "config", "pretrain_steps", "learning_rate"});
  c.model.path = get_or<std::string>(m, "path", "", "model");
  if (!c.model.path.empty() && m.size() != 1) throw DomainError("model: \"path\" excludes the other keys");
  c.model.seed = get_or<std::uint64_t>(m, "seed", c.seed, "model");
  if (m.contains("config")) c.model.config = parse_model_config(m.at("config"), "model.config");
  c.model.pretrain_steps = get_or(m, "pretrain_steps", c.model.pretrain_steps, "model");
  c.model.learning_rate = get_or(m, "learning_rate", c.model.learning_rate, "model");

  c.corpus = get_or<std::string>(j, "corpus", "", "config");

  if (j.contains("eval")) {
    const json& e = j.at("eval");
    check_keys(e, "eval", {"tokens", "window", "stride"});
    c.eval_tokens = get_or(e, "tokens", c.eval_tokens, "eval");
    c.eval_window = get_or(e, "window", c.eval_window, "eval");
    c.eval_stride = get_or(e, "stride", c.eval_stride, "eval");
  }
  if (j.contains("calibration")) {
    const json& e = j.at("calibration");
    check_keys(e, "calibration", {"sequences", "length"});
    c.calibration_sequences = get_or(e, "sequences", c.calibration_sequences, "calibration");
    c.calibration_length = get_or(e, "length", c.calibration_length, "calibration");
  }

  if (j.contains("students")) {
    const json& s = j.at("students");
    if (!s.is_array()) throw DomainError("students must be an array");
    for (std::size_t i = 0; i < s.size(); ++i) {
      const std::string where = "students[" + std::to_string(i) + "]";
      const json& e = s[i];
      check_keys(e, where,
                 {"name", "config", "method", "temperature", "ce_mix_lambda", "steps", "learning_rate", "seed",
                  "seqkd_prompts", "seqkd_prompt_len"});
      StudentSpec st;
      st.name = get_or<std::string>(e, "name", "", where);
      if (e.contains("config")) st.config = parse_model_config(e.at("config"), where + ".config");
      auto& d = st.distill;
      d.method = parse_distill_method(get_or<std::string>(e, "method", "forward_kld", where));
      d.temperature = get_or(e, "temperature", d.temperature, where);
      d.ce_mix_lambda = get_or(e, "ce_mix_lambda", d.ce_mix_lambda, where);
      d.steps = get_or(e, "steps", d.steps, where);
      d.learning_rate = get_or(e, "learning_rate", d.learning_rate, where);
      d.seed = get_or<std::uint64_t>(e, "seed", c.seed + i + 1, where);
      d.seqkd_prompts = get_or(e, "seqkd_prompts", d.seqkd_prompts, where);
      d.seqkd_prompt_len = get_or(e, "seqkd_prompt_len", d.seqkd_prompt_len, where);
      c.students.push_back(std::move(st));
    }
  }

  if (j.contains("pipelines")) {
    const json& p = j.at("pipelines");
    if (!p.is_array()) throw DomainError("pipelines must be an array");
    for (std::size_t i = 0; i < p.size(); ++i) {
      const std::string where = "pipelines[" + std::to_string(i) + "]";
      check_keys(p[i], where, {"name", "passes"});
      PipelineSpec ps;
      ps.name = get_or<std::string>(p[i], "name", "", where);
      const json passes = p[i].value("passes", json::array());
      if (!passes.is_array()) throw DomainError(where + ".passes must be an array");
      for (std::size_t k = 0; k < passes.size(); ++k)
        ps.passes.push_back(parse_pass(passes[k], where + ".passes[" + std::to_string(k) + "]"));
      c.pipelines.push_back(std::move(ps));
    }
  }

  c.repetitions = get_or(j, "repetitions", c.repetitions, "config");
  c.energy_source = EnergySourceSpec::parse(get_or<std::string>(j, "energy_source", "synthetic", "config"));
  if (j.contains("profiles")) {
    const json& p = j.at("profiles");
    if (!p.is_array()) throw DomainError("profiles must be an array of names or \"alpha,beta\" strings");
    c.profiles.clear();
    for (const auto& e : p) {
      if (!e.is_string()) throw DomainError("profiles must be an array of names or \"alpha,beta\" strings");
      c.profiles.push_back(parse_profile(e.get<std::string>()));
    }
  }
  c.carbon_intensity_g_per_kwh = get_or(j, "carbon_intensity_g_per_kwh", c.carbon_intensity_g_per_kwh, "config");
  c.quality_exponent = get_or(j, "quality_exponent", c.quality_exponent, "config");
  c.output_dir = get_or<std::string>(j, "output_dir", "", "config");
  c.validate();
  return c;
}

SuiteConfig SuiteConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read suite config " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse(buf.str(), path.parent_path());
}

void SuiteConfig::validate() const {
  if (model.path.empty()) {
    model.config.validate();
    if (model.pretrain_steps < 0) throw DomainError("model.pretrain_steps must be >= 0");
    if (!(model.learning_rate > 0.0)) throw DomainError("model.learning_rate must be > 0");
  }
  if (corpus.empty()) throw DomainError("config needs a \"corpus\"");
  if (eval_tokens < 2) throw DomainError("eval.tokens must be >= 2");
  if (eval_window < 0 || eval_stride < 0) throw DomainError("eval.window and eval.stride must be >= 0");
  if (calibration_sequences < 1) throw DomainError("calibration.sequences must be >= 1");
  if (calibration_length <= kMinEarlierKeys) throw DomainError("calibration.length must exceed 4");
  if (repetitions < 1) throw DomainError("repetitions must be >= 1");
  if (profiles.empty()) throw DomainError("at least one weight profile is required");
  if (!(carbon_intensity_g_per_kwh >= 0.0)) throw DomainError("carbon_intensity_g_per_kwh must be >= 0");
  if (!(quality_exponent > 0.0)) throw DomainError("quality_exponent must be > 0");

  std::set<std::string> names;
  for (const auto& s : students) {
    if (s.name.empty()) throw DomainError("student without a name");
    if (!names.insert(s.name).second) throw DomainError("duplicate student '" + s.name + "'");
    s.config.validate();
    s.distill.validate();
  }
  std::set<std::string> pipes{std::string(kBasePipeline)};
  for (const auto& p : pipelines) {
    if (p.name.empty()) throw DomainError("pipeline without a name");
    if (!pipes.insert(p.name).second) throw DomainError("duplicate pipeline name '" + p.name + "'");
    for (const auto& pass : p.passes) {
      clab::validate(pass);
      if (const auto* d = std::get_if<DistillRefPass>(&pass); d && !names.count(d->student))
        throw DomainError("pipeline '" + p.name + "' refers to unknown student '" + d->student + "'");
    }
  }
}

std::string SuiteConfig::canonical_json() const {
  json j;
  j["seed"] = seed;
  if (!model.path.empty()) {
    j["model"] = json{{"path", model.path}};
  } else {
    j["model"] = json{{"seed", model.seed},
                      {"config", model_config_json(model.config)},
                      {"pretrain_steps", model.pretrain_steps},
                      {"learning_rate", model.learning_rate}};
  }
  j["corpus"] = corpus;
  j["eval"] = json{{"tokens", eval_tokens}, {"window", eval_window}, {"stride", eval_stride}};
  j["calibration"] = json{{"sequences", calibration_sequences}, {"length", calibration_length}};
  json st = json::array();
  for (const auto& s : students) {
    const auto& d = s.distill;
    st.push_back(json{{"name", s.name},
                      {"config", model_config_json(s.config)},
                      {"method", std::string(to_string(d.method))},
                      {"temperature", d.temperature},
                      {"ce_mix_lambda", d.ce_mix_lambda},
                      {"steps", d.steps},
                      {"learning_rate", d.learning_rate},
                      {"seed", d.seed},
                      {"seqkd_prompts", d.seqkd_prompts},
                      {"seqkd_prompt_len", d.seqkd_prompt_len}});
  }
  j["students"] = st;
  json pl = json::array();
  for (const auto& p : pipelines) {
    json passes = json::array();
    for (const auto& pass : p.passes) passes.push_back(pass_json(pass));
    pl.push_back(json{{"name", p.name}, {"passes", passes}});
  }
  j["pipelines"] = pl;
  j["repetitions"] = repetitions;
  j["energy_source"] = energy_source.str();
  json pr = json::array();
  for (const auto& p : profiles) pr.push_back(json{{"name", p.name}, {"alpha", p.alpha}, {"beta", p.beta}});
  j["profiles"] = pr;
  j["carbon_intensity_g_per_kwh"] = carbon_intensity_g_per_kwh;
  j["quality_exponent"] = quality_exponent;
  j["output_dir"] = output_dir;
  return j.dump();
}

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

std::string SuiteConfig::digest() const {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(canonical_json())));
  return buf;
}

std::filesystem::path SuiteConfig::resolve(const std::string& path) const {
  std::filesystem::path p(path);
  return p.is_absolute() || base_dir.empty() ? p : base_dir / p;
}

// --- cost model --------------------------------------------------------------

double WorkEstimate::seconds(const CostModel& c) const {
  return macs * c.seconds_per_mac + dequant_ops * c.seconds_per_dequant;
}

double WorkEstimate::joules(const CostModel& c, std::optional<int> bits) const {
  // Energy per MAC scales with the bytes moved per weight.
  const double scale = bits ? static_cast<double>(*bits) / 32.0 : 1.0;
  return macs * c.joules_per_mac_fp32 * scale + dequant_ops * c.joules_per_dequant;
}

namespace {

std::size_t nnz_rows(const Matrix<float>& m, std::size_t r0, std::size_t r1) {
  std::size_t n = 0;
  for (std::size_t r = r0; r < r1; ++r)
    for (float v : m.row(r)) n += v != 0.0f;
  return n;
}

std::size_t nnz_cols(const Matrix<float>& m, std::size_t c0, std::size_t c1) {
  std::size_t n = 0;
  for (std::size_t r = 0; r < m.rows; ++r)
    for (std::size_t c = c0; c < c1; ++c) n += m(r, c) != 0.0f;
  return n;
}

}  // namespace

double forward_macs(const ModelF& model, std::size_t length) {
  const auto& cfg = model.config;
  const auto dh = static_cast<std::size_t>(cfg.d_head());
  const double len = static_cast<double>(length);
  double macs = 0.0;
  for (std::size_t l = 0; l < model.weights.layers.size(); ++l) {
    const auto& lw = model.weights.layers[l];
    for (int h = 0; h < cfg.n_heads; ++h) {
      if (model.head_mask.is_pruned(static_cast<int>(l), h)) continue;
      const std::size_t r0 = static_cast<std::size_t>(h) * dh, r1 = r0 + dh;
      const double proj = static_cast<double>(nnz_rows(lw.wq, r0, r1) + nnz_rows(lw.wk, r0, r1) +
                                              nnz_rows(lw.wv, r0, r1) + nnz_cols(lw.wo, r0, r1));
      macs += len * proj + len * (len + 1.0) * static_cast<double>(dh);  // scores + weighted values
    }
    macs += len * static_cast<double>(nnz_rows(lw.ff_in, 0, lw.ff_in.rows) + nnz_rows(lw.ff_out, 0, lw.ff_out.rows));
  }
  macs += len * static_cast<double>(nnz_rows(model.weights.tok_emb, 0, model.weights.tok_emb.rows));
  return macs;
}

WorkEstimate evaluation_work(const ModelF& model, std::size_t eval_tokens, const PerplexityOptions& options) {
  if (eval_tokens < 2) throw DomainError("evaluation needs at least 2 tokens");
  const auto window = static_cast<std::size_t>(options.window > 0 ? options.window : model.config.context_len);
  const auto stride = options.stride > 0 ? static_cast<std::size_t>(options.stride) : window;
  std::size_t quantized = 0;
  if (model.quantized_bits) {
    for (const auto& lw : model.weights.layers)
      quantized += lw.wq.size() + lw.wk.size() + lw.wv.size() + lw.wo.size() + lw.ff_in.size() + lw.ff_out.size();
  }
  // Same windowing as perplexity().
  WorkEstimate w;
  const std::size_t last = eval_tokens - 1;
  for (std::size_t begin = 0, done = 0; done < last; begin += stride) {
    const std::size_t end = std::min(begin + window, last);
    w.macs += forward_macs(model, end - begin);
    w.dequant_ops += static_cast<double>(quantized);
    done = end;
  }
  return w;
}

// --- running -----------------------------------------------------------------

std::vector<Token> load_corpus(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read corpus " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  auto tokens = tokenize(buf.str());
  if (tokens.empty()) throw DomainError("corpus " + path.string() + " is empty");
  return tokens;
}

Report run_suite(const SuiteConfig& config, const SuiteHooks& hooks) {
  config.validate();
  auto log = [&](const std::string& msg) {
    if (hooks.log) hooks.log(msg);
  };

  const auto corpus = load_corpus(config.resolve(config.corpus));
  const auto n_eval = static_cast<std::size_t>(config.eval_tokens);
  if (corpus.size() < n_eval + static_cast<std::size_t>(config.calibration_length) + 2)
    throw DomainError("corpus has " + std::to_string(corpus.size()) + " tokens; too short for eval.tokens " +
                      std::to_string(n_eval));
  const std::span<const Token> all(corpus);
  const auto train = all.first(corpus.size() - n_eval);
  const auto eval = all.last(n_eval);

  ModelF base;
  if (hooks.base_model) {
    base = *hooks.base_model;
  } else if (!config.model.path.empty()) {
    base = load_model(config.resolve(config.model.path).string());
  } else {
    log("pretraining base model (" + std::to_string(config.model.pretrain_steps) + " steps)");
    base = train_language_model(config.model.config, train, config.model.pretrain_steps, config.model.learning_rate,
                                config.model.seed)
               .model;
  }
  const Token max_token = *std::max_element(corpus.begin(), corpus.end());
  if (max_token >= base.config.vocab_size)
    throw DomainError("corpus token " + std::to_string(max_token) + " exceeds the model vocabulary");

  PassContext ctx;
  {
    std::mt19937_64 rng(config.seed ^ 0xC0FFEEull);
    const auto len = static_cast<std::size_t>(std::min(config.calibration_length, base.config.context_len));
    for (int i = 0; i < config.calibration_sequences; ++i) {
      const std::size_t off = static_cast<std::size_t>(rng() % (train.size() - len + 1));
      ctx.calibration.emplace_back(train.begin() + static_cast<std::ptrdiff_t>(off),
                                   train.begin() + static_cast<std::ptrdiff_t>(off + len));
    }
  }
  auto students = std::make_shared<std::map<std::string, ModelF>>();
  ctx.student = [&config, &base, train, students, &log](const std::string& name) -> ModelF {
    if (auto it = students->find(name); it != students->end()) return it->second;
    const auto spec = std::find_if(config.students.begin(), config.students.end(),
                                   [&](const StudentSpec& s) { return s.name == name; });
    if (spec == config.students.end()) throw DomainError("unknown student '" + name + "'");
    log("distilling student '" + name + "' (" + std::string(to_string(spec->distill.method)) + ")");
    auto trained = train_student(base, spec->config, train, spec->distill).model;
    return students->emplace(name, std::move(trained)).first->second;
  };

  const PerplexityOptions popts{config.eval_window, config.eval_stride};
  MeasureOptions mopts{config.repetitions, config.carbon_intensity_g_per_kwh};
  const CostModel cost;

  Report report;
  report.config_digest = config.digest();
  report.profiles = config.profiles;

  std::vector<PipelineSpec> all_pipelines{{std::string(kBasePipeline), {}}};
  all_pipelines.insert(all_pipelines.end(), config.pipelines.begin(), config.pipelines.end());

  for (const auto& spec : all_pipelines) {
    ReportRow row;
    row.pipeline = spec.name;
    row.passes = join_passes(spec.passes);
    log("pipeline " + spec.name + ": " + row.passes);
    try {
      const ModelF model = Pipeline(spec.passes, ctx)(base);
      double ppl_sum = 0.0;
      auto work = [&] { ppl_sum += perplexity(model, eval, popts).perplexity; };
      if (config.energy_source.kind == SourceKind::SyntheticClock) {
        const auto w = evaluation_work(model, n_eval, popts);
        SyntheticClock source({w.joules(cost, model.quantized_bits)}, {w.seconds(cost)});
        row.resources = measure(source, source, work, mopts);
      } else {
        auto source = make_energy_source(config.energy_source);
        SteadyClock clock;
        row.resources = measure(*source, clock, work, mopts);
      }
      row.perplexity = ppl_sum / static_cast<double>(config.repetitions);
      if (!std::isfinite(*row.perplexity)) throw DomainError("perplexity is not finite");
    } catch (const std::exception& e) {
      if (spec.name == kBasePipeline) throw;
      row.error = e.what();
      row.perplexity.reset();
      log("  failed: " + *row.error);
    }
    report.rows.push_back(std::move(row));
  }

  const ReportRow& b = report.rows.front();
  const ScoreOptions sopts{config.quality_exponent};
  for (auto& row : report.rows) {
    if (row.error) continue;
    try {
      const auto ratios = ResourceRatios::from_measurements(b.resources.wall_time_s, row.resources.wall_time_s,
                                                            b.resources.energy_kwh, row.resources.energy_kwh);
      for (const auto& p : config.profiles) row.opt.push_back(opt_score(*b.perplexity, *row.perplexity, ratios, p, sopts));
    } catch (const std::exception& e) {
      row.opt.clear();
      row.error = std::string("scoring failed: ") + e.what();
    }
  }
  return report;
}

// --- report I/O --------------------------------------------------------------

std::string Report::to_json() const {
  json j;
  j["config_digest"] = config_digest;
  json pr = json::array();
  for (const auto& p : profiles) pr.push_back(json{{"name", p.name}, {"alpha", p.alpha}, {"beta", p.beta}});
  j["profiles"] = pr;
  json rows_j = json::array();
  for (const auto& r : rows) {
    json row;
    row["pipeline"] = r.pipeline;
    row["passes"] = r.passes;
    row["perplexity"] = r.perplexity ? json(*r.perplexity) : json(nullptr);
    row["time_s"] = r.resources.wall_time_s;
    row["energy_kwh"] = r.resources.energy_kwh;
    row["carbon_g"] = r.resources.carbon_g;
    row["runs"] = r.resources.runs;
    row["source"] = std::string(to_string(r.resources.source));
    json opt = json::object();
    for (const auto& o : r.opt)
      opt[o.profile.name] = json{{"quality_factor", o.quality_factor}, {"cost_factor", o.cost_factor}, {"opt", o.opt}};
    row["opt"] = opt;
    row["error"] = r.error ? json(*r.error) : json(nullptr);
    rows_j.push_back(row);
  }
  j["rows"] = rows_j;
  return j.dump(2) + "\n";
}

std::vector<MethodEntry> report_metrics(const Report& report) {
  if (report.rows.empty() || report.rows.front().pipeline != kBasePipeline || !report.rows.front().perplexity)
    throw DomainError("report has no usable base row");
  const auto& b = report.rows.front();
  std::vector<MethodEntry> out;
  for (const auto& r : report.rows) {
    if (r.error || !r.perplexity) continue;
    MethodEntry e;
    e.group = r.pipeline;
    e.records.push_back({"perplexity", Direction::LowerBetter, std::nullopt, *b.perplexity, *r.perplexity});
    e.base_time_s = b.resources.wall_time_s;
    e.model_time_s = r.resources.wall_time_s;
    e.base_energy_kwh = b.resources.energy_kwh;
    e.model_energy_kwh = r.resources.energy_kwh;
    out.push_back(std::move(e));
  }
  return out;
}

std::vector<std::string> report_schema_errors(std::string_view text) {
  std::vector<std::string> errs;
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    return {std::string("not JSON: ") + e.what()};
  }
  if (!j.is_object()) return {"document is not an object"};
  if (!j.contains("config_digest") || !j["config_digest"].is_string()) errs.push_back("config_digest missing");
  if (!j.contains("rows") || !j["rows"].is_array() || j["rows"].empty()) {
    errs.push_back("rows missing or empty");
    return errs;
  }
  std::vector<std::string> profile_names;
  if (j.contains("profiles") && j["profiles"].is_array())
    for (const auto& p : j["profiles"])
      if (p.is_object() && p.contains("name") && p["name"].is_string()) profile_names.push_back(p["name"]);
  int base_rows = 0;
  std::set<std::string> seen;
  for (std::size_t i = 0; i < j["rows"].size(); ++i) {
    const json& r = j["rows"][i];
    const std::string where = "rows[" + std::to_string(i) + "]";
    if (!r.is_object()) {
      errs.push_back(where + " is not an object");
      continue;
    }
    if (!r.contains("pipeline") || !r["pipeline"].is_string()) {
      errs.push_back(where + ".pipeline missing");
      continue;
    }
    const std::string name = r["pipeline"];
    if (!seen.insert(name).second) errs.push_back(where + ": duplicate pipeline " + name);
    if (name == kBasePipeline) {
      ++base_rows;
      if (i != 0) errs.push_back("base row is not first");
    }
    const bool failed = r.contains("error") && r["error"].is_string();
    if (!r.contains("perplexity") || !(r["perplexity"].is_number() || (failed && r["perplexity"].is_null())))
      errs.push_back(where + ".perplexity missing");
    for (const char* k : {"time_s", "energy_kwh", "carbon_g"})
      if (!r.contains(k) || !r[k].is_number() || r[k].get<double>() < 0.0)
        errs.push_back(where + "." + k + " missing or negative");
    if (!r.contains("opt") || !r["opt"].is_object()) {
      errs.push_back(where + ".opt missing");
      continue;
    }
    if (failed) continue;
    for (const auto& p : profile_names) {
      if (!r["opt"].contains(p)) {
        errs.push_back(where + ".opt lacks profile " + p);
        continue;
      }
      const json& o = r["opt"][p];
      for (const char* k : {"quality_factor", "cost_factor", "opt"})
        if (!o.contains(k) || !o[k].is_number() || !std::isfinite(o[k].get<double>()))
          errs.push_back(where + ".opt." + p + "." + k + " missing or not finite");
    }
    if (r["opt"].empty()) errs.push_back(where + ".opt is empty");
  }
  if (base_rows != 1) errs.push_back("expected exactly one base row, found " + std::to_string(base_rows));
  return errs;
}

OptTable report_opt_table(const Report& report) {
  OptTable t;
  t.profiles = report.profiles;
  for (const auto& r : report.rows) {
    if (r.error || r.opt.size() != report.profiles.size()) continue;
    t.methods.push_back(r.pipeline);
    t.results.push_back(r.opt);
  }
  for (std::size_t p = 0; p < t.profiles.size(); ++p) {
    std::vector<RankedMethod> c;
    for (std::size_t m = 0; m < t.methods.size(); ++m) c.push_back({t.methods[m], t.results[m][p]});
    t.rankings.push_back(rank_methods(std::move(c)));
  }
  return t;
}

void write_report_outputs(const Report& report, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  {
    std::ofstream out(dir / "report.json", std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + (dir / "report.json").string());
    out << report.to_json();
  }
  const auto metrics = report_metrics(report);
  write_metrics_csv(metrics, dir / "metrics.csv");
  emit_plot_data(report_opt_table(report), dir / "plot_data.csv");
}

}  // namespace clab
