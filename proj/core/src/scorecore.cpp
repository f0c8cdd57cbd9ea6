#include "clab/scorecore.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <charconv>
#include <cmath>
#include <sstream>

#include "clab/errors.hpp"

namespace clab {

namespace {

std::string describe(const MetricRecord& r) { return "metric '" + r.name + "'"; }

std::string normalize_name(std::string_view s) {
  std::string out;
  for (char c : s) {
    if (c == ' ' || c == '-' || c == '_') continue;
    out.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  }
  return out;
}

double parse_double(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size())
    throw DomainError("not a number: '" + std::string(s) + "'");
  return v;
}

}  // namespace

WeightProfile WeightProfile::make(std::string name, double alpha, double beta) {
  if (!std::isfinite(alpha) || !std::isfinite(beta) || alpha < 0.0 || beta < 0.0)
    throw DomainError("profile weights must be finite and non-negative");
  if (std::abs(alpha + beta - 1.0) > 1e-12)
    throw DomainError("profile weights must sum to 1");
  return WeightProfile{std::move(name), alpha, beta};
}

const WeightProfile& balanced_profile() { return builtin_profiles()[0]; }
const WeightProfile& energy_focus_profile() { return builtin_profiles()[1]; }
const WeightProfile& runtime_focus_profile() { return builtin_profiles()[2]; }

std::span<const WeightProfile> builtin_profiles() {
  static const std::array<WeightProfile, 3> profiles{
      WeightProfile{"Balanced", 0.5, 0.5},
      WeightProfile{"Energy Focus", 0.1, 0.9},
      WeightProfile{"Runtime Focus", 0.9, 0.1},
  };
  return profiles;
}

WeightProfile parse_profile(std::string_view spec) {
  if (auto comma = spec.find(','); comma != std::string_view::npos) {
    double alpha = parse_double(spec.substr(0, comma));
    double beta = parse_double(spec.substr(comma + 1));
    std::ostringstream name;
    name << "alpha=" << alpha << ",beta=" << beta;
    return WeightProfile::make(name.str(), alpha, beta);
  }
  const std::string key = normalize_name(spec);
  if (key == "balanced") return balanced_profile();
  if (key == "energy" || key == "energyfocus") return energy_focus_profile();
  if (key == "runtime" || key == "runtimefocus" || key == "time") return runtime_focus_profile();
  throw DomainError("unknown weight profile '" + std::string(spec) + "'");
}

std::string_view to_string(Direction d) {
  return d == Direction::LowerBetter ? "lower" : "higher";
}

ResourceRatios ResourceRatios::from_measurements(double base_time, double model_time,
                                                 double base_energy, double model_energy) {
  for (double v : {base_time, model_time, base_energy, model_energy}) {
    if (!(v > 0.0) || !std::isfinite(v))
      throw DomainError("time and energy measurements must be finite and positive");
  }
  return ResourceRatios{model_time / base_time, model_energy / base_energy};
}

double ratio_lower_better(double base, double model) {
  if (!(base > 0.0) || !(model > 0.0) || !std::isfinite(base) || !std::isfinite(model))
    throw DomainError("lower-is-better values must be finite and positive");
  return model / base;
}

double ratio_higher_better(double base, double model, double floor_x) {
  if (!std::isfinite(base) || !std::isfinite(model) || !std::isfinite(floor_x))
    throw DomainError("higher-is-better values must be finite");
  const double shift = kRandomFloorFactor * floor_x;
  const double base_adj = base - shift;
  const double model_adj = model - shift;
  if (!(base_adj > 0.0) || !(model_adj > 0.0))
    throw BelowRandomFloor("score at or below 4/5 of the random floor");
  return base_adj / model_adj;
}

void validate(const MetricRecord& r) {
  if (r.direction == Direction::LowerBetter) {
    if (r.random_floor)
      throw DomainError(describe(r) + ": random floor given for a lower-is-better metric");
    if (!(r.base_value > 0.0) || !(r.model_value > 0.0))
      throw DomainError(describe(r) + ": lower-is-better values must be positive");
    return;
  }
  if (!r.random_floor) throw DomainError(describe(r) + ": higher-is-better metric needs a random floor");
  const double shift = kRandomFloorFactor * *r.random_floor;
  if (!(r.base_value > shift) || !(r.model_value > shift))
    throw BelowRandomFloor(describe(r) + ": score at or below 4/5 of the random floor");
}

double record_ratio(const MetricRecord& r) {
  validate(r);
  if (r.direction == Direction::LowerBetter) return ratio_lower_better(r.base_value, r.model_value);
  return ratio_higher_better(r.base_value, r.model_value, *r.random_floor);
}

double aggregate_quality(std::span<const MetricRecord> records, const ScoreOptions& options) {
  if (records.empty()) throw DomainError("aggregate_quality needs at least one record");
  if (!(options.quality_exponent > 0.0)) throw DomainError("quality exponent must be positive");
  double sum = 0.0;
  for (const auto& r : records) sum += std::pow(record_ratio(r), options.quality_exponent);
  return sum / static_cast<double>(records.size());
}

OptResult opt_score(double quality_factor, const ResourceRatios& ratios, const WeightProfile& profile) {
  if (!(quality_factor > 0.0) || !std::isfinite(quality_factor))
    throw DomainError("quality factor must be finite and positive");
  if (!(ratios.t_ratio > 0.0) || !(ratios.e_ratio > 0.0) || !std::isfinite(ratios.t_ratio) ||
      !std::isfinite(ratios.e_ratio))
    throw DomainError("resource ratios must be finite and positive");
  const double cost = profile.alpha * ratios.t_ratio + profile.beta * ratios.e_ratio;
  return OptResult{profile, quality_factor, cost, quality_factor * cost};
}

OptResult opt_score(std::span<const MetricRecord> records, const ResourceRatios& ratios,
                    const WeightProfile& profile, const ScoreOptions& options) {
  return opt_score(aggregate_quality(records, options), ratios, profile);
}

OptResult opt_score(double base_value, double model_value, const ResourceRatios& ratios,
                    const WeightProfile& profile, const ScoreOptions& options) {
  const MetricRecord r{"perplexity", Direction::LowerBetter, std::nullopt, base_value, model_value};
  return opt_score(std::span<const MetricRecord>(&r, 1), ratios, profile, options);
}

std::vector<RankedMethod> rank_methods(std::vector<RankedMethod> candidates) {
  if (!candidates.empty()) {
    const WeightProfile& first = candidates.front().result.profile;
    for (const auto& c : candidates) {
      if (!(c.result.profile == first))
        throw DomainError("rank_methods: results computed under different profiles");
    }
  }
  std::sort(candidates.begin(), candidates.end(), [](const RankedMethod& a, const RankedMethod& b) {
    if (a.result.opt != b.result.opt) return a.result.opt < b.result.opt;
    return a.label < b.label;
  });
  return candidates;
}

}  // namespace clab
