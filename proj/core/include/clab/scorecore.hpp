#pragma once

// Resource/quality trade-off scoring.
//
//   opt = Q * (alpha * T_c + beta * E_c)
//
// where T_c and E_c are optimized/base ratios of wall time and energy and Q
// is the mean of per-metric quality ratios raised to kQualityExponent. Every
// ratio is oriented so that > 1 means "worse than base"; lower opt is better.

#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace clab {

inline constexpr double kQualityExponent = 1.5;

/// Fraction of the random-chance score subtracted before forming ratios.
inline constexpr double kRandomFloorFactor = 0.8;

struct WeightProfile {
  std::string name;
  double alpha = 0.5;  // weight on time
  double beta = 0.5;   // weight on energy

  /// Validating constructor: alpha, beta >= 0 and alpha + beta = 1 (1e-12).
  static WeightProfile make(std::string name, double alpha, double beta);

  bool operator==(const WeightProfile&) const = default;
};

const WeightProfile& balanced_profile();
const WeightProfile& energy_focus_profile();
const WeightProfile& runtime_focus_profile();

/// Balanced, Energy Focus, Runtime Focus, in that order.
std::span<const WeightProfile> builtin_profiles();

/// Accepts a built-in name ("balanced", "energy", "energy_focus", "Energy Focus",
/// ...) or an explicit "alpha,beta" pair.
WeightProfile parse_profile(std::string_view spec);

enum class Direction { LowerBetter, HigherBetter };

std::string_view to_string(Direction d);

struct MetricRecord {
  std::string name;
  Direction direction = Direction::LowerBetter;
  std::optional<double> random_floor;  // required iff HigherBetter
  double base_value = 0.0;
  double model_value = 0.0;
};

struct ResourceRatios {
  double t_ratio = 1.0;
  double e_ratio = 1.0;

  /// Forms optimized/base ratios; every input must be > 0.
  static ResourceRatios from_measurements(double base_time, double model_time,
                                          double base_energy, double model_energy);
};

struct OptResult {
  WeightProfile profile;
  double quality_factor = 1.0;
  double cost_factor = 1.0;
  double opt = 1.0;
};

struct ScoreOptions {
  double quality_exponent = kQualityExponent;
};

/// model / base. Throws DomainError unless both are > 0.
double ratio_lower_better(double base, double model);

/// (base - 0.8x) / (model - 0.8x). Throws BelowRandomFloor when either
/// adjusted value is <= 0.
double ratio_higher_better(double base, double model, double floor_x);

/// Validates the record and returns its oriented ratio.
double record_ratio(const MetricRecord& record);

void validate(const MetricRecord& record);

/// (1/i) * sum(ratio_n ^ exponent). Throws DomainError on an empty list.
double aggregate_quality(std::span<const MetricRecord> records, const ScoreOptions& options = {});

OptResult opt_score(double quality_factor, const ResourceRatios& ratios, const WeightProfile& profile);

OptResult opt_score(std::span<const MetricRecord> records, const ResourceRatios& ratios,
                    const WeightProfile& profile, const ScoreOptions& options = {});

/// Single lower-is-better pair (e.g. perplexity); Q = (model/base)^exponent.
OptResult opt_score(double base_value, double model_value, const ResourceRatios& ratios,
                    const WeightProfile& profile, const ScoreOptions& options = {});

struct RankedMethod {
  std::string label;
  OptResult result;
};

/// Ascending opt, ties broken by label. All results must share one profile.
std::vector<RankedMethod> rank_methods(std::vector<RankedMethod> candidates);

}  // namespace clab
