#pragma once

// Metric records in CSV form, and scoring of whole method tables.
//
//   group,metric,direction,random_floor,base_value,model_value
//
// Each group is one method compared against its base. The reserved metrics
// time_s and energy_kwh (direction lower) carry the resource measurements;
// every other row is a quality metric.

#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "clab/scorecore.hpp"

namespace clab {

inline constexpr std::string_view kMetricsCsvHeader = "group,metric,direction,random_floor,base_value,model_value";
inline constexpr std::string_view kTimeMetric = "time_s";
inline constexpr std::string_view kEnergyMetric = "energy_kwh";

struct MethodEntry {
  std::string group;
  std::vector<MetricRecord> records;  // quality metrics only
  double base_time_s = 0.0;
  double model_time_s = 0.0;
  double base_energy_kwh = 0.0;
  double model_energy_kwh = 0.0;

  ResourceRatios ratios() const;
};

/// Groups appear in order of first occurrence.
std::vector<MethodEntry> parse_metrics_csv(std::string_view text);
std::vector<MethodEntry> ingest_metrics(const std::filesystem::path& path);

/// Values are written with 17 significant digits so a re-read is exact.
std::string metrics_csv(std::span<const MethodEntry> entries);
void write_metrics_csv(std::span<const MethodEntry> entries, const std::filesystem::path& path);

struct OptTable {
  std::vector<std::string> methods;
  std::vector<WeightProfile> profiles;
  std::vector<std::vector<OptResult>> results;       // [method][profile]
  std::vector<std::vector<RankedMethod>> rankings;   // [profile], best first

  const OptResult& at(std::string_view method, std::string_view profile) const;
  bool empty() const { return methods.empty(); }
};

OptTable score_report(std::span<const MethodEntry> entries, std::span<const WeightProfile> profiles,
                      const ScoreOptions& options = {});

/// method,profile,opt rows, ranking order within each profile.
std::string plot_data_csv(const OptTable& table);
/// Refuses an empty table without touching the filesystem.
void emit_plot_data(const OptTable& table, const std::filesystem::path& path);

/// Human-readable table: one line per method, one column per profile.
std::string format_opt_table(const OptTable& table);

}  // namespace clab
