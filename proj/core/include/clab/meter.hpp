#pragma once

// Wall-time and energy measurement. Energy comes from a pluggable source:
// a scripted synthetic source for deterministic runs, a constant-power model,
// or a cumulative microjoule counter file.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

namespace clab {

inline constexpr double kJoulesPerKwh = 3.6e6;
inline constexpr double kDefaultCarbonIntensity = 475.0;  // g CO2-eq per kWh

enum class SourceKind { SyntheticClock, PowerModel, CounterFile };

std::string_view to_string(SourceKind k);

struct ResourceRecord {
  double wall_time_s = 0.0;
  double energy_kwh = 0.0;
  double carbon_g = 0.0;
  int runs = 0;
  SourceKind source = SourceKind::SyntheticClock;

  bool operator==(const ResourceRecord&) const = default;
};

class Clock {
 public:
  virtual ~Clock() = default;
  virtual double now() = 0;  // seconds
};

class SteadyClock final : public Clock {
 public:
  double now() override;
};

/// Time only moves when told to.
class ManualClock final : public Clock {
 public:
  double now() override { return t_; }
  void advance(double seconds);

 private:
  double t_ = 0.0;
};

class EnergySource {
 public:
  virtual ~EnergySource() = default;
  virtual SourceKind kind() const = 0;
  virtual void begin(Clock& clock) = 0;
  /// Joules consumed since the matching begin().
  virtual double end(Clock& clock) = 0;
};

/// Replays scripted per-run energy (J) and duration (s) deltas, cycling when
/// exhausted. Also acts as its own clock: time advances by the scripted
/// duration at end().
class SyntheticClock final : public EnergySource, public Clock {
 public:
  explicit SyntheticClock(std::vector<double> joules, std::vector<double> seconds = {0.0});

  SourceKind kind() const override { return SourceKind::SyntheticClock; }
  void begin(Clock&) override {}
  double end(Clock&) override;
  double now() override { return t_; }

 private:
  std::vector<double> joules_, seconds_;
  std::size_t next_ = 0;
  double t_ = 0.0;
};

/// energy = watts * elapsed seconds on the supplied clock.
class PowerModel final : public EnergySource {
 public:
  explicit PowerModel(double watts);
  SourceKind kind() const override { return SourceKind::PowerModel; }
  void begin(Clock& clock) override;
  double end(Clock& clock) override;
  double watts() const { return watts_; }

 private:
  double watts_;
  double start_ = 0.0;
};

/// Reads a cumulative microjoule counter (one decimal integer per file).
class CounterFile final : public EnergySource {
 public:
  CounterFile(std::filesystem::path path, std::uint64_t wrap_max_uj);
  SourceKind kind() const override { return SourceKind::CounterFile; }
  void begin(Clock& clock) override;
  double end(Clock& clock) override;

 private:
  std::filesystem::path path_;
  std::uint64_t wrap_;
  std::uint64_t start_ = 0;
};

/// Parsed form of "synthetic", "power:<watts>" or "counter:<path>,<wrap>".
struct EnergySourceSpec {
  SourceKind kind = SourceKind::SyntheticClock;
  double watts = 0.0;
  std::string path;
  std::uint64_t wrap_max_uj = 0;

  static EnergySourceSpec parse(std::string_view text);
  std::string str() const;
};

/// Builds a PowerModel or CounterFile. Synthetic sources are scripted by the
/// caller, so asking for one here is a DomainError.
std::unique_ptr<EnergySource> make_energy_source(const EnergySourceSpec& spec);

std::uint64_t read_counter_file(const std::filesystem::path& path);
std::uint64_t counter_delta(std::uint64_t previous, std::uint64_t current, std::uint64_t wrap_max);
double carbon_estimate(double energy_kwh, double intensity_g_per_kwh);

struct MeasureOptions {
  int repetitions = 30;
  double carbon_intensity = kDefaultCarbonIntensity;
};

/// Runs `work` repetitions times back to back, accumulating time and energy.
/// Only one measurement may be active per process.
ResourceRecord measure(EnergySource& source, Clock& clock, const std::function<void()>& work,
                       const MeasureOptions& options = {});

/// Uses the source as its clock when it is one (SyntheticClock), otherwise a
/// steady clock.
ResourceRecord measure(EnergySource& source, const std::function<void()>& work, const MeasureOptions& options = {});

/// A sequence of measurements sharing one source and clock.
class Meter {
 public:
  Meter(EnergySource& source, Clock& clock, MeasureOptions options = {});

  ResourceRecord measure(const std::function<void()>& work);
  /// Field-wise sum of every record so far; carbon recomputed from the energy.
  const ResourceRecord& total() const { return total_; }

 private:
  EnergySource& source_;
  Clock& clock_;
  MeasureOptions options_;
  ResourceRecord total_;
};

}  // namespace clab
