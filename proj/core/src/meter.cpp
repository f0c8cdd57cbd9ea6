#include "clab/meter.hpp"

#include <atomic>
#include <charconv>
#include <chrono>
#include <cmath>
#include <fstream>
#include <sstream>

#include "clab/errors.hpp"

namespace clab {

std::string_view to_string(SourceKind k) {
  switch (k) {
    case SourceKind::SyntheticClock: return "synthetic";
    case SourceKind::PowerModel: return "power";
    case SourceKind::CounterFile: return "counter";
  }
  return "?";
}

double SteadyClock::now() {
  using namespace std::chrono;
  return duration<double>(steady_clock::now().time_since_epoch()).count();
}

void ManualClock::advance(double seconds) {
  if (!(seconds >= 0.0)) throw DomainError("clock cannot move backwards");
  t_ += seconds;
}

SyntheticClock::SyntheticClock(std::vector<double> joules, std::vector<double> seconds)
    : joules_(std::move(joules)), seconds_(std::move(seconds)) {
  if (joules_.empty() || seconds_.empty()) throw DomainError("synthetic source needs at least one scripted delta");
  for (double j : joules_)
    if (!(j >= 0.0) || !std::isfinite(j)) throw DomainError("synthetic energy deltas must be finite and >= 0");
  for (double s : seconds_)
    if (!(s >= 0.0) || !std::isfinite(s)) throw DomainError("synthetic time deltas must be finite and >= 0");
}

double SyntheticClock::end(Clock&) {
  const double j = joules_[next_ % joules_.size()];
  t_ += seconds_[next_ % seconds_.size()];
  ++next_;
  return j;
}

PowerModel::PowerModel(double watts) : watts_(watts) {
  if (!(watts > 0.0) || !std::isfinite(watts)) throw DomainError("power model needs watts > 0");
}

void PowerModel::begin(Clock& clock) { start_ = clock.now(); }

double PowerModel::end(Clock& clock) { return watts_ * (clock.now() - start_); }

CounterFile::CounterFile(std::filesystem::path path, std::uint64_t wrap_max_uj)
    : path_(std::move(path)), wrap_(wrap_max_uj) {
  if (wrap_ == 0) throw DomainError("counter wrap maximum must be > 0");
}

void CounterFile::begin(Clock&) { start_ = read_counter_file(path_); }

double CounterFile::end(Clock&) {
  const auto now = read_counter_file(path_);
  std::uint64_t delta = 0;
  try {
    delta = counter_delta(start_, now, wrap_);
  } catch (const DomainError& e) {
    throw SourceError(path_.string() + ": " + e.what());
  }
  return static_cast<double>(delta) * 1e-6;
}

std::uint64_t read_counter_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw SourceError("cannot open energy counter " + path.string());
  std::string line;
  std::getline(in, line);
  while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
  std::uint64_t value = 0;
  const auto* first = line.data();
  const auto* last = line.data() + line.size();
  const auto [ptr, ec] = std::from_chars(first, last, value);
  if (line.empty() || ec != std::errc{} || ptr != last)
    throw SourceError("energy counter " + path.string() + " does not hold a decimal integer");
  return value;
}

std::uint64_t counter_delta(std::uint64_t previous, std::uint64_t current, std::uint64_t wrap_max) {
  if (wrap_max == 0) throw DomainError("wrap maximum must be > 0");
  if (previous >= wrap_max || current >= wrap_max)
    throw DomainError("counter value " + std::to_string(std::max(previous, current)) + " is not below wrap maximum " +
                      std::to_string(wrap_max));
  return current >= previous ? current - previous : current + (wrap_max - previous);
}

double carbon_estimate(double energy_kwh, double intensity_g_per_kwh) {
  if (!(energy_kwh >= 0.0) || !(intensity_g_per_kwh >= 0.0))
    throw DomainError("carbon estimate needs non-negative energy and intensity");
  return energy_kwh * intensity_g_per_kwh;
}

EnergySourceSpec EnergySourceSpec::parse(std::string_view text) {
  EnergySourceSpec spec;
  auto fail = [&]() -> EnergySourceSpec {
    throw DomainError("bad energy source '" + std::string(text) +
                      "' (expected synthetic, power:<watts> or counter:<path>,<wrap>)");
  };
  if (text == "synthetic") return spec;
  if (text.starts_with("power:")) {
    spec.kind = SourceKind::PowerModel;
    const std::string num(text.substr(6));
    std::size_t used = 0;
    try {
      spec.watts = std::stod(num, &used);
    } catch (const std::exception&) {
      return fail();
    }
    if (used != num.size() || !(spec.watts > 0.0) || !std::isfinite(spec.watts)) return fail();
    return spec;
  }
  if (text.starts_with("counter:")) {
    spec.kind = SourceKind::CounterFile;
    const auto rest = text.substr(8);
    const auto comma = rest.rfind(',');
    if (comma == std::string_view::npos || comma == 0) return fail();
    spec.path = std::string(rest.substr(0, comma));
    const auto num = rest.substr(comma + 1);
    const auto [ptr, ec] = std::from_chars(num.data(), num.data() + num.size(), spec.wrap_max_uj);
    if (num.empty() || ec != std::errc{} || ptr != num.data() + num.size() || spec.wrap_max_uj == 0) return fail();
    return spec;
  }
  return fail();
}

std::string EnergySourceSpec::str() const {
  switch (kind) {
    case SourceKind::SyntheticClock: return "synthetic";
    case SourceKind::PowerModel: {
      std::ostringstream s;
      s.precision(17);
      s << "power:" << watts;
      return s.str();
    }
    case SourceKind::CounterFile: return "counter:" + path + "," + std::to_string(wrap_max_uj);
  }
  return "?";
}

std::unique_ptr<EnergySource> make_energy_source(const EnergySourceSpec& spec) {
  switch (spec.kind) {
    case SourceKind::PowerModel: return std::make_unique<PowerModel>(spec.watts);
    case SourceKind::CounterFile: return std::make_unique<CounterFile>(spec.path, spec.wrap_max_uj);
    case SourceKind::SyntheticClock: break;
  }
  throw DomainError("synthetic sources are scripted by the caller");
}

namespace {

std::atomic<bool> g_active{false};

class ActiveGuard {
 public:
  ActiveGuard() {
    if (g_active.exchange(true)) throw StateError("a measurement is already active");
  }
  ~ActiveGuard() { g_active.store(false); }
  ActiveGuard(const ActiveGuard&) = delete;
  ActiveGuard& operator=(const ActiveGuard&) = delete;
};

}  // namespace

ResourceRecord measure(EnergySource& source, Clock& clock, const std::function<void()>& work,
                       const MeasureOptions& options) {
  if (options.repetitions < 1) throw DomainError("repetitions must be >= 1");
  if (!(options.carbon_intensity >= 0.0)) throw DomainError("carbon intensity must be >= 0");
  ActiveGuard guard;
  double seconds = 0.0;
  double joules = 0.0;
  for (int r = 0; r < options.repetitions; ++r) {
    const double t0 = clock.now();
    source.begin(clock);
    work();
    joules += source.end(clock);
    seconds += clock.now() - t0;
  }
  ResourceRecord rec;
  rec.wall_time_s = std::max(seconds, 0.0);
  rec.energy_kwh = std::max(joules, 0.0) / kJoulesPerKwh;
  rec.carbon_g = carbon_estimate(rec.energy_kwh, options.carbon_intensity);
  rec.runs = options.repetitions;
  rec.source = source.kind();
  return rec;
}

ResourceRecord measure(EnergySource& source, const std::function<void()>& work, const MeasureOptions& options) {
  if (auto* clock = dynamic_cast<Clock*>(&source)) return measure(source, *clock, work, options);
  SteadyClock clock;
  return measure(source, clock, work, options);
}

Meter::Meter(EnergySource& source, Clock& clock, MeasureOptions options)
    : source_(source), clock_(clock), options_(options) {
  total_.source = source.kind();
}

ResourceRecord Meter::measure(const std::function<void()>& work) {
  const auto rec = clab::measure(source_, clock_, work, options_);
  total_.wall_time_s += rec.wall_time_s;
  total_.energy_kwh += rec.energy_kwh;
  total_.carbon_g = carbon_estimate(total_.energy_kwh, options_.carbon_intensity);
  total_.runs += rec.runs;
  return rec;
}

}  // namespace clab
