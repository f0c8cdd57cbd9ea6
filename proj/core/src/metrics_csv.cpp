#include "clab/metrics_csv.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include "clab/errors.hpp"

namespace clab {

ResourceRatios MethodEntry::ratios() const {
  try {
    return ResourceRatios::from_measurements(base_time_s, model_time_s, base_energy_kwh, model_energy_kwh);
  } catch (const DomainError& e) {
    throw DomainError(group + ": " + e.what());
  }
}

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

std::vector<std::string_view> split(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  for (;;) {
    const auto comma = line.find(',', start);
    out.push_back(trim(line.substr(start, comma - start)));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

double parse_number(std::string_view field, std::string_view what, std::size_t line) {
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), v);
  if (field.empty() || ec != std::errc{} || ptr != field.data() + field.size() || !std::isfinite(v))
    throw ParseError("bad " + std::string(what) + " '" + std::string(field) + "'", line);
  return v;
}

struct Pending {
  MethodEntry entry;
  bool has_time = false;
  bool has_energy = false;
  std::size_t first_line = 0;
};

}  // namespace

std::vector<MethodEntry> parse_metrics_csv(std::string_view text) {
  std::vector<Pending> groups;
  std::map<std::string, std::size_t, std::less<>> index;
  std::size_t line_no = 0;
  bool header_seen = false;
  std::size_t pos = 0;
  while (pos < text.size()) {
    auto eol = text.find('\n', pos);
    if (eol == std::string_view::npos) eol = text.size();
    const auto line = trim(text.substr(pos, eol - pos));
    pos = eol + 1;
    ++line_no;
    if (line.empty()) continue;
    if (!header_seen) {
      if (line != kMetricsCsvHeader) throw ParseError("expected header '" + std::string(kMetricsCsvHeader) + "'", line_no);
      header_seen = true;
      continue;
    }
    const auto f = split(line);
    if (f.size() != 6) throw ParseError("expected 6 fields, found " + std::to_string(f.size()), line_no);
    if (f[0].empty()) throw ParseError("empty group", line_no);
    if (f[1].empty()) throw ParseError("empty metric", line_no);

    Direction dir;
    if (f[2] == "lower") dir = Direction::LowerBetter;
    else if (f[2] == "higher") dir = Direction::HigherBetter;
    else throw ParseError("direction must be lower or higher, got '" + std::string(f[2]) + "'", line_no);

    std::optional<double> floor;
    if (!f[3].empty()) floor = parse_number(f[3], "random_floor", line_no);
    const double base = parse_number(f[4], "base_value", line_no);
    const double model = parse_number(f[5], "model_value", line_no);

    auto it = index.find(f[0]);
    if (it == index.end()) {
      it = index.emplace(std::string(f[0]), groups.size()).first;
      groups.push_back({});
      groups.back().entry.group = std::string(f[0]);
      groups.back().first_line = line_no;
    }
    Pending& g = groups[it->second];
    const std::string label = g.entry.group + "/" + std::string(f[1]);

    if (f[1] == kTimeMetric || f[1] == kEnergyMetric) {
      const bool is_time = f[1] == kTimeMetric;
      if (dir != Direction::LowerBetter || floor) throw DomainError(label + ": resource rows must be lower with no floor");
      if (!(base > 0.0) || !(model > 0.0)) throw DomainError(label + ": resource values must be > 0");
      bool& seen = is_time ? g.has_time : g.has_energy;
      if (seen) throw DomainError(label + ": duplicate row");
      seen = true;
      (is_time ? g.entry.base_time_s : g.entry.base_energy_kwh) = base;
      (is_time ? g.entry.model_time_s : g.entry.model_energy_kwh) = model;
      continue;
    }
    for (const auto& r : g.entry.records)
      if (r.name == f[1]) throw DomainError(label + ": duplicate row");
    MetricRecord rec{std::string(f[1]), dir, floor, base, model};
    try {
      validate(rec);
    } catch (const BelowRandomFloor& e) {
      throw BelowRandomFloor(label + ": " + e.what());
    } catch (const DomainError& e) {
      throw DomainError(label + ": " + e.what());
    }
    g.entry.records.push_back(std::move(rec));
  }
  if (!header_seen) throw ParseError("empty metrics file", 0);
  if (groups.empty()) throw ParseError("no metric rows", line_no);

  std::vector<MethodEntry> out;
  for (auto& g : groups) {
    if (!g.has_time || !g.has_energy)
      throw DomainError(g.entry.group + ": needs both " + std::string(kTimeMetric) + " and " +
                        std::string(kEnergyMetric) + " rows");
    if (g.entry.records.empty()) throw DomainError(g.entry.group + ": needs at least one quality metric");
    out.push_back(std::move(g.entry));
  }
  return out;
}

std::vector<MethodEntry> ingest_metrics(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_metrics_csv(buf.str());
}

namespace {

std::string num(double v) {
  char b[40];
  std::snprintf(b, sizeof b, "%.17g", v);
  return b;
}

void check_field(const std::string& s) {
  if (s.empty() || s.find_first_of(",\n\r") != std::string::npos)
    throw DomainError("'" + s + "' cannot be written as a CSV field");
}

void write_file(const std::filesystem::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << content;
  if (!out) throw IoError("write failed for " + path.string());
}

}  // namespace

std::string metrics_csv(std::span<const MethodEntry> entries) {
  std::string out(kMetricsCsvHeader);
  out += '\n';
  for (const auto& e : entries) {
    check_field(e.group);
    for (const auto& r : e.records) {
      check_field(r.name);
      out += e.group + ',' + r.name + ',' + std::string(to_string(r.direction)) + ',' +
             (r.random_floor ? num(*r.random_floor) : "") + ',' + num(r.base_value) + ',' + num(r.model_value) + '\n';
    }
    out += e.group + ",time_s,lower,," + num(e.base_time_s) + ',' + num(e.model_time_s) + '\n';
    out += e.group + ",energy_kwh,lower,," + num(e.base_energy_kwh) + ',' + num(e.model_energy_kwh) + '\n';
  }
  return out;
}

void write_metrics_csv(std::span<const MethodEntry> entries, const std::filesystem::path& path) {
  write_file(path, metrics_csv(entries));
}

const OptResult& OptTable::at(std::string_view method, std::string_view profile) const {
  const auto m = std::find(methods.begin(), methods.end(), method);
  const auto p = std::find_if(profiles.begin(), profiles.end(), [&](const auto& w) { return w.name == profile; });
  if (m == methods.end() || p == profiles.end())
    throw DomainError("no opt entry for " + std::string(method) + " / " + std::string(profile));
  return results[static_cast<std::size_t>(m - methods.begin())][static_cast<std::size_t>(p - profiles.begin())];
}

OptTable score_report(std::span<const MethodEntry> entries, std::span<const WeightProfile> profiles,
                      const ScoreOptions& options) {
  if (profiles.empty()) throw DomainError("no weight profiles to score with");
  OptTable t;
  t.profiles.assign(profiles.begin(), profiles.end());
  for (const auto& e : entries) {
    if (std::find(t.methods.begin(), t.methods.end(), e.group) != t.methods.end())
      throw DomainError("duplicate method " + e.group);
    const auto ratios = e.ratios();
    std::vector<OptResult> row;
    for (const auto& p : profiles) row.push_back(opt_score(e.records, ratios, p, options));
    t.methods.push_back(e.group);
    t.results.push_back(std::move(row));
  }
  for (std::size_t p = 0; p < profiles.size(); ++p) {
    std::vector<RankedMethod> c;
    for (std::size_t m = 0; m < t.methods.size(); ++m) c.push_back({t.methods[m], t.results[m][p]});
    t.rankings.push_back(rank_methods(std::move(c)));
  }
  return t;
}

std::string plot_data_csv(const OptTable& table) {
  if (table.empty()) throw DomainError("opt table is empty");
  std::string out = "method,profile,opt\n";
  for (std::size_t p = 0; p < table.profiles.size(); ++p) {
    check_field(table.profiles[p].name);
    for (const auto& r : table.rankings[p]) {
      check_field(r.label);
      out += r.label + ',' + table.profiles[p].name + ',' + num(r.result.opt) + '\n';
    }
  }
  return out;
}

void emit_plot_data(const OptTable& table, const std::filesystem::path& path) {
  const auto content = plot_data_csv(table);
  write_file(path, content);
}

std::string format_opt_table(const OptTable& table) {
  std::size_t width = 6;
  for (const auto& m : table.methods) width = std::max(width, m.size());
  std::ostringstream out;
  char cell[64];
  out << std::string(width, ' ');
  for (const auto& p : table.profiles) {
    std::snprintf(cell, sizeof cell, "  %14s", p.name.c_str());
    out << cell;
  }
  out << '\n';
  for (std::size_t m = 0; m < table.methods.size(); ++m) {
    out << table.methods[m] << std::string(width - table.methods[m].size(), ' ');
    for (const auto& r : table.results[m]) {
      std::snprintf(cell, sizeof cell, "  %14.6f", r.opt);
      out << cell;
    }
    out << '\n';
  }
  return out.str();
}

}  // namespace clab
