#include "muonseg/event_io.hpp"

#include <charconv>
#include <fstream>
#include <map>
#include <sstream>

#include "muonseg/error.hpp"

namespace muonseg {
namespace {

std::vector<std::string_view> split_row(std::string_view line) {
  std::vector<std::string_view> fields;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = line.find(',', start);
    if (comma == std::string_view::npos) {
      fields.push_back(line.substr(start));
      break;
    }
    fields.push_back(line.substr(start, comma - start));
    start = comma + 1;
  }
  return fields;
}

template <typename T>
T parse_field(std::string_view field, const std::string& where) {
  T value{};
  const auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), value);
  if (ec != std::errc() || ptr != field.data() + field.size()) {
    throw ValidationError("malformed field '" + std::string(field) + "' at " + where);
  }
  return value;
}

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw RuntimeError("cannot open " + path.string() + " for writing");
  return out;
}

}  // namespace

std::string format_double(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

void write_hit_csv(const std::filesystem::path& path, const std::vector<EventRecord>& events) {
  auto out = open_out(path);
  out << kHitCsvHeader << '\n';
  for (const EventRecord& ev : events) {
    for (const PlaneHit& h : ev.hits) {
      out << ev.event_id << ',' << h.track_id << ',' << h.plane_id << ',' << format_double(h.x_mm)
          << ',' << format_double(h.y_mm) << ',' << format_double(h.z_mm) << ','
          << to_string(h.species) << ',' << format_double(h.edep_mev) << ','
          << format_double(h.time_ns) << '\n';
    }
  }
  if (!out) throw RuntimeError("failed writing " + path.string());
}

void write_event_summary_csv(const std::filesystem::path& path,
                             const std::vector<EventRecord>& events) {
  auto out = open_out(path);
  out << kEventSummaryHeader << '\n';
  for (const EventRecord& ev : events) {
    out << ev.event_id << ',' << format_double(ev.energy_in_mev) << ','
        << format_double(ev.energy_out_mev) << ','
        << format_double(ev.energy_in_mev - ev.energy_out_mev) << ','
        << format_double(ev.true_energy_loss_mev) << ',' << ev.n_secondaries << ','
        << (ev.stopped ? 1 : 0) << '\n';
  }
  if (!out) throw RuntimeError("failed writing " + path.string());
}

std::vector<EventRecord> read_events(const std::filesystem::path& hit_csv,
                                     const std::filesystem::path& summary_csv) {
  std::map<std::int64_t, EventRecord> by_id;

  {
    std::ifstream in(summary_csv);
    if (!in) throw RuntimeError("cannot open " + summary_csv.string());
    std::string line;
    if (!std::getline(in, line) || line != kEventSummaryHeader) {
      throw ValidationError("bad header in " + summary_csv.string());
    }
    for (int lineno = 2; std::getline(in, line); ++lineno) {
      if (line.empty()) continue;
      const std::string where = summary_csv.string() + ":" + std::to_string(lineno);
      const auto f = split_row(line);
      if (f.size() != 7) throw ValidationError("expected 7 fields at " + where);
      EventRecord ev;
      ev.event_id = parse_field<std::int64_t>(f[0], where);
      ev.energy_in_mev = parse_field<double>(f[1], where);
      ev.energy_out_mev = parse_field<double>(f[2], where);
      ev.true_energy_loss_mev = parse_field<double>(f[4], where);
      ev.n_secondaries = parse_field<std::int64_t>(f[5], where);
      ev.stopped = parse_field<int>(f[6], where) != 0;
      if (!by_id.emplace(ev.event_id, ev).second) {
        throw ValidationError("duplicate event id at " + where);
      }
    }
  }

  std::ifstream in(hit_csv);
  if (!in) throw RuntimeError("cannot open " + hit_csv.string());
  std::string line;
  if (!std::getline(in, line) || line != kHitCsvHeader) {
    throw ValidationError("bad header in " + hit_csv.string());
  }
  for (int lineno = 2; std::getline(in, line); ++lineno) {
    if (line.empty()) continue;
    const std::string where = hit_csv.string() + ":" + std::to_string(lineno);
    const auto f = split_row(line);
    if (f.size() != 9) throw ValidationError("expected 9 fields at " + where);
    const auto id = parse_field<std::int64_t>(f[0], where);
    PlaneHit h;
    h.track_id = parse_field<std::int64_t>(f[1], where);
    h.plane_id = parse_field<int>(f[2], where);
    h.x_mm = parse_field<double>(f[3], where);
    h.y_mm = parse_field<double>(f[4], where);
    h.z_mm = parse_field<double>(f[5], where);
    h.species = species_from_string(f[6]);
    h.edep_mev = parse_field<double>(f[7], where);
    h.time_ns = parse_field<double>(f[8], where);
    if (h.plane_id < 0 || h.plane_id >= kNumPlanes) {
      throw ValidationError("plane id out of range at " + where);
    }
    auto it = by_id.find(id);
    if (it == by_id.end()) throw ValidationError("hit for unknown event at " + where);
    it->second.hits.push_back(h);
  }

  std::vector<EventRecord> events;
  events.reserve(by_id.size());
  for (auto& [id, ev] : by_id) events.push_back(std::move(ev));
  return events;
}

}  // namespace muonseg
