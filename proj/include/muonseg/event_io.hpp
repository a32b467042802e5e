#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "muonseg/transport.hpp"

namespace muonseg {

inline constexpr const char* kHitCsvHeader =
    "event_id,track_id,plane_id,x_mm,y_mm,z_mm,species,edep_mev,time_ns";
inline constexpr const char* kEventSummaryHeader =
    "event_id,energy_in_mev,energy_out_mev,energy_loss_mev,true_energy_loss_mev,"
    "n_secondaries,stopped";

// Hit-level CSV: one row per plane hit, events in id order.
void write_hit_csv(const std::filesystem::path& path, const std::vector<EventRecord>& events);
// Summary CSV: one row per event with the primary's energy bookkeeping.
void write_event_summary_csv(const std::filesystem::path& path,
                             const std::vector<EventRecord>& events);

// Reassembles events from the two CSVs. Every event listed in the summary is
// returned, including events with no hits. Malformed rows throw
// ValidationError naming the file and line.
std::vector<EventRecord> read_events(const std::filesystem::path& hit_csv,
                                     const std::filesystem::path& summary_csv);

// Shortest round-trip decimal form of a double.
std::string format_double(double v);

}  // namespace muonseg
