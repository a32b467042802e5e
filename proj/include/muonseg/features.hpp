#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "muonseg/geometry.hpp"
#include "muonseg/transport.hpp"

namespace muonseg {

inline constexpr int kStream1Channels = 9;
inline constexpr int kStream2Channels = 40;
inline constexpr int kTotalChannels = kStream1Channels + kStream2Channels;
inline constexpr double kEdepRatioEpsilonMev = 1e-6;

// Stream 1 channel meaning, in order.
enum Stream1Channel : int {
  kAbsThetaX = 0,
  kAbsThetaY,
  kThetaTotal,
  kAbsDx,
  kAbsDy,
  kEnergyLoss,
  kTrackLengthRatio,
  kPrimaryEdep,
  kEventCount,
};

// Stream 2: plane p, statistic s -> channel 6p + s; then the aggregates.
enum PlaneStat : int {
  kElectronCount = 0,
  kGammaCount,
  kPositronCount,
  kShowerEdep,
  kSigmaXY,
  kTimeSpread,
};
inline constexpr int kStatsPerPlane = 6;
inline constexpr int kShowerAsymmetry = 36;
inline constexpr int kEdepRatio = 37;
inline constexpr int kTotalSecondaries = 38;
inline constexpr int kSecondaryHitCount = 39;

std::string channel_name(int global_channel);

struct FittedTrack {
  Vec3 point;      // on the line, at the mean z of the hits
  Vec3 direction;  // unit, pointing downwards
  double residual_rms = 0.0;
};

// Least-squares line x(z), y(z) through the primary hits of one station.
// Requires exactly 3 hits with distinct z.
FittedTrack fit_station_track(std::span<const PlaneHit> hits);

struct PocaResult {
  Vec3 point;
  double theta_total = 0.0;
  double theta_x = 0.0;  // signed projected angle differences
  double theta_y = 0.0;
  double doca = 0.0;
  bool parallel = false;  // fallback point used
  bool inside_target = false;
};

inline constexpr double kParallelSinThreshold = 1e-9;

PocaResult poca(const FittedTrack& incoming, const FittedTrack& outgoing);

// Per-event values deposited into the voxel grid.
struct EventFeatures {
  int voxel = -1;
  PocaResult poca;
  std::array<double, kStream1Channels - 1> stream1{};  // channels 0..7
  std::array<double, kStream2Channels - 1> stream2{};  // channels 0..38
  std::int64_t secondary_hits = 0;
};

struct ExtractionStats {
  std::int64_t simulated = 0;
  std::int64_t accepted = 0;
  std::int64_t dropped_missing_hits = 0;
  std::int64_t dropped_out_of_grid = 0;
};

enum class EventOutcome { Accepted, MissingHits, OutOfGrid };

// Fits both stations, runs POCA and computes the per-event channel values.
EventOutcome event_features(const EventRecord& event, EventFeatures& out);

// Stream 2 statistics of one event, channels 0..38.
std::array<double, kStream2Channels - 1> shower_statistics(const EventRecord& event,
                                                           double primary_edep_mev);

struct FeatureVolume {
  std::vector<float> stream1;  // 9 x 20^3, channel-major, x fastest
  std::vector<float> stream2;  // 40 x 20^3
  int volume_index = -1;
  std::string label_file;

  FeatureVolume();
  float& s1(int c, int voxel) { return stream1[static_cast<std::size_t>(c) * kGridVoxels + voxel]; }
  float& s2(int c, int voxel) { return stream2[static_cast<std::size_t>(c) * kGridVoxels + voxel]; }
  float s1(int c, int voxel) const { return stream1[static_cast<std::size_t>(c) * kGridVoxels + voxel]; }
  float s2(int c, int voxel) const { return stream2[static_cast<std::size_t>(c) * kGridVoxels + voxel]; }
  // Channel c of the concatenated 49-channel view.
  float channel_value(int c, int voxel) const;
  float& channel_value(int c, int voxel);
};

std::vector<float> accumulate_stream1(std::span<const EventRecord> events,
                                      ExtractionStats* stats = nullptr);
std::vector<float> accumulate_stream2(std::span<const EventRecord> events,
                                      ExtractionStats* stats = nullptr);
// Both streams in one pass over the events.
FeatureVolume extract_features(std::span<const EventRecord> events,
                               ExtractionStats* stats = nullptr);

struct NormStats {
  std::array<double, kTotalChannels> mean{};
  std::array<double, kTotalChannels> std{};
};

NormStats compute_norm_stats(std::span<const FeatureVolume> training);
FeatureVolume apply_norm(const FeatureVolume& volume, const NormStats& stats);

void write_norm_stats(const std::filesystem::path& path, const NormStats& stats);
NormStats read_norm_stats(const std::filesystem::path& path);

// MVFT file: magic, u32 version, u32 n_channels, u32 dims[3], f32 body.
void write_feature_file(const std::filesystem::path& path, std::span<const float> data,
                        int n_channels);
std::vector<float> read_feature_file(const std::filesystem::path& path, int expected_channels);

// Mirror an array of n_channels x 20^3 along one grid axis (0=x, 1=y, 2=z).
void flip_channels(std::span<float> data, int n_channels, int axis);

}  // namespace muonseg
