#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string_view>
#include <vector>

#include "muonseg/geometry.hpp"
#include "muonseg/rng.hpp"

namespace muonseg {

inline constexpr double kMuonMassMev = 105.6583755;
inline constexpr double kSpeedOfLightMmPerNs = 299.792458;
inline constexpr int kNumPlanes = 6;

struct BeamSpec {
  double kinetic_energy_mev = 4000.0;
  Vec3 direction{0.0, 0.0, -1.0};
  double gun_z_mm = 2500.0;
  // Gun positions are uniform over [-w, w]^2.
  double xy_half_width_mm = kTargetHalfExtentMm;
  int events_per_volume = 5000;
};

struct DetectorLayout {
  // Planes 0..2 form the upper station, 3..5 the lower one.
  std::array<double, kNumPlanes> plane_z_mm{750.0, 650.0, 550.0, -550.0, -650.0, -750.0};
  double plane_half_size_mm = 1000.0;
  // Gaussian smearing of recorded primary positions; 0 records exact crossings.
  double position_noise_mm = 0.0;

  void validate() const;
  static bool is_upper(int plane) { return plane < 3; }
};

enum class Species : std::uint8_t { Muon, Electron, Positron, Gamma };
std::string_view to_string(Species s);
Species species_from_string(std::string_view s);

struct PlaneHit {
  int plane_id = 0;
  double x_mm = 0.0;
  double y_mm = 0.0;
  double z_mm = 0.0;
  Species species = Species::Muon;
  double edep_mev = 0.0;
  double time_ns = 0.0;
  std::int64_t track_id = 1;

  friend bool operator==(const PlaneHit&, const PlaneHit&) = default;
};

struct EventRecord {
  std::int64_t event_id = 0;
  std::vector<PlaneHit> hits;
  double true_energy_loss_mev = 0.0;
  double energy_in_mev = 0.0;   // kinetic energy on entering the target
  double energy_out_mev = 0.0;  // kinetic energy on leaving (0 if stopped)
  bool stopped = false;
  std::int64_t n_secondaries = 0;
  std::vector<Vec3> primary_path;

  friend bool operator==(const EventRecord&, const EventRecord&) = default;
};

// Simplified physics constants. Everything except the Highland constant is a
// free calibration of this model.
struct PhysicsTable {
  std::array<double, 3> dedx_mev_per_cm{0.0022, 4.6, 15.7};  // Air, Concrete, Steel
  double highland_constant_mev = 13.6;
  // Expected secondaries per mm per unit (z_eff * density[g/cm3]).
  double secondary_rate_coefficient = 8.0e-5;
  double p_electron = 0.55;
  double p_gamma = 0.35;
  double p_positron = 0.10;
  double secondary_sigma_xy_mm = 30.0;
  double secondary_edep_mean_mev = 2.0;
  double secondary_time_sigma_ns = 0.5;
  // Fraction of target secondaries recorded on the upper station (albedo).
  double backsplash_fraction = 0.08;
  // Mean energy deposit of the primary in one tracking plane and its spread.
  double plane_mip_deposit_mev = 0.3;
  double plane_deposit_spread_mev = 0.05;

  double dedx(MaterialKind k) const { return dedx_mev_per_cm[static_cast<int>(k)]; }
  void validate() const;
};

// RMS projected multiple-scattering angle (Highland).
double highland_theta0(double momentum_mev, double step_length_mm, const Material& mat,
                       double highland_constant_mev = 13.6);

double momentum_from_kinetic(double kinetic_mev);

// Primary crossings of the six planes; `reached[p]` is false below a stop.
struct PrimaryCrossings {
  std::array<bool, kNumPlanes> reached{};
  std::array<Vec3, kNumPlanes> position{};
  std::array<double, kNumPlanes> time_ns{};
};

// Secondary hits for `n` target secondaries. Tracks are numbered from
// first_track_id upwards.
std::vector<PlaneHit> emit_secondaries(const PrimaryCrossings& crossings, std::int64_t n,
                                       std::int64_t first_track_id, const PhysicsTable& table,
                                       const DetectorLayout& layout, Philox& rng);

EventRecord propagate_event(const VolumeGeometry& geometry, const BeamSpec& beam,
                            const DetectorLayout& layout, const PhysicsTable& table,
                            std::int64_t event_id, Philox& rng);

// Events of one volume; event i draws from Philox(volume_seed, i).
std::vector<EventRecord> simulate_volume(const VolumeGeometry& geometry, const BeamSpec& beam,
                                         const DetectorLayout& layout, const PhysicsTable& table,
                                         std::uint64_t volume_seed);

inline std::uint64_t volume_seed(std::uint64_t campaign_seed, std::uint64_t volume_index) {
  return campaign_seed ^ volume_index;
}

}  // namespace muonseg
