#include "muonseg/transport.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "muonseg/error.hpp"

namespace muonseg {
namespace {

constexpr double kBoundaryNudgeMm = 1e-7;

// Path length along `dir` from `pos` to the next crossing of any bar
// cylinder wall (present or removed), or +inf.
double distance_to_cylinder_wall(const RebarCage& cage, const Vec3& pos, const Vec3& dir,
                                 double max_length) {
  const double a = dir.x() * dir.x() + dir.y() * dir.y();
  if (a < 1e-300) return std::numeric_limits<double>::infinity();
  const double r2 = cage.radius_mm() * cage.radius_mm();
  double best = std::numeric_limits<double>::infinity();
  // Only bars whose footprint can be reached within max_length matter.
  const double reach = std::sqrt(a) * max_length + cage.radius_mm();
  for (int row = 0; row < kCageDim; ++row) {
    for (int col = 0; col < kCageDim; ++col) {
      const Eigen::Vector2d c = cage.center({row, col});
      const double ox = pos.x() - c.x();
      const double oy = pos.y() - c.y();
      if (std::abs(ox) > reach + cage.radius_mm() || std::abs(oy) > reach + cage.radius_mm()) {
        continue;
      }
      const double b = ox * dir.x() + oy * dir.y();
      const double cc = ox * ox + oy * oy - r2;
      const double disc = b * b - a * cc;
      if (disc < 0.0) continue;
      const double sq = std::sqrt(disc);
      for (double t : {(-b - sq) / a, (-b + sq) / a}) {
        if (t > kBoundaryNudgeMm && t < best) best = t;
      }
    }
  }
  return best;
}

Species draw_species(const PhysicsTable& table, Philox& rng) {
  const double u = rng.uniform();
  if (u < table.p_electron) return Species::Electron;
  if (u < table.p_electron + table.p_gamma) return Species::Gamma;
  return Species::Positron;
}

}  // namespace

std::string_view to_string(Species s) {
  switch (s) {
    case Species::Muon: return "mu";
    case Species::Electron: return "e-";
    case Species::Positron: return "e+";
    case Species::Gamma: return "gamma";
  }
  return "?";
}

Species species_from_string(std::string_view s) {
  if (s == "mu") return Species::Muon;
  if (s == "e-") return Species::Electron;
  if (s == "e+") return Species::Positron;
  if (s == "gamma") return Species::Gamma;
  throw ValidationError("unknown species '" + std::string(s) + "'");
}

void DetectorLayout::validate() const {
  for (int p = 0; p < kNumPlanes; ++p) {
    if (is_upper(p) && !(plane_z_mm[p] > kTargetHalfExtentMm)) {
      throw ValidationError("upper detector planes must lie above the target");
    }
    if (!is_upper(p) && !(plane_z_mm[p] < -kTargetHalfExtentMm)) {
      throw ValidationError("lower detector planes must lie below the target");
    }
    if (p > 0 && !(plane_z_mm[p] < plane_z_mm[p - 1])) {
      throw ValidationError("detector planes must be ordered top to bottom");
    }
  }
  if (!(plane_half_size_mm > 0.0) || position_noise_mm < 0.0) {
    throw ValidationError("invalid detector plane size or noise");
  }
}

void PhysicsTable::validate() const {
  if (!(dedx(MaterialKind::Steel) > dedx(MaterialKind::Concrete) &&
        dedx(MaterialKind::Concrete) > dedx(MaterialKind::Air) &&
        dedx(MaterialKind::Air) > 0.0)) {
    throw ValidationError("dE/dx must satisfy steel > concrete > air > 0");
  }
  const double psum = p_electron + p_gamma + p_positron;
  if (std::abs(psum - 1.0) > 1e-9 || p_electron < 0 || p_gamma < 0 || p_positron < 0) {
    throw ValidationError("secondary species probabilities must sum to 1");
  }
  if (secondary_rate_coefficient < 0 || backsplash_fraction < 0 || backsplash_fraction > 1) {
    throw ValidationError("invalid secondary production parameters");
  }
}

double momentum_from_kinetic(double kinetic_mev) {
  return std::sqrt(kinetic_mev * kinetic_mev + 2.0 * kinetic_mev * kMuonMassMev);
}

double highland_theta0(double momentum_mev, double step_length_mm, const Material& mat,
                       double highland_constant_mev) {
  if (!(momentum_mev > 0.0)) throw ValidationError("momentum must be positive");
  if (step_length_mm < 0.0) throw ValidationError("step length must be non-negative");
  if (step_length_mm == 0.0) return 0.0;
  const double energy = std::sqrt(momentum_mev * momentum_mev + kMuonMassMev * kMuonMassMev);
  const double beta_cp = momentum_mev * momentum_mev / energy;
  const double t = step_length_mm / mat.radiation_length_mm;
  const double bracket = std::max(0.0, 1.0 + 0.038 * std::log(t));
  return highland_constant_mev / beta_cp * std::sqrt(t) * bracket;
}

std::vector<PlaneHit> emit_secondaries(const PrimaryCrossings& crossings, std::int64_t n,
                                       std::int64_t first_track_id, const PhysicsTable& table,
                                       const DetectorLayout& layout, Philox& rng) {
  std::vector<PlaneHit> hits;
  if (n <= 0) return hits;
  hits.reserve(static_cast<std::size_t>(n));
  std::int64_t track = first_track_id;
  for (std::int64_t i = 0; i < n; ++i) {
    const bool up = rng.bernoulli(table.backsplash_fraction);
    const int plane = (up ? 0 : 3) + static_cast<int>(rng.below(3));
    const Species species = draw_species(table, rng);
    const double dx = rng.normal(0.0, table.secondary_sigma_xy_mm);
    const double dy = rng.normal(0.0, table.secondary_sigma_xy_mm);
    const double edep = rng.exponential(table.secondary_edep_mean_mev);
    const double dt = rng.normal(0.0, table.secondary_time_sigma_ns);
    const std::int64_t id = track++;
    if (!crossings.reached[plane]) continue;
    const Vec3& c = crossings.position[plane];
    PlaneHit h{plane,   c.x() + dx, c.y() + dy, layout.plane_z_mm[plane],
               species, edep,       crossings.time_ns[plane] + dt, id};
    if (std::abs(h.x_mm) > layout.plane_half_size_mm ||
        std::abs(h.y_mm) > layout.plane_half_size_mm) {
      continue;
    }
    hits.push_back(h);
  }
  return hits;
}

EventRecord propagate_event(const VolumeGeometry& geometry, const BeamSpec& beam,
                            const DetectorLayout& layout, const PhysicsTable& table,
                            std::int64_t event_id, Philox& rng) {
  if (!(beam.direction.z() < 0.0)) throw ValidationError("beam must point downwards");

  EventRecord ev;
  ev.event_id = event_id;

  // Horizontal surfaces where a segment must end: planes, target faces,
  // delamination slab faces and the bottom of the world.
  std::vector<double> stops(layout.plane_z_mm.begin(), layout.plane_z_mm.end());
  stops.push_back(kTargetHalfExtentMm);
  stops.push_back(-kTargetHalfExtentMm);
  if (const auto& slab = geometry.delamination()) {
    stops.push_back(slab->z_center_mm + slab->thickness_mm / 2.0);
    stops.push_back(slab->z_center_mm - slab->thickness_mm / 2.0);
  }
  const double world_bottom =
      *std::min_element(layout.plane_z_mm.begin(), layout.plane_z_mm.end()) - 50.0;
  stops.push_back(world_bottom);
  std::sort(stops.begin(), stops.end(), std::greater<>());

  Vec3 pos(rng.uniform(-beam.xy_half_width_mm, beam.xy_half_width_mm),
           rng.uniform(-beam.xy_half_width_mm, beam.xy_half_width_mm), beam.gun_z_mm);
  Vec3 dir = beam.direction.normalized();
  double kinetic = beam.kinetic_energy_mev;
  double time = 0.0;

  PrimaryCrossings crossings;
  std::int64_t n_secondaries = 0;
  bool exited_target = false;

  while (pos.z() > world_bottom + kBoundaryNudgeMm && !ev.stopped) {
    if (!(dir.z() < 0.0)) break;
    double z_stop = world_bottom;
    for (double s : stops) {
      if (s < pos.z() - kBoundaryNudgeMm) {
        z_stop = s;
        break;
      }
    }
    const double to_stop = (z_stop - pos.z()) / dir.z();
    const bool in_target_band = pos.z() <= kTargetHalfExtentMm + kBoundaryNudgeMm &&
                                z_stop >= -kTargetHalfExtentMm - kBoundaryNudgeMm;
    double length = to_stop;
    bool ends_on_stop = true;
    if (in_target_band) {
      const double wall = distance_to_cylinder_wall(geometry.cage(), pos, dir, to_stop);
      if (wall < to_stop) {
        length = wall;
        ends_on_stop = false;
      }
    }

    const Vec3 mid = pos + dir * (0.5 * length);
    const MaterialKind kind = geometry.material_at(mid);
    const Material& mat = material(kind);
    const bool in_target = VolumeGeometry::inside_target(mid);
    const double dedx_per_mm = table.dedx(kind) / 10.0;

    double seg_length = length;
    if (dedx_per_mm * length >= kinetic) {
      seg_length = kinetic / dedx_per_mm;
      ev.stopped = true;
    }
    const double momentum = momentum_from_kinetic(kinetic);
    const double energy_total = kinetic + kMuonMassMev;
    const double beta = momentum / energy_total;
    const double theta0 =
        highland_theta0(momentum, seg_length, mat, table.highland_constant_mev);

    // Energy loss.
    const double loss = ev.stopped ? kinetic : dedx_per_mm * seg_length;
    ev.true_energy_loss_mev += loss;
    kinetic = ev.stopped ? 0.0 : kinetic - loss;

    if (in_target) n_secondaries += rng.poisson(table.secondary_rate_coefficient * mat.z_eff *
                                                mat.density_g_cm3 * seg_length);

    // One deflection at a uniformly drawn depth within the segment reproduces
    // the angle variance, displacement variance and their correlation of
    // continuous multiple scattering.
    const double u = rng.uniform();
    const double kick_x = rng.normal(0.0, theta0);
    const double kick_y = rng.normal(0.0, theta0);
    if (ev.stopped) {
      pos += dir * seg_length;
      time += seg_length / (beta * kSpeedOfLightMmPerNs);
      if (in_target) ev.primary_path.push_back(pos);
      break;
    }
    pos += dir * (u * seg_length);
    const double ax = std::atan2(dir.x(), -dir.z()) + kick_x;
    const double ay = std::atan2(dir.y(), -dir.z()) + kick_y;
    dir = Vec3(std::tan(ax), std::tan(ay), -1.0).normalized();
    double rest = (1.0 - u) * seg_length;
    if (ends_on_stop) rest = (z_stop - pos.z()) / dir.z();
    pos += dir * rest;
    if (ends_on_stop) pos.z() = z_stop;
    time += (u * seg_length + rest) / (beta * kSpeedOfLightMmPerNs);

    if (ends_on_stop) {
      if (z_stop == kTargetHalfExtentMm) {
        ev.energy_in_mev = kinetic;
        ev.primary_path.push_back(pos);
      } else if (z_stop == -kTargetHalfExtentMm) {
        ev.energy_out_mev = kinetic;
        ev.primary_path.push_back(pos);
        exited_target = true;
      } else if (in_target) {
        ev.primary_path.push_back(pos);
      }
      for (int p = 0; p < kNumPlanes; ++p) {
        if (layout.plane_z_mm[p] == z_stop) {
          crossings.reached[p] = true;
          crossings.position[p] = pos;
          crossings.time_ns[p] = time;
        }
      }
    } else if (in_target) {
      ev.primary_path.push_back(pos);
    }
  }
  if (ev.stopped && ev.energy_in_mev > 0.0 && !exited_target) ev.energy_out_mev = 0.0;

  // Primary hits in plane order.
  for (int p = 0; p < kNumPlanes; ++p) {
    if (!crossings.reached[p]) continue;
    PlaneHit h;
    h.plane_id = p;
    h.x_mm = crossings.position[p].x();
    h.y_mm = crossings.position[p].y();
    if (layout.position_noise_mm > 0.0) {
      h.x_mm += rng.normal(0.0, layout.position_noise_mm);
      h.y_mm += rng.normal(0.0, layout.position_noise_mm);
    }
    h.z_mm = layout.plane_z_mm[p];
    h.species = Species::Muon;
    h.edep_mev = std::max(0.0, rng.normal(table.plane_mip_deposit_mev,
                                          table.plane_deposit_spread_mev));
    h.time_ns = crossings.time_ns[p];
    h.track_id = 1;
    if (std::abs(h.x_mm) <= layout.plane_half_size_mm &&
        std::abs(h.y_mm) <= layout.plane_half_size_mm) {
      ev.hits.push_back(h);
    }
  }

  if (exited_target) {
    ev.n_secondaries = n_secondaries;
    auto secondaries = emit_secondaries(crossings, n_secondaries, 2, table, layout, rng);
    ev.hits.insert(ev.hits.end(), secondaries.begin(), secondaries.end());
  }
  return ev;
}

std::vector<EventRecord> simulate_volume(const VolumeGeometry& geometry, const BeamSpec& beam,
                                         const DetectorLayout& layout, const PhysicsTable& table,
                                         std::uint64_t volume_seed) {
  layout.validate();
  table.validate();
  std::vector<EventRecord> events;
  events.reserve(static_cast<std::size_t>(std::max(0, beam.events_per_volume)));
  for (int i = 0; i < beam.events_per_volume; ++i) {
    Philox rng(volume_seed, static_cast<std::uint64_t>(i));
    events.push_back(propagate_event(geometry, beam, layout, table, i, rng));
  }
  return events;
}

}  // namespace muonseg
