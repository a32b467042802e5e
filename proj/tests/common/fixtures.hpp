#pragma once

#include <cmath>
#include <vector>

#include "muonseg/geometry.hpp"
#include "muonseg/transport.hpp"

namespace fixture {

using namespace muonseg;

inline std::vector<BarSlot> all_slots() {
  std::vector<BarSlot> s;
  for (int r = 0; r < kCageDim; ++r)
    for (int c = 0; c < kCageDim; ++c) s.push_back({r, c});
  return s;
}

// Solid concrete: every bar removed and shrunk to a negligible radius.
inline VolumeGeometry homogeneous_concrete() {
  return VolumeGeometry(build_healthy_cage(0.01, 150.0, 0.0), DefectSpec{}, all_slots(), {});
}

// Air everywhere except 5 um of concrete at the top and bottom faces.
inline VolumeGeometry nearly_air() {
  DefectSpec spec;
  spec.cls = DefectClass::Delamination;
  return VolumeGeometry(build_healthy_cage(0.01, 150.0, 0.0), spec, all_slots(), DelaminationSlab{0.0, 999.99});
}

// Centred cage (a bar axis at x = y = 0) with a pencil beam down that bar.
inline VolumeGeometry central_steel_column() {
  return healthy_volume(build_healthy_cage(15.0, 150.0, 0.0), 0);
}

inline BeamSpec pencil_beam(int events, double half_width_mm = 5.0) {
  BeamSpec b;
  b.events_per_volume = events;
  b.xy_half_width_mm = half_width_mm;
  return b;
}

// Projected exit-minus-entry angles from the noiseless primary hits of
// planes 1-2 (above) and 3-4 (below).
struct Angles {
  std::vector<double> x, y;
};

inline Angles projected_angles(const std::vector<EventRecord>& events) {
  Angles a;
  for (const EventRecord& e : events) {
    std::array<const PlaneHit*, kNumPlanes> p{};
    for (const PlaneHit& h : e.hits)
      if (h.track_id == 1) p[static_cast<std::size_t>(h.plane_id)] = &h;
    if (!p[1] || !p[2] || !p[3] || !p[4]) continue;
    auto slope = [](const PlaneHit* u, const PlaneHit* v, bool x) {
      return std::atan(((x ? v->x_mm : v->y_mm) - (x ? u->x_mm : u->y_mm)) / (u->z_mm - v->z_mm));
    };
    a.x.push_back(slope(p[3], p[4], true) - slope(p[1], p[2], true));
    a.y.push_back(slope(p[3], p[4], false) - slope(p[1], p[2], false));
  }
  return a;
}

inline double rms(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s / static_cast<double>(v.size()));
}

struct MeanSe {
  double mean = 0.0, se = 0.0;
};

inline MeanSe secondary_multiplicity(const std::vector<EventRecord>& events) {
  double s = 0.0, s2 = 0.0;
  for (const EventRecord& e : events) {
    s += static_cast<double>(e.n_secondaries);
    s2 += static_cast<double>(e.n_secondaries * e.n_secondaries);
  }
  const double n = static_cast<double>(events.size());
  const double m = s / n;
  return {m, std::sqrt(std::max(0.0, s2 / n - m * m) / (n - 1.0))};
}

}  // namespace fixture
