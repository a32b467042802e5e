#include "muonseg/features.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <nlohmann/json.hpp>

#include "muonseg/binary_io.hpp"
#include "muonseg/error.hpp"

namespace muonseg {
namespace {

Vec3 point_at_z(const FittedTrack& t, double z) {
  return t.point + t.direction * ((z - t.point.z()) / t.direction.z());
}

double sample_std(std::span<const double> v) {
  if (v.size() < 2) return 0.0;
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

// Per-voxel running sums for one volume.
struct Accumulator {
  std::vector<double> s1_sum = std::vector<double>((kStream1Channels - 1) * kGridVoxels, 0.0);
  std::vector<double> s2_sum = std::vector<double>((kStream2Channels - 1) * kGridVoxels, 0.0);
  std::vector<std::int64_t> count = std::vector<std::int64_t>(kGridVoxels, 0);
  std::vector<std::int64_t> secondary_hits = std::vector<std::int64_t>(kGridVoxels, 0);

  void add(const EventFeatures& f) {
    for (int c = 0; c < kStream1Channels - 1; ++c) {
      s1_sum[static_cast<std::size_t>(c) * kGridVoxels + f.voxel] += f.stream1[c];
    }
    for (int c = 0; c < kStream2Channels - 1; ++c) {
      s2_sum[static_cast<std::size_t>(c) * kGridVoxels + f.voxel] += f.stream2[c];
    }
    ++count[f.voxel];
    secondary_hits[f.voxel] += f.secondary_hits;
  }

  void run(std::span<const EventRecord> events, ExtractionStats* stats) {
    ExtractionStats local;
    for (const EventRecord& ev : events) {
      ++local.simulated;
      EventFeatures f;
      switch (event_features(ev, f)) {
        case EventOutcome::Accepted:
          ++local.accepted;
          add(f);
          break;
        case EventOutcome::MissingHits: ++local.dropped_missing_hits; break;
        case EventOutcome::OutOfGrid: ++local.dropped_out_of_grid; break;
      }
    }
    if (stats) *stats = local;
  }

  std::vector<float> stream1() const {
    std::vector<float> out(static_cast<std::size_t>(kStream1Channels) * kGridVoxels, 0.0f);
    for (int v = 0; v < kGridVoxels; ++v) {
      if (count[v] == 0) continue;
      for (int c = 0; c < kStream1Channels - 1; ++c) {
        out[static_cast<std::size_t>(c) * kGridVoxels + v] = static_cast<float>(
            s1_sum[static_cast<std::size_t>(c) * kGridVoxels + v] / static_cast<double>(count[v]));
      }
      out[static_cast<std::size_t>(kEventCount) * kGridVoxels + v] = static_cast<float>(count[v]);
    }
    return out;
  }

  std::vector<float> stream2() const {
    std::vector<float> out(static_cast<std::size_t>(kStream2Channels) * kGridVoxels, 0.0f);
    for (int v = 0; v < kGridVoxels; ++v) {
      if (count[v] == 0) continue;
      for (int c = 0; c < kStream2Channels - 1; ++c) {
        out[static_cast<std::size_t>(c) * kGridVoxels + v] = static_cast<float>(
            s2_sum[static_cast<std::size_t>(c) * kGridVoxels + v] / static_cast<double>(count[v]));
      }
      out[static_cast<std::size_t>(kSecondaryHitCount) * kGridVoxels + v] =
          static_cast<float>(secondary_hits[v]);
    }
    return out;
  }
};

}  // namespace

std::string channel_name(int c) {
  static const char* s1[] = {"abs_theta_x", "abs_theta_y", "theta_total",
                             "abs_dx",      "abs_dy",      "energy_loss",
                             "track_length_ratio", "primary_edep", "event_count"};
  static const char* stat[] = {"electrons", "gammas", "positrons",
                               "shower_edep", "sigma_xy", "time_spread"};
  if (c < 0 || c >= kTotalChannels) return "invalid";
  if (c < kStream1Channels) return std::string("s1.") + s1[c];
  const int k = c - kStream1Channels;
  if (k < 36) return "s2.plane" + std::to_string(k / 6) + "." + stat[k % 6];
  static const char* agg[] = {"asymmetry", "edep_ratio", "total_secondaries", "secondary_hits"};
  return std::string("s2.") + agg[k - 36];
}

FittedTrack fit_station_track(std::span<const PlaneHit> hits) {
  if (hits.size() != 3) throw ValidationError("station track fit needs exactly 3 hits");
  if (hits[0].z_mm == hits[1].z_mm || hits[0].z_mm == hits[2].z_mm || hits[1].z_mm == hits[2].z_mm) {
    throw ValidationError("station hits must lie on distinct planes");
  }
  double zm = 0.0, xm = 0.0, ym = 0.0;
  for (const PlaneHit& h : hits) {
    zm += h.z_mm;
    xm += h.x_mm;
    ym += h.y_mm;
  }
  const double n = static_cast<double>(hits.size());
  zm /= n;
  xm /= n;
  ym /= n;
  double szz = 0.0, szx = 0.0, szy = 0.0;
  for (const PlaneHit& h : hits) {
    const double dz = h.z_mm - zm;
    szz += dz * dz;
    szx += dz * (h.x_mm - xm);
    szy += dz * (h.y_mm - ym);
  }
  const double bx = szx / szz;
  const double by = szy / szz;
  double ssr = 0.0;
  for (const PlaneHit& h : hits) {
    const double dz = h.z_mm - zm;
    const double rx = h.x_mm - (xm + bx * dz);
    const double ry = h.y_mm - (ym + by * dz);
    ssr += rx * rx + ry * ry;
  }
  FittedTrack t;
  t.point = Vec3(xm, ym, zm);
  t.direction = -Vec3(bx, by, 1.0).normalized();
  t.residual_rms = std::sqrt(ssr / (2.0 * (n - 2.0)));
  return t;
}

PocaResult poca(const FittedTrack& in, const FittedTrack& out) {
  const Vec3& u = in.direction;
  const Vec3& v = out.direction;
  PocaResult r;
  const double sin_angle = u.cross(v).norm();
  r.theta_total = std::atan2(sin_angle, u.dot(v));
  r.theta_x = std::atan2(v.x(), -v.z()) - std::atan2(u.x(), -u.z());
  r.theta_y = std::atan2(v.y(), -v.z()) - std::atan2(u.y(), -u.z());
  if (sin_angle < kParallelSinThreshold) {
    r.parallel = true;
    r.point = point_at_z(in, 0.0);
    // Distance between the two parallel lines.
    const Vec3 w = out.point - r.point;
    r.doca = (w - u * w.dot(u)).norm();
  } else {
    // Cross-product form: no a*c - b*b cancellation at small angles.
    const Vec3 n = u.cross(v);
    const double nn = n.squaredNorm();
    const Vec3 w = out.point - in.point;
    const double s = w.cross(v).dot(n) / nn;
    const double t = w.cross(u).dot(n) / nn;
    const Vec3 p1 = in.point + u * s;
    const Vec3 p2 = out.point + v * t;
    r.point = 0.5 * (p1 + p2);
    r.doca = (p1 - p2).norm();
  }
  r.inside_target = VolumeGeometry::inside_target(r.point);
  return r;
}

std::array<double, kStream2Channels - 1> shower_statistics(const EventRecord& event,
                                                           double primary_edep_mev) {
  std::array<double, kStream2Channels - 1> out{};
  std::array<std::vector<double>, kNumPlanes> xs, ys, ts;
  double secondary_edep = 0.0;
  std::int64_t upper = 0, lower = 0;
  for (const PlaneHit& h : event.hits) {
    if (h.track_id == 1) continue;
    const int base = h.plane_id * kStatsPerPlane;
    switch (h.species) {
      case Species::Electron: out[base + kElectronCount] += 1.0; break;
      case Species::Gamma: out[base + kGammaCount] += 1.0; break;
      case Species::Positron: out[base + kPositronCount] += 1.0; break;
      case Species::Muon: break;
    }
    out[base + kShowerEdep] += h.edep_mev;
    xs[h.plane_id].push_back(h.x_mm);
    ys[h.plane_id].push_back(h.y_mm);
    ts[h.plane_id].push_back(h.time_ns);
    secondary_edep += h.edep_mev;
    (DetectorLayout::is_upper(h.plane_id) ? upper : lower) += 1;
  }
  for (int p = 0; p < kNumPlanes; ++p) {
    const std::size_t n = xs[p].size();
    if (n >= 2) {
      double cx = 0.0, cy = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        cx += xs[p][i];
        cy += ys[p][i];
      }
      cx /= static_cast<double>(n);
      cy /= static_cast<double>(n);
      std::vector<double> radii(n);
      for (std::size_t i = 0; i < n; ++i) radii[i] = std::hypot(xs[p][i] - cx, ys[p][i] - cy);
      out[p * kStatsPerPlane + kSigmaXY] = sample_std(radii);
    }
    out[p * kStatsPerPlane + kTimeSpread] = sample_std(ts[p]);
  }
  const std::int64_t total = upper + lower;
  out[kShowerAsymmetry] =
      total > 0 ? static_cast<double>(lower - upper) / static_cast<double>(total) : 0.0;
  out[kEdepRatio] = secondary_edep / (primary_edep_mev + kEdepRatioEpsilonMev);
  out[kTotalSecondaries] = static_cast<double>(total);
  return out;
}

EventOutcome event_features(const EventRecord& event, EventFeatures& out) {
  std::vector<PlaneHit> upper, lower;
  double primary_edep = 0.0;
  for (const PlaneHit& h : event.hits) {
    if (h.track_id != 1) continue;
    primary_edep += h.edep_mev;
    (DetectorLayout::is_upper(h.plane_id) ? upper : lower).push_back(h);
  }
  if (upper.size() != 3 || lower.size() != 3) return EventOutcome::MissingHits;
  const FittedTrack in = fit_station_track(upper);
  const FittedTrack outgoing = fit_station_track(lower);
  out.poca = poca(in, outgoing);
  out.voxel = voxel_of(out.poca.point);
  if (out.voxel < 0) return EventOutcome::OutOfGrid;

  const Vec3 entry = point_at_z(in, kTargetHalfExtentMm);
  const Vec3 exit = point_at_z(outgoing, -kTargetHalfExtentMm);
  const Vec3 projected = point_at_z(in, -kTargetHalfExtentMm);
  const double chord = (entry - exit).norm();
  const double path = (entry - out.poca.point).norm() + (out.poca.point - exit).norm();

  out.stream1[kAbsThetaX] = std::abs(out.poca.theta_x);
  out.stream1[kAbsThetaY] = std::abs(out.poca.theta_y);
  out.stream1[kThetaTotal] = out.poca.theta_total;
  out.stream1[kAbsDx] = std::abs(exit.x() - projected.x());
  out.stream1[kAbsDy] = std::abs(exit.y() - projected.y());
  out.stream1[kEnergyLoss] = event.energy_in_mev - event.energy_out_mev;
  out.stream1[kTrackLengthRatio] = chord > 0.0 ? std::max(1.0, path / chord) : 1.0;
  out.stream1[kPrimaryEdep] = primary_edep;
  out.stream2 = shower_statistics(event, primary_edep);
  out.secondary_hits = static_cast<std::int64_t>(out.stream2[kTotalSecondaries]);
  return EventOutcome::Accepted;
}

FeatureVolume::FeatureVolume()
    : stream1(static_cast<std::size_t>(kStream1Channels) * kGridVoxels, 0.0f),
      stream2(static_cast<std::size_t>(kStream2Channels) * kGridVoxels, 0.0f) {}

float FeatureVolume::channel_value(int c, int voxel) const {
  return c < kStream1Channels ? s1(c, voxel) : s2(c - kStream1Channels, voxel);
}

float& FeatureVolume::channel_value(int c, int voxel) {
  return c < kStream1Channels ? s1(c, voxel) : s2(c - kStream1Channels, voxel);
}

std::vector<float> accumulate_stream1(std::span<const EventRecord> events, ExtractionStats* stats) {
  Accumulator acc;
  acc.run(events, stats);
  return acc.stream1();
}

std::vector<float> accumulate_stream2(std::span<const EventRecord> events, ExtractionStats* stats) {
  Accumulator acc;
  acc.run(events, stats);
  return acc.stream2();
}

FeatureVolume extract_features(std::span<const EventRecord> events, ExtractionStats* stats) {
  Accumulator acc;
  acc.run(events, stats);
  FeatureVolume fv;
  fv.stream1 = acc.stream1();
  fv.stream2 = acc.stream2();
  return fv;
}

NormStats compute_norm_stats(std::span<const FeatureVolume> training) {
  if (training.size() < 2) throw ValidationError("normalisation needs at least 2 training volumes");
  NormStats stats;
  const double n = static_cast<double>(training.size()) * kGridVoxels;
  for (int c = 0; c < kTotalChannels; ++c) {
    double sum = 0.0;
    for (const FeatureVolume& fv : training) {
      for (int v = 0; v < kGridVoxels; ++v) sum += fv.channel_value(c, v);
    }
    const double mean = sum / n;
    double ss = 0.0;
    for (const FeatureVolume& fv : training) {
      for (int v = 0; v < kGridVoxels; ++v) {
        const double d = fv.channel_value(c, v) - mean;
        ss += d * d;
      }
    }
    const double sd = std::sqrt(ss / n);
    if (!(sd > 0.0)) {
      throw ValidationError("dead feature channel " + std::to_string(c) + " (" +
                            channel_name(c) + ") has zero variance on the training split");
    }
    stats.mean[c] = mean;
    stats.std[c] = sd;
  }
  return stats;
}

FeatureVolume apply_norm(const FeatureVolume& volume, const NormStats& stats) {
  FeatureVolume out = volume;
  for (int c = 0; c < kTotalChannels; ++c) {
    for (int v = 0; v < kGridVoxels; ++v) {
      out.channel_value(c, v) =
          static_cast<float>((volume.channel_value(c, v) - stats.mean[c]) / stats.std[c]);
    }
  }
  return out;
}

void write_norm_stats(const std::filesystem::path& path, const NormStats& stats) {
  nlohmann::ordered_json j = nlohmann::ordered_json::array();
  for (int c = 0; c < kTotalChannels; ++c) {
    j.push_back({{"channel", c}, {"mean", stats.mean[c]}, {"std", stats.std[c]}});
  }
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw RuntimeError("cannot open " + path.string() + " for writing");
  out << j.dump(2) << '\n';
}

NormStats read_norm_stats(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw RuntimeError("cannot open " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("invalid norm stats JSON " + path.string() + ": " + e.what());
  }
  if (!j.is_array() || j.size() != kTotalChannels) {
    throw ValidationError("norm stats must list 49 channels: " + path.string());
  }
  NormStats stats;
  std::array<bool, kTotalChannels> seen{};
  for (const auto& e : j) {
    const int c = e.at("channel").get<int>();
    if (c < 0 || c >= kTotalChannels || seen[c]) {
      throw ValidationError("bad channel index in " + path.string());
    }
    seen[c] = true;
    stats.mean[c] = e.at("mean").get<double>();
    stats.std[c] = e.at("std").get<double>();
    if (!(stats.std[c] > 0.0)) throw ValidationError("non-positive std in " + path.string());
  }
  return stats;
}

void write_feature_file(const std::filesystem::path& path, std::span<const float> data,
                        int n_channels) {
  if (data.size() != static_cast<std::size_t>(n_channels) * kGridVoxels) {
    throw ValidationError("feature buffer size does not match channel count");
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw RuntimeError("cannot open " + path.string() + " for writing");
  binio::write_magic(out, "MVFT");
  binio::write<std::uint32_t>(out, 1);
  binio::write<std::uint32_t>(out, static_cast<std::uint32_t>(n_channels));
  for (int i = 0; i < 3; ++i) binio::write<std::uint32_t>(out, kGridDim);
  out.write(reinterpret_cast<const char*>(data.data()),
            static_cast<std::streamsize>(data.size() * sizeof(float)));
  if (!out) throw RuntimeError("failed writing " + path.string());
}

std::vector<float> read_feature_file(const std::filesystem::path& path, int expected_channels) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw RuntimeError("cannot open " + path.string());
  binio::expect_magic(in, "MVFT");
  if (binio::read<std::uint32_t>(in, "version") != 1) {
    throw ValidationError("unsupported feature file version in " + path.string());
  }
  const auto channels = binio::read<std::uint32_t>(in, "n_channels");
  if (static_cast<int>(channels) != expected_channels) {
    throw ValidationError("expected " + std::to_string(expected_channels) + " channels in " +
                          path.string());
  }
  for (int i = 0; i < 3; ++i) {
    if (binio::read<std::uint32_t>(in, "dims") != kGridDim) {
      throw ValidationError("feature dims must be 20x20x20 in " + path.string());
    }
  }
  std::vector<float> data(static_cast<std::size_t>(channels) * kGridVoxels);
  in.read(reinterpret_cast<char*>(data.data()),
          static_cast<std::streamsize>(data.size() * sizeof(float)));
  if (!in) throw ValidationError("truncated feature file " + path.string());
  return data;
}

void flip_channels(std::span<float> data, int n_channels, int axis) {
  for (int c = 0; c < n_channels; ++c) {
    float* base = data.data() + static_cast<std::size_t>(c) * kGridVoxels;
    for (int z = 0; z < kGridDim; ++z) {
      for (int y = 0; y < kGridDim; ++y) {
        for (int x = 0; x < kGridDim; ++x) {
          int xx = x, yy = y, zz = z;
          if (axis == 0) {
            if (x >= kGridDim / 2) continue;
            xx = kGridDim - 1 - x;
          } else if (axis == 1) {
            if (y >= kGridDim / 2) continue;
            yy = kGridDim - 1 - y;
          } else {
            if (z >= kGridDim / 2) continue;
            zz = kGridDim - 1 - z;
          }
          std::swap(base[voxel_index(x, y, z)], base[voxel_index(xx, yy, zz)]);
        }
      }
    }
  }
}

}  // namespace muonseg
