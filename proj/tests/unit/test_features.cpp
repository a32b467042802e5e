#include <gtest/gtest.h>

#include <filesystem>

#include "muonseg/error.hpp"
#include "muonseg/features.hpp"
#include "muonseg/rng.hpp"

using namespace muonseg;

namespace {

std::vector<PlaneHit> station(const Vec3& point, const Vec3& dir, std::array<int, 3> planes) {
  std::vector<PlaneHit> hits;
  const DetectorLayout layout;
  for (int p : planes) {
    const double z = layout.plane_z_mm[static_cast<std::size_t>(p)];
    const Vec3 at = point + dir * ((z - point.z()) / dir.z());
    PlaneHit h;
    h.plane_id = p;
    h.x_mm = at.x();
    h.y_mm = at.y();
    h.z_mm = z;
    hits.push_back(h);
  }
  return hits;
}

FittedTrack line(const Vec3& p, const Vec3& d) { return {p, d.normalized(), 0.0}; }

// Primary hits of a track bending at `vertex`.
EventRecord bent_event(const Vec3& vertex, const Vec3& din, const Vec3& dout) {
  EventRecord e;
  for (auto& h : station(vertex, din, {0, 1, 2})) e.hits.push_back(h);
  for (auto& h : station(vertex, dout, {3, 4, 5})) e.hits.push_back(h);
  for (auto& h : e.hits) h.edep_mev = 0.25;
  e.energy_in_mev = 4000.0;
  e.energy_out_mev = 3600.0;
  return e;
}

}  // namespace

TEST(TrackFit, VerticalAndSlopedLines) {
  const auto v = fit_station_track(station({0, 0, 750}, {0, 0, -1}, {0, 1, 2}));
  EXPECT_NEAR((v.direction - Vec3(0, 0, -1)).norm(), 0.0, 1e-15);
  EXPECT_NEAR(v.residual_rms, 0.0, 1e-12);
  // x = 0.01 (750 - z)  ->  dx/dz = -0.01
  const auto s = fit_station_track(station({0, 0, 750}, {0.01, 0, -1}, {0, 1, 2}));
  EXPECT_NEAR(s.direction.x() / s.direction.z(), -0.01, 1e-12);
  EXPECT_GE(s.residual_rms, 0.0);
  EXPECT_THROW(fit_station_track(station({0, 0, 750}, {0, 0, -1}, {0, 1, 1})), ValidationError);
}

TEST(TrackFit, NoisyResidualTracksNoise) {
  Philox rng(3, 3);
  double sum = 0.0;
  const int trials = 10000;
  for (int i = 0; i < trials; ++i) {
    auto hits = station({0, 0, 0}, {0.02, -0.01, -1}, {0, 1, 2});
    for (auto& h : hits) {
      h.x_mm += rng.normal();
      h.y_mm += rng.normal();
    }
    sum += fit_station_track(hits).residual_rms;
  }
  EXPECT_NEAR(sum / trials, 1.0, 0.5);
}

TEST(Poca, ExactIntersection) {
  const Vec3 x0(100, -50, 10);
  const Vec3 din(0, 0, -1);
  const Vec3 dout(std::sin(0.020), 0, -std::cos(0.020));
  const auto r = poca(line(x0 - din * 300.0, din), line(x0 + dout * 250.0, dout));
  EXPECT_LT((r.point - x0).norm(), 1e-9);
  EXPECT_NEAR(r.theta_total, 0.020, 1e-12);
  EXPECT_NEAR(r.doca, 0.0, 1e-9);
  EXPECT_FALSE(r.parallel);
}

TEST(Poca, ParallelFallbackAndSkewMidpoint) {
  const auto same = poca(line({5, 6, 700}, {0.1, 0, -1}), line({5, 6, 700}, {0.1, 0, -1}));
  EXPECT_TRUE(same.parallel);
  EXPECT_NEAR(same.theta_total, 0.0, 1e-12);
  EXPECT_NEAR(same.point.z(), 0.0, 1e-12);
  EXPECT_NEAR(same.point.x(), 5 + 0.1 * 700, 1e-9);

  // Two lines in the planes y = 0 and y = 2 crossing in projection at the
  // origin: closest points (0,0,0) and (0,2,0), doca 2, midpoint (0,1,0).
  const Vec3 a0(0, 0, 0), da = Vec3(0.6, 0, -0.8);
  const Vec3 b0(0, 2, 0), db = Vec3(-0.6, 0, -0.8);
  const auto s = poca(line(a0 - da * 100.0, da), line(b0 + db * 50.0, db));
  EXPECT_NEAR(s.doca, 2.0, 1e-9);
  EXPECT_LT((s.point - Vec3(0, 1, 0)).norm(), 1e-9);
}

TEST(Stream1, SingleEventAndEmpty) {
  EXPECT_EQ(accumulate_stream1({}), std::vector<float>(kStream1Channels * kGridVoxels, 0.0f));
  const Vec3 centre = voxel_center(10, 10, 10);
  const EventRecord e = bent_event(centre, {0, 0, -1}, Vec3(std::sin(0.02), 0, -std::cos(0.02)));
  ExtractionStats stats;
  const auto s1 = accumulate_stream1(std::span<const EventRecord>(&e, 1), &stats);
  const int v = voxel_index(10, 10, 10);
  EXPECT_NEAR(s1[kThetaTotal * kGridVoxels + v], 0.02, 1e-6);
  EXPECT_EQ(s1[kEventCount * kGridVoxels + v], 1.0f);
  EXPECT_NEAR(s1[kEnergyLoss * kGridVoxels + v], 400.0, 1e-3);
  EXPECT_NEAR(s1[kPrimaryEdep * kGridVoxels + v], 1.5, 1e-6);
  double others = 0.0;
  for (int c = 0; c < kStream1Channels; ++c)
    for (int u = 0; u < kGridVoxels; ++u)
      if (u != v) others += std::abs(s1[c * kGridVoxels + u]);
  EXPECT_EQ(others, 0.0);
  EXPECT_EQ(stats.accepted, 1);
}

TEST(Stream2, DirectCountsAndSigmaOracle) {
  EventRecord e = bent_event(voxel_center(3, 4, 5), {0, 0, -1}, {0, 0, -1});
  auto empty = shower_statistics(e, 1.5);
  for (double v : empty) EXPECT_EQ(v, 0.0);
  const std::array<std::array<double, 2>, 3> xy{{{10, 0}, {-5, 7}, {2, -9}}};
  for (int i = 0; i < 3; ++i) {
    PlaneHit h;
    h.plane_id = 3;
    h.species = Species::Electron;
    h.track_id = 2 + i;
    h.x_mm = xy[i][0];
    h.y_mm = xy[i][1];
    h.edep_mev = 1.0;
    h.time_ns = 5.0 + i;
    e.hits.push_back(h);
  }
  const auto s = shower_statistics(e, 1.5);
  EXPECT_EQ(s[3 * kStatsPerPlane + kElectronCount], 3.0);
  EXPECT_EQ(s[3 * kStatsPerPlane + kGammaCount], 0.0);
  EXPECT_EQ(s[3 * kStatsPerPlane + kPositronCount], 0.0);
  EXPECT_EQ(s[3 * kStatsPerPlane + kShowerEdep], 3.0);
  EXPECT_EQ(s[kShowerAsymmetry], 1.0);
  EXPECT_NEAR(s[kEdepRatio], 3.0 / (1.5 + 1e-6), 1e-12);
  EXPECT_EQ(s[kTotalSecondaries], 3.0);
  EXPECT_NEAR(s[3 * kStatsPerPlane + kTimeSpread], 1.0, 1e-12);
  // Radii about the centroid (7/3, -2/3), sample standard deviation.
  const double cx = 7.0 / 3.0, cy = -2.0 / 3.0;
  double r[3], m = 0.0;
  for (int i = 0; i < 3; ++i) m += (r[i] = std::hypot(xy[i][0] - cx, xy[i][1] - cy)) / 3.0;
  double ss = 0.0;
  for (double x : r) ss += (x - m) * (x - m);
  EXPECT_NEAR(s[3 * kStatsPerPlane + kSigmaXY], std::sqrt(ss / 2.0), 1e-12);
}

TEST(Extraction, EventConservationOnSimulatedVolume) {
  BeamSpec beam;
  beam.events_per_volume = 400;
  const auto events = simulate_volume(build_volume({DefectClass::Corrosion, 2, {}, 18.0}), beam, {}, {}, 5);
  ExtractionStats st;
  const auto fv = extract_features(events, &st);
  EXPECT_EQ(st.simulated, 400);
  EXPECT_EQ(st.accepted + st.dropped_missing_hits + st.dropped_out_of_grid, st.simulated);
  double count = 0.0;
  for (int v = 0; v < kGridVoxels; ++v) count += fv.s1(kEventCount, v);
  EXPECT_EQ(count, static_cast<double>(st.accepted));
  for (float x : fv.stream1) EXPECT_TRUE(std::isfinite(x));
  for (int v = 0; v < kGridVoxels; ++v) {
    EXPECT_GE(fv.s2(kShowerAsymmetry, v), -1.0f);
    EXPECT_LE(fv.s2(kShowerAsymmetry, v), 1.0f);
    EXPECT_GE(fv.s2(kEdepRatio, v), 0.0f);
    EXPECT_GE(fv.s2(kTotalSecondaries, v), 0.0f);
  }
}

TEST(Extraction, MirroringHitsFlipsFeaturesAlongX) {
  BeamSpec beam;
  beam.events_per_volume = 300;
  auto events = simulate_volume(build_volume({DefectClass::Shear, 2, {}, 18.0}), beam, {}, {}, 8);
  auto fv = extract_features(events);
  for (auto& e : events)
    for (auto& h : e.hits) h.x_mm = -h.x_mm;
  const auto mirrored = extract_features(events);
  flip_channels(fv.stream1, kStream1Channels, 0);
  flip_channels(fv.stream2, kStream2Channels, 0);
  for (std::size_t i = 0; i < fv.stream1.size(); ++i) EXPECT_NEAR(fv.stream1[i], mirrored.stream1[i], 1e-4);
  for (std::size_t i = 0; i < fv.stream2.size(); ++i) EXPECT_NEAR(fv.stream2[i], mirrored.stream2[i], 1e-3);
}

TEST(Normalisation, IdempotentAndDeadChannelGuard) {
  std::vector<FeatureVolume> vols(3);
  Philox rng(1, 1);
  for (auto& fv : vols) {
    for (auto& x : fv.stream1) x = static_cast<float>(rng.normal(2.0, 3.0));
    for (auto& x : fv.stream2) x = static_cast<float>(rng.normal(-1.0, 0.5));
  }
  const NormStats st = compute_norm_stats(vols);
  std::vector<FeatureVolume> normed;
  for (auto& fv : vols) normed.push_back(apply_norm(fv, st));
  const NormStats again = compute_norm_stats(normed);
  for (int c = 0; c < kTotalChannels; ++c) {
    EXPECT_NEAR(again.mean[c], 0.0, 1e-6);
    EXPECT_NEAR(again.std[c], 1.0, 1e-6);
  }
  vols[0].s2(kTimeSpread, 0) = 0.0f;
  for (auto& fv : vols)
    for (int v = 0; v < kGridVoxels; ++v) fv.s1(kTrackLengthRatio, v) = 1.0f;
  EXPECT_THROW(compute_norm_stats(vols), ValidationError);
  EXPECT_THROW(compute_norm_stats(std::span<const FeatureVolume>(vols.data(), 1)), ValidationError);
}

TEST(FeatureFiles, RoundTripAndStatsFile) {
  const auto dir = std::filesystem::temp_directory_path() / "muonseg_feat_test";
  std::filesystem::create_directories(dir);
  std::vector<float> data(static_cast<std::size_t>(kStream1Channels) * kGridVoxels);
  for (std::size_t i = 0; i < data.size(); ++i) data[i] = static_cast<float>(i) * 0.5f;
  write_feature_file(dir / "a.mvft", data, kStream1Channels);
  EXPECT_EQ(read_feature_file(dir / "a.mvft", kStream1Channels), data);
  EXPECT_THROW(read_feature_file(dir / "a.mvft", kStream2Channels), ValidationError);
  NormStats st;
  for (int c = 0; c < kTotalChannels; ++c) {
    st.mean[c] = c * 0.1;
    st.std[c] = 1.0 + c;
  }
  write_norm_stats(dir / "n.json", st);
  const NormStats back = read_norm_stats(dir / "n.json");
  EXPECT_EQ(back.mean, st.mean);
  EXPECT_EQ(back.std, st.std);
  std::filesystem::remove_all(dir);
}
