#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "../common/label_oracle.hpp"
#include "muonseg/error.hpp"
#include "muonseg/geometry.hpp"

using namespace muonseg;

TEST(Cage, CountsAndExtent) {
  const RebarCage centred = build_healthy_cage(15.0, 150.0, 0.0);
  EXPECT_EQ(centred.present_count(), 49);
  EXPECT_DOUBLE_EQ(centred.center({0, 0}).x(), -450.0);
  EXPECT_DOUBLE_EQ(centred.center({6, 6}).y(), 450.0);
  EXPECT_EQ(build_healthy_cage(0.1, 150.0).present_count(), 49);
  EXPECT_THROW(build_healthy_cage(15.0, 200.0, 0.0), ValidationError);
  // Default cage is shifted half a voxel so axes run through voxel centres.
  const RebarCage cage = build_healthy_cage();
  EXPECT_DOUBLE_EQ(cage.center({3, 3}).x(), 25.0);
}

TEST(Honeycombing, RemovesRoundedFractionDeterministically) {
  const RebarCage cage = build_healthy_cage();
  const auto a = apply_honeycombing(cage, 0.4, 11);
  const auto b = apply_honeycombing(cage, 0.4, 11);
  EXPECT_EQ(a.removed_bars().size(), 20u);
  EXPECT_EQ(a.removed_bars(), b.removed_bars());
  EXPECT_EQ(a.cage().present_count(), 29);
  EXPECT_EQ(apply_honeycombing(cage, 0.011, 3).removed_bars().size(), 1u);
  EXPECT_NE(apply_honeycombing(cage, 0.4, 12).removed_bars(), a.removed_bars());
  EXPECT_THROW(apply_honeycombing(cage, 0.0, 1), ValidationError);
  EXPECT_THROW(apply_honeycombing(cage, 1.0, 1), ValidationError);
}

TEST(Shear, RemovesDiagonalBand) {
  const auto g = apply_shear(build_healthy_cage(), 0);
  EXPECT_EQ(g.removed_bars().size(), 19u);
  EXPECT_EQ(g.cage().present_count(), 30);
  for (int i : {0, 3, 6}) EXPECT_FALSE(g.cage().present({i, i}));
  EXPECT_TRUE(g.cage().present({0, 6}));
}

TEST(Corrosion, NineBarCornerBlocks) {
  std::set<std::pair<int, int>> all;
  std::set<std::vector<BarSlot>> distinct;
  for (std::uint64_t seed = 0; seed < 64; ++seed) {
    const auto g = apply_corrosion(build_healthy_cage(), seed);
    ASSERT_EQ(g.removed_bars().size(), 9u);
    EXPECT_EQ(g.removed_bars(), apply_corrosion(build_healthy_cage(), seed).removed_bars());
    for (BarSlot s : g.removed_bars()) all.insert({s.row, s.col});
    distinct.insert(g.removed_bars());
  }
  EXPECT_EQ(distinct.size(), 4u);
  EXPECT_EQ(all.size(), 36u);
  for (auto [r, c] : all) {
    EXPECT_TRUE((r < 3 || r > 3) && (c < 3 || c > 3));
  }
}

TEST(Delamination, SlabPrecedence) {
  const RebarCage cage = build_healthy_cage();
  const auto g = apply_delamination(cage, 0.0, 18.0);
  EXPECT_EQ(g.material_at({0, 0, 0}), MaterialKind::Air);
  EXPECT_EQ(g.material_at({0, 0, 200}), MaterialKind::Concrete);
  const auto axis = cage.center({3, 3});
  EXPECT_EQ(g.material_at({axis.x(), axis.y(), 0}), MaterialKind::Steel);
  EXPECT_THROW(apply_delamination(cage, 495.0, 18.0), ValidationError);
}

TEST(Material, PointQueries) {
  const auto centred = healthy_volume(build_healthy_cage(15.0, 150.0, 0.0), 0);
  EXPECT_EQ(centred.material_at({0, 0, 0}), MaterialKind::Steel);
  EXPECT_EQ(centred.material_at({490, 490, 0}), MaterialKind::Concrete);
  EXPECT_EQ(centred.material_at({0, 0, 2000}), MaterialKind::Air);
  EXPECT_GT(material(MaterialKind::Steel).density_g_cm3, material(MaterialKind::Concrete).density_g_cm3);
}

TEST(Rasterize, MatchesBruteForceForAllClasses) {
  for (DefectClass c : kAllDefectClasses) {
    for (std::uint64_t seed : {1ull, 77ull}) {
      const auto g = build_volume(DefectSpec{c, seed, {}, 18.0});
      EXPECT_EQ(rasterize_labels(g), oracle::brute_force_labels(g)) << to_string(c);
    }
  }
}

TEST(Rasterize, HealthyHas49ColumnsCorrosionBlockDelaminationLayer) {
  const auto h = rasterize_labels(build_volume({DefectClass::Healthy, 1, {}, 18.0}));
  int columns = 0;
  for (int y = 0; y < kGridDim; ++y)
    for (int x = 0; x < kGridDim; ++x) {
      int n = 0;
      for (int z = 0; z < kGridDim; ++z) n += h.at(x, y, z) == 5;
      EXPECT_TRUE(n == 0 || n == kGridDim);
      columns += n == kGridDim;
    }
  EXPECT_EQ(columns, 49);
  EXPECT_EQ(h.histogram()[5], 49 * kGridDim);
  EXPECT_EQ(h.histogram()[0], kGridVoxels - 49 * kGridDim);

  const auto c = rasterize_labels(build_volume({DefectClass::Corrosion, 5, {}, 18.0}));
  EXPECT_EQ(c.histogram()[3], 9 * kGridDim);

  const auto d = rasterize_labels(build_volume({DefectClass::Delamination, 5, {}, 18.0}));
  std::set<int> layers;
  for (int z = 0; z < kGridDim; ++z)
    for (int y = 0; y < kGridDim; ++y)
      for (int x = 0; x < kGridDim; ++x)
        if (d.at(x, y, z) == 4) layers.insert(z);
  EXPECT_EQ(layers.size(), 1u);
  EXPECT_EQ(d.histogram()[4], kGridDim * kGridDim - 49);
}

TEST(LabelFile, RoundTripAndCorruption) {
  const auto dir = std::filesystem::temp_directory_path() / "muonseg_geom_test";
  std::filesystem::create_directories(dir);
  const auto grid = rasterize_labels(build_volume({DefectClass::Shear, 3, {}, 18.0}));
  write_label_grid(dir / "a.mvlb", grid);
  EXPECT_EQ(read_label_grid(dir / "a.mvlb"), grid);
  std::filesystem::resize_file(dir / "a.mvlb", 100);
  EXPECT_THROW(read_label_grid(dir / "a.mvlb"), ValidationError);
  std::ofstream(dir / "b.mvlb") << "garbage";
  EXPECT_THROW(read_label_grid(dir / "b.mvlb"), ValidationError);
  std::filesystem::remove_all(dir);
}

TEST(DefectClass, NamesRoundTrip) {
  for (DefectClass c : kAllDefectClasses) EXPECT_EQ(defect_class_from_string(to_string(c)), c);
  EXPECT_THROW(defect_class_from_string("cracked"), ValidationError);
}
