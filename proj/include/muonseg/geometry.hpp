#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Geometry>

namespace muonseg {

using Vec3 = Eigen::Vector3d;

enum class MaterialKind : std::uint8_t { Air = 0, Concrete = 1, Steel = 2 };

struct Material {
  MaterialKind kind;
  double density_g_cm3;
  double z_eff;
  double radiation_length_mm;
};

const Material& material(MaterialKind kind);
std::string_view to_string(MaterialKind kind);

// Side length of the cubic target and the voxel grid laid over it.
inline constexpr double kTargetExtentMm = 1000.0;
inline constexpr double kTargetHalfExtentMm = kTargetExtentMm / 2.0;
inline constexpr int kGridDim = 20;
inline constexpr int kGridVoxels = kGridDim * kGridDim * kGridDim;
inline constexpr double kVoxelPitchMm = kTargetExtentMm / kGridDim;
inline constexpr int kCageDim = 7;
inline constexpr int kCageSlots = kCageDim * kCageDim;

// Segmentation label codes.
enum class LabelCode : std::uint8_t {
  Concrete = 0,
  Honeycombing = 1,
  Shear = 2,
  Corrosion = 3,
  Delamination = 4,
  Rebar = 5,
};
inline constexpr int kNumClasses = 6;

struct BarSlot {
  int row = 0;  // y index
  int col = 0;  // x index
  friend auto operator<=>(const BarSlot&, const BarSlot&) = default;
};

class RebarCage {
 public:
  RebarCage(double radius_mm, double spacing_mm, double offset_mm);

  double radius_mm() const { return radius_mm_; }
  double spacing_mm() const { return spacing_mm_; }
  double offset_mm() const { return offset_mm_; }
  bool present(BarSlot slot) const { return present_[index(slot)]; }
  void remove(BarSlot slot) { present_[index(slot)] = false; }
  int present_count() const;
  // Axis position (x, y) of a bar.
  Eigen::Vector2d center(BarSlot slot) const;
  // Slot whose axis is closest to (x, y).
  BarSlot nearest_slot(double x, double y) const;

 private:
  static int index(BarSlot s) { return s.row * kCageDim + s.col; }

  double radius_mm_;
  double spacing_mm_;
  double offset_mm_;
  std::array<bool, kCageSlots> present_;
};

inline constexpr double kDefaultBarRadiusMm = 15.0;
inline constexpr double kDefaultBarSpacingMm = 150.0;
// The cage is shifted by half a voxel in x and y so each bar axis runs through
// a column of voxel centres; with the axis at the origin every bar would sit
// on a voxel boundary and centre-point labelling would miss it.
inline constexpr double kDefaultCageOffsetMm = kVoxelPitchMm / 2.0;

RebarCage build_healthy_cage(double radius_mm = kDefaultBarRadiusMm,
                             double spacing_mm = kDefaultBarSpacingMm,
                             double offset_mm = kDefaultCageOffsetMm);

enum class DefectClass : std::uint8_t {
  Healthy = 0,
  Honeycombing = 1,
  Shear = 2,
  Corrosion = 3,
  Delamination = 4,
};
inline constexpr std::array<DefectClass, 5> kAllDefectClasses = {
    DefectClass::Healthy, DefectClass::Honeycombing, DefectClass::Shear,
    DefectClass::Corrosion, DefectClass::Delamination};

std::string_view to_string(DefectClass c);
DefectClass defect_class_from_string(std::string_view name);
LabelCode label_code(DefectClass c);

struct DelaminationSlab {
  double z_center_mm = 0.0;
  double thickness_mm = 18.0;
};

struct DefectSpec {
  DefectClass cls = DefectClass::Healthy;
  std::uint64_t seed = 0;
  // Only read for Delamination. When unset the slab is centred on a voxel
  // layer drawn from the seed.
  std::optional<double> delamination_z_mm;
  double delamination_thickness_mm = 18.0;
};

class VolumeGeometry {
 public:
  VolumeGeometry(RebarCage cage, DefectSpec defect, std::vector<BarSlot> removed,
                 std::optional<DelaminationSlab> slab);

  const RebarCage& cage() const { return cage_; }
  const DefectSpec& defect() const { return defect_; }
  const std::vector<BarSlot>& removed_bars() const { return removed_; }
  const std::optional<DelaminationSlab>& delamination() const { return slab_; }

  // Steel (present bar) > Air (slab or removed-bar cylinder) > Concrete >
  // Air outside the target.
  MaterialKind material_at(const Vec3& p) const;
  // Label implied by the material at p; Air outside the target maps to 0.
  LabelCode label_at(const Vec3& p) const;

  static bool inside_target(const Vec3& p);

 private:
  enum class Region : std::uint8_t { Outside, Concrete, Bar, RemovedBar, Slab };
  Region region_at(const Vec3& p) const;

  RebarCage cage_;
  DefectSpec defect_;
  std::vector<BarSlot> removed_;
  std::array<bool, kCageSlots> removed_mask_{};
  std::optional<DelaminationSlab> slab_;
};

VolumeGeometry apply_honeycombing(const RebarCage& cage, double fraction,
                                  std::uint64_t seed);
VolumeGeometry apply_shear(const RebarCage& cage, std::uint64_t seed);
VolumeGeometry apply_corrosion(const RebarCage& cage, std::uint64_t seed);
VolumeGeometry apply_delamination(const RebarCage& cage, double z_center_mm,
                                  double thickness_mm, std::uint64_t seed = 0);
VolumeGeometry healthy_volume(const RebarCage& cage, std::uint64_t seed);

inline constexpr double kHoneycombFraction = 0.4;

// Dispatches on spec.cls with the default defect parameters.
VolumeGeometry build_volume(const DefectSpec& spec,
                            const RebarCage& cage = build_healthy_cage());

// Voxel centre of (x, y, z) grid indices, in mm.
Vec3 voxel_center(int x, int y, int z);
inline constexpr int voxel_index(int x, int y, int z) {
  return x + kGridDim * y + kGridDim * kGridDim * z;
}
// Grid index of the voxel containing p, or -1 outside the grid.
int voxel_of(const Vec3& p);

struct LabelGrid {
  std::array<std::uint8_t, kGridVoxels> values{};

  std::uint8_t at(int x, int y, int z) const { return values[voxel_index(x, y, z)]; }
  std::uint8_t& at(int x, int y, int z) { return values[voxel_index(x, y, z)]; }
  std::array<std::int64_t, kNumClasses> histogram() const;
  friend bool operator==(const LabelGrid&, const LabelGrid&) = default;
};

LabelGrid rasterize_labels(const VolumeGeometry& geometry);

// MVLB label file: magic, u32 version, u32 dims[3], 8000 bytes x-fastest.
void write_label_grid(const std::filesystem::path& path, const LabelGrid& grid);
LabelGrid read_label_grid(const std::filesystem::path& path);

// JSON manifest: {class, seed, removed_bars, delamination, ...}.
std::string geometry_manifest_json(const VolumeGeometry& geometry);

}  // namespace muonseg
