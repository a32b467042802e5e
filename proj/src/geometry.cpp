#include "muonseg/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <nlohmann/json.hpp>

#include "muonseg/binary_io.hpp"
#include "muonseg/error.hpp"
#include "muonseg/rng.hpp"

namespace muonseg {
namespace {

// Radiation lengths from the PDG tables (ordinary concrete, iron, dry air).
constexpr Material kAir{MaterialKind::Air, 0.001205, 7.3, 303900.0};
constexpr Material kConcrete{MaterialKind::Concrete, 2.3, 11.0, 107.0};
constexpr Material kSteel{MaterialKind::Steel, 7.87, 26.0, 17.57};

// Stream ids for the per-purpose substreams of a defect seed.
constexpr std::uint64_t kHoneycombStream = 0x484F4E45ull;
constexpr std::uint64_t kCorrosionStream = 0x434F5252ull;
constexpr std::uint64_t kDelaminationStream = 0x44454C41ull;

}  // namespace

const Material& material(MaterialKind kind) {
  switch (kind) {
    case MaterialKind::Air: return kAir;
    case MaterialKind::Concrete: return kConcrete;
    case MaterialKind::Steel: return kSteel;
  }
  return kAir;
}

std::string_view to_string(MaterialKind kind) {
  switch (kind) {
    case MaterialKind::Air: return "air";
    case MaterialKind::Concrete: return "concrete";
    case MaterialKind::Steel: return "steel";
  }
  return "?";
}

RebarCage::RebarCage(double radius_mm, double spacing_mm, double offset_mm)
    : radius_mm_(radius_mm), spacing_mm_(spacing_mm), offset_mm_(offset_mm) {
  present_.fill(true);
}

int RebarCage::present_count() const {
  return static_cast<int>(std::count(present_.begin(), present_.end(), true));
}

Eigen::Vector2d RebarCage::center(BarSlot slot) const {
  const int half = kCageDim / 2;
  return {offset_mm_ + (slot.col - half) * spacing_mm_,
          offset_mm_ + (slot.row - half) * spacing_mm_};
}

BarSlot RebarCage::nearest_slot(double x, double y) const {
  const int half = kCageDim / 2;
  auto snap = [&](double v) {
    const int i = static_cast<int>(std::lround((v - offset_mm_) / spacing_mm_)) + half;
    return std::clamp(i, 0, kCageDim - 1);
  };
  return {snap(y), snap(x)};
}

RebarCage build_healthy_cage(double radius_mm, double spacing_mm, double offset_mm) {
  if (!(radius_mm > 0.0) || !(spacing_mm > 0.0)) {
    throw ValidationError("rebar radius and spacing must be positive");
  }
  const double reach = std::abs(offset_mm) + (kCageDim / 2) * spacing_mm + radius_mm;
  if (reach > kTargetHalfExtentMm) {
    throw ValidationError("geometry overflow: rebar cage does not fit in the target (" +
                          std::to_string(2.0 * reach) + " mm > " +
                          std::to_string(kTargetExtentMm) + " mm)");
  }
  return RebarCage(radius_mm, spacing_mm, offset_mm);
}

std::string_view to_string(DefectClass c) {
  switch (c) {
    case DefectClass::Healthy: return "healthy";
    case DefectClass::Honeycombing: return "honeycombing";
    case DefectClass::Shear: return "shear";
    case DefectClass::Corrosion: return "corrosion";
    case DefectClass::Delamination: return "delamination";
  }
  return "?";
}

DefectClass defect_class_from_string(std::string_view name) {
  for (DefectClass c : kAllDefectClasses) {
    if (to_string(c) == name) return c;
  }
  throw ValidationError("unknown defect class '" + std::string(name) + "'");
}

LabelCode label_code(DefectClass c) {
  switch (c) {
    case DefectClass::Healthy: return LabelCode::Concrete;
    case DefectClass::Honeycombing: return LabelCode::Honeycombing;
    case DefectClass::Shear: return LabelCode::Shear;
    case DefectClass::Corrosion: return LabelCode::Corrosion;
    case DefectClass::Delamination: return LabelCode::Delamination;
  }
  return LabelCode::Concrete;
}

VolumeGeometry::VolumeGeometry(RebarCage cage, DefectSpec defect,
                               std::vector<BarSlot> removed,
                               std::optional<DelaminationSlab> slab)
    : cage_(cage), defect_(defect), removed_(std::move(removed)), slab_(slab) {
  std::sort(removed_.begin(), removed_.end());
  for (BarSlot s : removed_) {
    if (s.row < 0 || s.row >= kCageDim || s.col < 0 || s.col >= kCageDim) {
      throw ValidationError("removed bar outside the 7x7 cage");
    }
    cage_.remove(s);
    removed_mask_[s.row * kCageDim + s.col] = true;
  }
  if (slab_) {
    const double lo = slab_->z_center_mm - slab_->thickness_mm / 2.0;
    const double hi = slab_->z_center_mm + slab_->thickness_mm / 2.0;
    if (!(slab_->thickness_mm > 0.0) || lo <= -kTargetHalfExtentMm ||
        hi >= kTargetHalfExtentMm) {
      throw ValidationError("delamination slab outside the target extent");
    }
  }
}

bool VolumeGeometry::inside_target(const Vec3& p) {
  return std::abs(p.x()) <= kTargetHalfExtentMm && std::abs(p.y()) <= kTargetHalfExtentMm &&
         std::abs(p.z()) <= kTargetHalfExtentMm;
}

VolumeGeometry::Region VolumeGeometry::region_at(const Vec3& p) const {
  if (!inside_target(p)) return Region::Outside;
  const BarSlot slot = cage_.nearest_slot(p.x(), p.y());
  const Eigen::Vector2d axis = cage_.center(slot);
  const double dx = p.x() - axis.x();
  const double dy = p.y() - axis.y();
  const bool in_cylinder = dx * dx + dy * dy <= cage_.radius_mm() * cage_.radius_mm();
  if (in_cylinder && cage_.present(slot)) return Region::Bar;
  if (in_cylinder && removed_mask_[slot.row * kCageDim + slot.col]) {
    return Region::RemovedBar;
  }
  if (slab_ && std::abs(p.z() - slab_->z_center_mm) <= slab_->thickness_mm / 2.0) {
    return Region::Slab;
  }
  return Region::Concrete;
}

MaterialKind VolumeGeometry::material_at(const Vec3& p) const {
  switch (region_at(p)) {
    case Region::Bar: return MaterialKind::Steel;
    case Region::Concrete: return MaterialKind::Concrete;
    case Region::Outside:
    case Region::RemovedBar:
    case Region::Slab: return MaterialKind::Air;
  }
  return MaterialKind::Air;
}

LabelCode VolumeGeometry::label_at(const Vec3& p) const {
  switch (region_at(p)) {
    case Region::Bar: return LabelCode::Rebar;
    case Region::RemovedBar: return label_code(defect_.cls);
    case Region::Slab: return LabelCode::Delamination;
    case Region::Outside:
    case Region::Concrete: return LabelCode::Concrete;
  }
  return LabelCode::Concrete;
}

VolumeGeometry healthy_volume(const RebarCage& cage, std::uint64_t seed) {
  return VolumeGeometry(cage, DefectSpec{DefectClass::Healthy, seed, {}, 18.0}, {}, {});
}

VolumeGeometry apply_honeycombing(const RebarCage& cage, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction < 1.0)) {
    throw ValidationError("honeycombing fraction must lie in (0, 1)");
  }
  std::vector<BarSlot> candidates;
  for (int r = 0; r < kCageDim; ++r) {
    for (int c = 0; c < kCageDim; ++c) {
      if (cage.present({r, c})) candidates.push_back({r, c});
    }
  }
  // Round half up.
  const auto count = static_cast<std::size_t>(
      std::min<double>(std::floor(fraction * kCageSlots + 0.5), candidates.size()));
  Philox rng(seed, kHoneycombStream);
  // Partial Fisher-Yates: the first `count` entries are a uniform sample.
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t j = i + rng.below(candidates.size() - i);
    std::swap(candidates[i], candidates[j]);
  }
  candidates.resize(count);
  return VolumeGeometry(cage, DefectSpec{DefectClass::Honeycombing, seed, {}, 18.0},
                        std::move(candidates), {});
}

VolumeGeometry apply_shear(const RebarCage& cage, std::uint64_t seed) {
  std::vector<BarSlot> band;
  for (int r = 0; r < kCageDim; ++r) {
    for (int c = 0; c < kCageDim; ++c) {
      if (std::abs(r - c) <= 1 && cage.present({r, c})) band.push_back({r, c});
    }
  }
  return VolumeGeometry(cage, DefectSpec{DefectClass::Shear, seed, {}, 18.0}, std::move(band),
                        {});
}

VolumeGeometry apply_corrosion(const RebarCage& cage, std::uint64_t seed) {
  Philox rng(seed, kCorrosionStream);
  const auto corner = static_cast<int>(rng.below(4));
  const int row0 = (corner / 2) == 0 ? 0 : kCageDim - 3;
  const int col0 = (corner % 2) == 0 ? 0 : kCageDim - 3;
  std::vector<BarSlot> block;
  for (int r = row0; r < row0 + 3; ++r) {
    for (int c = col0; c < col0 + 3; ++c) {
      if (cage.present({r, c})) block.push_back({r, c});
    }
  }
  return VolumeGeometry(cage, DefectSpec{DefectClass::Corrosion, seed, {}, 18.0},
                        std::move(block), {});
}

VolumeGeometry apply_delamination(const RebarCage& cage, double z_center_mm,
                                  double thickness_mm, std::uint64_t seed) {
  DefectSpec spec{DefectClass::Delamination, seed, z_center_mm, thickness_mm};
  return VolumeGeometry(cage, spec, {}, DelaminationSlab{z_center_mm, thickness_mm});
}

VolumeGeometry build_volume(const DefectSpec& spec, const RebarCage& cage) {
  switch (spec.cls) {
    case DefectClass::Healthy: return healthy_volume(cage, spec.seed);
    case DefectClass::Honeycombing: return apply_honeycombing(cage, kHoneycombFraction, spec.seed);
    case DefectClass::Shear: return apply_shear(cage, spec.seed);
    case DefectClass::Corrosion: return apply_corrosion(cage, spec.seed);
    case DefectClass::Delamination: {
      double z = 0.0;
      if (spec.delamination_z_mm) {
        z = *spec.delamination_z_mm;
      } else {
        // Centre on an interior voxel layer (layers 2..17) so the slab hits
        // exactly one layer of voxel centres.
        Philox rng(spec.seed, kDelaminationStream);
        const int layer = 2 + static_cast<int>(rng.below(kGridDim - 4));
        z = voxel_center(0, 0, layer).z();
      }
      return apply_delamination(cage, z, spec.delamination_thickness_mm, spec.seed);
    }
  }
  throw ValidationError("unknown defect class");
}

Vec3 voxel_center(int x, int y, int z) {
  auto c = [](int i) { return -kTargetHalfExtentMm + (i + 0.5) * kVoxelPitchMm; };
  return {c(x), c(y), c(z)};
}

int voxel_of(const Vec3& p) {
  auto idx = [](double v) {
    return static_cast<int>(std::floor((v + kTargetHalfExtentMm) / kVoxelPitchMm));
  };
  const int x = idx(p.x()), y = idx(p.y()), z = idx(p.z());
  if (x < 0 || y < 0 || z < 0 || x >= kGridDim || y >= kGridDim || z >= kGridDim) return -1;
  return voxel_index(x, y, z);
}

std::array<std::int64_t, kNumClasses> LabelGrid::histogram() const {
  std::array<std::int64_t, kNumClasses> h{};
  for (std::uint8_t v : values) ++h[v];
  return h;
}

LabelGrid rasterize_labels(const VolumeGeometry& geometry) {
  LabelGrid grid;
  for (int z = 0; z < kGridDim; ++z) {
    for (int y = 0; y < kGridDim; ++y) {
      for (int x = 0; x < kGridDim; ++x) {
        grid.at(x, y, z) = static_cast<std::uint8_t>(geometry.label_at(voxel_center(x, y, z)));
      }
    }
  }
  return grid;
}

void write_label_grid(const std::filesystem::path& path, const LabelGrid& grid) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw RuntimeError("cannot open " + path.string() + " for writing");
  binio::write_magic(out, "MVLB");
  binio::write<std::uint32_t>(out, 1);
  for (int i = 0; i < 3; ++i) binio::write<std::uint32_t>(out, kGridDim);
  out.write(reinterpret_cast<const char*>(grid.values.data()), grid.values.size());
  if (!out) throw RuntimeError("failed writing " + path.string());
}

LabelGrid read_label_grid(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw RuntimeError("cannot open " + path.string());
  binio::expect_magic(in, "MVLB");
  if (binio::read<std::uint32_t>(in, "version") != 1) {
    throw ValidationError("unsupported label file version in " + path.string());
  }
  for (int i = 0; i < 3; ++i) {
    if (binio::read<std::uint32_t>(in, "dims") != kGridDim) {
      throw ValidationError("label grid dims must be 20x20x20 in " + path.string());
    }
  }
  LabelGrid grid;
  in.read(reinterpret_cast<char*>(grid.values.data()), grid.values.size());
  if (!in) throw ValidationError("truncated label file " + path.string());
  for (std::uint8_t v : grid.values) {
    if (v >= kNumClasses) throw ValidationError("label value out of range in " + path.string());
  }
  return grid;
}

std::string geometry_manifest_json(const VolumeGeometry& geometry) {
  nlohmann::ordered_json j;
  j["class"] = to_string(geometry.defect().cls);
  j["seed"] = geometry.defect().seed;
  nlohmann::json bars = nlohmann::json::array();
  for (BarSlot s : geometry.removed_bars()) bars.push_back({s.row, s.col});
  j["removed_bars"] = bars;
  if (geometry.delamination()) {
    j["delamination"] = {{"z_center", geometry.delamination()->z_center_mm},
                         {"thickness", geometry.delamination()->thickness_mm}};
  } else {
    j["delamination"] = nullptr;
  }
  j["removed_bar_material"] = "air";
  j["cage"] = {{"radius_mm", geometry.cage().radius_mm()},
               {"spacing_mm", geometry.cage().spacing_mm()},
               {"offset_mm", geometry.cage().offset_mm()}};
  return j.dump(2);
}

}  // namespace muonseg
