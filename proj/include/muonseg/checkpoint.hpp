#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "muonseg/tensor.hpp"

namespace muonseg {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointEntry {
  std::string name;
  Tensor<float> value;
};

// MVCK container, little-endian:
//   "MVCK" | u32 version | u32 count |
//   count x (u32 name_len | name bytes | u32 rank | rank x u32 extent | f32 payload)
void write_checkpoint(const std::filesystem::path& path, const std::vector<CheckpointEntry>& entries);
std::vector<CheckpointEntry> read_checkpoint(const std::filesystem::path& path);

}  // namespace muonseg
