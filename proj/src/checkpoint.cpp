#include "muonseg/checkpoint.hpp"

#include <fstream>

#include "muonseg/binary_io.hpp"

namespace muonseg {

void write_checkpoint(const std::filesystem::path& path, const std::vector<CheckpointEntry>& entries) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw RuntimeError("cannot open " + path.string() + " for writing");
  binio::write_magic(out, "MVCK");
  binio::write<std::uint32_t>(out, kCheckpointVersion);
  binio::write<std::uint32_t>(out, static_cast<std::uint32_t>(entries.size()));
  for (const CheckpointEntry& e : entries) {
    binio::write<std::uint32_t>(out, static_cast<std::uint32_t>(e.name.size()));
    out.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
    binio::write<std::uint32_t>(out, static_cast<std::uint32_t>(e.value.rank()));
    for (int extent : e.value.shape()) binio::write<std::uint32_t>(out, static_cast<std::uint32_t>(extent));
    out.write(reinterpret_cast<const char*>(e.value.data()),
              static_cast<std::streamsize>(e.value.size() * sizeof(float)));
  }
  if (!out) throw RuntimeError("failed writing " + path.string());
}

std::vector<CheckpointEntry> read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw RuntimeError("cannot open checkpoint " + path.string());
  binio::expect_magic(in, "MVCK");
  const auto version = binio::read<std::uint32_t>(in, "checkpoint version");
  if (version != kCheckpointVersion) {
    throw ValidationError("unsupported checkpoint version " + std::to_string(version) + " in " +
                          path.string());
  }
  const auto count = binio::read<std::uint32_t>(in, "checkpoint entry count");
  std::vector<CheckpointEntry> entries;
  entries.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointEntry e;
    const auto name_len = binio::read<std::uint32_t>(in, "name length");
    if (name_len > 4096) throw ValidationError("implausible parameter name length in " + path.string());
    e.name.resize(name_len);
    in.read(e.name.data(), name_len);
    const auto rank = binio::read<std::uint32_t>(in, "rank");
    if (rank > 8) throw ValidationError("implausible tensor rank in " + path.string());
    Shape shape(rank);
    for (auto& extent : shape) extent = static_cast<int>(binio::read<std::uint32_t>(in, "extent"));
    e.value = Tensor<float>(shape);
    in.read(reinterpret_cast<char*>(e.value.data()),
            static_cast<std::streamsize>(e.value.size() * sizeof(float)));
    if (!in) throw ValidationError("truncated checkpoint payload for " + e.name);
    entries.push_back(std::move(e));
  }
  if (in.peek() != std::char_traits<char>::eof()) {
    throw ValidationError("trailing bytes after checkpoint entries in " + path.string());
  }
  return entries;
}

}  // namespace muonseg
