#pragma once

#include <filesystem>
#include <string>

#include "evonas/tensor.hpp"

namespace evonas {

// Binary layout: the 7 bytes "EVONAS1", then per parameter until EOF:
//   u64 name length, name bytes (UTF-8), u64 rank, rank x u64 extents,
//   numel x IEEE-754 binary64 payload. All integers and doubles little-endian.
inline constexpr char kCheckpointMagic[] = "EVONAS1";

std::string serialize_checkpoint(const ParameterStore& params);
ParameterStore deserialize_checkpoint(const std::string& bytes);

void save_checkpoint(const std::filesystem::path& path, const ParameterStore& params);
ParameterStore load_checkpoint(const std::filesystem::path& path);

// Writes to "<path>.tmp" then renames over `path`. Throws IoError.
void write_file_atomic(const std::filesystem::path& path, const std::string& bytes);
std::string read_file(const std::filesystem::path& path);

}  // namespace evonas
