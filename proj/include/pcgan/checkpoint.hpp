#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "pcgan/parameters.hpp"
#include "pcgan/tensor.hpp"

namespace pcgan {

// Container layout (all integers little-endian):
//   "PFCK" | u16 version | records...
//   record: u32 name_len | name (UTF-8) | u8 dtype | u8 rank | u64 dims[rank] | payload
inline constexpr char kCheckpointMagic[4] = {'P', 'F', 'C', 'K'};
inline constexpr std::uint16_t kCheckpointVersion = 1;

enum class DType : std::uint8_t { Float32 = 1, Float64 = 2 };

struct CheckpointRecord {
  std::string name;
  Tensor tensor;
};

std::string encode_checkpoint(const std::vector<CheckpointRecord>& records);
std::vector<CheckpointRecord> decode_checkpoint(std::string_view bytes);

void save_checkpoint(const std::filesystem::path& path, const std::vector<CheckpointRecord>& records);
std::vector<CheckpointRecord> load_checkpoint(const std::filesystem::path& path);

std::vector<CheckpointRecord> to_records(const ParameterStore& store);
/// Copies every parameter of `store` from `records` by name. Missing names or
/// shape mismatches are data errors; unknown extra records are ignored.
void assign_from_records(ParameterStore& store, const std::vector<CheckpointRecord>& records);

}  // namespace pcgan
