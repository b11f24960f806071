#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "flowdiff/tensor.hpp"
#include "flowdiff/tensor_file.hpp"

namespace flowdiff {

inline constexpr std::uint16_t kCheckpointVersion = 1;

// Ordered named-tensor container. Serialization is a pure function of the
// contents, so save -> load -> save reproduces identical bytes.
struct CheckpointData {
  std::uint64_t config_digest = 0;
  std::vector<std::pair<std::string, Tensor>> entries;
  std::vector<std::pair<std::string, TensorDtype>> dtypes;  // parallel to entries

  void add(std::string name, Tensor t, TensorDtype dtype = TensorDtype::f64);
  const Tensor& get(const std::string& name) const;
  bool has(const std::string& name) const;
};

// Layout: "FDCK" | version u16 | config_digest u64 | n_entries u64 |
// repeated { name_len u16 | name bytes | tensor record } | crc32 u32.
// The CRC covers every byte before it.
void write_checkpoint(const CheckpointData& data, const std::filesystem::path& path);
CheckpointData read_checkpoint(const std::filesystem::path& path);

}  // namespace flowdiff
