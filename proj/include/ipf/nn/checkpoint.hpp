#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

#include <json.hpp>

#include "ipf/nn/tensor.hpp"

namespace ipf::nn {

// Archive layout (all integers little-endian):
//   8 bytes  magic "IPFCKPT\0"
//   u32      format version
//   u64      header length in bytes
//   ...      UTF-8 JSON header
//   ...      float32 buffers, concatenated in header "tensors" order
// The header carries "format_version", "config_hash" and a "tensors" list
// of {name, shape, offset, count, trainable}; callers add any other keys.
inline constexpr std::uint32_t kArchiveVersion = 1;

struct Archive {
  nlohmann::json header;
  ParamStore<float> params;
};

std::uint64_t fnv1a64(std::string_view bytes);
// Hex FNV-1a of the compact JSON dump (keys are sorted by nlohmann::json).
std::string config_hash(const nlohmann::json& config);

template <typename T>
void save_archive(const std::filesystem::path& path, nlohmann::json header,
                  const ParamStore<T>& params);

Archive load_archive(const std::filesystem::path& path);

extern template void save_archive(const std::filesystem::path&, nlohmann::json,
                                  const ParamStore<float>&);
extern template void save_archive(const std::filesystem::path&, nlohmann::json,
                                  const ParamStore<double>&);

}  // namespace ipf::nn
