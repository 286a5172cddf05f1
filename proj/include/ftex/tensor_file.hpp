#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

#include "ftex/tensor.hpp"

namespace ftex {

inline constexpr std::uint32_t kContainerVersion = 1;

// Contents of an "FTEXMP01" container: named float32 tensors plus a UTF-8
// metadata block (key: value lines).
struct TensorContainer {
  NamedTensors tensors;
  std::string meta;
};

// Layout (little-endian):
//   "FTEXMP01" | u32 version | u32 count
//   count x { u32 name_len | name | u32 rows | u32 cols | rows*cols f32 }
//   u32 meta_len | meta bytes
void save_container(const std::filesystem::path& path, const NamedTensors& tensors, std::string_view meta = {});
TensorContainer load_container(const std::filesystem::path& path);

}  // namespace ftex
