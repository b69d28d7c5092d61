#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "ferl/tensor.hpp"

namespace ferl {

struct NamedTensor {
  std::string name;
  RealArray value;
};

using TensorList = std::vector<NamedTensor>;

/// Binary layout: "FERL1" then, per tensor and until end of file,
///   u64 name length | name bytes | u64 rank | rank x u64 dims | f64 values
/// with every integer and real stored little-endian.
std::string encode_checkpoint(const TensorList& tensors);
TensorList decode_checkpoint(std::string_view bytes);

void write_checkpoint(const std::filesystem::path& path, const TensorList& tensors);
TensorList read_checkpoint(const std::filesystem::path& path);

/// Exact-match lookup; throws ValidationError naming the missing tensor.
const RealArray& find_tensor(const TensorList& tensors, std::string_view name);
bool has_tensor(const TensorList& tensors, std::string_view name);

/// FNV-1a 64, rendered as 16 hex digits. Used for checkpoint and config digests.
std::string digest_hex(std::string_view bytes);

}  // namespace ferl
