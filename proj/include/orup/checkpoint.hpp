#pragma once

#include <string>
#include <utility>
#include <vector>

#include "orup/tensor.hpp"

// Binary layout: "ORUP", u32 version (little-endian), then records until EOF:
// u32 name_len, name bytes, u32 ndim, u64 dims[ndim], f64 data[numel].
namespace orup {

inline constexpr std::uint32_t kCheckpointVersion = 1;
// Names with this prefix hold optimizer state rather than model tensors.
inline constexpr const char* kOptimizerPrefix = "__optim__/";

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

void write_checkpoint(const std::string& path, const NamedTensors& records);
NamedTensors read_checkpoint(const std::string& path);

}  // namespace orup
