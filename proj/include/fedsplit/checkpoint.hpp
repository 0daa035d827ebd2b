#pragma once

#include <string>

#include "fedsplit/adam.hpp"

namespace fedsplit {

// Parameter checkpoint file ("FSWT"): magic, format version u16, entry count
// u32, then per entry: name length u16 + UTF-8 name + rank u8 + dims (u32
// each) + raw little-endian 32-bit floats. Round-trips bit-exactly.
inline constexpr char kCheckpointMagic[4] = {'F', 'S', 'W', 'T'};
inline constexpr uint16_t kCheckpointVersion = 1;

void save_checkpoint(const std::string& path, const NamedTensors& tensors);
NamedTensors load_checkpoint(const std::string& path);

}  // namespace fedsplit
