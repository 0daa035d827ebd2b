#pragma once

#include <cstdint>
#include <variant>
#include <vector>

#include "fedsplit/adam.hpp"
#include "fedsplit/tensor.hpp"

namespace fedsplit {

// Protocol traffic between clients, compute server and federation server.
// Activations carry the MLM labels because the loss is computed server-side.

struct ActivationBatch {
  uint32_t round = 0;
  uint32_t client_id = 0;
  Tensor z;                              // (batch, seq_len, hidden)
  std::vector<int32_t> attention_mask;   // batch*seq_len
  std::vector<int32_t> labels;           // batch*seq_len, kIgnoreLabel where unselected
};

struct ActivationGrad {
  uint32_t round = 0;
  uint32_t client_id = 0;
  Tensor dz;  // same shape as the matching ActivationBatch.z
};

struct WeightsUp {
  uint32_t round = 0;
  uint32_t client_id = 0;
  uint64_t sample_count = 0;  // n_k
  NamedTensors tensors;
};

struct WeightsDown {
  uint32_t round = 0;
  NamedTensors tensors;
};

enum class ControlKind : uint8_t { RoundStart = 0, RoundEnd = 1, Shutdown = 2 };

struct Control {
  ControlKind kind = ControlKind::RoundStart;
  uint32_t round = 0;
};

using WireMessage = std::variant<ActivationBatch, ActivationGrad, WeightsUp, WeightsDown, Control>;

// Frame layout: magic "FSP1", message-type u8, payload length u32 LE, payload.
inline constexpr char kFrameMagic[4] = {'F', 'S', 'P', '1'};
inline constexpr size_t kFrameHeaderSize = 9;

// Deterministic byte encoding of a full frame (header + payload).
std::vector<uint8_t> encode_frame(const WireMessage& msg);

// Strict decode of a full frame; any malformation (bad magic, unknown type,
// truncation, trailing bytes, length mismatch) raises ProtocolError.
WireMessage decode_frame(const std::vector<uint8_t>& frame);

// Structural equality including float bit patterns (via canonical encoding).
bool wire_equal(const WireMessage& a, const WireMessage& b);

}  // namespace fedsplit
