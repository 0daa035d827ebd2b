#include "fedsplit/wire.hpp"

#include <cstring>

#include "fedsplit/errors.hpp"

namespace fedsplit {

namespace {

constexpr uint8_t kTypeActivationBatch = 1;
constexpr uint8_t kTypeActivationGrad = 2;
constexpr uint8_t kTypeWeightsUp = 3;
constexpr uint8_t kTypeWeightsDown = 4;
constexpr uint8_t kTypeControl = 5;

// Payloads above this are rejected before allocation.
constexpr uint32_t kMaxPayload = 1u << 30;

template <typename T>
void put(std::vector<uint8_t>& out, T value) {
  for (size_t i = 0; i < sizeof(T); ++i) {
    out.push_back(static_cast<uint8_t>((static_cast<uint64_t>(value) >> (8 * i)) & 0xff));
  }
}

void put_tensor(std::vector<uint8_t>& out, const Tensor& t) {
  put<uint8_t>(out, static_cast<uint8_t>(t.shape().size()));
  for (int d : t.shape()) put<uint32_t>(out, static_cast<uint32_t>(d));
  const size_t base = out.size();
  out.resize(base + t.data().size() * 4);
  std::memcpy(out.data() + base, t.data().data(), t.data().size() * 4);
}

void put_i32s(std::vector<uint8_t>& out, const std::vector<int32_t>& v) {
  put<uint32_t>(out, static_cast<uint32_t>(v.size()));
  for (int32_t x : v) put<uint32_t>(out, static_cast<uint32_t>(x));
}

void put_named(std::vector<uint8_t>& out, const NamedTensors& tensors) {
  put<uint32_t>(out, static_cast<uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    put<uint16_t>(out, static_cast<uint16_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    put_tensor(out, t);
  }
}

class Reader {
 public:
  Reader(const uint8_t* data, size_t size) : data_(data), size_(size) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    uint64_t v = 0;
    for (size_t i = 0; i < sizeof(T); ++i) {
      v |= static_cast<uint64_t>(data_[pos_ + i]) << (8 * i);
    }
    pos_ += sizeof(T);
    return static_cast<T>(v);
  }

  Tensor get_tensor() {
    const auto rank = get<uint8_t>();
    if (rank > 8) throw ProtocolError("frame: tensor rank " + std::to_string(rank) + " too large");
    std::vector<int> shape(rank);
    uint64_t numel = 1;
    for (auto& d : shape) {
      const auto dim = get<uint32_t>();
      d = static_cast<int>(dim);
      numel *= dim;
      if (numel * 4 > kMaxPayload) throw ProtocolError("frame: tensor too large");
    }
    need(numel * 4);
    std::vector<float> data(numel);
    std::memcpy(data.data(), data_ + pos_, numel * 4);
    pos_ += numel * 4;
    return Tensor::from_data(shape, std::move(data));
  }

  std::vector<int32_t> get_i32s() {
    const auto count = get<uint32_t>();
    if (static_cast<uint64_t>(count) * 4 > remaining()) throw ProtocolError("frame: truncated list");
    std::vector<int32_t> out(count);
    for (auto& x : out) x = static_cast<int32_t>(get<uint32_t>());
    return out;
  }

  NamedTensors get_named() {
    const auto count = get<uint32_t>();
    NamedTensors out;
    for (uint32_t i = 0; i < count; ++i) {
      const auto len = get<uint16_t>();
      need(len);
      std::string name(reinterpret_cast<const char*>(data_) + pos_, len);
      pos_ += len;
      Tensor t = get_tensor();
      if (!out.emplace(std::move(name), std::move(t)).second) {
        throw ProtocolError("frame: duplicate tensor name");
      }
    }
    return out;
  }

  void expect_end() const {
    if (pos_ != size_) throw ProtocolError("frame: trailing payload bytes");
  }

 private:
  uint64_t remaining() const { return size_ - pos_; }
  void need(uint64_t n) {
    if (pos_ + n > size_) throw ProtocolError("frame: truncated payload");
  }
  const uint8_t* data_;
  size_t size_;
  size_t pos_ = 0;
};

}  // namespace

std::vector<uint8_t> encode_frame(const WireMessage& msg) {
  std::vector<uint8_t> payload;
  uint8_t type = 0;
  if (const auto* m = std::get_if<ActivationBatch>(&msg)) {
    type = kTypeActivationBatch;
    put<uint32_t>(payload, m->round);
    put<uint32_t>(payload, m->client_id);
    put_tensor(payload, m->z);
    put_i32s(payload, m->attention_mask);
    put_i32s(payload, m->labels);
  } else if (const auto* m = std::get_if<ActivationGrad>(&msg)) {
    type = kTypeActivationGrad;
    put<uint32_t>(payload, m->round);
    put<uint32_t>(payload, m->client_id);
    put_tensor(payload, m->dz);
  } else if (const auto* m = std::get_if<WeightsUp>(&msg)) {
    type = kTypeWeightsUp;
    put<uint32_t>(payload, m->round);
    put<uint32_t>(payload, m->client_id);
    put<uint64_t>(payload, m->sample_count);
    put_named(payload, m->tensors);
  } else if (const auto* m = std::get_if<WeightsDown>(&msg)) {
    type = kTypeWeightsDown;
    put<uint32_t>(payload, m->round);
    put_named(payload, m->tensors);
  } else if (const auto* m = std::get_if<Control>(&msg)) {
    type = kTypeControl;
    put<uint8_t>(payload, static_cast<uint8_t>(m->kind));
    put<uint32_t>(payload, m->round);
  }
  std::vector<uint8_t> frame;
  frame.reserve(kFrameHeaderSize + payload.size());
  frame.insert(frame.end(), kFrameMagic, kFrameMagic + 4);
  put<uint8_t>(frame, type);
  put<uint32_t>(frame, static_cast<uint32_t>(payload.size()));
  frame.insert(frame.end(), payload.begin(), payload.end());
  return frame;
}

WireMessage decode_frame(const std::vector<uint8_t>& frame) {
  if (frame.size() < kFrameHeaderSize) throw ProtocolError("frame: shorter than header");
  if (std::memcmp(frame.data(), kFrameMagic, 4) != 0) throw ProtocolError("frame: bad magic");
  const uint8_t type = frame[4];
  uint32_t len = 0;
  for (int i = 0; i < 4; ++i) len |= static_cast<uint32_t>(frame[5 + i]) << (8 * i);
  if (len > kMaxPayload) throw ProtocolError("frame: payload length exceeds limit");
  if (frame.size() != kFrameHeaderSize + len) {
    throw ProtocolError("frame: length field " + std::to_string(len) + " does not match payload");
  }
  Reader r(frame.data() + kFrameHeaderSize, len);
  switch (type) {
    case kTypeActivationBatch: {
      ActivationBatch m;
      m.round = r.get<uint32_t>();
      m.client_id = r.get<uint32_t>();
      m.z = r.get_tensor();
      m.attention_mask = r.get_i32s();
      m.labels = r.get_i32s();
      r.expect_end();
      return m;
    }
    case kTypeActivationGrad: {
      ActivationGrad m;
      m.round = r.get<uint32_t>();
      m.client_id = r.get<uint32_t>();
      m.dz = r.get_tensor();
      r.expect_end();
      return m;
    }
    case kTypeWeightsUp: {
      WeightsUp m;
      m.round = r.get<uint32_t>();
      m.client_id = r.get<uint32_t>();
      m.sample_count = r.get<uint64_t>();
      m.tensors = r.get_named();
      r.expect_end();
      return m;
    }
    case kTypeWeightsDown: {
      WeightsDown m;
      m.round = r.get<uint32_t>();
      m.tensors = r.get_named();
      r.expect_end();
      return m;
    }
    case kTypeControl: {
      Control m;
      const auto kind = r.get<uint8_t>();
      if (kind > static_cast<uint8_t>(ControlKind::Shutdown)) {
        throw ProtocolError("frame: unknown control kind " + std::to_string(kind));
      }
      m.kind = static_cast<ControlKind>(kind);
      m.round = r.get<uint32_t>();
      r.expect_end();
      return m;
    }
    default:
      throw ProtocolError("frame: unknown message type " + std::to_string(type));
  }
}

bool wire_equal(const WireMessage& a, const WireMessage& b) {
  return encode_frame(a) == encode_frame(b);
}

}  // namespace fedsplit
