#include "fedsplit/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "fedsplit/errors.hpp"

namespace fedsplit {

namespace {

static_assert(sizeof(float) == 4, "32-bit IEEE floats required");

template <typename T>
void put(std::string& out, T value) {
  // Serialize integers little-endian byte by byte.
  for (size_t i = 0; i < sizeof(T); ++i) {
    out.push_back(static_cast<char>((static_cast<uint64_t>(value) >> (8 * i)) & 0xff));
  }
}

class Reader {
 public:
  Reader(const char* data, size_t size, const std::string& path)
      : data_(data), size_(size), path_(path) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    uint64_t v = 0;
    for (size_t i = 0; i < sizeof(T); ++i) {
      v |= static_cast<uint64_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    }
    pos_ += sizeof(T);
    return static_cast<T>(v);
  }

  std::string get_string(size_t n) {
    need(n);
    std::string s(data_ + pos_, n);
    pos_ += n;
    return s;
  }

  std::vector<float> get_floats(size_t n) {
    need(n * 4);
    std::vector<float> out(n);
    std::memcpy(out.data(), data_ + pos_, n * 4);
    pos_ += n * 4;
    return out;
  }

  bool at_end() const { return pos_ == size_; }

 private:
  void need(size_t n) {
    if (pos_ + n > size_) throw InputError("checkpoint '" + path_ + "': truncated file");
  }
  const char* data_;
  size_t size_;
  size_t pos_ = 0;
  std::string path_;
};

}  // namespace

void save_checkpoint(const std::string& path, const NamedTensors& tensors) {
  std::string out;
  out.append(kCheckpointMagic, 4);
  put<uint16_t>(out, kCheckpointVersion);
  put<uint32_t>(out, static_cast<uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    put<uint16_t>(out, static_cast<uint16_t>(name.size()));
    out.append(name);
    put<uint8_t>(out, static_cast<uint8_t>(t.shape().size()));
    for (int d : t.shape()) put<uint32_t>(out, static_cast<uint32_t>(d));
    const size_t base = out.size();
    out.resize(base + t.data().size() * 4);
    std::memcpy(out.data() + base, t.data().data(), t.data().size() * 4);
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw InputError("checkpoint: cannot open '" + path + "' for writing");
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw InputError("checkpoint: write failed for '" + path + "'");
}

NamedTensors load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw InputError("checkpoint: cannot open '" + path + "'");
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  Reader r(bytes.data(), bytes.size(), path);
  if (r.get_string(4) != std::string(kCheckpointMagic, 4)) {
    throw InputError("checkpoint '" + path + "': bad magic");
  }
  const auto version = r.get<uint16_t>();
  if (version != kCheckpointVersion) {
    throw InputError("checkpoint '" + path + "': unsupported version " + std::to_string(version));
  }
  const auto count = r.get<uint32_t>();
  NamedTensors out;
  for (uint32_t i = 0; i < count; ++i) {
    const auto name_len = r.get<uint16_t>();
    std::string name = r.get_string(name_len);
    const auto rank = r.get<uint8_t>();
    std::vector<int> shape(rank);
    size_t numel = 1;
    for (auto& d : shape) {
      d = static_cast<int>(r.get<uint32_t>());
      numel *= static_cast<size_t>(d);
    }
    auto data = r.get_floats(numel);
    if (!out.emplace(name, Tensor::from_data(shape, std::move(data))).second) {
      throw InputError("checkpoint '" + path + "': duplicate entry '" + name + "'");
    }
  }
  if (!r.at_end()) throw InputError("checkpoint '" + path + "': trailing bytes");
  return out;
}

}  // namespace fedsplit
