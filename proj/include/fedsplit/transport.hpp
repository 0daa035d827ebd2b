#pragma once

#include <cstdint>
#include <memory>
#include <utility>
#include <vector>

#include "fedsplit/wire.hpp"

namespace fedsplit {

// Ordered reliable frame channel. Both implementations (in-process queue and
// loopback TCP) provide identical FIFO semantics, so training results are
// transport-invariant. recv() blocks; a closed peer raises SessionError.
class Channel {
 public:
  virtual ~Channel() = default;
  virtual void send(const std::vector<uint8_t>& frame) = 0;
  virtual std::vector<uint8_t> recv() = 0;
  virtual void close() = 0;

  void send_msg(const WireMessage& msg) { send(encode_frame(msg)); }
  WireMessage recv_msg() { return decode_frame(recv()); }
};

// Connected pair of in-process endpoints.
std::pair<std::unique_ptr<Channel>, std::unique_ptr<Channel>> make_inproc_pair();

// Loopback TCP transport. port 0 binds an ephemeral port.
class Listener {
 public:
  virtual ~Listener() = default;
  virtual std::unique_ptr<Channel> accept() = 0;
  virtual int port() const = 0;
};

std::unique_ptr<Listener> listen_loopback(int port);
std::unique_ptr<Channel> connect_loopback(int port);

}  // namespace fedsplit
