#include "fedsplit/transport.hpp"

#include <arpa/inet.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <unistd.h>

#include <condition_variable>
#include <cstring>
#include <deque>
#include <mutex>

#include "fedsplit/errors.hpp"

namespace fedsplit {

namespace {

struct InprocQueue {
  std::mutex mu;
  std::condition_variable cv;
  std::deque<std::vector<uint8_t>> frames;
  bool closed = false;

  void push(std::vector<uint8_t> frame) {
    {
      std::lock_guard<std::mutex> lock(mu);
      if (closed) throw SessionError("inproc channel: peer closed");
      frames.push_back(std::move(frame));
    }
    cv.notify_one();
  }

  std::vector<uint8_t> pop() {
    std::unique_lock<std::mutex> lock(mu);
    cv.wait(lock, [this] { return !frames.empty() || closed; });
    if (frames.empty()) throw SessionError("inproc channel: closed while receiving");
    auto frame = std::move(frames.front());
    frames.pop_front();
    return frame;
  }

  void close() {
    {
      std::lock_guard<std::mutex> lock(mu);
      closed = true;
    }
    cv.notify_all();
  }
};

class InprocChannel : public Channel {
 public:
  InprocChannel(std::shared_ptr<InprocQueue> tx, std::shared_ptr<InprocQueue> rx)
      : tx_(std::move(tx)), rx_(std::move(rx)) {}
  ~InprocChannel() override { close(); }

  void send(const std::vector<uint8_t>& frame) override { tx_->push(frame); }
  std::vector<uint8_t> recv() override { return rx_->pop(); }
  void close() override {
    tx_->close();
    rx_->close();
  }

 private:
  std::shared_ptr<InprocQueue> tx_, rx_;
};

class SocketChannel : public Channel {
 public:
  explicit SocketChannel(int fd) : fd_(fd) {
    int one = 1;
    setsockopt(fd_, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
  }
  ~SocketChannel() override { close(); }

  void send(const std::vector<uint8_t>& frame) override {
    size_t sent = 0;
    while (sent < frame.size()) {
      const ssize_t n = ::send(fd_, frame.data() + sent, frame.size() - sent, MSG_NOSIGNAL);
      if (n <= 0) throw SessionError("socket channel: send failed");
      sent += static_cast<size_t>(n);
    }
  }

  std::vector<uint8_t> recv() override {
    std::vector<uint8_t> frame(kFrameHeaderSize);
    read_exact(frame.data(), kFrameHeaderSize);
    if (std::memcmp(frame.data(), kFrameMagic, 4) != 0) {
      throw ProtocolError("socket channel: bad frame magic");
    }
    uint32_t len = 0;
    for (int i = 0; i < 4; ++i) len |= static_cast<uint32_t>(frame[5 + i]) << (8 * i);
    if (len > (1u << 30)) throw ProtocolError("socket channel: oversized frame");
    frame.resize(kFrameHeaderSize + len);
    read_exact(frame.data() + kFrameHeaderSize, len);
    return frame;
  }

  void close() override {
    if (fd_ >= 0) {
      ::close(fd_);
      fd_ = -1;
    }
  }

 private:
  void read_exact(uint8_t* dst, size_t n) {
    size_t got = 0;
    while (got < n) {
      const ssize_t r = ::recv(fd_, dst + got, n - got, 0);
      if (r == 0) throw SessionError("socket channel: peer closed mid-frame");
      if (r < 0) throw SessionError("socket channel: recv failed");
      got += static_cast<size_t>(r);
    }
  }

  int fd_;
};

class SocketListener : public Listener {
 public:
  explicit SocketListener(int port) {
    fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd_ < 0) throw SessionError("listener: socket() failed");
    int one = 1;
    setsockopt(fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
    addr.sin_port = htons(static_cast<uint16_t>(port));
    if (::bind(fd_, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) {
      ::close(fd_);
      throw SessionError("listener: bind failed on port " + std::to_string(port));
    }
    if (::listen(fd_, 64) != 0) {
      ::close(fd_);
      throw SessionError("listener: listen failed");
    }
    sockaddr_in bound{};
    socklen_t len = sizeof(bound);
    getsockname(fd_, reinterpret_cast<sockaddr*>(&bound), &len);
    port_ = ntohs(bound.sin_port);
  }
  ~SocketListener() override {
    if (fd_ >= 0) ::close(fd_);
  }

  std::unique_ptr<Channel> accept() override {
    const int client = ::accept(fd_, nullptr, nullptr);
    if (client < 0) throw SessionError("listener: accept failed");
    return std::make_unique<SocketChannel>(client);
  }

  int port() const override { return port_; }

 private:
  int fd_ = -1;
  int port_ = 0;
};

}  // namespace

std::pair<std::unique_ptr<Channel>, std::unique_ptr<Channel>> make_inproc_pair() {
  auto a = std::make_shared<InprocQueue>();
  auto b = std::make_shared<InprocQueue>();
  return {std::make_unique<InprocChannel>(a, b), std::make_unique<InprocChannel>(b, a)};
}

std::unique_ptr<Listener> listen_loopback(int port) {
  return std::make_unique<SocketListener>(port);
}

std::unique_ptr<Channel> connect_loopback(int port) {
  const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
  if (fd < 0) throw SessionError("connect: socket() failed");
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  addr.sin_port = htons(static_cast<uint16_t>(port));
  if (::connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) {
    ::close(fd);
    throw SessionError("connect: failed to reach loopback port " + std::to_string(port));
  }
  return std::make_unique<SocketChannel>(fd);
}

}  // namespace fedsplit
