#pragma once

// Blocking POSIX TCP sockets behind the ByteStream interface.

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <atomic>
#include <cerrno>
#include <cstdlib>
#include <cstring>
#include <mutex>
#include <optional>
#include <string>

#include "fedbot/error.hpp"
#include "fedbot/protocol.hpp"

namespace fedbot {

inline constexpr std::uint16_t kDefaultPort = 7177;

inline std::uint16_t port_from_env(const char* var, std::uint16_t fallback) {
  if (const char* v = std::getenv(var); v && *v) {
    char* end = nullptr;
    const long p = std::strtol(v, &end, 10);
    if (*end != '\0' || p < 0 || p > 65535) throw ConfigError(std::string(var) + " is not a valid port: " + v);
    return static_cast<std::uint16_t>(p);
  }
  return fallback;
}

inline std::uint16_t default_port() { return port_from_env("FEDBOT_PORT", kDefaultPort); }

inline std::string errno_text(const std::string& what) { return what + ": " + std::strerror(errno); }

class TcpStream : public ByteStream {
 public:
  explicit TcpStream(int fd) : fd_(fd) {
    int one = 1;
    ::setsockopt(fd_, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
  }
  ~TcpStream() override { close(); }
  TcpStream(const TcpStream&) = delete;
  TcpStream& operator=(const TcpStream&) = delete;

  void write_all(std::span<const std::uint8_t> b) override {
    std::size_t sent = 0;
    while (sent < b.size()) {
      const ssize_t n = ::send(fd_, b.data() + sent, b.size() - sent, MSG_NOSIGNAL);
      if (n < 0) {
        if (errno == EINTR) continue;
        throw Disconnected(errno_text("send"));
      }
      sent += static_cast<std::size_t>(n);
    }
  }

  std::size_t read_some(std::span<std::uint8_t> b) override {
    for (;;) {
      const ssize_t n = ::recv(fd_, b.data(), b.size(), 0);
      if (n >= 0) return static_cast<std::size_t>(n);
      if (errno == EINTR) continue;
      if (errno == ECONNRESET || errno == EBADF || errno == ENOTCONN) return 0;
      throw Disconnected(errno_text("recv"));
    }
  }

  /// Sends one frame; safe to call from several threads.
  void send(const Message& msg) {
    const Bytes frame = encode_frame(msg);
    std::lock_guard lock(write_mutex_);
    write_all(frame);
  }

  // Wakes any thread blocked in recv; the descriptor is released by close().
  void shutdown() noexcept {
    if (fd_ >= 0) ::shutdown(fd_, SHUT_RDWR);
  }

  void close() noexcept {
    if (fd_ >= 0) {
      ::close(fd_);
      fd_ = -1;
    }
  }

  int fd() const noexcept { return fd_; }

 private:
  int fd_;
  std::mutex write_mutex_;
};

inline std::unique_ptr<TcpStream> tcp_connect(const std::string& host, std::uint16_t port) {
  addrinfo hints{};
  hints.ai_family = AF_UNSPEC;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* res = nullptr;
  const std::string service = std::to_string(port);
  if (int rc = ::getaddrinfo(host.c_str(), service.c_str(), &hints, &res); rc != 0)
    throw Disconnected("cannot resolve " + host + ": " + ::gai_strerror(rc));
  std::string last = "no addresses";
  for (addrinfo* a = res; a; a = a->ai_next) {
    int fd = ::socket(a->ai_family, a->ai_socktype, a->ai_protocol);
    if (fd < 0) continue;
    if (::connect(fd, a->ai_addr, a->ai_addrlen) == 0) {
      ::freeaddrinfo(res);
      return std::make_unique<TcpStream>(fd);
    }
    last = std::strerror(errno);
    ::close(fd);
  }
  ::freeaddrinfo(res);
  throw Disconnected("cannot connect to " + host + ":" + service + ": " + last);
}

/// "host:port" or ":port"/"port" (host defaults to 127.0.0.1).
inline std::pair<std::string, std::uint16_t> parse_host_port(const std::string& s) {
  const auto colon = s.rfind(':');
  std::string host = colon == std::string::npos ? "127.0.0.1" : s.substr(0, colon);
  const std::string port = colon == std::string::npos ? s : s.substr(colon + 1);
  if (host.empty()) host = "127.0.0.1";
  char* end = nullptr;
  const long p = std::strtol(port.c_str(), &end, 10);
  if (port.empty() || *end != '\0' || p <= 0 || p > 65535) throw ConfigError("bad address '" + s + "'");
  return {host, static_cast<std::uint16_t>(p)};
}

class TcpListener {
 public:
  // Port 0 picks a free port; see port().
  explicit TcpListener(std::uint16_t port, const std::string& bind_host = "0.0.0.0") {
    fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd_ < 0) throw IoError(errno_text("socket"));
    int one = 1;
    ::setsockopt(fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(port);
    if (::inet_pton(AF_INET, bind_host.c_str(), &addr.sin_addr) != 1) throw ConfigError("bad bind host " + bind_host);
    if (::bind(fd_, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0 || ::listen(fd_, 64) != 0) {
      const std::string msg = errno_text("cannot listen on port " + std::to_string(port));
      ::close(fd_);
      throw IoError(msg);
    }
    socklen_t len = sizeof addr;
    ::getsockname(fd_, reinterpret_cast<sockaddr*>(&addr), &len);
    port_ = ntohs(addr.sin_port);
  }
  ~TcpListener() { close(); }
  TcpListener(const TcpListener&) = delete;
  TcpListener& operator=(const TcpListener&) = delete;

  std::uint16_t port() const noexcept { return port_; }

  /// Waits up to timeout_ms for a connection; nullptr on timeout or after close().
  std::unique_ptr<TcpStream> accept(int timeout_ms) {
    const int fd = fd_.load();
    if (fd < 0) return nullptr;
    pollfd p{fd, POLLIN, 0};
    const int rc = ::poll(&p, 1, timeout_ms);
    if (rc <= 0 || !(p.revents & POLLIN)) return nullptr;
    const int c = ::accept(fd, nullptr, nullptr);
    if (c < 0) return nullptr;
    return std::make_unique<TcpStream>(c);
  }

  void close() noexcept {
    const int fd = fd_.exchange(-1);
    if (fd >= 0) {
      ::shutdown(fd, SHUT_RDWR);
      ::close(fd);
    }
  }

 private:
  std::atomic<int> fd_{-1};
  std::uint16_t port_ = 0;
};

}  // namespace fedbot
