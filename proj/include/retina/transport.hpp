#pragma once

// Edge-to-front-end model delivery over a reliable byte stream.
//
// Frame: u32 length (tag + body) | u8 tag | body, little-endian, 64 MiB cap.
//
//   sender                         receiver
//   HELLO(sender versions)   --->
//                            <---  HELLO(receiver versions)
//   OFFER(id, target, pred, params) --->
//                            <---  ACCEPT | ERROR
//   DELTA(packet bytes)      --->
//                            <---  ACK(checksum) | ERROR
//
// The receiver registers the reconstructed model only after its checksum
// matches the packet, so an aborted session leaves the store untouched.

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <sys/time.h>
#include <unistd.h>

#include <atomic>
#include <cerrno>
#include <chrono>
#include <condition_variable>
#include <cstring>
#include <functional>
#include <mutex>
#include <set>
#include <string>
#include <thread>
#include <variant>
#include <vector>

#include "retina/bytes.hpp"
#include "retina/codec.hpp"
#include "retina/error.hpp"
#include "retina/registry.hpp"

namespace retina {

inline constexpr std::uint32_t kMaxFrameBytes = 64u << 20;

enum class MessageTag : std::uint8_t { Hello = 1, Offer = 2, Accept = 3, Delta = 4, Ack = 5, Error = 6 };

struct HelloMsg {
  VersionSet versions;
  friend bool operator==(const HelloMsg&, const HelloMsg&) = default;
};
struct OfferMsg {
  std::string model_id;
  std::uint64_t target = 0;
  std::uint64_t prediction = kNoVersion;
  QuantizationParams params{12, 7, 0.3};
  friend bool operator==(const OfferMsg&, const OfferMsg&) = default;
};
struct AcceptMsg {
  friend bool operator==(const AcceptMsg&, const AcceptMsg&) = default;
};
struct DeltaMsg {
  Bytes packet;
  friend bool operator==(const DeltaMsg&, const DeltaMsg&) = default;
};
struct AckMsg {
  std::uint64_t checksum = 0;
  friend bool operator==(const AckMsg&, const AckMsg&) = default;
};
struct ErrorMsg {
  std::uint16_t code = 0;
  std::string text;
  friend bool operator==(const ErrorMsg&, const ErrorMsg&) = default;
};

using Message = std::variant<HelloMsg, OfferMsg, AcceptMsg, DeltaMsg, AckMsg, ErrorMsg>;

inline std::string_view message_name(const Message& m) {
  static constexpr std::string_view names[] = {"HELLO", "OFFER", "ACCEPT", "DELTA", "ACK", "ERROR"};
  return names[m.index()];
}

inline Bytes encode_frame(const Message& msg) {
  ByteWriter body;
  MessageTag tag{};
  std::visit(
      [&](const auto& m) {
        using T = std::decay_t<decltype(m)>;
        if constexpr (std::is_same_v<T, HelloMsg>) {
          tag = MessageTag::Hello;
          body.str(m.versions.model_id);
          body.u32(static_cast<std::uint32_t>(m.versions.versions.size()));
          for (auto v : m.versions.versions) body.u64(v);
        } else if constexpr (std::is_same_v<T, OfferMsg>) {
          tag = MessageTag::Offer;
          body.str(m.model_id);
          body.u64(m.target);
          body.u64(m.prediction);
          body.u8(static_cast<std::uint8_t>(m.params.s_bits()));
          body.u8(static_cast<std::uint8_t>(m.params.q_bits()));
          body.f64(m.params.f());
          body.u8(static_cast<std::uint8_t>(m.params.rounding()));
        } else if constexpr (std::is_same_v<T, AcceptMsg>) {
          tag = MessageTag::Accept;
        } else if constexpr (std::is_same_v<T, DeltaMsg>) {
          tag = MessageTag::Delta;
          body.raw(m.packet);
        } else if constexpr (std::is_same_v<T, AckMsg>) {
          tag = MessageTag::Ack;
          body.u64(m.checksum);
        } else {
          tag = MessageTag::Error;
          body.u16(m.code);
          body.raw(ByteView(reinterpret_cast<const std::uint8_t*>(m.text.data()), m.text.size()));
        }
      },
      msg);
  if (body.size() + 1 > kMaxFrameBytes) fail(ErrorCode::Protocol, "frame exceeds 64 MiB");
  ByteWriter frame;
  frame.reserve(body.size() + 5);
  frame.u32(static_cast<std::uint32_t>(body.size() + 1));
  frame.u8(static_cast<std::uint8_t>(tag));
  frame.raw(body.bytes());
  return frame.take();
}

/// Parses one frame body. Anything that does not parse exactly is a
/// Protocol error.
inline Message decode_message(std::uint8_t tag, ByteView body) {
  ByteReader r(body, ErrorCode::Protocol);
  Message out;
  switch (static_cast<MessageTag>(tag)) {
    case MessageTag::Hello: {
      std::string id = r.str();
      const std::uint32_t n = r.u32();
      if (n > r.remaining() / 8) fail(ErrorCode::Protocol, "HELLO version count exceeds body");
      std::vector<std::uint64_t> vs(n);
      for (auto& v : vs) v = r.u64();
      out = HelloMsg{VersionSet(std::move(id), std::move(vs))};
      break;
    }
    case MessageTag::Offer: {
      OfferMsg o;
      o.model_id = r.str();
      o.target = r.u64();
      o.prediction = r.u64();
      const int s = r.u8();
      const int q = r.u8();
      const double f = r.f64();
      const auto rounding = static_cast<Rounding>(r.u8());
      try {
        o.params = QuantizationParams(s, q, f, rounding);
      } catch (const Error& e) {
        fail(ErrorCode::Protocol, std::string("OFFER params: ") + e.what());
      }
      out = std::move(o);
      break;
    }
    case MessageTag::Accept:
      out = AcceptMsg{};
      break;
    case MessageTag::Delta: {
      ByteView p = r.take(r.remaining());
      out = DeltaMsg{Bytes(p.begin(), p.end())};
      break;
    }
    case MessageTag::Ack:
      out = AckMsg{r.u64()};
      break;
    case MessageTag::Error: {
      ErrorMsg e;
      e.code = r.u16();
      ByteView t = r.take(r.remaining());
      e.text.assign(reinterpret_cast<const char*>(t.data()), t.size());
      out = std::move(e);
      break;
    }
    default:
      fail(ErrorCode::Protocol, "unknown message tag " + std::to_string(tag));
  }
  if (!r.done()) fail(ErrorCode::Protocol, "trailing bytes in message body");
  return out;
}

// ---------------------------------------------------------------------------
// Streams

class Stream {
 public:
  virtual ~Stream() = default;
  /// Fills `out` completely or throws (Protocol on EOF, Timeout, Io).
  virtual void read_exact(std::span<std::uint8_t> out) = 0;
  virtual void write_all(ByteView bytes) = 0;

  std::uint64_t bytes_read = 0;
  std::uint64_t bytes_written = 0;
};

inline Message read_message(Stream& s) {
  std::uint8_t header[5];
  s.read_exact(header);
  const std::uint32_t len = static_cast<std::uint32_t>(header[0]) | (static_cast<std::uint32_t>(header[1]) << 8) |
                            (static_cast<std::uint32_t>(header[2]) << 16) | (static_cast<std::uint32_t>(header[3]) << 24);
  if (len == 0 || len > kMaxFrameBytes) fail(ErrorCode::Protocol, "bad frame length " + std::to_string(len));
  const std::uint8_t tag = header[4];
  if (tag < 1 || tag > 6) fail(ErrorCode::Protocol, "unknown message tag " + std::to_string(tag));
  Bytes body(len - 1);
  s.read_exact(body);
  return decode_message(tag, body);
}

inline void write_message(Stream& s, const Message& m) { s.write_all(encode_frame(m)); }

/// In-memory stream: reads from a fixed input, collects writes.
class MemoryStream : public Stream {
 public:
  explicit MemoryStream(Bytes input = {}) : input_(std::move(input)) {}
  void read_exact(std::span<std::uint8_t> out) override {
    if (out.size() > input_.size() - pos_) fail(ErrorCode::Protocol, "stream closed");
    std::memcpy(out.data(), input_.data() + pos_, out.size());
    pos_ += out.size();
    bytes_read += out.size();
  }
  void write_all(ByteView bytes) override {
    output_.insert(output_.end(), bytes.begin(), bytes.end());
    bytes_written += bytes.size();
  }
  const Bytes& output() const { return output_; }

 private:
  Bytes input_;
  std::size_t pos_ = 0;
  Bytes output_;
};

class SocketStream : public Stream {
 public:
  explicit SocketStream(int fd) : fd_(fd) {}
  ~SocketStream() override {
    if (fd_ >= 0) ::close(fd_);
  }
  SocketStream(const SocketStream&) = delete;
  SocketStream& operator=(const SocketStream&) = delete;

  int fd() const { return fd_; }

  void set_timeout(std::chrono::milliseconds t) {
    timeval tv{};
    tv.tv_sec = static_cast<time_t>(t.count() / 1000);
    tv.tv_usec = static_cast<suseconds_t>((t.count() % 1000) * 1000);
    ::setsockopt(fd_, SOL_SOCKET, SO_RCVTIMEO, &tv, sizeof tv);
    ::setsockopt(fd_, SOL_SOCKET, SO_SNDTIMEO, &tv, sizeof tv);
  }

  void read_exact(std::span<std::uint8_t> out) override {
    std::size_t got = 0;
    while (got < out.size()) {
      const ssize_t n = ::recv(fd_, out.data() + got, out.size() - got, 0);
      if (n == 0) fail(ErrorCode::Protocol, "peer closed connection");
      if (n < 0) {
        if (errno == EINTR) continue;
        if (errno == EAGAIN || errno == EWOULDBLOCK) fail(ErrorCode::Timeout, "read timed out");
        fail(ErrorCode::Io, std::string("recv: ") + std::strerror(errno));
      }
      got += static_cast<std::size_t>(n);
    }
    bytes_read += got;
  }

  void write_all(ByteView bytes) override {
    std::size_t sent = 0;
    while (sent < bytes.size()) {
      const ssize_t n = ::send(fd_, bytes.data() + sent, bytes.size() - sent, MSG_NOSIGNAL);
      if (n < 0) {
        if (errno == EINTR) continue;
        if (errno == EAGAIN || errno == EWOULDBLOCK) fail(ErrorCode::Timeout, "write timed out");
        fail(ErrorCode::Io, std::string("send: ") + std::strerror(errno));
      }
      sent += static_cast<std::size_t>(n);
    }
    bytes_written += sent;
  }

 private:
  int fd_;
};

struct Endpoint {
  std::string host = "127.0.0.1";
  std::uint16_t port = 0;

  static Endpoint parse(std::string_view text) {
    const auto colon = text.rfind(':');
    if (colon == std::string_view::npos) fail(ErrorCode::InvalidArgument, "endpoint must be host:port");
    Endpoint e;
    e.host = std::string(text.substr(0, colon));
    if (e.host.empty()) e.host = "0.0.0.0";
    auto port = detail::parse_u64(text.substr(colon + 1));
    if (!port || *port > 65535) fail(ErrorCode::InvalidArgument, "bad port in '" + std::string(text) + "'");
    e.port = static_cast<std::uint16_t>(*port);
    return e;
  }
  std::string str() const { return host + ":" + std::to_string(port); }
};

inline std::unique_ptr<SocketStream> connect_tcp(const Endpoint& ep,
                                                 std::chrono::milliseconds timeout = std::chrono::seconds(30)) {
  addrinfo hints{};
  hints.ai_family = AF_UNSPEC;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* res = nullptr;
  if (int rc = ::getaddrinfo(ep.host.c_str(), std::to_string(ep.port).c_str(), &hints, &res); rc != 0)
    fail(ErrorCode::Io, "resolve " + ep.str() + ": " + ::gai_strerror(rc));
  int fd = -1;
  for (addrinfo* ai = res; ai != nullptr; ai = ai->ai_next) {
    fd = ::socket(ai->ai_family, ai->ai_socktype | SOCK_CLOEXEC, ai->ai_protocol);
    if (fd < 0) continue;
    if (::connect(fd, ai->ai_addr, ai->ai_addrlen) == 0) break;
    ::close(fd);
    fd = -1;
  }
  ::freeaddrinfo(res);
  if (fd < 0) fail(ErrorCode::Io, "cannot connect to " + ep.str());
  int one = 1;
  ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
  auto s = std::make_unique<SocketStream>(fd);
  s->set_timeout(timeout);
  return s;
}

// ---------------------------------------------------------------------------
// Sessions

struct TransferSummary {
  ModelVersionId target;
  std::uint64_t prediction_version = kNoVersion;  // kNoVersion: whole-model fallback
  bool up_to_date = false;                        // receiver already held the target
  std::uint64_t checksum = 0;
  std::uint64_t bytes_sent = 0;
  std::uint64_t bytes_received = 0;
  SizeReport size;

  bool fallback() const { return !up_to_date && prediction_version == kNoVersion; }
};

namespace detail {

template <class T>
T expect(Stream& s, std::string_view what) {
  Message m = read_message(s);
  if (auto* e = std::get_if<ErrorMsg>(&m)) {
    const auto code = (e->code >= 1 && e->code <= static_cast<std::uint16_t>(ErrorCode::HypothesisViolated))
                          ? static_cast<ErrorCode>(e->code)
                          : ErrorCode::Remote;
    fail(code, "peer: " + e->text);
  }
  if (auto* t = std::get_if<T>(&m)) return std::move(*t);
  fail(ErrorCode::Protocol, "expected " + std::string(what) + ", got " + std::string(message_name(m)));
}

}  // namespace detail

/// Sender half. Ships `target` from `store`, choosing the greatest version
/// both sides hold as the prediction model, or the whole model if none.
inline TransferSummary push_model(const Registry& store, Stream& link, const ModelVersionId& target,
                                  const QuantizationParams& params) {
  const ModelArtifact model = store.get_model(target);
  const VersionSet ours = store.versions(target.model_id);
  write_message(link, HelloMsg{ours});
  const VersionSet theirs = detail::expect<HelloMsg>(link, "HELLO").versions;
  if (theirs.model_id != target.model_id) fail(ErrorCode::Protocol, "HELLO answered for model " + theirs.model_id);

  TransferSummary summary;
  summary.target = target;
  if (theirs.contains(target.version)) {
    summary.up_to_date = true;
    summary.checksum = weight_checksum(model);
    summary.bytes_sent = link.bytes_written;
    summary.bytes_received = link.bytes_read;
    return summary;
  }

  std::vector<std::uint64_t> older;
  for (auto v : ours.versions)
    if (v < target.version) older.push_back(v);
  try {
    summary.prediction_version = select_prediction_version(VersionSet(target.model_id, older), theirs);
  } catch (const Error& e) {
    if (e.code() != ErrorCode::NoCommonVersion) throw;
    summary.prediction_version = kNoVersion;
  }

  write_message(link, OfferMsg{target.model_id, target.version, summary.prediction_version, params});
  detail::expect<AcceptMsg>(link, "ACCEPT");

  const DeltaPacket pkt = summary.prediction_version == kNoVersion
                              ? whole_model_packet(model, params)
                              : diff_packet(model, store.get_model({target.model_id, summary.prediction_version}), params);
  write_message(link, DeltaMsg{serialize_packet(pkt)});
  const AckMsg ack = detail::expect<AckMsg>(link, "ACK");
  if (ack.checksum != pkt.checksum) fail(ErrorCode::ChecksumMismatch, "receiver acknowledged a different reconstruction");

  summary.checksum = pkt.checksum;
  summary.size = size_report(pkt, model.weight_count());
  summary.bytes_sent = link.bytes_written;
  summary.bytes_received = link.bytes_read;
  return summary;
}

struct ReceiveResult {
  std::optional<ModelVersionId> registered;
  std::uint64_t checksum = 0;
  std::optional<Error> error;
};

/// Receiver half of one session. Failures are answered with ERROR where the
/// link still allows it and reported in the result; nothing is registered
/// unless the reconstruction verifies.
inline ReceiveResult receive_session(Registry& store, Stream& link, const std::atomic<bool>* cancelled = nullptr) {
  ReceiveResult result;
  try {
    const VersionSet sender = detail::expect<HelloMsg>(link, "HELLO").versions;
    detail::check_model_id(sender.model_id);
    write_message(link, HelloMsg{store.versions(sender.model_id)});

    const OfferMsg offer = detail::expect<OfferMsg>(link, "OFFER");
    if (offer.model_id != sender.model_id) fail(ErrorCode::Protocol, "OFFER names a different model");
    if (offer.target == kNoVersion) fail(ErrorCode::Protocol, "OFFER target version reserved");
    std::optional<ModelArtifact> base;
    if (offer.prediction != kNoVersion) {
      if (offer.prediction >= offer.target) fail(ErrorCode::Protocol, "prediction version must precede target");
      base.emplace(store.get_model({offer.model_id, offer.prediction}));
    }
    if (store.has_model({offer.model_id, offer.target}))
      fail(ErrorCode::DuplicateVersion, "target " + std::to_string(offer.target) + " already held");
    write_message(link, AcceptMsg{});

    const DeltaMsg delta = detail::expect<DeltaMsg>(link, "DELTA");
    DeltaPacket pkt = deserialize_packet(delta.packet);
    if (pkt.base != ModelVersionId{offer.model_id, offer.prediction} || pkt.target != ModelVersionId{offer.model_id, offer.target} ||
        !(pkt.params == offer.params))
      fail(ErrorCode::Protocol, "DELTA does not match OFFER");
    ModelArtifact rebuilt = apply_packet(pkt, base ? &*base : nullptr);
    if (cancelled != nullptr && *cancelled) fail(ErrorCode::Io, "receiver shutting down");
    store.register_model(rebuilt);
    store.store_packet(pkt);
    result.registered = rebuilt.id();
    result.checksum = weight_checksum(rebuilt);
    write_message(link, AckMsg{result.checksum});
  } catch (const Error& e) {
    result.error = e;
    try {
      write_message(link, ErrorMsg{static_cast<std::uint16_t>(e.code()), e.what()});
    } catch (const Error&) {
      // link already gone
    }
  }
  return result;
}

/// Accepts sessions on a TCP endpoint, one thread per session.
class Server {
 public:
  using Logger = std::function<void(const std::string&)>;

  Server(Registry& store, const Endpoint& listen, Logger log = {}) : store_(store), log_(std::move(log)) {
    addrinfo hints{};
    hints.ai_family = AF_UNSPEC;
    hints.ai_socktype = SOCK_STREAM;
    hints.ai_flags = AI_PASSIVE;
    addrinfo* res = nullptr;
    if (int rc = ::getaddrinfo(listen.host.c_str(), std::to_string(listen.port).c_str(), &hints, &res); rc != 0)
      fail(ErrorCode::Io, "resolve " + listen.str() + ": " + ::gai_strerror(rc));
    for (addrinfo* ai = res; ai != nullptr && listen_fd_ < 0; ai = ai->ai_next) {
      int fd = ::socket(ai->ai_family, ai->ai_socktype | SOCK_CLOEXEC, ai->ai_protocol);
      if (fd < 0) continue;
      int one = 1;
      ::setsockopt(fd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
      if (::bind(fd, ai->ai_addr, ai->ai_addrlen) == 0 && ::listen(fd, 64) == 0) {
        listen_fd_ = fd;
      } else {
        ::close(fd);
      }
    }
    ::freeaddrinfo(res);
    if (listen_fd_ < 0) fail(ErrorCode::Io, "cannot listen on " + listen.str());
    sockaddr_storage addr{};
    socklen_t len = sizeof addr;
    ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&addr), &len);
    port_ = ntohs(addr.ss_family == AF_INET6 ? reinterpret_cast<sockaddr_in6*>(&addr)->sin6_port
                                             : reinterpret_cast<sockaddr_in*>(&addr)->sin_port);
  }

  ~Server() {
    stop();
    if (listen_fd_ >= 0) ::close(listen_fd_);
  }
  Server(const Server&) = delete;
  Server& operator=(const Server&) = delete;

  std::uint16_t port() const { return port_; }
  std::chrono::milliseconds session_timeout{30000};

  /// Accept loop; returns after stop().
  void run() {
    while (!stopping_) {
      pollfd pfd{listen_fd_, POLLIN, 0};
      const int ready = ::poll(&pfd, 1, 100);
      if (ready <= 0) continue;
      const int fd = ::accept4(listen_fd_, nullptr, nullptr, SOCK_CLOEXEC);
      if (fd < 0) continue;
      int one = 1;
      ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
      std::lock_guard lk(mu_);
      if (stopping_) {
        ::close(fd);
        break;
      }
      active_fds_.insert(fd);
      ++active_;
      std::thread([this, fd] { session(fd); }).detach();
    }
  }

  void start() {
    runner_ = std::thread([this] { run(); });
  }

  /// Stops accepting, aborts in-flight sessions and waits for them to unwind.
  void stop() {
    {
      std::lock_guard lk(mu_);
      stopping_ = true;
      for (int fd : active_fds_) ::shutdown(fd, SHUT_RDWR);
    }
    if (runner_.joinable()) runner_.join();
    std::unique_lock lk(mu_);
    idle_.wait(lk, [this] { return active_ == 0; });
  }

  std::uint64_t sessions_ok() const { return ok_; }
  std::uint64_t sessions_failed() const { return failed_; }

 private:
  void session(int fd) {
    {
      SocketStream link(fd);
      link.set_timeout(session_timeout);
      ReceiveResult r = receive_session(store_, link, &stopping_);
      if (r.error) {
        ++failed_;
        if (log_) log_("session failed: " + std::string(r.error->what()));
      } else {
        ++ok_;
        if (log_) log_("registered " + r.registered->str());
      }
      std::lock_guard lk(mu_);
      active_fds_.erase(fd);
    }
    std::lock_guard lk(mu_);
    --active_;
    idle_.notify_all();
  }

  Registry& store_;
  Logger log_;
  int listen_fd_ = -1;
  std::uint16_t port_ = 0;
  std::atomic<bool> stopping_{false};
  std::thread runner_;
  std::mutex mu_;
  std::condition_variable idle_;
  std::set<int> active_fds_;
  std::size_t active_ = 0;
  std::atomic<std::uint64_t> ok_{0};
  std::atomic<std::uint64_t> failed_{0};
};

inline TransferSummary push_model(const Registry& store, const Endpoint& remote, const ModelVersionId& target,
                                  const QuantizationParams& params,
                                  std::chrono::milliseconds timeout = std::chrono::seconds(30)) {
  auto link = connect_tcp(remote, timeout);
  return push_model(store, *link, target, params);
}

}  // namespace retina
