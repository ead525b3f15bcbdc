#pragma once

// WeightBlob serialization and the framed client/combiner messages.
//
// Frame:   u32 body length | u8 type tag | body          (little-endian)
// Blob:    "FBW1" | u16 version | u32 count | per tensor:
//          u16 name_len | name | u8 ndim | u32 dims... | f32 payload

#include <bit>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <string_view>
#include <type_traits>
#include <unordered_set>
#include <variant>
#include <vector>

#include "fedbot/error.hpp"
#include "fedbot/tensor.hpp"

namespace fedbot {

using Bytes = std::vector<std::uint8_t>;

inline constexpr char kBlobMagic[4] = {'F', 'B', 'W', '1'};
inline constexpr std::uint16_t kBlobVersion = 1;
inline constexpr std::size_t kBlobHeaderSize = 10;
inline constexpr std::size_t kMaxFrameBody = std::size_t{512} << 20;

// ---------------------------------------------------------------------------
// Little-endian primitives, independent of host byte order

class ByteWriter {
 public:
  explicit ByteWriter(Bytes& out) : out_(out) {}

  template <typename U>
  void uint(U v) {
    static_assert(std::is_unsigned_v<U>);
    for (std::size_t i = 0; i < sizeof(U); ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float v) { uint(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { uint(std::bit_cast<std::uint64_t>(v)); }
  void raw(std::span<const std::uint8_t> b) { out_.insert(out_.end(), b.begin(), b.end()); }
  void raw(std::string_view s) { out_.insert(out_.end(), s.begin(), s.end()); }
  void str(std::string_view s) {
    if (s.size() > 0xFFFF) throw FormatError("string longer than 65535 bytes");
    uint(static_cast<std::uint16_t>(s.size()));
    raw(s);
  }
  void bytes32(std::span<const std::uint8_t> b) {
    uint(static_cast<std::uint32_t>(b.size()));
    raw(b);
  }

 private:
  Bytes& out_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> in, std::size_t base_offset = 0) : in_(in), base_(base_offset) {}

  std::size_t offset() const noexcept { return base_ + pos_; }
  std::size_t remaining() const noexcept { return in_.size() - pos_; }

  void need(std::size_t n, const char* what) const {
    if (remaining() < n)
      throw TruncationError(std::string("truncated ") + what + ": need " + std::to_string(n) + " bytes, have " +
                                std::to_string(remaining()),
                            offset());
  }
  template <typename U>
  U uint(const char* what) {
    need(sizeof(U), what);
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<U>(in_[pos_ + i]) << (8 * i));
    pos_ += sizeof(U);
    return v;
  }
  float f32(const char* what) { return std::bit_cast<float>(uint<std::uint32_t>(what)); }
  double f64(const char* what) { return std::bit_cast<double>(uint<std::uint64_t>(what)); }
  std::span<const std::uint8_t> raw(std::size_t n, const char* what) {
    need(n, what);
    auto s = in_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  std::string str(const char* what) {
    const auto n = uint<std::uint16_t>(what);
    auto s = raw(n, what);
    return {s.begin(), s.end()};
  }
  std::span<const std::uint8_t> bytes32(const char* what) { return raw(uint<std::uint32_t>(what), what); }

 private:
  std::span<const std::uint8_t> in_;
  std::size_t base_;
  std::size_t pos_ = 0;
};

// ---------------------------------------------------------------------------
// WeightBlob

inline void write_weights(ByteWriter& w, const ModelWeights<float>& weights) {
  w.raw(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(kBlobMagic), 4));
  w.uint(kBlobVersion);
  w.uint(static_cast<std::uint32_t>(weights.size()));
  for (const auto& e : weights) {
    w.str(e.name);
    const auto& shape = e.tensor.shape();
    if (shape.empty() || shape.size() > 255) throw FormatError("tensor '" + e.name + "' has unsupported rank");
    w.uint(static_cast<std::uint8_t>(shape.size()));
    for (auto d : shape) {
      if (d > 0xFFFFFFFFu) throw FormatError("tensor '" + e.name + "' dimension exceeds u32");
      w.uint(static_cast<std::uint32_t>(d));
    }
    for (float v : e.tensor.data()) w.f32(v);
  }
}

inline Bytes serialize_weights(const ModelWeights<float>& weights) {
  Bytes out;
  std::size_t size = kBlobHeaderSize;
  for (const auto& e : weights) size += 2 + e.name.size() + 1 + 4 * e.tensor.rank() + 4 * e.tensor.size();
  out.reserve(size);
  ByteWriter w(out);
  write_weights(w, weights);
  return out;
}

class BlobVersionError : public FormatError {
 public:
  explicit BlobVersionError(std::uint16_t v)
      : FormatError("unsupported WeightBlob version " + std::to_string(v)), version(v) {}
  std::uint16_t version;
};

inline ModelWeights<float> read_weights(ByteReader& r) {
  const std::size_t start = r.offset();
  auto magic = r.raw(4, "magic");
  if (std::memcmp(magic.data(), kBlobMagic, 4) != 0)
    throw FormatError("bad WeightBlob magic at byte offset " + std::to_string(start));
  const auto version = r.uint<std::uint16_t>("version");
  if (version != kBlobVersion) throw BlobVersionError(version);
  const auto count = r.uint<std::uint32_t>("tensor count");
  ModelWeights<float> out;
  for (std::uint32_t t = 0; t < count; ++t) {
    std::string name = r.str("tensor name");
    const auto ndim = r.uint<std::uint8_t>("rank");
    if (ndim == 0) throw FormatError("tensor '" + name + "' has rank 0");
    Shape shape(ndim);
    std::size_t n = 1;
    for (auto& d : shape) {
      d = r.uint<std::uint32_t>("dimension");
      if (d == 0) throw FormatError("tensor '" + name + "' has a zero dimension");
      if (__builtin_mul_overflow(n, std::size_t{d}, &n)) n = static_cast<std::size_t>(-1);
    }
    // compare before allocating; a hostile count must not trigger a huge vector
    if (n > r.remaining() / 4) r.need(n > static_cast<std::size_t>(-1) / 4 ? r.remaining() + 1 : 4 * n, "tensor payload");
    std::vector<float> data(n);
    for (auto& v : data) v = r.f32("tensor payload");
    if (out.contains(name)) throw FormatError("duplicate tensor name '" + name + "'");
    out.add(std::move(name), Tensor<float>(std::move(shape), std::move(data)));
  }
  return out;
}

inline ModelWeights<float> deserialize_weights(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  auto w = read_weights(r);
  if (r.remaining() != 0)
    throw FormatError(std::to_string(r.remaining()) + " trailing bytes after WeightBlob at offset " +
                      std::to_string(r.offset()));
  return w;
}

// ---------------------------------------------------------------------------
// Messages

enum class MessageType : std::uint8_t {
  kJoin = 1,
  kRoundStart = 2,
  kUpdate = 3,
  kRoundResult = 4,
  kHeartbeat = 5,
  kError = 6,
};

struct JoinMsg {
  std::string client_id;
  std::uint64_t n_k = 0;
  bool operator==(const JoinMsg&) const = default;
};

// Zero-valued hyperparameters leave the choice to the client's own settings.
struct RoundStartMsg {
  std::uint32_t t = 0;
  std::uint32_t epochs = 0;
  double lr = 0.0;
  std::uint32_t batch_size = 0;
  std::uint32_t deadline_ms = 0;
  std::string model_config;  // key = value text
  Bytes weights;             // WeightBlob
  bool operator==(const RoundStartMsg&) const = default;
};

struct UpdateMsg {
  std::string client_id;
  std::uint32_t t = 0;
  std::uint64_t n_k = 0;
  double train_loss = 0.0;
  double train_acc = 0.0;
  double val_loss = 0.0;  // NaN when the client has no validation data
  double val_acc = 0.0;
  Bytes weights;
  bool operator==(const UpdateMsg&) const = default;
};

struct RoundMetrics {
  std::uint32_t t = 0;
  std::uint32_t n_received = 0;
  double mean_train_acc = 0.0;
  double mean_val_acc = 0.0;
  double mean_train_loss = 0.0;
  double mean_val_loss = 0.0;
  bool operator==(const RoundMetrics&) const = default;
};

struct RoundResultMsg {
  std::uint32_t t = 0;
  bool final_round = false;
  RoundMetrics metrics;
  Bytes weights;
  bool operator==(const RoundResultMsg&) const = default;
};

struct HeartbeatMsg {
  bool operator==(const HeartbeatMsg&) const = default;
};

enum class ErrorCode : std::uint16_t {
  kUnknown = 0,
  kVersionMismatch = 1,
  kBadMessage = 2,
  kTrainingFailed = 3,
  kRejected = 4,
};

struct ErrorMsg {
  std::uint16_t code = 0;
  std::string text;
  bool operator==(const ErrorMsg&) const = default;
};

using Message = std::variant<JoinMsg, RoundStartMsg, UpdateMsg, RoundResultMsg, HeartbeatMsg, ErrorMsg>;

inline MessageType type_of(const Message& m) { return static_cast<MessageType>(m.index() + 1); }

inline const char* type_name(MessageType t) {
  switch (t) {
    case MessageType::kJoin: return "JOIN";
    case MessageType::kRoundStart: return "ROUND_START";
    case MessageType::kUpdate: return "UPDATE";
    case MessageType::kRoundResult: return "ROUND_RESULT";
    case MessageType::kHeartbeat: return "HEARTBEAT";
    case MessageType::kError: return "ERROR";
  }
  return "?";
}

inline Bytes encode_body(const Message& msg) {
  Bytes body;
  ByteWriter w(body);
  std::visit(
      [&](const auto& m) {
        using M = std::decay_t<decltype(m)>;
        if constexpr (std::is_same_v<M, JoinMsg>) {
          w.str(m.client_id);
          w.uint(m.n_k);
        } else if constexpr (std::is_same_v<M, RoundStartMsg>) {
          w.uint(m.t);
          w.uint(m.epochs);
          w.f64(m.lr);
          w.uint(m.batch_size);
          w.uint(m.deadline_ms);
          w.str(m.model_config);
          w.bytes32(m.weights);
        } else if constexpr (std::is_same_v<M, UpdateMsg>) {
          w.str(m.client_id);
          w.uint(m.t);
          w.uint(m.n_k);
          w.f64(m.train_loss);
          w.f64(m.train_acc);
          w.f64(m.val_loss);
          w.f64(m.val_acc);
          w.bytes32(m.weights);
        } else if constexpr (std::is_same_v<M, RoundResultMsg>) {
          w.uint(m.t);
          w.uint(static_cast<std::uint8_t>(m.final_round ? 1 : 0));
          w.uint(m.metrics.t);
          w.uint(m.metrics.n_received);
          w.f64(m.metrics.mean_train_acc);
          w.f64(m.metrics.mean_val_acc);
          w.f64(m.metrics.mean_train_loss);
          w.f64(m.metrics.mean_val_loss);
          w.bytes32(m.weights);
        } else if constexpr (std::is_same_v<M, ErrorMsg>) {
          w.uint(m.code);
          w.str(m.text);
        }
      },
      msg);
  return body;
}

/// Unknown type tag. The frame was consumed whole, so the stream is still
/// in sync and the connection may continue.
class UnknownMessageType : public ProtocolError {
 public:
  explicit UnknownMessageType(std::uint8_t tag)
      : ProtocolError("unknown message type tag " + std::to_string(tag)), tag(tag) {}
  std::uint8_t tag;
};

inline Message decode_body(std::uint8_t tag, std::span<const std::uint8_t> body) {
  ByteReader r(body, 5);
  Message out;
  try {
    switch (static_cast<MessageType>(tag)) {
      case MessageType::kJoin: {
        JoinMsg m;
        m.client_id = r.str("client_id");
        m.n_k = r.uint<std::uint64_t>("n_k");
        out = std::move(m);
        break;
      }
      case MessageType::kRoundStart: {
        RoundStartMsg m;
        m.t = r.uint<std::uint32_t>("t");
        m.epochs = r.uint<std::uint32_t>("epochs");
        m.lr = r.f64("lr");
        m.batch_size = r.uint<std::uint32_t>("batch_size");
        m.deadline_ms = r.uint<std::uint32_t>("deadline_ms");
        m.model_config = r.str("model_config");
        auto blob = r.bytes32("weights");
        m.weights.assign(blob.begin(), blob.end());
        out = std::move(m);
        break;
      }
      case MessageType::kUpdate: {
        UpdateMsg m;
        m.client_id = r.str("client_id");
        m.t = r.uint<std::uint32_t>("t");
        m.n_k = r.uint<std::uint64_t>("n_k");
        m.train_loss = r.f64("train_loss");
        m.train_acc = r.f64("train_acc");
        m.val_loss = r.f64("val_loss");
        m.val_acc = r.f64("val_acc");
        auto blob = r.bytes32("weights");
        m.weights.assign(blob.begin(), blob.end());
        out = std::move(m);
        break;
      }
      case MessageType::kRoundResult: {
        RoundResultMsg m;
        m.t = r.uint<std::uint32_t>("t");
        m.final_round = r.uint<std::uint8_t>("final flag") != 0;
        m.metrics.t = r.uint<std::uint32_t>("metrics.t");
        m.metrics.n_received = r.uint<std::uint32_t>("n_received");
        m.metrics.mean_train_acc = r.f64("mean_train_acc");
        m.metrics.mean_val_acc = r.f64("mean_val_acc");
        m.metrics.mean_train_loss = r.f64("mean_train_loss");
        m.metrics.mean_val_loss = r.f64("mean_val_loss");
        auto blob = r.bytes32("weights");
        m.weights.assign(blob.begin(), blob.end());
        out = std::move(m);
        break;
      }
      case MessageType::kHeartbeat:
        out = HeartbeatMsg{};
        break;
      case MessageType::kError: {
        ErrorMsg m;
        m.code = r.uint<std::uint16_t>("code");
        m.text = r.str("text");
        out = std::move(m);
        break;
      }
      default:
        throw UnknownMessageType(tag);
    }
  } catch (const TruncationError& e) {
    throw ProtocolError(std::string("malformed ") + type_name(static_cast<MessageType>(tag)) + " body: " + e.what());
  }
  if (r.remaining() != 0)
    throw ProtocolError(std::string("malformed ") + type_name(static_cast<MessageType>(tag)) + " body: " +
                        std::to_string(r.remaining()) + " trailing bytes");
  return out;
}

inline Bytes encode_frame(const Message& msg) {
  const Bytes body = encode_body(msg);
  if (body.size() > kMaxFrameBody) throw ProtocolError("frame body exceeds 512 MB");
  Bytes out;
  out.reserve(5 + body.size());
  ByteWriter w(out);
  w.uint(static_cast<std::uint32_t>(body.size()));
  w.uint(static_cast<std::uint8_t>(type_of(msg)));
  w.raw(body);
  return out;
}

// ---------------------------------------------------------------------------
// Streams

class ByteStream {
 public:
  virtual ~ByteStream() = default;
  virtual void write_all(std::span<const std::uint8_t> bytes) = 0;
  // Reads up to bytes.size(); returns 0 only at end of stream.
  virtual std::size_t read_some(std::span<std::uint8_t> bytes) = 0;
};

/// Fills `buf` completely. Returns false on a clean end of stream before
/// the first byte; throws Disconnected if the stream ends part way.
inline bool read_exact(ByteStream& s, std::span<std::uint8_t> buf) {
  std::size_t got = 0;
  while (got < buf.size()) {
    const std::size_t n = s.read_some(buf.subspan(got));
    if (n == 0) {
      if (got == 0) return false;
      throw Disconnected("stream ended mid-frame after " + std::to_string(got) + " of " +
                         std::to_string(buf.size()) + " bytes");
    }
    got += n;
  }
  return true;
}

inline void write_frame(ByteStream& s, const Message& msg) { s.write_all(encode_frame(msg)); }

/// Throws Disconnected at end of stream, ProtocolError on an oversize or
/// malformed frame (the caller should close the connection), and
/// UnknownMessageType for an unknown tag (the stream stays usable).
inline Message read_frame(ByteStream& s) {
  std::uint8_t header[5];
  if (!read_exact(s, header)) throw Disconnected("peer closed the connection");
  const std::uint32_t len = static_cast<std::uint32_t>(header[0]) | static_cast<std::uint32_t>(header[1]) << 8 |
                            static_cast<std::uint32_t>(header[2]) << 16 | static_cast<std::uint32_t>(header[3]) << 24;
  if (len > kMaxFrameBody)
    throw ProtocolError("frame of " + std::to_string(len) + " bytes exceeds the 512 MB limit");
  Bytes body(len);
  if (len > 0 && !read_exact(s, body)) throw Disconnected("stream ended mid-frame before the body");
  return decode_body(header[4], body);
}

/// In-memory stream, used for tests and for measuring encoded sizes.
class MemoryStream : public ByteStream {
 public:
  MemoryStream() = default;
  explicit MemoryStream(Bytes data) : data_(std::move(data)) {}
  void write_all(std::span<const std::uint8_t> b) override { data_.insert(data_.end(), b.begin(), b.end()); }
  std::size_t read_some(std::span<std::uint8_t> b) override {
    const std::size_t n = std::min(b.size(), std::min(chunk_, data_.size() - pos_));
    std::memcpy(b.data(), data_.data() + pos_, n);
    pos_ += n;
    return n;
  }
  // Caps each read to exercise partial-read handling.
  void set_chunk(std::size_t c) { chunk_ = c; }
  const Bytes& data() const { return data_; }

 private:
  Bytes data_;
  std::size_t pos_ = 0;
  std::size_t chunk_ = static_cast<std::size_t>(-1);
};

}  // namespace fedbot
