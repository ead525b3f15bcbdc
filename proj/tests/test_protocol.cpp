#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <thread>

#include "fedbot/net.hpp"
#include "fedbot/protocol.hpp"
#include "fedbot/transformer.hpp"

namespace fedbot {
namespace {

ModelWeights<float> random_weights(Rng& rng) {
  ModelWeights<float> w;
  const std::size_t count = rng.uniform_index(6);
  for (std::size_t t = 0; t < count; ++t) {
    std::string name = "t" + std::to_string(t) + "/";
    const std::size_t extra = rng.uniform_index(20);
    for (std::size_t i = 0; i < extra; ++i) name.push_back(static_cast<char>(33 + rng.uniform_index(90)));
    Shape shape(1 + rng.uniform_index(4));
    for (auto& d : shape) d = 1 + rng.uniform_index(5);
    Tensor<float> x(shape);
    for (auto& v : x.data()) {
      // arbitrary bit patterns, including NaN payloads and infinities
      v = std::bit_cast<float>(static_cast<std::uint32_t>(rng.next_u64()));
    }
    w.add(name, std::move(x));
  }
  return w;
}

bool bit_identical(const ModelWeights<float>& a, const ModelWeights<float>& b) {
  if (!a.same_layout(b)) return false;
  for (std::size_t t = 0; t < a.size(); ++t)
    if (std::memcmp(a[t].tensor.data().data(), b[t].tensor.data().data(), 4 * a[t].tensor.size()) != 0) return false;
  return true;
}

TEST(WeightBlob, LayoutArithmetic) {
  EXPECT_EQ(serialize_weights({}).size(), kBlobHeaderSize);
  EXPECT_EQ(serialize_weights({}), (Bytes{'F', 'B', 'W', '1', 1, 0, 0, 0, 0, 0}));
  ModelWeights<float> w;
  w.add("a", Tensor<float>(Shape{2, 2}, std::vector<float>{1.0f, 2.0f, 3.0f, 4.0f}));
  const auto blob = serialize_weights(w);
  EXPECT_EQ(blob.size(), 10u + (2 + 1) + 1 + 8 + 16);
  EXPECT_EQ(blob[10], 1);    // name_len low byte
  EXPECT_EQ(blob[13], 2);    // ndim
  EXPECT_EQ(blob[14], 2);    // dims[0] low byte
  EXPECT_EQ(blob[24], 0x80); // 1.0f = 0x3f800000, little-endian
  EXPECT_EQ(blob[25], 0x3f);
}

TEST(WeightBlob, RandomRoundTripsAreBitExactAndDeterministic) {
  Rng rng(3);
  for (int i = 0; i < 300; ++i) {
    auto w = random_weights(rng);
    const auto blob = serialize_weights(w);
    EXPECT_EQ(blob, serialize_weights(w));
    EXPECT_TRUE(bit_identical(deserialize_weights(blob), w));
  }
  auto model = init_weights<float>(TransformerConfig{.vocab_size = 40, .d_model = 8, .n_heads = 2, .n_layers = 1,
                                                     .d_ff = 16},
                                   1);
  EXPECT_TRUE(bit_identical(deserialize_weights(serialize_weights(model)), model));
}

TEST(WeightBlob, CorruptionIsRejected) {
  ModelWeights<float> w;
  w.add("a", Tensor<float>(Shape{2, 2}, 1.5f));
  const auto blob = serialize_weights(w);

  auto bad = blob;
  bad[0] = 'X';
  EXPECT_THROW(deserialize_weights(bad), FormatError);

  auto short1 = blob;
  short1.pop_back();
  try {
    deserialize_weights(short1);
    FAIL();
  } catch (const TruncationError& e) {
    EXPECT_EQ(e.offset(), blob.size() - 16);  // payload start
    EXPECT_NE(std::string(e.what()).find("offset"), std::string::npos);
  }
  for (std::size_t cut = 0; cut < blob.size(); ++cut)
    EXPECT_THROW(deserialize_weights(std::span(blob).first(cut)), TruncationError) << cut;

  auto trailing = blob;
  trailing.push_back(0);
  EXPECT_THROW(deserialize_weights(trailing), FormatError);

  auto version = blob;
  version[4] = 2;
  EXPECT_THROW(deserialize_weights(version), BlobVersionError);

  auto zero_dim = blob;
  zero_dim[14] = 0;
  EXPECT_THROW(deserialize_weights(zero_dim), FormatError);

  auto huge = blob;  // dims 0xFFFFFFFF x 2 must fail fast, not allocate
  huge[14] = huge[15] = huge[16] = huge[17] = 0xFF;
  EXPECT_THROW(deserialize_weights(huge), TruncationError);

  ModelWeights<float> two;
  two.add("a", Tensor<float>(Shape{1}, 1.0f));
  two.add("b", Tensor<float>(Shape{1}, 1.0f));
  auto dup = serialize_weights(two);
  dup[10 + 2 + 1 + 1 + 4 + 4 + 2] = 'a';
  EXPECT_THROW(deserialize_weights(dup), FormatError);
}

TEST(WeightBlob, DeskScaleSizeIsFourBytesPerParameterPlusHeaders) {
  TransformerConfig c;  // defaults
  const auto blob = serialize_weights(init_weights<float>(c, 0));
  const double ideal = 4.0 * static_cast<double>(count_parameters(c));
  EXPECT_GE(static_cast<double>(blob.size()), ideal);
  EXPECT_LE(static_cast<double>(blob.size()), 1.05 * ideal);
}

std::vector<Message> sample_messages() {
  ModelWeights<float> w;
  w.add("x", Tensor<float>(Shape{3}, 0.25f));
  const Bytes blob = serialize_weights(w);
  return {JoinMsg{"client_7", 99},
          RoundStartMsg{3, 2, 0.05, 16, 60000, "d_model = 8\n", blob},
          UpdateMsg{"client_7", 3, 100, 1.25, 40.0, 1.5, 35.0, blob},
          RoundResultMsg{3, true, RoundMetrics{3, 2, 50.0, 45.0, 1.0, 1.1}, blob},
          HeartbeatMsg{},
          ErrorMsg{1, "version mismatch"}};
}

TEST(Framing, EveryMessageRoundTrips) {
  for (const auto& m : sample_messages()) {
    MemoryStream s;
    write_frame(s, m);
    const auto& bytes = s.data();
    const std::uint32_t len = bytes[0] | bytes[1] << 8 | bytes[2] << 16 | bytes[3] << 24;
    EXPECT_EQ(len, bytes.size() - 5);
    EXPECT_EQ(bytes[4], static_cast<std::uint8_t>(type_of(m)));
    EXPECT_EQ(read_frame(s), m);
  }
  MemoryStream hb;
  write_frame(hb, HeartbeatMsg{});
  EXPECT_EQ(hb.data(), (Bytes{0, 0, 0, 0, 5}));
}

TEST(Framing, BackToBackAndPartialReads) {
  MemoryStream s;
  const auto msgs = sample_messages();
  for (const auto& m : msgs) write_frame(s, m);
  s.set_chunk(1);
  for (const auto& m : msgs) EXPECT_EQ(read_frame(s), m);
  EXPECT_THROW(read_frame(s), Disconnected);
}

TEST(Framing, OversizeUnknownAndTruncatedFrames) {
  MemoryStream big(Bytes{0x00, 0x00, 0x00, 0x40, 5});  // 1 GB declared, no body present
  EXPECT_THROW(read_frame(big), ProtocolError);

  MemoryStream unknown;
  unknown.write_all(Bytes{2, 0, 0, 0, 42, 0xAA, 0xBB});
  write_frame(unknown, HeartbeatMsg{});
  EXPECT_THROW(read_frame(unknown), UnknownMessageType);
  EXPECT_EQ(read_frame(unknown), Message(HeartbeatMsg{}));  // still in sync

  MemoryStream mid;
  write_frame(mid, JoinMsg{"abc", 1});
  Bytes cut(mid.data().begin(), mid.data().end() - 3);
  MemoryStream partial(cut);
  EXPECT_THROW(read_frame(partial), Disconnected);

  MemoryStream malformed(Bytes{1, 0, 0, 0, 1, 0});  // JOIN with a 1-byte body
  EXPECT_THROW(read_frame(malformed), ProtocolError);
  MemoryStream extra(Bytes{1, 0, 0, 0, 5, 0});  // HEARTBEAT with a stray byte
  EXPECT_THROW(read_frame(extra), ProtocolError);
}

TEST(Tcp, FramesCrossALoopbackConnection) {
  TcpListener listener(0, "127.0.0.1");
  const auto msgs = sample_messages();
  std::thread server([&] {
    auto conn = listener.accept(5000);
    ASSERT_TRUE(conn);
    for (std::size_t i = 0; i < msgs.size(); ++i) conn->send(read_frame(*conn));  // echo
  });
  auto client = tcp_connect("127.0.0.1", listener.port());
  for (const auto& m : msgs) client->send(m);
  for (const auto& m : msgs) EXPECT_EQ(read_frame(*client), m);
  server.join();
  EXPECT_THROW(read_frame(*client), Disconnected);
}

TEST(Tcp, PortsAndAddresses) {
  EXPECT_EQ(parse_host_port("example.org:7177"), (std::pair<std::string, std::uint16_t>{"example.org", 7177}));
  EXPECT_EQ(parse_host_port("9000").first, "127.0.0.1");
  EXPECT_THROW(parse_host_port("host:notaport"), ConfigError);
  ::unsetenv("FEDBOT_PORT");
  EXPECT_EQ(default_port(), 7177);
  ::setenv("FEDBOT_PORT", "9100", 1);
  EXPECT_EQ(default_port(), 9100);
  ::setenv("FEDBOT_PORT", "x", 1);
  EXPECT_THROW(default_port(), ConfigError);
  ::unsetenv("FEDBOT_PORT");
  EXPECT_THROW(tcp_connect("127.0.0.1", 1), Disconnected);
}

}  // namespace
}  // namespace fedbot
