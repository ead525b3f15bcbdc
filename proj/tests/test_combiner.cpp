#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <future>
#include <numeric>
#include <set>
#include <thread>

#include "fedbot/combiner.hpp"

namespace fedbot {
namespace {

ModelWeights<float> vec(std::vector<float> v) {
  ModelWeights<float> w;
  const std::size_t n = v.size();
  w.add("w", Tensor<float>(Shape{n}, std::move(v)));
  return w;
}

float only(const ModelWeights<float>& w) { return w[0].tensor.data()[0]; }

TransformerConfig tiny() {
  return {.vocab_size = 10, .d_model = 4, .n_heads = 1, .n_layers = 1, .d_ff = 4, .max_len = 4,
          .dropout = 0, .attention_dropout = 0, .activation_dropout = 0};
}

ModelWeights<float> filled(const TransformerConfig& c, float v) {
  auto w = init_weights<float>(c, 0);
  for (auto& e : w) std::fill(e.tensor.data().begin(), e.tensor.data().end(), v);
  return w;
}

bool all_equal(const ModelWeights<float>& w, float v) {
  for (const auto& e : w)
    for (float x : e.tensor.data())
      if (x != v) return false;
  return true;
}

std::vector<std::string> ids(std::size_t n) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back("c" + std::to_string(i));
  return out;
}

TEST(SelectClients, CountsSubsetsAndDeterminism) {
  EXPECT_EQ(select_clients(ids(10), 1.0, 1, 5)->size(), 10u);
  const auto three = *select_clients(ids(10), 0.3, 1, 5);
  EXPECT_EQ(three.size(), 3u);
  const auto live = ids(10);
  for (const auto& id : three) EXPECT_NE(std::find(live.begin(), live.end(), id), live.end());
  EXPECT_EQ(three, *select_clients(ids(10), 0.3, 1, 5));
  EXPECT_EQ(select_clients(ids(10), 0.1, 4, 5)->size(), 4u);  // min_clients floor
  EXPECT_EQ(select_clients(ids(7), 0.5, 1, 5)->size(), 4u);   // ceil
  EXPECT_FALSE(select_clients(ids(2), 1.0, 3, 5));            // postponed
  EXPECT_THROW(select_clients(ids(3), 0.0, 1, 5), ConfigError);
  EXPECT_THROW(select_clients(ids(3), 1.5, 1, 5), ConfigError);
  std::set<std::vector<std::string>> seen;
  for (std::uint64_t s = 0; s < 20; ++s) seen.insert(*select_clients(ids(10), 0.3, 1, s));
  EXPECT_GT(seen.size(), 5u);
}

TEST(AggregateRound, WorkedExamples) {
  EXPECT_EQ(only(aggregate_round<float>({{"a", 5, vec({2})}, {"b", 5, vec({4})}})), 3.0f);
  EXPECT_EQ(only(aggregate_round<float>({{"a", 1, vec({0})}, {"b", 3, vec({4})}})), 3.0f);
  const auto single = vec({0.1f, -7.25f, 1e-30f});
  EXPECT_EQ(aggregate_round<float>({{"a", 17, single}}), single);
}

TEST(AggregateRound, MatchesBruteForceWeightedMean) {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<ClientUpdate<float>> ups;
    for (int k = 0; k < 5; ++k) {
      std::vector<float> a(6), b(3);
      for (auto& x : a) x = static_cast<float>(rng.normal(0, 3));
      for (auto& x : b) x = static_cast<float>(rng.normal(0, 3));
      ModelWeights<float> w;
      w.add("a", Tensor<float>(Shape{2, 3}, a));
      w.add("b", Tensor<float>(Shape{3}, b));
      ups.push_back({"c" + std::to_string(k), 1 + rng.uniform_index(1000), std::move(w)});
    }
    const auto got = aggregate_round(ups);
    for (std::size_t t = 0; t < 2; ++t) {
      for (std::size_t i = 0; i < got[t].tensor.size(); ++i) {
        long double num = 0, den = 0;
        for (const auto& u : ups) {
          num += static_cast<long double>(u.n_k) * u.weights[t].tensor.data()[i];
          den += static_cast<long double>(u.n_k);
        }
        const double want = static_cast<double>(num / den);
        EXPECT_NEAR(got[t].tensor.data()[i], want, 1e-6 * std::max(1.0, std::abs(want)));
      }
    }
  }
}

TEST(AggregateRound, ScaleConsistentAndIdempotent) {
  Rng rng(2);
  std::vector<ClientUpdate<float>> ups, scaled, same;
  const auto base = vec({1.5f, -2.0f, 3.25f});
  for (int k = 0; k < 4; ++k) {
    auto w = vec({static_cast<float>(rng.normal(0, 1)), static_cast<float>(rng.normal(0, 1)),
                  static_cast<float>(rng.normal(0, 1))});
    const std::uint64_t n = 1 + rng.uniform_index(50);
    ups.push_back({"c" + std::to_string(k), n, w});
    scaled.push_back({"c" + std::to_string(k), 7 * n, w});
    same.push_back({"c" + std::to_string(k), n, base});
  }
  const auto a = aggregate_round(ups), b = aggregate_round(scaled);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(a[0].tensor.data()[i], b[0].tensor.data()[i], 1e-7);
  EXPECT_EQ(aggregate_round(same), base);
}

TEST(AggregateRound, Errors) {
  ModelWeights<float> other;
  other.add("w", Tensor<float>(Shape{2}, 0.0f));
  try {
    aggregate_round<float>({{"alpha", 1, vec({1})}, {"beta", 1, other}});
    FAIL();
  } catch (const AggregationError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("beta"), std::string::npos);
    EXPECT_NE(msg.find("'w'"), std::string::npos);
  }
  EXPECT_THROW(aggregate_round<float>({{"a", 0, vec({1})}}), ContractError);
  EXPECT_THROW(aggregate_round<float>({}), ContractError);
}

TEST(IncrementalMerge, Algebra) {
  const auto prev = vec({-5, 100}), round = vec({0.3f, 7});
  EXPECT_EQ(incremental_merge(prev, round, 1), round);
  EXPECT_EQ(only(incremental_merge(vec({0}), vec({6}), 2)), 3.0f);
  auto w = vec({0.7f});
  for (std::uint64_t t = 1; t <= 50; ++t) EXPECT_EQ(incremental_merge(w, w, t), w);
  EXPECT_THROW(incremental_merge(prev, round, 0), ContractError);
  EXPECT_THROW(incremental_merge(vec({1}), vec({1, 2}), 2), AggregationError);
}

TEST(IncrementalMerge, RecurrenceIsTheRunningMeanOfRoundAggregates) {
  Rng rng(4);
  std::vector<std::vector<double>> aggregates;
  ModelWeights<float> global = vec({9, 9, 9, 9});
  for (std::uint64_t t = 1; t <= 5; ++t) {
    std::vector<float> a(4);
    for (auto& x : a) x = static_cast<float>(rng.normal(0, 10));
    aggregates.emplace_back(a.begin(), a.end());
    global = incremental_merge(global, vec(a), t);
    for (std::size_t i = 0; i < 4; ++i) {
      double mean = 0;
      for (const auto& r : aggregates) mean += r[i];
      mean /= static_cast<double>(aggregates.size());
      EXPECT_NEAR(global[0].tensor.data()[i], mean, 1e-6 * std::max(1.0, std::abs(mean)));
    }
  }
  EXPECT_EQ(merge(MergeMode::kReplace, vec({1}), vec({4}), 3), vec({4}));
  EXPECT_EQ(parse_merge_mode("replace"), MergeMode::kReplace);
  EXPECT_THROW(parse_merge_mode("fedprox"), ConfigError);
}

TEST(Metrics, MeansRowsAndJson) {
  UpdateMsg a{"a", 1, 10, 1.0, 40.0, 2.0, 30.0, {}};
  UpdateMsg b{"b", 1, 30, 3.0, 60.0, 4.0, 50.0, {}};
  const auto m = *mean_metrics(1, {a, b});
  EXPECT_EQ(m.mean_train_acc, 50.0);
  EXPECT_EQ(m.mean_val_acc, 40.0);
  EXPECT_EQ(m.mean_train_loss, 2.0);
  EXPECT_EQ(m.mean_val_loss, 3.0);
  EXPECT_EQ(m.n_received, 2u);
  EXPECT_FALSE(mean_metrics(1, {}));

  b.val_acc = b.val_loss = std::nan("");
  const auto skip = *mean_metrics(2, {a, b});
  EXPECT_EQ(skip.mean_val_acc, 30.0);
  EXPECT_EQ(format_metrics_row(skip), "2\t2\t50\t30\t2\t2");
  EXPECT_EQ(parse_metrics_row(format_metrics_row(skip)), skip);
  EXPECT_THROW(parse_metrics_row("1\t2\t3"), FormatError);

  RoundMetrics odd{3, 1, 0.1 + 0.2, std::nan(""), 1e-300, 2.5};
  const auto back = parse_metrics_row(format_metrics_row(odd));
  EXPECT_EQ(back.mean_train_acc, odd.mean_train_acc);
  EXPECT_TRUE(std::isnan(back.mean_val_acc));
  EXPECT_TRUE(metrics_json(odd)["mean_val_acc"].is_null());
}

// --- round loop -------------------------------------------------------------

struct Captured {
  std::vector<std::string> lines;
  LogSink sink() {
    return [this](const std::string& m) { lines.push_back(m); };
  }
  bool contains(const std::string& needle) const {
    for (const auto& l : lines)
      if (l.find(needle) != std::string::npos) return true;
    return false;
  }
};

InProcessTransport::Participant scripted(const std::string& id, std::uint64_t n, std::vector<float> per_round,
                                         const TransformerConfig& c) {
  return {id, [n] { return n; },
          [=](const RoundStartMsg& m) -> std::optional<UpdateMsg> {
            const float v = per_round.at(m.t - 1);
            return UpdateMsg{id, m.t, n, 1.0, 50.0, 1.0, 50.0, serialize_weights(filled(c, v))};
          },
          {}};
}

TEST(Coordinator, SingleRoundSingleClientInstallsThatUpdate) {
  InProcessTransport tr;
  Rng rng(1);
  auto update = init_weights<float>(tiny(), 99);
  for (auto& e : update)
    for (auto& x : e.tensor.data()) x += static_cast<float>(rng.normal(0, 1));
  tr.add({"solo", [] { return 5; },
          [&](const RoundStartMsg& m) -> std::optional<UpdateMsg> {
            return UpdateMsg{"solo", m.t, 5, 0, 0, 0, 0, serialize_weights(update)};
          },
          {}});
  Captured log;
  Coordinator c({.rounds = 1}, tiny(), tr, log.sink());
  EXPECT_EQ(c.run().weights, update);
}

TEST(Coordinator, ThreeScriptedRoundsFollowTheHandComputedRecurrence) {
  // aggregates: (1*4 + 3*0)/4 = 1, (1*8 + 3*4)/4 = 5, (1*0 + 3*4)/4 = 3
  // global: 1, 1 + (5 - 1)/2 = 3, 3 + (3 - 3)/3 = 3
  InProcessTransport tr;
  tr.add(scripted("a", 1, {4, 8, 0}, tiny()));
  tr.add(scripted("b", 3, {0, 4, 4}, tiny()));
  std::vector<RoundResultMsg> results;
  tr.add({"observer", [] { return 1; }, [](const RoundStartMsg&) { return std::nullopt; },
          [&](const RoundResultMsg& r) { results.push_back(r); }});
  Captured log;
  Coordinator c({.rounds = 3, .seed = 1}, tiny(), tr, log.sink());
  const auto res = c.run();
  EXPECT_TRUE(all_equal(res.weights, 3.0f));
  ASSERT_EQ(results.size(), 3u);
  EXPECT_TRUE(all_equal(deserialize_weights(results[0].weights), 1.0f));
  EXPECT_TRUE(all_equal(deserialize_weights(results[1].weights), 3.0f));
  EXPECT_FALSE(results[1].final_round);
  EXPECT_TRUE(results[2].final_round);
  ASSERT_EQ(res.history.size(), 3u);
  for (std::uint32_t t = 0; t < 3; ++t) EXPECT_EQ(res.history[t].metrics.t, t + 1);
  EXPECT_TRUE(log.contains("straggler 'observer'"));

  InProcessTransport tr2;
  tr2.add(scripted("a", 1, {4, 8, 0}, tiny()));
  tr2.add(scripted("b", 3, {0, 4, 4}, tiny()));
  Coordinator replace({.rounds = 3, .merge = MergeMode::kReplace}, tiny(), tr2, log.sink());
  EXPECT_TRUE(all_equal(replace.run().weights, 3.0f));  // last aggregate
}

TEST(Coordinator, StragglersAreDroppedAndNRenormalized) {
  InProcessTransport tr;
  tr.add(scripted("a", 1, {2}, tiny()));
  tr.add(scripted("b", 1, {4}, tiny()));
  tr.add({"slow", [] { return 1000; }, [](const RoundStartMsg&) { return std::nullopt; }, {}});
  Captured log;
  Coordinator c({.rounds = 1}, tiny(), tr, log.sink());
  const auto res = c.run();
  EXPECT_TRUE(all_equal(res.weights, 3.0f));
  EXPECT_EQ(res.history[0].metrics.n_received, 2u);
  EXPECT_EQ(res.history[0].contributors, (std::vector<std::string>{"a", "b"}));
}

TEST(Coordinator, EmptyRoundIsRetriedOnceThenAborts) {
  InProcessTransport tr;
  int calls = 0;
  tr.add({"mute", [] { return 1; },
          [&](const RoundStartMsg&) -> std::optional<UpdateMsg> {
            ++calls;
            return std::nullopt;
          },
          {}});
  Captured log;
  const auto path = std::filesystem::temp_directory_path() / "fedbot_empty_metrics.tsv";
  Coordinator c({.rounds = 2, .metrics_out = path.string()}, tiny(), tr, log.sink());
  EXPECT_THROW(c.run(), AggregationError);
  EXPECT_EQ(calls, 2);
  EXPECT_TRUE(log.contains("retrying once"));
  EXPECT_EQ(read_file(path), "");  // empty round: no row
  EXPECT_EQ(c.status_json()["state"], "aborted");

  InProcessTransport flaky;
  int n = 0;
  flaky.add({"flaky", [] { return 1; },
             [&](const RoundStartMsg& m) -> std::optional<UpdateMsg> {
               if (n++ == 0) return std::nullopt;
               return UpdateMsg{"flaky", m.t, 1, 0, 0, 0, 0, serialize_weights(filled(tiny(), 2.0f))};
             },
             {}});
  Coordinator retry({.rounds = 1}, tiny(), flaky, log.sink());
  EXPECT_TRUE(all_equal(retry.run().weights, 2.0f));
}

TEST(Coordinator, BadUpdatesAreDiscardedNotFatal) {
  InProcessTransport tr;
  tr.add(scripted("good", 2, {5}, tiny()));
  TransformerConfig wide = tiny();
  wide.d_model = 8;
  tr.add({"wrong-shape", [] { return 9; },
          [&](const RoundStartMsg& m) -> std::optional<UpdateMsg> {
            return UpdateMsg{"wrong-shape", m.t, 9, 0, 0, 0, 0, serialize_weights(filled(wide, 1.0f))};
          },
          {}});
  tr.add({"stale", [] { return 9; },
          [&](const RoundStartMsg& m) -> std::optional<UpdateMsg> {
            return UpdateMsg{"stale", m.t + 7, 9, 0, 0, 0, 0, serialize_weights(filled(tiny(), 1.0f))};
          },
          {}});
  tr.add({"throws", [] { return 9; },
          [](const RoundStartMsg&) -> std::optional<UpdateMsg> { throw NumericError("loss is nan"); }, {}});
  Captured log;
  Coordinator c({.rounds = 1}, tiny(), tr, log.sink());
  EXPECT_TRUE(all_equal(c.run().weights, 5.0f));
  EXPECT_TRUE(log.contains("discarding update from 'wrong-shape'"));
  EXPECT_TRUE(log.contains("'throws' declined"));
}

TEST(Coordinator, MetricsLogHistoryAndStatus) {
  InProcessTransport tr;
  for (auto [id, acc] : {std::pair{"a", 40.0}, std::pair{"b", 60.0}}) {
    tr.add({id, [] { return 10; },
            [id = std::string(id), acc](const RoundStartMsg& m) -> std::optional<UpdateMsg> {
              return UpdateMsg{id, m.t, 10, 1.0, acc, 2.0, acc / 2, serialize_weights(filled(tiny(), 1.0f))};
            },
            {}});
  }
  const auto path = std::filesystem::temp_directory_path() / "fedbot_metrics.tsv";
  Captured log;
  Coordinator c({.rounds = 3, .metrics_out = path.string()}, tiny(), tr, log.sink());
  EXPECT_EQ(c.status_json()["t"], 0);
  EXPECT_TRUE(c.status_json()["last_round"].is_null());
  c.set_global_evaluator([](const ModelWeights<float>&) { return GlobalEval{12.5, 0.5}; });
  const auto res = c.run();
  ASSERT_EQ(res.history.size(), 3u);
  EXPECT_EQ(res.history[0].metrics.mean_train_acc, 50.0);
  EXPECT_EQ(res.history[0].metrics.mean_val_acc, 25.0);

  std::ifstream in(path);
  std::vector<std::string> rows;
  for (std::string line; std::getline(in, line);) rows.push_back(line);
  ASSERT_EQ(rows.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(parse_metrics_row(rows[i]), res.history[i].metrics);
  EXPECT_EQ(rows[0], "1\t2\t50\t25\t1\t2");

  const auto s = c.status_json();
  EXPECT_EQ(s["t"], 3);
  EXPECT_EQ(s["state"], "finished");
  EXPECT_EQ(s["clients"].size(), 2u);
  EXPECT_EQ(s["history"].size(), 3u);
  EXPECT_EQ(s["last_round"]["mean_train_acc"], 50.0);
  EXPECT_EQ(s["last_round"]["global_eval"]["accuracy"], 12.5);
  EXPECT_EQ(s["last_round"]["contributors"], (nlohmann::json{"a", "b"}));
}

TEST(Coordinator, RejectsBadConfiguration) {
  InProcessTransport tr;
  Captured log;
  EXPECT_THROW(Coordinator({.rounds = 0}, tiny(), tr, log.sink()), ConfigError);
  EXPECT_THROW(Coordinator({.fraction = 0.0}, tiny(), tr, log.sink()), ConfigError);
  EXPECT_THROW(Coordinator({.min_clients = 0}, tiny(), tr, log.sink()), ConfigError);
  Coordinator c({.rounds = 1, .min_clients = 2, .enroll_timeout_ms = 50}, tiny(), tr, log.sink());
  tr.add(scripted("a", 1, {1}, tiny()));
  EXPECT_THROW(c.run(), AggregationError);
  EXPECT_TRUE(log.contains("postponed"));
}

// --- TCP transport with hand-driven clients ---------------------------------

struct RawClient {
  std::unique_ptr<TcpStream> s;
  RawClient(std::uint16_t port, const std::string& id, std::uint64_t n) : s(tcp_connect("127.0.0.1", port)) {
    s->send(JoinMsg{id, n});
  }
  template <typename M>
  M expect() {
    for (;;) {
      auto m = read_frame(*s);
      if (std::holds_alternative<HeartbeatMsg>(m)) continue;
      return std::get<M>(m);
    }
  }
};

TEST(TcpCombiner, RoundsOverSocketsWithStaleUnknownAndStragglerTraffic) {
  Captured log;
  std::mutex log_mutex;
  LogSink sink = [&](const std::string& m) {
    std::lock_guard lock(log_mutex);
    log.lines.push_back(m);
  };
  TcpServerTransport tr(0, "127.0.0.1", sink);
  Coordinator c({.rounds = 2, .min_clients = 3, .timeout_ms = 1500}, tiny(), tr, sink);
  auto fut = std::async(std::launch::async, [&] { return c.run(); });

  RawClient a(tr.port(), "a", 1), b(tr.port(), "b", 3), slow(tr.port(), "slow", 50);

  for (std::uint32_t t = 1; t <= 2; ++t) {
    const auto sa = a.expect<RoundStartMsg>();
    const auto sb = b.expect<RoundStartMsg>();
    slow.expect<RoundStartMsg>();
    EXPECT_EQ(sa.t, t);
    EXPECT_EQ(parse_config(sa.model_config), tiny());
    EXPECT_EQ(sa.weights, sb.weights);
    // stale update, unknown frame type and a heartbeat precede the real one
    a.s->send(UpdateMsg{"a", t - 1, 1, 0, 0, 0, 0, serialize_weights(filled(tiny(), 100.0f))});
    a.s->write_all(Bytes{1, 0, 0, 0, 99, 0});
    a.s->send(HeartbeatMsg{});
    a.s->send(UpdateMsg{"a", t, 1, 0, 10, 0, 0, serialize_weights(filled(tiny(), 0.0f))});
    b.s->send(UpdateMsg{"b", t, 3, 0, 20, 0, 0, serialize_weights(filled(tiny(), 4.0f))});
    // `slow` never answers
    const auto ra = a.expect<RoundResultMsg>();
    const auto rb = b.expect<RoundResultMsg>();
    slow.expect<RoundResultMsg>();
    EXPECT_EQ(ra.t, t);
    EXPECT_EQ(ra.final_round, t == 2);
    EXPECT_EQ(ra.metrics.n_received, 2u);
    EXPECT_EQ(ra.metrics.mean_train_acc, 15.0);
    EXPECT_TRUE(all_equal(deserialize_weights(rb.weights), 3.0f));
  }
  const auto res = fut.get();
  EXPECT_TRUE(all_equal(res.weights, 3.0f));
  tr.stop();
  std::lock_guard lock(log_mutex);
  EXPECT_TRUE(log.contains("straggler 'slow'"));
  EXPECT_TRUE(log.contains("ignoring frame"));
}

TEST(TcpCombiner, FrameBeforeJoinIsAProtocolError) {
  Captured log;
  std::mutex m;
  TcpServerTransport tr(0, "127.0.0.1", [&](const std::string& s) {
    std::lock_guard lock(m);
    log.lines.push_back(s);
  });
  auto s = tcp_connect("127.0.0.1", tr.port());
  s->send(HeartbeatMsg{});
  const auto reply = std::get<ErrorMsg>(read_frame(*s));
  EXPECT_EQ(reply.code, static_cast<std::uint16_t>(ErrorCode::kBadMessage));
  EXPECT_NE(reply.text.find("expected JOIN"), std::string::npos);
  EXPECT_THROW(read_frame(*s), Disconnected);
}

TEST(TcpCombiner, JoinLeaveAndRejoinTrackLiveness) {
  TcpServerTransport tr(0, "127.0.0.1", [](const std::string&) {});
  {
    RawClient a(tr.port(), "a", 5);
    ASSERT_TRUE(tr.wait_for_clients(1, std::chrono::seconds(5)));
    RawClient again(tr.port(), "a", 6);  // rejoin replaces the old connection
    for (int i = 0; i < 200 && !(tr.clients().size() == 1 && tr.clients()[0].n_k == 6); ++i)
      std::this_thread::sleep_for(std::chrono::milliseconds(10));
    ASSERT_EQ(tr.clients().size(), 1u);
    EXPECT_EQ(tr.clients()[0].n_k, 6u);
    EXPECT_FALSE(tr.next_event(Clock::now() + std::chrono::milliseconds(200)));  // a replaced socket is no departure
  }
  auto ev = tr.next_event(Clock::now() + std::chrono::seconds(5));
  ASSERT_TRUE(ev);
  EXPECT_EQ(ev->kind, FederationEvent::kLeft);
  for (int i = 0; i < 100 && !tr.clients().empty(); ++i) std::this_thread::sleep_for(std::chrono::milliseconds(10));
  EXPECT_TRUE(tr.clients().empty());
  EXPECT_FALSE(tr.wait_for_clients(1, std::chrono::milliseconds(50)));
}

}  // namespace
}  // namespace fedbot
