#include <gtest/gtest.h>

#include <cstring>

#include <json.hpp>

#include "eegtta/adapter.hpp"
#include "test_util.hpp"

using namespace eegtta;
using test::random_tensor;

namespace {

Network<Real> source_net(std::uint64_t seed) {
  auto net = make_eegnet<Real>(test::small_eegnet_config());
  glorot_init(net, seed);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, 0.3);
  for (auto* bn : net.bn_states())
    for (std::size_t c = 0; c < bn->channels(); ++c) {
      bn->running_mean[c] = static_cast<Real>(nd(rng));
      bn->running_var[c] = static_cast<Real>(1.0 + std::abs(nd(rng)));
    }
  return net;
}

std::vector<Tensor4<Real>> stream(std::size_t n, std::uint64_t seed) {
  std::vector<Tensor4<Real>> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(random_tensor<Real>({1, 1, 4, 64}, seed + i));
  return out;
}

std::vector<Real> all_params(const Network<Real>& net, GradScope scope) {
  std::vector<Real> v;
  for (auto p : net.parameters(scope)) v.insert(v.end(), p.begin(), p.end());
  return v;
}

std::vector<Real> running_stats(const Network<Real>& net) {
  std::vector<Real> v;
  for (const auto* bn : net.bn_states()) {
    v.insert(v.end(), bn->running_mean.begin(), bn->running_mean.end());
    v.insert(v.end(), bn->running_var.begin(), bn->running_var.end());
  }
  return v;
}

bool bit_equal(const std::vector<Real>& a, const std::vector<Real>& b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(Real)) == 0;
}

}  // namespace

TEST(Adapter, ZeroLossNoPlFollowsSourceClassifier) {
  const auto net = source_net(1);
  AdaptConfig cfg;
  cfg.variant = Variant::NoPL;
  cfg.loss.lambda_ent = 0;
  cfg.loss.lambda_eng = 0;
  cfg.weight_decay = 0;
  Adapter a(net, cfg);
  for (const auto& x : stream(30, 10)) {
    const auto p = a.adapt_step(x);
    const auto ref = net.forward(x, false);
    EXPECT_EQ(p.label, ref.logits(0, 1) > ref.logits(0, 0) ? 1 : 0);
    EXPECT_FALSE(p.diag.prototype_head);
  }
  EXPECT_TRUE(bit_equal(all_params(a.network(), GradScope::AllParams), all_params(net, GradScope::AllParams)));
}

TEST(Adapter, NoBnUpdatesLeavesNetworkUntouched) {
  const auto net = source_net(2);
  AdaptConfig cfg;
  cfg.variant = Variant::NoBnUpdates;
  Adapter a(net, cfg);
  const auto before = all_params(net, GradScope::AllParams);
  const auto first = a.adapt_step(stream(1, 5)[0]);
  EXPECT_TRUE(first.diag.prototype_head);
  const auto p0 = a.prototypes()->protos.data;
  for (const auto& x : stream(40, 20)) a.adapt_step(x);
  EXPECT_TRUE(bit_equal(all_params(a.network(), GradScope::AllParams), before));
  EXPECT_TRUE(bit_equal(running_stats(a.network()), running_stats(net)));
  EXPECT_NE(a.prototypes()->protos.data, p0);
}

TEST(Adapter, FullVariantFreezesEverythingButBnAffine) {
  const auto net = source_net(3);
  Adapter a(net, AdaptConfig{});
  for (const auto& x : stream(100, 100)) a.adapt_step(x);
  EXPECT_TRUE(bit_equal(running_stats(a.network()), running_stats(net)));
  EXPECT_EQ(a.network().frozen_hash(), net.frozen_hash());
  EXPECT_FALSE(bit_equal(all_params(a.network(), GradScope::BnAffineOnly), all_params(net, GradScope::BnAffineOnly)));
}

TEST(Adapter, TrackRunningMovesStatistics) {
  const auto net = source_net(4);
  AdaptConfig cfg;
  cfg.bn_mode = BnMode::TrackRunning;
  Adapter a(net, cfg);
  for (const auto& x : stream(5, 7)) a.adapt_step(x);
  EXPECT_FALSE(bit_equal(running_stats(a.network()), running_stats(net)));
}

TEST(Adapter, BankHoldsCapacityFromFirstStep) {
  Adapter a(source_net(5), AdaptConfig{});
  const auto s = stream(3, 1);
  const auto p1 = a.adapt_step(s[0]);
  EXPECT_EQ(p1.diag.bank_size, 16u);
  EXPECT_EQ(p1.step, 1u);
  ASSERT_TRUE(a.prototypes().has_value());
  const auto p2 = a.adapt_step(s[1]);
  EXPECT_EQ(p2.diag.bank_size, 16u);
  EXPECT_EQ(p2.diag.eviction.candidate_ids.size(), 17u);
  EXPECT_TRUE(p2.diag.eviction.evicted_id.has_value());
}

TEST(Adapter, NoMemoryVariantSkipsBank) {
  AdaptConfig cfg;
  cfg.variant = Variant::NoMemoryNoPL;
  Adapter a(source_net(6), cfg);
  for (const auto& x : stream(3, 2)) {
    const auto p = a.adapt_step(x);
    EXPECT_EQ(p.diag.bank_size, 0u);
    EXPECT_FALSE(p.diag.prototype_head);
  }
  EXPECT_TRUE(a.bank().empty());
  EXPECT_FALSE(a.prototypes().has_value());
}

TEST(Adapter, RejectsBadInput) {
  Adapter a(source_net(7), AdaptConfig{});
  EXPECT_THROW(a.adapt_step(Tensor4<Real>({1, 1, 4, 32})), std::invalid_argument);
  EXPECT_THROW(a.adapt_step(Tensor4<Real>({2, 1, 4, 64})), std::invalid_argument);
  Tensor4<Real> bad({1, 1, 4, 64});
  bad(0, 0, 1, 1) = std::numeric_limits<Real>::infinity();
  EXPECT_THROW(a.adapt_step(bad), std::invalid_argument);
  Adapter empty;
  EXPECT_THROW(empty.adapt_step(Tensor4<Real>({1, 1, 4, 64})), std::logic_error);
}

TEST(Adapter, RejectsBadConfig) {
  AdaptConfig cfg;
  cfg.steps_per_sample = 0;
  EXPECT_THROW(Adapter(source_net(1), cfg), std::invalid_argument);
  cfg = {};
  cfg.loss.m_in = 0;
  EXPECT_THROW(Adapter(source_net(1), cfg), std::invalid_argument);
  cfg = {};
  cfg.alpha = Real(1.5);
  EXPECT_THROW(Adapter(source_net(1), cfg), std::invalid_argument);
}

TEST(RunStream, OneEntryPerSegmentInOrder) {
  Adapter a(source_net(8), AdaptConfig{});
  const auto s = stream(12, 30);
  std::vector<int> labels(12);
  for (std::size_t i = 0; i < 12; ++i) labels[i] = i % 3 == 0;
  const auto log = run_stream(a, s, labels, {true});
  ASSERT_EQ(log.entries.size(), 12u);
  ASSERT_EQ(log.features.size(), 12u);
  for (std::size_t i = 0; i < 12; ++i) {
    EXPECT_EQ(log.entries[i].step, i + 1);
    EXPECT_EQ(*log.entries[i].truth, labels[i]);
    EXPECT_NEAR(log.entries[i].probs[0] + log.entries[i].probs[1], 1.0, 1e-5);
    EXPECT_GE(log.entries[i].latency_ms, 0.0);
    EXPECT_EQ(log.features[i].size(), 16u);
  }
}

TEST(RunStream, DeterministicForFixedSeed) {
  const auto net = source_net(9);
  const auto s = stream(15, 40);
  AdaptConfig cfg;
  cfg.seed = 3;
  Adapter a(net, cfg), b(net, cfg);
  const auto la = run_stream(a, s), lb = run_stream(b, s);
  for (std::size_t i = 0; i < s.size(); ++i) {
    EXPECT_EQ(la.entries[i].predicted, lb.entries[i].predicted);
    EXPECT_TRUE(bit_equal(la.entries[i].probs, lb.entries[i].probs));
    EXPECT_EQ(la.entries[i].loss_total, lb.entries[i].loss_total);
  }
  EXPECT_TRUE(bit_equal(all_params(a.network(), GradScope::BnAffineOnly),
                        all_params(b.network(), GradScope::BnAffineOnly)));
}

TEST(RunStream, SingleSegmentAndEmptyStream) {
  Adapter a(source_net(10), AdaptConfig{});
  const auto s = stream(1, 1);
  const auto log = run_stream(a, s);
  ASSERT_EQ(log.entries.size(), 1u);
  EXPECT_FALSE(log.entries[0].truth.has_value());
  EXPECT_EQ(a.bank().size(), 16u);
  EXPECT_THROW(run_stream(a, std::span<const Tensor4<Real>>{}), std::invalid_argument);
  const int wrong[] = {0, 1};
  EXPECT_THROW(run_stream(a, s, wrong), std::invalid_argument);
}

TEST(RunStream, SourceOnlyIsSideEffectFree) {
  const auto net = source_net(11);
  const auto hash = net.frozen_hash();
  const auto affine = all_params(net, GradScope::BnAffineOnly);
  const auto s = stream(6, 50);
  const auto log = run_source_only(net, s);
  EXPECT_EQ(net.frozen_hash(), hash);
  EXPECT_TRUE(bit_equal(all_params(net, GradScope::BnAffineOnly), affine));
  for (std::size_t i = 0; i < s.size(); ++i) {
    const auto r = net.forward(s[i], false);
    EXPECT_EQ(log.entries[i].predicted, r.logits(0, 1) > r.logits(0, 0) ? 1 : 0);
  }
}

TEST(PredictionLog, JsonLineFields) {
  LogEntry e;
  e.step = 4;
  e.truth = 1;
  e.predicted = 0;
  e.probs = {0.75f, 0.25f};
  e.prototype_head = false;
  const auto j = nlohmann::json::parse(to_json_line(e));
  EXPECT_EQ(j["step"], 4);
  EXPECT_EQ(j["true_label"], 1);
  EXPECT_EQ(j["predicted"], 0);
  EXPECT_EQ(j["head"], "classifier");
  EXPECT_TRUE(j.contains("loss"));
  EXPECT_TRUE(j.contains("latency_ms"));
  e.truth.reset();
  EXPECT_TRUE(nlohmann::json::parse(to_json_line(e))["true_label"].is_null());
}

TEST(Variant, ParseRoundTrip) {
  for (auto v : {Variant::Full, Variant::NoBnUpdates, Variant::NoMemoryNoPL, Variant::NoPL})
    EXPECT_EQ(parse_variant(to_string(v)), v);
  EXPECT_THROW(parse_variant("tent"), std::invalid_argument);
}
