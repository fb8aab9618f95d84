#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <filesystem>

#include "eegtta/checkpoint.hpp"
#include "eegtta/network.hpp"
#include "eegtta/optimizer.hpp"
#include "test_util.hpp"

using namespace eegtta;
using test::random_matrix;
using test::random_tensor;
using test::rel_err;
using test::sum_product;
using test::tiny_net;

namespace {

double probe_loss(Network<double> net, const Tensor4<double>& x, const Matrix<double>& c, bool training) {
  PassOptions o;
  o.training = training;
  o.keep_cache = false;
  return sum_product(net.forward(x, o).logits, c);
}

// Worst relative error of analytic parameter gradients vs central differences.
double gradient_check(const Network<double>& proto, const Tensor4<double>& x, const Matrix<double>& c,
                      bool training) {
  Network<double> net = proto;
  PassOptions o;
  o.training = training;
  const auto res = net.forward(x, o);
  const auto g = net.backward(res.cache, c, GradScope::AllParams);
  const double h = 1e-5;
  double worst = 0.0;
  for (std::size_t s = 0; s < g.grads.size(); ++s) {
    for (std::size_t k = 0; k < g.grads[s].size(); ++k) {
      Network<double> plus = proto, minus = proto;
      plus.parameters(GradScope::AllParams)[s][k] += h;
      minus.parameters(GradScope::AllParams)[s][k] -= h;
      const double fd = (probe_loss(plus, x, c, training) - probe_loss(minus, x, c, training)) / (2 * h);
      worst = std::max(worst, rel_err(g.grads[s][k], fd, 1e-5));
    }
  }
  return worst;
}

}  // namespace

TEST(BnApply, IdentityNormalization) {
  BnState<double> bn(1);
  bn.eps = 0.0;
  const auto x = random_tensor<double>({2, 1, 3, 4}, 1);
  const auto y = bn_apply(x, bn, false);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_DOUBLE_EQ(y.data()[i], x.data()[i]);
}

TEST(BnApply, FixedSourceClosedForm) {
  BnState<double> bn(1);
  bn.running_mean = {2.0};
  bn.running_var = {4.0};
  bn.gamma = {3.0};
  bn.beta = {1.0};
  bn.eps = 1e-12;
  Tensor4<double> x({1, 1, 1, 1}, 4.0);
  EXPECT_NEAR(bn_apply(x, bn, true).data()[0], 4.0, 1e-9);
  EXPECT_EQ(bn.running_mean[0], 2.0);
  EXPECT_EQ(bn.running_var[0], 4.0);
}

TEST(BnApply, TrackRunningMomentum) {
  BnState<double> bn(1);
  bn.mode = BnMode::TrackRunning;
  bn.momentum = 0.9;
  Tensor4<double> x({1, 1, 2, 2}, 1.0);
  bn_apply(x, bn, true);
  EXPECT_NEAR(bn.running_mean[0], 0.1, 1e-15);
  // No update without the training flag.
  bn_apply(x, bn, false);
  EXPECT_NEAR(bn.running_mean[0], 0.1, 1e-15);
}

TEST(BnApply, BatchOnlySingleSampleUsesPlaneStatistics) {
  BnState<double> bn(2);
  bn.mode = BnMode::BatchOnly;
  bn.eps = 0.0;
  Tensor4<double> x({1, 2, 1, 4}, std::vector<double>{1, 2, 3, 4, 5, 5, 5, 5});
  bn.eps = 1e-5;
  const auto y = bn_apply(x, bn, false);
  // Channel 0: mean 2.5, var 1.25.
  const double inv = 1.0 / std::sqrt(1.25 + 1e-5);
  EXPECT_NEAR(y(0, 0, 0, 0), -1.5 * inv, 1e-12);
  EXPECT_NEAR(y(0, 0, 0, 3), 1.5 * inv, 1e-12);
  // Channel 1 is constant: zero variance, output beta.
  for (std::size_t w = 0; w < 4; ++w) EXPECT_NEAR(y(0, 1, 0, w), 0.0, 1e-12);
}

TEST(BnApply, ChannelMismatchThrows) {
  BnState<double> bn(3);
  Tensor4<double> x({1, 2, 1, 1});
  EXPECT_THROW(bn_apply(x, bn, false), std::invalid_argument);
}

TEST(BnApply, FixedSourceStatisticsNeverMove) {
  auto net = tiny_net<double>(3);
  std::vector<std::vector<double>> means, vars;
  for (auto* bn : net.bn_states()) {
    means.push_back(bn->running_mean);
    vars.push_back(bn->running_var);
  }
  const auto hash = net.frozen_hash();
  auto opt = make_adamw<double>(1e-2, 0.1);
  const auto params = net.parameters(GradScope::BnAffineOnly);
  for (int step = 0; step < 20; ++step) {
    PassOptions o;
    o.training = true;
    const auto x = random_tensor<double>({4, 1, 6, 24}, 100 + step);
    const auto res = net.forward(x, o);
    optimizer_step<double>(params, net.backward(res.cache, random_matrix<double>(4, 2, step), GradScope::BnAffineOnly),
                           opt);
  }
  const auto bns = net.bn_states();
  for (std::size_t i = 0; i < bns.size(); ++i) {
    EXPECT_EQ(0, std::memcmp(bns[i]->running_mean.data(), means[i].data(), means[i].size() * sizeof(double)));
    EXPECT_EQ(0, std::memcmp(bns[i]->running_var.data(), vars[i].data(), vars[i].size() * sizeof(double)));
  }
  EXPECT_EQ(hash, net.frozen_hash());
}

TEST(NetForward, ZeroWeightsGiveUniformSoftmax) {
  auto net = make_eegnet<float>(test::small_eegnet_config());
  for (auto p : net.parameters(GradScope::AllParams)) std::fill(p.begin(), p.end(), 0.0f);
  const auto res = net.forward(random_tensor<float>({3, 1, 4, 64}, 5), false);
  for (float v : res.logits.data) EXPECT_EQ(v, 0.0f);
}

TEST(NetForward, ReferenceArchitectureShapes) {
  auto net = make_eegnet<float>(EegNetConfig{});
  glorot_init(net, 0);
  EXPECT_EQ(net.feature_dim(), 192u);
  EXPECT_EQ(net.class_count(), 2u);
  const auto res = net.forward(random_tensor<float>({1, 1, 30, 384}, 1), false);
  EXPECT_EQ(res.features.rows, 1u);
  EXPECT_EQ(res.features.cols, 192u);
  EXPECT_EQ(res.logits.cols, 2u);
}

TEST(NetForward, DeterministicInference) {
  auto net = make_eegnet<float>(EegNetConfig{});
  glorot_init(net, 4);
  const auto x = random_tensor<float>({2, 1, 30, 384}, 2);
  const auto a = net.forward(x, false);
  const auto b = net.forward(x, false);
  EXPECT_EQ(0, std::memcmp(a.logits.data.data(), b.logits.data.data(), a.logits.data.size() * sizeof(float)));
  EXPECT_EQ(0, std::memcmp(a.features.data.data(), b.features.data.data(), a.features.data.size() * sizeof(float)));
}

TEST(NetForward, ShapeMismatchThrows) {
  auto net = tiny_net<double>(1);
  EXPECT_THROW(net.forward(Tensor4<double>({1, 1, 5, 24}), false), std::invalid_argument);
}

TEST(NetForward, NonFiniteInputThrows) {
  auto net = tiny_net<double>(1);
  Tensor4<double> x({1, 1, 6, 24});
  x(0, 0, 2, 3) = std::nan("");
  EXPECT_ANY_THROW(net.forward(x, false));
}

TEST(NetForward, GlorotInitIsSeeded) {
  auto a = make_eegnet<float>(EegNetConfig{});
  auto b = a, c = a;
  glorot_init(a, 9);
  glorot_init(b, 9);
  glorot_init(c, 10);
  EXPECT_EQ(a.frozen_hash(), b.frozen_hash());
  EXPECT_NE(a.frozen_hash(), c.frozen_hash());
}

TEST(NetBackward, ZeroUpstreamGivesZeroGradients) {
  auto net = tiny_net<double>(2);
  const auto res = net.forward(random_tensor<double>({3, 1, 6, 24}, 3), true);
  const auto g = net.backward(res.cache, Matrix<double>(3, 2), GradScope::AllParams);
  for (const auto& buf : g.grads)
    for (double v : buf) EXPECT_EQ(v, 0.0);
}

TEST(NetBackward, BnAffineScopeCoversExactlyGammaBeta) {
  auto net = tiny_net<double>(2);
  const auto res = net.forward(random_tensor<double>({3, 1, 6, 24}, 3), true);
  const auto g = net.backward(res.cache, random_matrix<double>(3, 2, 1), GradScope::BnAffineOnly);
  EXPECT_EQ(g.scope, GradScope::BnAffineOnly);
  const auto bns = net.bn_states();
  ASSERT_EQ(g.slots.size(), 2 * bns.size());
  std::size_t expect = 0;
  for (const auto* bn : bns) expect += 2 * bn->channels();
  std::size_t got = 0;
  for (std::size_t i = 0; i < g.slots.size(); ++i) {
    EXPECT_TRUE(g.slots[i].bn_affine);
    EXPECT_EQ(g.slots[i].size, g.grads[i].size());
    got += g.grads[i].size();
  }
  EXPECT_EQ(got, expect);

  // Same values as the corresponding slots of a full-scope pass.
  const auto full = net.backward(res.cache, random_matrix<double>(3, 2, 1), GradScope::AllParams);
  std::size_t j = 0;
  for (std::size_t i = 0; i < full.slots.size(); ++i) {
    if (!full.slots[i].bn_affine) continue;
    ASSERT_LT(j, g.grads.size());
    for (std::size_t k = 0; k < full.grads[i].size(); ++k) EXPECT_DOUBLE_EQ(full.grads[i][k], g.grads[j][k]);
    ++j;
  }
}

TEST(NetBackward, StaleCacheRejected) {
  auto net = tiny_net<double>(2);
  auto res = net.forward(random_tensor<double>({3, 1, 6, 24}, 3), true);
  EXPECT_ANY_THROW(net.backward(res.cache, Matrix<double>(2, 2), GradScope::AllParams));
  res.cache.layers.pop_back();
  EXPECT_ANY_THROW(net.backward(res.cache, Matrix<double>(3, 2), GradScope::AllParams));
}

class GradientCheck : public ::testing::TestWithParam<std::tuple<BnMode, bool>> {};

TEST_P(GradientCheck, MatchesCentralDifferences) {
  const auto [mode, training] = GetParam();
  auto net = tiny_net<double>(11);
  net.set_bn_mode(mode);
  const auto x = random_tensor<double>({3, 1, 6, 24}, 12);
  const auto c = random_matrix<double>(3, 2, 13);
  EXPECT_LE(gradient_check(net, x, c, training), 1e-4);
}

INSTANTIATE_TEST_SUITE_P(BnModes, GradientCheck,
                         ::testing::Values(std::make_tuple(BnMode::FixedSource, false),
                                           std::make_tuple(BnMode::BatchOnly, false),
                                           std::make_tuple(BnMode::BatchOnly, true),
                                           std::make_tuple(BnMode::TrackRunning, false),
                                           std::make_tuple(BnMode::TrackRunning, true)),
                         [](const auto& info) {
                           return std::string(to_string(std::get<0>(info.param))) +
                                  (std::get<1>(info.param) ? "_training" : "_inference");
                         });

TEST(GradientCheck, BatchOfOneUnderBatchStatistics) {
  auto net = tiny_net<double>(21);
  net.set_bn_mode(BnMode::BatchOnly);
  EXPECT_LE(gradient_check(net, random_tensor<double>({1, 1, 6, 24}, 22), random_matrix<double>(1, 2, 23), false),
            1e-4);
}

class StemCacheForms : public ::testing::TestWithParam<BnMode> {};

TEST_P(StemCacheForms, MatchPlainForwardAndBackward) {
  auto net = tiny_net<double>(31);
  net.set_bn_mode(GetParam());
  ASSERT_TRUE(net.foldable());
  const auto x = random_tensor<double>({5, 1, 6, 24}, 32);
  const auto c = random_matrix<double>(5, 2, 33);
  const auto plain = net.forward(x, true);
  const auto direct = net.forward_cached(net.make_stem_cache(x));
  const auto via_stem = net.forward_cached(net.make_stem_cache_from_stem(net.forward_stem(x)));
  for (std::size_t i = 0; i < plain.logits.data.size(); ++i) {
    EXPECT_NEAR(direct.logits.data[i], plain.logits.data[i], 1e-10);
    EXPECT_NEAR(via_stem.logits.data[i], plain.logits.data[i], 1e-10);
  }
  for (std::size_t i = 0; i < plain.features.data.size(); ++i)
    EXPECT_NEAR(direct.features.data[i], plain.features.data[i], 1e-10);
  const auto gp = net.backward(plain.cache, c, GradScope::BnAffineOnly);
  const auto gd = net.backward(direct.cache, c, GradScope::BnAffineOnly);
  ASSERT_EQ(gp.grads.size(), gd.grads.size());
  for (std::size_t s = 0; s < gp.grads.size(); ++s)
    for (std::size_t k = 0; k < gp.grads[s].size(); ++k) EXPECT_NEAR(gd.grads[s][k], gp.grads[s][k], 1e-9);
}

TEST_P(StemCacheForms, StackedCachesEqualBatchCache) {
  auto net = tiny_net<double>(41);
  net.set_bn_mode(GetParam());
  const auto a = random_tensor<double>({1, 1, 6, 24}, 1);
  const auto b = random_tensor<double>({1, 1, 6, 24}, 2);
  const Tensor4<double>* ptrs[] = {&a, &b};
  const auto batch = stack<double>(ptrs);
  const auto ca = net.make_stem_cache(a), cb = net.make_stem_cache(b);
  const StemCache<double>* parts[] = {&ca, &cb};
  const auto stacked = net.forward_cached(stack_stems<double>(parts), false);
  const auto whole = net.forward(batch, false);
  for (std::size_t i = 0; i < whole.logits.data.size(); ++i)
    EXPECT_NEAR(stacked.logits.data[i], whole.logits.data[i], 1e-10);
}

INSTANTIATE_TEST_SUITE_P(BnModes, StemCacheForms,
                         ::testing::Values(BnMode::FixedSource, BnMode::TrackRunning, BnMode::BatchOnly),
                         [](const auto& info) { return std::string(to_string(info.param)); });

TEST(StemCache, TrainingPassUpdatesStatisticsLikePlainPass) {
  auto a = tiny_net<double>(51);
  a.set_bn_mode(BnMode::TrackRunning);
  auto b = a;
  const auto x = random_tensor<double>({4, 1, 6, 24}, 52);
  PassOptions o;
  o.training = true;
  const auto ra = a.forward(x, o);
  const auto rb = b.forward_cached(b.make_stem_cache(x), o);
  for (std::size_t i = 0; i < ra.logits.data.size(); ++i) EXPECT_NEAR(ra.logits.data[i], rb.logits.data[i], 1e-10);
  const auto sa = a.bn_states(), sb = b.bn_states();
  for (std::size_t i = 0; i < sa.size(); ++i)
    for (std::size_t c = 0; c < sa[i]->channels(); ++c) {
      EXPECT_NEAR(sa[i]->running_mean[c], sb[i]->running_mean[c], 1e-12);
      EXPECT_NEAR(sa[i]->running_var[c], sb[i]->running_var[c], 1e-12);
    }
}

TEST(StemCache, ReferenceNetFloatAgreement) {
  auto net = make_eegnet<float>(EegNetConfig{});
  glorot_init(net, 3);
  const auto x = random_tensor<float>({2, 1, 30, 384}, 4);
  const auto plain = net.forward(x, false);
  const auto cached = net.forward_cached(net.make_stem_cache(x), false);
  for (std::size_t i = 0; i < plain.logits.data.size(); ++i)
    EXPECT_NEAR(cached.logits.data[i], plain.logits.data[i], 1e-3 * (1 + std::abs(plain.logits.data[i])));
}

TEST(Optimizer, AdamWDecayOnlyWithZeroGradient) {
  std::vector<double> p{1.0};
  std::vector<std::span<double>> params{p};
  ParamGrads<double> g;
  g.grads = {{0.0}};
  auto opt = make_adamw<double>(1e-3, 0.1);
  optimizer_step<double>(params, g, opt);
  EXPECT_NEAR(p[0], 0.9999, 1e-12);
  EXPECT_EQ(opt.step, 1u);
}

TEST(Optimizer, AdamFirstStepMovesByLearningRate) {
  std::vector<double> p{0.5, -0.5, 2.0};
  std::vector<std::span<double>> params{p};
  ParamGrads<double> g;
  g.grads = {{3.0, -0.01, 250.0}};
  auto opt = make_adam<double>(1e-3);
  optimizer_step<double>(params, g, opt);
  EXPECT_NEAR(p[0], 0.5 - 1e-3, 1e-9);
  EXPECT_NEAR(p[1], -0.5 + 1e-3, 1e-8);
  EXPECT_NEAR(p[2], 2.0 - 1e-3, 1e-9);
}

TEST(Optimizer, AdamAndAdamWAgreeWithoutDecay) {
  std::vector<double> a{0.3, -1.2}, b{0.3, -1.2};
  std::vector<std::span<double>> pa{a}, pb{b};
  auto oa = make_adam<double>(1e-2);
  auto ob = make_adamw<double>(1e-2, 0.0);
  std::mt19937_64 rng(7);
  std::normal_distribution<double> nd;
  for (int i = 0; i < 10; ++i) {
    ParamGrads<double> g;
    g.grads = {{nd(rng), nd(rng)}};
    optimizer_step<double>(pa, g, oa);
    optimizer_step<double>(pb, g, ob);
  }
  EXPECT_EQ(a, b);
}

TEST(Optimizer, ShapeMismatchThrows) {
  std::vector<double> p{1.0, 2.0};
  std::vector<std::span<double>> params{p};
  ParamGrads<double> g;
  g.grads = {{0.0}};
  auto opt = make_adam<double>(1e-3);
  EXPECT_THROW(optimizer_step<double>(params, g, opt), std::invalid_argument);
  g.grads = {};
  EXPECT_THROW(optimizer_step<double>(params, g, opt), std::invalid_argument);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  auto net = make_eegnet<float>(EegNetConfig{});
  glorot_init(net, 5);
  net.set_bn_mode(BnMode::TrackRunning);
  for (auto* bn : net.bn_states()) {
    bn->running_mean[0] = 0.25f;
    bn->running_var[0] = 3.5f;
    bn->gamma[0] = 1.5f;
  }
  const auto bytes = encode_checkpoint(net);
  ASSERT_EQ(0, std::memcmp(bytes.data(), "SAWT", 4));
  const auto back = decode_checkpoint<float>(bytes);
  EXPECT_EQ(encode_checkpoint(back), bytes);
  EXPECT_EQ(back.frozen_hash(), net.frozen_hash());
  EXPECT_EQ(back.bn_states()[0]->mode, BnMode::TrackRunning);
  const auto x = random_tensor<float>({1, 1, 30, 384}, 6);
  const auto a = net.forward(x, false), b = back.forward(x, false);
  EXPECT_EQ(0, std::memcmp(a.logits.data.data(), b.logits.data.data(), a.logits.data.size() * sizeof(float)));
}

TEST(Checkpoint, FileRoundTrip) {
  auto net = tiny_net<double>(8).cast<float>();
  const std::string path = std::string(EEGTTA_TEST_TMP) + "/tiny.sawt";
  std::filesystem::create_directories(EEGTTA_TEST_TMP);
  save_checkpoint(path, net);
  EXPECT_EQ(encode_checkpoint(load_checkpoint<float>(path)), encode_checkpoint(net));
}

TEST(Checkpoint, CorruptInputsRejected) {
  auto net = tiny_net<double>(8).cast<float>();
  auto bytes = encode_checkpoint(net);
  auto bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(decode_checkpoint<float>(bad), CheckpointError);
  bad = bytes;
  bad[4] = 9;
  EXPECT_THROW(decode_checkpoint<float>(bad), CheckpointError);
  bad.assign(bytes.begin(), bytes.end() - 3);
  EXPECT_THROW(decode_checkpoint<float>(bad), CheckpointError);
  EXPECT_THROW(load_checkpoint<float>("/nonexistent/file.sawt"), CheckpointError);
}
