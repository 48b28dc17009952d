#include <gtest/gtest.h>

#include <cmath>

#include "lsf/model.hpp"
#include "lsf/train.hpp"
#include "oracles.hpp"

namespace {

using lsf::ModelConfig;
using lsf::Network;

ModelConfig tiny(int depth, int width, int channels, std::uint64_t seed = 1) {
  ModelConfig c;
  c.depth = depth;
  c.base_width = width;
  c.out_channels = channels;
  c.zero_head = false;
  c.seed = seed;
  return c;
}

std::vector<double> random_image(lsf::Rng& rng, std::size_t n) {
  std::vector<double> img(n);
  for (auto& v : img) v = rng.normal();
  return img;
}

std::vector<double> random_one_hot(lsf::Rng& rng, std::size_t channels, std::size_t pixels) {
  std::vector<double> t(channels * pixels, 0.0);
  for (std::size_t i = 0; i < pixels; ++i) t[rng.below(channels) * pixels + i] = 1.0;
  return t;
}

double rel_error(double a, double b, double floor) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor}); }

// ---------------------------------------------------------------------------
// structure

TEST(Model, ParameterCountMatchesHandCount) {
  // conv 1->4 (3x3): 4*9 + 4 = 40; conv 4->4: 4*36 + 4 = 148; head 4->2 (1x1): 8 + 2 = 10
  EXPECT_EQ(lsf::parameter_count(tiny(1, 4, 2)), 198u);
  // depth 2, width 2, C 3: enc 1->2 (20), 2->2 (38), 2->4 (76), 4->4 (148); dec 6->2 (110), 2->2 (38); head 2*3+3 (9)
  EXPECT_EQ(lsf::parameter_count(tiny(2, 2, 3)), 20u + 38 + 76 + 148 + 110 + 38 + 9);
}

TEST(Model, SameSeedSameWeights) {
  Network<double> a(tiny(3, 4, 6, 9)), b(tiny(3, 4, 6, 9)), c(tiny(3, 4, 6, 10));
  EXPECT_TRUE(std::equal(a.parameters().begin(), a.parameters().end(), b.parameters().begin()));
  EXPECT_FALSE(std::equal(a.parameters().begin(), a.parameters().end(), c.parameters().begin()));
  for (std::size_t i = 0; i + 1 < a.layers().size(); ++i) {
    const auto& layer = a.layers()[i];
    EXPECT_EQ(a.parameters()[layer.bias_offset], 0.0);
  }
}

TEST(Model, HeadWidthIsTheOnlyDifference) {
  const auto two = lsf::layer_plan(tiny(3, 8, 2));
  const auto six = lsf::layer_plan(tiny(3, 8, 6));
  ASSERT_EQ(two.size(), six.size());
  for (std::size_t i = 0; i + 1 < two.size(); ++i) EXPECT_EQ(two[i].parameter_count(), six[i].parameter_count());
  EXPECT_EQ(six.back().parameter_count() - two.back().parameter_count(), 4u * (8 + 1));
  EXPECT_EQ(lsf::parameter_count(tiny(3, 8, 6)) - lsf::parameter_count(tiny(3, 8, 2)), 36u);
}

TEST(Model, InvalidConfigAndShape) {
  EXPECT_THROW(lsf::parameter_count(tiny(0, 4, 2)), lsf::Error);
  EXPECT_THROW(lsf::parameter_count(tiny(2, 4, 1)), lsf::Error);
  Network<double> net(tiny(3, 2, 2));
  std::vector<double> img(6 * 8, 0.0);
  EXPECT_THROW(net.forward(img, 6, 8), lsf::Error);
}

// ---------------------------------------------------------------------------
// forward

TEST(Model, SoftmaxSumsToOne) {
  lsf::Rng rng(2);
  Network<float> net(tiny(3, 4, 5));
  std::vector<float> img(16 * 24);
  for (auto& v : img) v = static_cast<float>(rng.normal() * 3.0);
  const auto probs = net.forward(img, 16, 24);
  const std::size_t n = 16 * 24;
  for (std::size_t i = 0; i < n; ++i) {
    double sum = 0.0;
    for (std::size_t c = 0; c < 5; ++c) sum += probs[c * n + i];
    EXPECT_NEAR(sum, 1.0, 1e-6);
  }
}

TEST(Model, ZeroHeadGivesUniform) {
  lsf::Rng rng(3);
  Network<double> net(tiny(2, 4, 4));
  const auto& head = net.layers().back();
  std::fill(net.parameters().begin() + static_cast<std::ptrdiff_t>(head.weight_offset), net.parameters().end(), 0.0);
  const auto img = random_image(rng, 64);
  for (double p : net.forward(img, 8, 8)) EXPECT_DOUBLE_EQ(p, 0.25);
}

TEST(Model, DefaultHeadStartsUniform) {
  auto config = tiny(2, 3, 5, 8);
  config.zero_head = true;
  Network<double> zero(config), random(tiny(2, 3, 5, 8));
  const auto& head = zero.layers().back();
  const auto split = static_cast<std::ptrdiff_t>(head.weight_offset);
  EXPECT_TRUE(std::all_of(zero.parameters().begin() + split, zero.parameters().end(), [](double v) { return v == 0.0; }));
  EXPECT_TRUE(std::equal(zero.parameters().begin(), zero.parameters().begin() + split, random.parameters().begin()));
  lsf::Rng rng(11);
  for (double p : zero.forward(random_image(rng, 64), 8, 8)) EXPECT_DOUBLE_EQ(p, 0.2);
  EXPECT_TRUE(ModelConfig{}.zero_head);
}

TEST(Model, ForwardMatchesStraightLineOracle) {
  lsf::Rng rng(4);
  for (const auto& config : {tiny(1, 2, 2, 5), tiny(2, 2, 3, 6), tiny(3, 3, 4, 7)}) {
    Network<double> net(config);
    // nonzero biases so they are exercised
    for (const auto& layer : net.layers())
      for (int o = 0; o < layer.out; ++o) net.parameters()[layer.bias_offset + static_cast<std::size_t>(o)] = rng.uniform(-0.1, 0.1);
    const auto img = random_image(rng, 64);
    const auto probs = net.forward(img, 8, 8);
    oracle::NaiveNet naive(config, std::vector<double>(net.parameters().begin(), net.parameters().end()));
    const auto want = naive.forward(img, 8, 8);
    ASSERT_EQ(probs.size(), want.v.size());
    for (std::size_t i = 0; i < probs.size(); ++i) EXPECT_NEAR(probs[i], want.v[i], 1e-12);
  }
}

// ---------------------------------------------------------------------------
// loss

TEST(DiceLoss, PerfectAndDisjoint) {
  const std::size_t C = 3, N = 16;
  std::vector<double> target(C * N, 0.0), other(C * N, 0.0), grad(C * N);
  for (std::size_t i = 0; i < N; ++i) {
    target[(i % C) * N + i] = 1.0;
    other[((i + 1) % C) * N + i] = 1.0;
  }
  const std::vector<char> mask(C, 1);
  EXPECT_LE(lsf::soft_dice_loss<double>(target, target, C, mask, grad), 1e-4);
  EXPECT_NEAR(lsf::soft_dice_loss<double>(other, target, C, mask, grad), 1.0, 1e-4);
}

TEST(DiceLoss, GradientMatchesFiniteDifferences) {
  lsf::Rng rng(5);
  const double h = 1e-4;
  double worst = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t C = 2 + rng.below(3), N = 1 + rng.below(12);
    std::vector<double> probs(C * N);
    for (auto& p : probs) p = rng.uniform(0.05, 1.0);
    const auto target = random_one_hot(rng, C, N);
    std::vector<char> mask(C, 1);
    if (C > 2) mask[1 + rng.below(C - 1)] = 0;
    std::vector<double> grad(C * N), scratch(C * N);
    lsf::soft_dice_loss<double>(probs, target, C, mask, grad);
    for (std::size_t i = 0; i < probs.size(); ++i) {
      auto plus = probs, minus = probs;
      plus[i] += h;
      minus[i] -= h;
      const double fd = (lsf::soft_dice_loss<double>(plus, target, C, mask, scratch) -
                         lsf::soft_dice_loss<double>(minus, target, C, mask, scratch)) / (2 * h);
      worst = std::max(worst, rel_error(grad[i], fd, 1e-8));
    }
  }
  EXPECT_LE(worst, 1e-4);
}

TEST(DiceLoss, MaskedChannelsGetNoGradient) {
  lsf::Rng rng(6);
  const std::size_t C = 4, N = 10;
  std::vector<double> probs(C * N);
  for (auto& p : probs) p = rng.uniform(0.0, 1.0);
  const auto target = random_one_hot(rng, C, N);
  std::vector<double> grad(C * N);
  lsf::soft_dice_loss<double>(probs, target, C, std::vector<char>{1, 1, 0, 1}, grad);
  for (std::size_t i = 0; i < N; ++i) {
    EXPECT_EQ(grad[2 * N + i], 0.0);
    EXPECT_EQ(grad[i], 0.0);
  }
  EXPECT_THROW(lsf::soft_dice_loss<double>(probs, target, C, std::vector<char>{1, 0, 0, 0}, grad), lsf::Error);
}

// ---------------------------------------------------------------------------
// backward

double model_loss(Network<double>& net, const std::vector<double>& img, std::size_t h, std::size_t w,
                  const std::vector<double>& target, const std::vector<char>& mask, std::vector<double>* dprobs) {
  const auto probs = net.forward(img, h, w);
  std::vector<double> grad(probs.size());
  const double loss = lsf::soft_dice_loss<double>(probs, target, static_cast<std::size_t>(net.config().out_channels),
                                                  mask, grad);
  if (dprobs) *dprobs = grad;
  return loss;
}

double worst_gradient_error(const ModelConfig& config, std::size_t h, std::size_t w, std::uint64_t seed) {
  lsf::Rng rng(seed);
  Network<double> net(config);
  for (const auto& layer : net.layers())
    for (int o = 0; o < layer.out; ++o) net.parameters()[layer.bias_offset + static_cast<std::size_t>(o)] = rng.uniform(-0.1, 0.1);
  const auto img = random_image(rng, h * w);
  const auto C = static_cast<std::size_t>(config.out_channels);
  const auto target = random_one_hot(rng, C, h * w);
  const std::vector<char> mask(C, 1);

  std::vector<double> dprobs, grads(net.parameter_count(), 0.0);
  model_loss(net, img, h, w, target, mask, &dprobs);
  net.backward(dprobs, grads);

  const double step = 1e-5;
  double worst = 0.0;
  for (std::size_t i = 0; i < net.parameter_count(); ++i) {
    const double saved = net.parameters()[i];
    net.parameters()[i] = saved + step;
    const double up = model_loss(net, img, h, w, target, mask, nullptr);
    net.parameters()[i] = saved - step;
    const double down = model_loss(net, img, h, w, target, mask, nullptr);
    net.parameters()[i] = saved;
    worst = std::max(worst, rel_error(grads[i], (up - down) / (2 * step), 1e-7));
  }
  return worst;
}

TEST(Backward, TinyModelMatchesFiniteDifferences) { EXPECT_LE(worst_gradient_error(tiny(1, 2, 3), 8, 8, 7), 1e-3); }

TEST(Backward, TwoLevelModelMatchesFiniteDifferences) {
  EXPECT_LE(worst_gradient_error(tiny(2, 2, 3), 8, 8, 8), 1e-3);
}

TEST(Backward, ThreeLevelModelMatchesFiniteDifferences) {
  EXPECT_LE(worst_gradient_error(tiny(3, 2, 2), 8, 8, 9), 1e-3);
}

TEST(Backward, MaskedChannelContributesNothing) {
  lsf::Rng rng(10);
  const auto config = tiny(2, 2, 4);
  Network<double> net(config);
  const auto img = random_image(rng, 64);
  const auto target = random_one_hot(rng, 4, 64);

  // gradient with channel 2 excluded equals the gradient of a loss that never sees channel 2
  std::vector<double> dprobs, with_mask(net.parameter_count(), 0.0);
  model_loss(net, img, 8, 8, target, {1, 1, 0, 1}, &dprobs);
  for (std::size_t i = 0; i < 64; ++i) EXPECT_EQ(dprobs[2 * 64 + i], 0.0);
  net.backward(dprobs, with_mask);

  auto scrambled = target;
  for (std::size_t i = 0; i < 64; ++i) scrambled[2 * 64 + i] = 1.0 - scrambled[2 * 64 + i];
  std::vector<double> other(net.parameter_count(), 0.0);
  model_loss(net, img, 8, 8, scrambled, {1, 1, 0, 1}, &dprobs);
  net.backward(dprobs, other);
  EXPECT_EQ(with_mask, other);
}

TEST(Backward, BitwiseStableAcrossHeapLayouts) {
  lsf::Rng rng(12);
  const auto config = tiny(3, 8, 4);
  std::vector<float> img(32 * 32);
  for (auto& v : img) v = static_cast<float>(rng.normal());
  std::vector<float> dprobs(4 * 32 * 32);
  for (auto& v : dprobs) v = static_cast<float>(rng.normal());

  std::vector<float> first;
  std::vector<std::vector<char>> ballast;
  for (int run = 0; run < 6; ++run) {
    ballast.emplace_back(static_cast<std::size_t>(8 * run + 3));  // shift later allocations
    Network<float> net(config);
    std::vector<float> input(img.size() + static_cast<std::size_t>(run));
    std::copy(img.begin(), img.end(), input.begin() + run);
    net.forward(std::span<const float>(input).subspan(static_cast<std::size_t>(run), img.size()), 32, 32);
    std::vector<float> grads(net.parameter_count(), 0.0f);
    net.backward(dprobs, grads);
    if (run == 0) first = grads;
    EXPECT_EQ(grads, first) << "run " << run;
  }
}

TEST(Adam, FirstStepMovesByLearningRate) {
  lsf::Adam<double> adam;
  std::vector<double> params{1.0, -2.0, 3.0};
  const std::vector<double> grads{0.5, -4.0, 0.0};
  adam.step_update(params, grads);
  EXPECT_NEAR(params[0], 1.0 - 1e-3, 1e-9);
  EXPECT_NEAR(params[1], -2.0 + 1e-3, 1e-9);
  EXPECT_EQ(params[2], 3.0);
}

// ---------------------------------------------------------------------------
// argmax and checkpoints

TEST(Argmax, TiesGoToLowestChannel) {
  const std::vector<double> probs{0.5, 0.2, 0.5, 0.4, 0.0, 0.4};  // C=3, N=2
  const auto m = lsf::argmax_channels<double>(probs, 3, 1, 2);
  EXPECT_EQ(m(0, 0), 0);  // channels 0 and 1 tie
  EXPECT_EQ(m(0, 1), 1);  // channels 1 and 2 tie
}

TEST(Argmax, InvariantUnderMonotoneTransform) {
  lsf::Rng rng(11);
  const std::size_t C = 4, N = 50;
  std::vector<double> logits(C * N);
  for (auto& v : logits) v = rng.normal();
  auto exp_t = logits, cubic = logits;
  for (auto& v : exp_t) v = std::exp(2 * v) + 7;
  for (auto& v : cubic) v = v * v * v + v;
  const auto base = lsf::argmax_channels<double>(logits, C, 5, 10);
  EXPECT_EQ(lsf::argmax_channels<double>(exp_t, C, 5, 10), base);
  EXPECT_EQ(lsf::argmax_channels<double>(cubic, C, 5, 10), base);
}

lsf::Checkpoint sample_checkpoint() {
  lsf::Checkpoint ck;
  ck.model = tiny(2, 2, 3, 77);
  ck.layout = lsf::individual_layout("t", {1, 2});
  lsf::Network<lsf::Real> net(ck.model);
  ck.weights.assign(net.parameters().begin(), net.parameters().end());
  ck.weights[3] = 0.1 / 3.0;
  ck.adam_m.assign(ck.weights.size(), 1e-300);
  ck.adam_v.assign(ck.weights.size(), 2.5);
  ck.adam_step = 12;
  ck.epoch = 3;
  ck.history = {{"train", {0.9, 0.8, 0.1 + 0.2}}};
  return ck;
}

TEST(Checkpoint, RoundTripIsBitExact) {
  const auto ck = sample_checkpoint();
  const std::string bytes = lsf::serialize_checkpoint(ck);
  const auto back = lsf::deserialize_checkpoint(bytes);
  EXPECT_EQ(back.weights, ck.weights);
  EXPECT_EQ(back.adam_m, ck.adam_m);
  EXPECT_EQ(back.adam_v, ck.adam_v);
  EXPECT_EQ(back.adam_step, 12u);
  EXPECT_EQ(back.epoch, 3);
  EXPECT_EQ(back.history, ck.history);
  EXPECT_EQ(back.model, ck.model);
  EXPECT_EQ(back.layout.task_maps, ck.layout.task_maps);
  EXPECT_EQ(lsf::serialize_checkpoint(back), bytes);
}

TEST(Checkpoint, TruncatedAndWrongMagic) {
  const std::string bytes = lsf::serialize_checkpoint(sample_checkpoint());
  for (std::size_t cut : {bytes.size() - 1, bytes.size() / 2, std::size_t{12}}) {
    try {
      lsf::deserialize_checkpoint(std::string_view(bytes).substr(0, cut));
      FAIL() << "truncation at " << cut << " accepted";
    } catch (const lsf::Error& e) {
      EXPECT_EQ(e.code(), lsf::Errc::CorruptPayload);
    }
  }
  auto flipped = bytes;
  flipped[flipped.size() - 20] ^= 0x01;
  EXPECT_THROW(lsf::deserialize_checkpoint(flipped), lsf::Error);

  auto wrong = bytes;
  wrong[7] = '2';
  try {
    lsf::deserialize_checkpoint(wrong);
    FAIL() << "wrong magic accepted";
  } catch (const lsf::Error& e) {
    EXPECT_EQ(e.code(), lsf::Errc::VersionMismatch);
  }
}

}  // namespace
