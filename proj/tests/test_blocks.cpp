#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "pyfu/blocks.hpp"
#include "pyfu/gradcheck.hpp"
#include "test_support.hpp"

using namespace pyfu;
using pyfu_test::random_coeffs;
using pyfu_test::random_tensor;

namespace {

const Activation kAct = Activation::leaky(0.01);

void zero_conv_weights(ParamStoreT<float>& store) {
  for (size_t i = 0; i < store.size(); ++i) {
    auto& p = store.at(i);
    if (p.name.ends_with(".weight"))
      std::fill(p.tensor.values().begin(), p.tensor.values().end(), 0.0f);
  }
}

bool bitwise_equal(const TensorT<float>& a, const TensorT<float>& b) {
  if (!(a.shape() == b.shape())) return false;
  for (int64_t i = 0; i < a.numel(); ++i)
    if (a.data()[i] != b.data()[i]) return false;
  return true;
}

}  // namespace

TEST_CASE("irb with zero weights and matching shapes is the pure skip") {
  std::mt19937 rng(301);
  ParamStoreT<float> store;
  Irb<float> irb(store, "irb", 8, 8, 1, 1, 6, kAct, rng);
  zero_conv_weights(store);
  auto x = random_tensor<float>({1, 8, 4, 6}, rng);
  auto y = irb.forward(x, true);
  REQUIRE(bitwise_equal(y, x));
}

TEST_CASE("irb aligns 129 channels to 128 after the mask append") {
  std::mt19937 rng(307);
  ParamStoreT<float> store;
  Irb<float> irb(store, "align", 129, 128, 1, 1, 6, kAct, rng);
  auto x = random_tensor<float>({1, 129, 3, 5}, rng);
  auto y = irb.forward(x, true);
  REQUIRE(y.shape() == Shape4{1, 128, 3, 5});
  REQUIRE(irb.expand.conv.weight.shape() == Shape4{129 * 6, 129, 1, 1});
}

TEST_CASE("irb gradients pass central finite differences") {
  std::mt19937 rng(311);
  ParamStoreT<double> store;
  Irb<double> irb(store, "irb", 4, 4, 1, 1, 6, kAct, rng);
  auto x = random_tensor<double>({1, 4, 4, 6}, rng, -1.0, 1.0, true);
  std::vector<double> coeffs;
  auto make_loss = [&]() {
    auto y = irb.forward(x, true);
    if (coeffs.empty()) coeffs = random_coeffs<double>(y.numel(), rng);
    return weighted_sum(y, coeffs);
  };
  auto res = gradcheck<double>(make_loss, {x, irb.expand.conv.weight, irb.dw.weight,
                                           irb.project.weight, irb.expand.norm.scale});
  INFO(res.summary());
  REQUIRE(res.pass);
}

TEST_CASE("residual blocks with zero weights are the identity") {
  std::mt19937 rng(313);
  for (auto v : {ResidualVariant::bottleneck, ResidualVariant::basic}) {
    ParamStoreT<float> store;
    ResidualBlock<float> block(store, "rb", v, 8, 8, 1, 1, 4, kAct, rng);
    zero_conv_weights(store);
    auto x = random_tensor<float>({1, 8, 4, 6}, rng);
    auto y = block.forward(x, true);
    REQUIRE(bitwise_equal(y, x));
  }
}

TEST_CASE("brb 256 to 256 uses internal width 64") {
  std::mt19937 rng(317);
  ParamStoreT<float> store;
  ResidualBlock<float> brb(store, "brb", ResidualVariant::bottleneck, 256, 256, 1, 1, 4, kAct, rng);
  REQUIRE(brb.mid_channels == 64);
  REQUIRE(brb.a.conv.weight.shape() == Shape4{64, 256, 1, 1});
}

TEST_CASE("residual blocks keep the spatial shape at stride 1") {
  std::mt19937 rng(331);
  for (auto v : {ResidualVariant::bottleneck, ResidualVariant::basic}) {
    ParamStoreT<float> store;
    ResidualBlock<float> block(store, "rb", v, 12, 8, 1, 1, 4, kAct, rng);  // projection shortcut
    auto x = random_tensor<float>({1, 12, 5, 7}, rng);
    auto y = block.forward(x, true);
    REQUIRE(y.shape() == Shape4{1, 8, 5, 7});
  }
}

TEST_CASE("residual block gradients pass central finite differences") {
  std::mt19937 rng(337);
  for (auto v : {ResidualVariant::bottleneck, ResidualVariant::basic}) {
    ParamStoreT<double> store;
    ResidualBlock<double> block(store, "rb", v, 6, 4, 1, 1, 4, kAct, rng);
    auto x = random_tensor<double>({1, 6, 4, 6}, rng, -1.0, 1.0, true);
    std::vector<double> coeffs;
    auto make_loss = [&]() {
      auto y = block.forward(x, true);
      if (coeffs.empty()) coeffs = random_coeffs<double>(y.numel(), rng);
      return weighted_sum(y, coeffs);
    };
    auto res = gradcheck<double>(make_loss, {x, block.a.conv.weight, block.tail.weight,
                                             block.proj->weight});
    INFO(res.summary());
    REQUIRE(res.pass);
  }
}

TEST_CASE("lsfe preserves the spatial shape at the head width") {
  std::mt19937 rng(347);
  ParamStoreT<float> store;
  Lsfe<float> lsfe(store, "lsfe", 128, 128, kAct, rng);
  auto x = random_tensor<float>({1, 128, 6, 32}, rng);
  auto y = lsfe.forward(x, true);
  REQUIRE(y.shape() == Shape4{1, 128, 6, 32});
}

TEST_CASE("lsfe on zero input depends only on the shifts") {
  std::mt19937 rng(349);
  ParamStoreT<float> store;
  Lsfe<float> lsfe(store, "lsfe", 6, 8, kAct, rng);
  auto x = TensorT<float>::zeros({1, 6, 4, 6});
  auto y = lsfe.forward(x, true);
  // spatially constant per channel: no input signal survives
  for (int c = 0; c < 8; ++c)
    for (int64_t i = 0; i < 24; ++i)
      REQUIRE(y.data()[c * 24 + i] == Catch::Approx(double(y.data()[c * 24])).margin(1e-7));
}

TEST_CASE("lsfe gradients pass central finite differences") {
  std::mt19937 rng(353);
  ParamStoreT<double> store;
  Lsfe<double> lsfe(store, "lsfe", 4, 6, kAct, rng);
  auto x = random_tensor<double>({1, 4, 4, 6}, rng, -1.0, 1.0, true);
  std::vector<double> coeffs;
  auto make_loss = [&]() {
    auto y = lsfe.forward(x, true);
    if (coeffs.empty()) coeffs = random_coeffs<double>(y.numel(), rng);
    return weighted_sum(y, coeffs);
  };
  auto res = gradcheck<double>(make_loss, {x, lsfe.a.dw.weight, lsfe.b.pw.weight});
  INFO(res.summary());
  REQUIRE(res.pass);
}

TEST_CASE("dpc concatenates five branches into the merge conv") {
  std::mt19937 rng(359);
  ParamStoreT<float> store;
  Dpc<float> dpc(store, "dpc", 128, 128, dpc_default_dilations(), kAct, rng);
  REQUIRE(dpc.branches.size() == 5);
  REQUIRE(dpc.merge.conv.weight.shape() == Shape4{128, 640, 1, 1});
  auto x = random_tensor<float>({1, 128, 4, 8}, rng);
  auto y = dpc.forward(x, true);
  REQUIRE(y.shape() == Shape4{1, 128, 4, 8});
}

TEST_CASE("dpc clamps dilations to fit the feature map") {
  // 3x3 kernel with dilation d spans 2d+1 pixels; on a 4x8 map the clamp
  // formula min(d, (dim-1)/2) caps dilations at (1,3)
  for (auto [d, dim, want] : {std::tuple{6, 4, 1}, std::tuple{21, 8, 3}, std::tuple{1, 4, 1},
                              std::tuple{18, 4, 1}, std::tuple{15, 8, 3}, std::tuple{3, 8, 3},
                              std::tuple{2, 2, 1}}) {
    REQUIRE(dpc_clamped_dilation(d, dim) == want);
  }
}

TEST_CASE("dpc gradients pass central finite differences") {
  std::mt19937 rng(367);
  ParamStoreT<double> store;
  Dpc<double> dpc(store, "dpc", 3, 4, dpc_default_dilations(), kAct, rng);
  auto x = random_tensor<double>({1, 3, 4, 6}, rng, -1.0, 1.0, true);
  std::vector<double> coeffs;
  auto make_loss = [&]() {
    auto y = dpc.forward(x, true);
    if (coeffs.empty()) coeffs = random_coeffs<double>(y.numel(), rng);
    return weighted_sum(y, coeffs);
  };
  auto res = gradcheck<double>(make_loss, {x, dpc.branches[0].dw.weight, dpc.merge.conv.weight});
  INFO(res.summary());
  REQUIRE(res.pass);
}

TEST_CASE("mc upsamples the coarse map by doubling and adds") {
  std::mt19937 rng(373);
  ParamStoreT<float> store;
  Mc<float> mc(store, "mc", 128, kAct, rng);
  auto fine = random_tensor<float>({1, 128, 6, 16}, rng);
  auto coarse = random_tensor<float>({1, 128, 3, 8}, rng);
  auto y = mc.forward(fine, coarse, true);
  REQUIRE(y.shape() == Shape4{1, 128, 6, 16});
}

TEST_CASE("mc with zero coarse features returns the fine map") {
  std::mt19937 rng(379);
  ParamStoreT<float> store;
  Mc<float> mc(store, "mc", 6, kAct, rng);
  auto fine = random_tensor<float>({1, 6, 4, 8}, rng);
  auto coarse = TensorT<float>::zeros({1, 6, 2, 4});
  auto y = mc.forward(fine, coarse, true);
  REQUIRE(bitwise_equal(y, fine));
}

TEST_CASE("mc rejects incompatible aspect ratios") {
  std::mt19937 rng(383);
  ParamStoreT<float> store;
  Mc<float> mc(store, "mc", 4, kAct, rng);
  auto fine = random_tensor<float>({1, 4, 6, 24}, rng);
  auto coarse = random_tensor<float>({1, 4, 3, 8}, rng);
  REQUIRE_THROWS_AS(mc.forward(fine, coarse, true), std::runtime_error);
}

TEST_CASE("mc gradients pass central finite differences") {
  std::mt19937 rng(389);
  ParamStoreT<double> store;
  Mc<double> mc(store, "mc", 3, kAct, rng);
  auto fine = random_tensor<double>({1, 3, 4, 6}, rng, -1.0, 1.0, true);
  auto coarse = random_tensor<double>({1, 3, 2, 3}, rng, -1.0, 1.0, true);
  std::vector<double> coeffs;
  auto make_loss = [&]() {
    auto y = mc.forward(fine, coarse, true);
    if (coeffs.empty()) coeffs = random_coeffs<double>(y.numel(), rng);
    return weighted_sum(y, coeffs);
  };
  auto res = gradcheck<double>(make_loss, {fine, coarse, mc.a.dw.weight, mc.b.pw.weight});
  INFO(res.summary());
  REQUIRE(res.pass);
}

TEST_CASE("two-way fpn maps three encoder taps to 128-channel outputs") {
  std::mt19937 rng(397);
  ParamStoreT<float> store;
  TwoWayFpn<float> fpn(store, "fpn", {16, 24, 40}, 128, kAct, rng);
  auto c1 = random_tensor<float>({1, 16, 16, 32}, rng);
  auto c2 = random_tensor<float>({1, 24, 8, 16}, rng);
  auto c3 = random_tensor<float>({1, 40, 4, 8}, rng);
  auto out = fpn.forward(c1, c2, c3, true);
  REQUIRE(out[0].shape() == Shape4{1, 128, 16, 32});
  REQUIRE(out[1].shape() == Shape4{1, 128, 8, 16});
  REQUIRE(out[2].shape() == Shape4{1, 128, 4, 8});
}

TEST_CASE("two-way fpn on zero inputs is deterministic and zero") {
  std::mt19937 rng(401);
  ParamStoreT<float> store;
  TwoWayFpn<float> fpn(store, "fpn", {4, 6, 8}, 8, kAct, rng);
  auto c1 = TensorT<float>::zeros({1, 4, 8, 16});
  auto c2 = TensorT<float>::zeros({1, 6, 4, 8});
  auto c3 = TensorT<float>::zeros({1, 8, 2, 4});
  auto out1 = fpn.forward(c1, c2, c3, true);
  auto out2 = fpn.forward(c1, c2, c3, true);
  for (int i = 0; i < 3; ++i) {
    REQUIRE(bitwise_equal(out1[size_t(i)], out2[size_t(i)]));
    for (int64_t j = 0; j < out1[size_t(i)].numel(); ++j)
      REQUIRE(out1[size_t(i)].data()[j] == 0.0f);
  }
}

TEST_CASE("two-way fpn rejects non-pyramidal inputs") {
  std::mt19937 rng(409);
  ParamStoreT<float> store;
  TwoWayFpn<float> fpn(store, "fpn", {4, 6, 8}, 8, kAct, rng);
  auto c1 = TensorT<float>::zeros({1, 4, 8, 16});
  auto c2 = TensorT<float>::zeros({1, 6, 4, 10});  // not half of 16
  auto c3 = TensorT<float>::zeros({1, 8, 2, 4});
  REQUIRE_THROWS_AS(fpn.forward(c1, c2, c3, true), std::runtime_error);
}

TEST_CASE("two-way fpn gradients pass central finite differences") {
  std::mt19937 rng(419);
  ParamStoreT<double> store;
  TwoWayFpn<double> fpn(store, "fpn", {3, 4, 5}, 4, kAct, rng);
  auto c1 = random_tensor<double>({1, 3, 8, 8}, rng, -1.0, 1.0, true);
  auto c2 = random_tensor<double>({1, 4, 4, 4}, rng, -1.0, 1.0, true);
  auto c3 = random_tensor<double>({1, 5, 2, 2}, rng, -1.0, 1.0, true);
  std::vector<double> coeffs;
  auto make_loss = [&]() {
    auto out = fpn.forward(c1, c2, c3, true);
    auto cat = concat_channels<double>(
        {out[0], bilinear_resize(out[1], 8, 8, false), bilinear_resize(out[2], 8, 8, false)});
    if (coeffs.empty()) coeffs = random_coeffs<double>(cat.numel(), rng);
    return weighted_sum(cat, coeffs);
  };
  auto res = gradcheck<double>(make_loss, {c1, c2, c3, fpn.lateral[0].conv.weight,
                                           fpn.pyramid.down[0].dw.weight},
                               1e-4, 1e-4, 60);
  INFO(res.summary());
  REQUIRE(res.pass);
}

TEST_CASE("semantic head aggregates a pyramid into decoder features") {
  std::mt19937 rng(421);
  ParamStoreT<float> store;
  SemanticHead<float> head(store, "head", 16, kAct, rng);
  auto p1 = random_tensor<float>({1, 16, 8, 16}, rng);
  auto p2 = random_tensor<float>({1, 16, 4, 8}, rng);
  auto p3 = random_tensor<float>({1, 16, 2, 4}, rng);
  auto y = head.forward(p1, p2, p3, true);
  REQUIRE(y.shape() == Shape4{1, 16, 8, 16});
}

TEST_CASE("pyramid aggregation paths can be disabled independently") {
  std::mt19937 rng(431);
  auto c1 = random_tensor<float>({1, 8, 8, 16}, rng);
  auto c2 = random_tensor<float>({1, 8, 4, 8}, rng);
  auto c3 = random_tensor<float>({1, 8, 2, 4}, rng);

  auto run = [&](bool td, bool bu) {
    ParamStoreT<float> store;
    std::mt19937 prng(433);  // identical weights across variants
    TwoWayPyramid<float> pyr(store, "pyr", 8, td, bu, false, kAct, prng);
    return pyr.forward(c1, c2, c3, true);
  };
  auto both = run(true, true);
  auto top_only = run(true, false);
  auto bottom_only = run(false, true);
  for (int i = 0; i < 3; ++i) {
    REQUIRE(top_only[size_t(i)].shape() == both[size_t(i)].shape());
    REQUIRE(bottom_only[size_t(i)].shape() == both[size_t(i)].shape());
  }
  REQUIRE_FALSE(bitwise_equal(top_only[0], both[0]));
  REQUIRE_FALSE(bitwise_equal(bottom_only[0], both[0]));

  ParamStoreT<float> store;
  std::mt19937 prng(433);
  REQUIRE_THROWS_AS(TwoWayPyramid<float>(store, "bad", 8, false, false, false, kAct, prng),
                    std::runtime_error);
}
