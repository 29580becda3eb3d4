#include <gtest/gtest.h>

#include "oracles.hpp"
#include "sth/sth_conv.hpp"

using namespace sth;

namespace {

template <typename Fn>
ErrorKind error_kind_of(Fn&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  ADD_FAILURE() << "expected sth::Error";
  return ErrorKind::Io;
}

std::size_t count_nonzero(const Tensor& t) {
  std::size_t n = 0;
  for (double v : t.data()) n += v != 0.0;
  return n;
}

Tensor oracle_forward(const Tensor& x, const SthLayerParams& p, const HybridLayout& l, const SthConvSpec& s) {
  return oracle::conv3d_permuted(x, expand_to_masked_3d(p, l), s.full3d());
}

}  // namespace

TEST(Layout, FourTypesTileEightChannels) {
  const auto l = build_layout(8, 8, Ratio(1, 4));
  EXPECT_EQ(l.groups, 4u);
  EXPECT_EQ(l.span_width, 2u);
  for (std::size_t g = 0; g < 4; ++g) EXPECT_EQ(l.temporal_span(g), (std::pair<std::size_t, std::size_t>{2 * g, 2 * g + 2}));
}

TEST(Layout, BlocksAndSpansTileTheChannels) {
  const auto l = build_layout(64, 64, Ratio(1, 4));
  std::vector<int> owners(4, 0), covered(64, 0);
  for (std::size_t m = 0; m < 64; ++m) {
    const auto g = l.type_of_output_channel(m);
    ++owners[g];
    EXPECT_EQ(g, m / 16);
  }
  for (int n : owners) EXPECT_EQ(n, 16);
  for (std::size_t g = 0; g < 4; ++g) {
    const auto [lo, hi] = l.temporal_span(g);
    for (std::size_t c = lo; c < hi; ++c) ++covered[c];
  }
  for (int n : covered) EXPECT_EQ(n, 1);
}

TEST(Layout, Errors) {
  EXPECT_EQ(error_kind_of([] { build_layout(8, 8, Ratio(1, 1)); }), ErrorKind::Layout);
  const auto full = build_layout(8, 8, Ratio(1, 1), Variant::Hybrid, true);
  for (std::size_t m = 0; m < 8; ++m)
    for (std::size_t c = 0; c < 8; ++c) EXPECT_TRUE(full.is_temporal(m, c));
  EXPECT_EQ(error_kind_of([] { build_layout(6, 8, Ratio(1, 4)); }), ErrorKind::Layout);
  EXPECT_EQ(error_kind_of([] { build_layout(8, 6, Ratio(1, 4)); }), ErrorKind::Layout);
  EXPECT_EQ(error_kind_of([] { build_layout(8, 8, Ratio(2, 5)); }), ErrorKind::Layout);
  EXPECT_NO_THROW(build_layout(8, 6, Ratio(1, 4), Variant::Merge));
}

TEST(Layout, RatioParsing) {
  EXPECT_EQ(Ratio::parse("1/4"), Ratio(1, 4));
  EXPECT_EQ(Ratio::parse("0.125"), Ratio(1, 8));
  EXPECT_TRUE(Ratio::parse("0").is_zero());
  EXPECT_THROW(Ratio::parse("quarter"), Error);
}

TEST(SthForward, ZeroProportionIsTheSpatialBaseline) {
  const auto l = build_layout(4, 6, Ratio(0, 1));
  const SthConvSpec s{3, 3, 3, 2, 1};
  const auto p = make_sth_params(l, s, 1);
  const Tensor x = random_uniform(Shape{2, 4, 3, 7, 7}, 2, -1, 1);
  const auto br = sth_forward(x, p, l, s);
  EXPECT_EQ(max_abs(br.o_t), 0.0);
  EXPECT_EQ(integrate_sum(br), conv2d_spatial(x, p.w_spatial, s.spatial()));
  EXPECT_LT(max_abs_diff(br.o_s, conv3d_naive(x, p.w_spatial, s.spatial())), 1e-12);
}

TEST(SthForward, ZeroTemporalWeightsGiveZeroTemporalBranch) {
  const auto l = build_layout(8, 8, Ratio(1, 2));
  const SthConvSpec s;
  auto p = make_sth_params(l, s, 3);
  p.w_temporal.fill(0.0);
  const auto br = sth_forward(random_uniform(Shape{1, 8, 4, 5, 5}, 4, -1, 1), p, l, s);
  EXPECT_EQ(max_abs(br.o_t), 0.0);
  EXPECT_GT(max_abs(br.o_s), 0.0);
}

TEST(SthForward, MatchesMaskedDenseOracle) {
  struct Case {
    std::size_t ci, co;
    Ratio p;
    Variant v;
    int stride, dil, kt, kh;
  };
  const std::vector<Case> cases = {
      {8, 8, Ratio(1, 4), Variant::Hybrid, 1, 1, 3, 3},  {8, 4, Ratio(1, 2), Variant::Hybrid, 2, 2, 3, 3},
      {8, 8, Ratio(1, 8), Variant::Hybrid, 1, 3, 3, 3},  {6, 6, Ratio(1, 3), Variant::Hybrid, 2, 1, 5, 3},
      {8, 8, Ratio(0, 1), Variant::Hybrid, 1, 1, 3, 3},  {8, 8, Ratio(1, 1), Variant::Hybrid, 1, 2, 3, 3},
      {8, 8, Ratio(1, 4), Variant::Merge, 1, 1, 3, 3},   {8, 5, Ratio(1, 2), Variant::Merge, 2, 3, 3, 5},
      {4, 8, Ratio(1, 4), Variant::Hybrid, 1, 2, 3, 1},
  };
  int i = 0;
  for (const auto& c : cases) {
    const auto l = build_layout(c.ci, c.co, c.p, c.v, true);
    const SthConvSpec s{c.kt, c.kh, c.kh, c.stride, c.dil};
    const auto p = make_sth_params(l, s, 10 + i);
    const Tensor x = random_uniform(make_shape({2, c.ci, 7, 6, 5}), 20 + i, -1, 1);
    const Tensor got = integrate_sum(sth_forward(x, p, l, s));
    EXPECT_LT(max_abs_diff(got, oracle_forward(x, p, l, s)), 1e-10) << "case " << i;
    ++i;
  }
}

TEST(SthForward, LiveParamsAndMacs) {
  for (auto p : {Ratio(0, 1), Ratio(1, 2), Ratio(1, 4), Ratio(1, 8)}) {
    const auto l = build_layout(16, 8, p);
    const SthConvSpec s{3, 3, 3, 2, 2};
    const auto prm = make_sth_params(l, s, 5);
    const std::size_t expect = static_cast<std::size_t>(8 * 16 * (p.value() * 3 + (1 - p.value()) * 9) + 0.5);
    EXPECT_EQ(sth_live_params(l, s), expect);
    EXPECT_EQ(count_nonzero(expand_to_masked_3d(prm, l)), expect);
    EXPECT_EQ(static_cast<std::size_t>(sum(prm.mask_spatial) + sum(prm.mask_temporal)), expect);

    std::uint64_t macs = 0;
    const auto br = sth_forward(random_uniform(Shape{1, 16, 4, 9, 9}, 6), prm, l, s, &macs);
    EXPECT_EQ(macs, expect * br.o_s.dim(2) * br.o_s.dim(3) * br.o_s.dim(4));
  }
}

TEST(SthForward, HalfTemporalKernelHasSixTapsPerInputChannel) {
  const std::size_t ci = 12;
  const auto l = build_layout(ci, 4, Ratio(1, 2));
  const auto prm = make_sth_params(l, SthConvSpec{}, 7);
  const Tensor w = expand_to_masked_3d(prm, l);
  for (std::size_t m = 0; m < 4; ++m) {
    std::size_t nz = 0;
    for (std::size_t i = 0; i < ci * 27; ++i) nz += w[m * ci * 27 + i] != 0.0;
    EXPECT_EQ(nz, 6 * ci);
  }
  const auto flat = build_layout(ci, 4, Ratio(0, 1));
  EXPECT_EQ(sth_live_params(flat, SthConvSpec{}) / 4, 9 * ci);
}

TEST(SthForward, ZeroParamsExpandToZero) {
  const auto l = build_layout(8, 8, Ratio(1, 4));
  auto p = make_sth_params(l, SthConvSpec{}, 8);
  p.w_spatial.fill(0.0);
  p.w_temporal.fill(0.0);
  EXPECT_EQ(max_abs(expand_to_masked_3d(p, l)), 0.0);
}

TEST(SthForward, ShapeAndLayoutErrors) {
  const auto l = build_layout(8, 8, Ratio(1, 4));
  const SthConvSpec s;
  auto p = make_sth_params(l, s, 9);
  EXPECT_EQ(error_kind_of([&] { sth_forward(ones(Shape{1, 4, 3, 5, 5}), p, l, s); }), ErrorKind::ShapeMismatch);
  p.mask_spatial[0] = 1.0 - p.mask_spatial[0];
  EXPECT_EQ(error_kind_of([&] { sth_forward(ones(Shape{1, 8, 3, 5, 5}), p, l, s); }), ErrorKind::Layout);
  const auto merge = build_layout(8, 8, Ratio(1, 4), Variant::Merge);
  EXPECT_EQ(error_kind_of([&] { sth_merge_forward(ones(Shape{1, 8, 3, 5, 5}), make_sth_params(l, s, 1), l, s); }),
            ErrorKind::Layout);
  EXPECT_NO_THROW(sth_merge_forward(ones(Shape{1, 8, 3, 5, 5}), make_sth_params(merge, s, 1), merge, s));
}

TEST(SthMerge, AgreesWithHybridOnTypeZeroBlock) {
  const SthConvSpec s;
  const auto hyb = build_layout(8, 8, Ratio(1, 4));
  const auto mrg = build_layout(8, 8, Ratio(1, 4), Variant::Merge);
  auto ph = make_sth_params(hyb, s, 30);
  // Merge params share the hybrid weights wherever both layouts mark them live.
  auto pm = make_sth_params(mrg, s, 31);
  for (std::size_t i = 0; i < pm.w_spatial.numel(); ++i)
    if (ph.mask_spatial[i] != 0.0 && pm.mask_spatial[i] != 0.0) pm.w_spatial[i] = ph.w_spatial[i];
  for (std::size_t i = 0; i < pm.w_temporal.numel(); ++i)
    if (ph.mask_temporal[i] != 0.0 && pm.mask_temporal[i] != 0.0) pm.w_temporal[i] = ph.w_temporal[i];

  const Tensor x = random_uniform(Shape{1, 8, 4, 6, 6}, 32, -1, 1);
  const Tensor yh = integrate_sum(sth_forward(x, ph, hyb, s));
  const Tensor ym = integrate_sum(sth_merge_forward(x, pm, mrg, s));
  const auto [m0, m1] = hyb.output_block(0);
  const std::size_t plane = yh.numel() / 8;
  for (std::size_t m = m0; m < m1; ++m)
    for (std::size_t i = 0; i < plane; ++i) EXPECT_NEAR(yh[m * plane + i], ym[m * plane + i], 1e-12);
  EXPECT_LT(max_abs_diff(ym, oracle_forward(x, pm, mrg, s)), 1e-10);
}

TEST(SthMerge, SingleGroupCoincidesWithHybrid) {
  const SthConvSpec s;
  const auto hyb = build_layout(4, 4, Ratio(1, 1), Variant::Hybrid, true);
  const auto mrg = build_layout(4, 4, Ratio(1, 1), Variant::Merge, true);
  const auto p = make_sth_params(hyb, s, 40);
  EXPECT_TRUE(p.mask_spatial == make_sth_params(mrg, s, 40).mask_spatial);
  const Tensor x = random_uniform(Shape{1, 4, 3, 4, 4}, 41, -1, 1);
  EXPECT_EQ(integrate_sum(sth_forward(x, p, hyb, s)), integrate_sum(sth_merge_forward(x, p, mrg, s)));
}

TEST(Attention, SymmetricHeadsSplitEvenly) {
  const Tensor os = random_uniform(Shape{2, 8, 3, 4, 4}, 50, -1, 1);
  const Tensor ot = random_uniform(Shape{2, 8, 3, 4, 4}, 51, -1, 1);
  const auto a = make_attention(8, 4, 52, true);
  const auto res = attentive_integrate(os, ot, a);
  for (double v : res.state.alpha_t.data()) EXPECT_EQ(v, 0.5);
  for (double v : res.state.alpha_s.data()) EXPECT_EQ(v, 0.5);
  EXPECT_LT(max_abs_diff(res.out, scale(add(os, ot), 0.5)), 1e-15);
}

TEST(Attention, AlphasSumToOne) {
  for (int trial = 0; trial < 5; ++trial) {
    const Tensor os = random_uniform(Shape{3, 16, 2, 3, 3}, 60 + trial, -5, 5);
    const Tensor ot = random_uniform(Shape{3, 16, 2, 3, 3}, 70 + trial, -5, 5);
    auto a = make_attention(16, 4, 80 + trial);
    a.head_t = scale(a.head_t, 20.0);
    const auto res = attentive_integrate(os, ot, a);
    for (std::size_t i = 0; i < res.state.alpha_t.numel(); ++i)
      EXPECT_NEAR(res.state.alpha_t[i] + res.state.alpha_s[i], 1.0, 1e-15);
  }
}

TEST(Attention, Errors) {
  const Tensor a = ones(Shape{1, 8, 2, 2, 2});
  EXPECT_EQ(error_kind_of([&] { attentive_integrate(a, ones(Shape{1, 8, 2, 2, 1}), make_attention(8, 4, 1)); }),
            ErrorKind::ShapeMismatch);
  EXPECT_EQ(error_kind_of([] { make_attention(8, 3, 1); }), ErrorKind::Argument);
}

TEST(Attention, OverheadOnTheBackboneIsAboutOneMillion) {
  // One attention block per bottleneck STH layer; C_o of the 3x3 stage is 64/128/256/512 with 3/4/6/3 blocks.
  const std::vector<std::pair<std::size_t, std::size_t>> stages = {{64, 3}, {128, 4}, {256, 6}, {512, 3}};
  std::size_t total = 0;
  for (auto [c, blocks] : stages) {
    total += blocks * attention_param_count(c, 4);
    EXPECT_EQ(attention_param_count(c, 4), make_attention(c, 4, 1).param_count());
  }
  EXPECT_NEAR(static_cast<double>(total) / 1e6, 1.0, 0.1);
}

TEST(SthBackward, PlainSumPassesGradientToBothBranches) {
  const auto l = build_layout(8, 8, Ratio(1, 4));
  const SthConvSpec s;
  const auto p = make_sth_params(l, s, 90);
  const Tensor x = random_uniform(Shape{1, 8, 3, 5, 5}, 91, -1, 1);
  SthForwardCache cache;
  const Tensor y = sth_layer_forward(x, p, l, s, cache);
  const Tensor g = random_uniform(y.shape(), 92, -1, 1);
  const auto full = sth_backward(x, p, l, s, cache, g);
  const auto branch = sth_branch_backward(x, p, l, s, g, g);
  EXPECT_EQ(full.w_spatial, branch.w_spatial);
  EXPECT_EQ(full.input, branch.input);
  EXPECT_FALSE(full.attn.has_value());

  // Branch adjoint equals the dense masked-3D adjoint.
  const auto dense = conv3d_backward(x, expand_to_masked_3d(p, l), s.full3d(), g);
  EXPECT_LT(max_abs_diff(full.input, dense.input), 1e-10);
}

TEST(SthBackward, StructuralZerosReceiveZeroGradient) {
  const auto l = build_layout(8, 8, Ratio(1, 4));
  const SthConvSpec s{3, 3, 3, 2, 2};
  const auto p = make_sth_params(l, s, 93, true);
  const Tensor x = random_uniform(Shape{2, 8, 5, 6, 6}, 94, -1, 1);
  SthForwardCache cache;
  const Tensor y = sth_layer_forward(x, p, l, s, cache);
  const auto grads = sth_backward(x, p, l, s, cache, random_uniform(y.shape(), 95, -1, 1));
  for (std::size_t i = 0; i < p.mask_spatial.numel(); ++i)
    if (p.mask_spatial[i] == 0.0) EXPECT_EQ(grads.w_spatial[i], 0.0);
  for (std::size_t i = 0; i < p.mask_temporal.numel(); ++i)
    if (p.mask_temporal[i] == 0.0) EXPECT_EQ(grads.w_temporal[i], 0.0);
  EXPECT_GT(max_abs(grads.w_spatial), 0.0);
  EXPECT_GT(max_abs(grads.w_temporal), 0.0);
}

TEST(SthBackward, FiniteDifferencesWithAttention) {
  const auto l = build_layout(8, 8, Ratio(1, 4));
  const SthConvSpec s{3, 3, 3, 1, 2};
  auto p = make_sth_params(l, s, 96, true);
  Tensor x = random_uniform(Shape{2, 8, 4, 5, 5}, 97, -1, 1);
  SthForwardCache cache;
  const Tensor y0 = sth_layer_forward(x, p, l, s, cache);
  // Nonlinear loss so attention gradients are exercised beyond a linear probe.
  const Tensor g = random_uniform(y0.shape(), 98, -1, 1);
  auto loss = [&] {
    SthForwardCache c;
    const Tensor y = sth_layer_forward(x, p, l, s, c);
    double acc = 0.0;
    for (std::size_t i = 0; i < y.numel(); ++i) acc += g[i] * y[i] + 0.25 * y[i] * y[i];
    return acc;
  };
  Tensor dy(y0.shape());
  for (std::size_t i = 0; i < y0.numel(); ++i) dy[i] = g[i] + 0.5 * y0[i];
  const auto grads = sth_backward(x, p, l, s, cache, dy);

  struct Slot {
    Tensor* value;
    const Tensor* grad;
    const Tensor* mask;
  };
  auto& a = *p.attn;
  const auto& ga = *grads.attn;
  const std::vector<Slot> slots = {
      {&p.w_spatial, &grads.w_spatial, &p.mask_spatial}, {&p.w_temporal, &grads.w_temporal, &p.mask_temporal},
      {&a.reduce, &ga.reduce, nullptr},                  {&a.reduce_bias, &ga.reduce_bias, nullptr},
      {&a.head_t, &ga.head_t, nullptr},                  {&a.head_t_bias, &ga.head_t_bias, nullptr},
      {&a.head_s, &ga.head_s, nullptr},                  {&a.head_s_bias, &ga.head_s_bias, nullptr},
      {&x, &grads.input, nullptr},
  };
  Rng rng(99);
  double worst = 0.0;
  int checked = 0;
  for (const auto& slot : slots) {
    for (int k = 0; k < 8; ++k) {
      std::size_t i = rng.below(slot.value->numel());
      if (slot.mask)
        while ((*slot.mask)[i] == 0.0) i = rng.below(slot.value->numel());
      const double num = oracle::central_difference(loss, (*slot.value)[i], 1e-5);
      worst = std::max(worst, oracle::relative_error((*slot.grad)[i], num));
      ++checked;
    }
  }
  EXPECT_GE(checked, 50);
  EXPECT_LT(worst, 1e-5);
}

TEST(Dilation, ScheduleAndShapes) {
  EXPECT_EQ(dilation_schedule(0), 1);
  EXPECT_EQ(dilation_schedule(1), 2);
  EXPECT_EQ(dilation_schedule(2), 3);
  EXPECT_EQ(dilation_schedule(3), 1);
  for (std::size_t i = 0; i < 10; ++i) EXPECT_EQ(dilation_schedule(i, false), 1);

  const auto l = build_layout(4, 4, Ratio(1, 2));
  const Tensor x = random_uniform(Shape{1, 4, 8, 4, 4}, 100, -1, 1);
  for (int d = 1; d <= 3; ++d) {
    const SthConvSpec s{3, 3, 3, 1, d};
    EXPECT_EQ(sth_forward(x, make_sth_params(l, s, 101), l, s).o_t.dim(2), 8u);
  }
}
