#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <map>

#include "sth/analysis.hpp"
#include "sth/checkpoint.hpp"

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

NetworkConfig small(Ratio p, bool attention = false, Variant v = Variant::Hybrid) {
  NetworkConfig c;
  c.scale_factor = 16;
  c.frames = 4;
  c.input_hw = 32;
  c.num_class = 5;
  c.p = p;
  c.attention = attention;
  c.variant = v;
  return c;
}

std::vector<NetworkConfig> small_family() {
  std::vector<NetworkConfig> out;
  for (Ratio p : {Ratio{0, 1}, Ratio{1, 4}, Ratio{1, 2}})
    for (bool att : {false, true}) out.push_back(small(p, att));
  out.push_back(small(Ratio{1, 4}, true, Variant::Merge));
  auto fixed = small(Ratio{1, 4});
  fixed.kernel_type = KernelType::Fixed;
  out.push_back(fixed);
  return out;
}

/// Counts stored tensor entries in a checkpoint directory that are not
/// structural zeros of the network `net` (same parameter names).
std::uint64_t live_scalars_in_dump(const std::filesystem::path& dir, Network& net) {
  std::map<std::string, const Tensor*> masks;
  for (const auto& p : net.params()) masks[p.name] = p.mask;
  std::ifstream is(dir / "params.tsv");
  std::string line;
  std::uint64_t n = 0;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    const auto tab1 = line.find('\t'), tab2 = line.find('\t', tab1 + 1);
    const std::string name = line.substr(0, tab1), file = line.substr(tab1 + 1, tab2 - tab1 - 1);
    const Tensor t = read_tensor(dir / file);
    const Tensor* m = masks.at(name);
    for (std::size_t i = 0; i < t.numel(); ++i) n += !m || (*m)[i] != 0.0;
  }
  return n;
}

}  // namespace

TEST(CostReport, TotalsAreColumnSums) {
  for (const auto& cfg : {NetworkConfig{}, small(Ratio{1, 4}, true)}) {
    const auto rep = cost_report(cfg);
    CostRow sum;
    for (const auto& r : rep.rows) {
      sum.params += r.params;
      sum.macs += r.macs;
      sum.attention_macs += r.attention_macs;
    }
    EXPECT_EQ(sum.params, rep.total.params);
    EXPECT_EQ(sum.macs, rep.total.macs);
    EXPECT_EQ(sum.attention_macs, rep.total.attention_macs);
    ASSERT_EQ(rep.rows.size(), 8u);
    EXPECT_EQ(rep.rows.front().name, "Conv1");
    EXPECT_EQ(rep.rows.back().name, "FC");
  }
}

TEST(CostReport, StrictlyDecreasingInP) {
  std::uint64_t last_params = ~0ull, last_macs = ~0ull;
  for (Ratio p : {Ratio{0, 1}, Ratio{1, 8}, Ratio{1, 4}, Ratio{1, 2}}) {
    NetworkConfig c;
    c.p = p;
    const auto rep = cost_report(c);
    EXPECT_LT(rep.total.params, last_params) << p.str();
    EXPECT_LT(rep.total.macs, last_macs) << p.str();
    last_params = rep.total.params;
    last_macs = rep.total.macs;
  }
}

TEST(CostReport, AttentionAddsThreeFullyConnectedLayersPerBlock) {
  NetworkConfig c;
  c.attention = true;
  const auto rep = cost_report(c);
  std::uint64_t want = 0;
  for (const auto& b : plan_network(c).blocks) want += 3ull * b.width * (b.width / c.attention_ratio);
  EXPECT_EQ(rep.total.attention_macs, want);
  NetworkConfig plain;
  EXPECT_EQ(rep.total.macs - cost_report(plain).total.macs, want);
}

TEST(CostReport, StructuralZerosAreExcluded) {
  // A hybrid STH core with p = 1/4 holds C*C*(p*3 + (1-p)*9) live weights.
  NetworkConfig c;
  c.blocks = {1, 1, 1, 1};
  c.p = Ratio{1, 4};
  NetworkConfig c0 = c;
  c0.p = Ratio{0, 1};
  std::uint64_t saved = 0;
  for (const auto& b : plan_network(c).blocks) saved += static_cast<std::uint64_t>(b.width) * b.width * 6 / 4;
  EXPECT_EQ(cost_report(c0).total.params - cost_report(c).total.params, saved);
}

TEST(CountParams, MatchesAnalyticReportOnBuiltNetworks) {
  for (const auto& cfg : small_family()) {
    Network net(cfg, 1);
    EXPECT_EQ(count_params(net), cost_report(cfg).total.params) << cfg.p.str() << " att=" << cfg.attention;
  }
}

TEST(CountParams, MatchesLiveScalarsInCheckpointDump) {
  const auto dir = std::filesystem::temp_directory_path() / "sth_test_analysis_ckpt";
  std::filesystem::remove_all(dir);
  RunConfig rc;
  rc.net = small(Ratio{1, 4}, true);
  Network net(rc.net, rc.train.seed);
  save_checkpoint(net, rc, {0.1, 0.2, 0.3}, dir);
  EXPECT_EQ(live_scalars_in_dump(dir, net), count_params(net));
  std::filesystem::remove_all(dir);
}

TEST(CountFlops, EqualsInstrumentedForwardCounter) {
  for (const auto& cfg : small_family()) {
    Network net(cfg, 2);
    const Shape in = make_shape({2, cfg.in_channels, cfg.frames, cfg.input_hw, cfg.input_hw});
    std::uint64_t macs = 0;
    net.forward(random_uniform(in, 3), false, &macs);
    EXPECT_EQ(macs, count_flops(cfg, in).counted_macs()) << cfg.p.str() << " att=" << cfg.attention;
  }
}

TEST(CountFlops, ScalesWithBatchAndRejectsWrongShapes) {
  const auto cfg = small(Ratio{1, 4});
  const auto one = count_flops(cfg, make_shape({1, 3, 4, 32, 32}));
  const auto three = count_flops(cfg, make_shape({3, 3, 4, 32, 32}));
  EXPECT_EQ(three.total.macs, 3 * one.total.macs);
  EXPECT_EQ(three.total.params, one.total.params);
  EXPECT_EQ(error_kind_of([&] { count_flops(cfg, make_shape({1, 3, 4, 30, 32})); }), ErrorKind::ShapeMismatch);
  EXPECT_EQ(error_kind_of([&] { count_flops(cfg, make_shape({3, 4, 32, 32})); }), ErrorKind::ShapeMismatch);
}

TEST(CostFormat, TextAndCsv) {
  const auto rep = cost_report(small(Ratio{1, 4}));
  const std::string csv = format_cost_csv(rep);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "layer,params,macs");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 10);
  EXPECT_NE(csv.find("\nTotal," + std::to_string(rep.total.params) + "," + std::to_string(rep.total.macs) + "\n"),
            std::string::npos);
  const std::string text = format_cost_text(rep);
  EXPECT_EQ(text.rfind("# GFLOPs = multiply-accumulates / 1e9", 0), 0u);
}

TEST(AttentionStats, PairsSumToOne) {
  SynthConfig d;
  d.frames_total = 8;
  d.resolution = 32;
  d.val_per_class = 2;
  const auto val = generate_dataset(d, Split::Val);
  auto nc = small(Ratio{1, 4}, true);
  nc.num_class = 4;
  Network net4(nc, 4);
  const auto stats = export_attention_stats(net4, val);
  ASSERT_EQ(stats.size(), 16u);
  for (const auto& s : stats) {
    EXPECT_NEAR(s.alpha_s + s.alpha_t, 1.0, 1e-12) << s.layer;
    EXPECT_GT(s.alpha_s, 0.0);
  }
  const auto samples = attention_samples(net4, val);
  EXPECT_EQ(samples.size(), 16 * val.size());
  for (const auto& s : samples) EXPECT_NEAR(s.alpha_s + s.alpha_t, 1.0, 1e-12);
  const std::string csv = format_attention_csv(stats);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "layer,alpha_s,alpha_t");
}

TEST(AttentionStats, SymmetricHeadsGiveOneHalf) {
  SynthConfig d;
  d.frames_total = 8;
  d.resolution = 32;
  d.val_per_class = 1;
  const auto val = generate_dataset(d, Split::Val);
  auto nc = small(Ratio{1, 4}, true);
  nc.num_class = 4;
  nc.symmetric_attention = true;
  Network net(nc, 5);
  for (const auto& s : export_attention_stats(net, val)) {
    EXPECT_DOUBLE_EQ(s.alpha_s, 0.5);
    EXPECT_DOUBLE_EQ(s.alpha_t, 0.5);
  }
}

TEST(AttentionStats, DisabledAttentionIsUnsupported) {
  SynthConfig d;
  d.frames_total = 8;
  d.resolution = 32;
  d.val_per_class = 1;
  const auto val = generate_dataset(d, Split::Val);
  auto nc = small(Ratio{1, 4}, false);
  nc.num_class = 4;
  Network net(nc, 6);
  EXPECT_EQ(error_kind_of([&] { export_attention_stats(net, val); }), ErrorKind::Unsupported);
}
