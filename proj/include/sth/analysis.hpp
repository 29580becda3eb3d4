#pragma once

#include <cstdio>
#include <string>
#include <vector>

#include "sth/network.hpp"
#include "sth/training.hpp"

namespace sth {

/// One named layer group. `macs` counts multiply-accumulates of convolutions,
/// the classifier and the attention FCs; `elementwise` counts norm, activation,
/// pooling, residual and integration ops and is kept out of the headline.
struct CostRow {
  std::string name;
  std::uint64_t params = 0;
  std::uint64_t macs = 0;
  std::uint64_t attention_macs = 0;  // part of `macs`
  std::uint64_t elementwise = 0;
};

/// Per-clip cost of a network. GFLOPs are reported as MACs / 1e9.
struct CostReport {
  std::vector<CostRow> rows;
  CostRow total;

  double params_m() const { return static_cast<double>(total.params) / 1e6; }
  double gflops() const { return static_cast<double>(total.macs) / 1e9; }
  /// What the instrumented forward counter sees (it skips the attention FCs).
  std::uint64_t counted_macs() const { return total.macs - total.attention_macs; }
};

namespace detail {

inline void add_row(CostReport& r, CostRow row) {
  r.total.params += row.params;
  r.total.macs += row.macs;
  r.total.attention_macs += row.attention_macs;
  r.total.elementwise += row.elementwise;
  r.rows.push_back(std::move(row));
}

/// gamma, beta, running mean and running variance.
inline std::uint64_t norm_params(std::size_t c) { return 4 * static_cast<std::uint64_t>(c); }

}  // namespace detail

/// Analytic cost of one clip through the network described by `cfg`. Norm
/// layers count 4 scalars per channel; structural zeros are excluded.
inline CostReport cost_report(const NetworkConfig& cfg) {
  const NetworkPlan plan = plan_network(cfg);
  using U = std::uint64_t;
  const U T = cfg.frames;
  CostReport rep;
  rep.total.name = "Total";

  {
    const U c = plan.stem_out, hw = static_cast<U>(plan.h_stem) * plan.w_stem;
    const U w = c * cfg.in_channels * 49;
    detail::add_row(rep, {"Conv1", w + detail::norm_params(c), w * T * hw, 0, 3 * c * T * hw});
  }
  {
    const U out = static_cast<U>(plan.stem_out) * T * plan.h_pool * plan.w_pool;
    detail::add_row(rep, {"Pool1", 0, 0, 0, 9 * out});
  }
  for (std::size_t s = 0; s < 4; ++s) {
    CostRow row{"Conv" + std::to_string(s + 2) + "_x"};
    for (const auto& bp : plan.blocks) {
      if (bp.stage != s) continue;
      const U in_pos = T * bp.h_in * bp.w_in, out_pos = T * bp.h_out * bp.w_out;
      const U w = bp.width, ci = bp.c_in, co = bp.c_out;
      // conv1 (1x1x1) + bn + relu
      row.params += ci * w + detail::norm_params(w);
      row.macs += ci * w * in_pos;
      row.elementwise += 3 * w * in_pos;
      // STH core + bn + relu
      const auto layout = build_layout(bp.width, bp.width, cfg.p, cfg.variant);
      const U live = sth_live_params(layout, SthConvSpec{3, 3, 3, bp.stride, bp.dilation});
      row.params += live + detail::norm_params(w);
      row.macs += live * out_pos;
      row.elementwise += 3 * w * out_pos + w * out_pos;  // bn, relu, branch sum
      if (cfg.attention) {
        const U h = w / cfg.attention_ratio;
        row.params += attention_param_count(bp.width, cfg.attention_ratio);
        row.macs += 3 * w * h;
        row.attention_macs += 3 * w * h;
        row.elementwise += 4 * w * out_pos;  // pooling the descriptor, weighting, merge
      }
      // conv3 + bn, residual, relu
      row.params += w * co + detail::norm_params(co);
      row.macs += w * co * out_pos;
      row.elementwise += 4 * co * out_pos;
      if (bp.projection) {
        row.params += ci * co + detail::norm_params(co);
        row.macs += ci * co * out_pos;
        row.elementwise += 2 * co * out_pos;
      }
    }
    detail::add_row(rep, std::move(row));
  }
  const auto& last = plan.blocks.back();
  const U C = plan.feature_channels, K = cfg.num_class;
  detail::add_row(rep, {"Pool5", 0, 0, 0, C * T * last.h_out * last.w_out});
  detail::add_row(rep, {"FC", C * K + K, T * C * K, 0, T * K});
  return rep;
}

/// Live stored scalars of a built network, including norm running statistics.
inline std::uint64_t count_params(Network& net) {
  std::uint64_t n = 0;
  for (const auto& p : net.params()) n += p.live_count();
  return n;
}

/// Analytic MACs for `input_shape` (N, C, T, H, W); multiplies the per-clip
/// report by N after checking the shape against the network config.
inline CostReport count_flops(const NetworkConfig& cfg, const Shape& input_shape) {
  require(input_shape.rank() == 5, ErrorKind::ShapeMismatch,
          [&] { return "count_flops expects (N,C,T,H,W), got " + input_shape.str(); });
  require(input_shape[1] == cfg.in_channels && input_shape[2] == cfg.frames && input_shape[3] == cfg.input_hw &&
              input_shape[4] == cfg.input_hw,
          ErrorKind::ShapeMismatch, [&] { return "input " + input_shape.str() + " does not match the network config"; });
  CostReport rep = cost_report(cfg);
  const std::uint64_t n = input_shape[0];
  auto scale = [n](CostRow& r) {
    r.macs *= n;
    r.attention_macs *= n;
    r.elementwise *= n;
  };
  for (auto& r : rep.rows) scale(r);
  scale(rep.total);
  return rep;
}

inline std::string format_cost_text(const CostReport& rep) {
  std::string out = "# GFLOPs = multiply-accumulates / 1e9; elementwise ops listed separately\n";
  char buf[192];
  std::snprintf(buf, sizeof buf, "%-10s %14s %18s %18s\n", "layer", "params", "macs", "elementwise");
  out += buf;
  auto line = [&](const CostRow& r) {
    std::snprintf(buf, sizeof buf, "%-10s %14llu %18llu %18llu\n", r.name.c_str(),
                  static_cast<unsigned long long>(r.params), static_cast<unsigned long long>(r.macs),
                  static_cast<unsigned long long>(r.elementwise));
    out += buf;
  };
  for (const auto& r : rep.rows) line(r);
  line(rep.total);
  std::snprintf(buf, sizeof buf, "params(M) %.3f  GFLOPs %.3f\n", rep.params_m(), rep.gflops());
  out += buf;
  return out;
}

inline std::string format_cost_csv(const CostReport& rep) {
  std::string out = "layer,params,macs\n";
  auto line = [&](const CostRow& r) { out += r.name + "," + std::to_string(r.params) + "," + std::to_string(r.macs) + "\n"; };
  for (const auto& r : rep.rows) line(r);
  line(rep.total);
  return out;
}

/// Channel-mean attention weights of one STH layer for one sample.
struct AttentionSample {
  std::size_t layer = 0;
  std::size_t sample = 0;
  double alpha_s = 0.0;
  double alpha_t = 0.0;
};

/// Runs test-mode forwards over `ds` and records, for every STH layer and
/// video, the channel means of alpha_S and alpha_T.
inline std::vector<AttentionSample> attention_samples(Network& net, const VideoDataset& ds, std::size_t batch = 16) {
  require(net.config().attention, ErrorKind::Unsupported, "attention statistics need a network with attention enabled");
  require(ds.size() > 0, ErrorKind::Argument, "attention export on an empty dataset");
  const auto layers = net.sth_layers();
  std::vector<AttentionSample> out;
  for (std::size_t start = 0; start < ds.size(); start += batch) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(ds.size(), start + batch); ++i) idx.push_back(i);
    net.forward(make_batch(ds, idx, net.config().frames, false, 0), false);
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const auto& st = *layers[l]->cache.attn_state;
      const std::size_t c = st.alpha_s.dim(1);
      for (std::size_t b = 0; b < idx.size(); ++b) {
        AttentionSample s{l, idx[b]};
        for (std::size_t m = 0; m < c; ++m) {
          s.alpha_s += st.alpha_s[b * c + m];
          s.alpha_t += st.alpha_t[b * c + m];
        }
        s.alpha_s /= static_cast<double>(c);
        s.alpha_t /= static_cast<double>(c);
        out.push_back(s);
      }
    }
  }
  return out;
}

struct AttentionStat {
  std::size_t layer = 0;
  double alpha_s = 0.0;
  double alpha_t = 0.0;
};

/// Per-layer means over all channels and samples.
inline std::vector<AttentionStat> export_attention_stats(Network& net, const VideoDataset& ds) {
  const auto samples = attention_samples(net, ds);
  std::vector<AttentionStat> stats(net.sth_layers().size());
  for (std::size_t l = 0; l < stats.size(); ++l) stats[l].layer = l;
  for (const auto& s : samples) {
    stats[s.layer].alpha_s += s.alpha_s;
    stats[s.layer].alpha_t += s.alpha_t;
  }
  for (auto& s : stats) {
    s.alpha_s /= static_cast<double>(ds.size());
    s.alpha_t /= static_cast<double>(ds.size());
  }
  return stats;
}

inline std::string format_attention_csv(const std::vector<AttentionStat>& stats) {
  std::string out = "layer,alpha_s,alpha_t\n";
  char buf[96];
  for (const auto& s : stats) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g\n", s.layer, s.alpha_s, s.alpha_t);
    out += buf;
  }
  return out;
}

inline std::string format_attention_samples_csv(const std::vector<AttentionSample>& rows) {
  std::string out = "layer,sample,alpha_s,alpha_t\n";
  char buf[112];
  for (const auto& s : rows) {
    std::snprintf(buf, sizeof buf, "%zu,%zu,%.17g,%.17g\n", s.layer, s.sample, s.alpha_s, s.alpha_t);
    out += buf;
  }
  return out;
}

}  // namespace sth
