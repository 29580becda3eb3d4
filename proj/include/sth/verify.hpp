#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "sth/layers.hpp"
#include "sth/network.hpp"
#include "sth/training.hpp"

namespace sth {

/// Outcome of one property check: `observed` is compared against `limit`.
struct CheckResult {
  std::string name;
  bool passed = false;
  double observed = 0.0;
  double limit = 0.0;
  std::string detail;
};

/// Random small STH layers: the sum of both branches must equal a dense naive
/// convolution with the masked 3D expansion of the same weights.
inline CheckResult verify_oracle(std::size_t configs = 50, std::uint64_t seed = 1) {
  CheckResult r{"oracle", true, 0.0, 1e-10, ""};
  Rng rng(seed);
  const std::size_t groups[] = {1, 2, 4, 8};
  std::size_t done = 0;
  while (done < configs) {
    const std::uint64_t s = rng.next_u64();
    Rng cr(s);
    const std::size_t G = groups[cr.below(4)];
    const std::size_t ci = G * (1 + cr.below(3)), co = G * (1 + cr.below(3));
    const Ratio p = G == 1 ? Ratio{0, 1} : Ratio{1, static_cast<std::int64_t>(G)};
    const Variant variant = cr.below(2) ? Variant::Merge : Variant::Hybrid;
    const SthConvSpec spec{3, 3, 3, 1 + static_cast<int>(cr.below(2)), 1 + static_cast<int>(cr.below(3))};
    const auto layout = build_layout(ci, co, p, variant);
    const auto params = make_sth_params(layout, spec, derive_seed(s, 1), false, 4);
    const std::size_t n = 1 + cr.below(2), t = 3 + cr.below(4), h = 4 + cr.below(5), w = 4 + cr.below(5);
    const Tensor x = random_uniform(make_shape({n, ci, t, h, w}), derive_seed(s, 2), -1.0, 1.0);
    const auto br = sth_forward(x, params, layout, spec);
    const Tensor fast = add(br.o_s, br.o_t);
    const Tensor ref = conv3d_naive(x, expand_to_masked_3d(params, layout), spec.full3d());
    const double d = max_abs(sub(fast, ref));
    if (d > r.observed) {
      r.observed = d;
      r.detail = "worst: C_i=" + std::to_string(ci) + " C_o=" + std::to_string(co) + " p=" + p.str() + " " +
                 to_string(variant) + " stride=" + std::to_string(spec.stride) +
                 " dilation=" + std::to_string(spec.dilation_t);
    }
    ++done;
  }
  r.passed = r.observed < r.limit;
  r.detail = std::to_string(configs) + " configs; " + r.detail;
  return r;
}

/// Finite differences through one STH layer with attentive integration under
/// the loss sum(g*y + y^2/4).
inline CheckResult verify_layer_grad(std::size_t samples = 40, std::uint64_t seed = 2) {
  const auto layout = build_layout(8, 8, Ratio{1, 4});
  const SthConvSpec spec{3, 3, 3, 1, 2};
  SthConvLayer layer(layout, spec, derive_seed(seed, 1), true, 4);
  const Tensor x = random_uniform(Shape{2, 8, 4, 5, 5}, derive_seed(seed, 2), -1.0, 1.0);
  const Tensor y0 = layer.forward(x);
  const Tensor g = random_uniform(y0.shape(), derive_seed(seed, 3), -1.0, 1.0);
  auto loss_grad = [&](const Tensor& y) {
    Tensor d(y.shape());
    for (std::size_t i = 0; i < y.numel(); ++i) d[i] = g[i] + 0.5 * y[i];
    return d;
  };
  auto loss = [&]() {
    SthForwardCache c;
    const Tensor y = sth_layer_forward(x, layer.params, layer.layout, layer.spec, c);
    double l = 0.0;
    for (std::size_t i = 0; i < y.numel(); ++i) l += g[i] * y[i] + 0.25 * y[i] * y[i];
    return l;
  };
  layer.backward(loss_grad(y0));
  ParamList params;
  layer.collect(params, "sth");
  const auto rep = finite_difference_check(loss, params, samples, 1e-6, derive_seed(seed, 4));
  return {"grad.layer", rep.max_rel_error < 1e-5, rep.max_rel_error, 1e-5,
          std::to_string(rep.checked) + " params; worst " + rep.worst};
}

/// Small end-to-end network used by the network gradient check.
inline NetworkConfig gradcheck_network_config() {
  NetworkConfig c;
  c.scale_factor = 16;
  c.frames = 4;
  c.input_hw = 32;
  c.num_class = 5;
  c.p = Ratio{1, 4};
  c.attention = true;
  return c;
}

/// Finite differences of mean cross-entropy over the whole network (norms in
/// training mode, so batch statistics are differentiated too). Probes that
/// straddle a ReLU or max-pool kink are redrawn.
inline CheckResult verify_network_grad(std::size_t samples = 30, std::uint64_t seed = 3) {
  const NetworkConfig cfg = gradcheck_network_config();
  Network net(cfg, derive_seed(seed, 1));
  const Tensor x = random_uniform(make_shape({2, cfg.in_channels, cfg.frames, cfg.input_hw, cfg.input_hw}),
                                  derive_seed(seed, 2), -1.0, 1.0);
  const std::vector<std::size_t> labels = {1, 3};
  auto loss = [&]() { return cross_entropy(consensus(net.forward(x, true)), labels).loss; };
  const auto ce = cross_entropy(consensus(net.forward(x, true)), labels);
  net.backward(consensus_backward(ce.grad, cfg.frames));
  const auto params = net.params();
  const auto rep = finite_difference_check(loss, params, samples, 1e-6, derive_seed(seed, 3),
                                          [&] { return net.activation_pattern(); });
  return {"grad.network", rep.max_rel_error < 1e-4, rep.max_rel_error, 1e-4,
          std::to_string(rep.checked) + " params (" + std::to_string(rep.kinks) + " kink probes redrawn); worst " +
              rep.worst};
}

/// Forward trace of `cfg` (batch 1) against the planned shape chain.
inline CheckResult verify_shapes(const NetworkConfig& cfg, std::vector<TraceEntry>* trace_out = nullptr) {
  Network net(cfg, 1);
  std::vector<TraceEntry> trace;
  const Tensor x(make_shape({1, cfg.in_channels, cfg.frames, cfg.input_hw, cfg.input_hw}));
  net.forward(x, false, nullptr, &trace);
  trace.push_back({"Consensus", {1, cfg.num_class}});
  const auto want = expected_trace(cfg);
  std::size_t mismatches = trace.size() == want.size() ? 0 : 1;
  std::string detail;
  for (std::size_t i = 0; i < std::min(trace.size(), want.size()); ++i)
    if (trace[i].layer != want[i].layer || trace[i].shape != want[i].shape) {
      ++mismatches;
      detail += " " + trace[i].layer + "=" + shape_str(trace[i].shape) + " (want " + shape_str(want[i].shape) + ")";
    }
  if (trace_out) *trace_out = trace;
  return {"shapes", mismatches == 0, static_cast<double>(mismatches), 0.0,
          mismatches ? "mismatch:" + detail : std::to_string(trace.size()) + " layers match"};
}

}  // namespace sth
