#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "sth/sth.hpp"

namespace fs = std::filesystem;
using namespace sth;

namespace {

enum Exit { kOk = 0, kVerifyFailed = 1, kConfig = 2, kIo = 3, kConsistency = 4 };

int exit_code_for(ErrorKind k) {
  switch (k) {
    case ErrorKind::Config:
    case ErrorKind::Argument:
    case ErrorKind::Unsupported:
      return kConfig;
    case ErrorKind::MissingFile:
    case ErrorKind::BadMagic:
    case ErrorKind::DimOverflow:
    case ErrorKind::Parse:
    case ErrorKind::Io:
      return kIo;
    case ErrorKind::InvalidShape:
    case ErrorKind::ShapeMismatch:
    case ErrorKind::Layout:
    case ErrorKind::Validation:
      return kConsistency;
  }
  return kConfig;
}

struct Globals {
  std::string config;
  std::vector<std::string> overrides;
  std::int64_t seed = -1;
  std::string csv;
  std::string out;
};

RunConfig load_run_config(const Globals& g) {
  RunConfig cfg = g.config.empty() ? RunConfig{} : load_config(g.config);
  for (const auto& kv : g.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) fail(ErrorKind::Config, "--set expects KEY=VALUE, got '" + kv + "'");
    set_config_value(cfg, detail::trim(kv.substr(0, eq)), detail::trim(kv.substr(eq + 1)), "--set");
  }
  if (g.seed >= 0) {
    cfg.train.seed = static_cast<std::uint64_t>(g.seed);
    cfg.data.seed = static_cast<std::uint64_t>(g.seed);
  }
  return cfg;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  require(static_cast<bool>(os), ErrorKind::Io, [&] { return "cannot write " + path.string(); });
  os << text;
  require(static_cast<bool>(os), ErrorKind::Io, [&] { return "write failed for " + path.string(); });
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// ---- analyze ---------------------------------------------------------------

int cmd_analyze(const Globals& g, const std::string& sweep) {
  const RunConfig cfg = load_run_config(g);
  validate_config(cfg.net);
  std::string out, csv;
  if (sweep.empty()) {
    const auto rep = cost_report(cfg.net);
    out = fmt("# p=%s kernel_type=%s attention=%s variant=%s frames=%zu input=%zu num_class=%zu scale_factor=%zu\n",
              cfg.net.p.str().c_str(), to_string(cfg.net.kernel_type), cfg.net.attention ? "true" : "false",
              to_string(cfg.net.variant), cfg.net.frames, cfg.net.input_hw, cfg.net.num_class, cfg.net.scale_factor) +
          format_cost_text(rep);
    csv = format_cost_csv(rep);
  } else {
    out = fmt("# kernel_type=%s attention=%s variant=%s frames=%zu input=%zu num_class=%zu scale_factor=%zu\n",
              to_string(cfg.net.kernel_type), cfg.net.attention ? "true" : "false", to_string(cfg.net.variant),
              cfg.net.frames, cfg.net.input_hw, cfg.net.num_class, cfg.net.scale_factor);
    out += "# GFLOPs = multiply-accumulates / 1e9\n";
    out += fmt("%-6s %10s %10s\n", "p", "params(M)", "GFLOPs");
    csv = "p,params_m,gflops\n";
    std::stringstream ss(sweep);
    std::string item;
    while (std::getline(ss, item, ',')) {
      NetworkConfig net = cfg.net;
      try {
        net.p = Ratio::parse(detail::trim(item));
      } catch (const Error& e) {
        fail(ErrorKind::Config, std::string("--sweep-p: ") + e.what());
      }
      validate_config(net);
      const auto rep = cost_report(net);
      out += fmt("%-6s %10.3f %10.3f\n", net.p.str().c_str(), rep.params_m(), rep.gflops());
      csv += fmt("%s,%.6f,%.6f\n", net.p.str().c_str(), rep.params_m(), rep.gflops());
    }
  }
  if (!g.csv.empty()) write_text(g.csv, csv);
  std::cout << out;
  return kOk;
}

// ---- verify ----------------------------------------------------------------

int cmd_verify(const Globals& g, const std::string& scope) {
  const RunConfig cfg = load_run_config(g);
  validate_config(cfg.net);
  std::vector<CheckResult> results;
  std::string trace_text;
  if (scope == "oracle" || scope == "all") results.push_back(verify_oracle(50, 1));
  if (scope == "grad" || scope == "all") {
    results.push_back(verify_layer_grad(40, 2));
    results.push_back(verify_network_grad(30, 3));
  }
  if (scope == "shapes" || scope == "all") {
    std::vector<TraceEntry> trace;
    results.push_back(verify_shapes(cfg.net, &trace));
    for (const auto& t : trace) trace_text += fmt("  %-10s %s\n", t.layer.c_str(), shape_str(t.shape).c_str());
  }
  bool ok = true;
  std::string csv = "check,passed,observed,limit\n";
  for (const auto& r : results) {
    ok = ok && r.passed;
    std::cout << fmt("%s %-13s observed %.3e limit %.0e  %s\n", r.passed ? "PASS" : "FAIL", r.name.c_str(), r.observed,
                     r.limit, r.detail.c_str());
    csv += fmt("%s,%d,%.17g,%.17g\n", r.name.c_str(), r.passed ? 1 : 0, r.observed, r.limit);
  }
  std::cout << trace_text;
  if (!g.csv.empty()) write_text(g.csv, csv);
  return ok ? kOk : kVerifyFailed;
}

// ---- data, training, evaluation -----------------------------------------------

int cmd_gen_data(const Globals& g) {
  const RunConfig cfg = load_run_config(g);
  validate_synth(cfg.data);
  if (g.out.empty()) fail(ErrorKind::Config, "gen-data needs --out DIR");
  const auto tr = gen_dataset(cfg.data, Split::Train, g.out);
  const auto va = gen_dataset(cfg.data, Split::Val, g.out);
  std::cout << fmt("%s task: %zu train / %zu val videos in %s\n", to_string(cfg.data.task), tr.entries.size(),
                   va.entries.size(), g.out.c_str());
  return kOk;
}

VideoDataset load_split(const fs::path& data_dir, const std::string& split) {
  return load_dataset(data_dir / split / "manifest.tsv");
}

/// Dataset and network must agree on channels, resolution, frame budget and classes.
void check_compatible(const NetworkConfig& net, const VideoDataset& ds, const std::string& what) {
  require(ds.size() > 0, ErrorKind::Validation, [&] { return what + " split is empty"; });
  const Video& v = ds.videos.front();
  require(v.c == net.in_channels && v.h == net.input_hw && v.w == net.input_hw, ErrorKind::ShapeMismatch, [&] {
    return what + " videos are " + std::to_string(v.c) + "x" + std::to_string(v.h) + "x" + std::to_string(v.w) +
           ", network expects " + std::to_string(net.in_channels) + "x" + std::to_string(net.input_hw) + "x" +
           std::to_string(net.input_hw);
  });
  require(v.f >= net.frames, ErrorKind::ShapeMismatch,
          [&] { return what + " videos have " + std::to_string(v.f) + " frames, fewer than net.frames"; });
  require(ds.num_class == net.num_class, ErrorKind::Validation, [&] {
    return what + " has " + std::to_string(ds.num_class) + " classes, network has " + std::to_string(net.num_class);
  });
}

int cmd_train(const Globals& g, const std::string& data) {
  const RunConfig cfg = load_run_config(g);
  validate_run(cfg, true, true, false);
  if (data.empty()) fail(ErrorKind::Config, "train needs --data DIR");
  if (g.out.empty()) fail(ErrorKind::Config, "train needs --out DIR");
  const VideoDataset train = load_split(data, "train");
  VideoDataset val = load_split(data, "val");
  check_compatible(cfg.net, train, "train");
  check_compatible(cfg.net, val, "val");
  val.channel_mean = train.channel_mean;

  Network net(cfg.net, cfg.train.seed);
  const auto res = fit(net, train, val, cfg.train, [](const MetricsRow& r) {
    std::cout << fmt("epoch %3zu %-5s loss %.4f top1 %.4f top5 %.4f lr %g\n", r.epoch, r.split.c_str(), r.m.loss,
                     r.m.top1, r.m.top5, r.lr)
              << std::flush;
  });
  save_checkpoint(net, cfg, train.channel_mean, g.out);
  const fs::path metrics = g.csv.empty() ? fs::path(g.out) / "metrics.csv" : fs::path(g.csv);
  write_text(metrics, format_metrics_csv(res.rows));
  std::cout << fmt("final val top1 %.4f (best %.4f) after %zu epochs; checkpoint in %s\n", res.final_val.top1,
                   res.best_val_top1, res.epochs_run, g.out.c_str());
  return kOk;
}

int cmd_eval(const Globals& g, const std::string& checkpoint, const std::string& data, const std::string& split) {
  if (checkpoint.empty() || data.empty()) fail(ErrorKind::Config, "eval needs --checkpoint DIR and --data DIR");
  Checkpoint meta;
  Network net = load_checkpoint(checkpoint, &meta);
  VideoDataset ds = load_split(data, split);
  check_compatible(net.config(), ds, split);
  ds.channel_mean = meta.channel_mean;
  const auto m = evaluate(net, ds, meta.config.eval_clips);
  std::cout << fmt("%s n=%zu clips=%zu loss %.6f top1 %.6f top5 %.6f\n", split.c_str(), ds.size(),
                   meta.config.eval_clips, m.loss, m.top1, m.top5);
  if (!g.csv.empty())
    write_text(g.csv, "split,n,loss,top1,top5\n" +
                          fmt("%s,%zu,%.10g,%.10g,%.10g\n", split.c_str(), ds.size(), m.loss, m.top1, m.top5));
  return kOk;
}

int cmd_dump_attention(const Globals& g, const std::string& checkpoint, const std::string& data,
                       const std::string& split) {
  if (checkpoint.empty() || data.empty())
    fail(ErrorKind::Config, "dump-attention needs --checkpoint DIR and --data DIR");
  Checkpoint meta;
  Network net = load_checkpoint(checkpoint, &meta);
  VideoDataset ds = load_split(data, split);
  check_compatible(net.config(), ds, split);
  ds.channel_mean = meta.channel_mean;
  const auto samples = attention_samples(net, ds);
  std::vector<AttentionStat> stats(net.sth_layers().size());
  for (std::size_t l = 0; l < stats.size(); ++l) stats[l].layer = l;
  double worst = 0.0;
  for (const auto& s : samples) {
    stats[s.layer].alpha_s += s.alpha_s / static_cast<double>(ds.size());
    stats[s.layer].alpha_t += s.alpha_t / static_cast<double>(ds.size());
    worst = std::max(worst, std::abs(s.alpha_s + s.alpha_t - 1.0));
  }
  if (!g.csv.empty()) write_text(g.csv, format_attention_samples_csv(samples));
  std::cout << format_attention_csv(stats);
  std::cout << fmt("# %zu rows; max |alpha_s + alpha_t - 1| = %.3e\n", samples.size(), worst);
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Spatio-temporal hybrid convolution toolkit"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config, "key = value config file");
  app.add_option("--set", g.overrides, "override one config key (KEY=VALUE), repeatable");
  app.add_option("--seed", g.seed, "seed for data generation and training");
  app.add_option("--csv", g.csv, "CSV output path");
  app.add_option("--out", g.out, "output directory");

  std::string sweep, scope = "all", data, checkpoint, split = "val";
  auto* analyze = app.add_subcommand("analyze", "parameter and MAC counts");
  analyze->add_option("--sweep-p", sweep, "comma-separated p values, e.g. 0,1/8,1/4,1/2");
  auto* verify = app.add_subcommand("verify", "run the property checks");
  verify->add_option("scope", scope, "oracle | grad | shapes | all")
      ->check(CLI::IsMember({"oracle", "grad", "shapes", "all"}));
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset (train and val splits)");
  auto* train = app.add_subcommand("train", "train and write a checkpoint plus metrics CSV");
  train->add_option("--data", data, "dataset directory from gen-data");
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  auto* dump = app.add_subcommand("dump-attention", "export per-sample attention weights");
  for (auto* sub : {eval, dump}) {
    sub->add_option("--checkpoint", checkpoint, "checkpoint directory");
    sub->add_option("--data", data, "dataset directory");
    sub->add_option("--split", split, "train | val")->check(CLI::IsMember({"train", "val"}));
  }
  // Globals are accepted after the subcommand name too.
  for (auto* sub : {analyze, verify, gen, train, eval, dump}) {
    sub->fallthrough();
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfig;
  }

  try {
    if (*analyze) return cmd_analyze(g, sweep);
    if (*verify) return cmd_verify(g, scope);
    if (*gen) return cmd_gen_data(g);
    if (*train) return cmd_train(g, data);
    if (*eval) return cmd_eval(g, checkpoint, data, split);
    if (*dump) return cmd_dump_attention(g, checkpoint, data, split);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(e.kind());
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kConfig;
  }
  return kConfig;
}
