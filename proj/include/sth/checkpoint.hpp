#pragma once

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "sth/config.hpp"
#include "sth/network.hpp"
#include "sth/tensor_io.hpp"

namespace sth {

/// A saved model: its run config, the input normalisation it was trained with
/// and one tensor file per stored parameter (running statistics included).
struct Checkpoint {
  RunConfig config;
  std::vector<double> channel_mean;
};

/// Layout: <dir>/config.txt, <dir>/params.tsv (name, file, shape) and
/// <dir>/params/<name>.stht.
inline void save_checkpoint(Network& net, const RunConfig& cfg, const std::vector<double>& channel_mean,
                            const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir / "params", ec);
  require(!ec, ErrorKind::Io, [&] { return "cannot create " + (dir / "params").string() + ": " + ec.message(); });
  {
    std::ofstream os(dir / "config.txt", std::ios::binary);
    os << format_config(cfg);
    require(static_cast<bool>(os), ErrorKind::Io, [&] { return "cannot write " + (dir / "config.txt").string(); });
  }
  std::ofstream os(dir / "params.tsv", std::ios::binary);
  require(static_cast<bool>(os), ErrorKind::Io, [&] { return "cannot write " + (dir / "params.tsv").string(); });
  os << "# channel_mean = " << join_doubles(channel_mean) << "\n";
  for (const auto& p : net.params()) {
    const std::string file = "params/" + p.name + ".stht";
    write_tensor(dir / file, *p.value);
    os << p.name << "\t" << file << "\t" << p.value->shape().str() << "\n";
  }
  require(static_cast<bool>(os), ErrorKind::Io, [&] { return "write failed for " + (dir / "params.tsv").string(); });
}

/// Rebuilds the network from config.txt and fills every parameter. Names and
/// shapes must match the rebuilt network exactly.
inline Network load_checkpoint(const std::filesystem::path& dir, Checkpoint* meta = nullptr) {
  Checkpoint ck;
  ck.config = load_config(dir / "config.txt");
  validate_config(ck.config.net);
  Network net(ck.config.net, ck.config.train.seed);
  std::ifstream is(dir / "params.tsv");
  if (!is) fail(ErrorKind::MissingFile, "checkpoint manifest not found: " + (dir / "params.tsv").string());
  auto params = net.params();
  std::size_t next = 0, lineno = 0;
  std::string line;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    const std::string where = (dir / "params.tsv").string() + ":" + std::to_string(lineno);
    if (line[0] == '#') {
      const auto eq = line.find('=');
      if (eq != std::string::npos && detail::trim(line.substr(1, eq - 1)) == "channel_mean") {
        const std::string v = detail::trim(line.substr(eq + 1));
        if (!v.empty()) ck.channel_mean = parse_doubles(v);
      }
      continue;
    }
    std::istringstream ls(line);
    std::string name, file, shape;
    if (!(std::getline(ls, name, '\t') && std::getline(ls, file, '\t') && std::getline(ls, shape)))
      fail(ErrorKind::Parse, where + ": expected name<TAB>file<TAB>shape");
    if (next >= params.size() || params[next].name != name)
      fail(ErrorKind::Validation, where + ": parameter '" + name + "' does not match the network built from config.txt");
    Tensor t = read_tensor(dir / file);
    require(t.shape() == params[next].value->shape(), ErrorKind::ShapeMismatch, [&] {
      return where + ": " + name + " has shape " + t.shape().str() + ", network expects " +
             params[next].value->shape().str();
    });
    if (params[next].mask) {
      const auto& m = *params[next].mask;
      for (std::size_t i = 0; i < t.numel(); ++i)
        require(m[i] != 0.0 || t[i] == 0.0, ErrorKind::Validation,
                [&] { return where + ": " + name + " has a nonzero structural-zero entry"; });
    }
    *params[next].value = std::move(t);
    ++next;
  }
  if (next != params.size())
    fail(ErrorKind::Validation, "checkpoint holds " + std::to_string(next) + " of " + std::to_string(params.size()) +
                                    " parameters");
  if (meta) *meta = std::move(ck);
  return net;
}

}  // namespace sth
