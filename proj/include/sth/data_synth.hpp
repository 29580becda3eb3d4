#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "sth/error.hpp"
#include "sth/parallel.hpp"
#include "sth/rng.hpp"
#include "sth/tensor.hpp"
#include "sth/tensor_io.hpp"

namespace sth {

enum class Task { Motion, Appearance };
inline const char* to_string(Task t) { return t == Task::Motion ? "motion" : "appearance"; }

struct SynthConfig {
  Task task = Task::Motion;
  std::size_t num_class = 4;
  std::size_t channels = 3;
  std::size_t frames_total = 16;
  std::size_t resolution = 56;
  std::size_t object_size = 8;
  std::size_t speed = 2;  // px per frame
  double noise = 0.05;
  std::size_t samples_per_class = 200;
  std::size_t val_per_class = 100;
  std::uint64_t seed = 7;
};

inline void validate_synth(const SynthConfig& c) {
  auto bad = [](const std::string& m) { fail(ErrorKind::Config, m); };
  if (c.num_class < 2) bad("num_class must be >= 2");
  if (c.task == Task::Motion && c.num_class != 4) bad("motion task has exactly 4 direction classes");
  if (c.task == Task::Appearance && c.num_class > 4) bad("appearance task supports at most 4 shape classes");
  if (c.channels == 0 || c.frames_total == 0 || c.object_size == 0) bad("channels, frames_total, object_size must be >= 1");
  if (c.noise < 0) bad("noise must be >= 0");
  const std::size_t travel = c.task == Task::Motion ? c.speed * (c.frames_total - 1) : 0;
  if (c.object_size + travel > c.resolution)
    bad("trajectory overflow: object_size " + std::to_string(c.object_size) + " + travel " + std::to_string(travel) +
        " exceeds resolution " + std::to_string(c.resolution));
}

/// A clip held in f32 to halve memory; widened to double per batch.
struct Video {
  std::size_t c = 0, f = 0, h = 0, w = 0;
  std::vector<float> data;

  float at(std::size_t ch, std::size_t fr, std::size_t y, std::size_t x) const { return data[((ch * f + fr) * h + y) * w + x]; }
  float& at(std::size_t ch, std::size_t fr, std::size_t y, std::size_t x) { return data[((ch * f + fr) * h + y) * w + x]; }

  Tensor to_tensor() const {
    Tensor t(make_shape({c, f, h, w}));
    std::copy(data.begin(), data.end(), t.data().begin());
    return t;
  }
  static Video from_tensor(const Tensor& t) {
    require(t.rank() == 4, ErrorKind::ShapeMismatch, [&] { return std::string("video tensors are (C,F,H,W), got " + t.shape().str()); });
    Video v{t.dim(0), t.dim(1), t.dim(2), t.dim(3), std::vector<float>(t.numel())};
    for (std::size_t i = 0; i < t.numel(); ++i) v.data[i] = static_cast<float>(t[i]);
    return v;
  }
};

struct VideoDataset {
  std::vector<Video> videos;
  std::vector<std::size_t> labels;
  std::size_t num_class = 0;
  std::vector<double> channel_mean;

  std::size_t size() const { return videos.size(); }
};

namespace detail {

/// Static low-contrast texture, distinct per channel.
inline void paint_background(Video& v, Rng& rng) {
  std::vector<double> base(v.c);
  for (auto& b : base) b = rng.uniform(0.15, 0.35);
  const std::size_t cell = 4;
  const std::size_t gh = (v.h + cell - 1) / cell, gw = (v.w + cell - 1) / cell;
  std::vector<double> grid(v.c * gh * gw);
  for (auto& g : grid) g = rng.uniform(-0.08, 0.08);
  for (std::size_t ch = 0; ch < v.c; ++ch)
    for (std::size_t y = 0; y < v.h; ++y)
      for (std::size_t x = 0; x < v.w; ++x) {
        const float val = static_cast<float>(base[ch] + grid[(ch * gh + y / cell) * gw + x / cell]);
        for (std::size_t fr = 0; fr < v.f; ++fr) v.at(ch, fr, y, x) = val;
      }
}

inline void add_noise_and_clamp(Video& v, double sigma, Rng& rng) {
  for (auto& p : v.data) {
    const double n = sigma > 0 ? sigma * rng.normal() : 0.0;
    p = static_cast<float>(std::clamp(static_cast<double>(p) + n, 0.0, 1.0));
  }
}

/// Shape masks for the appearance task: square, disc, bar, cross.
inline bool shape_covers(std::size_t cls, long dy, long dx, long size) {
  const double r = size / 2.0;
  const double cy = dy - r + 0.5, cx = dx - r + 0.5;
  switch (cls) {
    case 0:
      return true;
    case 1:
      return cy * cy + cx * cx <= r * r;
    case 2:
      return std::abs(cy) <= r / 3.0;
    default:
      return std::abs(cy) <= r / 4.0 || std::abs(cx) <= r / 4.0;
  }
}

}  // namespace detail

/// Position along a trajectory axis at frame `fr`: the object occupies
/// [start, start + size). Used by both axes so single-frame marginals agree.
struct Trajectory {
  std::size_t x0, y0;  // top-left at frame 0
  long dx, dy;         // per-frame step
};

/// Motion classes: 0 left, 1 right, 2 up, 3 down. The moving axis starts
/// uniformly in [0, R]; the static axis is drawn as the moving axis would be at
/// a uniformly random frame, so every class shares the same single-frame
/// position distribution.
inline Trajectory motion_trajectory(const SynthConfig& c, std::size_t label, Rng& rng) {
  const std::size_t travel = c.speed * (c.frames_total - 1);
  const std::size_t range = c.resolution - c.object_size - travel;
  const std::size_t a0 = rng.below(range + 1);
  const std::size_t b = rng.below(range + 1) + c.speed * rng.below(c.frames_total);
  const auto v = static_cast<long>(c.speed);
  switch (label) {
    case 0:
      return {a0 + travel, b, -v, 0};
    case 1:
      return {a0, b, v, 0};
    case 2:
      return {b, a0 + travel, 0, -v};
    default:
      return {b, a0, 0, v};
  }
}

inline Video make_motion_video(const SynthConfig& c, std::size_t label, std::uint64_t seed) {
  Rng rng(seed);
  Video v{c.channels, c.frames_total, c.resolution, c.resolution,
          std::vector<float>(c.channels * c.frames_total * c.resolution * c.resolution)};
  detail::paint_background(v, rng);
  const auto tr = motion_trajectory(c, label, rng);
  const double bright = rng.uniform(0.8, 1.0);
  for (std::size_t fr = 0; fr < c.frames_total; ++fr) {
    const long y0 = static_cast<long>(tr.y0) + tr.dy * static_cast<long>(fr);
    const long x0 = static_cast<long>(tr.x0) + tr.dx * static_cast<long>(fr);
    for (std::size_t ch = 0; ch < c.channels; ++ch)
      for (std::size_t i = 0; i < c.object_size; ++i)
        for (std::size_t j = 0; j < c.object_size; ++j)
          v.at(ch, fr, static_cast<std::size_t>(y0) + i, static_cast<std::size_t>(x0) + j) = static_cast<float>(bright);
  }
  detail::add_noise_and_clamp(v, c.noise, rng);
  return v;
}

inline Video make_appearance_video(const SynthConfig& c, std::size_t label, std::uint64_t seed) {
  Rng rng(seed);
  Video v{c.channels, c.frames_total, c.resolution, c.resolution,
          std::vector<float>(c.channels * c.frames_total * c.resolution * c.resolution)};
  detail::paint_background(v, rng);
  const std::size_t range = c.resolution - c.object_size;
  const std::size_t y0 = rng.below(range + 1), x0 = rng.below(range + 1);
  const double bright = rng.uniform(0.8, 1.0);
  const auto s = static_cast<long>(c.object_size);
  for (std::size_t fr = 0; fr < c.frames_total; ++fr)
    for (std::size_t ch = 0; ch < c.channels; ++ch)
      for (long i = 0; i < s; ++i)
        for (long j = 0; j < s; ++j)
          if (detail::shape_covers(label, i, j, s)) v.at(ch, fr, y0 + i, x0 + j) = static_cast<float>(bright);
  detail::add_noise_and_clamp(v, c.noise, rng);
  return v;
}

inline std::vector<double> channel_means(const std::vector<Video>& videos) {
  if (videos.empty()) return {};
  std::vector<double> mean(videos.front().c, 0.0);
  double count = 0.0;
  for (const auto& v : videos) {
    const std::size_t plane = v.f * v.h * v.w;
    for (std::size_t ch = 0; ch < v.c; ++ch) {
      double s = 0.0;
      for (std::size_t i = 0; i < plane; ++i) s += v.data[ch * plane + i];
      mean[ch] += s;
    }
    count += static_cast<double>(plane);
  }
  for (auto& m : mean) m /= count;
  return mean;
}

enum class Split { Train, Val };
inline const char* to_string(Split s) { return s == Split::Train ? "train" : "val"; }

/// In-memory generation; video i of the split uses a seed derived from (seed, split, i).
/// Labels cycle 0..K-1 so classes are balanced.
inline VideoDataset generate_dataset(const SynthConfig& c, Split split) {
  validate_synth(c);
  const std::size_t per_class = split == Split::Train ? c.samples_per_class : c.val_per_class;
  const std::size_t n = per_class * c.num_class;
  VideoDataset ds;
  ds.num_class = c.num_class;
  ds.videos.resize(n);
  ds.labels.resize(n);
  const std::uint64_t split_seed = derive_seed(c.seed, split == Split::Train ? 1 : 2);
  parallel_for(n, [&](std::size_t i) {
    const std::size_t label = i % c.num_class;
    const std::uint64_t s = derive_seed(split_seed, i);
    ds.labels[i] = label;
    ds.videos[i] = c.task == Task::Motion ? make_motion_video(c, label, s) : make_appearance_video(c, label, s);
  });
  ds.channel_mean = channel_means(ds.videos);
  return ds;
}

/// TSN frame indices: segment s covers [floor(sF/T), floor((s+1)F/T)).
inline std::vector<std::size_t> tsn_indices(std::size_t frames, std::size_t segments, bool train, Rng* rng) {
  require(segments >= 1 && frames >= segments, ErrorKind::Argument, [&] { return std::string("tsn sampling needs F >= T, got F=" + std::to_string(frames) + " T=" + std::to_string(segments)); });
  std::vector<std::size_t> idx(segments);
  for (std::size_t s = 0; s < segments; ++s) {
    const std::size_t lo = s * frames / segments, hi = (s + 1) * frames / segments;
    idx[s] = train ? lo + rng->below(hi - lo) : (lo + hi - 1) / 2;
  }
  return idx;
}

/// video (C,F,H,W) -> clip (C,T,H,W); train mode draws from `seed`.
inline Tensor tsn_sample(const Tensor& video, std::size_t segments, bool train, std::uint64_t seed) {
  require(video.rank() == 4, ErrorKind::ShapeMismatch, [&] { return std::string("video must be (C,F,H,W), got " + video.shape().str()); });
  Rng rng(seed);
  const auto idx = tsn_indices(video.dim(1), segments, train, &rng);
  const std::size_t c = video.dim(0), f = video.dim(1), plane = video.dim(2) * video.dim(3);
  Tensor clip(make_shape({c, segments, video.dim(2), video.dim(3)}));
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t s = 0; s < segments; ++s)
      std::copy_n(video.ptr() + (ch * f + idx[s]) * plane, plane, clip.ptr() + (ch * segments + s) * plane);
  return clip;
}

// ---- on-disk layout -------------------------------------------------------

struct ManifestEntry {
  std::string relpath;
  std::size_t label = 0;
  std::size_t frames = 0;
};

struct DatasetManifest {
  std::vector<std::pair<std::string, std::string>> header;  // key, value
  std::vector<ManifestEntry> entries;
  std::filesystem::path root;

  std::string get(const std::string& key) const {
    for (const auto& [k, v] : header)
      if (k == key) return v;
    return {};
  }
};

inline void write_video(const std::filesystem::path& path, const Video& v) { write_tensor(path, v.to_tensor()); }

inline Video read_video(const std::filesystem::path& path) { return Video::from_tensor(read_tensor(path)); }

inline std::string join_doubles(const std::vector<double>& v) {
  std::ostringstream os;
  os.precision(17);
  for (std::size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
  return os.str();
}

inline std::vector<std::pair<std::string, std::string>> synth_header(const SynthConfig& c, Split split) {
  return {{"task", to_string(c.task)},
          {"split", to_string(split)},
          {"num_class", std::to_string(c.num_class)},
          {"channels", std::to_string(c.channels)},
          {"frames_total", std::to_string(c.frames_total)},
          {"resolution", std::to_string(c.resolution)},
          {"object_size", std::to_string(c.object_size)},
          {"speed", std::to_string(c.speed)},
          {"noise", [&] {
             std::ostringstream os;
             os << c.noise;
             return os.str();
           }()},
          {"seed", std::to_string(c.seed)}};
}

/// Writes <out>/<split>/manifest.tsv and one tensor file per video.
inline DatasetManifest write_dataset(const VideoDataset& ds, const SynthConfig& c, Split split,
                                     const std::filesystem::path& out_dir) {
  const auto dir = out_dir / to_string(split);
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  require(!ec, ErrorKind::Io, [&] { return std::string("cannot create " + dir.string() + ": " + ec.message()); });
  DatasetManifest m;
  m.root = out_dir;
  m.header = synth_header(c, split);
  m.header.emplace_back("channel_mean", join_doubles(ds.channel_mean));
  m.entries.resize(ds.size());
  parallel_for(ds.size(), [&](std::size_t i) {
    char name[32];
    std::snprintf(name, sizeof name, "v%06zu.stht", i);
    const std::string rel = std::string(to_string(split)) + "/" + name;
    write_video(out_dir / rel, ds.videos[i]);
    m.entries[i] = {rel, ds.labels[i], ds.videos[i].f};
  });
  std::ofstream os(dir / "manifest.tsv", std::ios::binary);
  require(static_cast<bool>(os), ErrorKind::Io, [&] { return std::string("cannot write " + (dir / "manifest.tsv").string()); });
  for (const auto& [k, v] : m.header) os << "# " << k << " = " << v << "\n";
  for (const auto& e : m.entries) os << e.relpath << "\t" << e.label << "\t" << e.frames << "\n";
  require(static_cast<bool>(os), ErrorKind::Io, [&] { return std::string("write failed for " + (dir / "manifest.tsv").string()); });
  return m;
}

inline DatasetManifest gen_dataset(const SynthConfig& c, Split split, const std::filesystem::path& out_dir) {
  return write_dataset(generate_dataset(c, split), c, split, out_dir);
}

/// Parses a manifest; relpaths resolve against the parent of the split directory.
/// Missing referenced files are reported together as a validation error.
inline DatasetManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) fail(ErrorKind::MissingFile, "manifest not found: " + path.string());
  DatasetManifest m;
  m.root = path.parent_path().parent_path();
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    if (line[0] == '#') {
      const auto eq = line.find('=');
      if (eq == std::string::npos) continue;
      auto trim = [](std::string s) {
        const auto a = s.find_first_not_of(" \t#"), b = s.find_last_not_of(" \t\r");
        return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
      };
      m.header.emplace_back(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
      continue;
    }
    std::istringstream ls(line);
    ManifestEntry e;
    if (!(std::getline(ls, e.relpath, '\t') && ls >> e.label >> e.frames))
      fail(ErrorKind::Parse, path.string() + ":" + std::to_string(lineno) + ": expected relpath<TAB>label<TAB>frames");
    m.entries.push_back(e);
  }
  std::string missing;
  for (const auto& e : m.entries)
    if (!std::filesystem::exists(m.root / e.relpath)) missing += " " + (m.root / e.relpath).string();
  if (!missing.empty()) fail(ErrorKind::Validation, "manifest references absent files:" + missing);
  const std::string k = m.get("num_class");
  if (!k.empty()) {
    const auto nk = std::stoul(k);
    for (const auto& e : m.entries)
      require(e.label < nk, ErrorKind::Validation, [&] { return std::string("label " + std::to_string(e.label) + " >= num_class in " + e.relpath); });
  }
  return m;
}

inline std::vector<double> parse_doubles(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(std::stod(item));
  return out;
}

inline VideoDataset load_dataset(const std::filesystem::path& manifest_path) {
  const auto m = load_manifest(manifest_path);
  VideoDataset ds;
  const std::string k = m.get("num_class");
  require(!k.empty(), ErrorKind::Validation, [&] { return std::string("manifest lacks a num_class header: " + manifest_path.string()); });
  ds.num_class = std::stoul(k);
  ds.videos.resize(m.entries.size());
  ds.labels.resize(m.entries.size());
  for (std::size_t i = 0; i < m.entries.size(); ++i) {
    ds.videos[i] = read_video(m.root / m.entries[i].relpath);
    ds.labels[i] = m.entries[i].label;
    require(ds.videos[i].f == m.entries[i].frames, ErrorKind::Validation, [&] { return std::string(m.entries[i].relpath + ": frame count disagrees with manifest"); });
  }
  const std::string mean = m.get("channel_mean");
  ds.channel_mean = mean.empty() ? channel_means(ds.videos) : parse_doubles(mean);
  return ds;
}

}  // namespace sth
