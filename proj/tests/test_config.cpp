#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "sth/checkpoint.hpp"
#include "sth/config.hpp"

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

std::string error_text(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.what();
  }
  return "";
}

std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("sth_test_" + name);
  std::filesystem::remove_all(p);
  return p;
}

}  // namespace

TEST(Config, ParsesKeysCommentsAndRationals) {
  const auto c = parse_config(
      "# header\n"
      "net.p = 1/8   # trailing comment\n"
      "\n"
      "net.widths = 32, 64,128,256\n"
      "net.attention = true\n"
      "net.variant = merge\n"
      "train.lr = 0.05\n"
      "train.lr_steps = 10,20\n"
      "data.task = appearance\n"
      "data.noise = 0.1\n");
  EXPECT_EQ(c.net.p.num, 1);
  EXPECT_EQ(c.net.p.den, 8);
  EXPECT_EQ(c.net.widths, (std::vector<std::size_t>{32, 64, 128, 256}));
  EXPECT_TRUE(c.net.attention);
  EXPECT_EQ(c.net.variant, Variant::Merge);
  EXPECT_DOUBLE_EQ(c.train.lr, 0.05);
  EXPECT_EQ(c.train.lr_steps, (std::vector<std::size_t>{10, 20}));
  EXPECT_EQ(c.data.task, Task::Appearance);
  EXPECT_DOUBLE_EQ(c.data.noise, 0.1);
  EXPECT_EQ(c.net.frames, 8u);  // untouched default
}

TEST(Config, FormatRoundTrips) {
  RunConfig c;
  c.net.p = Ratio{1, 2};
  c.net.kernel_type = KernelType::Fixed;
  c.train.lr = 0.1 / 3.0;
  c.train.lr_steps = {7};
  c.data.noise = 0.0123456789012345;
  c.eval_clips = 3;
  const std::string text = format_config(c);
  const RunConfig back = parse_config(text);
  EXPECT_EQ(format_config(back), text);
  EXPECT_EQ(back.train.lr, c.train.lr);
  EXPECT_EQ(back.data.noise, c.data.noise);
  EXPECT_EQ(back.eval_clips, 3u);
}

TEST(Config, ErrorsNameTheLine) {
  const std::string unknown = error_text([] { parse_config("net.p = 1/4\n\nnet.colour = red\n", "x.cfg"); });
  EXPECT_NE(unknown.find("x.cfg:3"), std::string::npos) << unknown;
  EXPECT_NE(unknown.find("net.colour"), std::string::npos);
  EXPECT_EQ(error_kind_of([] { parse_config("net.frames = -2\n"); }), ErrorKind::Config);
  EXPECT_EQ(error_kind_of([] { parse_config("net.frames = 2x\n"); }), ErrorKind::Config);
  EXPECT_EQ(error_kind_of([] { parse_config("net.attention = maybe\n"); }), ErrorKind::Config);
  EXPECT_EQ(error_kind_of([] { parse_config("net.p = 3/2\n"); }), ErrorKind::Config);
  EXPECT_EQ(error_kind_of([] { parse_config("just words\n"); }), ErrorKind::Config);
  EXPECT_EQ(error_kind_of([] { load_config("/nonexistent/cfg"); }), ErrorKind::MissingFile);
}

TEST(Config, RunValidationCrossChecksSections) {
  RunConfig c;
  c.net.scale_factor = 8;
  c.net.input_hw = 56;
  c.net.num_class = 4;
  EXPECT_NO_THROW(validate_run(c));
  c.net.num_class = 5;
  EXPECT_EQ(error_kind_of([&] { validate_run(c); }), ErrorKind::Config);
  c.net.num_class = 4;
  c.net.input_hw = 64;
  EXPECT_EQ(error_kind_of([&] { validate_run(c); }), ErrorKind::Config);
  EXPECT_NO_THROW(validate_run(c, true, true, false));
  c.net.input_hw = 56;
  c.net.frames = 32;
  EXPECT_EQ(error_kind_of([&] { validate_run(c); }), ErrorKind::Config);
}

TEST(Checkpoint, RoundTripReproducesOutputs) {
  RunConfig rc;
  rc.net.scale_factor = 16;
  rc.net.frames = 4;
  rc.net.input_hw = 32;
  rc.net.num_class = 4;
  rc.net.attention = true;
  rc.train.seed = 9;
  Network net(rc.net, 123);  // weights differ from a fresh Network(cfg, seed)
  const Tensor x = random_uniform(make_shape({2, 3, 4, 32, 32}), 4, -1.0, 1.0);
  net.forward(x, true);  // move running statistics off their initial values
  for (auto& p : net.params()) *p.value = quantize_f32(*p.value);  // files hold f32
  const Tensor want = net.forward(x, false);
  const auto dir = temp_dir("ckpt_roundtrip");
  save_checkpoint(net, rc, {0.25, 0.5, 0.75}, dir);
  Checkpoint meta;
  Network back = load_checkpoint(dir, &meta);
  EXPECT_EQ(meta.channel_mean, (std::vector<double>{0.25, 0.5, 0.75}));
  EXPECT_EQ(format_config(meta.config), format_config(rc));
  const Tensor got = back.forward(x, false);
  EXPECT_EQ(max_abs(sub(got, want)), 0.0);
  std::filesystem::remove_all(dir);
}

TEST(Checkpoint, TamperingIsDetected) {
  RunConfig rc;
  rc.net.scale_factor = 16;
  rc.net.frames = 4;
  rc.net.input_hw = 32;
  rc.net.num_class = 4;
  Network net(rc.net, 1);
  const auto dir = temp_dir("ckpt_tamper");
  save_checkpoint(net, rc, {}, dir);

  // a structural zero made nonzero
  const auto params = net.params();
  const ParamRef* masked = nullptr;
  for (const auto& p : params)
    if (p.mask) {
      masked = &p;
      break;
    }
  ASSERT_NE(masked, nullptr);
  Tensor w = *masked->value;
  for (std::size_t i = 0; i < w.numel(); ++i)
    if ((*masked->mask)[i] == 0.0) {
      w[i] = 1.0;
      break;
    }
  const auto file = dir / "params" / (masked->name + ".stht");
  const auto original = read_file_bytes(file);
  write_tensor(file, w);
  EXPECT_EQ(error_kind_of([&] { load_checkpoint(dir); }), ErrorKind::Validation);
  std::ofstream(file, std::ios::binary).write(reinterpret_cast<const char*>(original.data()),
                                              static_cast<std::streamsize>(original.size()));
  EXPECT_NO_THROW(load_checkpoint(dir));

  // a config that builds a different network
  std::ofstream(dir / "config.txt", std::ios::app) << "net.p = 1/2\n";
  EXPECT_NE(error_kind_of([&] { load_checkpoint(dir); }), ErrorKind::Io);
  std::filesystem::remove(dir / "params.tsv");
  EXPECT_EQ(error_kind_of([&] { load_checkpoint(dir); }), ErrorKind::MissingFile);
  std::filesystem::remove_all(dir);
}
