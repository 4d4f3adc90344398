#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "evrot/cli.hpp"
#include "test_util.hpp"

using namespace evrot;
namespace fs = std::filesystem;

namespace {

int run(std::vector<std::string> args) {
  args.insert(args.begin(), "evrot");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  return cli::run_cli(static_cast<int>(argv.size()), argv.data());
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("evrot_cli_" + name);
  fs::remove_all(p);
  return p;
}

// a small simulated bundle shared by several tests
const fs::path& bundle() {
  static const fs::path dir = [] {
    const fs::path d = scratch("bundle");
    const int rc = run({"simulate", "--out", d.string(), "--set", "sim.duration=0.3", "--set", "sim.trajectory=constant",
                        "--set", "sim.pano_width=1024", "--set", "sim.pano_height=512"});
    EXPECT_EQ(rc, 0);
    return d;
  }();
  return dir;
}

}  // namespace

TEST(Config, FileThenSetPrecedence) {
  const fs::path f = scratch("cfg.txt");
  std::ofstream(f) << "# comment\nbackend.q = 4\nfrontend.k=1234  # trailing\nbackend.order=linear\n";
  RunConfig c;
  load_config_file(c, f.string());
  EXPECT_EQ(c.backend.q, 4);
  EXPECT_EQ(c.frontend.k, 1234u);
  EXPECT_EQ(c.backend.order, SplineOrder::Linear);
  set_config_value(c, "backend.q", "9");
  EXPECT_EQ(c.backend.q, 9);
  EXPECT_EQ(get_config_value(c, "frontend.k"), "1234");
}

TEST(Config, EntriesRoundTrip) {
  RunConfig a;
  set_config_value(a, "sim.omega", "0.1,-0.2,0.3");
  set_config_value(a, "backend.step_tol", "1e-6");
  set_config_value(a, "frontend.warm_start", "false");
  set_config_value(a, "sim.panorama", "pano.pgm");
  const fs::path f = scratch("echo.txt");
  {
    std::ofstream out(f);
    for (const auto& [k, v] : config_entries(a)) out << k << "=" << v << "\n";
  }
  RunConfig b;
  load_config_file(b, f.string());
  EXPECT_EQ(config_entries(a), config_entries(b));
  EXPECT_EQ(b.traj.omega, Vec3(0.1, -0.2, 0.3));
  EXPECT_EQ(b.backend.optim.step_tol, 1e-6);
  EXPECT_FALSE(b.frontend.warm_start);
}

TEST(Config, BadKeysAndValuesNameTheKey) {
  RunConfig c;
  try {
    set_config_value(c, "backend.qq", "1");
    FAIL();
  } catch (const UsageError& e) {
    EXPECT_NE(std::string(e.what()).find("backend.qq"), std::string::npos);
  }
  try {
    set_config_value(c, "frontend.k", "12x");
    FAIL();
  } catch (const UsageError& e) {
    EXPECT_NE(std::string(e.what()).find("frontend.k"), std::string::npos);
  }
  EXPECT_THROW(set_config_value(c, "frontend.q", "-3000000000000"), UsageError);
  EXPECT_THROW(set_config_value(c, "sim.omega", "1,2"), UsageError);
  EXPECT_THROW(set_config_value(c, "backend.saturation_enabled", "maybe"), UsageError);

  const fs::path f = scratch("bad.txt");
  std::ofstream(f) << "backend.q=2\nnot.a.key=1\n";
  ::testing::internal::CaptureStderr();
  EXPECT_EQ(run({"simulate", "--out", scratch("bad_out").string(), "--config", f.string()}), 2);
  const std::string err = ::testing::internal::GetCapturedStderr();
  EXPECT_NE(err.find("not.a.key"), std::string::npos) << err;
  EXPECT_NE(err.find(":2:"), std::string::npos) << err;
}

TEST(Cli, UsageErrors) {
  ::testing::internal::CaptureStderr();
  EXPECT_EQ(run({}), 2);
  EXPECT_EQ(run({"slam", "--events", "x"}), 2);
  EXPECT_EQ(run({"simulate", "--out", scratch("u").string(), "--set", "threads"}), 2);
  EXPECT_EQ(run({"simulate", "--out", scratch("u").string(), "--set", "backend.window=-1"}), 2);
  ::testing::internal::GetCapturedStderr();
}

TEST(Cli, SimulateIsDeterministicAndEchoesConfig) {
  const auto& a = bundle();
  const fs::path b = scratch("bundle_again");
  ASSERT_EQ(run({"simulate", "--out", b.string(), "--set", "sim.duration=0.3", "--set", "sim.trajectory=constant", "--set",
                 "sim.pano_width=1024", "--set", "sim.pano_height=512", "--threads", "3"}),
            0);
  for (const char* f : {"events.bin", "gt.csv", "gt_controls.csv", "calib.txt"}) EXPECT_EQ(slurp(a / f), slurp(b / f)) << f;
  EXPECT_NE(slurp(a / "gt.csv").find("# config sim.duration=0.3"), std::string::npos);
  const auto cam = read_calibration((a / "calib.txt").string());
  EXPECT_EQ(cam.width, 240);
  EXPECT_EQ(cam.fx, 200.0);
  EXPECT_GT(read_events((a / "events.bin").string(), cam).size(), 1000u);
}

TEST(Cli, EvaluateGroundTruthAgainstItself) {
  const auto& d = bundle();
  const auto gt = (d / "gt.csv").string();
  RunConfig c;
  c.rel_span = 0.1;
  c.rel_step = 0.05;
  c.backend.pano = {1024, 512};
  const fs::path out = scratch("eval");
  ::testing::internal::CaptureStderr();
  const auto s = cli::cmd_evaluate(c, gt, gt, (d / "events.bin").string(), (d / "calib.txt").string(), out.string());
  ::testing::internal::GetCapturedStderr();
  EXPECT_EQ(s["abs_rmse_deg"].get<double>(), 0.0);
  EXPECT_EQ(s["rel_rmse_degps"].get<double>(), 0.0);
  EXPECT_EQ(s["n_samples"].get<std::size_t>(), 16u);  // 0, 0.02, ..., 0.30
  EXPECT_GT(s["ea_percent"].get<double>(), 0.0);
  EXPECT_GT(s["gm"].get<double>(), 0.0);
  for (const char* f : {"summary.json", "abs_errors.csv", "rel_errors.csv"}) EXPECT_TRUE(fs::exists(out / f)) << f;
  const auto j = cli::json::parse(slurp(out / "summary.json"));
  for (const char* k : {"abs_rmse_deg", "rel_rmse_degps", "ea_percent", "gm", "n_samples", "t0"}) EXPECT_TRUE(j.contains(k)) << k;

  // ground truth ending before the estimate starts
  const fs::path late = scratch("late.csv");
  write_trajectory_csv(late.string(), {{{10.0, Rotation{}}, {11.0, Rotation{}}}});
  ::testing::internal::CaptureStderr();
  EXPECT_EQ(run({"evaluate", "--est", late.string(), "--gt", gt}), 3);
  ::testing::internal::GetCapturedStderr();
}

TEST(Cli, RenderSharperUnderGroundTruth) {
  const auto& d = bundle();
  const fs::path dir = scratch("render");
  fs::create_directories(dir);
  // the same motion 5 % too slow
  auto wobbly = read_trajectory_csv((d / "gt.csv").string());
  for (auto& p : wobbly) p.R = exp_so3(0.95 * log_so3(p.R));
  write_trajectory_csv((dir / "slow.csv").string(), wobbly);
  RunConfig c;
  c.backend.pano = {1024, 512};
  ::testing::internal::CaptureStderr();
  const auto sharp = cli::cmd_render(c, (d / "events.bin").string(), (d / "gt.csv").string(), (d / "calib.txt").string(),
                                     (dir / "gt.pgm").string());
  const auto blurred = cli::cmd_render(c, (d / "events.bin").string(), (dir / "slow.csv").string(),
                                       (d / "calib.txt").string(), (dir / "slow.pgm").string());
  const std::string err = ::testing::internal::GetCapturedStderr();
  EXPECT_NE(err.find("GM"), std::string::npos);
  EXPECT_GT(sharp.gm, blurred.gm);
  EXPECT_LT(sharp.ea_percent, blurred.ea_percent);
  const auto img = read_pgm((dir / "gt.pgm").string());
  EXPECT_EQ(img.width, 1024);
  EXPECT_EQ(img.height, 512);
}

TEST(Cli, RenderWithoutEventsIsBlack) {
  const auto& d = bundle();
  const fs::path dir = scratch("empty");
  fs::create_directories(dir);
  write_events_text((dir / "none.txt").string(), {});
  RunConfig c;
  c.backend.pano = {256, 128};
  ::testing::internal::CaptureStderr();
  const auto q = cli::cmd_render(c, (dir / "none.txt").string(), (d / "gt.csv").string(), (d / "calib.txt").string(),
                                 (dir / "map.pgm").string());
  ::testing::internal::GetCapturedStderr();
  EXPECT_EQ(q.ea_percent, 0.0);
  const auto img = read_pgm((dir / "map.pgm").string());
  ASSERT_EQ(img.values.size(), 256u * 128u);
  for (double v : img.values) ASSERT_EQ(v, 0.0);
}

TEST(Cli, SlamAndRefineOutputsAndFailures) {
  const auto& d = bundle();
  const fs::path out = scratch("slam");
  const std::string ev = (d / "events.bin").string(), calib = (d / "calib.txt").string();
  ::testing::internal::CaptureStderr();
  EXPECT_EQ(run({"slam", "--events", ev, "--calib", (d / "missing.txt").string(), "--out", out.string()}), 3);
  const std::vector<std::string> fast{"--set", "backend.q=8", "--set", "backend.max_iters=5", "--set", "frontend.q=8",
                                      "--set", "frontend.k=4000"};
  std::vector<std::string> args{"slam", "--events", ev, "--calib", calib, "--out", out.string(), "--order", "linear",
                                "--map-size", "512x256"};
  args.insert(args.end(), fast.begin(), fast.end());
  ASSERT_EQ(run(args), 0);
  ::testing::internal::GetCapturedStderr();
  for (const char* f : {"trajectory.csv", "controls.csv", "map.pgm", "map.raw", "windows.jsonl", "omega.csv", "slam.json"})
    EXPECT_TRUE(fs::exists(out / f)) << f;
  const auto img = read_pgm((out / "map.pgm").string());
  EXPECT_EQ(img.width, 512);
  EXPECT_EQ(img.height, 256);
  EXPECT_NE(slurp(out / "controls.csv").find("order=linear"), std::string::npos);
  const auto summary = cli::json::parse(slurp(out / "slam.json"));
  const auto& l = summary["ledger"];
  EXPECT_EQ(l["committed"].get<std::size_t>(),
            l["accumulated"].get<std::size_t>() + l["saturated"].get<std::size_t>() + l["out_of_range"].get<std::size_t>());
  // one config line, then one line per window
  std::ifstream log(out / "windows.jsonl");
  std::string line;
  std::size_t n = 0;
  while (std::getline(log, line)) {
    const auto j = cli::json::parse(line);
    EXPECT_EQ(j["type"].get<std::string>(), n == 0 ? "config" : "window");
    ++n;
  }
  EXPECT_EQ(n, summary["windows"].get<std::size_t>() + 1);

  // an initial trajectory that stops short of the events
  auto shortened = read_trajectory_csv((d / "gt.csv").string());
  shortened.resize(shortened.size() / 2);
  const fs::path init = scratch("short.csv");
  write_trajectory_csv(init.string(), shortened);
  ::testing::internal::CaptureStderr();
  EXPECT_EQ(run({"refine", "--events", ev, "--calib", calib, "--init", init.string(), "--out", scratch("ref").string()}), 3);
  ::testing::internal::GetCapturedStderr();
}
