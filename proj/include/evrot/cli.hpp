#pragma once

// Command-line front end. Each cmd_* takes a fully resolved RunConfig plus
// paths and throws evrot::Error on failure; run_cli() does argument parsing
// and turns errors into exit codes.

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "evrot/backend.hpp"
#include "evrot/config.hpp"
#include "evrot/events.hpp"
#include "evrot/frontend.hpp"
#include "evrot/geometry.hpp"
#include "evrot/iwe.hpp"
#include "evrot/metrics.hpp"
#include "evrot/parallel.hpp"
#include "evrot/simulator.hpp"
#include "evrot/trajectory.hpp"

namespace evrot::cli {

using json = nlohmann::ordered_json;

namespace detail {

inline std::vector<std::string> config_comment(const RunConfig& c, const std::string& command) {
  std::vector<std::string> out{"evrot " + command};
  for (const auto& [k, v] : config_entries(c)) out.push_back("config " + k + "=" + v);
  return out;
}

inline json config_json(const RunConfig& c) {
  json j = json::object();
  for (const auto& [k, v] : config_entries(c)) j[k] = v;
  return j;
}

inline void write_json(const std::string& path, const json& j) {
  std::ofstream f(path);
  if (!f) throw InputError("cannot write '" + path + "'");
  f << j.dump(2) << '\n';
}

inline std::filesystem::path out_dir(const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw InputError("cannot create output directory '" + dir + "': " + ec.message());
  return dir;
}

inline EventStream load_events(const std::string& path, const CameraModel& cam) {
  EventStream s = read_events(path, cam);
  if (s.rejected) std::fprintf(stderr, "%s: %zu out-of-bounds events rejected\n", path.c_str(), s.rejected);
  return s;
}

// events the trajectory can place
inline std::vector<Event> events_within(std::span<const Event> ev, const Trajectory& traj) {
  std::vector<Event> out;
  if (traj.empty()) return out;
  for (const auto& e : ev)
    if (traj.covers(e.t)) out.push_back(e);
  return out;
}

inline std::string frontend_mode(const FrontendConfig& c) {
  return c.warm_start ? "sequential warm start" : "independent slices (zero warm start)";
}

inline json window_json(const WindowReport& w) {
  return {{"type", "window"},        {"index", w.index},
          {"t_begin", w.t_begin},    {"t_end", w.t_end},
          {"n_events", w.n_events},  {"stationary", w.stationary},
          {"failed", w.failed},      {"alpha", w.alpha},
          {"value_before", w.value_before}, {"value_after", w.value_after},
          {"iterations", w.iterations},     {"reason", w.reason},
          {"first_varying", w.first_varying}, {"n_varying", w.n_varying},
          {"domain_pixels", w.domain_pixels}, {"max_correction_rad", w.max_correction}};
}

inline json ledger_json(const GlobalMapState& s) {
  return {{"committed", s.committed},
          {"accumulated", s.accumulated()},
          {"saturated", s.saturated},
          {"out_of_range", s.out_of_range},
          {"skipped_stationary", s.skipped_stationary},
          {"map_mass", s.map.mass()}};
}

// trajectory CSV, control poses, map image + raw dump, window log
inline json write_slam_outputs(const std::filesystem::path& dir, const SlamResult& res, const RunConfig& c,
                               const std::string& command) {
  const auto meta = config_comment(c, command);
  write_trajectory_csv((dir / "trajectory.csv").string(), res.trace, meta);
  write_grid_csv((dir / "controls.csv").string(), res.grid, meta);
  write_pgm16((dir / "map.pgm").string(), res.state.map, c.gamma, meta);
  write_raw((dir / "map.raw").string(), res.state.map);
  std::ofstream log(dir / "windows.jsonl");
  if (!log) throw InputError("cannot write window log in '" + dir.string() + "'");
  log << json{{"type", "config"}, {"command", command}, {"config", config_json(c)}}.dump() << '\n';
  int failed = 0, stationary = 0;
  for (const auto& w : res.windows) {
    log << window_json(w).dump() << '\n';
    failed += w.failed;
    stationary += w.stationary;
  }
  return {{"windows", res.windows.size()},
          {"failed_windows", failed},
          {"stationary_windows", stationary},
          {"ledger", ledger_json(res.state)},
          {"map_width", res.state.map.width()},
          {"map_height", res.state.map.height()}};
}

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace detail

// ---------------------------------------------------------------------------

/// Events, ground truth (dense samples and control poses) and calibration in `out`.
inline void cmd_simulate(const RunConfig& c, const std::string& out) {
  c.validate();
  const auto dir = detail::out_dir(out);
  const PanoramaImage pano =
      c.panorama == "checkerboard"
          ? make_checkerboard(c.pano_width, c.pano_height, c.squares_x, c.squares_y, static_cast<float>(c.board_lo),
                              static_cast<float>(c.board_hi))
          : panorama_from_image(read_pgm(c.panorama));
  TrajectoryParams tp = c.traj;
  const ControlPoseGrid gt = make_test_trajectory(parse_trajectory_kind(c.trajectory), tp);
  SimConfig sc = c.sim;
  sc.t_begin = tp.t_begin;
  sc.t_end = tp.t_begin + tp.duration;
  const auto t0 = std::chrono::steady_clock::now();
  const std::vector<Event> ev = generate_events(pano, gt, sc);

  const auto meta = detail::config_comment(c, "simulate");
  const std::string ev_path = (dir / (c.event_format == "binary" ? "events.bin" : "events.txt")).string();
  if (c.event_format == "binary") write_events_binary(ev_path, ev);
  else write_events_text(ev_path, ev);
  std::vector<PoseSample> dense;
  const int n = static_cast<int>(std::lround(tp.duration * 1000.0));
  for (int k = 0; k <= n; ++k) {
    const double t = tp.t_begin + k * 1e-3;
    dense.push_back({t, sample(gt, t)});
  }
  write_trajectory_csv((dir / "gt.csv").string(), dense, meta);
  write_grid_csv((dir / "gt_controls.csv").string(), gt, meta);
  write_calibration((dir / "calib.txt").string(), sc.cam);
  detail::write_json((dir / "simulate.json").string(), {{"command", "simulate"},
                                                        {"events", ev.size()},
                                                        {"event_file", ev_path},
                                                        {"t_begin", sc.t_begin},
                                                        {"t_end", sc.t_end},
                                                        {"config", detail::config_json(c)}});
  std::fprintf(stderr, "simulate: %zu events over [%.3f, %.3f] s in %.1f s\n", ev.size(), sc.t_begin, sc.t_end,
               detail::seconds_since(t0));
}

/// Angular velocities and their integral.
inline void cmd_frontend(const RunConfig& c, const std::string& events, const std::string& calib, const std::string& out) {
  c.validate();
  const CameraModel cam = read_calibration(calib);
  const EventStream s = detail::load_events(events, cam);
  const auto dir = detail::out_dir(out);
  const auto t0 = std::chrono::steady_clock::now();
  const auto est = run_frontend(s.events, cam, c.frontend);
  const auto meta = detail::config_comment(c, "frontend");
  write_omega_csv((dir / "omega.csv").string(), est, meta);
  if (!s.empty())
    write_trajectory_csv((dir / "trajectory.csv").string(),
                         frontend_trajectory(est, s.events.front().t, s.events.back().t).samples(), meta);
  std::size_t stationary = 0, unconverged = 0;
  for (const auto& e : est) stationary += e.stationary, unconverged += !e.converged;
  detail::write_json((dir / "frontend.json").string(), {{"command", "frontend"},
                                                        {"events", s.size()},
                                                        {"rejected", s.rejected},
                                                        {"estimates", est.size()},
                                                        {"stationary", stationary},
                                                        {"unconverged", unconverged},
                                                        {"mode", detail::frontend_mode(c.frontend)},
                                                        {"config", detail::config_json(c)}});
  std::fprintf(stderr, "frontend: %zu estimates (%zu stationary, %zu unconverged), %s, %.1f s\n", est.size(), stationary,
               unconverged, detail::frontend_mode(c.frontend).c_str(), detail::seconds_since(t0));
}

/// Front end followed by the sliding-window back end.
inline void cmd_slam(const RunConfig& c, const std::string& events, const std::string& calib, const std::string& out) {
  c.validate();
  const CameraModel cam = read_calibration(calib);
  const EventStream s = detail::load_events(events, cam);
  const auto dir = detail::out_dir(out);
  const auto t0 = std::chrono::steady_clock::now();
  const SlamResult res = run_slam(s.events, cam, c.frontend, c.backend);
  const double secs = detail::seconds_since(t0);
  json summary = detail::write_slam_outputs(dir, res, c, "slam");
  write_omega_csv((dir / "omega.csv").string(), res.frontend, detail::config_comment(c, "slam"));
  summary["command"] = "slam";
  summary["events"] = s.size();
  summary["rejected"] = s.rejected;
  summary["frontend_mode"] = detail::frontend_mode(c.frontend);
  summary["config"] = detail::config_json(c);
  detail::write_json((dir / "slam.json").string(), summary);
  std::fprintf(stderr, "slam: %zu windows (%d failed), %zu events committed, %s front end, %.1f s\n", res.windows.size(),
               summary["failed_windows"].get<int>(), res.state.committed, detail::frontend_mode(c.frontend).c_str(), secs);
}

/// Back end only, started from a given trajectory.
inline void cmd_refine(const RunConfig& c, const std::string& events, const std::string& calib, const std::string& init,
                       const std::string& out) {
  c.validate();
  const CameraModel cam = read_calibration(calib);
  const EventStream s = detail::load_events(events, cam);
  const auto initial = read_trajectory_csv(init);
  const auto dir = detail::out_dir(out);
  const auto t0 = std::chrono::steady_clock::now();
  const SlamResult res = refine_offline(s.events, initial, cam, c.backend);
  const double secs = detail::seconds_since(t0);
  json summary = detail::write_slam_outputs(dir, res, c, "refine");
  const Trajectory before(initial), after(res.trace);
  const auto q0 = proxy_reprojection(detail::events_within(s.events, before), before, cam, c.backend.pano, c.backend.lambda0);
  const auto q1 = proxy_reprojection(detail::events_within(s.events, after), after, cam, c.backend.pano, c.backend.lambda0);
  summary["command"] = "refine";
  summary["events"] = s.size();
  summary["ea_percent_before"] = q0.ea_percent;
  summary["ea_percent_after"] = q1.ea_percent;
  summary["gm_before"] = q0.gm;
  summary["gm_after"] = q1.gm;
  summary["config"] = detail::config_json(c);
  detail::write_json((dir / "refine.json").string(), summary);
  std::fprintf(stderr, "refine: EA %.4f%% -> %.4f%%, GM %.6g -> %.6g, %.1f s\n", q0.ea_percent, q1.ea_percent, q0.gm, q1.gm,
               secs);
}

/// Error metrics of `est` against `gt`; EA and GM too when events are given.
inline json cmd_evaluate(const RunConfig& c, const std::string& est_path, const std::string& gt_path,
                         const std::string& events, const std::string& calib, const std::string& out) {
  c.validate();
  if (events.empty() != calib.empty()) throw UsageError("evaluate: --events and --calib go together");
  const Trajectory est(read_trajectory_csv(est_path));
  Trajectory gt(read_trajectory_csv(gt_path));
  if (est.empty() || gt.empty()) throw InputError("evaluate: empty trajectory");
  if (c.smooth_gt) gt = smooth_gt(gt, c.smooth_span);
  const double t0 = std::isnan(c.eval_t0) ? std::max(est.t_begin(), gt.t_begin()) : c.eval_t0;
  const ErrorReport abs = absolute_rmse(est, gt, c.eval_rate, t0);
  const ErrorReport rel = relative_rmse(est, gt, c.rel_span, c.rel_step);
  json summary{{"abs_rmse_deg", abs.rms}, {"rel_rmse_degps", rel.rms}, {"ea_percent", nullptr},
               {"gm", nullptr},           {"n_samples", abs.count},   {"t0", abs.t0}};
  if (!events.empty()) {
    const CameraModel cam = read_calibration(calib);
    const EventStream s = detail::load_events(events, cam);
    const auto q = proxy_reprojection(detail::events_within(s.events, est), est, cam, c.backend.pano, c.backend.lambda0);
    summary["ea_percent"] = q.ea_percent;
    summary["gm"] = q.gm;
  }
  summary["rel_n_samples"] = rel.count;
  summary["config"] = detail::config_json(c);
  if (!out.empty()) {
    const auto dir = detail::out_dir(out);
    const auto meta = detail::config_comment(c, "evaluate");
    write_error_series_csv((dir / "abs_errors.csv").string(), abs, meta);
    write_error_series_csv((dir / "rel_errors.csv").string(), rel, meta);
    detail::write_json((dir / "summary.json").string(), summary);
  }
  std::fprintf(stderr, "evaluate: abs %.4f deg (%zu samples from t0=%.3f), rel %.4f deg/s\n", abs.rms, abs.count, abs.t0,
               rel.rms);
  return summary;
}

/// Panoramic map of the events under a trajectory, one pose per event.
inline MapQuality cmd_render(const RunConfig& c, const std::string& events, const std::string& traj_path,
                             const std::string& calib, const std::string& out) {
  c.validate();
  const CameraModel cam = read_calibration(calib);
  const EventStream s = detail::load_events(events, cam);
  const Trajectory traj(read_trajectory_csv(traj_path));
  const auto ev = detail::events_within(s.events, traj);
  if (ev.size() < s.size()) std::fprintf(stderr, "render: %zu events outside the trajectory skipped\n", s.size() - ev.size());
  const Iwe map = render_map(ev, [&](double t) { return traj.at(t); }, cam, c.backend.pano);
  write_pgm16(out, map, c.gamma, detail::config_comment(c, "render"));
  const MapQuality q = map_quality(map, c.backend.lambda0);
  std::fprintf(stderr, "render: %dx%d map, GM %.6g, EA %.4f%%\n", map.width(), map.height(), q.gm, q.ea_percent);
  return q;
}

// ---------------------------------------------------------------------------

/// Parses arguments, runs one command and returns the process exit code.
inline int run_cli(int argc, const char* const* argv) {
  CLI::App app{"Rotational event-camera odometry and panoramic mapping"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "evrot 0.1");

  std::string config_file;
  std::vector<std::string> sets;
  int threads = 0;
  std::string order, map_size;
  double gamma = 0.0;
  std::string events, calib, init, est, gt, traj, out;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", config_file, "key=value config file")->check(CLI::ExistingFile);
    sub->add_option("--set", sets, "override one key, e.g. --set backend.q=4")->allow_extra_args(false);
    sub->add_option("--threads", threads, "worker threads (output does not depend on it)")->check(CLI::PositiveNumber);
  };
  auto pipeline = [&](CLI::App* sub) {
    common(sub);
    sub->add_option("--events", events, "event file (text or EVT1 binary)")->required();
    sub->add_option("--calib", calib, "calibration file")->required();
  };

  auto* sim = app.add_subcommand("simulate", "synthesize events and ground truth");
  common(sim);
  sim->add_option("--out", out, "output directory")->required();

  auto* fe = app.add_subcommand("frontend", "per-slice angular velocity");
  pipeline(fe);
  fe->add_option("--out", out, "output directory")->required();

  auto* slam = app.add_subcommand("slam", "front end plus sliding-window refinement");
  pipeline(slam);
  slam->add_option("--out", out, "output directory")->required();
  slam->add_option("--order", order, "spline order")->check(CLI::IsMember({"linear", "cubic"}));
  slam->add_option("--map-size", map_size, "panorama size WxH");
  slam->add_option("--gamma", gamma, "map image gamma");

  auto* ref = app.add_subcommand("refine", "refine a given trajectory");
  pipeline(ref);
  ref->add_option("--init", init, "initial trajectory CSV")->required();
  ref->add_option("--out", out, "output directory")->required();
  ref->add_option("--order", order, "spline order")->check(CLI::IsMember({"linear", "cubic"}));
  ref->add_option("--map-size", map_size, "panorama size WxH");
  ref->add_option("--gamma", gamma, "map image gamma");

  auto* ev = app.add_subcommand("evaluate", "rotation errors against ground truth");
  common(ev);
  ev->add_option("--est", est, "estimated trajectory CSV")->required();
  ev->add_option("--gt", gt, "ground-truth trajectory CSV")->required();
  ev->add_option("--events", events, "event file, for EA and GM");
  ev->add_option("--calib", calib, "calibration file, for EA and GM");
  ev->add_option("--map-size", map_size, "panorama size WxH for EA and GM");
  ev->add_option("--out", out, "output directory");

  auto* ren = app.add_subcommand("render", "panoramic map from events and a trajectory");
  pipeline(ren);
  ren->add_option("--traj", traj, "trajectory CSV")->required();
  ren->add_option("--out", out, "output PGM")->required();
  ren->add_option("--map-size", map_size, "panorama size WxH");
  ren->add_option("--gamma", gamma, "gamma correction");

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return exit_code_for(ErrorKind::Usage);
  }

  try {
    // defaults < file < --set < dedicated flags
    RunConfig c;
    if (!config_file.empty()) load_config_file(c, config_file);
    for (const auto& kv : sets) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw UsageError("--set expects key=value, got '" + kv + "'");
      set_config_value(c, kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (threads > 0) c.threads = threads;
    if (!order.empty()) c.backend.order = parse_spline_order(order);
    if (gamma > 0.0) c.gamma = gamma;
    if (!map_size.empty()) {
      int w = 0, h = 0;
      char tail = 0;
      if (std::sscanf(map_size.c_str(), "%dx%d%c", &w, &h, &tail) != 2) throw UsageError("--map-size expects WxH, got '" + map_size + "'");
      c.backend.pano = {w, h};
    }
    try {
      c.validate();
    } catch (const InputError& e) {
      throw UsageError(e.what());
    }
    set_thread_count(c.threads);

    if (*sim) cmd_simulate(c, out);
    else if (*fe) cmd_frontend(c, events, calib, out);
    else if (*slam) cmd_slam(c, events, calib, out);
    else if (*ref) cmd_refine(c, events, calib, init, out);
    else if (*ev) cmd_evaluate(c, est, gt, events, calib, out);
    else if (*ren) cmd_render(c, events, traj, calib, out);
    return 0;
  } catch (const Error& e) {
    std::fprintf(stderr, "evrot: error: %s\n", e.what());
    return e.exit_code();
  } catch (const std::exception& e) {
    std::fprintf(stderr, "evrot: error: %s\n", e.what());
    return exit_code_for(ErrorKind::Input);
  }
}

}  // namespace evrot::cli
