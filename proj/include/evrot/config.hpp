#pragma once

#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <string>
#include <type_traits>
#include <vector>

#include "evrot/backend.hpp"
#include "evrot/error.hpp"
#include "evrot/frontend.hpp"
#include "evrot/geometry.hpp"
#include "evrot/simulator.hpp"

namespace evrot {

// Everything a command may need. Each command reads the sections it uses;
// validate() checks all of them so a bad value fails before any work starts.
struct RunConfig {
  FrontendConfig frontend;
  WindowConfig backend;

  // simulate
  SimConfig sim;
  std::string trajectory = "sinusoid";  // constant | sinusoid | random
  TrajectoryParams traj;
  std::string panorama = "checkerboard";  // or a PGM path
  int pano_width = 2048, pano_height = 1024;
  int squares_x = 32, squares_y = 16;
  double board_lo = 0.2, board_hi = 0.8;
  std::string event_format = "binary";  // binary | text

  // evaluate
  double eval_rate = 50.0;                                    // Hz of absolute-error queries
  double eval_t0 = std::numeric_limits<double>::quiet_NaN();  // NaN: start of the estimate
  double rel_span = 1.0, rel_step = 0.1;
  bool smooth_gt = false;
  double smooth_span = 0.05;

  double gamma = 0.75;
  int threads = 1;

  RunConfig() {
    sim.cam.width = 240;
    sim.cam.height = 180;
    sim.cam.fx = sim.cam.fy = 200.0;
    sim.cam.cx = 120.0;
    sim.cam.cy = 90.0;
    traj.peak_rate = 100.0 * kPi / 180.0;
    traj.omega = Vec3(1, 1, 1).normalized() * traj.peak_rate;
  }

  void validate() const {
    frontend.validate();
    backend.validate();
    sim.validate();
    parse_trajectory_kind(trajectory);
    if (!(traj.duration > 0.0)) throw InputError("sim.duration must be positive");
    if (pano_width < 2 || pano_width != 2 * pano_height) throw InputError("sim.pano_width must equal 2 x sim.pano_height");
    if (squares_x < 1 || squares_y < 1) throw InputError("sim.squares_x and sim.squares_y must be >= 1");
    if (event_format != "binary" && event_format != "text") throw InputError("sim.event_format must be binary or text");
    if (!(eval_rate > 0.0) || !(rel_span > 0.0) || !(rel_step > 0.0) || !(smooth_span > 0.0))
      throw InputError("eval rates and spans must be positive");
    if (!(gamma > 0.0)) throw InputError("render.gamma must be positive");
    if (threads < 1) throw InputError("threads must be >= 1");
  }
};

namespace detail {

// shortest text that reads back to the same double
inline std::string fmt_double(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

template <typename T>
T parse_value(const std::string& key, const std::string& v) {
  auto bad = [&](const char* what) { return UsageError("config key '" + key + "': expected " + what + ", got '" + v + "'"); };
  if constexpr (std::is_same_v<T, std::string>) {
    return v;
  } else if constexpr (std::is_same_v<T, bool>) {
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw bad("true|false");
  } else if constexpr (std::is_same_v<T, SplineOrder>) {
    try {
      return parse_spline_order(v);
    } catch (const Error&) {
      throw bad("linear|cubic");
    }
  } else if constexpr (std::is_same_v<T, Vec3>) {
    Vec3 out;
    std::size_t pos = 0;
    for (int i = 0; i < 3; ++i) {
      const auto comma = v.find(',', pos);
      if ((i < 2) == (comma == std::string::npos)) throw bad("x,y,z");
      out[i] = parse_value<double>(key, v.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos));
      pos = comma + 1;
    }
    return out;
  } else if constexpr (std::is_integral_v<T>) {
    long long i = 0;
    std::size_t used = 0;
    try {
      i = std::stoll(v, &used);
    } catch (const std::exception&) {
      throw bad("an integer");
    }
    if (used != v.size()) throw bad("an integer");
    if (i < static_cast<long long>(std::numeric_limits<T>::min()) ||
        (i > 0 && static_cast<unsigned long long>(i) > static_cast<unsigned long long>(std::numeric_limits<T>::max())))
      throw bad("an integer in range");
    return static_cast<T>(i);
  } else {
    double d = 0.0;
    std::size_t used = 0;
    try {
      d = std::stod(v, &used);
    } catch (const std::exception&) {
      throw bad("a number");
    }
    if (used != v.size()) throw bad("a number");
    return d;
  }
}

template <typename T>
std::string format_value(const T& v) {
  if constexpr (std::is_same_v<T, std::string>) return v;
  else if constexpr (std::is_same_v<T, bool>) return v ? "true" : "false";
  else if constexpr (std::is_same_v<T, SplineOrder>) return to_string(v);
  else if constexpr (std::is_same_v<T, Vec3>) return fmt_double(v.x()) + "," + fmt_double(v.y()) + "," + fmt_double(v.z());
  else if constexpr (std::is_integral_v<T>) return std::to_string(v);
  else return fmt_double(v);
}

struct ConfigKey {
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
  bool echoed = true;  // false for settings that cannot change any output
};

// `ref` maps a config to the field the key names
template <typename Ref>
ConfigKey bind_key(const std::string& key, Ref ref) {
  using T = std::remove_reference_t<decltype(ref(std::declval<RunConfig&>()))>;
  return {[key, ref](RunConfig& c, const std::string& v) { ref(c) = parse_value<T>(key, v); },
          [ref](const RunConfig& c) { return format_value<T>(ref(const_cast<RunConfig&>(c))); }};
}

inline void add_optim(std::map<std::string, ConfigKey>& k, const std::string& p, OptimOptions& (*o)(RunConfig&)) {
  k[p + "max_iters"] = bind_key(p + "max_iters", [o](RunConfig& c) -> auto& { return o(c).max_iters; });
  k[p + "grad_tol"] = bind_key(p + "grad_tol", [o](RunConfig& c) -> auto& { return o(c).grad_tol; });
  k[p + "step_tol"] = bind_key(p + "step_tol", [o](RunConfig& c) -> auto& { return o(c).step_tol; });
  k[p + "armijo"] = bind_key(p + "armijo", [o](RunConfig& c) -> auto& { return o(c).armijo; });
  k[p + "backtrack"] = bind_key(p + "backtrack", [o](RunConfig& c) -> auto& { return o(c).backtrack; });
  k[p + "restart"] = bind_key(p + "restart", [o](RunConfig& c) -> auto& { return o(c).restart; });
  k[p + "initial_step"] = bind_key(p + "initial_step", [o](RunConfig& c) -> auto& { return o(c).initial_step; });
  k[p + "max_backtracks"] = bind_key(p + "max_backtracks", [o](RunConfig& c) -> auto& { return o(c).max_backtracks; });
}

#define EVROT_KEY(name, expr) k[name] = bind_key(name, [](RunConfig& c) -> auto& { return expr; })

inline const std::map<std::string, ConfigKey>& config_keys() {
  static const std::map<std::string, ConfigKey> keys = [] {
    std::map<std::string, ConfigKey> k;
    EVROT_KEY("frontend.k", c.frontend.k);
    EVROT_KEY("frontend.rate", c.frontend.rate);
    EVROT_KEY("frontend.q", c.frontend.q);
    EVROT_KEY("frontend.batch", c.frontend.batch);
    EVROT_KEY("frontend.margin", c.frontend.margin);
    EVROT_KEY("frontend.warm_start", c.frontend.warm_start);
    EVROT_KEY("frontend.cold_start_blur", c.frontend.cold_start_blur);
    EVROT_KEY("frontend.cold_start_iters", c.frontend.cold_start_iters);
    add_optim(k, "frontend.", [](RunConfig& c) -> OptimOptions& { return c.frontend.optim; });

    EVROT_KEY("backend.window", c.backend.window);
    EVROT_KEY("backend.stride", c.backend.stride);
    EVROT_KEY("backend.control_hz", c.backend.control_hz);
    EVROT_KEY("backend.order", c.backend.order);
    EVROT_KEY("backend.batch", c.backend.batch);
    EVROT_KEY("backend.map_width", c.backend.pano.w);
    EVROT_KEY("backend.map_height", c.backend.pano.h);
    EVROT_KEY("backend.lambda0", c.backend.lambda0);
    EVROT_KEY("backend.saturation", c.backend.saturation);
    EVROT_KEY("backend.saturation_enabled", c.backend.saturation_enabled);
    EVROT_KEY("backend.q", c.backend.q);
    EVROT_KEY("backend.stationary_fraction", c.backend.stationary_fraction);
    EVROT_KEY("backend.dilation", c.backend.dilation);
    EVROT_KEY("backend.trace_rate", c.backend.trace_rate);
    add_optim(k, "backend.", [](RunConfig& c) -> OptimOptions& { return c.backend.optim; });

    EVROT_KEY("sim.contrast", c.sim.contrast);
    EVROT_KEY("sim.dt", c.sim.dt_sim);
    EVROT_KEY("sim.refractory", c.sim.refractory);
    EVROT_KEY("sim.eps", c.sim.eps);
    EVROT_KEY("sim.time_jitter", c.sim.time_jitter);
    EVROT_KEY("sim.threshold_mismatch", c.sim.threshold_mismatch);
    EVROT_KEY("sim.seed", c.sim.seed);
    EVROT_KEY("sim.trajectory", c.trajectory);
    EVROT_KEY("sim.duration", c.traj.duration);
    EVROT_KEY("sim.control_hz", c.traj.control_hz);
    EVROT_KEY("sim.order", c.traj.order);
    EVROT_KEY("sim.omega", c.traj.omega);
    EVROT_KEY("sim.amplitude", c.traj.amplitude);
    EVROT_KEY("sim.frequency", c.traj.frequency);
    EVROT_KEY("sim.phase", c.traj.phase);
    EVROT_KEY("sim.peak_rate", c.traj.peak_rate);
    EVROT_KEY("sim.step_sigma", c.traj.step_sigma);
    EVROT_KEY("sim.trajectory_seed", c.traj.seed);
    EVROT_KEY("sim.panorama", c.panorama);
    EVROT_KEY("sim.pano_width", c.pano_width);
    EVROT_KEY("sim.pano_height", c.pano_height);
    EVROT_KEY("sim.squares_x", c.squares_x);
    EVROT_KEY("sim.squares_y", c.squares_y);
    EVROT_KEY("sim.board_lo", c.board_lo);
    EVROT_KEY("sim.board_hi", c.board_hi);
    EVROT_KEY("sim.event_format", c.event_format);
    EVROT_KEY("camera.width", c.sim.cam.width);
    EVROT_KEY("camera.height", c.sim.cam.height);
    EVROT_KEY("camera.fx", c.sim.cam.fx);
    EVROT_KEY("camera.fy", c.sim.cam.fy);
    EVROT_KEY("camera.cx", c.sim.cam.cx);
    EVROT_KEY("camera.cy", c.sim.cam.cy);

    EVROT_KEY("eval.rate", c.eval_rate);
    EVROT_KEY("eval.t0", c.eval_t0);
    EVROT_KEY("eval.rel_span", c.rel_span);
    EVROT_KEY("eval.rel_step", c.rel_step);
    EVROT_KEY("eval.smooth_gt", c.smooth_gt);
    EVROT_KEY("eval.smooth_span", c.smooth_span);
    EVROT_KEY("render.gamma", c.gamma);
    EVROT_KEY("threads", c.threads);
    k["threads"].echoed = false;
    return k;
  }();
  return keys;
}

#undef EVROT_KEY

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  const auto e = s.find_last_not_of(" \t\r");
  return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
}

}  // namespace detail

inline void set_config_value(RunConfig& c, const std::string& key, const std::string& value) {
  const auto& keys = detail::config_keys();
  const auto it = keys.find(key);
  if (it == keys.end()) throw UsageError("unknown config key '" + key + "'");
  it->second.set(c, value);
}

inline std::string get_config_value(const RunConfig& c, const std::string& key) {
  const auto& keys = detail::config_keys();
  const auto it = keys.find(key);
  if (it == keys.end()) throw UsageError("unknown config key '" + key + "'");
  return it->second.get(c);
}

/// Applies a `key = value` file on top of `c`. `#` starts a comment.
inline void load_config_file(RunConfig& c, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open config file: " + path);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    if (detail::trim(line).empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw UsageError(path + ":" + std::to_string(lineno) + ": expected key=value");
    try {
      set_config_value(c, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
    } catch (const UsageError& e) {
      throw UsageError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

/// Every key that can affect results, with its effective value, sorted by
/// key. The thread count is left out: outputs do not depend on it.
inline std::vector<std::pair<std::string, std::string>> config_entries(const RunConfig& c) {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& [key, k] : detail::config_keys())
    if (k.echoed) out.emplace_back(key, k.get(c));
  return out;
}

}  // namespace evrot
