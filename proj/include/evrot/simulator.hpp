#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "evrot/error.hpp"
#include "evrot/events.hpp"
#include "evrot/geometry.hpp"
#include "evrot/iwe.hpp"
#include "evrot/parallel.hpp"
#include "evrot/trajectory.hpp"

namespace evrot {

/// Equirectangular grayscale image, intensities >= 0, row-major.
struct PanoramaImage {
  int w = 0, h = 0;
  std::vector<float> values;

  float at(int x, int y) const { return values[static_cast<std::size_t>(y) * w + x]; }
  PanoramaGeometry geometry() const { return {w, h}; }

  void validate() const {
    geometry().validate();
    if (values.size() != static_cast<std::size_t>(w) * h) throw InputError("panorama: size mismatch");
    for (float v : values)
      if (!std::isfinite(v) || v < 0.0f) throw InputError("panorama: intensities must be finite and >= 0");
  }
};

inline PanoramaImage panorama_from_image(const GrayImage& img) {
  PanoramaImage p{img.width, img.height, std::vector<float>(img.values.begin(), img.values.end())};
  p.validate();
  return p;
}

inline PanoramaImage make_checkerboard(int w, int h, int squares_x, int squares_y, float lo, float hi) {
  PanoramaImage p{w, h, std::vector<float>(static_cast<std::size_t>(w) * h)};
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const int cx = x * squares_x / w, cy = y * squares_y / h;
      p.values[static_cast<std::size_t>(y) * w + x] = ((cx + cy) % 2) ? hi : lo;
    }
  return p;
}

inline PanoramaImage make_uniform(int w, int h, float value) {
  return {w, h, std::vector<float>(static_cast<std::size_t>(w) * h, value)};
}

/// Bilinear lookup at the equirectangular position of a direction.
inline double sample_panorama(const PanoramaImage& pano, const Vec3& dir) {
  const MapPoint m = project_equirect(dir, pano.geometry());
  const BilinearStencil s = bilinear_stencil(m.px, m.py, pano.w, pano.h, true);
  double v = 0.0;
  for (int i = 0; i < 4; ++i)
    if (s.idx[i] >= 0) v += s.w[i] * pano.values[s.idx[i]];
  return v;
}

struct SimConfig {
  CameraModel cam;
  double contrast = 0.2;    // log-intensity threshold C
  double dt_sim = 1e-3;     // s
  double refractory = 0.0;  // s
  double eps = 1e-3;        // log floor
  double t_begin = 0.0, t_end = 1.0;
  double time_jitter = 0.0;         // std dev of Gaussian timestamp noise (s)
  double threshold_mismatch = 0.0;  // std dev of per-pixel relative threshold error
  std::uint64_t seed = 1;

  void validate() const {
    cam.validate();
    if (!(contrast > 0.0) || !(dt_sim > 0.0) || refractory < 0.0 || !(eps > 0.0) || !(t_end > t_begin) || time_jitter < 0.0 ||
        threshold_mismatch < 0.0)
      throw InputError("invalid simulator configuration");
  }
};

/// Samples log(eps + I) along the trajectory at every pixel centre and emits
/// an event each time the change since the last event reaches +-C, with
/// timestamps interpolated linearly in log intensity.
inline std::vector<Event> generate_events(const PanoramaImage& pano, const ControlPoseGrid& gt, const SimConfig& cfg) {
  cfg.validate();
  pano.validate();
  const auto [lo, hi] = valid_time_range(gt);
  if (cfg.t_begin < lo - 1e-9 || cfg.t_end > hi + 1e-9) throw RangeError("simulation interval outside the trajectory range");
  const int steps = std::max(1, static_cast<int>(std::ceil((cfg.t_end - cfg.t_begin) / cfg.dt_sim - 1e-9)));
  std::vector<double> times(steps + 1);
  std::vector<Mat3> R(steps + 1);
  for (int j = 0; j <= steps; ++j) {
    times[j] = j == steps ? cfg.t_end : cfg.t_begin + j * (cfg.t_end - cfg.t_begin) / steps;
    R[j] = sample(gt, std::clamp(times[j], lo, hi)).matrix();
  }
  const int W = cfg.cam.width, H = cfg.cam.height;
  const std::size_t n_pix = static_cast<std::size_t>(W) * H;
  constexpr std::size_t kChunk = 256;
  std::vector<std::vector<Event>> slots(chunk_count(n_pix, kChunk));
  const double tol = 1e-6;  // log units; absorbs float storage of the panorama
  parallel_chunks(n_pix, kChunk, [&](std::size_t c, std::size_t b, std::size_t e) {
    auto& out = slots[c];
    for (std::size_t pix = b; pix < e; ++pix) {
      const int x = static_cast<int>(pix % W), y = static_cast<int>(pix / W);
      const Vec3 X = back_project(x, y, cfg.cam);
      std::mt19937_64 rng(cfg.seed * 0x9E3779B97F4A7C15ULL + pix);
      std::normal_distribution<double> normal(0.0, 1.0);
      double C_pos = cfg.contrast, C_neg = cfg.contrast;
      if (cfg.threshold_mismatch > 0.0) {
        C_pos *= std::max(0.1, 1.0 + cfg.threshold_mismatch * normal(rng));
        C_neg *= std::max(0.1, 1.0 + cfg.threshold_mismatch * normal(rng));
      }
      double L_prev = std::log(cfg.eps + sample_panorama(pano, R[0] * X));
      double ref = L_prev;
      double last_t = -1e300;
      for (int j = 1; j <= steps; ++j) {
        const double L = std::log(cfg.eps + sample_panorama(pano, R[j] * X));
        if (L == L_prev) continue;
        for (;;) {
          int pol = 0;
          double level = 0.0;
          if (L - ref >= C_pos - tol) {
            pol = 1;
            level = ref + C_pos;
          } else if (ref - L >= C_neg - tol) {
            pol = -1;
            level = ref - C_neg;
          } else {
            break;
          }
          const double frac = std::clamp((level - L_prev) / (L - L_prev), 0.0, 1.0);
          double t = times[j - 1] + frac * (times[j] - times[j - 1]);
          ref = level;
          if (cfg.time_jitter > 0.0) t = std::clamp(t + cfg.time_jitter * normal(rng), cfg.t_begin, cfg.t_end);
          if (t - last_t < cfg.refractory) continue;
          last_t = t;
          out.push_back({t, static_cast<float>(x), static_cast<float>(y), static_cast<std::int8_t>(pol)});
        }
        L_prev = L;
      }
    }
  });
  std::size_t total = 0;
  for (const auto& s : slots) total += s.size();
  std::vector<Event> events;
  events.reserve(total);
  for (auto& s : slots) events.insert(events.end(), s.begin(), s.end());
  // pixel order inside equal timestamps is kept by the stable sort
  std::stable_sort(events.begin(), events.end(), [](const Event& a, const Event& b) { return a.t < b.t; });
  return events;
}

/// Body-frame angular velocity of a grid at time t, by central differences.
inline Vec3 angular_velocity(const ControlPoseGrid& g, double t, double h = 1e-5) {
  const auto [lo, hi] = valid_time_range(g);
  const double a = std::max(lo, t - h), b = std::min(hi, t + h);
  return log_so3(sample(g, a).inverse() * sample(g, b)) / (b - a);
}

/// Synthetic gyro: body rates sampled at `rate` Hz with an additive bias and
/// optional white noise.
inline std::vector<GyroSample> simulate_gyro(const ControlPoseGrid& g, double t_begin, double t_end, double rate,
                                             const Vec3& bias = Vec3::Zero(), double noise = 0.0, std::uint64_t seed = 1) {
  if (!(rate > 0.0) || !(t_end > t_begin)) throw InputError("simulate_gyro: bad interval or rate");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, noise > 0.0 ? noise : 1.0);
  std::vector<GyroSample> out;
  const int n = static_cast<int>(std::floor((t_end - t_begin) * rate + 1e-9));
  for (int i = 0; i <= n; ++i) {
    const double t = t_begin + i / rate;
    // rate over the following interval so that integration reproduces the pose
    const double t1 = std::min(t_end, t + 1.0 / rate);
    Vec3 w = t1 > t ? Vec3(log_so3(sample(g, t).inverse() * sample(g, t1)) / (t1 - t)) : angular_velocity(g, t);
    w += bias;
    if (noise > 0.0) w += Vec3(normal(rng), normal(rng), normal(rng));
    out.push_back({t, w});
  }
  return out;
}

enum class TrajectoryKind { ConstantOmega, Sinusoid, RandomSmooth };

inline TrajectoryKind parse_trajectory_kind(const std::string& s) {
  if (s == "constant") return TrajectoryKind::ConstantOmega;
  if (s == "sinusoid") return TrajectoryKind::Sinusoid;
  if (s == "random") return TrajectoryKind::RandomSmooth;
  throw InputError("unknown trajectory kind '" + s + "' (expected constant|sinusoid|random)");
}

struct TrajectoryParams {
  double t_begin = 0.0, duration = 5.0;
  double control_hz = 20.0;
  SplineOrder order = SplineOrder::Cubic;
  Vec3 omega = Vec3(0, 0, 1);              // constant: rad/s
  Vec3 amplitude = Vec3(0.4, 0.5, 0.3);    // sinusoid: rad per axis
  Vec3 frequency = Vec3(0.5, 0.4, 0.6);    // sinusoid: Hz per axis
  Vec3 phase = Vec3(0.0, 1.0, 2.0);        // sinusoid: rad per axis
  double peak_rate = 0.0;                  // sinusoid: rescale amplitudes to this peak speed (rad/s) when > 0
  double step_sigma = 0.02;                // random: rad per control
  std::uint64_t seed = 1;
};

namespace detail {
inline double peak_speed(const ControlPoseGrid& g) {
  const auto [lo, hi] = valid_time_range(g);
  double peak = 0.0;
  for (double t = lo; t < hi; t += 1e-3) {
    const double b = std::min(hi, t + 1e-3);
    if (b > t) peak = std::max(peak, rotation_angle(sample(g, t).inverse() * sample(g, b)) / (b - t));
  }
  return peak;
}
}  // namespace detail

/// Ground-truth grids covering [t_begin, t_begin + duration].
inline ControlPoseGrid make_test_trajectory(TrajectoryKind kind, const TrajectoryParams& p) {
  if (!(p.duration > 0.0) || !(p.control_hz > 0.0)) throw InputError("make_test_trajectory: bad duration or rate");
  ControlPoseGrid g;
  g.order = p.order;
  g.dt = 1.0 / p.control_hz;
  g.t0 = p.order == SplineOrder::Cubic ? p.t_begin - g.dt : p.t_begin;
  const int segs = static_cast<int>(std::ceil(p.duration / g.dt - 1e-9));
  const int n = segs + (p.order == SplineOrder::Cubic ? 3 : 1);
  g.poses.resize(n);
  switch (kind) {
    case TrajectoryKind::ConstantOmega:
      for (int i = 0; i < n; ++i) g.poses[i] = exp_so3((g.knot_time(i) - p.t_begin) * p.omega);
      break;
    case TrajectoryKind::Sinusoid: {
      auto build = [&](const Vec3& amp) {
        for (int i = 0; i < n; ++i) {
          const double t = g.knot_time(i) - p.t_begin;
          Vec3 th;
          for (int a = 0; a < 3; ++a) th[a] = amp[a] * std::sin(2 * kPi * p.frequency[a] * t + p.phase[a]);
          Vec3 th0;
          for (int a = 0; a < 3; ++a) th0[a] = amp[a] * std::sin(p.phase[a]);
          g.poses[i] = exp_so3(th0).inverse() * exp_so3(th);
        }
      };
      Vec3 amp = p.amplitude;
      build(amp);
      if (p.peak_rate > 0.0 && amp.norm() > 0.0)
        for (int k = 0; k < 4; ++k) {
          amp *= p.peak_rate / detail::peak_speed(g);
          build(amp);
        }
      break;
    }
    case TrajectoryKind::RandomSmooth: {
      std::mt19937_64 rng(p.seed);
      std::normal_distribution<double> normal(0.0, p.step_sigma);
      Vec3 v = Vec3::Zero();
      g.poses[0] = Rotation{};
      for (int i = 1; i < n; ++i) {
        // low-pass filtered random increments
        v = 0.8 * v + Vec3(normal(rng), normal(rng), normal(rng));
        g.poses[i] = g.poses[i - 1] * exp_so3(v);
      }
      break;
    }
  }
  return g;
}

}  // namespace evrot
