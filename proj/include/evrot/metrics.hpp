#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <span>
#include <string>
#include <vector>

#include "evrot/error.hpp"
#include "evrot/events.hpp"
#include "evrot/geometry.hpp"
#include "evrot/iwe.hpp"
#include "evrot/trajectory.hpp"

namespace evrot {

struct ErrorReport {
  std::vector<double> times;
  std::vector<double> angles;  // deg, or deg/s for relative errors
  double rms = 0.0;
  std::size_t count = 0;
  double t0 = 0.0;
};

namespace detail {
inline void finish_report(ErrorReport& r) {
  r.count = r.angles.size();
  double s = 0.0;
  for (double a : r.angles) s += a * a;
  r.rms = r.count ? std::sqrt(s / static_cast<double>(r.count)) : 0.0;
}
}  // namespace detail

inline constexpr double kRadToDeg = 180.0 / kPi;

/// Left-multiplies the estimate so that it coincides with gt at t0.
inline Trajectory align_at_t0(const Trajectory& est, const Trajectory& gt, double t0) {
  if (!est.covers(t0) || !gt.covers(t0)) throw InputError("align_at_t0: t0 outside a trajectory's range");
  const Rotation offset = gt.at(t0) * est.at(t0).inverse();
  std::vector<PoseSample> out = est.samples();
  for (auto& s : out) s.R = offset * s.R;
  return Trajectory(std::move(out));
}

/// Absolute rotation error at `rate` Hz over the common range after
/// alignment at t0.
inline ErrorReport absolute_rmse(const Trajectory& est, const Trajectory& gt, double rate, double t0) {
  if (est.empty() || gt.empty()) throw InputError("absolute_rmse: empty trajectory");
  if (!(rate > 0.0)) throw InputError("absolute_rmse: rate must be positive");
  const double lo = std::max(est.t_begin(), gt.t_begin()), hi = std::min(est.t_end(), gt.t_end());
  if (!(hi > lo)) throw InputError("absolute_rmse: trajectories do not overlap");
  if (!est.covers(t0) || !gt.covers(t0)) throw InputError("absolute_rmse: t0 outside a trajectory's range");
  // gt(t)^T [gt(t0) est(t0)^T] est(t), grouped as two motions relative to t0 so
  // that identical inputs give exactly zero
  const Rotation gt0 = gt.at(t0).inverse(), est0 = est.at(t0).inverse();
  ErrorReport r;
  r.t0 = t0;
  const auto n = static_cast<long>(std::floor((hi - lo) * rate + 1e-9));
  for (long k = 0; k <= n; ++k) {
    const double t = lo + k / rate;
    r.times.push_back(t);
    r.angles.push_back(rotation_angle((gt0 * gt.at(t)).inverse() * (est0 * est.at(t))) * kRadToDeg);
  }
  if (r.angles.size() < 2) throw InputError("absolute_rmse: overlap shorter than two query periods");
  detail::finish_report(r);
  return r;
}

/// Relative rotation error over pairs (t, t + span) every `step` seconds,
/// divided by the span (deg/s).
inline ErrorReport relative_rmse(const Trajectory& est, const Trajectory& gt, double span = 1.0, double step = 0.1) {
  if (est.empty() || gt.empty()) throw InputError("relative_rmse: empty trajectory");
  if (!(span > 0.0) || !(step > 0.0)) throw InputError("relative_rmse: span and step must be positive");
  const double lo = std::max(est.t_begin(), gt.t_begin()), hi = std::min(est.t_end(), gt.t_end());
  if (hi - lo < span - 1e-9) throw InputError("relative_rmse: common range shorter than the span");
  ErrorReport r;
  r.t0 = lo;
  for (long k = 0;; ++k) {
    const double t = lo + k * step;
    const double t2 = std::min(t + span, hi);
    if (t + span > hi + 1e-9) break;
    const Rotation dg = gt.at(t).inverse() * gt.at(t2);
    const Rotation de = est.at(t).inverse() * est.at(t2);
    r.times.push_back(t);
    r.angles.push_back(rotation_angle(dg.inverse() * de) * kRadToDeg / span);
  }
  detail::finish_report(r);
  return r;
}

/// Gaussian low-pass filter on SO(3): each sample is replaced by the weighted
/// tangent-space mean of its neighbours within +-span/2 (sigma = span/4). The
/// window is shrunk symmetrically near the ends.
inline Trajectory smooth_gt(const Trajectory& gt, double span = 0.05) {
  if (gt.size() < 3) throw InputError("smooth_gt: need at least 3 samples");
  if (!(span > 0.0)) throw InputError("smooth_gt: span must be positive");
  const auto& s = gt.samples();
  const double sigma = span / 4.0;
  std::vector<PoseSample> out(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) {
    const double half = std::min({span / 2.0, s[i].t - gt.t_begin(), gt.t_end() - s[i].t});
    const Rotation inv = s[i].R.inverse();
    Vec3 acc = Vec3::Zero();
    double wsum = 0.0;
    const auto accumulate = [&](std::size_t j) {
      const double d = s[j].t - s[i].t;
      const double w = std::exp(-0.5 * d * d / (sigma * sigma));
      acc += w * log_so3(inv * s[j].R);
      wsum += w;
    };
    accumulate(i);
    for (std::size_t j = i; j-- > 0 && s[i].t - s[j].t <= half + 1e-12;) accumulate(j);
    for (std::size_t j = i + 1; j < s.size() && s[j].t - s[i].t <= half + 1e-12; ++j) accumulate(j);
    out[i] = {s[i].t, s[i].R * exp_so3(acc / wsum)};
  }
  return Trajectory(std::move(out));
}

struct MapQuality {
  double ea_percent = 0.0;
  double gm = 0.0;
};

/// Panoramic IWE with one pose per event.
template <typename PoseFn>
Iwe render_map(std::span<const Event> events, PoseFn&& pose, const CameraModel& cam, const PanoramaGeometry& pano) {
  Iwe I = Iwe::panoramic(pano);
  accumulate_bilinear(warp_panoramic_with(events, pose, cam, pano, 1), I);
  return I;
}

inline MapQuality map_quality(const Iwe& I, double lambda0 = 1.0) {
  return {100.0 * event_area(I, lambda0) / static_cast<double>(I.pixel_count()), gradient_magnitude(I)};
}

/// Event area (percent of the map) and gradient magnitude of the panoramic
/// IWE built with per-event poses.
template <typename PoseFn>
MapQuality proxy_reprojection_with(std::span<const Event> events, PoseFn&& pose, const CameraModel& cam,
                                   const PanoramaGeometry& pano, double lambda0 = 1.0) {
  return map_quality(render_map(events, pose, cam, pano), lambda0);
}

inline MapQuality proxy_reprojection(std::span<const Event> events, const Trajectory& traj, const CameraModel& cam,
                                     const PanoramaGeometry& pano, double lambda0 = 1.0) {
  return proxy_reprojection_with(events, [&](double t) { return traj.at(t); }, cam, pano, lambda0);
}

inline MapQuality proxy_reprojection(std::span<const Event> events, const ControlPoseGrid& grid, const CameraModel& cam,
                                     const PanoramaGeometry& pano, double lambda0 = 1.0) {
  return proxy_reprojection_with(events, [&](double t) { return sample(grid, t); }, cam, pano, lambda0);
}

inline void write_error_series_csv(const std::string& path, const ErrorReport& r,
                                   const std::vector<std::string>& comment = {}) {
  std::FILE* f = std::fopen(path.c_str(), "w");
  if (!f) throw InputError("cannot write '" + path + "'");
  for (const auto& c : comment) std::fprintf(f, "# %s\n", c.c_str());
  std::fprintf(f, "t,angle_deg\n");
  for (std::size_t i = 0; i < r.count; ++i) std::fprintf(f, "%.9f,%.17g\n", r.times[i], r.angles[i]);
  std::fclose(f);
}

}  // namespace evrot
