#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "evrot/error.hpp"
#include "evrot/events.hpp"
#include "evrot/frontend.hpp"
#include "evrot/geometry.hpp"
#include "evrot/iwe.hpp"
#include "evrot/optimizer.hpp"
#include "evrot/parallel.hpp"
#include "evrot/trajectory.hpp"

namespace evrot {

struct WindowConfig {
  double window = 0.2;      // s
  double stride = 0.1;      // s
  double control_hz = 20.0;
  SplineOrder order = SplineOrder::Cubic;
  std::size_t batch = 100;  // events per pose query
  PanoramaGeometry pano;
  double lambda0 = 1.0;
  double saturation = 10.0;  // s of observation before a pixel stops accumulating
  bool saturation_enabled = true;
  int q = 1;                       // keep one event out of q
  double stationary_fraction = 0.05;  // of the running median event rate
  int dilation = 2;                // px around the initially touched pixels
  double trace_rate = 200.0;       // Hz of the dense output trace
  OptimOptions optim = [] {
    OptimOptions o;
    o.max_iters = 50;
    o.initial_step = 2e-3;  // rad
    return o;
  }();

  void validate() const {
    if (!(window > 0.0) || !(stride > 0.0) || stride > window + 1e-12)
      throw InputError("window config: need 0 < stride <= window");
    if (!(control_hz > 0.0) || control_hz * window < 1.0 - 1e-9)
      throw InputError("window config: control frequency x window length must be >= 1");
    if (batch < 1) throw InputError("window config: batch must be >= 1");
    if (!(lambda0 > 0.0)) throw InputError("window config: lambda0 must be positive");
    if (!(saturation > 0.0)) throw InputError("window config: saturation threshold must be positive");
    if (q < 1) throw InputError("window config: Q must be >= 1");
    if (dilation < 0) throw InputError("window config: dilation must be >= 0");
    if (!(trace_rate > 0.0)) throw InputError("window config: trace rate must be positive");
    if (stationary_fraction < 0.0) throw InputError("window config: stationary fraction must be >= 0");
    pano.validate();
    optim.validate();
  }
};

/// Global map plus the bookkeeping needed for the saturation rule. Times in
/// observed_since are on the active clock, which only advances during
/// non-stationary windows.
struct GlobalMapState {
  Iwe map;
  std::vector<double> observed_since;  // NaN when unset
  double committed_through = 0.0;
  double active_clock = 0.0;
  std::size_t committed = 0;     // events handed to commit in non-stationary windows
  std::size_t saturated = 0;     // discarded onto saturated pixels
  std::size_t out_of_range = 0;  // warp produced no valid map position
  std::size_t skipped_stationary = 0;

  GlobalMapState() = default;
  explicit GlobalMapState(const PanoramaGeometry& p)
      : map(Iwe::panoramic(p)), observed_since(map.pixel_count(), std::numeric_limits<double>::quiet_NaN()) {}

  std::size_t accumulated() const { return committed - saturated - out_of_range; }
};

struct WindowReport {
  int index = 0;
  double t_begin = 0.0, t_end = 0.0;
  std::size_t n_events = 0;
  bool stationary = false;
  bool failed = false;
  double alpha = 0.0;
  double value_before = 0.0, value_after = 0.0;
  int iterations = 0;
  std::string reason = "none";
  int first_varying = -1, n_varying = 0;
  std::size_t domain_pixels = 0;
  double max_correction = 0.0;  // rad, largest control increment
};

struct SlamResult {
  ControlPoseGrid grid;
  std::vector<PoseSample> trace;
  GlobalMapState state;
  std::vector<WindowReport> windows;
  std::vector<AngularVelocityEstimate> frontend;
};

// ---------------------------------------------------------------------------
// Window objective: Var(I_L + alpha I_G) over the active domain as a function
// of right increments of the varying control poses.

class WindowObjective {
 public:
  WindowObjective(std::span<const Event> events, const ControlPoseGrid& grid, int first_varying, int n_varying,
                  const CameraModel& cam, const WindowConfig& cfg, const Iwe* global)
      : events_(events), base_(grid), first_(first_varying), nvar_(n_varying), cfg_(cfg), global_(global),
        local_(Iwe::panoramic(cfg.pano)) {
    if (n_varying < 0 || first_varying < 0 || first_varying + n_varying > grid.size())
      throw InputError("window objective: varying controls outside the grid");
    X_.resize(events.size());
    for (std::size_t i = 0; i < events.size(); ++i) X_[i] = back_project(events[i].x, events[i].y, cam);
    nb_ = chunk_count(events.size(), cfg.batch);
    t_mid_.resize(nb_);
    for (std::size_t b = 0; b < nb_; ++b) {
      const std::size_t i0 = b * cfg.batch, i1 = std::min(events.size(), i0 + cfg.batch);
      t_mid_[b] = 0.5 * (events[i0].t + events[i1 - 1].t);
    }
    st_.resize(events.size());
    J_.resize(events.size());
    e_.resize(nb_);
    centered_.assign(local_.pixel_count(), 0.0);
    mask_.assign(local_.pixel_count(), 0);

    // active domain and alpha from the initial warp
    warp(base_, false);
    accumulate();
    const int w = cfg.pano.w, h = cfg.pano.h, r = cfg.dilation;
    for (const auto& s : st_)
      for (int k = 0; k < 4; ++k) {
        if (s.idx[k] < 0 || s.w[k] == 0.0) continue;
        const int x = static_cast<int>(s.idx[k] % w), y = static_cast<int>(s.idx[k] / w);
        for (int dy = -r; dy <= r; ++dy) {
          const int yy = y + dy;
          if (yy < 0 || yy >= h) continue;
          for (int dx = -r; dx <= r; ++dx) mask_[static_cast<std::size_t>(yy) * w + ((x + dx) % w + w) % w] = 1;
        }
      }
    for (std::size_t p = 0; p < mask_.size(); ++p)
      if (mask_[p]) domain_.push_back(p);
    alpha_ = global_ ? alpha_weight_from(local_, *global_) : 0.0;
    clear_local();
  }

  int dimension() const { return 3 * nvar_; }
  double alpha() const { return alpha_; }
  std::size_t domain_size() const { return domain_.size(); }

  /// Grid with the increments applied.
  ControlPoseGrid apply(const VecX& x) const {
    ControlPoseGrid g = base_;
    for (int c = 0; c < nvar_; ++c) g.poses[first_ + c] = base_.poses[first_ + c] * exp_so3(x.segment<3>(3 * c));
    return g;
  }

  double operator()(const VecX& x, VecX* grad) {
    if (x.size() != dimension()) throw InputError("window objective: wrong parameter dimension");
    const ControlPoseGrid g = apply(x);
    warp(g, grad != nullptr);
    accumulate();
    if (domain_.empty()) {
      clear_local();
      if (grad) grad->setZero(dimension());
      return 0.0;
    }
    const auto& L = local_.values();
    const double N = static_cast<double>(domain_.size());
    double mean = 0.0;
    for (std::size_t p : domain_) mean += value_at(L, p);
    mean /= N;
    double var = 0.0;
    for (std::size_t p : domain_) {
      const double d = value_at(L, p) - mean;
      var += d * d;
    }
    var /= N;
    if (grad) {
      for (std::size_t p : domain_) centered_[p] = 2.0 * (value_at(L, p) - mean) / N;
      gradient(x, *grad);
    }
    clear_local();
    return var;
  }

 private:
  static double alpha_weight_from(const Iwe& local, const Iwe& global) { return alpha_weight(local, global); }

  double value_at(const std::vector<double>& L, std::size_t p) const {
    return global_ && alpha_ != 0.0 ? L[p] + alpha_ * global_->values()[p] : L[p];
  }

  void warp(const ControlPoseGrid& g, bool with_jacobian) {
    const PanoramaGeometry& pano = cfg_.pano;
    const std::size_t batch = cfg_.batch;
    parallel_chunks(nb_, 32, [&](std::size_t, std::size_t b0, std::size_t b1) {
      for (std::size_t b = b0; b < b1; ++b) {
        const std::size_t i0 = b * batch, i1 = std::min(events_.size(), i0 + batch);
        const Mat3 R = sample(g, t_mid_[b]).matrix();
        for (std::size_t i = i0; i < i1; ++i) {
          const Vec3 Xp = R * X_[i];
          const MapPoint m = project_equirect(Xp, pano);
          st_[i] = bilinear_stencil(m.px, m.py, pano.w, pano.h, true);
          if (with_jacobian) J_[i] = project_equirect_jacobian(Xp, pano);
        }
      }
    });
  }

  void accumulate() {
    auto& L = local_.values();
    for (const auto& s : st_)
      for (int k = 0; k < 4; ++k)
        if (s.idx[k] >= 0) L[s.idx[k]] += s.w[k];
  }

  void clear_local() {
    auto& L = local_.values();
    for (const auto& s : st_)
      for (int k = 0; k < 4; ++k)
        if (s.idx[k] >= 0) L[s.idx[k]] = 0.0;
  }

  void gradient(const VecX& x, VecX& grad) {
    const ControlPoseGrid g = apply(x);
    const std::size_t batch = cfg_.batch;
    parallel_chunks(nb_, 32, [&](std::size_t, std::size_t b0, std::size_t b1) {
      for (std::size_t b = b0; b < b1; ++b) {
        const std::size_t i0 = b * batch, i1 = std::min(events_.size(), i0 + batch);
        const Mat3 Rt = sample(g, t_mid_[b]).matrix().transpose();
        Vec3 acc = Vec3::Zero();
        for (std::size_t i = i0; i < i1; ++i) {
          const auto& s = st_[i];
          double gu = 0.0, gv = 0.0;
          for (int k = 0; k < 4; ++k)
            if (s.idx[k] >= 0) {
              gu += centered_[s.idx[k]] * s.dw_du[k];
              gv += centered_[s.idx[k]] * s.dw_dv[k];
            }
          if (gu == 0.0 && gv == 0.0) continue;
          const Vec3 row = gu * J_[i].row(0).transpose() + gv * J_[i].row(1).transpose();
          acc += X_[i].cross(Rt * row);
        }
        e_[b] = acc;
      }
    });
    grad.setZero(dimension());
    for (std::size_t b = 0; b < nb_; ++b) {
      if (e_[b].isZero(0.0)) continue;
      const PoseDerivative d = sample_with_derivative(g, t_mid_[b]);
      for (int c = 0; c < d.count; ++c) {
        const int j = d.first + c - first_;
        if (j < 0 || j >= nvar_) continue;
        grad.segment<3>(3 * j) += d.d_pose[c].transpose() * e_[b];
      }
    }
    // increments enter as base * exp(x): chain through the right Jacobian
    for (int c = 0; c < nvar_; ++c) grad.segment<3>(3 * c) = right_jacobian(x.segment<3>(3 * c)).transpose() * grad.segment<3>(3 * c);
    for (std::size_t p : domain_) centered_[p] = 0.0;
  }

  std::span<const Event> events_;
  ControlPoseGrid base_;
  int first_, nvar_;
  WindowConfig cfg_;
  const Iwe* global_;
  Iwe local_;
  std::vector<Vec3> X_;
  std::size_t nb_ = 0;
  std::vector<double> t_mid_;
  std::vector<BilinearStencil> st_;
  std::vector<Mat23> J_;
  std::vector<Vec3> e_;
  std::vector<double> centered_;
  std::vector<char> mask_;
  std::vector<std::size_t> domain_;
  double alpha_ = 0.0;
};

// ---------------------------------------------------------------------------
// Grid bookkeeping.

namespace detail {

// Segment index holding time t, for t in [t0, ...); with `open_end` a time
// exactly on a knot belongs to the segment that ends there.
inline int segment_of(const ControlPoseGrid& g, double t, bool open_end) {
  const double s = (t - g.t0) / g.dt;
  return open_end ? static_cast<int>(std::ceil(s - 1e-9)) - 1 : static_cast<int>(std::floor(s + 1e-9));
}

inline int first_control(const ControlPoseGrid& g, double t) {
  const int seg = segment_of(g, t, false);
  return std::max(0, g.order == SplineOrder::Linear ? seg : seg - 1);
}

inline int last_control(const ControlPoseGrid& g, double t) {
  const int seg = segment_of(g, t, true);
  return std::min(g.size() - 1, seg + (g.order == SplineOrder::Linear ? 1 : 2));
}

inline double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace detail

/// Grid covering [t_begin, t_end] with identity poses.
inline ControlPoseGrid make_window_grid(double t_begin, double t_end, const WindowConfig& cfg) {
  ControlPoseGrid g;
  g.order = cfg.order;
  g.dt = 1.0 / cfg.control_hz;
  g.t0 = cfg.order == SplineOrder::Cubic ? t_begin - g.dt : t_begin;
  const int segs = std::max(1, static_cast<int>(std::ceil((t_end - t_begin) / g.dt - 1e-9)));
  g.poses.assign(segs + (cfg.order == SplineOrder::Cubic ? 3 : 1), Rotation{});
  return g;
}

/// Initializes controls (initialized_upto, last] from a pose source,
/// re-anchored so that it agrees with the current grid at w_start. The fit
/// looks ahead past w_end so that each new control sees samples over its
/// whole support; the trailing control of a window is otherwise barely
/// observed and a plain least-squares fit extrapolates wildly.
inline void init_window(const Trajectory& source, ControlPoseGrid& grid, int initialized_upto, int last, double w_start,
                        double w_end) {
  if (last <= initialized_upto) return;
  const double ts = std::clamp(w_start, source.t_begin(), source.t_end());
  Rotation offset;
  if (initialized_upto >= 0) offset = sample(grid, w_start) * source.at(ts).inverse();
  const bool cubic = grid.order == SplineOrder::Cubic;
  std::optional<ControlPoseGrid> fitted;
  for (int ahead = cubic ? 3 : 1; ahead >= 0 && !fitted; --ahead) {
    ControlPoseGrid sub = grid;
    sub.poses.resize(last + 1 + ahead);
    const auto [lo, hi] = valid_time_range(sub);
    const double t_hi = std::min(hi, std::max(w_end, sub.knot_time(last + (cubic ? 2 : 1))));
    std::vector<PoseSample> samples;
    for (const auto& s : source.samples())
      if (s.t >= std::max(w_start, lo) - 1e-12 && s.t <= t_hi + 1e-12) samples.push_back({s.t, offset * s.R});
    if (samples.empty()) continue;
    try {
      fitted = fit_spline_partial(samples, std::move(sub), initialized_upto + 1);
    } catch (const FitError&) {
    }
  }
  for (int i = initialized_upto + 1; i <= last; ++i) {
    if (fitted) {
      grid.poses[i] = fitted->poses[i];
    } else {
      // too few source poses: place new controls on the source at their knots
      grid.poses[i] = offset * source.at(std::clamp(grid.knot_time(i), source.t_begin(), source.t_end()));
    }
  }
}

/// Adds the events of one stride to the global map with the committed grid.
inline void commit_window(std::span<const Event> events, const ControlPoseGrid& grid, const CameraModel& cam,
                          const WindowConfig& cfg, GlobalMapState& state, double commit_begin, double commit_end,
                          bool stationary) {
  if (stationary) {
    state.skipped_stationary += events.size();
    state.committed_through = commit_end;
    return;
  }
  const auto pts = warp_panoramic(events, grid, cam, cfg.pano, cfg.batch);
  const int w = cfg.pano.w, h = cfg.pano.h;
  for (std::size_t k = 0; k < events.size(); ++k) {
    ++state.committed;
    const auto& p = pts[k];
    if (!std::isfinite(p.u) || !std::isfinite(p.v)) {
      ++state.out_of_range;
      continue;
    }
    if (cfg.saturation_enabled) {
      long x = std::lround(std::floor(wrap_column(p.u, w) + 0.5)) % w;
      const long y = std::clamp(std::lround(p.v), 0L, static_cast<long>(h - 1));
      const std::size_t idx = static_cast<std::size_t>(y) * w + x;
      const double now = state.active_clock + (events[k].t - commit_begin);
      double& since = state.observed_since[idx];
      if (std::isnan(since)) since = now;
      if (now - since > cfg.saturation) {
        ++state.saturated;
        continue;
      }
    }
    vote(state.map, p);
  }
  state.active_clock += commit_end - commit_begin;
  state.committed_through = commit_end;
}

namespace detail {

inline std::span<const Event> events_between(std::span<const Event> ev, double a, double b, bool include_b) {
  const auto lo = std::lower_bound(ev.begin(), ev.end(), a, [](const Event& e, double t) { return e.t < t; });
  const auto hi = include_b ? std::upper_bound(lo, ev.end(), b, [](double t, const Event& e) { return t < e.t; })
                            : std::lower_bound(lo, ev.end(), b, [](const Event& e, double t) { return e.t < t; });
  return ev.subspan(static_cast<std::size_t>(lo - ev.begin()), static_cast<std::size_t>(hi - lo));
}

}  // namespace detail

/// Sliding-window refinement over the whole stream, initializing each new
/// segment from `source`.
inline SlamResult run_backend(std::span<const Event> stream, const Trajectory& source, const CameraModel& cam,
                              const WindowConfig& cfg) {
  cfg.validate();
  SlamResult res;
  res.state = GlobalMapState(cfg.pano);
  const std::vector<Event> events = downsample(stream, cfg.q);
  if (events.empty()) {
    res.grid = make_window_grid(0.0, 1.0 / cfg.control_hz, cfg);
    return res;
  }
  if (source.empty()) throw InputError("back-end: empty initial trajectory");
  const double t_start = events.front().t, t_end = events.back().t;
  if (!source.covers(t_start) || !source.covers(t_end))
    throw InputError("back-end: initial trajectory does not cover the event time range");
  ControlPoseGrid grid = make_window_grid(t_start, t_end, cfg);
  int initialized = -1, frozen = -1;
  std::vector<double> rates;
  res.state.committed_through = t_start;

  for (int m = 0;; ++m) {
    const double w_start = t_start + m * cfg.stride;
    const bool last = w_start + cfg.window >= t_end - 1e-12;
    const double w_end = std::min(w_start + cfg.window, t_end);
    const double commit_end = last ? t_end : w_start + cfg.stride;
    const auto win = detail::events_between(events, w_start, w_end, true);

    WindowReport rep;
    rep.index = m;
    rep.t_begin = w_start;
    rep.t_end = w_end;
    rep.n_events = win.size();

    const int last_ctrl = detail::last_control(grid, w_end);
    init_window(source, grid, initialized, last_ctrl, w_start, w_end);
    initialized = std::max(initialized, last_ctrl);

    const double span = std::max(w_end - w_start, 1e-9);
    const double rate = static_cast<double>(win.size()) / span;
    rep.stationary = win.empty() || (!rates.empty() && rate < cfg.stationary_fraction * detail::median(rates));
    if (!rep.stationary) {
      rates.push_back(rate);
      // control 0 stays at its initialization: it fixes the world frame, which
      // the first window (no global map yet) cannot observe
      const int first_var = std::max({frozen + 1, detail::first_control(grid, w_start), 1});
      const int n_var = last_ctrl - first_var + 1;
      rep.first_varying = first_var;
      rep.n_varying = std::max(0, n_var);
      if (n_var > 0) {
        const bool have_map = res.state.map.mass() > 0.0;
        WindowObjective obj(win, grid, first_var, n_var, cam, cfg, have_map ? &res.state.map : nullptr);
        rep.alpha = obj.alpha();
        rep.domain_pixels = obj.domain_size();
        Objective f = [&](const VecX& x, VecX* g) { return obj(x, g); };
        const VecX x0 = VecX::Zero(obj.dimension());
        try {
          const OptimReport r = maximize_cgfr(f, x0, cfg.optim);
          rep.value_before = r.trace.front();
          rep.value_after = r.value;
          rep.iterations = r.iterations;
          rep.reason = to_string(r.reason);
          for (int c = 0; c < n_var; ++c) rep.max_correction = std::max(rep.max_correction, r.x.segment<3>(3 * c).norm());
          grid = obj.apply(r.x);
        } catch (const NumericalError&) {
          // committed at the initialization values
          rep.failed = true;
          rep.reason = "numerical";
        }
      }
    }
    const auto commit = detail::events_between(events, w_start, commit_end, last);
    commit_window(commit, grid, cam, cfg, res.state, w_start, commit_end, rep.stationary);
    frozen = std::max(frozen, detail::last_control(grid, commit_end));
    res.windows.push_back(rep);
    if (last) break;
  }

  res.grid = grid;
  const double step = 1.0 / cfg.trace_rate;
  const auto n = static_cast<long>(std::floor((t_end - t_start) / step + 1e-9));
  for (long k = 0; k <= n; ++k) {
    const double t = t_start + k * step;
    res.trace.push_back({t, sample(grid, t)});
  }
  if (t_end - res.trace.back().t > 1e-9) res.trace.push_back({t_end, sample(grid, t_end)});
  return res;
}

/// Front-end poses extended to the stream ends with the nearest velocity.
inline Trajectory frontend_trajectory(std::span<const AngularVelocityEstimate> est, double t_first, double t_last) {
  std::vector<PoseSample> poses = integrate_omega(est);
  if (poses.empty()) return Trajectory({{t_first, Rotation{}}, {std::max(t_last, t_first + 1e-6), Rotation{}}});
  if (t_first < poses.front().t)
    poses.insert(poses.begin(), {t_first, poses.front().R * exp_so3(est.front().omega * (t_first - poses.front().t))});
  if (t_last > poses.back().t) poses.push_back({t_last, poses.back().R * exp_so3(est.back().omega * (t_last - poses.back().t))});
  if (poses.size() == 1) poses.push_back({poses.front().t + 1e-6, poses.front().R});
  return Trajectory(std::move(poses));
}

inline SlamResult run_slam(std::span<const Event> stream, const CameraModel& cam, const FrontendConfig& fcfg,
                           const WindowConfig& wcfg) {
  fcfg.validate();
  wcfg.validate();
  if (stream.empty()) return run_backend(stream, Trajectory{}, cam, wcfg);
  auto est = run_frontend(stream, cam, fcfg);
  const Trajectory source = frontend_trajectory(est, stream.front().t, stream.back().t);
  SlamResult res = run_backend(stream, source, cam, wcfg);
  res.frontend = std::move(est);
  return res;
}

inline SlamResult refine_offline(std::span<const Event> stream, const std::vector<PoseSample>& initial,
                                 const CameraModel& cam, const WindowConfig& cfg) {
  Trajectory source(initial);
  if (!stream.empty() && (source.empty() || !source.covers(stream.front().t) || !source.covers(stream.back().t)))
    throw InputError("refine: initial trajectory does not cover the event time range");
  return run_backend(stream, source, cam, cfg);
}

}  // namespace evrot
