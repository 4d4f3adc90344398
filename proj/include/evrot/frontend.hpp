#pragma once

#include <cmath>
#include <cstdio>
#include <span>
#include <string>
#include <vector>

#include "evrot/error.hpp"
#include "evrot/events.hpp"
#include "evrot/geometry.hpp"
#include "evrot/iwe.hpp"
#include "evrot/optimizer.hpp"
#include "evrot/parallel.hpp"
#include "evrot/trajectory.hpp"

namespace evrot {

struct AngularVelocityEstimate {
  double t_ref = 0.0;
  Vec3 omega = Vec3::Zero();
  double value = 0.0;  // IWE variance at omega
  bool converged = false;
  bool stationary = false;
  int iterations = 0;
};

struct FrontendConfig {
  std::size_t k = 20000;  // events per slice
  double rate = 100.0;    // output frequency f (Hz)
  int q = 1;              // keep one event out of q
  std::size_t batch = 50; // events sharing one warp rotation
  int margin = 16;         // px of canvas around the sensor so that warped events are not cut off
  double cold_start_blur = 1.0;  // px; a zero initial guess is first refined on a blurred IWE (0 disables)
  int cold_start_iters = 15;     // cap for the blurred stage; it only has to reach the right basin
  bool warm_start = true;
  OptimOptions optim = [] {
    OptimOptions o;
    o.max_iters = 30;
    o.initial_step = 0.05;  // rad/s
    return o;
  }();

  void validate() const {
    if (k < 2) throw InputError("frontend: K must be >= 2");
    if (!(rate > 0.0)) throw InputError("frontend: rate must be positive");
    if (q < 1) throw InputError("frontend: Q must be >= 1");
    if (batch < 1) throw InputError("frontend: batch must be >= 1");
    if (margin < 0) throw InputError("frontend: margin must be >= 0");
    if (cold_start_blur < 0.0) throw InputError("frontend: cold-start blur must be >= 0");
    if (cold_start_iters < 0) throw InputError("frontend: cold-start iterations must be >= 0");
    optim.validate();
  }
};

/// Variance of the local IWE of one slice as a function of angular velocity,
/// with its analytic gradient. Events are rotated to t_ref by exp((t - t_ref) w)
/// and projected with the pinhole model.
class SliceObjective {
 public:
  SliceObjective(const EventSlice& slice, const CameraModel& cam, std::size_t batch, int margin = 0)
      : cam_(cam), t_ref_(slice.t_ref), batch_(std::max<std::size_t>(1, batch)), margin_(margin),
        image_(cam.width + 2 * margin, cam.height + 2 * margin, IweFrame::Local) {
    const auto ev = slice.events;
    X_.resize(ev.size());
    for (std::size_t i = 0; i < ev.size(); ++i) X_[i] = back_project(ev[i].x, ev[i].y, cam);
    const std::size_t nb = chunk_count(ev.size(), batch_);
    s_.resize(nb);
    for (std::size_t b = 0; b < nb; ++b) {
      const std::size_t i0 = b * batch_, i1 = std::min(ev.size(), i0 + batch_);
      s_[b] = 0.5 * (ev[i0].t + ev[i1 - 1].t) - t_ref_;
    }
    pts_.resize(ev.size());
    rows_.resize(ev.size());
    st_.resize(ev.size());
    mark_.assign(image_.pixel_count(), 0);
  }

  /// Maximize the variance of the Gaussian-blurred IWE instead (sigma in px).
  void set_blur(double sigma) {
    sigma_ = sigma;
    kernel_.clear();
    if (!(sigma > 0.0)) return;
    const int r = std::max(1, static_cast<int>(std::ceil(3 * sigma)));
    double ks = 0.0;
    for (int i = -r; i <= r; ++i) kernel_.push_back(std::exp(-0.5 * i * i / (sigma * sigma)));
    for (double k : kernel_) ks += k;
    for (double& k : kernel_) k /= ks;
  }

  double operator()(const VecX& w, VecX* grad) {
    const Vec3 omega = w.head<3>();
    const std::size_t n = X_.size(), nb = s_.size();
    std::vector<Mat3> R(nb);
    for (std::size_t b = 0; b < nb; ++b) R[b] = exp_so3(s_[b] * omega).matrix();
    const double fx = cam_.fx, fy = cam_.fy;
    parallel_chunks(n, 4096, [&](std::size_t, std::size_t b0, std::size_t b1) {
      for (std::size_t i = b0; i < b1; ++i) {
        const Vec3 Xp = R[i / batch_] * X_[i];
        if (Xp.z() <= 1e-9) {
          pts_[i] = {-1e9, -1e9};
          rows_[i].setZero();
          continue;
        }
        const double iz = 1.0 / Xp.z();
        pts_[i] = {fx * Xp.x() * iz + cam_.cx + margin_, fy * Xp.y() * iz + cam_.cy + margin_};
        rows_[i] << fx * iz, 0.0, -fx * Xp.x() * iz * iz, 0.0, fy * iz, -fy * Xp.y() * iz * iz;
      }
    });
    // sparse accumulation: only pixels touched by this warp are reset and summed
    auto& img = image_.values();
    for (std::size_t p : touched_) img[p] = 0.0, mark_[p] = 0;
    touched_.clear();
    double mass = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      st_[i] = bilinear_stencil(pts_[i].u, pts_[i].v, image_.width(), image_.height(), false);
      for (int k = 0; k < 4; ++k) {
        const auto idx = st_[i].idx[k];
        if (idx < 0) continue;
        if (!mark_[idx]) mark_[idx] = 1, touched_.push_back(static_cast<std::size_t>(idx));
        img[idx] += st_[i].w[k];
        mass += st_[i].w[k];
      }
    }
    const double N = static_cast<double>(img.size());
    double mean = 0.0, var = 0.0;
    const std::vector<double>* I = &img;
    if (sigma_ > 0.0) {
      blur(img, blurred_);
      I = &blurred_;
      for (double v : blurred_) mean += v;
      mean /= N;
      for (double v : blurred_) var += (v - mean) * (v - mean);
      var /= N;
    } else {
      mean = mass / N;
      double sq = 0.0;
      for (std::size_t p : touched_) sq += img[p] * img[p];
      var = sq / N - mean * mean;
    }
    if (!grad) return var;

    // dVar/dI_p = 2 (I_p - mean) / N; the zero-padded blur is self-adjoint
    if (sigma_ > 0.0) {
      centered_.resize(img.size());
      for (std::size_t p = 0; p < img.size(); ++p) centered_[p] = 2.0 * ((*I)[p] - mean) / N;
      blur(centered_, blurred_);
      centered_.swap(blurred_);
    }
    const auto dvar = [&](std::int64_t p) { return sigma_ > 0.0 ? centered_[p] : 2.0 * (img[p] - mean) / N; };
    std::vector<Vec3> e(nb, Vec3::Zero());
    parallel_chunks(nb, 16, [&](std::size_t, std::size_t b0, std::size_t b1) {
      for (std::size_t b = b0; b < b1; ++b) {
        const std::size_t i0 = b * batch_, i1 = std::min(n, i0 + batch_);
        Vec3 acc = Vec3::Zero();
        for (std::size_t i = i0; i < i1; ++i) {
          const BilinearStencil& st = st_[i];
          double gu = 0.0, gv = 0.0;
          for (int k = 0; k < 4; ++k)
            if (st.idx[k] >= 0) {
              const double c = dvar(st.idx[k]);
              gu += c * st.dw_du[k];
              gv += c * st.dw_dv[k];
            }
          if (gu == 0.0 && gv == 0.0) continue;
          const Vec3 row = gu * rows_[i].row(0).transpose() + gv * rows_[i].row(1).transpose();
          // row * d(R X)/d(delta) with d(R X)/d(delta) = -R [X]x
          acc += X_[i].cross(R[b].transpose() * row);
        }
        e[b] = acc;
      }
    });
    Vec3 g = Vec3::Zero();
    for (std::size_t b = 0; b < nb; ++b) g += (s_[b] * right_jacobian(s_[b] * omega)).transpose() * e[b];
    *grad = g;
    return var;
  }

  const Iwe& image() const { return image_; }

 private:
  // separable, zero-padded (hence self-adjoint) Gaussian
  void blur(const std::vector<double>& in, std::vector<double>& out) {
    const int w = image_.width(), h = image_.height(), r = static_cast<int>(kernel_.size() / 2);
    tmp_.assign(in.size(), 0.0);
    out.assign(in.size(), 0.0);
    for (int y = 0; y < h; ++y) {
      const double* src = in.data() + static_cast<std::size_t>(y) * w;
      double* dst = tmp_.data() + static_cast<std::size_t>(y) * w;
      for (int x = 0; x < w; ++x) {
        const double v = src[x];
        if (v == 0.0) continue;
        for (int i = std::max(-r, -x); i <= std::min(r, w - 1 - x); ++i) dst[x + i] += kernel_[i + r] * v;
      }
    }
    for (int y = 0; y < h; ++y)
      for (int i = std::max(-r, -y); i <= std::min(r, h - 1 - y); ++i) {
        const double k = kernel_[i + r];
        const double* src = tmp_.data() + static_cast<std::size_t>(y) * w;
        double* dst = out.data() + static_cast<std::size_t>(y + i) * w;
        for (int x = 0; x < w; ++x) dst[x] += k * src[x];
      }
  }

  CameraModel cam_;
  double t_ref_;
  std::size_t batch_;
  int margin_;
  double sigma_ = 0.0;
  std::vector<double> kernel_, blurred_, tmp_;
  std::vector<BilinearStencil> st_;
  std::vector<std::size_t> touched_;
  std::vector<char> mark_;
  std::vector<Vec3> X_;
  std::vector<double> s_;
  std::vector<WarpedPoint> pts_;
  std::vector<Mat23> rows_;
  std::vector<double> centered_;
  Iwe image_;
};

inline AngularVelocityEstimate estimate_omega(const EventSlice& slice, const CameraModel& cam, const Vec3& omega_init,
                                              const FrontendConfig& cfg = {}) {
  AngularVelocityEstimate est;
  est.t_ref = slice.t_ref;
  if (slice.stationary || slice.events.size() < 2) {
    est.stationary = true;
    est.converged = true;
    return est;
  }
  SliceObjective obj(slice, cam, cfg.batch, cfg.margin);
  Objective f = [&](const VecX& x, VecX* g) { return obj(x, g); };
  try {
    VecX x0 = omega_init;
    // At w = 0 every event sits on an integer pixel and takes a single bilinear
    // vote, a spurious local maximum of the raw variance. Blurring removes it.
    if (omega_init.isZero(0.0) && cfg.cold_start_blur > 0.0) {
      OptimOptions coarse = cfg.optim;
      coarse.max_iters = cfg.cold_start_iters;
      obj.set_blur(cfg.cold_start_blur);
      x0 = maximize_cgfr(f, x0, coarse).x;
      obj.set_blur(0.0);
    }
    const OptimReport rep = maximize_cgfr(f, x0, cfg.optim);
    est.omega = rep.x.head<3>();
    est.value = rep.value;
    est.iterations = rep.iterations;
    est.converged = true;
  } catch (const NumericalError&) {
    est.omega = omega_init;
    est.converged = false;
  }
  return est;
}

inline std::vector<AngularVelocityEstimate> run_frontend(std::span<const Event> stream, const CameraModel& cam,
                                                         const FrontendConfig& cfg = {}) {
  cfg.validate();
  std::vector<AngularVelocityEstimate> out;
  if (stream.empty()) return out;
  const std::vector<Event> events = downsample(stream, cfg.q);
  const auto slices = slice_hybrid(events, cfg.k, cfg.rate);
  out.reserve(slices.size());
  Vec3 warm = Vec3::Zero();
  for (const auto& s : slices) {
    out.push_back(estimate_omega(s, cam, cfg.warm_start ? warm : Vec3::Zero(), cfg));
    warm = out.back().omega;
  }
  return out;
}

/// R(t_0) = I, R_{m+1} = R_m exp(w_m (t_{m+1} - t_m)).
inline std::vector<PoseSample> integrate_omega(std::span<const AngularVelocityEstimate> est) {
  std::vector<PoseSample> out;
  out.reserve(est.size());
  Rotation R;
  for (std::size_t m = 0; m < est.size(); ++m) {
    if (m > 0) R = R * exp_so3(est[m - 1].omega * (est[m].t_ref - est[m - 1].t_ref));
    out.push_back({est[m].t_ref, R});
  }
  return out;
}

/// Integrates bias-corrected gyro rates at their native rate.
inline std::vector<PoseSample> imu_dead_reckoning(std::span<const GyroSample> gyro, const Vec3& bias = Vec3::Zero()) {
  std::vector<PoseSample> out;
  out.reserve(gyro.size());
  Rotation R;
  for (std::size_t k = 0; k < gyro.size(); ++k) {
    if (k > 0) R = R * exp_so3((gyro[k - 1].omega - bias) * (gyro[k].t - gyro[k - 1].t));
    out.push_back({gyro[k].t, R});
  }
  return out;
}

inline void write_omega_csv(const std::string& path, std::span<const AngularVelocityEstimate> est,
                            const std::vector<std::string>& comment = {}) {
  std::FILE* f = std::fopen(path.c_str(), "w");
  if (!f) throw InputError("cannot write '" + path + "'");
  for (const auto& c : comment) std::fprintf(f, "# %s\n", c.c_str());
  std::fprintf(f, "t,wx,wy,wz\n");
  for (const auto& e : est) std::fprintf(f, "%.9f,%.17g,%.17g,%.17g\n", e.t_ref, e.omega.x(), e.omega.y(), e.omega.z());
  std::fclose(f);
}

}  // namespace evrot
