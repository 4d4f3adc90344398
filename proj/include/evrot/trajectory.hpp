#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "evrot/error.hpp"
#include "evrot/geometry.hpp"

namespace evrot {

enum class SplineOrder { Linear, Cubic };

inline const char* to_string(SplineOrder o) { return o == SplineOrder::Linear ? "linear" : "cubic"; }

inline SplineOrder parse_spline_order(const std::string& s) {
  if (s == "linear") return SplineOrder::Linear;
  if (s == "cubic") return SplineOrder::Cubic;
  throw InputError("unknown spline order '" + s + "' (expected linear|cubic)");
}

/// Number of control poses that influence one segment.
inline int support_size(SplineOrder o) { return o == SplineOrder::Linear ? 2 : 4; }

struct PoseSample {
  double t = 0.0;
  Rotation R;
};

/// Equispaced control poses of a continuous-time SO(3) trajectory. Control
/// i sits at t0 + i*dt.
struct ControlPoseGrid {
  double t0 = 0.0;
  double dt = 0.05;
  std::vector<Rotation> poses;
  SplineOrder order = SplineOrder::Cubic;

  int size() const { return static_cast<int>(poses.size()); }
  double knot_time(int i) const { return t0 + i * dt; }

  void validate() const {
    if (!(dt > 0.0)) throw InputError("control grid: dt must be positive");
    const int need = support_size(order);
    if (size() < need)
      throw InputError(std::string("control grid: ") + to_string(order) + " spline needs at least " +
                       std::to_string(need) + " control poses");
    for (int i = 0; i + 1 < size(); ++i)
      if (rotation_angle(poses[i].inverse() * poses[i + 1]) >= kPi - 1e-6)
        throw DegenerateError("control grid: consecutive control poses differ by pi");
  }
};

/// [t_min, t_max] on which the spline is defined.
inline std::pair<double, double> valid_time_range(const ControlPoseGrid& g) {
  const int n = g.size();
  if (g.order == SplineOrder::Linear) return {g.t0, g.t0 + (n - 1) * g.dt};
  return {g.t0 + g.dt, g.t0 + (n - 2) * g.dt};
}

/// Cumulative cubic B-spline basis (1/6) M (1, u, u^2, u^3)^T. Entry 0 is 1.
inline Eigen::Vector4d cumulative_basis(double u) {
  const double u2 = u * u, u3 = u2 * u;
  return {1.0, (5.0 + 3.0 * u - 3.0 * u2 + u3) / 6.0, (1.0 + 3.0 * u + 3.0 * u2 - 2.0 * u3) / 6.0, u3 / 6.0};
}

/// Segment containing t and the normalized time within it. For linear
/// splines segment i spans knots i..i+1; for cubic ones knots i..i+1 with
/// support i-1..i+2. t_max maps to the last segment with u = 1.
struct SegmentLocation {
  int segment = 0;
  double u = 0.0;
};

inline SegmentLocation locate(const ControlPoseGrid& g, double t) {
  const auto [lo, hi] = valid_time_range(g);
  const double tol = 1e-9 * std::max(1.0, std::abs(hi));
  if (!(t >= lo - tol && t <= hi + tol)) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "time %.9f outside spline range [%.9f, %.9f]", t, lo, hi);
    throw RangeError(buf);
  }
  t = std::clamp(t, lo, hi);
  const double s = (t - g.t0) / g.dt;
  int i = static_cast<int>(std::floor(s));
  const int first = g.order == SplineOrder::Linear ? 0 : 1;
  const int last = g.order == SplineOrder::Linear ? g.size() - 2 : g.size() - 3;
  i = std::clamp(i, first, last);
  return {i, std::clamp(s - i, 0.0, 1.0)};
}

/// First control pose index of a segment's support.
inline int support_begin(SplineOrder o, int segment) { return o == SplineOrder::Linear ? segment : segment - 1; }

inline Rotation sample_segment(const ControlPoseGrid& g, int i, double u) {
  const auto& P = g.poses;
  if (g.order == SplineOrder::Linear) return P[i] * exp_so3(u * log_so3(P[i].inverse() * P[i + 1]));
  const Eigen::Vector4d b = cumulative_basis(u);
  Rotation R = P[i - 1];
  for (int j = 1; j <= 3; ++j) R *= exp_so3(b[j] * log_so3(P[i + j - 2].inverse() * P[i + j - 1]));
  return R;
}

/// Lie-group linear interpolation between neighboring control poses.
inline Rotation sample_linear(const ControlPoseGrid& g, double t) {
  if (g.order != SplineOrder::Linear) throw InputError("sample_linear on a cubic grid");
  const auto loc = locate(g, t);
  return sample_segment(g, loc.segment, loc.u);
}

/// Cumulative cubic B-spline R_{i-1} prod_j exp(B_j(u) Omega_{i+j-1}).
inline Rotation sample_cubic(const ControlPoseGrid& g, double t) {
  if (g.order != SplineOrder::Cubic) throw InputError("sample_cubic on a linear grid");
  const auto loc = locate(g, t);
  return sample_segment(g, loc.segment, loc.u);
}

inline Rotation sample(const ControlPoseGrid& g, double t) {
  const auto loc = locate(g, t);
  return sample_segment(g, loc.segment, loc.u);
}

/// Pose at t together with, for each influencing control pose, the 3x3 map
/// from a right perturbation R_c <- R_c exp(d) to the induced right
/// perturbation of R(t).
struct PoseDerivative {
  Rotation R;
  int first = 0;  // index of the first influencing control pose
  int count = 0;  // 2 (linear) or 4 (cubic)
  std::array<Mat3, 4> d_pose{};
};

inline PoseDerivative sample_with_derivative(const ControlPoseGrid& g, double t) {
  const auto loc = locate(g, t);
  const auto& P = g.poses;
  const int i = loc.segment;
  const double u = loc.u;
  PoseDerivative out;
  if (g.order == SplineOrder::Linear) {
    const Vec3 omega = log_so3(P[i].inverse() * P[i + 1]);
    const Rotation A = exp_so3(u * omega);
    const Mat3 D = u * right_jacobian(u * omega);
    out.R = P[i] * A;
    out.first = i;
    out.count = 2;
    out.d_pose[0] = A.matrix().transpose() - D * left_jacobian_inverse(omega);
    out.d_pose[1] = D * right_jacobian_inverse(omega);
    return out;
  }
  const Eigen::Vector4d b = cumulative_basis(u);
  std::array<Vec3, 4> omega;  // omega[j] = log(R_{i+j-2}^T R_{i+j-1}), j = 1..3
  std::array<Rotation, 4> A;  // A[j] = exp(b_j omega_j)
  for (int j = 1; j <= 3; ++j) {
    omega[j] = log_so3(P[i + j - 2].inverse() * P[i + j - 1]);
    A[j] = exp_so3(b[j] * omega[j]);
  }
  // tail[j] = A_{j+1} ... A_3 (tail[3] = I), tail[0] = A_1 A_2 A_3
  std::array<Mat3, 4> tail;
  tail[3] = Mat3::Identity();
  tail[2] = A[3].matrix();
  tail[1] = (A[2] * A[3]).matrix();
  tail[0] = (A[1] * A[2] * A[3]).matrix();
  std::array<Mat3, 4> D;
  for (int j = 1; j <= 3; ++j) D[j] = tail[j].transpose() * (b[j] * right_jacobian(b[j] * omega[j]));
  out.R = P[i - 1] * A[1] * A[2] * A[3];
  out.first = i - 1;
  out.count = 4;
  out.d_pose[0] = tail[0].transpose() - D[1] * left_jacobian_inverse(omega[1]);
  for (int c = 1; c <= 3; ++c) {
    Mat3 J = D[c] * right_jacobian_inverse(omega[c]);
    if (c < 3) J -= D[c + 1] * left_jacobian_inverse(omega[c + 1]);
    out.d_pose[c] = J;
  }
  return out;
}

/// Sparse d(R(t) X)/d(control perturbations): one 3x3 block per influencing
/// control pose, implicitly zero for all others.
struct PoseJacobian {
  int first = 0;
  int count = 0;
  std::array<Mat3, 4> blocks{};

  Mat3 block(int control) const {
    const int k = control - first;
    return (k >= 0 && k < count) ? blocks[k] : Mat3::Zero();
  }
};

inline PoseJacobian point_jacobian(const ControlPoseGrid& g, double t, const Vec3& X) {
  const PoseDerivative d = sample_with_derivative(g, t);
  const Mat3 lead = -d.R.matrix() * hat(X);
  PoseJacobian J;
  J.first = d.first;
  J.count = d.count;
  for (int k = 0; k < d.count; ++k) J.blocks[k] = lead * d.d_pose[k];
  return J;
}

namespace detail {

// Tangent-space basis weights of the (linearized) spline at t for controls
// first..first+count-1. For the cumulative cubic these are the ordinary
// B-spline weights obtained by differencing the cumulative basis.
inline std::pair<int, std::array<double, 4>> linear_weights(const ControlPoseGrid& g, double t) {
  const auto loc = locate(g, t);
  std::array<double, 4> w{};
  if (g.order == SplineOrder::Linear) {
    w[0] = 1.0 - loc.u;
    w[1] = loc.u;
    return {loc.segment, w};
  }
  const Eigen::Vector4d b = cumulative_basis(loc.u);
  w[0] = 1.0 - b[1];
  w[1] = b[1] - b[2];
  w[2] = b[2] - b[3];
  w[3] = b[3];
  return {loc.segment - 1, w};
}

}  // namespace detail

/// Fits control poses first_free..n-1 of `grid` to pose samples while the
/// poses before first_free stay fixed. Lift: samples become tangent vectors
/// relative to the first sample's pose. Solve: linear least squares on the
/// spline basis (normal equations, Cholesky). Retract: the offset is
/// re-applied. A few Gauss-Newton passes on the exact rotation residuals
/// then remove the linearization error. Throws FitError when a free control
/// has no sample in its support.
inline ControlPoseGrid fit_spline_partial(std::span<const PoseSample> samples, ControlPoseGrid grid, int first_free,
                                          int gauss_newton_iters = 10) {
  const int n = grid.size();
  const int nf = n - first_free;
  if (nf <= 0) return grid;
  if (samples.empty()) throw FitError("fit_spline: no samples");
  if (grid.dt <= 0.0) throw InputError("fit_spline: dt must be positive");

  const Rotation offset = samples.front().R;
  const Rotation offset_inv = offset.inverse();
  // only fixed controls inside the samples' support are lifted; older ones
  // may be more than pi away from the offset
  std::vector<Vec3> fixed_phi(first_free);
  int lowest = first_free;
  for (const auto& s : samples) lowest = std::min(lowest, std::max(0, detail::linear_weights(grid, s.t).first));
  for (int i = lowest; i < first_free; ++i) fixed_phi[i] = log_so3(offset_inv * grid.poses[i]);

  Eigen::MatrixXd AtA = Eigen::MatrixXd::Zero(nf, nf);
  Eigen::MatrixXd Atb = Eigen::MatrixXd::Zero(nf, 3);
  for (const auto& s : samples) {
    const auto [first, w] = detail::linear_weights(grid, s.t);
    Vec3 rhs = log_so3(offset_inv * s.R);
    const int count = support_size(grid.order);
    for (int a = 0; a < count; ++a)
      if (first + a < first_free) rhs -= w[a] * fixed_phi[first + a];
    for (int a = 0; a < count; ++a) {
      const int ia = first + a - first_free;
      if (ia < 0) continue;
      Atb.row(ia) += w[a] * rhs.transpose();
      for (int b = 0; b < count; ++b) {
        const int ib = first + b - first_free;
        if (ib >= 0) AtA(ia, ib) += w[a] * w[b];
      }
    }
  }
  const double scale = std::max(1.0, AtA.diagonal().maxCoeff());
  for (int i = 0; i < nf; ++i)
    if (AtA(i, i) <= 1e-12 * scale) throw FitError("fit_spline: control pose " + std::to_string(first_free + i) +
                                                   " has no samples in its support");
  Eigen::LDLT<Eigen::MatrixXd> ldlt(AtA);
  if (ldlt.info() != Eigen::Success || !ldlt.isPositive() ||
      ldlt.vectorD().minCoeff() <= 1e-12 * ldlt.vectorD().maxCoeff())
    throw FitError("fit_spline: rank-deficient system");
  const Eigen::MatrixXd phi = ldlt.solve(Atb);
  for (int i = 0; i < nf; ++i) grid.poses[first_free + i] = offset * exp_so3(phi.row(i).transpose());

  // Gauss-Newton on r_k = log(R_k^T R(t_k)).
  for (int it = 0; it < gauss_newton_iters; ++it) {
    Eigen::MatrixXd H = Eigen::MatrixXd::Zero(3 * nf, 3 * nf);
    Eigen::VectorXd gvec = Eigen::VectorXd::Zero(3 * nf);
    for (const auto& s : samples) {
      const PoseDerivative d = sample_with_derivative(grid, s.t);
      const Vec3 r = log_so3(s.R.inverse() * d.R);
      const Mat3 Jr_inv = right_jacobian_inverse(r);
      std::array<Mat3, 4> J;
      for (int a = 0; a < d.count; ++a) J[a] = Jr_inv * d.d_pose[a];
      for (int a = 0; a < d.count; ++a) {
        const int ia = d.first + a - first_free;
        if (ia < 0) continue;
        gvec.segment<3>(3 * ia) += J[a].transpose() * r;
        for (int b = 0; b < d.count; ++b) {
          const int ib = d.first + b - first_free;
          if (ib >= 0) H.block<3, 3>(3 * ia, 3 * ib) += J[a].transpose() * J[b];
        }
      }
    }
    Eigen::LDLT<Eigen::MatrixXd> solver(H);
    if (solver.info() != Eigen::Success) throw FitError("fit_spline: Gauss-Newton system failed");
    const Eigen::VectorXd step = -solver.solve(gvec);
    if (!step.allFinite()) throw FitError("fit_spline: non-finite Gauss-Newton step");
    for (int i = 0; i < nf; ++i) grid.poses[first_free + i] *= exp_so3(step.segment<3>(3 * i));
    if (step.lpNorm<Eigen::Infinity>() < 1e-13) break;
  }
  return grid;
}

/// Least-squares spline through time-sorted pose samples on the grid
/// (t0, dt, order). The number of control poses is the smallest that covers
/// the last sample.
inline ControlPoseGrid fit_spline(std::span<const PoseSample> samples, double t0, double dt, SplineOrder order) {
  if (samples.empty()) throw FitError("fit_spline: no samples");
  if (!(dt > 0.0)) throw InputError("fit_spline: dt must be positive");
  const double span = samples.back().t - t0;
  int n = static_cast<int>(std::ceil(span / dt - 1e-9)) + (order == SplineOrder::Linear ? 1 : 2);
  n = std::max(n, support_size(order));
  if (static_cast<int>(samples.size()) < n) throw FitError("fit_spline: fewer samples than control poses");
  ControlPoseGrid grid;
  grid.t0 = t0;
  grid.dt = dt;
  grid.order = order;
  grid.poses.assign(n, Rotation{});
  const auto [lo, hi] = valid_time_range(grid);
  if (samples.front().t < lo - 1e-9 || samples.back().t > hi + 1e-9)
    throw FitError("fit_spline: samples fall outside the grid's valid range");
  return fit_spline_partial(samples, std::move(grid), 0);
}

/// Time-sorted pose samples with Lie-group linear interpolation in between.
class Trajectory {
 public:
  Trajectory() = default;
  explicit Trajectory(std::vector<PoseSample> samples) : samples_(std::move(samples)) {
    for (std::size_t i = 1; i < samples_.size(); ++i)
      if (!(samples_[i].t > samples_[i - 1].t)) throw InputError("trajectory timestamps must strictly increase");
  }

  const std::vector<PoseSample>& samples() const { return samples_; }
  bool empty() const { return samples_.empty(); }
  std::size_t size() const { return samples_.size(); }
  double t_begin() const { return samples_.front().t; }
  double t_end() const { return samples_.back().t; }

  bool covers(double t) const { return !samples_.empty() && t >= t_begin() - 1e-12 && t <= t_end() + 1e-12; }

  Rotation at(double t) const {
    if (!covers(t)) {
      char buf[160];
      std::snprintf(buf, sizeof buf, "time %.9f outside trajectory range", t);
      throw RangeError(buf);
    }
    auto it = std::upper_bound(samples_.begin(), samples_.end(), t,
                               [](double v, const PoseSample& s) { return v < s.t; });
    if (it == samples_.begin()) return samples_.front().R;
    if (it == samples_.end()) return samples_.back().R;
    const auto& a = *(it - 1);
    const auto& b = *it;
    const double u = (t - a.t) / (b.t - a.t);
    return a.R * exp_so3(u * log_so3(a.R.inverse() * b.R));
  }

 private:
  std::vector<PoseSample> samples_;
};

/// Dense samples of a grid at `rate` Hz over its valid range (both ends
/// included).
inline std::vector<PoseSample> sample_grid(const ControlPoseGrid& g, double rate) {
  const auto [lo, hi] = valid_time_range(g);
  std::vector<PoseSample> out;
  const auto n = static_cast<long>(std::floor((hi - lo) * rate + 1e-9));
  out.reserve(n + 2);
  for (long k = 0; k <= n; ++k) {
    const double t = lo + k / rate;
    out.push_back({t, sample(g, t)});
  }
  if (hi - out.back().t > 1e-9) out.push_back({hi, sample(g, hi)});
  return out;
}

// ---- CSV I/O: `t,qw,qx,qy,qz`, Hamilton quaternion, scalar first -----------

namespace detail {

inline void write_pose_line(std::FILE* f, double t, const Rotation& R) {
  Eigen::Quaterniond q = R.quaternion();
  if (q.w() < 0.0) q.coeffs() = -q.coeffs();
  std::fprintf(f, "%.9f,%.17g,%.17g,%.17g,%.17g\n", t, q.w(), q.x(), q.y(), q.z());
}

inline bool parse_pose_line(const std::string& line, PoseSample& out) {
  double t, w, x, y, z;
  char tail;
  if (std::sscanf(line.c_str(), " %lf , %lf , %lf , %lf , %lf %c", &t, &w, &x, &y, &z, &tail) != 5) return false;
  const double n = std::sqrt(w * w + x * x + y * y + z * z);
  if (!std::isfinite(t) || !(n > 0.0) || !std::isfinite(n)) return false;
  out.t = t;
  out.R = Rotation::from_quaternion(w, x, y, z);
  return true;
}

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};

}  // namespace detail

/// Writes dense pose samples. `comment` lines, if any, are emitted first with
/// a leading '#'.
inline void write_trajectory_csv(const std::string& path, std::span<const PoseSample> samples,
                                 const std::vector<std::string>& comment = {}) {
  std::unique_ptr<std::FILE, detail::FileCloser> f(std::fopen(path.c_str(), "w"));
  if (!f) throw InputError("cannot write trajectory file: " + path);
  for (const auto& c : comment) std::fprintf(f.get(), "# %s\n", c.c_str());
  for (const auto& s : samples) detail::write_pose_line(f.get(), s.t, s.R);
}

inline std::vector<PoseSample> read_trajectory_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open trajectory file: " + path);
  std::vector<PoseSample> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto b = line.find_first_not_of(" \t\r");
    if (b == std::string::npos || line[b] == '#') continue;
    if (line.compare(b, 1, "t") == 0) continue;  // column header
    PoseSample s;
    if (!detail::parse_pose_line(line, s)) throw ParseError(path, lineno, "expected t,qw,qx,qy,qz");
    if (!out.empty() && !(s.t > out.back().t)) throw ParseError(path, lineno, "timestamps must increase");
    out.push_back(s);
  }
  return out;
}

/// Control poses with a `# order=<o> t0=<s> dt=<s>` header; each line holds
/// the knot time and the control rotation.
inline void write_grid_csv(const std::string& path, const ControlPoseGrid& g,
                           const std::vector<std::string>& comment = {}) {
  std::unique_ptr<std::FILE, detail::FileCloser> f(std::fopen(path.c_str(), "w"));
  if (!f) throw InputError("cannot write control pose file: " + path);
  std::fprintf(f.get(), "# order=%s t0=%.17g dt=%.17g\n", to_string(g.order), g.t0, g.dt);
  for (const auto& c : comment) std::fprintf(f.get(), "# %s\n", c.c_str());
  for (int i = 0; i < g.size(); ++i) detail::write_pose_line(f.get(), g.knot_time(i), g.poses[i]);
}

inline ControlPoseGrid read_grid_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open control pose file: " + path);
  ControlPoseGrid g;
  bool have_header = false;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto b = line.find_first_not_of(" \t\r");
    if (b == std::string::npos) continue;
    if (line[b] == '#') {
      char order[16] = {};
      double t0, dt;
      if (std::sscanf(line.c_str() + b, "# order=%15s t0=%lf dt=%lf", order, &t0, &dt) == 3) {
        g.order = parse_spline_order(order);
        g.t0 = t0;
        g.dt = dt;
        have_header = true;
      }
      continue;
    }
    PoseSample s;
    if (!detail::parse_pose_line(line, s)) throw ParseError(path, lineno, "expected t,qw,qx,qy,qz");
    g.poses.push_back(s.R);
  }
  if (!have_header) throw ParseError(path, 1, "missing '# order=... t0=... dt=...' header");
  g.validate();
  return g;
}

}  // namespace evrot
