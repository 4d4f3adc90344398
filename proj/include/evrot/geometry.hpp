#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <string>

#include "evrot/error.hpp"

namespace evrot {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Mat23 = Eigen::Matrix<double, 2, 3>;

inline constexpr double kPi = std::numbers::pi;

/// Skew-symmetric matrix with hat(a) * b == a.cross(b).
inline Mat3 hat(const Vec3& v) {
  Mat3 m;
  m << 0.0, -v.z(), v.y(), v.z(), 0.0, -v.x(), -v.y(), v.x(), 0.0;
  return m;
}

/// Element of SO(3). Stored as a unit quaternion; the matrix form is built on
/// demand. Products are renormalized once a composition chain exceeds 100.
class Rotation {
 public:
  Rotation() : q_(Eigen::Quaterniond::Identity()) {}

  static Rotation identity() { return {}; }

  static Rotation from_quaternion(const Eigen::Quaterniond& q) {
    Rotation r;
    r.q_ = q.normalized();
    return r;
  }

  static Rotation from_quaternion(double w, double x, double y, double z) {
    return from_quaternion(Eigen::Quaterniond(w, x, y, z));
  }

  /// Projects onto SO(3) through the quaternion of the matrix.
  static Rotation from_matrix(const Mat3& m) { return from_quaternion(Eigen::Quaterniond(m)); }

  Mat3 matrix() const { return q_.toRotationMatrix(); }
  const Eigen::Quaterniond& quaternion() const { return q_; }

  Rotation inverse() const {
    Rotation r;
    r.q_ = q_.conjugate();
    r.chain_ = chain_;
    return r;
  }

  Rotation operator*(const Rotation& o) const {
    Rotation r;
    r.q_ = q_ * o.q_;
    r.chain_ = chain_ + o.chain_ + 1;
    if (r.chain_ > 100) {
      r.q_.normalize();
      r.chain_ = 0;
    }
    return r;
  }

  Rotation& operator*=(const Rotation& o) { return *this = *this * o; }

  Vec3 operator*(const Vec3& v) const { return q_ * v; }

 private:
  Eigen::Quaterniond q_;
  int chain_ = 0;
};

/// Rodrigues exponential of an axis-angle vector (radians).
inline Rotation exp_so3(const Vec3& v) {
  const double theta2 = v.squaredNorm();
  const double theta = std::sqrt(theta2);
  double w = 0.0;
  double s = 0.0;  // sin(theta/2)/theta
  if (theta < 1e-5) {
    w = 1.0 - theta2 / 8.0;
    s = 0.5 - theta2 / 48.0;
  } else {
    w = std::cos(0.5 * theta);
    s = std::sin(0.5 * theta) / theta;
  }
  return Rotation::from_quaternion(Eigen::Quaterniond(w, s * v.x(), s * v.y(), s * v.z()));
}

/// Principal-branch logarithm. Throws DegenerateError near the cut locus
/// (trace(R) <= -1 + 1e-6), where the axis is ill defined.
inline Vec3 log_so3(const Rotation& r) {
  Eigen::Quaterniond q = r.quaternion();
  if (q.w() < 0.0) q.coeffs() = -q.coeffs();
  const double trace = 4.0 * q.w() * q.w() - 1.0;
  if (trace <= -1.0 + 1e-6) throw DegenerateError("log_so3: rotation angle at pi, re-grid control poses");
  const Vec3 xyz(q.x(), q.y(), q.z());
  const double n = xyz.norm();
  if (n < 1e-12) return (2.0 / q.w()) * xyz;
  const double theta = 2.0 * std::atan2(n, q.w());
  return (theta / n) * xyz;
}

/// Angle of a rotation in [0, pi]. Equal to arccos((trace - 1)/2), evaluated
/// as 2 atan2(|q_xyz|, |q_w|) which keeps full precision near zero.
inline double rotation_angle(const Rotation& r) {
  const auto& q = r.quaternion();
  return 2.0 * std::atan2(q.vec().norm(), std::abs(q.w()));
}

/// Right Jacobian of SO(3): exp(v + d) ~= exp(v) exp(Jr(v) d).
inline Mat3 right_jacobian(const Vec3& v) {
  const double t2 = v.squaredNorm();
  const Mat3 k = hat(v);
  if (t2 < 1e-10) return Mat3::Identity() - 0.5 * k + (1.0 / 6.0) * k * k;
  const double t = std::sqrt(t2);
  return Mat3::Identity() - (1.0 - std::cos(t)) / t2 * k + (t - std::sin(t)) / (t2 * t) * k * k;
}

/// Inverse of right_jacobian: log(exp(v) exp(d)) ~= v + Jr^{-1}(v) d.
inline Mat3 right_jacobian_inverse(const Vec3& v) {
  const double t2 = v.squaredNorm();
  const Mat3 k = hat(v);
  if (t2 < 1e-10) return Mat3::Identity() + 0.5 * k + (1.0 / 12.0) * k * k;
  const double t = std::sqrt(t2);
  const double c = 1.0 / t2 - (1.0 + std::cos(t)) / (2.0 * t * std::sin(t));
  return Mat3::Identity() + 0.5 * k + c * k * k;
}

/// log(exp(-d) exp(v)) ~= v - Jl^{-1}(v) d, with Jl^{-1}(v) = Jr^{-1}(-v).
inline Mat3 left_jacobian_inverse(const Vec3& v) { return right_jacobian_inverse(-v); }

/// Pinhole intrinsics with optional plumb-bob distortion (k1, k2, p1, p2, k3).
struct CameraModel {
  double fx = 1.0, fy = 1.0, cx = 0.0, cy = 0.0;
  int width = 1, height = 1;
  double k1 = 0.0, k2 = 0.0, p1 = 0.0, p2 = 0.0, k3 = 0.0;

  bool has_distortion() const { return k1 != 0.0 || k2 != 0.0 || p1 != 0.0 || p2 != 0.0 || k3 != 0.0; }

  void validate() const {
    if (!(fx > 0.0) || !(fy > 0.0)) throw InputError("camera: fx and fy must be positive");
    if (width < 1 || height < 1) throw InputError("camera: width and height must be >= 1");
  }

  bool in_bounds(double x, double y) const { return x >= 0.0 && y >= 0.0 && x < width && y < height; }

  /// Removes lens distortion from a raw pixel by fixed-point iteration on the
  /// normalized coordinates; returns the undistorted pixel.
  Vec2 undistort(double x, double y) const {
    if (!has_distortion()) return {x, y};
    const double xd = (x - cx) / fx;
    const double yd = (y - cy) / fy;
    double xu = xd, yu = yd;
    for (int it = 0; it < 20; ++it) {
      const double r2 = xu * xu + yu * yu;
      const double radial = 1.0 + r2 * (k1 + r2 * (k2 + r2 * k3));
      const double dx = 2.0 * p1 * xu * yu + p2 * (r2 + 2.0 * xu * xu);
      const double dy = p1 * (r2 + 2.0 * yu * yu) + 2.0 * p2 * xu * yu;
      xu = (xd - dx) / radial;
      yu = (yd - dy) / radial;
    }
    return {fx * xu + cx, fy * yu + cy};
  }
};

/// Parses a `key=value` calibration file (fx, fy, cx, cy, width, height and
/// optional k1, k2, k3, p1, p2). Blank lines and `#` comments are ignored.
inline CameraModel read_calibration(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open calibration file: " + path);
  CameraModel cam;
  bool seen[6] = {};
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError(path, lineno, "expected key=value");
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    const std::string key = trim(line.substr(0, eq));
    const std::string val = trim(line.substr(eq + 1));
    double v = 0.0;
    try {
      std::size_t used = 0;
      v = std::stod(val, &used);
      if (used != val.size()) throw std::invalid_argument(val);
    } catch (const std::exception&) {
      throw ParseError(path, lineno, "bad number for '" + key + "'");
    }
    if (key == "fx") cam.fx = v, seen[0] = true;
    else if (key == "fy") cam.fy = v, seen[1] = true;
    else if (key == "cx") cam.cx = v, seen[2] = true;
    else if (key == "cy") cam.cy = v, seen[3] = true;
    else if (key == "width") cam.width = static_cast<int>(v), seen[4] = true;
    else if (key == "height") cam.height = static_cast<int>(v), seen[5] = true;
    else if (key == "k1") cam.k1 = v;
    else if (key == "k2") cam.k2 = v;
    else if (key == "k3") cam.k3 = v;
    else if (key == "p1") cam.p1 = v;
    else if (key == "p2") cam.p2 = v;
    else throw ParseError(path, lineno, "unknown calibration key '" + key + "'");
  }
  for (bool s : seen)
    if (!s) throw InputError("calibration file " + path + " lacks one of fx, fy, cx, cy, width, height");
  cam.validate();
  return cam;
}

inline void write_calibration(const std::string& path, const CameraModel& cam) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write calibration file: " + path);
  out.precision(17);
  out << "fx=" << cam.fx << "\nfy=" << cam.fy << "\ncx=" << cam.cx << "\ncy=" << cam.cy << "\nwidth=" << cam.width
      << "\nheight=" << cam.height << '\n';
  if (cam.has_distortion())
    out << "k1=" << cam.k1 << "\nk2=" << cam.k2 << "\np1=" << cam.p1 << "\np2=" << cam.p2 << "\nk3=" << cam.k3 << '\n';
}

/// Equirectangular map size; width is twice the height.
struct PanoramaGeometry {
  int w = 1024;
  int h = 512;

  void validate() const {
    if (w < 2 || w != 2 * h) throw InputError("panorama: need w = 2h and w >= 2");
  }
};

struct MapPoint {
  double px = 0.0;
  double py = 0.0;
};

/// Bearing ((x - cx)/fx, (y - cy)/fy, 1) of an undistorted pixel.
inline Vec3 back_project(double x, double y, const CameraModel& cam) {
  if (!cam.in_bounds(x, y)) throw InputError("back_project: pixel outside sensor");
  return {(x - cam.cx) / cam.fx, (y - cam.cy) / cam.fy, 1.0};
}

/// Wraps an azimuth coordinate into [0, w).
inline double wrap_column(double px, int w) {
  double r = std::fmod(px, static_cast<double>(w));
  if (r < 0.0) r += w;
  if (r >= w) r = 0.0;  // fmod of a tiny negative can round up to w
  return r;
}

/// Equirectangular projection of a direction. Azimuth is atan2(X, Z)
/// (atan2(0, 0) = 0), wrapped into [0, w); elevation row clamped to [0, h].
inline MapPoint project_equirect(const Vec3& X, const PanoramaGeometry& pano) {
  const double r = X.norm();
  if (!(r > 0.0)) throw InputError("project_equirect: zero-norm direction");
  const double az = (X.x() == 0.0 && X.z() == 0.0) ? 0.0 : std::atan2(X.x(), X.z());
  const double el = std::asin(std::clamp(X.y() / r, -1.0, 1.0));
  const double w = pano.w, h = pano.h;
  MapPoint p;
  p.px = wrap_column(0.5 * w + w / (2.0 * kPi) * az, pano.w);
  p.py = std::clamp(0.5 * h + h / kPi * el, 0.0, h);
  return p;
}

/// d(px, py)/dX of project_equirect including the map scale factors.
/// Undefined (returns zeros) on the polar axis.
inline Mat23 project_equirect_jacobian(const Vec3& X, const PanoramaGeometry& pano) {
  const double x = X.x(), y = X.y(), z = X.z();
  const double rho2 = x * x + z * z;
  Mat23 J = Mat23::Zero();
  if (rho2 <= 0.0) return J;
  const double rho = std::sqrt(rho2);
  const double r2 = rho2 + y * y;
  const double sa = pano.w / (2.0 * kPi) / rho2;
  J(0, 0) = sa * z;
  J(0, 2) = -sa * x;
  const double se = pano.h / kPi / (rho * r2);
  J(1, 0) = -se * x * y;
  J(1, 1) = se * rho2;
  J(1, 2) = -se * z * y;
  return J;
}

/// Determinant of the Jacobian of the sensor-to-panorama warp
/// x -> K^{-1}(x,1) -> R X -> equirectangular, taken with respect to
/// calibrated image coordinates and without the map scale factors. Closed form
/// 1 / (s2 r'^3) with s2 = sqrt(1 - (Y'/r')^2) and r' = |R X|; strictly
/// positive away from the poles, so warped events cannot collapse.
inline double warp_jacobian_det(double x, double y, const Rotation& R, const CameraModel& cam) {
  const Vec3 Xr = R * back_project(x, y, cam);
  const double r = Xr.norm();
  const double s2 = std::sqrt(std::max(0.0, 1.0 - (Xr.y() / r) * (Xr.y() / r)));
  if (s2 <= 1e-12) throw DegenerateError("warp_jacobian_det: rotated bearing at a panorama pole");
  return 1.0 / (s2 * r * r * r);
}

}  // namespace evrot
