#pragma once

#include <filesystem>
#include <random>
#include <string>

#include "evrot/geometry.hpp"

namespace evrot::testing {

inline Vec3 random_vec(std::mt19937_64& rng, double scale) {
  std::normal_distribution<double> n(0.0, 1.0);
  return Vec3(n(rng), n(rng), n(rng)) * scale;
}

inline Vec3 random_vec_with_norm(std::mt19937_64& rng, double norm) {
  Vec3 v = random_vec(rng, 1.0);
  return v.normalized() * norm;
}

inline Rotation random_rotation(std::mt19937_64& rng, double max_angle = 3.0) {
  std::uniform_real_distribution<double> u(0.0, max_angle);
  return exp_so3(random_vec_with_norm(rng, u(rng)));
}

inline CameraModel davis_camera() {
  CameraModel c;
  c.fx = c.fy = 200.0;
  c.cx = 120.0;
  c.cy = 90.0;
  c.width = 240;
  c.height = 180;
  return c;
}

inline std::string temp_path(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / "evrot_tests";
  std::filesystem::create_directories(dir);
  return (dir / name).string();
}

inline double angle_between(const Rotation& a, const Rotation& b) { return rotation_angle(a.inverse() * b); }

}  // namespace evrot::testing
