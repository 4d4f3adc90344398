#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <random>

#include "evrot/metrics.hpp"
#include "evrot/simulator.hpp"
#include "test_util.hpp"

using namespace evrot;
using evrot::testing::angle_between;
using evrot::testing::davis_camera;
using evrot::testing::random_rotation;

namespace {

constexpr double kDeg = kPi / 180.0;

Trajectory sinusoid_gt(double duration, double rate = 200.0) {
  TrajectoryParams p;
  p.duration = duration;
  const auto g = make_test_trajectory(TrajectoryKind::Sinusoid, p);
  std::vector<PoseSample> s;
  for (int k = 0; k <= static_cast<int>(std::lround(duration * rate)); ++k) s.push_back({k / rate, sample(g, k / rate)});
  return Trajectory(std::move(s));
}

Trajectory map_samples(const Trajectory& t, const std::function<Rotation(const PoseSample&, std::size_t)>& f) {
  std::vector<PoseSample> s = t.samples();
  for (std::size_t i = 0; i < s.size(); ++i) s[i].R = f(s[i], i);
  return Trajectory(std::move(s));
}

}  // namespace

TEST(Metrics, IdenticalTrajectoriesHaveZeroError) {
  const auto gt = sinusoid_gt(3.0);
  const auto abs = absolute_rmse(gt, gt, 50.0, 0.0);
  EXPECT_EQ(abs.rms, 0.0);
  EXPECT_EQ(abs.count, 151u);
  EXPECT_EQ(relative_rmse(gt, gt).rms, 0.0);
}

TEST(Metrics, LeftOffsetIsRemoved) {
  std::mt19937_64 rng(5);
  const auto gt = sinusoid_gt(3.0);
  const Rotation C = random_rotation(rng);
  const auto est = map_samples(gt, [&](const PoseSample& p, std::size_t) { return C * p.R; });
  const auto aligned = align_at_t0(est, gt, 0.7);
  EXPECT_LE(angle_between(aligned.at(0.7), gt.at(0.7)), 1e-14);
  for (double t = 0.0; t <= 3.0; t += 0.05) EXPECT_LE(angle_between(aligned.at(t), gt.at(t)), 1e-12);
  EXPECT_LE(absolute_rmse(est, gt, 50.0, 0.7).rms, 1e-9);
  EXPECT_LE(relative_rmse(est, gt).rms, 1e-9);
  EXPECT_THROW(align_at_t0(est, gt, 5.0), InputError);
}

TEST(Metrics, AlternatingOneDegreePerturbation) {
  const auto gt = sinusoid_gt(4.0, 50.0);
  // +-1 deg about z on alternating samples; sample 0 carries zero so alignment is a no-op
  const auto est = map_samples(gt, [](const PoseSample& p, std::size_t i) {
    const double d = i == 0 ? 0.0 : (i % 2 ? 1.0 : -1.0) * kDeg;
    return p.R * exp_so3(Vec3(0, 0, d));
  });
  const auto r = absolute_rmse(est, gt, 50.0, 0.0);
  EXPECT_NEAR(r.rms, 1.0, 0.01);
  double s = 0.0;
  for (double a : r.angles) s += a * a;
  EXPECT_NEAR(r.rms, std::sqrt(s / r.count), 1e-12);
}

TEST(Metrics, ConstantExtraRotationAfterT0) {
  const auto gt = sinusoid_gt(4.0);
  const auto est = map_samples(gt, [](const PoseSample& p, std::size_t) {
    return p.t > 0.0 ? Rotation(p.R * exp_so3(Vec3(2.0 * kDeg, 0, 0))) : p.R;
  });
  // only the first query sees zero error
  const auto r = absolute_rmse(est, gt, 50.0, 0.0);
  EXPECT_NEAR(r.rms, 2.0 * std::sqrt((r.count - 1.0) / r.count), 1e-3);
}

TEST(Metrics, LinearDriftGivesConstantRelativeError) {
  const auto gt = sinusoid_gt(5.0);
  // world-frame drift of 0.5 deg/s: the pair error is gt(t+1)^T exp(0.5 deg z) gt(t+1)
  const auto est =
      map_samples(gt, [](const PoseSample& p, std::size_t) { return exp_so3(Vec3(0, 0, 0.5 * kDeg * p.t)) * p.R; });
  const auto r = relative_rmse(est, gt, 1.0, 0.1);
  EXPECT_EQ(r.count, 41u);
  for (double a : r.angles) EXPECT_NEAR(a, 0.5, 1e-9);
  EXPECT_NEAR(r.rms, 0.5, 1e-9);
  // absolute error grows linearly from t0
  const auto abs = absolute_rmse(est, gt, 50.0, 0.0);
  EXPECT_NEAR(abs.angles.back(), 2.5, 1e-9);
}

TEST(Metrics, ErrorCases) {
  const auto gt = sinusoid_gt(0.5);
  EXPECT_THROW(relative_rmse(gt, gt, 1.0), InputError);
  const Trajectory late({{10.0, Rotation{}}, {11.0, Rotation{}}});
  EXPECT_THROW(absolute_rmse(late, gt, 50.0, 0.0), InputError);
  EXPECT_THROW(absolute_rmse(Trajectory{}, gt, 50.0, 0.0), InputError);
}

TEST(Metrics, SmoothingKeepsGeodesicsAndRemovesSpikes) {
  const Vec3 w(0.3, -0.5, 1.1);
  std::vector<PoseSample> s;
  for (int k = 0; k <= 400; ++k) s.push_back({k / 200.0, exp_so3(k / 200.0 * w)});
  const Trajectory geo(s);
  const auto sm = smooth_gt(geo);
  for (std::size_t i = 0; i < s.size(); ++i) EXPECT_LE(angle_between(sm.samples()[i].R, s[i].R), 1e-6) << i;

  s[200].R = s[200].R * exp_so3(Vec3(0, 0, 2.0 * kDeg));
  const auto spiky = smooth_gt(Trajectory(s));
  const double before = 2.0;
  const double after = angle_between(spiky.samples()[200].R, geo.samples()[200].R) / kDeg;
  // 11 samples within +-25 ms, Gaussian weights with sigma 12.5 ms
  double wsum = 0.0;
  for (int j = -5; j <= 5; ++j) wsum += std::exp(-0.5 * std::pow(j / 200.0 / 0.0125, 2));
  EXPECT_NEAR(after, before / wsum, 1e-3);
  EXPECT_LT(after, 0.5 * before);
}

TEST(Metrics, SharperMapHasLowerEventAreaAndHigherGradient) {
  TrajectoryParams p;
  p.duration = 0.3;
  p.omega = Vec3(0.2, 1.0, 0.1);
  const auto g = make_test_trajectory(TrajectoryKind::ConstantOmega, p);
  SimConfig c;
  c.cam = davis_camera();
  c.t_end = 0.3;
  const auto ev = generate_events(make_checkerboard(1024, 512, 16, 8, 0.2f, 0.8f), g, c);
  const PanoramaGeometry pano{1024, 512};
  const auto sharp = proxy_reprojection(ev, g, c.cam, pano);
  // 10 % too slow: events smear over the map
  const auto blurred = proxy_reprojection_with(
      ev, [&](double t) { return exp_so3(0.9 * t * p.omega); }, c.cam, pano);
  EXPECT_LT(sharp.ea_percent, blurred.ea_percent);
  EXPECT_GT(sharp.gm, blurred.gm);
  EXPECT_GT(sharp.ea_percent, 0.0);
  EXPECT_LT(sharp.ea_percent, 100.0);
}
