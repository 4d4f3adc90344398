#include <gtest/gtest.h>

#include <filesystem>

#include "evrot/trajectory.hpp"
#include "test_util.hpp"

using namespace evrot;
using evrot::testing::angle_between;
using evrot::testing::random_rotation;
using evrot::testing::random_vec;

namespace {

ControlPoseGrid make_grid(SplineOrder order, int n, double t0, double dt) {
  ControlPoseGrid g;
  g.order = order;
  g.t0 = t0;
  g.dt = dt;
  g.poses.assign(n, Rotation{});
  return g;
}

// Smooth random grid: a random walk with small increments.
ControlPoseGrid random_grid(std::mt19937_64& rng, SplineOrder order, int n, double step = 0.3) {
  ControlPoseGrid g = make_grid(order, n, 0.7, 0.05);
  g.poses[0] = random_rotation(rng);
  for (int i = 1; i < n; ++i) g.poses[i] = g.poses[i - 1] * exp_so3(random_vec(rng, step));
  return g;
}

}  // namespace

TEST(Trajectory, ValidTimeRange) {
  auto r = valid_time_range(make_grid(SplineOrder::Linear, 5, 0.0, 0.05));
  EXPECT_DOUBLE_EQ(r.first, 0.0);
  EXPECT_DOUBLE_EQ(r.second, 0.2);
  r = valid_time_range(make_grid(SplineOrder::Cubic, 6, 0.0, 0.05));
  EXPECT_DOUBLE_EQ(r.first, 0.05);
  EXPECT_DOUBLE_EQ(r.second, 0.2);
  r = valid_time_range(make_grid(SplineOrder::Cubic, 4, 0.0, 0.05));
  EXPECT_DOUBLE_EQ(r.first, 0.05);
  EXPECT_DOUBLE_EQ(r.second, 0.1);
}

TEST(Trajectory, GridValidation) {
  EXPECT_THROW(make_grid(SplineOrder::Cubic, 3, 0, 0.1).validate(), InputError);
  EXPECT_THROW(make_grid(SplineOrder::Linear, 1, 0, 0.1).validate(), InputError);
  EXPECT_THROW(make_grid(SplineOrder::Linear, 2, 0, 0.0).validate(), InputError);
  EXPECT_NO_THROW(make_grid(SplineOrder::Linear, 2, 0, 0.1).validate());
}

TEST(Trajectory, CumulativeBasisValues) {
  const auto b0 = cumulative_basis(0.0);
  EXPECT_DOUBLE_EQ(b0[0], 1.0);
  EXPECT_DOUBLE_EQ(b0[1], 5.0 / 6.0);
  EXPECT_DOUBLE_EQ(b0[2], 1.0 / 6.0);
  EXPECT_DOUBLE_EQ(b0[3], 0.0);
  const auto b1 = cumulative_basis(1.0 - 1e-15);
  EXPECT_NEAR(b1[1], 1.0, 1e-14);
  EXPECT_NEAR(b1[2], 5.0 / 6.0, 1e-14);
  EXPECT_NEAR(b1[3], 1.0 / 6.0, 1e-14);
  const auto bh = cumulative_basis(0.5);
  EXPECT_NEAR(bh[1], 0.9791666666666666, 1e-15);
  EXPECT_NEAR(bh[2], 0.5, 1e-15);
  EXPECT_NEAR(bh[3], 0.0208333333333333, 1e-15);
  for (double u = 0.0; u < 1.0; u += 0.01) {
    const auto b = cumulative_basis(u);
    EXPECT_NEAR(b[1] + b[2] + b[3], 1.0 + u, 1e-15);
  }
}

TEST(Trajectory, LinearKnotsAndMidpoint) {
  std::mt19937_64 rng(1);
  const ControlPoseGrid g = random_grid(rng, SplineOrder::Linear, 6);
  for (int i = 0; i < g.size(); ++i)
    EXPECT_LE(angle_between(sample_linear(g, g.knot_time(i)), g.poses[i]), 1e-12);

  ControlPoseGrid h = make_grid(SplineOrder::Linear, 2, 0.0, 1.0);
  h.poses[1] = exp_so3(Vec3(0, 0, 0.8));
  EXPECT_LE(angle_between(sample_linear(h, 0.5), exp_so3(Vec3(0, 0, 0.4))), 1e-15);
}

TEST(Trajectory, LinearReproducesGeodesic) {
  const Vec3 omega(0.3, -0.5, 0.9);
  ControlPoseGrid g = make_grid(SplineOrder::Linear, 11, 0.0, 0.1);
  for (int i = 0; i < g.size(); ++i) g.poses[i] = exp_so3(g.knot_time(i) * omega);
  for (double t = 0.0; t <= 1.0; t += 0.0137) EXPECT_LE(angle_between(sample_linear(g, t), exp_so3(t * omega)), 1e-10);
}

TEST(Trajectory, OutOfRangeIsAnError) {
  const ControlPoseGrid g = make_grid(SplineOrder::Cubic, 5, 0.0, 0.1);
  EXPECT_THROW(sample_cubic(g, 0.05), RangeError);
  EXPECT_THROW(sample_cubic(g, 0.31), RangeError);
  EXPECT_NO_THROW(sample_cubic(g, 0.3));
  EXPECT_THROW(sample_linear(g, 0.2), InputError);
}

TEST(Trajectory, CubicConstantGridIsConstant) {
  const Rotation R0 = exp_so3(Vec3(0.2, 0.4, -1.0));
  ControlPoseGrid g = make_grid(SplineOrder::Cubic, 6, 0.0, 0.1);
  for (auto& p : g.poses) p = R0;
  for (double t = 0.1; t <= 0.4; t += 0.01) EXPECT_LE(angle_between(sample_cubic(g, t), R0), 1e-15);
}

TEST(Trajectory, CubicSameAxisIncrementsReproduceConstantVelocity) {
  ControlPoseGrid g = make_grid(SplineOrder::Cubic, 8, 0.0, 0.05);
  for (int i = 0; i < g.size(); ++i) g.poses[i] = exp_so3(Vec3(0, 0, 0.1 * i));
  for (int seg = 1; seg <= 5; ++seg)
    for (double u = 0.0; u < 1.0; u += 0.05) {
      const double t = g.knot_time(seg) + u * g.dt;
      const Rotation expected = exp_so3(Vec3(0, 0, (1.0 + u) * 0.1 + (seg - 1) * 0.1));
      EXPECT_LE(angle_between(sample_cubic(g, t), expected), 1e-12);
    }
}

TEST(Trajectory, CubicKnotContinuity) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    const ControlPoseGrid g = random_grid(rng, SplineOrder::Cubic, 8);
    for (int seg = 1; seg < g.size() - 3; ++seg) {
      const Rotation end = sample_segment(g, seg, 1.0 - 1e-15);
      const Rotation start = sample_segment(g, seg + 1, 0.0);
      EXPECT_LE(angle_between(end, start), 1e-10);
    }
  }
}

TEST(Trajectory, CubicIsTwiceDifferentiableAcrossKnots) {
  std::mt19937_64 rng(4);
  const ControlPoseGrid g = random_grid(rng, SplineOrder::Cubic, 8, 0.4);
  const double tk = g.knot_time(4);
  auto rate = [&](double a, double b) { return Vec3(log_so3(sample_cubic(g, a).inverse() * sample_cubic(g, b)) / (b - a)); };
  double prev_jump = 0.0, prev_acc_jump = 0.0;
  for (double h : {1e-3, 5e-4, 2.5e-4}) {
    const double jump = (rate(tk - h, tk) - rate(tk, tk + h)).norm();
    const Vec3 acc_left = (rate(tk - h, tk) - rate(tk - 2 * h, tk - h)) / h;
    const Vec3 acc_right = (rate(tk + h, tk + 2 * h) - rate(tk, tk + h)) / h;
    const double acc_jump = (acc_left - acc_right).norm();
    if (prev_jump > 0.0) {
      // first-order convergence of one-sided differences: halves with h
      EXPECT_LT(jump, 0.6 * prev_jump);
      EXPECT_LT(acc_jump, 0.6 * prev_acc_jump);
    }
    prev_jump = jump;
    prev_acc_jump = acc_jump;
  }
  // Contrast: the linear spline has a velocity jump that does not shrink.
  ControlPoseGrid lin = g;
  lin.order = SplineOrder::Linear;
  auto lrate = [&](double a, double b) { return Vec3(log_so3(sample_linear(lin, a).inverse() * sample_linear(lin, b)) / (b - a)); };
  EXPECT_GT((lrate(tk - 1e-4, tk) - lrate(tk, tk + 1e-4)).norm(), 0.1);
}

TEST(Trajectory, SampledPosesAreRotations) {
  std::mt19937_64 rng(6);
  for (auto order : {SplineOrder::Linear, SplineOrder::Cubic}) {
    const ControlPoseGrid g = random_grid(rng, order, 10, 0.8);
    const auto [lo, hi] = valid_time_range(g);
    for (double t = lo; t <= hi; t += 0.003) {
      const Mat3 M = sample(g, t).matrix();
      EXPECT_LE((M.transpose() * M - Mat3::Identity()).cwiseAbs().maxCoeff(), 1e-9);
      EXPECT_NEAR(M.determinant(), 1.0, 1e-9);
    }
  }
}

TEST(Trajectory, LocalityOfControlPoses) {
  std::mt19937_64 rng(8);
  for (auto order : {SplineOrder::Linear, SplineOrder::Cubic}) {
    const ControlPoseGrid g = random_grid(rng, order, 12);
    const int j = 6;
    ControlPoseGrid p = g;
    p.poses[j] = p.poses[j] * exp_so3(Vec3(0.05, -0.02, 0.03));
    // support of control j in time
    const double lo = order == SplineOrder::Linear ? g.knot_time(j - 1) : g.knot_time(j - 2);
    const double hi = order == SplineOrder::Linear ? g.knot_time(j + 1) : g.knot_time(j + 2);
    const auto [a, b] = valid_time_range(g);
    for (double t = a; t <= b; t += 0.0031) {
      const Mat3 d = sample(g, t).matrix() - sample(p, t).matrix();
      if (t < lo - 1e-9 || t > hi + 1e-9) {
        EXPECT_EQ(d.cwiseAbs().maxCoeff(), 0.0) << "t=" << t;
      }
    }
  }
}

TEST(Trajectory, PointJacobianStructure) {
  std::mt19937_64 rng(9);
  const ControlPoseGrid lin = random_grid(rng, SplineOrder::Linear, 8);
  const PoseJacobian Jl = point_jacobian(lin, lin.knot_time(2) + 0.01, Vec3(0.1, 0.2, 1.0));
  EXPECT_EQ(Jl.count, 2);
  EXPECT_EQ(Jl.first, 2);
  EXPECT_EQ(Jl.block(5), Mat3::Zero());
  EXPECT_EQ(Jl.block(0), Mat3::Zero());
  const ControlPoseGrid cub = random_grid(rng, SplineOrder::Cubic, 8);
  const PoseJacobian Jc = point_jacobian(cub, cub.knot_time(3) + 0.02, Vec3(0.1, 0.2, 1.0));
  EXPECT_EQ(Jc.count, 4);
  EXPECT_EQ(Jc.first, 2);
  for (int k = 0; k < 4; ++k) EXPECT_GT(Jc.blocks[k].norm(), 0.0);
}

TEST(Trajectory, PointJacobianMatchesFiniteDifferences) {
  std::mt19937_64 rng(10);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const auto order = trial % 2 ? SplineOrder::Cubic : SplineOrder::Linear;
    const ControlPoseGrid g = random_grid(rng, order, 7, 0.5);
    const auto [lo, hi] = valid_time_range(g);
    const double t = lo + (hi - lo) * unit(rng);
    const Vec3 X = random_vec(rng, 1.0) + Vec3(0, 0, 1);
    const PoseJacobian J = point_jacobian(g, t, X);
    for (int c = J.first; c < J.first + J.count; ++c) {
      Mat3 fd;
      for (int a = 0; a < 3; ++a) {
        const double h = 1e-6;
        ControlPoseGrid gp = g, gm = g;
        Vec3 e = Vec3::Zero();
        e[a] = h;
        gp.poses[c] = g.poses[c] * exp_so3(e);
        gm.poses[c] = g.poses[c] * exp_so3(-e);
        fd.col(a) = (sample(gp, t) * X - sample(gm, t) * X) / (2 * h);
      }
      const Mat3 an = J.block(c);
      worst = std::max(worst, (fd - an).cwiseAbs().maxCoeff() / std::max(1.0, an.cwiseAbs().maxCoeff()));
    }
  }
  EXPECT_LE(worst, 1e-5);
}

TEST(Trajectory, FitLinearKnotsIsExact) {
  std::mt19937_64 rng(12);
  const ControlPoseGrid g = random_grid(rng, SplineOrder::Linear, 6, 0.2);
  std::vector<PoseSample> samples;
  for (int i = 0; i < g.size(); ++i) samples.push_back({g.knot_time(i), g.poses[i]});
  const ControlPoseGrid f = fit_spline(samples, g.t0, g.dt, SplineOrder::Linear);
  ASSERT_EQ(f.size(), g.size());
  for (int i = 0; i < g.size(); ++i) EXPECT_LE(angle_between(f.poses[i], g.poses[i]), 1e-9);
}

TEST(Trajectory, FitCubicConstantVelocity) {
  const Vec3 omega(0, 0, 1.3);
  std::vector<PoseSample> samples;
  for (double t = 0.05; t <= 0.5 + 1e-12; t += 0.01) samples.push_back({t, exp_so3(t * omega)});
  const ControlPoseGrid f = fit_spline(samples, 0.0, 0.05, SplineOrder::Cubic);
  for (const auto& s : samples) EXPECT_LE(angle_between(sample_cubic(f, s.t), s.R), 1e-8);
}

TEST(Trajectory, FitRecoversSampledCubicSpline) {
  std::mt19937_64 rng(13);
  for (int trial = 0; trial < 5; ++trial) {
    const ControlPoseGrid g = random_grid(rng, SplineOrder::Cubic, 10, 0.15);
    const auto [lo, hi] = valid_time_range(g);
    std::vector<PoseSample> samples;
    for (double t = lo; t <= hi + 1e-12; t += g.dt / 10) samples.push_back({t, sample_cubic(g, t)});
    const ControlPoseGrid f = fit_spline(samples, g.t0, g.dt, SplineOrder::Cubic);
    ASSERT_EQ(f.size(), g.size());
    for (int i = 0; i < g.size(); ++i) EXPECT_LE(angle_between(f.poses[i], g.poses[i]), 1e-6);
  }
}

TEST(Trajectory, FitRejectsDegenerateInput) {
  std::vector<PoseSample> samples = {{0.0, Rotation{}}, {0.01, Rotation{}}};
  EXPECT_THROW(fit_spline(samples, 0.0, 0.05, SplineOrder::Cubic), FitError);
  // Enough samples but none in the support of the last control pose.
  std::vector<PoseSample> clustered;
  for (int k = 0; k < 10; ++k) clustered.push_back({0.05 + 0.001 * k, Rotation{}});
  ControlPoseGrid g = make_grid(SplineOrder::Linear, 5, 0.0, 0.05);
  EXPECT_THROW(fit_spline_partial(clustered, g, 0), FitError);
}

TEST(Trajectory, PartialFitKeepsFixedControls) {
  std::mt19937_64 rng(14);
  const ControlPoseGrid g = random_grid(rng, SplineOrder::Cubic, 10, 0.15);
  std::vector<PoseSample> samples;
  const auto [lo, hi] = valid_time_range(g);
  for (double t = lo; t <= hi + 1e-12; t += 0.005) samples.push_back({t, sample_cubic(g, t)});
  ControlPoseGrid start = g;
  for (int i = 5; i < start.size(); ++i) start.poses[i] = Rotation{};
  const ControlPoseGrid f = fit_spline_partial(samples, start, 5);
  for (int i = 0; i < 5; ++i) EXPECT_EQ(f.poses[i].quaternion().coeffs(), g.poses[i].quaternion().coeffs());
  for (int i = 5; i < g.size(); ++i) EXPECT_LE(angle_between(f.poses[i], g.poses[i]), 1e-6);
}

TEST(Trajectory, DiscreteTrajectoryInterpolation) {
  std::vector<PoseSample> s = {{0.0, Rotation{}}, {1.0, exp_so3(Vec3(0, 0.6, 0))}};
  const Trajectory tr(s);
  EXPECT_LE(angle_between(tr.at(0.5), exp_so3(Vec3(0, 0.3, 0))), 1e-15);
  EXPECT_THROW(tr.at(1.5), RangeError);
  EXPECT_THROW(Trajectory({{0.0, Rotation{}}, {0.0, Rotation{}}}), InputError);
}

TEST(Trajectory, CsvRoundTrip) {
  std::mt19937_64 rng(15);
  const ControlPoseGrid g = random_grid(rng, SplineOrder::Cubic, 7);
  const auto dir = std::filesystem::temp_directory_path();
  const std::string gpath = (dir / "evrot_grid.csv").string();
  write_grid_csv(gpath, g);
  const ControlPoseGrid back = read_grid_csv(gpath);
  EXPECT_EQ(back.order, SplineOrder::Cubic);
  EXPECT_DOUBLE_EQ(back.t0, g.t0);
  EXPECT_DOUBLE_EQ(back.dt, g.dt);
  for (int i = 0; i < g.size(); ++i) EXPECT_LE(angle_between(back.poses[i], g.poses[i]), 1e-15);

  const std::string tpath = (dir / "evrot_traj.csv").string();
  const auto dense = sample_grid(g, 100.0);
  write_trajectory_csv(tpath, dense);
  const auto read = read_trajectory_csv(tpath);
  ASSERT_EQ(read.size(), dense.size());
  for (std::size_t k = 0; k < read.size(); ++k) {
    EXPECT_NEAR(read[k].t, dense[k].t, 1e-9);
    EXPECT_LE(angle_between(read[k].R, dense[k].R), 1e-15);
  }
  std::filesystem::remove(gpath);
  std::filesystem::remove(tpath);
}
