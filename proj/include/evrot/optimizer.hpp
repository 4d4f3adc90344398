#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "evrot/error.hpp"

namespace evrot {

using VecX = Eigen::VectorXd;

/// f(x) and, when grad is non-null, its gradient (resized by the callee).
using Objective = std::function<double(const VecX& x, VecX* grad)>;

enum class StopReason { Gradient, Step, MaxIters };

inline const char* to_string(StopReason r) {
  switch (r) {
    case StopReason::Gradient: return "gradient";
    case StopReason::Step: return "step";
    default: return "max-iters";
  }
}

struct OptimOptions {
  int max_iters = 50;
  double grad_tol = 1e-6;      // on the infinity norm
  double step_tol = 1e-10;     // on the infinity norm of an accepted step
  double armijo = 1e-4;
  double backtrack = 0.5;
  int restart = 0;             // 0: restart every n iterations
  double initial_step = 1e-2;  // infinity-norm length of the first trial step
  int max_backtracks = 60;

  void validate() const {
    if (max_iters < 0 || !(grad_tol > 0) || !(step_tol > 0) || !(armijo > 0 && armijo < 1) || !(backtrack > 0 && backtrack < 1) ||
        restart < 0 || !(initial_step > 0) || max_backtracks < 1)
      throw InputError("invalid optimizer options");
  }
};

struct OptimReport {
  VecX x;
  double value = 0.0;
  int iterations = 0;
  int evaluations = 0;
  StopReason reason = StopReason::MaxIters;
  std::vector<double> trace;  // value after each accepted iterate, starting at x0
};

/// Thrown when the objective or its gradient becomes non-finite. Carries the
/// last finite iterate.
struct OptimizationFailure : NumericalError {
  OptimizationFailure(const std::string& w, OptimReport last) : NumericalError(w), report(std::move(last)) {}
  OptimReport report;
};

/// Maximizes obj by Fletcher-Reeves nonlinear conjugate gradient with a
/// backtracking Armijo line search.
inline OptimReport maximize_cgfr(const Objective& obj, const VecX& x0, const OptimOptions& opt = {}) {
  opt.validate();
  const Eigen::Index n = x0.size();
  const int restart = opt.restart > 0 ? opt.restart : std::max<int>(1, static_cast<int>(n));
  OptimReport rep;
  rep.x = x0;
  VecX g;
  rep.value = obj(rep.x, &g);
  rep.evaluations = 1;
  if (!std::isfinite(rep.value) || g.size() != n || !g.allFinite())
    throw OptimizationFailure("objective not finite at the initial point", rep);
  rep.trace.push_back(rep.value);

  VecX d = g;
  double step_len = opt.initial_step;  // infinity-norm of the trial step
  int since_restart = 0;
  rep.reason = StopReason::MaxIters;
  for (int it = 0; it < opt.max_iters; ++it) {
    if (n == 0 || g.lpNorm<Eigen::Infinity>() <= opt.grad_tol) {
      rep.reason = StopReason::Gradient;
      break;
    }
    double slope = g.dot(d);
    if (!(slope > 0.0)) {
      d = g;
      slope = g.squaredNorm();
      since_restart = 0;
    }
    const double dmax = d.lpNorm<Eigen::Infinity>();
    double alpha = step_len / dmax;
    bool accepted = false;
    VecX x_new, g_new;
    double f_new = 0.0;
    for (int k = 0; k < opt.max_backtracks; ++k) {
      if (alpha * dmax < opt.step_tol) break;
      x_new = rep.x + alpha * d;
      f_new = obj(x_new, &g_new);
      ++rep.evaluations;
      if (!std::isfinite(f_new) || g_new.size() != n || !g_new.allFinite())
        throw OptimizationFailure("objective or gradient not finite during line search", rep);
      if (f_new >= rep.value + opt.armijo * alpha * slope) {
        accepted = true;
        break;
      }
      alpha *= opt.backtrack;
    }
    if (!accepted) {
      rep.reason = StopReason::Step;
      break;
    }
    const double taken = alpha * dmax;
    const double beta = ++since_restart >= restart ? 0.0 : g_new.squaredNorm() / g.squaredNorm();
    if (beta == 0.0) since_restart = 0;
    d = g_new + beta * d;
    rep.x = std::move(x_new);
    rep.value = f_new;
    g = std::move(g_new);
    rep.trace.push_back(rep.value);
    rep.iterations = it + 1;
    // next trial: twice the accepted step length
    step_len = 2.0 * taken;
    if (taken < opt.step_tol) {
      rep.reason = StopReason::Step;
      break;
    }
  }
  if (rep.reason == StopReason::MaxIters && g.lpNorm<Eigen::Infinity>() <= opt.grad_tol) rep.reason = StopReason::Gradient;
  return rep;
}

/// Central differences per coordinate; returns max |g_fd - g| / max(1, |g_fd|).
inline double check_gradient(const Objective& obj, const VecX& x, double h) {
  if (!(h > 0.0)) throw InputError("check_gradient: h must be positive");
  VecX g;
  obj(x, &g);
  double worst = 0.0;
  VecX xp = x, xm = x;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    xp[i] = x[i] + h;
    xm[i] = x[i] - h;
    const double fd = (obj(xp, nullptr) - obj(xm, nullptr)) / (2 * h);
    xp[i] = xm[i] = x[i];
    worst = std::max(worst, std::abs(fd - g[i]) / std::max(1.0, std::abs(fd)));
  }
  return worst;
}

}  // namespace evrot
