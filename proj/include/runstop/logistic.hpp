#pragma once

#include <cmath>
#include <vector>

#include <Eigen/Dense>

#include "runstop/common.hpp"

namespace runstop {

inline double logistic(double eta) {
  if (eta >= 0) return 1.0 / (1.0 + std::exp(-eta));
  const double e = std::exp(eta);
  return e / (1.0 + e);
}

inline double binomial_deviance(const Eigen::VectorXd& y, const Eigen::VectorXd& mu) {
  double dev = 0;
  for (Eigen::Index i = 0; i < y.size(); ++i) {
    const double m = std::clamp(mu[i], 1e-15, 1 - 1e-15);
    dev -= 2 * (y[i] * std::log(m) + (1 - y[i]) * std::log(1 - m));
  }
  return dev;
}

struct LogisticFit {
  Eigen::VectorXd beta;
  double deviance = 0;            // unpenalized
  double penalized_deviance = 0;  // deviance + beta' P beta
  int iterations = 0;
  std::vector<double> trace;
};

struct IrlsOptions {
  double tolerance = 1e-8;
  int max_iterations = 200;
};

// Penalized logistic regression by Newton/IRLS with step halving:
// minimizes deviance(beta) + beta' P beta. Throws ConvergenceError carrying
// the penalized-deviance trace when the tolerance is not met.
inline LogisticFit fit_logistic(const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                                const Eigen::MatrixXd& penalty, const IrlsOptions& opt = {},
                                const Eigen::VectorXd* start = nullptr) {
  const Eigen::Index p = X.cols();
  LogisticFit fit;
  fit.beta = start ? *start : Eigen::VectorXd::Zero(p);
  auto objective = [&](const Eigen::VectorXd& b, Eigen::VectorXd& mu) {
    const Eigen::VectorXd eta = X * b;
    mu.resize(eta.size());
    for (Eigen::Index i = 0; i < eta.size(); ++i) mu[i] = logistic(eta[i]);
    return binomial_deviance(y, mu) + b.dot(penalty * b);
  };
  Eigen::VectorXd mu;
  double obj = objective(fit.beta, mu);
  fit.trace.push_back(obj);
  for (int iter = 1; iter <= opt.max_iterations; ++iter) {
    Eigen::VectorXd w(mu.size());
    for (Eigen::Index i = 0; i < mu.size(); ++i) w[i] = std::max(mu[i] * (1 - mu[i]), 1e-12);
    // Newton step on 0.5 * objective: H = X'WX + P, g = X'(y - mu) - P beta.
    const Eigen::MatrixXd H = X.transpose() * w.asDiagonal() * X + penalty;
    const Eigen::VectorXd g = X.transpose() * (y - mu) - penalty * fit.beta;
    Eigen::LDLT<Eigen::MatrixXd> ldlt(H);
    Eigen::VectorXd step = ldlt.solve(g);
    if (!step.allFinite()) step = H.completeOrthogonalDecomposition().solve(g);
    double scale = 1.0;
    Eigen::VectorXd trial = fit.beta + step, trial_mu;
    double trial_obj = objective(trial, trial_mu);
    for (int halve = 0; halve < 30 && !(trial_obj <= obj + 1e-12 * std::abs(obj)); ++halve) {
      scale *= 0.5;
      trial = fit.beta + scale * step;
      trial_obj = objective(trial, trial_mu);
    }
    const double change = std::abs(obj - trial_obj) / (std::abs(trial_obj) + 0.1);
    fit.beta = trial;
    mu = trial_mu;
    obj = trial_obj;
    fit.trace.push_back(obj);
    fit.iterations = iter;
    if (change < opt.tolerance && step.lpNorm<Eigen::Infinity>() * scale < 1e-6 * (1 + fit.beta.lpNorm<Eigen::Infinity>())) {
      fit.penalized_deviance = obj;
      fit.deviance = binomial_deviance(y, mu);
      return fit;
    }
  }
  throw ConvergenceError("logistic fit did not converge within " +
                             std::to_string(opt.max_iterations) + " iterations",
                         fit.trace);
}

}  // namespace runstop
