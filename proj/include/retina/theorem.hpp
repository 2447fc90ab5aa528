#pragma once

// Empirical check of the reuse risk bound for linear models and squared loss:
//
//   R(f_T) <= 2 M sum_m alpha_m^2 R(V^m f_m) (r^2 / gamma + 1)
//
// Everything is linear. Features are uniform in the ball ||x|| <= r, the
// target is y = <beta, x> + noise, and source m solves a related task
// (beta + relatedness * delta_m); extra source outputs, if any, are unrelated.
// The target net is x -> z (linear, `hidden` wide) -> y and its z must
// reconstruct each source output through V^m. The transformed source predictor
// pairs with the learned V^m: it maps f_m(x) back through the least-squares
// inverse of V^m and reads it out with the target head. Risks are Monte Carlo
// estimates on held-out samples.
//
// The defaults (scalar source outputs, scalar z) treat every model as an
// end-to-end scalar predictor. With wider z and unrelated source outputs the
// learned z has to compromise between sources and the bound can fail at the
// learned V (e.g. M=2, gamma=16).

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "retina/error.hpp"
#include "retina/nn.hpp"
#include "retina/reuse.hpp"

namespace retina::theorem {

using Eigen::MatrixXd;
using Eigen::VectorXd;

struct TheoremInstance {
  int dim = 5;
  int sources = 1;
  double gamma = 5.0;
  double radius = 1.0;
  double noise = 0.05;
  double relatedness = 0.1;  // scale of the source task perturbation
  int source_outputs = 1;
  int hidden = 1;
  std::size_t n_labeled = 20;
  std::size_t n_unlabeled = 500;
  std::size_t n_source = 2000;
  std::size_t n_heldout = 10000;
  std::vector<double> alpha;  // empty: uniform
  nn::Activation activation = nn::Activation::Identity;
  reuse::LossKind loss = reuse::LossKind::LeastSquares;
  reuse::OptimizerSettings opt{0.05, 32, 150, 0};
  std::uint64_t seed = 1;
};

struct BoundReport {
  double lhs = 0.0;  // R(f_T)
  double rhs = 0.0;
  bool holds = false;
  std::vector<double> source_risks;  // R(V^m f_m)
  double radius = 0.0;
};

inline constexpr double kEstimationSlack = 0.05;

namespace detail {

inline MatrixXd ball_samples(int dim, std::size_t n, double radius, std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  MatrixXd x(dim, static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < n; ++i) {
    VectorXd v(dim);
    for (int k = 0; k < dim; ++k) v(k) = g(rng);
    const double scale = radius * std::pow(u(rng), 1.0 / dim) / v.norm();
    x.col(static_cast<Eigen::Index>(i)) = v * scale;
  }
  return x;
}

inline MatrixXd noisy(const MatrixXd& clean, double noise, std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  MatrixXd out = clean;
  for (Eigen::Index i = 0; i < out.size(); ++i) out.data()[i] += noise * g(rng);
  return out;
}

}  // namespace detail

inline BoundReport theorem_bound_check(const TheoremInstance& inst) {
  if (inst.activation != nn::Activation::Identity) fail(ErrorCode::HypothesisViolated, "the bound needs linear models");
  if (inst.loss != reuse::LossKind::LeastSquares) fail(ErrorCode::HypothesisViolated, "the bound needs squared loss");
  if (!(inst.gamma > 0.0)) fail(ErrorCode::HypothesisViolated, "the bound needs gamma > 0");
  if (inst.sources < 1 || inst.dim < 1 || inst.hidden < 1 || inst.source_outputs < 1)
    fail(ErrorCode::InvalidArgument, "instance sizes must be positive");

  std::mt19937_64 rng(inst.seed);
  std::normal_distribution<double> g(0.0, 1.0);
  const int d = inst.dim;
  VectorXd beta(d);
  for (int k = 0; k < d; ++k) beta(k) = g(rng);
  beta /= beta.norm();

  // sources: row 0 related to the target task, remaining rows unrelated
  reuse::SourceModelSet sources;
  for (int m = 0; m < inst.sources; ++m) {
    MatrixXd b(inst.source_outputs, d);
    for (Eigen::Index c = 0; c < b.cols(); ++c)
      for (Eigen::Index r = 0; r < b.rows(); ++r) b(r, c) = g(rng) / std::sqrt(d);
    VectorXd delta(d);
    for (int k = 0; k < d; ++k) delta(k) = g(rng) / std::sqrt(d);
    b.row(0) = (beta + inst.relatedness * delta).transpose();
    reuse::DomainDataset src;
    src.x = detail::ball_samples(d, inst.n_source, inst.radius, rng);
    src.targets = detail::noisy(b * src.x, inst.noise, rng);
    src.n_labeled = inst.n_source;
    reuse::ReuseConfig cfg;
    cfg.loss = reuse::LossKind::LeastSquares;
    cfg.activation = nn::Activation::Identity;
    cfg.hidden_widths = {};
    cfg.opt = inst.opt;
    cfg.opt.seed = inst.seed * 7919ULL + static_cast<std::uint64_t>(m);
    sources.models.push_back(reuse::train_supervised(src, cfg).net);
  }

  reuse::DomainDataset target;
  const std::size_t n = inst.n_labeled + inst.n_unlabeled;
  target.x = detail::ball_samples(d, n, inst.radius, rng);
  target.targets = detail::noisy(beta.transpose() * target.x.leftCols(static_cast<Eigen::Index>(inst.n_labeled)), inst.noise, rng);
  target.n_labeled = inst.n_labeled;

  reuse::EvalSet heldout;
  heldout.x = detail::ball_samples(d, inst.n_heldout, inst.radius, rng);
  heldout.targets = detail::noisy(beta.transpose() * heldout.x, inst.noise, rng);

  reuse::ReuseConfig cfg;
  cfg.gamma = inst.gamma;
  cfg.alpha = inst.alpha;
  cfg.loss = reuse::LossKind::LeastSquares;
  cfg.activation = nn::Activation::Identity;
  cfg.hidden_widths = {inst.hidden};
  cfg.alignment = {reuse::Alignment{1, std::vector<int>(static_cast<std::size_t>(inst.sources), 1), 1, 1, {}}};
  cfg.opt = inst.opt;
  cfg.opt.seed = inst.seed;
  const reuse::TrainResult trained = reuse::train_target(sources, target, cfg);

  BoundReport report;
  report.radius = inst.radius;
  report.lhs = reuse::heldout_metric(trained.net, heldout, reuse::LossKind::LeastSquares);

  const auto& head = trained.net.layers().back();
  const std::vector<double> alpha =
      inst.alpha.empty() ? std::vector<double>(static_cast<std::size_t>(inst.sources), 1.0 / inst.sources) : inst.alpha;
  double weighted = 0.0;
  for (int m = 0; m < inst.sources; ++m) {
    const MatrixXd& v = trained.transforms.transforms[0][static_cast<std::size_t>(m)].v1;  // source_outputs x hidden
    const MatrixXd source_out = sources.models[static_cast<std::size_t>(m)].output(heldout.x);
    const MatrixXd z_hat = v.completeOrthogonalDecomposition().solve(source_out);
    const MatrixXd pred = (head.weight * z_hat).colwise() + head.bias;
    const double risk = (pred - heldout.targets).squaredNorm() / static_cast<double>(heldout.x.cols());
    report.source_risks.push_back(risk);
    weighted += alpha[static_cast<std::size_t>(m)] * alpha[static_cast<std::size_t>(m)] * risk;
  }
  report.rhs = 2.0 * inst.sources * weighted * (inst.radius * inst.radius / inst.gamma + 1.0);
  report.holds = report.lhs <= report.rhs * (1.0 + kEstimationSlack);
  return report;
}

}  // namespace retina::theorem
