#pragma once

// Synthetic multi-domain classification benchmark.
//
// Classes are Gaussian blobs around shared canonical means. Every domain sees
// them through its own rotation (all principal angles equal to the domain's
// angle, in a random basis) and translation:
//
//   x = R_d (mu_y + noise * eps) + t_d
//
// The target domain uses R = I, t = 0.

#include <Eigen/Dense>
#include <Eigen/QR>

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "retina/error.hpp"
#include "retina/nn.hpp"
#include "retina/reuse.hpp"

namespace retina::synthetic {

using Eigen::MatrixXd;
using Eigen::VectorXd;

struct SyntheticSpec {
  int dim = 32;
  int classes = 10;
  double class_spread = 1.0;  // std of canonical class means per coordinate
  double noise = 2.5;
  std::vector<double> source_angles{0.5, 0.5, 0.5};  // radians, one per source domain
  double translation = 0.5;                         // norm of each source domain shift
  std::size_t source_samples = 2000;
  std::size_t target_samples = 1000;
  double label_fraction = 0.1;
  std::size_t test_samples = 3000;
  std::vector<int> source_hidden{32};
  nn::Activation activation = nn::Activation::Tanh;
  reuse::OptimizerSettings source_opt{0.1, 64, 30, 0};

  int sources() const { return static_cast<int>(source_angles.size()); }
};

struct Domain {
  MatrixXd rotation;
  VectorXd translation;
};

struct SyntheticDomains {
  reuse::SourceModelSet sources;
  std::vector<reuse::DomainDataset> source_data;
  reuse::DomainDataset target;
  reuse::EvalSet target_test;
  MatrixXd class_means;  // dim x classes
  std::vector<Domain> source_domains;
};

namespace detail {

inline double gauss(std::mt19937_64& rng) { return std::normal_distribution<double>(0.0, 1.0)(rng); }

inline MatrixXd gaussian_matrix(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng) {
  MatrixXd m(rows, cols);
  for (Eigen::Index c = 0; c < cols; ++c)
    for (Eigen::Index r = 0; r < rows; ++r) m(r, c) = gauss(rng);
  return m;
}

/// Q diag(rot(angle), ..., rot(angle), [1]) Q^T for a random orthonormal Q.
inline MatrixXd random_rotation(int dim, double angle, std::mt19937_64& rng) {
  const MatrixXd q = Eigen::HouseholderQR<MatrixXd>(gaussian_matrix(dim, dim, rng)).householderQ();
  MatrixXd block = MatrixXd::Identity(dim, dim);
  for (int i = 0; i + 1 < dim; i += 2) {
    block(i, i) = std::cos(angle);
    block(i, i + 1) = -std::sin(angle);
    block(i + 1, i) = std::sin(angle);
    block(i + 1, i + 1) = std::cos(angle);
  }
  return q * block * q.transpose();
}

}  // namespace detail

struct Samples {
  MatrixXd x;
  std::vector<int> y;
};

inline Samples sample_domain(const MatrixXd& means, const Domain& d, double noise, std::size_t n, std::mt19937_64& rng) {
  const int classes = static_cast<int>(means.cols());
  std::uniform_int_distribution<int> pick(0, classes - 1);
  Samples s{MatrixXd(means.rows(), static_cast<Eigen::Index>(n)), std::vector<int>(n)};
  for (std::size_t i = 0; i < n; ++i) {
    const int y = pick(rng);
    VectorXd eps(means.rows());
    for (Eigen::Index k = 0; k < eps.size(); ++k) eps(k) = detail::gauss(rng);
    s.x.col(static_cast<Eigen::Index>(i)) = d.rotation * (means.col(y) + noise * eps) + d.translation;
    s.y[i] = y;
  }
  return s;
}

/// Generates the domains and trains one source network per source domain on
/// its (fully labeled) data. Deterministic in `seed`.
inline SyntheticDomains make_synthetic_domains(const SyntheticSpec& spec, std::uint64_t seed) {
  if (spec.dim < 2 || spec.classes < 2 || spec.sources() < 1) fail(ErrorCode::InvalidArgument, "synthetic spec too small");
  if (!(spec.label_fraction > 0.0 && spec.label_fraction <= 1.0)) fail(ErrorCode::InvalidArgument, "label_fraction in (0, 1]");
  std::mt19937_64 rng(seed);
  SyntheticDomains out;
  out.class_means = spec.class_spread * detail::gaussian_matrix(spec.dim, spec.classes, rng);

  const Domain target_domain{MatrixXd::Identity(spec.dim, spec.dim), VectorXd::Zero(spec.dim)};
  for (int m = 0; m < spec.sources(); ++m) {
    Domain d{detail::random_rotation(spec.dim, spec.source_angles[static_cast<std::size_t>(m)], rng), VectorXd()};
    VectorXd t = detail::gaussian_matrix(spec.dim, 1, rng).col(0);
    d.translation = t.norm() > 0 ? VectorXd(t * (spec.translation / t.norm())) : t;
    out.source_domains.push_back(d);
  }

  for (int m = 0; m < spec.sources(); ++m) {
    Samples s = sample_domain(out.class_means, out.source_domains[static_cast<std::size_t>(m)], spec.noise, spec.source_samples, rng);
    reuse::DomainDataset ds;
    ds.x = std::move(s.x);
    ds.labels = std::move(s.y);
    ds.n_labeled = spec.source_samples;
    ds.num_classes = spec.classes;
    out.source_data.push_back(std::move(ds));
  }

  Samples t = sample_domain(out.class_means, target_domain, spec.noise, spec.target_samples, rng);
  const auto n_labeled = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(spec.label_fraction * static_cast<double>(spec.target_samples))));
  out.target.x = std::move(t.x);
  out.target.labels.assign(t.y.begin(), t.y.begin() + static_cast<std::ptrdiff_t>(n_labeled));
  out.target.n_labeled = n_labeled;
  out.target.num_classes = spec.classes;

  Samples test = sample_domain(out.class_means, target_domain, spec.noise, spec.test_samples, rng);
  out.target_test.x = std::move(test.x);
  out.target_test.labels = std::move(test.y);

  for (int m = 0; m < spec.sources(); ++m) {
    reuse::ReuseConfig cfg;
    cfg.hidden_widths = spec.source_hidden;
    cfg.activation = spec.activation;
    cfg.opt = spec.source_opt;
    cfg.opt.seed = seed * 1000003ULL + static_cast<std::uint64_t>(m) + 1;
    out.sources.models.push_back(reuse::train_supervised(out.source_data[static_cast<std::size_t>(m)], cfg).net);
  }
  return out;
}

}  // namespace retina::synthetic
