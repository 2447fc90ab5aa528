#pragma once

// Two-version lineage of a small classifier, used to compare delta and
// whole-model transmission.
//
// The network is trained on standardized features and deployed on raw
// pixel-scale inputs (x_raw = sigma * x + mu) with the normalization folded
// into the first layer. The folded first-layer weights are then of the same
// order as a coarse quantization step, like the weights of large conv nets.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "retina/model.hpp"
#include "retina/nn.hpp"
#include "retina/reuse.hpp"
#include "retina/synthetic.hpp"

namespace retina::toy {

/// fc1 [1000, 800] + bias, fc2 [199, 1000]: exactly 10^6 weights.
inline std::vector<std::pair<std::string, Shape>> million_weight_layout() {
  return {{"fc1.weight", {1000, 800}}, {"fc1.bias", {1000}}, {"fc2.weight", {199, 1000}}};
}

/// Weights ~ N(0, 1 / fan_in) with fan_in the last dimension (N(0, 0.01^2) for
/// rank-1 tensors).
inline ModelArtifact random_model(std::string model_id, std::uint64_t version, std::optional<std::uint64_t> parent,
                                  const std::vector<std::pair<std::string, Shape>>& layout, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<WeightTensor> layers;
  for (const auto& [name, shape] : layout) {
    const double sd = shape.size() > 1 ? 1.0 / std::sqrt(static_cast<double>(shape.back())) : 0.01;
    std::vector<float> w(static_cast<std::size_t>(shape_product(shape)));
    for (auto& x : w) x = static_cast<float>(sd * g(rng));
    layers.emplace_back(name, shape, std::move(w));
  }
  return ModelArtifact(std::move(model_id), version, parent, std::move(layers));
}

/// Child of `base` with every weight moved by up to `relative * |w|`
/// (uniform in that range).
inline ModelArtifact perturbed(const ModelArtifact& base, std::uint64_t version, double relative, std::uint64_t seed) {
  if (!(relative >= 0.0)) fail(ErrorCode::InvalidArgument, "relative perturbation must be non-negative");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<WeightTensor> layers;
  for (const auto& l : base.layers()) {
    std::vector<float> w(l.data().begin(), l.data().end());
    for (auto& x : w) x = static_cast<float>(x + relative * std::fabs(x) * u(rng));
    layers.emplace_back(l.name(), l.shape(), std::move(w));
  }
  return ModelArtifact(base.model_id(), version, base.version(), std::move(layers));
}

struct ToyLineageSpec {
  int dim = 64;
  int classes = 10;
  int hidden = 64;
  double noise = 3.0;
  double input_mean = 128.0;
  double input_scale = 32.0;
  std::size_t train_samples = 2000;
  std::size_t finetune_samples = 1000;
  std::size_t test_samples = 3000;
  nn::Activation activation = nn::Activation::Tanh;
  reuse::OptimizerSettings train_opt{0.05, 64, 20, 0};
  reuse::OptimizerSettings finetune_opt{0.02, 64, 3, 0};
  std::string model_id = "toy";
};

struct ToyLineage {
  ModelArtifact v0;  // version 0
  ModelArtifact v1;  // version 1, parent 0, fine-tuned from v0
  Eigen::MatrixXd test_x;  // raw inputs
  std::vector<int> test_labels;
  nn::Activation activation = nn::Activation::Tanh;

  double accuracy(const ModelArtifact& m) const {
    return nn::accuracy(nn::ToyNetwork::from_artifact(m, activation).output(test_x), test_labels);
  }
};

/// Rewrites the first layer so the network accepts x_raw = scale * x + mean.
inline nn::ToyNetwork fold_input_normalization(nn::ToyNetwork net, double mean, double scale) {
  if (!(scale > 0.0)) fail(ErrorCode::InvalidArgument, "input scale must be positive");
  auto& l = net.layers().front();
  l.bias -= l.weight.rowwise().sum() * (mean / scale);
  l.weight /= scale;
  return net;
}

inline ToyLineage make_toy_lineage(const ToyLineageSpec& spec, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const Eigen::MatrixXd means = synthetic::detail::gaussian_matrix(spec.dim, spec.classes, rng);
  const synthetic::Domain domain{Eigen::MatrixXd::Identity(spec.dim, spec.dim), Eigen::VectorXd::Zero(spec.dim)};
  auto train = synthetic::sample_domain(means, domain, spec.noise, spec.train_samples, rng);
  auto tune = synthetic::sample_domain(means, domain, spec.noise, spec.finetune_samples, rng);
  auto test = synthetic::sample_domain(means, domain, spec.noise, spec.test_samples, rng);

  reuse::ReuseConfig cfg;
  cfg.hidden_widths = {spec.hidden};
  cfg.activation = spec.activation;
  cfg.opt = spec.train_opt;
  cfg.opt.seed = seed * 2 + 1;
  const reuse::DomainDataset train_set{std::move(train.x), std::move(train.y), {}, spec.train_samples, spec.classes};
  const nn::ToyNetwork v0 = reuse::train_supervised(train_set, cfg).net;

  cfg.opt = spec.finetune_opt;
  cfg.opt.seed = seed * 2 + 2;
  const reuse::DomainDataset tune_set{std::move(tune.x), std::move(tune.y), {}, spec.finetune_samples, spec.classes};
  const nn::ToyNetwork v1 = reuse::fine_tune(v0, tune_set, cfg).net;

  const auto deploy = [&](const nn::ToyNetwork& n) { return fold_input_normalization(n, spec.input_mean, spec.input_scale); };
  ToyLineage out{deploy(v0).to_artifact(spec.model_id, 0), deploy(v1).to_artifact(spec.model_id, 1, 0),
                 (test.x * spec.input_scale).array() + spec.input_mean, std::move(test.y), spec.activation};
  return out;
}

}  // namespace retina::toy
