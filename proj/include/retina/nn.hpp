#pragma once

// Small fully-connected networks in double precision. Samples are columns.
//
// Representation indices: z^0 is the input, z^h = act(W^{h-1} z^{h-1} + b^{h-1})
// for hidden h in 1..H-1, and z^H is the linear output (logits / regression).

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "retina/error.hpp"
#include "retina/model.hpp"

namespace retina::nn {

using Eigen::MatrixXd;
using Eigen::VectorXd;

enum class Activation : std::uint8_t { Tanh, Relu, Identity };

inline std::string to_string(Activation a) {
  switch (a) {
    case Activation::Tanh: return "tanh";
    case Activation::Relu: return "relu";
    case Activation::Identity: return "identity";
  }
  return "?";
}

inline Activation parse_activation(const std::string& s) {
  if (s == "tanh") return Activation::Tanh;
  if (s == "relu") return Activation::Relu;
  if (s == "identity" || s == "linear") return Activation::Identity;
  fail(ErrorCode::InvalidArgument, "unknown activation '" + s + "'");
}

inline MatrixXd activate(const MatrixXd& pre, Activation a) {
  switch (a) {
    case Activation::Tanh: return pre.array().tanh().matrix();
    case Activation::Relu: return pre.cwiseMax(0.0);
    case Activation::Identity: return pre;
  }
  return pre;
}

/// Derivative of the activation, expressed through the pre-activation and
/// the activation output.
inline MatrixXd activation_slope(const MatrixXd& pre, const MatrixXd& out, Activation a) {
  switch (a) {
    case Activation::Tanh: return (1.0 - out.array().square()).matrix();
    case Activation::Relu: return (pre.array() > 0.0).cast<double>().matrix();
    case Activation::Identity: return MatrixXd::Ones(pre.rows(), pre.cols());
  }
  return MatrixXd::Ones(pre.rows(), pre.cols());
}

struct DenseLayer {
  MatrixXd weight;  // out x in
  VectorXd bias;    // out
};

struct ForwardPass {
  std::vector<MatrixXd> pre;  // pre[h] for h = 1..H (pre[0] unused)
  std::vector<MatrixXd> z;    // z[h] for h = 0..H
};

class ToyNetwork {
 public:
  ToyNetwork() = default;
  ToyNetwork(std::vector<DenseLayer> layers, Activation act) : layers_(std::move(layers)), act_(act) {
    if (layers_.empty()) fail(ErrorCode::InvalidArgument, "network needs at least one layer");
    for (std::size_t h = 0; h < layers_.size(); ++h) {
      const auto& l = layers_[h];
      if (l.bias.size() != l.weight.rows()) fail(ErrorCode::DimensionMismatch, "bias length differs from layer width");
      if (h > 0 && l.weight.cols() != layers_[h - 1].weight.rows())
        fail(ErrorCode::DimensionMismatch, "layer " + std::to_string(h) + " input does not chain");
      if (!l.weight.allFinite() || !l.bias.allFinite()) fail(ErrorCode::NonFiniteWeight, "non-finite parameter");
    }
  }

  /// Widths are {input, hidden..., output}. Weights ~ U(-1, 1) * sqrt(3 / fan_in)
  /// (unit-variance preserving), biases zero.
  static ToyNetwork create(const std::vector<int>& widths, Activation act, std::mt19937_64& rng) {
    if (widths.size() < 2) fail(ErrorCode::InvalidArgument, "need input and output widths");
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    std::vector<DenseLayer> layers;
    for (std::size_t h = 0; h + 1 < widths.size(); ++h) {
      if (widths[h] < 1 || widths[h + 1] < 1) fail(ErrorCode::InvalidArgument, "widths must be positive");
      const double scale = std::sqrt(3.0 / widths[h]);
      DenseLayer l{MatrixXd(widths[h + 1], widths[h]), VectorXd::Zero(widths[h + 1])};
      for (Eigen::Index c = 0; c < l.weight.cols(); ++c)
        for (Eigen::Index r = 0; r < l.weight.rows(); ++r) l.weight(r, c) = u(rng) * scale;
      layers.push_back(std::move(l));
    }
    return ToyNetwork(std::move(layers), act);
  }

  int depth() const { return static_cast<int>(layers_.size()); }
  Activation activation() const { return act_; }
  int input_width() const { return static_cast<int>(layers_.front().weight.cols()); }
  int output_width() const { return static_cast<int>(layers_.back().weight.rows()); }
  /// Width of z^h.
  int width(int h) const {
    if (h < 0 || h > depth()) fail(ErrorCode::DimensionMismatch, "representation index out of range");
    return h == 0 ? input_width() : static_cast<int>(layers_[h - 1].weight.rows());
  }

  const std::vector<DenseLayer>& layers() const { return layers_; }
  std::vector<DenseLayer>& layers() { return layers_; }

  ForwardPass forward(const MatrixXd& x) const {
    if (x.rows() != input_width()) fail(ErrorCode::DimensionMismatch, "input has wrong feature count");
    ForwardPass f;
    f.pre.resize(layers_.size() + 1);
    f.z.resize(layers_.size() + 1);
    f.z[0] = x;
    for (std::size_t h = 1; h <= layers_.size(); ++h) {
      const auto& l = layers_[h - 1];
      f.pre[h] = (l.weight * f.z[h - 1]).colwise() + l.bias;
      f.z[h] = h == layers_.size() ? f.pre[h] : activate(f.pre[h], act_);
    }
    return f;
  }

  MatrixXd output(const MatrixXd& x) const { return forward(x).z.back(); }

  MatrixXd representation(const MatrixXd& x, int h) const {
    if (h < 0 || h > depth()) fail(ErrorCode::DimensionMismatch, "representation index out of range");
    return forward(x).z[static_cast<std::size_t>(h)];
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers_) n += static_cast<std::size_t>(l.weight.size() + l.bias.size());
    return n;
  }

  friend bool operator==(const ToyNetwork& a, const ToyNetwork& b) {
    if (a.act_ != b.act_ || a.layers_.size() != b.layers_.size()) return false;
    for (std::size_t h = 0; h < a.layers_.size(); ++h) {
      const auto& x = a.layers_[h];
      const auto& y = b.layers_[h];
      if (x.weight.rows() != y.weight.rows() || x.weight.cols() != y.weight.cols() || x.weight != y.weight || x.bias != y.bias)
        return false;
    }
    return true;
  }

  /// Exports weights as "layer<h>.weight" [out, in] (row-major) and
  /// "layer<h>.bias" [out], narrowed to f32.
  ModelArtifact to_artifact(std::string model_id, std::uint64_t version,
                            std::optional<std::uint64_t> parent = std::nullopt) const {
    std::vector<WeightTensor> tensors;
    for (std::size_t h = 0; h < layers_.size(); ++h) {
      const auto& l = layers_[h];
      std::vector<float> w(static_cast<std::size_t>(l.weight.size()));
      for (Eigen::Index r = 0; r < l.weight.rows(); ++r)
        for (Eigen::Index c = 0; c < l.weight.cols(); ++c)
          w[static_cast<std::size_t>(r * l.weight.cols() + c)] = static_cast<float>(l.weight(r, c));
      std::vector<float> b(static_cast<std::size_t>(l.bias.size()));
      for (Eigen::Index r = 0; r < l.bias.size(); ++r) b[static_cast<std::size_t>(r)] = static_cast<float>(l.bias(r));
      tensors.emplace_back("layer" + std::to_string(h) + ".weight",
                           Shape{static_cast<std::uint64_t>(l.weight.rows()), static_cast<std::uint64_t>(l.weight.cols())},
                           std::move(w));
      tensors.emplace_back("layer" + std::to_string(h) + ".bias", Shape{static_cast<std::uint64_t>(l.bias.size())},
                           std::move(b));
    }
    return ModelArtifact(std::move(model_id), version, parent, std::move(tensors));
  }

  static ToyNetwork from_artifact(const ModelArtifact& a, Activation act) {
    const auto& t = a.layers();
    if (t.empty() || t.size() % 2 != 0) fail(ErrorCode::ShapeMismatch, "expected weight/bias pairs");
    std::vector<DenseLayer> layers;
    for (std::size_t i = 0; i < t.size(); i += 2) {
      const auto& w = t[i];
      const auto& b = t[i + 1];
      if (w.shape().size() != 2 || b.shape().size() != 1 || b.shape()[0] != w.shape()[0])
        fail(ErrorCode::ShapeMismatch, "layer " + w.name() + " is not a dense weight/bias pair");
      const auto rows = static_cast<Eigen::Index>(w.shape()[0]);
      const auto cols = static_cast<Eigen::Index>(w.shape()[1]);
      DenseLayer l{MatrixXd(rows, cols), VectorXd(rows)};
      for (Eigen::Index r = 0; r < rows; ++r) {
        for (Eigen::Index c = 0; c < cols; ++c) l.weight(r, c) = w.data()[static_cast<std::size_t>(r * cols + c)];
        l.bias(r) = b.data()[static_cast<std::size_t>(r)];
      }
      layers.push_back(std::move(l));
    }
    return ToyNetwork(std::move(layers), act);
  }

 private:
  std::vector<DenseLayer> layers_;
  Activation act_ = Activation::Tanh;
};

/// Fraction of columns whose argmax matches the label.
inline double accuracy(const MatrixXd& logits, const std::vector<int>& labels) {
  if (labels.empty()) return 0.0;
  std::size_t hit = 0;
  for (Eigen::Index c = 0; c < logits.cols(); ++c) {
    Eigen::Index arg = 0;
    logits.col(c).maxCoeff(&arg);
    if (static_cast<int>(arg) == labels[static_cast<std::size_t>(c)]) ++hit;
  }
  return static_cast<double>(hit) / static_cast<double>(labels.size());
}

}  // namespace retina::nn
