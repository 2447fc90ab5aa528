#pragma once

// Multi-source model reuse.
//
// A target network is trained on a few labeled samples plus unlabeled ones.
// Its hidden representation z^h must linearly reconstruct the hidden
// representations z^{mh} of M frozen source networks:
//
//   objective = 1/N_l sum_labeled L(f(x_n), y_n)
//             + gamma * sum_n sum_aligned sum_m alpha_m || z_n^{mh} - T_m(z_n^h) ||^2
//
// where T_m(z) = V z for vector representations and V_1 Z V_2^T when z is
// viewed as a matrix Z (order-2 mode products). The transforms are learned
// jointly with the target parameters.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "retina/error.hpp"
#include "retina/nn.hpp"

namespace retina::reuse {

using Eigen::MatrixXd;
using Eigen::VectorXd;
using nn::ToyNetwork;

using RowMajorMap = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

enum class LossKind : std::uint8_t { SoftmaxCrossEntropy, LeastSquares };

/// How the regularizer is accumulated over samples: the plain sum, or the sum
/// divided by the sample count.
enum class RegularizerScale : std::uint8_t { Sum, Mean };

/// Pairs target representation z^h with z^{mh} of every source m.
struct Alignment {
  int target_layer = -1;          // -1: last hidden layer of the target
  std::vector<int> source_layers;  // empty: last hidden layer of each source
  int order = 1;                   // 1: vectors, 2: matrices
  int target_rows = 1;             // order 2: z^h viewed row-major as rows x (width / rows)
  std::vector<int> source_rows;    // order 2: same, per source
};

struct OptimizerSettings {
  double step_size = 0.015;
  int batch_size = 64;
  int epochs = 150;
  std::uint64_t seed = 1;
};

struct ReuseConfig {
  double gamma = 5.0;
  std::vector<double> alpha;  // empty: uniform 1/M
  std::vector<Alignment> alignment;  // empty: one default entry
  LossKind loss = LossKind::SoftmaxCrossEntropy;
  RegularizerScale scale = RegularizerScale::Mean;
  std::vector<int> hidden_widths{32};
  nn::Activation activation = nn::Activation::Tanh;
  double transform_init = 1.0;  // V entries ~ U(-1, 1) * transform_init / sqrt(d^h)
  OptimizerSettings opt;
};

struct SourceModelSet {
  std::vector<ToyNetwork> models;
  std::size_t size() const { return models.size(); }
};

/// Columns 0..n_labeled-1 of `x` are labeled.
struct DomainDataset {
  MatrixXd x;                 // features x samples
  std::vector<int> labels;    // classification, size n_labeled
  MatrixXd targets;           // least squares, outputs x n_labeled
  std::size_t n_labeled = 0;
  int num_classes = 0;

  std::size_t size() const { return static_cast<std::size_t>(x.cols()); }
  std::size_t n_unlabeled() const { return size() - n_labeled; }

  void validate(LossKind loss) const {
    if (n_labeled < 1 || n_labeled > size()) fail(ErrorCode::InvalidArgument, "need at least one labeled sample");
    if (!x.allFinite()) fail(ErrorCode::NonFiniteWeight, "non-finite feature");
    if (loss == LossKind::SoftmaxCrossEntropy) {
      if (labels.size() != n_labeled) fail(ErrorCode::DimensionMismatch, "label count differs from n_labeled");
      for (int y : labels)
        if (y < 0 || y >= num_classes) fail(ErrorCode::InvalidArgument, "label out of range");
    } else if (static_cast<std::size_t>(targets.cols()) != n_labeled) {
      fail(ErrorCode::DimensionMismatch, "target count differs from n_labeled");
    }
  }
};

struct Transform {
  MatrixXd v1;  // order 1: V; order 2: V_1
  MatrixXd v2;  // order 2 only: V_2
};

/// transforms[a][m]: alignment a, source m.
struct TransformSet {
  std::vector<std::vector<Transform>> transforms;
  friend bool operator==(const TransformSet& a, const TransformSet& b) {
    if (a.transforms.size() != b.transforms.size()) return false;
    for (std::size_t i = 0; i < a.transforms.size(); ++i) {
      if (a.transforms[i].size() != b.transforms[i].size()) return false;
      for (std::size_t m = 0; m < a.transforms[i].size(); ++m) {
        const auto& x = a.transforms[i][m];
        const auto& y = b.transforms[i][m];
        if (x.v1.rows() != y.v1.rows() || x.v1.cols() != y.v1.cols() || x.v1 != y.v1) return false;
        if (x.v2.rows() != y.v2.rows() || x.v2.cols() != y.v2.cols() || x.v2 != y.v2) return false;
      }
    }
    return true;
  }
};

// ---------------------------------------------------------------------------
// Regularizer, single sample

/// sum_m alpha_m || z_m - V_m z ||^2
inline double reuse_regularizer_vec(const VectorXd& z_target, std::span<const VectorXd> z_sources,
                                    std::span<const MatrixXd> v, std::span<const double> alpha) {
  if (z_sources.size() != v.size() || v.size() != alpha.size())
    fail(ErrorCode::DimensionMismatch, "sources, transforms and weights must have equal counts");
  double r = 0.0;
  for (std::size_t m = 0; m < v.size(); ++m) {
    if (v[m].cols() != z_target.size() || v[m].rows() != z_sources[m].size())
      fail(ErrorCode::DimensionMismatch, "transform " + std::to_string(m) + " does not map target to source width");
    r += alpha[m] * (z_sources[m] - v[m] * z_target).squaredNorm();
  }
  return r;
}

/// sum_m alpha_m || Z_m - Z x_1 V1_m x_2 V2_m ||_F^2, with the order-2 mode
/// products written as V1 Z V2^T.
inline double reuse_regularizer_tensor(const MatrixXd& z_target, std::span<const MatrixXd> z_sources,
                                       std::span<const Transform> v, std::span<const double> alpha) {
  if (z_sources.size() != v.size() || v.size() != alpha.size())
    fail(ErrorCode::DimensionMismatch, "sources, transforms and weights must have equal counts");
  double r = 0.0;
  for (std::size_t m = 0; m < v.size(); ++m) {
    const auto& t = v[m];
    if (t.v1.cols() != z_target.rows() || t.v2.cols() != z_target.cols() || t.v1.rows() != z_sources[m].rows() ||
        t.v2.rows() != z_sources[m].cols())
      fail(ErrorCode::DimensionMismatch, "mode transforms of source " + std::to_string(m) + " do not fit");
    r += alpha[m] * (z_sources[m] - t.v1 * z_target * t.v2.transpose()).squaredNorm();
  }
  return r;
}

// ---------------------------------------------------------------------------
// Configuration resolution

struct ResolvedAlignment {
  int target_layer;
  std::vector<int> source_layers;
  int order;
  int target_rows, target_cols;
  std::vector<int> source_rows, source_cols;
  int target_width;
  std::vector<int> source_widths;
};

struct Resolved {
  std::vector<double> alpha;
  std::vector<ResolvedAlignment> alignment;
};

inline Resolved resolve(const ReuseConfig& cfg, const ToyNetwork& target, const SourceModelSet& sources) {
  Resolved out;
  const std::size_t m_count = sources.size();
  if (!(cfg.gamma >= 0.0) || !std::isfinite(cfg.gamma)) fail(ErrorCode::InvalidArgument, "gamma must be finite and >= 0");
  if (m_count == 0) return out;
  out.alpha = cfg.alpha.empty() ? std::vector<double>(m_count, 1.0 / static_cast<double>(m_count)) : cfg.alpha;
  if (out.alpha.size() != m_count) fail(ErrorCode::InvalidArgument, "need one alpha per source model");
  double total = 0.0;
  for (double a : out.alpha) {
    if (!(a >= 0.0)) fail(ErrorCode::InvalidArgument, "alpha must be non-negative");
    total += a;
  }
  if (std::fabs(total - 1.0) > 1e-9) fail(ErrorCode::InvalidArgument, "alpha must sum to 1");

  std::vector<Alignment> requested = cfg.alignment.empty() ? std::vector<Alignment>{Alignment{}} : cfg.alignment;
  for (const auto& a : requested) {
    ResolvedAlignment r;
    r.target_layer = a.target_layer < 0 ? target.depth() - 1 : a.target_layer;
    if (r.target_layer < 1 || r.target_layer >= target.depth())
      fail(ErrorCode::InvalidArgument, "target alignment layer must be a hidden layer (1..H-1)");
    if (!a.source_layers.empty() && a.source_layers.size() != m_count)
      fail(ErrorCode::InvalidArgument, "need one source layer per source model");
    r.order = a.order;
    if (r.order != 1 && r.order != 2) fail(ErrorCode::InvalidArgument, "representation order must be 1 or 2");
    r.target_width = target.width(r.target_layer);
    r.target_rows = r.order == 1 ? r.target_width : a.target_rows;
    if (r.target_rows < 1 || r.target_width % r.target_rows != 0)
      fail(ErrorCode::DimensionMismatch, "target width not divisible by target_rows");
    r.target_cols = r.target_width / r.target_rows;
    if (r.order == 2 && a.source_rows.size() != m_count) fail(ErrorCode::InvalidArgument, "order 2 needs source_rows per source");
    for (std::size_t m = 0; m < m_count; ++m) {
      const auto& src = sources.models[m];
      const int layer = a.source_layers.empty() ? src.depth() - 1 : a.source_layers[m];
      if (layer < 1 || layer > src.depth()) fail(ErrorCode::InvalidArgument, "source layer out of range");
      const int w = src.width(layer);
      const int rows = r.order == 1 ? w : a.source_rows[m];
      if (rows < 1 || w % rows != 0) fail(ErrorCode::DimensionMismatch, "source width not divisible by source_rows");
      r.source_layers.push_back(layer);
      r.source_widths.push_back(w);
      r.source_rows.push_back(rows);
      r.source_cols.push_back(w / rows);
    }
    out.alignment.push_back(std::move(r));
  }
  return out;
}

inline TransformSet init_transforms(const Resolved& res, double init_scale, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  auto fill = [&](Eigen::Index rows, Eigen::Index cols, double scale) {
    MatrixXd m(rows, cols);
    for (Eigen::Index c = 0; c < cols; ++c)
      for (Eigen::Index r = 0; r < rows; ++r) m(r, c) = u(rng) * scale;
    return m;
  };
  TransformSet out;
  for (const auto& a : res.alignment) {
    std::vector<Transform> per;
    for (std::size_t m = 0; m < a.source_layers.size(); ++m) {
      Transform t;
      if (a.order == 1) {
        t.v1 = fill(a.source_widths[m], a.target_width, init_scale / std::sqrt(a.target_width));
      } else {
        t.v1 = fill(a.source_rows[m], a.target_rows, init_scale / std::sqrt(a.target_rows));
        t.v2 = fill(a.source_cols[m], a.target_cols, init_scale / std::sqrt(a.target_cols));
      }
      per.push_back(std::move(t));
    }
    out.transforms.push_back(std::move(per));
  }
  return out;
}

/// Frozen source representations on a dataset: cache[a][m] is width x N.
using SourceCache = std::vector<std::vector<MatrixXd>>;

inline SourceCache cache_sources(const SourceModelSet& sources, const Resolved& res, const MatrixXd& x) {
  SourceCache cache;
  std::vector<nn::ForwardPass> passes;
  for (const auto& s : sources.models) passes.push_back(s.forward(x));
  for (const auto& a : res.alignment) {
    std::vector<MatrixXd> per;
    for (std::size_t m = 0; m < a.source_layers.size(); ++m)
      per.push_back(passes[m].z[static_cast<std::size_t>(a.source_layers[m])]);
    cache.push_back(std::move(per));
  }
  return cache;
}

// ---------------------------------------------------------------------------
// Objective and gradients

struct GradientSet {
  std::vector<nn::DenseLayer> net;
  TransformSet transforms;
};

struct ObjectiveValue {
  double supervised = 0.0;   // mean loss over labeled samples in the subset
  double regularizer = 0.0;  // sum of R over the subset, before scaling
  double total = 0.0;
  std::optional<GradientSet> grad;
};

namespace detail {

inline double supervised_loss(const MatrixXd& out, std::span<const std::size_t> labeled_cols,
                              std::span<const std::size_t> sample_ids, const DomainDataset& data, LossKind loss,
                              MatrixXd* d_out) {
  double total = 0.0;
  const double inv = labeled_cols.empty() ? 0.0 : 1.0 / static_cast<double>(labeled_cols.size());
  for (std::size_t c : labeled_cols) {
    const std::size_t n = sample_ids[c];
    const auto col = static_cast<Eigen::Index>(c);
    if (loss == LossKind::SoftmaxCrossEntropy) {
      const VectorXd logits = out.col(col);
      const double mx = logits.maxCoeff();
      const VectorXd e = (logits.array() - mx).exp().matrix();
      const double s = e.sum();
      const int y = data.labels[n];
      total += -(logits(y) - mx - std::log(s));
      if (d_out) {
        VectorXd g = e / s;
        g(y) -= 1.0;
        d_out->col(col) += inv * g;
      }
    } else {
      const VectorXd diff = out.col(col) - data.targets.col(static_cast<Eigen::Index>(n));
      total += diff.squaredNorm();
      if (d_out) d_out->col(col) += inv * 2.0 * diff;
    }
  }
  return total * inv;
}

}  // namespace detail

/// Objective restricted to the samples `ids` (indices into `data`), with the
/// regularizer multiplied by gamma * reg_weight. Gradients are exact.
inline ObjectiveValue evaluate_objective(const ToyNetwork& net, const TransformSet& v, const SourceCache& cache,
                                         const Resolved& res, const DomainDataset& data, std::span<const std::size_t> ids,
                                         double gamma, double reg_weight, LossKind loss, bool want_grad,
                                         bool want_regularizer = true) {
  const auto n = static_cast<Eigen::Index>(ids.size());
  MatrixXd x(data.x.rows(), n);
  std::vector<std::size_t> labeled_cols;
  for (Eigen::Index c = 0; c < n; ++c) {
    x.col(c) = data.x.col(static_cast<Eigen::Index>(ids[static_cast<std::size_t>(c)]));
    if (ids[static_cast<std::size_t>(c)] < data.n_labeled) labeled_cols.push_back(static_cast<std::size_t>(c));
  }
  const nn::ForwardPass fwd = net.forward(x);
  const int depth = net.depth();

  ObjectiveValue val;
  std::vector<MatrixXd> dz;  // dObjective/dz^h
  if (want_grad) {
    dz.resize(static_cast<std::size_t>(depth) + 1);
    for (int h = 1; h <= depth; ++h) dz[static_cast<std::size_t>(h)] = MatrixXd::Zero(fwd.z[h].rows(), n);
  }
  val.supervised = detail::supervised_loss(fwd.z.back(), labeled_cols, ids, data, loss, want_grad ? &dz.back() : nullptr);

  if (want_grad) {
    val.grad.emplace();
    for (const auto& t : v.transforms) {
      std::vector<Transform> zeros;
      for (const auto& tr : t) zeros.push_back({MatrixXd::Zero(tr.v1.rows(), tr.v1.cols()), MatrixXd::Zero(tr.v2.rows(), tr.v2.cols())});
      val.grad->transforms.transforms.push_back(std::move(zeros));
    }
  }

  const double coef = gamma * reg_weight;
  const bool reg_grad = want_grad && coef != 0.0;
  if (want_regularizer || reg_grad) {
    for (std::size_t a = 0; a < res.alignment.size(); ++a) {
      const auto& al = res.alignment[a];
      const MatrixXd& zt = fwd.z[static_cast<std::size_t>(al.target_layer)];
      for (std::size_t m = 0; m < al.source_layers.size(); ++m) {
        const double alpha = res.alpha[m];
        const Transform& t = v.transforms[a][m];
        MatrixXd zs(cache[a][m].rows(), n);
        for (Eigen::Index c = 0; c < n; ++c) zs.col(c) = cache[a][m].col(static_cast<Eigen::Index>(ids[static_cast<std::size_t>(c)]));
        if (al.order == 1) {
          const MatrixXd resid = zs - t.v1 * zt;
          val.regularizer += alpha * resid.squaredNorm();
          if (reg_grad) {
            dz[static_cast<std::size_t>(al.target_layer)].noalias() += (-2.0 * coef * alpha) * (t.v1.transpose() * resid);
            val.grad->transforms.transforms[a][m].v1.noalias() += (-2.0 * coef * alpha) * (resid * zt.transpose());
          }
        } else {
          for (Eigen::Index c = 0; c < n; ++c) {
            const VectorXd zt_col = zt.col(c);
            const VectorXd zs_col = zs.col(c);
            const MatrixXd zmat = RowMajorMap(zt_col.data(), al.target_rows, al.target_cols);
            const MatrixXd smat = RowMajorMap(zs_col.data(), al.source_rows[m], al.source_cols[m]);
            const MatrixXd resid = smat - t.v1 * zmat * t.v2.transpose();
            val.regularizer += alpha * resid.squaredNorm();
            if (reg_grad) {
              const double k = -2.0 * coef * alpha;
              const MatrixXd dzmat = k * (t.v1.transpose() * resid * t.v2);
              auto& col = dz[static_cast<std::size_t>(al.target_layer)];
              for (int i = 0; i < al.target_rows; ++i)
                for (int j = 0; j < al.target_cols; ++j) col(i * al.target_cols + j, c) += dzmat(i, j);
              val.grad->transforms.transforms[a][m].v1.noalias() += k * (resid * t.v2 * zmat.transpose());
              val.grad->transforms.transforms[a][m].v2.noalias() += k * (resid.transpose() * t.v1 * zmat);
            }
          }
        }
      }
    }
  }
  val.total = val.supervised + coef * val.regularizer;

  if (want_grad) {
    const auto& layers = net.layers();
    val.grad->net.resize(layers.size());
    MatrixXd upstream = dz.back();
    for (int h = depth; h >= 1; --h) {
      const auto hs = static_cast<std::size_t>(h);
      MatrixXd delta = h == depth ? upstream
                                  : (upstream.array() * nn::activation_slope(fwd.pre[hs], fwd.z[hs], net.activation()).array()).matrix();
      auto& g = val.grad->net[hs - 1];
      g.weight = delta * fwd.z[hs - 1].transpose();
      g.bias = delta.rowwise().sum();
      if (h > 1) upstream = layers[hs - 1].weight.transpose() * delta + dz[hs - 1];
    }
  }
  return val;
}

inline std::vector<std::size_t> all_indices(const DomainDataset& d) {
  std::vector<std::size_t> ids(d.size());
  std::iota(ids.begin(), ids.end(), std::size_t{0});
  return ids;
}

inline double regularizer_weight(RegularizerScale s, std::size_t count) {
  return s == RegularizerScale::Sum ? 1.0 : 1.0 / static_cast<double>(count);
}

/// The full objective on `data`.
inline ObjectiveValue total_objective(const ToyNetwork& net, const TransformSet& v, const SourceModelSet& sources,
                                      const DomainDataset& data, const ReuseConfig& cfg) {
  data.validate(cfg.loss);
  const Resolved res = resolve(cfg, net, sources);
  const auto cache = cache_sources(sources, res, data.x);
  const auto ids = all_indices(data);
  return evaluate_objective(net, v, cache, res, data, ids, cfg.gamma, regularizer_weight(cfg.scale, ids.size()), cfg.loss, false);
}

/// Exact gradients of total_objective with respect to every target parameter
/// and transform. Sources are inputs only.
inline GradientSet gradients(const ToyNetwork& net, const TransformSet& v, const SourceModelSet& sources,
                             const DomainDataset& batch, const ReuseConfig& cfg) {
  batch.validate(cfg.loss);
  const Resolved res = resolve(cfg, net, sources);
  const auto cache = cache_sources(sources, res, batch.x);
  const auto ids = all_indices(batch);
  return *evaluate_objective(net, v, cache, res, batch, ids, cfg.gamma, regularizer_weight(cfg.scale, ids.size()), cfg.loss, true)
              .grad;
}

// Flat views, parameters and gradients in the same order.

inline VectorXd flatten(const std::vector<nn::DenseLayer>& layers, const TransformSet& v) {
  std::vector<double> out;
  for (const auto& l : layers) {
    out.insert(out.end(), l.weight.data(), l.weight.data() + l.weight.size());
    out.insert(out.end(), l.bias.data(), l.bias.data() + l.bias.size());
  }
  for (const auto& per : v.transforms)
    for (const auto& t : per) {
      out.insert(out.end(), t.v1.data(), t.v1.data() + t.v1.size());
      out.insert(out.end(), t.v2.data(), t.v2.data() + t.v2.size());
    }
  return Eigen::Map<VectorXd>(out.data(), static_cast<Eigen::Index>(out.size()));
}

inline VectorXd flatten(const ToyNetwork& net, const TransformSet& v) { return flatten(net.layers(), v); }
inline VectorXd flatten(const GradientSet& g) { return flatten(g.net, g.transforms); }

inline void unflatten(const VectorXd& flat, ToyNetwork& net, TransformSet& v) {
  Eigen::Index pos = 0;
  auto take = [&](double* dst, Eigen::Index n) {
    if (pos + n > flat.size()) fail(ErrorCode::DimensionMismatch, "flat vector too short");
    std::copy(flat.data() + pos, flat.data() + pos + n, dst);
    pos += n;
  };
  for (auto& l : net.layers()) {
    take(l.weight.data(), l.weight.size());
    take(l.bias.data(), l.bias.size());
  }
  for (auto& per : v.transforms)
    for (auto& t : per) {
      take(t.v1.data(), t.v1.size());
      take(t.v2.data(), t.v2.size());
    }
  if (pos != flat.size()) fail(ErrorCode::DimensionMismatch, "flat vector too long");
}

// ---------------------------------------------------------------------------
// Training

struct TraceRow {
  int epoch = 0;
  double supervised = 0.0;
  double regularizer = 0.0;
  double total = 0.0;
  double heldout = 0.0;  // accuracy, or mean squared error for least squares
  friend bool operator==(const TraceRow&, const TraceRow&) = default;
};

inline std::string trace_csv(const std::vector<TraceRow>& trace) {
  std::ostringstream os;
  os.precision(17);
  os << "epoch,L,R,total,heldout\n";
  for (const auto& r : trace) os << r.epoch << ',' << r.supervised << ',' << r.regularizer << ',' << r.total << ',' << r.heldout << '\n';
  return os.str();
}

struct TrainResult {
  ToyNetwork net;
  TransformSet transforms;
  std::vector<TraceRow> trace;
};

/// Held-out evaluation set.
struct EvalSet {
  MatrixXd x;
  std::vector<int> labels;
  MatrixXd targets;
};

inline double heldout_metric(const ToyNetwork& net, const EvalSet& eval, LossKind loss) {
  const MatrixXd out = net.output(eval.x);
  if (loss == LossKind::SoftmaxCrossEntropy) return nn::accuracy(out, eval.labels);
  return (out - eval.targets).squaredNorm() / static_cast<double>(eval.x.cols());
}

namespace detail {

inline std::mt19937_64 stream_rng(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream)};
  return std::mt19937_64(seq);
}

/// Splits `ids` into `parts` contiguous chunks whose sizes differ by at most one.
inline std::vector<std::span<const std::size_t>> split_even(const std::vector<std::size_t>& ids, std::size_t parts) {
  std::vector<std::span<const std::size_t>> out;
  const std::size_t base = ids.size() / parts, extra = ids.size() % parts;
  std::size_t pos = 0;
  for (std::size_t p = 0; p < parts; ++p) {
    const std::size_t len = base + (p < extra ? 1 : 0);
    out.emplace_back(ids.data() + pos, len);
    pos += len;
  }
  return out;
}

inline void check_finite(double v, int epoch) {
  if (!std::isfinite(v)) fail(ErrorCode::DivergenceDetected, "objective became non-finite in epoch " + std::to_string(epoch));
}

inline TrainResult train_impl(const SourceModelSet& sources, const DomainDataset& data, const ReuseConfig& cfg,
                              const EvalSet* eval, const ToyNetwork* start = nullptr) {
  data.validate(cfg.loss);
  if (cfg.opt.batch_size < 1 || cfg.opt.epochs < 0 || !(cfg.opt.step_size > 0.0))
    fail(ErrorCode::InvalidArgument, "optimizer settings out of range");

  // Independent streams: the target initialization does not depend on how
  // many sources or transforms exist.
  auto net_rng = stream_rng(cfg.opt.seed, 1);
  auto v_rng = stream_rng(cfg.opt.seed, 2);
  auto shuffle_rng = stream_rng(cfg.opt.seed, 3);

  std::vector<int> widths{static_cast<int>(data.x.rows())};
  widths.insert(widths.end(), cfg.hidden_widths.begin(), cfg.hidden_widths.end());
  widths.push_back(cfg.loss == LossKind::SoftmaxCrossEntropy ? data.num_classes : static_cast<int>(data.targets.rows()));
  TrainResult out{ToyNetwork::create(widths, cfg.activation, net_rng), {}, {}};
  if (start) {
    if (start->depth() + 1 != static_cast<int>(widths.size()) || start->activation() != cfg.activation)
      fail(ErrorCode::DimensionMismatch, "starting network does not match the configured architecture");
    for (int h = 0; h <= start->depth(); ++h)
      if (start->width(h) != widths[static_cast<std::size_t>(h)])
        fail(ErrorCode::DimensionMismatch, "starting network width differs at layer " + std::to_string(h));
    out.net = *start;
  }

  const Resolved res = resolve(cfg, out.net, sources);
  out.transforms = init_transforms(res, cfg.transform_init, v_rng);
  const auto cache = cache_sources(sources, res, data.x);
  const auto all = all_indices(data);
  const double full_weight = regularizer_weight(cfg.scale, all.size());

  std::vector<std::size_t> labeled(data.n_labeled), unlabeled(data.n_unlabeled());
  std::iota(labeled.begin(), labeled.end(), std::size_t{0});
  std::iota(unlabeled.begin(), unlabeled.end(), data.n_labeled);
  const std::size_t batches = std::max<std::size_t>(1, (data.size() + static_cast<std::size_t>(cfg.opt.batch_size) - 1) /
                                                           static_cast<std::size_t>(cfg.opt.batch_size));
  const bool use_reg = cfg.gamma != 0.0 && !res.alignment.empty();

  auto record = [&](int epoch) {
    const auto v = evaluate_objective(out.net, out.transforms, cache, res, data, all, cfg.gamma, full_weight, cfg.loss, false);
    check_finite(v.total, epoch);
    out.trace.push_back({epoch, v.supervised, v.regularizer * full_weight, v.total,
                         eval ? heldout_metric(out.net, *eval, cfg.loss) : 0.0});
  };

  std::vector<std::size_t> batch;
  for (int epoch = 1; epoch <= cfg.opt.epochs; ++epoch) {
    std::shuffle(labeled.begin(), labeled.end(), shuffle_rng);
    std::shuffle(unlabeled.begin(), unlabeled.end(), shuffle_rng);
    const auto lab_parts = split_even(labeled, batches);
    const auto unl_parts = split_even(unlabeled, batches);
    for (std::size_t b = 0; b < batches; ++b) {
      batch.assign(lab_parts[b].begin(), lab_parts[b].end());
      batch.insert(batch.end(), unl_parts[b].begin(), unl_parts[b].end());
      if (batch.empty()) continue;
      // unbiased mini-batch estimate of the full objective
      const double w = cfg.scale == RegularizerScale::Sum ? static_cast<double>(all.size()) / static_cast<double>(batch.size())
                                                          : 1.0 / static_cast<double>(batch.size());
      const auto val = evaluate_objective(out.net, out.transforms, cache, res, data, batch, use_reg ? cfg.gamma : 0.0, w,
                                          cfg.loss, true, false);
      check_finite(val.total, epoch);
      const auto& g = *val.grad;
      auto& layers = out.net.layers();
      for (std::size_t h = 0; h < layers.size(); ++h) {
        layers[h].weight -= cfg.opt.step_size * g.net[h].weight;
        layers[h].bias -= cfg.opt.step_size * g.net[h].bias;
      }
      if (use_reg)
        for (std::size_t a = 0; a < out.transforms.transforms.size(); ++a)
          for (std::size_t m = 0; m < out.transforms.transforms[a].size(); ++m) {
            out.transforms.transforms[a][m].v1 -= cfg.opt.step_size * g.transforms.transforms[a][m].v1;
            out.transforms.transforms[a][m].v2 -= cfg.opt.step_size * g.transforms.transforms[a][m].v2;
          }
    }
    record(epoch);
  }
  return out;
}

}  // namespace detail

/// Mini-batch gradient descent on total_objective. Each batch mixes labeled
/// and unlabeled samples in proportion to their shares of the dataset.
inline TrainResult train_target(const SourceModelSet& sources, const DomainDataset& data, const ReuseConfig& cfg,
                                const EvalSet* eval = nullptr) {
  if (sources.size() == 0) fail(ErrorCode::InvalidArgument, "need at least one source model");
  return detail::train_impl(sources, data, cfg, eval);
}

/// Supervised-only training, used for source models and baselines.
inline TrainResult train_supervised(const DomainDataset& data, ReuseConfig cfg, const EvalSet* eval = nullptr) {
  cfg.gamma = 0.0;
  return detail::train_impl(SourceModelSet{}, data, cfg, eval);
}

/// Supervised training that continues from `start` instead of a fresh
/// initialization (produces the next version in a lineage).
inline TrainResult fine_tune(const ToyNetwork& start, const DomainDataset& data, ReuseConfig cfg, const EvalSet* eval = nullptr) {
  cfg.gamma = 0.0;
  return detail::train_impl(SourceModelSet{}, data, cfg, eval, &start);
}

}  // namespace retina::reuse
