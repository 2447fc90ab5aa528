#include <gtest/gtest.h>

#include "gradcheck.hpp"
#include "retina/reuse.hpp"
#include "retina/synthetic.hpp"
#include "test_util.hpp"

using namespace retina;
using namespace retina::reuse;
using retina::testing::gradient_relative_error;
using retina::testing::random_grad_instance;

namespace {

VectorXd vec(std::initializer_list<double> v) {
  VectorXd out(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) out(i++) = x;
  return out;
}

// Straight-line objective for a one-hidden-layer tanh target, softmax loss and
// one order-1 alignment at the hidden layer, every quantity looped by hand.
double oracle_objective(const nn::ToyNetwork& net, const std::vector<MatrixXd>& v, const std::vector<nn::ToyNetwork>& src,
                        const std::vector<double>& alpha, const DomainDataset& data, double gamma, bool mean_scale) {
  const auto& w1 = net.layers()[0];
  const auto& w2 = net.layers()[1];
  const long n = data.x.cols();
  double sup = 0.0, reg = 0.0;
  for (long s = 0; s < n; ++s) {
    std::vector<double> z(static_cast<std::size_t>(w1.weight.rows()));
    for (long r = 0; r < w1.weight.rows(); ++r) {
      double a = w1.bias(r);
      for (long c = 0; c < w1.weight.cols(); ++c) a += w1.weight(r, c) * data.x(c, s);
      z[static_cast<std::size_t>(r)] = std::tanh(a);
    }
    if (static_cast<std::size_t>(s) < data.n_labeled) {
      std::vector<double> logit(static_cast<std::size_t>(w2.weight.rows()));
      double mx = -1e300;
      for (long r = 0; r < w2.weight.rows(); ++r) {
        double a = w2.bias(r);
        for (long c = 0; c < w2.weight.cols(); ++c) a += w2.weight(r, c) * z[static_cast<std::size_t>(c)];
        logit[static_cast<std::size_t>(r)] = a;
        mx = std::max(mx, a);
      }
      double se = 0.0;
      for (double l : logit) se += std::exp(l - mx);
      sup += -(logit[static_cast<std::size_t>(data.labels[static_cast<std::size_t>(s)])] - mx - std::log(se));
    }
    for (std::size_t m = 0; m < src.size(); ++m) {
      const auto& sl = src[m].layers()[0];
      for (long r = 0; r < sl.weight.rows(); ++r) {
        double a = sl.bias(r);
        for (long c = 0; c < sl.weight.cols(); ++c) a += sl.weight(r, c) * data.x(c, s);
        double pred = 0.0;
        for (long c = 0; c < v[m].cols(); ++c) pred += v[m](r, c) * z[static_cast<std::size_t>(c)];
        const double diff = std::tanh(a) - pred;
        reg += alpha[m] * diff * diff;
      }
    }
  }
  sup /= static_cast<double>(data.n_labeled);
  return sup + gamma * (mean_scale ? reg / static_cast<double>(n) : reg);
}

struct Small {
  nn::ToyNetwork net;
  SourceModelSet sources;
  DomainDataset data;
  ReuseConfig cfg;
  TransformSet v;
};

Small small_problem(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Small s;
  s.net = nn::ToyNetwork::create({3, 4, 2}, nn::Activation::Tanh, rng);
  for (auto& l : s.net.layers()) l.bias.setConstant(0.1);
  s.sources.models.push_back(nn::ToyNetwork::create({3, 5, 2}, nn::Activation::Tanh, rng));
  s.sources.models.push_back(nn::ToyNetwork::create({3, 3, 2}, nn::Activation::Tanh, rng));
  s.data.x = synthetic::detail::gaussian_matrix(3, 6, rng);
  s.data.n_labeled = 2;
  s.data.labels = {1, 0};
  s.data.num_classes = 2;
  s.cfg.gamma = 1.7;
  s.cfg.alpha = {0.25, 0.75};
  s.cfg.hidden_widths = {4};
  s.v = init_transforms(resolve(s.cfg, s.net, s.sources), 1.0, rng);
  return s;
}

}  // namespace

TEST(Regularizer, VectorExamples) {
  const std::vector<VectorXd> one{vec({1, 3})};
  const std::vector<MatrixXd> eye{MatrixXd::Identity(2, 2)};
  const std::vector<double> a1{1.0};
  EXPECT_EQ(reuse_regularizer_vec(vec({1, 2}), one, eye, a1), 1.0);
  EXPECT_EQ(reuse_regularizer_vec(vec({1, 3}), one, eye, a1), 0.0);

  const std::vector<VectorXd> two{vec({1, 1}), vec({1, -1})};
  const std::vector<MatrixXd> eyes{MatrixXd::Identity(2, 2), MatrixXd::Identity(2, 2)};
  const std::vector<double> half{0.5, 0.5};
  EXPECT_EQ(reuse_regularizer_vec(vec({0, 0}), two, eyes, half), 2.0);

  const std::vector<MatrixXd> wrong{MatrixXd::Identity(3, 2)};
  EXPECT_RETINA_ERROR(reuse_regularizer_vec(vec({1, 2}), one, wrong, a1), ErrorCode::DimensionMismatch);
  EXPECT_RETINA_ERROR(reuse_regularizer_vec(vec({1, 2}), one, eyes, a1), ErrorCode::DimensionMismatch);
}

TEST(Regularizer, TensorExamples) {
  const MatrixXd eye = MatrixXd::Identity(2, 2);
  const std::vector<MatrixXd> src{2.0 * eye};
  const std::vector<Transform> t{{2.0 * eye, eye}};
  const std::vector<Transform> id{{eye, eye}};
  const std::vector<double> a1{1.0};
  EXPECT_EQ(reuse_regularizer_tensor(eye, src, t, a1), 0.0);
  EXPECT_EQ(reuse_regularizer_tensor(2.0 * eye, src, id, a1), 0.0);
  // Z_t = I against Z_s = 2I through identities: ||I||_F^2
  EXPECT_EQ(reuse_regularizer_tensor(eye, src, id, a1), 2.0);
}

TEST(Regularizer, SingleColumnTensorEqualsVectorPath) {
  std::mt19937_64 rng(4);
  for (int i = 0; i < 50; ++i) {
    const MatrixXd zt = synthetic::detail::gaussian_matrix(5, 1, rng);
    const MatrixXd zs = synthetic::detail::gaussian_matrix(3, 1, rng);
    const MatrixXd v = synthetic::detail::gaussian_matrix(3, 5, rng);
    const std::vector<double> a{0.7};
    const std::vector<MatrixXd> zs_m{zs};
    const std::vector<VectorXd> zs_v{zs.col(0)};
    const std::vector<MatrixXd> vs{v};
    const std::vector<Transform> ts{{v, MatrixXd::Identity(1, 1)}};
    const double vec_r = reuse_regularizer_vec(zt.col(0), zs_v, vs, a);
    const double ten_r = reuse_regularizer_tensor(zt, zs_m, ts, a);
    EXPECT_NEAR(ten_r, vec_r, 1e-12 * std::max(1.0, vec_r));
  }
}

TEST(Objective, MatchesStraightLineOracle) {
  for (std::uint64_t seed : {1, 2, 3}) {
    for (auto scale : {RegularizerScale::Sum, RegularizerScale::Mean}) {
      Small s = small_problem(seed);
      s.cfg.scale = scale;
      const double got = total_objective(s.net, s.v, s.sources, s.data, s.cfg).total;
      const std::vector<MatrixXd> vs{s.v.transforms[0][0].v1, s.v.transforms[0][1].v1};
      const double want = oracle_objective(s.net, vs, s.sources.models, s.cfg.alpha, s.data, s.cfg.gamma,
                                           scale == RegularizerScale::Mean);
      EXPECT_NEAR(got, want, 1e-12 * std::fabs(want)) << seed;
    }
  }
}

TEST(Objective, GammaZeroIsSupervisedLossAndAffineInGamma) {
  Small s = small_problem(5);
  s.cfg.gamma = 0.0;
  const auto v0 = total_objective(s.net, s.v, s.sources, s.data, s.cfg);
  EXPECT_EQ(v0.total, v0.supervised);
  EXPECT_GT(v0.regularizer, 0.0);
  s.cfg.gamma = 1.0;
  const double j1 = total_objective(s.net, s.v, s.sources, s.data, s.cfg).total;
  s.cfg.gamma = 2.0;
  const double j2 = total_objective(s.net, s.v, s.sources, s.data, s.cfg).total;
  EXPECT_NEAR(j2 - j1, j1 - v0.total, 1e-12 * j2);
}

TEST(Objective, PerfectReconstructionLeavesSupervisedLoss) {
  // the source is the target's own hidden layer, so V = I reconstructs it
  Small s = small_problem(6);
  s.sources.models = {nn::ToyNetwork({s.net.layers()[0], nn::DenseLayer{MatrixXd::Identity(2, 4), VectorXd::Zero(2)}},
                                     nn::Activation::Tanh)};
  s.cfg.alpha = {};
  s.v.transforms = {{Transform{MatrixXd::Identity(4, 4), MatrixXd()}}};
  const auto val = total_objective(s.net, s.v, s.sources, s.data, s.cfg);
  EXPECT_EQ(val.regularizer, 0.0);
  EXPECT_EQ(val.total, val.supervised);
}

TEST(Gradients, CentralDifferencesOrderOne) {
  for (std::uint64_t seed = 1; seed <= 40; ++seed) {
    const auto inst = random_grad_instance(seed, 1);
    EXPECT_LT(gradient_relative_error(inst), 1e-5) << "seed " << seed;
  }
}

TEST(Gradients, CentralDifferencesOrderTwo) {
  for (std::uint64_t seed = 101; seed <= 140; ++seed) {
    const auto inst = random_grad_instance(seed, 2);
    EXPECT_LT(gradient_relative_error(inst), 1e-5) << "seed " << seed;
  }
}

TEST(Gradients, GammaZeroLeavesTransformsAlone) {
  auto inst = random_grad_instance(7, 2);
  inst.cfg.gamma = 0.0;
  const GradientSet g = gradients(inst.net, inst.v, inst.sources, inst.data, inst.cfg);
  for (const auto& per : g.transforms.transforms)
    for (const auto& t : per) {
      EXPECT_EQ(t.v1.norm(), 0.0);
      EXPECT_EQ(t.v2.norm(), 0.0);
    }
}

TEST(Gradients, UnlabeledSamplesOnlyFeedTheRegularizer) {
  Small s = small_problem(8);
  DomainDataset labeled_only = s.data;
  labeled_only.x = s.data.x.leftCols(2);

  s.cfg.gamma = 0.0;
  const VectorXd all0 = flatten(gradients(s.net, s.v, s.sources, s.data, s.cfg));
  const VectorXd lab0 = flatten(gradients(s.net, s.v, s.sources, labeled_only, s.cfg));
  EXPECT_LT((all0 - lab0).norm(), 1e-14);

  s.cfg.gamma = 1.0;
  s.cfg.scale = RegularizerScale::Sum;
  const VectorXd all1 = flatten(gradients(s.net, s.v, s.sources, s.data, s.cfg));
  const VectorXd lab1 = flatten(gradients(s.net, s.v, s.sources, labeled_only, s.cfg));
  EXPECT_GT((all1 - lab1).norm(), 1e-6);
}

TEST(Flatten, RoundTrip) {
  const auto inst = random_grad_instance(9, 2);
  const VectorXd flat = flatten(inst.net, inst.v);
  nn::ToyNetwork net = inst.net;
  TransformSet v = inst.v;
  unflatten(VectorXd::Zero(flat.size()), net, v);
  unflatten(flat, net, v);
  EXPECT_TRUE(net == inst.net);
  EXPECT_TRUE(v == inst.v);
  EXPECT_RETINA_ERROR(unflatten(VectorXd::Zero(flat.size() + 1), net, v), ErrorCode::DimensionMismatch);
  EXPECT_RETINA_ERROR(unflatten(VectorXd::Zero(flat.size() - 1), net, v), ErrorCode::DimensionMismatch);
}

TEST(Resolve, RejectsBadConfigs) {
  Small s = small_problem(10);
  ReuseConfig c = s.cfg;
  c.alpha = {0.5, 0.6};
  EXPECT_RETINA_ERROR(resolve(c, s.net, s.sources), ErrorCode::InvalidArgument);
  c.alpha = {1.0};
  EXPECT_RETINA_ERROR(resolve(c, s.net, s.sources), ErrorCode::InvalidArgument);
  c = s.cfg;
  c.gamma = -1.0;
  EXPECT_RETINA_ERROR(resolve(c, s.net, s.sources), ErrorCode::InvalidArgument);
  c = s.cfg;
  c.alignment = {Alignment{2, {}, 1, 1, {}}};  // the output layer is not hidden
  EXPECT_RETINA_ERROR(resolve(c, s.net, s.sources), ErrorCode::InvalidArgument);
  c.alignment = {Alignment{1, {}, 2, 3, {1, 1}}};  // 4 is not divisible by 3
  EXPECT_RETINA_ERROR(resolve(c, s.net, s.sources), ErrorCode::DimensionMismatch);
  c.alignment = {Alignment{1, {}, 3, 1, {}}};
  EXPECT_RETINA_ERROR(resolve(c, s.net, s.sources), ErrorCode::InvalidArgument);
}

namespace {

struct Bench {
  synthetic::SyntheticDomains domains;
  ReuseConfig cfg;
};

Bench small_bench() {
  synthetic::SyntheticSpec spec;
  spec.dim = 8;
  spec.classes = 4;
  spec.source_samples = 300;
  spec.target_samples = 200;
  spec.test_samples = 300;
  spec.source_hidden = {8};
  spec.source_opt.epochs = 10;
  Bench b{synthetic::make_synthetic_domains(spec, 3), {}};
  b.cfg.hidden_widths = {8};
  b.cfg.opt.epochs = 8;
  b.cfg.opt.seed = 4;
  return b;
}

}  // namespace

TEST(Training, DeterministicAndLeavesSourcesUntouched) {
  const Bench b = small_bench();
  const SourceModelSet before = b.domains.sources;
  const TrainResult r1 = train_target(b.domains.sources, b.domains.target, b.cfg, &b.domains.target_test);
  const TrainResult r2 = train_target(b.domains.sources, b.domains.target, b.cfg, &b.domains.target_test);
  EXPECT_TRUE(r1.net == r2.net);
  EXPECT_TRUE(r1.transforms == r2.transforms);
  EXPECT_EQ(r1.trace, r2.trace);
  EXPECT_EQ(trace_csv(r1.trace), trace_csv(r2.trace));
  for (std::size_t m = 0; m < before.size(); ++m) EXPECT_TRUE(before.models[m] == b.domains.sources.models[m]);

  ASSERT_EQ(r1.trace.size(), 8u);
  EXPECT_EQ(r1.trace.front().epoch, 1);
  EXPECT_LT(r1.trace.back().total, r1.trace.front().total);
  const std::string csv = trace_csv(r1.trace);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "epoch,L,R,total,heldout");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 9);
}

TEST(Training, GammaZeroMatchesSupervisedBaseline) {
  Bench b = small_bench();
  b.cfg.gamma = 0.0;
  const TrainResult reuse0 = train_target(b.domains.sources, b.domains.target, b.cfg);
  const TrainResult base = train_supervised(b.domains.target, b.cfg);
  EXPECT_TRUE(reuse0.net == base.net);
}

TEST(Training, RejectsBadInputs) {
  Bench b = small_bench();
  EXPECT_RETINA_ERROR(train_target(SourceModelSet{}, b.domains.target, b.cfg), ErrorCode::InvalidArgument);
  ReuseConfig c = b.cfg;
  c.opt.step_size = 0.0;
  EXPECT_RETINA_ERROR(train_target(b.domains.sources, b.domains.target, c), ErrorCode::InvalidArgument);
  DomainDataset bad = b.domains.target;
  bad.labels[0] = 99;
  EXPECT_RETINA_ERROR(train_target(b.domains.sources, bad, b.cfg), ErrorCode::InvalidArgument);
  bad = b.domains.target;
  bad.n_labeled = 0;
  EXPECT_RETINA_ERROR(train_target(b.domains.sources, bad, b.cfg), ErrorCode::InvalidArgument);

  c = b.cfg;
  c.loss = LossKind::LeastSquares;
  c.opt.step_size = 1e4;
  c.opt.epochs = 50;
  DomainDataset ls = b.domains.target;
  ls.targets = MatrixXd::Constant(3, static_cast<Eigen::Index>(ls.n_labeled), 100.0);
  EXPECT_RETINA_ERROR(train_supervised(ls, c), ErrorCode::DivergenceDetected);
}

TEST(Training, FineTuneStartsFromTheGivenNetwork) {
  Bench b = small_bench();
  const TrainResult base = train_supervised(b.domains.target, b.cfg);
  ReuseConfig c = b.cfg;
  c.opt.epochs = 0;
  EXPECT_TRUE(fine_tune(base.net, b.domains.target, c).net == base.net);
  c.hidden_widths = {5};
  EXPECT_RETINA_ERROR(fine_tune(base.net, b.domains.target, c), ErrorCode::DimensionMismatch);
  c = b.cfg;
  c.activation = nn::Activation::Relu;
  EXPECT_RETINA_ERROR(fine_tune(base.net, b.domains.target, c), ErrorCode::DimensionMismatch);
}
