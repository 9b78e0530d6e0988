#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "segfetch/dataset.hpp"
#include "segfetch/model.hpp"

using namespace segfetch;

namespace {

ModelConfig small_config(std::size_t layers = 2, ContextMode context = ContextMode::both) {
  ModelConfig c;
  c.d_model = 8;
  c.heads = 2;
  c.layers = layers;
  c.outputs = 16;
  c.history = 4;
  c.features = 5;
  c.context = context;
  return c;
}

// Every tensor drawn at random so no gradient is trivially zero.
ModelParams random_params(const ModelConfig& cfg, std::uint64_t seed) {
  ModelParams p = init_params(cfg, seed);
  Rng rng(seed + 100);
  p.for_each([&](const std::string& name, Matrix& m) {
    const bool gain = name.find("gain") != std::string::npos;
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = (gain ? 1.0 : 0.0) + rng.uniform(-0.5, 0.5);
  });
  return p;
}

Sample random_sample(const ModelConfig& cfg, std::uint64_t seed) {
  Rng rng(seed);
  Sample s;
  s.input.features.resize(static_cast<Eigen::Index>(cfg.history), static_cast<Eigen::Index>(cfg.features));
  s.input.context.resize(static_cast<Eigen::Index>(cfg.history), 2);
  for (Eigen::Index i = 0; i < s.input.features.size(); ++i) s.input.features.data()[i] = rng.uniform();
  for (Eigen::Index i = 0; i < s.input.context.size(); ++i) s.input.context.data()[i] = rng.uniform();
  s.label = DeltaBitmap(cfg.outputs);
  for (std::size_t i = 0; i < cfg.outputs; ++i) s.label.set(i, rng.below(3) == 0);
  return s;
}

ModelInput permute_rows(const ModelInput& in, const std::vector<Eigen::Index>& order) {
  ModelInput out = in;
  for (std::size_t i = 0; i < order.size(); ++i) {
    out.features.row(static_cast<Eigen::Index>(i)) = in.features.row(order[i]);
    out.context.row(static_cast<Eigen::Index>(i)) = in.context.row(order[i]);
  }
  return out;
}

double max_abs_diff(const ConfidenceVector& a, const ConfidenceVector& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

std::vector<Sample> stride_samples(std::size_t length, std::uint64_t seed) {
  FeatureConfig f;
  f.history = 4;
  LabelConfig l{16, 64, 0};
  const Trace trace = generate_trace({.kind = PatternKind::stride, .stride = 3}, length, seed, f.addr);
  return build_samples(trace, f, l, InputMode::segmented);
}

ModelConfig stride_config() {
  ModelConfig base;
  base.d_model = 16;
  base.heads = 2;
  base.layers = 1;
  FeatureConfig f;
  f.history = 4;
  return model_config_for(base, f, LabelConfig{16, 64, 0}, InputMode::segmented);
}

}  // namespace

TEST(ModelConfig, Validation) {
  ModelConfig c = small_config();
  EXPECT_NO_THROW(c.validate());
  c.heads = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  c = small_config();
  c.d_model = 0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Attention, SingletonReturnsValue) {
  Matrix q(1, 1), k(1, 1), v(1, 1);
  q << 2;
  k << 2;
  v << 7;
  EXPECT_DOUBLE_EQ(attention(q, k, v)(0, 0), 7.0);
}

TEST(Attention, IdenticalKeysAverageValues) {
  Matrix q(1, 2), k(2, 2), v(2, 3);
  q << 0.3, -1.2;
  k << 1, 2, 1, 2;
  v << 1, 2, 3, 5, 6, 7;
  const Matrix out = attention(q, k, v);
  EXPECT_NEAR(out(0, 0), 3.0, 1e-12);
  EXPECT_NEAR(out(0, 1), 4.0, 1e-12);
  EXPECT_NEAR(out(0, 2), 5.0, 1e-12);
}

TEST(Attention, WeightRowsSumToOne) {
  Rng rng(1);
  for (int k = 0; k < 50; ++k) {
    Matrix q(3, 4), key(3, 4);
    for (Eigen::Index i = 0; i < 12; ++i) {
      q.data()[i] = rng.uniform(-3, 3);
      key.data()[i] = rng.uniform(-3, 3);
    }
    const Matrix w = attention_weights(q, key);
    for (Eigen::Index r = 0; r < 3; ++r) ASSERT_NEAR(w.row(r).sum(), 1.0, 1e-6);
  }
}

TEST(Attention, NonFiniteInputIsNumericError) {
  Matrix q = Matrix::Constant(1, 1, std::nan(""));
  EXPECT_THROW(attention(q, q, q), NumericError);
}

TEST(MultiHead, SingleHeadIdentityReducesToAttention) {
  Rng rng(2);
  Matrix x(5, 4);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = rng.uniform(-1, 1);
  const Matrix id = Matrix::Identity(4, 4);
  const Matrix mha = multi_head_attention(x, id, id, id, id, 1);
  EXPECT_LT((mha - attention(x, x, x)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(MultiHead, ShapeAndSymmetry) {
  Matrix x = Matrix::Constant(6, 8, 0.25);
  Rng rng(3);
  Matrix w[4];
  for (auto& m : w) {
    m.resize(8, 8);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(-1, 1);
  }
  const Matrix out = multi_head_attention(x, w[0], w[1], w[2], w[3], 2);
  ASSERT_EQ(out.rows(), 6);
  ASSERT_EQ(out.cols(), 8);
  for (Eigen::Index r = 1; r < 6; ++r) EXPECT_LT((out.row(r) - out.row(0)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(FeedForward, ReluAndBias) {
  Matrix x(1, 2);
  x << -1, 2;
  const Matrix id = Matrix::Identity(2, 2);
  const Matrix zero = Matrix::Zero(1, 2);
  const Matrix out = feed_forward(x, id, zero, id, zero);
  EXPECT_EQ(out(0, 0), 0.0);
  EXPECT_EQ(out(0, 1), 2.0);
  Matrix b2(1, 2);
  b2 << 0.5, -3;
  EXPECT_EQ(feed_forward(x, Matrix::Zero(2, 2), zero, Matrix::Zero(2, 2), b2), b2);
}

TEST(Forward, OutputsInUnitInterval) {
  const ModelConfig cfg = small_config();
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    const auto conf = forward(random_sample(cfg, seed).input, random_params(cfg, seed), cfg);
    ASSERT_EQ(conf.size(), cfg.outputs);
    for (double c : conf) {
      ASSERT_GE(c, 0.0);
      ASSERT_LE(c, 1.0);
    }
  }
}

TEST(Forward, RejectsWrongShape) {
  const ModelConfig cfg = small_config();
  Sample s = random_sample(cfg, 1);
  s.input.features.conservativeResize(3, 5);
  EXPECT_THROW(forward(s.input, init_params(cfg, 1), cfg), Error);
}

TEST(Forward, PermutationInvariantWithoutPosition) {
  const ModelConfig cfg = small_config(2, ContextMode::none);
  ModelParams p = random_params(cfg, 4);
  p.position.setZero();
  const Sample s = random_sample(cfg, 5);
  const auto base = forward(s.input, p, cfg);
  std::vector<Eigen::Index> order{0, 1, 2, 3};
  do {
    ASSERT_LT(max_abs_diff(base, forward(permute_rows(s.input, order), p, cfg)), 1e-9);
  } while (std::next_permutation(order.begin(), order.end()));
}

TEST(Forward, PositionEmbeddingBreaksInvariance) {
  const ModelConfig cfg = small_config(2, ContextMode::none);
  const ModelParams p = random_params(cfg, 4);
  const Sample s = random_sample(cfg, 5);
  const auto base = forward(s.input, p, cfg);
  double most = 0.0;
  std::vector<Eigen::Index> order{0, 1, 2, 3};
  while (std::next_permutation(order.begin(), order.end())) {
    most = std::max(most, max_abs_diff(base, forward(permute_rows(s.input, order), p, cfg)));
  }
  EXPECT_GT(most, 1e-6);
}

TEST(Forward, ContextIgnoredWhenDisabled) {
  const ModelConfig cfg = small_config(2, ContextMode::none);
  const ModelParams p = random_params(cfg, 6);
  Sample a = random_sample(cfg, 7);
  Sample b = a;
  b.input.context.setConstant(0.9);
  EXPECT_EQ(forward(a.input, p, cfg), forward(b.input, p, cfg));
}

TEST(Forward, ZeroContextEmbeddingMatchesBasicModel) {
  ModelConfig with = small_config(2, ContextMode::both);
  ModelConfig basic = small_config(2, ContextMode::none);
  ModelParams p = random_params(with, 8);
  p.context_embedding.setZero();
  const Sample s = random_sample(with, 9);
  EXPECT_LT(max_abs_diff(forward(s.input, p, with), forward(s.input, p, basic)), 1e-12);
}

TEST(Forward, ContextChangesOutputWhenEnabled) {
  const ModelConfig cfg = small_config(2, ContextMode::both);
  const ModelParams p = random_params(cfg, 6);
  Sample a = random_sample(cfg, 7);
  Sample b = a;
  b.input.context.setConstant(0.9);
  EXPECT_GT(max_abs_diff(forward(a.input, p, cfg), forward(b.input, p, cfg)), 1e-9);
}

TEST(Loss, AnalyticValues) {
  DeltaBitmap y(2);
  y.set(0);
  const std::vector<double> half{0.5, 0.5};
  EXPECT_NEAR(bce_loss(half, y).loss, std::log(2.0), 1e-12);

  DeltaBitmap one(1);
  one.set(0);
  const std::vector<double> near_one{1.0 - kBceEpsilon};
  EXPECT_LT(bce_loss(near_one, one).loss, 1e-6);
  const std::vector<double> zero{0.0};
  EXPECT_NEAR(bce_loss(zero, one).loss, -std::log(kBceEpsilon), 1e-9);
}

TEST(Loss, NonNegativeAndMonotone) {
  Rng rng(10);
  for (int k = 0; k < 1000; ++k) {
    DeltaBitmap y(4);
    std::vector<double> p(4);
    for (std::size_t i = 0; i < 4; ++i) {
      y.set(i, rng.below(2) == 1);
      p[i] = rng.uniform();
    }
    ASSERT_GE(bce_loss(p, y).loss, 0.0);
  }
  DeltaBitmap one(1);
  one.set(0);
  double previous = INFINITY;
  for (int i = 1; i < 100; ++i) {
    const std::vector<double> p{i / 100.0};
    const double l = bce_loss(p, one).loss;
    ASSERT_LT(l, previous);
    previous = l;
  }
}

TEST(Loss, GradientMatchesFiniteDifference) {
  DeltaBitmap y(3);
  y.set(1);
  std::vector<double> p{0.2, 0.7, 0.45};
  const auto r = bce_loss(p, y);
  for (std::size_t i = 0; i < 3; ++i) {
    auto up = p, down = p;
    up[i] += 1e-6;
    down[i] -= 1e-6;
    EXPECT_NEAR(r.gradient[i], (bce_loss(up, y).loss - bce_loss(down, y).loss) / 2e-6, 1e-6);
  }
}

TEST(GradientCheck, LinearModel) {
  const ModelConfig cfg = small_config(0);
  const auto report = gradient_check(random_params(cfg, 11), random_sample(cfg, 12), cfg);
  EXPECT_GT(report.checked, 0u);
  EXPECT_LT(report.max_relative_error, 1e-6);
}

TEST(GradientCheck, FullModel) {
  const ModelConfig cfg = small_config(2);
  const auto report = gradient_check(random_params(cfg, 13), random_sample(cfg, 14), cfg);
  for (const auto& [name, err] : report.per_tensor) EXPECT_LT(err, 1e-4) << name;
}

TEST(GradientCheck, CorruptedGradientIsCaught) {
  const ModelConfig cfg = small_config(1);
  auto corrupted = [&](const ModelParams& p, const Sample& s) {
    ModelParams g = zero_params(cfg);
    loss_and_gradient(s.input, s.label, p, cfg, g);
    g.head_w(0, 0) += 0.5;
    return g;
  };
  const auto report = gradient_check(random_params(cfg, 15), random_sample(cfg, 16), cfg, 1e-5, corrupted);
  EXPECT_GT(report.max_relative_error, 1e-4);
}

TEST(Training, LossDecreases) {
  const auto samples = stride_samples(220, 1);
  ASSERT_GE(samples.size(), 200u);
  TrainConfig t;
  t.epochs = 10;
  t.batch_size = 32;
  t.learning_rate = 3e-3;
  const auto result = train(samples, {}, stride_config(), t);
  ASSERT_EQ(result.log.size(), 10u);
  EXPECT_LT(result.log.back().train_loss, result.initial_train_loss);
  EXPECT_LT(mean_loss(samples, result.params, stride_config()), result.initial_train_loss);
}

TEST(Training, DeterministicForSeed) {
  const auto samples = stride_samples(150, 2);
  TrainConfig t;
  t.epochs = 3;
  t.batch_size = 16;
  const auto a = train(samples, samples, stride_config(), t);
  const auto b = train(samples, samples, stride_config(), t);
  EXPECT_EQ(a.params.checksum(), b.params.checksum());
  t.seed = 3;
  const auto c = train(samples, samples, stride_config(), t);
  EXPECT_NE(a.params.checksum(), c.params.checksum());
}

TEST(Training, EarlyStoppingAndSchedule) {
  TrainConfig t;
  EXPECT_DOUBLE_EQ(t.rate_at(0), 1e-3);
  EXPECT_DOUBLE_EQ(t.rate_at(9), 1e-3);
  EXPECT_DOUBLE_EQ(t.rate_at(10), 5e-4);
  EXPECT_DOUBLE_EQ(t.rate_at(25), 2.5e-4);
  t.learning_rate = 0;
  EXPECT_THROW(t.validate(), ConfigError);
}

TEST(Training, EmptyDatasetIsAnError) {
  TrainConfig t;
  EXPECT_THROW(train({}, {}, stride_config(), t), Error);
}

TEST(Training, LogCsv) {
  const std::vector<EpochLog> log{{1, 0.5, 0.25, 1e-3}};
  const std::string csv = training_log_csv(log);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "epoch,train_loss,val_loss,lr");
}

TEST(Latency, ClosedForms) {
  ModelConfig cfg = small_config(0);
  const LatencyCosts costs{2, 3, 5, 7, 11, 13, 17};
  EXPECT_DOUBLE_EQ(estimate_latency(costs, cfg), 2 + 3 + 5 + 7);
  EXPECT_DOUBLE_EQ(estimate_latency(LatencyCosts{}, cfg), 0.0);
  const double slope = 4 * 11 + 3 * 7 + 13 + 2 * (3 + 17);
  for (std::size_t l = 1; l <= 3; ++l) {
    cfg.layers = l;
    EXPECT_DOUBLE_EQ(estimate_latency(costs, cfg), 17 + slope * static_cast<double>(l));
  }
}

TEST(Latency, LogTreeAtSixtyFour) {
  ModelConfig cfg;
  cfg.d_model = 64;
  cfg.layers = 2;
  const LatencyCosts c = LatencyCosts::log_tree(64);
  EXPECT_DOUBLE_EQ(c.mm_attention, 7.0);
  EXPECT_DOUBLE_EQ(c.norm, 5.0);
  EXPECT_NEAR(estimate_latency(c, cfg), 100.0, 20.0);
}

TEST(Params, CountAndChecksum) {
  const ModelConfig cfg = small_config();
  const ModelParams a = init_params(cfg, 1);
  std::size_t total = 0;
  a.for_each([&](const std::string&, const Matrix& m) { total += static_cast<std::size_t>(m.size()); });
  EXPECT_EQ(a.parameter_count(), total);
  EXPECT_EQ(a.checksum(), init_params(cfg, 1).checksum());
  EXPECT_NE(a.checksum(), init_params(cfg, 2).checksum());
  EXPECT_TRUE(a.all_finite());
  EXPECT_TRUE(a.cls.isZero());
  EXPECT_TRUE(a.position.isZero());
}
