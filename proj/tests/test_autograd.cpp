#include <gtest/gtest.h>

#include <cmath>
#include <functional>

#include "segfetch/autograd.hpp"
#include "segfetch/common.hpp"

using namespace segfetch;
using autograd::Graph;

namespace {

Matrix random_matrix(Eigen::Index r, Eigen::Index c, Rng& rng) {
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < r; ++i) {
    for (Eigen::Index j = 0; j < c; ++j) m(i, j) = rng.uniform(-1.0, 1.0);
  }
  return m;
}

// Builds a graph over the given inputs (all registered as parameters) and
// returns the output node. The scalar objective is sum(output .* weights).
using Builder = std::function<Graph::Node(Graph&, const std::vector<Graph::Node>&)>;

double objective(const Builder& build, const std::vector<Matrix>& inputs, const Matrix& weights) {
  Graph g;
  std::vector<Graph::Node> nodes;
  for (const auto& m : inputs) nodes.push_back(g.parameter(m, nullptr));
  return g.value(build(g, nodes)).cwiseProduct(weights).sum();
}

// Max relative error between the reverse-mode gradient and central finite
// differences, over every entry of every input.
double gradient_error(const Builder& build, std::vector<Matrix> inputs, std::uint64_t seed = 1) {
  Rng rng(seed);
  std::vector<Matrix> grads;
  for (const auto& m : inputs) grads.push_back(Matrix::Zero(m.rows(), m.cols()));
  Matrix weights;
  {
    Graph g;
    std::vector<Graph::Node> nodes;
    for (std::size_t i = 0; i < inputs.size(); ++i) nodes.push_back(g.parameter(inputs[i], &grads[i]));
    const auto out = build(g, nodes);
    weights = random_matrix(g.value(out).rows(), g.value(out).cols(), rng);
    g.backward(out, weights);
  }
  const double h = 1e-5;
  double worst = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    for (Eigen::Index i = 0; i < inputs[k].size(); ++i) {
      const double saved = inputs[k].data()[i];
      inputs[k].data()[i] = saved + h;
      const double up = objective(build, inputs, weights);
      inputs[k].data()[i] = saved - h;
      const double down = objective(build, inputs, weights);
      inputs[k].data()[i] = saved;
      const double numeric = (up - down) / (2 * h);
      const double analytic = grads[k].data()[i];
      const double err = std::abs(numeric - analytic) / std::max(1e-6, std::abs(numeric) + std::abs(analytic));
      worst = std::max(worst, err);
    }
  }
  return worst;
}

}  // namespace

class OpGradient : public ::testing::Test {
 protected:
  Rng rng{7};
  Matrix m(Eigen::Index r, Eigen::Index c) { return random_matrix(r, c, rng); }
};

TEST_F(OpGradient, Matmul) {
  EXPECT_LT(gradient_error([](Graph& g, auto& n) { return g.matmul(n[0], n[1]); }, {m(3, 4), m(4, 2)}), 1e-7);
}

TEST_F(OpGradient, MatmulTransposed) {
  EXPECT_LT(gradient_error([](Graph& g, auto& n) { return g.matmul_transposed(n[0], n[1]); }, {m(3, 4), m(5, 4)}),
            1e-7);
}

TEST_F(OpGradient, AddAndBroadcast) {
  EXPECT_LT(gradient_error([](Graph& g, auto& n) { return g.add(n[0], n[1]); }, {m(2, 3), m(2, 3)}), 1e-7);
  EXPECT_LT(gradient_error([](Graph& g, auto& n) { return g.add_row(n[0], n[1]); }, {m(4, 3), m(1, 3)}), 1e-7);
}

TEST_F(OpGradient, ScaleReluSigmoid) {
  EXPECT_LT(gradient_error([](Graph& g, auto& n) { return g.scale(n[0], -2.5); }, {m(2, 3)}), 1e-7);
  EXPECT_LT(gradient_error([](Graph& g, auto& n) { return g.relu(n[0]); }, {m(3, 3)}), 1e-7);
  EXPECT_LT(gradient_error([](Graph& g, auto& n) { return g.sigmoid(n[0]); }, {m(3, 3)}), 1e-7);
}

TEST_F(OpGradient, Softmax) {
  EXPECT_LT(gradient_error([](Graph& g, auto& n) { return g.softmax_rows(n[0]); }, {m(3, 5)}), 1e-7);
}

TEST_F(OpGradient, LayerNorm) {
  EXPECT_LT(gradient_error([](Graph& g, auto& n) { return g.layer_norm(n[0], n[1], n[2]); },
                           {m(3, 6), m(1, 6), m(1, 6)}),
            1e-6);
}

TEST_F(OpGradient, SlicingAndConcatenation) {
  EXPECT_LT(gradient_error([](Graph& g, auto& n) { return g.columns(n[0], 1, 2); }, {m(3, 4)}), 1e-7);
  EXPECT_LT(gradient_error([](Graph& g, auto& n) { return g.row(n[0], 2); }, {m(3, 4)}), 1e-7);
  EXPECT_LT(gradient_error(
                [](Graph& g, auto& n) {
                  const Graph::Node parts[] = {n[0], n[1]};
                  return g.concat_columns(parts);
                },
                {m(3, 2), m(3, 1)}),
            1e-7);
  EXPECT_LT(gradient_error(
                [](Graph& g, auto& n) {
                  const Graph::Node parts[] = {n[0], n[1]};
                  return g.concat_rows(parts);
                },
                {m(1, 3), m(2, 3)}),
            1e-7);
  EXPECT_LT(gradient_error([](Graph& g, auto& n) { return g.gather_rows(n[0], {2, 0, 2}); }, {m(4, 3)}), 1e-7);
}

TEST_F(OpGradient, ReusedNodeAccumulates) {
  EXPECT_LT(gradient_error([](Graph& g, auto& n) { return g.matmul_transposed(n[0], n[0]); }, {m(3, 3)}), 1e-7);
}

TEST_F(OpGradient, ComposedAttentionBlock) {
  auto block = [](Graph& g, auto& n) {
    const auto q = g.matmul(n[0], n[1]);
    const auto k = g.matmul(n[0], n[2]);
    const auto a = g.softmax_rows(g.scale(g.matmul_transposed(q, k), 0.5));
    return g.layer_norm(g.add(n[0], g.matmul(a, n[0])), n[3], n[4]);
  };
  EXPECT_LT(gradient_error(block, {m(4, 4), m(4, 4), m(4, 4), m(1, 4), m(1, 4)}), 1e-6);
}

TEST(Softmax, RowsSumToOne) {
  Rng rng(3);
  for (int k = 0; k < 100; ++k) {
    Graph g;
    const auto s = g.softmax_rows(g.constant(random_matrix(3, 4, rng) * 20.0));
    for (Eigen::Index r = 0; r < 3; ++r) {
      ASSERT_NEAR(g.value(s).row(r).sum(), 1.0, 1e-6);
      ASSERT_GE(g.value(s).row(r).minCoeff(), 0.0);
    }
  }
}

TEST(Softmax, LargeInputsStayFinite) {
  Graph g;
  Matrix x(1, 3);
  x << 1000.0, 999.0, -1000.0;
  const auto s = g.softmax_rows(g.constant(x));
  EXPECT_TRUE(g.value(s).allFinite());
  EXPECT_NEAR(g.value(s)(0, 0), 1.0 / (1.0 + std::exp(-1.0)), 1e-12);
}

TEST(Graph, FrozenParametersGetNoGradient) {
  Matrix w = Matrix::Constant(2, 2, 1.0);
  Matrix x = Matrix::Constant(1, 2, 1.0);
  Matrix gx = Matrix::Zero(1, 2);
  Graph g;
  const auto out = g.matmul(g.parameter(x, &gx), g.parameter(w, nullptr));
  g.backward(out, Matrix::Ones(1, 2));
  EXPECT_DOUBLE_EQ(gx(0, 0), 2.0);
  EXPECT_DOUBLE_EQ(gx(0, 1), 2.0);
}

TEST(Graph, GradientSinksAccumulateAcrossGraphs) {
  Matrix x = Matrix::Constant(1, 1, 3.0);
  Matrix gx = Matrix::Zero(1, 1);
  for (int k = 0; k < 2; ++k) {
    Graph g;
    const auto p = g.parameter(x, &gx);
    g.backward(g.scale(p, 2.0), Matrix::Ones(1, 1));
  }
  EXPECT_DOUBLE_EQ(gx(0, 0), 4.0);
}
