#include <gtest/gtest.h>

#include <cmath>

#include "hsnn/numerics.hpp"
#include "test_util.hpp"

using namespace hsnn;
using hsnn::test::numeric_grad;
using hsnn::test::random_matrix;
using hsnn::test::random_vec;

namespace {

DenseLayer identity_layer(std::size_t n, Activation act) {
  DenseLayer l;
  l.weight = Matrix(n, n);
  for (std::size_t i = 0; i < n; ++i) l.weight(i, i) = 1.0;
  l.bias.assign(n, 0.0);
  l.activation = act;
  return l;
}

// Scalar-loop reference evaluation.
Vec reference_forward(const Mlp& m, const Vec& x) {
  Vec h = x;
  for (const DenseLayer& l : m.layers()) {
    Vec out(l.output_dim());
    for (std::size_t r = 0; r < l.output_dim(); ++r) {
      double s = l.bias[r];
      for (std::size_t c = 0; c < l.input_dim(); ++c) s += l.weight(r, c) * h[c];
      out[r] = (l.activation == Activation::relu && s < 0.0) ? 0.0 : s;
    }
    h = out;
  }
  return h;
}

}  // namespace

TEST(Mlp, IdentityLayerPassesInputThrough) {
  const Mlp m({identity_layer(2, Activation::identity)});
  EXPECT_EQ(mlp_forward(m, Vec{1.0, 2.0}), (Vec{1.0, 2.0}));
}

TEST(Mlp, ReluLayerClipsNegatives) {
  const Mlp m({identity_layer(2, Activation::relu)});
  EXPECT_EQ(mlp_forward(m, Vec{-1.0, 3.0}), (Vec{0.0, 3.0}));
}

TEST(Mlp, TwoLayerMatchesScalarLoop) {
  DenseLayer a;
  a.weight = Matrix(3, 2, {0.5, -0.25, 1.0, 0.75, -0.5, 0.125});
  a.bias = {0.1, -0.2, 0.3};
  a.activation = Activation::relu;
  DenseLayer b;
  b.weight = Matrix(1, 3, {1.5, -2.0, 0.25});
  b.bias = {0.05};
  const Mlp m({a, b});
  const Vec x{0.7, -1.3};
  const Vec got = mlp_forward(m, x);
  const Vec want = reference_forward(m, x);
  ASSERT_EQ(got.size(), 1u);
  EXPECT_DOUBLE_EQ(got[0], want[0]);
}

TEST(Mlp, RandomShapesMatchScalarLoop) {
  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t in = 1 + uniform_index(rng, 6);
    std::vector<std::size_t> widths(1 + uniform_index(rng, 3));
    for (auto& w : widths) w = 1 + uniform_index(rng, 5);
    const Mlp m = Mlp::make(in, widths, Activation::identity, rng);
    const Vec x = random_vec(rng, in);
    const Vec got = m.forward(x);
    const Vec want = reference_forward(m, x);
    for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], want[i], 1e-12);
  }
}

TEST(Mlp, ForwardIsDeterministic) {
  Rng rng(3);
  const std::vector<std::size_t> widths{4, 3};
  const Mlp m = Mlp::make(5, widths, Activation::identity, rng);
  const Vec x = random_vec(rng, 5);
  EXPECT_EQ(m.forward(x), m.forward(x));
}

TEST(Mlp, MacsCountInTimesOut) {
  Rng rng(1);
  const std::vector<std::size_t> widths{4, 3};
  const Mlp m = Mlp::make(5, widths, Activation::identity, rng);
  EXPECT_EQ(m.macs(), 5u * 4u + 4u * 3u);
  MacCounter c;
  m.forward(random_vec(rng, 5), &c);
  EXPECT_EQ(c.macs, m.macs());
}

TEST(MlpBackward, ZeroGradOutGivesZeroGradients) {
  Rng rng(5);
  const std::vector<std::size_t> widths{4, 2};
  const Mlp m = Mlp::make(3, widths, Activation::identity, rng);
  const MlpBackward b = mlp_backward(m, random_vec(rng, 3), Vec{0.0, 0.0});
  for (double g : b.grad_in) EXPECT_EQ(g, 0.0);
  for (const DenseLayer& l : b.param_grads.layers()) {
    for (double g : l.weight.values()) EXPECT_EQ(g, 0.0);
    for (double g : l.bias) EXPECT_EQ(g, 0.0);
  }
}

TEST(MlpBackward, LinearLayerRowZeroIsInput) {
  Rng rng(6);
  const std::vector<std::size_t> widths{3};
  const Mlp m = Mlp::make(4, widths, Activation::identity, rng);
  const Vec x = random_vec(rng, 4);
  const MlpBackward b = mlp_backward(m, x, Vec{1.0, 0.0, 0.0});
  const Matrix& gw = b.param_grads.layers()[0].weight;
  for (std::size_t c = 0; c < 4; ++c) {
    EXPECT_DOUBLE_EQ(gw(0, c), x[c]);
    EXPECT_EQ(gw(1, c), 0.0);
    EXPECT_EQ(gw(2, c), 0.0);
  }
}

TEST(MlpBackward, RandomNetsMatchCentralDifferences) {
  Rng rng(21);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t in = 2 + uniform_index(rng, 4);
    const std::vector<std::size_t> widths{3 + uniform_index(rng, 3), 2};
    Mlp m = Mlp::make(in, widths, Activation::identity, rng);
    Vec x = random_vec(rng, in);
    const Vec w = random_vec(rng, 2);
    // Keep every hidden pre-activation away from the relu kink.
    Mlp::Tape tape;
    m.forward(x, tape);
    bool near_kink = false;
    for (double z : tape.preactivations[0]) near_kink |= std::abs(z) < 1e-3;
    if (near_kink) continue;
    const auto loss = [&] {
      const Vec y = m.forward(x);
      return w[0] * y[0] + w[1] * y[1] + 0.5 * y[0] * y[0];
    };
    const Vec y = m.forward(x);
    const Vec grad_out{w[0] + y[0], w[1]};
    const MlpBackward b = mlp_backward(m, x, grad_out);
    for (std::size_t l = 0; l < m.depth(); ++l) {
      const Vec nw = numeric_grad(loss, m.layers()[l].weight.values());
      const Vec nb = numeric_grad(loss, m.layers()[l].bias);
      hsnn::test::expect_grad_close(b.param_grads.layers()[l].weight.values(), nw, 1e-5, "W");
      hsnn::test::expect_grad_close(b.param_grads.layers()[l].bias, nb, 1e-5, "b");
    }
    hsnn::test::expect_grad_close(b.grad_in, numeric_grad(loss, x), 1e-5, "x");
  }
}

TEST(Embedding, EmptyIdsPoolToZero) {
  Rng rng(2);
  const EmbeddingTable t = EmbeddingTable::make(16, 3, 1.0, rng);
  EXPECT_EQ(embedding_lookup_sum(t, {}), (Vec{0.0, 0.0, 0.0}));
}

TEST(Embedding, SingletonAndRepeatedIds) {
  Rng rng(2);
  const EmbeddingTable t = EmbeddingTable::make(16, 3, 1.0, rng);
  const std::uint64_t a = 123456789;
  const std::vector<std::uint64_t> one{a}, two{a, a};
  const auto row = t.matrix().row(t.slot(a));
  const Vec s1 = embedding_lookup_sum(t, one);
  const Vec s2 = embedding_lookup_sum(t, two);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(s1[i], row[i]);
    EXPECT_DOUBLE_EQ(s2[i], 2.0 * row[i]);
  }
}

TEST(Embedding, OrderInvariant) {
  Rng rng(8);
  const EmbeddingTable t = EmbeddingTable::make(32, 4, 1.0, rng);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<std::uint64_t> ids(1 + uniform_index(rng, 6));
    for (auto& id : ids) id = rng();
    std::vector<std::uint64_t> shuffled = ids;
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    const Vec a = embedding_lookup_sum(t, ids);
    const Vec b = embedding_lookup_sum(t, shuffled);
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
  }
}

TEST(Embedding, SlotIsStableAndInRange) {
  const EmbeddingTable t(10, 2);
  for (std::uint64_t id = 0; id < 1000; ++id) {
    EXPECT_LT(t.slot(id), 10u);
    EXPECT_EQ(t.slot(id), t.slot(id));
  }
}

TEST(Embedding, BackwardScattersIntoRows) {
  Rng rng(4);
  const EmbeddingTable t = EmbeddingTable::make(8, 2, 1.0, rng);
  EmbeddingTable g = t.zeros_like();
  const std::vector<std::uint64_t> ids{7, 7, 99};
  t.backward_sum(ids, Vec{1.0, -2.0}, g);
  Matrix want(8, 2);
  for (auto id : ids) {
    want(t.slot(id), 0) += 1.0;
    want(t.slot(id), 1) += -2.0;
  }
  EXPECT_EQ(g.matrix(), want);
}

TEST(Optimizer, SgdStep) {
  Optimizer opt({OptimizerKind::sgd, 0.1, 1e-10});
  Vec p{1.0};
  Vec g{1.0};
  opt.step({std::span<double>(p)}, {std::span<double>(g)});
  EXPECT_DOUBLE_EQ(p[0], 0.9);
}

TEST(Optimizer, ZeroGradientLeavesParams) {
  for (OptimizerKind k : {OptimizerKind::sgd, OptimizerKind::adagrad}) {
    Optimizer opt({k, 0.5, 1e-10});
    Vec p{1.0, -2.0};
    Vec g{0.0, 0.0};
    opt.step({std::span<double>(p)}, {std::span<double>(g)});
    EXPECT_EQ(p, (Vec{1.0, -2.0}));
  }
}

TEST(Optimizer, AdagradTwoSteps) {
  const double eps = 1e-10;
  Optimizer opt({OptimizerKind::adagrad, 1.0, eps});
  Vec p{3.0};
  Vec g{1.0};
  opt.step({std::span<double>(p)}, {std::span<double>(g)});
  EXPECT_DOUBLE_EQ(p[0], 3.0 - 1.0 / std::sqrt(1.0 + eps));
  opt.step({std::span<double>(p)}, {std::span<double>(g)});
  EXPECT_DOUBLE_EQ(p[0], 3.0 - 1.0 / std::sqrt(1.0 + eps) - 1.0 / std::sqrt(2.0 + eps));
  EXPECT_DOUBLE_EQ(opt.accumulators()[0][0], 2.0);
}

TEST(Optimizer, ParsesKinds) {
  EXPECT_EQ(parse_optimizer_kind("sgd"), OptimizerKind::sgd);
  EXPECT_EQ(parse_optimizer_kind("adagrad"), OptimizerKind::adagrad);
  EXPECT_THROW(parse_optimizer_kind("adam"), ConfigError);
}

TEST(GradCheck, LinearModelIsNearExact) {
  Rng rng(9);
  Vec w = random_vec(rng, 6);
  const Vec x = random_vec(rng, 6);
  const auto loss = [&] { return dot(w, x); };
  Vec analytic = x;
  const GradCheckReport r =
      finite_diff_check(loss, {std::span<double>(w)}, {std::span<double>(analytic)});
  EXPECT_TRUE(r.passed());
  EXPECT_LT(r.max_relative_error, 1e-7);
  EXPECT_EQ(r.checked, 6u);
}

TEST(GradCheck, FrozenModelStillCompares) {
  Vec w{1.0, 2.0};
  Vec g{2.0, 4.0};
  const auto loss = [&] { return w[0] * w[0] + w[1] * w[1]; };
  for (double h : {1e-3, 1e-5, 1e-7}) {
    GradCheckOptions opt;
    opt.step = h;
    const GradCheckReport r = finite_diff_check(loss, {std::span<double>(w)},
                                                {std::span<double>(g)}, opt);
    EXPECT_EQ(r.checked, 2u);
  }
  EXPECT_EQ(w, (Vec{1.0, 2.0}));
}

TEST(GradCheck, CorruptedGradientFails) {
  Rng rng(10);
  const std::vector<std::size_t> widths{3, 1};
  Mlp m = Mlp::make(2, widths, Activation::identity, rng);
  const Vec x = random_vec(rng, 2);
  const auto loss = [&] { return m.forward(x)[0]; };
  MlpBackward b = mlp_backward(m, x, Vec{1.0});
  NamedParams params, grads;
  m.collect(params, "m");
  b.param_grads.collect(grads, "g");
  EXPECT_TRUE(finite_diff_check(loss, views(params), views(grads)).passed());
  b.param_grads.layers()[1].weight(0, 0) *= 2.0;
  if (b.param_grads.layers()[1].weight(0, 0) == 0.0) b.param_grads.layers()[1].weight(0, 0) = 1.0;
  EXPECT_FALSE(finite_diff_check(loss, views(params), views(grads)).passed());
}

TEST(Vector, BasicOps) {
  const Vec a{1.0, 2.0, 3.0}, b{4.0, -1.0, 0.5};
  EXPECT_DOUBLE_EQ(dot(a, b), 4.0 - 2.0 + 1.5);
  EXPECT_DOUBLE_EQ(squared_distance(a, b), 9.0 + 9.0 + 6.25);
  EXPECT_DOUBLE_EQ(squared_norm(a), 14.0);
  Vec y = b;
  axpy(2.0, a, y);
  EXPECT_EQ(y, (Vec{6.0, 3.0, 6.5}));
  EXPECT_EQ(concat({a, b}).size(), 6u);
  EXPECT_DOUBLE_EQ(sigmoid(0.0), 0.5);
  EXPECT_FALSE(all_finite(Vec{1.0, std::nan("")}));
}

TEST(Vector, MatrixShapeErrors) {
  EXPECT_THROW(Matrix(2, 2, Vec{1.0, 2.0, 3.0}), DimensionError);
  const Mlp m({identity_layer(2, Activation::identity)});
  EXPECT_THROW(m.forward(Vec{1.0, 2.0, 3.0}), DimensionError);
}

TEST(Rng, SameSeedSameDraws) {
  Rng a(77), b(77);
  for (int i = 0; i < 10; ++i) EXPECT_EQ(normal(a), normal(b));
  const auto m1 = random_matrix(a, 3, 3);
  const auto m2 = random_matrix(b, 3, 3);
  EXPECT_EQ(m1, m2);
}
