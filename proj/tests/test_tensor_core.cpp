#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "i2v/adam.hpp"
#include "i2v/grad_check.hpp"
#include "i2v/graph.hpp"
#include "i2v/ops.hpp"
#include "i2v/rng.hpp"

using namespace i2v;

namespace {

Tensor random_tensor(std::size_t r, std::size_t c, std::uint64_t seed, double scale = 1.0) {
  Rng rng(seed);
  Tensor t({r, c});
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.normal(0.0, scale);
  return t;
}

Tensor naive_matmul(const Tensor& a, const Tensor& b) {
  Tensor out = Tensor::zeros(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j)
      for (std::size_t k = 0; k < a.cols(); ++k) out(i, j) += a(i, k) * b(k, j);
  return out;
}

// Grad-checks `f` with respect to freshly created parameters.
double check(std::vector<Tensor> inputs, const std::function<Var(Graph&, std::vector<Var>&)>& f) {
  ParamStore ps;
  for (std::size_t i = 0; i < inputs.size(); ++i) ps.add("p" + std::to_string(i), inputs[i]);
  auto build = [&](Graph& g) {
    std::vector<Var> vs;
    for (auto& p : ps) vs.push_back(g.param(p));
    return f(g, vs);
  };
  return grad_check(build, ps).max_rel_error;
}

// Reduces a matrix output to a scalar with fixed random weights so every
// output element contributes a distinct gradient.
Var weighted_sum(Graph& g, Var x, std::uint64_t seed = 99) {
  Tensor w = random_tensor(x.rows(), x.cols(), seed);
  return ops::sum(ops::mul(x, g.constant(w)));
}

}  // namespace

TEST(Tensor, ShapeAndAccess) {
  Tensor t = Tensor::matrix({{1, 2, 3}, {4, 5, 6}});
  EXPECT_EQ(t.rows(), 2u);
  EXPECT_EQ(t.cols(), 3u);
  EXPECT_EQ(t(1, 2), 6.0);
  EXPECT_THROW(Tensor({2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
  EXPECT_THROW(Tensor::scalar(1).require_same_shape(t, "x"), ShapeError);
  EXPECT_THROW(t.item(), ShapeError);
}

TEST(ParamStore, RejectsDuplicateNames) {
  ParamStore ps;
  ps.add("w", Tensor::zeros(1, 1));
  EXPECT_THROW(ps.add("w", Tensor::zeros(1, 1)), InputError);
}

TEST(Ops, MatmulMatchesTripleLoop) {
  Tensor a = random_tensor(7, 5, 1), b = random_tensor(5, 4, 2);
  Graph g;
  Tensor fast = ops::matmul(g.constant(a), g.constant(b)).value();
  EXPECT_LT(max_abs_diff(fast, naive_matmul(a, b)), 1e-12);
}

TEST(Ops, MatmulShapeMismatchThrows) {
  Graph g;
  EXPECT_THROW(ops::matmul(g.constant(Tensor::zeros(2, 3)), g.constant(Tensor::zeros(2, 3))), ShapeError);
}

TEST(Ops, SoftmaxRowsMatchesDirectFormula) {
  Tensor x = Tensor::matrix({{1, 2, 3}, {1000, 1000, 1000}, {-5, 0, 5}});
  Tensor y = ops::softmax_rows(x);
  for (std::size_t r = 0; r < 3; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < 3; ++c) s += y(r, c);
    EXPECT_NEAR(s, 1.0, 1e-15);
  }
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  EXPECT_NEAR(y(0, 2), std::exp(3.0) / z, 1e-15);
  EXPECT_NEAR(y(1, 0), 1.0 / 3.0, 1e-15);
}

TEST(Ops, GeluUsesExactErf) {
  Graph g;
  Tensor x = Tensor::row({-2.0, -0.5, 0.0, 0.7, 3.0});
  Tensor y = ops::gelu(g.constant(x)).value();
  for (std::size_t i = 0; i < x.size(); ++i) {
    EXPECT_NEAR(y[i], 0.5 * x[i] * (1.0 + std::erf(x[i] / std::sqrt(2.0))), 1e-15);
  }
}

TEST(Ops, LayerNormMatchesFormula) {
  Tensor x = random_tensor(3, 6, 3);
  Tensor gain = random_tensor(1, 6, 4), bias = random_tensor(1, 6, 5);
  Graph g;
  Tensor y = ops::layer_norm(g.constant(x), g.constant(gain), g.constant(bias)).value();
  for (std::size_t r = 0; r < 3; ++r) {
    double mu = 0.0, var = 0.0;
    for (std::size_t c = 0; c < 6; ++c) mu += x(r, c) / 6.0;
    for (std::size_t c = 0; c < 6; ++c) var += (x(r, c) - mu) * (x(r, c) - mu) / 6.0;
    for (std::size_t c = 0; c < 6; ++c) {
      EXPECT_NEAR(y(r, c), gain[c] * (x(r, c) - mu) / std::sqrt(var + 1e-12) + bias[c], 1e-12);
    }
  }
}

TEST(Ops, CrossEntropyHandValues) {
  Graph g;
  // Uniform logits over 4 classes: ln 4 for any target distribution.
  Tensor target = Tensor::matrix({{0.5, 0.5, 0, 0}});
  EXPECT_NEAR(ops::cross_entropy(g.constant(Tensor::zeros(1, 4)), target).value().item(), std::log(4.0), 1e-15);
  // Two-way split on a two-activity target: -sum (1/2) log(1/2) = ln 2.
  Tensor logits = Tensor::matrix({{0, 0, -1e4, -1e4}});
  EXPECT_NEAR(ops::cross_entropy(g.constant(logits), target).value().item(), std::log(2.0), 1e-12);
  // Saturated correct prediction.
  Tensor sure = Tensor::matrix({{50, 0, 0, 0}});
  EXPECT_LT(ops::cross_entropy(g.constant(sure), Tensor::matrix({{1, 0, 0, 0}})).value().item(), 1e-20);
  EXPECT_THROW(ops::cross_entropy(g.constant(sure), Tensor::matrix({{1, 1, 0, 0}})), InputError);
}

TEST(Ops, BceWithLogitsHandValues) {
  Graph g;
  EXPECT_NEAR(ops::bce_with_logits(g.constant(Tensor::zeros(1, 1)), Tensor::scalar(1)).value().item(),
              std::log(2.0), 1e-15);
  const double x = 1.3;
  const double expect = -(0.25 * std::log(1 / (1 + std::exp(-x))) + 0.75 * std::log(1 - 1 / (1 + std::exp(-x))));
  EXPECT_NEAR(ops::bce_with_logits(g.constant(Tensor::scalar(x)), Tensor::scalar(0.25)).value().item(), expect,
              1e-14);
}

TEST(Ops, SegmentAttentionMatchesPerSegmentHeads) {
  const std::size_t d = 8, heads = 2, dh = 4;
  Tensor q = random_tensor(7, d, 10), k = random_tensor(7, d, 11), v = random_tensor(7, d, 12);
  const std::vector<std::size_t> offsets{0, 3, 7};
  Graph g;
  Tensor fused = ops::segment_attention(g.constant(q), g.constant(k), g.constant(v), offsets, heads).value();
  for (std::size_t s = 0; s + 1 < offsets.size(); ++s) {
    const std::size_t b = offsets[s], e = offsets[s + 1];
    for (std::size_t h = 0; h < heads; ++h) {
      auto part = [&](const Tensor& t) {
        return ops::slice_cols(ops::slice_rows(g.constant(t), b, e), h * dh, (h + 1) * dh);
      };
      Tensor ref = ops::scaled_dot_attention(part(q), part(k), part(v)).value();
      for (std::size_t i = 0; i < e - b; ++i)
        for (std::size_t c = 0; c < dh; ++c) EXPECT_NEAR(fused(b + i, h * dh + c), ref(i, c), 1e-12);
    }
  }
}

TEST(Ops, SegmentAttentionPoolWeightsSumToOne) {
  Graph g;
  Tensor scores = Tensor::matrix({{0}, {0}, {5}});
  Tensor values = Tensor::matrix({{1, 2}, {3, 4}, {7, 7}});
  Tensor out = ops::segment_attention_pool(g.constant(scores), g.constant(values), {0, 2, 3}).value();
  EXPECT_NEAR(out(0, 0), 2.0, 1e-15);
  EXPECT_NEAR(out(0, 1), 3.0, 1e-15);
  EXPECT_NEAR(out(1, 0), 7.0, 1e-15);
}

TEST(Gradients, ElementwiseAndShapeOps) {
  EXPECT_LT(check({random_tensor(3, 4, 1), random_tensor(4, 2, 2)},
                  [](Graph& g, auto& v) { return weighted_sum(g, ops::matmul(v[0], v[1])); }),
            1e-6);
  EXPECT_LT(check({random_tensor(3, 4, 3)}, [](Graph& g, auto& v) { return weighted_sum(g, ops::transpose(v[0])); }),
            1e-6);
  EXPECT_LT(check({random_tensor(3, 4, 4), random_tensor(1, 4, 5)},
                  [](Graph& g, auto& v) { return weighted_sum(g, ops::add_bias(v[0], v[1])); }),
            1e-6);
  EXPECT_LT(check({random_tensor(3, 4, 6), random_tensor(3, 4, 7)},
                  [](Graph& g, auto& v) { return weighted_sum(g, ops::mul(ops::add(v[0], v[1]), v[1])); }),
            1e-6);
  EXPECT_LT(check({random_tensor(3, 4, 8)}, [](Graph& g, auto& v) {
              return weighted_sum(g, ops::mul(ops::sigmoid(v[0]), ops::tanh(ops::scale(v[0], 0.5))));
            }),
            1e-6);
  EXPECT_LT(check({random_tensor(3, 4, 9)}, [](Graph& g, auto& v) { return weighted_sum(g, ops::gelu(v[0])); }),
            1e-6);
  EXPECT_LT(check({random_tensor(5, 3, 10)},
                  [](Graph& g, auto& v) {
                    Var x = ops::gather_rows(v[0], {4, 0, 0, 2});
                    return weighted_sum(g, ops::concat_cols(ops::slice_cols(x, 1, 3), ops::slice_rows(x, 0, 4)));
                  }),
            1e-6);
  EXPECT_LT(check({random_tensor(2, 3, 11), random_tensor(3, 3, 12)},
                  [](Graph& g, auto& v) { return weighted_sum(g, ops::concat_rows({v[0], v[1], v[0]})); }),
            1e-6);
}

TEST(Gradients, NormalizationAttentionAndLosses) {
  EXPECT_LT(check({random_tensor(3, 5, 20), random_tensor(1, 5, 21), random_tensor(1, 5, 22)},
                  [](Graph& g, auto& v) { return weighted_sum(g, ops::layer_norm(v[0], v[1], v[2])); }),
            1e-6);
  EXPECT_LT(check({random_tensor(3, 5, 23)}, [](Graph& g, auto& v) { return weighted_sum(g, ops::softmax_rows(v[0])); }),
            1e-6);
  EXPECT_LT(check({random_tensor(6, 4, 24), random_tensor(6, 4, 25), random_tensor(6, 4, 26)},
                  [](Graph& g, auto& v) {
                    return weighted_sum(g, ops::segment_attention(v[0], v[1], v[2], {0, 2, 6}, 2));
                  }),
            1e-6);
  EXPECT_LT(check({random_tensor(5, 1, 27), random_tensor(5, 3, 28)},
                  [](Graph& g, auto& v) { return weighted_sum(g, ops::segment_attention_pool(v[0], v[1], {0, 1, 5})); }),
            1e-6);
  Tensor target = Tensor::matrix({{0.25, 0.75, 0}, {0, 0, 1}});
  EXPECT_LT(check({random_tensor(2, 3, 29)}, [&](Graph&, auto& v) { return ops::cross_entropy(v[0], target); }), 1e-6);
  Tensor bin = Tensor::matrix({{1, 0, 1}, {0, 0, 1}});
  EXPECT_LT(check({random_tensor(2, 3, 30)}, [&](Graph&, auto& v) { return ops::bce_with_logits(v[0], bin); }), 1e-6);
  EXPECT_LT(check({random_tensor(2, 3, 31)}, [&](Graph&, auto& v) { return ops::mse(v[0], bin); }), 1e-6);
}

TEST(Graph, SharedSubexpressionAccumulates) {
  // d/dx of sum(x * x) = 2x, through a node consumed twice.
  ParamStore ps;
  ps.add("x", Tensor::row({1.5, -2.0}));
  Graph g;
  Var x = g.param(ps[0]);
  g.backward(ops::sum(ops::mul(x, x)));
  EXPECT_DOUBLE_EQ(ps[0].grad[0], 3.0);
  EXPECT_DOUBLE_EQ(ps[0].grad[1], -4.0);
}

TEST(Graph, BackwardPreconditions) {
  Graph g;
  EXPECT_THROW(g.backward(g.constant(Tensor::zeros(2, 1))), ShapeError);
  Graph frozen(false);
  EXPECT_THROW(frozen.backward(frozen.constant(Tensor::scalar(1))), InputError);
}

TEST(Graph, NonFiniteValuesAreRejected) {
  Graph g;
  Var x = g.constant(Tensor::scalar(1e308));
  EXPECT_THROW(ops::scale(x, 10.0), NumericalError);
}

TEST(Adam, MatchesHandEvaluatedStep) {
  ParamStore ps;
  ps.add("w", Tensor::row({1.0, -2.0}));
  ps[0].grad = Tensor::row({0.5, -0.1});
  AdamState st = AdamState::for_params(ps);
  AdamConfig cfg{.lr = 0.1, .beta1 = 0.9, .beta2 = 0.999, .eps = 1e-8, .weight_decay = 0.01};
  adam_step(ps, st, cfg);
  // Step 1: mhat = g, vhat = g^2, so the update is lr * (sign(g) * |g|/(|g|+eps) + wd * p).
  for (std::size_t i = 0; i < 2; ++i) {
    const double p0 = i == 0 ? 1.0 : -2.0, gr = i == 0 ? 0.5 : -0.1;
    const double expect = p0 - 0.1 * (gr / (std::abs(gr) + 1e-8) + 0.01 * p0);
    EXPECT_NEAR(ps[0].value[i], expect, 1e-15);
  }
  // Step 2 with the same gradient: bias-corrected moments still equal g and g^2.
  const double p1 = ps[0].value[0];
  adam_step(ps, st, cfg);
  EXPECT_NEAR(ps[0].value[0], p1 - 0.1 * (0.5 / (0.5 + 1e-8) + 0.01 * p1), 1e-14);
}

TEST(Adam, ZeroLearningRateLeavesParameters) {
  ParamStore ps;
  ps.add("w", Tensor::row({1.0, 2.0}));
  ps[0].grad = Tensor::row({3.0, 4.0});
  AdamState st;
  adam_step(ps, st, AdamConfig{.lr = 0.0});
  EXPECT_EQ(ps[0].value, Tensor::row({1.0, 2.0}));
}

TEST(Adam, ShapeMismatchThrows) {
  ParamStore ps;
  ps.add("w", Tensor::row({1.0, 2.0}));
  ps[0].grad = Tensor::row({1.0});
  AdamState st;
  EXPECT_THROW(adam_step(ps, st, AdamConfig{}), ShapeError);
}

TEST(Rng, TruncatedNormalStaysWithinTwoSigma) {
  Rng rng(5);
  double sum = 0.0;
  for (int i = 0; i < 20000; ++i) {
    const double x = rng.truncated_normal(0.02);
    ASSERT_LE(std::abs(x), 0.04);
    sum += x;
  }
  EXPECT_NEAR(sum / 20000, 0.0, 1e-3);
}

TEST(GradCheck, DetectsWrongGradient) {
  // A deliberately broken op: forward is x^2, backward claims 3x.
  ParamStore ps;
  ps.add("x", Tensor::row({0.7, -1.1}));
  auto build = [&](Graph& g) {
    Var x = g.param(ps[0]);
    Tensor y = x.value();
    for (std::size_t i = 0; i < y.size(); ++i) y[i] *= y[i];
    Var sq = g.push(std::move(y), {x}, [x](Graph& gr, const Tensor& dy) {
      Tensor& gx = gr.grad(x);
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += dy[i] * 3.0 * x.value()[i];
    });
    return ops::sum(sq);
  };
  EXPECT_GT(grad_check(build, ps).max_rel_error, 0.1);
}
