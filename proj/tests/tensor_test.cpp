#include "psalab/tensor.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace psalab;

namespace {

Tensor64 rand64(Shape s, Rng& rng) { return Tensor64::randn(std::move(s), rng); }

// Reduces an op output to a scalar through fixed random weights, so finite
// differences see every element with a distinct coefficient.
Tensor64 weighted_loss(Tape<double>& tape, const Tensor64& out,
                       const Tensor64& w) {
  return sum(tape, mul(tape, out, w));
}

}  // namespace

TEST(Matmul, IdentityAndDiagonal) {
  Tape<float> tape;
  Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
  Tensor eye = Tensor::from({2, 2}, {1, 0, 0, 1});
  Tensor c = matmul(tape, a, eye);
  EXPECT_EQ(c.shape, (Shape{2, 2}));
  EXPECT_FLOAT_EQ(c[0], 1);
  EXPECT_FLOAT_EQ(c[1], 2);
  EXPECT_FLOAT_EQ(c[2], 3);
  EXPECT_FLOAT_EQ(c[3], 4);

  Tensor d = Tensor::from({2, 2}, {1, 0, 0, 2});
  Tensor v = Tensor::from({2, 1}, {3, 4});
  Tensor dv = matmul(tape, d, v);
  EXPECT_FLOAT_EQ(dv[0], 3);
  EXPECT_FLOAT_EQ(dv[1], 8);
}

TEST(Matmul, ShapeError) {
  Tape<float> tape;
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({4, 5});
  try {
    matmul(tape, a, b);
    FAIL() << "expected shape error";
  } catch (const std::invalid_argument& e) {
    std::string msg = e.what();
    EXPECT_NE(msg.find("[2 x 3]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[4 x 5]"), std::string::npos) << msg;
  }
}

TEST(Matmul, GradMatchesFiniteDifferences) {
  Rng rng(7);
  Tensor64 a = rand64({3, 4}, rng);
  Tensor64 b = rand64({4, 5}, rng);
  auto f = [&](Tape<double>& tape) {
    return sum(tape, matmul(tape, a, b));
  };
  double err = grad_check<double>(f, {&a, &b}, 1e-5);
  EXPECT_LT(err, 1e-4);
}

TEST(SoftmaxRows, SymmetryAndShiftInvariance) {
  Tape<float> tape;
  Tensor t = Tensor::from({1, 2}, {0, 0});
  Tensor s = softmax_rows(tape, t);
  EXPECT_FLOAT_EQ(s[0], 0.5f);
  EXPECT_FLOAT_EQ(s[1], 0.5f);

  Rng rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    Tensor x = Tensor::randn({2, 5}, rng);
    Tensor shifted = x.clone();
    const float c = static_cast<float>(rng.normal(0, 10));
    for (int j = 0; j < 5; ++j) shifted.at(0, j) += c;
    Tensor s1 = softmax_rows(tape, x);
    Tensor s2 = softmax_rows(tape, shifted);
    for (int j = 0; j < 5; ++j) EXPECT_NEAR(s1.at(0, j), s2.at(0, j), 1e-6);
  }
}

TEST(SoftmaxRows, DirectFormula) {
  Tape<double> tape;
  Tensor64 t = Tensor64::from({1, 3}, {1, 2, 3});
  Tensor64 s = softmax_rows(tape, t);
  EXPECT_NEAR(s[0], 0.09003057317038046, 1e-12);
  EXPECT_NEAR(s[1], 0.24472847105479767, 1e-12);
  EXPECT_NEAR(s[2], 0.6652409557748219, 1e-12);
}

TEST(SoftmaxRows, RowsSumToOneProperty) {
  Rng rng(11);
  Tape<float> tape;
  for (int trial = 0; trial < 20; ++trial) {
    Tensor x = Tensor::randn({4, 7}, rng, 100.0);
    Tensor s = softmax_rows(tape, x);
    for (int i = 0; i < 4; ++i) {
      float total = 0;
      for (int j = 0; j < 7; ++j) {
        EXPECT_GE(s.at(i, j), 0.0f);
        EXPECT_LE(s.at(i, j), 1.0f);
        total += s.at(i, j);
      }
      EXPECT_NEAR(total, 1.0f, 1e-6);
    }
  }
}

TEST(SoftmaxRows, StableAtLargeMagnitudes) {
  Tape<float> tape;
  Tensor t = Tensor::from({1, 3}, {1e4f, -1e4f, 0});
  Tensor s = softmax_rows(tape, t);
  EXPECT_TRUE(all_finite(s));
  EXPECT_NEAR(s[0], 1.0f, 1e-6);
}

TEST(LayerNorm, ConstantRowCollapsesToBias) {
  Tape<float> tape;
  Tensor t = Tensor::from({1, 4}, {3, 3, 3, 3});
  Tensor g = Tensor::full({4}, 1.0f);
  Tensor b = Tensor::zeros({4});
  Tensor y = layer_norm(tape, t, g, b);
  for (int j = 0; j < 4; ++j) EXPECT_NEAR(y[j], 0.0f, 1e-4);
}

TEST(LayerNorm, StandardizesRows) {
  Rng rng(5);
  Tape<float> tape;
  Tensor t = Tensor::randn({3, 64}, rng, 2.0);
  Tensor g = Tensor::full({64}, 1.5f);
  Tensor b = Tensor::full({64}, 0.25f);
  Tensor y = layer_norm(tape, t, g, b);
  for (int i = 0; i < 3; ++i) {
    double mean = 0, var = 0;
    for (int j = 0; j < 64; ++j) mean += y.at(i, j);
    mean /= 64;
    for (int j = 0; j < 64; ++j) var += (y.at(i, j) - mean) * (y.at(i, j) - mean);
    var /= 64;
    EXPECT_NEAR(mean, 0.25, 1e-3);
    EXPECT_NEAR(var, 1.5 * 1.5, 0.05);
  }
}

TEST(LayerNorm, GradMatchesFiniteDifferences) {
  Rng rng(9);
  Tensor64 t = rand64({3, 6}, rng);
  Tensor64 g = rand64({6}, rng);
  Tensor64 b = rand64({6}, rng);
  Tensor64 w = rand64({3, 6}, rng);
  auto f = [&](Tape<double>& tape) {
    return weighted_loss(tape, layer_norm(tape, t, g, b), w);
  };
  EXPECT_LT(grad_check<double>(f, {&t, &g, &b}, 1e-5), 1e-4);
}

TEST(Gelu, PointValues) {
  Tape<double> tape;
  Tensor64 t = Tensor64::from({3}, {0.0, 10.0, 1.0});
  Tensor64 y = gelu(tape, t);
  EXPECT_DOUBLE_EQ(y[0], 0.0);
  EXPECT_LT(std::abs(y[1] - 10.0), 1e-3);
  EXPECT_NEAR(y[2], 0.8411919906082768, 1e-12);
}

TEST(CrossEntropy, UniformAndNearCertain) {
  Tape<float> tape;
  const int v = 17;
  Tensor logits = Tensor::zeros({3, v});
  Tensor loss = cross_entropy(tape, logits, {0, 5, 16});
  EXPECT_NEAR(loss.scalar(), std::log(static_cast<float>(v)), 1e-6);

  Tensor peaked = Tensor::zeros({1, 4});
  peaked.at(0, 2) = 50.0f;
  Tensor l2 = cross_entropy(tape, peaked, {2});
  EXPECT_LT(l2.scalar(), 1e-9);
}

TEST(CrossEntropy, TwoClassHandValue) {
  Tape<double> tape;
  Tensor64 logits = Tensor64::from({1, 2}, {1, 0});
  Tensor64 loss = cross_entropy(tape, logits, {0});
  EXPECT_NEAR(loss.scalar(), 0.3132616875182228, 1e-12);
}

TEST(CrossEntropy, OutOfRangeTarget) {
  Tape<float> tape;
  Tensor logits = Tensor::zeros({1, 4});
  EXPECT_THROW(cross_entropy(tape, logits, {4}), std::invalid_argument);
}

TEST(CrossEntropy, MaskSelectsPositions) {
  Tape<float> tape;
  Tensor logits = Tensor::zeros({2, 3});
  logits.at(0, 0) = 50.0f;  // position 0 near-certain, position 1 uniform
  std::vector<uint8_t> only_first{1, 0};
  Tensor l = cross_entropy(tape, logits, {0, 1}, &only_first);
  EXPECT_LT(l.scalar(), 1e-9);
  std::vector<uint8_t> only_second{0, 1};
  Tensor l2 = cross_entropy(tape, logits, {0, 1}, &only_second);
  EXPECT_NEAR(l2.scalar(), std::log(3.0f), 1e-6);
}

TEST(Backward, SumGivesOnes) {
  Tape<float> tape;
  Tensor x = Tensor::from({2, 2}, {1, 2, 3, 4});
  x.set_requires_grad(true);
  Tensor loss = sum(tape, x);
  tape.backward(loss);
  for (int i = 0; i < 4; ++i) EXPECT_FLOAT_EQ((*x.grad)[i], 1.0f);
}

TEST(Backward, AccumulatesAcrossPaths) {
  Tape<float> tape;
  Tensor x = Tensor::from({1, 2}, {1, 2});
  x.set_requires_grad(true);
  // x appears twice; grad must be the sum of both path contributions
  Tensor two_paths = add(tape, x, x);
  Tensor loss = sum(tape, two_paths);
  tape.backward(loss);
  EXPECT_FLOAT_EQ((*x.grad)[0], 2.0f);
  EXPECT_FLOAT_EQ((*x.grad)[1], 2.0f);
}

TEST(Backward, RejectsNonScalar) {
  Tape<float> tape;
  Tensor x = Tensor::zeros({2, 2});
  x.set_requires_grad(true);
  Tensor y = add(tape, x, x);
  EXPECT_THROW(tape.backward(y), std::invalid_argument);
}

TEST(GradCheck, LinearIsExact) {
  Rng rng(13);
  Tensor64 x = rand64({4}, rng);
  auto f = [&](Tape<double>& tape) { return sum(tape, scale(tape, x, 3.0)); };
  EXPECT_LT(grad_check<double>(f, {&x}, 1e-5), 1e-9);
}

TEST(GradCheck, AttentionShapedChain) {
  Rng rng(17);
  Tensor64 a = rand64({3, 4}, rng);
  Tensor64 b = rand64({4, 5}, rng);
  auto f = [&](Tape<double>& tape) {
    Tensor64 logits = matmul(tape, a, b);
    Tensor64 p = softmax_rows(tape, logits);
    // feed probabilities back through a cross-entropy-style reduction
    return cross_entropy(tape, logits, {1, 2, 3});
  };
  EXPECT_LT(grad_check<double>(f, {&a, &b}, 1e-5), 1e-4);
}

TEST(GradCheck, DetectsCorruptedBackwardRule) {
  Rng rng(19);
  Tensor64 x = rand64({4}, rng);
  auto f = [&](Tape<double>& tape) {
    // forward doubles, but the recorded rule claims the factor is 3
    Tensor64 out = Tensor64::zeros(x.shape);
    for (int64_t i = 0; i < x.size(); ++i) (*out.data)[i] = 2.0 * (*x.data)[i];
    if (tape.recording && x.requires_grad) {
      out.set_requires_grad(true);
      tape.record([x, out]() mutable {
        if (x.grad)
          for (int64_t i = 0; i < x.size(); ++i)
            (*x.grad)[i] += 3.0 * (*out.grad)[i];
      });
    }
    return sum(tape, out);
  };
  EXPECT_GT(grad_check<double>(f, {&x}, 1e-5), 1e-2);
}

// Every differentiable op, 20 random instances each, 64-bit.
TEST(GradCheck, AllOpsFiniteDifferenceSweep) {
  Rng rng(23);
  for (int trial = 0; trial < 20; ++trial) {
    const int m = rng.uniform_int(1, 4), k = rng.uniform_int(2, 5),
              n = rng.uniform_int(2, 5);
    Tensor64 a = rand64({m, k}, rng);
    Tensor64 b = rand64({k, n}, rng);
    Tensor64 bt = rand64({n, k}, rng);
    Tensor64 c = rand64({m, k}, rng);
    Tensor64 row = rand64({k}, rng);
    Tensor64 g = rand64({k}, rng);
    Tensor64 bias = rand64({k}, rng);
    Tensor64 w1 = rand64({m, n}, rng);
    Tensor64 w2 = rand64({m, k}, rng);
    Tensor64 w3 = rand64({m + m, k}, rng);
    Tensor64 table = rand64({4, k}, rng);
    std::vector<int> ids;
    for (int i = 0; i < m; ++i) ids.push_back(rng.uniform_int(0, 3));
    std::vector<int> targets;
    for (int i = 0; i < m; ++i) targets.push_back(rng.uniform_int(0, k - 1));
    Tensor64 mixw = rand64({2}, rng);

    auto check = [&](const char* name,
                     std::function<Tensor64(Tape<double>&)> f,
                     std::vector<Tensor64*> inputs) {
      EXPECT_LT(grad_check<double>(f, inputs, 1e-5), 1e-4) << name;
    };

    check("matmul", [&](Tape<double>& t) {
      return weighted_loss(t, matmul(t, a, b), w1);
    }, {&a, &b});
    check("matmul_nt", [&](Tape<double>& t) {
      return weighted_loss(t, matmul_nt(t, a, bt), w1);
    }, {&a, &bt});
    check("add", [&](Tape<double>& t) {
      return weighted_loss(t, add(t, a, c), w2);
    }, {&a, &c});
    check("mul", [&](Tape<double>& t) {
      return weighted_loss(t, mul(t, a, c), w2);
    }, {&a, &c});
    check("add_row", [&](Tape<double>& t) {
      return weighted_loss(t, add_row(t, a, row), w2);
    }, {&a, &row});
    check("scale", [&](Tape<double>& t) {
      return weighted_loss(t, scale(t, a, 1.7), w2);
    }, {&a});
    check("concat_rows", [&](Tape<double>& t) {
      return weighted_loss(t, concat_rows(t, a, c), w3);
    }, {&a, &c});
    Tensor64 w_cc = rand64({m, k + k}, rng);
    check("concat_cols", [&](Tape<double>& t) {
      return weighted_loss(t, concat_cols(t, {a, c}), w_cc);
    }, {&a, &c});
    check("slice", [&](Tape<double>& t) {
      Tensor64 s = slice_rows(t, a, 0, m);
      Tensor64 s2 = slice_cols(t, s, 1, k);
      return sum(t, s2);
    }, {&a});
    check("softmax", [&](Tape<double>& t) {
      return weighted_loss(t, softmax_rows(t, a), w2);
    }, {&a});
    check("layer_norm", [&](Tape<double>& t) {
      return weighted_loss(t, layer_norm(t, a, g, bias), w2);
    }, {&a, &g, &bias});
    check("gelu", [&](Tape<double>& t) {
      return weighted_loss(t, gelu(t, a), w2);
    }, {&a});
    check("embedding", [&](Tape<double>& t) {
      return weighted_loss(t, embedding(t, table, ids), w2);
    }, {&table});
    check("cross_entropy", [&](Tape<double>& t) {
      return cross_entropy(t, a, targets);
    }, {&a});
    check("weighted_sum", [&](Tape<double>& t) {
      return weighted_loss(t, weighted_sum(t, mixw, {a, c}), w2);
    }, {&a, &c, &mixw});
  }
}

TEST(Tape, ReplayDeterminism) {
  auto run = [](uint64_t seed) {
    Rng rng(seed);
    Tensor x = Tensor::randn({4, 8}, rng);
    x.set_requires_grad(true);
    Tensor w = Tensor::randn({8, 8}, rng);
    w.set_requires_grad(true);
    Tape<float> tape;
    Tensor h = gelu(tape, matmul(tape, x, w));
    Tensor loss = cross_entropy(tape, matmul_nt(tape, h, w), {1, 2, 3, 4});
    tape.backward(loss);
    std::vector<float> out = *loss.data;
    out.insert(out.end(), x.grad->begin(), x.grad->end());
    out.insert(out.end(), w.grad->begin(), w.grad->end());
    return out;
  };
  auto r1 = run(31), r2 = run(31);
  ASSERT_EQ(r1.size(), r2.size());
  for (size_t i = 0; i < r1.size(); ++i)
    EXPECT_EQ(r1[i], r2[i]) << "bitwise mismatch at " << i;
}

TEST(Tensor, FiniteAfterForwardOnBoundedInputs) {
  Rng rng(37);
  Tape<float> tape;
  for (int trial = 0; trial < 10; ++trial) {
    Tensor x = Tensor::randn({3, 5}, rng, 1e4);
    for (auto& v : *x.data) v = std::clamp(v, -1e4f, 1e4f);
    EXPECT_TRUE(all_finite(softmax_rows(tape, x)));
    EXPECT_TRUE(all_finite(gelu(tape, x)));
    Tensor g1 = Tensor::full({5}, 1.0f);
    Tensor b1 = Tensor::zeros({5});
    EXPECT_TRUE(all_finite(layer_norm(tape, x, g1, b1)));
  }
}
