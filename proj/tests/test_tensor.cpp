#include <doctest.h>

#include <cmath>
#include <random>

#include "dtlab/finite_diff.hpp"
#include "dtlab/tensor.hpp"

using namespace dtlab;

namespace {

Tensor random_tensor(Shape shape, uint64_t seed, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  return Tensor::randn(std::move(shape), rng, scale);
}

}  // namespace

TEST_CASE("matmul identity and forced products") {
  Tensor i2({2, 2}, {1, 0, 0, 1});
  Tensor a({2, 2}, {1, 2, 3, 4});
  Tensor out = matmul(i2, a);
  CHECK(out.data() == std::vector<double>{1, 2, 3, 4});

  Tensor row({1, 2}, {1, 0});
  Tensor col({2, 1}, {0, 5});
  CHECK(matmul(row, col).value() == 0.0);
}

TEST_CASE("matmul rejects mismatched shapes naming both") {
  Tensor a({2, 3});
  Tensor b({2, 3});
  CHECK_THROWS_WITH_AS(matmul(a, b), doctest::Contains("[2x3]"), std::invalid_argument);
}

TEST_CASE("matmul gradient matches finite differences") {
  Tensor b = random_tensor({4, 2}, 7);
  auto f = [&](const Tensor& x) { return sum_all(tanh_act(matmul(x, b))); };
  CHECK(finite_diff_check(f, random_tensor({3, 4}, 8)) < 1e-6);
  Tensor a = random_tensor({3, 4}, 9);
  auto g = [&](const Tensor& x) { return sum_all(tanh_act(matmul(a, x))); };
  CHECK(finite_diff_check(g, random_tensor({4, 2}, 10)) < 1e-6);
}

TEST_CASE("softmax_masked forced cases") {
  Tensor logits({1, 2}, {0, 0});
  Tensor mask({1, 2}, {1, 1});
  auto out = softmax_masked(logits, mask);
  CHECK(out.at(0) == doctest::Approx(0.5));
  CHECK(out.at(1) == doctest::Approx(0.5));

  Tensor l3({1, 3}, {10, 10, 10});
  Tensor m3({1, 3}, {1, 0, 0});
  auto o3 = softmax_masked(l3, m3);
  CHECK(o3.at(0) == 1.0);
  CHECK(o3.at(1) == 0.0);
  CHECK(o3.at(2) == 0.0);
}

TEST_CASE("softmax_masked rows sum to 1 within 1e-12, masked entries exactly zero") {
  std::mt19937_64 rng(3);
  Tensor logits = random_tensor({6, 5}, 4, 3.0);
  Tensor mask({6, 5});
  std::uniform_int_distribution<int> coin(0, 1);
  for (int64_t r = 0; r < 6; ++r) {
    bool any = false;
    for (int64_t c = 0; c < 5; ++c) {
      const bool allow = coin(rng) == 1;
      mask.at(r * 5 + c) = allow ? 1.0 : 0.0;
      any = any || allow;
    }
    if (!any) mask.at(r * 5) = 1.0;
  }
  auto out = softmax_masked(logits, mask);
  for (int64_t r = 0; r < 6; ++r) {
    double sum = 0.0;
    for (int64_t c = 0; c < 5; ++c) {
      if (mask.at(r * 5 + c) == 0.0) CHECK(out.at(r * 5 + c) == 0.0);
      sum += out.at(r * 5 + c);
    }
    CHECK(std::abs(sum - 1.0) < 1e-12);
  }
}

TEST_CASE("softmax_masked rejects fully masked rows") {
  Tensor logits({2, 2}, {1, 2, 3, 4});
  Tensor mask({2, 2}, {1, 1, 0, 0});
  CHECK_THROWS_WITH_AS(softmax_masked(logits, mask), doctest::Contains("row 1"),
                       std::invalid_argument);
}

TEST_CASE("softmax_masked gradient matches finite differences") {
  Tensor mask({1, 3}, {1, 1, 1});
  Tensor pick({1, 3}, {0, 1, 0});
  auto f = [&](const Tensor& x) { return sum_all(mul(softmax_masked(x, mask), pick)); };
  CHECK(finite_diff_check(f, Tensor({1, 3}, {1, 2, 3})) < 1e-6);
}

TEST_CASE("layer_norm constant and symmetric rows") {
  Tensor gain({3}, {1, 1, 1});
  Tensor bias({3}, {0, 0, 0});
  auto out = layer_norm(Tensor({1, 3}, {1, 1, 1}), gain, bias);
  CHECK(out.at(0) == doctest::Approx(0.0));
  CHECK(out.at(1) == doctest::Approx(0.0));

  Tensor g2({2}, {1, 1});
  Tensor b2({2}, {0, 0});
  auto pair = layer_norm(Tensor({1, 2}, {-1, 1}), g2, b2);
  CHECK(pair.at(0) == doctest::Approx(-1.0).epsilon(1e-4));
  CHECK(pair.at(1) == doctest::Approx(1.0).epsilon(1e-4));
}

TEST_CASE("layer_norm pre-affine rows have zero mean and unit variance") {
  const int64_t d = 16;
  Tensor gain = Tensor::full({d}, 1.0);
  Tensor bias({d});
  Tensor x = random_tensor({4, d}, 11, 2.5);
  auto out = layer_norm(x, gain, bias);
  for (int64_t r = 0; r < 4; ++r) {
    double mean = 0.0, var = 0.0;
    for (int64_t c = 0; c < d; ++c) mean += out.at(r * d + c);
    mean /= static_cast<double>(d);
    for (int64_t c = 0; c < d; ++c) {
      const double t = out.at(r * d + c) - mean;
      var += t * t;
    }
    var /= static_cast<double>(d);
    CHECK(std::abs(mean) < 1e-9);
    CHECK(std::abs(var - 1.0) < 1e-3);
  }
}

TEST_CASE("layer_norm gradients (input, gain, bias) match finite differences") {
  Tensor gain({4}, {1.1, 0.9, 1.3, 0.8});
  Tensor bias({4}, {0.1, -0.2, 0.0, 0.3});
  Tensor probe({1, 4}, {0.4, 0.8, -0.3, 0.2});
  Tensor x = random_tensor({3, 4}, 12);
  auto fx = [&](const Tensor& t) {
    return sum_all(mul(layer_norm(t, gain, bias), concat_rows({probe, probe, probe})));
  };
  CHECK(finite_diff_check(fx, x) < 1e-6);
  auto fg = [&](const Tensor& g) {
    return sum_all(mul(layer_norm(x, g, bias), concat_rows({probe, probe, probe})));
  };
  CHECK(finite_diff_check(fg, gain) < 1e-6);
  auto fb = [&](const Tensor& b) {
    return sum_all(mul(layer_norm(x, gain, b), concat_rows({probe, probe, probe})));
  };
  CHECK(finite_diff_check(fb, bias) < 1e-6);
}

TEST_CASE("activations forced values") {
  auto r = activations(Tensor({2}, {-1, 2}), Activation::relu);
  CHECK(r.data() == std::vector<double>{0, 2});
  CHECK(activations(Tensor::scalar(0.0), Activation::gelu).value() == 0.0);
}

TEST_CASE("gelu gradient at x=1 matches finite differences") {
  auto f = [](const Tensor& x) { return sum_all(activations(x, Activation::gelu)); };
  CHECK(finite_diff_check(f, Tensor::scalar(1.0)) < 1e-5);
  CHECK(finite_diff_check(f, random_tensor({5}, 13)) < 1e-5);
}

TEST_CASE("cross entropy forced values") {
  Tensor confident({1, 3}, {1e9, 0, 0});
  CHECK(loss_cross_entropy(confident, {0}, {0}).value() == doctest::Approx(0.0));

  Tensor uniform({1, 4}, {0.7, 0.7, 0.7, 0.7});
  CHECK(loss_cross_entropy(uniform, {2}, {0}).value() == doctest::Approx(std::log(4.0)));
}

TEST_CASE("cross entropy ignores masked rows exactly") {
  Tensor two({2, 3}, {1, 2, 3, 9, 9, 9});
  Tensor one({1, 3}, {1, 2, 3});
  const double masked = loss_cross_entropy(two, {1, 0}, {0, 1}).value();
  const double solo = loss_cross_entropy(one, {1}, {0}).value();
  CHECK(masked == doctest::Approx(solo));
}

TEST_CASE("cross entropy rejects an all-ignored batch and bad targets") {
  Tensor logits({2, 3});
  CHECK_THROWS_AS(loss_cross_entropy(logits, {0, 0}, {1, 1}), std::invalid_argument);
  CHECK_THROWS_AS(loss_cross_entropy(logits, {0, 3}, {0, 0}), std::invalid_argument);
}

TEST_CASE("cross entropy gradient matches finite differences") {
  auto f = [](const Tensor& x) { return loss_cross_entropy(x, {1, 0}, {0, 0}); };
  CHECK(finite_diff_check(f, random_tensor({2, 4}, 14)) < 1e-6);
}

TEST_CASE("mse forced values and gradient") {
  Tensor p({2}, {0, 2});
  Tensor t({2}, {0, 0});
  CHECK(loss_mse(p, p, {0, 0}).value() == 0.0);
  CHECK(loss_mse(p, t, {0, 0}).value() == doctest::Approx(2.0));

  auto f = [&](const Tensor& x) { return loss_mse(x, t, {0, 0}); };
  CHECK(finite_diff_check(f, p) < 1e-7);
  // analytic gradient is 2(pred-target)/count
  Tensor probe = p;
  probe.set_requires_grad(true);
  ComputationRecord rec;
  {
    RecordScope scope(rec);
    rec.backward(loss_mse(probe, t, {0, 0}));
  }
  CHECK(probe.grad()[1] == doctest::Approx(2.0 * 2.0 / 2.0));
  CHECK_THROWS_AS(loss_mse(p, t, {1, 1}), std::invalid_argument);
}

TEST_CASE("backward of sum gives ones, of x*x gives 2x") {
  Tensor x({3}, {5, -1, 2});
  x.set_requires_grad(true);
  ComputationRecord rec;
  {
    RecordScope scope(rec);
    rec.backward(sum_all(x));
  }
  CHECK(x.grad() == std::vector<double>{1, 1, 1});

  Tensor y({2}, {1, 2});
  y.set_requires_grad(true);
  ComputationRecord rec2;
  {
    RecordScope scope(rec2);
    rec2.backward(sum_all(mul(y, y)));
  }
  CHECK(y.grad() == std::vector<double>{2, 4});
}

TEST_CASE("backward rejects non-scalar loss, reuse, and foreign tensors") {
  Tensor x({2}, {1, 2});
  x.set_requires_grad(true);
  ComputationRecord rec;
  {
    RecordScope scope(rec);
    Tensor y = mul(x, x);
    CHECK_THROWS_AS(rec.backward(y), std::invalid_argument);
    Tensor s = sum_all(y);
    rec.backward(s);
    CHECK_THROWS_WITH_AS(rec.backward(s), doctest::Contains("already consumed"),
                         std::runtime_error);
  }
  ComputationRecord other;
  Tensor stale;
  {
    RecordScope scope(other);
    stale = sum_all(x);
  }
  other.reset();
  CHECK_THROWS_AS(other.backward(stale), std::runtime_error);
}

TEST_CASE("gradient accumulates additively until zeroed") {
  Tensor x({2}, {1, 2});
  x.set_requires_grad(true);
  for (int i = 0; i < 2; ++i) {
    ComputationRecord rec;
    RecordScope scope(rec);
    rec.backward(sum_all(x));
  }
  CHECK(x.grad() == std::vector<double>{2, 2});
  x.zero_grad();
  CHECK(x.grad() == std::vector<double>{0, 0});
}

TEST_CASE("finite_diff_check oracle on known chains") {
  auto fsum = [](const Tensor& x) { return sum_all(x); };
  CHECK(finite_diff_check(fsum, random_tensor({4}, 15)) < 1e-10);

  Tensor mask({1, 5}, {1, 1, 1, 1, 1});
  Tensor pick({1, 5}, {0, 0, 1, 0, 0});
  auto fpick = [&](const Tensor& x) { return sum_all(mul(softmax_masked(x, mask), pick)); };
  CHECK(finite_diff_check(fpick, random_tensor({1, 5}, 16)) < 1e-6);

  Tensor w = random_tensor({6, 6}, 17, 0.4);
  Tensor gain = Tensor::full({6}, 1.0);
  Tensor bias({6});
  auto fchain = [&](const Tensor& x) {
    return sum_all(activations(matmul(layer_norm(x, gain, bias), w), Activation::gelu));
  };
  CHECK(finite_diff_check(fchain, random_tensor({3, 6}, 18)) < 1e-4);
}

TEST_CASE("structural ops differentiate correctly") {
  Tensor probe = random_tensor({2, 3}, 19);
  auto fgather = [&](const Tensor& x) {
    return sum_all(mul(gather_rows(x, {2, 0}), probe));
  };
  CHECK(finite_diff_check(fgather, random_tensor({3, 3}, 20)) < 1e-6);

  auto fslice = [&](const Tensor& x) {
    return sum_all(tanh_act(concat_cols({slice_cols(x, 0, 2), slice_cols(x, 2, 2)})));
  };
  CHECK(finite_diff_check(fslice, random_tensor({3, 4}, 21)) < 1e-6);

  auto fcat = [&](const Tensor& x) {
    return sum_all(tanh_act(concat_rows({slice_rows(x, 0, 1), slice_rows(x, 1, 2)})));
  };
  CHECK(finite_diff_check(fcat, random_tensor({3, 4}, 22)) < 1e-6);

  auto ftrans = [&](const Tensor& x) { return sum_all(tanh_act(transpose(x))); };
  CHECK(finite_diff_check(ftrans, random_tensor({3, 4}, 23)) < 1e-6);

  Tensor v = random_tensor({4}, 24);
  auto frow = [&](const Tensor& x) { return sum_all(tanh_act(add_rowvec(x, v))); };
  CHECK(finite_diff_check(frow, random_tensor({3, 4}, 25)) < 1e-6);
  auto fvec = [&](const Tensor& b) {
    return sum_all(tanh_act(add_rowvec(random_tensor({3, 4}, 26), b)));
  };
  CHECK(finite_diff_check(fvec, v) < 1e-6);

  auto fscale = [&](const Tensor& x) {
    return sum_all(scale_rows(x, {0.0, 1.0, 2.0}));
  };
  CHECK(finite_diff_check(fscale, random_tensor({3, 2}, 27)) < 1e-8);
}

TEST_CASE("dropout is deterministic per seed, inverted, and differentiable") {
  Tensor x = Tensor::full({1000}, 1.0);
  Tensor a = dropout(x, 0.25, 42);
  Tensor b = dropout(x, 0.25, 42);
  CHECK(a.data() == b.data());
  double mean = 0.0;
  int64_t zeros = 0;
  for (double v : a.data()) {
    mean += v;
    if (v == 0.0) zeros += 1;
    else CHECK(v == doctest::Approx(1.0 / 0.75));
  }
  mean /= static_cast<double>(a.numel());
  CHECK(mean == doctest::Approx(1.0).epsilon(0.1));
  CHECK(zeros > 150);
  CHECK(zeros < 350);

  auto f = [](const Tensor& t) { return sum_all(dropout(t, 0.5, 7)); };
  CHECK(finite_diff_check(f, random_tensor({20}, 28)) < 1e-9);
  // rate 0 is the identity
  CHECK(dropout(x, 0.0, 1).data() == x.data());
}

TEST_CASE("forward passes are bit-deterministic") {
  Tensor x = random_tensor({4, 8}, 29);
  Tensor w = random_tensor({8, 8}, 30);
  Tensor g = Tensor::full({8}, 1.0);
  Tensor b({8});
  auto run = [&]() {
    return activations(matmul(layer_norm(dropout(x, 0.1, 99), g, b), w), Activation::gelu);
  };
  CHECK(run().data() == run().data());
}

TEST_CASE("tensor shape bookkeeping") {
  CHECK_THROWS_AS(Tensor({2, 2}, {1, 2, 3}), std::invalid_argument);
  Tensor t({2, 3});
  CHECK(t.numel() == 6);
  CHECK(t.rows() == 2);
  CHECK(t.cols() == 3);
  CHECK(shape_str(t.shape()) == "[2x3]");
  CHECK_THROWS_AS(t.value(), std::invalid_argument);
}
