#include <doctest.h>

#include <cmath>
#include <limits>

#include "dtlab/optim.hpp"

using namespace dtlab;

namespace {

ParamStore make_store(std::vector<double> a, std::vector<double> b) {
  ParamStore store;
  const int64_t na = static_cast<int64_t>(a.size());
  const int64_t nb = static_cast<int64_t>(b.size());
  store.add("a", Tensor({na}, std::move(a)));
  store.add("b", Tensor({nb}, std::move(b)));
  return store;
}

}  // namespace

TEST_CASE("zero gradients and zero weight decay leave parameters unchanged") {
  ParamStore store = make_store({1.0, -2.0}, {3.0});
  AdamWConfig cfg;
  cfg.weight_decay = 0.0;
  AdamW opt(cfg);
  opt.step(store, 0.1, 1.0);
  CHECK(store.find("a")->data() == std::vector<double>{1.0, -2.0});
  CHECK(store.find("b")->data() == std::vector<double>{3.0});
}

TEST_CASE("global-norm clipping halves gradients with norm 2 and clip 1") {
  ParamStore store = make_store({0.0, 0.0}, {0.0, 0.0});
  // grads (sqrt2, sqrt2/2, sqrt2/2, 1) -> norm 2
  store.find("a")->grad() = {std::sqrt(2.0), std::sqrt(2.0) / 2.0};
  store.find("b")->grad() = {std::sqrt(2.0) / 2.0, 1.0};
  const double pre = clip_global_norm(store, 1.0);
  CHECK(pre == doctest::Approx(2.0));
  CHECK(store.find("a")->grad()[0] == doctest::Approx(std::sqrt(2.0) / 2.0));
  CHECK(store.find("b")->grad()[1] == doctest::Approx(0.5));
}

TEST_CASE("clipping preserves direction: post-clip equals a positive scalar multiple") {
  ParamStore store = make_store({0.0, 0.0, 0.0}, {0.0});
  store.find("a")->grad() = {3.0, -4.0, 12.0};
  store.find("b")->grad() = {-5.0};
  std::vector<double> before = {3.0, -4.0, 12.0, -5.0};
  clip_global_norm(store, 0.7);
  std::vector<double> after;
  for (double g : store.find("a")->grad()) after.push_back(g);
  after.push_back(store.find("b")->grad()[0]);
  const double ratio = after[0] / before[0];
  CHECK(ratio > 0.0);
  for (size_t i = 0; i < before.size(); ++i)
    CHECK(after[i] == doctest::Approx(before[i] * ratio).epsilon(1e-12));
}

TEST_CASE("clipping below the threshold is a no-op") {
  ParamStore store = make_store({0.0}, {0.0});
  store.find("a")->grad() = {0.3};
  store.find("b")->grad() = {0.4};
  CHECK(clip_global_norm(store, 1.0) == doctest::Approx(0.5));
  CHECK(store.find("a")->grad()[0] == 0.3);
}

TEST_CASE("first step moves a scalar by about lr against the gradient sign") {
  // hand evaluation at step 1: m_hat = g, v_hat = g^2, update = lr*sign(g)
  for (double g : {0.37, -2.4}) {
    ParamStore store;
    store.add("w", Tensor({1}, {1.0}));
    store.find("w")->grad() = {g};
    AdamWConfig cfg;
    cfg.weight_decay = 0.0;
    AdamW opt(cfg);
    opt.step(store, 0.01, 0.0);
    const double delta = store.find("w")->data()[0] - 1.0;
    CHECK(delta == doctest::Approx(-0.01 * (g > 0 ? 1.0 : -1.0)).epsilon(1e-6));
  }
}

TEST_CASE("weight decay is decoupled from the adaptive update") {
  ParamStore store;
  store.add("w", Tensor({1}, {2.0}));
  store.find("w")->grad() = {0.0};
  AdamWConfig cfg;
  cfg.weight_decay = 0.1;
  AdamW opt(cfg);
  opt.step(store, 0.5, 0.0);
  // zero gradient: only the decay term lr*wd*w moves the parameter
  CHECK(store.find("w")->data()[0] == doctest::Approx(2.0 - 0.5 * 0.1 * 2.0));
}

TEST_CASE("non-finite gradients abort naming the parameter") {
  ParamStore store = make_store({1.0}, {1.0});
  store.find("a")->grad() = {1.0};
  store.find("b")->grad() = {std::numeric_limits<double>::quiet_NaN()};
  AdamW opt;
  CHECK_THROWS_WITH_AS(opt.step(store, 0.1, 1.0), doctest::Contains("b"), std::runtime_error);
}

TEST_CASE("optimizer state round-trips through serialize") {
  ParamStore store = make_store({1.0, 2.0}, {3.0});
  AdamW opt;
  for (int i = 0; i < 3; ++i) {
    store.find("a")->grad() = {0.1, -0.2};
    store.find("b")->grad() = {0.3};
    opt.step(store, 0.01, 1.0);
  }
  const std::string blob = opt.serialize();
  ParamStore store2 = make_store({0.0, 0.0}, {0.0});
  store2.find("a")->data() = store.find("a")->data();
  store2.find("b")->data() = store.find("b")->data();
  AdamW opt2;
  opt2.deserialize(blob, store2);
  CHECK(opt2.step_count() == 3);
  store.find("a")->grad() = {0.5, 0.5};
  store.find("b")->grad() = {-0.5};
  store2.find("a")->grad() = {0.5, 0.5};
  store2.find("b")->grad() = {-0.5};
  opt.step(store, 0.01, 1.0);
  opt2.step(store2, 0.01, 1.0);
  CHECK(store.find("a")->data() == store2.find("a")->data());
  CHECK(store.find("b")->data() == store2.find("b")->data());
}

TEST_CASE("lr must be positive") {
  ParamStore store = make_store({1.0}, {1.0});
  AdamW opt;
  CHECK_THROWS_AS(opt.step(store, 0.0, 1.0), std::invalid_argument);
}
