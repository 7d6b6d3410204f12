#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstring>
#include <vector>

#include "actloc/gradcheck.hpp"
#include "actloc/ops.hpp"
#include "actloc/rng.hpp"
#include "actloc/tape.hpp"
#include "actloc/tensor.hpp"

using namespace actloc;

namespace {

Tensor random_param(Shape shape, Rng& rng, std::string name, double lo = -1.0, double hi = 1.0) {
  Tensor t = Tensor::param(std::move(shape), std::move(name));
  for (long long i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

// Uniform values bounded away from zero, for kinked ops.
Tensor random_param_off_zero(Shape shape, Rng& rng, std::string name) {
  Tensor t = Tensor::param(std::move(shape), std::move(name));
  for (long long i = 0; i < t.size(); ++i)
    t[i] = rng.uniform(0.1, 1.0) * (rng.bernoulli(0.5) ? 1.0 : -1.0);
  return t;
}

}  // namespace

TEST_CASE("backprop of a plain sum gives unit gradients") {
  Tensor x = Tensor::param({2, 3}, "x");
  for (long long i = 0; i < x.size(); ++i) x[i] = 0.5 * static_cast<double>(i);
  Tape tape;
  Tensor loss = sum_all(&tape, x);
  tape.backprop(loss);
  REQUIRE(x.has_grad());
  for (double g : x.grad()) CHECK(g == 1.0);
  CHECK(loss.grad()[0] == 1.0);
}

TEST_CASE("backprop of mean of squares gives 2x/n") {
  Rng rng(41);
  Tensor x = random_param({3, 4}, rng, "x");
  Tape tape;
  Tensor loss = mean_all(&tape, mul(&tape, x, x));
  tape.backprop(loss);
  const double n = static_cast<double>(x.size());
  for (long long i = 0; i < x.size(); ++i)
    CHECK(std::fabs(x.grad()[static_cast<std::size_t>(i)] - 2.0 * x[i] / n) <= 1e-12);
}

TEST_CASE("finite differences on a sum of squares are tight") {
  Rng rng(42);
  Tensor x = random_param({3, 4}, rng, "x");
  auto res = finite_difference_check(
      [&](Tape& t) { return sum_all(&t, mul(&t, x, x)); }, {x});
  CHECK(res.max_rel_err <= 1e-7);
}

TEST_CASE("backprop rejects non-scalar and untracked losses") {
  Tensor x = Tensor::param({4}, "x");
  Tape tape;
  Tensor y = relu(&tape, x);
  CHECK_THROWS_AS(tape.backprop(y), std::invalid_argument);

  Tensor plain(Shape{1}, 2.0);  // never recorded
  CHECK_THROWS_AS(tape.backprop(plain), std::invalid_argument);

  // A graph built entirely from non-parameters is untracked end to end.
  Tape t2;
  Tensor c(Shape{3}, 1.0);
  Tensor s = sum_all(&t2, c);
  CHECK(!s.tracked());
  CHECK_THROWS_AS(t2.backprop(s), std::invalid_argument);
}

TEST_CASE("frozen parameters receive no gradient") {
  Rng rng(43);
  Tensor x = random_param({2, 2}, rng, "x");
  Tensor w = random_param({2, 2}, rng, "w");
  w.set_requires_grad(false);
  Tape tape;
  Tensor loss = sum_all(&tape, mul(&tape, x, w));
  CHECK(loss.tracked());
  tape.backprop(loss);
  CHECK(x.has_grad());
  CHECK(!w.has_grad());
  for (long long i = 0; i < x.size(); ++i)
    CHECK(std::fabs(x.grad()[static_cast<std::size_t>(i)] - w[i]) <= 1e-15);
}

TEST_CASE("gradients accumulate within a tape and reset across tapes") {
  Tensor x = Tensor::param({3}, "x");
  x[0] = 1.0;
  x[1] = 2.0;
  x[2] = 3.0;
  {
    Tape tape;
    Tensor loss = sum_all(&tape, add(&tape, x, x));
    tape.backprop(loss);
    for (double g : x.grad()) CHECK(g == 2.0);
  }
  {
    Tape tape;
    Tensor loss = sum_all(&tape, x);
    tape.backprop(loss);
    for (double g : x.grad()) CHECK(g == 1.0);  // not 3.0: previous grads cleared
  }
}

TEST_CASE("finite differences validate every primitive") {
  Rng rng(100);
  const int kTrials = 10;
  const double kTol = 1e-5;

  SECTION("conv2d") {
    for (int t = 0; t < kTrials; ++t) {
      const int stride = 1 + rng.below_int(2);
      const int pad = rng.below_int(2);
      const int k = 1 + rng.below_int(3);
      Tensor x = random_param({1, 2, 4, 5}, rng, "x");
      Tensor w = random_param({2, 2, k, k}, rng, "w");
      Tensor b = random_param({2}, rng, "b");
      auto res = finite_difference_check(
          [&](Tape& tp) { return mean_all(&tp, conv2d(&tp, x, w, b, stride, pad)); }, {x, w, b});
      INFO("conv trial " << t << " worst " << res.worst);
      CHECK(res.max_rel_err <= kTol);
    }
  }

  SECTION("batchnorm train mode") {
    for (int t = 0; t < kTrials; ++t) {
      Tensor x = random_param({3, 2, 2, 2}, rng, "x");
      Tensor scale = random_param({2}, rng, "scale", 0.5, 1.5);
      Tensor shift = random_param({2}, rng, "shift");
      auto res = finite_difference_check(
          [&](Tape& tp) {
            Tensor y = batchnorm2d(&tp, x, scale, shift, 1e-5, BnMode::train, nullptr, nullptr);
            return mean_all(&tp, mul(&tp, y, y));
          },
          {x, scale, shift});
      INFO("bn-train trial " << t << " worst " << res.worst);
      CHECK(res.max_rel_err <= kTol);
    }
  }

  SECTION("batchnorm eval mode") {
    for (int t = 0; t < kTrials; ++t) {
      Tensor x = random_param({2, 2, 3, 3}, rng, "x");
      Tensor scale = random_param({2}, rng, "scale", 0.5, 1.5);
      Tensor shift = random_param({2}, rng, "shift");
      Tensor rm(Shape{2});
      Tensor rv(Shape{2});
      for (int c = 0; c < 2; ++c) {
        rm[c] = rng.uniform(-0.5, 0.5);
        rv[c] = rng.uniform(0.5, 2.0);
      }
      auto res = finite_difference_check(
          [&](Tape& tp) {
            Tensor y = batchnorm2d(&tp, x, scale, shift, 1e-5, BnMode::eval, &rm, &rv);
            return mean_all(&tp, mul(&tp, y, y));
          },
          {x, scale, shift});
      INFO("bn-eval trial " << t << " worst " << res.worst);
      CHECK(res.max_rel_err <= kTol);
    }
  }

  SECTION("relu away from the kink") {
    for (int t = 0; t < kTrials; ++t) {
      Tensor x = random_param_off_zero({3, 4}, rng, "x");
      auto res = finite_difference_check(
          [&](Tape& tp) { return mean_all(&tp, relu(&tp, x)); }, {x});
      CHECK(res.max_rel_err <= kTol);
    }
  }

  SECTION("sigmoid") {
    for (int t = 0; t < kTrials; ++t) {
      Tensor x = random_param({3, 4}, rng, "x", -3.0, 3.0);
      auto res = finite_difference_check(
          [&](Tape& tp) { return mean_all(&tp, sigmoid(&tp, x)); }, {x});
      CHECK(res.max_rel_err <= kTol);
    }
  }

  SECTION("log") {
    for (int t = 0; t < kTrials; ++t) {
      Tensor x = random_param({2, 5}, rng, "x", 0.1, 2.0);
      auto res = finite_difference_check(
          [&](Tape& tp) { return mean_all(&tp, log(&tp, x)); }, {x});
      CHECK(res.max_rel_err <= kTol);
    }
  }

  SECTION("exp") {
    for (int t = 0; t < kTrials; ++t) {
      Tensor x = random_param({2, 5}, rng, "x", -2.0, 2.0);
      auto res = finite_difference_check(
          [&](Tape& tp) { return mean_all(&tp, exp(&tp, x)); }, {x});
      CHECK(res.max_rel_err <= kTol);
    }
  }

  SECTION("clamp away from its bounds") {
    for (int t = 0; t < kTrials; ++t) {
      Tensor x = Tensor::param({3, 3}, "x");
      for (long long i = 0; i < x.size(); ++i) {
        // Either well inside [-1, 1] or well outside it.
        const double inside = rng.uniform(-0.9, 0.9);
        const double outside = rng.uniform(1.1, 2.0) * (rng.bernoulli(0.5) ? 1.0 : -1.0);
        x[i] = rng.bernoulli(0.5) ? inside : outside;
      }
      auto res = finite_difference_check(
          [&](Tape& tp) { return mean_all(&tp, mul(&tp, clamp(&tp, x, -1.0, 1.0), x)); }, {x});
      CHECK(res.max_rel_err <= kTol);
    }
  }

  SECTION("affine, add, mul") {
    for (int t = 0; t < kTrials; ++t) {
      Tensor a = random_param({2, 3}, rng, "a");
      Tensor b = random_param({2, 3}, rng, "b");
      auto res = finite_difference_check(
          [&](Tape& tp) {
            Tensor y = add(&tp, affine(&tp, a, 1.7, -0.3), mul(&tp, a, b));
            return mean_all(&tp, y);
          },
          {a, b});
      CHECK(res.max_rel_err <= kTol);
    }
  }

  SECTION("broadcast mul over channels") {
    for (int t = 0; t < kTrials; ++t) {
      Tensor map = random_param({2, 1, 3, 3}, rng, "map", 0.05, 0.95);
      Tensor feat = random_param({2, 3, 3, 3}, rng, "feat");
      auto res = finite_difference_check(
          [&](Tape& tp) { return mean_all(&tp, mul(&tp, map, feat)); }, {map, feat});
      CHECK(res.max_rel_err <= kTol);
      auto res2 = finite_difference_check(
          [&](Tape& tp) { return mean_all(&tp, mul(&tp, feat, map)); }, {map, feat});
      CHECK(res2.max_rel_err <= kTol);
    }
  }

  SECTION("global average pool") {
    for (int t = 0; t < kTrials; ++t) {
      Tensor x = random_param({2, 3, 3, 4}, rng, "x");
      auto res = finite_difference_check(
          [&](Tape& tp) {
            Tensor g = global_avg_pool(&tp, x);
            return mean_all(&tp, mul(&tp, g, g));
          },
          {x});
      CHECK(res.max_rel_err <= kTol);
    }
  }

  SECTION("bilinear upsample") {
    for (int t = 0; t < kTrials; ++t) {
      Tensor x = random_param({1, 2, 2, 3}, rng, "x");
      auto res = finite_difference_check(
          [&](Tape& tp) {
            Tensor u = upsample_bilinear(&tp, x, 5, 7);
            return mean_all(&tp, mul(&tp, u, u));
          },
          {x});
      CHECK(res.max_rel_err <= kTol);
    }
  }

  SECTION("linear") {
    for (int t = 0; t < kTrials; ++t) {
      Tensor x = random_param({3, 4}, rng, "x");
      Tensor w = random_param({2, 4}, rng, "w");
      Tensor b = random_param({2}, rng, "b");
      auto res = finite_difference_check(
          [&](Tape& tp) {
            Tensor y = linear(&tp, x, w, b);
            return mean_all(&tp, mul(&tp, y, y));
          },
          {x, w, b});
      CHECK(res.max_rel_err <= kTol);
    }
  }

  SECTION("row logsumexp and gather") {
    for (int t = 0; t < kTrials; ++t) {
      Tensor x = random_param({4, 5}, rng, "x", -2.0, 2.0);
      std::vector<int> idx{1, 4, 0, 2};
      auto res = finite_difference_check(
          [&](Tape& tp) {
            Tensor nll = add(&tp, row_logsumexp(&tp, x),
                             affine(&tp, gather_rows(&tp, x, idx), -1.0, 0.0));
            return mean_all(&tp, nll);
          },
          {x});
      CHECK(res.max_rel_err <= kTol);
    }
  }

  SECTION("sum_all and mean_all") {
    for (int t = 0; t < kTrials; ++t) {
      Tensor x = random_param({3, 3}, rng, "x");
      auto res = finite_difference_check(
          [&](Tape& tp) {
            return add(&tp, sum_all(&tp, mul(&tp, x, x)),
                       affine(&tp, mean_all(&tp, x), 0.5, 0.0));
          },
          {x});
      CHECK(res.max_rel_err <= kTol);
    }
  }
}

TEST_CASE("gradients are bit-identical across repeated runs") {
  auto run = [](std::uint64_t seed) {
    Rng rng(seed);
    Tensor x = random_param({2, 3, 8, 8}, rng, "x");
    Tensor w = random_param({4, 3, 3, 3}, rng, "w");
    Tensor b = random_param({4}, rng, "b");
    Tensor scale = random_param({4}, rng, "scale", 0.5, 1.5);
    Tensor shift = random_param({4}, rng, "shift");
    Tensor lw = random_param({3, 4}, rng, "lw");
    Tensor lb = random_param({3}, rng, "lb");
    Tape tape;
    Tensor h = conv2d(&tape, x, w, b, 1, 1);
    h = batchnorm2d(&tape, h, scale, shift, 1e-5, BnMode::train, nullptr, nullptr);
    h = relu(&tape, h);
    Tensor logits = linear(&tape, global_avg_pool(&tape, h), lw, lb);
    Tensor nll = add(&tape, row_logsumexp(&tape, logits),
                     affine(&tape, gather_rows(&tape, logits, {0, 1}), -1.0, 0.0));
    Tensor loss = mean_all(&tape, nll);
    tape.backprop(loss);
    std::vector<double> all;
    for (const Tensor* p : {&x, &w, &b, &scale, &shift, &lw, &lb})
      all.insert(all.end(), p->grad().begin(), p->grad().end());
    all.push_back(loss.value());
    return all;
  };
  const auto a = run(555);
  const auto b = run(555);
  REQUIRE(a.size() == b.size());
  CHECK(std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0);
  CHECK(run(556) != a);
}

TEST_CASE("gradcheck reports parameters the graph never touched") {
  Tensor x = Tensor::param({2}, "x");
  x[0] = 1.0;
  x[1] = 2.0;
  Tensor unused = Tensor::param({2}, "unused");
  CHECK_THROWS_WITH(
      finite_difference_check([&](Tape& t) { return sum_all(&t, x); }, {x, unused}),
      Catch::Matchers::ContainsSubstring("unused"));
}
