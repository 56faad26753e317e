#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <set>
#include <vector>

#include "kdaudit/graph.hpp"
#include "kdaudit/ops.hpp"
#include "kdaudit/optim.hpp"
#include "kdaudit/rng.hpp"

using namespace kdaudit;

// ----------------------------------------------------------------- RNG

TEST_CASE("rng: equal seeds give equal sequences") {
  RngStream a(42), b(42);
  for (int i = 0; i < 10000; ++i) REQUIRE(a.next_u64() == b.next_u64());
}

TEST_CASE("rng: uniform draws live in [0,1) and differ across seeds") {
  RngStream a(1), b(2);
  bool any_diff = false;
  for (int i = 0; i < 1000; ++i) {
    const double u = a.uniform();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
    any_diff = any_diff || (u != b.uniform());
  }
  CHECK(any_diff);
}

TEST_CASE("rng: derived streams never collide across the experiment matrix") {
  // every (experiment seed, condition label, job seed) triple used by the
  // default matrix must map to a distinct stream seed
  std::set<uint64_t> seeds;
  size_t count = 0;
  const std::vector<std::string> labels = {"kd", "rcd", "siddo", "ls", "feature_kd",
                                           "dropout", "rcd_noise", "char_offsets"};
  for (uint64_t exp_seed : {0ull, 1ull}) {
    for (const auto& label : labels) {
      for (uint64_t job = 0; job < 20; ++job) {
        seeds.insert(derive_seed(exp_seed, label, job));
        ++count;
      }
    }
  }
  CHECK(seeds.size() == count);
}

TEST_CASE("rng: uniform_below is in range and unbiased enough") {
  RngStream rng(7);
  std::vector<int> counts(10, 0);
  for (int i = 0; i < 100000; ++i) ++counts[rng.uniform_below(10)];
  for (int c : counts) CHECK(std::abs(c - 10000) < 500);
}

// -------------------------------------------------------------- softmax

TEST_CASE("softmax: all-equal logits are uniform") {
  const auto p = softmax(std::vector<double>{0, 0, 0}, 1.0);
  for (double v : p) CHECK(v == doctest::Approx(1.0 / 3).epsilon(1e-12));
}

TEST_CASE("softmax: frozen values for (1,2,3)") {
  // independent evaluation of e^{z_i}/sum e^{z_j} in 64-bit: e=2.718281828...,
  // sum = e + e^2 + e^3 = 30.19287485057736
  const auto p = softmax(std::vector<double>{1, 2, 3}, 1.0);
  CHECK(p[0] == doctest::Approx(0.09003057317038046).epsilon(1e-10));
  CHECK(p[1] == doctest::Approx(0.24472847105479767).epsilon(1e-10));
  CHECK(p[2] == doctest::Approx(0.66524095577482186).epsilon(1e-10));
}

TEST_CASE("softmax: shift invariance") {
  RngStream rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> z(5), zc(5);
    const double c = rng.normal() * 10;
    for (int i = 0; i < 5; ++i) {
      z[i] = rng.normal() * 3;
      zc[i] = z[i] + c;
    }
    const auto p = softmax(z, 1.0);
    const auto q = softmax(zc, 1.0);
    for (int i = 0; i < 5; ++i) CHECK(std::abs(p[i] - q[i]) < 1e-7);
    double sum = 0;
    for (double v : p) {
      CHECK(v >= 0.0);
      sum += v;
    }
    CHECK(std::abs(sum - 1.0) < 1e-6);
  }
}

TEST_CASE("softmax: contract violations") {
  CHECK_THROWS_AS((void)softmax(std::vector<double>{1.0}, 1.0), std::invalid_argument);
  CHECK_THROWS_AS((void)softmax(std::vector<double>{1, 2}, 0.0), std::invalid_argument);
  CHECK_THROWS_AS((void)softmax(std::vector<double>{1, 2}, -1.0), std::invalid_argument);
  const double inf = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS((void)softmax(std::vector<double>{1, inf}, 1.0), std::invalid_argument);
}

// ------------------------------------------------------------------ KL

TEST_CASE("kl: identity, frozen hand values, nonnegativity") {
  const std::vector<double> p{0.3, 0.7};
  CHECK(kl_divergence(p, p) == 0.0);  // exactly, after clamping

  // hand evaluation: p=(1,0), q=(0.5,0.5) -> 1*ln(1/0.5) = ln 2
  CHECK(kl_divergence(std::vector<double>{1, 0}, std::vector<double>{0.5, 0.5}) ==
        doctest::Approx(std::log(2.0)).epsilon(1e-12));

  // hand evaluation: 0.5 ln(0.5/0.9) + 0.5 ln(0.5/0.1) = 0.510825623765990
  CHECK(kl_divergence(std::vector<double>{0.5, 0.5}, std::vector<double>{0.9, 0.1}) ==
        doctest::Approx(0.5108256237659905).epsilon(1e-12));

  RngStream rng(11);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> a(4), b(4);
    double sa = 0, sb = 0;
    for (int i = 0; i < 4; ++i) {
      a[i] = rng.uniform() + 1e-3;
      b[i] = rng.uniform() + 1e-3;
      sa += a[i];
      sb += b[i];
    }
    for (int i = 0; i < 4; ++i) {
      a[i] /= sa;
      b[i] /= sb;
    }
    CHECK(kl_divergence(a, b) >= 0.0);
  }
  CHECK_THROWS_AS((void)kl_divergence(std::vector<double>{1}, std::vector<double>{0.5, 0.5}),
                  std::invalid_argument);
}

// ------------------------------------------------------------- backward

namespace {
// analytic gradients captured per test case for the finite-difference oracle
std::vector<std::vector<double>> g_grads;
}  // namespace

TEST_CASE("backward: loss = x^2 at x=3 gives gradient 6") {
  GraphContext<double> ctx;
  Tensor<double> x({1}, {3.0});
  auto* xn = leaf(ctx, x, true);
  auto* loss = hadamard(ctx, xn, xn);  // x*x
  ctx.backward(loss);
  CHECK(xn->grad[0] == doctest::Approx(6.0).epsilon(1e-14));
}

TEST_CASE("backward: softmax cross-entropy gradient is p - y") {
  GraphContext<double> ctx;
  Tensor<double> z({1, 3}, {0.5, -1.0, 2.0});
  auto* zn = leaf(ctx, z, true);
  const std::vector<int32_t> y{2};
  auto* loss = nll_from_logprobs(ctx, log_softmax_rows(ctx, zn), y);
  ctx.backward(loss);
  const auto p = softmax(std::vector<double>{0.5, -1.0, 2.0}, 1.0);
  for (int k = 0; k < 3; ++k) {
    const double expected = p[k] - (k == 2 ? 1.0 : 0.0);
    CHECK(zn->grad[k] == doctest::Approx(expected).epsilon(1e-12));
  }
}

TEST_CASE("backward: diamond graph accumulates through shared nodes once") {
  GraphContext<double> ctx;
  Tensor<double> x({1}, {1.5});
  auto* xn = leaf(ctx, x, true);
  auto* sum = add(ctx, xn, xn);          // 2x
  auto* loss = hadamard(ctx, sum, sum);  // 4x^2 -> d/dx = 8x = 12
  ctx.backward(loss);
  CHECK(xn->grad[0] == doctest::Approx(12.0).epsilon(1e-14));
  // every reachable node visited exactly once: leaf, add, hadamard
  CHECK(ctx.last_backward_visits() == 3);
}

TEST_CASE("backward: rejects non-scalar losses and inference contexts") {
  GraphContext<double> ctx;
  Tensor<double> x({2}, {1.0, 2.0});
  auto* xn = leaf(ctx, x, true);
  auto* y = add(ctx, xn, xn);
  CHECK_THROWS_AS(ctx.backward(y), std::invalid_argument);
  GraphContext<double> inference;
  inference.grad_enabled = false;
  CHECK_THROWS_AS(inference.backward(y), InternalError);
}

TEST_CASE("backward: finite differences agree on 100 random small graphs") {
  RngStream rng(21);
  for (int trial = 0; trial < 100; ++trial) {
    const int64_t m = 2 + int64_t(rng.uniform_below(3));
    const int64_t k = 2 + int64_t(rng.uniform_below(3));
    const int64_t n = 2 + int64_t(rng.uniform_below(3));
    Tensor<double> A({m, k}), B({k, n}), bias({n}), gain({n});
    for (auto& v : A.data) v = rng.normal();
    for (auto& v : B.data) v = rng.normal();
    for (auto& v : bias.data) v = rng.normal() * 0.1;
    for (auto& v : gain.data) v = 1.0 + 0.1 * rng.normal();
    std::vector<int32_t> labels(size_t(m));
    for (auto& l : labels) l = int32_t(rng.uniform_below(uint64_t(n)));
    const int variant = int(rng.uniform_below(3));

    auto build = [&](GraphContext<double>& ctx, bool collect) -> Node<double>* {
      auto* a = leaf(ctx, A, true);
      auto* b = leaf(ctx, B, true);
      auto* bb = leaf(ctx, bias, true);
      auto* gg = leaf(ctx, gain, true);
      Node<double>* h = add_rowvec(ctx, matmul(ctx, a, b), bb);
      if (variant == 0) h = relu(ctx, h);
      if (variant == 1) h = gelu(ctx, h);
      if (variant == 2) h = layernorm(ctx, h, gg, bb);
      auto* loss = nll_from_logprobs(ctx, log_softmax_rows(ctx, h), labels);
      if (collect) {
        g_grads.clear();
        // run backward here so grads are available to the oracle loop
        ctx.backward(loss);
        for (auto* leaf_node : {a, b, bb, gg}) {
          std::vector<double> g(size_t(leaf_node->n), 0.0);
          if (leaf_node->grad) std::copy(leaf_node->grad, leaf_node->grad + leaf_node->n, g.begin());
          g_grads.push_back(std::move(g));
        }
      }
      return loss;
    };

    // evaluate analytic grads once
    {
      GraphContext<double> ctx;
      build(ctx, true);
    }
    // central differences, h = 1e-3, relative tolerance 1e-4
    std::vector<Tensor<double>*> params{&A, &B, &bias, &gain};
    const double h = 1e-3;
    for (size_t pi = 0; pi < params.size(); ++pi) {
      for (int64_t i = 0; i < params[pi]->numel(); ++i) {
        const double saved = params[pi]->data[i];
        params[pi]->data[i] = saved + h;
        GraphContext<double> cp;
        const double up = build(cp, false)->value[0];
        params[pi]->data[i] = saved - h;
        GraphContext<double> cm;
        const double down = build(cm, false)->value[0];
        params[pi]->data[i] = saved;
        const double fd = (up - down) / (2 * h);
        const double ad = g_grads[pi][size_t(i)];
        const double denom = std::max({std::abs(fd), std::abs(ad), 1e-6});
        REQUIRE(std::abs(fd - ad) / denom < 1e-4);
      }
    }
  }
}

// ------------------------------------------------------------ optimizer

TEST_CASE("optimizer: sgd textbook step") {
  Tensor<float> p({1}, {1.0f});
  std::vector<float> g{2.0f};
  Optimizer<float> opt(OptimizerKind::Sgd, 0.1);
  std::vector<std::pair<Tensor<float>*, std::span<const float>>> pg{{&p, g}};
  opt.step(pg);
  CHECK(p.data[0] == doctest::Approx(0.8f).epsilon(1e-7));
  CHECK(opt.step_count() == 1);
}

TEST_CASE("optimizer: adam first-step magnitude is about lr") {
  // bias-corrected first step: update = lr * g / (|g| + eps') ~ lr
  for (const double g0 : {0.5, -3.0, 10.0}) {
    Tensor<float> p({1}, {0.0f});
    std::vector<float> g{float(g0)};
    Optimizer<float> opt(OptimizerKind::Adam, 3e-4);
    std::vector<std::pair<Tensor<float>*, std::span<const float>>> pg{{&p, g}};
    opt.step(pg);
    CHECK(std::abs(std::abs(double(p.data[0])) - 3e-4) < 3e-7);
    CHECK((p.data[0] < 0) == (g0 > 0));
  }
}

TEST_CASE("optimizer: zero gradients leave parameters unchanged") {
  Tensor<float> p_sgd({2}, {1.0f, -2.0f});
  Tensor<float> p_adam({2}, {1.0f, -2.0f});
  std::vector<float> g{0.0f, 0.0f};
  Optimizer<float> sgd(OptimizerKind::Sgd, 0.1);
  Optimizer<float> adam(OptimizerKind::Adam, 0.1);
  std::vector<std::pair<Tensor<float>*, std::span<const float>>> pg1{{&p_sgd, g}};
  std::vector<std::pair<Tensor<float>*, std::span<const float>>> pg2{{&p_adam, g}};
  for (int i = 0; i < 3; ++i) {
    sgd.step(pg1);
    adam.step(pg2);
  }
  CHECK(p_sgd.data[0] == 1.0f);
  CHECK(p_sgd.data[1] == -2.0f);
  CHECK(std::abs(p_adam.data[0] - 1.0f) < 1e-12);
  CHECK(std::abs(p_adam.data[1] + 2.0f) < 1e-12);
}

TEST_CASE("optimizer: NaN gradient raises TrainingDiverged with the step index") {
  Tensor<float> p({1}, {1.0f});
  std::vector<float> good{1.0f};
  std::vector<float> bad{std::numeric_limits<float>::quiet_NaN()};
  Optimizer<float> opt(OptimizerKind::Adam, 1e-3);
  std::vector<std::pair<Tensor<float>*, std::span<const float>>> pg{{&p, good}};
  opt.step(pg);
  pg[0].second = bad;
  try {
    opt.step(pg);
    FAIL("expected TrainingDiverged");
  } catch (const TrainingDiverged& e) {
    CHECK(e.step == 2);
  }
}

TEST_CASE("optimizer: adam converges on a quadratic") {
  // sanity: minimize (x-3)^2
  Tensor<float> x({1}, {0.0f});
  Optimizer<float> opt(OptimizerKind::Adam, 0.05);
  for (int i = 0; i < 2000; ++i) {
    std::vector<float> g{2.0f * (x.data[0] - 3.0f)};
    std::vector<std::pair<Tensor<float>*, std::span<const float>>> pg{{&x, g}};
    opt.step(pg);
  }
  CHECK(std::abs(x.data[0] - 3.0f) < 1e-2);
}
