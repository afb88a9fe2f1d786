#include <doctest.h>

#include <cstring>

#include "support.hpp"

using namespace pcrobust;
using testsupport::finite_diff_grad;
using testsupport::max_rel_err;
using testsupport::random_tensor_away_from;

namespace {

/// Gradient check scaffold: reduces an arbitrary op output to a scalar with
/// fixed random weights, then compares autodiff against central differences.
void gradcheck(const std::function<Tensor(const Tensor&)>& op, const Tensor& x,
               std::uint64_t weight_seed, double tol = 1e-6) {
  Rng rng(weight_seed);
  Tensor probe = op(x);
  Tensor weights(probe.shape());
  for (double& w : weights.data()) w = rng.uniform(-1.0, 1.0);

  auto scalar_fn = [&](const Tensor& input) { return sum(mul(op(input), weights)); };

  Tensor analytic = input_gradient(scalar_fn, x);
  auto numeric_fn = [&](const std::vector<double>& flat) {
    NoGradGuard no_grad;
    return scalar_fn(Tensor(x.shape(), flat)).item();
  };
  const std::vector<double> numeric = finite_diff_grad(numeric_fn, x.data());
  CHECK(max_rel_err(analytic.data(), numeric) < tol);
}

}  // namespace

TEST_SUITE("autograd") {
  TEST_CASE("relu subgradient: zero below, one above") {
    Tensor x(Shape{2}, {-1.0, 2.0});
    Tensor g = input_gradient([](const Tensor& t) { return sum(relu(t)); }, x);
    CHECK(g[0] == 0.0);
    CHECK(g[1] == 1.0);
  }

  TEST_CASE("softmax rows sum to one, so the summed gradient vanishes") {
    Tensor a(Shape{2, 5});
    Rng rng(11);
    for (double& v : a.data()) v = rng.uniform(-2.0, 2.0);
    Tensor g = input_gradient([](const Tensor& t) { return sum(softmax_rows(t)); }, a);
    for (double v : g.data()) CHECK(std::abs(v) < 1e-12);
  }

  TEST_CASE("backward before forward is rejected") {
    Tensor leaf(Shape{2}, {1.0, 2.0});
    CHECK_THROWS_AS(backward(leaf), std::logic_error);
    leaf.set_requires_grad(true);
    CHECK_THROWS_AS(backward(leaf), std::invalid_argument);  // non-scalar, no recorded op
  }

  TEST_CASE("elementwise and reduction primitives pass finite differences") {
    Rng rng(23);
    for (int trial = 0; trial < 5; ++trial) {
      Tensor x = random_tensor_away_from(rng, Shape{3, 4}, -2.0, 2.0, {0.0});
      Tensor other = random_tensor_away_from(rng, Shape{3, 4}, -2.0, 2.0, {});
      gradcheck([&](const Tensor& t) { return add(t, other); }, x, 100 + trial);
      gradcheck([&](const Tensor& t) { return sub(other, t); }, x, 200 + trial);
      gradcheck([&](const Tensor& t) { return mul(t, other); }, x, 300 + trial);
      gradcheck([](const Tensor& t) { return relu(t); }, x, 400 + trial);
      gradcheck([](const Tensor& t) { return tanh_act(t); }, x, 500 + trial);
      gradcheck([](const Tensor& t) { return add_scalar(t, 0.7); }, x, 600 + trial);
      gradcheck([](const Tensor& t) { return mul_scalar(t, -1.3); }, x, 700 + trial);
      gradcheck([](const Tensor& t) { return reshape(t, Shape{12}); }, x, 800 + trial);
      gradcheck([](const Tensor& t) { return sum(t); }, x, 900 + trial);
      gradcheck([](const Tensor& t) { return mean(t); }, x, 1000 + trial);
    }
  }

  TEST_CASE("matrix and conv primitives pass finite differences") {
    Rng rng(29);
    for (int trial = 0; trial < 3; ++trial) {
      Tensor a = random_tensor_away_from(rng, Shape{3, 4}, -1.0, 1.0, {});
      Tensor b = random_tensor_away_from(rng, Shape{4, 2}, -1.0, 1.0, {});
      gradcheck([&](const Tensor& t) { return matmul(t, b); }, a, 1100 + trial);
      gradcheck([&](const Tensor& t) { return matmul(a, t); }, b, 1200 + trial);

      Tensor bias = random_tensor_away_from(rng, Shape{4}, -1.0, 1.0, {});
      Tensor rows = random_tensor_away_from(rng, Shape{3, 4}, -1.0, 1.0, {});
      gradcheck([&](const Tensor& t) { return add_bias(t, bias); }, rows, 1300 + trial);
      gradcheck([&](const Tensor& t) { return add_bias(rows, t); }, bias, 1400 + trial);

      Tensor img = random_tensor_away_from(rng, Shape{2, 2, 5, 5}, -1.0, 1.0, {});
      Tensor kernel = random_tensor_away_from(rng, Shape{3, 2, 3, 3}, -1.0, 1.0, {});
      Tensor cbias = random_tensor_away_from(rng, Shape{3}, -1.0, 1.0, {});
      gradcheck([&](const Tensor& t) { return conv2d(t, kernel, cbias); }, img, 1500 + trial);
      gradcheck([&](const Tensor& t) { return conv2d(img, t, cbias); }, kernel, 1600 + trial);
      gradcheck([&](const Tensor& t) { return conv2d(img, kernel, t); }, cbias, 1700 + trial);
      gradcheck([](const Tensor& t) { return maxpool2d(t, 2, 2); }, img, 1800 + trial);
    }
  }

  TEST_CASE("softmax family and row ops pass finite differences") {
    Rng rng(31);
    const std::vector<int> labels = {1, 0, 3};
    for (int trial = 0; trial < 3; ++trial) {
      Tensor logits = random_tensor_away_from(rng, Shape{3, 4}, -2.0, 2.0, {});
      gradcheck([](const Tensor& t) { return softmax_rows(t); }, logits, 1900 + trial);
      gradcheck([](const Tensor& t) { return log_softmax_rows(t); }, logits, 2000 + trial);
      gradcheck([&](const Tensor& t) { return row_gather(t, labels); }, logits, 2100 + trial);

      Tensor per_row = random_tensor_away_from(rng, Shape{3}, -1.0, 1.0, {});
      gradcheck([&](const Tensor& t) { return sub_row_scalar(t, per_row); }, logits,
                2200 + trial);
      gradcheck([&](const Tensor& t) { return sub_row_scalar(logits, t); }, per_row,
                2300 + trial);
    }
  }

  TEST_CASE("backward is linear in the seed gradient") {
    Rng rng(37);
    Tensor x = random_tensor_away_from(rng, Shape{2, 3}, -2.0, 2.0, {0.0});
    Tensor seed(Shape{2, 3});
    for (double& v : seed.data()) v = rng.uniform(-1.0, 1.0);
    const double alpha = 2.75;

    auto run = [&](const Tensor& s) {
      Tensor leaf = x.clone();
      leaf.set_requires_grad(true);
      Tensor out = tanh_act(mul(leaf, leaf));
      backward(out, s);
      return leaf.grad_tensor();
    };

    Tensor g1 = run(seed);
    Tensor scaled_seed = seed.clone();
    for (double& v : scaled_seed.data()) v *= alpha;
    Tensor g2 = run(scaled_seed);
    for (std::size_t i = 0; i < g1.numel(); ++i) {
      CHECK(g2[i] == doctest::Approx(alpha * g1[i]).epsilon(1e-12));
    }
  }

  TEST_CASE("gradient of a sum equals the sum of per-output gradients") {
    Rng rng(41);
    Tensor x = random_tensor_away_from(rng, Shape{4}, -1.5, 1.5, {0.0});
    auto op = [](const Tensor& t) { return tanh_act(mul_scalar(t, 1.7)); };

    Tensor total = input_gradient([&](const Tensor& t) { return sum(op(t)); }, x);
    std::vector<double> accumulated(x.numel(), 0.0);
    for (std::size_t j = 0; j < x.numel(); ++j) {
      Tensor seed(Shape{4}, 0.0);
      seed[j] = 1.0;
      Tensor leaf = x.clone();
      leaf.set_requires_grad(true);
      Tensor out = op(leaf);
      backward(out, seed);
      for (std::size_t i = 0; i < x.numel(); ++i) accumulated[i] += leaf.grad()[i];
    }
    CHECK(max_rel_err(total.data(), accumulated) < 1e-12);
  }
}

TEST_SUITE("input_gradient") {
  TEST_CASE("linear-softmax CE gradient matches the closed form") {
    // logits = x W + b; dCE/dx = W (p - onehot(y)).
    Rng rng(43);
    const std::size_t d = 6, k = 4;
    Tensor w = random_tensor_away_from(rng, Shape{d, k}, -1.0, 1.0, {});
    Tensor b = random_tensor_away_from(rng, Shape{k}, -0.5, 0.5, {});
    std::vector<std::unique_ptr<Layer>> layers;
    layers.push_back(std::make_unique<DenseLayer>(w.clone(), b.clone()));
    Network net(ArchitectureSpec::mlp(Shape{d}, static_cast<int>(k), {}), std::move(layers));

    Tensor x = random_tensor_away_from(rng, Shape{1, d}, 0.0, 1.0, {});
    const std::vector<int> y = {2};
    Tensor grad = input_gradient(
        net, [](const Tensor& logits, const std::vector<int>& labels) {
          return ce_loss(logits, labels);
        },
        x, y);

    // Closed form.
    std::vector<double> logits(k, 0.0);
    for (std::size_t j = 0; j < k; ++j) {
      for (std::size_t i = 0; i < d; ++i) logits[j] += x[i] * w[i * k + j];
      logits[j] += b[j];
    }
    const std::vector<double> p = softmax(logits);
    std::vector<double> expected(d, 0.0);
    for (std::size_t i = 0; i < d; ++i) {
      for (std::size_t j = 0; j < k; ++j) {
        expected[i] += w[i * k + j] * (p[j] - (static_cast<int>(j) == y[0] ? 1.0 : 0.0));
      }
    }
    CHECK(max_rel_err(grad.data(), expected) < 1e-10);
  }

  TEST_CASE("loss independent of the input gives a zero tensor") {
    Tensor x(Shape{3}, {0.2, 0.4, 0.6});
    Tensor g = input_gradient([](const Tensor&) { return Tensor::scalar(5.0); }, x);
    for (double v : g.data()) CHECK(v == 0.0);
  }

  TEST_CASE("non-scalar loss is rejected") {
    Tensor x(Shape{3}, {0.2, 0.4, 0.6});
    CHECK_THROWS_AS(input_gradient([](const Tensor& t) { return mul_scalar(t, 2.0); }, x),
                    std::invalid_argument);
  }

  TEST_CASE("two-layer MLP gradient survives finite differences") {
    Network net = Network::build(ArchitectureSpec::mlp(Shape{8}, 3, {10}), 17);
    Rng rng(47);
    Tensor x = random_tensor_away_from(rng, Shape{2, 8}, 0.05, 0.95, {});
    const std::vector<int> y = {0, 2};

    Tensor analytic = input_gradient(
        net, [](const Tensor& logits, const std::vector<int>& labels) {
          return ce_loss(logits, labels);
        },
        x, y);
    auto numeric_fn = [&](const std::vector<double>& flat) {
      NoGradGuard no_grad;
      return ce_loss(net.forward(Tensor(x.shape(), flat)), y).item();
    };
    const std::vector<double> numeric = finite_diff_grad(numeric_fn, x.data());
    CHECK(max_rel_err(analytic.data(), numeric) < 1e-5);
  }
}
