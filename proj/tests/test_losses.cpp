#include <doctest.h>

#include <algorithm>
#include <numeric>

#include "support.hpp"

using namespace pcrobust;
using testsupport::finite_diff_grad;
using testsupport::max_rel_err;

namespace {

Tensor prob_batch(Rng& rng, std::size_t n, std::size_t k) {
  Tensor probs(Shape{n, k});
  for (std::size_t i = 0; i < n; ++i) {
    double sum = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      probs[i * k + j] = rng.uniform(0.01, 1.0);
      sum += probs[i * k + j];
    }
    for (std::size_t j = 0; j < k; ++j) probs[i * k + j] /= sum;
  }
  return probs;
}

/// Brute-force evaluation of the margin-violation sum, straight off its
/// definition, in extended precision.
double pc_loss_bruteforce(const Tensor& probs, const std::vector<int>& labels, double xi) {
  const std::size_t n = probs.dim(0), k = probs.dim(1);
  long double total = 0.0L;
  for (std::size_t i = 0; i < n; ++i) {
    const double f_y = probs[i * k + static_cast<std::size_t>(labels[i])];
    for (std::size_t j = 0; j < k; ++j) {
      if (static_cast<int>(j) == labels[i]) continue;
      const long double term = static_cast<long double>(probs[i * k + j]) + xi - f_y;
      if (term > 0.0L) total += term;
    }
  }
  return static_cast<double>(total / static_cast<long double>(n));
}

}  // namespace

TEST_SUITE("losses/softmax") {
  TEST_CASE("all-zero logits give the uniform distribution") {
    const std::vector<double> p = softmax(std::vector<double>(10, 0.0));
    for (double v : p) CHECK(v == doctest::Approx(0.1).epsilon(1e-12));
  }

  TEST_CASE("extreme logits do not overflow") {
    const std::vector<double> p = softmax({1000.0, 0.0});
    CHECK(p[0] == doctest::Approx(1.0));
    CHECK(p[1] == doctest::Approx(0.0));
  }

  TEST_CASE("values match direct evaluation of exp(a_k)/sum exp(a_j)") {
    const std::vector<double> p = softmax({1.0, 2.0, 3.0});
    const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
    CHECK(p[0] == doctest::Approx(std::exp(1.0) / z).epsilon(1e-14));
    CHECK(p[1] == doctest::Approx(std::exp(2.0) / z).epsilon(1e-14));
    CHECK(p[2] == doctest::Approx(std::exp(3.0) / z).epsilon(1e-14));
  }

  TEST_CASE("translation invariance within 1e-12") {
    Rng rng(3);
    for (int trial = 0; trial < 20; ++trial) {
      std::vector<double> logits(6);
      for (double& v : logits) v = rng.uniform(-3.0, 3.0);
      const double c = rng.uniform(-10.0, 10.0);
      std::vector<double> shifted = logits;
      for (double& v : shifted) v += c;
      const auto p = softmax(logits), q = softmax(shifted);
      for (std::size_t i = 0; i < p.size(); ++i) CHECK(std::abs(p[i] - q[i]) < 1e-12);
    }
  }
}

TEST_SUITE("losses/ce") {
  TEST_CASE("uniform probabilities cost ln K") {
    Tensor logits(Shape{1, 10}, 0.0);
    CHECK(ce_loss(logits, {3}).item() == doctest::Approx(std::log(10.0)).epsilon(1e-13));
  }

  TEST_CASE("a confident correct prediction costs nothing") {
    Tensor logits(Shape{1, 3}, {60.0, 0.0, 0.0});
    CHECK(ce_loss(logits, {0}).item() == doctest::Approx(0.0).epsilon(1e-12));
  }

  TEST_CASE("matches -ln f_y on explicit probabilities") {
    // softmax(log p) = p for any probability vector.
    Tensor logits(Shape{1, 3}, {std::log(0.7), std::log(0.2), std::log(0.1)});
    CHECK(ce_loss(logits, {0}).item() == doctest::Approx(-std::log(0.7)).epsilon(1e-13));
  }

  TEST_CASE("finite logits never produce an infinite loss") {
    Tensor logits(Shape{1, 2}, {-745.0, 745.0});  // f_y underflows to exactly 0
    const double loss = ce_loss(logits, {0}).item();
    CHECK(std::isfinite(loss));
    CHECK(loss == doctest::Approx(1490.0));
  }

  TEST_CASE("labels outside [0,K) are rejected") {
    Tensor logits(Shape{2, 3}, 0.0);
    CHECK_THROWS_AS(ce_loss(logits, {0, 3}), std::out_of_range);
  }
}

TEST_SUITE("losses/pc") {
  TEST_CASE("margin satisfied means zero loss") {
    Tensor probs(Shape{1, 2}, {1.0, 0.0});
    CHECK(pc_loss(probs, {0}, 0.5).item() == 0.0);
  }

  TEST_CASE("two-class violation by direct substitution") {
    Tensor probs(Shape{1, 2}, {0.6, 0.4});
    CHECK(pc_loss(probs, {0}, 0.995).item() == doctest::Approx(0.795).epsilon(1e-13));
  }

  TEST_CASE("three-class sum over both false classes") {
    Tensor probs(Shape{1, 3}, {0.5, 0.3, 0.2});
    CHECK(pc_loss(probs, {0}, 0.995).item() == doctest::Approx(1.490).epsilon(1e-13));
  }

  TEST_CASE("agrees with the brute-force double loop within 1e-12") {
    Rng rng(17);
    for (int trial = 0; trial < 25; ++trial) {
      const std::size_t n = 1 + rng.index(64);
      const std::size_t k = 2 + rng.index(19);
      Tensor probs = prob_batch(rng, n, k);
      std::vector<int> labels(n);
      for (auto& y : labels) y = static_cast<int>(rng.index(k));
      const double xi = rng.uniform(0.05, 1.0);
      CHECK(std::abs(pc_loss(probs, labels, xi).item() -
                     pc_loss_bruteforce(probs, labels, xi)) < 1e-12);
    }
  }

  TEST_CASE("zero exactly when every sample clears the margin") {
    Rng rng(19);
    for (int trial = 0; trial < 40; ++trial) {
      const std::size_t k = 2 + rng.index(8);
      Tensor probs = prob_batch(rng, 4, k);
      std::vector<int> labels(4);
      for (auto& y : labels) y = static_cast<int>(rng.index(k));
      const double xi = rng.uniform(0.05, 0.9);
      bool all_clear = true;
      for (std::size_t i = 0; i < 4; ++i) {
        const double f_y = probs[i * k + static_cast<std::size_t>(labels[i])];
        double best_false = -1.0;
        for (std::size_t j = 0; j < k; ++j) {
          if (static_cast<int>(j) != labels[i]) best_false = std::max(best_false, probs[i * k + j]);
        }
        if (f_y - best_false < xi) all_clear = false;
      }
      CHECK((pc_loss(probs, labels, xi).item() == 0.0) == all_clear);
    }
  }

  TEST_CASE("raising f_y and renormalizing the rest never increases the loss") {
    Rng rng(23);
    for (int trial = 0; trial < 40; ++trial) {
      const std::size_t k = 3 + rng.index(7);
      Tensor probs = prob_batch(rng, 1, k);
      const int y = static_cast<int>(rng.index(k));
      const double before = pc_loss(probs, {y}, 0.995).item();

      Tensor boosted = probs.clone();
      const double f_y = probs[static_cast<std::size_t>(y)];
      const double f_y_new = f_y + (1.0 - f_y) * rng.uniform(0.05, 0.9);
      const double scale = (1.0 - f_y_new) / (1.0 - f_y);
      for (std::size_t j = 0; j < k; ++j) {
        boosted[j] = static_cast<int>(j) == y ? f_y_new : probs[j] * scale;
      }
      const double after = pc_loss(boosted, {y}, 0.995).item();
      CHECK(after <= before + 1e-12);
    }
  }

  TEST_CASE("permuting classes and labels together changes nothing") {
    Rng rng(29);
    const std::size_t n = 5, k = 6;
    Tensor probs = prob_batch(rng, n, k);
    std::vector<int> labels(n);
    for (auto& y : labels) y = static_cast<int>(rng.index(k));

    std::vector<std::size_t> perm(k);
    std::iota(perm.begin(), perm.end(), 0);
    rng.shuffle(perm);
    Tensor permuted(Shape{n, k});
    std::vector<int> permuted_labels(n);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < k; ++j) permuted[i * k + perm[j]] = probs[i * k + j];
      permuted_labels[i] = static_cast<int>(perm[static_cast<std::size_t>(labels[i])]);
    }
    CHECK(pc_loss(probs, labels, 0.995).item() ==
          doctest::Approx(pc_loss(permuted, permuted_labels, 0.995).item()).epsilon(1e-13));

    Tensor logits = probs;  // any values work as logits for the CE check
    Tensor permuted_logits = permuted;
    CHECK(ce_loss(logits, labels).item() ==
          doctest::Approx(ce_loss(permuted_logits, permuted_labels).item()).epsilon(1e-13));
  }
}

TEST_SUITE("losses/pc-gradient") {
  TEST_CASE("closed form by direct substitution") {
    CHECK(pc_loss_grad_logit_y(0.6, 0.4) == doctest::Approx(-0.48).epsilon(1e-14));
    CHECK(pc_loss_grad_logit_y(1.0, 0.0) == doctest::Approx(0.0));
  }

  TEST_CASE("autodiff of one active margin term matches within 1e-10") {
    Rng rng(31);
    for (int trial = 0; trial < 200; ++trial) {
      const std::size_t k = 2 + rng.index(9);
      Tensor logits(Shape{1, k});
      for (double& v : logits.data()) v = rng.uniform(-3.0, 3.0);
      const int y = static_cast<int>(rng.index(k));
      int yp = static_cast<int>(rng.index(k));
      if (yp == y) yp = (yp + 1) % static_cast<int>(k);

      Tensor leaf = logits.clone();
      leaf.set_requires_grad(true);
      Tensor probs = softmax_rows(leaf);
      Tensor term = add_scalar(sub(row_gather(probs, {yp}), row_gather(probs, {y})), 0.995);
      backward(sum(term));

      const auto p = softmax(logits.data());
      const double expected = pc_loss_grad_logit_y(p[static_cast<std::size_t>(y)],
                                                   p[static_cast<std::size_t>(yp)]);
      CHECK(std::abs(leaf.grad()[static_cast<std::size_t>(y)] - expected) < 1e-10);
    }
  }
}

TEST_SUITE("losses/logit-penalty") {
  TEST_CASE("single sample by direct substitution") {
    Tensor logits(Shape{1, 3}, {3.0, 1.0, 0.0});
    CHECK(logit_penalty(logits, {0}, 0.05, 0.0).item() == doctest::Approx(0.1).epsilon(1e-13));
  }

  TEST_CASE("true logit below the runner-up hits the hinge floor") {
    Tensor logits(Shape{1, 3}, {0.0, 2.0, 1.0});
    CHECK(logit_penalty(logits, {0}, 0.05, 0.0).item() == 0.0);
    // With a threshold the floor contributes -lambda*c_prime per sample.
    CHECK(logit_penalty(logits, {0}, 0.05, 2.0).item() == doctest::Approx(-0.1).epsilon(1e-13));
  }

  TEST_CASE("batch of two averages the gaps") {
    Tensor logits(Shape{2, 3}, {2.0, 0.0, -1.0, 4.0, 0.0, -2.0});
    CHECK(logit_penalty(logits, {0, 0}, 0.05, 0.0).item() ==
          doctest::Approx(0.15).epsilon(1e-13));
  }

  TEST_CASE("fewer than two classes is rejected") {
    Tensor logits(Shape{2, 1}, {0.5, 0.5});
    CHECK_THROWS_AS(logit_penalty(logits, {0, 0}, 0.05, 0.0), std::invalid_argument);
  }
}

TEST_SUITE("losses/combined") {
  TEST_CASE("lambda = 0 collapses to the pc loss exactly") {
    Rng rng(37);
    Tensor logits(Shape{4, 5});
    for (double& v : logits.data()) v = rng.uniform(-2.0, 2.0);
    const std::vector<int> labels = {0, 3, 1, 4};
    PcLossConfig cfg;
    cfg.lambda = 0.0;
    const double combined = combined_objective(logits, labels, cfg).item();
    const double pc = pc_loss(softmax_rows(logits), labels, cfg.xi).item();
    CHECK(combined == pc);
  }

  TEST_CASE("tiny margin on well-separated samples leaves only the penalty") {
    Tensor logits(Shape{1, 3}, {9.0, 0.0, -1.0});
    PcLossConfig cfg;
    cfg.xi = 1e-9;
    cfg.lambda = 0.05;
    const double pc = pc_loss(softmax_rows(logits), {0}, cfg.xi).item();
    CHECK(pc == 0.0);
    CHECK(combined_objective(logits, {0}, cfg).item() ==
          doctest::Approx(logit_penalty(logits, {0}, cfg.lambda, cfg.c_prime).item()));
  }

  TEST_CASE("gradient with respect to logits passes finite differences") {
    Rng rng(41);
    PcLossConfig cfg;  // xi=0.995, lambda=0.05
    for (int trial = 0; trial < 10; ++trial) {
      const std::size_t n = 3, k = 5;
      Tensor logits(Shape{n, k});
      std::vector<int> labels(n);
      // Resample until every hinge argument and runner-up race is clear of
      // its kink, otherwise finite differences straddle the corner.
      for (int attempt = 0; attempt < 1000; ++attempt) {
        for (double& v : logits.data()) v = rng.uniform(-2.0, 2.0);
        for (auto& y : labels) y = static_cast<int>(rng.index(k));
        bool safe = true;
        for (std::size_t i = 0; i < n && safe; ++i) {
          const double* row = logits.data().data() + i * k;
          const auto p = softmax(std::vector<double>(row, row + k));
          const std::size_t y = static_cast<std::size_t>(labels[i]);
          std::vector<double> false_logits;
          for (std::size_t j = 0; j < k; ++j) {
            if (j == y) continue;
            false_logits.push_back(row[j]);
            if (std::abs(p[j] + cfg.xi - p[y]) < 1e-3) safe = false;
          }
          std::sort(false_logits.rbegin(), false_logits.rend());
          if (std::abs(row[y] - false_logits[0]) < 1e-3) safe = false;       // d_yj kink
          if (std::abs(false_logits[0] - false_logits[1]) < 1e-3) safe = false;  // j flip
        }
        if (safe) break;
      }

      Tensor analytic = input_gradient(
          [&](const Tensor& t) { return combined_objective(t, labels, cfg); }, logits);
      auto numeric_fn = [&](const std::vector<double>& flat) {
        NoGradGuard no_grad;
        return combined_objective(Tensor(logits.shape(), flat), labels, cfg).item();
      };
      const std::vector<double> numeric = finite_diff_grad(numeric_fn, logits.data());
      CHECK(max_rel_err(analytic.data(), numeric) < 1e-6);
    }
  }
}
