#pragma once

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "pcrobust/pcrobust.hpp"

namespace testsupport {

using pcrobust::Shape;
using pcrobust::Tensor;

/// Central finite differences of a scalar function, h = 1e-5 by default.
/// Lives here so every gradient check is independent of the autograd path.
inline std::vector<double> finite_diff_grad(const std::function<double(const std::vector<double>&)>& f,
                                            std::vector<double> x, double h = 1e-5) {
  std::vector<double> grad(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double saved = x[i];
    x[i] = saved + h;
    const double fp = f(x);
    x[i] = saved - h;
    const double fm = f(x);
    x[i] = saved;
    grad[i] = (fp - fm) / (2.0 * h);
  }
  return grad;
}

/// Relative error with a floor that keeps exact zero-zero matches clean.
inline double rel_err(double a, double b) {
  const double denom = std::max({std::abs(a), std::abs(b), 1e-8});
  return std::abs(a - b) / denom;
}

inline double max_rel_err(const std::vector<double>& a, const std::vector<double>& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, rel_err(a[i], b[i]));
  return worst;
}

/// Uniform values in [lo, hi] that keep a margin away from `kinks` so
/// central differences stay on one side of every nondifferentiable point.
inline Tensor random_tensor_away_from(pcrobust::Rng& rng, Shape shape, double lo, double hi,
                                      const std::vector<double>& kinks, double margin = 1e-3) {
  Tensor t(shape);
  for (double& v : t.data()) {
    for (int tries = 0; tries < 1000; ++tries) {
      v = rng.uniform(lo, hi);
      bool clear = true;
      for (double kink : kinks) {
        if (std::abs(v - kink) < margin) {
          clear = false;
          break;
        }
      }
      if (clear) break;
    }
  }
  return t;
}

/// One-dimensional two-class linear-softmax model: logits (w0*x+b0, w1*x+b1).
/// The closed-form decision boundary and the distance to it anchor the
/// attack oracles.
struct Linear1d {
  double w0, b0, w1, b1;

  pcrobust::Network network() const {
    using namespace pcrobust;
    Tensor w(Shape{1, 2}, {w0, w1});
    Tensor b(Shape{2}, {b0, b1});
    std::vector<std::unique_ptr<Layer>> layers;
    layers.push_back(std::make_unique<DenseLayer>(std::move(w), std::move(b)));
    ArchitectureSpec spec = ArchitectureSpec::mlp(Shape{1, 1, 1}, 2, {});
    return Network(std::move(spec), std::move(layers));
  }

  double boundary() const { return (b1 - b0) / (w0 - w1); }
  double gap(double x) const { return (w0 * x + b0) - (w1 * x + b1); }
  double distance_to_boundary(double x) const { return std::abs(gap(x)) / std::abs(w0 - w1); }
};

inline Tensor batch1d(const std::vector<double>& xs) {
  Tensor t(Shape{xs.size(), 1, 1, 1}, xs);
  return t;
}

/// Dataset root for MNIST-dependent tests: PC_ROBUST_DATA_DIR, else ./data.
inline std::string data_dir() {
  if (const char* env = std::getenv("PC_ROBUST_DATA_DIR")) return env;
  return "data";
}

inline std::string mnist_path(const std::string& file) {
  return (std::filesystem::path(data_dir()) / "mnist" / file).string();
}

inline bool mnist_available() {
  return std::filesystem::exists(mnist_path("t10k-images-idx3-ubyte")) ||
         std::filesystem::exists(mnist_path("t10k-images-idx3-ubyte.gz"));
}

}  // namespace testsupport
