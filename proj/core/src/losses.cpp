#include "pcrobust/losses.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace pcrobust {

namespace {

void check_labels(std::size_t n, std::size_t k, const std::vector<int>& labels, const char* op) {
  if (labels.size() != n) {
    throw std::invalid_argument(std::string(op) + ": " + std::to_string(labels.size()) +
                                " labels for " + std::to_string(n) + " samples");
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= k) {
      throw std::out_of_range(std::string(op) + ": label " + std::to_string(y) +
                              " outside [0," + std::to_string(k) + ")");
    }
  }
}

void check_batch(const Tensor& t, const char* op) {
  if (!t.defined() || t.shape().size() != 2) {
    throw std::invalid_argument(std::string(op) + ": expected a (N,K) batch");
  }
}

}  // namespace

void PcLossConfig::validate() const {
  if (!(xi > 0.0) || xi > 1.0) {
    throw std::invalid_argument("pc loss: margin xi must be in (0,1], got " + std::to_string(xi));
  }
  if (lambda < 0.0) {
    throw std::invalid_argument("pc loss: multiplier lambda must be nonnegative");
  }
  if (c_prime < 0.0) {
    throw std::invalid_argument("pc loss: threshold c_prime must be nonnegative");
  }
}

std::vector<double> softmax(const std::vector<double>& logits) {
  if (logits.empty()) throw std::invalid_argument("softmax: empty logits");
  for (double v : logits) {
    if (std::isnan(v)) throw std::invalid_argument("softmax: NaN input rejected");
  }
  std::vector<double> out(logits.size());
  const double mx = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - mx);
    z += out[i];
  }
  const double inv = 1.0 / z;
  for (double& v : out) v *= inv;
  return out;
}

Tensor ce_loss(const Tensor& logits, const std::vector<int>& labels) {
  check_batch(logits, "ce_loss");
  const std::size_t n = logits.dim(0);
  check_labels(n, logits.dim(1), labels, "ce_loss");
  Tensor picked = row_gather(log_softmax_rows(logits), labels);
  return mul_scalar(sum(picked), -1.0 / static_cast<double>(n));
}

Tensor pc_loss(const Tensor& probs, const std::vector<int>& labels, double xi) {
  check_batch(probs, "pc_loss");
  if (!(xi > 0.0) || xi > 1.0) {
    throw std::invalid_argument("pc_loss: margin xi must be in (0,1], got " + std::to_string(xi));
  }
  const std::size_t n = probs.dim(0), k = probs.dim(1);
  check_labels(n, k, labels, "pc_loss");

  // Margin violations for every class: relu(f + xi - f_y), then mask out the
  // true-class column (its term is the constant xi).
  Tensor f_y = row_gather(probs, labels);
  Tensor hinge = relu(add_scalar(sub_row_scalar(probs, f_y), xi));
  Tensor mask(Shape{n, k}, 1.0);
  for (std::size_t i = 0; i < n; ++i) mask[i * k + static_cast<std::size_t>(labels[i])] = 0.0;
  return mul_scalar(sum(mul(hinge, mask)), 1.0 / static_cast<double>(n));
}

double pc_loss_grad_logit_y(double f_y, double f_yp) { return -f_y * (1.0 - f_y + f_yp); }

std::vector<int> runner_up_indices(const Tensor& logits, const std::vector<int>& labels) {
  check_batch(logits, "runner_up_indices");
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  check_labels(n, k, labels, "runner_up_indices");
  if (k < 2) throw std::invalid_argument("runner_up_indices: need at least 2 classes");
  std::vector<int> out(n);
  const auto& lv = logits.data();
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = lv.data() + i * k;
    const std::size_t y = static_cast<std::size_t>(labels[i]);
    std::size_t best = y == 0 ? 1 : 0;
    for (std::size_t j = 0; j < k; ++j) {
      if (j != y && row[j] > row[best]) best = j;
    }
    out[i] = static_cast<int>(best);
  }
  return out;
}

Tensor logit_penalty(const Tensor& logits, const std::vector<int>& labels, double lambda,
                     double c_prime) {
  check_batch(logits, "logit_penalty");
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  if (k < 2) throw std::invalid_argument("logit_penalty: need at least 2 classes");
  check_labels(n, k, labels, "logit_penalty");
  if (lambda < 0.0) throw std::invalid_argument("logit_penalty: lambda must be nonnegative");

  const std::vector<int> j = runner_up_indices(logits, labels);
  Tensor a_y = row_gather(logits, labels);
  Tensor a_j = row_gather(logits, j);
  Tensor d = relu(sub(a_y, a_j));
  return mul_scalar(add_scalar(mean(d), -c_prime), lambda);
}

Tensor combined_objective(const Tensor& logits, const std::vector<int>& labels,
                          const PcLossConfig& cfg) {
  cfg.validate();
  Tensor objective = pc_loss(softmax_rows(logits), labels, cfg.xi);
  if (cfg.lambda != 0.0) {
    objective = add(objective, logit_penalty(logits, labels, cfg.lambda, cfg.c_prime));
  }
  return objective;
}

}  // namespace pcrobust
