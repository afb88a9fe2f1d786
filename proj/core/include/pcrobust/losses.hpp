#pragma once

#include <vector>

#include "pcrobust/ops.hpp"
#include "pcrobust/tensor.hpp"

namespace pcrobust {

/// Hyperparameters of the probabilistically-compact objective.
struct PcLossConfig {
  double xi = 0.995;      // probability margin, in (0, 1]
  double lambda = 0.05;   // logit-penalty multiplier, >= 0
  double c_prime = 0.0;   // penalty offset; constant shift with zero gradient

  void validate() const;
};

/// Numerically stable softmax of one logit vector (max-subtraction).
/// NaN input is rejected.
std::vector<double> softmax(const std::vector<double>& logits);

/// Mean cross-entropy of a (N,K) logit batch. Computed through
/// log-sum-exp, so the result is finite for any finite logits.
Tensor ce_loss(const Tensor& logits, const std::vector<int>& labels);

/// Probabilistically-compact loss over a (N,K) batch of probabilities:
/// mean over samples of sum over false classes of
/// max(0, f_{y'} + xi - f_y). Probabilities are expected to come from
/// softmax_rows; the kink subgradient is 0, matching relu.
Tensor pc_loss(const Tensor& probs, const std::vector<int>& labels, double xi);

/// Closed-form partial derivative of one active margin term
/// (f_{y'} + xi - f_y) with respect to the true-class logit a_y, for
/// probabilities produced by a common softmax: -f_y * (1 - f_y + f_yp).
double pc_loss_grad_logit_y(double f_y, double f_yp);

/// Logit penalty over a (N,K) logit batch:
/// (lambda/N) * sum over samples of (d_yj - c_prime), where j is the
/// highest-scoring false class of that sample and d_yj = max(0, a_y - a_j).
/// j is recomputed per sample per call.
Tensor logit_penalty(const Tensor& logits, const std::vector<int>& labels, double lambda,
                     double c_prime);

/// pc_loss(softmax(logits)) + logit_penalty(logits): the full training
/// objective for the pc_lc mode.
Tensor combined_objective(const Tensor& logits, const std::vector<int>& labels,
                          const PcLossConfig& cfg);

/// Index of the highest-scoring class other than labels[i], per row.
/// Ties break to the lowest class index.
std::vector<int> runner_up_indices(const Tensor& logits, const std::vector<int>& labels);

}  // namespace pcrobust
