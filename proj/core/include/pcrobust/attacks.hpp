#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pcrobust/network.hpp"
#include "pcrobust/tensor.hpp"

namespace pcrobust {

enum class AttackMethod { fgsm, bim, pgd, mim, cw, spsa };

std::string to_string(AttackMethod method);
AttackMethod attack_method_from_string(const std::string& s);

struct AttackConfig {
  AttackMethod method = AttackMethod::fgsm;
  double epsilon = 0.1;     // L-inf budget in pixel units (ignored by cw)
  double step_size = 0.01;  // per-iteration step for the iterative methods
  int iterations = 1;
  // Carlini-Wagner L2
  double cw_confidence = 0.0;
  double cw_lr = 0.001;
  int cw_max_steps = 100;
  int cw_binary_search_steps = 5;
  double cw_initial_c = 1e-2;
  // Momentum iterative method
  double mim_decay = 1.0;
  // SPSA
  double spsa_delta = 0.01;
  double spsa_lr = 0.01;
  int spsa_samples = 128;
  std::uint64_t seed = 1;

  /// Config with the per-method iteration defaults filled in
  /// (fgsm 1, bim 10, pgd/mim/spsa 40).
  static AttackConfig defaults(AttackMethod method);

  void validate() const;
  nlohmann::json to_json() const;
};

struct AttackResult {
  Tensor adversarial;            // same shape as the input batch, in [0,1]
  std::vector<std::uint8_t> success;  // prediction != true label
  std::vector<double> linf;      // per-sample max |x_adv - x|
  std::vector<double> l2;        // per-sample ||x_adv - x||_2
  long gradient_calls = 0;       // backward passes through the target
  long forward_queries = 0;      // per-sample forward evaluations consumed
  double accuracy_under_attack = 0.0;
  AttackConfig config;

  double success_rate() const;
  nlohmann::json to_json(bool include_per_sample = true) const;
};

AttackResult fgsm(const Network& net, const Tensor& x, const std::vector<int>& y,
                  const AttackConfig& cfg);
AttackResult bim(const Network& net, const Tensor& x, const std::vector<int>& y,
                 const AttackConfig& cfg);
AttackResult pgd(const Network& net, const Tensor& x, const std::vector<int>& y,
                 const AttackConfig& cfg);
AttackResult mim(const Network& net, const Tensor& x, const std::vector<int>& y,
                 const AttackConfig& cfg);
AttackResult cw_l2(const Network& net, const Tensor& x, const std::vector<int>& y,
                   const AttackConfig& cfg);
AttackResult spsa(const Network& net, const Tensor& x, const std::vector<int>& y,
                  const AttackConfig& cfg);

AttackResult run_attack(const Network& net, const Tensor& x, const std::vector<int>& y,
                        const AttackConfig& cfg);

/// Crafts adversarial examples on `source` and scores them against `target`.
AttackResult transfer_attack(const Network& source, const Network& target, const Tensor& x,
                             const std::vector<int>& y, const AttackConfig& cfg);

/// Per-sample logit margin a_y - max_{j != y} a_j; the attack loss used by
/// C&W and SPSA. Differentiable through both gathered logits.
Tensor margin_loss(const Tensor& logits, const std::vector<int>& labels);

/// Two-sided simultaneous-perturbation estimate of the margin-loss input
/// gradient, averaged over n_samples Rademacher directions. Uses forward
/// evaluations only.
Tensor spsa_gradient_estimate(const Network& net, const Tensor& x, const std::vector<int>& y,
                              double delta, int n_samples, std::uint64_t seed);

}  // namespace pcrobust
