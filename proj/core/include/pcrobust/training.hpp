#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pcrobust/dataset.hpp"
#include "pcrobust/losses.hpp"
#include "pcrobust/network.hpp"

namespace pcrobust {

enum class LossMode { ce, pc_lc };
enum class AdvAugmentation { off, fgsm, pgd };

std::string to_string(LossMode mode);
std::string to_string(AdvAugmentation aug);
LossMode loss_mode_from_string(const std::string& s);
AdvAugmentation adv_augmentation_from_string(const std::string& s);

struct AdamOptions {
  double lr = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// First/second moment buffers plus the step counter, one slot per parameter.
struct AdamState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  long step = 0;

  static AdamState init(const std::vector<Tensor>& params);
};

/// One bias-corrected Adam update. `grads` must align with `params` in count
/// and shape; `state` must have been initialized for these parameters.
void adam_step(std::vector<Tensor>& params, const std::vector<Tensor>& grads, AdamState& state,
               const AdamOptions& opts);

struct TrainConfig {
  LossMode loss = LossMode::ce;
  double xi = 0.995;
  double lambda = 0.05;
  double c_prime = 0.0;
  int warmup_epochs = 10;   // T: epochs trained with CE before the switch
  int total_epochs = -1;    // defaults to 2T when negative
  AdamOptions adam;
  std::size_t batch_size = 256;
  std::uint64_t seed = 1;
  AdvAugmentation adv = AdvAugmentation::off;
  double adv_eps_min = 0.1;
  double adv_eps_max = 0.3;
  int adv_pgd_steps = 5;
  double adv_pgd_step_size = 0.01;
  int checkpoint_every = 0;           // epochs; 0 disables
  std::string checkpoint_dir;

  int resolved_total_epochs() const { return total_epochs < 0 ? 2 * warmup_epochs : total_epochs; }
  void validate() const;
  nlohmann::json to_json() const;
};

struct EpochStat {
  int epoch = 0;
  std::string loss_kind;   // "ce" or "pc_lc": the objective actually used
  double mean_loss = 0.0;
  double train_accuracy = 0.0;
  double wall_seconds = 0.0;
};

/// Training diverged (NaN loss); carries where it happened.
class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(int epoch, std::size_t batch)
      : std::runtime_error("training diverged: loss is NaN at epoch " + std::to_string(epoch) +
                           ", batch " + std::to_string(batch)),
        epoch_(epoch),
        batch_(batch) {}
  int epoch() const { return epoch_; }
  std::size_t batch() const { return batch_; }

 private:
  int epoch_;
  std::size_t batch_;
};

struct TrainReport {
  std::vector<EpochStat> epochs;
  double final_eval_accuracy = -1.0;  // negative when no eval set was given
  TrainConfig config;

  /// Timing is intentionally excluded so deterministic reruns serialize
  /// byte-identically; wall times belong in the run manifest.
  nlohmann::json to_json() const;
  nlohmann::json timing_json() const;
};

/// Runs the two-phase schedule: epochs 1..T minimize CE; epochs T+1..total
/// minimize the combined pc_lc objective when that mode is selected (CE
/// throughout otherwise). Deterministic under a fixed config.
TrainReport train(Network& net, const LabeledDataset& train_ds, const LabeledDataset* eval_ds,
                  const TrainConfig& cfg);

/// Same schedule with half of every mini-batch replaced by adversarial
/// examples generated against the current parameters.
TrainReport train_adversarial(Network& net, const LabeledDataset& train_ds,
                              const LabeledDataset* eval_ds, const TrainConfig& cfg);

/// Fraction of samples the network classifies correctly.
double evaluate_accuracy(const Network& net, const Tensor& images, const std::vector<int>& labels,
                         std::size_t batch_size = 512);
double evaluate_accuracy(const Network& net, const LabeledDataset& ds,
                         std::size_t batch_size = 512);

}  // namespace pcrobust
