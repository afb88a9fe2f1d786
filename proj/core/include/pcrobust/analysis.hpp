#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "pcrobust/attacks.hpp"
#include "pcrobust/dataset.hpp"
#include "pcrobust/network.hpp"

namespace pcrobust {

/// Where newly successful attacks land, binned by the rank their adversarial
/// class held in the clean prediction's descending probability order.
/// Rank 2 is the most probable false class; ranks past 5 aggregate into
/// "other". Samples already misclassified on clean input are excluded.
struct RankHistogram {
  std::vector<double> eps_grid;
  std::vector<long> new_successes;             // per grid point
  std::vector<std::array<long, 5>> rank_counts;  // [rank2..rank5, other] per grid point
  long considered = 0;                         // clean-correct samples

  double rank2_share(std::size_t grid_index) const;
  nlohmann::json to_json() const;
  /// Long-format rows "epsilon,rank,count" with ranks 2..5 and "other".
  std::string to_long_csv() const;
};

/// For each grid step, attacks the not-yet-successful samples and bins the
/// newly successful ones. Per-sample first-success bookkeeping makes the
/// grid-point sets disjoint by construction. Method must be fgsm or mim;
/// the grid must be strictly increasing and start above 0.
RankHistogram rank_histogram(const Network& net, const LabeledDataset& ds, AttackMethod method,
                             const std::vector<double>& eps_grid);

/// Statistics of the clean probability gap f_y - max_{y' != y} f_{y'}.
/// Misclassified samples contribute negative gaps.
struct GapStats {
  double mean = 0.0;
  double median = 0.0;
  double stddev = 0.0;
  double fraction_ge_xi = 0.0;
  double xi = 0.0;
  std::size_t n = 0;

  nlohmann::json to_json() const;
};

GapStats gap_stats(const Network& net, const LabeledDataset& ds, double xi);

struct MaskingOptions {
  std::vector<double> eps_grid = {0.1, 0.2, 0.3};
  int pgd_steps = 40;
  int mim_steps = 40;
  int bim_steps = 10;
  double step_size = 0.01;
  std::uint64_t seed = 1;
};

/// The gradient-masking checklist: (1) iterative attacks beat the one-step
/// attack, (2) white-box beats black-box transfer, (3) success grows with
/// the budget and is near-total on the CE model at the largest epsilon.
struct GradientMaskingReport {
  std::vector<double> eps_grid;
  nlohmann::json measurements;  // success rates per model/attack/epsilon
  bool iterative_ge_fgsm_ce = false;
  bool iterative_ge_fgsm_pclc = false;
  bool whitebox_ge_transfer_ce = false;
  bool whitebox_ge_transfer_pclc = false;
  bool monotone_ce = false;
  bool monotone_pclc = false;
  bool ce_pgd_near_total = false;  // >= 0.9 at the largest epsilon

  bool all_pass() const;
  nlohmann::json to_json() const;
};

/// When `substitute` is null a cnn3 substitute is trained on the dataset
/// with CE before the transfer checks run.
GradientMaskingReport gradient_masking_report(const Network& ce_net, const Network& pclc_net,
                                              const LabeledDataset& ds,
                                              const Network* substitute = nullptr,
                                              const MaskingOptions& opts = {});

/// Accuracy-under-attack matrix: one column per model, a Clean row first,
/// then one row per attack configuration.
struct TableReport {
  std::vector<std::string> model_names;
  struct Row {
    std::string label;
    bool clean = false;
    nlohmann::json config;
    std::vector<double> accuracy;
  };
  std::vector<Row> rows;

  nlohmann::json to_json() const;
  std::string to_csv() const;
};

TableReport table_report(const std::vector<std::pair<std::string, const Network*>>& models,
                         const LabeledDataset& ds, const std::vector<AttackConfig>& suite);

}  // namespace pcrobust
