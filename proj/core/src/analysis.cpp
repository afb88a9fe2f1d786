#include "pcrobust/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "pcrobust/losses.hpp"
#include "pcrobust/training.hpp"

namespace pcrobust {

double RankHistogram::rank2_share(std::size_t grid_index) const {
  if (new_successes.at(grid_index) == 0) return 0.0;
  return static_cast<double>(rank_counts[grid_index][0]) /
         static_cast<double>(new_successes[grid_index]);
}

nlohmann::json RankHistogram::to_json() const {
  nlohmann::json rows = nlohmann::json::array();
  for (std::size_t i = 0; i < eps_grid.size(); ++i) {
    rows.push_back({{"epsilon", eps_grid[i]},
                    {"new_successes", new_successes[i]},
                    {"rank2", rank_counts[i][0]},
                    {"rank3", rank_counts[i][1]},
                    {"rank4", rank_counts[i][2]},
                    {"rank5", rank_counts[i][3]},
                    {"other", rank_counts[i][4]}});
  }
  return nlohmann::json{{"considered", considered}, {"grid", rows}};
}

std::string RankHistogram::to_long_csv() const {
  std::ostringstream os;
  os << "epsilon,rank,count\n";
  static const char* kRankNames[5] = {"2", "3", "4", "5", "other"};
  for (std::size_t i = 0; i < eps_grid.size(); ++i) {
    for (int r = 0; r < 5; ++r) {
      os << eps_grid[i] << ',' << kRankNames[r] << ',' << rank_counts[i][r] << '\n';
    }
  }
  return os.str();
}

namespace {

std::vector<double> clean_probabilities(const Network& net, const Tensor& x) {
  NoGradGuard no_grad;
  Tensor logits = net.forward(x);
  Tensor probs = softmax_rows(logits);
  return probs.data();
}

/// Rank of class c in the row's descending probability order; ties break to
/// the lower class index. The top class has rank 1.
int rank_of_class(const double* probs, std::size_t k, int c) {
  const double pc = probs[static_cast<std::size_t>(c)];
  int rank = 1;
  for (std::size_t j = 0; j < k; ++j) {
    if (static_cast<int>(j) == c) continue;
    if (probs[j] > pc || (probs[j] == pc && static_cast<int>(j) < c)) ++rank;
  }
  return rank;
}

}  // namespace

RankHistogram rank_histogram(const Network& net, const LabeledDataset& ds, AttackMethod method,
                             const std::vector<double>& eps_grid) {
  if (method != AttackMethod::fgsm && method != AttackMethod::mim) {
    throw std::invalid_argument("rank_histogram: attack must be fgsm or mim");
  }
  if (eps_grid.empty() || eps_grid.front() <= 0.0) {
    throw std::invalid_argument("rank_histogram: grid must start above 0");
  }
  for (std::size_t i = 1; i < eps_grid.size(); ++i) {
    if (eps_grid[i] <= eps_grid[i - 1]) {
      throw std::invalid_argument("rank_histogram: grid must be strictly increasing");
    }
  }

  const std::size_t n = ds.size();
  const std::size_t k = static_cast<std::size_t>(ds.num_classes);

  // Clean pass: probabilities and predictions.
  const std::vector<double> probs = clean_probabilities(net, ds.images);
  std::vector<std::size_t> undecided;  // clean-correct, not yet attacked successfully
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = probs.data() + i * k;
    std::size_t best = 0;
    for (std::size_t j = 1; j < k; ++j) {
      if (row[j] > row[best]) best = j;
    }
    if (static_cast<int>(best) == ds.labels[i]) undecided.push_back(i);
  }

  RankHistogram hist;
  hist.eps_grid = eps_grid;
  hist.considered = static_cast<long>(undecided.size());
  hist.new_successes.assign(eps_grid.size(), 0);
  hist.rank_counts.assign(eps_grid.size(), {0, 0, 0, 0, 0});

  for (std::size_t g = 0; g < eps_grid.size(); ++g) {
    if (undecided.empty()) break;
    auto [x, y] = take(ds, undecided);
    AttackConfig cfg = AttackConfig::defaults(method);
    cfg.epsilon = eps_grid[g];
    if (method == AttackMethod::fgsm) cfg.step_size = cfg.epsilon;
    AttackResult res = run_attack(net, x, y, cfg);
    const std::vector<int> adv_pred = net.predict(res.adversarial);

    std::vector<std::size_t> still_undecided;
    for (std::size_t i = 0; i < undecided.size(); ++i) {
      const std::size_t sample = undecided[i];
      if (adv_pred[i] != y[i]) {
        hist.new_successes[g] += 1;
        const int r = rank_of_class(probs.data() + sample * k, k, adv_pred[i]);
        const int bin = r >= 2 && r <= 5 ? r - 2 : 4;
        hist.rank_counts[g][static_cast<std::size_t>(bin)] += 1;
      } else {
        still_undecided.push_back(sample);
      }
    }
    undecided = std::move(still_undecided);
  }
  return hist;
}

nlohmann::json GapStats::to_json() const {
  return nlohmann::json{{"mean", mean},
                        {"median", median},
                        {"stddev", stddev},
                        {"xi", xi},
                        {"fraction_ge_xi", fraction_ge_xi},
                        {"n", n}};
}

GapStats gap_stats(const Network& net, const LabeledDataset& ds, double xi) {
  if (ds.size() == 0) throw std::invalid_argument("gap_stats: empty dataset");
  const std::vector<double> probs = clean_probabilities(net, ds.images);
  const std::size_t n = ds.size();
  const std::size_t k = static_cast<std::size_t>(ds.num_classes);

  std::vector<double> gaps(n);
  std::size_t ge = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = probs.data() + i * k;
    const std::size_t y = static_cast<std::size_t>(ds.labels[i]);
    double best_false = -1.0;
    for (std::size_t j = 0; j < k; ++j) {
      if (j != y) best_false = std::max(best_false, row[j]);
    }
    gaps[i] = row[y] - best_false;
    if (gaps[i] >= xi) ++ge;
  }

  GapStats stats;
  stats.xi = xi;
  stats.n = n;
  stats.mean = std::accumulate(gaps.begin(), gaps.end(), 0.0) / static_cast<double>(n);
  double var = 0.0;
  for (double g : gaps) var += (g - stats.mean) * (g - stats.mean);
  stats.stddev = std::sqrt(var / static_cast<double>(n));
  std::vector<double> sorted = gaps;
  std::sort(sorted.begin(), sorted.end());
  stats.median = n % 2 == 1 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
  stats.fraction_ge_xi = static_cast<double>(ge) / static_cast<double>(n);
  return stats;
}

bool GradientMaskingReport::all_pass() const {
  return iterative_ge_fgsm_ce && iterative_ge_fgsm_pclc && whitebox_ge_transfer_ce &&
         whitebox_ge_transfer_pclc && monotone_ce && monotone_pclc && ce_pgd_near_total;
}

nlohmann::json GradientMaskingReport::to_json() const {
  return nlohmann::json{
      {"eps_grid", eps_grid},
      {"measurements", measurements},
      {"checks",
       {{"iterative_ge_fgsm", {{"ce", iterative_ge_fgsm_ce}, {"pc_lc", iterative_ge_fgsm_pclc}}},
        {"whitebox_ge_transfer",
         {{"ce", whitebox_ge_transfer_ce}, {"pc_lc", whitebox_ge_transfer_pclc}}},
        {"success_monotone", {{"ce", monotone_ce}, {"pc_lc", monotone_pclc}}},
        {"ce_pgd_near_total", ce_pgd_near_total}}},
      {"all_pass", all_pass()}};
}

namespace {

// Non-decreasing up to one percentage point of noise per step.
bool roughly_monotone(const std::vector<double>& rates) {
  for (std::size_t i = 1; i < rates.size(); ++i) {
    if (rates[i] < rates[i - 1] - 0.01) return false;
  }
  return true;
}

bool all_ge(const std::vector<double>& a, const std::vector<double>& b) {
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] < b[i]) return false;
  }
  return true;
}

}  // namespace

GradientMaskingReport gradient_masking_report(const Network& ce_net, const Network& pclc_net,
                                              const LabeledDataset& ds, const Network* substitute,
                                              const MaskingOptions& opts) {
  GradientMaskingReport report;
  report.eps_grid = opts.eps_grid;

  Network trained_substitute;
  if (!substitute) {
    trained_substitute = Network::build(
        ArchitectureSpec::cnn3(ce_net.input_shape(), ce_net.num_classes()), opts.seed ^ 0x50Bull);
    TrainConfig sub_cfg;
    sub_cfg.loss = LossMode::ce;
    sub_cfg.warmup_epochs = 5;
    sub_cfg.total_epochs = 10;
    sub_cfg.seed = opts.seed ^ 0x50Bull;
    train(trained_substitute, ds, nullptr, sub_cfg);
    substitute = &trained_substitute;
  }

  auto [x, y] = head(ds, ds.size());

  struct PerModel {
    std::vector<double> fgsm_rate, pgd_rate, bim_rate, mim_rate, transfer_rate;
  };
  auto measure = [&](const Network& net) {
    PerModel m;
    for (double eps : opts.eps_grid) {
      AttackConfig f = AttackConfig::defaults(AttackMethod::fgsm);
      f.epsilon = eps;
      f.seed = opts.seed;
      m.fgsm_rate.push_back(run_attack(net, x, y, f).success_rate());

      AttackConfig p = AttackConfig::defaults(AttackMethod::pgd);
      p.epsilon = eps;
      p.iterations = opts.pgd_steps;
      p.step_size = opts.step_size;
      p.seed = opts.seed;
      m.pgd_rate.push_back(run_attack(net, x, y, p).success_rate());

      AttackConfig b = AttackConfig::defaults(AttackMethod::bim);
      b.epsilon = eps;
      b.iterations = opts.bim_steps;
      b.step_size = opts.step_size;
      b.seed = opts.seed;
      m.bim_rate.push_back(run_attack(net, x, y, b).success_rate());

      AttackConfig mi = AttackConfig::defaults(AttackMethod::mim);
      mi.epsilon = eps;
      mi.iterations = opts.mim_steps;
      mi.step_size = opts.step_size;
      mi.seed = opts.seed;
      m.mim_rate.push_back(run_attack(net, x, y, mi).success_rate());

      AttackConfig t = p;
      m.transfer_rate.push_back(transfer_attack(*substitute, net, x, y, t).success_rate());
    }
    return m;
  };

  const PerModel ce = measure(ce_net);
  const PerModel pc = measure(pclc_net);

  auto to_json = [](const PerModel& m) {
    return nlohmann::json{{"fgsm", m.fgsm_rate},
                          {"pgd", m.pgd_rate},
                          {"bim", m.bim_rate},
                          {"mim", m.mim_rate},
                          {"transfer_pgd", m.transfer_rate}};
  };
  report.measurements = nlohmann::json{{"ce", to_json(ce)}, {"pc_lc", to_json(pc)}};

  auto iterative_ok = [](const PerModel& m) {
    return all_ge(m.pgd_rate, m.fgsm_rate) && all_ge(m.bim_rate, m.fgsm_rate) &&
           all_ge(m.mim_rate, m.fgsm_rate);
  };
  report.iterative_ge_fgsm_ce = iterative_ok(ce);
  report.iterative_ge_fgsm_pclc = iterative_ok(pc);
  report.whitebox_ge_transfer_ce = all_ge(ce.pgd_rate, ce.transfer_rate);
  report.whitebox_ge_transfer_pclc = all_ge(pc.pgd_rate, pc.transfer_rate);
  report.monotone_ce = roughly_monotone(ce.fgsm_rate) && roughly_monotone(ce.pgd_rate);
  report.monotone_pclc = roughly_monotone(pc.fgsm_rate) && roughly_monotone(pc.pgd_rate);
  report.ce_pgd_near_total = !ce.pgd_rate.empty() && ce.pgd_rate.back() >= 0.9;
  return report;
}

nlohmann::json TableReport::to_json() const {
  nlohmann::json rows_json = nlohmann::json::array();
  for (const Row& row : rows) {
    rows_json.push_back({{"label", row.label},
                         {"clean", row.clean},
                         {"config", row.config},
                         {"accuracy", row.accuracy}});
  }
  return nlohmann::json{{"models", model_names}, {"rows", rows_json}};
}

std::string TableReport::to_csv() const {
  std::ostringstream os;
  os << "attack";
  for (const auto& name : model_names) os << ',' << name;
  os << '\n';
  for (const Row& row : rows) {
    os << row.label;
    for (double acc : row.accuracy) os << ',' << acc;
    os << '\n';
  }
  return os.str();
}

TableReport table_report(const std::vector<std::pair<std::string, const Network*>>& models,
                         const LabeledDataset& ds, const std::vector<AttackConfig>& suite) {
  if (models.empty()) throw std::invalid_argument("table_report: no models");
  TableReport table;
  for (const auto& [name, net] : models) table.model_names.push_back(name);

  auto [x, y] = head(ds, ds.size());

  TableReport::Row clean_row;
  clean_row.label = "clean";
  clean_row.clean = true;
  for (const auto& [name, net] : models) {
    clean_row.accuracy.push_back(evaluate_accuracy(*net, x, y));
  }
  table.rows.push_back(std::move(clean_row));

  for (const AttackConfig& cfg : suite) {
    TableReport::Row row;
    std::ostringstream label;
    label << to_string(cfg.method);
    if (cfg.method != AttackMethod::cw) label << " eps=" << cfg.epsilon;
    row.label = label.str();
    row.config = cfg.to_json();
    for (const auto& [name, net] : models) {
      row.accuracy.push_back(run_attack(*net, x, y, cfg).accuracy_under_attack);
    }
    table.rows.push_back(std::move(row));
  }
  return table;
}

}  // namespace pcrobust
