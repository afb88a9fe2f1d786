#include "pcrobust/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <stdexcept>

#include "pcrobust/attacks.hpp"
#include "pcrobust/rng.hpp"

namespace pcrobust {

std::string to_string(LossMode mode) { return mode == LossMode::ce ? "ce" : "pc_lc"; }

std::string to_string(AdvAugmentation aug) {
  switch (aug) {
    case AdvAugmentation::off: return "off";
    case AdvAugmentation::fgsm: return "fgsm";
    case AdvAugmentation::pgd: return "pgd";
  }
  return "off";
}

LossMode loss_mode_from_string(const std::string& s) {
  if (s == "ce") return LossMode::ce;
  if (s == "pc_lc") return LossMode::pc_lc;
  throw std::invalid_argument("unknown loss mode '" + s + "' (expected ce or pc_lc)");
}

AdvAugmentation adv_augmentation_from_string(const std::string& s) {
  if (s == "off") return AdvAugmentation::off;
  if (s == "fgsm") return AdvAugmentation::fgsm;
  if (s == "pgd") return AdvAugmentation::pgd;
  throw std::invalid_argument("unknown adversarial augmentation '" + s + "'");
}

AdamState AdamState::init(const std::vector<Tensor>& params) {
  AdamState st;
  st.m.reserve(params.size());
  st.v.reserve(params.size());
  for (const Tensor& p : params) {
    st.m.emplace_back(p.numel(), 0.0);
    st.v.emplace_back(p.numel(), 0.0);
  }
  return st;
}

void adam_step(std::vector<Tensor>& params, const std::vector<Tensor>& grads, AdamState& state,
               const AdamOptions& opts) {
  if (params.size() != grads.size() || params.size() != state.m.size()) {
    throw std::invalid_argument("adam_step: parameter/gradient/state count mismatch");
  }
  state.step += 1;
  const double bc1 = 1.0 - std::pow(opts.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(opts.beta2, static_cast<double>(state.step));
  for (std::size_t p = 0; p < params.size(); ++p) {
    if (params[p].shape() != grads[p].shape()) {
      throw std::invalid_argument("adam_step: gradient shape mismatch at parameter " +
                                  std::to_string(p));
    }
    auto& w = params[p].data();
    const auto& g = grads[p].data();
    auto& m = state.m[p];
    auto& v = state.v[p];
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = opts.beta1 * m[i] + (1.0 - opts.beta1) * g[i];
      v[i] = opts.beta2 * v[i] + (1.0 - opts.beta2) * g[i] * g[i];
      const double m_hat = m[i] / bc1;
      const double v_hat = v[i] / bc2;
      w[i] -= opts.lr * m_hat / (std::sqrt(v_hat) + opts.eps);
    }
  }
}

void TrainConfig::validate() const {
  if (warmup_epochs < 0) throw std::invalid_argument("train: warmup epochs must be >= 0");
  if (resolved_total_epochs() < warmup_epochs) {
    throw std::invalid_argument("train: total epochs must be >= warmup epochs");
  }
  if (!(adam.lr > 0.0)) throw std::invalid_argument("train: learning rate must be positive");
  if (batch_size == 0) throw std::invalid_argument("train: batch size must be positive");
  if (loss == LossMode::pc_lc) PcLossConfig{xi, lambda, c_prime}.validate();
  if (adv != AdvAugmentation::off) {
    if (adv_eps_min < 0.0 || adv_eps_max < adv_eps_min) {
      throw std::invalid_argument("train: bad adversarial epsilon range");
    }
    if (adv == AdvAugmentation::pgd && adv_pgd_steps < 1) {
      throw std::invalid_argument("train: pgd augmentation needs at least one step");
    }
  }
}

nlohmann::json TrainConfig::to_json() const {
  return nlohmann::json{{"loss", to_string(loss)},
                        {"xi", xi},
                        {"lambda", lambda},
                        {"c_prime", c_prime},
                        {"warmup_epochs", warmup_epochs},
                        {"total_epochs", resolved_total_epochs()},
                        {"lr", adam.lr},
                        {"adam_beta1", adam.beta1},
                        {"adam_beta2", adam.beta2},
                        {"adam_eps", adam.eps},
                        {"batch_size", batch_size},
                        {"seed", seed},
                        {"adversarial_augmentation", to_string(adv)},
                        {"adv_eps_min", adv_eps_min},
                        {"adv_eps_max", adv_eps_max},
                        {"adv_pgd_steps", adv_pgd_steps},
                        {"adv_pgd_step_size", adv_pgd_step_size},
                        {"checkpoint_every", checkpoint_every}};
}

nlohmann::json TrainReport::to_json() const {
  nlohmann::json epochs_json = nlohmann::json::array();
  for (const EpochStat& e : epochs) {
    epochs_json.push_back({{"epoch", e.epoch},
                           {"loss_kind", e.loss_kind},
                           {"mean_loss", e.mean_loss},
                           {"train_accuracy", e.train_accuracy}});
  }
  nlohmann::json j{{"config", config.to_json()}, {"epochs", epochs_json}};
  if (final_eval_accuracy >= 0.0) j["final_eval_accuracy"] = final_eval_accuracy;
  return j;
}

nlohmann::json TrainReport::timing_json() const {
  nlohmann::json t = nlohmann::json::array();
  for (const EpochStat& e : epochs) t.push_back(e.wall_seconds);
  return nlohmann::json{{"epoch_wall_seconds", t}};
}

double evaluate_accuracy(const Network& net, const Tensor& images, const std::vector<int>& labels,
                         std::size_t batch_size) {
  const std::size_t n = images.dim(0);
  if (n != labels.size()) throw std::invalid_argument("evaluate: image/label count mismatch");
  const std::size_t stride = images.numel() / n;
  std::size_t correct = 0;
  const auto& src = images.data();
  for (std::size_t start = 0; start < n; start += batch_size) {
    const std::size_t stop = std::min(n, start + batch_size);
    Shape shape = images.shape();
    shape[0] = stop - start;
    Tensor chunk(shape, std::vector<double>(src.begin() + start * stride,
                                            src.begin() + stop * stride));
    const std::vector<int> pred = net.predict(chunk);
    for (std::size_t i = 0; i < pred.size(); ++i) {
      if (pred[i] == labels[start + i]) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(n);
}

double evaluate_accuracy(const Network& net, const LabeledDataset& ds, std::size_t batch_size) {
  return evaluate_accuracy(net, ds.images, ds.labels, batch_size);
}

namespace {

/// Replaces the back half of the batch with adversarial examples generated
/// against the current parameters. Labels are unchanged.
void augment_batch(const Network& net, Tensor& x, const std::vector<int>& y,
                   const TrainConfig& cfg, Rng& rng) {
  const std::size_t n = x.dim(0);
  const std::size_t half_start = n / 2;
  if (half_start >= n) return;
  const std::size_t stride = x.numel() / n;

  Shape half_shape = x.shape();
  half_shape[0] = n - half_start;
  Tensor half(half_shape, std::vector<double>(x.data().begin() + half_start * stride,
                                              x.data().end()));
  std::vector<int> half_labels(y.begin() + half_start, y.end());

  AttackConfig atk;
  atk.seed = rng.next_u64();
  if (cfg.adv == AdvAugmentation::fgsm) {
    atk.method = AttackMethod::fgsm;
    atk.epsilon = rng.uniform(cfg.adv_eps_min, cfg.adv_eps_max);
    atk.iterations = 1;
    atk.step_size = atk.epsilon;
  } else {
    atk.method = AttackMethod::pgd;
    atk.epsilon = rng.uniform(cfg.adv_eps_min, cfg.adv_eps_max);
    atk.iterations = cfg.adv_pgd_steps;
    atk.step_size = cfg.adv_pgd_step_size;
  }

  // Parameter gradients are pointless for example generation; the training
  // loop owns the network exclusively, so toggling the flag is safe.
  net.set_params_requires_grad(false);
  AttackResult res = run_attack(net, half, half_labels, atk);
  net.set_params_requires_grad(true);

  std::copy(res.adversarial.data().begin(), res.adversarial.data().end(),
            x.data().begin() + half_start * stride);
}

TrainReport run_training(Network& net, const LabeledDataset& train_ds,
                         const LabeledDataset* eval_ds, const TrainConfig& cfg) {
  cfg.validate();
  train_ds.validate();
  if (train_ds.num_classes != net.num_classes()) {
    throw std::invalid_argument("train: dataset has " + std::to_string(train_ds.num_classes) +
                                " classes, network expects " +
                                std::to_string(net.num_classes()));
  }

  TrainReport report;
  report.config = cfg;

  auto params = net.parameters();
  net.set_params_requires_grad(true);
  AdamState adam = AdamState::init(params);
  Rng aug_rng(cfg.seed ^ 0xADA9ull);

  const int total = cfg.resolved_total_epochs();
  const PcLossConfig pc_cfg{cfg.xi, cfg.lambda, cfg.c_prime};

  for (int epoch = 1; epoch <= total; ++epoch) {
    const auto started = std::chrono::steady_clock::now();
    const bool pc_phase = cfg.loss == LossMode::pc_lc && epoch > cfg.warmup_epochs;
    const auto plan = batches(train_ds.size(), cfg.batch_size,
                              cfg.seed + static_cast<std::uint64_t>(epoch) * 0x9E3779B9ull);

    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t b = 0; b < plan.size(); ++b) {
      auto [x, y] = take(train_ds, plan[b]);
      if (cfg.adv != AdvAugmentation::off) augment_batch(net, x, y, cfg, aug_rng);

      Tensor logits = net.forward(x);
      Tensor loss = pc_phase ? combined_objective(logits, y, pc_cfg) : ce_loss(logits, y);
      const double loss_value = loss.item();
      if (std::isnan(loss_value)) {
        net.set_params_requires_grad(false);
        throw TrainingDiverged(epoch, b);
      }
      loss_sum += loss_value;

      const auto& lv = logits.data();
      const std::size_t k = logits.dim(1);
      for (std::size_t i = 0; i < y.size(); ++i) {
        const double* row = lv.data() + i * k;
        std::size_t best = 0;
        for (std::size_t j = 1; j < k; ++j) {
          if (row[j] > row[best]) best = j;
        }
        if (static_cast<int>(best) == y[i]) ++correct;
      }

      for (Tensor& p : params) p.zero_grad();
      backward(loss);
      std::vector<Tensor> grads;
      grads.reserve(params.size());
      for (Tensor& p : params) {
        grads.push_back(p.has_grad() ? p.grad_tensor() : Tensor::zeros(p.shape()));
      }
      adam_step(params, grads, adam, cfg.adam);
    }

    EpochStat stat;
    stat.epoch = epoch;
    stat.loss_kind = pc_phase ? "pc_lc" : "ce";
    stat.mean_loss = loss_sum / static_cast<double>(plan.size());
    stat.train_accuracy = static_cast<double>(correct) / static_cast<double>(train_ds.size());
    stat.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    report.epochs.push_back(stat);

    if (cfg.checkpoint_every > 0 && !cfg.checkpoint_dir.empty() &&
        epoch % cfg.checkpoint_every == 0) {
      net.save(cfg.checkpoint_dir + "/epoch_" + std::to_string(epoch) + ".ckpt");
    }
  }

  net.set_params_requires_grad(false);
  if (eval_ds) report.final_eval_accuracy = evaluate_accuracy(net, *eval_ds);
  return report;
}

}  // namespace

TrainReport train(Network& net, const LabeledDataset& train_ds, const LabeledDataset* eval_ds,
                  const TrainConfig& cfg) {
  if (cfg.adv != AdvAugmentation::off) {
    throw std::invalid_argument("train: adversarial augmentation is enabled; "
                                "use train_adversarial");
  }
  return run_training(net, train_ds, eval_ds, cfg);
}

TrainReport train_adversarial(Network& net, const LabeledDataset& train_ds,
                              const LabeledDataset* eval_ds, const TrainConfig& cfg) {
  if (cfg.adv == AdvAugmentation::off) {
    throw std::invalid_argument("train_adversarial: augmentation mode is off");
  }
  return run_training(net, train_ds, eval_ds, cfg);
}

}  // namespace pcrobust
