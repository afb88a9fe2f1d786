#include "pcrobust/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "pcrobust/losses.hpp"
#include "pcrobust/rng.hpp"

namespace pcrobust {

std::string to_string(AttackMethod method) {
  switch (method) {
    case AttackMethod::fgsm: return "fgsm";
    case AttackMethod::bim: return "bim";
    case AttackMethod::pgd: return "pgd";
    case AttackMethod::mim: return "mim";
    case AttackMethod::cw: return "cw";
    case AttackMethod::spsa: return "spsa";
  }
  return "fgsm";
}

AttackMethod attack_method_from_string(const std::string& s) {
  if (s == "fgsm") return AttackMethod::fgsm;
  if (s == "bim") return AttackMethod::bim;
  if (s == "pgd") return AttackMethod::pgd;
  if (s == "mim") return AttackMethod::mim;
  if (s == "cw") return AttackMethod::cw;
  if (s == "spsa") return AttackMethod::spsa;
  throw std::invalid_argument("unknown attack method '" + s + "'");
}

AttackConfig AttackConfig::defaults(AttackMethod method) {
  AttackConfig cfg;
  cfg.method = method;
  switch (method) {
    case AttackMethod::fgsm: cfg.iterations = 1; break;
    case AttackMethod::bim: cfg.iterations = 10; break;
    case AttackMethod::pgd: cfg.iterations = 40; break;
    case AttackMethod::mim: cfg.iterations = 40; break;
    case AttackMethod::spsa: cfg.iterations = 40; break;
    case AttackMethod::cw: cfg.iterations = 1; break;
  }
  return cfg;
}

void AttackConfig::validate() const {
  if (epsilon < 0.0) throw std::invalid_argument("attack: epsilon must be nonnegative");
  switch (method) {
    case AttackMethod::bim:
    case AttackMethod::pgd:
    case AttackMethod::mim:
      if (iterations < 1) throw std::invalid_argument("attack: iterations must be >= 1");
      if (!(step_size > 0.0)) throw std::invalid_argument("attack: step size must be positive");
      break;
    case AttackMethod::spsa:
      if (iterations < 0) throw std::invalid_argument("attack: iterations must be >= 0");
      if (!(spsa_lr > 0.0) || !(spsa_delta > 0.0) || spsa_samples < 1) {
        throw std::invalid_argument("attack: spsa rates and sample count must be positive");
      }
      break;
    case AttackMethod::cw:
      if (!(cw_lr > 0.0) || cw_max_steps < 1 || cw_binary_search_steps < 1 ||
          !(cw_initial_c > 0.0)) {
        throw std::invalid_argument("attack: cw rates and step counts must be positive");
      }
      break;
    case AttackMethod::fgsm:
      break;
  }
  if (mim_decay < 0.0) throw std::invalid_argument("attack: momentum decay must be nonnegative");
}

nlohmann::json AttackConfig::to_json() const {
  nlohmann::json j{{"method", to_string(method)},
                   {"epsilon", epsilon},
                   {"step_size", step_size},
                   {"iterations", iterations},
                   {"seed", seed}};
  if (method == AttackMethod::cw) {
    j["cw_confidence"] = cw_confidence;
    j["cw_lr"] = cw_lr;
    j["cw_max_steps"] = cw_max_steps;
    j["cw_binary_search_steps"] = cw_binary_search_steps;
    j["cw_initial_c"] = cw_initial_c;
  }
  if (method == AttackMethod::mim) j["mim_decay"] = mim_decay;
  if (method == AttackMethod::spsa) {
    j["spsa_delta"] = spsa_delta;
    j["spsa_lr"] = spsa_lr;
    j["spsa_samples"] = spsa_samples;
  }
  return j;
}

double AttackResult::success_rate() const {
  if (success.empty()) return 0.0;
  std::size_t hits = 0;
  for (auto s : success) hits += s;
  return static_cast<double>(hits) / static_cast<double>(success.size());
}

nlohmann::json AttackResult::to_json(bool include_per_sample) const {
  nlohmann::json j{{"config", config.to_json()},
                   {"accuracy_under_attack", accuracy_under_attack},
                   {"success_rate", success_rate()},
                   {"gradient_calls", gradient_calls},
                   {"forward_queries", forward_queries},
                   {"n", success.size()}};
  if (include_per_sample) {
    j["success"] = success;
    j["linf"] = linf;
    j["l2"] = l2;
  } else {
    double mx = 0.0, sl2 = 0.0;
    std::size_t n_succ = 0;
    double l2_succ = 0.0;
    for (std::size_t i = 0; i < linf.size(); ++i) {
      mx = std::max(mx, linf[i]);
      sl2 += l2[i];
      if (success[i]) {
        ++n_succ;
        l2_succ += l2[i];
      }
    }
    j["max_linf"] = mx;
    j["mean_l2"] = linf.empty() ? 0.0 : sl2 / static_cast<double>(linf.size());
    j["mean_l2_successful"] = n_succ == 0 ? 0.0 : l2_succ / static_cast<double>(n_succ);
  }
  return j;
}

namespace {

void check_batch_input(const Network& net, const Tensor& x, const std::vector<int>& y) {
  if (!x.defined() || x.shape().size() < 2) {
    throw std::invalid_argument("attack: input must be a batch tensor");
  }
  if (x.dim(0) != y.size()) {
    throw std::invalid_argument("attack: batch has " + std::to_string(x.dim(0)) +
                                " samples but " + std::to_string(y.size()) + " labels");
  }
  const int k = net.num_classes();
  for (int label : y) {
    if (label < 0 || label >= k) {
      throw std::out_of_range("attack: label " + std::to_string(label) + " outside [0," +
                              std::to_string(k) + ")");
    }
  }
}

double sign(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

void finalize(AttackResult& result, const Network& net, const Tensor& x0, Tensor x_adv,
              const std::vector<int>& y) {
  const std::size_t n = x0.dim(0);
  const std::size_t stride = x0.numel() / n;
  result.adversarial = std::move(x_adv);
  result.success.resize(n);
  result.linf.assign(n, 0.0);
  result.l2.assign(n, 0.0);
  const auto& a = result.adversarial.data();
  const auto& b = x0.data();
  for (std::size_t i = 0; i < n; ++i) {
    double mx = 0.0, ss = 0.0;
    const double* pa = a.data() + i * stride;
    const double* pb = b.data() + i * stride;
    for (std::size_t p = 0; p < stride; ++p) {
      const double d = pa[p] - pb[p];
      mx = std::max(mx, std::abs(d));
      ss += d * d;
    }
    result.linf[i] = mx;
    result.l2[i] = std::sqrt(ss);
  }
  const std::vector<int> pred = net.predict(result.adversarial);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < n; ++i) {
    result.success[i] = pred[i] != y[i] ? 1 : 0;
    if (pred[i] == y[i]) ++correct;
  }
  result.accuracy_under_attack = static_cast<double>(correct) / static_cast<double>(n);
}

/// Shared core of the L-inf budgeted family. The perturbation is tracked in
/// delta space, so a single full-budget step reproduces the one-shot fast
/// gradient sign update bit for bit.
AttackResult linf_iterative(const Network& net, const Tensor& x0, const std::vector<int>& y,
                            const AttackConfig& cfg, int iterations, double step_size,
                            bool random_start, bool momentum) {
  check_batch_input(net, x0, y);
  cfg.validate();
  const std::size_t n = x0.dim(0);
  const std::size_t total = x0.numel();
  const std::size_t stride = total / n;
  const double eps = cfg.epsilon;

  AttackResult result;
  result.config = cfg;

  std::vector<double> delta(total, 0.0);
  if (random_start && eps > 0.0) {
    Rng rng(cfg.seed);
    for (double& d : delta) d = rng.uniform(-eps, eps);
  }
  std::vector<double> g_mom;
  if (momentum) g_mom.assign(total, 0.0);

  const auto& base = x0.data();
  auto current = [&]() {
    std::vector<double> xt(total);
    for (std::size_t i = 0; i < total; ++i) {
      xt[i] = std::clamp(base[i] + delta[i], 0.0, 1.0);
    }
    return Tensor(x0.shape(), std::move(xt));
  };

  for (int t = 0; t < iterations; ++t) {
    Tensor x_t = current();
    Tensor grad = input_gradient(
        net, [](const Tensor& logits, const std::vector<int>& labels) {
          return ce_loss(logits, labels);
        },
        x_t, y);
    result.gradient_calls += 1;
    result.forward_queries += static_cast<long>(n);

    const auto& g = grad.data();
    if (momentum) {
      for (std::size_t i = 0; i < n; ++i) {
        double l1 = 0.0;
        const double* gs = g.data() + i * stride;
        for (std::size_t p = 0; p < stride; ++p) l1 += std::abs(gs[p]);
        double* ms = g_mom.data() + i * stride;
        if (l1 > 0.0) {
          const double inv = 1.0 / l1;
          for (std::size_t p = 0; p < stride; ++p) {
            ms[p] = cfg.mim_decay * ms[p] + gs[p] * inv;
          }
        } else {
          for (std::size_t p = 0; p < stride; ++p) ms[p] = cfg.mim_decay * ms[p];
        }
      }
      for (std::size_t i = 0; i < total; ++i) {
        delta[i] = std::clamp(delta[i] + step_size * sign(g_mom[i]), -eps, eps);
      }
    } else {
      for (std::size_t i = 0; i < total; ++i) {
        delta[i] = std::clamp(delta[i] + step_size * sign(g[i]), -eps, eps);
      }
    }
  }

  finalize(result, net, x0, current(), y);
  return result;
}

}  // namespace

Tensor margin_loss(const Tensor& logits, const std::vector<int>& labels) {
  const std::vector<int> j = runner_up_indices(logits, labels);
  return sub(row_gather(logits, labels), row_gather(logits, j));
}

AttackResult fgsm(const Network& net, const Tensor& x, const std::vector<int>& y,
                  const AttackConfig& cfg) {
  return linf_iterative(net, x, y, cfg, /*iterations=*/1, /*step_size=*/cfg.epsilon,
                        /*random_start=*/false, /*momentum=*/false);
}

AttackResult bim(const Network& net, const Tensor& x, const std::vector<int>& y,
                 const AttackConfig& cfg) {
  return linf_iterative(net, x, y, cfg, cfg.iterations, cfg.step_size,
                        /*random_start=*/false, /*momentum=*/false);
}

AttackResult pgd(const Network& net, const Tensor& x, const std::vector<int>& y,
                 const AttackConfig& cfg) {
  return linf_iterative(net, x, y, cfg, cfg.iterations, cfg.step_size,
                        /*random_start=*/true, /*momentum=*/false);
}

AttackResult mim(const Network& net, const Tensor& x, const std::vector<int>& y,
                 const AttackConfig& cfg) {
  return linf_iterative(net, x, y, cfg, cfg.iterations, cfg.step_size,
                        /*random_start=*/false, /*momentum=*/true);
}

AttackResult cw_l2(const Network& net, const Tensor& x, const std::vector<int>& y,
                   const AttackConfig& cfg) {
  check_batch_input(net, x, y);
  cfg.validate();
  const std::size_t n = x.dim(0);
  const std::size_t stride = x.numel() / n;

  AttackResult result;
  result.config = cfg;

  // Samples the model already gets wrong count as successful with zero
  // perturbation and stay out of the optimization.
  const std::vector<int> clean_pred = net.predict(x);
  std::vector<std::size_t> active;
  for (std::size_t i = 0; i < n; ++i) {
    if (clean_pred[i] == y[i]) active.push_back(i);
  }

  Tensor x_adv = x.clone();

  if (!active.empty()) {
    const std::size_t m = active.size();
    const std::size_t mt = m * stride;
    Shape sub_shape = x.shape();
    sub_shape[0] = m;

    std::vector<double> x0(mt);
    std::vector<int> y_sub(m);
    const auto& xv = x.data();
    for (std::size_t i = 0; i < m; ++i) {
      std::copy_n(xv.begin() + active[i] * stride, stride, x0.begin() + i * stride);
      y_sub[i] = y[active[i]];
    }

    // tanh-space change of variables keeps iterates inside the pixel box.
    std::vector<double> w0(mt);
    for (std::size_t i = 0; i < mt; ++i) {
      const double clipped = std::clamp(x0[i], 1e-6, 1.0 - 1e-6);
      w0[i] = std::atanh(2.0 * clipped - 1.0);
    }

    std::vector<double> c(m, cfg.cw_initial_c);
    std::vector<double> c_lo(m, 0.0);
    std::vector<double> c_hi(m, std::numeric_limits<double>::infinity());
    std::vector<double> best_l2(m, std::numeric_limits<double>::infinity());
    std::vector<std::vector<double>> best_adv(m);

    for (int round = 0; round < cfg.cw_binary_search_steps; ++round) {
      std::vector<double> w = w0;
      std::vector<double> adam_m(mt, 0.0), adam_v(mt, 0.0);
      std::vector<std::uint8_t> round_success(m, 0);

      for (int step = 1; step <= cfg.cw_max_steps; ++step) {
        std::vector<double> xt(mt);
        for (std::size_t i = 0; i < mt; ++i) xt[i] = 0.5 * (std::tanh(w[i]) + 1.0);
        Tensor x_t(sub_shape, xt);

        Tensor weights = Tensor::from_vector(c);
        Tensor grad_margin = input_gradient(
            net,
            [&weights, conf = cfg.cw_confidence](const Tensor& logits,
                                                 const std::vector<int>& labels) {
              Tensor hinged = relu(add_scalar(margin_loss(logits, labels), conf));
              return sum(mul(hinged, weights));
            },
            x_t, y_sub);
        result.gradient_calls += 1;
        result.forward_queries += static_cast<long>(m);

        // Success bookkeeping for this step.
        const std::vector<int> pred = net.predict(x_t);
        for (std::size_t i = 0; i < m; ++i) {
          if (pred[i] != y_sub[i]) {
            round_success[i] = 1;
            double ss = 0.0;
            for (std::size_t p = 0; p < stride; ++p) {
              const double d = xt[i * stride + p] - x0[i * stride + p];
              ss += d * d;
            }
            if (ss < best_l2[i]) {
              best_l2[i] = ss;
              best_adv[i].assign(xt.begin() + i * stride, xt.begin() + (i + 1) * stride);
            }
          }
        }

        // d(total)/dw = [c * d(margin)/dx + 2 (x - x0)] * dx/dw,
        // with dx/dw = 2 x (1-x) from the tanh reparameterization.
        const auto& gm = grad_margin.data();
        const double bc1 = 1.0 - std::pow(0.9, step);
        const double bc2 = 1.0 - std::pow(0.999, step);
        for (std::size_t i = 0; i < mt; ++i) {
          const double gx = gm[i] + 2.0 * (xt[i] - x0[i]);
          const double gw = gx * 2.0 * xt[i] * (1.0 - xt[i]);
          adam_m[i] = 0.9 * adam_m[i] + 0.1 * gw;
          adam_v[i] = 0.999 * adam_v[i] + 0.001 * gw * gw;
          w[i] -= cfg.cw_lr * (adam_m[i] / bc1) / (std::sqrt(adam_v[i] / bc2) + 1e-8);
        }
      }

      for (std::size_t i = 0; i < m; ++i) {
        if (round_success[i]) {
          c_hi[i] = std::min(c_hi[i], c[i]);
          c[i] = 0.5 * (c_lo[i] + c_hi[i]);
        } else {
          c_lo[i] = std::max(c_lo[i], c[i]);
          c[i] = std::isinf(c_hi[i]) ? c[i] * 10.0 : 0.5 * (c_lo[i] + c_hi[i]);
        }
      }
    }

    auto& out = x_adv.data();
    for (std::size_t i = 0; i < m; ++i) {
      if (!best_adv[i].empty()) {
        std::copy(best_adv[i].begin(), best_adv[i].end(), out.begin() + active[i] * stride);
      }
    }
  }

  // Samples with no successful example keep the clean input, so finalize()
  // flags them unsuccessful.
  finalize(result, net, x, std::move(x_adv), y);
  return result;
}

Tensor spsa_gradient_estimate(const Network& net, const Tensor& x, const std::vector<int>& y,
                              double delta, int n_samples, std::uint64_t seed) {
  check_batch_input(net, x, y);
  if (!(delta > 0.0) || n_samples < 1) {
    throw std::invalid_argument("spsa: delta and sample count must be positive");
  }
  NoGradGuard no_grad;
  const std::size_t n = x.dim(0);
  const std::size_t total = x.numel();
  const std::size_t stride = total / n;
  Rng rng(seed);

  auto margins = [&](const Tensor& probe) {
    Tensor logits = net.forward(probe);
    const auto& lv = logits.data();
    const std::size_t k = logits.dim(1);
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) {
      const double* row = lv.data() + i * k;
      const std::size_t yi = static_cast<std::size_t>(y[i]);
      double best = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < k; ++j) {
        if (j != yi) best = std::max(best, row[j]);
      }
      out[i] = row[yi] - best;
    }
    return out;
  };

  std::vector<double> estimate(total, 0.0);
  std::vector<double> v(total);
  std::vector<double> plus(total), minus(total);
  const auto& base = x.data();
  for (int s = 0; s < n_samples; ++s) {
    for (std::size_t i = 0; i < total; ++i) v[i] = rng.rademacher();
    for (std::size_t i = 0; i < total; ++i) {
      plus[i] = base[i] + delta * v[i];
      minus[i] = base[i] - delta * v[i];
    }
    const std::vector<double> lp = margins(Tensor(x.shape(), plus));
    const std::vector<double> lm = margins(Tensor(x.shape(), minus));
    for (std::size_t i = 0; i < n; ++i) {
      const double scale = (lp[i] - lm[i]) / (2.0 * delta);
      double* dst = estimate.data() + i * stride;
      const double* vs = v.data() + i * stride;
      for (std::size_t p = 0; p < stride; ++p) dst[p] += scale * vs[p];
    }
  }
  const double inv = 1.0 / static_cast<double>(n_samples);
  for (double& e : estimate) e *= inv;
  return Tensor(x.shape(), std::move(estimate));
}

AttackResult spsa(const Network& net, const Tensor& x, const std::vector<int>& y,
                  const AttackConfig& cfg) {
  check_batch_input(net, x, y);
  cfg.validate();
  const std::size_t n = x.dim(0);
  const std::size_t total = x.numel();
  const double eps = cfg.epsilon;

  AttackResult result;
  result.config = cfg;

  std::vector<double> delta(total, 0.0);
  const auto& base = x.data();
  Rng rng(cfg.seed);
  for (int t = 0; t < cfg.iterations; ++t) {
    std::vector<double> xt(total);
    for (std::size_t i = 0; i < total; ++i) xt[i] = std::clamp(base[i] + delta[i], 0.0, 1.0);
    Tensor estimate = spsa_gradient_estimate(net, Tensor(x.shape(), std::move(xt)), y,
                                             cfg.spsa_delta, cfg.spsa_samples, rng.next_u64());
    result.forward_queries += 2L * cfg.spsa_samples * static_cast<long>(n);
    const auto& g = estimate.data();
    // Descend the margin estimate, then project back into the budget.
    for (std::size_t i = 0; i < total; ++i) {
      delta[i] = std::clamp(delta[i] - cfg.spsa_lr * g[i], -eps, eps);
    }
  }

  std::vector<double> final_x(total);
  for (std::size_t i = 0; i < total; ++i) final_x[i] = std::clamp(base[i] + delta[i], 0.0, 1.0);
  finalize(result, net, x, Tensor(x.shape(), std::move(final_x)), y);
  return result;
}

AttackResult run_attack(const Network& net, const Tensor& x, const std::vector<int>& y,
                        const AttackConfig& cfg) {
  switch (cfg.method) {
    case AttackMethod::fgsm: return fgsm(net, x, y, cfg);
    case AttackMethod::bim: return bim(net, x, y, cfg);
    case AttackMethod::pgd: return pgd(net, x, y, cfg);
    case AttackMethod::mim: return mim(net, x, y, cfg);
    case AttackMethod::cw: return cw_l2(net, x, y, cfg);
    case AttackMethod::spsa: return spsa(net, x, y, cfg);
  }
  throw std::logic_error("run_attack: unhandled method");
}

AttackResult transfer_attack(const Network& source, const Network& target, const Tensor& x,
                             const std::vector<int>& y, const AttackConfig& cfg) {
  if (source.input_shape() != target.input_shape() ||
      source.num_classes() != target.num_classes()) {
    throw std::invalid_argument("transfer_attack: source and target disagree on input shape "
                                "or class count");
  }
  AttackResult result = run_attack(source, x, y, cfg);
  // Success is what matters on the *target*.
  const std::vector<int> pred = target.predict(result.adversarial);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    result.success[i] = pred[i] != y[i] ? 1 : 0;
    if (pred[i] == y[i]) ++correct;
  }
  result.accuracy_under_attack =
      pred.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(pred.size());
  return result;
}

}  // namespace pcrobust
