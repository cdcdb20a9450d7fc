// Prunable-compute accounting: differentiable expected cost plus an
// independent loop-based counter for hard masks.
//
// All quantities are in "formula units": the per-structure expressions
//   C1 = 2 N D (3 Dh) + 2 N^2 Dh,  C2 = 2 N D + 2 N^2,  C3 = 4 N D
// taken verbatim, i.e. two units per multiply-accumulate. Halve them to get MACs.
#pragma once

#include <cmath>
#include <cstdint>
#include <string>

#include "hiap/config.hpp"
#include "hiap/gating.hpp"
#include "hiap/ops.hpp"
#include "hiap/rng.hpp"

namespace hiap {

struct CostConstants {
  std::uint64_t c1 = 0;  // per live head: Q/K/V projections + attention map
  std::uint64_t c2 = 0;  // per live value dimension under a live head
  std::uint64_t c3 = 0;  // per live FFN neuron under a live block
  std::uint64_t c_const = 0;  // patch embedding, layer norms, classifier (not prunable)
  std::uint64_t dense_prunable_total = 0;
  ModelConfig config;

  double dense_total_with_const() const { return static_cast<double>(dense_prunable_total + c_const); }
};

inline CostConstants cost_constants(const ModelConfig& config) {
  config.validate();
  const std::uint64_t n = config.seq_len(), d = config.embed_dim, dh = config.head_dim;
  const std::uint64_t L = config.layers, H = config.heads, F = config.ffn_dim;
  CostConstants k;
  k.config = config;
  k.c1 = 2 * n * d * (3 * dh) + 2 * n * n * dh;
  k.c2 = 2 * n * d + 2 * n * n;
  k.c3 = 4 * n * d;
  k.dense_prunable_total = L * H * (k.c1 + dh * k.c2) + L * F * k.c3;
  const std::uint64_t patch_embed = 2 * config.patches() * config.patch_dim() * d;
  const std::uint64_t norms = (2 * L + 1) * 2 * n * d;
  const std::uint64_t classifier = 2 * d * config.num_classes;
  k.c_const = patch_embed + norms + classifier;
  return k;
}

/// Head, value-dimension and FFN parts of the expected cost, as scalar tensors.
template <typename T>
struct CostTerms {
  Tensor<T> head;    // sum C1 p_g
  Tensor<T> dim;     // sum C2 p_g p_d
  Tensor<T> neuron;  // sum C3 p_b p_c
};

template <typename T>
CostTerms<T> cost_terms(const GateSet<T>& p, const CostConstants& k) {
  return {scale(sum(p.head), static_cast<T>(k.c1)), scale(sum(mul(p.head, sum_lastdim(p.dim))), static_cast<T>(k.c2)),
          scale(sum(mul(p.block, sum_lastdim(p.neuron))), static_cast<T>(k.c3))};
}

/// Expected prunable cost from per-gate keep probabilities. E[g d] is taken
/// as p_g p_d, which holds for independently drawn gate noise.
template <typename T>
Tensor<T> expected_cost(const GateSet<T>& probabilities, const CostConstants& k) {
  auto t = cost_terms(probabilities, k);
  return add(add(t.head, t.dim), t.neuron);
}

template <typename T>
Tensor<T> expected_cost(const GateBank<T>& bank, const CostConstants& k) {
  return expected_cost(gate_probabilities(bank), k);
}

/// Exact prunable cost of a hard mask, counted unit by unit.
inline std::uint64_t oracle_count(const ArchitectureMask& mask, const CostConstants& k) {
  std::uint64_t total = 0;
  for (std::size_t l = 0; l < mask.layers; ++l) {
    for (std::size_t h = 0; h < mask.heads; ++h) {
      if (!mask.head_on(l, h)) continue;
      total += k.c1;
      for (std::size_t j = 0; j < mask.head_dim; ++j)
        if (mask.dim_active(l, h, j)) total += k.c2;
    }
    for (std::size_t n = 0; n < mask.ffn_dim; ++n)
      if (mask.neuron_active(l, n)) total += k.c3;
  }
  return total;
}

enum class GateSampler {
  independent,  // every gate draws its own noise
  correlated,   // a head shares one draw with its dims, a block with its neurons
};

struct LinearityReport {
  std::size_t samples = 0;
  double mean_cost = 0;          // sample mean of oracle_count
  double linear_estimate = 0;    // sum_i w_i * (sample mean of z_i)
  double analytic = 0;           // sum_i w_i * E[z_i] in closed form for the sampler
  double factorized = 0;         // sum_i w_i * prod of marginals (independence formula)
  double abs_gap = 0;            // |mean_cost - linear_estimate|
  double rel_gap = 0;
  double analytic_abs_gap = 0;   // |mean_cost - analytic|
  double analytic_rel_gap = 0;
};

/// Draws hard gate samples z = 1[alpha + eps > 0] and checks that the mean
/// realized cost equals the weighted sum of joint-gate expectations.
template <typename T>
LinearityReport monte_carlo_linearity_check(const GateBank<T>& bank, const CostConstants& k, std::size_t samples,
                                            Rng& rng, GateSampler sampler = GateSampler::independent) {
  if (samples < 1000) throw Error("monte_carlo_linearity_check: need at least 1000 samples");
  const auto& c = bank.config;
  const std::size_t L = c.layers, H = c.heads, Dh = c.head_dim, F = c.ffn_dim;
  auto lg = bank.logits.head.data();
  auto lb = bank.logits.block.data();
  auto ld = bank.logits.dim.data();
  auto lc = bank.logits.neuron.data();

  auto mask = ArchitectureMask::filled(c, 0);
  // joint-state counts: z = g, g*d, b*c
  std::vector<double> cnt_g(L * H, 0), cnt_gd(L * H * Dh, 0), cnt_bc(L * F, 0);
  double cost_sum = 0;
  for (std::size_t s = 0; s < samples; ++s) {
    for (std::size_t l = 0; l < L; ++l) {
      for (std::size_t h = 0; h < H; ++h) {
        const double eps = logistic_noise(rng);
        mask.head[l * H + h] = static_cast<double>(lg[l * H + h]) + eps > 0;
        for (std::size_t j = 0; j < Dh; ++j) {
          const std::size_t i = (l * H + h) * Dh + j;
          const double e = sampler == GateSampler::correlated ? eps : logistic_noise(rng);
          mask.dim[i] = static_cast<double>(ld[i]) + e > 0;
        }
      }
      const double eps = logistic_noise(rng);
      mask.block[l] = static_cast<double>(lb[l]) + eps > 0;
      for (std::size_t n = 0; n < F; ++n) {
        const double e = sampler == GateSampler::correlated ? eps : logistic_noise(rng);
        mask.neuron[l * F + n] = static_cast<double>(lc[l * F + n]) + e > 0;
      }
    }
    cost_sum += static_cast<double>(oracle_count(mask, k));
    for (std::size_t l = 0; l < L; ++l) {
      for (std::size_t h = 0; h < H; ++h) {
        cnt_g[l * H + h] += mask.head_on(l, h);
        for (std::size_t j = 0; j < Dh; ++j) cnt_gd[(l * H + h) * Dh + j] += mask.dim_active(l, h, j);
      }
      for (std::size_t n = 0; n < F; ++n) cnt_bc[l * F + n] += mask.neuron_active(l, n);
    }
  }

  auto sig = [](double a) { return 1.0 / (1.0 + std::exp(-a)); };
  const double ns = static_cast<double>(samples);
  LinearityReport r;
  r.samples = samples;
  r.mean_cost = cost_sum / ns;
  for (std::size_t l = 0; l < L; ++l) {
    for (std::size_t h = 0; h < H; ++h) {
      const double ag = lg[l * H + h];
      r.linear_estimate += static_cast<double>(k.c1) * cnt_g[l * H + h] / ns;
      r.analytic += static_cast<double>(k.c1) * sig(ag);
      r.factorized += static_cast<double>(k.c1) * sig(ag);
      for (std::size_t j = 0; j < Dh; ++j) {
        const std::size_t i = (l * H + h) * Dh + j;
        const double ad = ld[i];
        r.linear_estimate += static_cast<double>(k.c2) * cnt_gd[i] / ns;
        // shared noise: both fire iff eps > -min(ag, ad)
        r.analytic += static_cast<double>(k.c2) *
                      (sampler == GateSampler::correlated ? sig(std::min(ag, ad)) : sig(ag) * sig(ad));
        r.factorized += static_cast<double>(k.c2) * sig(ag) * sig(ad);
      }
    }
    const double ab = lb[l];
    for (std::size_t n = 0; n < F; ++n) {
      const double an = lc[l * F + n];
      r.linear_estimate += static_cast<double>(k.c3) * cnt_bc[l * F + n] / ns;
      r.analytic += static_cast<double>(k.c3) *
                    (sampler == GateSampler::correlated ? sig(std::min(ab, an)) : sig(ab) * sig(an));
      r.factorized += static_cast<double>(k.c3) * sig(ab) * sig(an);
    }
  }
  r.abs_gap = std::abs(r.mean_cost - r.linear_estimate);
  r.rel_gap = r.mean_cost > 0 ? r.abs_gap / r.mean_cost : r.abs_gap;
  r.analytic_abs_gap = std::abs(r.mean_cost - r.analytic);
  r.analytic_rel_gap = r.analytic > 0 ? r.analytic_abs_gap / r.analytic : r.analytic_abs_gap;
  return r;
}

struct AlignmentReport {
  double tau = 0;
  double mean_soft_cost = 0;   // mean over samples of the cost formula evaluated at soft gate values
  double hardened_cost = 0;    // oracle_count(harden(bank, 0.5))
  double gap = 0;              // |mean_soft_cost - hardened_cost|
  double gap_fraction = 0;     // gap / dense_prunable_total
};

/// Soft-vs-hard cost alignment at one temperature on a frozen bank.
template <typename T>
AlignmentReport soft_hard_alignment(const GateBank<T>& bank, const CostConstants& k, double tau, std::size_t samples,
                                    Rng& rng) {
  if (!(tau > 0)) throw Error("soft_hard_alignment: temperature must be positive");
  const auto& c = bank.config;
  const std::size_t L = c.layers, H = c.heads, Dh = c.head_dim, F = c.ffn_dim;
  auto draw = [&](T logit) {
    const double z = (static_cast<double>(logit) + logistic_noise(rng)) / tau;
    return 1.0 / (1.0 + std::exp(-z));
  };
  auto lg = bank.logits.head.data();
  auto lb = bank.logits.block.data();
  auto ld = bank.logits.dim.data();
  auto lc = bank.logits.neuron.data();
  double total = 0;
  for (std::size_t s = 0; s < samples; ++s) {
    double cost = 0;
    for (std::size_t l = 0; l < L; ++l) {
      for (std::size_t h = 0; h < H; ++h) {
        const double g = draw(lg[l * H + h]);
        double dims = 0;
        for (std::size_t j = 0; j < Dh; ++j) dims += draw(ld[(l * H + h) * Dh + j]);
        cost += static_cast<double>(k.c1) * g + static_cast<double>(k.c2) * g * dims;
      }
      const double b = draw(lb[l]);
      double neurons = 0;
      for (std::size_t n = 0; n < F; ++n) neurons += draw(lc[l * F + n]);
      cost += static_cast<double>(k.c3) * b * neurons;
    }
    total += cost;
  }
  AlignmentReport r;
  r.tau = tau;
  r.mean_soft_cost = total / static_cast<double>(samples);
  r.hardened_cost = static_cast<double>(oracle_count(harden(bank, 0.5), k));
  r.gap = std::abs(r.mean_soft_cost - r.hardened_cost);
  r.gap_fraction = r.gap / static_cast<double>(k.dense_prunable_total);
  return r;
}

/// Per-layer structure counts and costs of a hard mask (for reporting).
struct LayerCost {
  std::size_t heads = 0, dims = 0, neurons = 0;
  bool block = false;
  std::uint64_t head_cost = 0, dim_cost = 0, ffn_cost = 0;
};

inline std::vector<LayerCost> per_layer_cost(const ArchitectureMask& mask, const CostConstants& k) {
  std::vector<LayerCost> out(mask.layers);
  for (std::size_t l = 0; l < mask.layers; ++l) {
    auto& lc = out[l];
    lc.block = mask.block_on(l);
    for (std::size_t h = 0; h < mask.heads; ++h) {
      if (!mask.head_on(l, h)) continue;
      ++lc.heads;
      for (std::size_t j = 0; j < mask.head_dim; ++j) lc.dims += mask.dim_active(l, h, j);
    }
    for (std::size_t n = 0; n < mask.ffn_dim; ++n) lc.neurons += mask.neuron_active(l, n);
    lc.head_cost = lc.heads * k.c1;
    lc.dim_cost = lc.dims * k.c2;
    lc.ffn_cost = lc.neurons * k.c3;
  }
  return out;
}

}  // namespace hiap
