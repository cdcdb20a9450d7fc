// Gate logits, Gumbel-Sigmoid sampling, temperature annealing and hardening.
#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "hiap/config.hpp"
#include "hiap/log.hpp"
#include "hiap/ops.hpp"
#include "hiap/rng.hpp"

namespace hiap {

enum class GateFamily { head, block, dim, neuron };

inline const char* family_name(GateFamily f) {
  switch (f) {
    case GateFamily::head: return "head";
    case GateFamily::block: return "block";
    case GateFamily::dim: return "dim";
    case GateFamily::neuron: return "neuron";
  }
  return "?";
}

inline constexpr std::array<GateFamily, 4> kGateFamilies{GateFamily::head, GateFamily::block, GateFamily::dim,
                                                        GateFamily::neuron};

enum class SampleMode { soft, hard_ste, deterministic };

inline constexpr double kLogitClip = 12.0;
inline constexpr double kDefaultGateInit = 3.0;
inline constexpr double kNoiseClamp = 1e-6;

/// One tensor per gate family: heads [L,H], blocks [L], dims [L,H,Dh], neurons [L,Dffn].
template <typename T>
struct GateSet {
  Tensor<T> head;
  Tensor<T> block;
  Tensor<T> dim;
  Tensor<T> neuron;

  const Tensor<T>& operator[](GateFamily f) const {
    switch (f) {
      case GateFamily::head: return head;
      case GateFamily::block: return block;
      case GateFamily::dim: return dim;
      default: return neuron;
    }
  }
  Tensor<T>& operator[](GateFamily f) {
    return const_cast<Tensor<T>&>(static_cast<const GateSet&>(*this)[f]);
  }
};

inline Shape gate_shape(const ModelConfig& c, GateFamily f) {
  switch (f) {
    case GateFamily::head: return {c.layers, c.heads};
    case GateFamily::block: return {c.layers};
    case GateFamily::dim: return {c.layers, c.heads, c.head_dim};
    default: return {c.layers, c.ffn_dim};
  }
}

/// Learnable gate logits for every prunable structure.
template <typename T>
struct GateBank {
  ModelConfig config;
  GateSet<T> logits;

  static GateBank create(const ModelConfig& config, T init = T(kDefaultGateInit)) {
    config.validate();
    GateBank bank{config, {}};
    for (auto f : kGateFamilies) {
      bank.logits[f] = Tensor<T>::full(gate_shape(config, f), init);
      bank.logits[f].set_requires_grad(true);
    }
    return bank;
  }

  std::vector<Tensor<T>> parameters() const { return {logits.head, logits.block, logits.dim, logits.neuron}; }

  void validate() const {
    for (auto f : kGateFamilies) {
      if (!logits[f].defined() || logits[f].shape() != gate_shape(config, f))
        throw ShapeError(std::string("gate bank: ") + family_name(f) + " logits do not match the model config");
      for (T v : logits[f].data())
        if (!std::isfinite(static_cast<double>(v))) throw Error(std::string("gate bank: non-finite ") + family_name(f) + " logit");
    }
  }

  void clip(T limit = T(kLogitClip)) {
    for (auto f : kGateFamilies)
      for (auto& v : logits[f].data()) v = std::clamp(v, -limit, limit);
  }

  std::size_t gate_count() const {
    std::size_t n = 0;
    for (auto f : kGateFamilies) n += logits[f].numel();
    return n;
  }

  template <typename U>
  GateBank<U> cast() const {
    GateBank<U> out{config, {}};
    for (auto f : kGateFamilies) out.logits[f] = logits[f].template cast<U>();
    return out;
  }
};

/// Result of sampling one logit tensor. `value` is what the forward pass uses:
/// the soft sample itself, or its 0/1 threshold routed straight-through.
template <typename T>
struct GateDraw {
  Tensor<T> soft;
  Tensor<T> value;
  SampleMode mode;
};

template <typename T>
struct GateSample {
  GateSet<T> soft;
  GateSet<T> value;
  SampleMode mode = SampleMode::soft;
  double tau = 1.0;
};

/// Logistic noise log(u) - log(1 - u) with u clamped away from {0, 1}.
inline double logistic_noise(Rng& rng) {
  const double u = std::clamp(rng.uniform(), kNoiseClamp, 1.0 - kNoiseClamp);
  return std::log(u) - std::log1p(-u);
}

/// z = sigmoid((alpha + eps) / tau). Deterministic mode uses eps = 0.
template <typename T>
GateDraw<T> sample_gate(const Tensor<T>& logits, double tau, Rng& rng, SampleMode mode) {
  if (!(tau > 0.0)) throw Error("sample_gate: temperature must be positive, got " + std::to_string(tau));
  if (!rng.seeded()) throw Error("sample_gate: random generator is not seeded");
  Tensor<T> pre = logits;
  if (mode != SampleMode::deterministic) {
    std::vector<T> noise(logits.numel());
    for (auto& e : noise) e = static_cast<T>(logistic_noise(rng));
    pre = add(logits, Tensor<T>(logits.shape(), std::move(noise)));
  }
  Tensor<T> soft = sigmoid(scale(pre, static_cast<T>(1.0 / tau)));
  Tensor<T> value = mode == SampleMode::hard_ste ? straight_through(soft) : soft;
  return {soft, value, mode};
}

template <typename T>
GateSample<T> sample_gates(const GateBank<T>& bank, double tau, Rng& rng, SampleMode mode) {
  GateSample<T> s;
  s.mode = mode;
  s.tau = tau;
  for (auto f : kGateFamilies) {
    auto draw = sample_gate(bank.logits[f], tau, rng, mode);
    s.soft[f] = draw.soft;
    s.value[f] = draw.value;
  }
  return s;
}

/// sigmoid(alpha): probability that a sampled gate lands above 0.5, at any temperature.
template <typename T>
Tensor<T> gate_probability(const Tensor<T>& logits) {
  return sigmoid(logits);
}

template <typename T>
GateSet<T> gate_probabilities(const GateBank<T>& bank) {
  GateSet<T> p;
  for (auto f : kGateFamilies) p[f] = gate_probability(bank.logits[f]);
  return p;
}

struct AnnealSchedule {
  double tau0 = 2.0;
  double tau_min = 0.5;
  std::size_t total_steps = 1;
};

inline void to_json(json& j, const AnnealSchedule& s) {
  j = json{{"tau0", s.tau0}, {"tau_min", s.tau_min}, {"total_steps", s.total_steps}};
}
inline void from_json(const json& j, AnnealSchedule& s) {
  check_keys(j, {"tau0", "tau_min", "total_steps"}, "anneal");
  AnnealSchedule d;
  s.tau0 = j.value("tau0", d.tau0);
  s.tau_min = j.value("tau_min", d.tau_min);
  s.total_steps = j.value("total_steps", d.total_steps);
}

/// Exponential decay tau0 * (tau_min / tau0)^(step / total_steps).
inline double anneal_temperature(const AnnealSchedule& schedule, long long step) {
  if (!(schedule.tau0 > 0.0) || !(schedule.tau_min > 0.0))
    throw ConfigError("anneal schedule: temperatures must be positive");
  const long long total = static_cast<long long>(std::max<std::size_t>(schedule.total_steps, 1));
  if (step < 0 || step > total) {
    log_warning("anneal_temperature: step " + std::to_string(step) + " outside [0, " + std::to_string(total) +
                "], clamped");
    step = std::clamp(step, 0LL, total);
  }
  if (step == total) return schedule.tau_min;
  const double frac = static_cast<double>(step) / static_cast<double>(total);
  return schedule.tau0 * std::pow(schedule.tau_min / schedule.tau0, frac);
}

/// Binary keep/drop decision per gate. Joint activity follows the hierarchy:
/// a dimension counts only under a live head, a neuron only in a live block.
struct ArchitectureMask {
  std::size_t layers = 0, heads = 0, head_dim = 0, ffn_dim = 0;
  std::vector<std::uint8_t> head, block, dim, neuron;

  static ArchitectureMask filled(const ModelConfig& c, std::uint8_t v) {
    ArchitectureMask m;
    m.layers = c.layers;
    m.heads = c.heads;
    m.head_dim = c.head_dim;
    m.ffn_dim = c.ffn_dim;
    m.head.assign(c.layers * c.heads, v);
    m.block.assign(c.layers, v);
    m.dim.assign(c.layers * c.heads * c.head_dim, v);
    m.neuron.assign(c.layers * c.ffn_dim, v);
    return m;
  }
  static ArchitectureMask dense(const ModelConfig& c) { return filled(c, 1); }

  bool head_on(std::size_t l, std::size_t h) const { return head[l * heads + h] != 0; }
  bool block_on(std::size_t l) const { return block[l] != 0; }
  bool dim_on(std::size_t l, std::size_t h, std::size_t j) const { return dim[(l * heads + h) * head_dim + j] != 0; }
  bool neuron_on(std::size_t l, std::size_t k) const { return neuron[l * ffn_dim + k] != 0; }

  bool dim_active(std::size_t l, std::size_t h, std::size_t j) const { return head_on(l, h) && dim_on(l, h, j); }
  bool neuron_active(std::size_t l, std::size_t k) const { return block_on(l) && neuron_on(l, k); }

  std::vector<std::uint8_t>& bits(GateFamily f) {
    switch (f) {
      case GateFamily::head: return head;
      case GateFamily::block: return block;
      case GateFamily::dim: return dim;
      default: return neuron;
    }
  }
  const std::vector<std::uint8_t>& bits(GateFamily f) const { return const_cast<ArchitectureMask&>(*this).bits(f); }

  bool matches(const ModelConfig& c) const {
    return layers == c.layers && heads == c.heads && head_dim == c.head_dim && ffn_dim == c.ffn_dim;
  }

  bool operator==(const ArchitectureMask&) const = default;
};

/// Noise-free hardening: bit = sigmoid(alpha) > threshold (ties prune).
template <typename T>
ArchitectureMask harden(const GateBank<T>& bank, double threshold) {
  if (!(threshold > 0.0 && threshold < 1.0))
    throw Error("harden: threshold must lie in (0, 1), got " + std::to_string(threshold));
  auto mask = ArchitectureMask::filled(bank.config, 0);
  for (auto f : kGateFamilies) {
    auto src = bank.logits[f].data();
    auto& dst = mask.bits(f);
    for (std::size_t i = 0; i < src.size(); ++i) {
      const double p = 1.0 / (1.0 + std::exp(-static_cast<double>(src[i])));
      dst[i] = p > threshold ? 1 : 0;
    }
  }
  return mask;
}

/// 0/1 gate values reproducing a mask in the gated forward pass.
template <typename T>
GateSet<T> mask_gates(const ArchitectureMask& mask, const ModelConfig& config) {
  if (!mask.matches(config)) throw ShapeError("mask_gates: mask does not match the model config");
  GateSet<T> g;
  for (auto f : kGateFamilies) {
    const auto& bits = mask.bits(f);
    std::vector<T> v(bits.begin(), bits.end());
    g[f] = Tensor<T>(gate_shape(config, f), std::move(v));
  }
  return g;
}

/// All effective attention masks (bit h*Dh+j = dimension j of head h is live)
/// reachable by the gates. With `micro` false the dim gates are pinned open.
inline std::set<std::uint64_t> enumerate_effective_attention_masks(std::size_t heads, std::size_t head_dim, bool micro) {
  const std::size_t dims = heads * head_dim;
  if (dims > 20 || heads > 20) throw Error("enumerate_effective_attention_masks: search space too large");
  std::set<std::uint64_t> out;
  ModelConfig c;
  c.layers = 1;
  c.heads = heads;
  c.head_dim = head_dim;
  c.ffn_dim = 1;
  const std::uint64_t dim_space = micro ? (1ull << dims) : 1;
  for (std::uint64_t g = 0; g < (1ull << heads); ++g) {
    for (std::uint64_t d = 0; d < dim_space; ++d) {
      auto m = ArchitectureMask::filled(c, 1);
      for (std::size_t h = 0; h < heads; ++h) m.head[h] = (g >> h) & 1;
      if (micro)
        for (std::size_t i = 0; i < dims; ++i) m.dim[i] = (d >> i) & 1;
      std::uint64_t eff = 0;
      for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t j = 0; j < head_dim; ++j)
          if (m.dim_active(0, h, j)) eff |= 1ull << (h * head_dim + j);
      out.insert(eff);
    }
  }
  return out;
}

}  // namespace hiap
