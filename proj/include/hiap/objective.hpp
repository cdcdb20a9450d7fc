// Training objective: task loss (CE + optional distillation), normalized
// macro/micro cost penalties and squared-ReLU retention quotas.
#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "hiap/config.hpp"
#include "hiap/cost_model.hpp"
#include "hiap/gating.hpp"
#include "hiap/ops.hpp"

namespace hiap {

struct PenaltyConfig {
  double lambda_macro = 0.0;
  double lambda_micro = 0.0;
  double beta_head = 10.0;
  double beta_dim = 10.0;
  double beta_ffn = 10.0;
  double k_min = 1.0;
  double gamma_attn = 0.25;
  double gamma_ffn = 0.25;
  double alpha_kd = 0.7;
  double t_kd = 4.0;

  void validate(std::size_t heads) const {
    for (double v : {lambda_macro, lambda_micro, beta_head, beta_dim, beta_ffn})
      if (!(v >= 0.0)) throw ConfigError("penalty config: weights must be non-negative");
    if (!(k_min >= 0.0 && k_min <= static_cast<double>(heads)))
      throw ConfigError("penalty config: k_min must lie in [0, heads]");
    if (!(gamma_attn >= 0.0 && gamma_attn <= 1.0) || !(gamma_ffn >= 0.0 && gamma_ffn <= 1.0))
      throw ConfigError("penalty config: gamma ratios must lie in [0, 1]");
    if (!(alpha_kd >= 0.0 && alpha_kd <= 1.0)) throw ConfigError("penalty config: alpha_kd must lie in [0, 1]");
    if (!(t_kd > 0.0)) throw ConfigError("penalty config: t_kd must be positive");
  }
};

inline void to_json(json& j, const PenaltyConfig& p) {
  j = json{{"lambda_macro", p.lambda_macro}, {"lambda_micro", p.lambda_micro}, {"beta_head", p.beta_head},
           {"beta_dim", p.beta_dim},         {"beta_ffn", p.beta_ffn},         {"k_min", p.k_min},
           {"gamma_attn", p.gamma_attn},     {"gamma_ffn", p.gamma_ffn},       {"alpha_kd", p.alpha_kd},
           {"t_kd", p.t_kd}};
}

inline void from_json(const json& j, PenaltyConfig& p) {
  check_keys(j,
             {"lambda_macro", "lambda_micro", "beta_head", "beta_dim", "beta_ffn", "k_min", "gamma_attn", "gamma_ffn",
              "alpha_kd", "t_kd"},
             "penalty");
  PenaltyConfig d;
  p.lambda_macro = j.value("lambda_macro", d.lambda_macro);
  p.lambda_micro = j.value("lambda_micro", d.lambda_micro);
  p.beta_head = j.value("beta_head", d.beta_head);
  p.beta_dim = j.value("beta_dim", d.beta_dim);
  p.beta_ffn = j.value("beta_ffn", d.beta_ffn);
  p.k_min = j.value("k_min", d.k_min);
  p.gamma_attn = j.value("gamma_attn", d.gamma_attn);
  p.gamma_ffn = j.value("gamma_ffn", d.gamma_ffn);
  p.alpha_kd = j.value("alpha_kd", d.alpha_kd);
  p.t_kd = j.value("t_kd", d.t_kd);
}

template <typename T>
Tensor<T> one_hot(const std::vector<int>& labels, std::size_t classes) {
  std::vector<T> v(labels.size() * classes, T(0));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= classes)
      throw Error("label " + std::to_string(labels[i]) + " out of range for " + std::to_string(classes) + " classes");
    v[i * classes + static_cast<std::size_t>(labels[i])] = T(1);
  }
  return Tensor<T>({labels.size(), classes}, std::move(v));
}

/// Mean cross-entropy of logits [B,C] against integer labels.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<int>& labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size())
    throw ShapeError("cross_entropy: logits " + shape_str(logits.shape()) + " vs " + std::to_string(labels.size()) +
                     " labels");
  auto targets = one_hot<T>(labels, logits.dim(1));
  return scale(sum(mul(log_softmax_lastdim(logits), targets)), static_cast<T>(-1.0 / labels.size()));
}

/// Batch-mean KL(softmax(teacher / t) || softmax(student / t)).
template <typename T>
Tensor<T> distillation_kl(const Tensor<T>& student, const Tensor<T>& teacher, double t) {
  if (student.shape() != teacher.shape())
    throw_shape_error(OpKind::add, student.shape(), teacher.shape(), "teacher/student logits");
  const T inv_t = static_cast<T>(1.0 / t);
  auto log_pt = log_softmax_lastdim(scale(teacher.detach(), inv_t));
  std::vector<T> pt(log_pt.numel());
  for (std::size_t i = 0; i < pt.size(); ++i) pt[i] = std::exp(log_pt[i]);
  Tensor<T> p_teacher(log_pt.shape(), std::move(pt));
  auto log_ps = log_softmax_lastdim(scale(student, inv_t));
  // sum p_t (log p_t - log p_s) / B
  auto diff = sub(log_pt, log_ps);
  return scale(sum(mul(diff, p_teacher)), static_cast<T>(1.0 / student.dim(0)));
}

/// (1 - a) CE + a T^2 KL when a teacher is present; plain CE otherwise.
template <typename T>
Tensor<T> task_loss(const Tensor<T>& student_logits, const std::vector<int>& labels, const Tensor<T>* teacher_logits,
                    const PenaltyConfig& cfg) {
  auto ce = cross_entropy(student_logits, labels);
  if (!teacher_logits || !teacher_logits->defined()) return ce;
  auto kl = distillation_kl(student_logits, *teacher_logits, cfg.t_kd);
  return add(scale(ce, static_cast<T>(1.0 - cfg.alpha_kd)),
             scale(kl, static_cast<T>(cfg.alpha_kd * cfg.t_kd * cfg.t_kd)));
}

template <typename T>
struct CostPenalties {
  Tensor<T> macro;  // C1 share, normalized by the dense prunable total
  Tensor<T> micro;  // C2 + C3 shares, same normalization
};

template <typename T>
CostPenalties<T> cost_penalties(const GateSet<T>& probabilities, const CostConstants& k) {
  auto t = cost_terms(probabilities, k);
  const T inv_total = static_cast<T>(1.0 / static_cast<double>(k.dense_prunable_total));
  return {scale(t.head, inv_total), scale(add(t.dim, t.neuron), inv_total)};
}

template <typename T>
CostPenalties<T> cost_penalties(const GateBank<T>& bank, const CostConstants& k) {
  return cost_penalties(gate_probabilities(bank), k);
}

template <typename T>
struct FeasibilityTerms {
  Tensor<T> head;   // sum_l relu(k_min - sum_h p_g)^2
  Tensor<T> dim;    // sum_{l,h} relu(gamma_attn Dh - sum_j p_d)^2
  Tensor<T> ffn;    // sum_l relu(gamma_ffn Dffn - sum_k p_c)^2
  Tensor<T> total;  // beta-weighted sum
};

namespace detail {
template <typename T>
Tensor<T> quota_deficit(const Tensor<T>& counts, double quota) {
  auto deficit = relu(add(scale(counts, T(-1)), static_cast<T>(quota)));
  return sum(mul(deficit, deficit));
}
}  // namespace detail

/// Retention quotas computed on soft counts (gate probabilities).
template <typename T>
FeasibilityTerms<T> feasibility_penalty(const GateSet<T>& p, const PenaltyConfig& cfg, const ModelConfig& mc) {
  FeasibilityTerms<T> f;
  f.head = detail::quota_deficit(sum_lastdim(p.head), cfg.k_min);
  f.dim = detail::quota_deficit(sum_lastdim(p.dim), cfg.gamma_attn * static_cast<double>(mc.head_dim));
  f.ffn = detail::quota_deficit(sum_lastdim(p.neuron), cfg.gamma_ffn * static_cast<double>(mc.ffn_dim));
  f.total = add(add(scale(f.head, static_cast<T>(cfg.beta_head)), scale(f.dim, static_cast<T>(cfg.beta_dim))),
                scale(f.ffn, static_cast<T>(cfg.beta_ffn)));
  return f;
}

template <typename T>
FeasibilityTerms<T> feasibility_penalty(const GateBank<T>& bank, const PenaltyConfig& cfg) {
  return feasibility_penalty(gate_probabilities(bank), cfg, bank.config);
}

/// task + lambda_macro * macro + lambda_micro * micro + feasibility.
template <typename T>
Tensor<T> total_loss(const Tensor<T>& task, const Tensor<T>& macro, const Tensor<T>& micro, const Tensor<T>& feas,
                     const PenaltyConfig& cfg) {
  const std::pair<const char*, const Tensor<T>*> terms[] = {
      {"task", &task}, {"L_macro", &macro}, {"L_micro", &micro}, {"L_feasibility", &feas}};
  for (const auto& [name, t] : terms)
    if (!std::isfinite(static_cast<double>(t->item()))) throw Error(std::string("total_loss: ") + name + " is not finite");
  return add(add(add(task, scale(macro, static_cast<T>(cfg.lambda_macro))),
                 scale(micro, static_cast<T>(cfg.lambda_micro))),
             feas);
}

}  // namespace hiap
