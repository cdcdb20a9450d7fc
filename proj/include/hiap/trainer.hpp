// Single-phase training: weights and gate logits optimized jointly while the
// gate temperature anneals; gate traces and metrics are streamed to CSV.
#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "hiap/checkpoint.hpp"
#include "hiap/cost_model.hpp"
#include "hiap/dataset.hpp"
#include "hiap/gating.hpp"
#include "hiap/log.hpp"
#include "hiap/model.hpp"
#include "hiap/objective.hpp"
#include "hiap/optimizer.hpp"

namespace hiap {

enum class GateMode {
  scheduled,  // soft for the first `soft_fraction` of steps, then hard straight-through
  soft,
  hard_ste,
};

inline GateMode parse_gate_mode(const std::string& s) {
  if (s == "scheduled") return GateMode::scheduled;
  if (s == "soft") return GateMode::soft;
  if (s == "hard_ste") return GateMode::hard_ste;
  throw ConfigError("unknown gate_mode '" + s + "' (expected scheduled, soft or hard_ste)");
}

inline const char* gate_mode_name(GateMode m) {
  switch (m) {
    case GateMode::scheduled: return "scheduled";
    case GateMode::soft: return "soft";
    default: return "hard_ste";
  }
}

struct TrainConfig {
  ModelConfig model;
  PenaltyConfig penalty;
  AnnealSchedule anneal;  // total_steps is derived from epochs and data size
  std::size_t epochs = 40;
  std::size_t batch_size = 64;
  double learning_rate = 1e-3;
  double gate_lr_multiplier = 10.0;
  double weight_decay = 0.05;
  std::uint64_t seed = 0;
  std::string train_data;
  std::string val_data;
  std::string dataset_format = "cifar10_binary";
  std::vector<int> classes;  // CIFAR class filter; empty keeps all
  std::size_t max_train_samples = 0;
  std::size_t max_val_samples = 0;
  std::string teacher_checkpoint;
  std::size_t trace_interval = 0;  // in steps; 0 = once per epoch
  std::string output_dir = "run";
  GateMode gate_mode = GateMode::scheduled;
  double soft_fraction = 0.5;
  double gate_init = kDefaultGateInit;
  bool augment = true;

  void validate() const {
    model.validate();
    penalty.validate(model.heads);
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (!(learning_rate > 0)) throw ConfigError("learning_rate must be positive");
    if (!(gate_lr_multiplier >= 0)) throw ConfigError("gate_lr_multiplier must be non-negative");
    if (!(weight_decay >= 0)) throw ConfigError("weight_decay must be non-negative");
    if (!(anneal.tau0 > 0) || !(anneal.tau_min > 0)) throw ConfigError("anneal temperatures must be positive");
    if (!(soft_fraction >= 0 && soft_fraction <= 1)) throw ConfigError("soft_fraction must lie in [0, 1]");
  }
};

inline void to_json(json& j, const TrainConfig& c) {
  j = json{{"model", c.model},
           {"penalty", c.penalty},
           {"anneal", {{"tau0", c.anneal.tau0}, {"tau_min", c.anneal.tau_min}}},
           {"epochs", c.epochs},
           {"batch_size", c.batch_size},
           {"learning_rate", c.learning_rate},
           {"gate_lr_multiplier", c.gate_lr_multiplier},
           {"weight_decay", c.weight_decay},
           {"seed", c.seed},
           {"train_data", c.train_data},
           {"val_data", c.val_data},
           {"dataset_format", c.dataset_format},
           {"classes", c.classes},
           {"max_train_samples", c.max_train_samples},
           {"max_val_samples", c.max_val_samples},
           {"teacher_checkpoint", c.teacher_checkpoint},
           {"trace_interval", c.trace_interval},
           {"output_dir", c.output_dir},
           {"gate_mode", gate_mode_name(c.gate_mode)},
           {"soft_fraction", c.soft_fraction},
           {"gate_init", c.gate_init},
           {"augment", c.augment}};
}

inline void from_json(const json& j, TrainConfig& c) {
  check_keys(j,
             {"model", "penalty", "anneal", "epochs", "batch_size", "learning_rate", "gate_lr_multiplier",
              "weight_decay", "seed", "train_data", "val_data", "dataset_format", "classes", "max_train_samples",
              "max_val_samples", "teacher_checkpoint", "trace_interval", "output_dir", "gate_mode", "soft_fraction",
              "gate_init", "augment"},
             "train config");
  TrainConfig d;
  if (j.contains("model")) {
    check_keys(j["model"],
               {"layers", "heads", "embed_dim", "head_dim", "ffn_dim", "patch_size", "image_size", "channels",
                "num_classes"},
               "model");
    c.model = j["model"].get<ModelConfig>();
  }
  if (j.contains("penalty")) c.penalty = j["penalty"].get<PenaltyConfig>();
  if (j.contains("anneal")) c.anneal = j["anneal"].get<AnnealSchedule>();
  c.epochs = j.value("epochs", d.epochs);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.learning_rate = j.value("learning_rate", d.learning_rate);
  c.gate_lr_multiplier = j.value("gate_lr_multiplier", d.gate_lr_multiplier);
  c.weight_decay = j.value("weight_decay", d.weight_decay);
  c.seed = j.value("seed", d.seed);
  c.train_data = j.value("train_data", d.train_data);
  c.val_data = j.value("val_data", d.val_data);
  c.dataset_format = j.value("dataset_format", d.dataset_format);
  c.classes = j.value("classes", d.classes);
  c.max_train_samples = j.value("max_train_samples", d.max_train_samples);
  c.max_val_samples = j.value("max_val_samples", d.max_val_samples);
  c.teacher_checkpoint = j.value("teacher_checkpoint", d.teacher_checkpoint);
  c.trace_interval = j.value("trace_interval", d.trace_interval);
  c.output_dir = j.value("output_dir", d.output_dir);
  c.gate_mode = parse_gate_mode(j.value("gate_mode", std::string(gate_mode_name(d.gate_mode))));
  c.soft_fraction = j.value("soft_fraction", d.soft_fraction);
  c.gate_init = j.value("gate_init", d.gate_init);
  c.augment = j.value("augment", d.augment);
}

/// Parses and validates a config file; missing dataset paths name the field.
inline TrainConfig load_train_config(const std::filesystem::path& path) {
  json j;
  try {
    const auto bytes = read_file(path);
    j = json::parse(bytes.begin(), bytes.end());
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  TrainConfig c;
  try {
    c = j.get<TrainConfig>();
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  if (c.train_data.empty()) throw ConfigError(path.string() + ": missing required field 'train_data'");
  if (c.val_data.empty()) throw ConfigError(path.string() + ": missing required field 'val_data'");
  c.validate();
  return c;
}

struct GateTraceRecord {
  std::size_t step = 0;
  std::size_t layer = 0;
  GateFamily family = GateFamily::head;
  std::vector<std::size_t> index;  // (h), (), (h, j), (k)
  double probability = 0;
  double tau = 0;
  double cost_fraction = 0;
};

inline constexpr const char* kTraceHeader = "step,layer,family,index,probability,tau,cost_fraction";
inline constexpr const char* kMetricsHeader =
    "step,epoch,tau,task_loss,L_macro,L_micro,L_feas,expected_cost_fraction,val_acc";

inline std::string format_trace_row(const GateTraceRecord& r) {
  std::string idx;
  for (std::size_t i = 0; i < r.index.size(); ++i) idx += (i ? ":" : "") + std::to_string(r.index[i]);
  if (idx.empty()) idx = "-";
  char buf[160];
  std::snprintf(buf, sizeof(buf), "%zu,%zu,%s,%s,%.6f,%.6f,%.6f", r.step, r.layer, family_name(r.family), idx.c_str(),
                r.probability, r.tau, r.cost_fraction);
  return buf;
}

/// One record per gate, probabilities sigma(alpha).
inline std::vector<GateTraceRecord> snapshot_gates(const GateBank<float>& bank, std::size_t step, double tau,
                                                   double cost_fraction) {
  const auto& c = bank.config;
  auto sig = [](float a) { return 1.0 / (1.0 + std::exp(-static_cast<double>(a))); };
  std::vector<GateTraceRecord> out;
  out.reserve(bank.gate_count());
  for (std::size_t l = 0; l < c.layers; ++l) {
    for (std::size_t h = 0; h < c.heads; ++h)
      out.push_back({step, l, GateFamily::head, {h}, sig(bank.logits.head[l * c.heads + h]), tau, cost_fraction});
    out.push_back({step, l, GateFamily::block, {}, sig(bank.logits.block[l]), tau, cost_fraction});
    for (std::size_t h = 0; h < c.heads; ++h)
      for (std::size_t j = 0; j < c.head_dim; ++j)
        out.push_back({step, l, GateFamily::dim, {h, j}, sig(bank.logits.dim[(l * c.heads + h) * c.head_dim + j]),
                       tau, cost_fraction});
    for (std::size_t k = 0; k < c.ffn_dim; ++k)
      out.push_back({step, l, GateFamily::neuron, {k}, sig(bank.logits.neuron[l * c.ffn_dim + k]), tau, cost_fraction});
  }
  return out;
}

struct MetricsRow {
  std::size_t step = 0, epoch = 0;
  double tau = 0, task_loss = 0, l_macro = 0, l_micro = 0, l_feas = 0, expected_cost_fraction = 0, val_acc = 0;
};

inline std::string format_metrics_row(const MetricsRow& m) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%zu,%zu,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f", m.step, m.epoch, m.tau, m.task_loss,
                m.l_macro, m.l_micro, m.l_feas, m.expected_cost_fraction, m.val_acc);
  return buf;
}

class TrainingAborted : public Error {
 public:
  using Error::Error;
};

struct TrainOptions {
  std::optional<ArchitectureMask> fixed_mask;  // train weights under a frozen architecture
  const GatedCheckpoint* teacher = nullptr;
  bool write_files = true;
  bool verbose = false;
};

struct TrainResult {
  GatedCheckpoint checkpoint;
  std::vector<MetricsRow> metrics;
  std::size_t steps = 0;
  std::size_t skipped_steps = 0;
  double final_val_acc = 0;
  double expected_cost_fraction = 0;
  double hardened_cost_fraction = 0;
  ArchitectureMask mask;
  std::filesystem::path checkpoint_path, metrics_path, trace_path;
};

/// Logits for a dataset under hard gates, evaluated without recording a graph.
inline double evaluate_accuracy(const ModelWeights<float>& weights, const GateSet<float>& gates, const Dataset& ds,
                                std::size_t batch_size = 100) {
  NoGradGuard no_grad;
  std::size_t correct = 0;
  std::vector<std::size_t> idx(ds.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t s = 0; s < ds.size(); s += batch_size) {
    const std::size_t e = std::min(ds.size(), s + batch_size);
    auto batch = make_batch(ds, std::span<const std::size_t>(idx).subspan(s, e - s), false, nullptr);
    auto logits = model_forward(batch.images, weights, &gates);
    const std::size_t classes = logits.dim(1);
    for (std::size_t b = 0; b < e - s; ++b) {
      auto row = logits.data().subspan(b * classes, classes);
      const auto best = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
      correct += best == batch.labels[b];
    }
  }
  return ds.size() ? static_cast<double>(correct) / static_cast<double>(ds.size()) : 0.0;
}

inline TrainResult train(const TrainConfig& config, const Dataset& train_set, const Dataset& val_set,
                         const TrainOptions& options = {}) {
  config.validate();
  const auto& mc = config.model;
  if (train_set.size() == 0) throw Error("train: empty training set");
  if (train_set.channels != mc.channels || train_set.height != mc.image_size || train_set.width != mc.image_size)
    throw ShapeError("train: dataset images do not match the model config");
  if (options.fixed_mask && !options.fixed_mask->matches(mc)) throw ShapeError("train: fixed mask does not match model");

  Rng root(config.seed);
  Rng init_rng = root.split(), data_rng = root.split(), noise_rng = root.split();

  GatedCheckpoint ckpt{init_weights<float>(mc, init_rng), GateBank<float>::create(mc, static_cast<float>(config.gate_init))};
  const bool learn_gates = !options.fixed_mask;
  if (!learn_gates)
    for (auto& t : ckpt.bank.parameters()) t.set_requires_grad(false);

  std::vector<AdamW::Group> groups{{ckpt.weights.parameters(), 1.0, config.weight_decay}};
  if (learn_gates) groups.push_back({ckpt.bank.parameters(), config.gate_lr_multiplier, 0.0});
  AdamW opt(std::move(groups));

  const CostConstants k = cost_constants(mc);
  const std::size_t steps_per_epoch = (train_set.size() + config.batch_size - 1) / config.batch_size;
  const std::size_t total_steps = steps_per_epoch * config.epochs;
  AnnealSchedule schedule = config.anneal;
  schedule.total_steps = total_steps;
  const std::size_t trace_interval = config.trace_interval ? config.trace_interval : steps_per_epoch;

  std::optional<GateSet<float>> teacher_gates;
  if (options.teacher) {
    if (!(options.teacher->config() == mc)) throw ConfigError("teacher checkpoint config differs from model config");
    teacher_gates = mask_gates<float>(harden(options.teacher->bank, 0.5), mc);
  }
  std::optional<GateSet<float>> fixed_gates;
  if (options.fixed_mask) fixed_gates = mask_gates<float>(*options.fixed_mask, mc);

  TrainResult result;
  std::ofstream trace_out, metrics_out;
  const std::filesystem::path out_dir = config.output_dir;
  if (options.write_files) {
    std::filesystem::create_directories(out_dir);
    result.trace_path = out_dir / "trace.csv";
    result.metrics_path = out_dir / "metrics.csv";
    result.checkpoint_path = out_dir / "checkpoint.bin";
    trace_out.open(result.trace_path.string() + ".tmp", std::ios::trunc);
    metrics_out.open(result.metrics_path.string() + ".tmp", std::ios::trunc);
    if (!trace_out || !metrics_out) throw IoError("cannot write training logs under " + out_dir.string());
    trace_out << kTraceHeader << '\n';
    metrics_out << kMetricsHeader << '\n';
  }

  auto expected_fraction = [&] {
    NoGradGuard no_grad;
    return static_cast<double>(expected_cost(ckpt.bank, k).item()) / static_cast<double>(k.dense_prunable_total);
  };
  auto write_trace = [&](std::size_t step, double tau) {
    if (!options.write_files) return;
    for (const auto& r : snapshot_gates(ckpt.bank, step, tau, expected_fraction())) trace_out << format_trace_row(r) << '\n';
    trace_out.flush();
  };
  auto eval_gates = [&]() { return fixed_gates ? *fixed_gates : mask_gates<float>(harden(ckpt.bank, 0.5), mc); };

  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::size_t step = 0, nan_streak = 0, last_trace_step = 0;
  bool traced_any = false;
  double tau = anneal_temperature(schedule, 0);

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), data_rng.engine());
    double sum_task = 0, sum_macro = 0, sum_micro = 0, sum_feas = 0;
    std::size_t counted = 0;
    for (std::size_t s = 0; s < steps_per_epoch; ++s) {
      tau = anneal_temperature(schedule, static_cast<long long>(step));
      const std::size_t b0 = s * config.batch_size, b1 = std::min(train_set.size(), b0 + config.batch_size);
      auto batch = make_batch(train_set, std::span<const std::size_t>(order).subspan(b0, b1 - b0), config.augment,
                              &data_rng);

      GateSet<float> gates;
      if (fixed_gates) {
        gates = *fixed_gates;
      } else {
        SampleMode mode = SampleMode::soft;
        if (config.gate_mode == GateMode::hard_ste ||
            (config.gate_mode == GateMode::scheduled &&
             static_cast<double>(step) >= config.soft_fraction * static_cast<double>(total_steps)))
          mode = SampleMode::hard_ste;
        gates = sample_gates(ckpt.bank, tau, noise_rng, mode).value;
      }

      Tensor<float> teacher_logits;
      if (options.teacher) {
        NoGradGuard no_grad;
        teacher_logits = model_forward(batch.images, options.teacher->weights, &*teacher_gates);
      }

      auto logits = model_forward(batch.images, ckpt.weights, &gates);
      auto task = task_loss(logits, batch.labels, options.teacher ? &teacher_logits : nullptr, config.penalty);
      Tensor<float> macro = Tensor<float>::scalar(0), micro = Tensor<float>::scalar(0), feas = Tensor<float>::scalar(0);
      if (learn_gates) {
        auto probs = gate_probabilities(ckpt.bank);
        auto pen = cost_penalties(probs, k);
        macro = pen.macro;
        micro = pen.micro;
        feas = feasibility_penalty(probs, config.penalty, mc).total;
      }

      Tensor<float> loss;
      try {
        loss = total_loss(task, macro, micro, feas, config.penalty);
      } catch (const Error& e) {
        ++nan_streak;
        log_warning("step " + std::to_string(step) + ": " + e.what() + ", step skipped");
        if (nan_streak >= 10) {
          if (options.write_files) {
            json dump{{"step", step},
                      {"epoch", epoch},
                      {"tau", tau},
                      {"task_loss", task.item()},
                      {"L_macro", macro.item()},
                      {"L_micro", micro.item()},
                      {"L_feas", feas.item()},
                      {"reason", e.what()}};
            write_file_atomic(out_dir / "diagnostic.json", dump.dump(2));
          }
          throw TrainingAborted("training aborted: loss not finite for 10 consecutive steps (last: " +
                                std::string(e.what()) + ")");
        }
        opt.zero_grad();
        ++step;
        continue;
      }
      nan_streak = 0;
      backward(loss);
      opt.step(config.learning_rate);
      opt.zero_grad();
      if (learn_gates) ckpt.bank.clip();
      ++step;

      sum_task += task.item();
      sum_macro += macro.item();
      sum_micro += micro.item();
      sum_feas += feas.item();
      ++counted;

      if (step % trace_interval == 0) {
        write_trace(step, tau);
        last_trace_step = step;
        traced_any = true;
      }
    }

    MetricsRow row;
    row.step = step;
    row.epoch = epoch + 1;
    row.tau = tau;
    const double denom = counted ? static_cast<double>(counted) : 1.0;
    row.task_loss = sum_task / denom;
    row.l_macro = sum_macro / denom;
    row.l_micro = sum_micro / denom;
    row.l_feas = sum_feas / denom;
    row.expected_cost_fraction = expected_fraction();
    row.val_acc = evaluate_accuracy(ckpt.weights, eval_gates(), val_set);
    result.metrics.push_back(row);
    if (options.write_files) {
      metrics_out << format_metrics_row(row) << '\n';
      metrics_out.flush();
    }
    if (options.verbose)
      std::fprintf(stderr, "epoch %zu/%zu tau %.3f task %.4f cost %.3f val_acc %.4f\n", epoch + 1, config.epochs, tau,
                   row.task_loss, row.expected_cost_fraction, row.val_acc);
  }
  if (!traced_any || last_trace_step != step) write_trace(step, tau);

  result.steps = step;
  result.skipped_steps = opt.skipped();
  result.final_val_acc = result.metrics.back().val_acc;
  result.expected_cost_fraction = expected_fraction();
  result.mask = options.fixed_mask ? *options.fixed_mask : harden(ckpt.bank, 0.5);
  result.hardened_cost_fraction =
      static_cast<double>(oracle_count(result.mask, k)) / static_cast<double>(k.dense_prunable_total);
  if (options.fixed_mask) {
    // encode the frozen architecture in the saved logits so hardening reproduces it
    for (auto f : kGateFamilies) {
      auto bits = options.fixed_mask->bits(f);
      auto data = ckpt.bank.logits[f].data();
      for (std::size_t i = 0; i < data.size(); ++i) data[i] = bits[i] ? float(kLogitClip) : -float(kLogitClip);
    }
  }
  ckpt.weights.set_requires_grad(false);
  for (auto& t : ckpt.bank.parameters()) t.set_requires_grad(false);
  result.checkpoint = ckpt;

  if (options.write_files) {
    trace_out.close();
    metrics_out.close();
    std::filesystem::rename(result.trace_path.string() + ".tmp", result.trace_path);
    std::filesystem::rename(result.metrics_path.string() + ".tmp", result.metrics_path);
    save_gated_checkpoint(result.checkpoint, result.checkpoint_path);
  }
  return result;
}

/// Loads datasets (and the optional teacher) named in the config, then trains.
inline TrainResult train_from_config(const TrainConfig& config, TrainOptions options = {}) {
  config.validate();
  const auto format = parse_dataset_format(config.dataset_format);
  for (const auto& [field, path] : {std::pair{"train_data", config.train_data}, std::pair{"val_data", config.val_data}}) {
    if (path.empty()) throw ConfigError(std::string("missing required field '") + field + "'");
    if (!std::filesystem::exists(path))
      throw ConfigError(std::string("field '") + field + "': dataset file not found: " + path);
  }
  CifarOptions train_opts{config.classes, config.max_train_samples};
  CifarOptions val_opts{config.classes, config.max_val_samples};
  const auto train_set = load_dataset(config.train_data, format, config.model.num_classes, train_opts);
  const auto val_set = load_dataset(config.val_data, format, config.model.num_classes, val_opts);
  std::optional<GatedCheckpoint> teacher;
  if (!config.teacher_checkpoint.empty()) {
    teacher = load_gated_checkpoint(config.teacher_checkpoint);
    options.teacher = &*teacher;
  }
  return train(config, train_set, val_set, options);
}

}  // namespace hiap
