// Physical extraction of a hardened gated checkpoint into a truncated dense
// model, plus the masked-vs-extracted equivalence check and latency probe.
#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "hiap/checkpoint.hpp"
#include "hiap/cost_model.hpp"
#include "hiap/gating.hpp"
#include "hiap/model.hpp"
#include "hiap/parallel.hpp"

namespace hiap {

struct SurvivingHead {
  std::size_t index = 0;
  std::vector<std::size_t> dims;

  bool operator==(const SurvivingHead&) const = default;
};

struct LayerStructure {
  std::vector<SurvivingHead> heads;
  bool ffn_present = true;
  std::vector<std::size_t> neurons;

  bool operator==(const LayerStructure&) const = default;
};

struct CostSummary {
  std::uint64_t formula_units = 0;
  double formula_units_halved = 0;
};

struct PrunedCheckpoint {
  ModelConfig config;
  double threshold = 0.5;
  std::string source_hash;
  std::vector<LayerStructure> layers;
  ModelWeights<float> weights;
  CostSummary cost;

  /// Canonical mask of the surviving structure (demoted heads read as dead).
  ArchitectureMask mask() const {
    auto m = ArchitectureMask::filled(config, 0);
    for (std::size_t l = 0; l < layers.size(); ++l) {
      for (const auto& h : layers[l].heads) {
        m.head[l * config.heads + h.index] = 1;
        for (auto j : h.dims) m.dim[(l * config.heads + h.index) * config.head_dim + j] = 1;
      }
      m.block[l] = layers[l].ffn_present;
      for (auto k : layers[l].neurons) m.neuron[l * config.ffn_dim + k] = 1;
    }
    return m;
  }
};

inline std::string checkpoint_hash(const GatedCheckpoint& ckpt) {
  const std::string bytes = encode_gated_checkpoint(ckpt);
  return fnv1a_hex(bytes.data(), bytes.size());
}

namespace detail {

inline Tensor<float> take_columns(const Tensor<float>& m, const std::vector<std::size_t>& cols) {
  const std::size_t rows = m.dim(0), n = m.dim(1);
  std::vector<float> out(rows * cols.size());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols.size(); ++c) out[r * cols.size() + c] = m[r * n + cols[c]];
  return Tensor<float>({rows, cols.size()}, std::move(out));
}

inline Tensor<float> take_rows(const Tensor<float>& m, const std::vector<std::size_t>& rows) {
  const std::size_t n = m.dim(1);
  std::vector<float> out(rows.size() * n);
  for (std::size_t r = 0; r < rows.size(); ++r)
    std::copy_n(m.data().begin() + static_cast<std::ptrdiff_t>(rows[r] * n), n, out.begin() + static_cast<std::ptrdiff_t>(r * n));
  return Tensor<float>({rows.size(), n}, std::move(out));
}

inline Tensor<float> take(const Tensor<float>& v, const std::vector<std::size_t>& idx) {
  std::vector<float> out(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) out[i] = v[idx[i]];
  return Tensor<float>({idx.size()}, std::move(out));
}

}  // namespace detail

/// Builds truncated weights for an explicit per-layer structure.
inline ModelWeights<float> truncate_weights(const ModelWeights<float>& dense, const std::vector<LayerStructure>& layers) {
  if (!dense.is_dense()) throw ShapeError("truncate_weights: source weights are already truncated");
  if (layers.size() != dense.config.layers) throw ShapeError("truncate_weights: layer count mismatch");
  ModelWeights<float> out;
  out.config = dense.config;
  out.patch_w = dense.patch_w.detach();
  out.patch_b = dense.patch_b.detach();
  out.cls = dense.cls.detach();
  out.pos = dense.pos.detach();
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& src = dense.blocks[l];
    const auto& ls = layers[l];
    BlockWeights<float> b;
    b.ln1_g = src.ln1_g.detach();
    b.ln1_b = src.ln1_b.detach();
    for (const auto& sh : ls.heads) {
      const auto& hw = src.heads.at(sh.index);
      b.heads.push_back({hw.wq.detach(), hw.bq.detach(), hw.wk.detach(), hw.bk.detach(),
                         detail::take_columns(hw.wv, sh.dims), detail::take(hw.bv, sh.dims),
                         detail::take_rows(hw.wo, sh.dims)});
    }
    b.bo = src.bo.detach();
    b.ln2_g = src.ln2_g.detach();
    b.ln2_b = src.ln2_b.detach();
    b.ffn_present = ls.ffn_present;
    if (ls.ffn_present) {
      if (!ls.neurons.empty()) {
        b.w1 = detail::take_columns(src.w1, ls.neurons);
        b.b1 = detail::take(src.b1, ls.neurons);
        b.w2 = detail::take_rows(src.w2, ls.neurons);
      }
      b.b2 = src.b2.detach();
    }
    out.blocks.push_back(std::move(b));
  }
  out.norm_g = dense.norm_g.detach();
  out.norm_b = dense.norm_b.detach();
  out.head_w = dense.head_w.detach();
  out.head_b = dense.head_b.detach();
  return out;
}

/// Surviving structure of a hard mask. A live head without live dims is dropped.
inline std::vector<LayerStructure> surviving_structure(const ArchitectureMask& mask) {
  std::vector<LayerStructure> layers(mask.layers);
  for (std::size_t l = 0; l < mask.layers; ++l) {
    auto& ls = layers[l];
    for (std::size_t h = 0; h < mask.heads; ++h) {
      if (!mask.head_on(l, h)) continue;
      SurvivingHead sh{h, {}};
      for (std::size_t j = 0; j < mask.head_dim; ++j)
        if (mask.dim_on(l, h, j)) sh.dims.push_back(j);
      if (!sh.dims.empty()) ls.heads.push_back(std::move(sh));
    }
    ls.ffn_present = mask.block_on(l);
    if (ls.ffn_present)
      for (std::size_t k = 0; k < mask.ffn_dim; ++k)
        if (mask.neuron_on(l, k)) ls.neurons.push_back(k);
  }
  return layers;
}

inline CostSummary summarize_cost(const ArchitectureMask& mask, const ModelConfig& config) {
  const auto units = oracle_count(mask, cost_constants(config));
  return {units, static_cast<double>(units) / 2.0};
}

inline PrunedCheckpoint extract(const GatedCheckpoint& ckpt, double threshold = 0.5) {
  if (!(threshold > 0.0 && threshold < 1.0))
    throw Error("extract: threshold must lie in (0, 1), got " + std::to_string(threshold));
  ckpt.bank.validate();
  PrunedCheckpoint p;
  p.config = ckpt.config();
  p.threshold = threshold;
  p.source_hash = checkpoint_hash(ckpt);
  p.layers = surviving_structure(harden(ckpt.bank, threshold));
  p.weights = truncate_weights(ckpt.weights, p.layers);
  p.cost = summarize_cost(p.mask(), p.config);
  return p;
}

struct EquivalenceReport {
  std::size_t trials = 0;
  double max_abs_diff = 0;
  double tolerance = 1e-4;
  bool passed = false;
  std::optional<std::size_t> offending_layer;  // first block whose output diverges
  std::vector<double> layer_max_diff;
};

/// Runs the gated model under the hardened mask and the extracted model on
/// the same random images and compares logits (and each block's output).
inline EquivalenceReport verify_equivalence(const GatedCheckpoint& gated, const PrunedCheckpoint& pruned,
                                            std::size_t trials, Rng& rng, double tolerance = 1e-4) {
  if (!(gated.config() == pruned.config)) throw ShapeError("verify_equivalence: model configs differ");
  if (pruned.weights.blocks.size() != pruned.config.layers)
    throw ShapeError("verify_equivalence: pruned model has the wrong number of layers");
  if (!pruned.source_hash.empty() && pruned.source_hash != checkpoint_hash(gated))
    throw Error("verify_equivalence: pruned checkpoint was not extracted from this gated checkpoint");
  const auto& c = pruned.config;
  const auto gates = mask_gates<float>(harden(gated.bank, pruned.threshold), c);
  NoGradGuard no_grad;
  EquivalenceReport r;
  r.trials = trials;
  r.tolerance = tolerance;
  r.layer_max_diff.assign(c.layers, 0.0);
  for (std::size_t t = 0; t < trials; ++t) {
    std::vector<float> px(c.channels * c.image_size * c.image_size);
    for (auto& v : px) v = static_cast<float>(rng.normal(0.0, 1.0));
    Tensor<float> images({1, c.channels, c.image_size, c.image_size}, std::move(px));
    std::vector<Tensor<float>> taps_a, taps_b;
    auto a = model_forward(images, gated.weights, &gates, &taps_a);
    Tensor<float> b;
    try {
      b = model_forward<float>(images, pruned.weights, nullptr, &taps_b);
    } catch (const ShapeError& e) {
      throw ShapeError(std::string("verify_equivalence: pruned model forward failed: ") + e.what());
    }
    for (std::size_t l = 0; l < c.layers; ++l)
      for (std::size_t i = 0; i < taps_a[l].numel(); ++i)
        r.layer_max_diff[l] =
            std::max(r.layer_max_diff[l], std::abs(static_cast<double>(taps_a[l][i]) - static_cast<double>(taps_b[l][i])));
    for (std::size_t i = 0; i < a.numel(); ++i)
      r.max_abs_diff = std::max(r.max_abs_diff, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  }
  r.passed = r.max_abs_diff <= tolerance && std::isfinite(r.max_abs_diff);
  if (!r.passed) {
    for (std::size_t l = 0; l < c.layers; ++l)
      if (!(r.layer_max_diff[l] <= tolerance)) {
        r.offending_layer = l;
        break;
      }
  }
  return r;
}

// ---- descriptor files ----

inline json descriptor_json(const PrunedCheckpoint& p, const std::string& weights_file) {
  json layers = json::array();
  for (const auto& ls : p.layers) {
    json heads = json::array();
    for (const auto& h : ls.heads) heads.push_back({{"index", h.index}, {"dims", h.dims}});
    layers.push_back({{"heads", heads}, {"ffn", {{"present", ls.ffn_present}, {"neurons", ls.neurons}}}});
  }
  return json{{"config", p.config},
              {"threshold", p.threshold},
              {"source_hash", p.source_hash},
              {"per_layer", layers},
              {"cost", {{"formula_units", p.cost.formula_units}, {"formula_units_halved", p.cost.formula_units_halved}}},
              {"weights", weights_file}};
}

inline std::filesystem::path weights_path_for(const std::filesystem::path& descriptor) {
  auto w = descriptor;
  w.replace_extension(".bin");
  return w;
}

/// Writes the JSON descriptor at `path` and the weights next to it (.bin).
inline void export_descriptor(const PrunedCheckpoint& p, const std::filesystem::path& path) {
  const auto wpath = weights_path_for(path);
  if (wpath == path) throw IoError(path.string() + ": descriptor path must not end in .bin");
  TensorFile file;
  file.meta = {{"kind", "pruned"}, {"config", p.config}};
  file.tensors = p.weights.named_tensors();
  write_file_atomic(wpath, encode_tensor_file(file));
  write_file_atomic(path, descriptor_json(p, wpath.filename().string()).dump(2) + "\n");
}

/// Parses a descriptor; weights are left empty.
inline PrunedCheckpoint parse_descriptor(const json& j, const std::string& origin) {
  PrunedCheckpoint p;
  try {
    p.config = j.at("config").get<ModelConfig>();
    p.config.validate();
    p.threshold = j.at("threshold").get<double>();
    p.source_hash = j.value("source_hash", "");
    const auto& layers = j.at("per_layer");
    if (layers.size() != p.config.layers) throw FormatError(origin + ": per_layer has the wrong length");
    for (const auto& lj : layers) {
      LayerStructure ls;
      for (const auto& hj : lj.at("heads")) {
        SurvivingHead h{hj.at("index").get<std::size_t>(), hj.at("dims").get<std::vector<std::size_t>>()};
        if (h.index >= p.config.heads) throw FormatError(origin + ": head index out of range");
        for (auto d : h.dims)
          if (d >= p.config.head_dim) throw FormatError(origin + ": dim index out of range");
        ls.heads.push_back(std::move(h));
      }
      ls.ffn_present = lj.at("ffn").at("present").get<bool>();
      ls.neurons = lj.at("ffn").at("neurons").get<std::vector<std::size_t>>();
      for (auto k : ls.neurons)
        if (k >= p.config.ffn_dim) throw FormatError(origin + ": neuron index out of range");
      p.layers.push_back(std::move(ls));
    }
    p.cost.formula_units = j.at("cost").at("formula_units").get<std::uint64_t>();
    p.cost.formula_units_halved = j.at("cost").at("formula_units_halved").get<double>();
  } catch (const json::exception& e) {
    throw FormatError(origin + ": malformed descriptor: " + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(origin + ": " + e.what());
  }
  return p;
}

inline PrunedCheckpoint import_descriptor(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  json j;
  try {
    j = json::parse(bytes.begin(), bytes.end());
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": malformed descriptor: " + e.what());
  }
  auto p = parse_descriptor(j, path.string());
  const auto wpath = path.parent_path() / j.value("weights", weights_path_for(path).filename().string());
  const auto file = read_tensor_file(wpath);
  p.weights = assemble_weights(p.config, file, wpath.string());
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    const auto& ls = p.layers[l];
    const auto& b = p.weights.blocks[l];
    bool ok = b.heads.size() == ls.heads.size() && b.ffn_present == ls.ffn_present &&
              b.ffn_width() == (ls.ffn_present ? ls.neurons.size() : 0);
    for (std::size_t h = 0; ok && h < ls.heads.size(); ++h) ok = b.heads[h].value_dims() == ls.heads[h].dims.size();
    if (!ok) throw FormatError(wpath.string() + ": weights do not match descriptor structure at layer " + std::to_string(l));
  }
  return p;
}

/// Same structure in every layer: the first ceil(rh*H) heads, ceil(rw*Dh)
/// value dims under each kept head and ceil(rw*Dffn) neurons; all blocks stay.
inline ArchitectureMask uniform_mask(const ModelConfig& c, double head_ratio, double width_ratio) {
  if (!(head_ratio > 0.0 && head_ratio <= 1.0) || !(width_ratio > 0.0 && width_ratio <= 1.0))
    throw Error("uniform_mask: ratios must lie in (0, 1]");
  auto keep = [](double r, std::size_t n) { return static_cast<std::size_t>(std::ceil(r * static_cast<double>(n) - 1e-9)); };
  const std::size_t heads = keep(head_ratio, c.heads), dims = keep(width_ratio, c.head_dim),
                    neurons = keep(width_ratio, c.ffn_dim);
  auto m = ArchitectureMask::filled(c, 0);
  std::fill(m.block.begin(), m.block.end(), 1);
  for (std::size_t l = 0; l < c.layers; ++l) {
    for (std::size_t h = 0; h < heads; ++h) {
      m.head[l * c.heads + h] = 1;
      for (std::size_t j = 0; j < dims; ++j) m.dim[(l * c.heads + h) * c.head_dim + j] = 1;
    }
    for (std::size_t k = 0; k < neurons; ++k) m.neuron[l * c.ffn_dim + k] = 1;
  }
  return m;
}

inline ArchitectureMask uniform_mask(const ModelConfig& c, double ratio) { return uniform_mask(c, ratio, ratio); }

/// Uniform baseline at a cost target t (fraction of dense): heads at ratio t,
/// then the cheapest width ratio whose cost is at least the target.
inline ArchitectureMask uniform_mask_at_cost(const ModelConfig& c, std::uint64_t target_units) {
  const auto k = cost_constants(c);
  const double t = std::clamp(static_cast<double>(target_units) / static_cast<double>(k.dense_prunable_total), 1e-9, 1.0);
  constexpr std::size_t steps = 1 << 14;
  auto at = [&](std::size_t i) { return uniform_mask(c, t, static_cast<double>(i) / static_cast<double>(steps)); };
  std::size_t lo = 1, hi = steps;
  while (lo < hi) {
    const std::size_t mid = (lo + hi) / 2;
    if (oracle_count(at(mid), k) >= target_units) hi = mid;
    else lo = mid + 1;
  }
  return oracle_count(at(lo), k) >= target_units ? at(lo) : ArchitectureMask::dense(c);
}

struct LatencyStats {
  std::size_t runs = 0;
  std::size_t batch = 0;
  double median_ms = 0;
  double p90_ms = 0;
  double mean_ms = 0;
};

/// Wall-clock per ungated forward on random images after `warmup` untimed runs.
inline LatencyStats benchmark_latency(const ModelWeights<float>& weights, std::size_t batch, std::size_t runs,
                                      std::size_t warmup = 5, std::uint64_t seed = 7) {
  if (runs < 10) throw Error("benchmark_latency: need at least 10 runs");
  if (batch == 0) throw Error("benchmark_latency: batch must be positive");
  ThreadLimit single(1);
  NoGradGuard no_grad;
  const auto& c = weights.config;
  Rng rng(seed);
  std::vector<float> px(batch * c.channels * c.image_size * c.image_size);
  for (auto& v : px) v = static_cast<float>(rng.normal(0.0, 1.0));
  Tensor<float> images({batch, c.channels, c.image_size, c.image_size}, std::move(px));
  for (std::size_t i = 0; i < warmup; ++i) model_forward<float>(images, weights, nullptr);
  std::vector<double> ms;
  ms.reserve(runs);
  for (std::size_t i = 0; i < runs; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    auto out = model_forward<float>(images, weights, nullptr);
    const auto t1 = std::chrono::steady_clock::now();
    ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  LatencyStats s;
  s.runs = runs;
  s.batch = batch;
  for (double v : ms) s.mean_ms += v / static_cast<double>(runs);
  std::sort(ms.begin(), ms.end());
  s.median_ms = runs % 2 ? ms[runs / 2] : 0.5 * (ms[runs / 2 - 1] + ms[runs / 2]);
  s.p90_ms = ms[std::min(runs - 1, static_cast<std::size_t>(std::ceil(0.9 * static_cast<double>(runs))) - 1)];
  return s;
}

}  // namespace hiap
