// hiap: train, extract, verify, count MACs, plot gate traces and run ratio sweeps.
// Exit codes: 0 success, 1 verification failure or aborted training, 2 usage or input error.

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>

#include "hiap/hiap.hpp"

using namespace hiap;

namespace {

constexpr int kOk = 0, kFailed = 1, kBadInput = 2;

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), f, v);
  return buf;
}

int cmd_train(const std::string& config_path, bool quiet) {
  const auto config = load_train_config(config_path);
  TrainOptions opts;
  opts.verbose = !quiet;
  const auto r = train_from_config(config, opts);
  std::cout << "val_acc " << fmt("%.4f", r.final_val_acc) << "\n"
            << "hardened_cost_fraction " << fmt("%.4f", r.hardened_cost_fraction) << "\n"
            << "checkpoint " << r.checkpoint_path.string() << "\n"
            << "metrics " << r.metrics_path.string() << "\n"
            << "trace " << r.trace_path.string() << "\n";
  return kOk;
}

int cmd_extract(const std::string& checkpoint, double threshold, const std::string& out) {
  const auto ckpt = load_gated_checkpoint(checkpoint);
  const auto pruned = extract(ckpt, threshold);
  export_descriptor(pruned, out);
  const auto k = cost_constants(pruned.config);
  std::size_t heads = 0, blocks = 0;
  for (const auto& l : pruned.layers) {
    heads += l.heads.size();
    blocks += l.ffn_present;
  }
  std::cout << "descriptor " << out << "\n"
            << "weights " << weights_path_for(out).string() << "\n"
            << "heads " << heads << "/" << pruned.config.layers * pruned.config.heads << "\n"
            << "ffn_blocks " << blocks << "/" << pruned.config.layers << "\n"
            << "formula_units " << pruned.cost.formula_units << "\n"
            << "cost_fraction "
            << fmt("%.4f", static_cast<double>(pruned.cost.formula_units) / static_cast<double>(k.dense_prunable_total))
            << "\n";
  return kOk;
}

int cmd_verify(const std::string& checkpoint, const std::string& arch, std::size_t trials, double tolerance,
               std::uint64_t seed) {
  const auto ckpt = load_gated_checkpoint(checkpoint);
  const auto pruned = import_descriptor(arch);
  Rng rng(seed);
  const auto r = verify_equivalence(ckpt, pruned, trials, rng, tolerance);
  std::cout << "trials " << r.trials << "\n"
            << "max_abs_diff " << fmt("%.3e", r.max_abs_diff) << "\n"
            << "tolerance " << fmt("%.1e", r.tolerance) << "\n";
  if (r.passed) {
    std::cout << "PASS\n";
    return kOk;
  }
  std::cout << "FAIL";
  if (r.offending_layer) std::cout << " (first divergence at layer " << *r.offending_layer << ")";
  std::cout << "\n";
  return kFailed;
}

int cmd_macs(const std::string& arch, const std::string& preset) {
  ModelConfig config;
  ArchitectureMask mask;
  if (!arch.empty()) {
    const auto bytes = read_file(arch);
    json j;
    try {
      j = json::parse(bytes.begin(), bytes.end());
    } catch (const json::exception& e) {
      throw FormatError(arch + ": malformed descriptor: " + e.what());
    }
    const auto p = parse_descriptor(j, arch);
    config = p.config;
    mask = p.mask();
  } else {
    config = preset == "deit-small" ? ModelConfig::deit_small() : ModelConfig::vit_tiny_cifar();
    mask = ArchitectureMask::dense(config);
  }
  const auto k = cost_constants(config);
  const auto layers = per_layer_cost(mask, k);
  std::printf("%-6s %6s %6s %8s %6s %16s\n", "layer", "heads", "dims", "neurons", "ffn", "formula_units");
  std::uint64_t total = 0;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& lc = layers[l];
    const auto units = lc.head_cost + lc.dim_cost + lc.ffn_cost;
    total += units;
    std::printf("%-6zu %6zu %6zu %8zu %6s %16llu\n", l + 1, lc.heads, lc.dims, lc.neurons, lc.block ? "yes" : "no",
                static_cast<unsigned long long>(units));
  }
  const json summary{{"formula_units", total},
                     {"formula_units_halved", static_cast<double>(total) / 2.0},
                     {"dense_prunable_total", k.dense_prunable_total},
                     {"cost_fraction", static_cast<double>(total) / static_cast<double>(k.dense_prunable_total)},
                     {"c_const", k.c_const},
                     {"halved_with_const", static_cast<double>(total + k.c_const) / 2.0},
                     {"per_structure", {{"c1", k.c1}, {"c2", k.c2}, {"c3", k.c3}}}};
  std::cout << summary.dump(2) << "\n";
  return kOk;
}

int cmd_trace_plot(const std::string& trace, const std::string& out) {
  const auto bytes = read_file(trace);
  const auto data = parse_trace(std::string(bytes.begin(), bytes.end()), trace);
  write_file_atomic(out, render_trace_svg(data));
  std::cout << "wrote " << out << " (" << data.layers << " layers, " << data.steps.size() << " snapshots)\n";
  return kOk;
}

int cmd_sweep(const std::string& base_path, const std::string& ratios_text, std::string out, std::size_t jobs,
              bool quiet) {
  const auto ratios = parse_ratio_list(ratios_text);
  const auto base = load_train_config(base_path);
  if (out.empty()) out = (std::filesystem::path(base.output_dir) / "pareto.csv").string();
  auto runner = [&](const TrainConfig& c) {
    TrainOptions o;
    o.verbose = !quiet && jobs <= 1;
    return train_from_config(c, o);
  };
  const auto rows = run_sweep(base, ratios, runner, jobs);
  const auto parent = std::filesystem::path(out).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  write_file_atomic(out, format_pareto_csv(rows));
  for (const auto& r : rows)
    std::cout << r.ratio.label << " val_acc " << fmt("%.4f", r.val_acc) << " halved "
              << fmt("%.4g", r.formula_units_halved) << (r.pareto ? " pareto" : "") << "\n";
  std::cout << "wrote " << out << "\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hierarchical gate training, extraction and cost accounting for small vision transformers"};
  app.require_subcommand(1);

  std::string config, checkpoint, out, arch, preset, trace, base_config, ratios;
  double threshold = 0.5, tolerance = 1e-4;
  std::size_t trials = 50, jobs = 1;
  std::uint64_t seed = 1;
  bool quiet = false;

  auto* train_cmd = app.add_subcommand("train", "Train gates and weights jointly from a JSON config");
  train_cmd->add_option("--config", config, "Training config (JSON)")->required();
  train_cmd->add_flag("--quiet", quiet, "Suppress per-epoch progress");

  auto* extract_cmd = app.add_subcommand("extract", "Harden gates and write a physically truncated model");
  extract_cmd->add_option("--checkpoint", checkpoint, "Gated checkpoint")->required();
  extract_cmd->add_option("--threshold", threshold, "Keep gates with sigmoid(logit) above this")->capture_default_str();
  extract_cmd->add_option("--out", out, "Descriptor path (.json); weights go next to it (.bin)")->required();

  auto* verify_cmd = app.add_subcommand("verify", "Compare masked and extracted forwards on random inputs");
  verify_cmd->add_option("--checkpoint", checkpoint, "Gated checkpoint")->required();
  verify_cmd->add_option("--arch", arch, "Extracted descriptor")->required();
  verify_cmd->add_option("--trials", trials, "Random inputs")->capture_default_str()->check(CLI::PositiveNumber);
  verify_cmd->add_option("--tolerance", tolerance, "Max abs logit difference")->capture_default_str();
  verify_cmd->add_option("--seed", seed, "Input seed")->capture_default_str();

  auto* macs_cmd = app.add_subcommand("macs", "Per-layer cost table and JSON summary in formula units");
  auto* arch_opt = macs_cmd->add_option("--arch", arch, "Extracted descriptor");
  auto* preset_opt = macs_cmd->add_option("--preset", preset, "Dense preset")->check(CLI::IsMember({"deit-small", "vit-tiny"}));
  arch_opt->excludes(preset_opt);
  macs_cmd->require_option(1);

  auto* plot_cmd = app.add_subcommand("trace-plot", "Render a gate trace CSV as an SVG heatmap with a final barcode");
  plot_cmd->add_option("--trace", trace, "Trace CSV")->required();
  plot_cmd->add_option("--out", out, "Output SVG")->required();

  auto* sweep_cmd = app.add_subcommand("sweep", "Train once per macro:micro ratio and write a Pareto CSV");
  sweep_cmd->add_option("--base-config", base_config, "Base training config (JSON)")->required();
  sweep_cmd->add_option("--ratios", ratios, "Comma list of a:b@lambda, macro@lambda or micro@lambda")->required();
  sweep_cmd->add_option("--out", out, "Pareto CSV (default: <output_dir>/pareto.csv)");
  sweep_cmd->add_option("--jobs", jobs, "Concurrent runs")->capture_default_str()->check(CLI::PositiveNumber);
  sweep_cmd->add_flag("--quiet", quiet, "Suppress per-epoch progress");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kBadInput;
  }

  try {
    if (*train_cmd) return cmd_train(config, quiet);
    if (*extract_cmd) return cmd_extract(checkpoint, threshold, out);
    if (*verify_cmd) return cmd_verify(checkpoint, arch, trials, tolerance, seed);
    if (*macs_cmd) return cmd_macs(arch, preset);
    if (*plot_cmd) return cmd_trace_plot(trace, out);
    if (*sweep_cmd) return cmd_sweep(base_config, ratios, out, jobs, quiet);
  } catch (const TrainingAborted& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailed;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kBadInput;
  }
  return kBadInput;
}
