// Macro:micro penalty-ratio sweeps and the accuracy-vs-cost Pareto table.
#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <future>
#include <string>
#include <vector>

#include "hiap/cost_model.hpp"
#include "hiap/trainer.hpp"

namespace hiap {

class SweepError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

/// One penalty setting. "a:b@x" gives lambda_macro = x, lambda_micro = x*b/a;
/// "macro@x" and "micro@x" set only one side.
struct RatioSpec {
  std::string label;
  double lambda_macro = 0;
  double lambda_micro = 0;
};

namespace detail {

inline double parse_positive(const std::string& s, const std::string& whole, bool allow_zero) {
  std::size_t used = 0;
  double v = 0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    throw SweepError("malformed ratio '" + whole + "': '" + s + "' is not a number");
  }
  if (used != s.size() || !std::isfinite(v) || v < 0 || (!allow_zero && v == 0))
    throw SweepError("malformed ratio '" + whole + "': '" + s + "' must be a " + (allow_zero ? "non-negative" : "positive") +
                     " number");
  return v;
}

}  // namespace detail

inline RatioSpec parse_ratio(const std::string& text) {
  const auto at = text.find('@');
  if (at == std::string::npos || at == 0 || at + 1 == text.size())
    throw SweepError("malformed ratio '" + text + "' (expected a:b@lambda, macro@lambda or micro@lambda)");
  const std::string head = text.substr(0, at);
  const double lambda = detail::parse_positive(text.substr(at + 1), text, true);
  RatioSpec r;
  r.label = text;
  if (head == "macro") {
    r.lambda_macro = lambda;
  } else if (head == "micro") {
    r.lambda_micro = lambda;
  } else {
    const auto colon = head.find(':');
    if (colon == std::string::npos)
      throw SweepError("malformed ratio '" + text + "' (expected a:b@lambda, macro@lambda or micro@lambda)");
    const double a = detail::parse_positive(head.substr(0, colon), text, false);
    const double b = detail::parse_positive(head.substr(colon + 1), text, true);
    r.lambda_macro = lambda;
    r.lambda_micro = lambda * b / a;
  }
  return r;
}

inline std::vector<RatioSpec> parse_ratio_list(const std::string& text) {
  std::vector<RatioSpec> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = text.find(',', start);
    const auto item = text.substr(start, pos == std::string::npos ? std::string::npos : pos - start);
    out.push_back(parse_ratio(item));
    if (pos == std::string::npos) break;
    start = pos + 1;
  }
  return out;
}

struct SweepRow {
  RatioSpec ratio;
  double val_acc = 0;
  double formula_units_halved = 0;
  double cost_fraction = 0;
  std::string output_dir;
  bool pareto = false;
};

inline constexpr const char* kParetoHeader =
    "label,lambda_macro,lambda_micro,val_acc,formula_units_halved,cost_fraction,pareto,output_dir";

/// Marks rows not dominated by another row (higher-or-equal accuracy at lower-or-equal cost, one strict).
inline void mark_pareto(std::vector<SweepRow>& rows) {
  for (auto& r : rows) {
    r.pareto = std::none_of(rows.begin(), rows.end(), [&](const SweepRow& o) {
      return o.val_acc >= r.val_acc && o.formula_units_halved <= r.formula_units_halved &&
             (o.val_acc > r.val_acc || o.formula_units_halved < r.formula_units_halved);
    });
  }
}

inline std::string format_pareto_csv(const std::vector<SweepRow>& rows) {
  std::string out = std::string(kParetoHeader) + "\n";
  for (const auto& r : rows) {
    char buf[512];
    std::snprintf(buf, sizeof(buf), "%s,%.6g,%.6g,%.6f,%.1f,%.6f,%d,%s\n", r.ratio.label.c_str(), r.ratio.lambda_macro,
                  r.ratio.lambda_micro, r.val_acc, r.formula_units_halved, r.cost_fraction, r.pareto ? 1 : 0,
                  r.output_dir.c_str());
    out += buf;
  }
  return out;
}

inline std::string sanitize_label(const std::string& s) {
  std::string out;
  for (char ch : s) out.push_back(std::isalnum(static_cast<unsigned char>(ch)) || ch == '.' ? ch : '_');
  return out;
}

using SweepRunner = std::function<TrainResult(const TrainConfig&)>;

/// Trains once per ratio under `base`, each in its own output directory.
/// `jobs` > 1 runs independent configurations concurrently.
inline std::vector<SweepRow> run_sweep(const TrainConfig& base, const std::vector<RatioSpec>& ratios,
                                       const SweepRunner& runner, std::size_t jobs = 1) {
  if (ratios.empty()) throw SweepError("sweep: no ratios given");
  std::vector<TrainConfig> configs;
  std::vector<SweepRow> rows;
  for (std::size_t i = 0; i < ratios.size(); ++i) {
    TrainConfig c = base;
    c.penalty.lambda_macro = ratios[i].lambda_macro;
    c.penalty.lambda_micro = ratios[i].lambda_micro;
    c.output_dir = (std::filesystem::path(base.output_dir) / ("run" + std::to_string(i) + "_" + sanitize_label(ratios[i].label))).string();
    configs.push_back(c);
    rows.push_back({ratios[i], 0, 0, 0, c.output_dir, false});
  }
  const auto k = cost_constants(base.model);
  auto fill = [&](std::size_t i, const TrainResult& r) {
    rows[i].val_acc = r.final_val_acc;
    rows[i].formula_units_halved = static_cast<double>(oracle_count(r.mask, k)) / 2.0;
    rows[i].cost_fraction = r.hardened_cost_fraction;
  };
  if (jobs <= 1) {
    for (std::size_t i = 0; i < configs.size(); ++i) fill(i, runner(configs[i]));
  } else {
    for (std::size_t s = 0; s < configs.size(); s += jobs) {
      std::vector<std::future<TrainResult>> pending;
      for (std::size_t i = s; i < std::min(configs.size(), s + jobs); ++i)
        pending.push_back(std::async(std::launch::async, runner, configs[i]));
      for (std::size_t i = 0; i < pending.size(); ++i) fill(s + i, pending[i].get());
    }
  }
  mark_pareto(rows);
  return rows;
}

}  // namespace hiap
