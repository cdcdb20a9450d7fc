#include <gtest/gtest.h>

#include <atomic>
#include <regex>

#include "hiap/sweep.hpp"
#include "hiap/trace_plot.hpp"
#include "support.hpp"

using namespace hiap;

namespace {

ModelConfig plot_config() {
  ModelConfig c;
  c.layers = 3;
  c.heads = 2;
  c.embed_dim = 8;
  c.head_dim = 2;
  c.ffn_dim = 3;
  c.patch_size = 4;
  c.image_size = 8;
  return c;
}

// Trace text from banks at successive steps.
std::string trace_of(const std::vector<GateBank<float>>& banks) {
  std::string out = std::string(kTraceHeader) + "\n";
  for (std::size_t s = 0; s < banks.size(); ++s)
    for (const auto& r : snapshot_gates(banks[s], s * 10, 1.0, 0.5)) out += format_trace_row(r) + "\n";
  return out;
}

std::size_t count_matches(const std::string& s, const std::string& pattern) {
  const std::regex re(pattern);
  return static_cast<std::size_t>(std::distance(std::sregex_iterator(s.begin(), s.end(), re), std::sregex_iterator()));
}

}  // namespace

TEST(TraceParse, ReportsLineNumbers) {
  const std::string header = std::string(kTraceHeader) + "\n";
  const std::string good = "0,0,head,1,0.5,2.0,1.0\n";
  auto line_of = [](const std::string& text) -> std::size_t {
    try {
      parse_trace(text, "t.csv");
    } catch (const TraceParseError& e) {
      EXPECT_NE(std::string(e.what()).find("t.csv:" + std::to_string(e.line())), std::string::npos);
      return e.line();
    }
    return 0;
  };
  EXPECT_EQ(line_of(header + good + "0,0,head,1,1.5,2.0,1.0\n"), 3u);
  EXPECT_EQ(line_of(header + good + good + "0,0,blob,1,0.5,2.0,1.0\n"), 4u);
  EXPECT_EQ(line_of(header + "0,0,dim,1,0.5,2.0,1.0\n"), 2u);       // dim needs h:j
  EXPECT_EQ(line_of(header + "0,0,block,-,0.5,2.0\n"), 2u);         // six fields
  EXPECT_EQ(line_of(header + "x,0,block,-,0.5,2.0,1.0\n"), 2u);
  EXPECT_EQ(line_of("step,layer\n" + good), 1u);
  EXPECT_EQ(line_of(header + good + "0,0,head,1,nan,2.0,1.0\n"), 3u);
}

TEST(TraceParse, EmptyTraceIsAnError) {
  EXPECT_THROW(parse_trace("", "e.csv"), TraceParseError);
  EXPECT_THROW(parse_trace(std::string(kTraceHeader) + "\n", "e.csv"), TraceParseError);
}

TEST(TraceParse, AveragesPerFamilyLayerAndSnapshot) {
  const std::string text = std::string(kTraceHeader) +
                           "\n5,0,head,0,0.2,1,1\n5,0,head,1,0.6,1,1\n5,1,dim,0:1,1,1,1\n9,0,block,-,0.25,1,1\n";
  auto d = parse_trace(text, "m");
  EXPECT_EQ(d.steps, (std::vector<std::size_t>{5, 9}));
  EXPECT_EQ(d.layers, 2u);
  EXPECT_NEAR(d.cells[GateFamily::head][0][0], 0.4, 1e-12);
  EXPECT_EQ(d.cells[GateFamily::dim][0][1], 1.0);
  EXPECT_EQ(d.cells[GateFamily::block][1][0], 0.25);
  EXPECT_TRUE(std::isnan(d.cells[GateFamily::block][0][0]));
}

TEST(TraceSvg, AllOpenGatesGiveDarkCells) {
  auto c = plot_config();
  auto bank = GateBank<float>::create(c, 12.0f);
  const auto svg = render_trace_svg(parse_trace(trace_of({bank, bank}), "m"));
  EXPECT_EQ(svg.rfind("<svg", 0), 0u);
  EXPECT_NE(svg.find("</svg>"), std::string::npos);
  // 4 families x 2 snapshots x 3 layers, all at the dark end of the scale.
  EXPECT_EQ(count_matches(svg, "class=\"cell\""), 24u);
  EXPECT_EQ(count_matches(svg, "fill=\"" + shade(1.0) + "\""), 24u);
  EXPECT_EQ(count_matches(svg, "class=\"bar\"[^>]*fill=\"#ffffff\""), 0u);
  EXPECT_EQ(count_matches(svg, "class=\"bar\""), bank.gate_count());
}

TEST(TraceSvg, FadingBlockTurnsWhiteInLastLayerOnly) {
  auto c = plot_config();
  std::vector<GateBank<float>> banks;
  for (float a : {12.0f, 0.0f, -12.0f}) {
    auto b = GateBank<float>::create(c, 12.0f);
    b.logits.block.data()[2] = a;
    banks.push_back(b);
  }
  const auto svg = render_trace_svg(parse_trace(trace_of(banks), "m"));
  auto cell = [&](std::size_t layer, std::size_t col) {
    const std::regex re("data-family=\"block\" data-layer=\"" + std::to_string(layer) + "\" data-col=\"" +
                        std::to_string(col) + "\"[^>]*fill=\"(#[0-9a-f]{6})\"");
    std::smatch m;
    EXPECT_TRUE(std::regex_search(svg, m, re));
    return m[1].str();
  };
  EXPECT_EQ(cell(2, 0), shade(1.0));
  EXPECT_EQ(cell(2, 1), shade(0.5));
  EXPECT_EQ(cell(2, 2), shade(0.0));
  EXPECT_EQ(shade(0.0), "#ffffff");
  for (std::size_t col = 0; col < 3; ++col) {
    EXPECT_EQ(cell(0, col), shade(1.0));
    EXPECT_EQ(cell(1, col), shade(1.0));
  }
  // Barcode: one white bar, the closed block of layer 3.
  EXPECT_EQ(count_matches(svg, "class=\"bar\"[^>]*fill=\"#ffffff\""), 1u);
  EXPECT_EQ(count_matches(svg, "class=\"bar\" data-layer=\"2\" data-family=\"block\"[^>]*fill=\"#ffffff\""), 1u);
}

TEST(TraceSvg, RendersTrainerOutput) {
  hiap::testing::ScratchDir dir("svg");
  auto cfg = hiap::testing::small_train_config(dir.path());
  cfg.epochs = 1;
  cfg.trace_interval = 1;
  auto r = train(cfg, hiap::testing::synthetic_set(64, 1), hiap::testing::synthetic_set(32, 2));
  auto bytes = read_file(r.trace_path);
  auto d = parse_trace(std::string(bytes.begin(), bytes.end()), r.trace_path.string());
  EXPECT_EQ(d.layers, cfg.model.layers);
  EXPECT_GE(d.steps.size(), 2u);
  EXPECT_NE(render_trace_svg(d).find("barcode"), std::string::npos);
}

TEST(Ratio, ParsesDocumentedForms) {
  auto list = parse_ratio_list("2:1@0.9,5:1@1.0,1.5:1@1.2,macro@1.5,micro@1.5");
  ASSERT_EQ(list.size(), 5u);
  const double want[5][2] = {{0.9, 0.45}, {1.0, 0.2}, {1.2, 0.8}, {1.5, 0.0}, {0.0, 1.5}};
  for (std::size_t i = 0; i < 5; ++i) {
    EXPECT_NEAR(list[i].lambda_macro, want[i][0], 1e-12) << i;
    EXPECT_NEAR(list[i].lambda_micro, want[i][1], 1e-12) << i;
  }
  EXPECT_EQ(list[0].label, "2:1@0.9");
}

TEST(Ratio, RejectsMalformed) {
  for (const char* bad : {"2:1", "2-1@0.9", "0:1@1", "a:1@1", "2:1@x", "2:1@-1", "@1", "2:1@", "macro@", ""})
    EXPECT_THROW(parse_ratio(bad), SweepError) << bad;
  EXPECT_THROW(parse_ratio_list("2:1@0.9,,macro@1"), SweepError);
}

TEST(Pareto, MarksNonDominatedRows) {
  std::vector<SweepRow> rows(4);
  rows[0].val_acc = 0.90, rows[0].formula_units_halved = 100;
  rows[1].val_acc = 0.85, rows[1].formula_units_halved = 60;
  rows[2].val_acc = 0.84, rows[2].formula_units_halved = 80;  // dominated by row 1
  rows[3].val_acc = 0.90, rows[3].formula_units_halved = 120; // dominated by row 0
  mark_pareto(rows);
  EXPECT_TRUE(rows[0].pareto);
  EXPECT_TRUE(rows[1].pareto);
  EXPECT_FALSE(rows[2].pareto);
  EXPECT_FALSE(rows[3].pareto);
  const auto csv = format_pareto_csv(rows);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), kParetoHeader);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 5);
}

TEST(Sweep, RunsEachRatioInItsOwnDirectory) {
  TrainConfig base;
  base.model = plot_config();
  base.output_dir = "/tmp/sweep_base";
  auto ratios = parse_ratio_list("2:1@0.9,macro@1.5,micro@1.5");
  std::atomic<int> calls{0};
  auto runner = [&](const TrainConfig& c) {
    ++calls;
    TrainResult r;
    r.final_val_acc = 1.0 - c.penalty.lambda_macro / 10;
    r.mask = ArchitectureMask::dense(c.model);
    r.hardened_cost_fraction = 1.0;
    return r;
  };
  for (std::size_t jobs : {1u, 2u}) {
    calls = 0;
    auto rows = run_sweep(base, ratios, runner, jobs);
    EXPECT_EQ(calls.load(), 3);
    ASSERT_EQ(rows.size(), 3u);
    std::set<std::string> dirs;
    for (const auto& r : rows) {
      dirs.insert(r.output_dir);
      EXPECT_EQ(r.output_dir.rfind("/tmp/sweep_base/", 0), 0u);
    }
    EXPECT_EQ(dirs.size(), 3u);
    EXPECT_NEAR(rows[2].val_acc, 1.0, 1e-12);
    EXPECT_TRUE(rows[2].pareto);
    EXPECT_FALSE(rows[1].pareto);
  }
  EXPECT_THROW(run_sweep(base, {}, runner), SweepError);
}
