// hiap-synth: writes a synthetic two-class CIFAR-10-format dataset (oriented
// gratings plus noise) for running the pipeline without the real archive.

#include <CLI11.hpp>

#include <iostream>

#include "hiap/dataset.hpp"
#include "hiap/synthetic.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Generate a synthetic two-class dataset in CIFAR-10 binary or raw tensor format"};
  hiap::SyntheticOptions o;
  std::string out, format = "cifar10_binary";
  app.add_option("--out", out, "Output file")->required();
  app.add_option("--count", o.count, "Images")->capture_default_str()->check(CLI::PositiveNumber);
  app.add_option("--seed", o.seed, "Generator seed")->capture_default_str();
  app.add_option("--noise", o.pixel_noise, "Pixel noise stddev (0..255 scale)")->capture_default_str();
  app.add_option("--contrast", o.contrast, "Grating amplitude")->capture_default_str();
  app.add_option("--label-noise", o.label_noise, "Fraction of flipped labels")->capture_default_str()->check(CLI::Range(0.0, 1.0));
  app.add_option("--format", format, "Output format")->capture_default_str()->check(CLI::IsMember({"cifar10_binary", "raw_tensor"}));
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }
  try {
    const auto bytes = hiap::generate_synthetic_cifar(o);
    if (format == "cifar10_binary") {
      hiap::write_file_atomic(out, bytes);
    } else {
      const auto ds = hiap::decode_cifar10_binary(std::vector<char>(bytes.begin(), bytes.end()), "synthetic");
      hiap::write_raw_tensor(ds, out);
    }
    std::cout << "wrote " << o.count << " images to " << out << "\n";
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
