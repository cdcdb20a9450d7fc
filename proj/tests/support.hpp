// Shared fixtures for the unit tests: a small ViT shape, synthetic datasets
// and scratch directories.
#pragma once

#include <gtest/gtest.h>

#include <filesystem>
#include <string>

#include "hiap/dataset.hpp"
#include "hiap/synthetic.hpp"
#include "hiap/trainer.hpp"

namespace hiap::testing {

/// 32x32 inputs, 8x8 patches (N = 17), two layers.
inline ModelConfig small_vit() {
  ModelConfig c;
  c.layers = 2;
  c.heads = 2;
  c.embed_dim = 32;
  c.head_dim = 16;
  c.ffn_dim = 64;
  c.patch_size = 8;
  c.image_size = 32;
  c.num_classes = 2;
  return c;
}

inline Dataset synthetic_set(std::size_t count, std::uint64_t seed, double pixel_noise = 25.0, double contrast = 70.0) {
  SyntheticOptions o;
  o.count = count;
  o.seed = seed;
  o.pixel_noise = pixel_noise;
  o.contrast = contrast;
  o.label_noise = 0.0;
  const auto bytes = generate_synthetic_cifar(o);
  return decode_cifar10_binary(std::vector<char>(bytes.begin(), bytes.end()), "synthetic");
}

inline TrainConfig small_train_config(const std::filesystem::path& out) {
  TrainConfig c;
  c.model = small_vit();
  c.epochs = 5;
  c.batch_size = 32;
  c.seed = 1;
  c.output_dir = out.string();
  c.augment = false;
  return c;
}

/// Fresh directory under the system temp dir, removed on destruction.
class ScratchDir {
 public:
  explicit ScratchDir(const std::string& tag) {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    std::string name = "hiap_" + tag;
    if (info) name += std::string("_") + info->test_suite_name() + "_" + info->name();
    for (auto& ch : name)
      if (!std::isalnum(static_cast<unsigned char>(ch)) && ch != '_') ch = '_';
    path_ = std::filesystem::temp_directory_path() / name;
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~ScratchDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& s) const { return path_ / s; }

 private:
  std::filesystem::path path_;
};

}  // namespace hiap::testing
