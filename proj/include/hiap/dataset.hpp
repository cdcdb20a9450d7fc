// Image datasets: CIFAR-10 binary records and the raw HIAPDS1 tensor format.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include "hiap/io.hpp"
#include "hiap/rng.hpp"
#include "hiap/tensor.hpp"

namespace hiap {

enum class DatasetFormat { cifar10_binary, raw_tensor };

inline DatasetFormat parse_dataset_format(const std::string& s) {
  if (s == "cifar10_binary") return DatasetFormat::cifar10_binary;
  if (s == "raw_tensor") return DatasetFormat::raw_tensor;
  throw Error("unknown dataset format '" + s + "' (expected cifar10_binary or raw_tensor)");
}

inline const char* dataset_format_name(DatasetFormat f) {
  return f == DatasetFormat::cifar10_binary ? "cifar10_binary" : "raw_tensor";
}

struct Dataset {
  std::size_t channels = 0, height = 0, width = 0;
  std::vector<float> images;  // count x C x H x W
  std::vector<std::uint16_t> labels;

  std::size_t size() const { return labels.size(); }
  std::size_t sample_size() const { return channels * height * width; }
  std::span<const float> image(std::size_t i) const {
    return std::span<const float>(images).subspan(i * sample_size(), sample_size());
  }
};

inline constexpr std::size_t kCifarRecord = 3073;
inline constexpr std::array<float, 3> kCifarMean{0.4914f, 0.4822f, 0.4465f};
inline constexpr std::array<float, 3> kCifarStd{0.2470f, 0.2435f, 0.2616f};

struct CifarOptions {
  std::vector<int> classes;      // keep only these labels, remapped to 0..n-1 in this order; empty keeps all
  std::size_t max_samples = 0;   // 0 = no limit
};

/// Parses CIFAR-10 binary records: 1 label byte + 3072 channel-planar pixels.
inline Dataset decode_cifar10_binary(const std::vector<char>& bytes, const std::string& origin,
                                     const CifarOptions& opts = {}) {
  if (bytes.empty() || bytes.size() % kCifarRecord != 0)
    throw FormatError(origin + ": truncated CIFAR-10 file (" + std::to_string(bytes.size()) +
                      " bytes is not a positive multiple of 3073)");
  Dataset ds;
  ds.channels = 3;
  ds.height = 32;
  ds.width = 32;
  const std::size_t records = bytes.size() / kCifarRecord;
  for (std::size_t r = 0; r < records; ++r) {
    const char* rec = bytes.data() + r * kCifarRecord;
    const int label = static_cast<unsigned char>(rec[0]);
    if (label >= 10)
      throw FormatError(origin + ": record " + std::to_string(r) + " has label " + std::to_string(label) +
                        " >= 10 classes");
    int mapped = label;
    if (!opts.classes.empty()) {
      auto it = std::find(opts.classes.begin(), opts.classes.end(), label);
      if (it == opts.classes.end()) continue;
      mapped = static_cast<int>(it - opts.classes.begin());
    }
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t i = 0; i < 1024; ++i) {
        const float px = static_cast<float>(static_cast<unsigned char>(rec[1 + c * 1024 + i])) / 255.0f;
        ds.images.push_back((px - kCifarMean[c]) / kCifarStd[c]);
      }
    ds.labels.push_back(static_cast<std::uint16_t>(mapped));
    if (opts.max_samples && ds.size() >= opts.max_samples) break;
  }
  return ds;
}

inline Dataset load_cifar10_binary(const std::filesystem::path& path, const CifarOptions& opts = {}) {
  return decode_cifar10_binary(read_file(path), path.string(), opts);
}

inline constexpr char kRawMagic[8] = {'H', 'I', 'A', 'P', 'D', 'S', '1', '\0'};

inline std::string encode_raw_tensor(const Dataset& ds) {
  std::string out(kRawMagic, 8);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(ds.size()));
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(ds.channels));
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(ds.height));
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(ds.width));
  for (float v : ds.images) put_f32(out, v);
  for (auto l : ds.labels) put_le<std::uint16_t>(out, l);
  return out;
}

inline void write_raw_tensor(const Dataset& ds, const std::filesystem::path& path) {
  write_file_atomic(path, encode_raw_tensor(ds));
}

inline Dataset decode_raw_tensor(const std::vector<char>& bytes, const std::string& origin, std::size_t num_classes) {
  if (bytes.size() < 24 || std::memcmp(bytes.data(), kRawMagic, 8) != 0)
    throw FormatError(origin + ": bad magic (expected HIAPDS1)");
  Dataset ds;
  const std::size_t count = get_le<std::uint32_t>(bytes.data() + 8);
  ds.channels = get_le<std::uint32_t>(bytes.data() + 12);
  ds.height = get_le<std::uint32_t>(bytes.data() + 16);
  ds.width = get_le<std::uint32_t>(bytes.data() + 20);
  const std::size_t floats = count * ds.sample_size();
  const std::size_t expect = 24 + floats * 4 + count * 2;
  if (bytes.size() != expect)
    throw FormatError(origin + ": truncated raw tensor file (" + std::to_string(bytes.size()) + " bytes, expected " +
                      std::to_string(expect) + ")");
  ds.images.resize(floats);
  for (std::size_t i = 0; i < floats; ++i) ds.images[i] = get_f32(bytes.data() + 24 + 4 * i);
  ds.labels.resize(count);
  const char* lp = bytes.data() + 24 + floats * 4;
  for (std::size_t i = 0; i < count; ++i) {
    ds.labels[i] = get_le<std::uint16_t>(lp + 2 * i);
    if (ds.labels[i] >= num_classes)
      throw FormatError(origin + ": sample " + std::to_string(i) + " has label " + std::to_string(ds.labels[i]) +
                        " >= " + std::to_string(num_classes) + " classes");
  }
  return ds;
}

inline Dataset load_dataset(const std::filesystem::path& path, DatasetFormat format, std::size_t num_classes,
                            const CifarOptions& opts = {}) {
  Dataset ds = format == DatasetFormat::cifar10_binary ? load_cifar10_binary(path, opts)
                                                      : decode_raw_tensor(read_file(path), path.string(), num_classes);
  for (std::size_t i = 0; i < ds.size(); ++i)
    if (ds.labels[i] >= num_classes)
      throw FormatError(path.string() + ": sample " + std::to_string(i) + " has label " +
                        std::to_string(ds.labels[i]) + " >= " + std::to_string(num_classes) + " classes");
  if (format == DatasetFormat::raw_tensor && opts.max_samples && ds.size() > opts.max_samples) {
    ds.labels.resize(opts.max_samples);
    ds.images.resize(opts.max_samples * ds.sample_size());
  }
  return ds;
}

struct Batch {
  Tensor<float> images;  // [B,C,H,W]
  std::vector<int> labels;
};

/// Copies samples into a batch; with `augment`, applies a random horizontal
/// flip and a random crop from a 4-pixel zero-padded frame.
inline Batch make_batch(const Dataset& ds, std::span<const std::size_t> indices, bool augment, Rng* rng) {
  const std::size_t c = ds.channels, h = ds.height, w = ds.width, per = ds.sample_size();
  std::vector<float> data(indices.size() * per, 0.0f);
  Batch batch;
  for (std::size_t b = 0; b < indices.size(); ++b) {
    auto src = ds.image(indices[b]);
    float* dst = data.data() + b * per;
    batch.labels.push_back(ds.labels[indices[b]]);
    if (!augment) {
      std::copy(src.begin(), src.end(), dst);
      continue;
    }
    const bool flip = rng->coin();
    const int dy = static_cast<int>(rng->index(9)) - 4, dx = static_cast<int>(rng->index(9)) - 4;
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
          const int sy = static_cast<int>(y) + dy;
          int sx = static_cast<int>(x) + dx;
          if (sy < 0 || sy >= static_cast<int>(h) || sx < 0 || sx >= static_cast<int>(w)) continue;
          if (flip) sx = static_cast<int>(w) - 1 - sx;
          dst[(ch * h + y) * w + x] = src[(ch * h + static_cast<std::size_t>(sy)) * w + static_cast<std::size_t>(sx)];
        }
  }
  batch.images = Tensor<float>({indices.size(), c, h, w}, std::move(data));
  return batch;
}

}  // namespace hiap
