#include <gtest/gtest.h>

#include <cstring>

#include "hiap/checkpoint.hpp"
#include "hiap/dataset.hpp"
#include "hiap/synthetic.hpp"
#include "support.hpp"

using namespace hiap;
using hiap::testing::ScratchDir;

namespace {

// Records with label i % 10 and pixel byte (r + c*7 + i) % 256.
std::vector<char> cifar_records(std::size_t n) {
  std::vector<char> out;
  for (std::size_t r = 0; r < n; ++r) {
    out.push_back(static_cast<char>(r % 10));
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t i = 0; i < 1024; ++i) out.push_back(static_cast<char>((r + c * 7 + i) % 256));
  }
  return out;
}

}  // namespace

TEST(Cifar, DecodesRecordsWithChannelNormalization) {
  auto ds = decode_cifar10_binary(cifar_records(10), "mem");
  ASSERT_EQ(ds.size(), 10u);
  EXPECT_EQ(ds.channels, 3u);
  EXPECT_EQ(ds.height, 32u);
  EXPECT_EQ(ds.width, 32u);
  for (std::size_t r = 0; r < 10; ++r) EXPECT_EQ(ds.labels[r], r);
  for (std::size_t r : {0u, 4u, 9u})
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t i : {0u, 31u, 1023u}) {
        const float raw = static_cast<float>((r + c * 7 + i) % 256) / 255.0f;
        EXPECT_FLOAT_EQ(ds.image(r)[c * 1024 + i], (raw - kCifarMean[c]) / kCifarStd[c]);
      }
}

TEST(Cifar, ClassFilterAndLimit) {
  CifarOptions o;
  o.classes = {3, 5};
  auto ds = decode_cifar10_binary(cifar_records(30), "mem", o);
  ASSERT_EQ(ds.size(), 6u);
  for (std::size_t i = 0; i < ds.size(); ++i) EXPECT_EQ(ds.labels[i], i % 2);
  o.max_samples = 3;
  EXPECT_EQ(decode_cifar10_binary(cifar_records(30), "mem", o).size(), 3u);
}

TEST(Cifar, TruncatedAndBadLabel) {
  std::vector<char> one_short(3072, 0);
  try {
    decode_cifar10_binary(one_short, "short.bin");
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("truncated"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("short.bin"), std::string::npos);
  }
  EXPECT_THROW(decode_cifar10_binary({}, "empty"), FormatError);
  auto bytes = cifar_records(2);
  bytes[kCifarRecord] = 10;
  try {
    decode_cifar10_binary(bytes, "mem");
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("record 1"), std::string::npos);
  }
}

TEST(RawTensor, RoundTripIsBitIdentical) {
  ScratchDir dir("raw");
  Dataset ds;
  ds.channels = 3;
  ds.height = 4;
  ds.width = 5;
  Rng rng(1);
  for (int n = 0; n < 7; ++n) {
    for (std::size_t i = 0; i < ds.sample_size(); ++i) ds.images.push_back(static_cast<float>(rng.normal()));
    ds.labels.push_back(static_cast<std::uint16_t>(n % 4));
  }
  ds.images[3] = -0.0f;
  ds.images[5] = std::numeric_limits<float>::denorm_min();
  write_raw_tensor(ds, dir / "d.bin");
  auto back = load_dataset(dir / "d.bin", DatasetFormat::raw_tensor, 4);
  EXPECT_EQ(back.channels, 3u);
  EXPECT_EQ(back.height, 4u);
  EXPECT_EQ(back.width, 5u);
  EXPECT_EQ(back.labels, ds.labels);
  ASSERT_EQ(back.images.size(), ds.images.size());
  EXPECT_EQ(std::memcmp(back.images.data(), ds.images.data(), ds.images.size() * sizeof(float)), 0);
  EXPECT_EQ(encode_raw_tensor(back), encode_raw_tensor(ds));
  EXPECT_THROW(load_dataset(dir / "d.bin", DatasetFormat::raw_tensor, 3), FormatError);
}

TEST(RawTensor, BadMagicAndTruncation) {
  Dataset ds;
  ds.channels = 1;
  ds.height = 1;
  ds.width = 2;
  ds.images = {1.0f, 2.0f};
  ds.labels = {0};
  auto enc = encode_raw_tensor(ds);
  std::vector<char> bytes(enc.begin(), enc.end());
  auto bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(decode_raw_tensor(bad, "m", 2), FormatError);
  bytes.pop_back();
  EXPECT_THROW(decode_raw_tensor(bytes, "m", 2), FormatError);
}

TEST(Dataset, MissingFileIsIoError) {
  EXPECT_THROW(load_dataset("/nonexistent/x.bin", DatasetFormat::cifar10_binary, 10), IoError);
  EXPECT_THROW(parse_dataset_format("png"), Error);
}

TEST(Batch, AugmentFlipsAndCropsDeterministically) {
  auto ds = hiap::testing::synthetic_set(4, 9);
  std::vector<std::size_t> idx{0, 1, 2, 3};
  auto plain = make_batch(ds, idx, false, nullptr);
  EXPECT_EQ(plain.images.shape(), (Shape{4, 3, 32, 32}));
  for (std::size_t i = 0; i < ds.sample_size(); ++i) EXPECT_EQ(plain.images[ds.sample_size() + i], ds.image(1)[i]);
  Rng a(3), b(3);
  auto x = make_batch(ds, idx, true, &a);
  auto y = make_batch(ds, idx, true, &b);
  for (std::size_t i = 0; i < x.images.numel(); ++i) ASSERT_EQ(x.images[i], y.images[i]);
}

TEST(Synthetic, DeterministicAndLabelled) {
  SyntheticOptions o;
  o.count = 50;
  o.seed = 4;
  EXPECT_EQ(generate_synthetic_cifar(o), generate_synthetic_cifar(o));
  const auto bytes = generate_synthetic_cifar(o);
  EXPECT_EQ(bytes.size(), 50 * kCifarRecord);
  auto ds = decode_cifar10_binary(std::vector<char>(bytes.begin(), bytes.end()), "synthetic");
  std::set<int> labels(ds.labels.begin(), ds.labels.end());
  EXPECT_EQ(labels, (std::set<int>{0, 1}));
  o.seed = 5;
  EXPECT_NE(generate_synthetic_cifar(o), bytes);
}

TEST(Checkpoint, GatedRoundTrip) {
  ScratchDir dir("ckpt");
  auto c = hiap::testing::small_vit();
  Rng rng(2);
  GatedCheckpoint ck{init_weights<float>(c, rng), GateBank<float>::create(c)};
  for (auto f : kGateFamilies)
    for (auto& v : ck.bank.logits[f].data()) v = static_cast<float>(rng.normal(0, 3));
  save_gated_checkpoint(ck, dir / "c.bin");
  auto back = load_gated_checkpoint(dir / "c.bin");
  EXPECT_EQ(back.config(), c);
  EXPECT_EQ(encode_gated_checkpoint(back), encode_gated_checkpoint(ck));
  EXPECT_EQ(harden(back.bank, 0.5), harden(ck.bank, 0.5));
}

TEST(Checkpoint, CorruptionIsFormatError) {
  auto c = hiap::testing::small_vit();
  Rng rng(3);
  GatedCheckpoint ck{init_weights<float>(c, rng), GateBank<float>::create(c)};
  auto enc = encode_gated_checkpoint(ck);
  std::vector<char> bytes(enc.begin(), enc.end());
  auto bad = bytes;
  bad[1] = 'Z';
  EXPECT_THROW(decode_gated_checkpoint(bad, "m"), FormatError);
  bytes.resize(bytes.size() - 5);
  EXPECT_THROW(decode_gated_checkpoint(bytes, "m"), FormatError);
  // A non-finite logit is rejected on load.
  ck.bank.logits.head.data()[0] = std::numeric_limits<float>::quiet_NaN();
  auto nan = encode_gated_checkpoint(ck);
  EXPECT_THROW(decode_gated_checkpoint(std::vector<char>(nan.begin(), nan.end()), "m"), FormatError);
}
