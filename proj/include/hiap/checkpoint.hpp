// Weight files: "HIAPWT1\0", u64 LE header length, JSON header listing
// tensor names, shapes and byte offsets, then little-endian float32 data.
#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "hiap/config.hpp"
#include "hiap/gating.hpp"
#include "hiap/io.hpp"
#include "hiap/model.hpp"

namespace hiap {

inline constexpr char kWeightMagic[8] = {'H', 'I', 'A', 'P', 'W', 'T', '1', '\0'};

struct TensorFile {
  json meta = json::object();
  std::vector<std::pair<std::string, Tensor<float>>> tensors;

  const Tensor<float>* find(const std::string& name) const {
    for (const auto& [n, t] : tensors)
      if (n == name) return &t;
    return nullptr;
  }
};

inline std::string encode_tensor_file(const TensorFile& file) {
  json header;
  header["meta"] = file.meta;
  header["tensors"] = json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : file.tensors) {
    const std::uint64_t nbytes = t.numel() * 4;
    header["tensors"].push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}, {"nbytes", nbytes}});
    offset += nbytes;
  }
  const std::string text = header.dump();
  std::string out(kWeightMagic, sizeof(kWeightMagic));
  put_le<std::uint64_t>(out, text.size());
  out += text;
  out.reserve(out.size() + offset);
  for (const auto& [name, t] : file.tensors)
    for (float v : t.data()) put_f32(out, v);
  return out;
}

inline TensorFile decode_tensor_file(const std::vector<char>& bytes, const std::string& origin) {
  auto fail = [&](const std::string& why) -> FormatError { return FormatError(origin + ": " + why); };
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kWeightMagic, 8) != 0) throw fail("bad magic (not a weight file)");
  const auto header_len = get_le<std::uint64_t>(bytes.data() + 8);
  if (header_len > bytes.size() - 16) throw fail("truncated header");
  json header;
  try {
    header = json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(header_len));
  } catch (const json::exception& e) {
    throw fail(std::string("malformed header: ") + e.what());
  }
  const std::size_t data_start = 16 + header_len;
  TensorFile file;
  try {
    file.meta = header.at("meta");
    for (const auto& entry : header.at("tensors")) {
      const auto name = entry.at("name").get<std::string>();
      const auto shape = entry.at("shape").get<Shape>();
      const auto offset = entry.at("offset").get<std::uint64_t>();
      const auto nbytes = entry.at("nbytes").get<std::uint64_t>();
      if (nbytes != numel(shape) * 4) throw fail("tensor '" + name + "' byte count does not match its shape");
      if (data_start + offset + nbytes > bytes.size()) throw fail("tensor '" + name + "' extends past end of file");
      std::vector<float> v(numel(shape));
      const char* p = bytes.data() + data_start + offset;
      for (std::size_t i = 0; i < v.size(); ++i) v[i] = get_f32(p + 4 * i);
      file.tensors.emplace_back(name, Tensor<float>(shape, std::move(v)));
    }
  } catch (const json::exception& e) {
    throw fail(std::string("malformed header: ") + e.what());
  } catch (const ShapeError& e) {
    throw fail(e.what());
  }
  return file;
}

inline TensorFile read_tensor_file(const std::filesystem::path& path) {
  return decode_tensor_file(read_file(path), path.string());
}

/// Rebuilds model weights from named tensors, inferring the surviving
/// structure (head count, value widths, FFN presence) from the names.
inline ModelWeights<float> assemble_weights(const ModelConfig& config, const TensorFile& file,
                                            const std::string& origin) {
  auto get = [&](const std::string& name, const Shape& expect) {
    const auto* t = file.find(name);
    if (!t) throw FormatError(origin + ": missing tensor '" + name + "'");
    if (!expect.empty() && t->shape() != expect)
      throw FormatError(origin + ": tensor '" + name + "' has shape " + shape_str(t->shape()) + ", expected " +
                        shape_str(expect));
    return t->detach();
  };
  const std::size_t d = config.embed_dim, dh = config.head_dim;
  ModelWeights<float> w;
  w.config = config;
  w.patch_w = get("patch.w", {config.patch_dim(), d});
  w.patch_b = get("patch.b", {d});
  w.cls = get("cls", {d});
  w.pos = get("pos", {config.seq_len(), d});
  for (std::size_t l = 0; l < config.layers; ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    BlockWeights<float> b;
    b.ln1_g = get(p + "ln1.g", {d});
    b.ln1_b = get(p + "ln1.b", {d});
    for (std::size_t h = 0;; ++h) {
      const std::string q = p + "attn.heads." + std::to_string(h) + ".";
      if (!file.find(q + "wq")) break;
      if (h >= config.heads) throw FormatError(origin + ": layer " + std::to_string(l) + " has too many heads");
      HeadWeights<float> hw;
      hw.wq = get(q + "wq", {d, dh});
      hw.bq = get(q + "bq", {dh});
      hw.wk = get(q + "wk", {d, dh});
      hw.bk = get(q + "bk", {dh});
      hw.wv = get(q + "wv", {});
      const std::size_t dv = hw.wv.rank() == 2 ? hw.wv.dim(1) : 0;
      if (hw.wv.rank() != 2 || hw.wv.dim(0) != d || dv > dh)
        throw FormatError(origin + ": tensor '" + q + "wv' has bad shape " + shape_str(hw.wv.shape()));
      hw.bv = get(q + "bv", {dv});
      hw.wo = get(q + "wo", {dv, d});
      b.heads.push_back(std::move(hw));
    }
    b.bo = get(p + "attn.bo", {d});
    b.ln2_g = get(p + "ln2.g", {d});
    b.ln2_b = get(p + "ln2.b", {d});
    b.ffn_present = file.find(p + "ffn.b2") != nullptr;
    if (b.ffn_present) {
      if (file.find(p + "ffn.w1")) {
        b.w1 = get(p + "ffn.w1", {});
        if (b.w1.rank() != 2 || b.w1.dim(0) != d || b.w1.dim(1) > config.ffn_dim)
          throw FormatError(origin + ": tensor '" + p + "ffn.w1' has bad shape " + shape_str(b.w1.shape()));
        const std::size_t f = b.w1.dim(1);
        b.b1 = get(p + "ffn.b1", {f});
        b.w2 = get(p + "ffn.w2", {f, d});
      }
      b.b2 = get(p + "ffn.b2", {d});
    }
    w.blocks.push_back(std::move(b));
  }
  w.norm_g = get("norm.g", {d});
  w.norm_b = get("norm.b", {d});
  w.head_w = get("head.w", {d, config.num_classes});
  w.head_b = get("head.b", {config.num_classes});
  return w;
}

/// Dense weights plus gate logits: the artifact of a training run.
struct GatedCheckpoint {
  ModelWeights<float> weights;
  GateBank<float> bank;

  const ModelConfig& config() const { return weights.config; }
};

inline std::string encode_gated_checkpoint(const GatedCheckpoint& ckpt) {
  TensorFile file;
  file.meta = {{"kind", "gated"}, {"config", ckpt.config()}};
  file.tensors = ckpt.weights.named_tensors();
  for (auto f : kGateFamilies) file.tensors.emplace_back(std::string("gates.") + family_name(f), ckpt.bank.logits[f]);
  return encode_tensor_file(file);
}

inline void save_gated_checkpoint(const GatedCheckpoint& ckpt, const std::filesystem::path& path) {
  write_file_atomic(path, encode_gated_checkpoint(ckpt));
}

inline GatedCheckpoint decode_gated_checkpoint(const std::vector<char>& bytes, const std::string& origin) {
  auto file = decode_tensor_file(bytes, origin);
  if (file.meta.value("kind", "") != "gated") throw FormatError(origin + ": not a gated checkpoint");
  ModelConfig config;
  try {
    config = file.meta.at("config").get<ModelConfig>();
    config.validate();
  } catch (const json::exception& e) {
    throw FormatError(origin + ": bad config in header: " + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(origin + ": " + e.what());
  }
  GatedCheckpoint ckpt{assemble_weights(config, file, origin), GateBank<float>::create(config)};
  if (!ckpt.weights.is_dense()) throw FormatError(origin + ": gated checkpoint must hold dense weights");
  for (auto f : kGateFamilies) {
    const std::string name = std::string("gates.") + family_name(f);
    const auto* t = file.find(name);
    if (!t) throw FormatError(origin + ": missing tensor '" + name + "'");
    if (t->shape() != gate_shape(config, f)) throw FormatError(origin + ": tensor '" + name + "' has wrong shape");
    ckpt.bank.logits[f] = t->detach();
  }
  try {
    ckpt.bank.validate();
  } catch (const Error& e) {
    throw FormatError(origin + ": " + e.what());
  }
  return ckpt;
}

inline GatedCheckpoint load_gated_checkpoint(const std::filesystem::path& path) {
  return decode_gated_checkpoint(read_file(path), path.string());
}

}  // namespace hiap
