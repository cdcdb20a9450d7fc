#pragma once

#include <cstddef>
#include <string>

#include <json.hpp>

#include "hiap/tensor.hpp"

namespace hiap {

using json = nlohmann::json;

class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Shape of a (dense) ViT. Pruned models keep the original config and carry
/// their surviving structure separately.
struct ModelConfig {
  std::size_t layers = 4;
  std::size_t heads = 4;
  std::size_t embed_dim = 64;
  std::size_t head_dim = 16;
  std::size_t ffn_dim = 128;
  std::size_t patch_size = 8;
  std::size_t image_size = 32;
  std::size_t channels = 3;
  std::size_t num_classes = 2;

  std::size_t patches() const { return (image_size / patch_size) * (image_size / patch_size); }
  std::size_t seq_len() const { return patches() + 1; }
  std::size_t patch_dim() const { return channels * patch_size * patch_size; }

  void validate() const {
    if (layers == 0 || heads == 0 || embed_dim == 0 || head_dim == 0 || ffn_dim == 0 || patch_size == 0 ||
        image_size == 0 || channels == 0 || num_classes == 0)
      throw ConfigError("model config: all sizes must be positive");
    if (image_size % patch_size != 0)
      throw ConfigError("model config: image_size " + std::to_string(image_size) +
                        " is not divisible by patch_size " + std::to_string(patch_size));
  }

  bool operator==(const ModelConfig&) const = default;

  static ModelConfig deit_small() { return {12, 6, 384, 64, 1536, 16, 224, 3, 1000}; }
  static ModelConfig vit_tiny_cifar() { return {6, 3, 192, 64, 768, 4, 32, 3, 10}; }
};

inline void to_json(json& j, const ModelConfig& c) {
  j = json{{"layers", c.layers},         {"heads", c.heads},           {"embed_dim", c.embed_dim},
           {"head_dim", c.head_dim},     {"ffn_dim", c.ffn_dim},       {"patch_size", c.patch_size},
           {"image_size", c.image_size}, {"channels", c.channels},     {"num_classes", c.num_classes}};
}

inline void from_json(const json& j, ModelConfig& c) {
  ModelConfig d;
  c.layers = j.value("layers", d.layers);
  c.heads = j.value("heads", d.heads);
  c.embed_dim = j.value("embed_dim", d.embed_dim);
  c.head_dim = j.value("head_dim", d.head_dim);
  c.ffn_dim = j.value("ffn_dim", d.ffn_dim);
  c.patch_size = j.value("patch_size", d.patch_size);
  c.image_size = j.value("image_size", d.image_size);
  c.channels = j.value("channels", d.channels);
  c.num_classes = j.value("num_classes", d.num_classes);
}

/// Rejects keys outside `allowed` so that typos in config files surface.
inline void check_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* k : allowed) ok = ok || it.key() == k;
    if (!ok) throw ConfigError(where + ": unknown field '" + it.key() + "'");
  }
}

}  // namespace hiap
