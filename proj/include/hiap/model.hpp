// Vision Transformer forward pass with head/dim/block/neuron gates.
#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "hiap/config.hpp"
#include "hiap/gating.hpp"
#include "hiap/ops.hpp"
#include "hiap/rng.hpp"

namespace hiap {

/// One attention head. Q/K always keep the full head dimension; V and the
/// matching rows of the output projection may be narrower after extraction.
template <typename T>
struct HeadWeights {
  Tensor<T> wq, bq;  // [D, Dh], [Dh]
  Tensor<T> wk, bk;  // [D, Dh], [Dh]
  Tensor<T> wv, bv;  // [D, dv], [dv]
  Tensor<T> wo;      // [dv, D]

  std::size_t value_dims() const { return wv.dim(1); }
};

template <typename T>
struct BlockWeights {
  Tensor<T> ln1_g, ln1_b;
  std::vector<HeadWeights<T>> heads;
  Tensor<T> bo;  // output projection bias, kept even when every head is gone
  Tensor<T> ln2_g, ln2_b;
  bool ffn_present = true;
  Tensor<T> w1, b1;  // [D, F], [F]; undefined when F == 0
  Tensor<T> w2, b2;  // [F, D], [D]

  std::size_t ffn_width() const { return ffn_present && w1.defined() ? w1.dim(1) : 0; }
};

template <typename T>
struct ModelWeights {
  ModelConfig config;
  Tensor<T> patch_w, patch_b;  // [C*p*p, D], [D]
  Tensor<T> cls;               // [D]
  Tensor<T> pos;               // [N, D]
  std::vector<BlockWeights<T>> blocks;
  Tensor<T> norm_g, norm_b;
  Tensor<T> head_w, head_b;  // [D, classes], [classes]

  /// Visits every tensor with a stable name, in a fixed order.
  template <typename F>
  void visit(F&& f) const {
    f("patch.w", patch_w);
    f("patch.b", patch_b);
    f("cls", cls);
    f("pos", pos);
    for (std::size_t l = 0; l < blocks.size(); ++l) {
      const auto& b = blocks[l];
      const std::string p = "layers." + std::to_string(l) + ".";
      f(p + "ln1.g", b.ln1_g);
      f(p + "ln1.b", b.ln1_b);
      for (std::size_t h = 0; h < b.heads.size(); ++h) {
        const auto& hw = b.heads[h];
        const std::string q = p + "attn.heads." + std::to_string(h) + ".";
        f(q + "wq", hw.wq);
        f(q + "bq", hw.bq);
        f(q + "wk", hw.wk);
        f(q + "bk", hw.bk);
        f(q + "wv", hw.wv);
        f(q + "bv", hw.bv);
        f(q + "wo", hw.wo);
      }
      f(p + "attn.bo", b.bo);
      f(p + "ln2.g", b.ln2_g);
      f(p + "ln2.b", b.ln2_b);
      if (b.ffn_present) {
        if (b.w1.defined()) {
          f(p + "ffn.w1", b.w1);
          f(p + "ffn.b1", b.b1);
          f(p + "ffn.w2", b.w2);
        }
        f(p + "ffn.b2", b.b2);
      }
    }
    f("norm.g", norm_g);
    f("norm.b", norm_b);
    f("head.w", head_w);
    f("head.b", head_b);
  }

  std::vector<std::pair<std::string, Tensor<T>>> named_tensors() const {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    visit([&](const std::string& name, const Tensor<T>& t) { out.emplace_back(name, t); });
    return out;
  }

  std::vector<Tensor<T>> parameters() const {
    std::vector<Tensor<T>> out;
    visit([&](const std::string&, const Tensor<T>& t) { out.push_back(t); });
    return out;
  }

  void set_requires_grad(bool on) const {
    visit([&](const std::string&, const Tensor<T>& t) { const_cast<Tensor<T>&>(t).set_requires_grad(on); });
  }

  /// Deep copy into another scalar type (same structure).
  template <typename U>
  ModelWeights<U> cast() const {
    auto c = [](const Tensor<T>& t) { return t.defined() ? t.template cast<U>() : Tensor<U>(); };
    ModelWeights<U> out;
    out.config = config;
    out.patch_w = c(patch_w);
    out.patch_b = c(patch_b);
    out.cls = c(cls);
    out.pos = c(pos);
    for (const auto& b : blocks) {
      BlockWeights<U> nb;
      nb.ln1_g = c(b.ln1_g);
      nb.ln1_b = c(b.ln1_b);
      for (const auto& h : b.heads)
        nb.heads.push_back({c(h.wq), c(h.bq), c(h.wk), c(h.bk), c(h.wv), c(h.bv), c(h.wo)});
      nb.bo = c(b.bo);
      nb.ln2_g = c(b.ln2_g);
      nb.ln2_b = c(b.ln2_b);
      nb.ffn_present = b.ffn_present;
      nb.w1 = c(b.w1);
      nb.b1 = c(b.b1);
      nb.w2 = c(b.w2);
      nb.b2 = c(b.b2);
      out.blocks.push_back(std::move(nb));
    }
    out.norm_g = c(norm_g);
    out.norm_b = c(norm_b);
    out.head_w = c(head_w);
    out.head_b = c(head_b);
    return out;
  }

  ModelWeights clone() const { return cast<T>(); }

  /// True when every structure has its dense size (required for gated forward).
  bool is_dense() const {
    if (blocks.size() != config.layers) return false;
    for (const auto& b : blocks) {
      if (b.heads.size() != config.heads || b.ffn_width() != config.ffn_dim) return false;
      for (const auto& h : b.heads)
        if (h.value_dims() != config.head_dim) return false;
    }
    return true;
  }
};

namespace detail {

template <typename T>
Tensor<T> normal_tensor(Shape shape, Rng& rng, double stddev) {
  std::vector<T> v(numel(shape));
  for (auto& x : v) x = static_cast<T>(rng.normal(0.0, stddev));
  return Tensor<T>(std::move(shape), std::move(v));
}

}  // namespace detail

/// Dense initialization: matrices N(0, 1/fan_in), embeddings N(0, 0.02^2),
/// zero biases, unit norm gains. A positive `stddev` overrides every matrix.
template <typename T>
ModelWeights<T> init_weights(const ModelConfig& config, Rng& rng, double stddev = 0.0) {
  config.validate();
  const std::size_t d = config.embed_dim, dh = config.head_dim, f = config.ffn_dim;
  auto matrix = [&](std::size_t rows, std::size_t cols, std::size_t fan_in = 0) {
    const double sd = stddev > 0 ? stddev : 1.0 / std::sqrt(static_cast<double>(fan_in ? fan_in : rows));
    return detail::normal_tensor<T>({rows, cols}, rng, sd);
  };
  auto embedding = [&](Shape s) { return detail::normal_tensor<T>(std::move(s), rng, stddev > 0 ? stddev : 0.02); };
  ModelWeights<T> w;
  w.config = config;
  w.patch_w = matrix(config.patch_dim(), d);
  w.patch_b = Tensor<T>::zeros({d});
  w.cls = embedding({d});
  w.pos = embedding({config.seq_len(), d});
  for (std::size_t l = 0; l < config.layers; ++l) {
    BlockWeights<T> b;
    b.ln1_g = Tensor<T>::full({d}, T(1));
    b.ln1_b = Tensor<T>::zeros({d});
    for (std::size_t h = 0; h < config.heads; ++h) {
      b.heads.push_back({matrix(d, dh), Tensor<T>::zeros({dh}), matrix(d, dh), Tensor<T>::zeros({dh}), matrix(d, dh),
                         Tensor<T>::zeros({dh}), matrix(dh, d, config.heads * dh)});
    }
    b.bo = Tensor<T>::zeros({d});
    b.ln2_g = Tensor<T>::full({d}, T(1));
    b.ln2_b = Tensor<T>::zeros({d});
    b.w1 = matrix(d, f);
    b.b1 = Tensor<T>::zeros({f});
    b.w2 = matrix(f, d);
    b.b2 = Tensor<T>::zeros({d});
    w.blocks.push_back(std::move(b));
  }
  w.norm_g = Tensor<T>::full({d}, T(1));
  w.norm_b = Tensor<T>::zeros({d});
  w.head_w = matrix(d, config.num_classes);
  w.head_b = Tensor<T>::zeros({config.num_classes});
  w.set_requires_grad(true);
  return w;
}

/// images [B,C,H,W] -> patch rows [B,P,C*p*p], patch vectors ordered (c, y, x).
template <typename T>
Tensor<T> patchify(const Tensor<T>& images, const ModelConfig& config) {
  if (images.rank() != 4 || images.dim(1) != config.channels || images.dim(2) != config.image_size ||
      images.dim(3) != config.image_size)
    throw ShapeError("patchify: expected images [B," + std::to_string(config.channels) + "," +
                     std::to_string(config.image_size) + "," + std::to_string(config.image_size) + "], got " +
                     shape_str(images.shape()));
  const std::size_t batch = images.dim(0), c = config.channels, s = config.image_size, p = config.patch_size;
  const std::size_t grid = s / p, np = grid * grid, pd = config.patch_dim();
  std::vector<T> out(batch * np * pd);
  auto src = images.data();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t gy = 0; gy < grid; ++gy)
      for (std::size_t gx = 0; gx < grid; ++gx) {
        T* dst = out.data() + (b * np + gy * grid + gx) * pd;
        for (std::size_t ch = 0; ch < c; ++ch)
          for (std::size_t y = 0; y < p; ++y)
            for (std::size_t x = 0; x < p; ++x)
              *dst++ = src[((b * c + ch) * s + gy * p + y) * s + gx * p + x];
      }
  return Tensor<T>({batch, np, pd}, std::move(out));
}

/// Multi-head attention sublayer on a normalized input [B,N,D] (or [N,D]).
/// Per head: g_h * softmax(Q K^T / sqrt(Dh)) (V * d_h), then the output
/// projection and its bias. Undefined gate tensors mean "ungated".
/// head_gates: [H]; dim_gates: [H, Dh].
template <typename T>
Tensor<T> gated_attention_forward(const Tensor<T>& x_in, const BlockWeights<T>& w, const Tensor<T>& head_gates,
                                  const Tensor<T>& dim_gates, std::size_t head_dim) {
  const bool unbatched = x_in.rank() == 2;
  const Tensor<T> x = unbatched ? reshape(x_in, {1, x_in.dim(0), x_in.dim(1)}) : x_in;
  if (x.rank() != 3) throw ShapeError("gated_attention_forward: expected [B,N,D], got " + shape_str(x_in.shape()));
  const std::size_t n_heads = w.heads.size();
  if (head_gates.defined() && head_gates.numel() != n_heads)
    throw_shape_error(OpKind::broadcast_mul, {n_heads}, head_gates.shape(), "head gates");
  if (dim_gates.defined() && dim_gates.numel() != n_heads * head_dim)
    throw_shape_error(OpKind::broadcast_mul, {n_heads, head_dim}, dim_gates.shape(), "dim gates");
  const T inv_scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(head_dim)));
  Tensor<T> acc;
  for (std::size_t h = 0; h < n_heads; ++h) {
    const auto& hw = w.heads[h];
    if (hw.wq.dim(1) != head_dim) throw_shape_error(OpKind::matmul, hw.wq.shape(), {x.dim(2), head_dim}, "W^Q");
    auto q = add(matmul(x, hw.wq), hw.bq);
    auto k = add(matmul(x, hw.wk), hw.bk);
    auto v = add(matmul(x, hw.wv), hw.bv);
    if (dim_gates.defined()) v = mul(v, slice(dim_gates, h * head_dim, {head_dim}));
    auto attn = softmax_lastdim(scale(matmul(q, transpose(k)), inv_scale));
    auto out = matmul(attn, v);
    if (head_gates.defined()) out = mul(out, slice(head_gates, h, {1}));
    auto proj = matmul(out, hw.wo);
    acc = acc.defined() ? add(acc, proj) : proj;
  }
  Tensor<T> y = acc.defined() ? add(acc, w.bo) : add(Tensor<T>::zeros(x.shape()), w.bo);
  return unbatched ? reshape(y, {x_in.dim(0), x_in.dim(1)}) : y;
}

/// b * ((gelu(X W1 + b1) * c) W2 + b2). Undefined gates mean "ungated".
template <typename T>
Tensor<T> gated_ffn_forward(const Tensor<T>& x, const BlockWeights<T>& w, const Tensor<T>& block_gate,
                            const Tensor<T>& neuron_gates) {
  if (!w.ffn_present) return Tensor<T>::zeros(x.shape());
  Tensor<T> y;
  if (w.ffn_width() > 0) {
    if (x.shape().back() != w.w1.dim(0)) throw_shape_error(OpKind::matmul, x.shape(), w.w1.shape());
    auto hidden = gelu(add(matmul(x, w.w1), w.b1));
    if (neuron_gates.defined()) {
      if (neuron_gates.numel() != w.ffn_width())
        throw_shape_error(OpKind::broadcast_mul, hidden.shape(), neuron_gates.shape(), "neuron gates");
      hidden = mul(hidden, neuron_gates);
    }
    y = add(matmul(hidden, w.w2), w.b2);
  } else {
    y = add(Tensor<T>::zeros(x.shape()), w.b2);
  }
  if (block_gate.defined()) y = mul(y, block_gate);
  return y;
}

/// Per-layer gate slices taken from full gate tensors.
template <typename T>
struct LayerGates {
  Tensor<T> head, dim, block, neuron;
};

template <typename T>
LayerGates<T> layer_gates(const GateSet<T>& g, const ModelConfig& c, std::size_t l) {
  return {slice(g.head, l * c.heads, {c.heads}), slice(g.dim, l * c.heads * c.head_dim, {c.heads, c.head_dim}),
          slice(g.block, l, {1}), slice(g.neuron, l * c.ffn_dim, {c.ffn_dim})};
}

/// Pre-norm block: x + Attn(LN1 x), then + FFN(LN2 x).
template <typename T>
Tensor<T> block_forward(const Tensor<T>& x, const BlockWeights<T>& w, const LayerGates<T>* gates,
                        std::size_t head_dim) {
  Tensor<T> h;
  if (w.heads.empty()) {
    h = add(x, w.bo);
  } else {
    auto a = gated_attention_forward(layer_norm(x, w.ln1_g, w.ln1_b), w, gates ? gates->head : Tensor<T>(),
                                     gates ? gates->dim : Tensor<T>(), head_dim);
    h = add(x, a);
  }
  if (!w.ffn_present) return h;
  auto f = gated_ffn_forward(layer_norm(h, w.ln2_g, w.ln2_b), w, gates ? gates->block : Tensor<T>(),
                             gates ? gates->neuron : Tensor<T>());
  return add(h, f);
}

/// images [B,C,H,W] -> logits [B, classes]. With `gates` set the weights must
/// be dense; without gates any (extracted) structure runs ungated.
/// `taps`, when given, receives the residual stream after each block.
template <typename T>
Tensor<T> model_forward(const Tensor<T>& images, const ModelWeights<T>& w, const GateSet<T>* gates,
                        std::vector<Tensor<T>>* taps = nullptr) {
  const auto& c = w.config;
  if (!images.defined() || images.rank() == 0 || images.dim(0) == 0) throw ShapeError("model_forward: empty batch");
  if (gates && !w.is_dense()) throw ShapeError("model_forward: gated forward requires dense weights");
  auto patches = patchify(images, c);
  auto x = prepend_token(add(matmul(patches, w.patch_w), w.patch_b), w.cls);
  x = add(x, w.pos);
  for (std::size_t l = 0; l < w.blocks.size(); ++l) {
    if (gates) {
      auto lg = layer_gates(*gates, c, l);
      x = block_forward(x, w.blocks[l], &lg, c.head_dim);
    } else {
      x = block_forward<T>(x, w.blocks[l], nullptr, c.head_dim);
    }
    if (taps) taps->push_back(x);
  }
  x = layer_norm(x, w.norm_g, w.norm_b);
  return add(matmul(select_token(x, 0), w.head_w), w.head_b);
}

}  // namespace hiap
