#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "tlkit/autodiff.hpp"
#include "tlkit/errors.hpp"
#include "tlkit/rng.hpp"
#include "tlkit/tensor.hpp"

namespace tlkit {

struct PatchConvSpec {
  int kernel = 0;
  int stride = 0;
  int filters = 0;
};

struct ModelConfig {
  int depth = 12;
  int embed_dim = 192;
  double mlp_ratio = 3.0;
  int num_heads = 4;
  std::vector<PatchConvSpec> patch_convs;  // last filters == embed_dim
  double residual_scale = 2.0;             // forward is X + F(X)/s
  double stoch_depth_rate = 0.1;
  int num_classes = 1000;
  int image_size = 224;
  bool shared_head = false;

  void validate() const;

  int stride_product() const {
    int s = 1;
    for (const auto& pc : patch_convs) s *= pc.stride;
    return s;
  }
  int grid_side() const { return image_size / stride_product(); }
  int token_count() const { return grid_side() * grid_side(); }
  int mlp_hidden() const { return int(std::llround(embed_dim * mlp_ratio)); }
  int head_dim() const { return embed_dim / num_heads; }

  // Symmetric-ish zero padding that keeps output side = input side / stride.
  static int conv_pad(int kernel, int stride) { return (kernel - stride + 1) / 2; }

  std::string serialize() const;
  static ModelConfig deserialize(const std::string& text);

  // The default four-conv tokenizer: 7/2, 3/1, 3/1 with 64 filters, then an
  // 8/8 projection to the embedding width.
  static std::vector<PatchConvSpec> default_patch_stack(int embed_dim) {
    return {{7, 2, 64}, {3, 1, 64}, {3, 1, 64}, {8, 8, embed_dim}};
  }

  static ModelConfig lvvit_s() {
    ModelConfig c;
    c.depth = 16;
    c.embed_dim = 384;
    c.mlp_ratio = 3.0;
    c.num_heads = 6;
    c.num_classes = 1000;
    c.image_size = 224;
    c.patch_convs = default_patch_stack(384);
    return c;
  }

  static ModelConfig lvvit_m() {
    ModelConfig c = lvvit_s();
    c.depth = 20;
    c.embed_dim = 512;
    c.num_heads = 8;
    c.patch_convs = default_patch_stack(512);
    return c;
  }
};

int64_t param_count(const ModelConfig& config);
ModelConfig parse_model_config_file(const std::string& path);

// Per-block drop probability: linear ramp from 0 at the first block to `rate`
// at the last.
inline double drop_rate_at(double rate, int layer, int depth) {
  if (depth <= 1) return 0.0;
  return rate * double(layer) / double(depth - 1);
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

template <typename T>
struct BlockParams {
  Tensor<T> ln1_g, ln1_b;
  Tensor<T> qkv_w, qkv_b;    // [D,3D], [3D]
  Tensor<T> proj_w, proj_b;  // [D,D], [D]
  Tensor<T> ln2_g, ln2_b;
  Tensor<T> fc1_w, fc1_b;  // [D,E], [E]
  Tensor<T> fc2_w, fc2_b;  // [E,D], [D]
};

template <typename T>
struct VitParams {
  ModelConfig config;
  std::vector<Tensor<T>> patch_w;  // [F,C,k,k] each
  std::vector<Tensor<T>> patch_b;  // [F] each
  Tensor<T> cls_token;             // [D]
  Tensor<T> pos_embed;             // [N+1, D]
  std::vector<BlockParams<T>> blocks;
  Tensor<T> out_ln_g, out_ln_b;
  Tensor<T> head_cls_w, head_cls_b;  // [D,K], [K]
  Tensor<T> head_tok_w, head_tok_b;  // empty when shared_head

  // Visits every tensor in declaration order (the checkpoint/optimizer order).
  template <typename Fn>
  void for_each(Fn&& fn) {
    for (size_t i = 0; i < patch_w.size(); ++i) {
      fn("patch_conv" + std::to_string(i) + ".w", patch_w[i]);
      fn("patch_conv" + std::to_string(i) + ".b", patch_b[i]);
    }
    fn("cls_token", cls_token);
    fn("pos_embed", pos_embed);
    for (size_t l = 0; l < blocks.size(); ++l) {
      const std::string p = "block" + std::to_string(l) + ".";
      auto& b = blocks[l];
      fn(p + "ln1.g", b.ln1_g);
      fn(p + "ln1.b", b.ln1_b);
      fn(p + "qkv.w", b.qkv_w);
      fn(p + "qkv.b", b.qkv_b);
      fn(p + "proj.w", b.proj_w);
      fn(p + "proj.b", b.proj_b);
      fn(p + "ln2.g", b.ln2_g);
      fn(p + "ln2.b", b.ln2_b);
      fn(p + "fc1.w", b.fc1_w);
      fn(p + "fc1.b", b.fc1_b);
      fn(p + "fc2.w", b.fc2_w);
      fn(p + "fc2.b", b.fc2_b);
    }
    fn("out_ln.g", out_ln_g);
    fn("out_ln.b", out_ln_b);
    fn("head_cls.w", head_cls_w);
    fn("head_cls.b", head_cls_b);
    if (!config.shared_head) {
      fn("head_tok.w", head_tok_w);
      fn("head_tok.b", head_tok_b);
    }
  }

  template <typename Fn>
  void for_each(Fn&& fn) const {
    const_cast<VitParams*>(this)->for_each(
        [&](const std::string& name, Tensor<T>& t) {
          fn(name, static_cast<const Tensor<T>&>(t));
        });
  }

  int64_t count() const {
    int64_t n = 0;
    for_each([&](const std::string&, const Tensor<T>& t) { n += t.numel(); });
    return n;
  }

  template <typename U>
  VitParams<U> cast() const {
    VitParams<U> out;
    out.config = config;
    for (const auto& t : patch_w) out.patch_w.push_back(Tensor<U>::from(t));
    for (const auto& t : patch_b) out.patch_b.push_back(Tensor<U>::from(t));
    out.cls_token = Tensor<U>::from(cls_token);
    out.pos_embed = Tensor<U>::from(pos_embed);
    for (const auto& b : blocks) {
      BlockParams<U> ob;
      ob.ln1_g = Tensor<U>::from(b.ln1_g);
      ob.ln1_b = Tensor<U>::from(b.ln1_b);
      ob.qkv_w = Tensor<U>::from(b.qkv_w);
      ob.qkv_b = Tensor<U>::from(b.qkv_b);
      ob.proj_w = Tensor<U>::from(b.proj_w);
      ob.proj_b = Tensor<U>::from(b.proj_b);
      ob.ln2_g = Tensor<U>::from(b.ln2_g);
      ob.ln2_b = Tensor<U>::from(b.ln2_b);
      ob.fc1_w = Tensor<U>::from(b.fc1_w);
      ob.fc1_b = Tensor<U>::from(b.fc1_b);
      ob.fc2_w = Tensor<U>::from(b.fc2_w);
      ob.fc2_b = Tensor<U>::from(b.fc2_b);
      out.blocks.push_back(std::move(ob));
    }
    out.out_ln_g = Tensor<U>::from(out_ln_g);
    out.out_ln_b = Tensor<U>::from(out_ln_b);
    out.head_cls_w = Tensor<U>::from(head_cls_w);
    out.head_cls_b = Tensor<U>::from(head_cls_b);
    if (!config.shared_head) {
      out.head_tok_w = Tensor<U>::from(head_tok_w);
      out.head_tok_b = Tensor<U>::from(head_tok_b);
    }
    return out;
  }
};

// Deterministic init: truncated normal (stddev 0.02) for projections and
// embeddings, zeros for biases and for each branch's final projection.
template <typename T>
VitParams<T> build_model(const ModelConfig& config, uint64_t seed) {
  config.validate();
  RngState rng(RngState::mix(seed, 0x76697470ull));  // model init stream
  const int d = config.embed_dim;
  const int e = config.mlp_hidden();
  const int n = config.token_count();
  const int k = config.num_classes;

  auto tn = [&](std::vector<int> shape) {
    Tensor<T> t(std::move(shape));
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = T(rng.truncated_normal(0.02));
    return t;
  };

  VitParams<T> p;
  p.config = config;
  int in_ch = 3;
  for (const auto& pc : config.patch_convs) {
    p.patch_w.push_back(tn({pc.filters, in_ch, pc.kernel, pc.kernel}));
    p.patch_b.push_back(Tensor<T>({pc.filters}));
    in_ch = pc.filters;
  }
  p.cls_token = tn({d});
  p.pos_embed = tn({n + 1, d});
  for (int l = 0; l < config.depth; ++l) {
    BlockParams<T> b;
    b.ln1_g = Tensor<T>::full({d}, T(1));
    b.ln1_b = Tensor<T>({d});
    b.qkv_w = tn({d, 3 * d});
    b.qkv_b = Tensor<T>({3 * d});
    b.proj_w = Tensor<T>({d, d});  // zero: block starts as the identity map
    b.proj_b = Tensor<T>({d});
    b.ln2_g = Tensor<T>::full({d}, T(1));
    b.ln2_b = Tensor<T>({d});
    b.fc1_w = tn({d, e});
    b.fc1_b = Tensor<T>({e});
    b.fc2_w = Tensor<T>({e, d});  // zero
    b.fc2_b = Tensor<T>({d});
    p.blocks.push_back(std::move(b));
  }
  p.out_ln_g = Tensor<T>::full({d}, T(1));
  p.out_ln_b = Tensor<T>({d});
  p.head_cls_w = tn({d, k});
  p.head_cls_b = Tensor<T>({k});
  if (!config.shared_head) {
    p.head_tok_w = tn({d, k});
    p.head_tok_b = Tensor<T>({k});
  }
  return p;
}

// ---------------------------------------------------------------------------
// Graph assembly
// ---------------------------------------------------------------------------

template <typename T>
struct BlockLeaves {
  Var<T> ln1_g, ln1_b, qkv_w, qkv_b, proj_w, proj_b, ln2_g, ln2_b, fc1_w, fc1_b,
      fc2_w, fc2_b;
};

template <typename T>
struct VitLeaves {
  std::vector<Var<T>> patch_w, patch_b;
  Var<T> cls_token, pos_embed;
  std::vector<BlockLeaves<T>> blocks;
  Var<T> out_ln_g, out_ln_b;
  Var<T> head_cls_w, head_cls_b, head_tok_w, head_tok_b;

  std::vector<std::pair<std::string, Var<T>>> named;  // declaration order
};

template <typename T>
VitLeaves<T> add_param_leaves(Tape<T>& tape, const VitParams<T>& p,
                              bool requires_grad = true) {
  VitLeaves<T> lv;
  std::vector<Var<T>> flat;
  p.for_each([&](const std::string& name, const Tensor<T>& t) {
    Var<T> v = tape.leaf(t, requires_grad);
    lv.named.emplace_back(name, v);
    flat.push_back(v);
  });
  size_t i = 0;
  for (size_t c = 0; c < p.patch_w.size(); ++c) {
    lv.patch_w.push_back(flat[i++]);
    lv.patch_b.push_back(flat[i++]);
  }
  lv.cls_token = flat[i++];
  lv.pos_embed = flat[i++];
  for (size_t l = 0; l < p.blocks.size(); ++l) {
    BlockLeaves<T> b;
    b.ln1_g = flat[i++];
    b.ln1_b = flat[i++];
    b.qkv_w = flat[i++];
    b.qkv_b = flat[i++];
    b.proj_w = flat[i++];
    b.proj_b = flat[i++];
    b.ln2_g = flat[i++];
    b.ln2_b = flat[i++];
    b.fc1_w = flat[i++];
    b.fc1_b = flat[i++];
    b.fc2_w = flat[i++];
    b.fc2_b = flat[i++];
    lv.blocks.push_back(b);
  }
  lv.out_ln_g = flat[i++];
  lv.out_ln_b = flat[i++];
  lv.head_cls_w = flat[i++];
  lv.head_cls_b = flat[i++];
  if (!p.config.shared_head) {
    lv.head_tok_w = flat[i++];
    lv.head_tok_b = flat[i++];
  } else {
    lv.head_tok_w = lv.head_cls_w;
    lv.head_tok_b = lv.head_cls_b;
  }
  return lv;
}

// Conv tokenizer: ReLU between convolutions, none after the last projection.
// images: [B,3,H,W] -> tokens [B,N,D] in row-major grid order.
template <typename T>
Var<T> patch_embed_graph(Tape<T>& tape, const VitLeaves<T>& lv,
                         const ModelConfig& cfg, Var<T> images) {
  const Tensor<T>& img = tape.value(images.id);
  if (img.ndim() != 4 || img.dim(2) != cfg.image_size || img.dim(3) != cfg.image_size) {
    throw ShapeError("patch_embed: image size does not match the model config");
  }
  Var<T> x = images;
  for (size_t i = 0; i < lv.patch_w.size(); ++i) {
    const auto& pc = cfg.patch_convs[i];
    x = ad::conv2d(x, lv.patch_w[i], lv.patch_b[i], pc.stride,
                   ModelConfig::conv_pad(pc.kernel, pc.stride));
    if (i + 1 < lv.patch_w.size()) x = ad::relu(x);
  }
  // [B,D,g,g] -> [B,N,D]
  return ad::channels_to_tokens(x);
}

// One pre-norm transformer block with scaled residuals; `dropped` makes the
// whole block an exact identity.
template <typename T>
Var<T> block_graph(Tape<T>& tape, const BlockLeaves<T>& b, const ModelConfig& cfg,
                   Var<T> x, bool dropped) {
  if (dropped) return x;
  const T inv_s = T(1) / T(cfg.residual_scale);
  Var<T> h = ad::layer_norm(x, b.ln1_g, b.ln1_b);
  Var<T> qkv = ad::add_rowvec(ad::matmul(h, b.qkv_w), b.qkv_b);
  const int d = cfg.embed_dim;
  Var<T> q = ad::split_heads(ad::slice_last(qkv, 0, d), cfg.num_heads);
  Var<T> k = ad::split_heads(ad::slice_last(qkv, d, d), cfg.num_heads);
  Var<T> v = ad::split_heads(ad::slice_last(qkv, 2 * d, d), cfg.num_heads);
  Var<T> att = ad::merge_heads(ad::attention(q, k, v));
  Var<T> f = ad::add_rowvec(ad::matmul(att, b.proj_w), b.proj_b);
  x = ad::axpy(x, f, T(1), inv_s);
  Var<T> h2 = ad::layer_norm(x, b.ln2_g, b.ln2_b);
  Var<T> mid = ad::gelu(ad::add_rowvec(ad::matmul(h2, b.fc1_w), b.fc1_b));
  Var<T> f2 = ad::add_rowvec(ad::matmul(mid, b.fc2_w), b.fc2_b);
  return ad::axpy(x, f2, T(1), inv_s);
}

// Class token + positions + blocks + final norm: tokens [B,N,D] ->
// encoded [B,N+1,D]. `drops` holds one decision per block.
template <typename T>
Var<T> encode_graph(Tape<T>& tape, const VitLeaves<T>& lv, const ModelConfig& cfg,
                    Var<T> tokens, const std::vector<uint8_t>& drops) {
  if (int(drops.size()) != cfg.depth) {
    throw UsageError("encode: need one drop decision per block");
  }
  Var<T> x = ad::prepend_token(tokens, lv.cls_token);
  x = ad::add_pos(x, lv.pos_embed);
  for (int l = 0; l < cfg.depth; ++l) {
    x = block_graph(tape, lv.blocks[size_t(l)], cfg, x, drops[size_t(l)] != 0);
  }
  return ad::layer_norm(x, lv.out_ln_g, lv.out_ln_b);
}

template <typename T>
struct HeadOutputs {
  Var<T> cls_logits;    // [B,1,K]
  Var<T> token_logits;  // [B,N,K]
};

template <typename T>
HeadOutputs<T> heads_graph(Tape<T>& tape, const VitLeaves<T>& lv,
                           const ModelConfig& cfg, Var<T> encoded) {
  const int n = cfg.token_count();
  HeadOutputs<T> out;
  Var<T> cls_row = ad::slice_axis1(encoded, 0, 1);
  out.cls_logits = ad::add_rowvec(ad::matmul(cls_row, lv.head_cls_w), lv.head_cls_b);
  Var<T> tok_rows = ad::slice_axis1(encoded, 1, n);
  out.token_logits =
      ad::add_rowvec(ad::matmul(tok_rows, lv.head_tok_w), lv.head_tok_b);
  return out;
}

// ---------------------------------------------------------------------------
// Plain-tensor entry points
// ---------------------------------------------------------------------------

// Activations with the class token at index 0.
template <typename T>
struct TokenBatch {
  Tensor<T> activations;  // [B, N+1, D]
  int grid_side = 0;
};

template <typename T>
Tensor<T> patch_embed(const VitParams<T>& params, const Tensor<T>& images) {
  Tape<T> tape;
  VitLeaves<T> lv = add_param_leaves(tape, params, false);
  Var<T> img = tape.leaf(images, false);
  return patch_embed_graph(tape, lv, params.config, img).value();
}

// Standalone single-block evaluation.
template <typename T>
TokenBatch<T> block_forward(const BlockParams<T>& block, const ModelConfig& cfg,
                            const TokenBatch<T>& tokens, bool drop_decision) {
  Tape<T> tape;
  BlockLeaves<T> lb;
  lb.ln1_g = tape.leaf(block.ln1_g);
  lb.ln1_b = tape.leaf(block.ln1_b);
  lb.qkv_w = tape.leaf(block.qkv_w);
  lb.qkv_b = tape.leaf(block.qkv_b);
  lb.proj_w = tape.leaf(block.proj_w);
  lb.proj_b = tape.leaf(block.proj_b);
  lb.ln2_g = tape.leaf(block.ln2_g);
  lb.ln2_b = tape.leaf(block.ln2_b);
  lb.fc1_w = tape.leaf(block.fc1_w);
  lb.fc1_b = tape.leaf(block.fc1_b);
  lb.fc2_w = tape.leaf(block.fc2_w);
  lb.fc2_b = tape.leaf(block.fc2_b);
  Var<T> x = tape.leaf(tokens.activations);
  TokenBatch<T> out;
  out.activations = block_graph(tape, lb, cfg, x, drop_decision).value();
  out.grid_side = tokens.grid_side;
  return out;
}

// Draws one stochastic-depth decision per block; eval mode never drops. The
// draw count is fixed so the stream stays aligned across configurations.
inline std::vector<uint8_t> draw_block_drops(const ModelConfig& cfg, RngState& rng,
                                             bool training) {
  std::vector<uint8_t> drops(size_t(cfg.depth), 0);
  if (!training || cfg.stoch_depth_rate <= 0.0) return drops;
  for (int l = 0; l < cfg.depth; ++l) {
    const double p = drop_rate_at(cfg.stoch_depth_rate, l, cfg.depth);
    drops[size_t(l)] = rng.uniform() < p ? 1 : 0;
  }
  return drops;
}

template <typename T>
struct ForwardResult {
  Tensor<T> cls_logits;    // [B,K]
  Tensor<T> token_logits;  // [B,N,K]
};

template <typename T>
ForwardResult<T> model_forward(const VitParams<T>& params, const Tensor<T>& images,
                               RngState& rng, bool training) {
  if (!images.all_finite()) throw InputError("model_forward: non-finite input");
  const ModelConfig& cfg = params.config;
  Tape<T> tape;
  VitLeaves<T> lv = add_param_leaves(tape, params, false);
  Var<T> img = tape.leaf(images, false);
  Var<T> tokens = patch_embed_graph(tape, lv, cfg, img);
  const std::vector<uint8_t> drops = draw_block_drops(cfg, rng, training);
  Var<T> enc = encode_graph(tape, lv, cfg, tokens, drops);
  HeadOutputs<T> h = heads_graph(tape, lv, cfg, enc);
  ForwardResult<T> out;
  const int bsz = images.dim(0);
  out.cls_logits = h.cls_logits.value().reshaped({bsz, cfg.num_classes});
  out.token_logits = h.token_logits.value();
  return out;
}

}  // namespace tlkit
