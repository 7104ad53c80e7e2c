#pragma once

#include <cstdint>
#include <vector>

#include "tlkit/autodiff.hpp"
#include "tlkit/losses.hpp"
#include "tlkit/mixtoken.hpp"
#include "tlkit/model.hpp"

namespace tlkit {

// One training-step loss graph. Labels arrive already mixed (they are data,
// not differentiated); token mixing itself happens inside the graph so
// gradients reach both mix partners' embeddings.
template <typename T>
struct LossGraphSpec {
  Tensor<T> images;            // [B,3,H,W]
  std::vector<int> mix_perm;   // partner permutation; empty disables MixToken
  const MixMask* mix_mask = nullptr;
  Tensor<T> cls_labels;        // [B,K]
  Tensor<T> token_labels;      // [B,N,K]; ignored when !token_labeling
  std::vector<int> participation;
  T beta = T(0.5);
  std::vector<uint8_t> drops;  // one per block
  bool token_labeling = true;
  bool images_require_grad = false;
};

template <typename T>
struct LossGraphResult {
  VitLeaves<T> leaves;
  Var<T> images;
  Var<T> cls_logits;    // [B,1,K]
  Var<T> token_logits;  // [B,N,K]
  Var<T> l_cls;
  Var<T> l_tl;  // invalid when token labeling is off
  Var<T> l_total;
};

template <typename T>
LossGraphResult<T> build_loss_graph(Tape<T>& tape, const VitParams<T>& params,
                                    const LossGraphSpec<T>& in,
                                    bool params_require_grad = true) {
  const ModelConfig& cfg = params.config;
  const int bsz = in.images.dim(0);
  const int n = cfg.token_count();

  LossGraphResult<T> out;
  out.leaves = add_param_leaves(tape, params, params_require_grad);
  out.images = tape.leaf(in.images, in.images_require_grad);

  Var<T> tokens = patch_embed_graph(tape, out.leaves, cfg, out.images);
  if (!in.mix_perm.empty()) {
    if (in.mix_mask == nullptr) throw UsageError("mix_perm given without a mask");
    Var<T> partner = ad::permute_batch(tokens, in.mix_perm);
    tokens = mask_mix(tokens, partner, *in.mix_mask);
  }
  Var<T> encoded = encode_graph(tape, out.leaves, cfg, tokens, in.drops);
  HeadOutputs<T> heads = heads_graph(tape, out.leaves, cfg, encoded);
  out.cls_logits = heads.cls_logits;
  out.token_logits = heads.token_logits;

  std::vector<T> cls_w(size_t(bsz), T(1) / T(bsz));
  out.l_cls = weighted_softmax_ce(out.cls_logits, in.cls_labels, std::move(cls_w));

  if (in.token_labeling) {
    if (in.participation.empty()) {
      throw UsageError("token labeling requires a nonempty participation set");
    }
    std::vector<T> tok_w(size_t(bsz) * size_t(n), T(0));
    const T w = T(1) / (T(bsz) * T(in.participation.size()));
    for (int b = 0; b < bsz; ++b) {
      for (int idx : in.participation) {
        if (idx < 0 || idx >= n) throw UsageError("participation index out of range");
        tok_w[size_t(b) * size_t(n) + size_t(idx)] = w;
      }
    }
    out.l_tl = weighted_softmax_ce(out.token_logits, in.token_labels, std::move(tok_w));
    out.l_total = ad::axpy(out.l_cls, out.l_tl, T(1), in.beta);
  } else {
    out.l_total = out.l_cls;
  }
  return out;
}

}  // namespace tlkit
