#pragma once

// Minimal pre-norm vision transformer.
//
// Block order: LN -> multi-head attention -> +residual -> LN -> FFN ->
// +residual. Linear maps are bias-free; the layer norms carry the affine
// parameters. The image representation is the class-token row after the last
// block.
//
// Two tuning hooks thread through forward():
//   - per-layer prefix key/value rows joining every attention softmax,
//   - residual adapters applied to each branch output before its residual add.
// With no injection and freshly initialized adapters both are exact no-ops.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "ett/checkpoint.hpp"
#include "ett/dra.hpp"
#include "ett/rng.hpp"
#include "ett/stats.hpp"
#include "ett/tensor.hpp"

namespace ett::vit {

struct ViTConfig {
  int image_size = 32;
  int patch_size = 8;
  int channels = 3;
  int layers = 4;
  int heads = 4;
  int width = 64;
  int ffn_hidden = 256;

  int grid() const { return image_size / patch_size; }
  int patches() const { return grid() * grid(); }
  int tokens() const { return patches() + 1; }
  int patch_dim() const { return patch_size * patch_size * channels; }
  int pixels() const { return channels * image_size * image_size; }

  void validate() const {
    if (image_size <= 0 || patch_size <= 0 || channels <= 0 || layers <= 0 ||
        heads <= 0 || width <= 0 || ffn_hidden <= 0)
      throw TensorError("ViTConfig: dimensions must be positive");
    if (image_size % patch_size != 0)
      throw TensorError("ViTConfig: patch size must divide image size");
    if (width % heads != 0) throw TensorError("ViTConfig: heads must divide width");
  }
};

// Per-layer prefix rows; key[l] and value[l] are [n_prefix, width].
struct PrefixInjection {
  std::vector<Tensor> key;
  std::vector<Tensor> value;

  int n_prefix() const { return key.empty() ? 0 : key[0].dim(0); }
};

struct ForwardOptions {
  const PrefixInjection* injection = nullptr;
  const dra::DraState* adapters = nullptr;
  bool capture_attention = false;   // post-softmax maps for every layer
  bool capture_cls_scores = false;  // last-layer pre-softmax class-token row
};

struct ForwardResult {
  Tensor features;                  // [batch, width]
  std::vector<Tensor> attention;    // per layer [batch, heads, tokens, keys]
  Tensor cls_scores;                // [batch, heads, patches]
};

struct Backbone {
  ViTConfig cfg;
  Tensor cls_token;  // [width]
  Tensor pos_embed;  // [tokens, width]; row 0 belongs to the class token
  Tensor patch_w;    // [patch_dim, width]

  struct Block {
    Tensor ln1_gain, ln1_bias;
    Tensor wq, wk, wv, wo;
    Tensor ln2_gain, ln2_bias;
    Tensor ffn_w1, ffn_w2;
  };
  std::vector<Block> blocks;

  static Backbone init(const ViTConfig& cfg, Rng& rng) {
    cfg.validate();
    Backbone b;
    b.cfg = cfg;
    auto gauss = [&](std::vector<int> shape) {
      std::vector<double> v(Tensor::count(shape));
      for (auto& x : v) x = rng.normal(0.0, 0.02);
      return Tensor::from(std::move(shape), std::move(v));
    };
    auto ones = [&](int n) {
      return Tensor::from({n}, std::vector<double>(size_t(n), 1.0));
    };
    b.cls_token = gauss({cfg.width});
    b.pos_embed = gauss({cfg.tokens(), cfg.width});
    b.patch_w = gauss({cfg.patch_dim(), cfg.width});
    for (int l = 0; l < cfg.layers; ++l) {
      Block blk;
      blk.ln1_gain = ones(cfg.width);
      blk.ln1_bias = Tensor::zeros({cfg.width});
      blk.wq = gauss({cfg.width, cfg.width});
      blk.wk = gauss({cfg.width, cfg.width});
      blk.wv = gauss({cfg.width, cfg.width});
      blk.wo = gauss({cfg.width, cfg.width});
      blk.ln2_gain = ones(cfg.width);
      blk.ln2_bias = Tensor::zeros({cfg.width});
      blk.ffn_w1 = gauss({cfg.width, cfg.ffn_hidden});
      blk.ffn_w2 = gauss({cfg.ffn_hidden, cfg.width});
      b.blocks.push_back(std::move(blk));
    }
    return b;
  }

  // Zero-padded block ids keep lexicographic order equal to layer order.
  std::vector<std::pair<std::string, Tensor>> named_params() const {
    std::vector<std::pair<std::string, Tensor>> out;
    out.emplace_back("cls_token", cls_token);
    out.emplace_back("pos_embed", pos_embed);
    out.emplace_back("patch_embed.w", patch_w);
    for (size_t l = 0; l < blocks.size(); ++l) {
      char id[8];
      std::snprintf(id, sizeof(id), "%02zu", l);
      std::string base = "block" + std::string(id) + ".";
      const Block& blk = blocks[l];
      out.emplace_back(base + "ln1.gain", blk.ln1_gain);
      out.emplace_back(base + "ln1.bias", blk.ln1_bias);
      out.emplace_back(base + "wq", blk.wq);
      out.emplace_back(base + "wk", blk.wk);
      out.emplace_back(base + "wv", blk.wv);
      out.emplace_back(base + "wo", blk.wo);
      out.emplace_back(base + "ln2.gain", blk.ln2_gain);
      out.emplace_back(base + "ln2.bias", blk.ln2_bias);
      out.emplace_back(base + "ffn.w1", blk.ffn_w1);
      out.emplace_back(base + "ffn.w2", blk.ffn_w2);
    }
    return out;
  }

  int64_t param_count() const {
    int64_t n = 0;
    for (auto& [name, t] : named_params()) n += int64_t(t.size());
    return n;
  }

  void set_requires_grad(bool rg) const {
    for (auto& [name, t] : named_params()) t.set_requires_grad(rg);
  }

  // exact value copy with fresh storage; worker threads tune independent copies
  Backbone clone() const {
    Backbone out = *this;
    out.cls_token = cls_token.clone();
    out.pos_embed = pos_embed.clone();
    out.patch_w = patch_w.clone();
    for (auto& blk : out.blocks) {
      blk.ln1_gain = blk.ln1_gain.clone();
      blk.ln1_bias = blk.ln1_bias.clone();
      blk.wq = blk.wq.clone();
      blk.wk = blk.wk.clone();
      blk.wv = blk.wv.clone();
      blk.wo = blk.wo.clone();
      blk.ln2_gain = blk.ln2_gain.clone();
      blk.ln2_bias = blk.ln2_bias.clone();
      blk.ffn_w1 = blk.ffn_w1.clone();
      blk.ffn_w2 = blk.ffn_w2.clone();
    }
    return out;
  }

  uint64_t checksum() const {
    uint64_t h = 0xcbf29ce484222325ull;
    for (auto& [name, t] : named_params()) {
      uint64_t hn = stats::fnv1a(name.data(), name.size());
      uint64_t hv = stats::fnv1a(t.data(), t.size() * sizeof(double));
      h = stats::fnv1a(&hn, sizeof hn) ^ h * 0x100000001b3ull ^ hv;
    }
    return h;
  }

  io::Checkpoint to_checkpoint() const {
    io::Checkpoint ck;
    ck.put("meta.config",
           Tensor::from({7}, {double(cfg.image_size), double(cfg.patch_size),
                              double(cfg.channels), double(cfg.layers), double(cfg.heads),
                              double(cfg.width), double(cfg.ffn_hidden)}));
    for (auto& [name, t] : named_params()) ck.put(name, t);
    return ck;
  }

  static Backbone from_checkpoint(const io::Checkpoint& ck) {
    Tensor meta = ck.get("meta.config");
    if (meta.size() != 7) throw io::CheckpointError("backbone: bad meta.config");
    ViTConfig cfg;
    cfg.image_size = int(meta.data()[0]);
    cfg.patch_size = int(meta.data()[1]);
    cfg.channels = int(meta.data()[2]);
    cfg.layers = int(meta.data()[3]);
    cfg.heads = int(meta.data()[4]);
    cfg.width = int(meta.data()[5]);
    cfg.ffn_hidden = int(meta.data()[6]);
    Rng rng(0);
    Backbone b = init(cfg, rng);
    for (auto& [name, t] : b.named_params()) ck.load_into(name, t);
    return b;
  }

  // Rearranges [batch, pixels] images into patch vectors [batch*patches,
  // patch_dim]; pure data movement, no gradient path to images.
  Tensor patchify(const Tensor& images) const {
    if (images.rank() != 2 || images.dim(1) != cfg.pixels())
      throw TensorError("patchify: expected [batch, channels*H*W] images");
    const int B = images.dim(0);
    const int g = cfg.grid(), ps = cfg.patch_size, im = cfg.image_size, ch = cfg.channels;
    Tensor out = Tensor::zeros({B * cfg.patches(), cfg.patch_dim()});
    const double* src = images.data();
    double* dst = out.data();
    for (int b = 0; b < B; ++b) {
      const double* img = src + size_t(b) * cfg.pixels();
      for (int py = 0; py < g; ++py)
        for (int px = 0; px < g; ++px) {
          double* prow =
              dst + (size_t(b) * cfg.patches() + size_t(py) * g + px) * cfg.patch_dim();
          for (int c = 0; c < ch; ++c)
            for (int dy = 0; dy < ps; ++dy)
              for (int dx = 0; dx < ps; ++dx)
                prow[(size_t(c) * ps + dy) * ps + dx] =
                    img[(size_t(c) * im + size_t(py) * ps + dy) * im + size_t(px) * ps + dx];
        }
    }
    return out;
  }

  // Patch embeddings with their position rows added, class-token slot
  // excluded: row m is patch_vec_m @ W + pos[1+m].
  Tensor patch_embed(const Tensor& image) const {
    Tensor batch = image.rank() == 1
                       ? Tensor::from({1, cfg.pixels()},
                                      std::vector<double>(image.data(),
                                                          image.data() + image.size()))
                       : image;
    if (batch.dim(0) != 1) throw TensorError("patch_embed: expected a single image");
    Tensor emb = matmul(patchify(batch), patch_w);
    std::vector<int> patch_pos_rows(size_t(cfg.patches()));
    for (int m = 0; m < cfg.patches(); ++m) patch_pos_rows[size_t(m)] = m + 1;
    return add(emb, gather_rows(pos_embed, patch_pos_rows));
  }

  ForwardResult forward_batch(const Tensor& images, const ForwardOptions& opt = {}) const {
    if (images.rank() != 2) throw TensorError("forward: expected [batch, pixels] images");
    const int B = images.dim(0);
    const int T = cfg.tokens();
    const int d = cfg.width;
    if (opt.injection) {
      if (int(opt.injection->key.size()) != cfg.layers ||
          int(opt.injection->value.size()) != cfg.layers)
        throw TensorError("forward: injection must carry one key/value pair per layer");
      for (int l = 0; l < cfg.layers; ++l) {
        const Tensor& pk = opt.injection->key[size_t(l)];
        const Tensor& pv = opt.injection->value[size_t(l)];
        if (pk.rank() != 2 || pv.rank() != 2 || pk.dim(1) != d || pv.dim(1) != d ||
            pk.dim(0) != pv.dim(0))
          throw TensorError("forward: bad prefix shape at layer " + std::to_string(l));
      }
    }
    if (opt.adapters &&
        (opt.adapters->layers != cfg.layers || opt.adapters->width != d))
      throw TensorError("forward: adapter state does not match the backbone");

    Tensor patch_emb = matmul(patchify(images), patch_w);
    Tensor x = assemble_tokens(patch_emb, B);

    ForwardResult result;
    for (int l = 0; l < cfg.layers; ++l) {
      const Block& blk = blocks[size_t(l)];
      Tensor h = layer_norm(x, blk.ln1_gain, blk.ln1_bias);
      Tensor q = matmul(h, blk.wq);
      Tensor k = matmul(h, blk.wk);
      Tensor v = matmul(h, blk.wv);
      const Tensor* pk = nullptr;
      const Tensor* pv = nullptr;
      if (opt.injection) {
        pk = &opt.injection->key[size_t(l)];
        pv = &opt.injection->value[size_t(l)];
      }
      AttentionCapture cap;
      cap.want_probs = opt.capture_attention;
      cap.want_cls_scores = opt.capture_cls_scores && l == cfg.layers - 1;
      bool want_cap = cap.want_probs || cap.want_cls_scores;
      Tensor att = attention(q, k, v, pk, pv, B, T, cfg.heads, want_cap ? &cap : nullptr);
      if (cap.want_probs) result.attention.push_back(cap.probs);
      if (cap.want_cls_scores) result.cls_scores = cap.cls_scores;
      Tensor o = matmul(att, blk.wo);
      if (opt.adapters) o = opt.adapters->apply(o, dra::Branch::attention, l);
      x = add(x, o);
      Tensor h2 = layer_norm(x, blk.ln2_gain, blk.ln2_bias);
      Tensor f = matmul(gelu(matmul(h2, blk.ffn_w1)), blk.ffn_w2);
      if (opt.adapters) f = opt.adapters->apply(f, dra::Branch::ffn, l);
      x = add(x, f);
    }

    std::vector<int> cls_rows(size_t(B), 0);
    for (int b = 0; b < B; ++b) cls_rows[size_t(b)] = b * T;
    result.features = gather_rows(x, cls_rows);
    return result;
  }

  ForwardResult forward(const Tensor& image, const ForwardOptions& opt = {}) const {
    Tensor batch = image.rank() == 1
                       ? Tensor::from({1, cfg.pixels()},
                                      std::vector<double>(image.data(),
                                                          image.data() + image.size()))
                       : image;
    return forward_batch(batch, opt);
  }

 private:
  // Builds the token matrix [batch*tokens, width]: row b*T is cls+pos[0],
  // row b*T+1+m is patch_emb[b*patches+m]+pos[1+m]. Fused so position rows,
  // class token and patch embeddings keep gradient paths during pretraining.
  Tensor assemble_tokens(const Tensor& patch_emb, int B) const {
    const int T = cfg.tokens();
    const int P = cfg.patches();
    const int d = cfg.width;
    Tensor out = Tensor::zeros({B * T, d});
    const double* pe = patch_emb.data();
    const double* cls = cls_token.data();
    const double* pos = pos_embed.data();
    double* po = out.data();
    for (int b = 0; b < B; ++b) {
      double* row0 = po + size_t(b) * T * d;
      for (int j = 0; j < d; ++j) row0[j] = cls[j] + pos[j];
      for (int m = 0; m < P; ++m) {
        const double* src = pe + (size_t(b) * P + m) * d;
        const double* prow = pos + size_t(m + 1) * d;
        double* dst = po + (size_t(b) * T + 1 + m) * d;
        for (int j = 0; j < d; ++j) dst[j] = src[j] + prow[j];
      }
    }
    detail::check_finite(out, "assemble_tokens");
    bool ge = detail::grad_flows(patch_emb);
    bool gc = detail::grad_flows(cls_token);
    bool gp = detail::grad_flows(pos_embed);
    Tensor cls_t = cls_token, pos_t = pos_embed;
    detail::record(out, ge || gc || gp,
                   [patch_emb, cls_t, pos_t, out, ge, gc, gp, B, T, P, d]() mutable {
      const double* g = out.grad();
      for (int b = 0; b < B; ++b) {
        const double* grow0 = g + size_t(b) * T * d;
        if (gc) {
          double* dc = cls_t.grad();
          for (int j = 0; j < d; ++j) dc[j] += grow0[j];
        }
        if (gp) {
          double* dp = pos_t.grad();
          for (int j = 0; j < d; ++j) dp[j] += grow0[j];
        }
        for (int m = 0; m < P; ++m) {
          const double* grow = g + (size_t(b) * T + 1 + m) * d;
          if (ge) {
            double* de = patch_emb.grad() + (size_t(b) * P + m) * d;
            for (int j = 0; j < d; ++j) de[j] += grow[j];
          }
          if (gp) {
            double* dp = pos_t.grad() + size_t(m + 1) * d;
            for (int j = 0; j < d; ++j) dp[j] += grow[j];
          }
        }
      }
    });
    return out;
  }
};

// Last-layer pre-softmax class-token scores for a single-image trace, [heads,
// patches]; rows are the class-token query against each patch key.
inline Tensor extract_cls_attention(const ForwardResult& r) {
  if (!r.cls_scores.defined())
    throw TensorError("extract_cls_attention: trace was captured without class scores");
  if (r.cls_scores.dim(0) != 1)
    throw TensorError("extract_cls_attention: expected a single-image trace");
  int h = r.cls_scores.dim(1), p = r.cls_scores.dim(2);
  std::vector<double> v(r.cls_scores.data(), r.cls_scores.data() + r.cls_scores.size());
  return Tensor::from({h, p}, std::move(v));
}

}  // namespace ett::vit
