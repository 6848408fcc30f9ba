#pragma once
// Prefix generation for test-time tuning. A bottleneck generator expands a
// compact per-class prefix matrix into per-layer key/value rows that join
// every attention softmax, and several strategies build the initial prefix
// from the support set (random noise, plain patch means, a sampled image's
// patch mean, or attention-weighted patch means).

#include <cstdio>
#include <string>
#include <utility>
#include <vector>

#include "ett/backbone.hpp"
#include "ett/rng.hpp"
#include "ett/tensor.hpp"

namespace ett::apt {

enum class Activation { gelu, none };

enum class PrefixInit { random, avg, sampling, attentive };

inline PrefixInit parse_prefix_init(const std::string& s) {
  if (s == "random") return PrefixInit::random;
  if (s == "avg") return PrefixInit::avg;
  if (s == "sampling") return PrefixInit::sampling;
  if (s == "attentive") return PrefixInit::attentive;
  throw TensorError("unknown prefix init: " + s);
}

inline const char* prefix_init_name(PrefixInit k) {
  switch (k) {
    case PrefixInit::random: return "random";
    case PrefixInit::avg: return "avg";
    case PrefixInit::sampling: return "sampling";
    default: return "attentive";
  }
}

// differentiable slice of columns [start, start + count)
inline Tensor column_slice(const Tensor& t, int start, int count) {
  std::vector<int> cols(size_t(count), 0);
  for (int i = 0; i < count; ++i) cols[size_t(i)] = start + i;
  return transpose(gather_rows(transpose(t), cols));
}

// Two-layer bottleneck that maps the prefix matrix [n, width] to stacked
// per-layer key and value rows. The flat output is laid out layer-major with
// the key block before the value block inside each layer.
struct BottleneckG {
  Tensor w1;  // [width, hidden]
  Tensor w2;  // [hidden, 2 * layers * width]
  Activation act = Activation::gelu;
  int layers = 0;
  int width = 0;
  int hidden = 0;

  static BottleneckG init(int width, int hidden, int layers, Rng& rng,
                          Activation act = Activation::gelu) {
    if (width <= 0 || hidden <= 0 || layers <= 0)
      throw TensorError("BottleneckG: dimensions must be positive");
    BottleneckG g;
    g.layers = layers;
    g.width = width;
    g.hidden = hidden;
    g.act = act;
    auto gauss = [&rng](int r, int c) {
      std::vector<double> v(size_t(r) * size_t(c), 0.0);
      for (auto& x : v) x = rng.normal(0.0, 0.02);
      return Tensor::from({r, c}, std::move(v));
    };
    g.w1 = gauss(width, hidden);
    g.w2 = gauss(hidden, 2 * layers * width);
    return g;
  }

  vit::PrefixInjection expand(const Tensor& prefix) const {
    if (prefix.rank() != 2 || prefix.dim(1) != width)
      throw TensorError("BottleneckG::expand: prefix must be [n, width]");
    Tensor mid = matmul(prefix, w1);
    if (act == Activation::gelu) mid = gelu(mid);
    Tensor flat = matmul(mid, w2);
    vit::PrefixInjection inj;
    for (int l = 0; l < layers; ++l) {
      inj.key.push_back(column_slice(flat, l * 2 * width, width));
      inj.value.push_back(column_slice(flat, l * 2 * width + width, width));
    }
    return inj;
  }

  std::vector<std::pair<std::string, Tensor>> named_params() const {
    return {{"g.w1", w1}, {"g.w2", w2}};
  }

  long long param_count() const {
    return (long long)(w1.size()) + (long long)(w2.size());
  }
};

namespace detail {

inline void check_support(const std::vector<Tensor>& images, const std::vector<int>& labels,
                          int n_classes) {
  if (images.size() != labels.size() || images.empty())
    throw TensorError("prototype init: images and labels must align and be nonempty");
  std::vector<int> counts(size_t(n_classes), 0);
  for (int y : labels) {
    if (y < 0 || y >= n_classes) throw TensorError("prototype init: label out of range");
    counts[size_t(y)] += 1;
  }
  for (int c : counts)
    if (c == 0) throw TensorError("prototype init: every class needs support");
}

// plain mean over the image's patch token rows
inline std::vector<double> patch_mean(const vit::Backbone& bb, const Tensor& image) {
  Tape::Pause pause;
  Tensor pe = bb.patch_embed(image);
  int p = pe.dim(0), d = pe.dim(1);
  std::vector<double> out(size_t(d), 0.0);
  for (int m = 0; m < p; ++m)
    for (int j = 0; j < d; ++j) out[size_t(j)] += pe.at({m, j});
  for (auto& v : out) v /= double(p);
  return out;
}

}  // namespace detail

// Attention-weighted combination of one image's patch tokens: per head the
// class-token scores are normalized over patches, the weighted patch sums
// are then averaged across heads.
inline std::vector<double> attentive_combine(const Tensor& cls_scores /* [heads, patches] */,
                                             const Tensor& patch_tokens /* [patches, d] */) {
  Tape::Pause pause;
  if (cls_scores.rank() != 2 || patch_tokens.rank() != 2 ||
      cls_scores.dim(1) != patch_tokens.dim(0))
    throw TensorError("attentive_combine: shape mismatch");
  int heads = cls_scores.dim(0), patches = cls_scores.dim(1), d = patch_tokens.dim(1);
  Tensor w = softmax(cls_scores, 1);
  std::vector<double> out(size_t(d), 0.0);
  for (int h = 0; h < heads; ++h)
    for (int m = 0; m < patches; ++m) {
      double a = w.at({h, m}) / double(heads);
      for (int j = 0; j < d; ++j) out[size_t(j)] += a * patch_tokens.at({m, j});
    }
  return out;
}

// prototype matrix [n_classes, d] from per-class means of combined vectors
inline Tensor prototype_rows(const std::vector<std::vector<double>>& vecs,
                             const std::vector<int>& labels, int n_classes, int d) {
  std::vector<double> sums(size_t(n_classes) * size_t(d), 0.0);
  std::vector<int> counts(size_t(n_classes), 0);
  for (size_t i = 0; i < vecs.size(); ++i) {
    int y = labels[i];
    counts[size_t(y)] += 1;
    for (int j = 0; j < d; ++j) sums[size_t(y) * size_t(d) + size_t(j)] += vecs[i][size_t(j)];
  }
  for (int c = 0; c < n_classes; ++c)
    for (int j = 0; j < d; ++j) sums[size_t(c) * size_t(d) + size_t(j)] /= double(counts[size_t(c)]);
  return Tensor::from({n_classes, d}, std::move(sums));
}

inline Tensor avg_prototypes(const vit::Backbone& bb, const std::vector<Tensor>& images,
                             const std::vector<int>& labels, int n_classes) {
  detail::check_support(images, labels, n_classes);
  std::vector<std::vector<double>> vecs;
  vecs.reserve(images.size());
  for (const auto& img : images) vecs.push_back(detail::patch_mean(bb, img));
  return prototype_rows(vecs, labels, n_classes, bb.cfg.width);
}

inline Tensor sampling_prototypes(const vit::Backbone& bb, const std::vector<Tensor>& images,
                                  const std::vector<int>& labels, int n_classes, Rng& rng) {
  detail::check_support(images, labels, n_classes);
  int d = bb.cfg.width;
  std::vector<double> rows(size_t(n_classes) * size_t(d), 0.0);
  for (int c = 0; c < n_classes; ++c) {
    std::vector<size_t> members;
    for (size_t i = 0; i < labels.size(); ++i)
      if (labels[i] == c) members.push_back(i);
    size_t pick = members[size_t(rng.uniform_int(0, int64_t(members.size()) - 1))];
    auto v = detail::patch_mean(bb, images[pick]);
    for (int j = 0; j < d; ++j) rows[size_t(c) * size_t(d) + size_t(j)] = v[size_t(j)];
  }
  return Tensor::from({n_classes, d}, std::move(rows));
}

inline Tensor attentive_prototypes(const vit::Backbone& bb, const std::vector<Tensor>& images,
                                   const std::vector<int>& labels, int n_classes) {
  detail::check_support(images, labels, n_classes);
  Tape::Pause pause;
  std::vector<std::vector<double>> vecs;
  vecs.reserve(images.size());
  for (const auto& img : images) {
    vit::ForwardOptions opt;
    opt.capture_cls_scores = true;
    auto res = bb.forward(img, opt);
    Tensor scores = vit::extract_cls_attention(res);
    vecs.push_back(attentive_combine(scores, bb.patch_embed(img)));
  }
  return prototype_rows(vecs, labels, n_classes, bb.cfg.width);
}

inline Tensor random_prefix(int n_classes, int width, Rng& rng) {
  std::vector<double> v(size_t(n_classes) * size_t(width), 0.0);
  for (auto& x : v) x = rng.normal(0.0, 0.02);
  return Tensor::from({n_classes, width}, std::move(v));
}

inline Tensor initial_prefix(PrefixInit kind, const vit::Backbone& bb,
                             const std::vector<Tensor>& images, const std::vector<int>& labels,
                             int n_classes, Rng& rng) {
  switch (kind) {
    case PrefixInit::random: return random_prefix(n_classes, bb.cfg.width, rng);
    case PrefixInit::avg: return avg_prototypes(bb, images, labels, n_classes);
    case PrefixInit::sampling: return sampling_prototypes(bb, images, labels, n_classes, rng);
    default: return attentive_prototypes(bb, images, labels, n_classes);
  }
}

}  // namespace ett::apt
