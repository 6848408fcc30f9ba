#pragma once
// Episode tuning engine. Builds the per-episode trainable state for a chosen
// variant, runs the optimization loop over the support set, and scores the
// queries against transformed support centroids. The backbone passed in is
// always restored to its entry values, whatever the variant touched.

#include <atomic>
#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "ett/apt.hpp"
#include "ett/backbone.hpp"
#include "ett/dra.hpp"
#include "ett/episodes.hpp"
#include "ett/head.hpp"
#include "ett/optim.hpp"
#include "ett/protoreg.hpp"
#include "ett/rng.hpp"
#include "ett/stats.hpp"
#include "ett/tensor.hpp"

namespace ett::engine {

constexpr uint64_t kStreamTune = 0x74756e65;
constexpr uint64_t kStreamPretrain = 0x70726574;

enum class Variant { proto, ltncc, last, first, ln, apt, adapter, ett, full_ft };

inline Variant parse_variant(const std::string& s) {
  if (s == "proto") return Variant::proto;
  if (s == "ltncc") return Variant::ltncc;
  if (s == "last") return Variant::last;
  if (s == "first") return Variant::first;
  if (s == "ln") return Variant::ln;
  if (s == "apt") return Variant::apt;
  if (s == "adapter") return Variant::adapter;
  if (s == "ett") return Variant::ett;
  if (s == "full_ft") return Variant::full_ft;
  throw TensorError("unknown variant: " + s);
}

inline const char* variant_name(Variant v) {
  switch (v) {
    case Variant::proto: return "proto";
    case Variant::ltncc: return "ltncc";
    case Variant::last: return "last";
    case Variant::first: return "first";
    case Variant::ln: return "ln";
    case Variant::apt: return "apt";
    case Variant::adapter: return "adapter";
    case Variant::ett: return "ett";
    default: return "full_ft";
  }
}

struct TuneConfig {
  int steps = 40;
  double lr = 5e-4;
  double weight_decay = 0.01;
  int prefix_hidden = 0;  // 0: width / 2
  int proj_dim = 64;
  apt::PrefixInit prefix_init = apt::PrefixInit::attentive;
  dra::Kind adapter_kind = dra::Kind::offset;
  int adapter_hidden = 0;  // bottleneck adapters; 0: width / 4
  reg::DistillConfig distill{};
  bool use_pr = true;         // apply the distillation term to the loss
  bool inject_at_eval = true; // prefix rows join the final support/query passes
  bool want_features = false; // keep query feature matrices in the outcome
  uint64_t seed = 0;
};

inline int effective_prefix_hidden(const TuneConfig& tc, int width) {
  return tc.prefix_hidden > 0 ? tc.prefix_hidden : width / 2;
}

inline int effective_adapter_hidden(const TuneConfig& tc, int width) {
  return tc.adapter_hidden > 0 ? tc.adapter_hidden : width / 4;
}

inline bool variant_has_prefix(Variant v) { return v == Variant::apt || v == Variant::ett; }
inline bool variant_has_adapters(Variant v) {
  return v == Variant::adapter || v == Variant::ett;
}
inline bool variant_has_distill(Variant v) { return v == Variant::apt || v == Variant::ett; }
inline bool variant_tunes_backbone(Variant v) {
  return v == Variant::last || v == Variant::first || v == Variant::ln ||
         v == Variant::full_ft;
}
// variants whose support features change between steps need a fresh pass
inline bool variant_needs_step_forward(Variant v) {
  return variant_has_prefix(v) || variant_has_adapters(v) || variant_tunes_backbone(v);
}

// closed-form count of trainable scalars for a variant at a given way
inline long long count_trainable(Variant v, int way, const vit::ViTConfig& vc,
                                 const TuneConfig& tc) {
  const long long d = vc.width, L = vc.layers;
  const long long phi = d * d;
  auto adapter_params = [&]() -> long long {
    switch (tc.adapter_kind) {
      case dra::Kind::offset: return 2 * L * d;
      case dra::Kind::film: return 4 * L * d;
      case dra::Kind::linear: return 2 * L * d * d;
      default: {
        long long ah = effective_adapter_hidden(tc, vc.width);
        return 2 * L * (d * ah + ah * d);
      }
    }
  };
  auto prefix_params = [&]() -> long long {
    long long dh = effective_prefix_hidden(tc, vc.width);
    return (long long)(way)*d + d * dh + dh * 2 * L * d + d * (long long)(tc.proj_dim);
  };
  auto block_params = [&]() -> long long {
    return 4 * d * d + 4 * d + 2 * d * (long long)(vc.ffn_hidden);
  };
  switch (v) {
    case Variant::proto: return 0;
    case Variant::ltncc: return phi;
    case Variant::last:
    case Variant::first: return phi + block_params();
    case Variant::ln: return phi + 2 * L * d;
    case Variant::apt: return phi + prefix_params();
    case Variant::adapter: return phi + adapter_params();
    case Variant::ett: return phi + prefix_params() + adapter_params();
    default: {
      long long backbone = vc.patch_dim() * d + d + (long long)(vc.tokens()) * d;
      backbone += L * block_params();
      return phi + backbone;
    }
  }
}

struct StepTrace {
  double total = 0.0;
  double ce = 0.0;
  double dist = 0.0;
  double support_acc = 0.0;
};

struct EpisodeOutcome {
  int64_t episode_id = 0;
  int way = 0;
  std::vector<int> shots;
  double acc_support = 0.0;
  double acc_query = 0.0;
  int steps = 0;
  long long params_trainable = 0;
  std::vector<StepTrace> trace;
  Tensor query_logits;          // [n_query, way]
  Tensor query_features;        // transformed, post tuning (want_features)
  Tensor query_features_clean;  // frozen backbone (want_features)
};

namespace detail {

inline Tensor stack_images(const std::vector<Tensor>& images) {
  if (images.empty()) throw TensorError("stack_images: empty batch");
  int width = images[0].dim(1);
  Tensor out = Tensor::zeros({int(images.size()), width});
  for (size_t i = 0; i < images.size(); ++i) {
    if (images[i].rank() != 2 || images[i].dim(0) != 1 || images[i].dim(1) != width)
      throw TensorError("stack_images: inconsistent image shapes");
    for (int j = 0; j < width; ++j)
      out.data()[i * size_t(width) + size_t(j)] = images[i].data()[j];
  }
  return out;
}

inline Tensor slice_cls_scores(const Tensor& cls_scores, int image) {
  int heads = cls_scores.dim(1), patches = cls_scores.dim(2);
  Tensor out = Tensor::zeros({heads, patches});
  for (int h = 0; h < heads; ++h)
    for (int m = 0; m < patches; ++m)
      out.data()[size_t(h) * size_t(patches) + size_t(m)] = cls_scores.at({image, h, m});
  return out;
}

}  // namespace detail

// attention-weighted prototype initialization reusing the class-token scores
// captured during the clean support pass; matches the per-image path exactly
inline Tensor attentive_prefix_from_clean(const vit::Backbone& bb, const data::Episode& ep,
                                          const vit::ForwardResult& clean) {
  Tape::Pause pause;
  if (!clean.cls_scores.defined())
    throw TensorError("attentive_prefix_from_clean: clean pass lacks class-token scores");
  std::vector<std::vector<double>> vecs;
  vecs.reserve(ep.support.size());
  for (size_t i = 0; i < ep.support.size(); ++i) {
    Tensor scores = detail::slice_cls_scores(clean.cls_scores, int(i));
    vecs.push_back(apt::attentive_combine(scores, bb.patch_embed(ep.support[i])));
  }
  return apt::prototype_rows(vecs, ep.support_labels, ep.way, bb.cfg.width);
}

struct TuningState {
  Variant variant = Variant::proto;
  TuneConfig cfg;
  head::TransformPhi phi;
  Tensor prefix;
  apt::BottleneckG g;
  dra::DraState adapters;
  std::unique_ptr<reg::Distiller> distiller;
  bool has_prefix = false;
  bool has_adapters = false;
  // support data cached at init
  Tensor support_batch;
  std::vector<int> support_labels;
  int way = 0;
  Tensor clean_features;
  Tensor clean_prototypes;
  std::vector<std::pair<std::string, Tensor>> trainables;
  // entry values of backbone tensors this variant tunes, for restoration
  std::vector<std::pair<Tensor, std::vector<double>>> backbone_snapshot;

  long long trainable_count() const {
    long long n = 0;
    for (auto& [name, t] : trainables) n += (long long)(t.size());
    return n;
  }
};

inline TuningState init_state(vit::Backbone& bb, const data::Episode& ep, Variant v,
                              const TuneConfig& tc) {
  TuningState st;
  st.variant = v;
  st.cfg = tc;
  st.way = ep.way;
  st.support_labels = ep.support_labels;
  st.support_batch = detail::stack_images(ep.support);
  const int d = bb.cfg.width;

  // clean pass over the support set; attentive init reuses its captures
  vit::ForwardResult clean;
  {
    Tape::Pause pause;
    vit::ForwardOptions copt;
    copt.capture_cls_scores =
        variant_has_prefix(v) && tc.prefix_init == apt::PrefixInit::attentive;
    clean = bb.forward_batch(st.support_batch, copt);
    st.clean_features = clean.features;
    st.clean_prototypes = head::class_means(st.clean_features, ep.support_labels, ep.way);
  }

  Rng rng = Rng::stream(tc.seed, {kStreamTune, uint64_t(ep.id)});
  st.phi = head::TransformPhi::identity(d);
  if (v != Variant::proto) st.trainables.emplace_back("phi.w", st.phi.w);

  if (variant_has_prefix(v)) {
    if (tc.prefix_init == apt::PrefixInit::attentive)
      st.prefix = attentive_prefix_from_clean(bb, ep, clean);
    else
      st.prefix = apt::initial_prefix(tc.prefix_init, bb, ep.support, ep.support_labels,
                                      ep.way, rng);
    st.g = apt::BottleneckG::init(d, effective_prefix_hidden(tc, d), bb.cfg.layers, rng);
    st.has_prefix = true;
    st.trainables.emplace_back("prefix", st.prefix);
    for (auto& p : st.g.named_params()) st.trainables.push_back(p);
  }

  if (variant_has_distill(v)) {
    st.distiller = std::make_unique<reg::Distiller>(
        reg::ProjectorPsi::init(d, tc.proj_dim, rng), tc.distill);
    st.distiller->bind(st.clean_prototypes);
    for (auto& p : st.distiller->psi.named_params()) st.trainables.push_back(p);
  }

  if (variant_has_adapters(v)) {
    st.adapters = dra::DraState::make(tc.adapter_kind, bb.cfg.layers, d,
                                      effective_adapter_hidden(tc, d), rng);
    st.has_adapters = true;
    for (auto& p : st.adapters.named_params()) st.trainables.push_back(p);
  }

  if (variant_tunes_backbone(v)) {
    auto add_block = [&](size_t l) {
      auto& blk = bb.blocks[l];
      std::string base = "block" + std::to_string(l) + ".";
      st.trainables.emplace_back(base + "ln1.gain", blk.ln1_gain);
      st.trainables.emplace_back(base + "ln1.bias", blk.ln1_bias);
      st.trainables.emplace_back(base + "attn.wq", blk.wq);
      st.trainables.emplace_back(base + "attn.wk", blk.wk);
      st.trainables.emplace_back(base + "attn.wv", blk.wv);
      st.trainables.emplace_back(base + "attn.wo", blk.wo);
      st.trainables.emplace_back(base + "ln2.gain", blk.ln2_gain);
      st.trainables.emplace_back(base + "ln2.bias", blk.ln2_bias);
      st.trainables.emplace_back(base + "ffn.w1", blk.ffn_w1);
      st.trainables.emplace_back(base + "ffn.w2", blk.ffn_w2);
    };
    if (v == Variant::last) add_block(bb.blocks.size() - 1);
    if (v == Variant::first) add_block(0);
    if (v == Variant::ln)
      for (size_t l = 0; l < bb.blocks.size(); ++l) {
        std::string base = "block" + std::to_string(l) + ".";
        st.trainables.emplace_back(base + "ln1.gain", bb.blocks[l].ln1_gain);
        st.trainables.emplace_back(base + "ln2.gain", bb.blocks[l].ln2_gain);
      }
    if (v == Variant::full_ft) {
      st.trainables.emplace_back("cls_token", bb.cls_token);
      st.trainables.emplace_back("pos_embed", bb.pos_embed);
      st.trainables.emplace_back("patch_w", bb.patch_w);
      for (size_t l = 0; l < bb.blocks.size(); ++l) add_block(l);
    }
    for (auto& [name, t] : st.trainables) {
      if (name == "phi.w") continue;
      std::vector<double> copy(t.data(), t.data() + t.size());
      st.backbone_snapshot.emplace_back(t, std::move(copy));
    }
  }

  for (auto& [name, t] : st.trainables) t.set_requires_grad(true);
  return st;
}

struct LossBreakdown {
  Tensor total;
  Tensor ce;
  Tensor dist;  // undefined when the variant has no distillation term
  Tensor scores;
};

// one tuning step's loss at the current state; a frozen teacher can be
// supplied so finite-difference checks hold the distillation target fixed
inline LossBreakdown step_loss(const vit::Backbone& bb, TuningState& st,
                               const Tensor* frozen_teacher = nullptr) {
  LossBreakdown out;
  Tensor feats;
  if (variant_needs_step_forward(st.variant)) {
    vit::ForwardOptions opt;
    vit::PrefixInjection inj;
    if (st.has_prefix) {
      inj = st.g.expand(st.prefix);
      opt.injection = &inj;
    }
    if (st.has_adapters) opt.adapters = &st.adapters;
    feats = bb.forward_batch(st.support_batch, opt).features;
  } else {
    feats = st.clean_features;
  }
  Tensor tf = st.phi.apply(feats);
  Tensor protos = head::class_means(tf, st.support_labels, st.way);
  out.scores = head::cosine_scores(tf, protos);
  out.ce = head::ce_loss(out.scores, st.support_labels);
  out.total = out.ce;
  if (st.distiller) {
    Tensor teacher = frozen_teacher ? *frozen_teacher : st.distiller->teacher(true);
    if (st.cfg.use_pr) {
      out.dist = st.distiller->loss_with_teacher(teacher, st.prefix);
      out.total = add_scaled(out.ce, out.dist, st.cfg.distill.lambda);
    } else {
      Tape::Pause pause;
      out.dist = st.distiller->loss_with_teacher(teacher, st.prefix);
    }
  }
  return out;
}

inline void restore_backbone(TuningState& st) {
  for (auto& [t, vals] : st.backbone_snapshot)
    for (size_t i = 0; i < vals.size(); ++i) t.data()[i] = vals[i];
  for (auto& [name, t] : st.trainables) {
    t.set_requires_grad(false);
    t.zero_grad();
  }
}

inline EpisodeOutcome finetune_episode(vit::Backbone& bb, const data::Episode& ep, Variant v,
                                       const TuneConfig& tc) {
  TuningState st = init_state(bb, ep, v, tc);
  EpisodeOutcome out;
  out.episode_id = ep.id;
  out.way = ep.way;
  out.shots = ep.shots;
  out.params_trainable = st.trainable_count();
  out.steps = (v == Variant::proto) ? 0 : tc.steps;

  std::vector<Tensor> opt_params;
  for (auto& [name, t] : st.trainables) opt_params.push_back(t);
  AdamWConfig oc;
  oc.lr = tc.lr;
  oc.weight_decay = tc.weight_decay;
  AdamW opt(opt_params, oc);

  for (int t = 0; t < out.steps; ++t) {
    opt.zero_grad();
    Tape tape;
    LossBreakdown lb = step_loss(bb, st);
    StepTrace tr;
    tr.total = lb.total.item();
    tr.ce = lb.ce.item();
    tr.dist = lb.dist.defined() ? lb.dist.item() : 0.0;
    {
      Tape::Pause pause;
      tr.support_acc = head::accuracy(lb.scores, st.support_labels);
    }
    out.trace.push_back(tr);
    tape.backward(lb.total);
    opt.step();
  }

  // final evaluation with tuned parameters
  {
    Tape::Pause pause;
    vit::PrefixInjection inj;
    vit::ForwardOptions fopt;
    if (st.has_prefix && tc.inject_at_eval) {
      inj = st.g.expand(st.prefix);
      fopt.injection = &inj;
    }
    if (st.has_adapters) fopt.adapters = &st.adapters;

    Tensor sfeats = variant_needs_step_forward(v)
                        ? bb.forward_batch(st.support_batch, fopt).features
                        : st.clean_features;
    Tensor stf = st.phi.apply(sfeats);
    Tensor protos = head::class_means(stf, st.support_labels, st.way);
    out.acc_support = head::accuracy(head::cosine_scores(stf, protos), st.support_labels);

    Tensor query_batch = detail::stack_images(ep.query);
    Tensor qfeats = bb.forward_batch(query_batch, fopt).features;
    Tensor qtf = st.phi.apply(qfeats);
    out.query_logits = head::cosine_scores(qtf, protos);
    out.acc_query = head::accuracy(out.query_logits, ep.query_labels);
    if (tc.want_features) {
      out.query_features = qtf;
      out.query_features_clean = bb.forward_batch(query_batch, {}).features;
    }
  }

  restore_backbone(st);
  return out;
}

// ---- toy pretraining on the base classes ----

struct PretrainConfig {
  int steps = 300;
  int batch = 16;
  double lr = 3e-3;
  double weight_decay = 0.01;
  int train_indices = 512;  // images 0..n-1 per class feed training
  int val_images = 128;     // drawn at fresh indices
  // each training image renders at a shift drawn from [0, shift_exposure], so
  // the backbone learns to read both texture bands without ever seeing the
  // strongly shifted regime it is evaluated under
  double shift_exposure = 0.3;
  uint64_t seed = 7;
};

struct PretrainResult {
  double first_loss = 0.0;
  double final_loss = 0.0;
  double val_acc = 0.0;
};

inline PretrainResult pretrain_toy(vit::Backbone& bb, const data::SyntheticDataset& ds,
                                   const PretrainConfig& pc) {
  const auto base = ds.base_ids();
  if (base.empty()) throw TensorError("pretrain_toy: no base classes");
  const int d = bb.cfg.width;
  Rng rng = Rng::stream(pc.seed, {kStreamPretrain});

  Tensor head_w;
  {
    std::vector<double> v(size_t(d) * base.size(), 0.0);
    for (auto& x : v) x = rng.normal(0.0, 0.02);
    head_w = Tensor::from({d, int(base.size())}, std::move(v));
  }
  bb.set_requires_grad(true);
  head_w.set_requires_grad(true);

  std::vector<Tensor> params;
  for (auto& [name, t] : bb.named_params()) params.push_back(t);
  params.push_back(head_w);
  AdamWConfig oc;
  oc.lr = pc.lr;
  oc.weight_decay = pc.weight_decay;
  AdamW opt(params, oc);

  PretrainResult res;
  for (int s = 0; s < pc.steps; ++s) {
    Tensor batch = Tensor::zeros({pc.batch, ds.pixels()});
    std::vector<int> labels(size_t(pc.batch), 0);
    for (int b = 0; b < pc.batch; ++b) {
      int cls = int(rng.uniform_int(0, int64_t(base.size()) - 1));
      int64_t idx = rng.uniform_int(0, pc.train_indices - 1);
      double shift = pc.shift_exposure > 0.0 ? rng.uniform(0.0, pc.shift_exposure) : 0.0;
      Tensor img = ds.image(base[size_t(cls)], idx, shift);
      for (int j = 0; j < ds.pixels(); ++j)
        batch.data()[size_t(b) * size_t(ds.pixels()) + size_t(j)] = img.data()[j];
      labels[size_t(b)] = cls;
    }
    opt.zero_grad();
    Tape tape;
    Tensor logits = matmul(bb.forward_batch(batch, {}).features, head_w);
    Tensor loss = softmax_cross_entropy(logits, labels);
    if (s == 0) res.first_loss = loss.item();
    res.final_loss = loss.item();
    tape.backward(loss);
    opt.step();
  }

  // validation on unseen indices
  {
    Tape::Pause pause;
    int hits = 0;
    Tensor batch = Tensor::zeros({pc.val_images, ds.pixels()});
    std::vector<int> labels(size_t(pc.val_images), 0);
    for (int i = 0; i < pc.val_images; ++i) {
      int cls = int(rng.uniform_int(0, int64_t(base.size()) - 1));
      Tensor img = ds.image(base[size_t(cls)], pc.train_indices + i);
      for (int j = 0; j < ds.pixels(); ++j)
        batch.data()[size_t(i) * size_t(ds.pixels()) + size_t(j)] = img.data()[j];
      labels[size_t(i)] = cls;
    }
    Tensor logits = matmul(bb.forward_batch(batch, {}).features, head_w);
    auto pred = head::argmax_rows(logits);
    for (int i = 0; i < pc.val_images; ++i)
      if (pred[size_t(i)] == labels[size_t(i)]) hits += 1;
    res.val_acc = double(hits) / double(pc.val_images);
  }

  bb.set_requires_grad(false);
  for (auto& [name, t] : bb.named_params()) t.zero_grad();
  return res;
}

// ---- paired evaluation over a shared episode stream ----

struct EvalConfig {
  std::vector<Variant> variants{Variant::ett};
  int episodes = 100;
  uint64_t episode_seed = 0;
  data::EpisodeConfig episode{};
  TuneConfig tune{};
  int workers = 1;
};

struct VariantSummary {
  Variant variant = Variant::proto;
  double mean_acc = 0.0;
  double ci95 = 0.0;
  int episodes = 0;
  bool ci_degenerate = false;  // fewer than two episodes
};

struct EvalResult {
  // outcomes[variant_index][episode_index], episode order fixed by id
  std::vector<std::vector<EpisodeOutcome>> outcomes;
  std::vector<VariantSummary> summaries;
};

inline EvalResult evaluate(const vit::Backbone& bb, const data::SyntheticDataset& ds,
                           const EvalConfig& ec) {
  if (ec.episodes <= 0) throw TensorError("evaluate: episode count must be positive");
  if (ec.variants.empty()) throw TensorError("evaluate: no variants");
  EvalResult res;
  res.outcomes.assign(ec.variants.size(), std::vector<EpisodeOutcome>(size_t(ec.episodes)));

  int workers = ec.workers > 0 ? ec.workers : 1;
  if (workers > ec.episodes) workers = ec.episodes;

  std::atomic<int64_t> next{0};
  auto run_range = [&](vit::Backbone local) {
    for (;;) {
      int64_t id = next.fetch_add(1);
      if (id >= ec.episodes) break;
      data::Episode ep =
          data::materialize(ds, data::plan_episode(ds, ec.episode, ec.episode_seed, id));
      for (size_t vi = 0; vi < ec.variants.size(); ++vi)
        res.outcomes[vi][size_t(id)] = finetune_episode(local, ep, ec.variants[vi], ec.tune);
    }
  };

  if (workers == 1) {
    run_range(bb.clone());
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) pool.emplace_back(run_range, bb.clone());
    for (auto& t : pool) t.join();
  }

  for (size_t vi = 0; vi < ec.variants.size(); ++vi) {
    std::vector<double> accs;
    for (auto& o : res.outcomes[vi]) accs.push_back(o.acc_query);
    VariantSummary s;
    s.variant = ec.variants[vi];
    s.mean_acc = stats::mean(accs);
    s.ci95 = stats::ci95(accs);
    s.episodes = ec.episodes;
    s.ci_degenerate = accs.size() < 2;
    res.summaries.push_back(s);
  }
  return res;
}

}  // namespace ett::engine
