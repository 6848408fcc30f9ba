// Prefix generator and prototype initializers: layout of the expanded
// key/value rows against a sliced dense oracle, linearity without the
// activation, explicit-sum oracles for the attention-weighted prototypes,
// and the uniform-attention case collapsing to the plain mean.

#include <catch2/catch_amalgamated.hpp>
#include <cmath>
#include <vector>

#include "ett/apt.hpp"
#include "ett/grad_check.hpp"

using ett::Tensor;
using ett::apt::Activation;
using ett::apt::BottleneckG;
using ett::vit::Backbone;
using ett::vit::ViTConfig;

namespace {

Tensor random_mat(int r, int c, uint64_t seed, double scale = 1.0) {
  ett::Rng rng(seed);
  std::vector<double> v(size_t(r) * size_t(c), 0.0);
  for (auto& x : v) x = rng.uniform(-scale, scale);
  return Tensor::from({r, c}, std::move(v));
}

double gelu_ref(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

// flat expansion oracle with explicit loops
std::vector<std::vector<double>> expand_ref(const Tensor& prefix, const Tensor& w1,
                                            const Tensor& w2, bool use_gelu) {
  int n = prefix.dim(0), d = prefix.dim(1), h = w1.dim(1), out = w2.dim(1);
  std::vector<std::vector<double>> mid(size_t(n), std::vector<double>(size_t(h), 0.0));
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < h; ++j) {
      double s = 0.0;
      for (int k = 0; k < d; ++k) s += prefix.at({i, k}) * w1.at({k, j});
      mid[size_t(i)][size_t(j)] = use_gelu ? gelu_ref(s) : s;
    }
  std::vector<std::vector<double>> flat(size_t(n), std::vector<double>(size_t(out), 0.0));
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < out; ++j) {
      double s = 0.0;
      for (int k = 0; k < h; ++k) s += mid[size_t(i)][size_t(k)] * w2.at({k, j});
      flat[size_t(i)][size_t(j)] = s;
    }
  return flat;
}

std::vector<Tensor> toy_images(const ViTConfig& cfg, int count, uint64_t seed) {
  ett::Rng rng(seed);
  std::vector<Tensor> images;
  for (int i = 0; i < count; ++i) {
    std::vector<double> v(size_t(cfg.pixels()), 0.0);
    for (auto& x : v) x = rng.uniform01();
    images.push_back(Tensor::from({1, cfg.pixels()}, std::move(v)));
  }
  return images;
}

}  // namespace

TEST_CASE("expanded prefix matches the sliced dense oracle", "[apt]") {
  const int n = 3, d = 6, hid = 4, L = 3;
  ett::Rng rng(11);
  BottleneckG g = BottleneckG::init(d, hid, L, rng);
  Tensor prefix = random_mat(n, d, 7);

  auto inj = g.expand(prefix);
  REQUIRE(inj.key.size() == size_t(L));
  REQUIRE(inj.value.size() == size_t(L));
  REQUIRE(inj.n_prefix() == n);

  auto flat = expand_ref(prefix, g.w1, g.w2, true);
  for (int l = 0; l < L; ++l) {
    REQUIRE(inj.key[size_t(l)].shape() == std::vector<int>{n, d});
    REQUIRE(inj.value[size_t(l)].shape() == std::vector<int>{n, d});
    for (int r = 0; r < n; ++r)
      for (int j = 0; j < d; ++j) {
        REQUIRE(std::abs(inj.key[size_t(l)].at({r, j}) -
                         flat[size_t(r)][size_t(l * 2 * d + j)]) < 1e-10);
        REQUIRE(std::abs(inj.value[size_t(l)].at({r, j}) -
                         flat[size_t(r)][size_t(l * 2 * d + d + j)]) < 1e-10);
      }
  }
}

TEST_CASE("identity generator reproduces the prefix in every layer", "[apt]") {
  const int n = 2, d = 4, L = 2;
  ett::Rng rng(3);
  BottleneckG g = BottleneckG::init(d, d, L, rng, Activation::none);
  // w1 = I, w2 = [I I I I] so each key and value block is the prefix itself
  std::fill(g.w1.data(), g.w1.data() + g.w1.size(), 0.0);
  for (int i = 0; i < d; ++i) g.w1.data()[size_t(i) * d + size_t(i)] = 1.0;
  std::fill(g.w2.data(), g.w2.data() + g.w2.size(), 0.0);
  for (int i = 0; i < d; ++i)
    for (int b = 0; b < 2 * L; ++b) g.w2.data()[size_t(i) * size_t(2 * L * d) + size_t(b * d + i)] = 1.0;

  Tensor prefix = random_mat(n, d, 9);
  auto inj = g.expand(prefix);
  for (int l = 0; l < L; ++l)
    for (int r = 0; r < n; ++r)
      for (int j = 0; j < d; ++j) {
        REQUIRE(inj.key[size_t(l)].at({r, j}) == prefix.at({r, j}));
        REQUIRE(inj.value[size_t(l)].at({r, j}) == prefix.at({r, j}));
      }
}

TEST_CASE("zero prefix expands to zero rows", "[apt]") {
  const int d = 5, hid = 3, L = 2;
  ett::Rng rng(5);
  BottleneckG g = BottleneckG::init(d, hid, L, rng);
  auto inj = g.expand(Tensor::zeros({4, d}));
  for (int l = 0; l < L; ++l) {
    for (size_t i = 0; i < inj.key[size_t(l)].size(); ++i)
      REQUIRE(inj.key[size_t(l)].data()[i] == 0.0);
    for (size_t i = 0; i < inj.value[size_t(l)].size(); ++i)
      REQUIRE(inj.value[size_t(l)].data()[i] == 0.0);
  }
}

TEST_CASE("generator without activation is linear in the prefix", "[apt]") {
  const int n = 2, d = 4, hid = 6, L = 2;
  ett::Rng rng(13);
  BottleneckG g = BottleneckG::init(d, hid, L, rng, Activation::none);
  Tensor x = random_mat(n, d, 21);
  Tensor x3 = ett::scale(x, 3.0);
  auto a = g.expand(x);
  auto b = g.expand(x3);
  for (int l = 0; l < L; ++l)
    for (size_t i = 0; i < a.key[size_t(l)].size(); ++i) {
      REQUIRE(std::abs(b.key[size_t(l)].data()[i] - 3.0 * a.key[size_t(l)].data()[i]) < 1e-12);
      REQUIRE(std::abs(b.value[size_t(l)].data()[i] - 3.0 * a.value[size_t(l)].data()[i]) < 1e-12);
    }
}

TEST_CASE("generator parameter count", "[apt]") {
  ett::Rng rng(1);
  BottleneckG g = BottleneckG::init(384, 192, 12, rng);
  REQUIRE(g.param_count() == 384 * 192 + 192 * 2 * 12 * 384);
}

TEST_CASE("gradients flow through the generator to prefix and weights", "[apt][grad]") {
  const int n = 2, d = 4, hid = 3, L = 2;
  ett::Rng rng(17);
  BottleneckG g = BottleneckG::init(d, hid, L, rng);
  Tensor prefix = random_mat(n, d, 23);
  prefix.set_requires_grad(true);
  g.w1.set_requires_grad(true);
  g.w2.set_requires_grad(true);

  std::vector<Tensor> consts;
  for (int l = 0; l < 2 * L; ++l) consts.push_back(random_mat(n, d, 100 + uint64_t(l)));

  auto f = [&]() {
    auto inj = g.expand(prefix);
    Tensor acc = ett::sum(ett::mul(inj.key[0], consts[0]));
    for (int l = 0; l < L; ++l) {
      if (l > 0) acc = ett::add(acc, ett::sum(ett::mul(inj.key[size_t(l)], consts[size_t(2 * l)])));
      acc = ett::add(acc, ett::sum(ett::mul(inj.value[size_t(l)], consts[size_t(2 * l + 1)])));
    }
    return acc;
  };
  std::vector<std::pair<std::string, Tensor>> params = {
      {"prefix", prefix}, {"w1", g.w1}, {"w2", g.w2}};
  REQUIRE(ett::grad_check(f, params, 1e-5, 1e-4).passed(1e-4));
}

TEST_CASE("attention-weighted combination matches the explicit double sum", "[apt]") {
  const int heads = 3, patches = 5, d = 4;
  Tensor scores = random_mat(heads, patches, 31, 2.0);
  Tensor tokens = random_mat(patches, d, 37);

  auto out = ett::apt::attentive_combine(scores, tokens);
  REQUIRE(out.size() == size_t(d));

  // softmax each head row, then (1/heads) * sum_h sum_m w[h][m] * tokens[m]
  for (int j = 0; j < d; ++j) {
    double want = 0.0;
    for (int h = 0; h < heads; ++h) {
      double mx = scores.at({h, 0});
      for (int m = 1; m < patches; ++m) mx = std::max(mx, scores.at({h, m}));
      double z = 0.0;
      for (int m = 0; m < patches; ++m) z += std::exp(scores.at({h, m}) - mx);
      for (int m = 0; m < patches; ++m)
        want += std::exp(scores.at({h, m}) - mx) / z * tokens.at({m, j}) / double(heads);
    }
    REQUIRE(std::abs(out[size_t(j)] - want) < 1e-10);
  }
}

TEST_CASE("attention-weighted prototypes match the explicit per-class sum", "[apt]") {
  ViTConfig cfg;
  cfg.image_size = 16;
  cfg.patch_size = 8;
  cfg.layers = 2;
  cfg.heads = 2;
  cfg.width = 8;
  cfg.ffn_hidden = 16;
  ett::Rng rng(41);
  Backbone bb = Backbone::init(cfg, rng);
  auto images = toy_images(cfg, 6, 43);
  std::vector<int> labels = {0, 1, 0, 1, 0, 1};

  Tensor protos = ett::apt::attentive_prototypes(bb, images, labels, 2);
  REQUIRE(protos.shape() == std::vector<int>{2, cfg.width});

  // oracle: combine each image separately, average inside each class
  std::vector<std::vector<double>> per_class(2, std::vector<double>(size_t(cfg.width), 0.0));
  std::vector<int> counts(2, 0);
  for (size_t i = 0; i < images.size(); ++i) {
    ett::vit::ForwardOptions opt;
    opt.capture_cls_scores = true;
    Tensor scores = ett::vit::extract_cls_attention(bb.forward(images[i], opt));
    auto v = ett::apt::attentive_combine(scores, bb.patch_embed(images[i]));
    counts[size_t(labels[i])] += 1;
    for (int j = 0; j < cfg.width; ++j) per_class[size_t(labels[i])][size_t(j)] += v[size_t(j)];
  }
  for (int c = 0; c < 2; ++c)
    for (int j = 0; j < cfg.width; ++j)
      REQUIRE(std::abs(protos.at({c, j}) - per_class[size_t(c)][size_t(j)] / counts[size_t(c)]) <
              1e-10);
}

TEST_CASE("uniform attention reduces attentive prototypes to plain patch means", "[apt]") {
  ViTConfig cfg;
  cfg.image_size = 16;
  cfg.patch_size = 8;
  cfg.layers = 2;
  cfg.heads = 2;
  cfg.width = 8;
  cfg.ffn_hidden = 16;
  ett::Rng rng(47);
  Backbone bb = Backbone::init(cfg, rng);
  // zero query weights in the last block flatten every attention row
  std::fill(bb.blocks.back().wq.data(),
            bb.blocks.back().wq.data() + bb.blocks.back().wq.size(), 0.0);

  auto images = toy_images(cfg, 4, 53);
  std::vector<int> labels = {0, 0, 1, 1};
  Tensor att = ett::apt::attentive_prototypes(bb, images, labels, 2);
  Tensor avg = ett::apt::avg_prototypes(bb, images, labels, 2);
  for (size_t i = 0; i < att.size(); ++i)
    REQUIRE(std::abs(att.data()[i] - avg.data()[i]) < 1e-12);
}

TEST_CASE("plain-mean prototypes match a direct loop over patch tokens", "[apt]") {
  ViTConfig cfg;
  cfg.image_size = 16;
  cfg.patch_size = 8;
  cfg.layers = 1;
  cfg.heads = 2;
  cfg.width = 8;
  cfg.ffn_hidden = 16;
  ett::Rng rng(59);
  Backbone bb = Backbone::init(cfg, rng);
  auto images = toy_images(cfg, 3, 61);
  std::vector<int> labels = {0, 0, 1};

  Tensor protos = ett::apt::avg_prototypes(bb, images, labels, 2);
  std::vector<std::vector<double>> sums(2, std::vector<double>(size_t(cfg.width), 0.0));
  std::vector<int> counts(2, 0);
  for (size_t i = 0; i < images.size(); ++i) {
    Tensor pe = bb.patch_embed(images[i]);
    counts[size_t(labels[i])] += 1;
    for (int m = 0; m < cfg.patches(); ++m)
      for (int j = 0; j < cfg.width; ++j)
        sums[size_t(labels[i])][size_t(j)] += pe.at({m, j}) / double(cfg.patches());
  }
  for (int c = 0; c < 2; ++c)
    for (int j = 0; j < cfg.width; ++j)
      REQUIRE(std::abs(protos.at({c, j}) - sums[size_t(c)][size_t(j)] / counts[size_t(c)]) < 1e-12);
}

TEST_CASE("sampled prototypes pick the patch mean of one class member", "[apt]") {
  ViTConfig cfg;
  cfg.image_size = 16;
  cfg.patch_size = 8;
  cfg.layers = 1;
  cfg.heads = 2;
  cfg.width = 8;
  cfg.ffn_hidden = 16;
  ett::Rng brng(67);
  Backbone bb = Backbone::init(cfg, brng);
  auto images = toy_images(cfg, 6, 71);
  std::vector<int> labels = {0, 1, 0, 1, 0, 1};

  ett::Rng r1(5);
  Tensor p1 = ett::apt::sampling_prototypes(bb, images, labels, 2, r1);
  ett::Rng r2(5);
  Tensor p2 = ett::apt::sampling_prototypes(bb, images, labels, 2, r2);
  for (size_t i = 0; i < p1.size(); ++i) REQUIRE(p1.data()[i] == p2.data()[i]);

  // each prototype equals the patch mean of some image with that label
  for (int c = 0; c < 2; ++c) {
    bool matched = false;
    for (size_t i = 0; i < images.size(); ++i) {
      if (labels[i] != c) continue;
      Tensor pe = bb.patch_embed(images[i]);
      bool all = true;
      for (int j = 0; j < cfg.width && all; ++j) {
        double mean = 0.0;
        for (int m = 0; m < cfg.patches(); ++m) mean += pe.at({m, j});
        mean /= double(cfg.patches());
        all = std::abs(p1.at({c, j}) - mean) < 1e-12;
      }
      matched = matched || all;
    }
    REQUIRE(matched);
  }
}

TEST_CASE("random prefix is reproducible and roughly centered", "[apt]") {
  ett::Rng r1(9), r2(9);
  Tensor a = ett::apt::random_prefix(8, 32, r1);
  Tensor b = ett::apt::random_prefix(8, 32, r2);
  REQUIRE(a.shape() == std::vector<int>{8, 32});
  double mean = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    REQUIRE(a.data()[i] == b.data()[i]);
    mean += a.data()[i];
  }
  mean /= double(a.size());
  REQUIRE(std::abs(mean) < 0.01);
}

TEST_CASE("prototype initializers reject malformed support sets", "[apt]") {
  ViTConfig cfg;
  cfg.image_size = 16;
  cfg.patch_size = 8;
  cfg.layers = 1;
  cfg.heads = 2;
  cfg.width = 8;
  cfg.ffn_hidden = 16;
  ett::Rng rng(73);
  Backbone bb = Backbone::init(cfg, rng);
  auto images = toy_images(cfg, 2, 79);
  REQUIRE_THROWS_AS(ett::apt::avg_prototypes(bb, images, {0, 0}, 2), ett::TensorError);
  REQUIRE_THROWS_AS(ett::apt::avg_prototypes(bb, images, {0}, 1), ett::TensorError);
  REQUIRE_THROWS_AS(ett::apt::avg_prototypes(bb, images, {0, 2}, 2), ett::TensorError);
}
