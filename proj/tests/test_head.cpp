// Nearest-centroid head: identity transform at init, class-mean oracle,
// cosine score geometry and scale invariance, cross entropy against a
// log-softmax oracle, and gradients through the whole scoring path.

#include <catch2/catch_amalgamated.hpp>
#include <cmath>
#include <vector>

#include "ett/grad_check.hpp"
#include "ett/head.hpp"
#include "ett/optim.hpp"
#include "ett/rng.hpp"

using ett::Tensor;
using ett::head::TransformPhi;

namespace {

Tensor random_mat(int r, int c, uint64_t seed, double scale = 1.0) {
  ett::Rng rng(seed);
  std::vector<double> v(size_t(r) * size_t(c), 0.0);
  for (auto& x : v) x = rng.uniform(-scale, scale);
  return Tensor::from({r, c}, std::move(v));
}

double cosine_ref(const std::vector<double>& a, const std::vector<double>& b) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

std::vector<double> row_of(const Tensor& t, int r) {
  std::vector<double> out(size_t(t.dim(1)), 0.0);
  for (int j = 0; j < t.dim(1); ++j) out[size_t(j)] = t.at({r, j});
  return out;
}

}  // namespace

TEST_CASE("identity transform leaves features unchanged", "[head]") {
  TransformPhi phi = TransformPhi::identity(6);
  Tensor x = random_mat(4, 6, 3);
  Tensor y = phi.apply(x);
  for (size_t i = 0; i < x.size(); ++i) REQUIRE(y.data()[i] == x.data()[i]);
  REQUIRE(phi.param_count() == 36);
}

TEST_CASE("class means match an explicit grouped average", "[head]") {
  Tensor feats = random_mat(5, 3, 7);
  std::vector<int> labels = {1, 0, 1, 1, 0};
  Tensor means = ett::head::class_means(feats, labels, 2);
  REQUIRE(means.shape() == std::vector<int>{2, 3});
  for (int c = 0; c < 2; ++c) {
    std::vector<double> want(3, 0.0);
    int count = 0;
    for (int i = 0; i < 5; ++i) {
      if (labels[size_t(i)] != c) continue;
      count += 1;
      for (int j = 0; j < 3; ++j) want[size_t(j)] += feats.at({i, j});
    }
    for (int j = 0; j < 3; ++j)
      REQUIRE(std::abs(means.at({c, j}) - want[size_t(j)] / count) < 1e-12);
  }
  REQUIRE_THROWS_AS(ett::head::class_means(feats, labels, 3), ett::TensorError);
  REQUIRE_THROWS_AS(ett::head::class_means(feats, {0, 1}, 2), ett::TensorError);
}

TEST_CASE("cosine scores match the pairwise oracle and live in [-1, 1]", "[head]") {
  Tensor feats = random_mat(6, 5, 11, 2.0);
  Tensor cents = random_mat(3, 5, 13, 2.0);
  Tensor scores = ett::head::cosine_scores(feats, cents);
  REQUIRE(scores.shape() == std::vector<int>{6, 3});
  for (int i = 0; i < 6; ++i)
    for (int c = 0; c < 3; ++c) {
      double want = cosine_ref(row_of(feats, i), row_of(cents, c));
      REQUIRE(std::abs(scores.at({i, c}) - want) < 1e-12);
      REQUIRE(scores.at({i, c}) <= 1.0 + 1e-12);
      REQUIRE(scores.at({i, c}) >= -1.0 - 1e-12);
    }
}

TEST_CASE("cosine scores ignore feature scale", "[head]") {
  Tensor feats = random_mat(4, 5, 17);
  Tensor cents = random_mat(2, 5, 19);
  Tensor a = ett::head::cosine_scores(feats, cents);
  Tensor b = ett::head::cosine_scores(ett::scale(feats, 7.5), ett::scale(cents, 0.2));
  for (size_t i = 0; i < a.size(); ++i) REQUIRE(std::abs(a.data()[i] - b.data()[i]) < 1e-12);

  // a uniformly scaled transform changes nothing either
  TransformPhi phi = TransformPhi::identity(5);
  for (size_t i = 0; i < phi.w.size(); ++i) phi.w.data()[i] *= 4.0;
  Tensor c = ett::head::cosine_scores(phi.apply(feats), phi.apply(cents));
  for (size_t i = 0; i < a.size(); ++i) REQUIRE(std::abs(a.data()[i] - c.data()[i]) < 1e-12);
}

TEST_CASE("predictions are row distributions and argmax picks the top score", "[head]") {
  Tensor scores = random_mat(5, 4, 23, 3.0);
  Tensor probs = ett::head::predict(scores);
  for (int i = 0; i < 5; ++i) {
    double s = 0.0;
    for (int j = 0; j < 4; ++j) s += probs.at({i, j});
    REQUIRE(std::abs(s - 1.0) < 1e-12);
  }
  auto arg = ett::head::argmax_rows(scores);
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < 4; ++j) REQUIRE(scores.at({i, arg[size_t(i)]}) >= scores.at({i, j}));
}

TEST_CASE("cross entropy matches the mean negative log softmax oracle", "[head]") {
  Tensor scores = random_mat(4, 3, 29, 2.0);
  std::vector<int> labels = {2, 0, 1, 2};
  double want = 0.0;
  for (int i = 0; i < 4; ++i) {
    double mx = scores.at({i, 0});
    for (int j = 1; j < 3; ++j) mx = std::max(mx, scores.at({i, j}));
    double z = 0.0;
    for (int j = 0; j < 3; ++j) z += std::exp(scores.at({i, j}) - mx);
    want -= (scores.at({i, labels[size_t(i)]}) - mx - std::log(z)) / 4.0;
  }
  REQUIRE(std::abs(ett::head::ce_loss(scores, labels).item() - want) < 1e-12);
}

TEST_CASE("accuracy counts argmax hits", "[head]") {
  Tensor scores = Tensor::from({4, 2}, {2.0, 1.0, 0.0, 1.0, 3.0, -1.0, 0.5, 0.6});
  REQUIRE(ett::head::accuracy(scores, {0, 1, 0, 1}) == 1.0);
  REQUIRE(ett::head::accuracy(scores, {1, 1, 0, 1}) == 0.75);
  REQUIRE(ett::head::accuracy(scores, {1, 0, 1, 0}) == 0.0);
}

TEST_CASE("the full scoring path is differentiable", "[head][grad]") {
  const int n = 6, d = 5, classes = 2;
  Tensor feats = random_mat(n, d, 31);
  feats.set_requires_grad(true);
  TransformPhi phi = TransformPhi::identity(d);
  // move off the exact identity so the gradient is generic
  for (size_t i = 0; i < phi.w.size(); ++i) phi.w.data()[i] += 0.01 * double(i % 5) - 0.02;
  phi.w.set_requires_grad(true);
  std::vector<int> labels = {0, 1, 0, 1, 0, 1};

  auto f = [&]() {
    Tensor t = phi.apply(feats);
    Tensor means = ett::head::class_means(t, labels, classes);
    return ett::head::ce_loss(ett::head::cosine_scores(t, means), labels);
  };
  std::vector<std::pair<std::string, Tensor>> params = {{"feats", feats}, {"phi.w", phi.w}};
  REQUIRE(ett::grad_check(f, params, 1e-5, 1e-4).passed(1e-4));
}

TEST_CASE("a few optimizer steps on the transform reduce the loss", "[head]") {
  const int n = 8, d = 6, classes = 2;
  Tensor feats = random_mat(n, d, 37);
  std::vector<int> labels = {0, 1, 0, 1, 0, 1, 0, 1};
  TransformPhi phi = TransformPhi::identity(d);
  phi.w.set_requires_grad(true);

  auto loss_value = [&]() {
    Tensor t = phi.apply(feats);
    Tensor means = ett::head::class_means(t, labels, classes);
    return ett::head::ce_loss(ett::head::cosine_scores(t, means), labels);
  };

  ett::AdamWConfig oc;
  oc.lr = 1e-2;
  ett::AdamW opt({phi.w}, oc);
  double before = 0.0;
  {
    ett::Tape tape;
    Tensor l = loss_value();
    before = l.item();
    tape.backward(l);
  }
  for (int s = 0; s < 10; ++s) {
    opt.zero_grad();
    ett::Tape tape;
    Tensor l = loss_value();
    tape.backward(l);
    opt.step();
  }
  double after = 0.0;
  {
    ett::Tape::Pause pause;
    after = loss_value().item();
  }
  REQUIRE(after < before);
}
