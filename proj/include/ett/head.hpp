#pragma once
// Nearest-centroid classification on linearly transformed features. The
// square transform starts as the identity, class centroids are recomputed
// from the transformed support each call, and scores are cosine similarities
// so feature scale never matters.

#include <string>
#include <utility>
#include <vector>

#include "ett/tensor.hpp"

namespace ett::head {

struct TransformPhi {
  Tensor w;  // [d, d]

  static TransformPhi identity(int d) {
    if (d <= 0) throw TensorError("TransformPhi: width must be positive");
    Tensor w = Tensor::zeros({d, d});
    for (int i = 0; i < d; ++i) w.data()[size_t(i) * size_t(d) + size_t(i)] = 1.0;
    TransformPhi t;
    t.w = w;
    return t;
  }

  Tensor apply(const Tensor& x) const { return matmul(x, w); }

  std::vector<std::pair<std::string, Tensor>> named_params() const { return {{"phi.w", w}}; }

  long long param_count() const { return (long long)(w.size()); }
};

// per-class mean of feature rows, differentiable through the features
inline Tensor class_means(const Tensor& feats, const std::vector<int>& labels, int n_classes) {
  if (feats.rank() != 2 || labels.size() != size_t(feats.dim(0)))
    throw TensorError("class_means: features and labels must align");
  int n = feats.dim(0);
  std::vector<int> counts(size_t(n_classes), 0);
  for (int y : labels) {
    if (y < 0 || y >= n_classes) throw TensorError("class_means: label out of range");
    counts[size_t(y)] += 1;
  }
  for (int c : counts)
    if (c == 0) throw TensorError("class_means: every class needs at least one row");
  std::vector<double> m(size_t(n_classes) * size_t(n), 0.0);
  for (int i = 0; i < n; ++i)
    m[size_t(labels[size_t(i)]) * size_t(n) + size_t(i)] =
        1.0 / double(counts[size_t(labels[size_t(i)])]);
  return matmul(Tensor::from({n_classes, n}, std::move(m)), feats);
}

// cosine similarity of every feature row against every centroid row
inline Tensor cosine_scores(const Tensor& feats, const Tensor& centroids) {
  return matmul(row_l2_normalize(feats), transpose(row_l2_normalize(centroids)));
}

inline Tensor predict(const Tensor& scores) { return softmax(scores, 1); }

inline Tensor ce_loss(const Tensor& scores, const std::vector<int>& labels) {
  return softmax_cross_entropy(scores, labels);
}

inline std::vector<int> argmax_rows(const Tensor& scores) {
  if (scores.rank() != 2) throw TensorError("argmax_rows: rank-2 required");
  std::vector<int> out(size_t(scores.dim(0)), 0);
  for (int i = 0; i < scores.dim(0); ++i) {
    int best = 0;
    for (int j = 1; j < scores.dim(1); ++j)
      if (scores.at({i, j}) > scores.at({i, best})) best = j;
    out[size_t(i)] = best;
  }
  return out;
}

inline double accuracy(const Tensor& scores, const std::vector<int>& labels) {
  auto pred = argmax_rows(scores);
  if (pred.size() != labels.size()) throw TensorError("accuracy: label count mismatch");
  int hits = 0;
  for (size_t i = 0; i < pred.size(); ++i)
    if (pred[i] == labels[i]) hits += 1;
  return double(hits) / double(pred.size());
}

}  // namespace ett::head
