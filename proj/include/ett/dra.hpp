#pragma once

// Domain residual adapters: small trainable residual corrections attached to
// the two branch outputs of every transformer block (attention projection and
// feed-forward output), applied before the residual add. Four shapes are
// supported; all start as an exact no-op so a freshly initialized adapter
// leaves the network function unchanged.
//
//   offset      x + delta                          2*L*d parameters
//   linear      x + x W                            2*L*d*d
//   bottleneck  x + act(x W1) W2                   2*L*(d*h + h*d)
//   film        (1 + gamma) * x + delta            4*L*d

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "ett/rng.hpp"
#include "ett/tensor.hpp"

namespace ett::dra {

enum class Kind { offset, linear, bottleneck, film };

enum class Branch { attention, ffn };

inline Kind parse_kind(const std::string& s) {
  if (s == "offset") return Kind::offset;
  if (s == "linear") return Kind::linear;
  if (s == "bottleneck") return Kind::bottleneck;
  if (s == "film") return Kind::film;
  throw TensorError("dra: unknown adapter variant '" + s + "'");
}

inline std::string kind_name(Kind k) {
  switch (k) {
    case Kind::offset: return "offset";
    case Kind::linear: return "linear";
    case Kind::bottleneck: return "bottleneck";
    case Kind::film: return "film";
  }
  throw TensorError("dra: unknown adapter variant");
}

struct DraState {
  Kind kind = Kind::offset;
  int layers = 0;
  int width = 0;
  int hidden = 0;  // bottleneck only

  std::vector<Tensor> delta_attn, delta_ffn;  // offset, film
  std::vector<Tensor> gamma_attn, gamma_ffn;  // film
  std::vector<Tensor> w_attn, w_ffn;          // linear
  std::vector<Tensor> w1_attn, w2_attn, w1_ffn, w2_ffn;  // bottleneck

  // Residual branches are zero-initialized (bottleneck zeroes only its output
  // matrix), so apply() is the identity until the first optimizer step.
  static DraState make(Kind kind, int layers, int width, int hidden, Rng& rng) {
    if (layers <= 0 || width <= 0) throw TensorError("dra: bad dimensions");
    DraState s;
    s.kind = kind;
    s.layers = layers;
    s.width = width;
    s.hidden = hidden;
    auto zeros1 = [&]() { return Tensor::zeros({width}, true); };
    auto zeros2 = [&](int r, int c) { return Tensor::zeros({r, c}, true); };
    auto gauss2 = [&](int r, int c) {
      std::vector<double> v(size_t(r) * size_t(c));
      for (auto& x : v) x = rng.normal(0.0, 0.02);
      return Tensor::from({r, c}, std::move(v), true);
    };
    for (int l = 0; l < layers; ++l) {
      switch (kind) {
        case Kind::offset:
          s.delta_attn.push_back(zeros1());
          s.delta_ffn.push_back(zeros1());
          break;
        case Kind::film:
          s.gamma_attn.push_back(zeros1());
          s.delta_attn.push_back(zeros1());
          s.gamma_ffn.push_back(zeros1());
          s.delta_ffn.push_back(zeros1());
          break;
        case Kind::linear:
          s.w_attn.push_back(zeros2(width, width));
          s.w_ffn.push_back(zeros2(width, width));
          break;
        case Kind::bottleneck:
          if (hidden <= 0) throw TensorError("dra: bottleneck hidden must be positive");
          s.w1_attn.push_back(gauss2(width, hidden));
          s.w2_attn.push_back(zeros2(hidden, width));
          s.w1_ffn.push_back(gauss2(width, hidden));
          s.w2_ffn.push_back(zeros2(hidden, width));
          break;
      }
    }
    return s;
  }

  Tensor apply(const Tensor& features, Branch branch, int layer) const {
    if (layer < 0 || layer >= layers) throw TensorError("dra: layer index out of range");
    bool attn = branch == Branch::attention;
    switch (kind) {
      case Kind::offset:
        return row_broadcast_add(features, attn ? delta_attn[size_t(layer)]
                                                : delta_ffn[size_t(layer)]);
      case Kind::film: {
        const Tensor& gamma = attn ? gamma_attn[size_t(layer)] : gamma_ffn[size_t(layer)];
        const Tensor& delta = attn ? delta_attn[size_t(layer)] : delta_ffn[size_t(layer)];
        Tensor ones = Tensor::from({width}, std::vector<double>(size_t(width), 1.0));
        return row_broadcast_add(row_broadcast_mul(features, add(ones, gamma)), delta);
      }
      case Kind::linear: {
        const Tensor& w = attn ? w_attn[size_t(layer)] : w_ffn[size_t(layer)];
        return add(features, matmul(features, w));
      }
      case Kind::bottleneck: {
        const Tensor& w1 = attn ? w1_attn[size_t(layer)] : w1_ffn[size_t(layer)];
        const Tensor& w2 = attn ? w2_attn[size_t(layer)] : w2_ffn[size_t(layer)];
        return add(features, matmul(gelu(matmul(features, w1)), w2));
      }
    }
    throw TensorError("dra: unknown adapter variant");
  }

  std::vector<std::pair<std::string, Tensor>> named_params() const {
    std::vector<std::pair<std::string, Tensor>> out;
    auto push = [&](const std::string& base, const std::vector<Tensor>& v) {
      for (size_t l = 0; l < v.size(); ++l)
        out.emplace_back("dra." + base + "." + std::to_string(l), v[l]);
    };
    push("delta_attn", delta_attn);
    push("delta_ffn", delta_ffn);
    push("gamma_attn", gamma_attn);
    push("gamma_ffn", gamma_ffn);
    push("w_attn", w_attn);
    push("w_ffn", w_ffn);
    push("w1_attn", w1_attn);
    push("w2_attn", w2_attn);
    push("w1_ffn", w1_ffn);
    push("w2_ffn", w2_ffn);
    return out;
  }

  int64_t param_count() const {
    int64_t n = 0;
    for (auto& [name, t] : named_params()) n += int64_t(t.size());
    return n;
  }
};

}  // namespace ett::dra
