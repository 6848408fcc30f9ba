#pragma once
// Synthetic episodic benchmark. Every class owns two sinusoid textures: a
// low-frequency base band and a high-frequency alternative band. A domain
// shift in [0, 1] blends the background from the base texture toward the
// inverted alternative texture, so identity-carrying structure migrates
// between frequency bands while staying class specific at every shift. The
// alternative texture sits on a neutral gray level and is windowed by a
// horizontal stripe whose position is drawn per image, so under a large
// shift the informative region moves from picture to picture and most of the
// canvas goes flat. The shift also applies a domain-wide photometric change,
// a contrast stretch about mid gray plus a fixed channel tint, the same for
// every class and image at a given shift. Each image also paints a Gaussian
// blob at a class-specific position (jittered per index, with per-index
// color and opacity so paint alone carries no identity), then adds pixel
// noise and a brightness jitter. Episode sampling draws the way, per-class
// shot counts, and disjoint support/query indices from a dedicated
// deterministic stream.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "ett/rng.hpp"
#include "ett/tensor.hpp"

namespace ett::data {

// stream tags keep the class, image, episode, and tuning draws independent
constexpr uint64_t kStreamClass = 0x636c6173;
constexpr uint64_t kStreamImage = 0x696d6167;
constexpr uint64_t kStreamEpisode = 0x65706973;

// novel class ids live far away from base ids so the two pools cannot collide
constexpr int64_t kNovelIdOffset = int64_t(1) << 20;

// photometric side of the domain shift: contrast about mid gray grows by this
// gain at full shift, and each channel picks up a fixed tint
constexpr double kContrastGain = 0.5;
constexpr double kTint[3] = {0.08, -0.05, 0.03};

struct SyntheticConfig {
  int image_size = 32;
  int channels = 3;
  int base_classes = 60;
  int novel_classes = 20;
  double noise_sd = 0.08;
  double blob_opacity = 0.85;
  double domain_shift = 0.0;
  uint64_t seed = 1234;
};

struct ClassParams {
  double freq_x[3], freq_y[3], phase_x[3], phase_y[3], amp[3], level[3];
  double alt_freq_x[3], alt_freq_y[3], alt_phase_x[3], alt_phase_y[3], alt_amp[3];
  double blob_x = 0.0, blob_y = 0.0, blob_r = 0.0;
};

// the blob as it lands in one image: class-positioned up to jitter, but with
// per-index color and opacity so paint alone cannot identify the class
struct BlobParams {
  double x = 0.0, y = 0.0, r = 0.0;
  double color[3] = {0.0, 0.0, 0.0};
  double opacity = 0.0;
};

class SyntheticDataset {
 public:
  explicit SyntheticDataset(SyntheticConfig cfg) : cfg_(cfg) {
    if (cfg_.image_size <= 0 || cfg_.channels != 3)
      throw TensorError("SyntheticDataset: needs three channels");
    if (cfg_.domain_shift < 0.0 || cfg_.domain_shift > 1.0)
      throw TensorError("SyntheticDataset: domain shift must be in [0, 1]");
  }

  const SyntheticConfig& config() const { return cfg_; }

  int pixels() const { return cfg_.channels * cfg_.image_size * cfg_.image_size; }

  std::vector<int64_t> base_ids() const {
    std::vector<int64_t> ids;
    for (int i = 0; i < cfg_.base_classes; ++i) ids.push_back(i);
    return ids;
  }

  std::vector<int64_t> novel_ids() const {
    std::vector<int64_t> ids;
    for (int i = 0; i < cfg_.novel_classes; ++i) ids.push_back(kNovelIdOffset + i);
    return ids;
  }

  // The base band carries a per-class mean level, so average color is an easy
  // cue when the shift is small. The alternative band sits on a neutral level
  // of one half, which makes that shortcut fade as the shift grows and leaves
  // only high-frequency structure to discriminate with at full shift.
  ClassParams class_params(int64_t class_id) const {
    Rng rng = Rng::stream(cfg_.seed, {kStreamClass, uint64_t(class_id)});
    ClassParams p;
    for (int c = 0; c < 3; ++c) {
      p.freq_x[c] = rng.uniform(1.0, 4.0);
      p.freq_y[c] = rng.uniform(1.0, 4.0);
      p.phase_x[c] = rng.uniform01();
      p.phase_y[c] = rng.uniform01();
      p.amp[c] = rng.uniform(0.2, 0.3);
      p.level[c] = rng.uniform(0.4, 0.6);
    }
    for (int c = 0; c < 3; ++c) {
      p.alt_freq_x[c] = rng.uniform(3.0, 6.0);
      p.alt_freq_y[c] = rng.uniform(3.0, 6.0);
      p.alt_phase_x[c] = rng.uniform01();
      p.alt_phase_y[c] = rng.uniform01();
      p.alt_amp[c] = rng.uniform(0.25, 0.35);
    }
    double lo = 0.25 * cfg_.image_size, hi = 0.75 * cfg_.image_size;
    p.blob_x = rng.uniform(lo, hi);
    p.blob_y = rng.uniform(lo, hi);
    p.blob_r = rng.uniform(3.0, 5.5);
    return p;
  }

  // same draws image() makes before its pixel loop, so tests can locate the
  // distractor without reverse-engineering pixels
  BlobParams blob_params(int64_t class_id, int64_t index) const {
    const ClassParams p = class_params(class_id);
    Rng rng = Rng::stream(cfg_.seed, {kStreamImage, uint64_t(class_id), uint64_t(index)});
    return draw_blob(p, rng);
  }

  // vertical center of the stripe that windows the alternative texture
  double band_center(int64_t class_id, int64_t index) const {
    const ClassParams p = class_params(class_id);
    Rng rng = Rng::stream(cfg_.seed, {kStreamImage, uint64_t(class_id), uint64_t(index)});
    draw_blob(p, rng);
    return draw_band(rng);
  }

  Tensor image(int64_t class_id, int64_t index) const {
    return image(class_id, index, cfg_.domain_shift);
  }

  // one image as a flat [1, channels * size * size] row, channel-major
  Tensor image(int64_t class_id, int64_t index, double shift) const {
    if (shift < 0.0 || shift > 1.0) throw TensorError("image: shift must be in [0, 1]");
    const ClassParams p = class_params(class_id);
    Rng rng = Rng::stream(cfg_.seed, {kStreamImage, uint64_t(class_id), uint64_t(index)});
    const BlobParams b = draw_blob(p, rng);
    const double band_y = draw_band(rng);
    const double brightness = rng.uniform(-0.05, 0.05);
    const int s = cfg_.image_size;
    std::vector<double> pix(size_t(pixels()), 0.0);
    const double two_pi = 2.0 * 3.14159265358979323846;
    const double inv2r2 = 1.0 / (2.0 * b.r * b.r);
    const double band_sigma = 0.25 * double(s);
    const double band_inv = 1.0 / (2.0 * band_sigma * band_sigma);
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < s; ++y)
        for (int x = 0; x < s; ++x) {
          double u = double(x) / double(s), v = double(y) / double(s);
          double base = p.level[c] + p.amp[c] * std::sin(two_pi * (p.freq_x[c] * u + p.phase_x[c])) *
                                         std::sin(two_pi * (p.freq_y[c] * v + p.phase_y[c]));
          double dy_band = double(y) - band_y;
          double env = std::exp(-dy_band * dy_band * band_inv);
          double alt = 0.5 + env * p.alt_amp[c] *
                                 std::sin(two_pi * (p.alt_freq_x[c] * u + p.alt_phase_x[c])) *
                                 std::sin(two_pi * (p.alt_freq_y[c] * v + p.alt_phase_y[c]));
          double bg = (1.0 - shift) * base + shift * (1.0 - alt);
          double dx = double(x) - b.x, dy = double(y) - b.y;
          double g = std::exp(-(dx * dx + dy * dy) * inv2r2) * b.opacity;
          double val = bg * (1.0 - g) + b.color[c] * g;
          val = 0.5 + (1.0 + kContrastGain * shift) * (val - 0.5) + shift * kTint[c];
          val += brightness + rng.normal(0.0, cfg_.noise_sd);
          if (val < 0.0) val = 0.0;
          if (val > 1.0) val = 1.0;
          pix[(size_t(c) * size_t(s) + size_t(y)) * size_t(s) + size_t(x)] = val;
        }
    return Tensor::from({1, pixels()}, std::move(pix));
  }

 private:
  BlobParams draw_blob(const ClassParams& p, Rng& rng) const {
    BlobParams b;
    b.x = p.blob_x + rng.uniform(-2.0, 2.0);
    b.y = p.blob_y + rng.uniform(-2.0, 2.0);
    b.r = p.blob_r;
    for (int c = 0; c < 3; ++c) b.color[c] = rng.uniform01();
    b.opacity = cfg_.blob_opacity * rng.uniform(0.6, 1.0);
    return b;
  }

  double draw_band(Rng& rng) const {
    return rng.uniform(0.3, 0.7) * double(cfg_.image_size);
  }

  SyntheticConfig cfg_;
};

struct EpisodeConfig {
  int min_way = 5;
  int max_way = 50;
  int max_shot = 10;
  int queries_per_class = 10;
};

struct Episode {
  int64_t id = 0;
  int way = 0;
  std::vector<int64_t> class_ids;       // dataset class id per canonical label
  std::vector<int> shots;               // support count per canonical label
  std::vector<Tensor> support;
  std::vector<int> support_labels;      // canonical labels 0..way-1
  std::vector<int64_t> support_indices;
  std::vector<Tensor> query;
  std::vector<int> query_labels;
  std::vector<int64_t> query_indices;
};

// structure of an episode before any image is generated
struct EpisodePlan {
  int64_t id = 0;
  int way = 0;
  std::vector<int64_t> class_ids;
  std::vector<int> shots;
  std::vector<int> support_labels;
  std::vector<int64_t> support_indices;
  std::vector<int> query_labels;
  std::vector<int64_t> query_indices;
};

// deterministic in (episode_seed, episode id); the image pool per class is
// indexed, support and query use distinct indices
inline EpisodePlan plan_episode(const SyntheticDataset& ds, const EpisodeConfig& ec,
                                uint64_t episode_seed, int64_t episode_id) {
  const auto pool = ds.novel_ids();
  if (pool.empty()) throw TensorError("plan_episode: empty novel pool");
  if (ec.min_way < 2 || ec.min_way > ec.max_way)
    throw TensorError("plan_episode: bad way range");
  Rng rng = Rng::stream(episode_seed, {kStreamEpisode, uint64_t(episode_id)});

  EpisodePlan ep;
  ep.id = episode_id;
  int way_cap = int(std::min<int64_t>(ec.max_way, int64_t(pool.size())));
  if (way_cap < ec.min_way) throw TensorError("plan_episode: pool smaller than min way");
  ep.way = int(rng.uniform_int(ec.min_way, way_cap));

  auto picks = rng.sample_without_replacement(0, int64_t(pool.size()) - 1, ep.way);
  for (int64_t i : picks) ep.class_ids.push_back(pool[size_t(i)]);

  for (int c = 0; c < ep.way; ++c) {
    int shots = int(rng.uniform_int(1, ec.max_shot));
    ep.shots.push_back(shots);
    auto idx = rng.sample_distinct_sparse(0, 999999, size_t(shots + ec.queries_per_class));
    for (int k = 0; k < shots; ++k) {
      ep.support_labels.push_back(c);
      ep.support_indices.push_back(idx[size_t(k)]);
    }
    for (int k = 0; k < ec.queries_per_class; ++k) {
      ep.query_labels.push_back(c);
      ep.query_indices.push_back(idx[size_t(shots + k)]);
    }
  }
  return ep;
}

inline Episode materialize(const SyntheticDataset& ds, const EpisodePlan& plan) {
  Episode ep;
  ep.id = plan.id;
  ep.way = plan.way;
  ep.class_ids = plan.class_ids;
  ep.shots = plan.shots;
  ep.support_labels = plan.support_labels;
  ep.support_indices = plan.support_indices;
  ep.query_labels = plan.query_labels;
  ep.query_indices = plan.query_indices;
  for (size_t i = 0; i < plan.support_indices.size(); ++i)
    ep.support.push_back(
        ds.image(plan.class_ids[size_t(plan.support_labels[i])], plan.support_indices[i]));
  for (size_t i = 0; i < plan.query_indices.size(); ++i)
    ep.query.push_back(
        ds.image(plan.class_ids[size_t(plan.query_labels[i])], plan.query_indices[i]));
  return ep;
}

inline Episode sample_episode(const SyntheticDataset& ds, const EpisodeConfig& ec,
                              uint64_t episode_seed, int64_t episode_id) {
  return materialize(ds, plan_episode(ds, ec, episode_seed, episode_id));
}

}  // namespace ett::data
