#pragma once
// Run configuration: one flat key=value document covering the backbone, the
// synthetic data worlds, pretraining, episode sampling, tuning, and run
// plumbing. Keys are dotted paths; unknown keys are rejected so typos fail
// loudly. format_config() emits the complete effective configuration in a
// canonical order and parse round-trips it.

#include <cctype>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "ett/backbone.hpp"
#include "ett/engine.hpp"
#include "ett/episodes.hpp"

namespace ett::cfg {

struct RunConfig {
  vit::ViTConfig backbone;          // desk-scale defaults
  data::SyntheticConfig dataset;    // the evaluation world; domain_shift lives here
  engine::PretrainConfig pretrain;  // includes shift_exposure
  // the pretraining world renders its distractor weaker than the evaluation
  // world, so test-time images carry a nuisance the frozen features never
  // fully absorbed
  double pretrain_blob_opacity = 0.42;
  data::EpisodeConfig episode;
  engine::TuneConfig tune;
  engine::Variant variant = engine::Variant::ett;
  int episodes = 100;
  uint64_t episode_seed = 0;
  int workers = 1;
  std::string out;         // output directory for results/config echo
  std::string checkpoint;  // backbone checkpoint path (pretrain writes, eval reads)
};

namespace detail {

inline std::string trim(const std::string& s) {
  size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return s.substr(a, b - a);
}

inline int to_int(const std::string& key, const std::string& v) {
  size_t pos = 0;
  int r = 0;
  try {
    r = std::stoi(v, &pos);
  } catch (...) {
    throw TensorError("config: key '" + key + "' wants an integer, got '" + v + "'");
  }
  if (pos != v.size())
    throw TensorError("config: key '" + key + "' wants an integer, got '" + v + "'");
  return r;
}

inline uint64_t to_u64(const std::string& key, const std::string& v) {
  size_t pos = 0;
  unsigned long long r = 0;
  try {
    r = std::stoull(v, &pos);
  } catch (...) {
    throw TensorError("config: key '" + key + "' wants an unsigned integer, got '" + v + "'");
  }
  if (pos != v.size())
    throw TensorError("config: key '" + key + "' wants an unsigned integer, got '" + v + "'");
  return uint64_t(r);
}

inline double to_double(const std::string& key, const std::string& v) {
  size_t pos = 0;
  double r = 0.0;
  try {
    r = std::stod(v, &pos);
  } catch (...) {
    throw TensorError("config: key '" + key + "' wants a number, got '" + v + "'");
  }
  if (pos != v.size()) throw TensorError("config: key '" + key + "' wants a number, got '" + v + "'");
  return r;
}

inline bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw TensorError("config: key '" + key + "' wants true/false, got '" + v + "'");
}

// doubles print round-trip exact; integers stay integers for readability
inline std::string num(double v) {
  if (v == static_cast<int64_t>(v) && std::abs(v) < 1e15) {
    std::ostringstream os;
    os << static_cast<int64_t>(v);
    return os.str();
  }
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace detail

// applies one key=value pair onto the config; throws on unknown keys or bad values
inline void set_key(RunConfig& rc, const std::string& key, const std::string& value) {
  using detail::to_bool;
  using detail::to_double;
  using detail::to_int;
  using detail::to_u64;
  if (key == "backbone.image_size") rc.backbone.image_size = to_int(key, value);
  else if (key == "backbone.patch") rc.backbone.patch_size = to_int(key, value);
  else if (key == "backbone.layers") rc.backbone.layers = to_int(key, value);
  else if (key == "backbone.heads") rc.backbone.heads = to_int(key, value);
  else if (key == "backbone.width") rc.backbone.width = to_int(key, value);
  else if (key == "backbone.ffn") rc.backbone.ffn_hidden = to_int(key, value);
  else if (key == "data.base_classes") rc.dataset.base_classes = to_int(key, value);
  else if (key == "data.novel_classes") rc.dataset.novel_classes = to_int(key, value);
  else if (key == "data.noise_sd") rc.dataset.noise_sd = to_double(key, value);
  else if (key == "data.blob_opacity") rc.dataset.blob_opacity = to_double(key, value);
  else if (key == "data.domain_shift") rc.dataset.domain_shift = to_double(key, value);
  else if (key == "data.seed") rc.dataset.seed = to_u64(key, value);
  else if (key == "pretrain.steps") rc.pretrain.steps = to_int(key, value);
  else if (key == "pretrain.batch") rc.pretrain.batch = to_int(key, value);
  else if (key == "pretrain.lr") rc.pretrain.lr = to_double(key, value);
  else if (key == "pretrain.weight_decay") rc.pretrain.weight_decay = to_double(key, value);
  else if (key == "pretrain.train_indices") rc.pretrain.train_indices = to_int(key, value);
  else if (key == "pretrain.val_images") rc.pretrain.val_images = to_int(key, value);
  else if (key == "pretrain.shift_exposure") rc.pretrain.shift_exposure = to_double(key, value);
  else if (key == "pretrain.blob_opacity") rc.pretrain_blob_opacity = to_double(key, value);
  else if (key == "pretrain.seed") rc.pretrain.seed = to_u64(key, value);
  else if (key == "episode.min_way") rc.episode.min_way = to_int(key, value);
  else if (key == "episode.max_way") rc.episode.max_way = to_int(key, value);
  else if (key == "episode.max_shot") rc.episode.max_shot = to_int(key, value);
  else if (key == "episode.queries") rc.episode.queries_per_class = to_int(key, value);
  else if (key == "eval.episodes") rc.episodes = to_int(key, value);
  else if (key == "eval.seed") rc.episode_seed = to_u64(key, value);
  else if (key == "eval.workers") rc.workers = to_int(key, value);
  else if (key == "tune.variant") rc.variant = engine::parse_variant(value);
  else if (key == "tune.steps") rc.tune.steps = to_int(key, value);
  else if (key == "tune.lr") rc.tune.lr = to_double(key, value);
  else if (key == "tune.weight_decay") rc.tune.weight_decay = to_double(key, value);
  else if (key == "tune.prefix_hidden") rc.tune.prefix_hidden = to_int(key, value);
  else if (key == "tune.proj_dim") rc.tune.proj_dim = to_int(key, value);
  else if (key == "tune.prefix_init") rc.tune.prefix_init = apt::parse_prefix_init(value);
  else if (key == "tune.adapter_kind") rc.tune.adapter_kind = dra::parse_kind(value);
  else if (key == "tune.adapter_hidden") rc.tune.adapter_hidden = to_int(key, value);
  else if (key == "tune.lambda") rc.tune.distill.lambda = to_double(key, value);
  else if (key == "tune.tau_teacher") rc.tune.distill.tau_teacher = to_double(key, value);
  else if (key == "tune.tau_student") rc.tune.distill.tau_student = to_double(key, value);
  else if (key == "tune.center_momentum") rc.tune.distill.center_momentum = to_double(key, value);
  else if (key == "tune.standardize") rc.tune.distill.standardize = to_bool(key, value);
  else if (key == "tune.use_pr") rc.tune.use_pr = to_bool(key, value);
  else if (key == "tune.inject_at_eval") rc.tune.inject_at_eval = to_bool(key, value);
  else if (key == "tune.seed") rc.tune.seed = to_u64(key, value);
  else if (key == "run.out") rc.out = value;
  else if (key == "run.checkpoint") rc.checkpoint = value;
  else throw TensorError("config: unknown key '" + key + "'");
}

// parses `key = value` lines; '#' starts a comment; blank lines skipped
inline void apply_config_text(RunConfig& rc, const std::string& text, const std::string& origin) {
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    lineno += 1;
    auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    auto eq = line.find('=');
    if (eq == std::string::npos)
      throw TensorError("config: " + origin + ":" + std::to_string(lineno) +
                        ": expected key=value, got '" + line + "'");
    std::string key = detail::trim(line.substr(0, eq));
    std::string value = detail::trim(line.substr(eq + 1));
    if (key.empty())
      throw TensorError("config: " + origin + ":" + std::to_string(lineno) + ": empty key");
    set_key(rc, key, value);
  }
}

inline void apply_config_file(RunConfig& rc, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw TensorError("config: cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  apply_config_text(rc, ss.str(), path);
}

// sanity checks that catch bad combinations before any compute is spent
inline void validate(const RunConfig& rc) {
  const auto& bc = rc.backbone;
  if (bc.image_size <= 0 || bc.patch_size <= 0 || bc.image_size % bc.patch_size != 0)
    throw TensorError("config: image size must be a positive multiple of the patch size");
  if (bc.width <= 0 || bc.heads <= 0 || bc.width % bc.heads != 0)
    throw TensorError("config: width must be a positive multiple of heads");
  if (bc.layers <= 0 || bc.ffn_hidden <= 0) throw TensorError("config: layers and ffn must be positive");
  if (bc.image_size != rc.dataset.image_size || bc.channels != rc.dataset.channels)
    throw TensorError("config: backbone image size must match the generated images");
  if (rc.dataset.base_classes < 1 || rc.dataset.novel_classes < 2)
    throw TensorError("config: need at least one base and two novel classes");
  if (rc.dataset.domain_shift < 0.0 || rc.dataset.domain_shift > 1.0)
    throw TensorError("config: data.domain_shift must be in [0, 1]");
  if (rc.pretrain_blob_opacity < 0.0 || rc.pretrain_blob_opacity > 1.0)
    throw TensorError("config: pretrain.blob_opacity must be in [0, 1]");
  if (rc.pretrain.shift_exposure < 0.0 || rc.pretrain.shift_exposure > 1.0)
    throw TensorError("config: pretrain.shift_exposure must be in [0, 1]");
  if (rc.pretrain.steps < 0 || rc.pretrain.batch < 1)
    throw TensorError("config: pretrain steps/batch out of range");
  if (rc.episode.min_way < 2 || rc.episode.max_way < rc.episode.min_way)
    throw TensorError("config: episode way range is invalid");
  if (rc.episode.max_shot < 1 || rc.episode.queries_per_class < 1)
    throw TensorError("config: episode shots/queries out of range");
  if (rc.episodes < 1) throw TensorError("config: eval.episodes must be positive");
  if (rc.workers < 1) throw TensorError("config: eval.workers must be positive");
  if (rc.tune.steps < 0) throw TensorError("config: tune.steps must be nonnegative");
  if (rc.tune.lr <= 0.0) throw TensorError("config: tune.lr must be positive");
  if (rc.tune.distill.lambda < 0.0) throw TensorError("config: tune.lambda must be nonnegative");
  if (rc.tune.distill.tau_teacher <= 0.0 || rc.tune.distill.tau_student <= 0.0)
    throw TensorError("config: temperatures must be positive");
  if (rc.tune.distill.center_momentum < 0.0 || rc.tune.distill.center_momentum >= 1.0)
    throw TensorError("config: tune.center_momentum must be in [0, 1)");
}

// the complete effective configuration, canonical order, parseable back
inline std::string format_config(const RunConfig& rc) {
  using detail::num;
  std::ostringstream os;
  os << "# effective configuration\n";
  os << "backbone.image_size = " << rc.backbone.image_size << "\n";
  os << "backbone.patch = " << rc.backbone.patch_size << "\n";
  os << "backbone.layers = " << rc.backbone.layers << "\n";
  os << "backbone.heads = " << rc.backbone.heads << "\n";
  os << "backbone.width = " << rc.backbone.width << "\n";
  os << "backbone.ffn = " << rc.backbone.ffn_hidden << "\n";
  os << "data.base_classes = " << rc.dataset.base_classes << "\n";
  os << "data.novel_classes = " << rc.dataset.novel_classes << "\n";
  os << "data.noise_sd = " << num(rc.dataset.noise_sd) << "\n";
  os << "data.blob_opacity = " << num(rc.dataset.blob_opacity) << "\n";
  os << "data.domain_shift = " << num(rc.dataset.domain_shift) << "\n";
  os << "data.seed = " << rc.dataset.seed << "\n";
  os << "pretrain.steps = " << rc.pretrain.steps << "\n";
  os << "pretrain.batch = " << rc.pretrain.batch << "\n";
  os << "pretrain.lr = " << num(rc.pretrain.lr) << "\n";
  os << "pretrain.weight_decay = " << num(rc.pretrain.weight_decay) << "\n";
  os << "pretrain.train_indices = " << rc.pretrain.train_indices << "\n";
  os << "pretrain.val_images = " << rc.pretrain.val_images << "\n";
  os << "pretrain.shift_exposure = " << num(rc.pretrain.shift_exposure) << "\n";
  os << "pretrain.blob_opacity = " << num(rc.pretrain_blob_opacity) << "\n";
  os << "pretrain.seed = " << rc.pretrain.seed << "\n";
  os << "episode.min_way = " << rc.episode.min_way << "\n";
  os << "episode.max_way = " << rc.episode.max_way << "\n";
  os << "episode.max_shot = " << rc.episode.max_shot << "\n";
  os << "episode.queries = " << rc.episode.queries_per_class << "\n";
  os << "eval.episodes = " << rc.episodes << "\n";
  os << "eval.seed = " << rc.episode_seed << "\n";
  os << "eval.workers = " << rc.workers << "\n";
  os << "tune.variant = " << engine::variant_name(rc.variant) << "\n";
  os << "tune.steps = " << rc.tune.steps << "\n";
  os << "tune.lr = " << num(rc.tune.lr) << "\n";
  os << "tune.weight_decay = " << num(rc.tune.weight_decay) << "\n";
  os << "tune.prefix_hidden = " << rc.tune.prefix_hidden << "\n";
  os << "tune.proj_dim = " << rc.tune.proj_dim << "\n";
  os << "tune.prefix_init = " << apt::prefix_init_name(rc.tune.prefix_init) << "\n";
  os << "tune.adapter_kind = " << dra::kind_name(rc.tune.adapter_kind) << "\n";
  os << "tune.adapter_hidden = " << rc.tune.adapter_hidden << "\n";
  os << "tune.lambda = " << num(rc.tune.distill.lambda) << "\n";
  os << "tune.tau_teacher = " << num(rc.tune.distill.tau_teacher) << "\n";
  os << "tune.tau_student = " << num(rc.tune.distill.tau_student) << "\n";
  os << "tune.center_momentum = " << num(rc.tune.distill.center_momentum) << "\n";
  os << "tune.standardize = " << (rc.tune.distill.standardize ? "true" : "false") << "\n";
  os << "tune.use_pr = " << (rc.tune.use_pr ? "true" : "false") << "\n";
  os << "tune.inject_at_eval = " << (rc.tune.inject_at_eval ? "true" : "false") << "\n";
  os << "tune.seed = " << rc.tune.seed << "\n";
  os << "run.out = " << rc.out << "\n";
  os << "run.checkpoint = " << rc.checkpoint << "\n";
  return os.str();
}

// the dataset the backbone pretrains on: same world, no domain shift, weaker
// distractor
inline data::SyntheticDataset pretrain_dataset(const RunConfig& rc) {
  data::SyntheticConfig dc = rc.dataset;
  dc.domain_shift = 0.0;
  dc.blob_opacity = rc.pretrain_blob_opacity;
  return data::SyntheticDataset(dc);
}

}  // namespace ett::cfg
