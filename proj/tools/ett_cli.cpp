// Command-line surface for the ett library: gradient verification, toy
// pretraining, episodic evaluation, ablation grids, and embedding export.
//
// Every command is deterministic under a fixed configuration: result files
// contain no timestamps and rerunning a command reproduces them byte for
// byte. Exit codes: 0 success, 1 verification failure, 2 usage or IO error.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "ett/checkpoint.hpp"
#include "ett/config.hpp"
#include "ett/engine.hpp"
#include "ett/grad_check.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace ett;

namespace {

// flags shared by all commands; presence decides whether they override the
// config file (precedence: flag > file > default)
struct CommonFlags {
  std::string config_path;
  uint64_t seed = 0;
  int episodes = 0;
  std::string variant;
  int workers = 0;
  std::string out;
  double domain_shift = 0.0;
  CLI::Option* seed_opt = nullptr;
  CLI::Option* episodes_opt = nullptr;
  CLI::Option* variant_opt = nullptr;
  CLI::Option* workers_opt = nullptr;
  CLI::Option* out_opt = nullptr;
  CLI::Option* shift_opt = nullptr;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--config", f.config_path, "key=value configuration file");
  f.seed_opt = cmd->add_option("--seed", f.seed,
                               "master seed (sets pretrain, episode stream, and tuning seeds)");
  f.episodes_opt = cmd->add_option("--episodes", f.episodes, "episode count");
  f.variant_opt = cmd->add_option("--variant", f.variant,
                                  "proto|ltncc|last|first|ln|apt|adapter|ett|full_ft");
  f.workers_opt = cmd->add_option("--workers", f.workers, "worker threads (1 = serial)");
  f.out_opt = cmd->add_option("--out", f.out, "output directory (must exist)");
  f.shift_opt = cmd->add_option("--domain-shift", f.domain_shift, "domain shift in [0, 1]");
}

// defaults, then file, then flags
cfg::RunConfig resolve(const CommonFlags& f) {
  cfg::RunConfig rc;
  if (!f.config_path.empty()) cfg::apply_config_file(rc, f.config_path);
  if (f.seed_opt && f.seed_opt->count() > 0) {
    rc.pretrain.seed = f.seed;
    rc.episode_seed = f.seed;
    rc.tune.seed = f.seed;
  }
  if (f.episodes_opt && f.episodes_opt->count() > 0) rc.episodes = f.episodes;
  if (f.variant_opt && f.variant_opt->count() > 0) rc.variant = engine::parse_variant(f.variant);
  if (f.workers_opt && f.workers_opt->count() > 0) rc.workers = f.workers;
  if (f.out_opt && f.out_opt->count() > 0) rc.out = f.out;
  if (f.shift_opt && f.shift_opt->count() > 0) rc.dataset.domain_shift = f.domain_shift;
  cfg::validate(rc);
  return rc;
}

// out dir must already exist; writes the effective config next to the results
void require_out_dir(const cfg::RunConfig& rc) {
  if (rc.out.empty()) throw TensorError("usage: --out (or run.out) is required");
  if (!fs::is_directory(rc.out))
    throw TensorError("output directory does not exist: " + rc.out);
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw TensorError("cannot write " + path.string());
  out << text;
}

void echo_config(const cfg::RunConfig& rc) {
  write_text(fs::path(rc.out) / "config.txt", cfg::format_config(rc));
}

json episode_record(const engine::EpisodeOutcome& o, uint64_t episode_seed) {
  json rec;
  rec["episode_id"] = o.episode_id;
  rec["way"] = o.way;
  rec["shots"] = o.shots;
  rec["acc_support"] = o.acc_support;
  rec["acc_query"] = o.acc_query;
  rec["steps"] = o.steps;
  rec["params_trainable"] = o.params_trainable;
  rec["seed"] = episode_seed;
  return rec;
}

json summary_record(const engine::VariantSummary& s) {
  json rec;
  rec["variant"] = engine::variant_name(s.variant);
  rec["mean_acc"] = s.mean_acc;
  rec["ci95"] = s.ci95;
  rec["episodes"] = s.episodes;
  return rec;
}

// empty checkpoint path falls back to the file pretrain writes under out/
vit::Backbone load_backbone(cfg::RunConfig& rc) {
  if (rc.checkpoint.empty()) rc.checkpoint = (fs::path(rc.out) / "backbone.ntc").string();
  return vit::Backbone::from_checkpoint(io::Checkpoint::load(rc.checkpoint));
}

// ---- gradcheck ----

// micro instance: 3-way, 2-shot support drawn from a small synthetic world,
// full ett state (prefix, its expander, adapters, head transform, projector)
int cmd_gradcheck(const cfg::RunConfig& rc, bool inject_backward_fault) {
  vit::ViTConfig vc;
  vc.image_size = 16;
  vc.patch_size = 8;
  vc.layers = 2;
  vc.heads = 2;
  vc.width = 8;
  vc.ffn_hidden = 16;

  data::SyntheticConfig dc;
  dc.image_size = 16;
  dc.base_classes = 4;
  dc.novel_classes = 4;
  dc.seed = rc.dataset.seed;

  data::SyntheticDataset ds(dc);
  data::Episode ep;
  ep.id = 1;
  ep.way = 3;
  const auto pool = ds.novel_ids();
  for (int c = 0; c < ep.way; ++c) {
    ep.class_ids.push_back(pool[size_t(c)]);
    ep.shots.push_back(2);
    for (int k = 0; k < 2; ++k) {
      ep.support.push_back(ds.image(pool[size_t(c)], k));
      ep.support_labels.push_back(c);
      ep.support_indices.push_back(k);
    }
  }

  Rng rng(rc.pretrain.seed + 17);
  vit::Backbone bb = vit::Backbone::init(vc, rng);

  engine::TuneConfig tc = rc.tune;
  tc.prefix_hidden = 4;
  tc.proj_dim = 4;
  tc.adapter_kind = dra::Kind::offset;
  engine::TuningState st = engine::init_state(bb, ep, engine::Variant::ett, tc);

  Tensor teacher;
  {
    Tape::Pause pause;
    teacher = st.distiller->teacher(false);
  }

  auto loss_fn = [&]() -> Tensor {
    Tensor total = engine::step_loss(bb, st, &teacher).total;
    if (inject_backward_fault) {
      // value depends on phi but contributes nothing to the tape: a broken
      // backward rule the finite-difference oracle must catch
      double phi_sq = 0.0;
      {
        Tape::Pause pause;
        for (size_t i = 0; i < st.phi.w.size(); ++i)
          phi_sq += st.phi.w.data()[i] * st.phi.w.data()[i];
      }
      total = add(total, Tensor::from({1}, {0.01 * phi_sq}));
    }
    return total;
  };

  auto t0 = std::chrono::steady_clock::now();
  GradCheckReport report = grad_check(loss_fn, st.trainables);
  auto dt = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  const double tol = 1e-4;
  std::printf("%-16s %10s %14s  %s\n", "tensor", "elements", "max_rel_err", "status");
  std::string worst;
  double worst_err = -1.0;
  for (size_t i = 0; i < report.entries.size(); ++i) {
    const auto& e = report.entries[i];
    size_t elems = st.trainables[i].second.size();
    std::printf("%-16s %10zu %14.3e  %s\n", e.name.c_str(), elems, e.max_rel_err,
                e.max_rel_err < tol ? "ok" : "FAIL");
    if (e.max_rel_err > worst_err) {
      worst_err = e.max_rel_err;
      worst = e.name;
    }
  }
  std::printf("max relative error %.3e over %zu tensors (%.1fs)\n", report.max_rel_err,
              report.entries.size(), dt);
  if (!report.passed(tol)) {
    std::printf("FAIL: worst offender %s at %.3e\n", worst.c_str(), worst_err);
    return 1;
  }
  std::printf("PASS: all gradients within %.0e\n", tol);
  return 0;
}

// ---- pretrain ----

int cmd_pretrain(const cfg::RunConfig& rc_in) {
  cfg::RunConfig rc = rc_in;
  require_out_dir(rc);
  if (rc.checkpoint.empty()) rc.checkpoint = (fs::path(rc.out) / "backbone.ntc").string();

  data::SyntheticDataset ds = cfg::pretrain_dataset(rc);
  Rng rng(rc.pretrain.seed);
  vit::Backbone bb = vit::Backbone::init(rc.backbone, rng);

  auto t0 = std::chrono::steady_clock::now();
  engine::PretrainResult pr = engine::pretrain_toy(bb, ds, rc.pretrain);
  auto dt = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  bb.to_checkpoint().save(rc.checkpoint);
  echo_config(rc);

  json rec;
  rec["steps"] = rc.pretrain.steps;
  rec["first_loss"] = pr.first_loss;
  rec["final_loss"] = pr.final_loss;
  rec["val_acc"] = pr.val_acc;
  write_text(fs::path(rc.out) / "pretrain.json", rec.dump() + "\n");

  std::fprintf(stderr, "pretrain: %d steps in %.1fs, loss %.4f -> %.4f, val acc %.3f\n",
               rc.pretrain.steps, dt, pr.first_loss, pr.final_loss, pr.val_acc);
  std::printf("%s\n", rc.checkpoint.c_str());
  return 0;
}

// ---- eval ----

int cmd_eval(const cfg::RunConfig& rc_in) {
  cfg::RunConfig rc = rc_in;
  require_out_dir(rc);
  vit::Backbone bb = load_backbone(rc);
  data::SyntheticDataset ds(rc.dataset);
  if (ds.pixels() != bb.cfg.pixels())
    throw TensorError("eval: dataset pixels do not match the checkpoint backbone");

  engine::EvalConfig ec;
  ec.variants = {rc.variant};
  ec.episodes = rc.episodes;
  ec.episode_seed = rc.episode_seed;
  ec.episode = rc.episode;
  ec.tune = rc.tune;
  ec.workers = rc.workers;

  auto t0 = std::chrono::steady_clock::now();
  engine::EvalResult res = engine::evaluate(bb, ds, ec);
  auto dt = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  std::ostringstream lines;
  for (const auto& o : res.outcomes[0])
    lines << episode_record(o, rc.episode_seed).dump() << "\n";
  lines << summary_record(res.summaries[0]).dump() << "\n";
  write_text(fs::path(rc.out) / "results.jsonl", lines.str());
  echo_config(rc);

  std::fprintf(stderr, "eval: %d episodes in %.1fs\n", rc.episodes, dt);
  std::printf("%s\n", summary_record(res.summaries[0]).dump().c_str());
  return 0;
}

// ---- ablate ----

struct GridAxis {
  std::string key;  // variant | init | adapter
  std::vector<std::string> values;
};

GridAxis parse_axis(const std::string& s) {
  auto eq = s.find('=');
  if (eq == std::string::npos)
    throw TensorError("ablate: --grid wants key=v1,v2,... got '" + s + "'");
  GridAxis ax;
  ax.key = s.substr(0, eq);
  if (ax.key != "variant" && ax.key != "init" && ax.key != "adapter")
    throw TensorError("ablate: unknown grid axis '" + ax.key + "'");
  std::string rest = s.substr(eq + 1);
  std::istringstream in(rest);
  std::string item;
  while (std::getline(in, item, ',')) {
    if (!item.empty()) ax.values.push_back(item);
  }
  if (ax.values.empty()) throw TensorError("ablate: grid axis '" + ax.key + "' is empty");
  return ax;
}

int cmd_ablate(const cfg::RunConfig& rc_in, const std::vector<std::string>& grid_specs) {
  cfg::RunConfig rc = rc_in;
  require_out_dir(rc);
  if (grid_specs.empty()) throw TensorError("ablate: at least one --grid axis is required");
  std::vector<GridAxis> axes;
  for (const auto& s : grid_specs) axes.push_back(parse_axis(s));

  vit::Backbone bb = load_backbone(rc);
  data::SyntheticDataset ds(rc.dataset);
  if (ds.pixels() != bb.cfg.pixels())
    throw TensorError("ablate: dataset pixels do not match the checkpoint backbone");

  // enumerate the cross product in row-major order over the axes
  std::vector<size_t> idx(axes.size(), 0);
  std::ostringstream lines;
  int cells = 0;
  for (;;) {
    cfg::RunConfig cell = rc;
    json cell_tag;
    for (size_t a = 0; a < axes.size(); ++a) {
      const std::string& v = axes[a].values[idx[a]];
      if (axes[a].key == "variant") cell.variant = engine::parse_variant(v);
      else if (axes[a].key == "init") cell.tune.prefix_init = apt::parse_prefix_init(v);
      else cell.tune.adapter_kind = dra::parse_kind(v);
      cell_tag[axes[a].key] = v;
    }

    engine::EvalConfig ec;
    ec.variants = {cell.variant};
    ec.episodes = cell.episodes;
    ec.episode_seed = cell.episode_seed;  // same episode stream in every cell
    ec.episode = cell.episode;
    ec.tune = cell.tune;
    ec.workers = cell.workers;
    engine::EvalResult res = engine::evaluate(bb, ds, ec);

    json rec = summary_record(res.summaries[0]);
    rec["cell"] = cell_tag;
    lines << rec.dump() << "\n";
    std::printf("%s\n", rec.dump().c_str());
    cells += 1;

    size_t a = 0;
    for (; a < axes.size(); ++a) {
      idx[a] += 1;
      if (idx[a] < axes[a].values.size()) break;
      idx[a] = 0;
    }
    if (a == axes.size()) break;
  }

  write_text(fs::path(rc.out) / "ablate.jsonl", lines.str());
  echo_config(rc);
  std::fprintf(stderr, "ablate: %d cells of %d episodes\n", cells, rc.episodes);
  return 0;
}

// ---- dump-episodes ----

// per-episode query embeddings before and after tuning, for external figures
int cmd_dump_episodes(const cfg::RunConfig& rc_in) {
  cfg::RunConfig rc = rc_in;
  require_out_dir(rc);
  vit::Backbone bb = load_backbone(rc);
  data::SyntheticDataset ds(rc.dataset);
  if (ds.pixels() != bb.cfg.pixels())
    throw TensorError("dump-episodes: dataset pixels do not match the checkpoint backbone");

  engine::EvalConfig ec;
  ec.variants = {rc.variant};
  ec.episodes = rc.episodes;
  ec.episode_seed = rc.episode_seed;
  ec.episode = rc.episode;
  ec.tune = rc.tune;
  ec.tune.want_features = true;
  ec.workers = rc.workers;
  engine::EvalResult res = engine::evaluate(bb, ds, ec);

  io::Checkpoint ck;
  ck.put("meta.episodes", Tensor::from({1}, {double(rc.episodes)}));
  for (const auto& o : res.outcomes[0]) {
    std::string base = "ep" + std::to_string(o.episode_id) + ".";
    ck.put(base + "pre", o.query_features_clean);
    ck.put(base + "post", o.query_features);
    data::EpisodePlan plan = data::plan_episode(ds, rc.episode, rc.episode_seed, o.episode_id);
    std::vector<double> labels(plan.query_labels.begin(), plan.query_labels.end());
    const int n_labels = int(labels.size());
    ck.put(base + "labels", Tensor::from({n_labels}, std::move(labels)));
  }
  std::string path = (fs::path(rc.out) / "embeddings.ntc").string();
  ck.save(path);
  echo_config(rc);
  std::printf("%s\n", path.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ett: efficient transformer tuning for few-shot episodic classification"};
  app.require_subcommand(1);

  CommonFlags fg, fp, fe, fa, fd;
  bool inject_fault = false;
  std::vector<std::string> grid_specs;

  CLI::App* gradcheck = app.add_subcommand(
      "gradcheck", "verify analytic gradients against finite differences on a micro setup");
  add_common(gradcheck, fg);
  gradcheck
      ->add_flag("--inject-backward-fault", inject_fault,
                 "corrupt one backward rule; the check must then fail")
      ->group("");  // hidden test fixture

  CLI::App* pretrain =
      app.add_subcommand("pretrain", "train the backbone on the base classes, save a checkpoint");
  add_common(pretrain, fp);

  CLI::App* eval = app.add_subcommand("eval", "tune and score episodes with one variant");
  add_common(eval, fe);

  CLI::App* ablate = app.add_subcommand("ablate", "evaluate a grid of cells on shared episodes");
  add_common(ablate, fa);
  ablate->add_option("--grid", grid_specs,
                     "axis as key=v1,v2,... (variant|init|adapter); repeatable");

  CLI::App* dump =
      app.add_subcommand("dump-episodes", "export pre and post tuning query embeddings");
  add_common(dump, fd);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (gradcheck->parsed()) return cmd_gradcheck(resolve(fg), inject_fault);
    if (pretrain->parsed()) return cmd_pretrain(resolve(fp));
    if (eval->parsed()) return cmd_eval(resolve(fe));
    if (ablate->parsed()) return cmd_ablate(resolve(fa), grid_specs);
    if (dump->parsed()) return cmd_dump_episodes(resolve(fd));
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 2;
}
