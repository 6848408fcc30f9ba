// End-to-end checks of the command-line tool: exit codes, per-parameter
// gradient table, checkpoint determinism, record and summary structure,
// config precedence and round-trip, ablation grids, and embedding export.
// The binary path comes from the ETT_CLI_PATH compile definition.

#include <sys/wait.h>

#include <catch2/catch_amalgamated.hpp>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "ett/backbone.hpp"
#include "ett/checkpoint.hpp"

namespace fs = std::filesystem;

namespace {

struct CmdResult {
  int code = -1;
  std::string output;
};

std::string cli_path() {
  const char* env = std::getenv("ETT_CLI");
  if (env && *env) return env;
  return ETT_CLI_PATH;
}

fs::path scratch_root() {
  static fs::path root = [] {
    fs::path p = fs::temp_directory_path() / "ett_cli_tests";
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
  }();
  return root;
}

fs::path fresh_dir(const std::string& name) {
  fs::path p = scratch_root() / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

CmdResult run_cli(const std::string& args) {
  fs::path log = scratch_root() / "last_output.txt";
  std::string cmd = cli_path() + " " + args + " > " + log.string() + " 2>&1";
  int raw = std::system(cmd.c_str());
  CmdResult r;
  r.code = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  std::ifstream in(log);
  std::ostringstream ss;
  ss << in.rdbuf();
  r.output = ss.str();
  return r;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::string> lines_of(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) out.push_back(line);
  return out;
}

// tiny configuration: everything small enough that the whole file runs in
// seconds, while still exercising pretraining and all tuned variants
std::string tiny_config(const fs::path& out) {
  std::ostringstream ss;
  ss << "pretrain.steps = 30\n";
  ss << "pretrain.batch = 8\n";
  ss << "data.base_classes = 6\n";
  ss << "data.novel_classes = 6\n";
  ss << "eval.episodes = 5\n";
  ss << "episode.min_way = 3\n";
  ss << "episode.max_way = 4\n";
  ss << "episode.max_shot = 3\n";
  ss << "episode.queries = 4\n";
  ss << "tune.steps = 3\n";
  ss << "run.out = " << out.string() << "\n";
  return ss.str();
}

fs::path write_config(const fs::path& dir, const std::string& text) {
  fs::path p = dir / "run.cfg";
  std::ofstream out(p);
  out << text;
  return p;
}

// shared pretrained checkpoint for the eval-family tests
const fs::path& shared_run() {
  static fs::path dir = [] {
    fs::path d = fresh_dir("shared");
    fs::path cfg = write_config(d, tiny_config(d));
    CmdResult r = run_cli("pretrain --config " + cfg.string());
    REQUIRE(r.code == 0);
    return d;
  }();
  return dir;
}

double json_number(const std::string& line, const std::string& key) {
  auto pos = line.find("\"" + key + "\":");
  REQUIRE(pos != std::string::npos);
  pos += key.size() + 3;
  return std::stod(line.substr(pos));
}

}  // namespace

TEST_CASE("gradcheck passes and names every trainable exactly once", "[cli]") {
  CmdResult r = run_cli("gradcheck");
  INFO(r.output);
  REQUIRE(r.code == 0);
  REQUIRE(r.output.find("PASS") != std::string::npos);

  // offset-adapter ett on a two-layer backbone: exactly these tensors
  std::vector<std::string> expected = {"phi.w",           "prefix",
                                       "g.w1",            "g.w2",
                                       "psi.w",           "dra.delta_attn.0",
                                       "dra.delta_attn.1", "dra.delta_ffn.0",
                                       "dra.delta_ffn.1"};
  for (const auto& name : expected) {
    size_t count = 0, pos = 0;
    while ((pos = r.output.find(name + " ", pos)) != std::string::npos) {
      count += 1;
      pos += name.size();
    }
    INFO("tensor " << name);
    REQUIRE(count == 1);
  }
}

TEST_CASE("gradcheck catches a corrupted backward rule", "[cli]") {
  CmdResult r = run_cli("gradcheck --inject-backward-fault");
  INFO(r.output);
  REQUIRE(r.code == 1);
  REQUIRE(r.output.find("worst offender") != std::string::npos);
}

TEST_CASE("pretrain is byte-deterministic and the checkpoint round-trips", "[cli]") {
  fs::path d1 = fresh_dir("pre1");
  fs::path d2 = fresh_dir("pre2");
  fs::path c1 = write_config(d1, tiny_config(d1));
  fs::path c2 = write_config(d2, tiny_config(d2));

  CmdResult r1 = run_cli("pretrain --config " + c1.string());
  INFO(r1.output);
  REQUIRE(r1.code == 0);
  // the checkpoint path lands on stdout
  REQUIRE(r1.output.find((d1 / "backbone.ntc").string()) != std::string::npos);

  CmdResult r2 = run_cli("pretrain --config " + c2.string());
  REQUIRE(r2.code == 0);
  REQUIRE(read_file(d1 / "backbone.ntc") == read_file(d2 / "backbone.ntc"));

  // loads back with bit-exact tensors: reserializing reproduces the file
  auto ck = ett::io::Checkpoint::load((d1 / "backbone.ntc").string());
  ett::vit::Backbone bb = ett::vit::Backbone::from_checkpoint(ck);
  REQUIRE(bb.to_checkpoint().serialize() == read_file(d1 / "backbone.ntc"));
}

TEST_CASE("pretrain without an existing output directory exits 2", "[cli]") {
  fs::path d = fresh_dir("pre3");
  fs::path missing = scratch_root() / "does_not_exist";
  fs::remove_all(missing);
  std::string cfg_text = tiny_config(missing);
  fs::path cfg = write_config(d, cfg_text);
  CmdResult r = run_cli("pretrain --config " + cfg.string());
  INFO(r.output);
  REQUIRE(r.code == 2);
}

TEST_CASE("eval writes one record per episode plus a summary", "[cli]") {
  const fs::path& d = shared_run();
  fs::path cfg = d / "run.cfg";
  CmdResult r = run_cli("eval --config " + cfg.string() + " --variant ett");
  INFO(r.output);
  REQUIRE(r.code == 0);

  auto lines = lines_of(read_file(d / "results.jsonl"));
  REQUIRE(lines.size() == 6);  // 5 episodes + summary
  double lo = 1.0, hi = 0.0;
  for (size_t i = 0; i < 5; ++i) {
    const std::string& rec = lines[i];
    REQUIRE(rec.find("\"episode_id\":" + std::to_string(i)) != std::string::npos);
    for (const char* key : {"way", "shots", "acc_support", "acc_query", "steps",
                            "params_trainable", "seed"})
      REQUIRE(rec.find(std::string("\"") + key + "\":") != std::string::npos);
    double acc = json_number(rec, "acc_query");
    lo = std::min(lo, acc);
    hi = std::max(hi, acc);
  }
  const std::string& summary = lines[5];
  REQUIRE(summary.find("\"variant\":\"ett\"") != std::string::npos);
  REQUIRE(summary.find("\"episodes\":5") != std::string::npos);
  double mean = json_number(summary, "mean_acc");
  REQUIRE(mean >= lo);
  REQUIRE(mean <= hi);
}

TEST_CASE("proto variant runs zero optimization steps", "[cli]") {
  const fs::path& d = shared_run();
  CmdResult r = run_cli("eval --config " + (d / "run.cfg").string() + " --variant proto");
  REQUIRE(r.code == 0);
  auto lines = lines_of(read_file(d / "results.jsonl"));
  for (size_t i = 0; i + 1 < lines.size(); ++i)
    REQUIRE(lines[i].find("\"steps\":0") != std::string::npos);
}

TEST_CASE("eval reruns are byte-identical and workers do not change results", "[cli]") {
  const fs::path& d = shared_run();
  std::string base = "eval --config " + (d / "run.cfg").string() + " --variant ett";
  REQUIRE(run_cli(base).code == 0);
  std::string first = read_file(d / "results.jsonl");
  REQUIRE(run_cli(base).code == 0);
  REQUIRE(read_file(d / "results.jsonl") == first);
  REQUIRE(run_cli(base + " --workers 2").code == 0);
  REQUIRE(read_file(d / "results.jsonl") == first);
}

TEST_CASE("the echoed config reproduces the run it came from", "[cli]") {
  const fs::path& d = shared_run();
  REQUIRE(run_cli("eval --config " + (d / "run.cfg").string() + " --variant ltncc").code == 0);
  std::string first = read_file(d / "results.jsonl");

  // the echoed config pins run.checkpoint to the original file, so only the
  // output directory moves
  fs::path d2 = fresh_dir("echo2");
  CmdResult r = run_cli("eval --config " + (d / "config.txt").string() + " --out " + d2.string());
  INFO(r.output);
  REQUIRE(r.code == 0);
  REQUIRE(read_file(d2 / "results.jsonl") == first);
}

TEST_CASE("flags override config file values", "[cli]") {
  const fs::path& d = shared_run();
  CmdResult r = run_cli("eval --config " + (d / "run.cfg").string() +
                        " --variant proto --episodes 2");
  REQUIRE(r.code == 0);
  auto lines = lines_of(read_file(d / "results.jsonl"));
  REQUIRE(lines.size() == 3);  // 2 episodes + summary
  REQUIRE(lines[2].find("\"episodes\":2") != std::string::npos);
}

TEST_CASE("unknown config keys are rejected with exit 2", "[cli]") {
  fs::path d = fresh_dir("badkey");
  fs::path cfg = write_config(d, tiny_config(d) + "tune.bogus_knob = 1\n");
  CmdResult r = run_cli("eval --config " + cfg.string());
  INFO(r.output);
  REQUIRE(r.code == 2);
  REQUIRE(r.output.find("bogus_knob") != std::string::npos);
}

TEST_CASE("ablate writes one summary per cell on shared episodes", "[cli]") {
  const fs::path& d = shared_run();
  CmdResult r = run_cli("ablate --config " + (d / "run.cfg").string() +
                        " --grid variant=proto,ltncc,ett");
  INFO(r.output);
  REQUIRE(r.code == 0);
  auto lines = lines_of(read_file(d / "ablate.jsonl"));
  REQUIRE(lines.size() == 3);
  REQUIRE(lines[0].find("\"variant\":\"proto\"") != std::string::npos);
  REQUIRE(lines[1].find("\"variant\":\"ltncc\"") != std::string::npos);
  REQUIRE(lines[2].find("\"variant\":\"ett\"") != std::string::npos);
  for (const auto& line : lines) REQUIRE(line.find("\"cell\":") != std::string::npos);
}

TEST_CASE("dump-episodes exports aligned pre and post embeddings", "[cli]") {
  const fs::path& d = shared_run();
  CmdResult r = run_cli("dump-episodes --config " + (d / "run.cfg").string() +
                        " --variant ett --episodes 2");
  INFO(r.output);
  REQUIRE(r.code == 0);

  auto ck = ett::io::Checkpoint::load((d / "embeddings.ntc").string());
  REQUIRE(ck.get("meta.episodes").item() == 2.0);
  for (int e = 0; e < 2; ++e) {
    std::string base = "ep" + std::to_string(e) + ".";
    ett::Tensor pre = ck.get(base + "pre");
    ett::Tensor post = ck.get(base + "post");
    ett::Tensor labels = ck.get(base + "labels");
    REQUIRE(pre.rank() == 2);
    REQUIRE(pre.dim(0) == post.dim(0));
    REQUIRE(pre.dim(1) == post.dim(1));
    REQUIRE(labels.size() == size_t(pre.dim(0)));
    // tuning moved the embeddings; the export keeps both versions
    bool differs = false;
    for (size_t i = 0; i < pre.size() && !differs; ++i)
      differs = pre.data()[i] != post.data()[i];
    REQUIRE(differs);
  }
}
