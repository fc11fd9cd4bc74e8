#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "deltamil/commands.hpp"

using namespace deltamil;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) {
    path = fs::temp_directory_path() / ("deltamil_cli_" + name);
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string str() const { return path.string(); }
  std::string sub(const std::string& name) const { return (path / name).string(); }
};

std::string slurp(const std::string& p) {
  std::ifstream f(p, std::ios::binary);
  REQUIRE(f.good());
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

// tiny but trainable run setup
RunConfig tiny_run(const std::string& out) {
  RunConfig rc;
  rc.task = Task::classification;
  rc.arch = Arch::deltamil;
  rc.feature_dim = 8;
  rc.d = 16;
  rc.heads = 2;
  rc.head_dim = 8;
  rc.layers = 1;
  rc.d_ff = 32;
  rc.chunk_size = 8;
  rc.n_classes = 2;
  rc.lr = 1e-3;
  rc.max_epochs = 2;
  rc.patience = 2;
  rc.n_bags = 18;
  rc.patches_per_bag = 12;
  rc.witness_rate = 0.2;
  rc.folds = 3;
  rc.seed = 3;
  rc.out_dir = out;
  return rc;
}

std::string strip_first_line(const std::string& s) {
  auto nl = s.find('\n');
  return nl == std::string::npos ? std::string() : s.substr(nl + 1);
}

}  // namespace

TEST_CASE("config file parsing: values, comments, unknown keys") {
  TempDir dir("config");
  const std::string cfg_path = dir.sub("run.conf");
  {
    std::ofstream f(cfg_path);
    f << "# comment line\n"
      << "task = classification\n"
      << "arch = deltamil\n"
      << "d = 32\n"
      << "heads = 4\n"
      << "head_dim = 8   # inline comment\n"
      << "lr = 5e-4\n"
      << "ratios = 0.1,0.5,1.0\n"
      << "\n";
  }
  RunConfig rc = load_run_config(cfg_path);
  CHECK(rc.d == 32);
  CHECK(rc.heads == 4);
  CHECK(rc.lr == 5e-4);
  REQUIRE(rc.ratios.size() == 3);
  CHECK(rc.ratios[1] == 0.5);

  {
    std::ofstream f(cfg_path);
    f << "no_such_key = 1\n";
  }
  CHECK_THROWS_AS(load_run_config(cfg_path), ConfigError);

  {
    std::ofstream f(cfg_path);
    f << "d = notanumber\n";
  }
  CHECK_THROWS_AS(load_run_config(cfg_path), ConfigError);
}

TEST_CASE("config validation rejects bad geometry and rates before I/O") {
  TempDir dir("validate");
  RunConfig rc = tiny_run(dir.sub("out"));
  rc.witness_rate = 1.5;
  CHECK_THROWS_AS(cmd_synth(rc), ConfigError);
  CHECK_FALSE(fs::exists(dir.sub("out")));  // nothing written

  RunConfig rc2 = tiny_run(dir.sub("out2"));
  rc2.heads = 3;  // 3*8 != 16
  CHECK_THROWS_AS(rc2.model_config(), ConfigError);
}

TEST_CASE("cmd_synth writes bags and a manifest with balanced folds") {
  TempDir dir("synth");
  RunConfig rc = tiny_run(dir.sub("data"));
  rc.n_bags = 100;
  rc.folds = 5;
  rc.patches_per_bag = 8;
  cmd_synth(rc);

  Manifest m = load_manifest(dir.sub("data") + "/manifest.tsv");
  REQUIRE(m.entries.size() == 100);
  CHECK(m.n_folds == 5);
  std::vector<int> per_fold(5, 0);
  for (const ManifestEntry& e : m.entries) per_fold[e.fold]++;
  for (int k = 0; k < 5; ++k) CHECK(per_fold[k] == 20);

  // bags readable and labeled
  PatchBag bag = read_bag(dir.sub("data") + "/" + m.entries[0].path);
  CHECK(bag.n_patches() == 8);
  CHECK(bag.label.has_value());
}

TEST_CASE("cmd_synth is deterministic: same seed gives identical trees") {
  TempDir dir("synth_det");
  RunConfig rc = tiny_run(dir.sub("a"));
  rc.n_bags = 6;
  rc.patches_per_bag = 8;
  cmd_synth(rc);
  rc.out_dir = dir.sub("b");
  cmd_synth(rc);
  for (const auto& entry : fs::directory_iterator(dir.sub("a"))) {
    const std::string name = entry.path().filename().string();
    CHECK(slurp(entry.path().string()) == slurp(dir.sub("b") + "/" + name));
  }
}

TEST_CASE("checkpoint round trip is bit-exact and rejects corruption") {
  TempDir dir("ckpt");
  ModelConfig mc;
  mc.arch = Arch::deltamil;
  mc.feature_dim = 8;
  mc.d = 16;
  mc.heads = 2;
  mc.head_dim = 8;
  mc.d_ff = 32;
  Model model = init_model(mc, 5);
  model.surv_bins = {1.5, 3.25, 7.125};
  const std::string path = dir.sub("model.dmc");
  save_checkpoint(model, path);
  CHECK(fs::exists(path + ".txt"));  // human-readable manifest alongside

  Model back = load_checkpoint(path);
  CHECK(back.config.d == 16);
  CHECK(back.surv_bins == model.surv_bins);
  for (const std::string& name : model.params.names()) {
    REQUIRE(back.params.has(name));
    CHECK((back.params.at(name).array() - model.params.at(name).array()).abs().maxCoeff() == 0.0);
  }
  // save(load(x)) is byte-identical
  const std::string path2 = dir.sub("model2.dmc");
  save_checkpoint(back, path2);
  CHECK(slurp(path) == slurp(path2));

  std::string bytes = slurp(path);
  bytes[0] = 'Z';
  {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  }
  CHECK_THROWS_AS(load_checkpoint(path), IoError);
  CHECK_THROWS_AS(load_checkpoint(dir.sub("missing.dmc")), IoError);
}

TEST_CASE("cmd_train writes checkpoints, logs and a deterministic report") {
  TempDir dir("train");
  RunConfig rc = tiny_run(dir.sub("data"));
  cmd_synth(rc);
  rc.manifest = dir.sub("data") + "/manifest.tsv";
  rc.out_dir = dir.sub("run1");
  MetricsReport r1 = cmd_train(rc);
  REQUIRE(r1.fold_acc.size() == 3);
  CHECK(fs::exists(dir.sub("run1") + "/fold_0.dmc"));
  CHECK(fs::exists(dir.sub("run1") + "/fold_2.dmc"));
  CHECK(fs::exists(dir.sub("run1") + "/train_log.txt"));
  CHECK(fs::exists(dir.sub("run1") + "/report.txt"));

  rc.out_dir = dir.sub("run2");
  MetricsReport r2 = cmd_train(rc);
  for (size_t k = 0; k < r1.fold_acc.size(); ++k) {
    CHECK(r1.fold_acc[k] == r2.fold_acc[k]);
    CHECK(r1.fold_auc[k] == r2.fold_auc[k]);
  }
  // logs byte-identical apart from the single timestamp header line
  CHECK(strip_first_line(slurp(dir.sub("run1") + "/train_log.txt")) ==
        strip_first_line(slurp(dir.sub("run2") + "/train_log.txt")));
  CHECK(slurp(dir.sub("run1") + "/report.txt") == slurp(dir.sub("run2") + "/report.txt"));

  // eval on the written checkpoint reproduces the fold-0 test metrics
  RunConfig ev = rc;
  ev.checkpoint = dir.sub("run2") + "/fold_0.dmc";
  ev.fold = 0;
  MetricsReport er = cmd_eval(ev);
  REQUIRE(er.fold_acc.size() == 1);
  CHECK(er.fold_acc[0] == r2.fold_acc[0]);
  CHECK(er.fold_auc[0] == r2.fold_auc[0]);
}

TEST_CASE("lr zero training reports the init-model evaluation") {
  TempDir dir("lr0");
  RunConfig rc = tiny_run(dir.sub("data"));
  cmd_synth(rc);
  rc.manifest = dir.sub("data") + "/manifest.tsv";
  rc.lr = 0.0;
  rc.weight_decay = 0.0;
  rc.fold = 0;
  TrainingRun run = run_training(rc);
  REQUIRE(run.folds.size() == 1);

  // fresh init model evaluated on the same test fold gives the same numbers
  Manifest m = load_manifest(rc.manifest);
  FoldSplit split = fold_split(m, 0);
  std::vector<PatchBag> test_bags;
  for (Index i : split.test)
    test_bags.push_back(read_bag(dir.sub("data") + "/" + m.entries[i].path));
  Model fresh = init_model(rc.model_config(),
                           rc.seed ^ (0x9e3779b97f4a7c15ULL * 1ULL));
  EvalResult ev = evaluate_model(fresh, test_bags);
  CHECK(run.report.fold_acc[0] == ev.acc);
  CHECK(run.report.fold_auc[0] == ev.auc);
}

TEST_CASE("single-fold manifest trains without a std column") {
  TempDir dir("single");
  RunConfig rc = tiny_run(dir.sub("data"));
  rc.folds = 1;
  rc.n_bags = 20;
  cmd_synth(rc);
  rc.manifest = dir.sub("data") + "/manifest.tsv";
  rc.out_dir = dir.sub("run");
  MetricsReport r = cmd_train(rc);
  CHECK(r.fold_acc.size() == 1);
  std::string report = slurp(dir.sub("run") + "/report.txt");
  CHECK(report.find("std") == std::string::npos);
}

TEST_CASE("ablation: full row reproduces cmd_train for the same seed, local-off matches at init") {
  TempDir dir("ablate");
  RunConfig rc = tiny_run(dir.sub("data"));
  rc.n_bags = 12;
  rc.folds = 3;
  cmd_synth(rc);
  rc.manifest = dir.sub("data") + "/manifest.tsv";
  rc.out_dir = dir.sub("run");
  rc.fold = 0;
  rc.max_epochs = 1;
  rc.patience = 0;

  std::vector<AblationRow> table = cmd_ablate(rc);
  REQUIRE(table.size() == 4);
  CHECK(fs::exists(dir.sub("run") + "/ablate.txt"));

  TrainingRun direct = run_training(rc);
  CHECK(table[3].local);
  CHECK(table[3].gated);
  CHECK(table[3].delta);
  CHECK(table[3].auc == direct.report.fold_auc[0]);  // bit-exact same path
  CHECK(table[3].acc == direct.report.fold_acc[0]);

  // untrained model: the local branch is silent at init, so local-off equals
  // the full configuration on the initial validation metric
  RunConfig frozen = rc;
  frozen.lr = 0.0;
  frozen.weight_decay = 0.0;
  TrainingRun full = run_training(frozen);
  frozen.use_local = false;
  TrainingRun nolocal = run_training(frozen);
  CHECK(full.folds[0].train.best_val == nolocal.folds[0].train.best_val);
}

TEST_CASE("gated-off ablation records alpha identically one") {
  TempDir dir("gated");
  RunConfig rc = tiny_run(dir.sub("data"));
  rc.n_bags = 9;
  cmd_synth(rc);
  rc.manifest = dir.sub("data") + "/manifest.tsv";
  rc.use_gated = false;
  rc.fold = 0;
  rc.max_epochs = 1;
  rc.patience = 0;
  TrainingRun run = run_training(rc);
  PatchBag bag = read_bag(dir.sub("data") + "/bag_00000.dmb");
  GradTape t;
  ForwardOut fwd = forward_eval(t, run.folds[0].model, bag);
  REQUIRE(!fwd.traces.empty());
  const Tensor& alpha = fwd.traces[0].gates.alpha;
  for (Index i = 0; i < alpha.size(); ++i) CHECK(alpha[i] == 1.0);
}

TEST_CASE("sweep and heatmap artifacts") {
  TempDir dir("sweep");
  RunConfig rc = tiny_run(dir.sub("data"));
  cmd_synth(rc);
  rc.manifest = dir.sub("data") + "/manifest.tsv";
  rc.out_dir = dir.sub("run");
  rc.fold = 0;
  rc.max_epochs = 1;
  rc.patience = 0;
  cmd_train(rc);

  rc.checkpoint = dir.sub("run") + "/fold_0.dmc";
  rc.ratios = {0.5, 1.0};
  rc.sweep_seeds = 2;
  cmd_sweep(rc);
  std::string curve = slurp(dir.sub("run") + "/retention.txt");
  CHECK(curve.find("strategy\tratio\tmetric\tseeds") != std::string::npos);
  CHECK(curve.find("top_k") != std::string::npos);
  CHECK(curve.find("bottom_k") != std::string::npos);
  CHECK(curve.find("random_k") != std::string::npos);

  rc.bag_path = dir.sub("data") + "/bag_00001.dmb";
  cmd_heatmap(rc);
  std::string pgm = slurp(dir.sub("run") + "/heatmap.pgm");
  CHECK(pgm.substr(0, 2) == "P5");

  // missing checkpoint is a distinct failure
  RunConfig missing = rc;
  missing.checkpoint = "";
  CHECK_THROWS_AS(cmd_sweep(missing), ConfigError);
  missing.checkpoint = dir.sub("run") + "/nope.dmc";
  CHECK_THROWS_AS(cmd_sweep(missing), IoError);
}

TEST_CASE("survival training path end to end") {
  TempDir dir("surv");
  RunConfig rc = tiny_run(dir.sub("data"));
  rc.task = Task::survival;
  rc.n_bags = 24;
  rc.folds = 3;
  rc.patches_per_bag = 12;
  rc.accumulation = 4;
  rc.dropout = 0.1;
  cmd_synth(rc);
  rc.manifest = dir.sub("data") + "/manifest.tsv";
  rc.out_dir = dir.sub("run");
  rc.fold = 0;
  rc.max_epochs = 2;
  rc.patience = 2;
  MetricsReport r = cmd_train(rc);
  REQUIRE(r.fold_cindex.size() == 1);
  CHECK(r.fold_cindex[0] >= 0.0);
  CHECK(r.fold_cindex[0] <= 1.0);
  Model model = load_checkpoint(dir.sub("run") + "/fold_0.dmc");
  CHECK(model.surv_bins.size() == 3);  // quartile cuts from the train fold
}
