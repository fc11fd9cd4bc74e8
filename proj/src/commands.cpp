#include "deltamil/commands.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace deltamil {

namespace fs = std::filesystem;

namespace {

std::uint64_t fold_seed(std::uint64_t seed, int fold) {
  return seed ^ (0x9e3779b97f4a7c15ULL * static_cast<std::uint64_t>(fold + 1));
}

std::string bag_name(Index i) {
  std::ostringstream o;
  o << "bag_" << std::setw(5) << std::setfill('0') << i << ".dmb";
  return o.str();
}

std::vector<PatchBag> load_bags(const Manifest& m, const std::vector<Index>& idx,
                                const std::string& base_dir) {
  std::vector<PatchBag> out;
  out.reserve(idx.size());
  for (Index i : idx) {
    fs::path p = m.entries[i].path;
    if (p.is_relative()) p = fs::path(base_dir) / p;
    out.push_back(read_bag(p.string()));
  }
  return out;
}

std::vector<int> folds_to_run(const RunConfig& rc, const Manifest& m) {
  if (rc.fold >= 0) {
    if (m.n_folds > 1 && rc.fold >= m.n_folds)
      throw ConfigError("fold " + std::to_string(rc.fold) + " out of range (" +
                        std::to_string(m.n_folds) + " folds)");
    return {rc.fold};
  }
  if (m.n_folds <= 1) return {0};
  std::vector<int> all(m.n_folds);
  for (int k = 0; k < m.n_folds; ++k) all[k] = k;
  return all;
}

std::string timestamp() {
  auto now = std::chrono::system_clock::now();
  std::time_t tt = std::chrono::system_clock::to_time_t(now);
  char buf[64];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%S", std::gmtime(&tt));
  return buf;
}

}  // namespace

void cmd_synth(const RunConfig& rc) {
  SynthConfig sc = rc.synth_config();  // validates before any I/O
  fs::create_directories(rc.out_dir);
  Manifest manifest;
  manifest.task = sc.survival_mode ? Task::survival : Task::classification;
  for (Index i = 0; i < sc.n_bags; ++i) {
    std::mt19937_64 rng = bag_rng(sc.seed, i);
    PatchBag bag = sc.survival_mode ? generate_survival_bag(sc, rng)
                                    : generate_bag(sc, i % sc.n_classes, rng);
    const std::string name = bag_name(i);
    write_bag(bag, (fs::path(rc.out_dir) / name).string());
    ManifestEntry e;
    e.path = name;
    e.label = bag.label;
    e.survival = bag.survival;
    // block layout: consecutive rows share a fold
    e.fold = static_cast<int>(i * sc.folds / sc.n_bags);
    manifest.entries.push_back(std::move(e));
  }
  manifest.n_folds = static_cast<int>(sc.folds);
  write_manifest(manifest, (fs::path(rc.out_dir) / "manifest.tsv").string());
}

TrainingRun run_training(const RunConfig& rc, std::ostream* log) {
  ModelConfig mc = rc.model_config();
  OptimConfig oc = rc.optim_config();
  if (rc.manifest.empty()) throw ConfigError("train: manifest path required");
  Manifest m = load_manifest(rc.manifest);
  if (m.task != mc.task)
    throw ConfigError("train: manifest task is " + to_string(m.task) + " but config says " +
                      to_string(mc.task));
  const std::string base = fs::path(rc.manifest).parent_path().string();

  TrainingRun run;
  for (int fold : folds_to_run(rc, m)) {
    FoldSplit split = fold_split(m, fold);
    std::vector<PatchBag> train_bags = load_bags(m, split.train, base);
    std::vector<PatchBag> val_bags = load_bags(m, split.val, base);
    std::vector<PatchBag> test_bags = load_bags(m, split.test, base);

    FoldOutcome fo;
    fo.fold = fold;
    fo.model = init_model(mc, fold_seed(rc.seed, fold));
    if (mc.task == Task::survival) {
      std::vector<double> times;
      for (const PatchBag& b : train_bags) times.push_back(b.survival->time);
      fo.model.surv_bins = survival_cuts(times, mc.n_bins);
    }
    if (log) (*log) << "fold " << fold << "\n";
    OptimConfig oc_fold = oc;
    oc_fold.seed = fold_seed(rc.seed, fold);
    fo.train = train_model(fo.model, oc_fold, train_bags, val_bags, log);
    fo.test = evaluate_model(fo.model, test_bags);
    if (mc.task == Task::classification) {
      run.report.fold_acc.push_back(fo.test.acc);
      run.report.fold_auc.push_back(fo.test.auc);
    } else {
      run.report.fold_cindex.push_back(fo.test.cindex);
    }
    run.folds.push_back(std::move(fo));
  }
  return run;
}

std::string report_text(const MetricsReport& r, Task task) {
  std::ostringstream o;
  o << std::setprecision(6) << std::fixed;
  o << "task " << to_string(task) << "\n";
  if (task == Task::classification) {
    o << "folds " << r.fold_acc.size() << "\n";
    for (size_t k = 0; k < r.fold_acc.size(); ++k)
      o << "fold " << k << " acc " << r.fold_acc[k] << " auc " << r.fold_auc[k] << "\n";
    o << "mean acc " << MetricsReport::mean(r.fold_acc);
    if (r.fold_acc.size() > 1) o << " std " << MetricsReport::stdev(r.fold_acc);
    o << "\nmean auc " << MetricsReport::mean(r.fold_auc);
    if (r.fold_auc.size() > 1) o << " std " << MetricsReport::stdev(r.fold_auc);
    o << "\n";
  } else {
    o << "folds " << r.fold_cindex.size() << "\n";
    for (size_t k = 0; k < r.fold_cindex.size(); ++k)
      o << "fold " << k << " c_index " << r.fold_cindex[k] << "\n";
    o << "mean c_index " << MetricsReport::mean(r.fold_cindex);
    if (r.fold_cindex.size() > 1) o << " std " << MetricsReport::stdev(r.fold_cindex);
    o << "\n";
  }
  return o.str();
}

MetricsReport cmd_train(const RunConfig& rc) {
  fs::create_directories(rc.out_dir);
  std::ofstream log((fs::path(rc.out_dir) / "train_log.txt").string(), std::ios::trunc);
  log << "# train " << timestamp() << "\n";  // the only timestamped line
  TrainingRun run = run_training(rc, &log);
  for (const FoldOutcome& fo : run.folds)
    save_checkpoint(fo.model,
                    (fs::path(rc.out_dir) / ("fold_" + std::to_string(fo.fold) + ".dmc")).string());
  std::ofstream report((fs::path(rc.out_dir) / "report.txt").string(), std::ios::trunc);
  report << report_text(run.report, rc.task);
  return run.report;
}

MetricsReport cmd_eval(const RunConfig& rc) {
  if (rc.checkpoint.empty()) throw ConfigError("eval: missing checkpoint path");
  if (rc.manifest.empty()) throw ConfigError("eval: manifest path required");
  Model model = load_checkpoint(rc.checkpoint);
  Manifest m = load_manifest(rc.manifest);
  const std::string base = fs::path(rc.manifest).parent_path().string();
  MetricsReport report;
  for (int fold : folds_to_run(rc, m)) {
    FoldSplit split = fold_split(m, fold);
    EvalResult ev = evaluate_model(model, load_bags(m, split.test, base));
    if (model.config.task == Task::classification) {
      report.fold_acc.push_back(ev.acc);
      report.fold_auc.push_back(ev.auc);
    } else {
      report.fold_cindex.push_back(ev.cindex);
    }
  }
  return report;
}

std::vector<AblationRow> cmd_ablate(const RunConfig& rc) {
  RunConfig base = rc;
  if (base.fold < 0) base.fold = 0;
  const bool rows[4][3] = {{false, true, true},
                           {true, false, true},
                           {true, true, false},
                           {true, true, true}};
  std::vector<AblationRow> table;
  for (const auto& row : rows) {
    RunConfig cfg = base;
    cfg.use_local = row[0];
    cfg.use_gated = row[1];
    cfg.use_delta = row[2];
    TrainingRun run = run_training(cfg);
    AblationRow r;
    r.local = row[0];
    r.gated = row[1];
    r.delta = row[2];
    if (rc.task == Task::classification) {
      r.auc = run.report.fold_auc[0];
      r.acc = run.report.fold_acc[0];
    } else {
      r.cindex = run.report.fold_cindex[0];
    }
    table.push_back(r);
  }
  fs::create_directories(rc.out_dir);
  std::ofstream out((fs::path(rc.out_dir) / "ablate.txt").string(), std::ios::trunc);
  out << std::setprecision(6) << std::fixed;
  out << "local\tgated\tdelta\t" << (rc.task == Task::classification ? "auc\tacc" : "c_index")
      << "\n";
  for (const AblationRow& r : table) {
    out << r.local << "\t" << r.gated << "\t" << r.delta << "\t";
    if (rc.task == Task::classification)
      out << r.auc << "\t" << r.acc << "\n";
    else
      out << r.cindex << "\n";
  }
  return table;
}

void cmd_sweep(const RunConfig& rc) {
  if (rc.checkpoint.empty()) throw ConfigError("sweep: missing checkpoint path");
  if (rc.manifest.empty()) throw ConfigError("sweep: manifest path required");
  Model model = load_checkpoint(rc.checkpoint);
  Manifest m = load_manifest(rc.manifest);
  const std::string base = fs::path(rc.manifest).parent_path().string();
  const int fold = rc.fold >= 0 ? rc.fold : 0;
  FoldSplit split = fold_split(m, fold);
  std::vector<PatchBag> bags = load_bags(m, split.test, base);

  std::vector<std::uint64_t> seeds;
  for (Index s = 0; s < rc.sweep_seeds; ++s) seeds.push_back(rc.seed + static_cast<std::uint64_t>(s));

  fs::create_directories(rc.out_dir);
  std::ofstream out((fs::path(rc.out_dir) / "retention.txt").string(), std::ios::trunc);
  out << "strategy\tratio\tmetric\tseeds\n";
  for (const std::string& sname : rc.strategies) {
    RetentionCurve curve = sweep(model, bags, strategy_from_string(sname), rc.ratios, seeds);
    for (const auto& [ratio, metric] : curve.points)
      out << to_string(curve.strategy) << "\t" << ratio << "\t" << metric << "\t"
          << curve.seed_count << "\n";
  }
}

void cmd_heatmap(const RunConfig& rc) {
  if (rc.checkpoint.empty()) throw ConfigError("heatmap: missing checkpoint path");
  if (rc.bag_path.empty()) throw ConfigError("heatmap: bag path required");
  Model model = load_checkpoint(rc.checkpoint);
  PatchBag bag = read_bag(rc.bag_path);
  Tensor alpha = extract_attention(model, bag);
  fs::create_directories(rc.out_dir);
  export_heatmap(alpha, bag.coords, (fs::path(rc.out_dir) / "heatmap.pgm").string(),
                 heatmap_norm_from_string(rc.heatmap_norm));
}

PatchBag random_bag(Index n_patches, Index feature_dim, std::uint64_t seed, int label) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  PatchBag bag;
  bag.features = Tensor::zeros({n_patches, feature_dim});
  for (Index i = 0; i < bag.features.size(); ++i) bag.features[i] = gauss(rng);
  const Index w = static_cast<Index>(std::ceil(std::sqrt(static_cast<double>(n_patches))));
  for (Index i = 0; i < n_patches; ++i) bag.coords.push_back({i / w, i % w});
  bag.label = label;
  return bag;
}

GradCheckReport model_gradcheck(const ModelConfig& cfg, Index n_patches, std::uint64_t seed,
                                double h, double tol) {
  cfg.validate();
  Model model = init_model(cfg, seed);
  PatchBag bag = random_bag(n_patches, cfg.feature_dim, seed + 17, 1);
  if (cfg.task == Task::survival) {
    bag.label.reset();
    bag.survival = Survival{2.5, true};
    model.surv_bins = {1.0, 3.0, 6.0};
    while (static_cast<Index>(model.surv_bins.size()) + 1 > cfg.n_bins)
      model.surv_bins.pop_back();
  }

  // analytic gradients from one taped forward/backward
  std::map<std::string, Tensor> grads;
  {
    GradTape tape;
    BoundParams bound = bind(tape, model.params, true);
    std::mt19937_64 rng(0);
    ForwardOut fwd = full_forward(tape, bag, model.config, bound, /*train=*/false, rng);
    Var loss = bag_loss(fwd, bag, model.config, model.surv_bins);
    tape.backward(loss);
    grads = collect_grads(bound);
  }

  GradCheckReport report;
  Model work = model;
  for (const std::string& name : model.params.names()) {
    auto f = [&](const std::vector<Tensor>& ps) {
      work.params.at(name) = ps[0];
      GradTape tape;
      BoundParams bound = bind(tape, work.params, false);
      std::mt19937_64 rng(0);
      ForwardOut fwd = full_forward(tape, bag, work.config, bound, /*train=*/false, rng);
      return bag_loss(fwd, bag, work.config, work.surv_bins).value().value();
    };
    double rel = finite_diff_check(f, {model.params.at(name)}, {grads.at(name)}, h);
    work.params.at(name) = model.params.at(name);
    report.groups.push_back({name, rel});
    report.worst = std::max(report.worst, rel);
  }
  report.pass = report.worst < tol;
  return report;
}

int cmd_gradcheck(const RunConfig& rc, std::ostream& out) {
  ModelConfig cfg;
  cfg.task = rc.task;
  cfg.arch = Arch::deltamil;
  cfg.feature_dim = 24;
  cfg.d = 16;
  cfg.heads = 2;
  cfg.head_dim = 8;
  cfg.layers = rc.layers;
  cfg.d_ff = 32;
  cfg.chunk_size = 5;
  cfg.attn_dim = 16;
  cfg.n_classes = 2;
  cfg.use_local = rc.use_local;
  cfg.use_gated = rc.use_gated;
  cfg.use_delta = rc.use_delta;
  GradCheckReport report = model_gradcheck(cfg, 12, rc.seed);
  out << std::scientific << std::setprecision(3);
  for (const GradCheckGroup& g : report.groups)
    out << g.name << " rel_err " << g.rel_err << "\n";
  out << "worst rel_err " << report.worst << " -> " << (report.pass ? "PASS" : "FAIL")
      << " (tolerance 1e-4)\n";
  return report.pass ? 0 : 1;
}

}  // namespace deltamil
