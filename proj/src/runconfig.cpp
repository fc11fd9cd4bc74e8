#include "deltamil/runconfig.hpp"

#include <fstream>
#include <sstream>

#include "deltamil/saliency.hpp"

namespace deltamil {

namespace {

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "1" || v == "true" || v == "on") return true;
  if (v == "0" || v == "false" || v == "off") return false;
  throw ConfigError("config: boolean key '" + key + "' got '" + v + "'");
}

Index parse_index(const std::string& key, const std::string& v) {
  try {
    size_t used = 0;
    Index r = std::stoll(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return r;
  } catch (const std::exception&) {
    throw ConfigError("config: integer key '" + key + "' got '" + v + "'");
  }
}

double parse_double(const std::string& key, const std::string& v) {
  try {
    size_t used = 0;
    double r = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return r;
  } catch (const std::exception&) {
    throw ConfigError("config: numeric key '" + key + "' got '" + v + "'");
  }
}

std::vector<std::string> split_csv(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

}  // namespace

void RunConfig::apply(const std::string& key, const std::string& v) {
  if (key == "task") task = task_from_string(v);
  else if (key == "arch") arch = arch_from_string(v);
  else if (key == "feature_dim") feature_dim = parse_index(key, v);
  else if (key == "d") d = parse_index(key, v);
  else if (key == "heads") heads = parse_index(key, v);
  else if (key == "head_dim") head_dim = parse_index(key, v);
  else if (key == "layers") layers = parse_index(key, v);
  else if (key == "d_ff") d_ff = parse_index(key, v);
  else if (key == "chunk_size") chunk_size = parse_index(key, v);
  else if (key == "attn_dim") attn_dim = parse_index(key, v);
  else if (key == "n_classes") n_classes = parse_index(key, v);
  else if (key == "n_bins") n_bins = parse_index(key, v);
  else if (key == "zscore") zscore = parse_bool(key, v);
  else if (key == "local") use_local = parse_bool(key, v);
  else if (key == "gated") use_gated = parse_bool(key, v);
  else if (key == "delta") use_delta = parse_bool(key, v);
  else if (key == "lr") lr = parse_double(key, v);
  else if (key == "beta1") beta1 = parse_double(key, v);
  else if (key == "beta2") beta2 = parse_double(key, v);
  else if (key == "eps") eps = parse_double(key, v);
  else if (key == "weight_decay") weight_decay = parse_double(key, v);
  else if (key == "accumulation") accumulation = parse_index(key, v);
  else if (key == "dropout") dropout = parse_double(key, v);
  else if (key == "patience") patience = parse_index(key, v);
  else if (key == "max_epochs") max_epochs = parse_index(key, v);
  else if (key == "n_bags") n_bags = parse_index(key, v);
  else if (key == "patches_per_bag") patches_per_bag = parse_index(key, v);
  else if (key == "witness_rate") witness_rate = parse_double(key, v);
  else if (key == "noise_std") noise_std = parse_double(key, v);
  else if (key == "signal_strength") signal_strength = parse_double(key, v);
  else if (key == "folds") folds = parse_index(key, v);
  else if (key == "surv_base_rate") surv_base_rate = parse_double(key, v);
  else if (key == "surv_kappa") surv_kappa = parse_double(key, v);
  else if (key == "surv_censor_rate") surv_censor_rate = parse_double(key, v);
  else if (key == "surv_dispersion") surv_dispersion = parse_double(key, v);
  else if (key == "surv_burden") surv_burden = parse_double(key, v);
  else if (key == "manifest") manifest = v;
  else if (key == "out") out_dir = v;
  else if (key == "checkpoint") checkpoint = v;
  else if (key == "bag") bag_path = v;
  else if (key == "ratios") {
    ratios.clear();
    for (const std::string& r : split_csv(v)) ratios.push_back(parse_double(key, r));
  } else if (key == "strategies") {
    strategies = split_csv(v);
    for (const std::string& s : strategies) strategy_from_string(s);
  } else if (key == "sweep_seeds") sweep_seeds = parse_index(key, v);
  else if (key == "heatmap_norm") heatmap_norm = v;
  else if (key == "seed") seed = static_cast<std::uint64_t>(parse_index(key, v));
  else if (key == "fold") fold = static_cast<int>(parse_index(key, v));
  else throw ConfigError("config: unknown key '" + key + "'");
}

void RunConfig::validate_model() const { model_config().validate(); }

ModelConfig RunConfig::model_config() const {
  ModelConfig m;
  m.task = task;
  m.arch = arch;
  m.feature_dim = feature_dim;
  m.d = d;
  m.heads = heads;
  m.head_dim = head_dim;
  m.layers = layers;
  m.d_ff = d_ff;
  m.chunk_size = chunk_size;
  m.attn_dim = attn_dim;
  m.n_classes = n_classes;
  m.n_bins = n_bins;
  m.zscore = zscore;
  m.use_local = use_local;
  m.use_gated = use_gated;
  m.use_delta = use_delta;
  m.dropout = dropout.value_or(task == Task::survival ? 0.25 : 0.0);
  m.validate();
  return m;
}

OptimConfig RunConfig::optim_config() const {
  OptimConfig o;
  o.lr = lr;
  o.beta1 = beta1;
  o.beta2 = beta2;
  o.eps = eps;
  o.weight_decay = weight_decay;
  o.accumulation_steps = accumulation.value_or(task == Task::survival ? 32 : 1);
  o.dropout_rate = dropout.value_or(task == Task::survival ? 0.25 : 0.0);
  o.early_stop_patience = patience;
  o.max_epochs = max_epochs;
  o.seed = seed;
  o.validate();
  return o;
}

SynthConfig RunConfig::synth_config() const {
  SynthConfig s;
  s.n_bags = n_bags;
  s.patches_per_bag = patches_per_bag;
  s.feature_dim = feature_dim;
  s.witness_rate = witness_rate;
  s.n_classes = n_classes;
  s.noise_std = noise_std;
  s.signal_strength = signal_strength;
  s.survival_mode = task == Task::survival;
  s.surv_base_rate = surv_base_rate;
  s.surv_kappa = surv_kappa;
  s.surv_censor_rate = surv_censor_rate;
  s.surv_dispersion = surv_dispersion;
  s.surv_burden = surv_burden;
  s.folds = folds;
  s.seed = seed;
  s.validate();
  return s;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open config file '" + path + "'");
  RunConfig rc;
  std::string line;
  size_t lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    // trim
    auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos) continue;
    auto last = line.find_last_not_of(" \t\r");
    line = line.substr(first, last - first + 1);
    auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config '" + path + "' line " + std::to_string(lineno) +
                        ": expected key=value");
    auto strip = [](std::string s) {
      auto a = s.find_first_not_of(" \t");
      auto b = s.find_last_not_of(" \t");
      return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
    };
    rc.apply(strip(line.substr(0, eq)), strip(line.substr(eq + 1)));
  }
  return rc;
}

}  // namespace deltamil
