#include "deltamil/synth.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <iostream>
#include <sstream>

namespace deltamil {

void SynthConfig::validate() const {
  if (n_bags < 1) throw ConfigError("synth: n_bags must be >= 1");
  if (patches_per_bag < 1) throw ConfigError("synth: patches_per_bag must be >= 1");
  if (feature_dim < 1) throw ConfigError("synth: feature_dim must be >= 1");
  if (!(witness_rate > 0.0 && witness_rate < 1.0))
    throw ConfigError("synth: witness_rate must lie in (0,1), got " +
                      std::to_string(witness_rate));
  if (n_classes < 2) throw ConfigError("synth: n_classes must be >= 2");
  if (!(noise_std > 0.0)) throw ConfigError("synth: noise_std must be positive");
  if (witness_rate * static_cast<double>(patches_per_bag) < 1.0)
    throw ConfigError("synth: expected witness count p*N must be >= 1");
  if (folds < 1) throw ConfigError("synth: folds must be >= 1");
}

std::vector<Tensor> make_signals(const SynthConfig& cfg) {
  std::mt19937_64 rng(cfg.seed ^ 0x5167a11eULL);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::vector<Tensor> signals;
  for (Index cls = 1; cls < cfg.n_classes; ++cls) {
    for (int attempt = 0; attempt < 64; ++attempt) {
      Tensor s = Tensor::zeros({cfg.feature_dim});
      for (Index j = 0; j < cfg.feature_dim; ++j) s[j] = gauss(rng);
      double n = std::sqrt(s.array().square().sum());
      if (n < 1e-9) continue;
      s.array() *= cfg.signal_strength / n;
      bool collinear = false;
      for (const Tensor& prev : signals) {
        double cosab = (s.array() * prev.array()).sum() /
                       (cfg.signal_strength * cfg.signal_strength);
        if (std::abs(cosab) > 0.99) collinear = true;
      }
      if (!collinear) {
        signals.push_back(std::move(s));
        break;
      }
    }
  }
  if (static_cast<Index>(signals.size()) != cfg.n_classes - 1)
    throw ValueError("synth: failed to draw non-collinear class signals");
  return signals;
}

std::mt19937_64 bag_rng(std::uint64_t seed, Index bag_index) {
  const std::uint64_t mix = static_cast<std::uint64_t>(bag_index) + 0x9e3779b97f4a7c15ULL;
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(mix), static_cast<std::uint32_t>(mix >> 32)};
  return std::mt19937_64(seq);
}

namespace {

std::vector<Coord> square_grid_coords(Index n) {
  const Index w = static_cast<Index>(std::ceil(std::sqrt(static_cast<double>(n))));
  std::vector<Coord> coords(n);
  for (Index i = 0; i < n; ++i) coords[i] = {i / w, i % w};
  return coords;
}

PatchBag fill_patches(const SynthConfig& cfg, const Tensor* signal, double rate,
                      std::mt19937_64& rng) {
  const Index n = cfg.patches_per_bag, c = cfg.feature_dim;
  std::normal_distribution<double> noise(0.0, cfg.noise_std);
  std::bernoulli_distribution promote(rate);
  PatchBag bag;
  bag.features = Tensor::zeros({n, c});
  bag.witness_mask.assign(n, 0);
  for (Index i = 0; i < n; ++i) {
    const bool witness = signal != nullptr && promote(rng);
    bag.witness_mask[i] = witness ? 1 : 0;
    for (Index j = 0; j < c; ++j)
      bag.features.at(i, j) = (witness ? (*signal)[j] : 0.0) + noise(rng);
  }
  bag.coords = square_grid_coords(n);
  return bag;
}

}  // namespace

PatchBag generate_bag(const SynthConfig& cfg, Index class_id, std::mt19937_64& rng) {
  cfg.validate();
  if (class_id < 0 || class_id >= cfg.n_classes)
    throw ValueError("generate_bag: class " + std::to_string(class_id) + " out of range (" +
                     std::to_string(cfg.n_classes) + " classes)");
  std::vector<Tensor> signals = make_signals(cfg);
  const Tensor* signal = class_id == 0 ? nullptr : &signals[class_id - 1];
  PatchBag bag = fill_patches(cfg, signal, cfg.witness_rate, rng);
  bag.label = static_cast<int>(class_id);
  return bag;
}

PatchBag generate_survival_bag(const SynthConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  std::vector<Tensor> signals = make_signals(cfg);
  // Per-bag burden multiplier widens the risk spread across the cohort.
  std::gamma_distribution<double> burden(cfg.surv_dispersion,
                                         cfg.surv_burden / cfg.surv_dispersion);
  double rate = std::min(0.9, cfg.witness_rate * burden(rng));
  PatchBag bag = fill_patches(cfg, &signals[0], rate, rng);

  double count = 0.0;
  for (auto w : bag.witness_mask) count += w;
  const double r = count / (cfg.witness_rate * static_cast<double>(cfg.patches_per_bag));
  std::exponential_distribution<double> death(cfg.surv_base_rate * std::exp(cfg.surv_kappa * r));
  const double t_death = death(rng);
  double t_censor = std::numeric_limits<double>::infinity();
  if (cfg.surv_censor_rate > 0.0) {
    std::exponential_distribution<double> censor(cfg.surv_censor_rate);
    t_censor = censor(rng);
  }
  Survival s;
  s.event = t_death <= t_censor;
  s.time = std::max(1e-9, std::min(t_death, t_censor));
  bag.survival = s;
  return bag;
}

// ---- bag files ----

namespace {

constexpr char kMagic[4] = {'D', 'M', 'B', '1'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::string& buf, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_f32(std::string& buf, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(buf, bits);
}
void put_f64(std::string& buf, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

struct Reader {
  const std::string& buf;
  size_t pos = 0;
  const std::string& path;

  void need(size_t n) const {
    if (pos + n > buf.size())
      throw IoError("truncated bag file '" + path + "': expected at least " +
                    std::to_string(pos + n) + " bytes, got " + std::to_string(buf.size()));
  }
  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(buf[pos++]);
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
    pos += 4;
    return v;
  }
  float f32() {
    std::uint32_t bits = u32();
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }
  double f64() {
    need(8);
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
    pos += 8;
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
  }
};

}  // namespace

void write_bag(const PatchBag& bag, const std::string& path) {
  const Index n = bag.n_patches(), c = bag.feature_dim();
  if (static_cast<Index>(bag.coords.size()) != n)
    throw ShapeError("write_bag: coord count does not match patch count");
  if (bag.label && bag.survival)
    throw ValueError("write_bag: bag carries both a label and a survival record");
  if (!bag.label && !bag.survival)
    throw ValueError("write_bag: bag carries neither label nor survival record");

  std::string buf;
  buf.reserve(32 + 8 * n + 4 * n * c + n);
  buf.append(kMagic, 4);
  put_u32(buf, kVersion);
  put_u32(buf, static_cast<std::uint32_t>(n));
  put_u32(buf, static_cast<std::uint32_t>(c));
  buf.push_back(bag.survival ? 1 : 0);
  for (const Coord& co : bag.coords) {
    put_u32(buf, static_cast<std::uint32_t>(co.row));
    put_u32(buf, static_cast<std::uint32_t>(co.col));
  }
  for (Index i = 0; i < n * c; ++i) put_f32(buf, static_cast<float>(bag.features[i]));
  if (bag.survival) {
    put_f64(buf, bag.survival->time);
    buf.push_back(bag.survival->event ? 1 : 0);
  } else {
    put_u32(buf, static_cast<std::uint32_t>(*bag.label));
  }
  const bool has_mask = !bag.witness_mask.empty();
  buf.push_back(has_mask ? 1 : 0);
  if (has_mask) {
    if (static_cast<Index>(bag.witness_mask.size()) != n)
      throw ShapeError("write_bag: witness mask length mismatch");
    for (auto m : bag.witness_mask) buf.push_back(m ? 1 : 0);
  }

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open '" + path + "' for writing");
  f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!f) throw IoError("write failed for '" + path + "'");
}

PatchBag read_bag(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open bag file '" + path + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  const std::string buf = ss.str();

  Reader r{buf, 0, path};
  r.need(4);
  if (std::memcmp(buf.data(), kMagic, 4) != 0)
    throw IoError("bad magic in bag file '" + path + "'");
  r.pos = 4;
  const std::uint32_t version = r.u32();
  if (version != kVersion)
    throw IoError("bag file version mismatch in '" + path + "': got " + std::to_string(version) +
                  ", expected " + std::to_string(kVersion));
  const Index n = r.u32();
  const Index c = r.u32();
  const std::uint8_t task = r.u8();

  PatchBag bag;
  bag.coords.resize(n);
  for (Index i = 0; i < n; ++i) {
    bag.coords[i].row = r.u32();
    bag.coords[i].col = r.u32();
  }
  bag.features = Tensor::zeros({n, c});
  for (Index i = 0; i < n * c; ++i) bag.features[i] = static_cast<double>(r.f32());
  if (task == 1) {
    Survival s;
    s.time = r.f64();
    s.event = r.u8() != 0;
    bag.survival = s;
  } else {
    bag.label = static_cast<int>(r.u32());
  }
  if (r.u8() != 0) {
    bag.witness_mask.resize(n);
    for (Index i = 0; i < n; ++i) bag.witness_mask[i] = r.u8();
  }
  if (r.pos != buf.size())
    throw IoError("bag file '" + path + "' has " + std::to_string(buf.size() - r.pos) +
                  " trailing bytes");
  return bag;
}

// ---- manifests ----

Manifest load_manifest(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open manifest '" + path + "'");
  std::string line;
  if (!std::getline(f, line)) throw IoError("manifest '" + path + "' is empty");

  auto split = [](const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string tok;
    while (ss >> tok) out.push_back(tok);
    return out;
  };

  std::vector<std::string> header = split(line);
  Manifest m;
  if (header == std::vector<std::string>{"path", "label", "fold"}) {
    m.task = Task::classification;
  } else if (header == std::vector<std::string>{"path", "time", "event", "fold"}) {
    m.task = Task::survival;
  } else {
    throw IoError("manifest '" + path + "': unknown columns '" + line +
                  "' (want: path label fold | path time event fold)");
  }

  size_t lineno = 1;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> tok = split(line);
    if (tok.size() != header.size())
      throw IoError("manifest '" + path + "' line " + std::to_string(lineno) + ": expected " +
                    std::to_string(header.size()) + " columns");
    ManifestEntry e;
    e.path = tok[0];
    try {
      if (m.task == Task::classification) {
        e.label = std::stoi(tok[1]);
        e.fold = std::stoi(tok[2]);
      } else {
        Survival s;
        s.time = std::stod(tok[1]);
        s.event = std::stoi(tok[2]) != 0;
        e.survival = s;
        e.fold = std::stoi(tok[3]);
      }
    } catch (const std::exception&) {
      throw IoError("manifest '" + path + "' line " + std::to_string(lineno) +
                    ": cannot parse fields");
    }
    if (e.fold < 0)
      throw IoError("manifest '" + path + "' line " + std::to_string(lineno) + ": negative fold");
    m.entries.push_back(std::move(e));
  }
  if (m.entries.empty()) throw IoError("manifest '" + path + "' has no data rows");

  for (const ManifestEntry& e : m.entries) m.n_folds = std::max(m.n_folds, e.fold + 1);
  // Duplicate path in one fold: keep both with a warning. Across folds the
  // same slide would leak between train and test, so that is an error.
  for (size_t i = 0; i < m.entries.size(); ++i) {
    for (size_t j = i + 1; j < m.entries.size(); ++j) {
      if (m.entries[i].path != m.entries[j].path) continue;
      if (m.entries[i].fold != m.entries[j].fold)
        throw IoError("manifest '" + path + "': bag '" + m.entries[i].path +
                      "' appears in folds " + std::to_string(m.entries[i].fold) + " and " +
                      std::to_string(m.entries[j].fold) + " (overlapping folds)");
      std::cerr << "warning: manifest duplicate bag_path '" << m.entries[i].path
                << "', both rows kept\n";
    }
  }
  return m;
}

void write_manifest(const Manifest& m, const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot open manifest '" + path + "' for writing");
  if (m.task == Task::classification) {
    f << "path\tlabel\tfold\n";
    for (const ManifestEntry& e : m.entries)
      f << e.path << "\t" << (e.label ? *e.label : -1) << "\t" << e.fold << "\n";
  } else {
    f << "path\ttime\tevent\tfold\n";
    for (const ManifestEntry& e : m.entries)
      f << e.path << "\t" << (e.survival ? e.survival->time : 0.0) << "\t"
        << (e.survival && e.survival->event ? 1 : 0) << "\t" << e.fold << "\n";
  }
  if (!f) throw IoError("write failed for manifest '" + path + "'");
}

FoldSplit fold_split(const Manifest& m, int fold) {
  FoldSplit s;
  const Index n = static_cast<Index>(m.entries.size());
  if (m.n_folds <= 1) {
    // single split by row order: 60/20/20
    const Index n_test = std::max<Index>(1, n / 5);
    const Index n_val = std::max<Index>(1, n / 5);
    if (n_test + n_val >= n) throw ConfigError("fold_split: too few rows for a single split");
    for (Index i = 0; i < n - n_test - n_val; ++i) s.train.push_back(i);
    for (Index i = n - n_test - n_val; i < n - n_test; ++i) s.val.push_back(i);
    for (Index i = n - n_test; i < n; ++i) s.test.push_back(i);
    return s;
  }
  if (fold < 0 || fold >= m.n_folds)
    throw ConfigError("fold_split: fold " + std::to_string(fold) + " out of range (" +
                      std::to_string(m.n_folds) + " folds)");
  const int val_fold = (fold + 1) % m.n_folds;
  for (Index i = 0; i < n; ++i) {
    const int fo = m.entries[i].fold;
    if (fo == fold)
      s.test.push_back(i);
    else if (fo == val_fold)
      s.val.push_back(i);
    else
      s.train.push_back(i);
  }
  if (s.train.empty() || s.val.empty() || s.test.empty())
    throw ConfigError("fold_split: fold " + std::to_string(fold) +
                      " leaves an empty train/val/test partition");
  return s;
}

}  // namespace deltamil
