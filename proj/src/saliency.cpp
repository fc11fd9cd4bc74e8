#include "deltamil/saliency.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <ostream>

#include "deltamil/metrics.hpp"

namespace deltamil {

std::string to_string(Strategy s) {
  switch (s) {
    case Strategy::random_k: return "random_k";
    case Strategy::top_k: return "top_k";
    case Strategy::bottom_k: return "bottom_k";
  }
  return "?";
}

Strategy strategy_from_string(const std::string& s) {
  if (s == "random_k") return Strategy::random_k;
  if (s == "top_k") return Strategy::top_k;
  if (s == "bottom_k") return Strategy::bottom_k;
  throw ConfigError("unknown strategy '" + s + "' (random_k|top_k|bottom_k)");
}

Tensor extract_attention(const Model& model, const PatchBag& bag) {
  if (model.config.arch == Arch::meanpool || model.config.arch == Arch::maxpool)
    throw ValueError("extract_attention: no attention available for aggregator '" +
                     to_string(model.config.arch) + "'");
  GradTape tape;
  ForwardOut fwd = forward_eval(tape, model, bag);
  return fwd.attention.value();
}

std::vector<Index> select_subset(const Tensor& alpha, Index k, Strategy strategy,
                                 std::mt19937_64& rng) {
  const Index n = alpha.size();
  if (k < 1 || k > n)
    throw ValueError("select_subset: k=" + std::to_string(k) + " out of range [1," +
                     std::to_string(n) + "]");
  std::vector<Index> idx(n);
  std::iota(idx.begin(), idx.end(), Index{0});
  switch (strategy) {
    case Strategy::top_k:
      std::sort(idx.begin(), idx.end(), [&](Index a, Index b) {
        if (alpha[a] != alpha[b]) return alpha[a] > alpha[b];
        return a < b;  // lowest index wins on ties
      });
      break;
    case Strategy::bottom_k:
      std::sort(idx.begin(), idx.end(), [&](Index a, Index b) {
        if (alpha[a] != alpha[b]) return alpha[a] < alpha[b];
        return a < b;
      });
      break;
    case Strategy::random_k:
      // Fisher-Yates prefix sample, independent of library internals.
      for (Index i = 0; i < k; ++i) {
        std::uniform_int_distribution<Index> pick(i, n - 1);
        std::swap(idx[i], idx[pick(rng)]);
      }
      break;
  }
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

PatchBag sub_bag(const PatchBag& bag, const std::vector<Index>& keep) {
  if (keep.empty()) throw ValueError("sub_bag: empty patch subset");
  PatchBag out;
  out.features = Tensor::zeros({static_cast<Index>(keep.size()), bag.feature_dim()});
  for (size_t i = 0; i < keep.size(); ++i) {
    if (keep[i] < 0 || keep[i] >= bag.n_patches())
      throw ValueError("sub_bag: index out of range");
    out.features.mat().row(static_cast<Index>(i)) = bag.features.mat().row(keep[i]);
    out.coords.push_back(bag.coords[keep[i]]);
    if (!bag.witness_mask.empty()) out.witness_mask.push_back(bag.witness_mask[keep[i]]);
  }
  out.label = bag.label;
  out.survival = bag.survival;
  return out;
}

Tensor repredict(const Model& model, const PatchBag& bag, const std::vector<Index>& keep) {
  PatchBag sb = sub_bag(bag, keep);
  GradTape tape;
  return forward_eval(tape, model, sb).output.value();
}

RetentionCurve sweep(const Model& model, const std::vector<PatchBag>& bags, Strategy strategy,
                     const std::vector<double>& ratios, const std::vector<std::uint64_t>& seeds) {
  if (model.config.task != Task::classification)
    throw ConfigError("sweep: retention curves are defined for classification runs");
  for (size_t i = 0; i < ratios.size(); ++i) {
    if (!(ratios[i] > 0.0 && ratios[i] <= 1.0))
      throw ConfigError("sweep: ratios must lie in (0,1]");
    if (i > 0 && !(ratios[i] > ratios[i - 1]))
      throw ConfigError("sweep: ratios must be strictly increasing");
  }
  if (bags.empty()) throw ValueError("sweep: no bags");
  const std::vector<std::uint64_t> eff_seeds =
      strategy == Strategy::random_k ? seeds : std::vector<std::uint64_t>{0};
  if (eff_seeds.empty()) throw ConfigError("sweep: random_k needs at least one seed");

  // Attention per bag is fixed by the trained model; compute once.
  std::vector<Tensor> alphas;
  alphas.reserve(bags.size());
  for (const PatchBag& b : bags) alphas.push_back(extract_attention(model, b));

  RetentionCurve curve;
  curve.strategy = strategy;
  curve.seed_count = static_cast<Index>(eff_seeds.size());
  for (double ratio : ratios) {
    double acc_sum = 0.0;
    for (std::uint64_t seed : eff_seeds) {
      std::vector<Index> preds, labels;
      for (size_t i = 0; i < bags.size(); ++i) {
        const Index n = bags[i].n_patches();
        const Index k = std::max<Index>(1, static_cast<Index>(std::llround(ratio * n)));
        std::mt19937_64 rng(seed ^ (0x9e3779b97f4a7c15ULL + i));
        std::vector<Index> keep = select_subset(alphas[i], std::min(k, n), strategy, rng);
        Tensor probs = repredict(model, bags[i], keep);
        preds.push_back(argmax_lowest(probs));
        if (!bags[i].label) throw ValueError("sweep: bag without label");
        labels.push_back(*bags[i].label);
      }
      acc_sum += accuracy(preds, labels);
    }
    curve.points.emplace_back(ratio, acc_sum / static_cast<double>(eff_seeds.size()));
  }
  return curve;
}

void write_curve(const RetentionCurve& curve, std::ostream& out) {
  out << "strategy\tratio\tmetric\tseeds\n";
  for (const auto& [ratio, metric] : curve.points)
    out << to_string(curve.strategy) << "\t" << ratio << "\t" << metric << "\t"
        << curve.seed_count << "\n";
}

HeatmapNorm heatmap_norm_from_string(const std::string& s) {
  if (s == "minmax") return HeatmapNorm::minmax;
  if (s == "percentile") return HeatmapNorm::percentile;
  throw ConfigError("unknown heatmap normalization '" + s + "' (minmax|percentile)");
}

std::vector<double> percentile_ranks(const Tensor& alpha) {
  const Index n = alpha.size();
  std::vector<Index> order(n);
  std::iota(order.begin(), order.end(), Index{0});
  std::sort(order.begin(), order.end(), [&](Index a, Index b) { return alpha[a] < alpha[b]; });
  std::vector<double> pct(n);
  Index i = 0;
  while (i < n) {
    Index j = i;
    while (j + 1 < n && alpha[order[j + 1]] == alpha[order[i]]) ++j;
    const double midrank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j + 1));
    for (Index k = i; k <= j; ++k) pct[order[k]] = (midrank - 0.5) / static_cast<double>(n);
    i = j + 1;
  }
  return pct;
}

double witness_percentile(const Tensor& alpha, const std::vector<std::uint8_t>& mask) {
  if (static_cast<Index>(mask.size()) != alpha.size())
    throw ShapeError("witness_percentile: mask length mismatch");
  std::vector<double> pct = percentile_ranks(alpha);
  double sum = 0.0;
  Index count = 0;
  for (size_t i = 0; i < mask.size(); ++i) {
    if (!mask[i]) continue;
    sum += pct[i];
    ++count;
  }
  if (count == 0) throw ValueError("witness_percentile: empty witness mask");
  return sum / static_cast<double>(count);
}

void export_heatmap(const Tensor& alpha, const std::vector<Coord>& coords,
                    const std::string& path, HeatmapNorm norm) {
  if (static_cast<Index>(coords.size()) != alpha.size())
    throw ShapeError("export_heatmap: coords/alpha length mismatch");
  std::vector<Coord> nc = normalize_coords(coords);
  GridLayout layout = make_grid_layout(nc);

  std::vector<double> values(alpha.size());
  if (norm == HeatmapNorm::percentile) {
    values = percentile_ranks(alpha);
  } else {
    double lo = alpha.array().minCoeff(), hi = alpha.array().maxCoeff();
    for (Index i = 0; i < alpha.size(); ++i)
      values[i] = hi > lo ? (alpha[i] - lo) / (hi - lo) : 0.5;
  }

  std::vector<unsigned char> pixels(layout.height * layout.width, 0);
  for (size_t i = 0; i < nc.size(); ++i) {
    double v = std::clamp(values[i], 0.0, 1.0);
    pixels[layout.cell_of_patch[i]] = static_cast<unsigned char>(std::lround(v * 255.0));
  }

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open heatmap path '" + path + "' for writing");
  f << "P5\n" << layout.width << " " << layout.height << "\n255\n";
  f.write(reinterpret_cast<const char*>(pixels.data()),
          static_cast<std::streamsize>(pixels.size()));
  if (!f) throw IoError("heatmap write failed for '" + path + "'");
}

}  // namespace deltamil
