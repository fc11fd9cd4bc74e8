// Attention-based patch retention protocol: extract per-patch attention from
// a trained model, keep random-k / top-k / bottom-k subsets, re-predict on
// the retained patches, sweep the retained ratio, and export heatmaps.
#pragma once

#include <random>
#include <string>

#include "deltamil/model.hpp"

namespace deltamil {

enum class Strategy { random_k, top_k, bottom_k };
std::string to_string(Strategy s);
Strategy strategy_from_string(const std::string& s);

// The aggregator's softmax weights in patch order. Errors for pooling
// aggregators ("no attention available").
Tensor extract_attention(const Model& model, const PatchBag& bag);

// Exactly k indices, ascending. Ties in top/bottom selection are trimmed by
// ascending patch index.
std::vector<Index> select_subset(const Tensor& alpha, Index k, Strategy strategy,
                                 std::mt19937_64& rng);

// Restrict features and coords to P (original order) and run the model.
PatchBag sub_bag(const PatchBag& bag, const std::vector<Index>& keep);
Tensor repredict(const Model& model, const PatchBag& bag, const std::vector<Index>& keep);

struct RetentionCurve {
  Strategy strategy = Strategy::top_k;
  std::vector<std::pair<double, double>> points;  // (retained ratio, ACC)
  Index seed_count = 1;
};

// Per ratio r: k = max(1, round(r*N)) per bag; metric is dataset accuracy.
// random_k points average over the given seeds.
RetentionCurve sweep(const Model& model, const std::vector<PatchBag>& bags, Strategy strategy,
                     const std::vector<double>& ratios, const std::vector<std::uint64_t>& seeds);

void write_curve(const RetentionCurve& curve, std::ostream& out);

enum class HeatmapNorm { minmax, percentile };
HeatmapNorm heatmap_norm_from_string(const std::string& s);

// Binary P5 graymap; pixel (r,c) encodes the normalized attention of the
// patch there, 0 where no patch sits.
void export_heatmap(const Tensor& alpha, const std::vector<Coord>& coords,
                    const std::string& path, HeatmapNorm norm);

// Midrank percentile of each entry, in [0,1].
std::vector<double> percentile_ranks(const Tensor& alpha);
// Mean percentile over witness patches; errors on an empty mask.
double witness_percentile(const Tensor& alpha, const std::vector<std::uint8_t>& mask);

}  // namespace deltamil
