#include "deltamil/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace deltamil {

Index argmax_lowest(const Tensor& probs) {
  Index best = 0;
  for (Index i = 1; i < probs.size(); ++i)
    if (probs[i] > probs[best]) best = i;
  return best;
}

double accuracy(const std::vector<Index>& preds, const std::vector<Index>& labels) {
  if (preds.size() != labels.size()) throw ShapeError("accuracy: length mismatch");
  if (preds.empty()) throw ValueError("accuracy: empty input");
  Index hit = 0;
  for (size_t i = 0; i < preds.size(); ++i)
    if (preds[i] == labels[i]) ++hit;
  return static_cast<double>(hit) / static_cast<double>(preds.size());
}

double auc_binary(const std::vector<double>& scores, const std::vector<Index>& labels) {
  if (scores.size() != labels.size()) throw ShapeError("auc: length mismatch");
  Index n_pos = 0, n_neg = 0;
  for (Index l : labels) (l != 0 ? n_pos : n_neg)++;
  if (n_pos == 0 || n_neg == 0)
    throw ValueError("auc: undefined, only one class present (" + std::to_string(n_pos) +
                     " positive / " + std::to_string(n_neg) + " negative)");

  // Average ranks with midrank tie handling, then the Mann-Whitney identity.
  const size_t n = scores.size();
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), size_t{0});
  std::sort(order.begin(), order.end(),
            [&](size_t a, size_t b) { return scores[a] < scores[b]; });
  std::vector<double> rank(n);
  size_t i = 0;
  while (i < n) {
    size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double mid = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j + 1));
    for (size_t k = i; k <= j; ++k) rank[order[k]] = mid;
    i = j + 1;
  }
  double rank_sum_pos = 0.0;
  for (size_t k = 0; k < n; ++k)
    if (labels[k] != 0) rank_sum_pos += rank[k];
  const double np = static_cast<double>(n_pos), nn = static_cast<double>(n_neg);
  return (rank_sum_pos - np * (np + 1.0) / 2.0) / (np * nn);
}

double auc_macro_ovr(const std::vector<Tensor>& probs, const std::vector<Index>& labels,
                     Index n_classes) {
  if (probs.size() != labels.size()) throw ShapeError("auc: length mismatch");
  if (n_classes == 2) {
    std::vector<double> scores;
    scores.reserve(probs.size());
    for (const Tensor& p : probs) scores.push_back(p[1]);
    return auc_binary(scores, labels);
  }
  double total = 0.0;
  Index counted = 0;
  for (Index c = 0; c < n_classes; ++c) {
    std::vector<double> scores;
    std::vector<Index> binary;
    bool has_pos = false, has_neg = false;
    for (size_t i = 0; i < probs.size(); ++i) {
      scores.push_back(probs[i][c]);
      const bool pos = labels[i] == c;
      binary.push_back(pos ? 1 : 0);
      (pos ? has_pos : has_neg) = true;
    }
    if (!has_pos || !has_neg) continue;
    total += auc_binary(scores, binary);
    ++counted;
  }
  if (counted == 0) throw ValueError("auc: no class has both outcomes present");
  return total / static_cast<double>(counted);
}

double c_index(const std::vector<double>& risks, const std::vector<double>& times,
               const std::vector<bool>& events) {
  if (risks.size() != times.size() || risks.size() != events.size())
    throw ShapeError("c_index: length mismatch");
  for (double t : times)
    if (!(t > 0.0)) throw ValueError("c_index: times must be positive");
  double comparable = 0.0, concordant = 0.0;
  const size_t n = risks.size();
  for (size_t i = 0; i < n; ++i) {
    if (!events[i]) continue;
    for (size_t j = 0; j < n; ++j) {
      if (i == j || !(times[i] < times[j])) continue;
      comparable += 1.0;
      if (risks[i] > risks[j])
        concordant += 1.0;
      else if (risks[i] == risks[j])
        concordant += 0.5;
    }
  }
  if (comparable == 0.0) throw ValueError("c_index: zero comparable pairs");
  return concordant / comparable;
}

double MetricsReport::mean(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double MetricsReport::stdev(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean(v);
  double acc = 0.0;
  for (double x : v) acc += (x - m) * (x - m);
  return std::sqrt(acc / static_cast<double>(v.size()));
}

}  // namespace deltamil
