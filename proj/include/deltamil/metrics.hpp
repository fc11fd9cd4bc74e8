// Evaluation metrics: accuracy, ROC AUC (rank form of the Mann-Whitney
// statistic), and the survival concordance index.
#pragma once

#include <vector>

#include "deltamil/tensor.hpp"

namespace deltamil {

// Argmax with ties broken toward the lowest class index.
Index argmax_lowest(const Tensor& probs);

double accuracy(const std::vector<Index>& preds, const std::vector<Index>& labels);

// Binary AUC = P(score+ > score-) + 1/2 P(equal); errors unless both classes
// are present.
double auc_binary(const std::vector<double>& scores, const std::vector<Index>& labels);

// One-vs-rest macro average over classes present with both outcomes.
double auc_macro_ovr(const std::vector<Tensor>& probs, const std::vector<Index>& labels,
                     Index n_classes);

// Harrell's C over comparable pairs (t_i < t_j with event_i observed);
// ties in risk earn half credit. Errors when no pair is comparable.
double c_index(const std::vector<double>& risks, const std::vector<double>& times,
               const std::vector<bool>& events);

struct MetricsReport {
  std::vector<double> fold_acc;
  std::vector<double> fold_auc;
  std::vector<double> fold_cindex;

  static double mean(const std::vector<double>& v);
  static double stdev(const std::vector<double>& v);  // population std over folds
};

}  // namespace deltamil
