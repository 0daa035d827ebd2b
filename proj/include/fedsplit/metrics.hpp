#pragma once

#include <vector>

namespace fedsplit {

// Positive class = malicious = label 1; probability >= 0.5 predicts positive
// (ties go to positive).
struct ScoredPrediction {
  double probability = 0.0;  // softmax probability of the positive class
  int label = 0;
};

struct ConfusionCounts {
  int64_t tp = 0, fp = 0, tn = 0, fn = 0;

  int64_t total() const { return tp + fp + tn + fn; }
};

struct MetricSet {
  double acc = 0.0, tpr = 0.0, fpr = 0.0, f1 = 0.0;
  bool degenerate = false;  // some rate had a zero denominator and was set to 0
};

ConfusionCounts confusion(const std::vector<double>& probabilities,
                          const std::vector<int>& labels, double threshold = 0.5);

MetricSet metrics(const ConfusionCounts& counts);

// Rank-based (Mann-Whitney) AUC with average ranks for ties. Requires at
// least one positive and one negative sample.
double auc(const std::vector<ScoredPrediction>& scored);

struct ClientMetrics {
  double acc = 0.0, tpr = 0.0, fpr = 0.0, f1 = 0.0, auc = 0.0, loss = 0.0;
};

// Unweighted arithmetic mean per metric across clients.
ClientMetrics aggregate_clients(const std::vector<ClientMetrics>& records);

}  // namespace fedsplit
