#include "fedsplit/metrics.hpp"

#include <algorithm>
#include <numeric>

#include "fedsplit/errors.hpp"

namespace fedsplit {

ConfusionCounts confusion(const std::vector<double>& probabilities,
                          const std::vector<int>& labels, double threshold) {
  if (probabilities.size() != labels.size()) {
    throw InputError("confusion: " + std::to_string(probabilities.size()) + " scores vs " +
                     std::to_string(labels.size()) + " labels");
  }
  ConfusionCounts c;
  for (size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] != 0 && labels[i] != 1) {
      throw InputError("confusion: label " + std::to_string(labels[i]) + " is not binary");
    }
    const bool predicted_positive = probabilities[i] >= threshold;
    if (labels[i] == 1) {
      predicted_positive ? ++c.tp : ++c.fn;
    } else {
      predicted_positive ? ++c.fp : ++c.tn;
    }
  }
  return c;
}

MetricSet metrics(const ConfusionCounts& c) {
  if (c.total() == 0) throw InputError("metrics: empty confusion counts");
  MetricSet m;
  m.acc = static_cast<double>(c.tp + c.tn) / static_cast<double>(c.total());
  auto rate = [&m](int64_t num, int64_t den) {
    if (den == 0) {
      m.degenerate = true;
      return 0.0;
    }
    return static_cast<double>(num) / static_cast<double>(den);
  };
  m.tpr = rate(c.tp, c.tp + c.fn);
  m.fpr = rate(c.fp, c.fp + c.tn);
  m.f1 = rate(2 * c.tp, 2 * c.tp + c.fp + c.fn);
  return m;
}

double auc(const std::vector<ScoredPrediction>& scored) {
  int64_t positives = 0, negatives = 0;
  for (const auto& s : scored) (s.label == 1 ? positives : negatives)++;
  if (positives == 0 || negatives == 0) {
    throw InputError("auc: need at least one positive and one negative sample");
  }
  std::vector<size_t> order(scored.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&scored](size_t a, size_t b) {
    return scored[a].probability < scored[b].probability;
  });
  // Average ranks over tied scores, then the Mann-Whitney rank-sum statistic.
  double positive_rank_sum = 0.0;
  size_t i = 0;
  while (i < order.size()) {
    size_t j = i;
    while (j < order.size() &&
           scored[order[j]].probability == scored[order[i]].probability) {
      ++j;
    }
    const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);  // 1-based average
    for (size_t k = i; k < j; ++k) {
      if (scored[order[k]].label == 1) positive_rank_sum += avg_rank;
    }
    i = j;
  }
  const double u = positive_rank_sum -
                   static_cast<double>(positives) * (static_cast<double>(positives) + 1.0) / 2.0;
  return u / (static_cast<double>(positives) * static_cast<double>(negatives));
}

ClientMetrics aggregate_clients(const std::vector<ClientMetrics>& records) {
  if (records.empty()) throw InputError("aggregate_clients: no client records");
  ClientMetrics mean;
  for (const auto& r : records) {
    mean.acc += r.acc;
    mean.tpr += r.tpr;
    mean.fpr += r.fpr;
    mean.f1 += r.f1;
    mean.auc += r.auc;
    mean.loss += r.loss;
  }
  const double n = static_cast<double>(records.size());
  mean.acc /= n;
  mean.tpr /= n;
  mean.fpr /= n;
  mean.f1 /= n;
  mean.auc /= n;
  mean.loss /= n;
  return mean;
}

}  // namespace fedsplit
