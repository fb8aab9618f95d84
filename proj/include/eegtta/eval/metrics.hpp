#pragma once

#include <span>
#include <vector>

#include "eegtta/adapter.hpp"

namespace eegtta {

// Binary metrics with Drowsy (1) as the positive class, all in percent.
struct Metrics {
  double f1{0.0};
  double auroc{0.0};
  double precision{0.0};
  double recall{0.0};
};

struct Confusion {
  std::size_t tp{0}, fp{0}, tn{0}, fn{0};
};

Confusion confusion(std::span<const int> truth, std::span<const int> pred);

// Rank-based AUROC of `score` for label 1 (average ranks for ties). 50 when a class is absent.
double auroc(std::span<const int> truth, std::span<const double> score);

Metrics compute_metrics(std::span<const int> truth, std::span<const int> pred,
                        std::span<const double> score);
// Positive-class score = probs[1]. Every entry must carry a true label.
Metrics compute_metrics(const PredictionLog& log);

struct MeanStd {
  Metrics mean;
  Metrics std;  // population standard deviation
};

MeanStd aggregate(std::span<const Metrics> per_subject);

}  // namespace eegtta
