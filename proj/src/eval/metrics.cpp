#include "eegtta/eval/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace eegtta {

Confusion confusion(std::span<const int> truth, std::span<const int> pred) {
  if (truth.size() != pred.size()) throw std::invalid_argument("confusion: length mismatch");
  Confusion c;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const bool t = truth[i] == 1, p = pred[i] == 1;
    if (t && p) ++c.tp;
    else if (!t && p) ++c.fp;
    else if (t && !p) ++c.fn;
    else ++c.tn;
  }
  return c;
}

double auroc(std::span<const int> truth, std::span<const double> score) {
  if (truth.size() != score.size()) throw std::invalid_argument("auroc: length mismatch");
  const std::size_t n = truth.size();
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return score[a] < score[b]; });
  // Mann-Whitney U with average ranks for tied scores.
  double rank_sum = 0.0;
  std::size_t pos = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && score[idx[j]] == score[idx[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t k = i; k < j; ++k)
      if (truth[idx[k]] == 1) rank_sum += avg;
    i = j;
  }
  for (int t : truth) pos += t == 1 ? 1 : 0;
  const std::size_t neg = n - pos;
  if (pos == 0 || neg == 0) return 50.0;
  const double p = static_cast<double>(pos), q = static_cast<double>(neg);
  const double u = rank_sum - p * (p + 1.0) / 2.0;
  return 100.0 * u / (p * q);
}

Metrics compute_metrics(std::span<const int> truth, std::span<const int> pred,
                        std::span<const double> score) {
  if (truth.empty()) throw std::invalid_argument("metrics of an empty log");
  const Confusion c = confusion(truth, pred);
  Metrics m;
  const double tp = static_cast<double>(c.tp);
  m.precision = c.tp + c.fp ? 100.0 * tp / static_cast<double>(c.tp + c.fp) : 0.0;
  m.recall = c.tp + c.fn ? 100.0 * tp / static_cast<double>(c.tp + c.fn) : 0.0;
  m.f1 = m.precision + m.recall > 0.0 ? 2.0 * m.precision * m.recall / (m.precision + m.recall) : 0.0;
  m.auroc = auroc(truth, score);
  return m;
}

Metrics compute_metrics(const PredictionLog& log) {
  std::vector<int> truth, pred;
  std::vector<double> score;
  for (const auto& e : log.entries) {
    if (!e.truth) throw std::invalid_argument("metrics: step " + std::to_string(e.step) + " has no true label");
    if (e.probs.size() < 2) throw std::invalid_argument("metrics: need two class probabilities");
    truth.push_back(*e.truth);
    pred.push_back(e.predicted);
    score.push_back(static_cast<double>(e.probs[1]));
  }
  return compute_metrics(truth, pred, score);
}

MeanStd aggregate(std::span<const Metrics> per_subject) {
  if (per_subject.empty()) throw std::invalid_argument("aggregate of no subjects");
  const double n = static_cast<double>(per_subject.size());
  MeanStd out;
  const auto field = [&](double Metrics::*f, double& mean, double& sd) {
    double s = 0.0;
    for (const auto& m : per_subject) s += m.*f;
    mean = s / n;
    double v = 0.0;
    for (const auto& m : per_subject) v += (m.*f - mean) * (m.*f - mean);
    sd = std::sqrt(v / n);
  };
  field(&Metrics::f1, out.mean.f1, out.std.f1);
  field(&Metrics::auroc, out.mean.auroc, out.std.auroc);
  field(&Metrics::precision, out.mean.precision, out.std.precision);
  field(&Metrics::recall, out.mean.recall, out.std.recall);
  return out;
}

}  // namespace eegtta
