#include "eegtta/prototypes.hpp"

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <stdexcept>

#include "eegtta/losses.hpp"

namespace eegtta {

PrototypeSet init_from_classifier(const Linear<Real>& head, Real alpha, Real threshold,
                                  FilterDirection direction) {
  if (alpha < Real(0) || alpha > Real(1)) throw std::invalid_argument("EMA alpha must be in [0,1]");
  PrototypeSet set;
  set.protos = Matrix<Real>(head.out, head.in);
  std::copy(head.weight.begin(), head.weight.end(), set.protos.data.begin());
  set.alpha = alpha;
  set.threshold = threshold;
  set.direction = direction;
  return set;
}

namespace {

int argmax(std::span<const Real> v) {
  return static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
}

}  // namespace

PrototypeSet update(const PrototypeSet& set, const Matrix<Real>& features,
                    const Matrix<Real>& logits, PrototypeUpdateStats* stats) {
  if (features.rows != logits.rows)
    throw std::invalid_argument("prototype update: feature/logit row mismatch");
  if (features.cols != set.dim() || logits.cols != set.classes())
    throw std::invalid_argument("prototype update: dimension mismatch");
  const std::size_t nc = set.classes();
  const std::size_t d = set.dim();
  Matrix<double> sums(nc, d, 0.0);
  std::vector<std::size_t> count(nc, 0);
  for (std::size_t i = 0; i < features.rows; ++i) {
    const auto f = logits.row(i);
    const Real e = energy_score<Real>(f, Real(1));
    const bool pass = set.direction == FilterDirection::Above ? e > set.threshold : e < set.threshold;
    if (!pass) continue;
    const auto k = static_cast<std::size_t>(argmax(f));
    ++count[k];
    auto z = features.row(i);
    for (std::size_t j = 0; j < d; ++j) sums(k, j) += z[j];
  }
  PrototypeSet out = set;
  for (std::size_t k = 0; k < nc; ++k) {
    if (count[k] == 0) continue;
    const double inv = 1.0 / static_cast<double>(count[k]);
    auto p = out.protos.row(k);
    for (std::size_t j = 0; j < d; ++j)
      p[j] = set.alpha * p[j] + (Real(1) - set.alpha) * static_cast<Real>(sums(k, j) * inv);
  }
  if (stats) stats->members = std::move(count);
  return out;
}

ClassPrediction predict(std::span<const Real> z, const PrototypeSet& set) {
  if (z.size() != set.dim()) throw std::invalid_argument("prototype predict: dimension mismatch");
  std::vector<Real> sim(set.classes());
  for (std::size_t k = 0; k < set.classes(); ++k) {
    auto p = set.protos.row(k);
    Real acc = Real(0);
    for (std::size_t j = 0; j < z.size(); ++j) acc += z[j] * p[j];
    sim[k] = acc;
  }
  return predict_logits(sim);
}

ClassPrediction predict_logits(std::span<const Real> logits) {
  ClassPrediction out;
  out.probs = softmax<Real>(logits);
  out.label = argmax(logits);
  return out;
}

void write_prototypes_csv(const std::string& path, const PrototypeSet& set) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
  out << "class,feature,value\n" << std::setprecision(9);
  for (std::size_t k = 0; k < set.classes(); ++k)
    for (std::size_t j = 0; j < set.dim(); ++j) out << k << ',' << j << ',' << set.protos(k, j) << '\n';
  if (!out) throw std::runtime_error("write failed for '" + path + "'");
}

}  // namespace eegtta
