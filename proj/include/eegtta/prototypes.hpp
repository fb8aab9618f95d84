#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "eegtta/network.hpp"
#include "eegtta/tensor.hpp"

namespace eegtta {

// Which side of the energy threshold qualifies a memory sample for its class prototype.
enum class FilterDirection : std::uint8_t { Above = 0, Below = 1 };

struct PrototypeSet {
  Matrix<Real> protos;  // classes × feature_dim
  Real alpha{Real(0.9)};
  Real threshold{Real(-7)};
  FilterDirection direction{FilterDirection::Above};

  std::size_t classes() const { return protos.rows; }
  std::size_t dim() const { return protos.cols; }
};

// Prototype k := row k of the classifier weight (bias ignored).
PrototypeSet init_from_classifier(const Linear<Real>& head, Real alpha, Real threshold,
                                  FilterDirection direction = FilterDirection::Above);

struct PrototypeUpdateStats {
  std::vector<std::size_t> members;  // |M_k| per class
};

// Pseudo-label each row by argmax logits, keep rows whose energy passes the threshold rule,
// average per class and EMA-blend into the prototypes. Classes without members are unchanged.
PrototypeSet update(const PrototypeSet& set, const Matrix<Real>& features,
                    const Matrix<Real>& logits, PrototypeUpdateStats* stats = nullptr);

struct ClassPrediction {
  int label{0};
  std::vector<Real> probs;
};

// softmax over z · P_k; ties resolve to the lowest class index.
ClassPrediction predict(std::span<const Real> z, const PrototypeSet& set);

// softmax over raw classifier logits.
ClassPrediction predict_logits(std::span<const Real> logits);

// CSV rows "class,feature,value".
void write_prototypes_csv(const std::string& path, const PrototypeSet& set);

}  // namespace eegtta
