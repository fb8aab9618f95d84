#pragma once

#include <span>
#include <vector>

#include "eegtta/tensor.hpp"

namespace eegtta {

template <std::floating_point T>
struct LossWeights {
  T lambda_ent{T(2)};
  T lambda_eng{T(0.01)};
  T m_in{T(-15)};
  T m_out{T(-7)};
  T tau{T(1)};

  void validate() const;
};

// log Σ_k exp(scale · v_k), max-shifted.
template <std::floating_point T>
T log_sum_exp(std::span<const T> v, T scale = T(1));

template <std::floating_point T>
std::vector<T> softmax(std::span<const T> v);
template <std::floating_point T>
Matrix<T> softmax_rows(const Matrix<T>& logits);

template <std::floating_point T>
struct LossGrad {
  T value{T(0)};
  Matrix<T> dlogits;
};

// Mean Shannon entropy of softmax(logits) rows, with its gradient w.r.t. the logits.
template <std::floating_point T>
LossGrad<T> entropy_loss(const Matrix<T>& logits);

// Mean entropy of explicit probability rows (0·log 0 := 0). Rows must be distributions.
template <std::floating_point T>
T entropy_of_probs(const Matrix<T>& probs);

// E = -log Σ_k exp(f_k / τ²).
template <std::floating_point T>
T energy_score(std::span<const T> logits, T tau);

// dE/df_k = -softmax(f/τ²)_k / τ².
template <std::floating_point T>
std::vector<T> energy_grad(std::span<const T> logits, T tau);

template <std::floating_point T>
struct EnergyBoundedLoss {
  T value{T(0)};
  std::vector<T> d_orig;  // dL/dE(x_i)
  std::vector<T> d_aug;   // dL/dE(x'_j)
};

// mean max(0, E(x) - m_in)² + mean max(0, m_out - E(x'))². An empty side contributes 0.
template <std::floating_point T>
EnergyBoundedLoss<T> energy_bounded_loss(std::span<const T> e_orig, std::span<const T> e_aug,
                                         T m_in, T m_out);

template <std::floating_point T>
struct TotalLoss {
  T total{T(0)};
  T entropy{T(0)};
  T energy{T(0)};
  Matrix<T> d_mem;
  Matrix<T> d_aug;
};

// λ_ent · entropy(mem) + λ_eng · energy-bounded(mem, aug).
template <std::floating_point T>
TotalLoss<T> total_loss(const Matrix<T>& logits_mem, const Matrix<T>& logits_aug,
                        const LossWeights<T>& w);

// Mean softmax cross-entropy against integer labels (pretraining objective).
template <std::floating_point T>
LossGrad<T> cross_entropy(const Matrix<T>& logits, std::span<const int> labels);

}  // namespace eegtta
