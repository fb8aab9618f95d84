#include "eegtta/losses.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace eegtta {

template <std::floating_point T>
void LossWeights<T>::validate() const {
  if (lambda_ent < T(0) || lambda_eng < T(0))
    throw std::invalid_argument("loss weights must be non-negative");
  if (!(m_in < m_out)) throw std::invalid_argument("energy margins require m_in < m_out");
  if (!(tau > T(0))) throw std::invalid_argument("temperature must be positive");
}

template <std::floating_point T>
T log_sum_exp(std::span<const T> v, T scale) {
  if (v.empty()) throw std::invalid_argument("log_sum_exp of empty vector");
  T m = v[0] * scale;
  for (T x : v) m = std::max(m, x * scale);
  if (!std::isfinite(m)) throw std::invalid_argument("log_sum_exp: non-finite logits");
  T s = T(0);
  for (T x : v) s += std::exp(x * scale - m);
  return m + std::log(s);
}

template <std::floating_point T>
std::vector<T> softmax(std::span<const T> v) {
  const T lse = log_sum_exp(v, T(1));
  std::vector<T> p(v.size());
  for (std::size_t k = 0; k < v.size(); ++k) p[k] = std::exp(v[k] - lse);
  return p;
}

template <std::floating_point T>
Matrix<T> softmax_rows(const Matrix<T>& logits) {
  Matrix<T> p(logits.rows, logits.cols);
  for (std::size_t i = 0; i < logits.rows; ++i) {
    auto row = softmax<T>(logits.row(i));
    std::copy(row.begin(), row.end(), p.row(i).begin());
  }
  return p;
}

template <std::floating_point T>
LossGrad<T> entropy_loss(const Matrix<T>& logits) {
  if (logits.rows == 0) throw std::invalid_argument("entropy_loss: empty batch");
  LossGrad<T> out;
  out.dlogits = Matrix<T>(logits.rows, logits.cols);
  const T inv_n = T(1) / static_cast<T>(logits.rows);
  T total = T(0);
  for (std::size_t i = 0; i < logits.rows; ++i) {
    auto f = logits.row(i);
    const T lse = log_sum_exp<T>(f, T(1));
    T h = T(0);
    std::vector<T> logp(f.size());
    for (std::size_t k = 0; k < f.size(); ++k) {
      logp[k] = f[k] - lse;
      h -= std::exp(logp[k]) * logp[k];
    }
    total += h;
    // dH/df_j = -p_j (log p_j + H)
    for (std::size_t k = 0; k < f.size(); ++k)
      out.dlogits(i, k) = -std::exp(logp[k]) * (logp[k] + h) * inv_n;
  }
  out.value = total * inv_n;
  return out;
}

template <std::floating_point T>
T entropy_of_probs(const Matrix<T>& probs) {
  if (probs.rows == 0) throw std::invalid_argument("entropy: empty batch");
  T total = T(0);
  for (std::size_t i = 0; i < probs.rows; ++i) {
    T sum = T(0);
    T h = T(0);
    for (T p : probs.row(i)) {
      if (!(p >= T(0) && p <= T(1)))
        throw std::invalid_argument("entropy: row " + std::to_string(i) + " is not a distribution");
      sum += p;
      if (p > T(0)) h -= p * std::log(p);
    }
    if (std::abs(sum - T(1)) > T(1e-5))
      throw std::invalid_argument("entropy: row " + std::to_string(i) + " does not sum to 1");
    total += h;
  }
  return total / static_cast<T>(probs.rows);
}

template <std::floating_point T>
T energy_score(std::span<const T> logits, T tau) {
  if (!(tau > T(0))) throw std::invalid_argument("energy_score: tau must be positive");
  return -log_sum_exp<T>(logits, T(1) / (tau * tau));
}

template <std::floating_point T>
std::vector<T> energy_grad(std::span<const T> logits, T tau) {
  const T scale = T(1) / (tau * tau);
  std::vector<T> scaled(logits.size());
  for (std::size_t k = 0; k < logits.size(); ++k) scaled[k] = logits[k] * scale;
  auto p = softmax<T>(scaled);
  for (T& v : p) v = -v * scale;
  return p;
}

template <std::floating_point T>
EnergyBoundedLoss<T> energy_bounded_loss(std::span<const T> e_orig, std::span<const T> e_aug,
                                         T m_in, T m_out) {
  EnergyBoundedLoss<T> out;
  out.d_orig.assign(e_orig.size(), T(0));
  out.d_aug.assign(e_aug.size(), T(0));
  if (!e_orig.empty()) {
    const T inv = T(1) / static_cast<T>(e_orig.size());
    T acc = T(0);
    for (std::size_t i = 0; i < e_orig.size(); ++i) {
      const T gap = std::max(T(0), e_orig[i] - m_in);
      acc += gap * gap;
      out.d_orig[i] = T(2) * gap * inv;
    }
    out.value += acc * inv;
  }
  if (!e_aug.empty()) {
    const T inv = T(1) / static_cast<T>(e_aug.size());
    T acc = T(0);
    for (std::size_t j = 0; j < e_aug.size(); ++j) {
      const T gap = std::max(T(0), m_out - e_aug[j]);
      acc += gap * gap;
      out.d_aug[j] = T(-2) * gap * inv;
    }
    out.value += acc * inv;
  }
  return out;
}

template <std::floating_point T>
TotalLoss<T> total_loss(const Matrix<T>& logits_mem, const Matrix<T>& logits_aug,
                        const LossWeights<T>& w) {
  w.validate();
  for (T v : logits_mem.data)
    if (!std::isfinite(v)) throw std::invalid_argument("total_loss: non-finite logits");
  for (T v : logits_aug.data)
    if (!std::isfinite(v)) throw std::invalid_argument("total_loss: non-finite augmented logits");

  TotalLoss<T> out;
  auto ent = entropy_loss(logits_mem);
  out.entropy = ent.value;

  std::vector<T> e_mem(logits_mem.rows);
  std::vector<T> e_aug(logits_aug.rows);
  for (std::size_t i = 0; i < logits_mem.rows; ++i) e_mem[i] = energy_score<T>(logits_mem.row(i), w.tau);
  for (std::size_t j = 0; j < logits_aug.rows; ++j) e_aug[j] = energy_score<T>(logits_aug.row(j), w.tau);
  auto eb = energy_bounded_loss<T>(e_mem, e_aug, w.m_in, w.m_out);
  out.energy = eb.value;
  out.total = w.lambda_ent * out.entropy + w.lambda_eng * out.energy;

  out.d_mem = Matrix<T>(logits_mem.rows, logits_mem.cols);
  for (std::size_t i = 0; i < logits_mem.rows; ++i) {
    const auto de = energy_grad<T>(logits_mem.row(i), w.tau);
    for (std::size_t k = 0; k < logits_mem.cols; ++k)
      out.d_mem(i, k) = w.lambda_ent * ent.dlogits(i, k) + w.lambda_eng * eb.d_orig[i] * de[k];
  }
  out.d_aug = Matrix<T>(logits_aug.rows, logits_aug.cols);
  for (std::size_t j = 0; j < logits_aug.rows; ++j) {
    const auto de = energy_grad<T>(logits_aug.row(j), w.tau);
    for (std::size_t k = 0; k < logits_aug.cols; ++k)
      out.d_aug(j, k) = w.lambda_eng * eb.d_aug[j] * de[k];
  }
  return out;
}

template <std::floating_point T>
LossGrad<T> cross_entropy(const Matrix<T>& logits, std::span<const int> labels) {
  if (labels.size() != logits.rows) throw std::invalid_argument("cross_entropy: label count mismatch");
  if (logits.rows == 0) throw std::invalid_argument("cross_entropy: empty batch");
  LossGrad<T> out;
  out.dlogits = Matrix<T>(logits.rows, logits.cols);
  const T inv_n = T(1) / static_cast<T>(logits.rows);
  T total = T(0);
  for (std::size_t i = 0; i < logits.rows; ++i) {
    const int y = labels[i];
    if (y < 0 || static_cast<std::size_t>(y) >= logits.cols)
      throw std::invalid_argument("cross_entropy: label out of range");
    auto f = logits.row(i);
    const T lse = log_sum_exp<T>(f, T(1));
    total += lse - f[static_cast<std::size_t>(y)];
    for (std::size_t k = 0; k < f.size(); ++k) {
      const T p = std::exp(f[k] - lse);
      out.dlogits(i, k) = (p - (static_cast<int>(k) == y ? T(1) : T(0))) * inv_n;
    }
  }
  out.value = total * inv_n;
  return out;
}

#define EEGTTA_INSTANTIATE(T)                                                                   \
  template struct LossWeights<T>;                                                               \
  template T log_sum_exp<T>(std::span<const T>, T);                                             \
  template std::vector<T> softmax<T>(std::span<const T>);                                       \
  template Matrix<T> softmax_rows<T>(const Matrix<T>&);                                         \
  template LossGrad<T> entropy_loss<T>(const Matrix<T>&);                                       \
  template T entropy_of_probs<T>(const Matrix<T>&);                                             \
  template T energy_score<T>(std::span<const T>, T);                                            \
  template std::vector<T> energy_grad<T>(std::span<const T>, T);                                \
  template EnergyBoundedLoss<T> energy_bounded_loss<T>(std::span<const T>, std::span<const T>, T, T); \
  template TotalLoss<T> total_loss<T>(const Matrix<T>&, const Matrix<T>&, const LossWeights<T>&); \
  template LossGrad<T> cross_entropy<T>(const Matrix<T>&, std::span<const int>);

EEGTTA_INSTANTIATE(float)
EEGTTA_INSTANTIATE(double)
#undef EEGTTA_INSTANTIATE

}  // namespace eegtta
