#include "eegtta/optimizer.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace eegtta {

template <std::floating_point T>
OptState<T> make_adam(double lr) {
  OptState<T> s;
  s.kind = OptKind::Adam;
  s.lr = lr;
  return s;
}

template <std::floating_point T>
OptState<T> make_adamw(double lr, double weight_decay) {
  OptState<T> s;
  s.kind = OptKind::AdamW;
  s.lr = lr;
  s.weight_decay = weight_decay;
  return s;
}

template <std::floating_point T>
void optimizer_step(std::span<const std::span<T>> params, const ParamGrads<T>& grads,
                    OptState<T>& opt) {
  if (params.size() != grads.grads.size())
    throw std::invalid_argument("optimizer: " + std::to_string(params.size()) +
                                " parameter tensors but " + std::to_string(grads.grads.size()) +
                                " gradient buffers");
  for (std::size_t i = 0; i < params.size(); ++i)
    if (params[i].size() != grads.grads[i].size())
      throw std::invalid_argument("optimizer: shape mismatch in parameter " + std::to_string(i));

  if (opt.m.empty()) {
    for (const auto& p : params) {
      opt.m.emplace_back(p.size(), T(0));
      opt.v.emplace_back(p.size(), T(0));
    }
  } else if (opt.m.size() != params.size()) {
    throw std::invalid_argument("optimizer: moment buffers do not match parameter set");
  }

  ++opt.step;
  const double t = static_cast<double>(opt.step);
  const double bc1 = 1.0 - std::pow(opt.beta1, t);
  const double bc2 = 1.0 - std::pow(opt.beta2, t);
  const T b1 = static_cast<T>(opt.beta1);
  const T b2 = static_cast<T>(opt.beta2);
  const T lr = static_cast<T>(opt.lr);
  const T decay = opt.kind == OptKind::AdamW ? static_cast<T>(opt.lr * opt.weight_decay) : T(0);
  const T inv_bc1 = static_cast<T>(1.0 / bc1);
  const T inv_bc2 = static_cast<T>(1.0 / bc2);
  const T eps = static_cast<T>(opt.eps);

  for (std::size_t i = 0; i < params.size(); ++i) {
    std::span<T> p = params[i];
    const auto& g = grads.grads[i];
    auto& m = opt.m[i];
    auto& v = opt.v[i];
    if (m.size() != p.size()) throw std::invalid_argument("optimizer: moment shape mismatch");
    for (std::size_t k = 0; k < p.size(); ++k) {
      m[k] = b1 * m[k] + (T(1) - b1) * g[k];
      v[k] = b2 * v[k] + (T(1) - b2) * g[k] * g[k];
      const T mhat = m[k] * inv_bc1;
      const T vhat = v[k] * inv_bc2;
      p[k] -= lr * mhat / (std::sqrt(vhat) + eps);
      if (decay != T(0)) p[k] -= decay * p[k];
    }
  }
}

template OptState<float> make_adam<float>(double);
template OptState<double> make_adam<double>(double);
template OptState<float> make_adamw<float>(double, double);
template OptState<double> make_adamw<double>(double, double);
template void optimizer_step<float>(std::span<const std::span<float>>, const ParamGrads<float>&,
                                    OptState<float>&);
template void optimizer_step<double>(std::span<const std::span<double>>, const ParamGrads<double>&,
                                     OptState<double>&);

}  // namespace eegtta
