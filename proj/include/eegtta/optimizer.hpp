#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "eegtta/network.hpp"

namespace eegtta {

enum class OptKind : std::uint8_t { Adam = 0, AdamW = 1 };

template <std::floating_point T>
struct OptState {
  OptKind kind{OptKind::AdamW};
  std::uint64_t step{0};
  double lr{1e-3};
  double beta1{0.9};
  double beta2{0.999};
  double weight_decay{0.0};
  double eps{1e-8};
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;
};

template <std::floating_point T>
OptState<T> make_adam(double lr);
template <std::floating_point T>
OptState<T> make_adamw(double lr, double weight_decay);

// One Adam/AdamW update with bias correction. AdamW applies the decoupled decay
// p -= lr * wd * p after the moment step. Moment buffers are created lazily on the first call
// and must keep the same layout afterwards.
template <std::floating_point T>
void optimizer_step(std::span<const std::span<T>> params, const ParamGrads<T>& grads,
                    OptState<T>& opt);

}  // namespace eegtta
