#pragma once

#include <cstdint>
#include <span>

#include "eegtta/network.hpp"

namespace eegtta {

struct PretrainConfig {
  double lr{1e-3};
  std::size_t batch{32};
  std::size_t epochs{100};
  std::size_t max_per_subject{0};  // 0 = every labeled segment; otherwise an evenly strided subset
};

struct PretrainStats {
  std::size_t samples{0};
  double final_loss{0.0};
  double train_accuracy{0.0};  // percent, inference mode after training
};

// Supervised source training: Adam on every parameter, softmax cross-entropy, dropout on,
// BN on batch statistics with momentum-tracked running statistics. The returned network is
// switched to FixedSource.
Network<Real> pretrain(Network<Real> net, std::span<const Tensor4<Real>> x, std::span<const int> y,
                       const PretrainConfig& cfg, std::uint64_t seed, PretrainStats* stats = nullptr);

}  // namespace eegtta
