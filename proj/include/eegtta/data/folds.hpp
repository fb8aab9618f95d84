#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace eegtta {

struct Fold {
  std::vector<std::uint16_t> train;
  std::uint16_t target{0};
};

// Leave-one-subject-out folds ordered by target id.
std::vector<Fold> loso_folds(std::span<const std::uint16_t> subjects);

}  // namespace eegtta
