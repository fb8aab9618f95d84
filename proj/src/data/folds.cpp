#include "eegtta/data/folds.hpp"

#include <algorithm>
#include <stdexcept>
#include <string>

namespace eegtta {

std::vector<Fold> loso_folds(std::span<const std::uint16_t> subjects) {
  std::vector<std::uint16_t> ids(subjects.begin(), subjects.end());
  std::sort(ids.begin(), ids.end());
  if (std::adjacent_find(ids.begin(), ids.end()) != ids.end())
    throw std::invalid_argument("duplicate subject ids in fold request");
  if (ids.size() < 2)
    throw std::invalid_argument("leave-one-subject-out needs at least 2 subjects, got " +
                                std::to_string(ids.size()));
  std::vector<Fold> folds;
  for (std::uint16_t target : ids) {
    Fold f;
    f.target = target;
    for (std::uint16_t s : ids)
      if (s != target) f.train.push_back(s);
    folds.push_back(std::move(f));
  }
  return folds;
}

}  // namespace eegtta
