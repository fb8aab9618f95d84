#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <vector>

#include "eegtta/network.hpp"
#include "eegtta/tensor.hpp"

namespace eegtta {

enum class AugKind : std::uint8_t { GaussianNoise = 0, Permutation = 1 };

struct AugmentConfig {
  double noise_rel{0.1};     // noise std as a fraction of each electrode's std
  std::size_t segments{8};   // permutation pieces along time
};

// Augments one segment (n == 1). "Channel" here is an electrode row (the H axis).
Tensor4<Real> augment(const Tensor4<Real>& x, AugKind kind, const AugmentConfig& cfg,
                      std::mt19937_64& rng);

// Which end of the removal-score ranking is discarded.
enum class EvictionDirection : std::uint8_t { Highest = 0, Lowest = 1 };

struct MemoryItem {
  std::uint64_t id{0};
  Tensor4<Real> segment;          // 1 × 1 × electrodes × time
  StemCache<Real> stem;           // frozen-weight cache of `segment` from make_stem_cache
  std::uint64_t insertion_time{1};
  std::vector<Real> cached_logits;

  std::uint64_t persistence(std::uint64_t t_now) const { return t_now - insertion_time + 1; }
};

// log Σ_k exp(f_k / A²) with A the persistence time.
Real removal_score(std::span<const Real> logits, std::uint64_t persistence);

struct EvictionReport {
  std::vector<std::uint64_t> candidate_ids;
  std::vector<Real> candidate_scores;
  std::optional<std::uint64_t> evicted_id;
  Real evicted_score{0};
};

// Index of the item to discard: extreme score per `dir`, ties to the earliest insertion time,
// then the lowest index.
std::size_t select_eviction(std::span<const Real> scores, std::span<const std::uint64_t> times,
                            EvictionDirection dir);

class MemoryBank {
 public:
  MemoryBank(std::size_t capacity, std::uint64_t seed, AugmentConfig aug = {},
             EvictionDirection direction = EvictionDirection::Highest);

  std::size_t capacity() const { return capacity_; }
  std::size_t size() const { return items_.size(); }
  bool empty() const { return items_.empty(); }
  const std::vector<MemoryItem>& items() const { return items_; }
  const AugmentConfig& augment_config() const { return aug_; }
  EvictionDirection direction() const { return direction_; }

  // First stream step on an empty bank: x_1 plus capacity-1 augmented copies
  // (alternating Gaussian noise / permutation), all with insertion time 1.
  void initialize(const Tensor4<Real>& x1, const Network<Real>& net);

  std::uint64_t insert(const Tensor4<Real>& x, std::uint64_t t, const Network<Real>& net);
  std::uint64_t insert(const Tensor4<Real>& x, StemCache<Real> stem, std::uint64_t t);

  // Refreshes every item's logits with `net`, scores them at time t_now and, if the bank is over
  // capacity, discards the selected item.
  EvictionReport evict(std::uint64_t t_now, const Network<Real>& net);

  // Stem caches of all items stacked in stored order.
  StemCache<Real> stacked_stems() const;

 private:
  std::size_t capacity_;
  AugmentConfig aug_;
  EvictionDirection direction_;
  std::mt19937_64 rng_;
  std::vector<MemoryItem> items_;
  std::uint64_t next_id_{0};
};

}  // namespace eegtta
