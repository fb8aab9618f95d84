#include "eegtta/memory_bank.hpp"

#include <cmath>
#include <numeric>
#include <stdexcept>

#include "eegtta/losses.hpp"

namespace eegtta {

Tensor4<Real> augment(const Tensor4<Real>& x, AugKind kind, const AugmentConfig& cfg,
                      std::mt19937_64& rng) {
  if (!x.all_finite()) throw std::invalid_argument("augment: non-finite segment");
  const Shape4 s = x.shape();
  Tensor4<Real> out = x;
  if (kind == AugKind::GaussianNoise) {
    if (cfg.noise_rel == 0.0) return out;
    std::normal_distribution<double> normal(0.0, 1.0);
    for (std::size_t n = 0; n < s.n; ++n)
      for (std::size_t c = 0; c < s.c; ++c)
        for (std::size_t h = 0; h < s.h; ++h) {
          Real* row = &out(n, c, h, 0);
          double mean = 0.0;
          for (std::size_t w = 0; w < s.w; ++w) mean += row[w];
          mean /= static_cast<double>(s.w);
          double var = 0.0;
          for (std::size_t w = 0; w < s.w; ++w) var += (row[w] - mean) * (row[w] - mean);
          const double sd = cfg.noise_rel * std::sqrt(var / static_cast<double>(s.w));
          for (std::size_t w = 0; w < s.w; ++w) row[w] += static_cast<Real>(sd * normal(rng));
        }
    return out;
  }

  const std::size_t pieces = cfg.segments;
  if (pieces == 0 || pieces > s.w)
    throw std::invalid_argument("augment: " + std::to_string(pieces) +
                                " permutation segments for time length " + std::to_string(s.w));
  if (pieces == 1) return out;
  // Piece k covers [start[k], start[k+1]); the first (w % pieces) pieces are one sample longer.
  std::vector<std::size_t> start(pieces + 1, 0);
  for (std::size_t k = 0; k < pieces; ++k)
    start[k + 1] = start[k] + s.w / pieces + (k < s.w % pieces ? 1 : 0);
  std::vector<std::size_t> order(pieces);
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t i = pieces - 1; i > 0; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i);
    std::swap(order[i], order[pick(rng)]);
  }
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c)
      for (std::size_t h = 0; h < s.h; ++h) {
        const Real* src = &x(n, c, h, 0);
        Real* dst = &out(n, c, h, 0);
        std::size_t pos = 0;
        for (std::size_t k : order)
          for (std::size_t w = start[k]; w < start[k + 1]; ++w) dst[pos++] = src[w];
      }
  return out;
}

Real removal_score(std::span<const Real> logits, std::uint64_t persistence) {
  if (persistence == 0) throw std::invalid_argument("removal_score: persistence must be >= 1");
  const Real a = static_cast<Real>(persistence);
  return log_sum_exp<Real>(logits, Real(1) / (a * a));
}

std::size_t select_eviction(std::span<const Real> scores, std::span<const std::uint64_t> times,
                            EvictionDirection dir) {
  if (scores.empty() || scores.size() != times.size())
    throw std::invalid_argument("select_eviction: bad candidate set");
  std::size_t best = 0;
  for (std::size_t i = 1; i < scores.size(); ++i) {
    const bool better = dir == EvictionDirection::Highest ? scores[i] > scores[best]
                                                          : scores[i] < scores[best];
    if (better || (scores[i] == scores[best] && times[i] < times[best])) best = i;
  }
  return best;
}

MemoryBank::MemoryBank(std::size_t capacity, std::uint64_t seed, AugmentConfig aug,
                       EvictionDirection direction)
    : capacity_(capacity), aug_(aug), direction_(direction), rng_(seed) {
  if (capacity_ == 0) throw std::invalid_argument("memory bank capacity must be >= 1");
}

void MemoryBank::initialize(const Tensor4<Real>& x1, const Network<Real>& net) {
  if (!items_.empty()) throw std::logic_error("memory bank already initialized");
  insert(x1, 1, net);
  for (std::size_t k = 1; k < capacity_; ++k) {
    const AugKind kind = (k % 2 == 1) ? AugKind::GaussianNoise : AugKind::Permutation;
    insert(augment(x1, kind, aug_, rng_), 1, net);
  }
}

std::uint64_t MemoryBank::insert(const Tensor4<Real>& x, std::uint64_t t, const Network<Real>& net) {
  return insert(x, net.make_stem_cache(x), t);
}

std::uint64_t MemoryBank::insert(const Tensor4<Real>& x, StemCache<Real> stem, std::uint64_t t) {
  if (x.shape().n != 1) throw std::invalid_argument("memory bank stores single segments");
  if (t == 0) throw std::invalid_argument("memory bank: time steps start at 1");
  MemoryItem item;
  item.id = next_id_++;
  item.segment = x;
  item.stem = std::move(stem);
  item.insertion_time = t;
  items_.push_back(std::move(item));
  return items_.back().id;
}

StemCache<Real> MemoryBank::stacked_stems() const {
  std::vector<const StemCache<Real>*> ptrs;
  ptrs.reserve(items_.size());
  for (const auto& it : items_) ptrs.push_back(&it.stem);
  return stack_stems<Real>(ptrs);
}

EvictionReport MemoryBank::evict(std::uint64_t t_now, const Network<Real>& net) {
  EvictionReport rep;
  if (items_.empty()) return rep;
  const auto res = net.forward_cached(stacked_stems(), false);
  std::vector<std::uint64_t> times;
  for (std::size_t i = 0; i < items_.size(); ++i) {
    auto& it = items_[i];
    if (it.insertion_time > t_now) throw std::logic_error("memory item inserted in the future");
    auto row = res.logits.row(i);
    it.cached_logits.assign(row.begin(), row.end());
    rep.candidate_ids.push_back(it.id);
    rep.candidate_scores.push_back(removal_score(it.cached_logits, it.persistence(t_now)));
    times.push_back(it.insertion_time);
  }
  if (items_.size() > capacity_) {
    const std::size_t k = select_eviction(rep.candidate_scores, times, direction_);
    rep.evicted_id = items_[k].id;
    rep.evicted_score = rep.candidate_scores[k];
    items_.erase(items_.begin() + static_cast<std::ptrdiff_t>(k));
  }
  return rep;
}

}  // namespace eegtta
