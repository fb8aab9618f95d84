#pragma once

#include <cstdint>
#include <vector>

#include "eegtta/data/records.hpp"

namespace eegtta {

// Synthetic drifting EEG-like streams. Each segment is
//   x = g_s(t) · M_s · S_y  +  noise · (M_s · B + e)
// with S_y the fixed source template of class y, M_s a subject-specific mixing matrix
// (shared pattern plus a subject deviation), g_s(t) a subject gain that drifts linearly over the
// stream, B random background oscillations and e sensor noise. Labels follow a sticky two-state
// Markov chain.
struct SynthConfig {
  std::size_t subjects{11};
  std::uint16_t channels{30};
  std::uint32_t samples{384};
  std::uint32_t sample_rate{128};
  std::size_t stream_length{600};
  std::uint64_t template_seed{1};
  std::uint64_t mixing_seed{2};
  std::vector<double> alert_freqs{18.0, 23.0};   // Hz
  std::vector<double> drowsy_freqs{4.5, 6.5};    // Hz
  double alert_amp{1.0};
  double drowsy_amp{1.8};
  double cross_amp{0.3};       // off-class rhythm amplitude in each template
  double stickiness{0.95};     // P(label_t == label_{t-1})
  double drift{0.5};           // relative gain change from the first to the last segment
  double noise{2.0};
  double mixing_shift{0.6};    // subject deviation relative to the shared mixing pattern
  double gain_spread{0.8};     // std of the log subject gain
  double freq_jitter{1.0};     // max subject shift of template frequencies, Hz
  std::size_t background_sources{6};

  void validate() const;
};

// Subjects 1..S, one session each, labels set and RTs consistent with the labeling rule.
Dataset synth_stream(const SynthConfig& cfg, std::uint64_t seed);

// Two-state Markov labels with P(stay) = stickiness; the first label is a fair coin.
std::vector<int> markov_labels(std::size_t length, double stickiness, std::uint64_t seed);

}  // namespace eegtta
