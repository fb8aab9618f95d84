#include "eegtta/data/synth.hpp"

#include <cmath>
#include <numbers>
#include <random>
#include <stdexcept>
#include <string>

namespace eegtta {

void SynthConfig::validate() const {
  if (subjects == 0 || channels == 0 || samples == 0 || sample_rate == 0 || stream_length == 0)
    throw std::invalid_argument("synth: subjects, channels, samples, rate and length must be positive");
  if (subjects > 65535) throw std::invalid_argument("synth: too many subjects");
  if (!(stickiness >= 0.0 && stickiness < 1.0)) throw std::invalid_argument("synth: stickiness must be in [0,1)");
  if (alert_freqs.empty() || drowsy_freqs.empty()) throw std::invalid_argument("synth: empty template frequencies");
  if (noise < 0.0 || mixing_shift < 0.0 || gain_spread < 0.0 || freq_jitter < 0.0)
    throw std::invalid_argument("synth: negative noise, shift, spread or jitter");
  if (drift <= -1.0) throw std::invalid_argument("synth: drift must exceed -1");
}

namespace {

std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
  std::uint64_t x = a * 0x9e3779b97f4a7c15ULL + b + 0x632be59bd9b4e5d6ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr double kTwoPi = 2.0 * std::numbers::pi;

// Unit-power sum of sinusoids.
void add_rhythm(std::vector<double>& row, const std::vector<double>& freqs, const std::vector<double>& phases,
                double shift, double amp, double rate) {
  const double norm = amp * std::sqrt(2.0 / static_cast<double>(freqs.size()));
  for (std::size_t k = 0; k < freqs.size(); ++k) {
    const double w = kTwoPi * (freqs[k] + shift) / rate;
    for (std::size_t t = 0; t < row.size(); ++t) row[t] += norm * std::sin(w * static_cast<double>(t) + phases[k]);
  }
}

}  // namespace

std::vector<int> markov_labels(std::size_t length, double stickiness, std::uint64_t seed) {
  if (!(stickiness >= 0.0 && stickiness < 1.0)) throw std::invalid_argument("stickiness must be in [0,1)");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<int> y(length);
  for (std::size_t t = 0; t < length; ++t) {
    if (t == 0) y[t] = u(rng) < 0.5 ? 0 : 1;
    else y[t] = u(rng) < stickiness ? y[t - 1] : 1 - y[t - 1];
  }
  return y;
}

Dataset synth_stream(const SynthConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  const std::size_t ch = cfg.channels, ns = cfg.samples;
  const std::size_t k_src = 2 + cfg.background_sources;
  const double rate = cfg.sample_rate;

  std::mt19937_64 trng(cfg.template_seed);
  std::uniform_real_distribution<double> phase(0.0, kTwoPi);
  std::vector<double> alert_ph(cfg.alert_freqs.size()), drowsy_ph(cfg.drowsy_freqs.size());
  for (auto& p : alert_ph) p = phase(trng);
  for (auto& p : drowsy_ph) p = phase(trng);

  std::mt19937_64 crng(mix(cfg.mixing_seed, 0));
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> common(ch * k_src);
  for (auto& v : common) v = normal(crng);

  Dataset d;
  d.channels = cfg.channels;
  d.samples = cfg.samples;
  d.sample_rate = cfg.sample_rate;
  d.records.reserve(cfg.subjects * cfg.stream_length);

  for (std::size_t s = 0; s < cfg.subjects; ++s) {
    const auto subject = static_cast<std::uint16_t>(s + 1);
    std::mt19937_64 mrng(mix(cfg.mixing_seed, s + 1));
    const double scale = 1.0 / std::sqrt(1.0 + cfg.mixing_shift * cfg.mixing_shift);
    std::vector<double> m(ch * k_src);
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = (common[i] + cfg.mixing_shift * normal(mrng)) * scale;
    const double gain = std::exp(cfg.gain_spread * normal(mrng));
    const double fshift = std::uniform_real_distribution<double>(-cfg.freq_jitter, cfg.freq_jitter)(mrng);

    // Fixed class templates in source space (rows 0: fast rhythm, 1: slow rhythm).
    std::vector<std::vector<double>> tmpl(2, std::vector<double>(2 * ns, 0.0));
    for (int y = 0; y < 2; ++y) {
      std::vector<double> fast(ns, 0.0), slow(ns, 0.0);
      add_rhythm(fast, cfg.alert_freqs, alert_ph, fshift, y == 0 ? cfg.alert_amp : cfg.cross_amp, rate);
      add_rhythm(slow, cfg.drowsy_freqs, drowsy_ph, fshift, y == 1 ? cfg.drowsy_amp : cfg.cross_amp, rate);
      std::copy(fast.begin(), fast.end(), tmpl[y].begin());
      std::copy(slow.begin(), slow.end(), tmpl[y].begin() + static_cast<std::ptrdiff_t>(ns));
    }

    const auto labels = markov_labels(cfg.stream_length, cfg.stickiness, mix(seed, 1000 + s));
    std::mt19937_64 nrng(mix(seed, 2000 + s));
    std::uniform_real_distribution<double> bg_freq(2.0, 30.0);
    std::uniform_real_distribution<double> alert_rt(0.5, 0.7), drowsy_rt(1.6, 3.0);
    std::vector<double> src(k_src * ns);
    for (std::size_t t = 0; t < cfg.stream_length; ++t) {
      const int y = labels[t];
      const double g = gain * (1.0 + cfg.drift * (cfg.stream_length > 1
                                                      ? static_cast<double>(t) / static_cast<double>(cfg.stream_length - 1)
                                                      : 0.0));
      std::fill(src.begin(), src.end(), 0.0);
      for (std::size_t i = 0; i < 2 * ns; ++i) src[i] = g * tmpl[y][i];
      if (cfg.noise > 0.0) {
        for (std::size_t b = 0; b < cfg.background_sources; ++b) {
          const double w = kTwoPi * bg_freq(nrng) / rate;
          const double ph = phase(nrng);
          double* row = &src[(2 + b) * ns];
          for (std::size_t i = 0; i < ns; ++i)
            row[i] = cfg.noise * std::sqrt(2.0) * std::sin(w * static_cast<double>(i) + ph);
        }
      }
      SegmentRecord rec;
      rec.subject = subject;
      rec.session = 1;
      rec.trial = static_cast<std::uint32_t>(t);
      rec.label = y == 1 ? Label::Drowsy : Label::Alert;
      rec.local_rt = static_cast<float>(y == 1 ? drowsy_rt(nrng) : alert_rt(nrng));
      rec.global_rt = static_cast<float>(y == 1 ? drowsy_rt(nrng) : alert_rt(nrng));
      rec.payload.assign(ch * ns, 0.0f);
      std::vector<double> acc(ns);
      for (std::size_t c = 0; c < ch; ++c) {
        std::fill(acc.begin(), acc.end(), 0.0);
        for (std::size_t k = 0; k < k_src; ++k) {
          const double w = m[c * k_src + k];
          const double* row = &src[k * ns];
          for (std::size_t i = 0; i < ns; ++i) acc[i] += w * row[i];
        }
        if (cfg.noise > 0.0)
          for (std::size_t i = 0; i < ns; ++i) acc[i] += 0.5 * cfg.noise * normal(nrng);
        for (std::size_t i = 0; i < ns; ++i) rec.payload[c * ns + i] = static_cast<float>(acc[i]);
      }
      d.records.push_back(std::move(rec));
    }
  }
  return d;
}

}  // namespace eegtta
