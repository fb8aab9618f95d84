#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "eegtta/adapter.hpp"
#include "eegtta/data/records.hpp"
#include "eegtta/eval/metrics.hpp"
#include "eegtta/eval/pretrain.hpp"

namespace eegtta {

// What each fold streams through: the unadapted classifier, or the adapter with
// AdaptConfig::variant and AdaptConfig::bn_mode.
enum class ProtocolMode : std::uint8_t { SourceOnly = 0, Adapt = 1 };

struct ProtocolConfig {
  AdaptConfig adapt{};
  PretrainConfig pretrain{};
  EegNetConfig network{};       // channels/samples are taken from the dataset
  ProtocolMode mode{ProtocolMode::Adapt};
  std::uint64_t seed{0};        // weight init, pretraining order/dropout and adaptation RNG
  std::size_t workers{1};
  std::string checkpoint_dir;   // empty: no caching
  bool allow_pretrain{true};
  bool keep_features{false};
};

std::string mode_label(const ProtocolConfig& cfg);  // e.g. "source-only", "full/fixed"

struct LatencyStats {
  double mean_ms{0.0};
  double p50_ms{0.0};
  double p95_ms{0.0};
  double max_ms{0.0};
};

LatencyStats latency_stats(std::vector<double> samples_ms);

struct SubjectResult {
  std::uint16_t subject{0};
  Metrics metrics;
  std::size_t steps{0};
  double latency_mean_ms{0.0};
  PredictionLog log;  // features kept when requested
};

struct RunReport {
  std::string mode;
  std::uint64_t seed{0};
  std::vector<SubjectResult> subjects;
  MeanStd summary;
  LatencyStats latency;
};

// Checkpoint of the fold's source model: loaded from checkpoint_dir when a matching file exists,
// otherwise pretrained (and stored when checkpoint_dir is set).
Network<Real> fold_network(const Dataset& data, const std::vector<std::uint16_t>& train_subjects,
                           std::uint16_t target, const ProtocolConfig& cfg);

// Leave-one-subject-out run over every subject in `data`.
RunReport run_protocol(const Dataset& data, const ProtocolConfig& cfg);

// The method under {BatchOnly, TrackRunning, FixedSource}, in that order.
std::vector<RunReport> run_bn_sweep(const Dataset& data, const ProtocolConfig& cfg);

}  // namespace eegtta
