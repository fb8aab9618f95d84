#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "eegtta/losses.hpp"
#include "eegtta/memory_bank.hpp"
#include "eegtta/network.hpp"
#include "eegtta/optimizer.hpp"
#include "eegtta/prototypes.hpp"

namespace eegtta {

// Ablations of the streaming method.
//   Full          - memory bank + BN-affine updates + prototype prediction
//   NoBnUpdates   - memory bank + prototype prediction, network untouched
//   NoMemoryNoPL  - BN-affine updates on the single incoming segment, classifier prediction
//   NoPL          - memory bank + BN-affine updates, classifier prediction
enum class Variant : std::uint8_t { Full = 0, NoBnUpdates = 1, NoMemoryNoPL = 2, NoPL = 3 };

const char* to_string(Variant v);
Variant parse_variant(const std::string& s);  // full | no-bn | no-mem | no-pl

struct AdaptConfig {
  double lr{1e-3};
  double weight_decay{0.1};
  std::size_t steps_per_sample{1};
  std::size_t bank_capacity{16};
  LossWeights<Real> loss{};
  Real alpha{Real(0.9)};
  BnMode bn_mode{BnMode::FixedSource};
  Variant variant{Variant::Full};
  std::uint64_t seed{0};
  AugmentConfig augment{};
  EvictionDirection eviction{EvictionDirection::Highest};
  FilterDirection filter{FilterDirection::Above};

  bool uses_bank() const { return variant != Variant::NoMemoryNoPL; }
  bool updates_bn() const { return variant != Variant::NoBnUpdates; }
  bool uses_prototypes() const { return variant == Variant::Full || variant == Variant::NoBnUpdates; }
};

struct StepDiagnostics {
  Real loss_total{0};
  Real loss_entropy{0};
  Real loss_energy{0};
  EvictionReport eviction;
  std::size_t bank_size{0};
  std::vector<std::size_t> prototype_members;
  bool prototype_head{false};
};

struct Prediction {
  std::uint64_t step{0};
  int label{0};
  std::vector<Real> probs;
  std::vector<Real> feature;
  StepDiagnostics diag;
  double latency_ms{0.0};
};

class Adapter {
 public:
  Adapter() = default;
  Adapter(Network<Real> net, AdaptConfig cfg);
  static Adapter from_checkpoint(const std::string& path, AdaptConfig cfg);

  bool initialized() const { return initialized_; }
  const AdaptConfig& config() const { return cfg_; }
  const Network<Real>& network() const { return net_; }
  const MemoryBank& bank() const { return bank_; }
  const std::optional<PrototypeSet>& prototypes() const { return protos_; }
  std::uint64_t step() const { return t_; }

  // One stream step on a single segment (1 × 1 × electrodes × time).
  Prediction adapt_step(const Tensor4<Real>& x);

 private:
  void adapt_parameters(const StemCache<Real>& x_stem, const Tensor4<Real>& x, StepDiagnostics& diag);

  bool initialized_{false};
  AdaptConfig cfg_{};
  Network<Real> net_;
  OptState<Real> opt_;
  MemoryBank bank_{1, 0};
  std::optional<PrototypeSet> protos_;
  std::uint64_t t_{0};
};

struct LogEntry {
  std::uint64_t step{0};
  std::optional<int> truth;
  int predicted{0};
  std::vector<Real> probs;
  Real loss_total{0};
  Real loss_entropy{0};
  Real loss_energy{0};
  bool prototype_head{false};
  double latency_ms{0.0};
};

struct PredictionLog {
  std::vector<LogEntry> entries;
  std::vector<std::vector<Real>> features;  // per step z_t, kept only on request
};

struct StreamOptions {
  bool keep_features{false};
};

// `labels` may be empty (unknown) or match `segments` in length.
PredictionLog run_stream(Adapter& adapter, std::span<const Tensor4<Real>> segments,
                         std::span<const int> labels = {}, StreamOptions opts = {});

// Classifier-head predictions with no adaptation at all.
PredictionLog run_source_only(const Network<Real>& net, std::span<const Tensor4<Real>> segments,
                              std::span<const int> labels = {}, StreamOptions opts = {});

std::string to_json_line(const LogEntry& e);
void write_prediction_log(const std::string& path, const PredictionLog& log);

}  // namespace eegtta
