#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "eegtta/tensor.hpp"

namespace eegtta {

// Which statistics a BN layer normalizes with.
//   FixedSource  - stored (source) statistics, never updated.
//   TrackRunning - running statistics, momentum-updated from the batch on training passes.
//   BatchOnly    - statistics of the current batch (running stats only updated on training passes,
//                  which is how pretraining accumulates the source statistics).
enum class BnMode : std::uint8_t { FixedSource = 0, TrackRunning = 1, BatchOnly = 2 };

enum class GradScope : std::uint8_t { AllParams = 0, BnAffineOnly = 1 };

const char* to_string(BnMode mode);
BnMode parse_bn_mode(const std::string& s);

template <std::floating_point T>
struct BnState {
  std::vector<T> running_mean;
  std::vector<T> running_var;
  std::vector<T> gamma;
  std::vector<T> beta;
  T momentum{T(0.9)};  // weight of the old running value
  T eps{T(1e-5)};
  BnMode mode{BnMode::FixedSource};

  BnState() = default;
  explicit BnState(std::size_t channels)
      : running_mean(channels, T(0)), running_var(channels, T(1)), gamma(channels, T(1)),
        beta(channels, T(0)) {}
  std::size_t channels() const { return gamma.size(); }
};

enum class LayerKind : std::uint8_t {
  Conv2d = 1,
  DepthwiseConv2d = 2,
  SeparableConv2d = 3,
  BatchNorm = 4,
  Elu = 5,
  AvgPool = 6,
  Dropout = 7,
  Flatten = 8,
  Linear = 9,
};

const char* to_string(LayerKind kind);

// Stride-1 grouped convolution with explicit (possibly asymmetric) zero padding.
template <std::floating_point T>
struct ConvParams {
  std::size_t in_ch{0};
  std::size_t out_ch{0};
  std::size_t kh{1};
  std::size_t kw{1};
  std::size_t groups{1};
  std::size_t pad_top{0};
  std::size_t pad_bottom{0};
  std::size_t pad_left{0};
  std::size_t pad_right{0};
  std::vector<T> weight;  // out_ch × (in_ch/groups) × kh × kw
  std::vector<T> bias;    // empty or out_ch

  std::size_t in_per_group() const { return in_ch / groups; }
  std::size_t out_per_group() const { return out_ch / groups; }
  Shape4 output_shape(const Shape4& in) const {
    return {in.n, out_ch, in.h + pad_top + pad_bottom + 1 - kh, in.w + pad_left + pad_right + 1 - kw};
  }
};

template <std::floating_point T>
struct Conv2d {
  LayerKind kind{LayerKind::Conv2d};  // Conv2d or DepthwiseConv2d; same arithmetic
  ConvParams<T> conv;
};

// Depthwise (per-channel) convolution followed by a 1×1 pointwise mix.
template <std::floating_point T>
struct SeparableConv2d {
  ConvParams<T> depthwise;
  ConvParams<T> pointwise;
};

template <std::floating_point T>
struct BatchNorm {
  BnState<T> bn;
};

template <std::floating_point T>
struct Elu {
  T alpha{T(1)};
};

struct AvgPool {
  std::size_t ph{1};
  std::size_t pw{1};
};

struct Dropout {
  double rate{0.0};
};

struct Flatten {};

template <std::floating_point T>
struct Linear {
  std::size_t in{0};
  std::size_t out{0};
  std::vector<T> weight;  // out × in
  std::vector<T> bias;    // out
};

template <std::floating_point T>
using Layer = std::variant<Conv2d<T>, SeparableConv2d<T>, BatchNorm<T>, Elu<T>, AvgPool, Dropout,
                           Flatten, Linear<T>>;

template <std::floating_point T>
LayerKind kind_of(const Layer<T>& layer);

// Per-layer intermediates kept for the backward pass.
template <std::floating_point T>
struct LayerCache {
  Tensor4<T> input;
  Tensor4<T> aux;              // BN: normalized x-hat; ELU: output; dropout: scaled mask
  Tensor4<T> mid;              // separable: depthwise output
  std::vector<T> mean;         // BN: mean used for normalization
  std::vector<T> batch_mean;   // BN: batch mean (only when coupling != 0)
  std::vector<T> inv_std;      // BN: 1/sqrt(var + eps)
  T coupling{T(0)};            // BN: d(stat used)/d(batch stat)
};

template <std::floating_point T>
struct ForwardCache {
  std::size_t first_layer{0};
  bool folded{false};                 // started from a folded StemCache
  std::vector<LayerCache<T>> layers;  // layers[i - first_layer]
};

// Frozen-weight prefix of the network for a batch of inputs, reusable across BN-affine updates.
// Plain form: output of the layers before the first BN. Folded form (when the first BN feeds an
// unpadded depthwise convolution): that convolution applied to the raw stem, plus per-sample,
// per-channel sums of the raw stem. Since BN is a per-channel affine map, the BN + depthwise output
// is recovered exactly from the folded form for any gamma, beta and statistics.
template <std::floating_point T>
struct StemCache {
  bool folded{false};
  Tensor4<T> data;            // plain: stem; folded: depthwise(stem)
  std::vector<double> sum;    // folded: n × bn_channels, sum over h, w of the stem
  std::vector<double> sumsq;  // folded: n × bn_channels, sum of squares
  std::size_t plane{0};       // folded: h × w of the stem

  std::size_t batch() const { return data.shape().n; }
};

// Concatenates caches of the same form along the batch axis.
template <std::floating_point T>
StemCache<T> stack_stems(std::span<const StemCache<T>* const> parts);

template <std::floating_point T>
struct ForwardResult {
  Matrix<T> logits;    // batch × classes
  Matrix<T> features;  // batch × feature_dim (input of the final Linear)
  ForwardCache<T> cache;
};

struct ParamSlot {
  std::size_t layer{0};
  std::string name;
  bool bn_affine{false};
  std::size_t size{0};
};

template <std::floating_point T>
struct ParamGrads {
  GradScope scope{GradScope::AllParams};
  std::vector<ParamSlot> slots;
  std::vector<std::vector<T>> grads;  // aligned with slots
};

struct PassOptions {
  bool training{false};                 // momentum-update running stats where the mode allows it
  std::mt19937_64* dropout_rng{nullptr};  // non-null activates dropout
  bool keep_cache{true};
};

template <std::floating_point T>
class Network {
 public:
  Network() = default;
  // `input` gives c/h/w of one sample; n is ignored.
  Network(Shape4 input, std::vector<Layer<T>> layers);

  Shape4 input_shape() const { return input_; }
  std::size_t class_count() const { return classes_; }
  std::size_t feature_dim() const { return feature_dim_; }
  std::size_t layer_count() const { return layers_.size(); }
  const std::vector<Layer<T>>& layers() const { return layers_; }
  std::vector<Layer<T>>& layers() { return layers_; }

  // Layers [0, stem_end()) precede the first BN layer; their output depends only on
  // frozen weights, so it may be cached while only BN affine parameters adapt.
  std::size_t stem_end() const { return stem_end_; }

  // Inference pass: no statistic updates, dropout off.
  ForwardResult<T> forward(const Tensor4<T>& x, bool keep_cache = true) const;
  // Training pass: may update running statistics (TrackRunning/BatchOnly) and apply dropout.
  ForwardResult<T> forward(const Tensor4<T>& x, const PassOptions& opts);

  Tensor4<T> forward_stem(const Tensor4<T>& x) const;
  ForwardResult<T> forward_from_stem(const Tensor4<T>& stem, bool keep_cache = true) const;
  ForwardResult<T> forward_from_stem(const Tensor4<T>& stem, const PassOptions& opts);

  // True when make_stem_cache produces the folded form. When the stem is a single temporal
  // convolution over a one-channel input, the folded form is built from the input directly
  // without materializing the stem; make_stem_cache_from_stem always goes through the stem.
  bool foldable() const { return foldable_; }
  StemCache<T> make_stem_cache(const Tensor4<T>& x) const;
  StemCache<T> make_stem_cache_from_stem(const Tensor4<T>& stem) const;
  ForwardResult<T> forward_cached(const StemCache<T>& stem, bool keep_cache = true) const;
  ForwardResult<T> forward_cached(const StemCache<T>& stem, const PassOptions& opts);

  ParamGrads<T> backward(const ForwardCache<T>& cache, const Matrix<T>& dlogits,
                         GradScope scope) const;

  std::vector<ParamSlot> param_slots(GradScope scope) const;
  std::vector<std::span<T>> parameters(GradScope scope);
  std::vector<std::span<const T>> parameters(GradScope scope) const;

  std::vector<BnState<T>*> bn_states();
  std::vector<const BnState<T>*> bn_states() const;
  void set_bn_mode(BnMode mode);

  const Linear<T>& head() const;
  Linear<T>& head();

  // FNV-1a over the bytes of every parameter that BN-affine adaptation must not touch
  // (all weights and biases outside BN layers, plus BN running statistics).
  std::uint64_t frozen_hash() const;

  template <std::floating_point U>
  Network<U> cast() const;

 private:
  ForwardResult<T> run(std::size_t from, const Tensor4<T>& x, const PassOptions& opts,
                       bool mutate);
  ForwardResult<T> forward_cached(const StemCache<T>& stem, const PassOptions& opts, bool mutate);
  ForwardResult<T> run_folded(const StemCache<T>& stem, const PassOptions& opts, bool mutate);
  StemCache<T> direct_stem_cache(const Tensor4<T>& x) const;
  void validate();

  Shape4 input_{};
  std::vector<Layer<T>> layers_;
  std::size_t classes_{0};
  std::size_t feature_dim_{0};
  std::size_t stem_end_{0};
  std::size_t linear_index_{0};
  bool foldable_{false};
  bool direct_stem_{false};  // folded cache computable straight from the input
};

// Free-standing BN on one tensor; updates running statistics in `bn` when `training` is set
// and the mode tracks statistics.
template <std::floating_point T>
Tensor4<T> bn_apply(const Tensor4<T>& x, BnState<T>& bn, bool training);

// ----- construction helpers -----

// "same" padding along width (left = (k-1)/2), valid along height.
template <std::floating_point T>
Conv2d<T> make_temporal_conv(std::size_t in_ch, std::size_t filters, std::size_t kernel);
template <std::floating_point T>
Conv2d<T> make_depthwise_conv(std::size_t in_ch, std::size_t depth, std::size_t kernel_h);
template <std::floating_point T>
SeparableConv2d<T> make_separable_conv(std::size_t in_ch, std::size_t out_ch, std::size_t kernel);
template <std::floating_point T>
BatchNorm<T> make_batchnorm(std::size_t channels);
template <std::floating_point T>
Linear<T> make_linear(std::size_t in, std::size_t out);

// EEGNet-style compact CNN.
struct EegNetConfig {
  std::size_t channels{30};
  std::size_t samples{384};
  std::size_t classes{2};
  std::size_t temporal_filters{8};
  std::size_t depth{2};
  std::size_t separable_filters{16};
  std::size_t temporal_kernel{64};
  std::size_t separable_kernel{16};
  std::size_t pool1{4};
  std::size_t pool2{8};
  double dropout{0.25};
};

template <std::floating_point T>
Network<T> make_eegnet(const EegNetConfig& cfg);

// Glorot-uniform weights (fan-based), zero biases, BN reset to identity. Deterministic in seed.
template <std::floating_point T>
void glorot_init(Network<T>& net, std::uint64_t seed);

}  // namespace eegtta
