#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "eegtta/network.hpp"

namespace eegtta {

// Weight checkpoint ("SAWT", little-endian).
//
//   char[4]  magic "SAWT"
//   u16      version (1)
//   u32 x3   input channels, height, width of one sample
//   u32      layer count
//   per layer: u8 kind tag (LayerKind), then
//     Conv2D / DepthwiseConv2D : conv record
//     SeparableConv2D          : conv record (depthwise), conv record (pointwise)
//     BatchNorm                : u32 channels, u8 mode, f32 momentum, f32 eps,
//                                f32[c] gamma, beta, running_mean, running_var
//     ELU                      : f32 alpha
//     AvgPool2D                : u32 pool_h, pool_w
//     Dropout                  : f32 rate
//     Flatten                  : (nothing)
//     Linear                   : u32 in, out, f32[out*in] weight, f32[out] bias
//   conv record: u32 in_ch, out_ch, kh, kw, groups, pad_top, pad_bottom, pad_left, pad_right,
//                u8 has_bias, f32[...] weight, f32[out_ch] bias (if has_bias)
inline constexpr std::uint16_t kCheckpointVersion = 1;

struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

template <std::floating_point T>
std::vector<std::uint8_t> encode_checkpoint(const Network<T>& net);
template <std::floating_point T>
Network<T> decode_checkpoint(std::span<const std::uint8_t> bytes);

template <std::floating_point T>
void save_checkpoint(const std::string& path, const Network<T>& net);
template <std::floating_point T>
Network<T> load_checkpoint(const std::string& path);

}  // namespace eegtta
