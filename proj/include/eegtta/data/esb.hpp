#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "eegtta/data/records.hpp"

namespace eegtta {

// ESB segment container (little-endian):
//   char[4] "ESB1"; u16 version (1); u32 record count; u16 channels; u32 samples; u32 sample rate
//   per record: u16 subject, u16 session, u32 trial, f32 local_rt, f32 global_rt,
//               i8 label (-1/0/1), f32[channels*samples] payload
inline constexpr std::uint16_t kEsbVersion = 1;

enum class EsbErrc : std::uint8_t {
  BadMagic = 1,
  VersionMismatch = 2,
  TruncatedPayload = 3,
  DimMismatch = 4,
  NonFinite = 5,
  BadLabel = 6,
  Io = 7,
};

const char* to_string(EsbErrc c);

class EsbError : public std::runtime_error {
 public:
  EsbError(EsbErrc code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code), detail_(what) {}
  EsbErrc code() const { return code_; }
  const std::string& detail() const { return detail_; }

 private:
  EsbErrc code_;
  std::string detail_;
};

std::vector<std::uint8_t> encode_esb(const Dataset& d);
Dataset decode_esb(std::span<const std::uint8_t> bytes);

void write_esb(const std::string& path, const Dataset& d);
Dataset read_esb(const std::string& path);

}  // namespace eegtta
