#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "eegtta/tensor.hpp"

namespace eegtta {

enum class Label : std::int8_t { Unlabeled = -1, Alert = 0, Drowsy = 1 };

const char* to_string(Label l);

struct SegmentRecord {
  std::uint16_t subject{0};
  std::uint16_t session{0};
  std::uint32_t trial{0};
  float local_rt{0.0f};
  float global_rt{0.0f};
  Label label{Label::Unlabeled};
  std::vector<float> payload;  // channels × samples, row-major by channel
};

struct Dataset {
  std::uint16_t channels{30};
  std::uint32_t samples{384};
  std::uint32_t sample_rate{128};
  std::vector<SegmentRecord> records;
};

// 1 × 1 × channels × samples network input for one record.
Tensor4<Real> to_tensor(const SegmentRecord& r, std::uint16_t channels, std::uint32_t samples);

// Records of one subject with a known label, in stored (acquisition) order.
struct SubjectStream {
  std::uint16_t subject{0};
  std::vector<Tensor4<Real>> segments;
  std::vector<int> labels;
};

std::vector<std::uint16_t> subject_ids(const Dataset& d);
SubjectStream subject_stream(const Dataset& d, std::uint16_t subject);

}  // namespace eegtta
