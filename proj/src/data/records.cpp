#include "eegtta/data/records.hpp"

#include <algorithm>
#include <stdexcept>

namespace eegtta {

const char* to_string(Label l) {
  switch (l) {
    case Label::Unlabeled: return "unlabeled";
    case Label::Alert: return "alert";
    case Label::Drowsy: return "drowsy";
  }
  return "?";
}

Tensor4<Real> to_tensor(const SegmentRecord& r, std::uint16_t channels, std::uint32_t samples) {
  const std::size_t n = std::size_t{channels} * samples;
  if (r.payload.size() != n)
    throw std::invalid_argument("record payload has " + std::to_string(r.payload.size()) +
                                " values, expected " + std::to_string(n));
  return Tensor4<Real>(Shape4{1, 1, channels, samples},
                       std::vector<Real>(r.payload.begin(), r.payload.end()));
}

std::vector<std::uint16_t> subject_ids(const Dataset& d) {
  std::vector<std::uint16_t> ids;
  for (const auto& r : d.records) ids.push_back(r.subject);
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  return ids;
}

SubjectStream subject_stream(const Dataset& d, std::uint16_t subject) {
  SubjectStream s;
  s.subject = subject;
  for (const auto& r : d.records) {
    if (r.subject != subject || r.label == Label::Unlabeled) continue;
    s.segments.push_back(to_tensor(r, d.channels, d.samples));
    s.labels.push_back(static_cast<int>(r.label));
  }
  return s;
}

}  // namespace eegtta
