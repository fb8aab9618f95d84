#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "eegtta/data/records.hpp"

namespace eegtta {

struct LabelRule {
  double alert_percentile{5.0};  // alert RT = this percentile of a session's local RTs
  double alert_factor{1.5};
  double drowsy_factor{2.5};
};

// Alert iff both RTs < alert_factor · alert_rt; Drowsy iff both > drowsy_factor · alert_rt.
Label label_from_rts(double local_rt, double global_rt, double alert_rt, const LabelRule& rule = {});

// Linear-interpolated percentile (p in [0,100]).
double percentile(std::span<const double> values, double p);

// Relabels every record using a per-(subject, session) alert RT. Throws on non-positive RTs.
void label_segments(std::vector<SegmentRecord>& records, const LabelRule& rule = {});

struct SessionChoice {
  std::uint16_t subject{0};
  std::uint16_t session{0};
  std::size_t alert{0};
  std::size_t drowsy{0};
};

// Per subject, the qualifying session (>= min_per_class of each class) with the smallest
// |alert - drowsy| / (alert + drowsy); ties go to the lower session id. Ordered by subject.
std::vector<SessionChoice> filter_sessions(std::span<const SegmentRecord> records,
                                           std::size_t min_per_class = 50);

// Labeled records of the chosen sessions, stored order preserved.
std::vector<SegmentRecord> select_sessions(std::span<const SegmentRecord> records,
                                           std::span<const SessionChoice> chosen);

}  // namespace eegtta
