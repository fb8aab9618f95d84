#include "eegtta/data/labeling.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>

namespace eegtta {

Label label_from_rts(double local_rt, double global_rt, double alert_rt, const LabelRule& rule) {
  if (!(local_rt > 0.0) || !(global_rt > 0.0) || !(alert_rt > 0.0))
    throw std::invalid_argument("reaction times must be positive");
  const double lo = rule.alert_factor * alert_rt;
  const double hi = rule.drowsy_factor * alert_rt;
  if (local_rt < lo && global_rt < lo) return Label::Alert;
  if (local_rt > hi && global_rt > hi) return Label::Drowsy;
  return Label::Unlabeled;
}

double percentile(std::span<const double> values, double p) {
  if (values.empty()) throw std::invalid_argument("percentile of an empty set");
  if (!(p >= 0.0 && p <= 100.0)) throw std::invalid_argument("percentile must be in [0,100]");
  std::vector<double> v(values.begin(), values.end());
  std::sort(v.begin(), v.end());
  const double pos = p / 100.0 * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

void label_segments(std::vector<SegmentRecord>& records, const LabelRule& rule) {
  if (rule.alert_factor >= rule.drowsy_factor)
    throw std::invalid_argument("alert band must lie below the drowsy band");
  std::map<std::pair<std::uint16_t, std::uint16_t>, std::vector<double>> local;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    if (!(r.local_rt > 0.0f) || !(r.global_rt > 0.0f))
      throw std::invalid_argument("record " + std::to_string(i) + " (subject " + std::to_string(r.subject) +
                                  ", trial " + std::to_string(r.trial) + ") has a non-positive RT");
    local[{r.subject, r.session}].push_back(r.local_rt);
  }
  std::map<std::pair<std::uint16_t, std::uint16_t>, double> alert;
  for (const auto& [key, rts] : local) alert[key] = percentile(rts, rule.alert_percentile);
  for (auto& r : records)
    r.label = label_from_rts(r.local_rt, r.global_rt, alert.at({r.subject, r.session}), rule);
}

std::vector<SessionChoice> filter_sessions(std::span<const SegmentRecord> records,
                                           std::size_t min_per_class) {
  std::map<std::pair<std::uint16_t, std::uint16_t>, SessionChoice> counts;
  for (const auto& r : records) {
    auto& c = counts[{r.subject, r.session}];
    c.subject = r.subject;
    c.session = r.session;
    if (r.label == Label::Alert) ++c.alert;
    if (r.label == Label::Drowsy) ++c.drowsy;
  }
  std::map<std::uint16_t, SessionChoice> best;
  // Map order visits sessions in ascending id, so a strict comparison keeps the earlier one.
  for (const auto& [key, c] : counts) {
    if (c.alert < min_per_class || c.drowsy < min_per_class) continue;
    auto it = best.find(c.subject);
    if (it == best.end()) {
      best.emplace(c.subject, c);
      continue;
    }
    const auto imbalance = [](const SessionChoice& s) {
      const double a = static_cast<double>(s.alert), d = static_cast<double>(s.drowsy);
      return std::abs(a - d) / (a + d);
    };
    if (imbalance(c) < imbalance(it->second)) it->second = c;
  }
  std::vector<SessionChoice> out;
  for (const auto& [s, c] : best) out.push_back(c);
  return out;
}

std::vector<SegmentRecord> select_sessions(std::span<const SegmentRecord> records,
                                           std::span<const SessionChoice> chosen) {
  std::vector<SegmentRecord> out;
  for (const auto& r : records) {
    if (r.label == Label::Unlabeled) continue;
    const bool keep = std::any_of(chosen.begin(), chosen.end(), [&](const SessionChoice& c) {
      return c.subject == r.subject && c.session == r.session;
    });
    if (keep) out.push_back(r);
  }
  return out;
}

}  // namespace eegtta
