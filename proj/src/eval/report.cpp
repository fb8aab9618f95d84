#include "eegtta/eval/report.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>

namespace eegtta {

namespace {

std::string fixed2(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

nlohmann::ordered_json metrics_json(const Metrics& m) {
  return {{"f1", m.f1}, {"auroc", m.auroc}, {"precision", m.precision}, {"recall", m.recall}};
}

void write_text(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open '" + p.string() + "' for writing");
  out << text;
  if (!out) throw std::runtime_error("write failed for '" + p.string() + "'");
}

std::string row(const std::string& name, const Metrics& m) {
  return name + "," + fixed2(m.f1) + "," + fixed2(m.auroc) + "," + fixed2(m.precision) + "," +
         fixed2(m.recall) + "\n";
}

}  // namespace

nlohmann::ordered_json report_json(const RunReport& rep, const nlohmann::ordered_json& config) {
  nlohmann::ordered_json j;
  j["mode"] = rep.mode;
  j["seed"] = rep.seed;
  j["config"] = config;
  auto subjects = nlohmann::ordered_json::array();
  for (const auto& s : rep.subjects) {
    nlohmann::ordered_json o = metrics_json(s.metrics);
    o["subject"] = s.subject;
    o["steps"] = s.steps;
    o["latency_mean_ms"] = s.latency_mean_ms;
    subjects.push_back(std::move(o));
  }
  j["subjects"] = std::move(subjects);
  j["mean"] = metrics_json(rep.summary.mean);
  j["std"] = metrics_json(rep.summary.std);
  j["latency_ms"] = {{"mean", rep.latency.mean_ms},
                     {"p50", rep.latency.p50_ms},
                     {"p95", rep.latency.p95_ms},
                     {"max", rep.latency.max_ms}};
  return j;
}

std::string per_subject_csv(const RunReport& rep) {
  std::string out = "subject,F1,AUROC,precision,recall\n";
  for (const auto& s : rep.subjects) out += row("S" + std::to_string(s.subject), s.metrics);
  out += row("mean", rep.summary.mean);
  out += row("std", rep.summary.std);
  return out;
}

std::string features_csv(const RunReport& rep) {
  std::string out;
  std::size_t dim = 0;
  for (const auto& s : rep.subjects)
    if (!s.log.features.empty()) dim = s.log.features.front().size();
  out = "subject,step,true,predicted";
  for (std::size_t k = 0; k < dim; ++k) out += ",f" + std::to_string(k);
  out += "\n";
  char buf[32];
  for (const auto& s : rep.subjects) {
    if (s.log.features.size() != s.log.entries.size())
      throw std::logic_error("features were not kept for subject " + std::to_string(s.subject));
    for (std::size_t i = 0; i < s.log.entries.size(); ++i) {
      const auto& e = s.log.entries[i];
      out += std::to_string(s.subject) + "," + std::to_string(e.step) + "," +
             (e.truth ? std::to_string(*e.truth) : std::string()) + "," + std::to_string(e.predicted);
      for (Real v : s.log.features[i]) {
        std::snprintf(buf, sizeof buf, ",%.9g", static_cast<double>(v));
        out += buf;
      }
      out += "\n";
    }
  }
  return out;
}

void emit_report(const RunReport& rep, const nlohmann::ordered_json& config, const std::string& out_dir,
                 bool features) {
  const std::filesystem::path dir(out_dir);
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw std::runtime_error("cannot create '" + out_dir + "': " + ec.message());
  write_text(dir / "report.json", report_json(rep, config).dump(2) + "\n");
  write_text(dir / "per_subject.csv", per_subject_csv(rep));
  if (features) write_text(dir / "features.csv", features_csv(rep));
}

}  // namespace eegtta
