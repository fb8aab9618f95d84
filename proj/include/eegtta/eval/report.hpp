#pragma once

#include <string>

#include <json.hpp>

#include "eegtta/eval/protocol.hpp"

namespace eegtta {

nlohmann::ordered_json report_json(const RunReport& rep, const nlohmann::ordered_json& config);

// "subject,F1,AUROC,precision,recall" rows, then "mean" and "std" rows; 2 decimals.
std::string per_subject_csv(const RunReport& rep);

// "subject,step,true,predicted,f0,...": one row per stream step. Requires kept features.
std::string features_csv(const RunReport& rep);

// Writes report.json and per_subject.csv into out_dir (created if missing), plus features.csv
// when `features` is set.
void emit_report(const RunReport& rep, const nlohmann::ordered_json& config, const std::string& out_dir,
                 bool features = false);

}  // namespace eegtta
