// eegtta: command-line driver for pretraining, streaming adaptation and evaluation.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "eegtta/adapter.hpp"
#include "eegtta/checkpoint.hpp"
#include "eegtta/data/esb.hpp"
#include "eegtta/data/folds.hpp"
#include "eegtta/data/synth.hpp"
#include "eegtta/eval/config.hpp"
#include "eegtta/eval/report.hpp"
#include "eegtta/runtime.hpp"

namespace fs = std::filesystem;
using namespace eegtta;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;

struct Flags {
  std::string config;
  std::string data;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::string variant;
  std::string bn_mode;
  std::optional<std::size_t> workers;
  bool source_only{false};
  std::string checkpoint;
  std::optional<std::uint16_t> subject;
  bool features{false};
};

// Config file first, then flag overrides.
RunConfig effective_config(const Flags& f) {
  RunConfig rc = f.config.empty() ? RunConfig{} : load_run_config(f.config);
  auto& p = rc.protocol;
  if (f.seed) p.seed = *f.seed;
  if (!f.variant.empty()) set_mode(p, f.variant);
  if (f.source_only) p.mode = ProtocolMode::SourceOnly;
  if (!f.bn_mode.empty()) {
    try {
      p.adapt.bn_mode = parse_bn_mode(f.bn_mode);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
  }
  if (f.workers) {
    if (*f.workers == 0) throw ConfigError("--workers must be >= 1");
    p.workers = *f.workers;
  }
  if (f.features) p.keep_features = true;
  return rc;
}

// A single ESB file, or every *.esb file of a directory merged in name order.
Dataset load_data(const std::string& path) {
  if (path.empty()) throw ConfigError("--data is required");
  if (!fs::is_directory(path)) return read_esb(path);
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(path))
    if (e.is_regular_file() && e.path().extension() == ".esb") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  if (files.empty()) throw ConfigError("no .esb files in '" + path + "'");
  Dataset all = read_esb(files.front().string());
  for (std::size_t i = 1; i < files.size(); ++i) {
    Dataset d = read_esb(files[i].string());
    if (d.channels != all.channels || d.samples != all.samples || d.sample_rate != all.sample_rate)
      throw EsbError(EsbErrc::DimMismatch, files[i].string() + " disagrees with " + files.front().string());
    for (auto& r : d.records) all.records.push_back(std::move(r));
  }
  return all;
}

std::string require_out(const Flags& f) {
  if (f.out.empty()) throw ConfigError("--out is required");
  return f.out;
}

void print_summary(const RunReport& rep) {
  std::printf("%-14s F1 %6.2f (%5.2f)  AUROC %6.2f  P %6.2f  R %6.2f  latency %.2f ms\n", rep.mode.c_str(),
              rep.summary.mean.f1, rep.summary.std.f1, rep.summary.mean.auroc, rep.summary.mean.precision,
              rep.summary.mean.recall, rep.latency.mean_ms);
}

int cmd_synth(const Flags& f) {
  const RunConfig rc = effective_config(f);
  const std::string out = require_out(f);
  fs::create_directories(out);
  const Dataset all = synth_stream(rc.synth, rc.protocol.seed);
  for (std::uint16_t s : subject_ids(all)) {
    Dataset d;
    d.channels = all.channels;
    d.samples = all.samples;
    d.sample_rate = all.sample_rate;
    for (const auto& r : all.records)
      if (r.subject == s) d.records.push_back(r);
    char name[32];
    std::snprintf(name, sizeof name, "S%02u.esb", static_cast<unsigned>(s));
    write_esb((fs::path(out) / name).string(), d);
  }
  std::ofstream(fs::path(out) / "synth_config.json") << to_json(rc).dump(2) << "\n";
  std::printf("wrote %zu subjects x %zu segments to %s\n", rc.synth.subjects, rc.synth.stream_length, out.c_str());
  return kExitOk;
}

int cmd_pretrain(const Flags& f) {
  RunConfig rc = effective_config(f);
  const std::string out = require_out(f);
  rc.protocol.checkpoint_dir = out;
  rc.protocol.allow_pretrain = true;
  const Dataset d = load_data(f.data);
  const auto ids = subject_ids(d);
  for (const Fold& fold : loso_folds(ids)) {
    const Network<Real> net = fold_network(d, fold.train, fold.target, rc.protocol);
    char name[32];
    std::snprintf(name, sizeof name, "fold-S%02u.sawt", static_cast<unsigned>(fold.target));
    save_checkpoint((fs::path(out) / name).string(), net);
    std::printf("target S%02u: %s\n", static_cast<unsigned>(fold.target), name);
  }
  return kExitOk;
}

int cmd_adapt(const Flags& f) {
  const RunConfig rc = effective_config(f);
  if (f.checkpoint.empty()) throw ConfigError("--checkpoint is required");
  const std::string out = require_out(f);
  const Dataset d = load_data(f.data);
  const auto ids = subject_ids(d);
  if (ids.empty()) throw ConfigError("dataset has no records");
  const std::uint16_t subject = f.subject.value_or(ids.front());
  const SubjectStream stream = subject_stream(d, subject);
  if (stream.segments.empty()) throw ConfigError("subject " + std::to_string(subject) + " has no labeled segments");
  fs::create_directories(out);
  PredictionLog log;
  if (rc.protocol.mode == ProtocolMode::SourceOnly) {
    Network<Real> net = load_checkpoint<Real>(f.checkpoint);
    net.set_bn_mode(BnMode::FixedSource);
    log = run_source_only(net, stream.segments, stream.labels);
  } else {
    AdaptConfig ac = rc.protocol.adapt;
    ac.seed = rc.protocol.seed;
    Adapter adapter = Adapter::from_checkpoint(f.checkpoint, ac);
    log = run_stream(adapter, stream.segments, stream.labels);
    if (adapter.prototypes()) write_prototypes_csv((fs::path(out) / "prototypes.csv").string(), *adapter.prototypes());
  }
  write_prediction_log((fs::path(out) / "predictions.jsonl").string(), log);
  const Metrics m = compute_metrics(log);
  std::ofstream(fs::path(out) / "config.json") << to_json(rc).dump(2) << "\n";
  std::printf("subject S%02u, %zu steps: F1 %.2f AUROC %.2f\n", static_cast<unsigned>(subject), log.entries.size(),
              m.f1, m.auroc);
  return kExitOk;
}

int cmd_evaluate(const Flags& f) {
  const RunConfig rc = effective_config(f);
  const std::string out = require_out(f);
  const Dataset d = load_data(f.data);
  const RunReport rep = run_protocol(d, rc.protocol);
  emit_report(rep, to_json(rc), out, rc.protocol.keep_features);
  print_summary(rep);
  return kExitOk;
}

int cmd_bn_sweep(const Flags& f) {
  const RunConfig rc = effective_config(f);
  const std::string out = require_out(f);
  const Dataset d = load_data(f.data);
  nlohmann::ordered_json summary = nlohmann::ordered_json::array();
  for (const RunReport& rep : run_bn_sweep(d, rc.protocol)) {
    RunConfig c = rc;
    c.protocol.mode = ProtocolMode::Adapt;
    const std::string mode = rep.mode.substr(rep.mode.find('/') + 1);
    c.protocol.adapt.bn_mode = parse_bn_mode(mode);
    emit_report(rep, to_json(c), (fs::path(out) / mode).string(), c.protocol.keep_features);
    summary.push_back({{"bn_mode", mode}, {"f1", rep.summary.mean.f1}, {"auroc", rep.summary.mean.auroc}});
    print_summary(rep);
  }
  std::ofstream(fs::path(out) / "sweep.json") << summary.dump(2) << "\n";
  return kExitOk;
}

int cmd_convert_check(const std::string& path) {
  const Dataset d = read_esb(path);
  std::size_t alert = 0, drowsy = 0, unlabeled = 0;
  for (const auto& r : d.records) {
    if (r.label == Label::Alert) ++alert;
    else if (r.label == Label::Drowsy) ++drowsy;
    else ++unlabeled;
  }
  std::printf("%s: ok, %zu records, %u channels x %u samples @ %u Hz, %zu subjects, alert %zu, drowsy %zu, "
              "unlabeled %zu\n",
              path.c_str(), d.records.size(), static_cast<unsigned>(d.channels), d.samples, d.sample_rate,
              subject_ids(d).size(), alert, drowsy, unlabeled);
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  eegtta::configure_allocator();
  CLI::App app{"Streaming test-time adaptation for EEG drowsiness classification"};
  app.require_subcommand(1);
  Flags f;
  std::string check_path;

  const auto common = [&](CLI::App* sub, bool with_data = true) {
    sub->add_option("--config", f.config, "JSON config file")->check(CLI::ExistingFile);
    if (with_data) sub->add_option("--data", f.data, "ESB file or directory of ESB files");
    sub->add_option("--out", f.out, "output path");
    sub->add_option("--seed", f.seed, "random seed");
    sub->add_option("--variant", f.variant, "method variant")
        ->check(CLI::IsMember({"full", "no-bn", "no-mem", "no-pl"}));
    sub->add_option("--bn-mode", f.bn_mode, "BN statistics regime")->check(CLI::IsMember({"fixed", "track", "batch"}));
    sub->add_option("--workers", f.workers, "parallel folds");
  };

  auto* synth = app.add_subcommand("synth", "write the synthetic benchmark as ESB files");
  common(synth, false);
  auto* pre = app.add_subcommand("pretrain", "train one source checkpoint per LOSO fold");
  common(pre);
  auto* adapt = app.add_subcommand("adapt", "stream one subject through a checkpoint");
  common(adapt);
  adapt->add_option("--checkpoint", f.checkpoint, "weight checkpoint")->check(CLI::ExistingFile);
  adapt->add_option("--subject", f.subject, "subject id (default: lowest)");
  adapt->add_flag("--source-only", f.source_only, "classifier predictions, no adaptation");
  auto* eval = app.add_subcommand("evaluate", "LOSO evaluation with reports");
  common(eval);
  eval->add_flag("--source-only", f.source_only, "classifier predictions, no adaptation");
  eval->add_flag("--features", f.features, "also write features.csv");
  auto* sweep = app.add_subcommand("bn-sweep", "LOSO evaluation under the three BN regimes");
  common(sweep);
  auto* check = app.add_subcommand("convert-check", "validate an ESB file");
  check->add_option("file", check_path, "ESB file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    app.exit(e, std::cerr, std::cerr);
    return kExitUsage;
  }

  try {
    if (*synth) return cmd_synth(f);
    if (*pre) return cmd_pretrain(f);
    if (*adapt) return cmd_adapt(f);
    if (*eval) return cmd_evaluate(f);
    if (*sweep) return cmd_bn_sweep(f);
    if (*check) return cmd_convert_check(check_path);
  } catch (const EsbError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  }
  return kExitUsage;
}
