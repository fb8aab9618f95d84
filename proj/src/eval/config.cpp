#include "eegtta/eval/config.hpp"

#include <fstream>
#include <set>

namespace eegtta {

namespace {

using nlohmann::json;
using nlohmann::ordered_json;

void reject_unknown(const json& j, const std::string& where, std::initializer_list<const char*> keys) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  const std::set<std::string> known(keys.begin(), keys.end());
  for (const auto& [k, v] : j.items())
    if (!known.count(k)) throw ConfigError(where + ": unknown key '" + k + "'");
}

template <class V>
void get(const json& j, const char* key, V& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<V>();
  } catch (const json::exception& e) {
    throw ConfigError(where + "." + key + ": " + e.what());
  }
}

void get_real(const json& j, const char* key, Real& out, const std::string& where) {
  double v = out;
  get(j, key, v, where);
  out = static_cast<Real>(v);
}

EvictionDirection parse_eviction(const std::string& s) {
  if (s == "highest") return EvictionDirection::Highest;
  if (s == "lowest") return EvictionDirection::Lowest;
  throw ConfigError("eviction must be 'highest' or 'lowest', got '" + s + "'");
}

FilterDirection parse_filter(const std::string& s) {
  if (s == "above") return FilterDirection::Above;
  if (s == "below") return FilterDirection::Below;
  throw ConfigError("filter must be 'above' or 'below', got '" + s + "'");
}

}  // namespace

void set_mode(ProtocolConfig& cfg, const std::string& mode) {
  if (mode == "source-only") {
    cfg.mode = ProtocolMode::SourceOnly;
    return;
  }
  try {
    cfg.adapt.variant = parse_variant(mode);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string(e.what()) + " or source-only");
  }
  cfg.mode = ProtocolMode::Adapt;
}

RunConfig parse_run_config(const json& j) {
  RunConfig rc;
  reject_unknown(j, "config", {"seed", "mode", "workers", "checkpoint_dir", "allow_pretrain", "export_features",
                               "adapt", "pretrain", "network", "synth"});
  auto& p = rc.protocol;
  get(j, "seed", p.seed, "config");
  if (j.contains("mode")) {
    std::string m;
    get(j, "mode", m, "config");
    set_mode(p, m);
  }
  get(j, "workers", p.workers, "config");
  get(j, "checkpoint_dir", p.checkpoint_dir, "config");
  get(j, "allow_pretrain", p.allow_pretrain, "config");
  get(j, "export_features", p.keep_features, "config");

  if (j.contains("adapt")) {
    const json& a = j.at("adapt");
    const std::string w = "adapt";
    reject_unknown(a, w, {"lr", "weight_decay", "steps_per_sample", "bank_capacity", "lambda_ent", "lambda_eng",
                          "m_in", "m_out", "tau", "alpha", "bn_mode", "noise_rel", "permutation_segments",
                          "eviction", "filter"});
    auto& c = p.adapt;
    get(a, "lr", c.lr, w);
    get(a, "weight_decay", c.weight_decay, w);
    get(a, "steps_per_sample", c.steps_per_sample, w);
    get(a, "bank_capacity", c.bank_capacity, w);
    get_real(a, "lambda_ent", c.loss.lambda_ent, w);
    get_real(a, "lambda_eng", c.loss.lambda_eng, w);
    get_real(a, "m_in", c.loss.m_in, w);
    get_real(a, "m_out", c.loss.m_out, w);
    get_real(a, "tau", c.loss.tau, w);
    get_real(a, "alpha", c.alpha, w);
    get(a, "noise_rel", c.augment.noise_rel, w);
    get(a, "permutation_segments", c.augment.segments, w);
    std::string s;
    if (a.contains("bn_mode")) {
      get(a, "bn_mode", s, w);
      try {
        c.bn_mode = parse_bn_mode(s);
      } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
      }
    }
    if (a.contains("eviction")) {
      get(a, "eviction", s, w);
      c.eviction = parse_eviction(s);
    }
    if (a.contains("filter")) {
      get(a, "filter", s, w);
      c.filter = parse_filter(s);
    }
  }
  if (j.contains("pretrain")) {
    const json& a = j.at("pretrain");
    const std::string w = "pretrain";
    reject_unknown(a, w, {"lr", "batch", "epochs", "max_per_subject"});
    get(a, "lr", p.pretrain.lr, w);
    get(a, "batch", p.pretrain.batch, w);
    get(a, "epochs", p.pretrain.epochs, w);
    get(a, "max_per_subject", p.pretrain.max_per_subject, w);
  }
  if (j.contains("network")) {
    const json& a = j.at("network");
    const std::string w = "network";
    reject_unknown(a, w, {"temporal_filters", "depth", "separable_filters", "temporal_kernel", "separable_kernel",
                          "pool1", "pool2", "dropout"});
    auto& n = p.network;
    get(a, "temporal_filters", n.temporal_filters, w);
    get(a, "depth", n.depth, w);
    get(a, "separable_filters", n.separable_filters, w);
    get(a, "temporal_kernel", n.temporal_kernel, w);
    get(a, "separable_kernel", n.separable_kernel, w);
    get(a, "pool1", n.pool1, w);
    get(a, "pool2", n.pool2, w);
    get(a, "dropout", n.dropout, w);
  }
  if (j.contains("synth")) {
    const json& a = j.at("synth");
    const std::string w = "synth";
    reject_unknown(a, w, {"subjects", "channels", "samples", "sample_rate", "stream_length", "template_seed",
                          "mixing_seed", "alert_freqs", "drowsy_freqs", "alert_amp", "drowsy_amp", "cross_amp",
                          "stickiness", "drift", "noise", "mixing_shift", "gain_spread", "freq_jitter",
                          "background_sources"});
    auto& s = rc.synth;
    get(a, "subjects", s.subjects, w);
    get(a, "channels", s.channels, w);
    get(a, "samples", s.samples, w);
    get(a, "sample_rate", s.sample_rate, w);
    get(a, "stream_length", s.stream_length, w);
    get(a, "template_seed", s.template_seed, w);
    get(a, "mixing_seed", s.mixing_seed, w);
    get(a, "alert_freqs", s.alert_freqs, w);
    get(a, "drowsy_freqs", s.drowsy_freqs, w);
    get(a, "alert_amp", s.alert_amp, w);
    get(a, "drowsy_amp", s.drowsy_amp, w);
    get(a, "cross_amp", s.cross_amp, w);
    get(a, "stickiness", s.stickiness, w);
    get(a, "drift", s.drift, w);
    get(a, "noise", s.noise, w);
    get(a, "mixing_shift", s.mixing_shift, w);
    get(a, "gain_spread", s.gain_spread, w);
    get(a, "freq_jitter", s.freq_jitter, w);
    get(a, "background_sources", s.background_sources, w);
  }
  try {
    p.adapt.loss.validate();
    rc.synth.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (p.adapt.bank_capacity == 0) throw ConfigError("adapt.bank_capacity must be >= 1");
  if (p.adapt.steps_per_sample == 0) throw ConfigError("adapt.steps_per_sample must be >= 1");
  if (p.pretrain.batch == 0) throw ConfigError("pretrain.batch must be >= 1");
  if (p.workers == 0) throw ConfigError("workers must be >= 1");
  return rc;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return parse_run_config(j);
}

ordered_json to_json(const RunConfig& rc) {
  const auto& p = rc.protocol;
  const auto& a = p.adapt;
  const auto& s = rc.synth;
  const auto& n = p.network;
  ordered_json j;
  j["seed"] = p.seed;
  j["mode"] = p.mode == ProtocolMode::SourceOnly ? std::string("source-only") : to_string(a.variant);
  j["workers"] = p.workers;
  j["checkpoint_dir"] = p.checkpoint_dir;
  j["allow_pretrain"] = p.allow_pretrain;
  j["export_features"] = p.keep_features;
  j["adapt"] = {{"lr", a.lr},
                {"weight_decay", a.weight_decay},
                {"steps_per_sample", a.steps_per_sample},
                {"bank_capacity", a.bank_capacity},
                {"lambda_ent", static_cast<double>(a.loss.lambda_ent)},
                {"lambda_eng", static_cast<double>(a.loss.lambda_eng)},
                {"m_in", static_cast<double>(a.loss.m_in)},
                {"m_out", static_cast<double>(a.loss.m_out)},
                {"tau", static_cast<double>(a.loss.tau)},
                {"alpha", static_cast<double>(a.alpha)},
                {"bn_mode", to_string(a.bn_mode)},
                {"noise_rel", a.augment.noise_rel},
                {"permutation_segments", a.augment.segments},
                {"eviction", a.eviction == EvictionDirection::Highest ? "highest" : "lowest"},
                {"filter", a.filter == FilterDirection::Above ? "above" : "below"}};
  j["pretrain"] = {{"lr", p.pretrain.lr},
                   {"batch", p.pretrain.batch},
                   {"epochs", p.pretrain.epochs},
                   {"max_per_subject", p.pretrain.max_per_subject}};
  j["network"] = {{"temporal_filters", n.temporal_filters}, {"depth", n.depth},
                  {"separable_filters", n.separable_filters}, {"temporal_kernel", n.temporal_kernel},
                  {"separable_kernel", n.separable_kernel}, {"pool1", n.pool1},
                  {"pool2", n.pool2}, {"dropout", n.dropout}};
  j["synth"] = {{"subjects", s.subjects}, {"channels", s.channels},
                {"samples", s.samples}, {"sample_rate", s.sample_rate},
                {"stream_length", s.stream_length}, {"template_seed", s.template_seed},
                {"mixing_seed", s.mixing_seed}, {"alert_freqs", s.alert_freqs},
                {"drowsy_freqs", s.drowsy_freqs}, {"alert_amp", s.alert_amp},
                {"drowsy_amp", s.drowsy_amp}, {"cross_amp", s.cross_amp},
                {"stickiness", s.stickiness}, {"drift", s.drift},
                {"noise", s.noise}, {"mixing_shift", s.mixing_shift},
                {"gain_spread", s.gain_spread}, {"freq_jitter", s.freq_jitter},
                {"background_sources", s.background_sources}};
  return j;
}

}  // namespace eegtta
