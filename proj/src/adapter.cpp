#include "eegtta/adapter.hpp"

#include <chrono>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

#include "eegtta/checkpoint.hpp"

namespace eegtta {

const char* to_string(Variant v) {
  switch (v) {
    case Variant::Full: return "full";
    case Variant::NoBnUpdates: return "no-bn";
    case Variant::NoMemoryNoPL: return "no-mem";
    case Variant::NoPL: return "no-pl";
  }
  return "?";
}

Variant parse_variant(const std::string& s) {
  if (s == "full") return Variant::Full;
  if (s == "no-bn") return Variant::NoBnUpdates;
  if (s == "no-mem") return Variant::NoMemoryNoPL;
  if (s == "no-pl") return Variant::NoPL;
  throw std::invalid_argument("unknown variant '" + s + "' (expected full|no-bn|no-mem|no-pl)");
}

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

void accumulate(ParamGrads<Real>& into, const ParamGrads<Real>& g) {
  if (into.grads.empty()) {
    into = g;
    return;
  }
  for (std::size_t s = 0; s < into.grads.size(); ++s)
    for (std::size_t i = 0; i < into.grads[s].size(); ++i) into.grads[s][i] += g.grads[s][i];
}

}  // namespace

Adapter::Adapter(Network<Real> net, AdaptConfig cfg)
    : initialized_(true),
      cfg_(cfg),
      net_(std::move(net)),
      opt_(make_adamw<Real>(cfg.lr, cfg.weight_decay)),
      bank_(cfg.bank_capacity, cfg.seed, cfg.augment, cfg.eviction) {
  cfg_.loss.validate();
  if (cfg_.steps_per_sample == 0) throw std::invalid_argument("adaptation steps per sample must be >= 1");
  if (cfg_.lr < 0.0 || cfg_.weight_decay < 0.0) throw std::invalid_argument("lr and weight decay must be >= 0");
  if (cfg_.alpha < Real(0) || cfg_.alpha > Real(1)) throw std::invalid_argument("EMA alpha must be in [0,1]");
  net_.set_bn_mode(cfg_.bn_mode);
}

Adapter Adapter::from_checkpoint(const std::string& path, AdaptConfig cfg) {
  return Adapter(load_checkpoint<Real>(path), cfg);
}

void Adapter::adapt_parameters(const StemCache<Real>& x_stem, const Tensor4<Real>& x,
                               StepDiagnostics& diag) {
  // Batches: bank originals (or x_t alone) and one augmentation each.
  std::mt19937_64 rng(splitmix64(cfg_.seed ^ splitmix64(t_)));
  std::bernoulli_distribution coin(0.5);
  StemCache<Real> mem_stems;
  std::vector<Tensor4<Real>> aug;
  if (cfg_.uses_bank()) {
    mem_stems = bank_.stacked_stems();
    for (const auto& it : bank_.items())
      aug.push_back(augment(it.segment, coin(rng) ? AugKind::Permutation : AugKind::GaussianNoise,
                            cfg_.augment, rng));
  } else {
    mem_stems = x_stem;
    aug.push_back(augment(x, coin(rng) ? AugKind::Permutation : AugKind::GaussianNoise,
                          cfg_.augment, rng));
  }
  const bool need_aug = cfg_.loss.lambda_eng != Real(0);
  StemCache<Real> aug_stems;
  if (need_aug) {
    std::vector<const Tensor4<Real>*> ptrs;
    for (const auto& a : aug) ptrs.push_back(&a);
    aug_stems = net_.make_stem_cache(stack<Real>(ptrs));
  }

  const auto params = net_.parameters(GradScope::BnAffineOnly);
  for (std::size_t k = 0; k < cfg_.steps_per_sample; ++k) {
    const auto mem = net_.forward_cached(mem_stems, true);
    ForwardResult<Real> augr;
    if (need_aug) augr = net_.forward_cached(aug_stems, true);
    const auto loss = total_loss<Real>(mem.logits, augr.logits, cfg_.loss);
    if (k == 0) {
      diag.loss_total = loss.total;
      diag.loss_entropy = loss.entropy;
      diag.loss_energy = loss.energy;
    }
    ParamGrads<Real> grads = net_.backward(mem.cache, loss.d_mem, GradScope::BnAffineOnly);
    if (need_aug) accumulate(grads, net_.backward(augr.cache, loss.d_aug, GradScope::BnAffineOnly));
    optimizer_step<Real>(params, grads, opt_);
  }
}

Prediction Adapter::adapt_step(const Tensor4<Real>& x) {
  if (!initialized_) throw std::logic_error("adapter has no network");
  const auto t0 = std::chrono::steady_clock::now();
  const Shape4 in = net_.input_shape();
  const Shape4 s = x.shape();
  if (s.n != 1 || s.c != in.c || s.h != in.h || s.w != in.w)
    throw std::invalid_argument("adapt_step: expected one segment of shape " +
                                to_string(Shape4{1, in.c, in.h, in.w}) + ", got " + to_string(s));
  if (!x.all_finite()) throw std::invalid_argument("adapt_step: non-finite segment");

  ++t_;
  Prediction out;
  out.step = t_;
  const StemCache<Real> x_stem = net_.make_stem_cache(x);

  // (1)-(3) store, first-step initialization, eviction.
  if (cfg_.uses_bank()) {
    if (t_ == 1) bank_.initialize(x, net_);
    else bank_.insert(x, x_stem, t_);
    out.diag.eviction = bank_.evict(t_, net_);
    out.diag.bank_size = bank_.size();
  }
  if (t_ == 1 && cfg_.uses_prototypes())
    protos_ = init_from_classifier(net_.head(), cfg_.alpha, cfg_.loss.m_out, cfg_.filter);

  // (4) BN-affine update.
  if (cfg_.updates_bn()) adapt_parameters(x_stem, x, out.diag);

  // (5) prototypes from the bank with the adapted model.
  if (cfg_.uses_prototypes()) {
    const auto res = net_.forward_cached(bank_.stacked_stems(), false);
    PrototypeUpdateStats st;
    protos_ = update(*protos_, res.features, res.logits, &st);
    out.diag.prototype_members = std::move(st.members);
  }

  // (6) fresh prediction.
  PassOptions opts;
  opts.training = cfg_.updates_bn() && cfg_.bn_mode == BnMode::TrackRunning;
  opts.keep_cache = false;
  const auto res = net_.forward_cached(x_stem, opts);
  const auto z = res.features.row(0);
  const ClassPrediction cp =
      cfg_.uses_prototypes() ? predict(z, *protos_) : predict_logits(res.logits.row(0));
  out.label = cp.label;
  out.probs = cp.probs;
  out.feature.assign(z.begin(), z.end());
  out.diag.prototype_head = cfg_.uses_prototypes();
  out.latency_ms =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

namespace {

void check_labels(std::size_t n, std::span<const int> labels) {
  if (!labels.empty() && labels.size() != n)
    throw std::invalid_argument("label count " + std::to_string(labels.size()) +
                                " does not match segment count " + std::to_string(n));
}

}  // namespace

PredictionLog run_stream(Adapter& adapter, std::span<const Tensor4<Real>> segments,
                         std::span<const int> labels, StreamOptions opts) {
  if (segments.empty()) throw std::invalid_argument("run_stream: empty stream");
  check_labels(segments.size(), labels);
  PredictionLog log;
  log.entries.reserve(segments.size());
  for (std::size_t i = 0; i < segments.size(); ++i) {
    Prediction p = adapter.adapt_step(segments[i]);
    LogEntry e;
    e.step = p.step;
    if (!labels.empty()) e.truth = labels[i];
    e.predicted = p.label;
    e.probs = std::move(p.probs);
    e.loss_total = p.diag.loss_total;
    e.loss_entropy = p.diag.loss_entropy;
    e.loss_energy = p.diag.loss_energy;
    e.prototype_head = p.diag.prototype_head;
    e.latency_ms = p.latency_ms;
    log.entries.push_back(std::move(e));
    if (opts.keep_features) log.features.push_back(std::move(p.feature));
  }
  return log;
}

PredictionLog run_source_only(const Network<Real>& net, std::span<const Tensor4<Real>> segments,
                              std::span<const int> labels, StreamOptions opts) {
  check_labels(segments.size(), labels);
  PredictionLog log;
  log.entries.reserve(segments.size());
  for (std::size_t i = 0; i < segments.size(); ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto res = net.forward(segments[i], false);
    const ClassPrediction cp = predict_logits(res.logits.row(0));
    LogEntry e;
    e.step = i + 1;
    if (!labels.empty()) e.truth = labels[i];
    e.predicted = cp.label;
    e.probs = cp.probs;
    e.latency_ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    log.entries.push_back(std::move(e));
    if (opts.keep_features) {
      auto z = res.features.row(0);
      log.features.emplace_back(z.begin(), z.end());
    }
  }
  return log;
}

std::string to_json_line(const LogEntry& e) {
  nlohmann::ordered_json j;
  j["step"] = e.step;
  j["true_label"] = e.truth ? nlohmann::ordered_json(*e.truth) : nlohmann::ordered_json(nullptr);
  j["predicted"] = e.predicted;
  j["probs"] = e.probs;
  j["loss"] = {{"total", e.loss_total}, {"entropy", e.loss_entropy}, {"energy", e.loss_energy}};
  j["head"] = e.prototype_head ? "prototype" : "classifier";
  j["latency_ms"] = e.latency_ms;
  return j.dump();
}

void write_prediction_log(const std::string& path, const PredictionLog& log) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
  for (const auto& e : log.entries) out << to_json_line(e) << '\n';
  if (!out) throw std::runtime_error("write failed for '" + path + "'");
}

}  // namespace eegtta
