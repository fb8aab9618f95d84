#include "eegtta/eval/protocol.hpp"

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <functional>
#include <mutex>
#include <stdexcept>
#include <thread>

#include "eegtta/checkpoint.hpp"
#include "eegtta/data/folds.hpp"

namespace eegtta {

namespace {

struct Fnv {
  std::uint64_t h{0xcbf29ce484222325ULL};
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 0x100000001b3ULL;
    }
  }
  template <class V>
  void pod(const V& v) {
    bytes(&v, sizeof(V));
  }
};

std::uint64_t fold_seed(std::uint64_t seed, std::uint16_t target) {
  std::uint64_t x = seed * 0x9e3779b97f4a7c15ULL + target;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

EegNetConfig net_config(const Dataset& data, const ProtocolConfig& cfg) {
  EegNetConfig n = cfg.network;
  n.channels = data.channels;
  n.samples = data.samples;
  return n;
}

struct TrainSet {
  std::vector<Tensor4<Real>> x;
  std::vector<int> y;
};

TrainSet training_set(const Dataset& data, const std::vector<std::uint16_t>& subjects,
                      std::size_t max_per_subject) {
  TrainSet ts;
  for (std::uint16_t s : subjects) {
    std::vector<const SegmentRecord*> recs;
    for (const auto& r : data.records)
      if (r.subject == s && r.label != Label::Unlabeled) recs.push_back(&r);
    std::size_t take = recs.size();
    if (max_per_subject > 0) take = std::min(take, max_per_subject);
    for (std::size_t k = 0; k < take; ++k) {
      const auto* r = recs[k * recs.size() / take];
      ts.x.push_back(to_tensor(*r, data.channels, data.samples));
      ts.y.push_back(static_cast<int>(r->label));
    }
  }
  return ts;
}

std::uint64_t cache_key(const TrainSet& ts, const ProtocolConfig& cfg, const EegNetConfig& n,
                        std::uint64_t seed) {
  Fnv f;
  f.pod(cfg.pretrain.lr);
  f.pod(cfg.pretrain.batch);
  f.pod(cfg.pretrain.epochs);
  f.pod(cfg.pretrain.max_per_subject);
  f.pod(n);
  f.pod(seed);
  f.pod(sizeof(Real));
  for (std::size_t i = 0; i < ts.x.size(); ++i) {
    f.pod(ts.y[i]);
    f.bytes(ts.x[i].data().data(), ts.x[i].size() * sizeof(Real));
  }
  return f.h;
}

void run_parallel(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& job) {
  std::atomic<std::size_t> next{0};
  std::exception_ptr first_error;
  std::mutex mu;
  const auto loop = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        job(i);
      } catch (...) {
        std::lock_guard lock(mu);
        if (!first_error) first_error = std::current_exception();
      }
    }
  };
  const std::size_t w = std::max<std::size_t>(1, std::min(workers, n));
  std::vector<std::thread> pool;
  for (std::size_t k = 1; k < w; ++k) pool.emplace_back(loop);
  loop();
  for (auto& t : pool) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

}  // namespace

std::string mode_label(const ProtocolConfig& cfg) {
  if (cfg.mode == ProtocolMode::SourceOnly) return "source-only";
  return std::string(to_string(cfg.adapt.variant)) + "/" + to_string(cfg.adapt.bn_mode);
}

LatencyStats latency_stats(std::vector<double> v) {
  LatencyStats s;
  if (v.empty()) return s;
  std::sort(v.begin(), v.end());
  double sum = 0.0;
  for (double x : v) sum += x;
  s.mean_ms = sum / static_cast<double>(v.size());
  const auto at = [&](double q) { return v[static_cast<std::size_t>(q * static_cast<double>(v.size() - 1) + 0.5)]; };
  s.p50_ms = at(0.5);
  s.p95_ms = at(0.95);
  s.max_ms = v.back();
  return s;
}

Network<Real> fold_network(const Dataset& data, const std::vector<std::uint16_t>& train_subjects,
                           std::uint16_t target, const ProtocolConfig& cfg) {
  const EegNetConfig n = net_config(data, cfg);
  const std::uint64_t seed = fold_seed(cfg.seed, target);
  const TrainSet ts = training_set(data, train_subjects, cfg.pretrain.max_per_subject);
  std::string path;
  if (!cfg.checkpoint_dir.empty()) {
    char name[64];
    std::snprintf(name, sizeof name, "fold-%u-%016llx.sawt", static_cast<unsigned>(target),
                  static_cast<unsigned long long>(cache_key(ts, cfg, n, seed)));
    path = (std::filesystem::path(cfg.checkpoint_dir) / name).string();
    if (std::filesystem::exists(path)) {
      Network<Real> net = load_checkpoint<Real>(path);
      net.set_bn_mode(BnMode::FixedSource);
      return net;
    }
  }
  if (!cfg.allow_pretrain)
    throw std::runtime_error("no checkpoint for target subject " + std::to_string(target) +
                             (path.empty() ? std::string(" (no checkpoint directory)") : " at '" + path + "'") +
                             " and pretraining is disabled");
  Network<Real> net = make_eegnet<Real>(n);
  glorot_init(net, seed);
  net = pretrain(std::move(net), ts.x, ts.y, cfg.pretrain, seed);
  if (!path.empty()) {
    std::filesystem::create_directories(cfg.checkpoint_dir);
    const std::string tmp = path + ".tmp";
    save_checkpoint(tmp, net);
    std::filesystem::rename(tmp, path);
    // Reload so cached and fresh runs see the same (f32-serialized) weights.
    net = load_checkpoint<Real>(path);
    net.set_bn_mode(BnMode::FixedSource);
  }
  return net;
}

RunReport run_protocol(const Dataset& data, const ProtocolConfig& cfg) {
  const auto ids = subject_ids(data);
  const auto folds = loso_folds(ids);
  RunReport rep;
  rep.mode = mode_label(cfg);
  rep.seed = cfg.seed;
  rep.subjects.resize(folds.size());
  run_parallel(folds.size(), cfg.workers, [&](std::size_t i) {
    const Fold& f = folds[i];
    Network<Real> net = fold_network(data, f.train, f.target, cfg);
    const SubjectStream stream = subject_stream(data, f.target);
    if (stream.segments.empty())
      throw std::runtime_error("subject " + std::to_string(f.target) + " has no labeled segments");
    StreamOptions so;
    so.keep_features = cfg.keep_features;
    SubjectResult& r = rep.subjects[i];
    r.subject = f.target;
    if (cfg.mode == ProtocolMode::SourceOnly) {
      r.log = run_source_only(net, stream.segments, stream.labels, so);
    } else {
      AdaptConfig ac = cfg.adapt;
      ac.seed = fold_seed(cfg.seed, f.target);
      Adapter adapter(std::move(net), ac);
      r.log = run_stream(adapter, stream.segments, stream.labels, so);
    }
    r.metrics = compute_metrics(r.log);
    r.steps = r.log.entries.size();
    double sum = 0.0;
    for (const auto& e : r.log.entries) sum += e.latency_ms;
    r.latency_mean_ms = sum / static_cast<double>(r.steps);
  });
  std::vector<Metrics> ms;
  std::vector<double> lat;
  for (const auto& s : rep.subjects) {
    ms.push_back(s.metrics);
    for (const auto& e : s.log.entries) lat.push_back(e.latency_ms);
  }
  rep.summary = aggregate(ms);
  rep.latency = latency_stats(std::move(lat));
  return rep;
}

std::vector<RunReport> run_bn_sweep(const Dataset& data, const ProtocolConfig& cfg) {
  std::vector<RunReport> out;
  for (BnMode m : {BnMode::BatchOnly, BnMode::TrackRunning, BnMode::FixedSource}) {
    ProtocolConfig c = cfg;
    c.mode = ProtocolMode::Adapt;
    c.adapt.bn_mode = m;
    out.push_back(run_protocol(data, c));
  }
  return out;
}

}  // namespace eegtta
