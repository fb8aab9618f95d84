#include "eegtta/eval/pretrain.hpp"

#include <algorithm>
#include <numeric>
#include <random>
#include <stdexcept>

#include "eegtta/losses.hpp"
#include "eegtta/optimizer.hpp"

namespace eegtta {

Network<Real> pretrain(Network<Real> net, std::span<const Tensor4<Real>> x, std::span<const int> y,
                       const PretrainConfig& cfg, std::uint64_t seed, PretrainStats* stats) {
  if (x.size() != y.size()) throw std::invalid_argument("pretrain: segment/label count mismatch");
  if (x.empty()) throw std::invalid_argument("pretrain: no training data");
  if (cfg.batch == 0) throw std::invalid_argument("pretrain: batch size must be >= 1");
  net.set_bn_mode(BnMode::BatchOnly);
  OptState<Real> opt = make_adam<Real>(cfg.lr);
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> order(x.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const auto params = net.parameters(GradScope::AllParams);
  double last = 0.0;
  PassOptions opts;
  opts.training = true;
  opts.dropout_rng = &rng;
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    std::shuffle(order.begin(), order.end(), rng);
    double sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t b = 0; b < order.size(); b += cfg.batch) {
      const std::size_t end = std::min(order.size(), b + cfg.batch);
      // A lone sample gives degenerate batch statistics.
      if (end - b < 2 && order.size() >= 2) continue;
      std::vector<const Tensor4<Real>*> ptrs;
      std::vector<int> labels;
      for (std::size_t i = b; i < end; ++i) {
        ptrs.push_back(&x[order[i]]);
        labels.push_back(y[order[i]]);
      }
      const auto res = net.forward(stack<Real>(ptrs), opts);
      const auto loss = cross_entropy<Real>(res.logits, labels);
      const auto grads = net.backward(res.cache, loss.dlogits, GradScope::AllParams);
      optimizer_step<Real>(params, grads, opt);
      sum += static_cast<double>(loss.value);
      ++batches;
    }
    last = batches ? sum / static_cast<double>(batches) : 0.0;
  }
  net.set_bn_mode(BnMode::FixedSource);
  if (stats) {
    stats->samples = x.size();
    stats->final_loss = last;
    std::size_t hit = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      const auto res = net.forward(x[i], false);
      const auto row = res.logits.row(0);
      const int k = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
      hit += k == y[i] ? 1 : 0;
    }
    stats->train_accuracy = 100.0 * static_cast<double>(hit) / static_cast<double>(x.size());
  }
  return net;
}

}  // namespace eegtta
