#pragma once

// Per-batch training-step timing: base-loss distillation against the
// scale-decoupled loss, same student init, data order and teacher cache.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "sdd/training.hpp"

namespace sdd {

struct TimingStats {
  double median_ms = 0.0;
  double p95_ms = 0.0;
  double mean_ms = 0.0;
  std::size_t batches = 0;
};

struct BenchReport {
  TimingStats base;
  TimingStats sdd;
  double median_ratio = 0.0;  // sdd / base
  std::size_t cells_per_sample = 0;
};

/// Nearest-rank percentile of unsorted samples, q in [0, 1].
inline double percentile(std::vector<double> v, double q) {
  if (v.empty()) throw RangeError("percentile of an empty sample");
  std::sort(v.begin(), v.end());
  const auto rank = static_cast<std::size_t>(std::ceil(q * static_cast<double>(v.size())));
  return v[std::min(v.size() - 1, rank == 0 ? 0 : rank - 1)];
}

inline TimingStats summarize(const std::vector<double>& ms) {
  TimingStats s;
  s.batches = ms.size();
  s.median_ms = percentile(ms, 0.5);
  s.p95_ms = percentile(ms, 0.95);
  for (double x : ms) s.mean_ms += x;
  s.mean_ms /= static_cast<double>(ms.size());
  return s;
}

namespace detail {

template <class T>
struct BenchArm {
  ConvNet<T> net;
  Sgd<T> opt;
  std::vector<Tensor<T>> params;
  std::optional<DistillConfig> sdd;  // empty: base loss on global logits
  std::vector<double> ms;
};

template <class T>
void bench_step(BenchArm<T>& arm, const Batch<T>& b, const LogitMapCache<T>& cache, const DistillConfig& loss_cfg,
                double lr) {
  auto& tape = Tape<T>::active();
  const auto t0 = std::chrono::steady_clock::now();
  arm.net.zero_grad();
  const auto map = arm.net.forward_map(b.images);
  auto loss = cross_entropy(global_logits(map), b.labels);
  const auto tmap = cache.gather(b.indices);
  Tensor<T> distill = arm.sdd ? sdd_loss(tmap, map, b.labels, *arm.sdd).loss
                              : base_loss(global_logits(LogitMap<T>{tmap.values.detach()}), global_logits(map),
                                          b.labels, loss_cfg.base_params());
  loss = add(loss, scale(distill, static_cast<T>(loss_cfg.alpha)));
  tape.backward(loss);
  arm.opt.step(arm.params, lr);
  tape.reset();
  arm.ms.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
}

}  // namespace detail

/// Times `batches` student steps for each arm after `warmup` untimed ones.
/// With `sdd_cfg` empty both arms use the base loss (self-comparison).
template <class T>
BenchReport bench_loss(const ConvNet<T>& teacher, const ConvNetSpec& student_spec, const Dataset& train,
                       const TrainConfig& cfg, const std::optional<DistillConfig>& sdd_cfg, std::size_t batches,
                       std::size_t warmup) {
  cfg.validate();
  if (batches == 0) throw ConfigError("bench.batches must be positive");
  const DistillConfig loss_cfg = sdd_cfg.value_or(cfg.distill.value_or(DistillConfig{}));
  if (sdd_cfg) sdd_cfg->validate_for(student_spec.feature_size());
  if (teacher.spec().feature_size() != student_spec.feature_size()) {
    throw DimensionError("teacher and student logit maps differ in size");
  }
  auto frozen = teacher.clone();
  frozen.set_trainable(false);
  const auto cache = LogitMapCache<T>::build(frozen, train);

  auto make_arm = [&](std::optional<DistillConfig> s) {
    detail::BenchArm<T> a{ConvNet<T>::init(student_spec, cfg.seed), Sgd<T>(cfg.momentum, cfg.weight_decay), {},
                          std::move(s), {}};
    a.net.set_trainable(true);
    a.params = a.net.parameters();
    return a;
  };
  auto base = make_arm(std::nullopt);
  auto sdd = make_arm(sdd_cfg);

  // Arms alternate on the same batch so drift in machine load hits both.
  std::size_t done = 0, epoch = 0;
  while (done < warmup + batches) {
    BatchStream<T> stream(train, std::min(cfg.batch_size, train.count), detail::epoch_seed(cfg.seed, epoch++), true);
    while (done < warmup + batches) {
      auto b = stream.next();
      if (!b) break;
      const bool first = done % 2 == 0;
      detail::bench_step(first ? base : sdd, *b, cache, loss_cfg, cfg.lr);
      detail::bench_step(first ? sdd : base, *b, cache, loss_cfg, cfg.lr);
      if (done < warmup) {
        base.ms.clear();
        sdd.ms.clear();
      }
      ++done;
    }
  }
  BenchReport r;
  r.base = summarize(base.ms);
  r.sdd = summarize(sdd.ms);
  r.median_ratio = r.sdd.median_ms / r.base.median_ms;
  if (sdd_cfg) {
    for (auto m : sdd_cfg->scales) r.cells_per_sample += m * m;
  } else {
    r.cells_per_sample = 1;
  }
  return r;
}

}  // namespace sdd
