#pragma once

// Teacher training and student distillation with SGD, step decay and a
// linear warmup of the distillation weight.

#include <chrono>
#include <cstddef>
#include <cstdint>
#include <iomanip>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "sdd/data.hpp"
#include "sdd/errors.hpp"
#include "sdd/models.hpp"
#include "sdd/ops.hpp"
#include "sdd/sdd_loss.hpp"

namespace sdd {

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 64;
  double lr = 0.05;
  std::vector<std::size_t> lr_decay_epochs{15, 18, 21};
  double lr_decay_factor = 0.1;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::uint64_t seed = 0;
  // When false, ms_per_batch is written as 0 so metrics files are byte-stable.
  bool log_timing = true;
  std::optional<DistillConfig> distill;

  void validate() const {
    if (epochs == 0) throw ConfigError("train.epochs must be positive");
    if (batch_size == 0) throw ConfigError("train.batch_size must be positive");
    if (!(lr >= 0.0)) throw ConfigError("train.lr must be >= 0");
    for (std::size_t i = 0; i < lr_decay_epochs.size(); ++i) {
      if (i && lr_decay_epochs[i] <= lr_decay_epochs[i - 1]) {
        throw ConfigError("train.lr_decay_epochs must be strictly increasing");
      }
      if (lr_decay_epochs[i] >= epochs) throw ConfigError("train.lr_decay_epochs must be < train.epochs");
    }
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("train.momentum must be in [0, 1)");
    if (!(weight_decay >= 0.0)) throw ConfigError("train.weight_decay must be >= 0");
    if (distill) distill->validate();
  }
};

/// Base lr times factor^(milestones passed); a milestone e applies from epoch e on.
inline double lr_at_epoch(const TrainConfig& cfg, std::size_t epoch) {
  double lr = cfg.lr;
  for (auto m : cfg.lr_decay_epochs)
    if (epoch >= m) lr *= cfg.lr_decay_factor;
  return lr;
}

/// alpha * min(1, (epoch + 1) / warmup_epochs); alpha when warmup is disabled.
inline double warmup_weight(const DistillConfig& cfg, std::size_t epoch) {
  if (cfg.warmup_epochs == 0) return cfg.alpha;
  const double ramp = static_cast<double>(epoch + 1) / static_cast<double>(cfg.warmup_epochs);
  return cfg.alpha * (ramp < 1.0 ? ramp : 1.0);
}

/// SGD with momentum; weight decay is added to the raw gradient before the momentum update.
template <class T>
class Sgd {
 public:
  Sgd(double momentum, double weight_decay) : momentum_(momentum), weight_decay_(weight_decay) {}

  void step(std::vector<Tensor<T>>& params, double lr) {
    if (velocity_.size() != params.size()) {
      velocity_.clear();
      for (const auto& p : params) velocity_.emplace_back(p.size(), T(0));
    }
    const T mu = static_cast<T>(momentum_), wd = static_cast<T>(weight_decay_), eta = static_cast<T>(lr);
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& p = params[i];
      if (!p.has_grad()) continue;
      auto w = p.mutable_data();
      auto g = p.grad();
      auto& v = velocity_[i];
      for (std::size_t j = 0; j < w.size(); ++j) {
        v[j] = mu * v[j] + (g[j] + wd * w[j]);
        w[j] -= eta * v[j];
      }
    }
  }

 private:
  double momentum_;
  double weight_decay_;
  std::vector<std::vector<T>> velocity_;
};

struct StepRecord {
  std::size_t epoch = 0;
  std::size_t step = 0;
  double ce_loss = 0.0;
  double distill_weight = 0.0;
  double sdd_total = 0.0;
  double d_con = 0.0;
  double d_com = 0.0;
};

struct EpochMetrics {
  std::size_t epoch = 0;
  double ce_loss = 0.0;
  double sdd_total = 0.0;
  double d_con = 0.0;
  double d_com = 0.0;
  double train_acc = 0.0;
  double test_acc = 0.0;
  double ms_per_batch = 0.0;
};

struct RunMetrics {
  std::vector<EpochMetrics> epochs;
  std::vector<StepRecord> steps;

  std::string to_csv() const {
    std::ostringstream os;
    os << std::setprecision(std::numeric_limits<double>::max_digits10);
    os << "epoch,ce_loss,sdd_total,d_con,d_com,train_acc,test_acc,ms_per_batch\n";
    for (const auto& e : epochs) {
      os << e.epoch << ',' << e.ce_loss << ',' << e.sdd_total << ',' << e.d_con << ',' << e.d_com << ','
         << e.train_acc << ',' << e.test_acc << ',' << e.ms_per_batch << '\n';
    }
    return os.str();
  }

  double final_test_accuracy() const { return epochs.empty() ? 0.0 : epochs.back().test_acc; }
};

struct EvalResult {
  double accuracy = 0.0;
  std::size_t correct = 0;
  std::size_t total = 0;
  std::vector<std::vector<std::size_t>> confusion;  // [true][predicted]
  std::vector<std::size_t> predictions;
};

template <class T>
EvalResult evaluate(const ConvNet<T>& net, const Dataset& ds, std::size_t batch_size = 128) {
  const std::size_t K = net.spec().num_classes;
  if (ds.num_classes > K) throw DataError("dataset has more classes than the model");
  EvalResult r;
  r.confusion.assign(K, std::vector<std::size_t>(K, 0));
  r.predictions.reserve(ds.count);
  BatchStream<T> stream(ds, std::min(batch_size, ds.count), 0, false);
  while (auto b = stream.next()) {
    const auto logits = global_logits(net.forward_map(b->images));
    for (std::size_t i = 0; i < b->labels.size(); ++i) {
      const auto pred = argmax(logits.data().subspan(i * K, K));
      r.predictions.push_back(pred);
      ++r.confusion[b->labels[i]][pred];
      r.correct += pred == b->labels[i];
    }
    Tape<T>::active().reset();
  }
  r.total = ds.count;
  r.accuracy = static_cast<double>(r.correct) / static_cast<double>(r.total);
  return r;
}

template <class T>
struct TrainResult {
  ConvNet<T> model;
  RunMetrics metrics;
};

/// Teacher logit maps for every sample of a dataset, row-major per sample.
template <class T>
struct LogitMapCache {
  Shape map_shape;  // K x h x w
  std::vector<T> values;

  static LogitMapCache build(const ConvNet<T>& teacher, const Dataset& ds, std::size_t batch_size = 128) {
    LogitMapCache c;
    BatchStream<T> stream(ds, std::min(batch_size, ds.count), 0, false);
    while (auto b = stream.next()) {
      auto m = teacher.forward_map(b->images);
      if (c.map_shape.empty()) c.map_shape = {m.classes(), m.height(), m.width()};
      c.values.insert(c.values.end(), m.values.data().begin(), m.values.data().end());
      Tape<T>::active().reset();
    }
    return c;
  }

  LogitMap<T> gather(const std::vector<std::size_t>& indices) const {
    const std::size_t D = numel(map_shape);
    std::vector<T> v(indices.size() * D);
    for (std::size_t i = 0; i < indices.size(); ++i)
      std::copy_n(values.begin() + static_cast<std::ptrdiff_t>(indices[i] * D), D,
                  v.begin() + static_cast<std::ptrdiff_t>(i * D));
    return {Tensor<T>({indices.size(), map_shape[0], map_shape[1], map_shape[2]}, std::move(v))};
  }
};

namespace detail {

inline std::uint64_t epoch_seed(std::uint64_t seed, std::size_t epoch) {
  return seed * 0x9E3779B97F4A7C15ULL + 0xA5A5 + epoch * 0xBF58476D1CE4E5B9ULL;
}

// Shared loop: CE on the global logits plus, when a teacher cache is given,
// the warmed-up scale-decoupled term.
template <class T>
RunMetrics run_training(ConvNet<T>& net, const Dataset& train, const Dataset* test, const TrainConfig& cfg,
                        const LogitMapCache<T>* teacher) {
  cfg.validate();
  train.validate();
  const std::size_t K = net.spec().num_classes;
  if (train.num_classes > K || (test && test->num_classes > K)) {
    throw DataError("dataset has " + std::to_string(train.num_classes) + " classes, model has " + std::to_string(K));
  }
  net.set_trainable(true);
  auto params = net.parameters();
  Sgd<T> opt(cfg.momentum, cfg.weight_decay);
  auto& tape = Tape<T>::active();
  tape.reset();
  RunMetrics metrics;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = lr_at_epoch(cfg, epoch);
    const double w = cfg.distill ? warmup_weight(*cfg.distill, epoch) : 0.0;
    BatchStream<T> stream(train, std::min(cfg.batch_size, train.count), epoch_seed(cfg.seed, epoch), true);
    EpochMetrics em;
    em.epoch = epoch;
    std::size_t correct = 0, seen = 0, batches = 0;
    double elapsed_ms = 0.0;
    while (auto b = stream.next()) {
      const auto t0 = std::chrono::steady_clock::now();
      net.zero_grad();
      const auto map = net.forward_map(b->images);
      const auto logits = global_logits(map);
      auto loss = cross_entropy(logits, b->labels);
      StepRecord rec;
      rec.epoch = epoch;
      rec.step = step++;
      rec.ce_loss = static_cast<double>(loss.item());
      rec.distill_weight = w;
      if (teacher) {
        const auto tmap = teacher->gather(b->indices);
        auto sdd = sdd_loss(tmap, map, b->labels, *cfg.distill);
        rec.sdd_total = sdd.breakdown.total;
        rec.d_con = sdd.breakdown.d_con;
        rec.d_com = sdd.breakdown.d_com;
        loss = add(loss, scale(sdd.loss, static_cast<T>(w)));
      }
      tape.backward(loss);
      opt.step(params, lr);
      tape.reset();
      elapsed_ms += std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();

      for (std::size_t i = 0; i < b->labels.size(); ++i)
        correct += argmax(logits.data().subspan(i * K, K)) == b->labels[i];
      seen += b->labels.size();
      ++batches;
      em.ce_loss += rec.ce_loss;
      em.sdd_total += rec.sdd_total;
      em.d_con += rec.d_con;
      em.d_com += rec.d_com;
      metrics.steps.push_back(rec);
    }
    const double nb = static_cast<double>(batches);
    em.ce_loss /= nb;
    em.sdd_total /= nb;
    em.d_con /= nb;
    em.d_com /= nb;
    em.train_acc = static_cast<double>(correct) / static_cast<double>(seen);
    em.test_acc = test ? evaluate(net, *test).accuracy : 0.0;
    em.ms_per_batch = cfg.log_timing ? elapsed_ms / nb : 0.0;
    metrics.epochs.push_back(em);
  }
  return metrics;
}

}  // namespace detail

/// Label-supervised training from a seeded initialization.
template <class T>
TrainResult<T> train_teacher(const ConvNetSpec& spec, const Dataset& train, const Dataset* test,
                             const TrainConfig& cfg) {
  if (cfg.distill) throw ConfigError("train_teacher: distillation settings are not allowed for teacher training");
  if (spec.num_classes != train.num_classes) {
    throw DataError("model has " + std::to_string(spec.num_classes) + " classes, dataset has " +
                    std::to_string(train.num_classes));
  }
  TrainResult<T> r{ConvNet<T>::init(spec, cfg.seed), {}};
  r.metrics = detail::run_training<T>(r.model, train, test, cfg, nullptr);
  return r;
}

/// Student trained on CE + w(epoch) * L_SDD; the teacher is only read.
template <class T>
TrainResult<T> distill_student(const ConvNet<T>& teacher, const ConvNetSpec& student_spec, const Dataset& train,
                               const Dataset* test, const TrainConfig& cfg) {
  if (!cfg.distill) throw ConfigError("distill_student: missing distillation settings");
  if (teacher.spec().num_classes != student_spec.num_classes) {
    throw DataError("teacher has " + std::to_string(teacher.spec().num_classes) + " classes, student has " +
                    std::to_string(student_spec.num_classes));
  }
  if (student_spec.num_classes != train.num_classes) {
    throw DataError("student has " + std::to_string(student_spec.num_classes) + " classes, dataset has " +
                    std::to_string(train.num_classes));
  }
  if (teacher.spec().feature_size() != student_spec.feature_size()) {
    throw DimensionError("teacher and student logit maps differ in size: " +
                         std::to_string(teacher.spec().feature_size()) + " vs " +
                         std::to_string(student_spec.feature_size()));
  }
  cfg.distill->validate_for(student_spec.feature_size());
  auto frozen = teacher.clone();
  frozen.set_trainable(false);
  const auto cache = LogitMapCache<T>::build(frozen, train);
  TrainResult<T> r{ConvNet<T>::init(student_spec, cfg.seed), {}};
  r.metrics = detail::run_training<T>(r.model, train, test, cfg, &cache);
  return r;
}

}  // namespace sdd
