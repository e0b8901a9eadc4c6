#pragma once

// Property suites run by `sdd verify` and the acceptance binary.
//
// Each check is self-contained, seeded, and reports its worst observed error
// against a fixed tolerance. None of them touches the file system except the
// round-trip checks, which use a caller-supplied scratch directory.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "sdd/checkpoint.hpp"
#include "sdd/data.hpp"
#include "sdd/models.hpp"
#include "sdd/sdd_loss.hpp"
#include "sdd/testing/gradcheck.hpp"
#include "sdd/testing/oracle.hpp"
#include "sdd/training.hpp"

namespace sdd::verify {

struct CheckResult {
  std::string name;
  bool passed = false;
  double worst = 0.0;      // largest observed error, or a violation count
  double tolerance = 0.0;
  std::size_t cases = 0;
  double seconds = 0.0;
  std::string detail;
};

struct Check {
  std::string name;
  std::function<CheckResult()> run;
};

namespace detail {

using MapD = LogitMap<double>;

inline MapD random_map(std::mt19937_64& rng, std::size_t B, std::size_t K, std::size_t h, bool grad = false) {
  return {testing::random_tensor({B, K, h, h}, rng, -3.0, 3.0, grad)};
}

inline std::vector<std::size_t> random_labels(std::mt19937_64& rng, std::size_t B, std::size_t K) {
  std::vector<std::size_t> y(B);
  for (auto& v : y) v = rng() % K;
  return y;
}

inline DistillConfig loss_cfg(std::vector<std::size_t> scales, BaseLoss base, double beta, bool per_cell) {
  DistillConfig c;
  c.scales = std::move(scales);
  c.base_loss = base;
  c.beta = beta;
  c.normalize_by_cells = per_cell;
  return c;
}

inline oracle::Base to_oracle(BaseLoss b) {
  switch (b) {
    case BaseLoss::kd: return oracle::Base::kd;
    case BaseLoss::dkd: return oracle::Base::dkd;
    case BaseLoss::nkd: return oracle::Base::nkd;
  }
  return oracle::Base::kd;
}

inline const std::vector<std::vector<std::size_t>>& scale_subsets() {
  static const std::vector<std::vector<std::size_t>> s = {{1}, {2}, {4}, {1, 2}, {1, 4}, {2, 4}, {1, 2, 4}};
  return s;
}

// Calls f(base, h, K, seed) over the 3 x 2 x 2 x 50 grid shared by several checks.
template <class F>
std::size_t for_grid(F&& f) {
  std::size_t n = 0;
  for (BaseLoss base : {BaseLoss::kd, BaseLoss::dkd, BaseLoss::nkd})
    for (std::size_t h : {4u, 8u})
      for (std::size_t K : {2u, 10u})
        for (std::uint64_t seed = 0; seed < 50; ++seed, ++n) f(base, h, K, seed);
  return n;
}

inline double rel_diff(std::span<const double> a, std::span<const double> b) {
  double d = 0, n = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    d = std::max(d, std::abs(a[i] - b[i]));
    n = std::max(n, std::abs(b[i]));
  }
  return d / std::max(n, 1e-12);
}

template <class F>
CheckResult timed(const std::string& name, double tolerance, F&& body) {
  const auto t0 = std::chrono::steady_clock::now();
  CheckResult r;
  r.name = name;
  r.tolerance = tolerance;
  try {
    body(r);
    r.passed = r.worst <= tolerance;
  } catch (const std::exception& e) {
    r.passed = false;
    r.detail = std::string("exception: ") + e.what();
  }
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

}  // namespace detail

/// sdd_loss with M = {1} equals the base loss on global logits.
inline CheckResult degeneracy() {
  return detail::timed("degeneracy", 1e-6, [](CheckResult& r) {
    r.cases = detail::for_grid([&](BaseLoss base, std::size_t h, std::size_t K, std::uint64_t seed) {
      std::mt19937_64 rng(seed * 31 + h + K);
      auto t = detail::random_map(rng, 3, K, h), s = detail::random_map(rng, 3, K, h);
      const auto y = detail::random_labels(rng, 3, K);
      const auto cfg = detail::loss_cfg({1}, base, 0.5 + static_cast<double>(seed % 4), seed % 2 == 0);
      const double got = sdd_loss(t, s, y, cfg).loss.item();
      const double expect = base_loss(global_logits(t), global_logits(s), y, cfg.base_params()).item();
      r.worst = std::max(r.worst, std::abs(got - expect));
      Tape<double>::active().reset();
    });
  });
}

/// Mean of the logit map equals the classifier applied to pooled features.
inline CheckResult linearity() {
  return detail::timed("linearity", 1e-5, [](CheckResult& r) {
    for (std::uint64_t seed = 0; seed < 20; ++seed, ++r.cases) {
      auto net = ConvNet<double>::init(seed % 2 ? reference_student(10) : reference_teacher(10), seed);
      std::mt19937_64 rng(seed);
      auto x = testing::random_tensor({2, 1, 32, 32}, rng, -1, 1, false);
      auto f = net.forward_features(x);
      const auto lhs = global_logits(net.logit_map(f)), rhs = net.pooled_logits(f);
      r.worst = std::max(r.worst, detail::rel_diff(lhs.data(), rhs.data()));
      Tape<double>::active().reset();
    }
  });
}

/// sdd_loss against explicit cell-by-cell enumeration, totals and counts.
inline CheckResult brute_force() {
  return detail::timed("brute_force_oracle", 1e-6, [](CheckResult& r) {
    std::size_t count_mismatch = 0;
    r.cases = detail::for_grid([&](BaseLoss base, std::size_t h, std::size_t K, std::uint64_t seed) {
      std::mt19937_64 rng(seed * 7 + h * 3 + K);
      const auto& M = detail::scale_subsets()[seed % detail::scale_subsets().size()];
      const std::size_t B = 2;
      auto t = detail::random_map(rng, B, K, h), s = detail::random_map(rng, B, K, h);
      const auto y = detail::random_labels(rng, B, K);
      const bool per_cell = seed % 3 == 0;
      const auto got = sdd_loss(t, s, y, detail::loss_cfg(M, base, 2.0, per_cell));
      oracle::SddParams p;
      p.scales = M;
      p.base = detail::to_oracle(base);
      p.per_cell_mean = per_cell;
      const auto o = oracle::sdd(t.values.values(), s.values.values(), y, B, K, h, p);
      r.worst = std::max({r.worst, std::abs(got.loss.item() - o.total), std::abs(got.breakdown.d_con - o.d_con),
                          std::abs(got.breakdown.d_com - o.d_com)});
      count_mismatch += got.breakdown.consistent_count != o.n_con || got.breakdown.complementary_count != o.n_com;
      Tape<double>::active().reset();
    });
    if (count_mismatch) {
      r.worst = std::numeric_limits<double>::infinity();
      r.detail = std::to_string(count_mismatch) + " cases with differing group counts";
    }
  });
}

/// Analytic gradients of every base loss and of sdd_loss against central differences.
inline CheckResult loss_gradients() {
  return detail::timed("loss_gradients", 1e-4, [](CheckResult& r) {
    for (BaseLoss base : {BaseLoss::kd, BaseLoss::dkd, BaseLoss::nkd})
      for (std::uint64_t seed = 0; seed < 20; ++seed) {
        std::mt19937_64 rng(seed + 300);
        const std::size_t K = seed % 2 ? 2 : 6;
        auto t = detail::random_map(rng, 2, K, 4, true), s = detail::random_map(rng, 2, K, 4, true);
        const auto y = detail::random_labels(rng, 2, K);
        auto cfg = detail::loss_cfg({1, 2, 4}, base, 2.0, seed % 2 == 0);
        cfg.groups = static_cast<KnowledgeGroups>(seed % 3);
        auto sdd = [&] { return sdd_loss(t, s, y, cfg).loss; };
        r.worst = std::max(r.worst, testing::max_gradient_error(sdd, {s.values}));
        auto tg = testing::random_tensor({3, K}, rng, -3, 3), sg = testing::random_tensor({3, K}, rng, -3, 3);
        const auto y3 = detail::random_labels(rng, 3, K);
        auto plain = [&] { return base_loss(tg, sg, y3, cfg.base_params()); };
        r.worst = std::max(r.worst, testing::max_gradient_error(plain, {sg}));
        r.cases += 2;
      }
  });
}

/// CE + alpha * L_SDD through a small student, gradients with respect to all student parameters.
inline CheckResult objective_gradients() {
  return detail::timed("objective_gradients", 1e-3, [](CheckResult& r) {
    const ConvNetSpec teacher_spec{1, 8, {conv_block(3, 3, 2), conv_block(4, 1, 1)}, 3};
    const ConvNetSpec student_spec{1, 8, {conv_block(3, 3, 2)}, 3};
    for (std::uint64_t seed = 0; seed < 20; ++seed, ++r.cases) {
      auto teacher = ConvNet<double>::init(teacher_spec, seed + 1000);
      teacher.set_trainable(false);
      auto student = ConvNet<double>::init(student_spec, seed);
      std::mt19937_64 rng(seed + 400);
      auto x = testing::random_tensor({3, 1, 8, 8}, rng, -1, 1, false);
      const auto y = detail::random_labels(rng, 3, 3);
      DistillConfig cfg;
      cfg.scales = {1, 2, 4};
      cfg.base_loss = static_cast<BaseLoss>(seed % 3);
      const LogitMap<double> tmap{teacher.forward_map(x).values.detach()};
      Tape<double>::active().reset();
      const double alpha = 0.7;
      auto f = [&] {
        const auto map = student.forward_map(x);
        auto loss = cross_entropy(global_logits(map), y);
        return add(loss, scale(sdd_loss(tmap, map, y, cfg).loss, alpha));
      };
      r.worst = std::max(r.worst, testing::max_gradient_error(f, student.parameters(), 1e-6, 60));
    }
  });
}

/// Total is affine in beta with slope D_com.
inline CheckResult beta_linearity() {
  return detail::timed("beta_linearity", 1e-9, [](CheckResult& r) {
    r.cases = detail::for_grid([&](BaseLoss base, std::size_t h, std::size_t K, std::uint64_t seed) {
      std::mt19937_64 rng(seed + 100 + 13 * h + K);
      auto t = detail::random_map(rng, 2, K, h), s = detail::random_map(rng, 2, K, h);
      const auto y = detail::random_labels(rng, 2, K);
      const auto cfg = detail::loss_cfg({1, 2, 4}, base, 1.0, seed % 2 == 0);
      const double d_com = sdd_loss(t, s, y, cfg).breakdown.d_com;
      const double b1 = 0.25 * static_cast<double>(seed % 5), b2 = 3.0 - b1;
      const auto [l1, l2] = loss_beta_sensitivity(t, s, y, cfg, b1, b2);
      r.worst = std::max(r.worst, std::abs((l2 - l1) - (b2 - b1) * d_com));
      Tape<double>::active().reset();
    });
  });
}

/// Every cell lands in exactly one group; counts add up per scale and overall.
inline CheckResult partition() {
  return detail::timed("partition_completeness", 0.0, [](CheckResult& r) {
    std::size_t violations = 0;
    r.cases = detail::for_grid([&](BaseLoss base, std::size_t h, std::size_t K, std::uint64_t seed) {
      std::mt19937_64 rng(seed + 200 + 13 * h + K);
      const auto& M = detail::scale_subsets()[seed % detail::scale_subsets().size()];
      const std::size_t B = 3;
      auto t = detail::random_map(rng, B, K, h), s = detail::random_map(rng, B, K, h);
      const auto y = detail::random_labels(rng, B, K);
      const auto bd = sdd_loss(t, s, y, detail::loss_cfg(M, base, 2.0, false)).breakdown;
      std::size_t expect = 0;
      for (auto m : M) expect += m * m;
      violations += bd.consistent_count + bd.complementary_count != B * expect;
      violations += bd.cells.size() != B * expect;
      std::set<std::tuple<std::size_t, std::size_t, std::size_t>> keys;
      for (const auto& c : bd.cells) {
        violations += !keys.insert({c.sample, c.scale, c.cell_index}).second;
        violations += c.scale == 1 && c.label != KnowledgeLabel::consistent;
        violations += c.loss_value < -1e-9;
      }
      std::size_t per_scale = 0;
      for (const auto& sc : bd.scales) per_scale += sc.consistent_cells + sc.complementary_cells;
      violations += per_scale != B * expect;
      Tape<double>::active().reset();
    });
    r.worst = static_cast<double>(violations);
  });
}

/// Conv, pooling, softmax and CE gradients through a composite graph.
inline CheckResult op_gradients() {
  return detail::timed("op_gradients", 1e-3, [](CheckResult& r) {
    for (std::uint64_t seed = 0; seed < 20; ++seed, ++r.cases) {
      std::mt19937_64 rng(seed + 100);
      auto x = testing::random_tensor({3, 2, 6, 6}, rng, -1, 1, false);
      auto k = testing::random_tensor({4, 2, 3, 3}, rng, -0.5, 0.5);
      auto kb = testing::random_tensor({4}, rng, -0.1, 0.1);
      auto w = testing::random_tensor({4, 5}, rng, -0.5, 0.5);
      const std::vector<std::size_t> labels{0, 3, 4};
      auto f = [&] {
        auto h = relu(add_channel_bias(conv2d(x, k, 2, 1), kb));
        auto pooled = avgpool_region(h, {0, 2}, {1, 3});
        auto logits = matmul(global_avg_pool(h), w);
        return add(cross_entropy(logits, labels), mean(pooled));
      };
      r.worst = std::max(r.worst, testing::max_gradient_error(f, {k, kb, w}));
    }
  });
}

/// Checkpoint and IDX writers reproduce their inputs bit for bit.
inline CheckResult round_trips(const std::filesystem::path& scratch) {
  return detail::timed("serialization_round_trips", 0.0, [&](CheckResult& r) {
    std::size_t violations = 0;
    for (std::uint64_t seed = 0; seed < 4; ++seed, ++r.cases) {
      auto net = ConvNet<float>::init(seed % 2 ? reference_student(8) : reference_teacher(8), seed);
      const auto path = scratch / ("verify_" + std::to_string(seed) + ".ckpt");
      save_checkpoint(net, path);
      const auto back = load_checkpoint<float>(path);
      violations += !(back.spec() == net.spec());
      violations += encode_checkpoint(back) != encode_checkpoint(net);
      std::filesystem::remove(path);
    }
    SynthSpec spec;
    spec.num_samples = 64;
    const auto ds = generate_ambiguous(spec);
    const auto ip = scratch / "verify-images.idx", lp = scratch / "verify-labels.idx";
    write_idx(ds, ip, lp);
    const auto back = load_idx(ip, lp);
    violations += back.images != ds.images || back.labels != ds.labels;
    std::filesystem::remove(ip);
    std::filesystem::remove(lp);
    ++r.cases;
    r.worst = static_cast<double>(violations);
  });
}

/// Two seeded runs give identical metrics; the teacher is untouched by distillation.
inline CheckResult training_determinism() {
  return detail::timed("training_determinism", 0.0, [](CheckResult& r) {
    SynthSpec spec;
    spec.seed = 5;
    const auto split = generate_ambiguous_split(spec, 64, 32);
    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.batch_size = 16;
    cfg.lr_decay_epochs = {};
    cfg.log_timing = false;
    const ConvNetSpec tspec{1, 32, {conv_block(4, 3, 4), conv_block(8, 3, 2)}, spec.num_classes()};
    const ConvNetSpec sspec{1, 32, {conv_block(4, 5, 8)}, spec.num_classes()};
    std::size_t violations = 0;
    const auto a = train_teacher<float>(tspec, split.train, &split.test, cfg);
    const auto b = train_teacher<float>(tspec, split.train, &split.test, cfg);
    violations += a.metrics.to_csv() != b.metrics.to_csv();
    violations += encode_checkpoint(a.model) != encode_checkpoint(b.model);
    const auto before = encode_checkpoint(a.model);
    auto dcfg = cfg;
    dcfg.distill = DistillConfig{};
    dcfg.distill->scales = {1, 2, 4};
    const auto s1 = distill_student<float>(a.model, sspec, split.train, &split.test, dcfg);
    const auto s2 = distill_student<float>(a.model, sspec, split.train, &split.test, dcfg);
    violations += s1.metrics.to_csv() != s2.metrics.to_csv();
    violations += encode_checkpoint(a.model) != before;
    r.cases = 4;
    r.worst = static_cast<double>(violations);
  });
}

/// Criteria 1-5 in order.
inline std::vector<Check> loss_checks() {
  return {{"degeneracy", degeneracy},
          {"linearity", linearity},
          {"brute_force_oracle", brute_force},
          {"loss_gradients", loss_gradients},
          {"objective_gradients", objective_gradients},
          {"beta_linearity", beta_linearity},
          {"partition_completeness", partition}};
}

/// Everything `verify` runs.
inline std::vector<Check> all_checks(const std::filesystem::path& scratch) {
  auto checks = loss_checks();
  checks.push_back({"op_gradients", op_gradients});
  checks.push_back({"serialization_round_trips", [scratch] { return round_trips(scratch); }});
  checks.push_back({"training_determinism", training_determinism});
  return checks;
}

inline std::string format(const CheckResult& r) {
  std::ostringstream os;
  os << (r.passed ? "PASS " : "FAIL ") << r.name << ": worst " << r.worst << " (tol " << r.tolerance << ", "
     << r.cases << " cases, " << r.seconds << " s)";
  if (!r.detail.empty()) os << " " << r.detail;
  return os.str();
}

}  // namespace sdd::verify
