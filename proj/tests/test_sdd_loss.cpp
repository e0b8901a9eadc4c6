#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <set>

#include "sdd/sdd_loss.hpp"
#include "sdd/testing/gradcheck.hpp"
#include "sdd/testing/oracle.hpp"

namespace sdd {
namespace {

using testing::random_tensor;
using TD = Tensor<double>;
using MapD = LogitMap<double>;

MapD random_map(std::mt19937_64& rng, std::size_t B, std::size_t K, std::size_t h, bool grad = false,
                double spread = 3.0) {
  return {random_tensor({B, K, h, h}, rng, -spread, spread, grad)};
}

std::vector<std::size_t> random_labels(std::mt19937_64& rng, std::size_t B, std::size_t K) {
  std::vector<std::size_t> y(B);
  for (auto& v : y) v = rng() % K;
  return y;
}

oracle::Base to_oracle(BaseLoss b) {
  switch (b) {
    case BaseLoss::kd: return oracle::Base::kd;
    case BaseLoss::dkd: return oracle::Base::dkd;
    case BaseLoss::nkd: return oracle::Base::nkd;
  }
  return oracle::Base::kd;
}

oracle::Vec row(const TD& t, std::size_t r, std::size_t K) {
  return {t.values().begin() + r * K, t.values().begin() + (r + 1) * K};
}

const std::vector<std::vector<std::size_t>> kScaleSubsets = {{1}, {2}, {4}, {1, 2}, {1, 4}, {2, 4}, {1, 2, 4}};

TEST(EnumerateCells, GlobalCellOnly) {
  const auto cells = enumerate_cells(4, 4, {1});
  ASSERT_EQ(cells.size(), 1u);
  EXPECT_EQ(cells[0].rows.begin, 0u);
  EXPECT_EQ(cells[0].rows.end, 4u);
  EXPECT_EQ(cells[0].cols.end, 4u);
}

TEST(EnumerateCells, CountIsSumOfSquares) {
  EXPECT_EQ(enumerate_cells(4, 4, {1, 2, 4}).size(), 21u);
  EXPECT_EQ(enumerate_cells(8, 8, {1, 2, 4, 8}).size(), 85u);
}

TEST(EnumerateCells, EachScaleTilesTheMap) {
  const std::size_t h = 8;
  const auto cells = enumerate_cells(h, h, {1, 2, 4});
  for (std::size_t m : {1u, 2u, 4u}) {
    std::multiset<std::size_t> seen;
    for (const auto& c : cells) {
      if (c.scale != m) continue;
      EXPECT_EQ(c.rows.size(), h / m);
      EXPECT_EQ(c.cols.size(), h / m);
      for (auto i = c.rows.begin; i < c.rows.end; ++i)
        for (auto j = c.cols.begin; j < c.cols.end; ++j) seen.insert(i * h + j);
    }
    EXPECT_EQ(seen.size(), h * h);
    for (std::size_t p = 0; p < h * h; ++p) EXPECT_EQ(seen.count(p), 1u) << "m=" << m << " p=" << p;
  }
}

TEST(EnumerateCells, RejectsBadGeometry) {
  EXPECT_THROW(enumerate_cells(4, 2, {1}), ConfigError);
  try {
    enumerate_cells(4, 4, {1, 3});
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("scale 3"), std::string::npos);
  }
}

TEST(EnumerateCells, MonotoneRefinementCount) {
  std::vector<std::size_t> all = {1, 2, 4, 8};
  for (std::size_t mask = 1; mask < 16; ++mask)
    for (std::size_t extra = 0; extra < 4; ++extra) {
      if (mask & (1u << extra)) continue;
      std::vector<std::size_t> base, grown;
      for (std::size_t i = 0; i < 4; ++i) {
        if (mask & (1u << i)) base.push_back(all[i]);
        if ((mask | (1u << extra)) & (1u << i)) grown.push_back(all[i]);
      }
      EXPECT_EQ(enumerate_cells(8, 8, grown).size(), enumerate_cells(8, 8, base).size() + all[extra] * all[extra]);
    }
}

TEST(CellLogit, GlobalConstantAndSinglePosition) {
  std::mt19937_64 rng(1);
  auto map = random_map(rng, 2, 5, 4);
  const auto global = enumerate_cells(4, 4, {1})[0];
  EXPECT_EQ(cell_logit(map, global).values(), global_logits(map).values());

  MapD constant{TD::full({1, 3, 4, 4}, 0.25)};
  for (const auto& c : enumerate_cells(4, 4, {1, 2, 4}))
    for (double v : cell_logit(constant, c).values()) EXPECT_DOUBLE_EQ(v, 0.25);

  auto small = random_map(rng, 1, 3, 2);
  for (const auto& c : enumerate_cells(2, 2, {2})) {
    const auto v = cell_logit(small, c);
    for (std::size_t k = 0; k < 3; ++k) EXPECT_EQ(v[k], small.values[k * 4 + c.rows.begin * 2 + c.cols.begin]);
  }
  EXPECT_THROW(cell_logit(small, ScaleCell{1, 0, {0, 3}, {0, 2}}), RangeError);
}

TEST(LdKd, KnownValues) {
  TD a({1, 3}, {0.3, -1.0, 2.0});
  EXPECT_EQ(ld_kd(a, a, 4.0).item(), 0.0);
  // p = softmax([1,0]), q = softmax([0,1]) = reversed p.
  const double p0 = std::exp(1.0) / (1 + std::exp(1.0)), p1 = 1 - p0;
  const double expect = p0 * std::log(p0 / p1) + p1 * std::log(p1 / p0);
  EXPECT_NEAR(ld_kd(TD({1, 2}, {1, 0}), TD({1, 2}, {0, 1}), 1.0).item(), expect, 1e-12);
  std::mt19937_64 rng(2);
  auto t = random_tensor({4, 6}, rng, -5, 5, false), s = random_tensor({4, 6}, rng, -5, 5, false);
  // The softened KL vanishes; the T^2-scaled loss tends to the centred squared logit gap over 2K.
  const double T = 1e4;
  EXPECT_LT(ld_kd(t, s, T).item() / (T * T), 1e-4);
  double limit = 0;
  for (std::size_t r = 0; r < 4; ++r) {
    double mean_gap = 0;
    for (std::size_t k = 0; k < 6; ++k) mean_gap += (t[r * 6 + k] - s[r * 6 + k]) / 6;
    for (std::size_t k = 0; k < 6; ++k) limit += std::pow(t[r * 6 + k] - s[r * 6 + k] - mean_gap, 2) / (2 * 6) / 4;
  }
  EXPECT_NEAR(ld_kd(t, s, T).item(), limit, 1e-3 * limit);
  EXPECT_THROW(ld_kd(t, s, 0.0), ConfigError);
}

TEST(LdKd, MatchesOracle) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(seed);
    auto t = random_tensor({3, 7}, rng, -4, 4, false), s = random_tensor({3, 7}, rng, -4, 4, false);
    double expect = 0;
    for (std::size_t r = 0; r < 3; ++r) expect += oracle::kd(row(t, r, 7), row(s, r, 7), 3.0) / 3;
    EXPECT_NEAR(ld_kd(t, s, 3.0).item(), expect, 1e-10);
  }
}

TEST(LdDkd, IdenticalIsZeroAndTwoPartOracle) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t K = 2 + rng() % 8;
    auto t = random_tensor({3, K}, rng, -4, 4, false), s = random_tensor({3, K}, rng, -4, 4, false);
    const auto y = random_labels(rng, 3, K);
    EXPECT_NEAR(ld_dkd(t, t, y, 1.0, 8.0, 4.0).item(), 0.0, 1e-12);
    double expect = 0;
    for (std::size_t r = 0; r < 3; ++r) {
      expect += 2.5 * (oracle::dkd_tckd(row(t, r, K), row(s, r, K), y[r], 4.0) +
                       oracle::dkd_nckd(row(t, r, K), row(s, r, K), y[r], 4.0)) / 3;
    }
    EXPECT_NEAR(ld_dkd(t, s, y, 2.5, 2.5, 4.0).item(), expect, 1e-10);
  }
}

TEST(LdDkd, BinaryProblemHasNoNonTargetTerm) {
  std::mt19937_64 rng(4);
  auto t = random_tensor({5, 2}, rng, -4, 4, false), s = random_tensor({5, 2}, rng, -4, 4, false);
  const auto y = random_labels(rng, 5, 2);
  EXPECT_NEAR(ld_dkd(t, s, y, 0.0, 8.0, 4.0).item(), 0.0, 1e-12);
  EXPECT_NEAR(ld_dkd(t, s, y, 1.0, 8.0, 4.0).item(), ld_kd(t, s, 4.0).item(), 1e-10);
  EXPECT_THROW(ld_dkd(TD({1, 1}, {0.0}), TD({1, 1}, {0.0}), std::vector<std::size_t>{0}, 1.0, 8.0, 4.0), ConfigError);
}

TEST(LdNkd, ComponentsAndOracle) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t K = 2 + rng() % 8;
    auto t = random_tensor({3, K}, rng, -4, 4, false), s = random_tensor({3, K}, rng, -4, 4, false);
    const auto y = random_labels(rng, 3, K);
    double expect = 0, target_only = 0;
    for (std::size_t r = 0; r < 3; ++r) {
      expect += oracle::nkd(row(t, r, K), row(s, r, K), y[r], 1.5, 4.0) / 3;
      const auto p = oracle::softmax(row(t, r, K), 1.0);
      target_only += -p[y[r]] * std::log(p[y[r]]) / 3;
    }
    EXPECT_NEAR(ld_nkd(t, s, y, 1.5, 4.0).item(), expect, 1e-10);
    // Identical logits leave only the target term.
    EXPECT_NEAR(ld_nkd(t, t, y, 1.5, 4.0).item(), target_only, 1e-12);
    EXPECT_GE(ld_nkd(t, s, y, 0.0, 4.0).item(), 0.0);
    EXPECT_GE(ld_nkd(t, s, y, 1.5, 4.0).item() - ld_nkd(t, s, y, 0.0, 4.0).item(), -1e-12);
  }
  EXPECT_THROW(ld_nkd(TD({1, 1}, {0.0}), TD({1, 1}, {0.0}), std::vector<std::size_t>{0}, 1.5, 4.0), ConfigError);
}

TEST(LdNkd, RenormalizedNonTargetSumsToOne) {
  std::mt19937_64 rng(6);
  auto t = random_tensor({4, 5}, rng, -3, 3, false);
  const auto y = random_labels(rng, 4, 5);
  const auto lp = log_softmax(drop_column(t, y), 4.0);
  for (std::size_t r = 0; r < 4; ++r) {
    double s = 0;
    for (std::size_t k = 0; k < 4; ++k) s += std::exp(lp[r * 4 + k]);
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

TEST(ClassifyCell, ArgmaxAgreementWithLowestIndexTies) {
  std::vector<double> g = {0, 0, 3, 0, 0, 1}, c = {0, 0, 1, 0, 0, 4};
  EXPECT_EQ(classify_cell<double>(g, g), KnowledgeLabel::consistent);
  EXPECT_EQ(classify_cell<double>(c, g), KnowledgeLabel::complementary);
  std::vector<double> tie = {2, 2, 0}, first = {1, 0, 0}, second = {0, 1, 0};
  EXPECT_EQ(classify_cell<double>(tie, first), KnowledgeLabel::consistent);
  EXPECT_EQ(classify_cell<double>(tie, second), KnowledgeLabel::complementary);
}

DistillConfig make_cfg(std::vector<std::size_t> scales, BaseLoss base, double beta = 2.0, bool per_cell = false) {
  DistillConfig c;
  c.scales = std::move(scales);
  c.base_loss = base;
  c.beta = beta;
  c.normalize_by_cells = per_cell;
  return c;
}

TEST(SddLoss, GlobalScaleDegeneratesToBaseLoss) {
  int checked = 0;
  for (BaseLoss base : {BaseLoss::kd, BaseLoss::dkd, BaseLoss::nkd})
    for (std::size_t h : {4u, 8u})
      for (std::size_t K : {2u, 10u})
        for (std::uint64_t seed = 0; seed < 50; ++seed) {
          std::mt19937_64 rng(seed * 31 + h + K);
          auto t = random_map(rng, 3, K, h), s = random_map(rng, 3, K, h);
          const auto y = random_labels(rng, 3, K);
          const auto cfg = make_cfg({1}, base, 0.5 + static_cast<double>(seed % 4), seed % 2 == 0);
          const double got = sdd_loss(t, s, y, cfg).loss.item();
          const double expect = sdd::base_loss(global_logits(t), global_logits(s), y, cfg.base_params()).item();
          EXPECT_NEAR(got, expect, 1e-6);
          ++checked;
        }
  EXPECT_EQ(checked, 600);
}

TEST(SddLoss, MatchesBruteForceEnumeration) {
  for (BaseLoss base : {BaseLoss::kd, BaseLoss::dkd, BaseLoss::nkd})
    for (std::size_t h : {4u, 8u})
      for (std::size_t K : {2u, 10u})
        for (std::uint64_t seed = 0; seed < 50; ++seed) {
          std::mt19937_64 rng(seed * 7 + h * 3 + K);
          const auto& M = kScaleSubsets[seed % kScaleSubsets.size()];
          const std::size_t B = 2;
          auto t = random_map(rng, B, K, h), s = random_map(rng, B, K, h);
          const auto y = random_labels(rng, B, K);
          const bool per_cell = seed % 3 == 0;
          const auto r = sdd_loss(t, s, y, make_cfg(M, base, 2.0, per_cell));
          oracle::SddParams p;
          p.scales = M;
          p.base = to_oracle(base);
          p.per_cell_mean = per_cell;
          const auto o = oracle::sdd(t.values.values(), s.values.values(), y, B, K, h, p);
          EXPECT_NEAR(r.loss.item(), o.total, 1e-6);
          EXPECT_NEAR(r.breakdown.d_con, o.d_con, 1e-6);
          EXPECT_NEAR(r.breakdown.d_com, o.d_com, 1e-6);
          EXPECT_EQ(r.breakdown.consistent_count, o.n_con);
          EXPECT_EQ(r.breakdown.complementary_count, o.n_com);
        }
}

TEST(SddLoss, UnitBetaIsPlainSumOfCellLosses) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(seed);
    auto t = random_map(rng, 3, 6, 4), s = random_map(rng, 3, 6, 4);
    const auto y = random_labels(rng, 3, 6);
    const auto r = sdd_loss(t, s, y, make_cfg({1, 2, 4}, BaseLoss::kd, 1.0));
    double sum = 0;
    for (const auto& c : r.breakdown.cells) sum += c.loss_value;
    EXPECT_NEAR(r.loss.item(), sum / 3, 1e-9);
  }
}

TEST(SddLoss, AffineInBeta) {
  for (BaseLoss base : {BaseLoss::kd, BaseLoss::dkd, BaseLoss::nkd})
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
      std::mt19937_64 rng(seed + 100);
      const std::size_t h = seed % 2 ? 8 : 4, K = seed % 4 < 2 ? 2 : 10;
      auto t = random_map(rng, 2, K, h), s = random_map(rng, 2, K, h);
      const auto y = random_labels(rng, 2, K);
      auto cfg = make_cfg({1, 2, 4}, base, 1.0, seed % 2 == 0);
      const double d_com = sdd_loss(t, s, y, cfg).breakdown.d_com;
      const double b1 = 0.25 * static_cast<double>(seed % 5), b2 = 3.0 - b1;
      const auto [l1, l2] = loss_beta_sensitivity(t, s, y, cfg, b1, b2);
      EXPECT_NEAR(l2 - l1, (b2 - b1) * d_com, 1e-9);
      const auto [e1, e2] = loss_beta_sensitivity(t, s, y, cfg, b1, b1);
      EXPECT_EQ(e1, e2);
      const auto [h1, h2] = loss_beta_sensitivity(t, s, y, cfg, 1.5, 3.0);
      EXPECT_NEAR(h2 - h1, 1.5 * d_com, 1e-9);
    }
}

TEST(SddLoss, PartitionIsCompleteAndLossesNonNegative) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    std::mt19937_64 rng(seed + 200);
    const auto& M = kScaleSubsets[seed % kScaleSubsets.size()];
    const std::size_t h = seed % 2 ? 8 : 4, K = seed % 4 < 2 ? 2 : 10, B = 3;
    auto t = random_map(rng, B, K, h), s = random_map(rng, B, K, h);
    const auto y = random_labels(rng, B, K);
    const auto bd = sdd_loss(t, s, y, make_cfg(M, BaseLoss::kd)).breakdown;
    std::size_t expect = 0;
    for (auto m : M) expect += m * m;
    EXPECT_EQ(bd.consistent_count + bd.complementary_count, B * expect);
    ASSERT_EQ(bd.cells.size(), B * expect);
    std::set<std::tuple<std::size_t, std::size_t, std::size_t>> keys;
    for (const auto& c : bd.cells) {
      EXPECT_TRUE(keys.insert({c.sample, c.scale, c.cell_index}).second);
      EXPECT_GE(c.loss_value, -1e-9);
    }
    std::size_t per_scale = 0;
    for (const auto& sc : bd.scales) per_scale += sc.consistent_cells + sc.complementary_cells;
    EXPECT_EQ(per_scale, B * expect);
  }
}

TEST(SddLoss, GlobalCellIsAlwaysConsistent) {
  std::mt19937_64 rng(8);
  auto t = random_map(rng, 4, 10, 4), s = random_map(rng, 4, 10, 4);
  for (const auto& c : sdd_loss(t, s, {}, make_cfg({1, 2}, BaseLoss::kd)).breakdown.cells) {
    if (c.scale == 1) {
      EXPECT_EQ(c.label, KnowledgeLabel::consistent);
    }
  }
}

TEST(SddLoss, GradientMatchesFiniteDifferences) {
  for (BaseLoss base : {BaseLoss::kd, BaseLoss::dkd, BaseLoss::nkd})
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      std::mt19937_64 rng(seed + 300);
      const std::size_t K = seed % 2 ? 2 : 6;
      auto t = random_map(rng, 2, K, 4, true), s = random_map(rng, 2, K, 4, true);
      const auto y = random_labels(rng, 2, K);
      auto cfg = make_cfg({1, 2, 4}, base, 2.0, seed % 2 == 0);
      cfg.groups = static_cast<KnowledgeGroups>(seed % 3);
      auto f = [&] { return sdd_loss(t, s, y, cfg).loss; };
      EXPECT_LE(testing::max_gradient_error(f, {s.values}), 1e-4) << to_string(base) << " seed " << seed;

      auto& tape = Tape<double>::active();
      tape.reset();
      t.values.zero_grad();
      tape.backward(f());
      for (double g : t.values.grad()) EXPECT_EQ(g, 0.0);
      tape.reset();
    }
}

TEST(SddLoss, GroupSelection) {
  std::mt19937_64 rng(9);
  auto t = random_map(rng, 3, 10, 4), s = random_map(rng, 3, 10, 4);
  auto cfg = make_cfg({1, 2, 4}, BaseLoss::kd, 2.0);
  const auto fusion = sdd_loss(t, s, {}, cfg).breakdown;
  ASSERT_GT(fusion.complementary_count, 0u);
  cfg.groups = KnowledgeGroups::consistent_only;
  const auto con = sdd_loss(t, s, {}, cfg);
  EXPECT_NEAR(con.loss.item(), fusion.d_con, 1e-12);
  EXPECT_EQ(con.breakdown.d_com, 0.0);
  cfg.groups = KnowledgeGroups::complementary_only;
  const auto com = sdd_loss(t, s, {}, cfg);
  double global = 0;
  for (const auto& c : fusion.cells)
    if (c.scale == 1) global += c.loss_value / 3;
  EXPECT_NEAR(com.breakdown.d_con, global, 1e-12);
  EXPECT_NEAR(com.loss.item(), global + 2.0 * fusion.d_com, 1e-12);
}

TEST(SddLoss, GroundTruthLabelMode) {
  std::mt19937_64 rng(10);
  auto t = random_map(rng, 4, 5, 4), s = random_map(rng, 4, 5, 4);
  const auto y = random_labels(rng, 4, 5);
  auto cfg = make_cfg({1, 2}, BaseLoss::kd);
  cfg.label_mode = LabelMode::ground_truth;
  const auto bd = sdd_loss(t, s, y, cfg).breakdown;
  const auto cells = enumerate_cells(4, 4, {1, 2});
  const auto pooled = pool_cells(t.values, cells);
  for (std::size_t i = 0; i < bd.cells.size(); ++i) {
    const auto& c = bd.cells[i];
    const bool hit = argmax(pooled.data().subspan(i * 5, 5)) == y[c.sample];
    EXPECT_EQ(c.label == KnowledgeLabel::consistent, hit);
  }
  EXPECT_THROW(sdd_loss(t, s, {}, cfg), DimensionError);
}

TEST(SddLoss, InvalidInputs) {
  std::mt19937_64 rng(11);
  auto t = random_map(rng, 2, 5, 4), s = random_map(rng, 2, 5, 8), s2 = random_map(rng, 2, 4, 4);
  EXPECT_THROW(sdd_loss(t, s, {}, make_cfg({1}, BaseLoss::kd)), DimensionError);
  EXPECT_THROW(sdd_loss(t, s2, {}, make_cfg({1}, BaseLoss::kd)), DimensionError);
  EXPECT_THROW(sdd_loss(t, t, {}, make_cfg({1, 3}, BaseLoss::kd)), ConfigError);
  EXPECT_THROW(sdd_loss(t, t, {}, make_cfg({2, 1}, BaseLoss::kd)), ConfigError);
  EXPECT_THROW(sdd_loss(t, t, {}, make_cfg({1}, BaseLoss::dkd)), DimensionError);
  EXPECT_THROW(sdd_loss(t, t, std::vector<std::size_t>{0, 9}, make_cfg({1}, BaseLoss::dkd)), DataError);
  auto cfg = make_cfg({1}, BaseLoss::kd);
  cfg.temperature = 0;
  EXPECT_THROW(sdd_loss(t, t, {}, cfg), ConfigError);
  EXPECT_TRUE(make_cfg({1, 2}, BaseLoss::kd).warnings().empty());
  EXPECT_EQ(make_cfg({2, 4}, BaseLoss::kd).warnings().size(), 1u);
}

TEST(Breakdown, CsvHasOneRowPerCell) {
  std::mt19937_64 rng(12);
  auto t = random_map(rng, 2, 3, 4), s = random_map(rng, 2, 3, 4);
  const auto csv = sdd_loss(t, s, {}, make_cfg({1, 2, 4}, BaseLoss::kd)).breakdown.to_csv();
  EXPECT_EQ(csv.rfind("sample,scale,cell_index,label,loss_value\n", 0), 0u);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 1 + 2 * 21);
}

TEST(Decouple, LabelsAgreeWithLoss) {
  std::mt19937_64 rng(13);
  auto t = random_map(rng, 2, 6, 4), s = random_map(rng, 2, 6, 4);
  const auto cfg = make_cfg({1, 2, 4}, BaseLoss::kd);
  const auto d = decouple(t, s, {}, cfg);
  const auto bd = sdd_loss(t, s, {}, cfg).breakdown;
  ASSERT_EQ(d.size(), bd.cells.size());
  for (std::size_t i = 0; i < d.size(); ++i) {
    EXPECT_EQ(d[i].label, bd.cells[i].label);
    EXPECT_NEAR(oracle::kd(d[i].teacher_logits, d[i].student_logits, cfg.temperature), bd.cells[i].loss_value, 1e-10);
  }
}

}  // namespace
}  // namespace sdd
