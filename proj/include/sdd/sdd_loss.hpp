#pragma once

// Scale-decoupled distillation.
//
// For every scale m the h x h logit map is tiled into m x m cells; each cell
// is averaged into one K-vector for teacher and student, and the base loss is
// applied per cell. Cells whose teacher argmax agrees with the global teacher
// argmax are "consistent", the rest "complementary"; the total is
//
//   D_con + beta * D_com,
//
// each group summed over cells and averaged over the batch.

#include <algorithm>
#include <cstddef>
#include <iomanip>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "sdd/base_losses.hpp"
#include "sdd/errors.hpp"
#include "sdd/models.hpp"
#include "sdd/ops.hpp"

namespace sdd {

struct ScaleCell {
  std::size_t scale = 1;  // cells per side
  std::size_t index = 0;  // row-major in [0, scale^2)
  IndexRange rows;
  IndexRange cols;

  bool operator==(const ScaleCell&) const = default;
};

enum class KnowledgeLabel { consistent, complementary };

inline const char* to_string(KnowledgeLabel l) {
  return l == KnowledgeLabel::consistent ? "consistent" : "complementary";
}

/// Which cell groups enter the loss. The m = 1 cell is kept by complementary_only.
enum class KnowledgeGroups { fusion, consistent_only, complementary_only };

inline KnowledgeGroups parse_knowledge_groups(const std::string& s) {
  if (s == "fusion") return KnowledgeGroups::fusion;
  if (s == "consistent") return KnowledgeGroups::consistent_only;
  if (s == "complementary") return KnowledgeGroups::complementary_only;
  throw ConfigError("unknown knowledge groups '" + s + "' (expected fusion, consistent or complementary)");
}

inline std::string to_string(KnowledgeGroups g) {
  switch (g) {
    case KnowledgeGroups::fusion: return "fusion";
    case KnowledgeGroups::consistent_only: return "consistent";
    case KnowledgeGroups::complementary_only: return "complementary";
  }
  return "?";
}

/// Reference for the consistency test: the teacher's global argmax, or the ground-truth label.
enum class LabelMode { teacher, ground_truth };

inline LabelMode parse_label_mode(const std::string& s) {
  if (s == "teacher") return LabelMode::teacher;
  if (s == "ground_truth") return LabelMode::ground_truth;
  throw ConfigError("unknown label mode '" + s + "' (expected teacher or ground_truth)");
}

inline std::string to_string(LabelMode m) { return m == LabelMode::teacher ? "teacher" : "ground_truth"; }

struct DistillConfig {
  std::vector<std::size_t> scales{1, 2, 4};
  double alpha = 1.0;
  double beta = 2.0;
  double temperature = 4.0;
  BaseLoss base_loss = BaseLoss::kd;
  double dkd_alpha = 1.0;
  double dkd_beta = 8.0;
  double nkd_gamma = 1.5;
  std::size_t warmup_epochs = 4;
  KnowledgeGroups groups = KnowledgeGroups::fusion;
  LabelMode label_mode = LabelMode::teacher;
  // Cell losses are averaged: without batch normalization the summed loss diverges at the default lr.
  bool normalize_by_cells = true;

  BaseLossParams base_params() const { return {base_loss, temperature, dkd_alpha, dkd_beta, nkd_gamma}; }

  void validate() const {
    if (scales.empty()) throw ConfigError("sdd.scales must not be empty");
    for (std::size_t i = 0; i < scales.size(); ++i) {
      if (scales[i] == 0) throw ConfigError("sdd.scales: scale 0 is invalid");
      if (i && scales[i] <= scales[i - 1]) throw ConfigError("sdd.scales must be strictly increasing");
    }
    if (!(alpha >= 0.0)) throw ConfigError("sdd.alpha must be >= 0");
    if (!(beta >= 0.0)) throw ConfigError("sdd.beta must be >= 0");
    if (!(temperature > 0.0)) throw ConfigError("sdd.temperature must be > 0");
  }

  /// Checks the scale set against an h x h logit map.
  void validate_for(std::size_t h) const {
    validate();
    for (auto m : scales) {
      if (h % m != 0) {
        throw ConfigError("sdd.scales: scale " + std::to_string(m) + " does not divide map size " + std::to_string(h));
      }
    }
  }

  std::vector<std::string> warnings() const {
    std::vector<std::string> w;
    if (std::find(scales.begin(), scales.end(), std::size_t{1}) == scales.end()) {
      w.push_back("sdd.scales lacks the global scale 1");
    }
    return w;
  }
};

/// All cells of every scale, scale by scale in the given order.
inline std::vector<ScaleCell> enumerate_cells(std::size_t h, std::size_t w, const std::vector<std::size_t>& scales) {
  if (h != w) {
    throw ConfigError("enumerate_cells: logit map must be square, got " + std::to_string(h) + "x" + std::to_string(w));
  }
  std::vector<ScaleCell> cells;
  for (auto m : scales) {
    if (m == 0 || h % m != 0) {
      throw ConfigError("enumerate_cells: scale " + std::to_string(m) + " does not divide map size " +
                        std::to_string(h));
    }
    const std::size_t side = h / m;
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < m; ++j)
        cells.push_back({m, i * m + j, {i * side, (i + 1) * side}, {j * side, (j + 1) * side}});
  }
  return cells;
}

/// Mean logit over a cell's positions: B x K.
template <class T>
Tensor<T> cell_logit(const LogitMap<T>& map, const ScaleCell& cell) {
  return avgpool_region(map.values, cell.rows, cell.cols);
}

/// Averages every cell of B x K x h x w into rows of a (B * N) x K tensor, row b * N + c.
template <class T>
Tensor<T> pool_cells(const Tensor<T>& map, const std::vector<ScaleCell>& cells) {
  if (map.ndim() != 4) throw DimensionError("pool_cells: expected B x K x h x w, got " + to_string(map.shape()));
  const std::size_t B = map.dim(0), K = map.dim(1), H = map.dim(2), W = map.dim(3), N = cells.size();
  for (const auto& c : cells) {
    if (c.rows.size() == 0 || c.cols.size() == 0 || c.rows.end > H || c.cols.end > W) {
      throw RangeError("pool_cells: cell (" + std::to_string(c.scale) + "," + std::to_string(c.index) +
                       ") outside map " + to_string(map.shape()));
    }
  }
  std::vector<T> out(B * N * K);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t n = 0; n < N; ++n) {
      const auto& c = cells[n];
      const T inv = T(1) / static_cast<T>(c.rows.size() * c.cols.size());
      for (std::size_t k = 0; k < K; ++k) {
        const T* xp = map.data().data() + (b * K + k) * H * W;
        T acc = 0;
        for (std::size_t i = c.rows.begin; i < c.rows.end; ++i)
          for (std::size_t j = c.cols.begin; j < c.cols.end; ++j) acc += xp[i * W + j];
        out[(b * N + n) * K + k] = acc * inv;
      }
    }
  return detail::record<T>("pool_cells", {&map}, Tensor<T>({B * N, K}, std::move(out)),
                           [=](typename Tape<T>::Node& nd) {
                             const T* g = nd.output->grad.data();
                             if (T* gx = detail::grad_of<T>(nd, 0))
                               for (std::size_t b = 0; b < B; ++b)
                                 for (std::size_t n = 0; n < N; ++n) {
                                   const auto& c = cells[n];
                                   const T inv = T(1) / static_cast<T>(c.rows.size() * c.cols.size());
                                   for (std::size_t k = 0; k < K; ++k) {
                                     const T gv = g[(b * N + n) * K + k] * inv;
                                     T* gp = gx + (b * K + k) * H * W;
                                     for (std::size_t i = c.rows.begin; i < c.rows.end; ++i)
                                       for (std::size_t j = c.cols.begin; j < c.cols.end; ++j) gp[i * W + j] += gv;
                                   }
                                 }
                           });
}

/// Consistent iff both argmaxes agree (lowest index wins ties on either side).
template <class T>
KnowledgeLabel classify_cell(std::span<const T> cell_teacher_logits, std::span<const T> global_teacher_logits) {
  return argmax(cell_teacher_logits) == argmax(global_teacher_logits) ? KnowledgeLabel::consistent
                                                                       : KnowledgeLabel::complementary;
}

template <class T>
struct DecoupledCellLogit {
  std::size_t sample = 0;
  ScaleCell cell;
  std::vector<T> teacher_logits;
  std::vector<T> student_logits;
  KnowledgeLabel label = KnowledgeLabel::consistent;
};

struct CellLoss {
  std::size_t sample = 0;
  std::size_t scale = 0;
  std::size_t cell_index = 0;
  KnowledgeLabel label = KnowledgeLabel::consistent;
  bool included = true;
  double loss_value = 0.0;
};

struct ScaleSummary {
  std::size_t scale = 0;
  double consistent_sum = 0.0;
  double complementary_sum = 0.0;
  std::size_t consistent_cells = 0;
  std::size_t complementary_cells = 0;
};

/// Per-cell losses and group totals of one sdd_loss evaluation.
struct Breakdown {
  std::vector<CellLoss> cells;
  std::vector<ScaleSummary> scales;
  std::size_t consistent_count = 0;
  std::size_t complementary_count = 0;
  double beta = 0.0;
  double d_con = 0.0;
  double d_com = 0.0;
  double total = 0.0;

  /// sample,scale,cell_index,label,loss_value rows.
  std::string to_csv() const {
    std::ostringstream os;
    os << std::setprecision(std::numeric_limits<double>::max_digits10);
    os << "sample,scale,cell_index,label,loss_value\n";
    for (const auto& c : cells) {
      os << c.sample << ',' << c.scale << ',' << c.cell_index << ',' << to_string(c.label) << ',' << c.loss_value
         << '\n';
    }
    return os.str();
  }
};

template <class T>
struct SddResult {
  Tensor<T> loss;
  Breakdown breakdown;
};

namespace detail {

// Scalar (con_sum + beta * com_sum) / divisor over row losses; weight 0 drops a row.
template <class T>
Tensor<T> partitioned_total(const Tensor<T>& rows, const std::vector<double>& weights, double value, double divisor) {
  return record<T>("partitioned_total", {&rows}, Tensor<T>::scalar(static_cast<T>(value)),
                   [weights, divisor](typename Tape<T>::Node& nd) {
                     const T g = nd.output->grad[0];
                     if (T* gr = grad_of<T>(nd, 0))
                       for (std::size_t i = 0; i < weights.size(); ++i)
                         gr[i] += g * static_cast<T>(weights[i] / divisor);
                   });
}

template <class T>
void check_map_pair(const LogitMap<T>& teacher, const LogitMap<T>& student) {
  if (teacher.values.ndim() != 4 || teacher.values.shape() != student.values.shape()) {
    throw DimensionError("sdd_loss: teacher map " + to_string(teacher.values.shape()) + " and student map " +
                         to_string(student.values.shape()) + " differ");
  }
}

}  // namespace detail

/// Splits both maps into cells and labels each cell from the teacher side.
template <class T>
std::vector<DecoupledCellLogit<T>> decouple(const LogitMap<T>& teacher, const LogitMap<T>& student,
                                            std::span<const std::size_t> targets, const DistillConfig& cfg) {
  detail::check_map_pair(teacher, student);
  cfg.validate_for(teacher.height());
  const auto cells = enumerate_cells(teacher.height(), teacher.width(), cfg.scales);
  const std::size_t B = teacher.batch(), K = teacher.classes(), N = cells.size();
  if (cfg.label_mode == LabelMode::ground_truth) detail::check_labels(targets, B, K);
  const auto tc = pool_cells(teacher.values.detach(), cells);
  const auto sc = pool_cells(student.values.detach(), cells);
  const auto tg = global_logits(LogitMap<T>{teacher.values.detach()});
  std::vector<DecoupledCellLogit<T>> out;
  out.reserve(B * N);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t n = 0; n < N; ++n) {
      DecoupledCellLogit<T> d;
      d.sample = b;
      d.cell = cells[n];
      const auto row = (b * N + n) * K;
      d.teacher_logits.assign(tc.values().begin() + row, tc.values().begin() + row + K);
      d.student_logits.assign(sc.values().begin() + row, sc.values().begin() + row + K);
      std::span<const T> cell_t(d.teacher_logits);
      if (cfg.label_mode == LabelMode::teacher) {
        d.label = classify_cell(cell_t, tg.data().subspan(b * K, K));
      } else {
        d.label = argmax(cell_t) == targets[b] ? KnowledgeLabel::consistent : KnowledgeLabel::complementary;
      }
      out.push_back(std::move(d));
    }
  return out;
}

/// The scale-decoupled loss and its per-cell breakdown. Gradients reach the student map only.
/// `targets` are ground-truth classes; they feed DKD/NKD and the ground_truth label mode.
template <class T>
SddResult<T> sdd_loss(const LogitMap<T>& teacher, const LogitMap<T>& student, std::span<const std::size_t> targets,
                      const DistillConfig& cfg) {
  detail::check_map_pair(teacher, student);
  cfg.validate_for(teacher.height());
  const auto cells = enumerate_cells(teacher.height(), teacher.width(), cfg.scales);
  const std::size_t B = teacher.batch(), K = teacher.classes(), N = cells.size();
  const bool needs_targets = cfg.base_loss != BaseLoss::kd || cfg.label_mode == LabelMode::ground_truth;
  if (needs_targets) detail::check_labels(targets, B, K);

  const auto teacher_cells = pool_cells(teacher.values.detach(), cells);
  const auto student_cells = pool_cells(student.values, cells);
  const auto teacher_global = global_logits(LogitMap<T>{teacher.values.detach()});

  std::vector<std::size_t> row_targets(B * N, 0);
  if (needs_targets)
    for (std::size_t b = 0; b < B; ++b) std::fill_n(row_targets.begin() + b * N, N, targets[b]);

  const auto rows = base_loss_rows(teacher_cells, student_cells, row_targets, cfg.base_params());

  Breakdown bd;
  bd.beta = cfg.beta;
  for (auto m : cfg.scales) bd.scales.push_back({m, 0.0, 0.0, 0, 0});
  std::vector<double> weights(B * N, 0.0);
  double con_sum = 0.0, com_sum = 0.0;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t n = 0; n < N; ++n) {
      const auto r = b * N + n;
      std::span<const T> cell_t = teacher_cells.data().subspan(r * K, K);
      KnowledgeLabel label;
      if (cfg.label_mode == LabelMode::teacher) {
        label = classify_cell(cell_t, teacher_global.data().subspan(b * K, K));
      } else {
        label = argmax(cell_t) == targets[b] ? KnowledgeLabel::consistent : KnowledgeLabel::complementary;
      }
      const bool consistent = label == KnowledgeLabel::consistent;
      bool included = true;
      if (cfg.groups == KnowledgeGroups::consistent_only) included = consistent;
      if (cfg.groups == KnowledgeGroups::complementary_only) included = !consistent || cells[n].scale == 1;
      const double v = static_cast<double>(rows[r]);
      bd.cells.push_back({b, cells[n].scale, cells[n].index, label, included, v});
      auto& sum = *std::find_if(bd.scales.begin(), bd.scales.end(),
                                [&](const ScaleSummary& s) { return s.scale == cells[n].scale; });
      if (consistent) {
        ++bd.consistent_count;
        ++sum.consistent_cells;
        if (included) {
          sum.consistent_sum += v;
          con_sum += v;
          weights[r] = 1.0;
        }
      } else {
        ++bd.complementary_count;
        ++sum.complementary_cells;
        if (included) {
          sum.complementary_sum += v;
          com_sum += v;
          weights[r] = cfg.beta;
        }
      }
    }
  const double divisor = static_cast<double>(B) * (cfg.normalize_by_cells ? static_cast<double>(N) : 1.0);
  bd.d_con = con_sum / divisor;
  bd.d_com = com_sum / divisor;
  bd.total = bd.d_con + cfg.beta * bd.d_com;
  auto loss = detail::partitioned_total(rows, weights, bd.total, divisor);
  return {loss, std::move(bd)};
}

/// Totals at two values of beta, everything else fixed.
template <class T>
std::pair<double, double> loss_beta_sensitivity(const LogitMap<T>& teacher, const LogitMap<T>& student,
                                                std::span<const std::size_t> targets, DistillConfig cfg, double beta1,
                                                double beta2) {
  const LogitMap<T> t{teacher.values.detach()};
  const LogitMap<T> s{student.values.detach()};
  cfg.beta = beta1;
  const double l1 = sdd_loss(t, s, targets, cfg).breakdown.total;
  cfg.beta = beta2;
  const double l2 = sdd_loss(t, s, targets, cfg).breakdown.total;
  return {l1, l2};
}

}  // namespace sdd
