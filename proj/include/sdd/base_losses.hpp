#pragma once

// Logit distillation losses evaluated row-wise on R x K logits.
// Teacher logits never receive gradients.

#include <cstddef>
#include <span>
#include <string>

#include "sdd/ops.hpp"

namespace sdd {

enum class BaseLoss { kd, dkd, nkd };

inline std::string to_string(BaseLoss b) {
  switch (b) {
    case BaseLoss::kd: return "kd";
    case BaseLoss::dkd: return "dkd";
    case BaseLoss::nkd: return "nkd";
  }
  return "?";
}

inline BaseLoss parse_base_loss(const std::string& s) {
  if (s == "kd") return BaseLoss::kd;
  if (s == "dkd") return BaseLoss::dkd;
  if (s == "nkd") return BaseLoss::nkd;
  throw ConfigError("unknown base loss '" + s + "' (expected kd, dkd or nkd)");
}

struct BaseLossParams {
  BaseLoss kind = BaseLoss::kd;
  double temperature = 4.0;
  // Target / non-target weights of the decoupled loss.
  double dkd_alpha = 1.0;
  double dkd_beta = 8.0;
  // Non-target weight of the normalized loss.
  double nkd_gamma = 1.5;
};

/// T^2 * KL(softmax(t/T) || softmax(s/T)) per row.
template <class T>
Tensor<T> kd_rows(const Tensor<T>& teacher, const Tensor<T>& student, double temperature) {
  detail::require_positive_temperature(temperature);
  detail::require_same_shape(teacher, student, "ld_kd");
  const T t2 = static_cast<T>(temperature * temperature);
  return scale(kl_divergence_rows(log_softmax(teacher.detach(), temperature), log_softmax(student, temperature)), t2);
}

/// Target-class term (binary target/rest split) and non-target term, each T^2-scaled.
template <class T>
Tensor<T> dkd_rows(const Tensor<T>& teacher, const Tensor<T>& student, std::span<const std::size_t> targets,
                   double alpha, double beta, double temperature) {
  detail::require_positive_temperature(temperature);
  detail::require_same_shape(teacher, student, "ld_dkd");
  if (detail::last_dim(student) < 2) throw ConfigError("ld_dkd needs K >= 2");
  const auto t = teacher.detach();
  const T t2 = static_cast<T>(temperature * temperature);
  auto tckd = kl_divergence_rows(target_split(log_softmax(t, temperature), targets),
                                 target_split(log_softmax(student, temperature), targets));
  auto nckd = kl_divergence_rows(log_softmax(drop_column(t, targets), temperature),
                                 log_softmax(drop_column(student, targets), temperature));
  return add(scale(tckd, static_cast<T>(alpha) * t2), scale(nckd, static_cast<T>(beta) * t2));
}

/// -p_t[y] log q_s[y] at temperature 1, plus gamma * T^2 * KL over the renormalized non-target classes.
template <class T>
Tensor<T> nkd_rows(const Tensor<T>& teacher, const Tensor<T>& student, std::span<const std::size_t> targets,
                   double gamma, double temperature) {
  detail::require_positive_temperature(temperature);
  detail::require_same_shape(teacher, student, "ld_nkd");
  if (detail::last_dim(student) < 2) throw ConfigError("ld_nkd needs K >= 2");
  const auto t = teacher.detach();
  const T t2 = static_cast<T>(temperature * temperature);
  auto teacher_target_prob = pick(log_softmax(t, 1.0), targets);
  for (auto& v : teacher_target_prob.mutable_data()) v = std::exp(v);
  auto target_term = scale(mul(pick(log_softmax(student, 1.0), targets), teacher_target_prob), T(-1));
  auto non_target = kl_divergence_rows(log_softmax(drop_column(t, targets), temperature),
                                       log_softmax(drop_column(student, targets), temperature));
  return add(target_term, scale(non_target, static_cast<T>(gamma) * t2));
}

template <class T>
Tensor<T> base_loss_rows(const Tensor<T>& teacher, const Tensor<T>& student, std::span<const std::size_t> targets,
                         const BaseLossParams& p) {
  switch (p.kind) {
    case BaseLoss::kd: return kd_rows(teacher, student, p.temperature);
    case BaseLoss::dkd: return dkd_rows(teacher, student, targets, p.dkd_alpha, p.dkd_beta, p.temperature);
    case BaseLoss::nkd: return nkd_rows(teacher, student, targets, p.nkd_gamma, p.temperature);
  }
  throw ConfigError("unknown base loss");
}

template <class T>
Tensor<T> ld_kd(const Tensor<T>& teacher, const Tensor<T>& student, double temperature) {
  return mean(kd_rows(teacher, student, temperature));
}

template <class T>
Tensor<T> ld_dkd(const Tensor<T>& teacher, const Tensor<T>& student, std::span<const std::size_t> targets,
                 double alpha, double beta, double temperature) {
  return mean(dkd_rows(teacher, student, targets, alpha, beta, temperature));
}

template <class T>
Tensor<T> ld_nkd(const Tensor<T>& teacher, const Tensor<T>& student, std::span<const std::size_t> targets,
                 double gamma, double temperature) {
  return mean(nkd_rows(teacher, student, targets, gamma, temperature));
}

template <class T>
Tensor<T> base_loss(const Tensor<T>& teacher, const Tensor<T>& student, std::span<const std::size_t> targets,
                    const BaseLossParams& p) {
  return mean(base_loss_rows(teacher, student, targets, p));
}

}  // namespace sdd
