#include "spark/distillation.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "spark/errors.hpp"
#include "spark/model.hpp"

namespace spark::distill {

std::size_t DistillSchedule::default_warm_rounds(std::size_t total_rounds) noexcept {
  return static_cast<std::size_t>(std::ceil(0.2 * static_cast<double>(total_rounds)));
}

void DistillSchedule::validate() const {
  if (total_rounds == 0) throw ConfigError("distillation schedule needs at least one round");
  if (warm_rounds >= total_rounds) {
    throw ConfigError("warm-up rounds (" + std::to_string(warm_rounds) + ") must be < total rounds (" +
                      std::to_string(total_rounds) + ")");
  }
  if (alpha_init < 0.0 || alpha_init > 1.0 || alpha_final < 0.0 || alpha_final > 1.0) {
    throw ConfigError("distillation alphas must lie in [0, 1]");
  }
  if (alpha_final > alpha_init) throw ConfigError("alpha_final must be <= alpha_init");
  if (tau_init < 1.0 || tau_final < tau_init) throw ConfigError("temperatures must satisfy 1 <= tau_init <= tau_final");
}

ScheduleValue schedule_at(const DistillSchedule& sched, std::size_t round) {
  if (round < 1 || round > sched.total_rounds) {
    throw ContractViolation("schedule round " + std::to_string(round) + " outside [1, " +
                            std::to_string(sched.total_rounds) + "]");
  }
  if (round <= sched.warm_rounds) return {1.0, 1.0};
  const double p = static_cast<double>(round - sched.warm_rounds) /
                   static_cast<double>(sched.total_rounds - sched.warm_rounds);
  ScheduleValue v;
  v.alpha = sched.alpha_final + 0.5 * (sched.alpha_init - sched.alpha_final) * (1.0 + std::cos(std::numbers::pi * p));
  v.tau = sched.tau_init + (sched.tau_final - sched.tau_init) * p;
  return v;
}

Matrix soft_labels(const Matrix& logits, double tau) {
  if (!(tau > 0.0)) throw ContractViolation("temperature must be positive");
  return model::softmax_rows(logits, tau);
}

TargetMatrix mix_targets(const Matrix& hard, const Matrix& logits, ScheduleValue value) {
  if (hard.rows() != logits.rows() || hard.cols() != logits.cols()) {
    throw ContractViolation("build_target: hard labels are " + std::to_string(hard.rows()) + "x" +
                            std::to_string(hard.cols()) + ", logits are " + std::to_string(logits.rows()) + "x" +
                            std::to_string(logits.cols()));
  }
  for (Eigen::Index n = 0; n < hard.rows(); ++n) {
    if ((hard.row(n).array() == 1.0).count() != 1 || (hard.row(n).array() == 0.0).count() != hard.cols() - 1) {
      throw ContractViolation("build_target: hard row " + std::to_string(n) + " is not one-hot");
    }
  }
  TargetMatrix out;
  out.alpha_used = value.alpha;
  out.tau_used = value.tau;
  if (value.alpha == 1.0) {
    out.rows = hard;
  } else if (value.alpha == 0.0) {
    out.rows = soft_labels(logits, value.tau);
  } else {
    out.rows = value.alpha * hard + (1.0 - value.alpha) * soft_labels(logits, value.tau);
  }
  return out;
}

TargetMatrix build_target(const Matrix& hard, const Matrix& logits, const DistillSchedule& sched,
                          std::size_t round) {
  return mix_targets(hard, logits, schedule_at(sched, round));
}

double effective_objective(const Matrix& hard, const Matrix& soft, const Matrix& logits, ScheduleValue value) {
  const double ce = model::cross_entropy(logits, hard);
  const Matrix p_tau = model::softmax_rows(logits, value.tau);
  double kl = 0.0;
  for (Eigen::Index n = 0; n < soft.rows(); ++n) {
    for (Eigen::Index c = 0; c < soft.cols(); ++c) {
      const double s = soft(n, c);
      if (s > 0.0) kl += s * (std::log(s) - std::log(std::max(p_tau(n, c), 1e-300)));
    }
  }
  if (soft.rows() > 0) kl /= static_cast<double>(soft.rows());
  return value.alpha * ce + (1.0 - value.alpha) * value.tau * value.tau * kl;
}

}  // namespace spark::distill
