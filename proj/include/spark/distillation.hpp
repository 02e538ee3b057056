#pragma once

// Stage-wise annealed distillation targets.
//
// Rounds 1..warm_rounds use pure hard labels (alpha = 1, tau = 1). Afterwards,
// with progress p = (k - R_warm) / (R - R_warm):
//   alpha = alpha_final + 0.5 (alpha_init - alpha_final)(1 + cos(pi p))
//   tau   = tau_init + (tau_final - tau_init) p
// and the target is alpha * Y_hard + (1 - alpha) * softmax(z_agg / tau).

#include <cstddef>
#include <span>
#include <utility>
#include <vector>

#include "spark/types.hpp"

namespace spark::distill {

struct DistillSchedule {
  double alpha_init = 1.0;
  double alpha_final = 0.3;
  double tau_init = 1.0;
  double tau_final = 3.0;
  std::size_t warm_rounds = 0;
  std::size_t total_rounds = 1;

  /// Default warm-up length: ceil(0.2 * R).
  static std::size_t default_warm_rounds(std::size_t total_rounds) noexcept;
  /// Throws ConfigError when the invariants R_warm < R, alpha_final <= alpha_init,
  /// tau_final >= tau_init >= 1 and alphas in [0, 1] do not hold.
  void validate() const;
};

struct ScheduleValue {
  double alpha = 1.0;
  double tau = 1.0;
};

/// Round k is 1-based; k outside [1, R] is a contract violation.
ScheduleValue schedule_at(const DistillSchedule& sched, std::size_t round);

/// Row-wise softmax(logits / tau) with max subtraction.
Matrix soft_labels(const Matrix& logits, double tau);

struct TargetMatrix {
  Matrix rows;  // N_agg x C, each row sums to 1
  double alpha_used = 1.0;
  double tau_used = 1.0;
};

/// alpha * hard + (1 - alpha) * softmax(logits / tau) with an explicit (alpha, tau).
TargetMatrix mix_targets(const Matrix& hard, const Matrix& logits, ScheduleValue value);

/// As mix_targets with (alpha, tau) = schedule_at(sched, round).
TargetMatrix build_target(const Matrix& hard, const Matrix& logits, const DistillSchedule& sched,
                          std::size_t round);

/// alpha * CE(hard, p) + (1 - alpha) * tau^2 * KL(soft || softmax(logits / tau)),
/// averaged over rows. Logged only; the update path uses mixed targets.
double effective_objective(const Matrix& hard, const Matrix& soft, const Matrix& logits, ScheduleValue value);

}  // namespace spark::distill
