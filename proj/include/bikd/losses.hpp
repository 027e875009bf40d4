#pragma once

#include <cmath>
#include <vector>

#include "bikd/error.hpp"
#include "bikd/tensor.hpp"

namespace bikd {

// Fixed-mixture distillation settings for the vanilla-KD baseline.
struct KdConfig {
  double tau = 4.0;
  double alpha = 0.5;

  void validate() const {
    if (!(tau > 0.0)) throw ValueError("kd config: tau must be positive");
    if (alpha < 0.0 || alpha > 1.0)
      throw ValueError("kd config: alpha must lie in [0,1], got " +
                       std::to_string(alpha));
  }
};

template <class T>
Tensor<T> one_hot(const std::vector<int>& labels, std::size_t num_classes) {
  std::vector<T> v(labels.size() * num_classes, T(0));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= num_classes)
      throw ValueError("one_hot: label " + std::to_string(labels[i]) +
                       " out of range for " + std::to_string(num_classes) +
                       " classes");
    v[i * num_classes + static_cast<std::size_t>(labels[i])] = T(1);
  }
  return Tensor<T>::leaf({labels.size(), num_classes}, std::move(v));
}

namespace detail {

template <class T>
void check_one_hot(const Tensor<T>& labels) {
  const std::size_t rows = labels.dim(0), cols = labels.dim(1);
  for (std::size_t r = 0; r < rows; ++r) {
    std::size_t ones = 0;
    for (std::size_t c = 0; c < cols; ++c) {
      const T v = labels.values()[r * cols + c];
      if (v == T(1))
        ++ones;
      else if (v != T(0))
        throw ValueError("labels: row " + std::to_string(r) + " is not one-hot");
    }
    if (ones != 1)
      throw ValueError("labels: row " + std::to_string(r) + " is not one-hot");
  }
}

}  // namespace detail

// Per-sample cross-entropy against one-hot labels at temperature 1.
template <class T>
Tensor<T> hard_loss(Tape<T>& tape, const Tensor<T>& student_logits,
                    const Tensor<T>& labels_onehot) {
  if (student_logits.shape() != labels_onehot.shape())
    throw ShapeError("hard_loss: logits " + shape_str(student_logits.shape()) +
                     " vs labels " + shape_str(labels_onehot.shape()));
  detail::check_one_hot(labels_onehot);
  Tensor<T> lp = tape.log_softmax(student_logits, T(1));
  return tape.scale(tape.row_sum(tape.mul(labels_onehot, lp)), T(-1));
}

namespace detail {

// Composite per-sample distillation term. The forward value is assembled in
// log space; the backward uses the closed-form logit gradient
//   d loss_i / d z_i = tau * (p_S^tau - p_T^tau)
// so algebraic identities hold exactly (equal logits give a bitwise-zero
// gradient). The teacher side is a captured constant: no gradient ever
// reaches the teacher.
template <class T>
Tensor<T> soft_term(Tape<T>& tape, const Tensor<T>& teacher_logits,
                    const Tensor<T>& student_logits, T tau, bool subtract_entropy,
                    const char* name) {
  if (teacher_logits.shape() != student_logits.shape())
    throw ShapeError(std::string(name) + ": teacher " +
                     shape_str(teacher_logits.shape()) + " vs student " +
                     shape_str(student_logits.shape()));
  if (student_logits.rank() != 2)
    throw ShapeError(std::string(name) + ": expected rank-2 logits");
  if (!(tau > T(0)))
    throw ValueError(std::string(name) + ": tau must be positive");
  const std::size_t rows = teacher_logits.dim(0), cols = teacher_logits.dim(1);

  std::vector<T> lp_t(rows * cols), lp_s(rows * cols);
  kernel_log_softmax(teacher_logits.values().data(), lp_t.data(), rows, cols, tau);
  kernel_log_softmax(student_logits.values().data(), lp_s.data(), rows, cols, tau);
  auto p_t = std::make_shared<std::vector<T>>(rows * cols);
  auto p_s = std::make_shared<std::vector<T>>(rows * cols);
  std::vector<T> value(rows, T(0));
  for (std::size_t r = 0; r < rows; ++r) {
    T acc = T(0);
    for (std::size_t c = 0; c < cols; ++c) {
      const std::size_t i = r * cols + c;
      (*p_t)[i] = std::exp(lp_t[i]);
      (*p_s)[i] = std::exp(lp_s[i]);
      acc += subtract_entropy ? (*p_t)[i] * (lp_t[i] - lp_s[i])
                              : (*p_t)[i] * (-lp_s[i]);
    }
    value[r] = tau * tau * acc;
  }
  auto zs = student_logits.node();
  return tape.custom(
      {rows}, std::move(value), {student_logits},
      [zs, p_t, p_s, rows, cols, tau](const std::vector<T>& g) {
        if (!zs->requires_grad) return;
        std::vector<T> dz(rows * cols);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < cols; ++c) {
            const std::size_t i = r * cols + c;
            dz[i] = g[r] * tau * ((*p_s)[i] - (*p_t)[i]);
          }
        zs->accumulate(dz);
      });
}

}  // namespace detail

// Per-sample tau^2-scaled KL between temperature-softened distributions.
template <class T>
Tensor<T> soft_loss(Tape<T>& tape, const Tensor<T>& teacher_logits,
                    const Tensor<T>& student_logits, T tau) {
  return detail::soft_term(tape, teacher_logits, student_logits, tau, true,
                           "soft_loss");
}

// Cross-entropy with the teacher's softened distribution as soft target,
// scaled by tau^2. Differs from soft_loss by a theta-independent constant;
// gradients w.r.t. student logits coincide.
template <class T>
Tensor<T> soft_target_ce_loss(Tape<T>& tape, const Tensor<T>& teacher_logits,
                              const Tensor<T>& student_logits, T tau) {
  return detail::soft_term(tape, teacher_logits, student_logits, tau, false,
                           "soft_target_ce");
}

// Mean over the batch of w_hard*l_hard + w_soft*l_soft.
template <class T>
Tensor<T> weighted_train_loss(Tape<T>& tape, const Tensor<T>& w_hard,
                              const Tensor<T>& w_soft, const Tensor<T>& l_hard,
                              const Tensor<T>& l_soft) {
  if (w_hard.shape() != l_hard.shape() || w_soft.shape() != l_soft.shape() ||
      w_hard.shape() != w_soft.shape())
    throw ShapeError("weighted_train_loss: length mismatch " +
                     shape_str(w_hard.shape()) + "/" + shape_str(w_soft.shape()) +
                     "/" + shape_str(l_hard.shape()) + "/" +
                     shape_str(l_soft.shape()));
  Tensor<T> mixed = tape.add(tape.mul(w_hard, l_hard), tape.mul(w_soft, l_soft));
  return tape.mean(mixed);
}

// Vanilla fixed-alpha objective, built on the same per-sample mixture path
// as the weighted loss so the two coincide bitwise when weights are pinned.
template <class T>
Tensor<T> fixed_alpha_kd_loss(Tape<T>& tape, const Tensor<T>& teacher_logits,
                              const Tensor<T>& student_logits,
                              const Tensor<T>& labels_onehot, const KdConfig& cfg) {
  cfg.validate();
  Tensor<T> l_h = hard_loss(tape, student_logits, labels_onehot);
  Tensor<T> l_s =
      soft_loss(tape, teacher_logits, student_logits, static_cast<T>(cfg.tau));
  const std::size_t batch = l_h.dim(0);
  Tensor<T> w_h = Tensor<T>::full({batch}, static_cast<T>(1.0 - cfg.alpha));
  Tensor<T> w_s = Tensor<T>::full({batch}, static_cast<T>(cfg.alpha));
  return weighted_train_loss(tape, w_h, w_s, l_h, l_s);
}

// Mean hard loss over a validation minibatch; no soft term.
template <class T>
Tensor<T> val_loss(Tape<T>& tape, const Tensor<T>& student_logits,
                   const Tensor<T>& labels_onehot) {
  return tape.mean(hard_loss(tape, student_logits, labels_onehot));
}

// ---- plain (no-tape) numeric helpers ----

// Per-sample cross-entropy at temperature 1 from raw logit values.
template <class T>
std::vector<T> ce_per_sample(const std::vector<T>& logits,
                             const std::vector<int>& labels,
                             std::size_t num_classes) {
  const std::size_t batch = labels.size();
  std::vector<T> lp(batch * num_classes);
  detail::kernel_log_softmax(logits.data(), lp.data(), batch, num_classes, T(1));
  std::vector<T> out(batch);
  for (std::size_t i = 0; i < batch; ++i)
    out[i] = -lp[i * num_classes + static_cast<std::size_t>(labels[i])];
  return out;
}

// Softmax probabilities at the given temperature.
template <class T>
std::vector<T> softmax_rows(const std::vector<T>& logits, std::size_t rows,
                            std::size_t cols, T tau) {
  std::vector<T> lp(rows * cols);
  detail::kernel_log_softmax(logits.data(), lp.data(), rows, cols, tau);
  for (auto& v : lp) v = std::exp(v);
  return lp;
}

}  // namespace bikd
