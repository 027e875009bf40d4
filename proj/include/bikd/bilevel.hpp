#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "bikd/data.hpp"
#include "bikd/error.hpp"
#include "bikd/losses.hpp"
#include "bikd/nn.hpp"
#include "bikd/optim.hpp"
#include "bikd/rng.hpp"
#include "bikd/tensor.hpp"

namespace bikd {

enum class MetaOptimizer { Adam, Sgd };

struct TrainConfig {
  double student_lr = 0.1;
  double meta_lr = 1e-3;
  std::size_t inner_steps = 5;  // hypergradient accumulation window (k)
  double temperature = 4.0;
  std::size_t epochs = 120;
  std::vector<std::size_t> lr_decay_epochs = {80, 100};
  double lr_decay_factor = 0.1;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::size_t batch_size = 128;
  std::size_t val_batch_size = 128;
  std::uint64_t seed = 0;

  MetaOptimizer meta_optimizer = MetaOptimizer::Adam;
  // Window-counter variant: update once the post-increment counter reaches a
  // multiple of k, so every window holds exactly k accumulations.
  bool strict_window = false;
  // Divide the accumulated hypergradient by the window length.
  bool scale_meta_grad_by_window = false;
  // Fold the student's momentum buffer into the virtual step (ablation).
  bool virtual_momentum = false;
  // Bypass the meta net with fixed (w_hard, w_soft); freezes the meta model.
  std::optional<std::pair<double, double>> pinned_weights;
  double alpha = 0.5;  // fixed-alpha baseline mixture

  void validate() const {
    if (inner_steps < 1) throw ValueError("train config: inner_steps must be >= 1");
    if (!(student_lr > 0.0) || !(meta_lr > 0.0))
      throw ValueError("train config: learning rates must be positive");
    if (!(temperature > 0.0))
      throw ValueError("train config: temperature must be positive");
    if (batch_size < 1 || val_batch_size < 1)
      throw ValueError("train config: batch sizes must be >= 1");
  }

  LrSchedule student_schedule() const {
    return LrSchedule{student_lr, lr_decay_epochs, lr_decay_factor};
  }
};

template <class T>
struct Batch {
  std::size_t size = 0;
  Tensor<T> x;       // {B, d} constant
  Tensor<T> onehot;  // {B, C} constant
  std::vector<int> labels;
  std::vector<T> teacher_logits;  // {B*C}, empty when not needed
};

template <class T>
Batch<T> make_batch(const LabeledDataset& ds, std::span<const std::size_t> idx) {
  Batch<T> b;
  b.size = idx.size();
  std::vector<T> x(idx.size() * ds.feature_dim);
  b.labels.reserve(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const float* r = ds.row(idx[i]);
    for (std::size_t j = 0; j < ds.feature_dim; ++j)
      x[i * ds.feature_dim + j] = static_cast<T>(r[j]);
    b.labels.push_back(ds.labels[idx[i]]);
  }
  b.x = Tensor<T>::leaf({idx.size(), ds.feature_dim}, std::move(x));
  b.onehot = one_hot<T>(b.labels, ds.num_classes);
  return b;
}

// Per-sample weights from the meta model applied to detached loss pairs.
// Only the weight -> training-loss path carries gradient; the loss inputs
// are constants, so nothing flows back into the student.
template <class T>
std::pair<Tensor<T>, Tensor<T>> compute_weights(Tape<T>& tape,
                                                const MetaNetSpec& spec,
                                                std::span<const Tensor<T>> meta_params,
                                                const std::vector<T>& ce_teacher,
                                                const std::vector<T>& ce_student) {
  const std::size_t batch = ce_teacher.size();
  std::vector<T> pairs(batch * 2);
  for (std::size_t i = 0; i < batch; ++i) {
    pairs[2 * i] = ce_teacher[i];
    pairs[2 * i + 1] = ce_student[i];
  }
  Tensor<T> in = Tensor<T>::leaf({batch, 2}, std::move(pairs));
  Tensor<T> w = meta_forward(tape, spec, meta_params, in);
  return {tape.column(w, 0), tape.column(w, 1)};
}

// Per-sample logit gradients of the hard and soft losses: row i of `hard` is
// d l_hard,i / d z_i = p_S - y, row i of `soft` is tau * (p_S^tau - p_T^tau).
template <class T>
struct LogitSeeds {
  std::vector<T> hard;  // {B*C}
  std::vector<T> soft;  // {B*C}
};

template <class T>
LogitSeeds<T> logit_seeds(const std::vector<T>& student_logits,
                          const std::vector<T>& teacher_logits,
                          const std::vector<int>& labels, std::size_t num_classes,
                          T tau) {
  const std::size_t batch = labels.size();
  LogitSeeds<T> s;
  s.hard = softmax_rows(student_logits, batch, num_classes, T(1));
  for (std::size_t i = 0; i < batch; ++i)
    s.hard[i * num_classes + static_cast<std::size_t>(labels[i])] -= T(1);
  const auto ps = softmax_rows(student_logits, batch, num_classes, tau);
  const auto pt = softmax_rows(teacher_logits, batch, num_classes, tau);
  s.soft.resize(batch * num_classes);
  for (std::size_t i = 0; i < s.soft.size(); ++i) s.soft[i] = tau * (ps[i] - pt[i]);
  return s;
}

// One plain SGD step turned into tape expressions: theta'(phi) depends on phi
// only through the per-sample weights, exactly the detached-trajectory
// semantics. The student gradient is rebuilt as a backward sweep with
// constant local Jacobians from the trace, so the whole step costs the same
// as one batched backward pass.
template <class T>
struct VirtualStudent {
  std::vector<Tensor<T>> params;  // same order as ModelState.params
};

template <class T>
VirtualStudent<T> virtual_step_mlp(
    Tape<T>& tape, const MlpSpec& spec, const ModelState<T>& student,
    const MlpTrace<T>& trace, const Tensor<T>& w_hard, const Tensor<T>& w_soft,
    const Batch<T>& batch, T lr, T tau,
    const std::vector<std::vector<T>>* momentum_fold = nullptr,
    T momentum_coeff = T(0)) {
  const std::size_t B = batch.size;
  const std::size_t C = spec.layer_widths.back();
  const std::size_t L = spec.num_layers();
  const LogitSeeds<T> seeds =
      logit_seeds(trace.logits, batch.teacher_logits, batch.labels, C, tau);

  Tensor<T> seed_h = Tensor<T>::leaf({B, C}, seeds.hard);
  Tensor<T> seed_s = Tensor<T>::leaf({B, C}, seeds.soft);
  Tensor<T> delta = tape.scale(
      tape.add(tape.scale_rows(seed_h, w_hard), tape.scale_rows(seed_s, w_soft)),
      T(1) / static_cast<T>(B));

  VirtualStudent<T> vs;
  vs.params.resize(2 * L);
  auto base_value = [&](std::size_t param_idx) {
    // Ablation: previews the momentum update theta - lr*(mu*buf + g) by
    // folding mu*buf into the starting point.
    const auto& p = student.params[param_idx];
    if (!momentum_fold) return Tensor<T>::leaf(p.shape, p.value);
    std::vector<T> v = p.value;
    const auto& buf = (*momentum_fold)[param_idx];
    for (std::size_t j = 0; j < v.size(); ++j) v[j] -= lr * momentum_coeff * buf[j];
    return Tensor<T>::leaf(p.shape, std::move(v));
  };

  for (std::size_t l = L; l-- > 0;) {
    const std::size_t in = spec.layer_widths[l], out = spec.layer_widths[l + 1];
    // a_{l-1}^T as a constant {in, B} matrix.
    std::vector<T> at(in * B);
    const auto& act = trace.activations[l];
    for (std::size_t r = 0; r < B; ++r)
      for (std::size_t c = 0; c < in; ++c) at[c * B + r] = act[r * in + c];
    Tensor<T> at_const = Tensor<T>::leaf({in, B}, std::move(at));
    Tensor<T> grad_w = tape.matmul(at_const, delta);
    Tensor<T> grad_b = tape.col_sum(delta);
    vs.params[2 * l] = tape.sub(base_value(2 * l), tape.scale(grad_w, lr));
    vs.params[2 * l + 1] = tape.sub(base_value(2 * l + 1), tape.scale(grad_b, lr));
    if (l > 0) {
      // delta_{l-1} = (delta_l . W_l^T) * act'(z_{l-1})
      const auto& w = student.params[2 * l].value;
      std::vector<T> wt(out * in);
      for (std::size_t r = 0; r < in; ++r)
        for (std::size_t c = 0; c < out; ++c) wt[c * in + r] = w[r * out + c];
      Tensor<T> wt_const = Tensor<T>::leaf({out, in}, std::move(wt));
      Tensor<T> dprime = Tensor<T>::leaf({B, in}, trace.act_deriv[l - 1]);
      delta = tape.mul(tape.matmul(delta, wt_const), dprime);
    }
  }
  return vs;
}

// Reference-quality per-sample student gradients: one single-sample forward
// with two backward passes per sample, O(B) passes.
template <class T>
struct PerSampleGrads {
  std::size_t batch = 0;
  // Per parameter tensor: row-major {B, numel(param)}.
  std::vector<std::vector<T>> hard, soft;
};

template <class T>
PerSampleGrads<T> compute_per_sample_grads(const BackboneSpec& spec,
                                           const ModelState<T>& student,
                                           const Batch<T>& batch, T tau) {
  const std::size_t B = batch.size;
  const std::size_t d = batch.x.dim(1);
  const std::size_t C = batch.onehot.dim(1);
  PerSampleGrads<T> g;
  g.batch = B;
  g.hard.resize(student.params.size());
  g.soft.resize(student.params.size());
  for (std::size_t p = 0; p < student.params.size(); ++p) {
    g.hard[p].resize(B * student.params[p].numel());
    g.soft[p].resize(B * student.params[p].numel());
  }
  for (std::size_t i = 0; i < B; ++i) {
    Tape<T> tape;
    auto params = bind_params(student, true);
    std::vector<T> xrow(batch.x.values().begin() + i * d,
                        batch.x.values().begin() + (i + 1) * d);
    std::vector<T> yrow(batch.onehot.values().begin() + i * C,
                        batch.onehot.values().begin() + (i + 1) * C);
    std::vector<T> trow(batch.teacher_logits.begin() + i * C,
                        batch.teacher_logits.begin() + (i + 1) * C);
    Tensor<T> x = Tensor<T>::leaf({1, d}, std::move(xrow));
    Tensor<T> y = Tensor<T>::leaf({1, C}, std::move(yrow));
    Tensor<T> t = Tensor<T>::leaf({1, C}, std::move(trow));
    Tensor<T> logits = backbone_forward<T>(tape, spec, params, x);
    Tensor<T> lh = hard_loss(tape, logits, y);
    Tensor<T> ls = soft_loss(tape, t, logits, tau);
    tape.backward(lh);
    for (std::size_t p = 0; p < params.size(); ++p) {
      const auto gp = params[p].grad();
      std::copy(gp.begin(), gp.end(), g.hard[p].begin() + i * gp.size());
      params[p].zero_grad();
    }
    tape.backward(ls);
    for (std::size_t p = 0; p < params.size(); ++p) {
      const auto gp = params[p].grad();
      std::copy(gp.begin(), gp.end(), g.soft[p].begin() + i * gp.size());
    }
  }
  return g;
}

// Virtual step assembled from per-sample gradient matrices; works for any
// backbone. theta'_p = p - (lr/B) * (G_hard^T w_hard + G_soft^T w_soft).
template <class T>
VirtualStudent<T> virtual_step_from_grads(Tape<T>& tape,
                                          const ModelState<T>& student,
                                          const PerSampleGrads<T>& grads,
                                          const Tensor<T>& w_hard,
                                          const Tensor<T>& w_soft, T lr) {
  const std::size_t B = grads.batch;
  VirtualStudent<T> vs;
  vs.params.reserve(student.params.size());
  for (std::size_t p = 0; p < student.params.size(); ++p) {
    const std::size_t n = student.params[p].numel();
    Tensor<T> gh = Tensor<T>::leaf({B, n}, grads.hard[p]);
    Tensor<T> gs = Tensor<T>::leaf({B, n}, grads.soft[p]);
    Tensor<T> step = tape.scale(
        tape.add(tape.matvec_t(gh, w_hard), tape.matvec_t(gs, w_soft)),
        lr / static_cast<T>(B));
    Tensor<T> base = Tensor<T>::leaf(student.params[p].shape, student.params[p].value);
    vs.params.push_back(
        tape.reshape(tape.sub(tape.reshape(base, {n}), step), student.params[p].shape));
  }
  return vs;
}

// Validation loss at the virtual student, backpropagated into the meta
// parameters. Returns the flattened hypergradient contribution.
template <class T>
std::vector<T> one_step_hypergrad(Tape<T>& tape, const BackboneSpec& spec,
                                  const VirtualStudent<T>& vs,
                                  const Batch<T>& val_batch,
                                  std::span<const Tensor<T>> meta_params,
                                  T* loss_out = nullptr) {
  Tensor<T> logits = backbone_forward<T>(tape, spec, vs.params, val_batch.x);
  Tensor<T> loss = val_loss(tape, logits, val_batch.onehot);
  if (loss_out) *loss_out = loss.item();
  std::size_t total = 0;
  for (const auto& p : meta_params) total += p.numel();
  if (!loss.requires_grad()) return std::vector<T>(total, T(0));  // no phi path
  for (const auto& p : meta_params) p.zero_grad();
  tape.backward(loss);
  std::vector<T> flat;
  flat.reserve(total);
  for (const auto& p : meta_params) {
    const auto g = p.grad();
    flat.insert(flat.end(), g.begin(), g.end());
  }
  return flat;
}

// Running sum of one-step hypergradients over the current window.
template <class T>
struct HypergradAccumulator {
  std::vector<T> sum;
  std::size_t count = 0;

  void add(const std::vector<T>& g) {
    if (sum.empty()) sum.assign(g.size(), T(0));
    if (sum.size() != g.size())
      throw ContractError("hypergrad accumulator: size mismatch");
    for (std::size_t i = 0; i < g.size(); ++i) sum[i] += g[i];
    ++count;
  }

  void reset() {
    std::fill(sum.begin(), sum.end(), T(0));
    count = 0;
  }
};

// Applies the accumulated (summed) hypergradient to the meta parameters and
// resets the accumulator.
template <class T>
void meta_update(HypergradAccumulator<T>& acc, ModelState<T>& meta,
                 const TrainConfig& cfg) {
  if (acc.count == 0)
    throw ContractError("meta_update: accumulator is empty");
  std::vector<T> g = acc.sum;
  if (cfg.scale_meta_grad_by_window)
    for (auto& v : g) v /= static_cast<T>(acc.count);
  std::vector<std::vector<T>> grads;
  std::size_t off = 0;
  for (const auto& p : meta.params) {
    grads.emplace_back(g.begin() + off, g.begin() + off + p.numel());
    off += p.numel();
  }
  if (cfg.meta_optimizer == MetaOptimizer::Adam) {
    if (!meta.adam_slots) meta.adam_slots.emplace();
    AdamConfig acfg;
    acfg.lr = cfg.meta_lr;
    adam_step(meta, grads, *meta.adam_slots, acfg);
  } else {
    plain_sgd_step(meta, grads, static_cast<T>(cfg.meta_lr));
  }
  acc.reset();
}

// Real student step: batched backward of the weighted loss with fixed weight
// values, then SGD with momentum, weight decay and the scheduled rate.
template <class T>
double student_update(const BackboneSpec& spec, ModelState<T>& student,
                      SgdMomentumState<T>& slots, const Batch<T>& batch,
                      const std::vector<T>& w_hard_values,
                      const std::vector<T>& w_soft_values, T tau,
                      const SgdConfig& sgd) {
  Tape<T> tape;
  auto params = bind_params(student, true);
  Tensor<T> logits = backbone_forward<T>(tape, spec, params, batch.x);
  Tensor<T> lh = hard_loss(tape, logits, batch.onehot);
  Tensor<T> teacher = Tensor<T>::leaf({batch.size, batch.onehot.dim(1)},
                                      batch.teacher_logits);
  Tensor<T> ls = soft_loss(tape, teacher, logits, tau);
  Tensor<T> wh = Tensor<T>::leaf({batch.size}, w_hard_values);
  Tensor<T> ws = Tensor<T>::leaf({batch.size}, w_soft_values);
  Tensor<T> loss = weighted_train_loss(tape, wh, ws, lh, ls);
  tape.backward(loss);
  sgd_step(student, collect_grads<T>(params), slots, sgd);
  return static_cast<double>(loss.item());
}

// Plain cross-entropy step with the same optimizer; used by the CE baseline
// and teacher pretraining.
template <class T>
double ce_update(const BackboneSpec& spec, ModelState<T>& student,
                 SgdMomentumState<T>& slots, const Batch<T>& batch,
                 const SgdConfig& sgd) {
  Tape<T> tape;
  auto params = bind_params(student, true);
  Tensor<T> logits = backbone_forward<T>(tape, spec, params, batch.x);
  Tensor<T> loss = tape.mean(hard_loss(tape, logits, batch.onehot));
  tape.backward(loss);
  sgd_step(student, collect_grads<T>(params), slots, sgd);
  return static_cast<double>(loss.item());
}

// ---- hypergradient verification windows ----

// Frozen snapshot of one inner step: everything the explicit and FD routes
// need, with the student trajectory treated as constant.
template <class T>
struct InnerStepRecord {
  ModelState<T> snapshot;         // theta^(t+i), parameters only
  Batch<T> train_batch;           // carries teacher logits
  Batch<T> val_batch;
  std::vector<T> ce_teacher, ce_student;  // meta inputs at the snapshot
  PerSampleGrads<T> grads;        // per-sample student gradients at the snapshot
};

template <class T>
struct HypergradWindow {
  BackboneSpec student_spec;
  MetaNetSpec meta_spec;
  T lr = T(0.1);
  T tau = T(4);
  std::vector<InnerStepRecord<T>> steps;
};

namespace detail {

template <class T>
std::vector<T> weights_matrix(const MetaNetSpec& spec, const ModelState<T>& meta,
                              const std::vector<T>& ce_t, const std::vector<T>& ce_s) {
  Tape<T> tape;
  tape.set_recording(false);
  auto params = bind_params(meta, false);
  const std::size_t batch = ce_t.size();
  std::vector<T> pairs(batch * 2);
  for (std::size_t i = 0; i < batch; ++i) {
    pairs[2 * i] = ce_t[i];
    pairs[2 * i + 1] = ce_s[i];
  }
  Tensor<T> in = Tensor<T>::leaf({batch, 2}, std::move(pairs));
  return meta_forward(tape, spec, std::span<const Tensor<T>>(params), in).values();
}

// Batched gradient of the weighted training loss at fixed weights.
template <class T>
std::vector<std::vector<T>> weighted_loss_grads(const BackboneSpec& spec,
                                                const ModelState<T>& student,
                                                const Batch<T>& batch,
                                                const std::vector<T>& w_hard,
                                                const std::vector<T>& w_soft, T tau) {
  Tape<T> tape;
  auto params = bind_params(student, true);
  Tensor<T> logits = backbone_forward<T>(tape, spec, params, batch.x);
  Tensor<T> lh = hard_loss(tape, logits, batch.onehot);
  Tensor<T> teacher =
      Tensor<T>::leaf({batch.size, batch.onehot.dim(1)}, batch.teacher_logits);
  Tensor<T> ls = soft_loss(tape, teacher, logits, tau);
  Tensor<T> wh = Tensor<T>::leaf({batch.size}, w_hard);
  Tensor<T> ws = Tensor<T>::leaf({batch.size}, w_soft);
  Tensor<T> loss = weighted_train_loss(tape, wh, ws, lh, ls);
  tape.backward(loss);
  return collect_grads<T>(params);
}

template <class T>
double plain_val_loss(const BackboneSpec& spec, const ModelState<T>& state,
                      const Batch<T>& val_batch) {
  Tape<T> tape;
  tape.set_recording(false);
  auto params = bind_params(state, false);
  Tensor<T> logits = backbone_forward<T>(tape, spec, params, val_batch.x);
  return static_cast<double>(val_loss(tape, logits, val_batch.onehot).item());
}

template <class T>
std::vector<std::vector<T>> val_loss_grads(const BackboneSpec& spec,
                                           const ModelState<T>& state,
                                           const Batch<T>& val_batch) {
  Tape<T> tape;
  auto params = bind_params(state, true);
  Tensor<T> logits = backbone_forward<T>(tape, spec, params, val_batch.x);
  Tensor<T> loss = val_loss(tape, logits, val_batch.onehot);
  tape.backward(loss);
  return collect_grads<T>(params);
}

// theta' = theta - (lr/B) (G_h^T w_h + G_s^T w_s), numerically.
template <class T>
ModelState<T> apply_virtual_step(const ModelState<T>& snapshot,
                                 const PerSampleGrads<T>& grads,
                                 const std::vector<T>& weights,  // {B,2} row-major
                                 T lr) {
  ModelState<T> out = clone_state(snapshot);
  const std::size_t B = grads.batch;
  for (std::size_t p = 0; p < out.params.size(); ++p) {
    auto& value = out.params[p].value;
    const std::size_t n = value.size();
    for (std::size_t i = 0; i < B; ++i) {
      const T wh = weights[2 * i] * lr / static_cast<T>(B);
      const T ws = weights[2 * i + 1] * lr / static_cast<T>(B);
      const T* gh = grads.hard[p].data() + i * n;
      const T* gs = grads.soft[p].data() + i * n;
      for (std::size_t j = 0; j < n; ++j) value[j] -= wh * gh[j] + ws * gs[j];
    }
  }
  return out;
}

}  // namespace detail

// Record a k-step window starting from `student0`: per step, snapshot the
// student, cache meta inputs and per-sample gradients, then advance the
// student by one bare SGD step on the weighted loss at the current meta
// parameters.
template <class T>
HypergradWindow<T> build_window(const BackboneSpec& student_spec,
                                const ModelState<T>& student0,
                                const MetaNetSpec& meta_spec,
                                const ModelState<T>& meta,
                                std::span<const Batch<T>> train_batches,
                                std::span<const Batch<T>> val_batches, T lr, T tau) {
  if (train_batches.size() != val_batches.size() || train_batches.empty())
    throw ContractError("build_window: need matching nonempty batch lists");
  HypergradWindow<T> window;
  window.student_spec = student_spec;
  window.meta_spec = meta_spec;
  window.lr = lr;
  window.tau = tau;
  ModelState<T> student = clone_state(student0);
  for (std::size_t i = 0; i < train_batches.size(); ++i) {
    InnerStepRecord<T> rec;
    rec.snapshot = clone_state(student);
    rec.train_batch = train_batches[i];
    rec.val_batch = val_batches[i];
    const std::size_t C = rec.train_batch.onehot.dim(1);
    const auto student_logits = backbone_logits(student_spec, student,
                                                rec.train_batch.x.values(),
                                                rec.train_batch.size);
    rec.ce_teacher =
        ce_per_sample(rec.train_batch.teacher_logits, rec.train_batch.labels, C);
    rec.ce_student = ce_per_sample(student_logits, rec.train_batch.labels, C);
    rec.grads = compute_per_sample_grads(student_spec, student, rec.train_batch, tau);
    // Advance the real student one bare SGD step at the current weights.
    const auto w = detail::weights_matrix(meta_spec, meta, rec.ce_teacher,
                                          rec.ce_student);
    std::vector<T> wh(rec.train_batch.size), ws(rec.train_batch.size);
    for (std::size_t j = 0; j < rec.train_batch.size; ++j) {
      wh[j] = w[2 * j];
      ws[j] = w[2 * j + 1];
    }
    auto grads = detail::weighted_loss_grads(student_spec, student, rec.train_batch,
                                             wh, ws, tau);
    plain_sgd_step(student, grads, lr);
    window.steps.push_back(std::move(rec));
  }
  return window;
}

template <class T>
HypergradWindow<T> build_window(const BackboneSpec& student_spec,
                                const ModelState<T>& student0,
                                const MetaNetSpec& meta_spec,
                                const ModelState<T>& meta,
                                const std::vector<Batch<T>>& train_batches,
                                const std::vector<Batch<T>>& val_batches, T lr, T tau) {
  return build_window(student_spec, student0, meta_spec, meta,
                      std::span<const Batch<T>>(train_batches),
                      std::span<const Batch<T>>(val_batches), lr, tau);
}

// Route (a): accumulated autodiff through the one-step virtual update.
template <class T>
std::vector<T> window_autodiff_hypergrad(const HypergradWindow<T>& window,
                                         const ModelState<T>& meta) {
  std::vector<T> total(meta.total_params(), T(0));
  for (const auto& step : window.steps) {
    Tape<T> tape;
    auto meta_params = bind_params(meta, true);
    auto [wh, ws] = compute_weights(tape, window.meta_spec,
                                    std::span<const Tensor<T>>(meta_params),
                                    step.ce_teacher, step.ce_student);
    VirtualStudent<T> vs;
    if (const auto* mlp = std::get_if<MlpSpec>(&window.student_spec)) {
      const auto trace = mlp_trace(*mlp, step.snapshot,
                                   step.train_batch.x.values(), step.train_batch.size);
      vs = virtual_step_mlp(tape, *mlp, step.snapshot, trace, wh, ws,
                            step.train_batch, window.lr, window.tau);
    } else {
      vs = virtual_step_from_grads(tape, step.snapshot, step.grads, wh, ws,
                                   window.lr);
    }
    const auto g = one_step_hypergrad(tape, window.student_spec, vs, step.val_batch,
                                      std::span<const Tensor<T>>(meta_params));
    for (std::size_t i = 0; i < total.size(); ++i) total[i] += g[i];
  }
  return total;
}

// Route (b): explicit assembly from per-sample gradients, validation
// gradients and per-sample meta Jacobians:
//   -(lr/B) sum_j [ (g_val . g_hard_j) dw_j_hard/dphi
//                 + (g_val . g_soft_j) dw_j_soft/dphi ]
// accumulated over the window steps.
template <class T>
std::vector<T> window_explicit_hypergrad(const HypergradWindow<T>& window,
                                         const ModelState<T>& meta) {
  std::vector<T> total(meta.total_params(), T(0));
  for (const auto& step : window.steps) {
    const std::size_t B = step.train_batch.size;
    const auto w = detail::weights_matrix(window.meta_spec, meta, step.ce_teacher,
                                          step.ce_student);
    const auto virt =
        detail::apply_virtual_step(step.snapshot, step.grads, w, window.lr);
    const auto gval_parts =
        detail::val_loss_grads(window.student_spec, virt, step.val_batch);
    std::vector<T> gval;
    for (const auto& part : gval_parts) gval.insert(gval.end(), part.begin(), part.end());

    // Alignment of each sample's loss gradients with the validation gradient.
    std::vector<T> align_h(B, T(0)), align_s(B, T(0));
    for (std::size_t i = 0; i < B; ++i) {
      std::size_t off = 0;
      T ah = T(0), as = T(0);
      for (std::size_t p = 0; p < step.snapshot.params.size(); ++p) {
        const std::size_t n = step.snapshot.params[p].numel();
        const T* gh = step.grads.hard[p].data() + i * n;
        const T* gs = step.grads.soft[p].data() + i * n;
        for (std::size_t j = 0; j < n; ++j) {
          ah += gval[off + j] * gh[j];
          as += gval[off + j] * gs[j];
        }
        off += n;
      }
      align_h[i] = ah;
      align_s[i] = as;
    }

    // Per-sample meta Jacobian rows via two backward passes per sample.
    const T scale = -window.lr / static_cast<T>(B);
    for (std::size_t i = 0; i < B; ++i) {
      Tape<T> tape;
      auto meta_params = bind_params(meta, true);
      Tensor<T> pair =
          Tensor<T>::leaf({1, 2}, {step.ce_teacher[i], step.ce_student[i]});
      Tensor<T> wrow = meta_forward(tape, window.meta_spec,
                                    std::span<const Tensor<T>>(meta_params), pair);
      Tensor<T> w_h = tape.column(wrow, 0);
      Tensor<T> w_s = tape.column(wrow, 1);
      tape.backward(w_h);
      std::size_t off = 0;
      for (const auto& p : meta_params) {
        const auto g = p.grad();
        for (std::size_t j = 0; j < g.size(); ++j)
          total[off + j] += scale * align_h[i] * g[j];
        off += g.size();
        p.zero_grad();
      }
      tape.backward(w_s);
      off = 0;
      for (const auto& p : meta_params) {
        const auto g = p.grad();
        for (std::size_t j = 0; j < g.size(); ++j)
          total[off + j] += scale * align_s[i] * g[j];
        off += g.size();
      }
    }
  }
  return total;
}

// Route (c): central finite differences of
//   J(phi) = sum_i L_val(theta_i - lr * grad_theta L_train(theta_i; phi))
// with the snapshots held fixed. The inner gradient is recomputed by a
// batched backward pass at every probe, independent of the other routes.
// Double precision only.
inline double window_objective(const HypergradWindow<double>& window,
                               const ModelState<double>& meta) {
  double total = 0.0;
  for (const auto& step : window.steps) {
    const auto w = detail::weights_matrix(window.meta_spec, meta, step.ce_teacher,
                                          step.ce_student);
    const std::size_t B = step.train_batch.size;
    std::vector<double> wh(B), ws(B);
    for (std::size_t j = 0; j < B; ++j) {
      wh[j] = w[2 * j];
      ws[j] = w[2 * j + 1];
    }
    auto grads = detail::weighted_loss_grads(window.student_spec, step.snapshot,
                                             step.train_batch, wh, ws, window.tau);
    ModelState<double> virt = clone_state(step.snapshot);
    plain_sgd_step(virt, grads, window.lr);
    total += detail::plain_val_loss(window.student_spec, virt, step.val_batch);
  }
  return total;
}

inline std::vector<double> fd_hypergrad(const HypergradWindow<double>& window,
                                        const ModelState<double>& meta,
                                        double step = 1e-4) {
  ModelState<double> probe = clone_state(meta);
  std::vector<double> grad(meta.total_params(), 0.0);
  std::size_t coord = 0;
  for (std::size_t p = 0; p < probe.params.size(); ++p) {
    for (std::size_t j = 0; j < probe.params[p].numel(); ++j, ++coord) {
      const double orig = probe.params[p].value[j];
      probe.params[p].value[j] = orig + step;
      const double up = window_objective(window, probe);
      probe.params[p].value[j] = orig - step;
      const double down = window_objective(window, probe);
      probe.params[p].value[j] = orig;
      grad[coord] = (up - down) / (2.0 * step);
    }
  }
  return grad;
}

}  // namespace bikd
