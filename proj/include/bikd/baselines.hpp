#pragma once

#include <numeric>
#include <vector>

#include "bikd/bilevel.hpp"
#include "bikd/metrics.hpp"
#include "bikd/runlog.hpp"
#include "bikd/trainer.hpp"

namespace bikd {

template <class T>
struct TrainResult {
  ModelState<T> model;
  RunLog log;
};

namespace detail {

// Shared epoch/batch iteration so baseline and bilevel runs see identical
// batch sequences for a given seed.
template <class T, class StepFn>
RunLog run_epochs(const TrainConfig& cfg, const BackboneSpec& spec,
                  ModelState<T>& model, const LabeledDataset& train,
                  const LabeledDataset& val, StepFn step) {
  RunLog log;
  RngStream shuffle_stream(cfg.seed, "shuffle");
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const LrSchedule schedule = cfg.student_schedule();
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = schedule.at_epoch(epoch);
    shuffle_stream.shuffle(order);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t n = std::min(cfg.batch_size, order.size() - start);
      std::span<const std::size_t> idx(order.data() + start, n);
      loss_sum += step(idx, lr);
      ++batches;
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = batches ? loss_sum / static_cast<double>(batches) : 0.0;
    rec.val_loss = mean_ce_loss(spec, model, val);
    rec.per_class_accuracy = evaluate(spec, model, val).per_class_accuracy;
    log.epochs.push_back(std::move(rec));
  }
  return log;
}

}  // namespace detail

// Plain cross-entropy training with the standard optimizer and schedule.
template <class T>
TrainResult<T> train_ce(const TrainConfig& cfg, const BackboneSpec& spec,
                        ModelState<T> init, const LabeledDataset& train,
                        const LabeledDataset& val) {
  cfg.validate();
  ModelState<T> model = std::move(init);
  if (!model.sgd_slots) model.sgd_slots.emplace();
  RunLog log = detail::run_epochs(
      cfg, spec, model, train, val,
      [&](std::span<const std::size_t> idx, double lr) {
        Batch<T> batch = make_batch<T>(train, idx);
        SgdConfig sgd{lr, cfg.momentum, cfg.weight_decay};
        return ce_update(spec, model, *model.sgd_slots, batch, sgd);
      });
  return {std::move(model), std::move(log)};
}

// Teacher pretraining is CE training on the (imbalanced) transfer set.
template <class T>
TrainResult<T> train_teacher(const TrainConfig& cfg, const BackboneSpec& spec,
                             std::uint64_t init_seed, const LabeledDataset& train,
                             const LabeledDataset& val) {
  return train_ce<T>(cfg, spec, init_params<T>(spec, init_seed), train, val);
}

// Fixed-alpha knowledge distillation: per-sample weights pinned to
// (1 - alpha, alpha). Takes the same step path as the bilevel trainer, so a
// frozen-meta bilevel run with pinned weights reproduces it exactly.
template <class T>
TrainResult<T> train_vanilla_kd(const TrainConfig& cfg,
                                const BackboneSpec& student_spec,
                                ModelState<T> init,
                                const BackboneSpec& teacher_spec,
                                const ModelState<T>& teacher,
                                const LabeledDataset& train,
                                const LabeledDataset& val) {
  cfg.validate();
  KdConfig kd{cfg.temperature, cfg.alpha};
  kd.validate();
  ModelState<T> student = std::move(init);
  if (!student.sgd_slots) student.sgd_slots.emplace();
  const auto teacher_cache =
      detail::cache_teacher_logits(teacher_spec, teacher, train);
  const std::size_t C = train.num_classes;
  RunLog log = detail::run_epochs(
      cfg, student_spec, student, train, val,
      [&](std::span<const std::size_t> idx, double lr) {
        Batch<T> batch = make_batch<T>(train, idx);
        batch.teacher_logits = detail::gather_rows(teacher_cache, C, idx);
        const std::vector<T> wh(batch.size, static_cast<T>(1.0 - cfg.alpha));
        const std::vector<T> ws(batch.size, static_cast<T>(cfg.alpha));
        SgdConfig sgd{lr, cfg.momentum, cfg.weight_decay};
        return student_update(student_spec, student, *student.sgd_slots, batch, wh,
                              ws, static_cast<T>(cfg.temperature), sgd);
      });
  for (auto& rec : log.epochs) {
    rec.mean_w_hard = 1.0 - cfg.alpha;
    rec.mean_w_soft = cfg.alpha;
  }
  return {std::move(student), std::move(log)};
}

// One scatter record per training sample: the meta inputs and outputs.
struct WeightScatterRecord {
  double ce_teacher = 0.0;
  double ce_student = 0.0;
  double w_hard = 0.0;
  double w_soft = 0.0;
  int class_index = 0;
};

template <class T>
std::vector<WeightScatterRecord> export_weight_scatter(
    const MetaNetSpec& meta_spec, const ModelState<T>& meta,
    const BackboneSpec& teacher_spec, const ModelState<T>& teacher,
    const BackboneSpec& student_spec, const ModelState<T>& student,
    const LabeledDataset& train, std::size_t chunk = 256) {
  std::vector<WeightScatterRecord> records;
  records.reserve(train.size());
  const std::size_t C = train.num_classes;
  for (std::size_t start = 0; start < train.size(); start += chunk) {
    const std::size_t n = std::min(chunk, train.size() - start);
    std::vector<T> x(n * train.feature_dim);
    std::vector<int> labels(n);
    for (std::size_t i = 0; i < n; ++i) {
      const float* r = train.row(start + i);
      for (std::size_t j = 0; j < train.feature_dim; ++j)
        x[i * train.feature_dim + j] = static_cast<T>(r[j]);
      labels[i] = train.labels[start + i];
    }
    const auto t_logits = backbone_logits(teacher_spec, teacher, x, n);
    const auto s_logits = backbone_logits(student_spec, student, x, n);
    const auto ce_t = ce_per_sample(t_logits, labels, C);
    const auto ce_s = ce_per_sample(s_logits, labels, C);
    const auto w = detail::weights_matrix(meta_spec, meta, ce_t, ce_s);
    for (std::size_t i = 0; i < n; ++i) {
      WeightScatterRecord rec;
      rec.ce_teacher = static_cast<double>(ce_t[i]);
      rec.ce_student = static_cast<double>(ce_s[i]);
      rec.w_hard = static_cast<double>(w[2 * i]);
      rec.w_soft = static_cast<double>(w[2 * i + 1]);
      rec.class_index = labels[i];
      records.push_back(rec);
    }
  }
  return records;
}

}  // namespace bikd
