#pragma once

#include <cmath>
#include <numeric>
#include <span>
#include <vector>

#include "bikd/bilevel.hpp"
#include "bikd/metrics.hpp"
#include "bikd/runlog.hpp"

namespace bikd {

struct BatchReport {
  double train_loss = 0.0;
  double val_loss = 0.0;
  double mean_w_hard = 0.0;
  double mean_w_soft = 0.0;
  bool meta_updated = false;
};

namespace detail {

// Teacher logits for a whole dataset, computed once (the teacher is frozen).
template <class T>
std::vector<T> cache_teacher_logits(const BackboneSpec& spec,
                                    const ModelState<T>& teacher,
                                    const LabeledDataset& data,
                                    std::size_t chunk = 256) {
  const std::size_t C = backbone_output_dim(spec);
  std::vector<T> cache(data.size() * C);
  for (std::size_t start = 0; start < data.size(); start += chunk) {
    const std::size_t n = std::min(chunk, data.size() - start);
    std::vector<T> x(n * data.feature_dim);
    for (std::size_t i = 0; i < n; ++i) {
      const float* r = data.row(start + i);
      for (std::size_t j = 0; j < data.feature_dim; ++j)
        x[i * data.feature_dim + j] = static_cast<T>(r[j]);
    }
    const auto logits = backbone_logits(spec, teacher, x, n);
    std::copy(logits.begin(), logits.end(), cache.begin() + start * C);
  }
  return cache;
}

template <class T>
std::vector<T> gather_rows(const std::vector<T>& cache, std::size_t row_len,
                           std::span<const std::size_t> idx) {
  std::vector<T> out(idx.size() * row_len);
  for (std::size_t i = 0; i < idx.size(); ++i)
    std::copy(cache.begin() + idx[i] * row_len, cache.begin() + (idx[i] + 1) * row_len,
              out.begin() + i * row_len);
  return out;
}

}  // namespace detail

// Mean cross-entropy of a model over a whole dataset.
template <class T>
double mean_ce_loss(const BackboneSpec& spec, const ModelState<T>& model,
                    const LabeledDataset& val, std::size_t chunk = 256) {
  double total = 0.0;
  for (std::size_t start = 0; start < val.size(); start += chunk) {
    const std::size_t n = std::min(chunk, val.size() - start);
    std::vector<T> x(n * val.feature_dim);
    std::vector<int> labels(n);
    for (std::size_t i = 0; i < n; ++i) {
      const float* r = val.row(start + i);
      for (std::size_t j = 0; j < val.feature_dim; ++j)
        x[i * val.feature_dim + j] = static_cast<T>(r[j]);
      labels[i] = val.labels[start + i];
    }
    const auto logits = backbone_logits(spec, model, x, n);
    const auto ce = ce_per_sample(logits, labels, val.num_classes);
    for (T v : ce) total += static_cast<double>(v);
  }
  return val.size() == 0 ? 0.0 : total / static_cast<double>(val.size());
}

// Cycling validation-batch sampler, reshuffled each time it wraps.
class ValSampler {
 public:
  ValSampler(std::size_t size, std::uint64_t seed)
      : order_(size), cursor_(size), stream_(seed, "val-sampler") {
    std::iota(order_.begin(), order_.end(), std::size_t{0});
  }

  std::vector<std::size_t> next(std::size_t want) {
    const std::size_t n = std::min(want, order_.size());
    if (cursor_ + n > order_.size()) {
      stream_.shuffle(order_);
      cursor_ = 0;
    }
    std::vector<std::size_t> out(order_.begin() + cursor_, order_.begin() + cursor_ + n);
    cursor_ += n;
    return out;
  }

 private:
  std::vector<std::size_t> order_;
  std::size_t cursor_;
  RngStream stream_;
};

// Six-step batch flow: clone the student, generate weights, take the
// differentiable virtual step, evaluate the validation loss at the virtual
// student, accumulate the hypergradient, update the meta model on window
// boundaries, then recompute weights and advance the real student.
template <class T>
class BilevelTrainer {
 public:
  BilevelTrainer(TrainConfig cfg, BackboneSpec student_spec, ModelState<T> student,
                 MetaNetSpec meta_spec, ModelState<T> meta,
                 BackboneSpec teacher_spec, const ModelState<T>& teacher,
                 const LabeledDataset& train, const LabeledDataset& val)
      : cfg_(std::move(cfg)),
        student_spec_(std::move(student_spec)),
        student_(std::move(student)),
        meta_spec_(meta_spec),
        meta_(std::move(meta)),
        teacher_spec_(std::move(teacher_spec)),
        teacher_(teacher),
        train_(train),
        val_(val) {
    cfg_.validate();
  }

  BatchReport run_batch(Batch<T>& train_batch, const Batch<T>& val_batch, double lr) {
    BatchReport report;
    const std::size_t B = train_batch.size;
    const std::size_t C = train_.num_classes;
    const T tau = static_cast<T>(cfg_.temperature);
    if (train_batch.teacher_logits.empty())
      train_batch.teacher_logits = backbone_logits(
          teacher_spec_, teacher_, train_batch.x.values(), B);

    const bool pinned = cfg_.pinned_weights.has_value();
    std::vector<T> w_hard_values, w_soft_values;

    if (!pinned) {
      // Meta inputs: per-sample CE pairs at the pre-update student, detached.
      const bool is_mlp = std::holds_alternative<MlpSpec>(student_spec_);
      MlpTrace<T> trace;
      std::vector<T> student_logits;
      if (is_mlp) {
        trace = mlp_trace(std::get<MlpSpec>(student_spec_), student_,
                          train_batch.x.values(), B);
        student_logits = trace.logits;
      } else {
        student_logits =
            backbone_logits(student_spec_, student_, train_batch.x.values(), B);
      }
      const auto ce_t = ce_per_sample(train_batch.teacher_logits, train_batch.labels, C);
      const auto ce_s = ce_per_sample(student_logits, train_batch.labels, C);

      Tape<T> tape;
      auto meta_params = bind_params(meta_, true);
      auto [wh, ws] = compute_weights(tape, meta_spec_,
                                      std::span<const Tensor<T>>(meta_params), ce_t,
                                      ce_s);
      ModelState<T> virtual_base = clone_state(student_);
      VirtualStudent<T> vs;
      if (is_mlp) {
        const std::vector<std::vector<T>>* fold = nullptr;
        if (cfg_.virtual_momentum && student_.sgd_slots &&
            !student_.sgd_slots->buffers.empty())
          fold = &student_.sgd_slots->buffers;
        vs = virtual_step_mlp(tape, std::get<MlpSpec>(student_spec_), virtual_base,
                              trace, wh, ws, train_batch, static_cast<T>(lr), tau,
                              fold, static_cast<T>(cfg_.momentum));
      } else {
        const auto grads =
            compute_per_sample_grads(student_spec_, virtual_base, train_batch, tau);
        vs = virtual_step_from_grads(tape, virtual_base, grads, wh, ws,
                                     static_cast<T>(lr));
      }
      T val_loss_value = T(0);
      const auto contribution =
          one_step_hypergrad(tape, student_spec_, vs, val_batch,
                             std::span<const Tensor<T>>(meta_params), &val_loss_value);
      report.val_loss = static_cast<double>(val_loss_value);
      accumulator_.add(contribution);

      const bool window_boundary =
          cfg_.strict_window ? (batch_counter_ + 1) % cfg_.inner_steps == 0
                             : batch_counter_ % cfg_.inner_steps == 0;
      if (window_boundary) {
        meta_update(accumulator_, meta_, cfg_);
        ++meta_updates_;
        report.meta_updated = true;
      }

      // Re-generate the weights at the (possibly updated) meta parameters,
      // still from the pre-update student's loss pairs.
      const auto w = detail::weights_matrix(meta_spec_, meta_, ce_t, ce_s);
      w_hard_values.resize(B);
      w_soft_values.resize(B);
      for (std::size_t i = 0; i < B; ++i) {
        w_hard_values[i] = w[2 * i];
        w_soft_values[i] = w[2 * i + 1];
      }
    } else {
      w_hard_values.assign(B, static_cast<T>(cfg_.pinned_weights->first));
      w_soft_values.assign(B, static_cast<T>(cfg_.pinned_weights->second));
    }

    double wsum_h = 0.0, wsum_s = 0.0;
    for (std::size_t i = 0; i < B; ++i) {
      wsum_h += static_cast<double>(w_hard_values[i]);
      wsum_s += static_cast<double>(w_soft_values[i]);
    }
    report.mean_w_hard = wsum_h / static_cast<double>(B);
    report.mean_w_soft = wsum_s / static_cast<double>(B);

    SgdConfig sgd{lr, cfg_.momentum, cfg_.weight_decay};
    if (!student_.sgd_slots) student_.sgd_slots.emplace();
    report.train_loss =
        student_update(student_spec_, student_, *student_.sgd_slots, train_batch,
                       w_hard_values, w_soft_values, tau, sgd);
    ++batch_counter_;
    return report;
  }

  RunLog fit() {
    RunLog log;
    const std::size_t C = train_.num_classes;
    teacher_cache_ = detail::cache_teacher_logits(teacher_spec_, teacher_, train_);
    RngStream shuffle_stream(cfg_.seed, "shuffle");
    ValSampler val_sampler(val_.size(), cfg_.seed);
    std::vector<std::size_t> order(train_.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    const LrSchedule schedule = cfg_.student_schedule();

    for (std::size_t epoch = 0; epoch < cfg_.epochs; ++epoch) {
      const double lr = schedule.at_epoch(epoch);
      shuffle_stream.shuffle(order);
      double loss_sum = 0.0, wh_sum = 0.0, ws_sum = 0.0;
      std::size_t batches = 0;
      for (std::size_t start = 0; start < order.size(); start += cfg_.batch_size) {
        const std::size_t n = std::min(cfg_.batch_size, order.size() - start);
        std::span<const std::size_t> idx(order.data() + start, n);
        Batch<T> batch = make_batch<T>(train_, idx);
        batch.teacher_logits = detail::gather_rows(teacher_cache_, C, idx);
        const auto val_idx = val_sampler.next(cfg_.val_batch_size);
        Batch<T> val_batch = make_batch<T>(val_, val_idx);
        const BatchReport rep = run_batch(batch, val_batch, lr);
        loss_sum += rep.train_loss;
        wh_sum += rep.mean_w_hard;
        ws_sum += rep.mean_w_soft;
        ++batches;
      }
      EpochRecord rec;
      rec.epoch = epoch;
      rec.train_loss = batches ? loss_sum / static_cast<double>(batches) : 0.0;
      rec.val_loss = mean_ce_loss(student_spec_, student_, val_);
      rec.per_class_accuracy =
          evaluate(student_spec_, student_, val_).per_class_accuracy;
      rec.mean_w_hard = batches ? wh_sum / static_cast<double>(batches) : 0.0;
      rec.mean_w_soft = batches ? ws_sum / static_cast<double>(batches) : 0.0;
      rec.meta_updates = meta_updates_;
      log.epochs.push_back(std::move(rec));
    }
    return log;
  }

  const ModelState<T>& student() const { return student_; }
  ModelState<T>& student() { return student_; }
  const ModelState<T>& meta() const { return meta_; }
  std::size_t meta_update_count() const { return meta_updates_; }
  std::size_t batch_counter() const { return batch_counter_; }

 private:
  TrainConfig cfg_;
  BackboneSpec student_spec_;
  ModelState<T> student_;
  MetaNetSpec meta_spec_;
  ModelState<T> meta_;
  BackboneSpec teacher_spec_;
  const ModelState<T>& teacher_;
  const LabeledDataset& train_;
  const LabeledDataset& val_;
  HypergradAccumulator<T> accumulator_;
  std::vector<T> teacher_cache_;
  std::size_t batch_counter_ = 0;
  std::size_t meta_updates_ = 0;
};

}  // namespace bikd
