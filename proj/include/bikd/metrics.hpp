#pragma once

#include <algorithm>
#include <cstddef>
#include <optional>
#include <vector>

#include "bikd/data.hpp"
#include "bikd/nn.hpp"

namespace bikd {

// Row = true class, column = predicted class.
struct ConfusionMatrix {
  std::size_t num_classes = 0;
  std::vector<std::size_t> counts;  // C*C

  explicit ConfusionMatrix(std::size_t c = 0) : num_classes(c), counts(c * c, 0) {}

  std::size_t& at(std::size_t truth, std::size_t pred) {
    return counts[truth * num_classes + pred];
  }
  std::size_t at(std::size_t truth, std::size_t pred) const {
    return counts[truth * num_classes + pred];
  }
  std::size_t row_sum(std::size_t truth) const {
    std::size_t s = 0;
    for (std::size_t p = 0; p < num_classes; ++p) s += at(truth, p);
    return s;
  }
  std::size_t trace() const {
    std::size_t s = 0;
    for (std::size_t c = 0; c < num_classes; ++c) s += at(c, c);
    return s;
  }
  std::size_t total() const {
    std::size_t s = 0;
    for (std::size_t v : counts) s += v;
    return s;
  }
};

struct Metrics {
  double overall_accuracy = 0.0;
  std::vector<double> per_class_accuracy;
  ConfusionMatrix confusion;
  // Head/tail split by training-class frequency (head: count >= median).
  std::optional<double> head_accuracy, tail_accuracy;
  std::vector<bool> is_head;
};

// Argmax with ties broken toward the lowest class index.
template <class T>
std::size_t argmax_row(const T* row, std::size_t n) {
  std::size_t best = 0;
  for (std::size_t c = 1; c < n; ++c)
    if (row[c] > row[best]) best = c;
  return best;
}

template <class T>
std::vector<int> predict(const BackboneSpec& spec, const ModelState<T>& model,
                         const LabeledDataset& data, std::size_t chunk = 256) {
  std::vector<int> preds(data.size());
  const std::size_t C = backbone_output_dim(spec);
  for (std::size_t start = 0; start < data.size(); start += chunk) {
    const std::size_t n = std::min(chunk, data.size() - start);
    std::vector<T> x(n * data.feature_dim);
    for (std::size_t i = 0; i < n; ++i) {
      const float* r = data.row(start + i);
      for (std::size_t j = 0; j < data.feature_dim; ++j)
        x[i * data.feature_dim + j] = static_cast<T>(r[j]);
    }
    const auto logits = backbone_logits(spec, model, x, n);
    for (std::size_t i = 0; i < n; ++i)
      preds[start + i] = static_cast<int>(argmax_row(logits.data() + i * C, C));
  }
  return preds;
}

// Exact counting metrics; head/tail splits need the training class counts.
template <class T>
Metrics evaluate(const BackboneSpec& spec, const ModelState<T>& model,
                 const LabeledDataset& test,
                 const std::vector<std::size_t>* train_counts = nullptr) {
  const std::size_t C = test.num_classes;
  Metrics m;
  m.confusion = ConfusionMatrix(C);
  const auto preds = predict(spec, model, test);
  for (std::size_t i = 0; i < test.size(); ++i)
    m.confusion.at(static_cast<std::size_t>(test.labels[i]),
                   static_cast<std::size_t>(preds[i]))++;
  m.overall_accuracy = test.size() == 0
                           ? 0.0
                           : static_cast<double>(m.confusion.trace()) /
                                 static_cast<double>(test.size());
  m.per_class_accuracy.resize(C, 0.0);
  for (std::size_t c = 0; c < C; ++c) {
    const std::size_t n = m.confusion.row_sum(c);
    m.per_class_accuracy[c] =
        n == 0 ? 0.0 : static_cast<double>(m.confusion.at(c, c)) / static_cast<double>(n);
  }
  if (train_counts && train_counts->size() == C) {
    std::vector<std::size_t> sorted = *train_counts;
    std::sort(sorted.begin(), sorted.end());
    const double median =
        C % 2 == 1 ? static_cast<double>(sorted[C / 2])
                   : 0.5 * static_cast<double>(sorted[C / 2 - 1] + sorted[C / 2]);
    m.is_head.resize(C);
    std::size_t head_correct = 0, head_total = 0, tail_correct = 0, tail_total = 0;
    for (std::size_t c = 0; c < C; ++c) {
      m.is_head[c] = static_cast<double>((*train_counts)[c]) >= median;
      if (m.is_head[c]) {
        head_correct += m.confusion.at(c, c);
        head_total += m.confusion.row_sum(c);
      } else {
        tail_correct += m.confusion.at(c, c);
        tail_total += m.confusion.row_sum(c);
      }
    }
    if (head_total > 0)
      m.head_accuracy = static_cast<double>(head_correct) / static_cast<double>(head_total);
    if (tail_total > 0)
      m.tail_accuracy = static_cast<double>(tail_correct) / static_cast<double>(tail_total);
  }
  return m;
}

}  // namespace bikd
