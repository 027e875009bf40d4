#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "bikd/error.hpp"

namespace bikd {

// Exponential class-count profile: class i of C gets
// n_i = round(n_max * (1/rho)^(i/(C-1))), clamped to at least 1.
struct LongTailSpec {
  std::size_t num_classes = 10;
  std::size_t n_max = 5000;
  double rho = 1.0;  // imbalance factor n_max / n_min
  std::uint64_t seed = 0;
};

struct GaussianMixSpec {
  std::size_t num_classes = 10;
  std::size_t dim = 32;
  std::vector<std::vector<double>> means;  // one per class
  double sigma = 1.0;                      // shared isotropic stddev
  std::size_t samples_per_class = 1000;
  std::uint64_t seed = 0;
};

// Immutable once built; features are row-major num_samples x feature_dim.
struct LabeledDataset {
  std::size_t num_classes = 0;
  std::size_t feature_dim = 0;
  std::vector<float> features;
  std::vector<int> labels;
  std::vector<std::vector<std::size_t>> per_class;

  std::size_t size() const { return labels.size(); }
  const float* row(std::size_t i) const { return features.data() + i * feature_dim; }

  std::vector<std::size_t> class_histogram() const {
    std::vector<std::size_t> h(num_classes, 0);
    for (int y : labels) h[static_cast<std::size_t>(y)]++;
    return h;
  }

  void rebuild_index();
};

std::vector<std::size_t> class_counts(const LongTailSpec& spec);

// Subsample `source` down to the long-tail profile, deterministically by seed.
LabeledDataset make_longtail(const LabeledDataset& source, const LongTailSpec& spec);

// Remove a class-balanced validation set of `total` samples from the pool.
std::pair<LabeledDataset, LabeledDataset> carve_validation(
    const LabeledDataset& source, std::size_t total, std::uint64_t seed);

LabeledDataset gen_gaussian_mix(const GaussianMixSpec& spec);

// Random well-spread class means for a synthetic mixture.
std::vector<std::vector<double>> random_class_means(std::size_t num_classes,
                                                    std::size_t dim, double scale,
                                                    std::uint64_t seed);

struct CifarNormalization {
  std::array<double, 3> mean = {0.4914, 0.4822, 0.4465};
  std::array<double, 3> stddev = {0.2470, 0.2435, 0.2616};
};

// CIFAR-10 binary file: records of 3073 bytes (1 label + 3072 channel-planar
// pixels). Pixels are scaled to [0,1] then normalized per channel.
LabeledDataset load_cifar10_binary(const std::string& path,
                                   const CifarNormalization& norm = {});

// FNV-1a digest over features and labels, for run manifests.
std::uint64_t dataset_digest(const LabeledDataset& ds);

}  // namespace bikd
