#include "bikd/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

#include "bikd/rng.hpp"

namespace bikd {

void LabeledDataset::rebuild_index() {
  per_class.assign(num_classes, {});
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int y = labels[i];
    if (y < 0 || static_cast<std::size_t>(y) >= num_classes)
      throw DataError("dataset: label " + std::to_string(y) + " out of range for " +
                      std::to_string(num_classes) + " classes");
    per_class[static_cast<std::size_t>(y)].push_back(i);
  }
}

std::vector<std::size_t> class_counts(const LongTailSpec& spec) {
  if (spec.num_classes < 2)
    throw ValueError("long-tail spec: need at least 2 classes, got " +
                     std::to_string(spec.num_classes));
  if (spec.n_max < 1) throw ValueError("long-tail spec: n_max must be >= 1");
  if (spec.rho < 1.0)
    throw ValueError("long-tail spec: rho must be >= 1, got " +
                     std::to_string(spec.rho));
  const double mu = 1.0 / spec.rho;
  const std::size_t C = spec.num_classes;
  std::vector<std::size_t> counts(C);
  for (std::size_t i = 0; i < C; ++i) {
    const double expo = static_cast<double>(i) / static_cast<double>(C - 1);
    const double n = static_cast<double>(spec.n_max) * std::pow(mu, expo);
    counts[i] = static_cast<std::size_t>(std::max(1.0, std::round(n)));
  }
  return counts;
}

namespace {

LabeledDataset subset(const LabeledDataset& source,
                      const std::vector<std::size_t>& indices) {
  LabeledDataset out;
  out.num_classes = source.num_classes;
  out.feature_dim = source.feature_dim;
  out.features.reserve(indices.size() * source.feature_dim);
  out.labels.reserve(indices.size());
  for (std::size_t idx : indices) {
    const float* r = source.row(idx);
    out.features.insert(out.features.end(), r, r + source.feature_dim);
    out.labels.push_back(source.labels[idx]);
  }
  out.rebuild_index();
  return out;
}

}  // namespace

LabeledDataset make_longtail(const LabeledDataset& source, const LongTailSpec& spec) {
  if (source.num_classes != spec.num_classes)
    throw DataError("make_longtail: source has " + std::to_string(source.num_classes) +
                    " classes, spec expects " + std::to_string(spec.num_classes));
  const auto counts = class_counts(spec);
  RngStream rng(spec.seed, "longtail");
  std::vector<std::size_t> keep;
  for (std::size_t c = 0; c < spec.num_classes; ++c) {
    auto pool = source.per_class[c];
    if (pool.size() < counts[c])
      throw DataError("make_longtail: class " + std::to_string(c) + " has " +
                      std::to_string(pool.size()) + " samples, needs " +
                      std::to_string(counts[c]));
    rng.shuffle(pool);
    keep.insert(keep.end(), pool.begin(), pool.begin() + counts[c]);
  }
  return subset(source, keep);
}

std::pair<LabeledDataset, LabeledDataset> carve_validation(
    const LabeledDataset& source, std::size_t total, std::uint64_t seed) {
  const std::size_t C = source.num_classes;
  if (C == 0 || total % C != 0)
    throw DataError("carve_validation: total " + std::to_string(total) +
                    " is not divisible by " + std::to_string(C) + " classes");
  const std::size_t per_class = total / C;
  RngStream rng(seed, "carve");
  std::vector<std::size_t> val_idx, rest_idx;
  for (std::size_t c = 0; c < C; ++c) {
    auto pool = source.per_class[c];
    if (pool.size() < per_class)
      throw DataError("carve_validation: class " + std::to_string(c) + " has only " +
                      std::to_string(pool.size()) + " samples, needs " +
                      std::to_string(per_class));
    rng.shuffle(pool);
    val_idx.insert(val_idx.end(), pool.begin(), pool.begin() + per_class);
    rest_idx.insert(rest_idx.end(), pool.begin() + per_class, pool.end());
  }
  // Keep remainder in original index order so carving is order-stable.
  std::sort(rest_idx.begin(), rest_idx.end());
  std::sort(val_idx.begin(), val_idx.end());
  return {subset(source, val_idx), subset(source, rest_idx)};
}

std::vector<std::vector<double>> random_class_means(std::size_t num_classes,
                                                    std::size_t dim, double scale,
                                                    std::uint64_t seed) {
  RngStream rng(seed, "gaussian-means");
  std::vector<std::vector<double>> means(num_classes, std::vector<double>(dim));
  for (auto& m : means)
    for (auto& v : m) v = rng.normal() * scale;
  return means;
}

LabeledDataset gen_gaussian_mix(const GaussianMixSpec& spec) {
  if (spec.means.size() != spec.num_classes)
    throw ValueError("gaussian mix: need one mean per class");
  for (const auto& m : spec.means)
    if (m.size() != spec.dim)
      throw ValueError("gaussian mix: mean dimension mismatch");
  if (!(spec.sigma > 0.0)) throw ValueError("gaussian mix: sigma must be positive");

  LabeledDataset ds;
  ds.num_classes = spec.num_classes;
  ds.feature_dim = spec.dim;
  ds.features.reserve(spec.num_classes * spec.samples_per_class * spec.dim);
  ds.labels.reserve(spec.num_classes * spec.samples_per_class);
  for (std::size_t c = 0; c < spec.num_classes; ++c) {
    RngStream rng(spec.seed, "gaussian/class" + std::to_string(c));
    for (std::size_t s = 0; s < spec.samples_per_class; ++s) {
      for (std::size_t d = 0; d < spec.dim; ++d)
        ds.features.push_back(
            static_cast<float>(spec.means[c][d] + spec.sigma * rng.normal()));
      ds.labels.push_back(static_cast<int>(c));
    }
  }
  ds.rebuild_index();
  return ds;
}

LabeledDataset load_cifar10_binary(const std::string& path,
                                   const CifarNormalization& norm) {
  constexpr std::size_t kRecord = 3073;
  constexpr std::size_t kPixels = 3072;
  constexpr std::size_t kPlane = 1024;

  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cifar: cannot open '" + path + "'");
  in.seekg(0, std::ios::end);
  const auto file_size = static_cast<std::size_t>(in.tellg());
  in.seekg(0);
  if (file_size == 0 || file_size % kRecord != 0)
    throw FormatError("cifar: '" + path + "' truncated at byte offset " +
                      std::to_string(file_size - file_size % kRecord) +
                      " (file size " + std::to_string(file_size) +
                      " is not a multiple of 3073)");

  const std::size_t n = file_size / kRecord;
  LabeledDataset ds;
  ds.num_classes = 10;
  ds.feature_dim = kPixels;
  ds.features.resize(n * kPixels);
  ds.labels.resize(n);

  std::vector<unsigned char> rec(kRecord);
  for (std::size_t i = 0; i < n; ++i) {
    in.read(reinterpret_cast<char*>(rec.data()), kRecord);
    if (!in)
      throw FormatError("cifar: read failed at byte offset " +
                        std::to_string(i * kRecord));
    if (rec[0] > 9)
      throw FormatError("cifar: invalid label byte " + std::to_string(rec[0]) +
                        " at byte offset " + std::to_string(i * kRecord));
    ds.labels[i] = rec[0];
    float* out = ds.features.data() + i * kPixels;
    for (std::size_t p = 0; p < kPixels; ++p) {
      const std::size_t channel = p / kPlane;
      const double scaled = static_cast<double>(rec[1 + p]) / 255.0;
      out[p] = static_cast<float>((scaled - norm.mean[channel]) / norm.stddev[channel]);
    }
  }
  ds.rebuild_index();
  return ds;
}

std::uint64_t dataset_digest(const LabeledDataset& ds) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix_bytes = [&h](const void* data, std::size_t len) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < len; ++i) {
      h ^= p[i];
      h *= 0x100000001b3ULL;
    }
  };
  mix_bytes(ds.features.data(), ds.features.size() * sizeof(float));
  mix_bytes(ds.labels.data(), ds.labels.size() * sizeof(int));
  return h;
}

}  // namespace bikd
