#pragma once

#include <optional>
#include <string>
#include <vector>

#include "bikd/bilevel.hpp"
#include "bikd/data.hpp"
#include "bikd/metrics.hpp"
#include "bikd/nn.hpp"
#include "bikd/runlog.hpp"

namespace bikd {

inline constexpr const char* kCodeVersion = "bikd 0.1.0";

// Synthetic long-tailed Gaussian-mixture pipeline: balanced pool, balanced
// validation carve, exponential long-tail subsample, held-out balanced test.
struct SyntheticDataConfig {
  std::size_t classes = 10;
  std::size_t dim = 32;
  double rho = 50.0;
  std::size_t n_max = 1000;
  std::size_t val_total = 1000;
  std::size_t test_per_class = 200;
  double mean_scale = 1.0;
  double sigma = 2.0;
  std::uint64_t seed = 0;
};

struct DatasetBundle {
  LabeledDataset train, val, test;
  std::vector<std::size_t> class_counts;  // of train
  double rho = 1.0;
  std::uint64_t seed = 0;
  std::string source;  // "synthetic" or "cifar10"
};

DatasetBundle build_synthetic_bundle(const SyntheticDataConfig& cfg);

struct CifarDataConfig {
  std::vector<std::string> train_files;
  std::string test_file;
  double rho = 1.0;
  std::size_t n_max = 0;  // 0: largest count the pool allows after carving
  std::size_t val_total = 1000;
  std::uint64_t seed = 0;
  CifarNormalization normalization;
};

DatasetBundle build_cifar_bundle(const CifarDataConfig& cfg);

void save_bundle(const std::string& dir, const DatasetBundle& bundle);
DatasetBundle load_bundle(const std::string& dir);

// Full experiment description; serialized into every run manifest.
struct ExperimentConfig {
  std::string method = "bikd";   // ce | kd | bikd
  std::string precision = "f32"; // f32 | f64
  std::string dataset_dir;
  std::string teacher_checkpoint;  // stem; required for kd / bikd
  std::string output_dir;
  std::uint64_t seed = 0;
  std::string backbone = "mlp";  // mlp | tiny_cnn
  std::vector<std::size_t> model_widths = {32, 64, 10};
  std::string hidden_activation = "tanh";
  TinyCnnSpec cnn;  // used when backbone == tiny_cnn
  std::size_t meta_hidden = 64;
  double meta_input_clip = 0.0;
  TrainConfig train;

  BackboneSpec backbone_spec() const;
  void validate() const;
};

ExperimentConfig config_from_json_text(const std::string& text);
std::string config_to_json_text(const ExperimentConfig& cfg);

// Trains per the config and writes a self-describing run directory:
// manifest.json, runlog.csv, model checkpoint (and meta checkpoint for the
// bilevel method).
RunLog run_experiment(const ExperimentConfig& cfg);

// Metrics from a finished run directory; writes metrics.csv + confusion.csv.
Metrics run_eval(const std::string& run_dir);

// Weight-scatter CSV for a finished bilevel run; returns the record count.
std::size_t run_export(const std::string& run_dir);

}  // namespace bikd
