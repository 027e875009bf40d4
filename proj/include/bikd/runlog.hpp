#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace bikd {

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  std::vector<double> per_class_accuracy;
  double mean_w_hard = 0.0;
  double mean_w_soft = 0.0;
  std::size_t meta_updates = 0;  // cumulative
};

struct RunLog {
  std::vector<EpochRecord> epochs;
};

// CSV I/O lives in src/runlog.cpp; formatting uses %.17g so re-runs with
// identical state reproduce the file byte for byte.
std::string runlog_to_csv(const RunLog& log);
void write_runlog_csv(const RunLog& log, const std::string& path);

}  // namespace bikd
