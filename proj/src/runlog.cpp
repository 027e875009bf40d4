#include "bikd/runlog.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

#include "bikd/error.hpp"

namespace bikd {

namespace {

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

std::string runlog_to_csv(const RunLog& log) {
  std::ostringstream os;
  const std::size_t classes =
      log.epochs.empty() ? 0 : log.epochs.front().per_class_accuracy.size();
  os << "epoch,train_loss,val_loss";
  for (std::size_t c = 0; c < classes; ++c) os << ",acc_class" << c;
  os << ",mean_w_hard,mean_w_soft,meta_updates\n";
  for (const auto& rec : log.epochs) {
    os << rec.epoch << ',' << fmt_double(rec.train_loss) << ','
       << fmt_double(rec.val_loss);
    for (double a : rec.per_class_accuracy) os << ',' << fmt_double(a);
    os << ',' << fmt_double(rec.mean_w_hard) << ',' << fmt_double(rec.mean_w_soft)
       << ',' << rec.meta_updates << '\n';
  }
  return os.str();
}

void write_runlog_csv(const RunLog& log, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("runlog: cannot write '" + path + "'");
  out << runlog_to_csv(log);
}

}  // namespace bikd
