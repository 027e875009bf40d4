// Command-line driver: dataset construction, training runs, evaluation,
// weight export and the numerical verification suites.
//
// Exit codes: 0 ok, 1 verification/run failure, 2 usage or config error.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "bikd/checkpoint.hpp"
#include "bikd/experiment.hpp"
#include "bikd/verify.hpp"

namespace fs = std::filesystem;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitUsage = 2;

// Relative output paths resolve under this root when the variable is set.
std::string resolve_output(const std::string& path) {
  const char* root = std::getenv("BIKD_OUTPUT_ROOT");
  if (root && *root && fs::path(path).is_relative())
    return (fs::path(root) / path).string();
  return path;
}

int fail(const char* code, const std::string& message, int exit_code) {
  std::cerr << "error[" << code << "]: " << message << "\n";
  return exit_code;
}

struct DataArgs {
  bool synthetic = false;
  std::vector<std::string> cifar_files;
  std::string cifar_test;
  std::size_t classes = 10;
  std::size_t dim = 32;
  double rho = 50.0;
  std::size_t n_max = 0;  // synthetic: 0 means 1000; cifar: 0 fits the pool
  std::size_t val_total = 1000;
  std::size_t test_per_class = 200;
  double mean_scale = 1.0;
  double sigma = 2.0;
  std::uint64_t seed = 0;
  std::string out;
};

int cmd_data(const DataArgs& args) {
  if (!args.synthetic && args.cifar_files.empty())
    return fail("BIKD_USAGE", "data: pass --synthetic or --cifar <files>",
                kExitUsage);
  if (args.rho < 1.0)
    return fail("BIKD_BAD_FLAG", "data: --rho must be >= 1, got " +
                                     std::to_string(args.rho),
                kExitUsage);
  bikd::DatasetBundle bundle;
  if (args.synthetic) {
    bikd::SyntheticDataConfig cfg;
    cfg.classes = args.classes;
    cfg.dim = args.dim;
    cfg.rho = args.rho;
    cfg.n_max = args.n_max == 0 ? 1000 : args.n_max;
    cfg.val_total = args.val_total;
    cfg.test_per_class = args.test_per_class;
    cfg.mean_scale = args.mean_scale;
    cfg.sigma = args.sigma;
    cfg.seed = args.seed;
    bundle = bikd::build_synthetic_bundle(cfg);
  } else {
    bikd::CifarDataConfig cfg;
    cfg.train_files = args.cifar_files;
    cfg.test_file = args.cifar_test;
    cfg.rho = args.rho;
    cfg.n_max = args.n_max;
    cfg.val_total = args.val_total;
    cfg.seed = args.seed;
    bundle = bikd::build_cifar_bundle(cfg);
  }
  const std::string out = resolve_output(args.out);
  bikd::save_bundle(out, bundle);
  std::cout << "wrote dataset bundle to " << out << " (train " << bundle.train.size()
            << ", val " << bundle.val.size() << ", test " << bundle.test.size()
            << ")\n";
  return kExitOk;
}

struct TrainArgs {
  std::string config_file;
  std::string method;
  std::string dataset;
  std::string teacher;
  std::string out;
  std::string precision;
  std::string backbone;
  std::vector<std::size_t> widths;
  std::string activation;
  std::vector<std::size_t> cnn_channels;
  std::vector<std::size_t> cnn_kernels;
  long long cnn_classifier = -1;
  long long cnn_image_size = -1;
  long long cnn_in_channels = -1;
  long long k = -1;
  long long epochs = -1;
  double student_lr = -1, meta_lr = -1, alpha = -1, temperature = -1;
  long long batch_size = -1, val_batch_size = -1, meta_hidden = -1;
  long long seed = -1;
};

int cmd_train(const TrainArgs& args) {
  bikd::ExperimentConfig cfg;
  if (!args.config_file.empty()) {
    std::ifstream in(args.config_file);
    if (!in)
      return fail("BIKD_NO_CONFIG", "train: cannot open '" + args.config_file + "'",
                  kExitUsage);
    std::ostringstream os;
    os << in.rdbuf();
    cfg = bikd::config_from_json_text(os.str());
  }
  // Flags override file values.
  if (!args.method.empty()) cfg.method = args.method;
  if (!args.dataset.empty()) cfg.dataset_dir = args.dataset;
  if (!args.teacher.empty()) cfg.teacher_checkpoint = args.teacher;
  if (!args.out.empty()) cfg.output_dir = args.out;
  if (!args.precision.empty()) cfg.precision = args.precision;
  if (!args.backbone.empty()) cfg.backbone = args.backbone;
  if (!args.widths.empty()) cfg.model_widths = args.widths;
  if (!args.activation.empty()) cfg.hidden_activation = args.activation;
  if (!args.cnn_channels.empty()) {
    cfg.cnn.channels = args.cnn_channels;
    cfg.cnn.kernel_sizes.assign(args.cnn_channels.size(), 3);
    cfg.cnn.pool_after.assign(args.cnn_channels.size(), true);
  }
  if (!args.cnn_kernels.empty()) cfg.cnn.kernel_sizes = args.cnn_kernels;
  if (args.cnn_classifier >= 0)
    cfg.cnn.classifier_width = static_cast<std::size_t>(args.cnn_classifier);
  if (args.cnn_image_size >= 0)
    cfg.cnn.image_size = static_cast<std::size_t>(args.cnn_image_size);
  if (args.cnn_in_channels >= 0)
    cfg.cnn.in_channels = static_cast<std::size_t>(args.cnn_in_channels);
  if (args.k >= 0) cfg.train.inner_steps = static_cast<std::size_t>(args.k);
  if (args.epochs >= 0) cfg.train.epochs = static_cast<std::size_t>(args.epochs);
  if (args.student_lr >= 0) cfg.train.student_lr = args.student_lr;
  if (args.meta_lr >= 0) cfg.train.meta_lr = args.meta_lr;
  if (args.alpha >= 0) cfg.train.alpha = args.alpha;
  if (args.temperature >= 0) cfg.train.temperature = args.temperature;
  if (args.batch_size >= 0)
    cfg.train.batch_size = static_cast<std::size_t>(args.batch_size);
  if (args.val_batch_size >= 0)
    cfg.train.val_batch_size = static_cast<std::size_t>(args.val_batch_size);
  if (args.meta_hidden >= 0) cfg.meta_hidden = static_cast<std::size_t>(args.meta_hidden);
  if (args.seed >= 0) cfg.seed = static_cast<std::uint64_t>(args.seed);
  cfg.output_dir = resolve_output(cfg.output_dir);

  cfg.validate();
  const auto log = bikd::run_experiment(cfg);
  std::cout << "run complete: " << cfg.output_dir << " (" << log.epochs.size()
            << " epochs)\n";
  if (!log.epochs.empty())
    std::cout << "final val loss " << log.epochs.back().val_loss << "\n";
  return kExitOk;
}

int cmd_verify(const std::string& suite, double rho, std::size_t k_override,
               std::size_t seeds, const std::string& report_path) {
  bikd::VerifyReport report;
  if (suite == "gradcheck") {
    report = bikd::verify_gradcheck(seeds == 0 ? 20 : seeds);
  } else if (suite == "hypergrad") {
    std::vector<std::size_t> ks = {1, 2, 3, 5};
    if (k_override > 0) ks = {k_override};
    report = bikd::verify_hypergrad(ks, seeds == 0 ? 2 : seeds);
  } else if (suite == "equivalence") {
    report = bikd::verify_equivalence();
  } else if (suite == "data") {
    report = bikd::verify_data(rho);
  } else {
    return fail("BIKD_USAGE",
                "verify: unknown suite '" + suite +
                    "' (expected gradcheck|hypergrad|equivalence|data)",
                kExitUsage);
  }
  const std::string text = bikd::report_to_json(report);
  std::cout << text << "\n";
  if (!report_path.empty()) {
    std::ofstream out(resolve_output(report_path));
    out << text << "\n";
  }
  return report.passed ? kExitOk : kExitFailure;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"bilevel knowledge distillation for long-tailed data"};
  app.require_subcommand(1);

  DataArgs data_args;
  auto* data = app.add_subcommand("data", "build a dataset bundle");
  data->add_flag("--synthetic", data_args.synthetic, "Gaussian-mixture source");
  data->add_option("--cifar", data_args.cifar_files, "CIFAR-10 binary train files")
      ->delimiter(',');
  data->add_option("--cifar-test", data_args.cifar_test, "CIFAR-10 test file");
  data->add_option("--classes", data_args.classes);
  data->add_option("--dim", data_args.dim);
  data->add_option("--rho", data_args.rho, "imbalance factor (>= 1)");
  data->add_option("--n-max", data_args.n_max);
  data->add_option("--val-total", data_args.val_total);
  data->add_option("--test-per-class", data_args.test_per_class);
  data->add_option("--mean-scale", data_args.mean_scale);
  data->add_option("--sigma", data_args.sigma);
  data->add_option("--seed", data_args.seed);
  data->add_option("--out", data_args.out)->required();

  TrainArgs train_args;
  auto* train = app.add_subcommand("train", "run an experiment");
  train->add_option("--config", train_args.config_file, "json config file");
  train->add_option("--method", train_args.method, "ce | kd | bikd");
  train->add_option("--dataset", train_args.dataset, "dataset bundle directory");
  train->add_option("--teacher", train_args.teacher, "teacher checkpoint stem");
  train->add_option("--out", train_args.out, "run directory");
  train->add_option("--precision", train_args.precision, "f32 | f64");
  train->add_option("--widths", train_args.widths, "model layer widths")
      ->delimiter(',');
  train->add_option("--activation", train_args.activation, "relu | tanh");
  train->add_option("--backbone", train_args.backbone, "mlp | tiny_cnn");
  train->add_option("--cnn-channels", train_args.cnn_channels, "conv channels")
      ->delimiter(',');
  train->add_option("--cnn-kernels", train_args.cnn_kernels, "conv kernel sizes")
      ->delimiter(',');
  train->add_option("--cnn-classifier", train_args.cnn_classifier);
  train->add_option("--cnn-image-size", train_args.cnn_image_size);
  train->add_option("--cnn-in-channels", train_args.cnn_in_channels);
  train->add_option("--k", train_args.k, "hypergradient window length");
  train->add_option("--epochs", train_args.epochs);
  train->add_option("--student-lr", train_args.student_lr);
  train->add_option("--meta-lr", train_args.meta_lr);
  train->add_option("--alpha", train_args.alpha, "fixed-alpha mixture (kd)");
  train->add_option("--temperature", train_args.temperature);
  train->add_option("--batch-size", train_args.batch_size);
  train->add_option("--val-batch-size", train_args.val_batch_size);
  train->add_option("--meta-hidden", train_args.meta_hidden);
  train->add_option("--seed", train_args.seed);

  std::string eval_run, export_run;
  auto* eval = app.add_subcommand("eval", "metrics for a finished run");
  eval->add_option("--run", eval_run, "run directory")->required();
  auto* exp = app.add_subcommand("export", "weight-scatter data for a bilevel run");
  exp->add_option("--run", export_run, "run directory")->required();

  std::string verify_suite, verify_report;
  double verify_rho = 100.0;
  std::size_t verify_k = 0, verify_seeds = 0;
  auto* verify = app.add_subcommand("verify", "numerical verification suites");
  verify->add_option("suite", verify_suite, "gradcheck|hypergrad|equivalence|data")
      ->required();
  verify->add_option("--rho", verify_rho);
  verify->add_option("--k", verify_k);
  verify->add_option("--seeds", verify_seeds);
  verify->add_option("--report", verify_report, "also write the json report here");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    std::cerr << "error[BIKD_USAGE]: " << e.what() << "\n";
    return kExitUsage;
  }

  try {
    if (data->parsed()) return cmd_data(data_args);
    if (train->parsed()) return cmd_train(train_args);
    if (eval->parsed()) {
      const auto m = bikd::run_eval(resolve_output(eval_run));
      std::cout << "overall_accuracy " << m.overall_accuracy << "\n";
      return kExitOk;
    }
    if (exp->parsed()) {
      const auto n = bikd::run_export(resolve_output(export_run));
      std::cout << "wrote " << n << " weight-scatter records\n";
      return kExitOk;
    }
    if (verify->parsed())
      return cmd_verify(verify_suite, verify_rho, verify_k, verify_seeds,
                        verify_report);
  } catch (const bikd::ValueError& e) {
    return fail("BIKD_BAD_CONFIG", e.what(), kExitUsage);
  } catch (const bikd::FormatError& e) {
    return fail("BIKD_BAD_ARTIFACT", e.what(), kExitFailure);
  } catch (const bikd::DataError& e) {
    return fail("BIKD_DATA", e.what(), kExitFailure);
  } catch (const bikd::Error& e) {
    return fail("BIKD_RUNTIME", e.what(), kExitFailure);
  } catch (const std::exception& e) {
    return fail("BIKD_INTERNAL", e.what(), kExitFailure);
  }
  return kExitUsage;
}
