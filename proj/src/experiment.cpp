#include "bikd/experiment.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include <json.hpp>

#include "bikd/baselines.hpp"
#include "bikd/checkpoint.hpp"
#include "bikd/trainer.hpp"

namespace bikd {

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

namespace {

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

void check_keys(const ordered_json& j, const std::set<std::string>& allowed,
                const std::string& context) {
  for (const auto& [key, value] : j.items())
    if (!allowed.count(key))
      throw ValueError("config: unknown key '" + key + "' in " + context);
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write '" + path + "'");
  out << text;
}

std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open '" + path + "'");
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

}  // namespace

DatasetBundle build_synthetic_bundle(const SyntheticDataConfig& cfg) {
  if (cfg.rho < 1.0)
    throw ValueError("synthetic data: rho must be >= 1, got " +
                     std::to_string(cfg.rho));
  if (cfg.classes < 2) throw ValueError("synthetic data: need at least 2 classes");
  DatasetBundle bundle;
  bundle.source = "synthetic";
  bundle.rho = cfg.rho;
  bundle.seed = cfg.seed;

  GaussianMixSpec mix;
  mix.num_classes = cfg.classes;
  mix.dim = cfg.dim;
  mix.means = random_class_means(cfg.classes, cfg.dim, cfg.mean_scale,
                                 derive_seed(cfg.seed, "means"));
  mix.sigma = cfg.sigma;
  mix.samples_per_class = cfg.n_max + cfg.val_total / cfg.classes +
                          (cfg.val_total % cfg.classes ? 1 : 0);
  mix.seed = derive_seed(cfg.seed, "pool");
  const auto pool = gen_gaussian_mix(mix);

  auto [val, rest] = carve_validation(pool, cfg.val_total, derive_seed(cfg.seed, "carve"));
  bundle.val = std::move(val);
  bundle.train = make_longtail(
      rest, {cfg.classes, cfg.n_max, cfg.rho, derive_seed(cfg.seed, "longtail")});
  bundle.class_counts = bundle.train.class_histogram();

  mix.samples_per_class = cfg.test_per_class;
  mix.seed = derive_seed(cfg.seed, "test");
  bundle.test = gen_gaussian_mix(mix);
  return bundle;
}

DatasetBundle build_cifar_bundle(const CifarDataConfig& cfg) {
  if (cfg.rho < 1.0)
    throw ValueError("cifar data: rho must be >= 1, got " + std::to_string(cfg.rho));
  if (cfg.train_files.empty()) throw ValueError("cifar data: no train files given");
  LabeledDataset pool;
  for (const auto& file : cfg.train_files) {
    const auto part = load_cifar10_binary(file, cfg.normalization);
    if (pool.size() == 0) {
      pool = part;
    } else {
      pool.features.insert(pool.features.end(), part.features.begin(),
                           part.features.end());
      pool.labels.insert(pool.labels.end(), part.labels.begin(), part.labels.end());
    }
  }
  pool.rebuild_index();

  DatasetBundle bundle;
  bundle.source = "cifar10";
  bundle.rho = cfg.rho;
  bundle.seed = cfg.seed;
  auto [val, rest] = carve_validation(pool, cfg.val_total, derive_seed(cfg.seed, "carve"));
  bundle.val = std::move(val);
  std::size_t n_max = cfg.n_max;
  if (n_max == 0) {
    n_max = rest.size();
    for (const auto& cls : rest.per_class) n_max = std::min(n_max, cls.size());
  }
  bundle.train =
      make_longtail(rest, {10, n_max, cfg.rho, derive_seed(cfg.seed, "longtail")});
  bundle.class_counts = bundle.train.class_histogram();
  if (!cfg.test_file.empty())
    bundle.test = load_cifar10_binary(cfg.test_file, cfg.normalization);
  else
    bundle.test = bundle.val;
  return bundle;
}

void save_bundle(const std::string& dir, const DatasetBundle& bundle) {
  fs::create_directories(dir);
  save_dataset((fs::path(dir) / "train").string(), bundle.train);
  save_dataset((fs::path(dir) / "val").string(), bundle.val);
  save_dataset((fs::path(dir) / "test").string(), bundle.test);
  ordered_json j;
  j["schema_version"] = kCheckpointSchemaVersion;
  j["kind"] = "dataset_bundle";
  j["source"] = bundle.source;
  j["rho"] = bundle.rho;
  j["seed"] = bundle.seed;
  j["class_counts"] = bundle.class_counts;
  char digest[20];
  for (const char* split : {"train", "val", "test"}) {
    const auto& ds = split == std::string("train")
                         ? bundle.train
                         : (split == std::string("val") ? bundle.val : bundle.test);
    std::snprintf(digest, sizeof(digest), "%016llx",
                  static_cast<unsigned long long>(dataset_digest(ds)));
    j[std::string(split) + "_digest"] = digest;
  }
  write_text((fs::path(dir) / "manifest.json").string(), j.dump(2) + "\n");
}

DatasetBundle load_bundle(const std::string& dir) {
  const auto manifest_path = (fs::path(dir) / "manifest.json").string();
  ordered_json j;
  try {
    j = ordered_json::parse(read_text(manifest_path));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("dataset bundle: bad manifest '" + manifest_path +
                      "': " + e.what());
  }
  if (j.value("kind", "") != "dataset_bundle")
    throw FormatError("dataset bundle: '" + dir + "' is not a bundle directory");
  DatasetBundle bundle;
  bundle.source = j.value("source", "");
  bundle.rho = j.value("rho", 1.0);
  bundle.seed = j.value("seed", std::uint64_t{0});
  bundle.class_counts = j.value("class_counts", std::vector<std::size_t>{});
  bundle.train = load_dataset((fs::path(dir) / "train").string());
  bundle.val = load_dataset((fs::path(dir) / "val").string());
  bundle.test = load_dataset((fs::path(dir) / "test").string());
  return bundle;
}

BackboneSpec ExperimentConfig::backbone_spec() const {
  if (backbone == "mlp") {
    MlpSpec spec;
    spec.layer_widths = model_widths;
    spec.hidden_activation = activation_from_name(hidden_activation);
    spec.validate();
    return spec;
  }
  TinyCnnSpec spec = cnn;
  spec.validate();
  return spec;
}

void ExperimentConfig::validate() const {
  if (method != "ce" && method != "kd" && method != "bikd")
    throw ValueError("config: method must be ce, kd or bikd, got '" + method + "'");
  if (precision != "f32" && precision != "f64")
    throw ValueError("config: precision must be f32 or f64, got '" + precision + "'");
  if (backbone != "mlp" && backbone != "tiny_cnn")
    throw ValueError("config: backbone must be mlp or tiny_cnn, got '" + backbone +
                     "'");
  if (dataset_dir.empty()) throw ValueError("config: dataset is required");
  if (output_dir.empty()) throw ValueError("config: output directory is required");
  if ((method == "kd" || method == "bikd") && teacher_checkpoint.empty())
    throw ValueError("config: method '" + method + "' requires a teacher checkpoint");
  if (backbone == "mlp" && model_widths.size() < 2)
    throw ValueError("config: model widths need at least input and output");
  backbone_spec();
  train.validate();
  KdConfig{train.temperature, train.alpha}.validate();
}

ExperimentConfig config_from_json_text(const std::string& text) {
  ordered_json j;
  try {
    j = ordered_json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("config: invalid json: ") + e.what());
  }
  check_keys(j,
             {"method", "precision", "dataset", "teacher", "output", "seed", "model",
              "meta", "train"},
             "top level");
  ExperimentConfig cfg;
  cfg.method = j.value("method", cfg.method);
  cfg.precision = j.value("precision", cfg.precision);
  cfg.dataset_dir = j.value("dataset", cfg.dataset_dir);
  cfg.teacher_checkpoint = j.value("teacher", cfg.teacher_checkpoint);
  cfg.output_dir = j.value("output", cfg.output_dir);
  cfg.seed = j.value("seed", cfg.seed);
  if (j.contains("model")) {
    const auto& m = j.at("model");
    check_keys(m, {"backbone", "widths", "activation", "cnn"}, "model");
    cfg.backbone = m.value("backbone", cfg.backbone);
    cfg.model_widths = m.value("widths", cfg.model_widths);
    cfg.hidden_activation = m.value("activation", cfg.hidden_activation);
    if (m.contains("cnn")) {
      const auto& c = m.at("cnn");
      check_keys(c,
                 {"in_channels", "image_size", "channels", "kernel_sizes",
                  "pool_after", "classifier_width", "num_classes"},
                 "model.cnn");
      cfg.cnn.in_channels = c.value("in_channels", cfg.cnn.in_channels);
      cfg.cnn.image_size = c.value("image_size", cfg.cnn.image_size);
      cfg.cnn.channels = c.value("channels", cfg.cnn.channels);
      cfg.cnn.kernel_sizes = c.value("kernel_sizes", cfg.cnn.kernel_sizes);
      if (c.contains("pool_after")) {
        cfg.cnn.pool_after.clear();
        for (int p : c.at("pool_after").get<std::vector<int>>())
          cfg.cnn.pool_after.push_back(p != 0);
      }
      cfg.cnn.classifier_width = c.value("classifier_width", cfg.cnn.classifier_width);
      cfg.cnn.num_classes = c.value("num_classes", cfg.cnn.num_classes);
    }
  }
  if (j.contains("meta")) {
    const auto& m = j.at("meta");
    check_keys(m, {"hidden_width", "input_clip"}, "meta");
    cfg.meta_hidden = m.value("hidden_width", cfg.meta_hidden);
    cfg.meta_input_clip = m.value("input_clip", cfg.meta_input_clip);
  }
  if (j.contains("train")) {
    const auto& t = j.at("train");
    check_keys(t,
               {"student_lr", "meta_lr", "inner_steps", "temperature", "epochs",
                "lr_decay_epochs", "lr_decay_factor", "momentum", "weight_decay",
                "batch_size", "val_batch_size", "meta_optimizer", "strict_window",
                "scale_meta_grad_by_window", "virtual_momentum", "alpha"},
               "train");
    auto& tc = cfg.train;
    tc.student_lr = t.value("student_lr", tc.student_lr);
    tc.meta_lr = t.value("meta_lr", tc.meta_lr);
    tc.inner_steps = t.value("inner_steps", tc.inner_steps);
    tc.temperature = t.value("temperature", tc.temperature);
    tc.epochs = t.value("epochs", tc.epochs);
    tc.lr_decay_epochs = t.value("lr_decay_epochs", tc.lr_decay_epochs);
    tc.lr_decay_factor = t.value("lr_decay_factor", tc.lr_decay_factor);
    tc.momentum = t.value("momentum", tc.momentum);
    tc.weight_decay = t.value("weight_decay", tc.weight_decay);
    tc.batch_size = t.value("batch_size", tc.batch_size);
    tc.val_batch_size = t.value("val_batch_size", tc.val_batch_size);
    const std::string opt = t.value("meta_optimizer", std::string("adam"));
    if (opt == "adam")
      tc.meta_optimizer = MetaOptimizer::Adam;
    else if (opt == "sgd")
      tc.meta_optimizer = MetaOptimizer::Sgd;
    else
      throw ValueError("config: meta_optimizer must be adam or sgd");
    tc.strict_window = t.value("strict_window", tc.strict_window);
    tc.scale_meta_grad_by_window =
        t.value("scale_meta_grad_by_window", tc.scale_meta_grad_by_window);
    tc.virtual_momentum = t.value("virtual_momentum", tc.virtual_momentum);
    tc.alpha = t.value("alpha", tc.alpha);
  }
  return cfg;
}

std::string config_to_json_text(const ExperimentConfig& cfg) {
  ordered_json j;
  j["method"] = cfg.method;
  j["precision"] = cfg.precision;
  j["dataset"] = cfg.dataset_dir;
  j["teacher"] = cfg.teacher_checkpoint;
  j["output"] = cfg.output_dir;
  j["seed"] = cfg.seed;
  ordered_json model;
  model["backbone"] = cfg.backbone;
  model["widths"] = cfg.model_widths;
  model["activation"] = cfg.hidden_activation;
  if (cfg.backbone == "tiny_cnn") {
    ordered_json c;
    c["in_channels"] = cfg.cnn.in_channels;
    c["image_size"] = cfg.cnn.image_size;
    c["channels"] = cfg.cnn.channels;
    c["kernel_sizes"] = cfg.cnn.kernel_sizes;
    std::vector<int> pools;
    for (bool p : cfg.cnn.pool_after) pools.push_back(p ? 1 : 0);
    c["pool_after"] = pools;
    c["classifier_width"] = cfg.cnn.classifier_width;
    c["num_classes"] = cfg.cnn.num_classes;
    model["cnn"] = c;
  }
  j["model"] = model;
  j["meta"] = {{"hidden_width", cfg.meta_hidden}, {"input_clip", cfg.meta_input_clip}};
  ordered_json t;
  t["student_lr"] = cfg.train.student_lr;
  t["meta_lr"] = cfg.train.meta_lr;
  t["inner_steps"] = cfg.train.inner_steps;
  t["temperature"] = cfg.train.temperature;
  t["epochs"] = cfg.train.epochs;
  t["lr_decay_epochs"] = cfg.train.lr_decay_epochs;
  t["lr_decay_factor"] = cfg.train.lr_decay_factor;
  t["momentum"] = cfg.train.momentum;
  t["weight_decay"] = cfg.train.weight_decay;
  t["batch_size"] = cfg.train.batch_size;
  t["val_batch_size"] = cfg.train.val_batch_size;
  t["meta_optimizer"] =
      cfg.train.meta_optimizer == MetaOptimizer::Adam ? "adam" : "sgd";
  t["strict_window"] = cfg.train.strict_window;
  t["scale_meta_grad_by_window"] = cfg.train.scale_meta_grad_by_window;
  t["virtual_momentum"] = cfg.train.virtual_momentum;
  t["alpha"] = cfg.train.alpha;
  j["train"] = t;
  return j.dump(2) + "\n";
}

namespace {

template <class T>
RunLog run_experiment_typed(const ExperimentConfig& cfg, const DatasetBundle& bundle) {
  const BackboneSpec model_spec = cfg.backbone_spec();
  if (backbone_input_dim(model_spec) != bundle.train.feature_dim)
    throw ValueError("config: model input dim " +
                     std::to_string(backbone_input_dim(model_spec)) +
                     " does not match dataset feature dim " +
                     std::to_string(bundle.train.feature_dim));
  if (backbone_output_dim(model_spec) != bundle.train.num_classes)
    throw ValueError("config: model output width does not match class count");

  TrainConfig tc = cfg.train;
  tc.seed = cfg.seed;
  ModelState<T> init =
      init_params<T>(model_spec, derive_seed(cfg.seed, "init/student"));
  const fs::path out(cfg.output_dir);

  RunLog log;
  if (cfg.method == "ce") {
    auto result = train_ce<T>(tc, model_spec, std::move(init), bundle.train,
                              bundle.val);
    save_model((out / "model").string(), model_spec, result.model, cfg.seed);
    log = std::move(result.log);
  } else {
    const auto teacher = load_model<T>(cfg.teacher_checkpoint);
    if (cfg.method == "kd") {
      auto result = train_vanilla_kd<T>(tc, model_spec, std::move(init), teacher.spec,
                                        teacher.state, bundle.train, bundle.val);
      save_model((out / "model").string(), model_spec, result.model, cfg.seed);
      log = std::move(result.log);
    } else {
      MetaNetSpec meta_spec;
      meta_spec.hidden_width = cfg.meta_hidden;
      meta_spec.input_clip = cfg.meta_input_clip;
      ModelState<T> meta =
          init_meta_params<T>(meta_spec, derive_seed(cfg.seed, "init/meta"));
      BilevelTrainer<T> trainer(tc, model_spec, std::move(init), meta_spec,
                                std::move(meta), teacher.spec, teacher.state,
                                bundle.train, bundle.val);
      log = trainer.fit();
      save_model((out / "model").string(), model_spec, trainer.student(), cfg.seed);
      save_model((out / "meta").string(), BackboneSpec{meta_spec.as_mlp()},
                 trainer.meta(), cfg.seed);
    }
  }
  write_runlog_csv(log, (out / "runlog.csv").string());
  return log;
}

}  // namespace

RunLog run_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  const DatasetBundle bundle = load_bundle(cfg.dataset_dir);
  fs::create_directories(cfg.output_dir);

  // Manifest first: config, dataset digests, code version. No timestamps, so
  // identical runs rewrite identical bytes.
  ordered_json manifest;
  manifest["schema_version"] = kCheckpointSchemaVersion;
  manifest["kind"] = "run";
  manifest["code_version"] = kCodeVersion;
  manifest["config"] = ordered_json::parse(config_to_json_text(cfg));
  manifest["class_counts"] = bundle.class_counts;
  char digest[20];
  std::snprintf(digest, sizeof(digest), "%016llx",
                static_cast<unsigned long long>(dataset_digest(bundle.train)));
  manifest["train_digest"] = digest;
  std::snprintf(digest, sizeof(digest), "%016llx",
                static_cast<unsigned long long>(dataset_digest(bundle.val)));
  manifest["val_digest"] = digest;
  write_text((fs::path(cfg.output_dir) / "manifest.json").string(),
             manifest.dump(2) + "\n");

  if (cfg.precision == "f64") return run_experiment_typed<double>(cfg, bundle);
  return run_experiment_typed<float>(cfg, bundle);
}

namespace {

ExperimentConfig config_from_run_dir(const std::string& run_dir) {
  const auto manifest_path = (fs::path(run_dir) / "manifest.json").string();
  ordered_json manifest;
  try {
    manifest = ordered_json::parse(read_text(manifest_path));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("run dir: bad manifest '" + manifest_path + "': " + e.what());
  }
  if (manifest.value("kind", "") != "run")
    throw FormatError("run dir: '" + run_dir + "' has no run manifest");
  return config_from_json_text(manifest.at("config").dump());
}

template <class T>
Metrics eval_typed(const ExperimentConfig& cfg, const std::string& run_dir) {
  const DatasetBundle bundle = load_bundle(cfg.dataset_dir);
  const auto model = load_model<T>((fs::path(run_dir) / "model").string());
  return evaluate(model.spec, model.state, bundle.test, &bundle.class_counts);
}

}  // namespace

Metrics run_eval(const std::string& run_dir) {
  const ExperimentConfig cfg = config_from_run_dir(run_dir);
  const auto model_stem = (fs::path(run_dir) / "model").string();
  if (!fs::exists(model_stem + ".json"))
    throw FormatError("run dir: missing artifact 'model.json' in '" + run_dir + "'");
  Metrics m = cfg.precision == "f64" ? eval_typed<double>(cfg, run_dir)
                                     : eval_typed<float>(cfg, run_dir);

  std::ostringstream metrics;
  metrics << "metric,value\n";
  metrics << "overall_accuracy," << fmt_double(m.overall_accuracy) << "\n";
  for (std::size_t c = 0; c < m.per_class_accuracy.size(); ++c)
    metrics << "acc_class" << c << "," << fmt_double(m.per_class_accuracy[c]) << "\n";
  if (m.head_accuracy)
    metrics << "head_accuracy," << fmt_double(*m.head_accuracy) << "\n";
  if (m.tail_accuracy)
    metrics << "tail_accuracy," << fmt_double(*m.tail_accuracy) << "\n";
  if (!m.is_head.empty()) {
    metrics << "head_tail_rule,train_count_at_least_median\n";
    metrics << "head_classes,";
    bool first = true;
    for (std::size_t c = 0; c < m.is_head.size(); ++c)
      if (m.is_head[c]) {
        if (!first) metrics << '|';
        metrics << c;
        first = false;
      }
    metrics << "\n";
  }
  write_text((fs::path(run_dir) / "metrics.csv").string(), metrics.str());

  std::ostringstream confusion;
  for (std::size_t t = 0; t < m.confusion.num_classes; ++t) {
    for (std::size_t p = 0; p < m.confusion.num_classes; ++p) {
      if (p) confusion << ',';
      confusion << m.confusion.at(t, p);
    }
    confusion << '\n';
  }
  write_text((fs::path(run_dir) / "confusion.csv").string(), confusion.str());
  return m;
}

namespace {

template <class T>
std::size_t export_typed(const ExperimentConfig& cfg, const std::string& run_dir) {
  const DatasetBundle bundle = load_bundle(cfg.dataset_dir);
  const auto student = load_model<T>((fs::path(run_dir) / "model").string());
  const auto meta = load_model<T>((fs::path(run_dir) / "meta").string());
  const auto teacher = load_model<T>(cfg.teacher_checkpoint);
  MetaNetSpec meta_spec;
  meta_spec.hidden_width = cfg.meta_hidden;
  meta_spec.input_clip = cfg.meta_input_clip;
  const auto records =
      export_weight_scatter(meta_spec, meta.state, teacher.spec, teacher.state,
                            student.spec, student.state, bundle.train);
  std::ostringstream os;
  os << "ce_teacher,ce_student,w_hard,w_soft,class\n";
  for (const auto& r : records)
    os << fmt_double(r.ce_teacher) << ',' << fmt_double(r.ce_student) << ','
       << fmt_double(r.w_hard) << ',' << fmt_double(r.w_soft) << ','
       << r.class_index << '\n';
  write_text((fs::path(run_dir) / "weight_scatter.csv").string(), os.str());
  return records.size();
}

}  // namespace

std::size_t run_export(const std::string& run_dir) {
  const ExperimentConfig cfg = config_from_run_dir(run_dir);
  if (cfg.method != "bikd")
    throw FormatError("run dir: weight export needs a bilevel run, got method '" +
                      cfg.method + "'");
  if (!fs::exists((fs::path(run_dir) / "meta.json")))
    throw FormatError("run dir: missing artifact 'meta.json' in '" + run_dir + "'");
  return cfg.precision == "f64" ? export_typed<double>(cfg, run_dir)
                                : export_typed<float>(cfg, run_dir);
}

}  // namespace bikd
