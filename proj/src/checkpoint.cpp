#include "bikd/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <vector>

#include <json.hpp>

#include "bikd/error.hpp"

namespace bikd {

using ordered_json = nlohmann::ordered_json;

// The container format stores raw little-endian scalar arrays.
static_assert(std::endian::native == std::endian::little,
              "checkpoint blobs are little-endian; big-endian hosts need swaps");

namespace {

template <class T>
const char* dtype_name() {
  if constexpr (std::is_same_v<T, float>)
    return "f32";
  else
    return "f64";
}

void write_file(const std::string& path, const void* data, std::size_t len) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("checkpoint: cannot write '" + path + "'");
  out.write(static_cast<const char*>(data), static_cast<std::streamsize>(len));
}

std::vector<char> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("checkpoint: cannot open '" + path + "'");
  in.seekg(0, std::ios::end);
  std::vector<char> buf(static_cast<std::size_t>(in.tellg()));
  in.seekg(0);
  in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!in) throw FormatError("checkpoint: short read from '" + path + "'");
  return buf;
}

ordered_json load_manifest(const std::string& stem) {
  std::ifstream in(stem + ".json");
  if (!in) throw FormatError("checkpoint: cannot open '" + stem + ".json'");
  ordered_json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw FormatError("checkpoint: bad manifest '" + stem + ".json': " + e.what());
  }
  if (j.value("schema_version", -1) != kCheckpointSchemaVersion)
    throw FormatError("checkpoint: unsupported schema version in '" + stem + ".json'");
  return j;
}

ordered_json mlp_to_json(const MlpSpec& spec) {
  ordered_json j;
  j["kind"] = "mlp";
  j["layer_widths"] = spec.layer_widths;
  j["hidden_activation"] = activation_name(spec.hidden_activation);
  return j;
}

ordered_json cnn_to_json(const TinyCnnSpec& spec) {
  ordered_json j;
  j["kind"] = "tiny_cnn";
  j["in_channels"] = spec.in_channels;
  j["image_size"] = spec.image_size;
  j["channels"] = spec.channels;
  j["kernel_sizes"] = spec.kernel_sizes;
  std::vector<int> pools;
  for (bool p : spec.pool_after) pools.push_back(p ? 1 : 0);
  j["pool_after"] = pools;
  j["classifier_width"] = spec.classifier_width;
  j["num_classes"] = spec.num_classes;
  return j;
}

ordered_json spec_to_json(const BackboneSpec& spec) {
  if (const auto* mlp = std::get_if<MlpSpec>(&spec)) return mlp_to_json(*mlp);
  return cnn_to_json(std::get<TinyCnnSpec>(spec));
}

BackboneSpec spec_from_json(const ordered_json& j) {
  const std::string kind = j.value("kind", "");
  if (kind == "mlp") {
    MlpSpec spec;
    spec.layer_widths = j.at("layer_widths").get<std::vector<std::size_t>>();
    spec.hidden_activation =
        activation_from_name(j.at("hidden_activation").get<std::string>());
    spec.validate();
    return spec;
  }
  if (kind == "tiny_cnn") {
    TinyCnnSpec spec;
    spec.in_channels = j.at("in_channels").get<std::size_t>();
    spec.image_size = j.at("image_size").get<std::size_t>();
    spec.channels = j.at("channels").get<std::vector<std::size_t>>();
    spec.kernel_sizes = j.at("kernel_sizes").get<std::vector<std::size_t>>();
    spec.pool_after.clear();
    for (int p : j.at("pool_after").get<std::vector<int>>())
      spec.pool_after.push_back(p != 0);
    spec.classifier_width = j.at("classifier_width").get<std::size_t>();
    spec.num_classes = j.at("num_classes").get<std::size_t>();
    spec.validate();
    return spec;
  }
  throw FormatError("checkpoint: unknown backbone kind '" + kind + "'");
}

}  // namespace

std::string backbone_spec_to_json(const BackboneSpec& spec) {
  return spec_to_json(spec).dump();
}

BackboneSpec backbone_spec_from_json(const std::string& text) {
  try {
    return spec_from_json(ordered_json::parse(text));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("backbone spec: bad json: ") + e.what());
  }
}

template <class T>
void save_model(const std::string& stem, const BackboneSpec& spec,
                const ModelState<T>& state, std::uint64_t seed) {
  ordered_json manifest;
  manifest["schema_version"] = kCheckpointSchemaVersion;
  manifest["kind"] = "model";
  manifest["dtype"] = dtype_name<T>();
  manifest["seed"] = seed;
  manifest["backbone"] = spec_to_json(spec);

  std::vector<char> blob;
  ordered_json params = ordered_json::array();
  auto append_array = [&blob](const std::string& name, const Shape& shape,
                              const std::vector<T>& value, ordered_json& list) {
    ordered_json entry;
    entry["name"] = name;
    entry["shape"] = shape;
    entry["byte_offset"] = blob.size();
    entry["byte_length"] = value.size() * sizeof(T);
    const std::size_t off = blob.size();
    blob.resize(off + value.size() * sizeof(T));
    std::memcpy(blob.data() + off, value.data(), value.size() * sizeof(T));
    list.push_back(entry);
  };
  for (const auto& p : state.params) append_array(p.name, p.shape, p.value, params);
  manifest["params"] = params;

  ordered_json slots = ordered_json::array();
  if (state.sgd_slots) {
    for (std::size_t i = 0; i < state.sgd_slots->buffers.size(); ++i)
      append_array("sgd_momentum/" + state.params[i].name, state.params[i].shape,
                   state.sgd_slots->buffers[i], slots);
  }
  if (state.adam_slots) {
    manifest["adam_step"] = state.adam_slots->step;
    for (std::size_t i = 0; i < state.adam_slots->m.size(); ++i)
      append_array("adam_m/" + state.params[i].name, state.params[i].shape,
                   state.adam_slots->m[i], slots);
    for (std::size_t i = 0; i < state.adam_slots->v.size(); ++i)
      append_array("adam_v/" + state.params[i].name, state.params[i].shape,
                   state.adam_slots->v[i], slots);
  }
  manifest["optimizer_slots"] = slots;

  std::ofstream mout(stem + ".json");
  if (!mout) throw FormatError("checkpoint: cannot write '" + stem + ".json'");
  mout << manifest.dump(2) << '\n';
  write_file(stem + ".bin", blob.data(), blob.size());
}

namespace {

template <class T>
std::vector<T> read_blob_array(const std::vector<char>& blob, const ordered_json& entry) {
  const std::size_t off = entry.at("byte_offset").get<std::size_t>();
  const std::size_t len = entry.at("byte_length").get<std::size_t>();
  if (off + len > blob.size())
    throw FormatError("checkpoint: blob entry out of range");
  if (len % sizeof(T) != 0)
    throw FormatError("checkpoint: blob entry length not a multiple of scalar size");
  std::vector<T> out(len / sizeof(T));
  std::memcpy(out.data(), blob.data() + off, len);
  return out;
}

}  // namespace

template <class T>
LoadedModel<T> load_model(const std::string& stem) {
  const ordered_json manifest = load_manifest(stem);
  if (manifest.value("kind", "") != "model")
    throw FormatError("checkpoint: '" + stem + "' is not a model container");
  if (manifest.value("dtype", "") != dtype_name<T>())
    throw FormatError("checkpoint: dtype mismatch in '" + stem + "': stored " +
                      manifest.value("dtype", "?") + ", requested " + dtype_name<T>());
  const auto blob = read_file(stem + ".bin");

  LoadedModel<T> out;
  out.spec = spec_from_json(manifest.at("backbone"));
  out.seed = manifest.value("seed", std::uint64_t{0});
  for (const auto& entry : manifest.at("params")) {
    ParamTensor<T> p;
    p.name = entry.at("name").get<std::string>();
    p.shape = entry.at("shape").get<Shape>();
    p.value = read_blob_array<T>(blob, entry);
    if (p.value.size() != shape_numel(p.shape))
      throw FormatError("checkpoint: shape/value mismatch for '" + p.name + "'");
    out.state.params.push_back(std::move(p));
  }
  for (const auto& entry : manifest.at("optimizer_slots")) {
    const std::string name = entry.at("name").get<std::string>();
    if (name.rfind("sgd_momentum/", 0) == 0) {
      if (!out.state.sgd_slots) out.state.sgd_slots.emplace();
      out.state.sgd_slots->buffers.push_back(read_blob_array<T>(blob, entry));
    } else if (name.rfind("adam_m/", 0) == 0) {
      if (!out.state.adam_slots) out.state.adam_slots.emplace();
      out.state.adam_slots->m.push_back(read_blob_array<T>(blob, entry));
    } else if (name.rfind("adam_v/", 0) == 0) {
      if (!out.state.adam_slots) out.state.adam_slots.emplace();
      out.state.adam_slots->v.push_back(read_blob_array<T>(blob, entry));
    }
  }
  if (out.state.adam_slots)
    out.state.adam_slots->step = manifest.value("adam_step", std::int64_t{0});
  return out;
}

std::string model_dtype(const std::string& stem) {
  return load_manifest(stem).value("dtype", "");
}

void save_dataset(const std::string& stem, const LabeledDataset& ds) {
  ordered_json manifest;
  manifest["schema_version"] = kCheckpointSchemaVersion;
  manifest["kind"] = "dataset";
  manifest["num_classes"] = ds.num_classes;
  manifest["feature_dim"] = ds.feature_dim;
  manifest["num_samples"] = ds.size();
  manifest["class_counts"] = ds.class_histogram();
  char digest[20];
  std::snprintf(digest, sizeof(digest), "%016llx",
                static_cast<unsigned long long>(dataset_digest(ds)));
  manifest["digest"] = digest;

  std::vector<char> blob(ds.features.size() * sizeof(float) +
                         ds.labels.size() * sizeof(int));
  std::memcpy(blob.data(), ds.features.data(), ds.features.size() * sizeof(float));
  std::memcpy(blob.data() + ds.features.size() * sizeof(float), ds.labels.data(),
              ds.labels.size() * sizeof(int));
  manifest["features"] = {{"dtype", "f32"},
                          {"byte_offset", 0},
                          {"byte_length", ds.features.size() * sizeof(float)}};
  manifest["labels"] = {{"dtype", "i32"},
                        {"byte_offset", ds.features.size() * sizeof(float)},
                        {"byte_length", ds.labels.size() * sizeof(int)}};

  std::ofstream mout(stem + ".json");
  if (!mout) throw FormatError("checkpoint: cannot write '" + stem + ".json'");
  mout << manifest.dump(2) << '\n';
  write_file(stem + ".bin", blob.data(), blob.size());
}

LabeledDataset load_dataset(const std::string& stem) {
  const ordered_json manifest = load_manifest(stem);
  if (manifest.value("kind", "") != "dataset")
    throw FormatError("checkpoint: '" + stem + "' is not a dataset container");
  const auto blob = read_file(stem + ".bin");
  LabeledDataset ds;
  ds.num_classes = manifest.at("num_classes").get<std::size_t>();
  ds.feature_dim = manifest.at("feature_dim").get<std::size_t>();
  {
    const auto& f = manifest.at("features");
    const std::size_t off = f.at("byte_offset").get<std::size_t>();
    const std::size_t len = f.at("byte_length").get<std::size_t>();
    if (off + len > blob.size()) throw FormatError("dataset: features out of range");
    ds.features.resize(len / sizeof(float));
    std::memcpy(ds.features.data(), blob.data() + off, len);
  }
  {
    const auto& l = manifest.at("labels");
    const std::size_t off = l.at("byte_offset").get<std::size_t>();
    const std::size_t len = l.at("byte_length").get<std::size_t>();
    if (off + len > blob.size()) throw FormatError("dataset: labels out of range");
    ds.labels.resize(len / sizeof(int));
    std::memcpy(ds.labels.data(), blob.data() + off, len);
  }
  if (ds.labels.size() * ds.feature_dim != ds.features.size())
    throw FormatError("dataset: feature/label sizes disagree");
  ds.rebuild_index();
  return ds;
}

template void save_model<float>(const std::string&, const BackboneSpec&,
                                const ModelState<float>&, std::uint64_t);
template void save_model<double>(const std::string&, const BackboneSpec&,
                                 const ModelState<double>&, std::uint64_t);
template LoadedModel<float> load_model<float>(const std::string&);
template LoadedModel<double> load_model<double>(const std::string&);

}  // namespace bikd
