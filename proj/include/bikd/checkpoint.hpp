#pragma once

#include <string>

#include "bikd/data.hpp"
#include "bikd/nn.hpp"

namespace bikd {

inline constexpr int kCheckpointSchemaVersion = 1;

// Model checkpoint container: `<stem>.json` manifest (names, shapes, dtype,
// byte offsets, backbone spec, seed, schema version) plus `<stem>.bin`, the
// little-endian scalar arrays concatenated in manifest order. Round-trips
// are bit-exact.
template <class T>
void save_model(const std::string& stem, const BackboneSpec& spec,
                const ModelState<T>& state, std::uint64_t seed);

template <class T>
struct LoadedModel {
  BackboneSpec spec;
  ModelState<T> state;
  std::uint64_t seed = 0;
};

template <class T>
LoadedModel<T> load_model(const std::string& stem);

// Peek at the stored dtype ("f32"/"f64") without loading arrays.
std::string model_dtype(const std::string& stem);

// Dataset container in the same manifest + blob format.
void save_dataset(const std::string& stem, const LabeledDataset& ds);
LabeledDataset load_dataset(const std::string& stem);

// Backbone specs as JSON strings (shared with config parsing).
std::string backbone_spec_to_json(const BackboneSpec& spec);
BackboneSpec backbone_spec_from_json(const std::string& text);

}  // namespace bikd
