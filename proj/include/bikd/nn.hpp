#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "bikd/error.hpp"
#include "bikd/rng.hpp"
#include "bikd/tensor.hpp"

namespace bikd {

enum class Activation { Relu, Tanh };

inline const char* activation_name(Activation a) {
  return a == Activation::Relu ? "relu" : "tanh";
}

inline Activation activation_from_name(const std::string& s) {
  if (s == "relu") return Activation::Relu;
  if (s == "tanh") return Activation::Tanh;
  throw ValueError("unknown activation '" + s + "'");
}

// Fully connected backbone: layer_widths = {in, hidden..., out}.
struct MlpSpec {
  std::vector<std::size_t> layer_widths;
  Activation hidden_activation = Activation::Tanh;

  std::size_t num_layers() const { return layer_widths.size() - 1; }

  void validate() const {
    if (layer_widths.size() < 2)
      throw ValueError("mlp spec: need at least 2 layer widths");
    for (std::size_t w : layer_widths)
      if (w == 0) throw ValueError("mlp spec: layer widths must be positive");
  }
};

// Small convolutional backbone: conv blocks (stride-1, optional 2x2 maxpool)
// followed by one hidden linear layer and a classifier head.
struct TinyCnnSpec {
  std::size_t in_channels = 3;
  std::size_t image_size = 32;  // square input
  std::vector<std::size_t> channels;      // output channels per conv block
  std::vector<std::size_t> kernel_sizes;  // per conv block
  std::vector<bool> pool_after;           // 2x2 maxpool after block?
  std::size_t classifier_width = 64;
  std::size_t num_classes = 10;

  void validate() const {
    if (channels.empty() || channels.size() != kernel_sizes.size() ||
        channels.size() != pool_after.size())
      throw ValueError("cnn spec: channels/kernel_sizes/pool_after sizes disagree");
    if (num_classes == 0 || classifier_width == 0)
      throw ValueError("cnn spec: widths must be positive");
  }

  // Spatial size after all conv/pool stages.
  std::size_t final_spatial() const {
    std::size_t s = image_size;
    for (std::size_t i = 0; i < channels.size(); ++i) {
      if (kernel_sizes[i] > s)
        throw ValueError("cnn spec: kernel larger than feature map");
      s = s - kernel_sizes[i] + 1;
      if (pool_after[i]) {
        if (s % 2 != 0)
          throw ValueError("cnn spec: pooled feature map size must be even, got " +
                           std::to_string(s));
        s /= 2;
      }
    }
    return s;
  }

  std::size_t flat_features() const {
    return channels.back() * final_spatial() * final_spatial();
  }
};

using BackboneSpec = std::variant<MlpSpec, TinyCnnSpec>;

inline std::size_t backbone_input_dim(const BackboneSpec& spec) {
  if (const auto* mlp = std::get_if<MlpSpec>(&spec))
    return mlp->layer_widths.front();
  const auto& cnn = std::get<TinyCnnSpec>(spec);
  return cnn.in_channels * cnn.image_size * cnn.image_size;
}

inline std::size_t backbone_output_dim(const BackboneSpec& spec) {
  if (const auto* mlp = std::get_if<MlpSpec>(&spec))
    return mlp->layer_widths.back();
  return std::get<TinyCnnSpec>(spec).num_classes;
}

// Weight-generation network: {B,2} loss pairs -> {B,2} weights in (0,1),
// rows independent. Two tanh hidden layers, sigmoid output.
struct MetaNetSpec {
  std::size_t hidden_width = 64;
  // Optional clipping of the raw loss-pair inputs (0 disables).
  double input_clip = 0.0;

  MlpSpec as_mlp() const {
    MlpSpec m;
    m.layer_widths = {2, hidden_width, hidden_width, 2};
    m.hidden_activation = Activation::Tanh;
    return m;
  }
};

template <class T>
struct ParamTensor {
  std::string name;
  Shape shape;
  std::vector<T> value;

  std::size_t numel() const { return value.size(); }
};

template <class T>
struct SgdMomentumState {
  std::vector<std::vector<T>> buffers;  // one per parameter, same shapes
};

template <class T>
struct AdamState {
  std::vector<std::vector<T>> m, v;
  std::int64_t step = 0;
};

// Named parameter list plus optional optimizer slots. A plain value type:
// copying it is a deep copy, so clones never alias the original.
template <class T>
struct ModelState {
  std::vector<ParamTensor<T>> params;
  std::optional<SgdMomentumState<T>> sgd_slots;
  std::optional<AdamState<T>> adam_slots;

  std::size_t total_params() const {
    std::size_t n = 0;
    for (const auto& p : params) n += p.numel();
    return n;
  }

  std::vector<T> flatten() const {
    std::vector<T> flat;
    flat.reserve(total_params());
    for (const auto& p : params) flat.insert(flat.end(), p.value.begin(), p.value.end());
    return flat;
  }

  void unflatten(std::span<const T> flat) {
    std::size_t off = 0;
    for (auto& p : params) {
      std::copy(flat.begin() + off, flat.begin() + off + p.numel(), p.value.begin());
      off += p.numel();
    }
  }
};

// Deep copy of the parameters only. The virtual student takes plain SGD
// steps, so optimizer slots are dropped unless explicitly requested.
template <class T>
ModelState<T> clone_state(const ModelState<T>& model, bool include_optimizer_state = false) {
  ModelState<T> out;
  out.params = model.params;
  if (include_optimizer_state) {
    out.sgd_slots = model.sgd_slots;
    out.adam_slots = model.adam_slots;
  }
  return out;
}

namespace detail {

template <class T>
ParamTensor<T> init_linear_weight(const std::string& name, std::size_t fan_in,
                                  std::size_t fan_out, Activation act_after,
                                  RngStream& rng) {
  double std_dev;
  if (act_after == Activation::Relu)
    std_dev = std::sqrt(2.0 / static_cast<double>(fan_in));
  else
    std_dev = std::sqrt(2.0 / static_cast<double>(fan_in + fan_out));
  std::vector<T> w(fan_in * fan_out);
  for (auto& v : w) v = static_cast<T>(rng.normal() * std_dev);
  return {name, {fan_in, fan_out}, std::move(w)};
}

}  // namespace detail

// He scaling before relu, Xavier before tanh/sigmoid/linear; zero biases.
// Deterministic: each parameter draws from its own named stream.
template <class T>
ModelState<T> init_params(const MlpSpec& spec, std::uint64_t seed) {
  spec.validate();
  ModelState<T> state;
  const std::size_t L = spec.num_layers();
  for (std::size_t l = 0; l < L; ++l) {
    const std::size_t fan_in = spec.layer_widths[l];
    const std::size_t fan_out = spec.layer_widths[l + 1];
    const bool hidden = l + 1 < L;
    const Activation act = hidden ? spec.hidden_activation : Activation::Tanh;
    const std::string wname = "w" + std::to_string(l);
    RngStream rng(seed, "init/" + wname);
    state.params.push_back(
        detail::init_linear_weight<T>(wname, fan_in, fan_out, act, rng));
    state.params.push_back(
        {"b" + std::to_string(l), {fan_out}, std::vector<T>(fan_out, T(0))});
  }
  return state;
}

template <class T>
ModelState<T> init_params(const TinyCnnSpec& spec, std::uint64_t seed) {
  spec.validate();
  spec.final_spatial();  // validates feature-map arithmetic
  ModelState<T> state;
  std::size_t cin = spec.in_channels;
  for (std::size_t i = 0; i < spec.channels.size(); ++i) {
    const std::size_t cout = spec.channels[i], k = spec.kernel_sizes[i];
    const std::size_t fan_in = cin * k * k;
    const std::string kname = "conv" + std::to_string(i) + "_k";
    RngStream rng(seed, "init/" + kname);
    const double std_dev = std::sqrt(2.0 / static_cast<double>(fan_in));  // relu blocks
    std::vector<T> w(cout * cin * k * k);
    for (auto& v : w) v = static_cast<T>(rng.normal() * std_dev);
    state.params.push_back({kname, {cout, cin, k, k}, std::move(w)});
    state.params.push_back({"conv" + std::to_string(i) + "_b",
                            {cout},
                            std::vector<T>(cout, T(0))});
    cin = cout;
  }
  const std::size_t flat = spec.flat_features();
  {
    RngStream rng(seed, "init/fc0_w");
    state.params.push_back(detail::init_linear_weight<T>(
        "fc0_w", flat, spec.classifier_width, Activation::Relu, rng));
    state.params.push_back({"fc0_b",
                            {spec.classifier_width},
                            std::vector<T>(spec.classifier_width, T(0))});
  }
  {
    RngStream rng(seed, "init/fc1_w");
    state.params.push_back(detail::init_linear_weight<T>(
        "fc1_w", spec.classifier_width, spec.num_classes, Activation::Tanh, rng));
    state.params.push_back(
        {"fc1_b", {spec.num_classes}, std::vector<T>(spec.num_classes, T(0))});
  }
  return state;
}

template <class T>
ModelState<T> init_params(const BackboneSpec& spec, std::uint64_t seed) {
  return std::visit([&](const auto& s) { return init_params<T>(s, seed); }, spec);
}

template <class T>
ModelState<T> init_meta_params(const MetaNetSpec& spec, std::uint64_t seed) {
  return init_params<T>(spec.as_mlp(), seed);
}

// Bind state parameters as leaf tensors (one per parameter, same order).
template <class T>
std::vector<Tensor<T>> bind_params(const ModelState<T>& state, bool requires_grad) {
  std::vector<Tensor<T>> out;
  out.reserve(state.params.size());
  for (const auto& p : state.params)
    out.push_back(Tensor<T>::leaf(p.shape, p.value, requires_grad));
  return out;
}

template <class T>
std::vector<std::vector<T>> collect_grads(std::span<const Tensor<T>> bound) {
  std::vector<std::vector<T>> grads;
  grads.reserve(bound.size());
  for (const auto& t : bound) grads.push_back(t.grad());
  return grads;
}

template <class T>
Tensor<T> mlp_forward(Tape<T>& tape, const MlpSpec& spec,
                      std::span<const Tensor<T>> params, const Tensor<T>& x) {
  if (x.rank() != 2 || x.dim(1) != spec.layer_widths.front())
    throw ShapeError("mlp_forward: input " + shape_str(x.shape()) +
                     " does not match input width " +
                     std::to_string(spec.layer_widths.front()));
  const std::size_t L = spec.num_layers();
  if (params.size() != 2 * L)
    throw ShapeError("mlp_forward: expected " + std::to_string(2 * L) +
                     " parameter tensors, got " + std::to_string(params.size()));
  Tensor<T> h = x;
  for (std::size_t l = 0; l < L; ++l) {
    Tensor<T> z = tape.add_rowvec(tape.matmul(h, params[2 * l]), params[2 * l + 1]);
    if (l + 1 < L)
      h = spec.hidden_activation == Activation::Relu ? tape.relu(z) : tape.tanh(z);
    else
      h = z;
  }
  return h;
}

template <class T>
Tensor<T> cnn_forward(Tape<T>& tape, const TinyCnnSpec& spec,
                      std::span<const Tensor<T>> params, const Tensor<T>& x_flat) {
  const std::size_t d = spec.in_channels * spec.image_size * spec.image_size;
  if (x_flat.rank() != 2 || x_flat.dim(1) != d)
    throw ShapeError("cnn_forward: input " + shape_str(x_flat.shape()) +
                     " does not match flattened image size " + std::to_string(d));
  const std::size_t B = x_flat.dim(0);
  Tensor<T> h =
      tape.reshape(x_flat, {B, spec.in_channels, spec.image_size, spec.image_size});
  std::size_t p = 0;
  for (std::size_t i = 0; i < spec.channels.size(); ++i) {
    h = tape.relu(tape.conv2d(h, params[p], params[p + 1]));
    p += 2;
    if (spec.pool_after[i]) h = tape.maxpool2(h);
  }
  h = tape.reshape(h, {B, spec.flat_features()});
  h = tape.relu(tape.add_rowvec(tape.matmul(h, params[p]), params[p + 1]));
  p += 2;
  return tape.add_rowvec(tape.matmul(h, params[p]), params[p + 1]);
}

// Logits for a batch, differentiable w.r.t. whatever the caller bound.
template <class T>
Tensor<T> backbone_forward(Tape<T>& tape, const BackboneSpec& spec,
                           std::span<const Tensor<T>> params, const Tensor<T>& x) {
  if (const auto* mlp = std::get_if<MlpSpec>(&spec))
    return mlp_forward(tape, *mlp, params, x);
  return cnn_forward(tape, std::get<TinyCnnSpec>(spec), params, x);
}

// Convenience: plain logits without gradient tracking.
template <class T>
std::vector<T> backbone_logits(const BackboneSpec& spec, const ModelState<T>& state,
                               const std::vector<T>& x, std::size_t batch) {
  Tape<T> tape;
  tape.set_recording(false);
  auto params = bind_params(state, false);
  Tensor<T> xt = Tensor<T>::leaf({batch, x.size() / batch}, x, false);
  return backbone_forward<T>(tape, spec, params, xt).values();
}

// Per-layer intermediates of a no-grad MLP forward, in the exact op order of
// mlp_forward: activations[l] is the input to layer l (activations[0] = x),
// act_deriv[l] is the activation derivative at hidden layer l's output.
template <class T>
struct MlpTrace {
  std::vector<std::vector<T>> activations;  // L entries: {B, width_l}
  std::vector<std::vector<T>> act_deriv;    // L-1 entries: {B, width_{l+1}}
  std::vector<T> logits;                    // {B, out}
  std::size_t batch = 0;
};

template <class T>
MlpTrace<T> mlp_trace(const MlpSpec& spec, const ModelState<T>& state,
                      const std::vector<T>& x, std::size_t batch) {
  const std::size_t L = spec.num_layers();
  MlpTrace<T> tr;
  tr.batch = batch;
  tr.activations.push_back(x);
  std::vector<T> h = x;
  for (std::size_t l = 0; l < L; ++l) {
    const std::size_t in = spec.layer_widths[l], out = spec.layer_widths[l + 1];
    std::vector<T> z(batch * out);
    detail::kernel_matmul(h.data(), state.params[2 * l].value.data(), z.data(),
                          batch, in, out);
    const auto& bias = state.params[2 * l + 1].value;
    for (std::size_t r = 0; r < batch; ++r)
      for (std::size_t c = 0; c < out; ++c) z[r * out + c] += bias[c];
    if (l + 1 < L) {
      std::vector<T> a(z.size()), dz(z.size());
      if (spec.hidden_activation == Activation::Relu) {
        for (std::size_t i = 0; i < z.size(); ++i) {
          a[i] = z[i] > T(0) ? z[i] : T(0);
          dz[i] = z[i] > T(0) ? T(1) : T(0);
        }
      } else {
        for (std::size_t i = 0; i < z.size(); ++i) {
          a[i] = std::tanh(z[i]);
          dz[i] = T(1) - a[i] * a[i];
        }
      }
      tr.act_deriv.push_back(std::move(dz));
      tr.activations.push_back(a);
      h = std::move(a);
    } else {
      tr.logits = std::move(z);
    }
  }
  return tr;
}

// Meta forward: loss_pairs {B,2} (treated as constants) -> weights {B,2},
// clamped strictly inside (0,1).
template <class T>
Tensor<T> meta_forward(Tape<T>& tape, const MetaNetSpec& spec,
                       std::span<const Tensor<T>> params,
                       const Tensor<T>& loss_pairs) {
  Tensor<T> in = loss_pairs;
  if (spec.input_clip > 0.0) {
    FrozenTape<T> frozen(tape);  // inputs are constants; no gradient path
    in = tape.clamp(loss_pairs.detach(), T(0), static_cast<T>(spec.input_clip));
  }
  const MlpSpec mlp = spec.as_mlp();
  Tensor<T> z = mlp_forward(tape, mlp, params, in);
  const T eps = std::numeric_limits<T>::epsilon();
  return tape.clamp(tape.sigmoid(z), eps, T(1) - eps);
}

}  // namespace bikd
