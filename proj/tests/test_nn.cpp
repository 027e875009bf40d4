#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "bikd/checkpoint.hpp"
#include "bikd/nn.hpp"
#include "support/gradcheck.hpp"

using namespace bikd;
using bikd::testing::gradcheck_max_rel_err;

namespace {

MlpSpec small_mlp() {
  MlpSpec spec;
  spec.layer_widths = {3, 4, 2};
  spec.hidden_activation = Activation::Tanh;
  return spec;
}

}  // namespace

TEST_CASE("zero parameters give zero logits") {
  const MlpSpec spec = small_mlp();
  ModelState<double> state = init_params<double>(spec, 1);
  for (auto& p : state.params) std::fill(p.value.begin(), p.value.end(), 0.0);
  const auto logits = backbone_logits(BackboneSpec{spec}, state, {1.0, -2.0, 3.0}, 1);
  for (double v : logits) CHECK(v == 0.0);
}

TEST_CASE("meta net with zero parameters outputs (0.5, 0.5)") {
  MetaNetSpec meta;
  meta.hidden_width = 8;
  ModelState<double> state = init_meta_params<double>(meta, 3);
  for (auto& p : state.params) std::fill(p.value.begin(), p.value.end(), 0.0);
  Tape<double> tape;
  auto params = bind_params(state, false);
  Tensor<double> in = Tensor<double>::leaf({2, 2}, {0.3, 1.7, 24.0, 3.0});
  const auto w = meta_forward(tape, meta, std::span<const Tensor<double>>(params), in)
                     .values();
  for (double v : w) CHECK(v == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("meta net outputs stay strictly inside (0,1) for loss pairs in [0,50]") {
  MetaNetSpec meta;
  meta.hidden_width = 16;
  for (std::uint64_t seed : {1ULL, 2ULL, 3ULL}) {
    ModelState<double> state = init_meta_params<double>(meta, seed);
    Tape<double> tape;
    auto params = bind_params(state, false);
    std::vector<double> pairs;
    for (double a : {0.0, 0.1, 1.0, 10.0, 50.0})
      for (double b : {0.0, 0.5, 5.0, 50.0}) {
        pairs.push_back(a);
        pairs.push_back(b);
      }
    Tensor<double> in = Tensor<double>::leaf({pairs.size() / 2, 2}, pairs);
    const auto w =
        meta_forward(tape, meta, std::span<const Tensor<double>>(params), in).values();
    for (double v : w) {
      CHECK(v > 0.0);
      CHECK(v < 1.0);
    }
  }
}

TEST_CASE("meta net maps rows independently") {
  MetaNetSpec meta;
  meta.hidden_width = 8;
  ModelState<double> state = init_meta_params<double>(meta, 9);
  Tape<double> tape;
  auto params = bind_params(state, false);
  Tensor<double> both = Tensor<double>::leaf({2, 2}, {1.0, 2.0, 3.0, 4.0});
  Tensor<double> first = Tensor<double>::leaf({1, 2}, {1.0, 2.0});
  const auto wb =
      meta_forward(tape, meta, std::span<const Tensor<double>>(params), both).values();
  const auto wf =
      meta_forward(tape, meta, std::span<const Tensor<double>>(params), first).values();
  CHECK(wb[0] == wf[0]);
  CHECK(wb[1] == wf[1]);
}

TEST_CASE("gradcheck: 2-layer MLP logits w.r.t. parameters") {
  const MlpSpec spec = small_mlp();
  RngStream rng(5, "x");
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    ModelState<double> state = init_params<double>(spec, seed);
    auto leaves = bind_params(state, true);
    Tensor<double> x = bikd::testing::random_tensor({4, 3}, rng);
    Tensor<double> probe = bikd::testing::random_tensor({4, 2}, rng);
    const double err = gradcheck_max_rel_err(
        leaves, [&](Tape<double>& t, const std::vector<Tensor<double>>& v) {
          return t.sum(t.mul(mlp_forward(t, spec, std::span<const Tensor<double>>(v), x),
                             probe));
        });
    CHECK(err < 1e-5);
  }
}

TEST_CASE("gradcheck: tiny cnn logits w.r.t. parameters") {
  TinyCnnSpec spec;
  spec.in_channels = 1;
  spec.image_size = 6;
  spec.channels = {2};
  spec.kernel_sizes = {3};
  spec.pool_after = {true};
  spec.classifier_width = 4;
  spec.num_classes = 3;
  ModelState<double> state = init_params<double>(BackboneSpec{spec}, 7);
  auto leaves = bind_params(state, true);
  RngStream rng(6, "x");
  Tensor<double> x = bikd::testing::random_tensor({2, 36}, rng);
  Tensor<double> probe = bikd::testing::random_tensor({2, 3}, rng);
  const double err = gradcheck_max_rel_err(
      leaves, [&](Tape<double>& t, const std::vector<Tensor<double>>& v) {
        return t.sum(t.mul(
            cnn_forward(t, spec, std::span<const Tensor<double>>(v), x), probe));
      });
  CHECK(err < 1e-5);
}

TEST_CASE("clone isolation and optimizer-slot exclusion") {
  const MlpSpec spec = small_mlp();
  ModelState<double> state = init_params<double>(spec, 11);
  state.sgd_slots.emplace();
  state.sgd_slots->buffers.push_back({1.0, 2.0});

  ModelState<double> clone = clone_state(state);
  clone.params[0].value[0] += 100.0;
  CHECK(state.params[0].value[0] != clone.params[0].value[0]);
  CHECK_FALSE(clone.sgd_slots.has_value());  // virtual step is plain SGD

  ModelState<double> clone2 = clone_state(clone_state(state));
  for (std::size_t p = 0; p < state.params.size(); ++p)
    CHECK(clone2.params[p].value == state.params[p].value);

  ModelState<double> with_slots = clone_state(state, true);
  CHECK(with_slots.sgd_slots.has_value());
}

TEST_CASE("init determinism and seed sensitivity") {
  const MlpSpec spec = small_mlp();
  const auto a = init_params<double>(spec, 42);
  const auto b = init_params<double>(spec, 42);
  const auto c = init_params<double>(spec, 43);
  CHECK(a.params[0].value == b.params[0].value);
  CHECK(a.params[0].value != c.params[0].value);
}

TEST_CASE("init scaling matches Xavier target for a 256-fan-in tanh layer") {
  MlpSpec spec;
  spec.layer_widths = {256, 64, 8};
  spec.hidden_activation = Activation::Tanh;
  const double target = std::sqrt(2.0 / (256.0 + 64.0));
  double sq_sum = 0.0;
  std::size_t n = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto state = init_params<double>(spec, seed);
    for (double v : state.params[0].value) {
      sq_sum += v * v;
      ++n;
    }
  }
  const double stddev = std::sqrt(sq_sum / static_cast<double>(n));
  CHECK(stddev == doctest::Approx(target).epsilon(0.2));
}

TEST_CASE("he scaling for relu layers") {
  MlpSpec spec;
  spec.layer_widths = {128, 64, 8};
  spec.hidden_activation = Activation::Relu;
  const auto state = init_params<double>(spec, 0);
  double sq_sum = 0.0;
  for (double v : state.params[0].value) sq_sum += v * v;
  const double stddev = std::sqrt(sq_sum / static_cast<double>(state.params[0].numel()));
  CHECK(stddev == doctest::Approx(std::sqrt(2.0 / 128.0)).epsilon(0.2));
}

TEST_CASE("forward is a pure function of parameters and input") {
  const MlpSpec spec = small_mlp();
  const ModelState<double> state = init_params<double>(spec, 3);
  const std::vector<double> x = {0.5, -0.25, 1.5};
  const auto a = backbone_logits(BackboneSpec{spec}, state, x, 1);
  const auto b = backbone_logits(BackboneSpec{spec}, state, x, 1);
  CHECK(a == b);
}

TEST_CASE("mlp trace logits agree bitwise with the tape forward") {
  const MlpSpec spec = small_mlp();
  const ModelState<double> state = init_params<double>(spec, 13);
  RngStream rng(2, "x");
  std::vector<double> x(5 * 3);
  for (auto& v : x) v = rng.normal();
  const auto tape_logits = backbone_logits(BackboneSpec{spec}, state, x, 5);
  const auto trace = mlp_trace(spec, state, x, 5);
  CHECK(trace.logits == tape_logits);
}

TEST_CASE("checkpoint round-trip is bit-exact") {
  namespace fs = std::filesystem;
  const auto dir = fs::temp_directory_path() / "bikd_ckpt_test";
  fs::create_directories(dir);
  const MlpSpec spec = small_mlp();
  ModelState<double> state = init_params<double>(spec, 21);
  state.adam_slots.emplace();
  state.adam_slots->m.push_back({0.125, -3.5});
  state.adam_slots->v.push_back({1e-300, 4.0});
  state.adam_slots->step = 7;

  const std::string stem = (dir / "model").string();
  save_model(stem, BackboneSpec{spec}, state, 21);
  const auto loaded = load_model<double>(stem);
  REQUIRE(loaded.state.params.size() == state.params.size());
  for (std::size_t p = 0; p < state.params.size(); ++p) {
    CHECK(loaded.state.params[p].name == state.params[p].name);
    CHECK(loaded.state.params[p].shape == state.params[p].shape);
    CHECK(loaded.state.params[p].value == state.params[p].value);
  }
  REQUIRE(loaded.state.adam_slots.has_value());
  CHECK(loaded.state.adam_slots->m == state.adam_slots->m);
  CHECK(loaded.state.adam_slots->v == state.adam_slots->v);
  CHECK(loaded.state.adam_slots->step == 7);
  CHECK(loaded.seed == 21);
  CHECK(std::get<MlpSpec>(loaded.spec).layer_widths == spec.layer_widths);
  CHECK(model_dtype(stem) == "f64");
  CHECK_THROWS_AS(load_model<float>(stem), FormatError);
  fs::remove_all(dir);
}
