#pragma once

// Small randomized fixtures shared by the bilevel tests and the acceptance
// suite: an MLP student/teacher pair on Gaussian-mixture data plus a meta net.

#include <numeric>
#include <vector>

#include "bikd/bilevel.hpp"
#include "bikd/data.hpp"
#include "bikd/trainer.hpp"

namespace bikd::testing {

struct BilevelFixture {
  MlpSpec student_spec;
  MlpSpec teacher_spec;
  MetaNetSpec meta_spec;
  ModelState<double> student;
  ModelState<double> teacher;
  ModelState<double> meta;
  LabeledDataset train;
  LabeledDataset val;
  std::vector<Batch<double>> train_batches;
  std::vector<Batch<double>> val_batches;
};

// `steps` batches of each kind, teacher logits pre-filled.
inline BilevelFixture make_fixture(std::uint64_t seed, std::size_t steps,
                                   std::size_t batch_size = 8,
                                   std::size_t meta_hidden = 8,
                                   std::vector<std::size_t> student_widths = {6, 10, 4}) {
  BilevelFixture fx;
  const std::size_t d = student_widths.front();
  const std::size_t C = student_widths.back();
  fx.student_spec.layer_widths = std::move(student_widths);
  fx.student_spec.hidden_activation = Activation::Tanh;
  fx.teacher_spec.layer_widths = {d, 16, C};
  fx.teacher_spec.hidden_activation = Activation::Tanh;
  fx.meta_spec.hidden_width = meta_hidden;

  fx.student = init_params<double>(fx.student_spec, seed + 1);
  fx.teacher = init_params<double>(fx.teacher_spec, seed + 2);
  fx.meta = init_meta_params<double>(fx.meta_spec, seed + 3);
  // Break the zero-bias symmetry of the fresh meta net so dw/dphi is generic.
  {
    RngStream rng(seed + 4, "meta-perturb");
    for (auto& p : fx.meta.params)
      for (auto& v : p.value) v += 0.05 * rng.normal();
  }

  GaussianMixSpec mix;
  mix.num_classes = C;
  mix.dim = d;
  mix.means = random_class_means(C, d, 2.0, seed + 5);
  mix.sigma = 1.0;
  mix.samples_per_class = std::max<std::size_t>(batch_size * (steps + 2) / C + 2, 8);
  mix.seed = seed + 6;
  fx.train = gen_gaussian_mix(mix);
  mix.seed = seed + 7;
  fx.val = gen_gaussian_mix(mix);

  RngStream pick(seed + 8, "batch-pick");
  auto draw_batch = [&](const LabeledDataset& ds) {
    std::vector<std::size_t> idx(batch_size);
    for (auto& i : idx) i = static_cast<std::size_t>(pick.below(ds.size()));
    return make_batch<double>(ds, idx);
  };
  for (std::size_t s = 0; s < steps; ++s) {
    Batch<double> tb = draw_batch(fx.train);
    tb.teacher_logits = backbone_logits(BackboneSpec{fx.teacher_spec}, fx.teacher,
                                        tb.x.values(), tb.size);
    fx.train_batches.push_back(std::move(tb));
    fx.val_batches.push_back(draw_batch(fx.val));
  }
  return fx;
}

}  // namespace bikd::testing
