#include "bikd/verify.hpp"

#include <cmath>
#include <cstring>
#include <functional>

#include <json.hpp>

#include "bikd/baselines.hpp"
#include "bikd/bilevel.hpp"
#include "bikd/trainer.hpp"

namespace bikd {

namespace {

// Scaled relative error with a floor of 1 so near-zero coordinates compare
// absolutely.
double rel_err(double a, double b) {
  return std::abs(a - b) / std::max({1.0, std::abs(a), std::abs(b)});
}

using Builder =
    std::function<Tensor<double>(Tape<double>&, const std::vector<Tensor<double>>&)>;

double fd_gradcheck(std::vector<Tensor<double>> leaves, const Builder& build,
                    double h = 1e-5) {
  for (auto& leaf : leaves) {
    leaf.set_requires_grad(true);
    leaf.zero_grad();
  }
  Tape<double> tape;
  tape.backward(build(tape, leaves));
  std::vector<std::vector<double>> analytic;
  for (const auto& leaf : leaves) analytic.push_back(leaf.grad());
  auto value = [&]() {
    Tape<double> fresh;
    fresh.set_recording(false);
    return build(fresh, leaves).item();
  };
  double worst = 0.0;
  for (std::size_t l = 0; l < leaves.size(); ++l) {
    auto& vals = leaves[l].mutable_values();
    for (std::size_t i = 0; i < vals.size(); ++i) {
      const double orig = vals[i];
      vals[i] = orig + h;
      const double up = value();
      vals[i] = orig - h;
      const double down = value();
      vals[i] = orig;
      worst = std::max(worst, rel_err(analytic[l][i], (up - down) / (2.0 * h)));
    }
  }
  return worst;
}

Tensor<double> randn(Shape shape, RngStream& rng, double scale = 1.0) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.normal() * scale;
  return Tensor<double>::leaf(std::move(shape), std::move(v));
}

struct Fixture {
  MlpSpec student_spec, teacher_spec;
  MetaNetSpec meta_spec;
  ModelState<double> student, teacher, meta;
  LabeledDataset train, val;
  std::vector<Batch<double>> train_batches, val_batches;
};

Fixture make_verify_fixture(std::uint64_t seed, std::size_t steps,
                            std::size_t batch_size, std::size_t meta_hidden,
                            std::vector<std::size_t> widths) {
  Fixture fx;
  const std::size_t d = widths.front(), C = widths.back();
  fx.student_spec.layer_widths = std::move(widths);
  fx.teacher_spec.layer_widths = {d, 24, C};
  fx.meta_spec.hidden_width = meta_hidden;
  fx.student = init_params<double>(fx.student_spec, derive_seed(seed, "student"));
  fx.teacher = init_params<double>(fx.teacher_spec, derive_seed(seed, "teacher"));
  fx.meta = init_meta_params<double>(fx.meta_spec, derive_seed(seed, "meta"));
  RngStream perturb(seed, "meta-perturb");
  for (auto& p : fx.meta.params)
    for (auto& v : p.value) v += 0.05 * perturb.normal();

  GaussianMixSpec mix;
  mix.num_classes = C;
  mix.dim = d;
  mix.means = random_class_means(C, d, 2.0, derive_seed(seed, "means"));
  mix.sigma = 1.0;
  mix.samples_per_class = std::max<std::size_t>(batch_size, 8) * 4;
  mix.seed = derive_seed(seed, "data");
  fx.train = gen_gaussian_mix(mix);
  mix.seed = derive_seed(seed, "val-data");
  fx.val = gen_gaussian_mix(mix);

  RngStream pick(seed, "batch-pick");
  auto draw = [&](const LabeledDataset& ds) {
    std::vector<std::size_t> idx(batch_size);
    for (auto& i : idx) i = static_cast<std::size_t>(pick.below(ds.size()));
    return make_batch<double>(ds, idx);
  };
  for (std::size_t s = 0; s < steps; ++s) {
    Batch<double> tb = draw(fx.train);
    tb.teacher_logits = backbone_logits(BackboneSpec{fx.teacher_spec}, fx.teacher,
                                        tb.x.values(), tb.size);
    fx.train_batches.push_back(std::move(tb));
    fx.val_batches.push_back(draw(fx.val));
  }
  return fx;
}

bool bitwise_equal(const ModelState<double>& a, const ModelState<double>& b) {
  if (a.params.size() != b.params.size()) return false;
  for (std::size_t p = 0; p < a.params.size(); ++p)
    if (std::memcmp(a.params[p].value.data(), b.params[p].value.data(),
                    a.params[p].value.size() * sizeof(double)) != 0)
      return false;
  return true;
}

}  // namespace

VerifyReport verify_gradcheck(std::size_t seeds) {
  VerifyReport report;
  report.suite = "gradcheck";
  const double bound = 1e-5;
  double worst_prim = 0.0, worst_hard = 0.0, worst_soft = 0.0, worst_meta = 0.0;

  for (std::uint64_t seed = 0; seed < seeds; ++seed) {
    RngStream r(seed, "gradcheck");
    auto up = [&](double err, double& slot) { slot = std::max(slot, err); };

    up(fd_gradcheck({randn({3, 4}, r), randn({4, 2}, r)},
                    [](Tape<double>& t, const std::vector<Tensor<double>>& v) {
                      return t.sum(t.matmul(v[0], v[1]));
                    }),
       worst_prim);
    up(fd_gradcheck({randn({5, 3}, r), randn({5}, r)},
                    [](Tape<double>& t, const std::vector<Tensor<double>>& v) {
                      return t.sum(t.tanh(t.matvec_t(v[0], v[1])));
                    }),
       worst_prim);
    up(fd_gradcheck({randn({6}, r), randn({6}, r)},
                    [](Tape<double>& t, const std::vector<Tensor<double>>& v) {
                      return t.sum(t.mul(t.add(v[0], v[1]), t.sub(v[0], v[1])));
                    }),
       worst_prim);
    up(fd_gradcheck({randn({8}, r, 2.0)},
                    [](Tape<double>& t, const std::vector<Tensor<double>>& v) {
                      return t.sum(t.relu(v[0]));
                    }),
       worst_prim);
    up(fd_gradcheck({randn({8}, r)},
                    [](Tape<double>& t, const std::vector<Tensor<double>>& v) {
                      return t.sum(t.mul(t.tanh(v[0]), t.sigmoid(v[0])));
                    }),
       worst_prim);
    up(fd_gradcheck({randn({4, 5}, r, 3.0), randn({4, 5}, r)},
                    [](Tape<double>& t, const std::vector<Tensor<double>>& v) {
                      return t.sum(t.mul(t.log_softmax(v[0], 4.0), v[1]));
                    }),
       worst_prim);
    up(fd_gradcheck({randn({4, 3}, r), randn({3}, r), randn({4}, r)},
                    [](Tape<double>& t, const std::vector<Tensor<double>>& v) {
                      return t.sum(t.scale_rows(t.add_rowvec(v[0], v[1]), v[2]));
                    }),
       worst_prim);
    up(fd_gradcheck({randn({4, 3}, r)},
                    [](Tape<double>& t, const std::vector<Tensor<double>>& v) {
                      return t.add(t.sum(t.tanh(t.row_sum(v[0]))),
                                   t.mean(t.tanh(t.col_sum(v[0]))));
                    }),
       worst_prim);
    up(fd_gradcheck({randn({6}, r)},
                    [](Tape<double>& t, const std::vector<Tensor<double>>& v) {
                      Tensor<double> m = t.reshape(v[0], {2, 3});
                      return t.sum(t.mul(t.column(m, 0), t.column(m, 2)));
                    }),
       worst_prim);
    up(fd_gradcheck({randn({1, 1, 4, 4}, r), randn({2, 1, 3, 3}, r), randn({2}, r)},
                    [](Tape<double>& t, const std::vector<Tensor<double>>& v) {
                      return t.sum(t.conv2d(v[0], v[1], v[2]));
                    }),
       worst_prim);
    up(fd_gradcheck({randn({1, 2, 4, 4}, r)},
                    [](Tape<double>& t, const std::vector<Tensor<double>>& v) {
                      return t.sum(t.maxpool2(v[0]));
                    }),
       worst_prim);

    // End-to-end compositions.
    MlpSpec mlp;
    mlp.layer_widths = {4, 6, 3};
    ModelState<double> state = init_params<double>(mlp, derive_seed(seed, "mlp"));
    Tensor<double> x = randn({5, 4}, r);
    Tensor<double> y = one_hot<double>({0, 2, 1, 0, 2}, 3);
    up(fd_gradcheck(bind_params(state, true),
                    [&](Tape<double>& t, const std::vector<Tensor<double>>& v) {
                      Tensor<double> logits =
                          mlp_forward(t, mlp, std::span<const Tensor<double>>(v), x);
                      return t.mean(hard_loss(t, logits, y));
                    }),
       worst_hard);

    Tensor<double> zt = randn({5, 3}, r, 2.0);
    up(fd_gradcheck(bind_params(state, true),
                    [&](Tape<double>& t, const std::vector<Tensor<double>>& v) {
                      Tensor<double> logits =
                          mlp_forward(t, mlp, std::span<const Tensor<double>>(v), x);
                      return t.mean(soft_loss(t, zt, logits, 4.0));
                    }),
       worst_soft);

    MetaNetSpec meta_spec;
    meta_spec.hidden_width = 6;
    ModelState<double> meta =
        init_meta_params<double>(meta_spec, derive_seed(seed, "meta"));
    RngStream mp(seed, "meta-perturb");
    for (auto& p : meta.params)
      for (auto& v : p.value) v += 0.1 * mp.normal();
    Tensor<double> pairs = randn({4, 2}, r);
    for (auto& v : pairs.mutable_values()) v = std::abs(v) * 3.0;
    up(fd_gradcheck(bind_params(meta, true),
                    [&](Tape<double>& t, const std::vector<Tensor<double>>& v) {
                      Tensor<double> w = meta_forward(
                          t, meta_spec, std::span<const Tensor<double>>(v), pairs);
                      return t.sum(t.mul(w, w));
                    }),
       worst_meta);
  }
  report.add("primitive_ops_max_rel_err", worst_prim, bound);
  report.add("mlp_hard_loss_max_rel_err", worst_hard, bound);
  report.add("mlp_soft_loss_tau4_max_rel_err", worst_soft, bound);
  report.add("metanet_max_rel_err", worst_meta, bound);
  return report;
}

VerifyReport verify_hypergrad(const std::vector<std::size_t>& window_lengths,
                              std::size_t seeds) {
  VerifyReport report;
  report.suite = "hypergrad";
  for (std::size_t k : window_lengths) {
    double worst_pair = 0.0, worst_fd = 0.0;
    for (std::uint64_t seed = 0; seed < seeds; ++seed) {
      auto fx = make_verify_fixture(1000 * k + seed, k, 8, 8, {6, 10, 4});
      const auto window =
          build_window(BackboneSpec{fx.student_spec}, fx.student, fx.meta_spec,
                       fx.meta, fx.train_batches, fx.val_batches, 0.1, 4.0);
      const auto a = window_autodiff_hypergrad(window, fx.meta);
      const auto b = window_explicit_hypergrad(window, fx.meta);
      const auto c = fd_hypergrad(window, fx.meta);
      for (std::size_t i = 0; i < a.size(); ++i) {
        worst_pair = std::max(worst_pair, rel_err(a[i], b[i]));
        if (std::abs(c[i]) > 1e-6) {
          worst_fd = std::max(worst_fd, std::abs(a[i] - c[i]) /
                                            std::max(std::abs(a[i]), std::abs(c[i])));
          worst_fd = std::max(worst_fd, std::abs(b[i] - c[i]) /
                                            std::max(std::abs(b[i]), std::abs(c[i])));
        }
      }
    }
    report.add("k" + std::to_string(k) + "_autodiff_vs_explicit", worst_pair, 1e-8);
    report.add("k" + std::to_string(k) + "_vs_central_differences", worst_fd, 1e-4);
  }
  return report;
}

VerifyReport verify_equivalence() {
  VerifyReport report;
  report.suite = "equivalence";

  // k=1 meta trajectory equals a dedicated online step loop, bitwise.
  {
    const std::size_t batches = 20;
    auto fx = make_verify_fixture(42, batches, 6, 8, {5, 8, 3});
    TrainConfig cfg;
    cfg.inner_steps = 1;

    BilevelTrainer<double> trainer(cfg, BackboneSpec{fx.student_spec},
                                   clone_state(fx.student), fx.meta_spec, fx.meta,
                                   BackboneSpec{fx.teacher_spec}, fx.teacher,
                                   fx.train, fx.val);

    // Independent online reference: immediate Adam update per batch.
    ModelState<double> student = clone_state(fx.student);
    student.sgd_slots.emplace();
    ModelState<double> meta = clone_state(fx.meta);
    bool all_equal = true;
    for (std::size_t i = 0; i < batches; ++i) {
      auto batch = fx.train_batches[i];
      trainer.run_batch(batch, fx.val_batches[i], cfg.student_lr);

      const std::size_t C = fx.train.num_classes;
      const auto trace =
          mlp_trace(fx.student_spec, student, batch.x.values(), batch.size);
      const auto ce_t = ce_per_sample(batch.teacher_logits, batch.labels, C);
      const auto ce_s = ce_per_sample(trace.logits, batch.labels, C);
      Tape<double> tape;
      auto meta_params = bind_params(meta, true);
      auto [wh, ws] =
          compute_weights(tape, fx.meta_spec,
                          std::span<const Tensor<double>>(meta_params), ce_t, ce_s);
      ModelState<double> base = clone_state(student);
      const auto vs = virtual_step_mlp(tape, fx.student_spec, base, trace, wh, ws,
                                       batch, cfg.student_lr, cfg.temperature);
      const auto g = one_step_hypergrad(tape, BackboneSpec{fx.student_spec}, vs,
                                        fx.val_batches[i],
                                        std::span<const Tensor<double>>(meta_params));
      std::vector<std::vector<double>> grads;
      std::size_t off = 0;
      for (const auto& p : meta.params) {
        grads.emplace_back(g.begin() + off, g.begin() + off + p.numel());
        off += p.numel();
      }
      if (!meta.adam_slots) meta.adam_slots.emplace();
      AdamConfig acfg;
      acfg.lr = cfg.meta_lr;
      adam_step(meta, grads, *meta.adam_slots, acfg);

      const auto w = detail::weights_matrix(fx.meta_spec, meta, ce_t, ce_s);
      std::vector<double> whv(batch.size), wsv(batch.size);
      for (std::size_t j = 0; j < batch.size; ++j) {
        whv[j] = w[2 * j];
        wsv[j] = w[2 * j + 1];
      }
      SgdConfig sgd{cfg.student_lr, cfg.momentum, cfg.weight_decay};
      student_update(BackboneSpec{fx.student_spec}, student, *student.sgd_slots,
                     batch, whv, wsv, cfg.temperature, sgd);
      all_equal = all_equal && bitwise_equal(trainer.meta(), meta) &&
                  bitwise_equal(trainer.student(), student);
    }
    report.add_flag("k1_online_reduction_bitwise", all_equal);
  }

  // Pinned weights reproduce the fixed-alpha trajectory bitwise.
  {
    auto fx = make_verify_fixture(43, 1, 8, 8, {5, 8, 3});
    TrainConfig cfg;
    cfg.alpha = 0.3;
    cfg.epochs = 2;
    cfg.batch_size = 12;
    cfg.val_batch_size = 12;
    cfg.seed = 7;
    cfg.lr_decay_epochs = {};
    const auto kd = train_vanilla_kd<double>(
        cfg, BackboneSpec{fx.student_spec}, clone_state(fx.student),
        BackboneSpec{fx.teacher_spec}, fx.teacher, fx.train, fx.val);
    TrainConfig bcfg = cfg;
    bcfg.pinned_weights = {{1.0 - cfg.alpha, cfg.alpha}};
    BilevelTrainer<double> trainer(bcfg, BackboneSpec{fx.student_spec},
                                   clone_state(fx.student), fx.meta_spec, fx.meta,
                                   BackboneSpec{fx.teacher_spec}, fx.teacher,
                                   fx.train, fx.val);
    trainer.fit();
    report.add_flag("pinned_weights_match_fixed_alpha_bitwise",
                    bitwise_equal(trainer.student(), kd.model));
  }

  // KL vs soft-target-CE student-logit gradients.
  {
    double worst = 0.0;
    RngStream rng(44, "klce");
    for (int trial = 0; trial < 20; ++trial) {
      std::vector<double> t(4 * 5), s(4 * 5);
      for (auto& v : t) v = rng.normal() * 3;
      for (auto& v : s) v = rng.normal() * 3;
      auto grad_of = [&](bool kl) {
        Tape<double> tape;
        Tensor<double> zt = Tensor<double>::leaf({4, 5}, t);
        Tensor<double> zs = Tensor<double>::leaf({4, 5}, s, true);
        tape.backward(tape.mean(kl ? soft_loss(tape, zt, zs, 4.0)
                                   : soft_target_ce_loss(tape, zt, zs, 4.0)));
        return zs.grad();
      };
      const auto a = grad_of(true), b = grad_of(false);
      for (std::size_t i = 0; i < a.size(); ++i)
        worst = std::max(worst, std::abs(a[i] - b[i]));
    }
    report.add("kl_vs_soft_ce_grad_max_abs_diff", worst, 1e-9);
  }
  return report;
}

VerifyReport verify_data(double rho, std::size_t n_max, std::size_t classes) {
  VerifyReport report;
  report.suite = "data";
  LongTailSpec spec{classes, n_max, rho, 0};
  const auto counts = class_counts(spec);
  report.add_flag("first_count_is_n_max", counts.front() == n_max);
  const auto want_last = static_cast<std::size_t>(
      std::max(1.0, std::round(static_cast<double>(n_max) / rho)));
  report.add_flag("last_count_is_n_max_over_rho", counts.back() == want_last);
  bool monotone = true;
  for (std::size_t i = 1; i < counts.size(); ++i)
    monotone = monotone && counts[i] <= counts[i - 1];
  report.add_flag("counts_nonincreasing", monotone);
  const double realized =
      static_cast<double>(counts.front()) / static_cast<double>(counts.back());
  if (n_max >= 100)
    report.add("imbalance_ratio_rel_err", std::abs(realized - rho) / rho, 0.02 + 1e-12);

  // Balanced carve on a small synthetic pool.
  GaussianMixSpec mix;
  mix.num_classes = classes;
  mix.dim = 4;
  mix.means = random_class_means(classes, 4, 2.0, 1);
  mix.sigma = 1.0;
  mix.samples_per_class = 40;
  mix.seed = 2;
  const auto pool = gen_gaussian_mix(mix);
  auto [val, rest] = carve_validation(pool, classes * 10, 3);
  bool balanced = true;
  for (std::size_t n : val.class_histogram()) balanced = balanced && n == 10;
  report.add_flag("validation_carve_balanced", balanced);
  report.add_flag("validation_carve_disjoint",
                  val.size() + rest.size() == pool.size());
  return report;
}

std::string report_to_json(const VerifyReport& report) {
  nlohmann::ordered_json j;
  j["suite"] = report.suite;
  j["passed"] = report.passed;
  j["checks"] = nlohmann::ordered_json::array();
  for (const auto& c : report.checks) {
    nlohmann::ordered_json e;
    e["name"] = c.name;
    e["passed"] = c.passed;
    e["observed"] = c.observed;
    e["bound"] = c.bound;
    j["checks"].push_back(e);
  }
  return j.dump(2);
}

}  // namespace bikd
