#include <doctest.h>

#include <cmath>

#include "bikd/losses.hpp"
#include "support/gradcheck.hpp"

using namespace bikd;
using T64 = Tensor<double>;

TEST_CASE("hard loss hand values") {
  Tape<double> tape;
  // Uniform prediction: ln 2.
  {
    T64 logits = T64::leaf({1, 2}, {0.0, 0.0});
    T64 y = one_hot<double>({0}, 2);
    CHECK(hard_loss(tape, logits, y).values()[0] ==
          doctest::Approx(std::log(2.0)).epsilon(1e-12));
  }
  // Confident and correct: ~0, no overflow.
  {
    T64 logits = T64::leaf({1, 2}, {1e3, -1e3});
    T64 y = one_hot<double>({0}, 2);
    const double v = hard_loss(tape, logits, y).values()[0];
    CHECK(std::isfinite(v));
    CHECK(v == doctest::Approx(0.0).epsilon(1e-12));
  }
  // Hand-computed softmax: -log softmax(1,2,3)[2].
  {
    T64 logits = T64::leaf({1, 3}, {1.0, 2.0, 3.0});
    T64 y = one_hot<double>({2}, 3);
    CHECK(hard_loss(tape, logits, y).values()[0] ==
          doctest::Approx(0.40760596444438079).epsilon(1e-10));
  }
}

TEST_CASE("hard loss rejects non-one-hot labels") {
  Tape<double> tape;
  T64 logits = T64::leaf({1, 2}, {0.0, 0.0});
  CHECK_THROWS_AS(hard_loss(tape, logits, T64::leaf({1, 2}, {0.5, 0.5})), ValueError);
  CHECK_THROWS_AS(hard_loss(tape, logits, T64::leaf({1, 2}, {1.0, 1.0})), ValueError);
  CHECK_THROWS_AS(hard_loss(tape, logits, T64::leaf({2, 2}, {1, 0, 0, 0})),
                  ShapeError);
}

TEST_CASE("soft loss hand values and scaling identity") {
  Tape<double> tape;
  // Identical distributions: zero.
  {
    T64 z = T64::leaf({2, 3}, {1.0, -0.5, 2.0, 0.0, 0.0, 3.0});
    const auto v = soft_loss(tape, z, z, 4.0).values();
    for (double s : v) CHECK(s == doctest::Approx(0.0).epsilon(1e-12));
  }
  // Teacher (0.8, 0.2), student (0.5, 0.5) at tau=1:
  // 0.8 ln 1.6 + 0.2 ln 0.4.
  {
    T64 zt = T64::leaf({1, 2}, {std::log(0.8), std::log(0.2)});
    T64 zs = T64::leaf({1, 2}, {0.0, 0.0});
    const double expect = 0.8 * std::log(1.6) + 0.2 * std::log(0.4);
    CHECK(soft_loss(tape, zt, zs, 1.0).values()[0] ==
          doctest::Approx(expect).epsilon(1e-10));
    CHECK(expect == doctest::Approx(0.19274).epsilon(1e-4));
  }
  // tau=4 on raw logits equals tau^2 * (tau=1 on logits/4).
  {
    RngStream rng(3, "soft");
    std::vector<double> t(2 * 4), s(2 * 4);
    for (auto& v : t) v = rng.normal() * 2;
    for (auto& v : s) v = rng.normal() * 2;
    std::vector<double> t4(t), s4(s);
    for (auto& v : t4) v /= 4.0;
    for (auto& v : s4) v /= 4.0;
    const auto hi = soft_loss(tape, T64::leaf({2, 4}, t), T64::leaf({2, 4}, s), 4.0)
                        .values();
    const auto lo =
        soft_loss(tape, T64::leaf({2, 4}, t4), T64::leaf({2, 4}, s4), 1.0).values();
    for (std::size_t i = 0; i < hi.size(); ++i)
      CHECK(hi[i] == doctest::Approx(16.0 * lo[i]).epsilon(1e-10));
  }
  CHECK_THROWS_AS(soft_loss(tape, T64::zeros({1, 2}), T64::zeros({1, 3}), 4.0),
                  ShapeError);
}

TEST_CASE("soft loss gradcheck against central differences") {
  RngStream rng(41, "softgrad");
  for (int seed = 0; seed < 5; ++seed) {
    std::vector<Tensor<double>> leaves = {bikd::testing::random_tensor({3, 4}, rng, 2.0)};
    std::vector<double> t(3 * 4);
    for (auto& v : t) v = rng.normal() * 2;
    T64 zt = T64::leaf({3, 4}, t);
    const double err = bikd::testing::gradcheck_max_rel_err(
        leaves, [&](Tape<double>& tp, const std::vector<Tensor<double>>& v) {
          return tp.mean(soft_loss(tp, zt, v[0], 4.0));
        });
    CHECK(err < 1e-5);
    const double err1 = bikd::testing::gradcheck_max_rel_err(
        leaves, [&](Tape<double>& tp, const std::vector<Tensor<double>>& v) {
          return tp.mean(soft_loss(tp, zt, v[0], 1.0));
        });
    CHECK(err1 < 1e-5);
  }
}

TEST_CASE("equal teacher and student logits give a bitwise-zero soft gradient") {
  Tape<double> tape;
  RngStream rng(43, "eq");
  std::vector<double> z(2 * 5);
  for (auto& v : z) v = rng.normal() * 3;
  T64 zs = T64::leaf({2, 5}, z, true);
  T64 zt = T64::leaf({2, 5}, z);
  tape.backward(tape.mean(soft_loss(tape, zt, zs, 4.0)));
  for (double g : zs.grad()) CHECK(g == 0.0);
}

TEST_CASE("soft loss sends no gradient to the teacher") {
  Tape<double> tape;
  T64 zt = T64::leaf({1, 2}, {1.0, 2.0}, true);
  T64 zs = T64::leaf({1, 2}, {0.5, -0.5}, true);
  T64 loss = tape.mean(soft_loss(tape, zt, zs, 4.0));
  tape.backward(loss);
  CHECK_FALSE(zt.has_grad());
  bool any = false;
  for (double g : zs.grad()) any = any || g != 0.0;
  CHECK(any);
}

TEST_CASE("soft loss nonnegative (Gibbs) and finite at extreme logits") {
  Tape<double> tape;
  RngStream rng(17, "gibbs");
  for (int trial = 0; trial < 50; ++trial) {
    const double scale = trial % 2 == 0 ? 1.0 : 1e4;
    std::vector<double> t(3 * 6), s(3 * 6);
    for (auto& v : t) v = rng.normal() * scale;
    for (auto& v : s) v = rng.normal() * scale;
    const auto v =
        soft_loss(tape, T64::leaf({3, 6}, t), T64::leaf({3, 6}, s), 4.0).values();
    for (double x : v) {
      CHECK(std::isfinite(x));
      CHECK(x >= -1e-12);
    }
  }
}

TEST_CASE("KL and soft-target CE give identical student-logit gradients") {
  RngStream rng(23, "klce");
  for (int seed = 0; seed < 20; ++seed) {
    std::vector<double> t(4 * 5), s(4 * 5);
    for (auto& v : t) v = rng.normal() * 3;
    for (auto& v : s) v = rng.normal() * 3;
    auto grad_of = [&](bool use_kl) {
      Tape<double> tape;
      T64 zt = T64::leaf({4, 5}, t);
      T64 zs = T64::leaf({4, 5}, s, true);
      T64 per = use_kl ? soft_loss(tape, zt, zs, 4.0)
                       : soft_target_ce_loss(tape, zt, zs, 4.0);
      tape.backward(tape.mean(per));
      return zs.grad();
    };
    const auto gk = grad_of(true), gc = grad_of(false);
    for (std::size_t i = 0; i < gk.size(); ++i)
      CHECK(std::abs(gk[i] - gc[i]) < 1e-9);
  }
}

TEST_CASE("weighted train loss reductions") {
  Tape<double> tape;
  T64 lh = T64::leaf({3}, {1.0, 2.0, 3.0});
  T64 ls = T64::leaf({3}, {4.0, 5.0, 6.0});
  // All-zero weights annihilate the loss.
  CHECK(weighted_train_loss(tape, T64::zeros({3}), T64::zeros({3}), lh, ls).item() ==
        0.0);
  // (1, 0) reduces to the mean hard loss.
  CHECK(weighted_train_loss(tape, T64::full({3}, 1.0), T64::zeros({3}), lh, ls)
            .item() == doctest::Approx(2.0).epsilon(1e-12));
  // (0.5, 0.5) is half the sum of the two means.
  CHECK(weighted_train_loss(tape, T64::full({3}, 0.5), T64::full({3}, 0.5), lh, ls)
            .item() == doctest::Approx(0.5 * (2.0 + 5.0)).epsilon(1e-12));
  CHECK_THROWS_AS(
      weighted_train_loss(tape, T64::zeros({2}), T64::zeros({3}), lh, ls),
      ShapeError);
}

TEST_CASE("weighted train loss is differentiable in all four inputs") {
  RngStream rng(29, "wtl");
  std::vector<Tensor<double>> leaves = {
      bikd::testing::random_tensor({4}, rng), bikd::testing::random_tensor({4}, rng),
      bikd::testing::random_tensor({4}, rng), bikd::testing::random_tensor({4}, rng)};
  const double err = bikd::testing::gradcheck_max_rel_err(
      leaves, [](Tape<double>& t, const std::vector<Tensor<double>>& v) {
        return weighted_train_loss(t, v[0], v[1], v[2], v[3]);
      });
  CHECK(err < 1e-5);
}

TEST_CASE("fixed-alpha loss interpolates hard and soft means") {
  Tape<double> tape;
  RngStream rng(31, "fa");
  std::vector<double> t(4 * 3), s(4 * 3);
  for (auto& v : t) v = rng.normal();
  for (auto& v : s) v = rng.normal();
  T64 zt = T64::leaf({4, 3}, t);
  T64 zs = T64::leaf({4, 3}, s);
  T64 y = one_hot<double>({0, 1, 2, 0}, 3);

  const double mean_hard = tape.mean(hard_loss(tape, zs, y)).item();
  const double mean_soft = tape.mean(soft_loss(tape, zt, zs, 4.0)).item();
  CHECK(fixed_alpha_kd_loss(tape, zt, zs, y, {4.0, 0.0}).item() ==
        doctest::Approx(mean_hard).epsilon(1e-12));
  CHECK(fixed_alpha_kd_loss(tape, zt, zs, y, {4.0, 1.0}).item() ==
        doctest::Approx(mean_soft).epsilon(1e-12));
  CHECK(fixed_alpha_kd_loss(tape, zt, zs, y, {4.0, 0.5}).item() ==
        doctest::Approx(0.5 * (mean_hard + mean_soft)).epsilon(1e-12));
  CHECK_THROWS_AS(fixed_alpha_kd_loss(tape, zt, zs, y, {4.0, 1.5}), ValueError);
  CHECK_THROWS_AS(fixed_alpha_kd_loss(tape, zt, zs, y, {0.0, 0.5}), ValueError);
}

TEST_CASE("val loss values and reduction consistency") {
  Tape<double> tape;
  // Perfect logits: ~0.
  T64 perfect = T64::leaf({2, 3}, {50, 0, 0, 0, 50, 0});
  T64 y = one_hot<double>({0, 1}, 3);
  CHECK(val_loss(tape, perfect, y).item() == doctest::Approx(0.0).epsilon(1e-12));
  // Uniform logits over 10 classes: ln 10.
  T64 uniform = T64::zeros({4, 10});
  T64 y10 = one_hot<double>({0, 3, 5, 9}, 10);
  CHECK(val_loss(tape, uniform, y10).item() ==
        doctest::Approx(std::log(10.0)).epsilon(1e-12));
  // Equals the mean of the per-sample vector.
  RngStream rng(37, "val");
  std::vector<double> z(4 * 10);
  for (auto& v : z) v = rng.normal() * 2;
  T64 logits = T64::leaf({4, 10}, z);
  const auto per = hard_loss(tape, logits, y10).values();
  double mean = 0.0;
  for (double v : per) mean += v;
  mean /= 4.0;
  CHECK(val_loss(tape, logits, y10).item() == doctest::Approx(mean).epsilon(1e-12));
}

TEST_CASE("all losses finite for logits up to |1e4|") {
  Tape<double> tape;
  T64 zs = T64::leaf({2, 4}, {1e4, -1e4, 5e3, 0, -1e4, 1e4, 0, -5e3});
  T64 zt = T64::leaf({2, 4}, {-1e4, 1e4, 0, 5e3, 1e4, -1e4, 5e3, 0});
  T64 y = one_hot<double>({0, 2}, 4);
  CHECK(std::isfinite(tape.mean(hard_loss(tape, zs, y)).item()));
  CHECK(std::isfinite(tape.mean(soft_loss(tape, zt, zs, 4.0)).item()));
  CHECK(std::isfinite(fixed_alpha_kd_loss(tape, zt, zs, y, {4.0, 0.5}).item()));
}
