#include <doctest.h>

#include <cmath>

#include "bikd/optim.hpp"

using namespace bikd;

namespace {

ModelState<double> one_param(std::vector<double> v) {
  ModelState<double> s;
  s.params.push_back({"p", {v.size()}, std::move(v)});
  return s;
}

}  // namespace

TEST_CASE("sgd momentum hand arithmetic") {
  ModelState<double> s = one_param({1.0});
  SgdMomentumState<double> slots;
  SgdConfig cfg{0.1, 0.9, 0.0};
  sgd_step(s, {{2.0}}, slots, cfg);  // buf = 2, p = 1 - 0.2
  CHECK(s.params[0].value[0] == doctest::Approx(0.8).epsilon(1e-15));
  sgd_step(s, {{2.0}}, slots, cfg);  // buf = 0.9*2 + 2 = 3.8, p = 0.8 - 0.38
  CHECK(s.params[0].value[0] == doctest::Approx(0.42).epsilon(1e-15));
}

TEST_CASE("zero gradient and zero momentum move parameters only by weight decay") {
  ModelState<double> s = one_param({2.0});
  SgdMomentumState<double> slots;
  SgdConfig cfg{0.1, 0.9, 5e-4};
  sgd_step(s, {{0.0}}, slots, cfg);
  CHECK(s.params[0].value[0] == doctest::Approx(2.0 - 0.1 * 5e-4 * 2.0).epsilon(1e-15));
}

TEST_CASE("plain sgd is exact") {
  ModelState<double> s = one_param({1.0, -2.0});
  plain_sgd_step(s, {{0.5, -1.0}}, 0.1);
  CHECK(s.params[0].value[0] == 1.0 - 0.05);
  CHECK(s.params[0].value[1] == -2.0 + 0.1);
}

TEST_CASE("adam first step with unit gradient moves by ~lr/(1+eps)") {
  ModelState<double> s = one_param({0.0, 0.0, 0.0});
  AdamState<double> slots;
  AdamConfig cfg;
  cfg.lr = 1e-3;
  adam_step(s, {{1.0, 1.0, 1.0}}, slots, cfg);
  for (double v : s.params[0].value)
    CHECK(std::abs(v + cfg.lr / (1.0 + cfg.eps)) < 1e-12);
}

TEST_CASE("adam with zero gradient and zero moments leaves parameters unchanged") {
  ModelState<double> s = one_param({1.5, -2.5});
  AdamState<double> slots;
  adam_step(s, {{0.0, 0.0}}, slots, AdamConfig{});
  CHECK(s.params[0].value[0] == 1.5);
  CHECK(s.params[0].value[1] == -2.5);
}

TEST_CASE("learning rate schedule decays at the configured epochs") {
  LrSchedule sched{0.1, {80, 100}, 0.1};
  CHECK(sched.at_epoch(0) == doctest::Approx(0.1));
  CHECK(sched.at_epoch(79) == doctest::Approx(0.1));
  CHECK(sched.at_epoch(80) == doctest::Approx(0.01));
  CHECK(sched.at_epoch(99) == doctest::Approx(0.01));
  CHECK(sched.at_epoch(100) == doctest::Approx(0.001));
  CHECK(sched.at_epoch(119) == doctest::Approx(0.001));
}
