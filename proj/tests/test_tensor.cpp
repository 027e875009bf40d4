#include <doctest.h>

#include <cmath>
#include <cstring>

#include "bikd/tensor.hpp"
#include "support/gradcheck.hpp"

using namespace bikd;
using bikd::testing::gradcheck_max_rel_err;
using bikd::testing::random_tensor;

using T64 = Tensor<double>;

TEST_CASE("matmul identity and hand arithmetic") {
  Tape<double> tape;
  T64 eye = T64::leaf({2, 2}, {1, 0, 0, 1});
  T64 a = T64::leaf({2, 2}, {1, 2, 3, 4});
  CHECK(tape.matmul(eye, a).values() == std::vector<double>{1, 2, 3, 4});

  T64 row = T64::leaf({1, 2}, {1, 2});
  T64 col = T64::leaf({2, 1}, {3, 4});
  CHECK(tape.matmul(row, col).values() == std::vector<double>{11});
}

TEST_CASE("matmul shape mismatch names both shapes") {
  Tape<double> tape;
  T64 a = T64::zeros({2, 3});
  T64 b = T64::zeros({2, 3});
  CHECK_THROWS_WITH_AS(tape.matmul(a, b),
                       doctest::Contains("{2,3}"), ShapeError);
}

TEST_CASE("elementwise trivial values") {
  Tape<double> tape;
  T64 zero = T64::leaf({1}, {0.0});
  CHECK(tape.sigmoid(zero).values()[0] == doctest::Approx(0.5));
  CHECK(tape.tanh(zero).values()[0] == 0.0);
  CHECK(tape.relu(T64::leaf({2}, {-1.0, 2.0})).values() ==
        std::vector<double>{0.0, 2.0});
  CHECK_THROWS_AS(tape.add(T64::zeros({2}), T64::zeros({3})), ShapeError);
}

TEST_CASE("log_softmax trivial and scaling identity") {
  Tape<double> tape;
  T64 pair = T64::leaf({1, 2}, {0.0, 0.0});
  const auto lp = tape.log_softmax(pair, 1.0).values();
  CHECK(lp[0] == doctest::Approx(std::log(0.5)).epsilon(1e-12));
  CHECK(lp[1] == doctest::Approx(std::log(0.5)).epsilon(1e-12));

  T64 constant = T64::leaf({1, 3}, {2.5, 2.5, 2.5});
  const auto uniform = tape.log_softmax(constant, 3.0).values();
  for (double v : uniform)
    CHECK(v == doctest::Approx(std::log(1.0 / 3.0)).epsilon(1e-12));

  // logits/tau identity: (4,0) at tau=4 equals (1,0) at tau=1.
  const auto a = tape.log_softmax(T64::leaf({1, 2}, {4.0, 0.0}), 4.0).values();
  const auto b = tape.log_softmax(T64::leaf({1, 2}, {1.0, 0.0}), 1.0).values();
  CHECK(a[0] == doctest::Approx(b[0]).epsilon(1e-12));
  CHECK(a[1] == doctest::Approx(b[1]).epsilon(1e-12));

  CHECK_THROWS_AS(tape.log_softmax(pair, 0.0), ValueError);
  CHECK_THROWS_AS(tape.log_softmax(pair, -2.0), ValueError);
}

TEST_CASE("log_softmax rows renormalize within 1e-9 up to |1e4| logits") {
  Tape<double> tape;
  RngStream rng(7, "logits");
  for (double scale : {1.0, 100.0, 1e4}) {
    std::vector<double> v(8 * 5);
    for (auto& x : v) x = rng.normal() * scale;
    const auto lp = tape.log_softmax(T64::leaf({8, 5}, v), 4.0).values();
    for (std::size_t r = 0; r < 8; ++r) {
      double sum = 0.0;
      for (std::size_t c = 0; c < 5; ++c) sum += std::exp(lp[r * 5 + c]);
      CHECK(std::abs(sum - 1.0) < 1e-9);
    }
  }
}

TEST_CASE("backward hand derivatives") {
  // loss = x^2 at x=3 -> grad 6
  {
    Tape<double> tape;
    T64 x = T64::scalar(3.0, true);
    T64 loss = tape.mul(x, x);
    tape.backward(loss);
    CHECK(x.grad()[0] == doctest::Approx(6.0).epsilon(1e-12));
  }
  // loss = sum(sigmoid(x)) at x=0 (len 4) -> grad 0.25 each
  {
    Tape<double> tape;
    T64 x = T64::zeros({4}, true);
    T64 loss = tape.sum(tape.sigmoid(x));
    tape.backward(loss);
    for (double g : x.grad()) CHECK(g == doctest::Approx(0.25).epsilon(1e-12));
  }
}

TEST_CASE("backward rejects non-scalar and foreign tensors") {
  Tape<double> tape;
  T64 x = T64::zeros({2, 2}, true);
  T64 y = tape.add(x, x);
  CHECK_THROWS_AS(tape.backward(y), ContractError);

  Tape<double> other;
  T64 z = T64::scalar(1.0, true);
  T64 loss = other.mul(z, z);
  CHECK_THROWS_AS(tape.backward(loss), ContractError);
}

TEST_CASE("repeated backward accumulates; zero_grad clears") {
  Tape<double> tape;
  T64 x = T64::scalar(3.0, true);
  T64 loss = tape.mul(x, x);
  tape.backward(loss);
  tape.backward(loss);
  CHECK(x.grad()[0] == doctest::Approx(12.0));
  x.zero_grad();
  tape.backward(loss);
  CHECK(x.grad()[0] == doctest::Approx(6.0));
}

TEST_CASE("detached tensors contribute no gradient") {
  // y = f(detach(g(x))): grad(x) after backward(y) is zero.
  Tape<double> tape;
  T64 x = T64::scalar(2.0, true);
  T64 g = tape.mul(x, x);
  T64 y = tape.mul(g.detach(), g.detach());
  CHECK_FALSE(y.requires_grad());
  tape.backward(y);
  CHECK_FALSE(x.has_grad());
  CHECK(x.grad()[0] == 0.0);
}

TEST_CASE("frozen tape records nothing") {
  Tape<double> tape;
  T64 x = T64::scalar(2.0, true);
  {
    FrozenTape<double> frozen(tape);
    T64 y = tape.mul(x, x);
    CHECK_FALSE(y.requires_grad());
  }
  CHECK(tape.num_ops() == 0);
  CHECK(tape.recording());
}

TEST_CASE("gradcheck: every primitive op") {
  RngStream rng(11, "gradcheck");
  auto check = [&](const char* name, std::vector<T64> leaves,
                   const bikd::testing::GraphBuilder& build) {
    const double err = gradcheck_max_rel_err(std::move(leaves), build);
    INFO(name);
    CHECK(err < 1e-5);
  };

  for (int seed = 0; seed < 5; ++seed) {
    RngStream r(100 + seed, "case");
    check("matmul", {random_tensor({3, 4}, r), random_tensor({4, 2}, r)},
          [](Tape<double>& t, const std::vector<T64>& v) {
            return t.sum(t.matmul(v[0], v[1]));
          });
    check("matvec_t", {random_tensor({5, 3}, r), random_tensor({5}, r)},
          [](Tape<double>& t, const std::vector<T64>& v) {
            return t.sum(t.matvec_t(v[0], v[1]));
          });
    check("add+mul+sub", {random_tensor({6}, r), random_tensor({6}, r)},
          [](Tape<double>& t, const std::vector<T64>& v) {
            return t.sum(t.mul(t.add(v[0], v[1]), t.sub(v[0], v[1])));
          });
    check("relu", {random_tensor({8}, r, 2.0)},
          [](Tape<double>& t, const std::vector<T64>& v) {
            return t.sum(t.relu(v[0]));
          });
    check("tanh", {random_tensor({8}, r)},
          [](Tape<double>& t, const std::vector<T64>& v) {
            return t.sum(t.tanh(v[0]));
          });
    check("sigmoid", {random_tensor({8}, r)},
          [](Tape<double>& t, const std::vector<T64>& v) {
            return t.sum(t.sigmoid(v[0]));
          });
    check("scale+mean", {random_tensor({7}, r)},
          [](Tape<double>& t, const std::vector<T64>& v) {
            return t.mean(t.scale(v[0], 2.5));
          });
    check("log_softmax", {random_tensor({4, 5}, r, 3.0), random_tensor({4, 5}, r)},
          [](Tape<double>& t, const std::vector<T64>& v) {
            return t.sum(t.mul(t.log_softmax(v[0], 4.0), v[1]));
          });
    check("add_rowvec", {random_tensor({4, 3}, r), random_tensor({3}, r)},
          [](Tape<double>& t, const std::vector<T64>& v) {
            return t.sum(t.tanh(t.add_rowvec(v[0], v[1])));
          });
    check("scale_rows", {random_tensor({4, 3}, r), random_tensor({4}, r)},
          [](Tape<double>& t, const std::vector<T64>& v) {
            return t.sum(t.scale_rows(v[0], v[1]));
          });
    check("row_sum/col_sum", {random_tensor({4, 3}, r)},
          [](Tape<double>& t, const std::vector<T64>& v) {
            return t.add(t.sum(t.tanh(t.row_sum(v[0]))),
                         t.sum(t.tanh(t.col_sum(v[0]))));
          });
    check("reshape+column", {random_tensor({6}, r)},
          [](Tape<double>& t, const std::vector<T64>& v) {
            T64 m = t.reshape(v[0], {2, 3});
            return t.sum(t.mul(t.column(m, 1), t.column(m, 2)));
          });
    check("clamp", {random_tensor({9}, r, 2.0)},
          [](Tape<double>& t, const std::vector<T64>& v) {
            return t.sum(t.clamp(v[0], -1.0, 1.0));
          });
    check("conv2d", {random_tensor({2, 2, 5, 5}, r), random_tensor({3, 2, 3, 3}, r),
                     random_tensor({3}, r)},
          [](Tape<double>& t, const std::vector<T64>& v) {
            return t.sum(t.tanh(t.conv2d(v[0], v[1], v[2])));
          });
    check("maxpool2", {random_tensor({2, 3, 4, 4}, r)},
          [](Tape<double>& t, const std::vector<T64>& v) {
            return t.sum(t.maxpool2(v[0]));
          });
  }
}

TEST_CASE("determinism: identical seed and op sequence is bitwise identical") {
  auto run = [](std::uint64_t seed) {
    RngStream rng(seed, "det");
    Tape<double> tape;
    T64 a = random_tensor({4, 4}, rng);
    a.set_requires_grad(true);
    T64 b = random_tensor({4, 4}, rng);
    T64 loss = tape.sum(tape.tanh(tape.matmul(a, b)));
    tape.backward(loss);
    auto out = a.grad();
    out.push_back(loss.item());
    return out;
  };
  const auto x = run(42), y = run(42);
  CHECK(std::memcmp(x.data(), y.data(), x.size() * sizeof(double)) == 0);
  CHECK(run(42) != run(43));
}

TEST_CASE("grad of non-participating leaf is absent or zero") {
  Tape<double> tape;
  T64 x = T64::scalar(1.0, true);
  T64 unused = T64::scalar(5.0, true);
  T64 loss = tape.mul(x, x);
  tape.backward(loss);
  CHECK_FALSE(unused.has_grad());
  for (double g : unused.grad()) CHECK(g == 0.0);
}
