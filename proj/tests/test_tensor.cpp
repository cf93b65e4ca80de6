#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "bilayer/grad_check.hpp"
#include "bilayer/tensor.hpp"
#include "test_support.hpp"

using namespace bilayer;
using testsup::bit_equal;
using testsup::random_off_kink;
using testsup::random_tensor;

TEST_CASE("matmul basic products") {
  Tape tape;
  Tensor a = Tensor::from({{1, 2}, {3, 4}});
  Tensor out = matmul(tape, a, Tensor::identity(2));
  CHECK(bit_equal(out, a));

  Tensor b = matmul(tape, Tensor::from({{1, 2}}), Tensor::from({{3}, {4}}));
  CHECK(b.rows() == 1);
  CHECK(b.cols() == 1);
  CHECK(b.value() == 11.0);
}

TEST_CASE("matmul rejects mismatched shapes naming both operands") {
  Tape tape;
  Tensor a(5, 4), b(3, 2);
  try {
    matmul(tape, a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    std::string msg = e.what();
    CHECK(msg.find("5x4") != std::string::npos);
    CHECK(msg.find("3x2") != std::string::npos);
  }
}

TEST_CASE("matmul gradients match finite differences") {
  Rng rng(11);
  Tensor a = random_tensor(5, 4, rng, -1, 1, true);
  Tensor b = random_tensor(4, 3, rng, -1, 1, true);
  double err = grad_check(
      [&](Tape& t) {
        Tensor c = matmul(t, a, b);
        return mean_all(t, square(t, c));
      },
      {a, b});
  CHECK(err < 1e-6);
}

TEST_CASE("elementwise ops") {
  Tape tape;
  Tensor x = Tensor::from({{-1, 0, 2}});
  Tensor r = relu(tape, x);
  CHECK(r.at(0, 0) == 0.0);
  CHECK(r.at(0, 1) == 0.0);
  CHECK(r.at(0, 2) == 2.0);

  Tensor l = leaky_relu(tape, Tensor::from({{-10}}), 0.1);
  CHECK(l.value() == Catch::Approx(-1.0));

  Tensor a = Tensor::from({{1, 2}, {3, 4}, {5, 6}});
  Tensor b(3, 4);
  Tensor cc = concat_cols(tape, a, b);
  REQUIRE(cc.rows() == 3);
  REQUIRE(cc.cols() == 6);
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 2; ++j) CHECK(cc.at(i, j) == a.at(i, j));
  }

  Tensor s = sub(tape, Tensor::from({{5, 7}}), Tensor::from({{2, 3}}));
  CHECK(s.at(0, 0) == 3.0);
  CHECK(s.at(0, 1) == 4.0);

  Tensor sc = scale(tape, Tensor::from({{2, -4}}), 0.5);
  CHECK(sc.at(0, 0) == 1.0);
  CHECK(sc.at(0, 1) == -2.0);

  REQUIRE_THROWS_AS(add(tape, Tensor(2, 2), Tensor(2, 3)), ShapeError);
  REQUIRE_THROWS_AS(concat_cols(tape, Tensor(2, 2), Tensor(3, 2)), ShapeError);
}

TEST_CASE("elementwise and structural op gradients") {
  Rng rng(23);
  SECTION("add/sub/scale chain") {
    Tensor a = random_tensor(3, 4, rng, -1, 1, true);
    Tensor b = random_tensor(3, 4, rng, -1, 1, true);
    double err = grad_check(
        [&](Tape& t) {
          Tensor u = add(t, a, scale(t, b, -1.7));
          Tensor v = sub(t, u, b);
          return mean_all(t, square(t, v));
        },
        {a, b});
    CHECK(err < 1e-6);
  }
  SECTION("concat and slice") {
    Tensor a = random_tensor(3, 2, rng, -1, 1, true);
    Tensor b = random_tensor(3, 4, rng, -1, 1, true);
    Tensor c = random_tensor(2, 6, rng, -1, 1, true);
    double err = grad_check(
        [&](Tape& t) {
          Tensor wide = concat_cols(t, a, b);
          Tensor tall = concat_rows(t, wide, c);
          Tensor part = slice(t, tall, 1, 4, 1, 5);
          return mean_all(t, square(t, part));
        },
        {a, b, c});
    CHECK(err < 1e-6);
  }
  SECTION("relu family off the kink") {
    Tensor x = random_off_kink(4, 5, rng, 1e-2, true);
    double err = grad_check(
        [&](Tape& t) { return mean_all(t, square(t, relu(t, x))); }, {x});
    CHECK(err < 1e-4);
    double err2 = grad_check(
        [&](Tape& t) { return mean_all(t, square(t, leaky_relu(t, x, 0.07))); }, {x});
    CHECK(err2 < 1e-4);
    double err3 = grad_check(
        [&](Tape& t) { return mean_all(t, abs(t, x)); }, {x});
    CHECK(err3 < 1e-4);
  }
  SECTION("broadcast and reductions") {
    Tensor x = random_tensor(4, 3, rng, -1, 1, true);
    Tensor b = random_tensor(1, 3, rng, -1, 1, true);
    double err = grad_check(
        [&](Tape& t) {
          Tensor y = add_rowvec(t, x, b);
          Tensor m = mean_rows(t, y);
          Tensor r = repeat_row(t, m, 4);
          return mean_all(t, square(t, add(t, y, r)));
        },
        {x, b});
    CHECK(err < 1e-6);
  }
  SECTION("max_rows away from ties") {
    Tensor x = Tensor::from({{1, 5}, {3, 2}, {-2, 0}});
    x.set_requires_grad(true);
    Tape t0;
    Tensor mr = max_rows(t0, x);
    CHECK(mr.at(0, 0) == 3.0);
    CHECK(mr.at(0, 1) == 5.0);
    double err = grad_check(
        [&](Tape& t) { return mean_all(t, square(t, max_rows(t, x))); }, {x});
    CHECK(err < 1e-6);
  }
  SECTION("reshape") {
    Tensor x = random_tensor(2, 6, rng, -1, 1, true);
    double err = grad_check(
        [&](Tape& t) { return mean_all(t, square(t, reshape(t, x, 3, 4))); }, {x});
    CHECK(err < 1e-6);
  }
}

TEST_CASE("group_norm semantics") {
  Tape tape;
  Tensor gamma = Tensor::full(1, 4, 1.0);
  Tensor beta(1, 4);

  SECTION("constant group collapses to zero") {
    Tensor x = Tensor::from({{3, 3, 7, 7}});
    Tensor y = group_norm(tape, x, 2, 1e-5, gamma, beta);
    for (int j = 0; j < 4; ++j) CHECK(std::fabs(y.at(0, j)) < 1e-9);
  }

  SECTION("groups=1 standardizes each row") {
    Rng rng(5);
    Tensor x = random_tensor(3, 4, rng, -2, 2);
    Tensor y = group_norm(tape, x, 1, 1e-10, gamma, beta);
    for (int i = 0; i < 3; ++i) {
      double mu = 0.0, var = 0.0;
      for (int j = 0; j < 4; ++j) mu += y.at(i, j);
      mu /= 4;
      for (int j = 0; j < 4; ++j) var += (y.at(i, j) - mu) * (y.at(i, j) - mu);
      var /= 4;
      CHECK(std::fabs(mu) < 1e-9);
      CHECK(std::fabs(var - 1.0) < 1e-6);
    }
  }

  SECTION("indivisible group count is a configuration error") {
    REQUIRE_THROWS_AS(group_norm(tape, Tensor(2, 4), 3, 1e-5, gamma, beta), ConfigError);
  }
}

TEST_CASE("group_norm gradients match finite differences") {
  Rng rng(7);
  Tensor x = random_tensor(4, 8, rng, -1, 1, true);
  Tensor gamma = random_tensor(1, 8, rng, 0.5, 1.5, true);
  Tensor beta = random_tensor(1, 8, rng, -0.5, 0.5, true);
  double err = grad_check(
      [&](Tape& t) {
        Tensor y = group_norm(t, x, 2, 1e-5, gamma, beta);
        return mean_all(t, square(t, y));
      },
      {x, gamma, beta});
  CHECK(err < 1e-4);
}

TEST_CASE("batch_norm_1d semantics") {
  SECTION("training standardizes columns") {
    // Column with mean 5, population variance 4.
    Tensor x = Tensor::from({{3}, {7}, {3}, {7}});
    Tensor gamma = Tensor::full(1, 1, 1.0);
    Tensor beta(1, 1);
    RunningStats stats(1);
    Tape tape;
    const double eps = 1e-5;
    Tensor y = batch_norm_1d(tape, x, gamma, beta, stats, true, 0.1, eps);
    double mu = 0.0, var = 0.0;
    for (int i = 0; i < 4; ++i) mu += y.at(i, 0);
    mu /= 4;
    for (int i = 0; i < 4; ++i) var += (y.at(i, 0) - mu) * (y.at(i, 0) - mu);
    var /= 4;
    CHECK(std::fabs(mu) < 1e-12);
    // Normalized variance is v/(v+eps); with eps=1e-5 that sits 2.5e-6 below 1.
    CHECK(std::fabs(var - 4.0 / (4.0 + eps)) < 1e-9);
    CHECK(std::fabs(var - 1.0) < 1e-5);
    // Running stats moved toward the batch.
    CHECK(stats.mean.at(0, 0) == Catch::Approx(0.5));
  }

  SECTION("eval mode with unit running stats is identity within eps") {
    Rng rng(9);
    Tensor x = random_tensor(5, 3, rng, -1, 1);
    Tensor gamma = Tensor::full(1, 3, 1.0);
    Tensor beta(1, 3);
    RunningStats stats(3);  // mean 0, var 1
    Tape tape;
    Tensor y = batch_norm_1d(tape, x, gamma, beta, stats, false);
    CHECK(testsup::max_abs_diff(x, y) < 1e-5);
  }

  SECTION("degenerate training batch") {
    Tensor gamma = Tensor::full(1, 2, 1.0);
    Tensor beta(1, 2);
    RunningStats stats(2);
    Tape tape;
    REQUIRE_THROWS_AS(batch_norm_1d(tape, Tensor(1, 2), gamma, beta, stats, true),
                      NumericalError);
  }

  SECTION("training gradients match finite differences") {
    Rng rng(13);
    Tensor x = random_tensor(8, 3, rng, -1, 1, true);
    Tensor gamma = random_tensor(1, 3, rng, 0.5, 1.5, true);
    Tensor beta = random_tensor(1, 3, rng, -0.5, 0.5, true);
    double err = grad_check(
        [&](Tape& t) {
          RunningStats stats(3);
          Tensor y = batch_norm_1d(t, x, gamma, beta, stats, true);
          return mean_all(t, square(t, y));
        },
        {x, gamma, beta});
    CHECK(err < 1e-4);
  }

  SECTION("eval gradients match finite differences") {
    Rng rng(17);
    Tensor x = random_tensor(4, 3, rng, -1, 1, true);
    Tensor gamma = random_tensor(1, 3, rng, 0.5, 1.5, true);
    Tensor beta = random_tensor(1, 3, rng, -0.5, 0.5, true);
    RunningStats stats(3);
    stats.mean = Tensor::from({{0.2, -0.1, 0.4}});
    stats.var = Tensor::from({{1.5, 0.7, 2.0}});
    double err = grad_check(
        [&](Tape& t) {
          Tensor y = batch_norm_1d(t, x, gamma, beta, stats, false);
          return mean_all(t, square(t, y));
        },
        {x, gamma, beta});
    CHECK(err < 1e-6);
  }
}

TEST_CASE("grad_check analytic anchors") {
  SECTION("sum of squares") {
    Tensor x = Tensor::from({{1, 2, 3}});
    x.set_requires_grad(true);
    x.zero_grad();
    Tape tape;
    Tensor loss = sum_all(tape, square(tape, x));
    tape.backward_from(loss);
    CHECK(x.grad()[0] == Catch::Approx(2.0));
    CHECK(x.grad()[1] == Catch::Approx(4.0));
    CHECK(x.grad()[2] == Catch::Approx(6.0));
    double err = grad_check(
        [&](Tape& t) { return sum_all(t, square(t, x)); }, {x});
    CHECK(err < 1e-8);
  }
  SECTION("sum of relu on strictly positive input") {
    Tensor x = Tensor::from({{0.5, 1.5, 2.5}});
    x.set_requires_grad(true);
    x.zero_grad();
    Tape tape;
    Tensor loss = sum_all(tape, relu(tape, x));
    tape.backward_from(loss);
    for (int j = 0; j < 3; ++j) CHECK(x.grad()[j] == 1.0);
    double err = grad_check(
        [&](Tape& t) { return sum_all(t, relu(t, x)); }, {x});
    CHECK(err < 1e-10);
  }
  SECTION("h out of range is rejected") {
    Tensor x = Tensor::from({{1.0}});
    x.set_requires_grad(true);
    REQUIRE_THROWS_AS(grad_check([&](Tape& t) { return sum_all(t, x); }, {x}, 1e-2),
                      ConfigError);
  }
}

TEST_CASE("gradient linearity: backward of a sum equals sum of backwards") {
  Rng rng(31);
  Tensor a = random_tensor(4, 4, rng, -1, 1, true);
  Tensor b = random_tensor(4, 4, rng, -1, 1, true);

  auto loss1 = [&](Tape& t) { return mean_all(t, square(t, matmul(t, a, b))); };
  auto loss2 = [&](Tape& t) { return mean_all(t, abs(t, add(t, a, b))); };

  a.zero_grad();
  b.zero_grad();
  {
    Tape t;
    Tensor l = add(t, loss1(t), loss2(t));
    t.backward_from(l);
  }
  std::vector<double> ga_sum = a.grad(), gb_sum = b.grad();

  a.zero_grad();
  b.zero_grad();
  {
    Tape t;
    Tensor l = loss1(t);
    t.backward_from(l);
  }
  std::vector<double> ga1 = a.grad(), gb1 = b.grad();
  a.zero_grad();
  b.zero_grad();
  {
    Tape t;
    Tensor l = loss2(t);
    t.backward_from(l);
  }
  for (std::size_t i = 0; i < ga_sum.size(); ++i) {
    CHECK(std::fabs(ga_sum[i] - (ga1[i] + a.grad()[i])) <= 1e-12);
    CHECK(std::fabs(gb_sum[i] - (gb1[i] + b.grad()[i])) <= 1e-12);
  }
}

TEST_CASE("zero_grad then backward on a constant leaves grads zero") {
  Tensor p(3, 3, true);
  p.data()[4] = 2.0;
  p.zero_grad();
  Tape tape;
  Tensor c = Tensor::full(2, 2, 1.5);  // constant, no grad
  Tensor loss = mean_all(tape, c);
  tape.backward_from(loss);
  for (double g : p.grad()) CHECK(g == 0.0);
}

TEST_CASE("replaying a forward pass is bit identical") {
  Rng rng(43);
  Tensor x = random_tensor(6, 6, rng, -1, 1, true);
  Tensor w = random_tensor(6, 6, rng, -1, 1, true);
  Tensor g = random_tensor(1, 6, rng, 0.5, 1.5, true);
  Tensor b = random_tensor(1, 6, rng, -0.5, 0.5, true);
  auto forward = [&](Tape& t) {
    Tensor y = matmul(t, x, w);
    y = group_norm(t, y, 2, 1e-5, g, b);
    y = relu(t, y);
    return matmul(t, y, w);
  };
  Tape t1, t2;
  Tensor y1 = forward(t1);
  Tensor y2 = forward(t2);
  CHECK(bit_equal(y1, y2));
}

TEST_CASE("grad buffers match invariants") {
  Tensor t(3, 4);
  CHECK(t.data().size() == 12);
  CHECK(t.grad().size() == 12);
  t.grad()[3] = 1.0;
  t.zero_grad();
  for (double g : t.grad()) CHECK(g == 0.0);
}
