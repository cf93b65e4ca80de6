#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "bilayer/grad_check.hpp"
#include "bilayer/losses.hpp"
#include "test_support.hpp"

using namespace bilayer;
using testsup::random_off_kink;
using testsup::random_tensor;

namespace {

// A hand-built output/ground-truth pair over 3 joints and 5 mesh vertices.
struct Fixture {
  NetworkOutput out;
  GroundTruth gt;

  explicit Fixture(Rng& rng, bool perfect = false) {
    out.v_m_hat = random_tensor(5, 3, rng, -1, 1, true);
    out.v_s_hat = random_tensor(3, 3, rng, -1, 1, true);
    out.v_m_j3d = random_tensor(3, 3, rng, -1, 1, true);
    out.cam = Tensor::from({{1.1, 0.02, -0.05}});
    out.cam.set_requires_grad(true);
    out.theta_hat = random_tensor(1, 9, rng, -0.4, 0.4, true);
    out.beta_hat = random_tensor(1, 10, rng, -0.4, 0.4, true);
    out.has_skeleton = true;
    if (perfect) {
      gt.v_m = out.v_m_hat.clone();
      gt.v_s = out.v_s_hat.clone();
      // Perfect 2D supervision must match both projected estimates, which
      // requires the two 3D estimates to agree.
      out.v_m_j3d = out.v_s_hat;
      gt.joints2d = project_weak_perspective(out.v_s_hat, out.camera());
      gt.theta_flat = out.theta_hat.clone();
      gt.beta = out.beta_hat.clone();
    } else {
      gt.v_m = random_tensor(5, 3, rng);
      gt.v_s = random_tensor(3, 3, rng);
      gt.joints2d = random_tensor(3, 2, rng);
      gt.theta_flat = random_tensor(1, 9, rng);
      gt.beta = random_tensor(1, 10, rng);
    }
  }
};

}  // namespace

TEST_CASE("l1_mean") {
  Tape t;
  Tensor a = Tensor::from({{1, 2}});
  CHECK(l1_mean(t, a, a.clone()).value() == 0.0);
  CHECK(l1_mean(t, Tensor::from({{1, 2}}), Tensor::from({{0, 0}})).value() ==
        Catch::Approx(1.5));

  Rng rng(3);
  Tensor pred = random_off_kink(4, 3, rng, 0.05, true);
  Tensor target(4, 3);  // zeros; pred entries stay away from them
  pred.zero_grad();
  {
    Tape tape;
    Tensor loss = l1_mean(tape, pred, target);
    tape.backward_from(loss);
  }
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double expect = (pred.data()[i] > 0 ? 1.0 : -1.0) / 12.0;
    CHECK(pred.grad()[i] == Catch::Approx(expect));
  }
  double err = grad_check(
      [&](Tape& tape) { return l1_mean(tape, pred, target); }, {pred});
  CHECK(err < 1e-6);
}

TEST_CASE("mse_mean") {
  Tape t;
  Tensor a = Tensor::from({{3}});
  CHECK(mse_mean(t, a, a.clone()).value() == 0.0);
  CHECK(mse_mean(t, Tensor::from({{3}}), Tensor::from({{1}})).value() == Catch::Approx(4.0));

  Rng rng(5);
  Tensor pred = random_tensor(3, 4, rng, -1, 1, true);
  Tensor target = random_tensor(3, 4, rng);
  pred.zero_grad();
  {
    Tape tape;
    Tensor loss = mse_mean(tape, pred, target);
    tape.backward_from(loss);
  }
  for (std::size_t i = 0; i < pred.size(); ++i) {
    CHECK(pred.grad()[i] ==
          Catch::Approx(2.0 * (pred.data()[i] - target.data()[i]) / 12.0));
  }
}

TEST_CASE("focal regression analytics") {
  FocalConfig cfg;  // alpha 1, gamma 1, tau 0.99, min truncation

  SECTION("anchors") {
    CHECK(focal_regression_value(0.0, cfg) == 0.0);
    CHECK(focal_regression_value(0.5, cfg) == Catch::Approx(0.34657359).margin(1e-5));
  }

  SECTION("monotone on (0, tau/alpha)") {
    double prev = 0.0;
    for (int i = 1; i <= 1000; ++i) {
      const double L = cfg.tau * i / 1001.0;
      const double v = focal_regression_value(L, cfg);
      CHECK(v > prev);
      prev = v;
    }
  }

  SECTION("quadratic behavior for small losses") {
    const double L = 1e-3;
    const double v = focal_regression_value(L, cfg);
    CHECK(std::fabs(v - L * L) / (L * L) < 0.01);
  }

  SECTION("derivative positive below the truncation point, zero above") {
    const double h = 1e-7;
    for (double L : {0.1, 0.5, 0.9}) {
      const double d =
          (focal_regression_value(L + h, cfg) - focal_regression_value(L - h, cfg)) / (2 * h);
      CHECK(d > 0.0);
    }
    for (double L : {0.995, 1.5, 10.0}) {
      const double d =
          (focal_regression_value(L + h, cfg) - focal_regression_value(L - h, cfg)) / (2 * h);
      CHECK(d == 0.0);
    }
  }

  SECTION("tape gradient matches finite differences") {
    Tensor l1(1, 1, true);
    l1.data()[0] = 0.37;
    double err = grad_check(
        [&](Tape& t) { return focal_regression(t, l1, cfg); }, {l1});
    CHECK(err < 1e-6);
    // gamma != 1 exercises the power-rule branch
    FocalConfig g2 = cfg;
    g2.gamma = 2.0;
    double err2 = grad_check(
        [&](Tape& t) { return focal_regression(t, l1, g2); }, {l1});
    CHECK(err2 < 1e-6);
  }

  SECTION("the as-printed truncation freezes small losses instead") {
    FocalConfig printed = cfg;
    printed.truncate_from_above = false;
    // Below tau the log argument is the constant 1 - tau.
    const double v1 = focal_regression_value(0.2, printed);
    CHECK(v1 == Catch::Approx(-0.2 * std::log(1.0 - 0.99)));
    // Distinct from the min reading.
    CHECK(v1 != Catch::Approx(focal_regression_value(0.2, cfg)));
  }

  SECTION("negative input is rejected") {
    REQUIRE_THROWS_AS(focal_regression_value(-0.1, cfg), InputError);
  }
}

TEST_CASE("total loss composition") {
  Rng rng(7);
  LossWeights w;
  FocalConfig focal;
  FocalSwitches sw;

  SECTION("perfect prediction gives zero everywhere") {
    Fixture f(rng, true);
    Tape t;
    LossResult res = total_loss(t, f.out, f.gt, w, focal, sw);
    CHECK(res.total.value() == Catch::Approx(0.0).margin(1e-12));
    for (const auto& term : res.terms) {
      if (term.active) CHECK(term.raw == Catch::Approx(0.0).margin(1e-12));
    }
  }

  SECTION("masking 3d leaves exactly the 2d and parametric terms") {
    Fixture f(rng);
    f.gt.has_3d = false;
    Tape t;
    LossResult res = total_loss(t, f.out, f.gt, w, focal, sw);
    for (const auto& term : res.terms) {
      const bool expect_active =
          term.name == "mj2d" || term.name == "sj2d" || term.name == "theta" ||
          term.name == "beta";
      CHECK(term.active == expect_active);
    }
  }

  SECTION("masking both supervision signals is an error") {
    Fixture f(rng);
    f.gt.has_3d = false;
    f.gt.has_2d = false;
    Tape t;
    REQUIRE_THROWS_AS(total_loss(t, f.out, f.gt, w, focal, sw), InputError);
  }

  SECTION("total recomposes as the weight / term dot product") {
    Fixture f(rng);
    Tape t;
    LossResult res = total_loss(t, f.out, f.gt, w, focal, sw);
    double dot = 0.0;
    for (const auto& term : res.terms) {
      if (term.active) dot += term.weight * term.raw;
    }
    CHECK(std::fabs(dot - res.total.value()) <= 1e-12);
  }

  SECTION("focal replaces L1 on the 3d pose terms with coefficient folded into weights") {
    Fixture f(rng);
    Tape t;
    LossResult with_fl = total_loss(t, f.out, f.gt, w, focal, sw);
    FocalSwitches off;
    off.use_focal = false;
    LossResult without = total_loss(t, f.out, f.gt, w, focal, off);
    // Weights carry the focal coefficient only when focal is on.
    for (const auto& term : with_fl.terms) {
      if (term.name == "mj3d" || term.name == "s") CHECK(term.weight == w.focal_coeff);
    }
    for (const auto& term : without.terms) {
      if (term.name == "mj3d" || term.name == "s") CHECK(term.weight == 1.0);
    }
    // The raw L1 value of the focal-off run feeds the focal transform.
    const double l1 = without.term("s");
    CHECK(with_fl.term("s") == Catch::Approx(focal_regression_value(l1, focal)));
  }

  SECTION("gradient reaches every active output simultaneously") {
    Fixture f(rng);
    f.out.v_m_hat.zero_grad();
    f.out.v_s_hat.zero_grad();
    f.out.v_m_j3d.zero_grad();
    f.out.cam.zero_grad();
    f.out.theta_hat.zero_grad();
    f.out.beta_hat.zero_grad();
    Tape t;
    LossResult res = total_loss(t, f.out, f.gt, w, focal, sw);
    t.backward_from(res.total);
    auto nonzero = [](const Tensor& g) {
      double s = 0.0;
      for (double v : g.grad()) s += std::fabs(v);
      return s > 0.0;
    };
    CHECK(nonzero(f.out.v_m_hat));
    CHECK(nonzero(f.out.v_s_hat));
    CHECK(nonzero(f.out.v_m_j3d));
    CHECK(nonzero(f.out.cam));
    CHECK(nonzero(f.out.theta_hat));
    CHECK(nonzero(f.out.beta_hat));
  }

  SECTION("scaling all weights scales the total and the gradients") {
    Fixture f(rng);
    const double c = 3.7;
    f.out.v_m_hat.zero_grad();
    Tape t1;
    LossResult base = total_loss(t1, f.out, f.gt, w, focal, sw);
    t1.backward_from(base.total);
    std::vector<double> g1 = f.out.v_m_hat.grad();

    LossWeights scaled = w;
    scaled.w_m *= c;
    scaled.w_mj3d *= c;
    scaled.w_mj2d *= c;
    scaled.w_s *= c;
    scaled.w_sj2d *= c;
    scaled.w_theta *= c;
    scaled.lambda_beta *= c;
    f.out.v_m_hat.zero_grad();
    Tape t2;
    LossResult res2 = total_loss(t2, f.out, f.gt, scaled, focal, sw);
    t2.backward_from(res2.total);

    CHECK(std::fabs(res2.total.value() - c * base.total.value()) /
              std::fabs(c * base.total.value()) <=
          1e-12);
    for (std::size_t i = 0; i < g1.size(); ++i) {
      if (g1[i] != 0.0) {
        CHECK(std::fabs(f.out.v_m_hat.grad()[i] - c * g1[i]) / std::fabs(c * g1[i]) <= 1e-12);
      }
    }
  }

  SECTION("skeleton terms are inactive for mesh-only outputs") {
    Fixture f(rng);
    f.out.has_skeleton = false;
    Tape t;
    LossResult res = total_loss(t, f.out, f.gt, w, focal, sw);
    for (const auto& term : res.terms) {
      if (term.name == "s" || term.name == "sj2d") CHECK_FALSE(term.active);
    }
  }
}
