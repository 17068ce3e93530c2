#include "octray/integrators.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <vector>

#include "test_util.hpp"

namespace octray {
namespace {

using testing::rel_close;

// Smooth test medium: beta(x) = 1 + x/2 + sin(x)/4, gamma(x) = 1 + cos(2x)/2.
double beta_s(double x) { return 1.0 + 0.5 * x + 0.25 * std::sin(x); }
double gamma_s(double x) { return 1.0 + 0.5 * std::cos(2 * x); }
double beta_integral(double a, double b) {
  auto F = [](double x) { return x + 0.25 * x * x - 0.25 * std::cos(x); };
  return F(b) - F(a);
}

// Reference solution: A in closed form, B = int gamma(s) exp(-int_s^x2 beta)
// by composite 5-point Gauss-Legendre quadrature.
ChannelSegment smooth_reference(double x1, double x2) {
  static const double nodes[5] = {-0.9061798459386640, -0.5384693101056831, 0.0,
                                  0.5384693101056831, 0.9061798459386640};
  static const double weights[5] = {0.2369268850561891, 0.4786286704993665, 0.5688888888888889,
                                    0.4786286704993665, 0.2369268850561891};
  const int panels = 4000;
  const double h = (x2 - x1) / panels;
  double B = 0;
  for (int p = 0; p < panels; ++p) {
    const double m = x1 + (p + 0.5) * h;
    for (int q = 0; q < 5; ++q) {
      const double s = m + 0.5 * h * nodes[q];
      B += 0.5 * h * weights[q] * gamma_s(s) * std::exp(-beta_integral(s, x2));
    }
  }
  return {std::exp(-beta_integral(x1, x2)), B};
}

CoefficientField smooth_field() {
  return CoefficientField::scalar([](double x) { return Coefficients{beta_s(x), gamma_s(x)}; });
}

TEST(Tableaus, AreConsistent) {
  for (Scheme s : {Scheme::explicit_euler, Scheme::heun2, Scheme::heun3, Scheme::rk4})
    EXPECT_TRUE(tableau_for(s).consistent()) << scheme_name(s);
}

TEST(Schemes, ParseRoundTrip) {
  for (Scheme s : {Scheme::explicit_euler, Scheme::heun2, Scheme::heun3, Scheme::rk4,
                   Scheme::gauss2, Scheme::simpson})
    EXPECT_EQ(parse_scheme(scheme_name(s)), s);
  EXPECT_FALSE(parse_scheme("leapfrog").has_value());
}

TEST(StepExplicitRK, EmptyMediumIsIdentity) {
  const auto f = CoefficientField::constant(0, 0);
  for (Scheme s : {Scheme::explicit_euler, Scheme::heun2, Scheme::heun3, Scheme::rk4}) {
    const auto r = step_explicit_rk(f, 0.0, 3.0, tableau_for(s), 0.5);
    ASSERT_TRUE(r.has_value());
    EXPECT_EQ((*r)[0], (ChannelSegment{1, 0}));
  }
  EXPECT_EQ(step_gauss2(f, 0.0, 3.0)[1], (ChannelSegment{1, 0}));
  EXPECT_EQ(step_simpson(f, 0.0, 3.0)[2], (ChannelSegment{1, 0}));
}

TEST(StepExplicitRK, EulerIsOneMinusBetaDx) {
  const auto f = CoefficientField::constant(0.4, 0.7);
  const auto r = step_explicit_rk(f, 1.0, 2.0, explicit_euler_tableau(), 0.5);
  ASSERT_TRUE(r.has_value());
  EXPECT_DOUBLE_EQ((*r)[0].A, 0.6);
  EXPECT_DOUBLE_EQ((*r)[0].B, 0.7);
}

TEST(StepExplicitRK, Rk4IsTaylorTruncation) {
  const auto f = CoefficientField::constant(0.3, 0.0);
  const auto r = step_explicit_rk(f, 0.0, 1.0, rk4_tableau(), 0.5);
  ASSERT_TRUE(r.has_value());
  double taylor = 0, term = 1;
  for (int k = 0; k <= 4; ++k) {
    taylor += term;
    term *= -0.3 / (k + 1);
  }
  EXPECT_NEAR((*r)[0].A, taylor, 1e-12);
}

TEST(StepExplicitRK, ThresholdRequestsSplit) {
  const auto f = CoefficientField::constant(2.0, 1.0);
  EXPECT_FALSE(step_explicit_rk(f, 0.0, 1.0, rk4_tableau(), 0.5).has_value());
  EXPECT_EQ(f.evaluations(), 1u);  // abandoned after the first node
  EXPECT_TRUE(step_explicit_rk(f, 0.0, 0.25, rk4_tableau(), 0.5).has_value());
}

TEST(StepExplicitRK, NonFiniteFieldThrows) {
  const auto f = CoefficientField::constant(std::nan(""), 1.0);
  EXPECT_THROW(step_explicit_rk(f, 0.0, 1.0, rk4_tableau(), 0.5), IntegratorError);
  EXPECT_THROW(step_gauss2(f, 0.0, 1.0), IntegratorError);
  const auto g = CoefficientField::constant(1.0, INFINITY);
  EXPECT_THROW(step_simpson(g, 0.0, 1.0), IntegratorError);
}

TEST(StepGauss2, IsPadeApproximantForConstantBeta) {
  const auto f = CoefficientField::constant(1.0, 0.0);
  const auto r = step_gauss2(f, 0.0, 0.1);
  const double a1 = 0.1 * 2.0 / 4.0, a2 = 0.01 / 12.0;
  EXPECT_NEAR(r[0].A, (1 - a1 + a2) / (1 + a1 + a2), 1e-16);
  // The (2,2) Pade error of exp(-z) is z^5/720 (1 - z + O(z^2)).
  const double z = 0.1;
  const double err = std::abs(r[0].A - std::exp(-z));
  EXPECT_LE(err, std::pow(z, 5) / 720.0);
  EXPECT_GE(err, (1 - z) * std::pow(z, 5) / 720.0);
}

TEST(StepGauss2, LargeDxGoesToOne) {
  const auto f = CoefficientField::constant(1.0, 0.5);
  double prev = 0;
  for (double dx : {10.0, 100.0, 1e4, 1e8, 1e200}) {
    const auto r = step_gauss2(f, 0.0, dx);
    EXPECT_TRUE(std::isfinite(r[0].A) && std::isfinite(r[0].B));
    EXPECT_GT(r[0].A, prev);
    prev = r[0].A;
  }
  EXPECT_NEAR(prev, 1.0, 1e-12);
}

TEST(StepGauss2, MatchesReferenceToFifthOrderLocally) {
  const auto f = smooth_field();
  double prev = 0;
  for (double h : {0.2, 0.1, 0.05}) {
    const auto r = step_gauss2(f, 0.3, 0.3 + h);
    const auto ref = smooth_reference(0.3, 0.3 + h);
    const double err = std::abs(r[0].A - ref.A) + std::abs(r[0].B - ref.B);
    if (prev > 0) {
      EXPECT_GT(prev / err, 20.0);  // about 2^5
    }
    prev = err;
  }
}

TEST(StepSimpson, ConstantBetaExact) {
  const auto f = CoefficientField::constant(3.7, 0.0);
  for (double dx : {0.01, 1.0, 50.0}) {
    const auto r = step_simpson(f, 0.0, dx);
    EXPECT_TRUE(rel_close(r[0].A, std::exp(-3.7 * dx), 1e-14, 1e-300));
  }
}

TEST(StepSimpson, TransparentMediumEmitsGammaDx) {
  const auto f = CoefficientField::constant(0.0, 0.8);
  const auto r = step_simpson(f, 2.0, 4.5);
  EXPECT_DOUBLE_EQ(r[0].A, 1.0);
  EXPECT_NEAR(r[0].B, 2.0, 1e-15);
}

TEST(StepSimpson, LinearBetaExact) {
  const auto f = CoefficientField::scalar([](double x) { return Coefficients{x, 0.0}; });
  const auto r = step_simpson(f, 0.0, 1.0);
  EXPECT_NEAR(r[0].A, std::exp(-0.5), 1e-15);
}

TEST(StepSimpson, StaysPhysicalForHugeDx) {
  const auto f = smooth_field();
  for (double dx : {1.0, 10.0, 1000.0}) {
    const auto r = step_simpson(f, 0.0, dx);
    EXPECT_GE(r[0].A, 0.0);
    EXPECT_LE(r[0].A, 1.0);
    EXPECT_GE(r[0].B, 0.0);
  }
}

TEST(Segeval, BelowThresholdEqualsOneStep) {
  const auto f = CoefficientField::constant(0.2, 0.3);
  const IntegratorConfig cfg{Scheme::rk4, 0.5, 40};
  const auto r = segeval(f, 0.0, 1.0, cfg);
  const auto s = step_explicit_rk(f, 0.0, 1.0, rk4_tableau(), 0.5);
  EXPECT_EQ(r.depth, 0);
  EXPECT_EQ(r.steps, 1u);
  EXPECT_EQ(r.seg, *s);
}

TEST(Segeval, DepthFromThreshold) {
  const auto f = CoefficientField::constant(10.0, 0.0);
  for (Scheme s : {Scheme::explicit_euler, Scheme::rk4, Scheme::gauss2, Scheme::simpson}) {
    const auto r = segeval(f, 0.0, 1.0, IntegratorConfig{s, 0.5, 40});
    EXPECT_EQ(r.depth, 5) << scheme_name(s);
    EXPECT_EQ(r.steps, 32u);
  }
}

TEST(Segeval, Rk4ConstantBetaMatchesStabilityPolynomial) {
  // 32 rk4 steps of z = 10/32 give R(z)^32 with R the degree-4 Taylor polynomial.
  const auto f = CoefficientField::constant(10.0, 0.0);
  const auto r = segeval(f, 0.0, 1.0, IntegratorConfig{Scheme::rk4, 0.5, 40});
  const double z = 10.0 / 32;
  const double R = 1 - z + z * z / 2 - z * z * z / 6 + z * z * z * z / 24;
  EXPECT_TRUE(rel_close(r.seg[0].A, std::pow(R, 32), 1e-12));
  const double rel = std::abs(r.seg[0].A - std::exp(-10.0)) / std::exp(-10.0);
  EXPECT_GT(rel, 1e-4);  // fourth-order truncation at this step size
  EXPECT_LT(rel, 2e-3);
}

TEST(Segeval, SimpsonConstantBetaExactWithSplitting) {
  const auto f = CoefficientField::constant(10.0, 0.0);
  const auto r = segeval(f, 0.0, 1.0, IntegratorConfig{Scheme::simpson, 0.5, 40});
  EXPECT_TRUE(rel_close(r.seg[0].A, std::exp(-10.0), 1e-13));
}

TEST(Segeval, ConstantMediumConvergesForAllSchemes) {
  const double beta = 1.3, gamma = 0.6, dx = 2.0;
  const auto exact = segment_from_constant(beta, gamma, dx);
  const auto f = CoefficientField::constant(beta, gamma);
  for (Scheme s : {Scheme::explicit_euler, Scheme::heun2, Scheme::heun3, Scheme::rk4,
                   Scheme::gauss2, Scheme::simpson}) {
    double prev = INFINITY;
    for (double c : {0.5, 0.05, 0.005}) {
      const auto r = segeval(f, 0.0, dx, IntegratorConfig{s, c, 40});
      const double err = std::abs(r.seg[0].A - exact.A) + std::abs(r.seg[0].B - exact.B);
      EXPECT_LT(err, prev) << scheme_name(s) << " c=" << c;
      prev = err;
    }
    EXPECT_LT(prev, 1e-2) << scheme_name(s);
  }
}

double observed_order(Scheme s) {
  const auto f = smooth_field();
  const double x1 = 0.0, x2 = 3.0;
  const auto ref = smooth_reference(x1, x2);
  std::vector<double> lc, le;
  for (double c = 0.4; c > 0.4 / 64; c /= 2) {
    const auto r = segeval(f, x1, x2, IntegratorConfig{s, c, 40});
    const double err = std::abs(r.seg[0].A - ref.A) + std::abs(r.seg[0].B - ref.B);
    lc.push_back(std::log2(c));
    le.push_back(std::log2(err));
  }
  // least-squares slope of log error against log c_rk
  const double n = static_cast<double>(lc.size());
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < lc.size(); ++i) {
    sx += lc[i];
    sy += le[i];
    sxx += lc[i] * lc[i];
    sxy += lc[i] * le[i];
  }
  return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

TEST(Segeval, ConvergenceOrders) {
  EXPECT_NEAR(observed_order(Scheme::explicit_euler), 1.0, 0.5);
  EXPECT_NEAR(observed_order(Scheme::heun2), 2.0, 0.5);
  EXPECT_NEAR(observed_order(Scheme::heun3), 3.0, 0.5);
  EXPECT_NEAR(observed_order(Scheme::rk4), 4.0, 0.5);
  EXPECT_NEAR(observed_order(Scheme::gauss2), 4.0, 0.5);
}

TEST(Segeval, InvariantUnderManualMidpointSplit) {
  const auto f = smooth_field();
  for (Scheme s : {Scheme::heun3, Scheme::rk4, Scheme::gauss2, Scheme::simpson}) {
    const IntegratorConfig cfg{s, 0.1, 40};
    // at this c_rk the whole interval always splits at least once
    const auto whole = segeval(f, 0.0, 2.0, cfg);
    ASSERT_GE(whole.depth, 1);
    const auto near = segeval(f, 1.0, 2.0, cfg);
    const auto far = segeval(f, 0.0, 1.0, cfg);
    const auto joined = aggregate(near.seg, far.seg);
    for (int ch = 0; ch < kChannels; ++ch) {
      EXPECT_TRUE(rel_close(whole.seg[ch].A, joined[ch].A, 1e-12));
      EXPECT_TRUE(rel_close(whole.seg[ch].B, joined[ch].B, 1e-12));
    }
  }
}

TEST(Segeval, PhysicalBoundsForNonNegativeBeta) {
  const auto f = smooth_field();
  for (Scheme s : {Scheme::gauss2, Scheme::simpson}) {
    for (double c : {4.0, 0.5, 0.05}) {
      const auto r = segeval(f, 0.0, 5.0, IntegratorConfig{s, c, 40});
      EXPECT_GT(r.seg[0].A, 0.0);
      EXPECT_LE(r.seg[0].A, 1.0);
    }
  }
}

TEST(Segeval, EvaluationsLinearInLeaves) {
  for (Scheme s : {Scheme::explicit_euler, Scheme::rk4, Scheme::gauss2, Scheme::simpson}) {
    const auto f = smooth_field();
    const auto r = segeval(f, 0.0, 4.0, IntegratorConfig{s, 0.05, 40});
    // each leaf is one full step; each internal node costs at most one
    // abandoned partial step
    const std::uint64_t per_step = s == Scheme::rk4 ? 3 : s == Scheme::explicit_euler ? 1
                                   : s == Scheme::gauss2 ? 2 : 3;
    EXPECT_LE(f.evaluations(), per_step * r.steps + per_step * (r.steps - 1)) << scheme_name(s);
    EXPECT_GE(f.evaluations(), per_step * r.steps);
  }
}

TEST(Segeval, DepthLimitRaises) {
  const auto f = CoefficientField::constant(1e30, 0.0);
  EXPECT_THROW(segeval(f, 0.0, 1.0, IntegratorConfig{Scheme::rk4, 0.5, 40}), IntegratorError);
  EXPECT_THROW(segeval(f, 0.0, 1.0, IntegratorConfig{Scheme::rk4, 0.5, 3}), IntegratorError);
}

TEST(Segeval, InvalidConfigRejected) {
  const auto f = CoefficientField::constant(1, 1);
  EXPECT_THROW(segeval(f, 0.0, 1.0, IntegratorConfig{Scheme::rk4, 0.0, 40}), std::invalid_argument);
  EXPECT_THROW(segeval(f, 0.0, 1.0, IntegratorConfig{Scheme::rk4, 0.5, 0}), std::invalid_argument);
  EXPECT_THROW(segeval(f, 1.0, 0.0, IntegratorConfig{}), std::invalid_argument);
}

TEST(Segeval, ChannelsIndependent) {
  const CoefficientField f([](double x) {
    return ChannelCoefficients{Coefficients{1.0, 0.5}, Coefficients{0.0, 1.0},
                               Coefficients{beta_s(x), gamma_s(x)}};
  });
  const auto r = segeval(f, 0.0, 1.0, IntegratorConfig{Scheme::gauss2, 0.01, 40});
  const auto c0 = segment_from_constant(1.0, 0.5, 1.0);
  EXPECT_NEAR(r.seg[0].A, c0.A, 1e-9);
  EXPECT_NEAR(r.seg[0].B, c0.B, 1e-9);
  EXPECT_DOUBLE_EQ(r.seg[1].A, 1.0);
  EXPECT_NEAR(r.seg[1].B, 1.0, 1e-14);
  const auto ref = smooth_reference(0.0, 1.0);
  EXPECT_NEAR(r.seg[2].A, ref.A, 1e-9);
}

}  // namespace
}  // namespace octray
