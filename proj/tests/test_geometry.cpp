#include <gtest/gtest.h>

#include <boost/math/quadrature/gauss_kronrod.hpp>
#include <cmath>
#include <numbers>
#include <random>

#include "hkflow/geometry.hpp"

using namespace hkflow;
using std::numbers::pi;

namespace {

[[maybe_unused]] double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b, std::size_t skip = 0) {
  double m = 0.0;
  for (std::size_t i = skip; i + skip < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

MetricState round_state(double r, std::size_t n) { return MetricState::initial(make_model(ManifoldModel::round_sphere(r, n))); }

MetricState warped_round_state(double r, std::size_t n) {
  auto m = ManifoldModel::warped_sphere([r](double s) { return r * std::sin(s / r); }, pi * r, n);
  return MetricState::initial(make_model(std::move(m)));
}

}  // namespace

TEST(Laplacian, ConstantIsHarmonicOnEveryModel) {
  const auto torus = MetricState::initial(make_model(ManifoldModel::flat_torus({2 * pi, 2 * pi, 2 * pi}, 8)));
  const auto sphere = round_state(1.3, 32);
  for (auto rep : {Representation::Spectral, Representation::Grid}) {
    for (const auto* s : {&torus, &sphere}) {
      const auto lap = laplace_beltrami(*s, ScalarField::constant(*s->model, 2.5, rep));
      for (double v : lap.values) EXPECT_NEAR(v, 0.0, 1e-10);
    }
  }
}

TEST(Laplacian, TorusPlaneWave) {
  const auto s = MetricState::initial(make_model(ManifoldModel::flat_torus({2 * pi, 2 * pi, 2 * pi}, 16)));
  const auto f = sample(*s.model, [](const Point& p) { return std::cos(p.c[0]); });
  const auto lap = laplace_beltrami(s, f);
  for (std::size_t i = 0; i < f.size(); ++i) EXPECT_NEAR(lap[i], -f[i], 1e-12);
}

TEST(Laplacian, TorusScaledMetricDividesByScaleSquared) {
  auto s = MetricState::initial(make_model(ManifoldModel::flat_torus({2 * pi, 2 * pi, 2 * pi}, 8)));
  s.scale = 2.0;
  const auto f = sample(*s.model, [](const Point& p) { return std::sin(2 * p.c[1]); });
  const auto lap = laplace_beltrami(s, f);
  for (std::size_t i = 0; i < f.size(); ++i) EXPECT_NEAR(lap[i], -f[i], 1e-12);
}

TEST(Laplacian, SphereDegreeOneHarmonicSpectral) {
  const auto s = round_state(1.0, 64);
  const auto f = sample(*s.model, [](const Point& p) { return p.c[0]; });
  const auto lap = laplace_beltrami(s, f);
  for (std::size_t i = 0; i < f.size(); ++i) EXPECT_NEAR(lap[i], -3.0 * f[i], 1e-9);
}

TEST(Laplacian, SphereDegreeTwoZonalHarmonic) {
  // Zonal degree-l harmonics on S^3 are U_l(cos x) = sin((l+1)x)/sin x, eigenvalue -l(l+2)/r^2.
  const double r = 0.7;
  const auto s = round_state(r, 64);
  const auto f = sample(*s.model, [](const Point& p) {
    const double x = p.polar_angle();
    return std::sin(3 * x) / std::sin(x);
  });
  const auto lap = laplace_beltrami(s, f);
  for (std::size_t i = 0; i < f.size(); ++i) EXPECT_NEAR(lap[i], -8.0 / (r * r) * f[i], 1e-8);
}

TEST(Laplacian, SecondOrderConvergenceOfGridOperator) {
  auto err = [](std::size_t n) {
    const auto s = round_state(1.0, n);
    const auto f = sample(*s.model, [](const Point& p) { return p.c[0]; }, Representation::Grid);
    const auto lap = laplace_beltrami(s, f);
    double m = 0.0;
    for (std::size_t i = 0; i < f.size(); ++i) m = std::max(m, std::abs(lap[i] + 3.0 * f[i]));
    return m;
  };
  const double e1 = err(64), e2 = err(128), e3 = err(256);
  EXPECT_GE(std::log2(e1 / e2), 1.9);
  EXPECT_GE(std::log2(e2 / e3), 1.9);

  auto terr = [](std::size_t n) {
    const auto s = MetricState::initial(make_model(ManifoldModel::flat_torus({2 * pi, 2 * pi, 2 * pi}, n)));
    const auto f = sample(*s.model, [](const Point& p) { return std::sin(p.c[0]) * std::cos(p.c[2]); },
                          Representation::Grid);
    const auto lap = laplace_beltrami(s, f);
    double m = 0.0;
    for (std::size_t i = 0; i < f.size(); ++i) m = std::max(m, std::abs(lap[i] + 2.0 * f[i]));
    return m;
  };
  EXPECT_GE(std::log2(terr(8) / terr(16)), 1.9);
}

TEST(Laplacian, GridOperatorIsSymmetricInCellVolumeInnerProduct) {
  const auto s = warped_round_state(1.0, 48);
  std::mt19937_64 rng(3);
  std::normal_distribution<double> nd;
  ScalarField a{std::vector<double>(48), Representation::Grid}, b = a;
  for (std::size_t i = 0; i < 48; ++i) {
    a[i] = nd(rng);
    b[i] = nd(rng);
  }
  const auto w = volume_measure(s, Representation::Grid);
  const auto la = laplace_beltrami(s, a), lb = laplace_beltrami(s, b);
  double x = 0.0, y = 0.0;
  for (std::size_t i = 0; i < 48; ++i) {
    x += w[i] * la[i] * b[i];
    y += w[i] * a[i] * lb[i];
  }
  EXPECT_NEAR(x, y, 1e-9 * (std::abs(x) + 1.0));
}

TEST(Curvature, FlatTorusIsZero) {
  const auto s = MetricState::initial(make_model(ManifoldModel::flat_torus({1, 2, 3}, 4)));
  for (double v : scalar_curvature(s).values) EXPECT_EQ(v, 0.0);
}

TEST(Curvature, RoundSphereIsSixOverRSquared) {
  const auto s = round_state(0.8, 16);
  for (double v : scalar_curvature(s).values) EXPECT_NEAR(v, 6.0 / 0.64, 1e-12);
}

TEST(Curvature, WarpedRoundProfileMatchesRoundSphereAt2048) {
  for (double r : {1.0, 2.0}) {
    const auto s = warped_round_state(r, 2048);
    const double expect = 6.0 / (r * r);
    for (double v : scalar_curvature(s).values) EXPECT_NEAR(v, expect, 1e-6 * expect);
  }
}

TEST(Curvature, WarpedFormulaAgreesWithIndependentProfileDerivatives) {
  // w(s) = (sin s + 0.1 sin 3s) / 1.3 on [0, pi]: R = -4 w''/w + 2(1 - w'^2)/w^2 for n = 3.
  auto W = [](double s) { return (std::sin(s) + 0.1 * std::sin(3 * s)) / 1.3; };
  auto W1 = [](double s) { return (std::cos(s) + 0.3 * std::cos(3 * s)) / 1.3; };
  auto W2 = [](double s) { return (-std::sin(s) - 0.9 * std::sin(3 * s)) / 1.3; };
  const double L = pi;
  const std::size_t n = 128;
  const auto s = MetricState::initial(make_model(ManifoldModel::warped_sphere(W, L, n)));
  const auto R = scalar_curvature(s);
  const auto x = spectral::zonal_grid(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double a = x[i] * L / pi;
    const double expect = -4.0 * W2(a) / W(a) + 2.0 * (1.0 - W1(a) * W1(a)) / (W(a) * W(a));
    EXPECT_NEAR(R[i], expect, 1e-7 * std::max(1.0, std::abs(expect)));
  }
}

TEST(Curvature, NonSmoothPoleIsRejected) {
  auto bad = [](double s) { return 2.0 * std::sin(s); };  // w'(0) = 2
  EXPECT_THROW(ManifoldModel::warped_sphere(bad, pi, 64), Error);
}

TEST(Volume, ClosedForms) {
  const auto torus = MetricState::initial(make_model(ManifoldModel::flat_torus({2 * pi, 2 * pi, 2 * pi}, 8)));
  EXPECT_NEAR(total_volume(torus), std::pow(2 * pi, 3), 1e-9);
  const auto sphere = round_state(1.0, 64);
  EXPECT_NEAR(total_volume(sphere), 2 * pi * pi, 1e-8 * 2 * pi * pi);
  const auto w = volume_measure(sphere, Representation::Grid);
  double acc = 0.0;
  for (double v : w) {
    EXPECT_GT(v, 0.0);
    acc += v;
  }
  EXPECT_NEAR(acc, 2 * pi * pi, 1e-8 * 2 * pi * pi);
}

TEST(Volume, WarpedProfileMatchesIndependentQuadrature) {
  auto W = [](double s) { return (std::sin(s) + 0.1 * std::sin(3 * s)) / 1.3; };
  const double L = pi;
  const auto s = MetricState::initial(make_model(ManifoldModel::warped_sphere(W, L, 96)));
  const double oracle =
      4 * pi * boost::math::quadrature::gauss_kronrod<double, 61>::integrate([&](double a) { return W(a) * W(a); }, 0.0, L);
  EXPECT_NEAR(total_volume(s), oracle, 1e-10 * oracle);
  double grid = 0.0;
  for (double v : volume_measure(s, Representation::Grid)) grid += v;
  EXPECT_NEAR(grid, oracle, 1e-10 * oracle);
}

TEST(Distance, TorusWrapsAndIsSymmetric) {
  const auto s = MetricState::initial(make_model(ManifoldModel::flat_torus({2 * pi, 2 * pi, 2 * pi}, 8)));
  const auto y = Point::torus(0.3, 0.2, 0.1);
  EXPECT_EQ(distance(s, y, y), 0.0);
  const auto x = Point::torus(0.3 + pi + 0.1, 0.2, 0.1);
  // Brute force over lattice translates.
  double best = 1e300;
  for (int a = -2; a <= 2; ++a) best = std::min(best, std::abs(pi + 0.1 + 2 * pi * a));
  EXPECT_NEAR(distance(s, y, x), best, 1e-12);
  EXPECT_NEAR(distance(s, y, x), pi - 0.1, 1e-12);

  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(0.0, 2 * pi);
  for (int trial = 0; trial < 200; ++trial) {
    const auto a = Point::torus(u(rng), u(rng), u(rng));
    const auto b = Point::torus(u(rng), u(rng), u(rng));
    const auto c = Point::torus(u(rng), u(rng), u(rng));
    EXPECT_NEAR(distance(s, a, b), distance(s, b, a), 1e-12);
    EXPECT_LE(distance(s, a, c), distance(s, a, b) + distance(s, b, c) + 1e-12);
  }
}

TEST(Distance, SphereAntipodalAndWarpedPole) {
  const auto s = round_state(1.7, 32);
  EXPECT_NEAR(distance(s, Point::north_pole(), Point::south_pole()), pi * 1.7, 1e-12);
  const auto w = warped_round_state(1.7, 64);
  EXPECT_NEAR(distance(w, Point::north_pole(), Point::south_pole()), pi * 1.7, 1e-10);
  EXPECT_NEAR(distance(w, Point::south_pole(), Point::polar(1.0)), 1.7 * (pi - 1.0), 1e-10);
  EXPECT_THROW(distance(w, Point::polar(0.5), Point::polar(1.0)), Error);
}

TEST(CrossMetricGradient, StaticIsOneAwayFromCutLocus) {
  const auto t = MetricState::initial(make_model(ManifoldModel::flat_torus({2 * pi, 2 * pi, 2 * pi}, 16)));
  const auto y = Point::torus(0, 0, 0);
  const auto d = distance_field(t, y);
  const auto g = cross_metric_gradient_norm(d, t);
  const auto mask = regular_mask(*t.model, y, 2);
  for (std::size_t i = 0; i < g.size(); ++i)
    if (mask[i]) EXPECT_NEAR(g[i], 1.0, 1e-12);

  const auto w = warped_round_state(1.0, 64);
  const auto dw = distance_field(w, Point::north_pole());
  const auto gw = cross_metric_gradient_norm(dw, w);
  const auto mw = regular_mask(*w.model, Point::north_pole(), 2);
  for (std::size_t i = 0; i < gw.size(); ++i)
    if (mw[i]) EXPECT_NEAR(gw[i], 1.0, 1e-6);
}

TEST(CrossMetricGradient, ShrinkingSphereRatioMatchesFiniteDifferences) {
  const std::size_t n = 256;
  auto model = make_model(ManifoldModel::round_sphere(1.0, n));
  MetricState at_t = MetricState::initial(model), at_lambda = at_t;
  at_t.scale = std::sqrt(1.0 - 4 * 0.1);
  at_lambda.scale = std::sqrt(1.0 - 4 * 0.05);
  const auto d = distance_field(at_t, Point::north_pole());
  const auto g = cross_metric_gradient_norm(d, at_lambda);
  const double ratio = at_t.scale / at_lambda.scale;
  EXPECT_LT(ratio, 1.0);
  // Finite differences of the sampled distance values measured in g(lambda).
  const double h = pi / n;
  for (std::size_t i = 2; i + 2 < n; ++i) {
    const double fd = (d.values[i + 1] - d.values[i - 1]) / (2 * h) / at_lambda.radius();
    EXPECT_NEAR(g[i], ratio, 1e-12);
    EXPECT_NEAR(fd, ratio, 1e-10);
  }
}

TEST(Validation, Errors) {
  EXPECT_THROW(ManifoldModel::flat_torus({1, -1, 1}, 8), Error);
  EXPECT_THROW(ManifoldModel::round_sphere(0.0, 8), Error);
  const auto s = round_state(1.0, 16);
  ScalarField wrong{std::vector<double>(15, 0.0)};
  try {
    laplace_beltrami(s, wrong);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::ResolutionMismatch);
  }
  auto bad = s;
  bad.scale = -1;
  EXPECT_THROW(laplace_beltrami(bad, ScalarField::constant(*s.model, 1)), Error);
}
