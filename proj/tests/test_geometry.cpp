#include <catch2/catch_amalgamated.hpp>

#include "parafreq/geometry.hpp"

using namespace parafreq;

namespace {

double max_abs_diff(const ScalarField& a, const std::vector<double>& b) {
  double m = 0.0;
  for (int i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// Max-norm error of the discrete Laplacian against a closed-form field pair.
template <class FU, class FL>
double laplacian_error(const std::shared_ptr<const Backend>& bk, FU&& u,
                       FL&& lap_exact) {
  auto m = make_snapshot(bk, 0.0);
  auto uf = make_field(bk, u);
  auto Lu = laplace_beltrami(uf, m);
  auto ref = make_field(bk, lap_exact);
  return max_abs_diff(Lu, ref.v);
}

}  // namespace

TEST_CASE("laplacian of a constant vanishes on every backend") {
  auto tor = make_flat_torus(1.0, 1.0, 16, 16);
  auto sph = make_axisym_sphere(2, 1.0, 16);
  std::vector<double> phi0(16 * 16, 0.02);
  auto con = make_conformal_torus(1.0, 1.0, 16, 16, phi0);
  for (auto& bk : {tor, con}) {
    auto m = bk->kind == BackendKind::ConformalTorus2D
                 ? make_snapshot_conformal(bk, 0.0, bk->phi0)
                 : make_snapshot(bk, 0.0);
    ScalarField u(bk, 5.0);
    auto Lu = laplace_beltrami(u, m);
    for (int i = 0; i < u.size(); ++i) REQUIRE(Lu[i] == Catch::Approx(0.0).margin(1e-12));
  }
  auto ms = make_snapshot(sph, 0.1);
  ScalarField us(sph, 5.0);
  auto Ls = laplace_beltrami(us, ms);
  for (int j = 0; j < us.size(); ++j) REQUIRE(Ls[j] == Catch::Approx(0.0).margin(1e-12));
}

TEST_CASE("torus Fourier mode is an eigenfunction, second order") {
  const double k = 2.0 * kPi;
  auto u = [&](double x, double) { return std::cos(k * x); };
  auto lap = [&](double x, double) { return -k * k * std::cos(k * x); };
  double e64 = laplacian_error(make_flat_torus(1, 1, 64, 64), u, lap);
  double e128 = laplacian_error(make_flat_torus(1, 1, 128, 128), u, lap);
  double e256 = laplacian_error(make_flat_torus(1, 1, 256, 256), u, lap);
  REQUIRE(e256 < 1e-3);
  REQUIRE(e64 / e128 > 3.5);
  REQUIRE(e128 / e256 > 3.5);
}

TEST_CASE("sphere first harmonic: Lap cos(theta) = -(n/r^2) cos(theta)") {
  for (int n : {2, 3}) {
    auto err = [&](int N) {
      auto bk = make_axisym_sphere(n, 1.0, N);
      auto m = make_snapshot(bk, 0.0);
      auto u = make_field(bk, [](double th, double) { return std::cos(th); });
      auto Lu = laplace_beltrami(u, m);
      double e = 0.0;
      for (int j = 0; j < N; ++j)
        e = std::max(e, std::abs(Lu[j] + n * std::cos(bk->theta[j])));
      return e;
    };
    double e64 = err(64), e128 = err(128);
    REQUIRE(err(256) < 1e-3);
    REQUIRE(e64 / e128 > 3.5);
  }
}

TEST_CASE("gradient norm: closed forms and convergence") {
  ScalarField c(make_flat_torus(1, 1, 16, 16), 3.0);
  auto mc = make_snapshot(c.bk, 0.0);
  auto g0 = gradient_norm_sq(c, mc);
  REQUIRE(g0.max() == Catch::Approx(0.0).margin(1e-14));

  const double k = 2.0 * kPi;
  auto err_torus = [&](int N) {
    auto bk = make_flat_torus(1, 1, N, N);
    auto m = make_snapshot(bk, 0.0);
    auto u = make_field(bk, [&](double x, double) { return std::sin(k * x); });
    auto g = gradient_norm_sq(u, m);
    double e = 0.0;
    for (int j = 0; j < bk->Ny; ++j)
      for (int i = 0; i < bk->Nx; ++i)
        e = std::max(e, std::abs(g[j * N + i] -
                                 k * k * sq(std::cos(k * bk->x_of(i)))));
    return e;
  };
  REQUIRE(err_torus(256) < 1e-3);
  REQUIRE(err_torus(64) / err_torus(128) > 3.5);

  // AxisymSphere(n=2, r=2): |grad cos|^2 = sin^2(theta)/4
  auto err_sph = [&](int N) {
    auto bk = make_axisym_sphere(2, 2.0, N);
    auto m = make_snapshot(bk, 0.0);
    auto u = make_field(bk, [](double th, double) { return std::cos(th); });
    auto g = gradient_norm_sq(u, m);
    double e = 0.0;
    for (int j = 0; j < N; ++j)
      e = std::max(e, std::abs(g[j] - sq(std::sin(bk->theta[j])) / 4.0));
    return e;
  };
  REQUIRE(err_sph(256) < 1e-3);
  REQUIRE(err_sph(64) / err_sph(128) > 3.5);
}

TEST_CASE("hessian norm: closed form on torus, trace bound on sphere") {
  const double k = 2.0 * kPi;
  auto err_torus = [&](int N) {
    auto bk = make_flat_torus(1, 1, N, N);
    auto m = make_snapshot(bk, 0.0);
    auto u = make_field(bk, [&](double x, double) { return std::cos(k * x); });
    auto hs = hessian_norm_sq(u, m);
    double e = 0.0;
    for (int j = 0; j < bk->Ny; ++j)
      for (int i = 0; i < bk->Nx; ++i)
        e = std::max(e, std::abs(hs[j * N + i] -
                                 std::pow(k, 4) * sq(std::cos(k * bk->x_of(i)))));
    return e;
  };
  REQUIRE(err_torus(256) < 2e-2);  // scale ~ 16 pi^4, relative ~ 1e-5
  REQUIRE(err_torus(64) / err_torus(128) > 3.5);

  ScalarField c(make_flat_torus(1, 1, 16, 16), 1.0);
  auto hs0 = hessian_norm_sq(c, make_snapshot(c.bk, 0.0));
  REQUIRE(hs0.max() == Catch::Approx(0.0).margin(1e-14));

  // |Hess u|^2 >= (Lap u)^2 / n up to discretization residual
  auto bk = make_axisym_sphere(3, 1.0, 128);
  auto m = make_snapshot(bk, 0.0);
  auto u = make_field(bk, [](double th, double) {
    return std::cos(th) + 0.4 * std::cos(2.0 * th);
  });
  auto hs = hessian_norm_sq(u, m);
  auto Lu = laplace_beltrami(u, m);
  const double slack = 40.0 * sq(bk->htheta());
  for (int j = 0; j < bk->Ntheta; ++j)
    REQUIRE(hs[j] - sq(Lu[j]) / bk->n >= -slack);
}

TEST_CASE("integration: exact volumes and normalized weights") {
  auto sph = make_axisym_sphere(2, 1.0, 256);
  auto ms = make_snapshot(sph, 0.0);
  ScalarField one(sph, 1.0);
  REQUIRE(std::abs(integrate(one, ms) - 4.0 * kPi) < 1e-6);

  auto tor = make_flat_torus(2.0, 3.0, 16, 16);
  auto mt = make_snapshot(tor, 0.0);
  ScalarField onet(tor, 1.0);
  REQUIRE(integrate(onet, mt) == Catch::Approx(6.0).epsilon(1e-14));

  // unit-mass weight reproduces the constant
  ScalarField w = make_field(tor, [](double x, double y) {
    return 1.0 + 0.3 * std::cos(2.0 * kPi * x) * std::sin(2.0 * kPi * y);
  });
  double mass = integrate(w, mt);
  for (auto& x : w.v) x /= mass;
  ScalarField cf(tor, 7.5);
  REQUIRE(integrate(cf, mt, w) == Catch::Approx(7.5).epsilon(1e-12));
}

TEST_CASE("diameter on all backends") {
  auto sph = make_axisym_sphere(3, 2.0, 32);
  REQUIRE(diameter(make_snapshot(sph, 0.0)) == Catch::Approx(2.0 * kPi));

  auto tor = make_flat_torus(1, 1, 32, 32);
  double d = diameter(make_snapshot(tor, 0.0));
  REQUIRE(d == Catch::Approx(std::sqrt(2.0) / 2.0));

  // brute force over lattice translates: max over grid points of the
  // min-image distance from the origin
  double brute = 0.0;
  for (int j = 0; j < 64; ++j)
    for (int i = 0; i < 64; ++i) {
      double dx = std::min((double)i / 64.0, 1.0 - (double)i / 64.0);
      double dy = std::min((double)j / 64.0, 1.0 - (double)j / 64.0);
      brute = std::max(brute, std::hypot(dx, dy));
    }
  REQUIRE(d == Catch::Approx(brute).epsilon(0.02));

  std::vector<double> phi0(48 * 48, 0.0);
  auto con = make_conformal_torus(1, 1, 48, 48, phi0);
  double dc = diameter(make_snapshot_conformal(con, 0.0, phi0));
  REQUIRE(std::abs(dc - std::sqrt(2.0) / 2.0) / (std::sqrt(2.0) / 2.0) < 0.05);
}

TEST_CASE("diameter stable under refinement") {
  auto d_at = [&](int N) {
    std::vector<double> phi0(N * N, 0.0);
    auto con = make_conformal_torus(1, 1, N, N, phi0);
    return diameter(make_snapshot_conformal(con, 0.0, phi0));
  };
  double d32 = d_at(32), d64 = d_at(64);
  REQUIRE(std::abs(d64 - d32) < 4.0 / 32.0);
}

TEST_CASE("ricci bounds") {
  auto sph = make_axisym_sphere(2, 1.0, 64);
  auto ms = make_snapshot(sph, 0.0);
  auto [k1s, k2s] = ricci_bounds(ms);
  REQUIRE(k2s == Catch::Approx(1.0));
  REQUIRE(k1s == Catch::Approx(1e-6));

  // finite-difference Gauss curvature of the surface of revolution with
  // profile f(theta) = r sin(theta): K = -f'' / (r^2 f)
  const double r = 1.0, dth = 1e-4;
  for (double th : {0.7, 1.3, 2.2}) {
    double f = r * std::sin(th);
    double fpp = (r * std::sin(th + dth) - 2.0 * f + r * std::sin(th - dth)) / (dth * dth);
    double gauss = -fpp / (r * r * f);
    REQUIRE(gauss == Catch::Approx(1.0 / (r * r)).margin(1e-6));
  }

  auto tor = make_flat_torus(1, 1, 16, 16);
  auto [k1t, k2t] = ricci_bounds(make_snapshot(tor, 0.0));
  REQUIRE(k1t == Catch::Approx(1e-6));
  REQUIRE(k2t == Catch::Approx(1e-6));

  std::vector<double> phi0(16 * 16, 0.0);
  auto con = make_conformal_torus(1, 1, 16, 16, phi0);
  auto [k1c, k2c] = ricci_bounds(make_snapshot_conformal(con, 0.0, phi0));
  REQUIRE(k1c == Catch::Approx(1e-6));
  REQUIRE(k2c == Catch::Approx(1e-6));

  // ricci bounds stable under refinement on a curved conformal metric
  auto k2_at = [&](int N) {
    std::vector<double> p(N * N);
    auto bk = make_conformal_torus(1, 1, N, N, p);
    auto ph = make_field(bk, [](double x, double y) {
      return 0.1 * std::cos(2.0 * kPi * x) * std::cos(2.0 * kPi * y);
    });
    return make_snapshot_conformal(bk, 0.0, ph.v).K2;
  };
  REQUIRE(std::abs(k2_at(64) - k2_at(128)) < 10.0 / 64.0);
}

TEST_CASE("discrete Green identity is exact") {
  auto check = [&](const std::shared_ptr<const Backend>& bk,
                   const MetricSnapshot& m) {
    ScalarField u, v;
    if (bk->kind == BackendKind::AxisymSphere) {
      u = make_field(bk, [](double th, double) { return std::cos(th) + 0.2 * std::cos(3 * th); });
      v = make_field(bk, [](double th, double) { return 0.7 * std::cos(2 * th); });
    } else {
      u = make_field(bk, [](double x, double y) {
        return std::cos(2 * kPi * x) + 0.4 * std::sin(2 * kPi * (x + 2 * y));
      });
      v = make_field(bk, [](double x, double y) {
        return std::sin(2 * kPi * y) + 0.3 * std::cos(2 * kPi * (2 * x - y));
      });
    }
    auto Lv = laplace_beltrami(v, m);
    ScalarField prod(bk);
    for (int i = 0; i < u.size(); ++i) prod[i] = u[i] * Lv[i];
    double lhs = integrate(prod, m);
    double rhs = -integrate(gradient_inner(u, v, m), m);
    double scale = std::abs(rhs) + 1.0;
    REQUIRE(std::abs(lhs - rhs) / scale < 1e-8);
  };

  auto tor = make_flat_torus(1.0, 1.5, 32, 48, 1.0, 2.0);
  check(tor, make_snapshot(tor, 0.0));
  auto sph = make_axisym_sphere(3, 1.0, 64);
  check(sph, make_snapshot(sph, 0.05));
  std::vector<double> p0(32 * 32);
  auto con = make_conformal_torus(1, 1, 32, 32, p0);
  auto ph = make_field(con, [](double x, double y) {
    return 0.15 * std::cos(2 * kPi * x) + 0.1 * std::sin(2 * kPi * y);
  });
  check(con, make_snapshot_conformal(con, 0.0, ph.v));
}

TEST_CASE("weighted drift Laplacian: duality and reductions") {
  auto bk = make_axisym_sphere(2, 1.0, 64);
  auto m = make_snapshot(bk, 0.0);
  auto u = make_field(bk, [](double th, double) { return 1.0 + 0.5 * std::cos(th); });
  auto K = make_field(bk, [](double th, double) { return 1.0 + 0.3 * std::cos(2 * th); });

  // f constant (K constant) reduces to the plain Laplacian
  ScalarField Kc(bk, 0.37);
  auto dl = drift_laplacian_weighted(u, Kc, m);
  auto lap = laplace_beltrami(u, m);
  REQUIRE(max_abs_diff(dl, lap.v) < 1e-12);

  // u constant -> 0
  ScalarField uc(bk, 2.0);
  auto dl0 = drift_laplacian_weighted(uc, K, m);
  REQUIRE(dl0.max() == Catch::Approx(0.0).margin(1e-13));

  // integration by parts against K dV, exact
  auto dlu = drift_laplacian_weighted(u, K, m);
  ScalarField prod(bk);
  for (int i = 0; i < u.size(); ++i) prod[i] = u[i] * dlu[i];
  double lhs = integrate(prod, m, K);
  double rhs = -integrate(gradient_norm_sq(u, m), m, K);
  REQUIRE(std::abs(lhs - rhs) / (std::abs(rhs) + 1e-30) < 1e-10);
}

TEST_CASE("backend mismatch raises") {
  auto a = make_flat_torus(1, 1, 16, 16);
  auto b = make_flat_torus(1, 1, 16, 16);
  ScalarField u(a, 1.0);
  auto m = make_snapshot(b, 0.0);
  REQUIRE_THROWS_AS(laplace_beltrami(u, m), Error);
}

TEST_CASE("extinct sphere flow raises") {
  auto sph = make_axisym_sphere(2, 1.0, 16);
  REQUIRE_THROWS_AS(make_snapshot(sph, 0.51), Error);
}

TEST_CASE("backend invariants validated") {
  REQUIRE_THROWS_AS(make_flat_torus(1, 1, 7, 16), ConfigError);
  REQUIRE_THROWS_AS(make_flat_torus(1, 1, 10, 16), ConfigError);
  REQUIRE_THROWS_AS(make_axisym_sphere(1, 1.0, 16), ConfigError);
  REQUIRE_THROWS_AS(make_axisym_sphere(2, -1.0, 16), ConfigError);
}
