#pragma once

// Discretized closed-manifold backends and their metric-aware operators.
//
// Three backends:
//   FlatTorus2D      - periodic grid, constant diagonal metric, Ric = 0
//   AxisymSphere     - round n-sphere, axisymmetric fields, 1D cell-centered
//                      theta grid strictly inside (0, pi)
//   ConformalTorus2D - metric e^{2 phi} * (dx^2 + dy^2) on a periodic grid
//
// The discrete Laplacian is the flux-divergence form and the gradient inner
// product is assembled from the same edge differences, so the discrete
// Green identity  sum u (Lap v) dV = -sum <grad u, grad v> dV  holds to
// rounding on every backend. The weighted drift Laplacian shares the edge
// structure, which makes the two forms of the Dirichlet integral agree to
// rounding as well.

#include <algorithm>
#include <cstdint>
#include <memory>
#include <queue>
#include <utility>
#include <variant>
#include <vector>

#include "parafreq/common.hpp"

namespace parafreq {

enum class BackendKind { FlatTorus2D, AxisymSphere, ConformalTorus2D };

struct Backend {
  BackendKind kind;

  // torus (flat + conformal)
  double Lx = 1.0, Ly = 1.0;
  int Nx = 0, Ny = 0;
  double gxx = 1.0, gyy = 1.0;      // flat torus metric coefficients
  std::vector<double> phi0;         // conformal factor at t = 0

  // sphere
  int n = 2;
  double r0 = 1.0;
  int Ntheta = 0;
  std::vector<double> theta;        // cell centers
  std::vector<double> cellW;        // per-cell integral of sin^{n-1}
  std::vector<double> faceW;        // sin^{n-1} at faces, zero at poles
  double Wsum = 0.0;                // = integral_0^pi sin^{n-1}
  double omega = 0.0;               // volume of the unit (n-1)-sphere

  int cells() const {
    return kind == BackendKind::AxisymSphere ? Ntheta : Nx * Ny;
  }
  double hx() const { return Lx / Nx; }
  double hy() const { return Ly / Ny; }
  double htheta() const { return kPi / Ntheta; }
  double x_of(int i) const { return (i + 0.5) * hx(); }
  double y_of(int j) const { return (j + 0.5) * hy(); }
  int dim() const { return kind == BackendKind::AxisymSphere ? n : 2; }
};

namespace detail {

// 8-point Gauss-Legendre on [-1, 1]; exact to machine precision for the
// smooth cell integrands used here.
inline constexpr double kGaussX[8] = {
    -0.9602898564975363, -0.7966664774136267, -0.5255324099163290,
    -0.1834346424956498, 0.1834346424956498,  0.5255324099163290,
    0.7966664774136267,  0.9602898564975363};
inline constexpr double kGaussW[8] = {
    0.1012285362903763, 0.2223810344533745, 0.3137066458778873,
    0.3626837833783620, 0.3626837833783620, 0.3137066458778873,
    0.2223810344533745, 0.1012285362903763};

inline double sin_pow_integral(double a, double b, int pw) {
  double mid = 0.5 * (a + b), half = 0.5 * (b - a), s = 0.0;
  for (int q = 0; q < 8; ++q)
    s += kGaussW[q] * std::pow(std::sin(mid + half * kGaussX[q]), pw);
  return s * half;
}

inline void require_even_ge8(int N, const char* name) {
  if (N < 8 || N % 2 != 0)
    throw ConfigError(strfmt("%s must be even and >= 8, got %d", name, N));
}

}  // namespace detail

inline std::shared_ptr<const Backend> make_flat_torus(double Lx, double Ly,
                                                      int Nx, int Ny,
                                                      double gxx = 1.0,
                                                      double gyy = 1.0) {
  detail::require_even_ge8(Nx, "Nx");
  detail::require_even_ge8(Ny, "Ny");
  if (Lx <= 0 || Ly <= 0) throw ConfigError("torus side lengths must be > 0");
  if (gxx <= 0 || gyy <= 0) throw ConfigError("metric coefficients must be > 0");
  auto b = std::make_shared<Backend>();
  b->kind = BackendKind::FlatTorus2D;
  b->Lx = Lx; b->Ly = Ly; b->Nx = Nx; b->Ny = Ny; b->gxx = gxx; b->gyy = gyy;
  return b;
}

inline std::shared_ptr<const Backend> make_axisym_sphere(int n, double r0,
                                                         int Ntheta) {
  if (n < 2) throw ConfigError("sphere dimension must be >= 2");
  if (r0 <= 0) throw ConfigError("initial radius must be > 0");
  detail::require_even_ge8(Ntheta, "Ntheta");
  auto b = std::make_shared<Backend>();
  b->kind = BackendKind::AxisymSphere;
  b->n = n; b->r0 = r0; b->Ntheta = Ntheta;
  const double h = kPi / Ntheta;
  b->theta.resize(Ntheta);
  b->cellW.resize(Ntheta);
  b->faceW.assign(Ntheta + 1, 0.0);
  for (int j = 0; j < Ntheta; ++j) {
    b->theta[j] = (j + 0.5) * h;
    b->cellW[j] = detail::sin_pow_integral(j * h, (j + 1) * h, n - 1);
    b->Wsum += b->cellW[j];
  }
  for (int j = 1; j < Ntheta; ++j)
    b->faceW[j] = std::pow(std::sin(j * h), n - 1);
  b->omega = 2.0 * std::pow(kPi, 0.5 * n) / std::tgamma(0.5 * n);
  return b;
}

inline std::shared_ptr<const Backend> make_conformal_torus(
    double Lx, double Ly, int Nx, int Ny, std::vector<double> phi0) {
  detail::require_even_ge8(Nx, "Nx");
  detail::require_even_ge8(Ny, "Ny");
  if (Lx <= 0 || Ly <= 0) throw ConfigError("torus side lengths must be > 0");
  if ((int)phi0.size() != Nx * Ny)
    throw ConfigError("phi0 size does not match the grid");
  auto b = std::make_shared<Backend>();
  b->kind = BackendKind::ConformalTorus2D;
  b->Lx = Lx; b->Ly = Ly; b->Nx = Nx; b->Ny = Ny;
  b->phi0 = std::move(phi0);
  return b;
}

// ---------------------------------------------------------------------------

struct ScalarField {
  std::shared_ptr<const Backend> bk;
  std::vector<double> v;

  ScalarField() = default;
  ScalarField(std::shared_ptr<const Backend> b, double fill = 0.0)
      : bk(std::move(b)), v(bk->cells(), fill) {}

  double& operator[](int i) { return v[i]; }
  double operator[](int i) const { return v[i]; }
  int size() const { return (int)v.size(); }
  double min() const { return *std::min_element(v.begin(), v.end()); }
  double max() const { return *std::max_element(v.begin(), v.end()); }
};

inline void require_same_backend(const ScalarField& a, const ScalarField& b) {
  if (a.bk.get() != b.bk.get()) throw Error("fields live on different backends");
}

template <class F>
ScalarField make_field(const std::shared_ptr<const Backend>& bk, F&& f) {
  ScalarField out(bk);
  if (bk->kind == BackendKind::AxisymSphere) {
    for (int j = 0; j < bk->Ntheta; ++j) out[j] = f(bk->theta[j], 0.0);
  } else {
    for (int j = 0; j < bk->Ny; ++j)
      for (int i = 0; i < bk->Nx; ++i)
        out[j * bk->Nx + i] = f(bk->x_of(i), bk->y_of(j));
  }
  return out;
}

// ---------------------------------------------------------------------------

struct MetricSnapshot {
  std::shared_ptr<const Backend> bk;
  double t = 0.0;

  double r2 = 0.0;                       // sphere: r(t)^2
  std::vector<double> phi, e2phi, em2phi, Rfield;  // conformal
  double Rconst = 0.0;                   // flat/sphere scalar curvature
  double K1 = 0.0, K2 = 0.0;             // -K1 g <= Ric <= K2 g

  double R_at(int i) const {
    return bk->kind == BackendKind::ConformalTorus2D ? Rfield[i] : Rconst;
  }
  double R_min() const {
    if (bk->kind != BackendKind::ConformalTorus2D) return Rconst;
    return *std::min_element(Rfield.begin(), Rfield.end());
  }
  double R_max() const {
    if (bk->kind != BackendKind::ConformalTorus2D) return Rconst;
    return *std::max_element(Rfield.begin(), Rfield.end());
  }
};

inline void require_same_backend(const ScalarField& a, const MetricSnapshot& m) {
  if (a.bk.get() != m.bk.get()) throw Error("field and metric backends differ");
}

// Flat 5-point Laplacian with unit metric, periodic. Shared by the conformal
// snapshot builder and the operator kernels.
inline void flat_laplacian_into(const Backend& b, const double* u, double* out,
                                double ax, double ay) {
  const int Nx = b.Nx, Ny = b.Ny;
  const double cx = ax / (b.hx() * b.hx()), cy = ay / (b.hy() * b.hy());
  for (int j = 0; j < Ny; ++j) {
    const int jn = (j + 1) % Ny, jp = (j + Ny - 1) % Ny;
    const double* row = u + (size_t)j * Nx;
    const double* rn = u + (size_t)jn * Nx;
    const double* rp = u + (size_t)jp * Nx;
    double* o = out + (size_t)j * Nx;
    for (int i = 0; i < Nx; ++i) {
      const int in = i + 1 == Nx ? 0 : i + 1, ip = i == 0 ? Nx - 1 : i - 1;
      o[i] = cx * (row[in] - 2.0 * row[i] + row[ip]) +
             cy * (rn[i] - 2.0 * row[i] + rp[i]);
    }
  }
}

inline MetricSnapshot make_snapshot(const std::shared_ptr<const Backend>& bk,
                                    double t, double eps_floor = 1e-6) {
  MetricSnapshot m;
  m.bk = bk;
  m.t = t;
  switch (bk->kind) {
    case BackendKind::FlatTorus2D:
      m.Rconst = 0.0;
      m.K1 = m.K2 = eps_floor;
      break;
    case BackendKind::AxisymSphere: {
      m.r2 = bk->r0 * bk->r0 - 2.0 * (bk->n - 1) * t;
      if (m.r2 <= 0.0)
        throw Error(strfmt("flow extinct: r^2 = %.6g at t = %.6g", m.r2, t));
      m.Rconst = bk->n * (bk->n - 1) / m.r2;
      m.K2 = (bk->n - 1) / m.r2;
      m.K1 = eps_floor;
      break;
    }
    case BackendKind::ConformalTorus2D:
      throw Error("conformal snapshots need a conformal factor field");
  }
  return m;
}

inline MetricSnapshot make_snapshot_conformal(
    const std::shared_ptr<const Backend>& bk, double t,
    std::vector<double> phi, double eps_floor = 1e-6) {
  MetricSnapshot m;
  m.bk = bk;
  m.t = t;
  m.phi = std::move(phi);
  const int N = bk->cells();
  m.e2phi.resize(N);
  m.em2phi.resize(N);
  m.Rfield.resize(N);
  for (int i = 0; i < N; ++i) {
    m.e2phi[i] = std::exp(2.0 * m.phi[i]);
    m.em2phi[i] = 1.0 / m.e2phi[i];
  }
  // R = -2 e^{-2 phi} (flat Laplacian of phi)
  flat_laplacian_into(*bk, m.phi.data(), m.Rfield.data(), 1.0, 1.0);
  double rmin = 0.0, rmax = 0.0;
  for (int i = 0; i < N; ++i) {
    m.Rfield[i] *= -2.0 * m.em2phi[i];
    rmin = std::min(rmin, m.Rfield[i]);
    rmax = std::max(rmax, m.Rfield[i]);
  }
  m.K1 = std::max(-rmin / 2.0, eps_floor);
  m.K2 = std::max(rmax / 2.0, eps_floor);
  return m;
}

inline std::pair<double, double> ricci_bounds(const MetricSnapshot& m) {
  return {m.K1, m.K2};
}

// ---------------------------------------------------------------------------
// Operator kernels.

inline void laplacian_into(const MetricSnapshot& m, const double* u,
                           double* out) {
  const Backend& b = *m.bk;
  switch (b.kind) {
    case BackendKind::FlatTorus2D:
      flat_laplacian_into(b, u, out, 1.0 / b.gxx, 1.0 / b.gyy);
      return;
    case BackendKind::AxisymSphere: {
      const int N = b.Ntheta;
      const double h = b.htheta();
      for (int j = 0; j < N; ++j) {
        const double fl = j > 0 ? b.faceW[j] * (u[j] - u[j - 1]) : 0.0;
        const double fr = j + 1 < N ? b.faceW[j + 1] * (u[j + 1] - u[j]) : 0.0;
        out[j] = (fr - fl) / (h * m.r2 * b.cellW[j]);
      }
      return;
    }
    case BackendKind::ConformalTorus2D: {
      flat_laplacian_into(b, u, out, 1.0, 1.0);
      const int N = b.cells();
      for (int i = 0; i < N; ++i) out[i] *= m.em2phi[i];
      return;
    }
  }
}

inline ScalarField laplace_beltrami(const ScalarField& u,
                                    const MetricSnapshot& m) {
  require_same_backend(u, m);
  ScalarField out(u.bk);
  laplacian_into(m, u.v.data(), out.v.data());
  return out;
}

// Edge-average gradient inner product <grad u, grad v>_g. Compatible with the
// flux-form Laplacian: integrating it against dV reproduces -sum u Lap(v) dV
// exactly.
inline ScalarField gradient_inner(const ScalarField& u, const ScalarField& v,
                                  const MetricSnapshot& m) {
  require_same_backend(u, v);
  require_same_backend(u, m);
  const Backend& b = *u.bk;
  ScalarField out(u.bk);
  switch (b.kind) {
    case BackendKind::FlatTorus2D:
    case BackendKind::ConformalTorus2D: {
      const int Nx = b.Nx, Ny = b.Ny;
      const bool conf = b.kind == BackendKind::ConformalTorus2D;
      const double ax = conf ? 1.0 : 1.0 / b.gxx;
      const double ay = conf ? 1.0 : 1.0 / b.gyy;
      const double ix2 = 1.0 / (b.hx() * b.hx()), iy2 = 1.0 / (b.hy() * b.hy());
      for (int j = 0; j < Ny; ++j) {
        const int jn = (j + 1) % Ny, jp = (j + Ny - 1) % Ny;
        for (int i = 0; i < Nx; ++i) {
          const int in = i + 1 == Nx ? 0 : i + 1, ip = i == 0 ? Nx - 1 : i - 1;
          const int c = j * Nx + i;
          const double gx =
              0.5 * ix2 *
              ((u.v[j * Nx + in] - u.v[c]) * (v.v[j * Nx + in] - v.v[c]) +
               (u.v[c] - u.v[j * Nx + ip]) * (v.v[c] - v.v[j * Nx + ip]));
          const double gy =
              0.5 * iy2 *
              ((u.v[jn * Nx + i] - u.v[c]) * (v.v[jn * Nx + i] - v.v[c]) +
               (u.v[c] - u.v[jp * Nx + i]) * (v.v[c] - v.v[jp * Nx + i]));
          out.v[c] = ax * gx + ay * gy;
          if (conf) out.v[c] *= m.em2phi[c];
        }
      }
      return out;
    }
    case BackendKind::AxisymSphere: {
      const int N = b.Ntheta;
      const double h = b.htheta();
      for (int j = 0; j < N; ++j) {
        double acc = 0.0;
        if (j > 0)
          acc += 0.5 * b.faceW[j] * (u.v[j] - u.v[j - 1]) * (v.v[j] - v.v[j - 1]);
        if (j + 1 < N)
          acc += 0.5 * b.faceW[j + 1] * (u.v[j + 1] - u.v[j]) *
                 (v.v[j + 1] - v.v[j]);
        out.v[j] = acc / (h * m.r2 * b.cellW[j]);
      }
      return out;
    }
  }
  return out;
}

inline ScalarField gradient_norm_sq(const ScalarField& u,
                                    const MetricSnapshot& m) {
  return gradient_inner(u, u, m);
}

// Centered first derivatives. Sphere fields are mirrored across the poles
// (smooth axisymmetric data has u_theta = 0 there).
inline void deriv_x_into(const Backend& b, const double* u, double* out) {
  const int Nx = b.Nx, Ny = b.Ny;
  const double c = 1.0 / (2.0 * b.hx());
  for (int j = 0; j < Ny; ++j)
    for (int i = 0; i < Nx; ++i) {
      const int in = i + 1 == Nx ? 0 : i + 1, ip = i == 0 ? Nx - 1 : i - 1;
      out[j * Nx + i] = c * (u[j * Nx + in] - u[j * Nx + ip]);
    }
}

inline void deriv_y_into(const Backend& b, const double* u, double* out) {
  const int Nx = b.Nx, Ny = b.Ny;
  const double c = 1.0 / (2.0 * b.hy());
  for (int j = 0; j < Ny; ++j) {
    const int jn = (j + 1) % Ny, jp = (j + Ny - 1) % Ny;
    for (int i = 0; i < Nx; ++i)
      out[j * Nx + i] = c * (u[jn * Nx + i] - u[jp * Nx + i]);
  }
}

inline double sphere_ghost(const double* u, int N, int j) {
  if (j < 0) return u[0];
  if (j >= N) return u[N - 1];
  return u[j];
}

inline void deriv_theta_into(const Backend& b, const double* u, double* out) {
  const int N = b.Ntheta;
  const double c = 1.0 / (2.0 * b.htheta());
  for (int j = 0; j < N; ++j)
    out[j] = c * (sphere_ghost(u, N, j + 1) - sphere_ghost(u, N, j - 1));
}

inline void deriv2_theta_into(const Backend& b, const double* u, double* out) {
  const int N = b.Ntheta;
  const double c = 1.0 / (b.htheta() * b.htheta());
  for (int j = 0; j < N; ++j)
    out[j] = c * (sphere_ghost(u, N, j + 1) - 2.0 * u[j] +
                  sphere_ghost(u, N, j - 1));
}

// |Hess u|^2_g.
inline ScalarField hessian_norm_sq(const ScalarField& u,
                                   const MetricSnapshot& m) {
  require_same_backend(u, m);
  const Backend& b = *u.bk;
  ScalarField out(u.bk);
  switch (b.kind) {
    case BackendKind::AxisymSphere: {
      const int N = b.Ntheta;
      std::vector<double> ut(N), utt(N);
      deriv_theta_into(b, u.v.data(), ut.data());
      deriv2_theta_into(b, u.v.data(), utt.data());
      for (int j = 0; j < N; ++j) {
        const double ctn = std::cos(b.theta[j]) / std::sin(b.theta[j]);
        out.v[j] = sq(utt[j] / m.r2) + (b.n - 1) * sq(ctn * ut[j] / m.r2);
      }
      return out;
    }
    case BackendKind::FlatTorus2D:
    case BackendKind::ConformalTorus2D: {
      const int Nx = b.Nx, Ny = b.Ny, N = b.cells();
      const double ix2 = 1.0 / (b.hx() * b.hx()), iy2 = 1.0 / (b.hy() * b.hy());
      const double ixy = 1.0 / (4.0 * b.hx() * b.hy());
      const bool conf = b.kind == BackendKind::ConformalTorus2D;
      std::vector<double> px, py, ux, uy;
      if (conf) {
        px.resize(N); py.resize(N); ux.resize(N); uy.resize(N);
        deriv_x_into(b, m.phi.data(), px.data());
        deriv_y_into(b, m.phi.data(), py.data());
        deriv_x_into(b, u.v.data(), ux.data());
        deriv_y_into(b, u.v.data(), uy.data());
      }
      for (int j = 0; j < Ny; ++j) {
        const int jn = (j + 1) % Ny, jp = (j + Ny - 1) % Ny;
        for (int i = 0; i < Nx; ++i) {
          const int in = i + 1 == Nx ? 0 : i + 1, ip = i == 0 ? Nx - 1 : i - 1;
          const int c = j * Nx + i;
          double hxx = ix2 * (u.v[j * Nx + in] - 2.0 * u.v[c] + u.v[j * Nx + ip]);
          double hyy = iy2 * (u.v[jn * Nx + i] - 2.0 * u.v[c] + u.v[jp * Nx + i]);
          double hxy = ixy * (u.v[jn * Nx + in] - u.v[jn * Nx + ip] -
                              u.v[jp * Nx + in] + u.v[jp * Nx + ip]);
          if (conf) {
            // Christoffel corrections of e^{2 phi} delta
            hxx += -px[c] * ux[c] + py[c] * uy[c];
            hyy += px[c] * ux[c] - py[c] * uy[c];
            hxy += -py[c] * ux[c] - px[c] * uy[c];
            const double w = sq(m.em2phi[c]);
            out.v[c] = w * (sq(hxx) + 2.0 * sq(hxy) + sq(hyy));
          } else {
            const double a = 1.0 / b.gxx, g = 1.0 / b.gyy;
            out.v[c] = sq(a * hxx) + 2.0 * a * g * sq(hxy) + sq(g * hyy);
          }
        }
      }
      return out;
    }
  }
  return out;
}

// Per-cell metric volume.
inline std::vector<double> vol_element(const MetricSnapshot& m) {
  const Backend& b = *m.bk;
  std::vector<double> V(b.cells());
  switch (b.kind) {
    case BackendKind::FlatTorus2D: {
      const double c = std::sqrt(b.gxx * b.gyy) * b.hx() * b.hy();
      std::fill(V.begin(), V.end(), c);
      break;
    }
    case BackendKind::AxisymSphere: {
      const double c = b.omega * std::pow(m.r2, 0.5 * b.n);
      for (int j = 0; j < b.Ntheta; ++j) V[j] = c * b.cellW[j];
      break;
    }
    case BackendKind::ConformalTorus2D: {
      const double a = b.hx() * b.hy();
      for (int i = 0; i < b.cells(); ++i) V[i] = a * m.e2phi[i];
      break;
    }
  }
  return V;
}

inline double total_volume(const MetricSnapshot& m) {
  const Backend& b = *m.bk;
  if (b.kind == BackendKind::FlatTorus2D)
    return std::sqrt(b.gxx * b.gyy) * b.Lx * b.Ly;
  if (b.kind == BackendKind::AxisymSphere)
    return b.omega * std::pow(m.r2, 0.5 * b.n) * b.Wsum;
  double s = 0.0;
  for (int i = 0; i < b.cells(); ++i) s += m.e2phi[i];
  return s * b.hx() * b.hy();
}

inline double integrate(const ScalarField& u, const MetricSnapshot& m) {
  require_same_backend(u, m);
  const Backend& b = *m.bk;
  double s = 0.0;
  switch (b.kind) {
    case BackendKind::FlatTorus2D: {
      for (double x : u.v) s += x;
      return s * std::sqrt(b.gxx * b.gyy) * b.hx() * b.hy();
    }
    case BackendKind::AxisymSphere: {
      for (int j = 0; j < b.Ntheta; ++j) s += u.v[j] * b.cellW[j];
      return s * b.omega * std::pow(m.r2, 0.5 * b.n);
    }
    case BackendKind::ConformalTorus2D: {
      for (int i = 0; i < b.cells(); ++i) s += u.v[i] * m.e2phi[i];
      return s * b.hx() * b.hy();
    }
  }
  return s;
}

inline double integrate(const ScalarField& u, const MetricSnapshot& m,
                        const ScalarField& weight) {
  require_same_backend(u, weight);
  require_same_backend(u, m);
  if (weight.min() < -1e-14) throw Error("integration weight must be nonnegative");
  const Backend& b = *m.bk;
  double s = 0.0;
  switch (b.kind) {
    case BackendKind::FlatTorus2D: {
      for (int i = 0; i < b.cells(); ++i) s += u.v[i] * weight.v[i];
      return s * std::sqrt(b.gxx * b.gyy) * b.hx() * b.hy();
    }
    case BackendKind::AxisymSphere: {
      for (int j = 0; j < b.Ntheta; ++j) s += u.v[j] * weight.v[j] * b.cellW[j];
      return s * b.omega * std::pow(m.r2, 0.5 * b.n);
    }
    case BackendKind::ConformalTorus2D: {
      for (int i = 0; i < b.cells(); ++i) s += u.v[i] * weight.v[i] * m.e2phi[i];
      return s * b.hx() * b.hy();
    }
  }
  return s;
}

// Weighted drift Laplacian (1/K) div(K grad u) = Lap u - <grad f, grad u>
// for K = e^{-f} x (time factor). Flux form; exactly dual to gradient_inner
// against the measure K dV.
inline ScalarField drift_laplacian_weighted(const ScalarField& u,
                                            const ScalarField& K,
                                            const MetricSnapshot& m) {
  require_same_backend(u, K);
  require_same_backend(u, m);
  const Backend& b = *u.bk;
  ScalarField out(u.bk);
  switch (b.kind) {
    case BackendKind::FlatTorus2D:
    case BackendKind::ConformalTorus2D: {
      const int Nx = b.Nx, Ny = b.Ny;
      const bool conf = b.kind == BackendKind::ConformalTorus2D;
      const double ax = conf ? 1.0 : 1.0 / b.gxx;
      const double ay = conf ? 1.0 : 1.0 / b.gyy;
      const double ix2 = ax / (b.hx() * b.hx()), iy2 = ay / (b.hy() * b.hy());
      for (int j = 0; j < Ny; ++j) {
        const int jn = (j + 1) % Ny, jp = (j + Ny - 1) % Ny;
        for (int i = 0; i < Nx; ++i) {
          const int in = i + 1 == Nx ? 0 : i + 1, ip = i == 0 ? Nx - 1 : i - 1;
          const int c = j * Nx + i;
          const double ke = 0.5 * (K.v[c] + K.v[j * Nx + in]);
          const double kw = 0.5 * (K.v[c] + K.v[j * Nx + ip]);
          const double kn = 0.5 * (K.v[c] + K.v[jn * Nx + i]);
          const double ks = 0.5 * (K.v[c] + K.v[jp * Nx + i]);
          double acc = ix2 * (ke * (u.v[j * Nx + in] - u.v[c]) -
                              kw * (u.v[c] - u.v[j * Nx + ip])) +
                       iy2 * (kn * (u.v[jn * Nx + i] - u.v[c]) -
                              ks * (u.v[c] - u.v[jp * Nx + i]));
          out.v[c] = acc / K.v[c];
          if (conf) out.v[c] *= m.em2phi[c];
        }
      }
      return out;
    }
    case BackendKind::AxisymSphere: {
      const int N = b.Ntheta;
      const double h = b.htheta();
      for (int j = 0; j < N; ++j) {
        double fl = 0.0, fr = 0.0;
        if (j > 0)
          fl = b.faceW[j] * 0.5 * (K.v[j] + K.v[j - 1]) * (u.v[j] - u.v[j - 1]);
        if (j + 1 < N)
          fr = b.faceW[j + 1] * 0.5 * (K.v[j] + K.v[j + 1]) *
               (u.v[j + 1] - u.v[j]);
        out.v[j] = (fr - fl) / (h * m.r2 * b.cellW[j] * K.v[j]);
      }
      return out;
    }
  }
  return out;
}

// Ric_f(grad u, grad u) with Ric_f = Ric + Hess f, assembled from backend
// curvature plus the discrete Hessian of f contracted with grad u.
inline ScalarField bakry_emery_quadratic(const ScalarField& f,
                                         const ScalarField& u,
                                         const MetricSnapshot& m) {
  require_same_backend(f, u);
  require_same_backend(u, m);
  const Backend& b = *u.bk;
  ScalarField out(u.bk);
  switch (b.kind) {
    case BackendKind::AxisymSphere: {
      const int N = b.Ntheta;
      std::vector<double> ut(N), ftt(N);
      deriv_theta_into(b, u.v.data(), ut.data());
      deriv2_theta_into(b, f.v.data(), ftt.data());
      const double ric = (b.n - 1) / m.r2;  // round sphere: Ric = (n-1)/r^2 g
      for (int j = 0; j < N; ++j) {
        const double gradsq = sq(ut[j]) / m.r2;
        out.v[j] = ric * gradsq + ftt[j] * sq(ut[j]) / sq(m.r2);
      }
      return out;
    }
    case BackendKind::FlatTorus2D:
    case BackendKind::ConformalTorus2D: {
      const int Nx = b.Nx, Ny = b.Ny, N = b.cells();
      const bool conf = b.kind == BackendKind::ConformalTorus2D;
      const double ix2 = 1.0 / (b.hx() * b.hx()), iy2 = 1.0 / (b.hy() * b.hy());
      const double ixy = 1.0 / (4.0 * b.hx() * b.hy());
      std::vector<double> ux(N), uy(N), px, py, fx, fy;
      deriv_x_into(b, u.v.data(), ux.data());
      deriv_y_into(b, u.v.data(), uy.data());
      if (conf) {
        px.resize(N); py.resize(N); fx.resize(N); fy.resize(N);
        deriv_x_into(b, m.phi.data(), px.data());
        deriv_y_into(b, m.phi.data(), py.data());
        deriv_x_into(b, f.v.data(), fx.data());
        deriv_y_into(b, f.v.data(), fy.data());
      }
      for (int j = 0; j < Ny; ++j) {
        const int jn = (j + 1) % Ny, jp = (j + Ny - 1) % Ny;
        for (int i = 0; i < Nx; ++i) {
          const int in = i + 1 == Nx ? 0 : i + 1, ip = i == 0 ? Nx - 1 : i - 1;
          const int c = j * Nx + i;
          double hxx = ix2 * (f.v[j * Nx + in] - 2.0 * f.v[c] + f.v[j * Nx + ip]);
          double hyy = iy2 * (f.v[jn * Nx + i] - 2.0 * f.v[c] + f.v[jp * Nx + i]);
          double hxy = ixy * (f.v[jn * Nx + in] - f.v[jn * Nx + ip] -
                              f.v[jp * Nx + in] + f.v[jp * Nx + ip]);
          if (conf) {
            hxx += -px[c] * fx[c] + py[c] * fy[c];
            hyy += px[c] * fx[c] - py[c] * fy[c];
            hxy += -py[c] * fx[c] - px[c] * fy[c];
            const double w = sq(m.em2phi[c]);
            const double hess =
                w * (hxx * sq(ux[c]) + 2.0 * hxy * ux[c] * uy[c] + hyy * sq(uy[c]));
            const double gradsq =
                m.em2phi[c] * (sq(ux[c]) + sq(uy[c]));
            out.v[c] = 0.5 * m.Rfield[c] * gradsq + hess;  // 2D: Ric = (R/2) g
          } else {
            const double a = 1.0 / b.gxx, g = 1.0 / b.gyy;
            out.v[c] = hxx * sq(a * ux[c]) + 2.0 * hxy * (a * ux[c]) * (g * uy[c]) +
                       hyy * sq(g * uy[c]);
          }
        }
      }
      return out;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Diameter.

namespace detail {

// Max over source subset of single-source shortest paths on the 8-connected
// weighted grid graph. Sources are strided so the work stays bounded; with
// stride 1 this is the full graph diameter.
inline double conformal_graph_diameter(const MetricSnapshot& m,
                                       int max_sources = 4096) {
  const Backend& b = *m.bk;
  const int Nx = b.Nx, Ny = b.Ny, N = Nx * Ny;
  const double hx = b.hx(), hy = b.hy(), hd = std::hypot(hx, hy);
  std::vector<double> ephi(N);
  for (int i = 0; i < N; ++i) ephi[i] = std::exp(m.phi[i]);

  int stride = 1;
  while ((Nx / stride) * (Ny / stride) > max_sources) ++stride;

  const int dx[8] = {1, -1, 0, 0, 1, 1, -1, -1};
  const int dy[8] = {0, 0, 1, -1, 1, -1, 1, -1};
  std::vector<double> dist(N);
  double diam = 0.0;
  using QE = std::pair<double, int>;
  for (int sj = 0; sj < Ny; sj += stride)
    for (int si = 0; si < Nx; si += stride) {
      const int src = sj * Nx + si;
      std::fill(dist.begin(), dist.end(),
                std::numeric_limits<double>::infinity());
      std::priority_queue<QE, std::vector<QE>, std::greater<QE>> q;
      dist[src] = 0.0;
      q.push({0.0, src});
      while (!q.empty()) {
        auto [d, c] = q.top();
        q.pop();
        if (d > dist[c]) continue;
        const int ci = c % Nx, cj = c / Nx;
        for (int k = 0; k < 8; ++k) {
          const int ni = (ci + dx[k] + Nx) % Nx, nj = (cj + dy[k] + Ny) % Ny;
          const int nb = nj * Nx + ni;
          const double len = k < 2 ? hx : (k < 4 ? hy : hd);
          const double w = 0.5 * (ephi[c] + ephi[nb]) * len;
          if (dist[c] + w < dist[nb]) {
            dist[nb] = dist[c] + w;
            q.push({dist[nb], nb});
          }
        }
      }
      for (double d : dist) diam = std::max(diam, d);
    }
  return diam;
}

}  // namespace detail

inline double diameter(const MetricSnapshot& m) {
  const Backend& b = *m.bk;
  switch (b.kind) {
    case BackendKind::FlatTorus2D:
      return 0.5 * std::sqrt(b.gxx * b.Lx * b.Lx + b.gyy * b.Ly * b.Ly);
    case BackendKind::AxisymSphere:
      return kPi * std::sqrt(m.r2);
    case BackendKind::ConformalTorus2D:
      return detail::conformal_graph_diameter(m);
  }
  return 0.0;
}

// Gershgorin-type bound on the spectral radius of the discrete Laplacian;
// used for explicit time step caps.
inline double laplacian_spectral_bound(const MetricSnapshot& m) {
  const Backend& b = *m.bk;
  switch (b.kind) {
    case BackendKind::FlatTorus2D:
      return 4.0 / (b.gxx * b.hx() * b.hx()) + 4.0 / (b.gyy * b.hy() * b.hy());
    case BackendKind::AxisymSphere: {
      const double h = b.htheta();
      double worst = 0.0;
      for (int j = 0; j < b.Ntheta; ++j) {
        const double diag =
            (b.faceW[j] + b.faceW[j + 1]) / (h * m.r2 * b.cellW[j]);
        worst = std::max(worst, diag);
      }
      return 2.0 * worst;
    }
    case BackendKind::ConformalTorus2D: {
      double em2max = *std::max_element(m.em2phi.begin(), m.em2phi.end());
      return em2max *
             (4.0 / (b.hx() * b.hx()) + 4.0 / (b.hy() * b.hy()));
    }
  }
  return 0.0;
}

}  // namespace parafreq
