#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <string>

#include "s2attn/field.hpp"
#include "s2attn/parallel.hpp"

namespace s2attn {

/// Latitude-longitude grid with a quadrature rule.
///
/// Colatitudes ascend in [0, pi], longitudes are 2*pi*j/nlon and the
/// quadrature weight of a point depends on its latitude row only.
template <typename Scalar>
struct SphericalGrid {
  GridShape shape;
  Vector<Scalar> colatitudes;  // nlat
  Vector<Scalar> longitudes;   // nlon
  Vector<Scalar> weights;      // nlat, steradians per point of that row

  GridFamily family() const { return shape.family; }
  int nlat() const { return shape.nlat; }
  int nlon() const { return shape.nlon; }
  Index points() const { return shape.points(); }

  Scalar weight(int lat, int /*lon*/) const { return weights(lat); }

  /// Per-point weights in field column order (lat-major).
  Vector<Scalar> point_weights() const {
    Vector<Scalar> w(points());
    for (int i = 0; i < nlat(); ++i) w.segment(Index(i) * nlon(), nlon()).setConstant(weights(i));
    return w;
  }

  Scalar total_weight() const { return weights.sum() * Scalar(nlon()); }
};

namespace detail {
template <typename Scalar>
Vector<Scalar> uniform_longitudes(int nlon) {
  Vector<Scalar> phi(nlon);
  for (int j = 0; j < nlon; ++j) phi(j) = Scalar(2) * std::numbers::pi_v<Scalar> * Scalar(j) / Scalar(nlon);
  return phi;
}
}  // namespace detail

template <typename Scalar = double>
SphericalGrid<Scalar> build_equiangular_grid(int nlat, int nlon) {
  if (nlat < 2 || nlon < 2)
    throw std::invalid_argument("equiangular grid needs nlat >= 2 and nlon >= 2");
  constexpr Scalar pi = std::numbers::pi_v<Scalar>;
  SphericalGrid<Scalar> g;
  g.shape = {GridFamily::Equiangular, nlat, nlon};
  g.colatitudes.resize(nlat);
  g.weights.resize(nlat);
  const Scalar scale = Scalar(2) * pi * pi / (Scalar(nlat) * Scalar(nlon));
  for (int i = 0; i < nlat; ++i) {
    g.colatitudes(i) = pi * Scalar(i) / Scalar(nlat);
    g.weights(i) = scale * std::sin(g.colatitudes(i));
  }
  g.weights(0) = 0;  // sin(0) is already 0; keep the pole row exactly inert
  g.longitudes = detail::uniform_longitudes<Scalar>(nlon);
  return g;
}

/// Gauss-Legendre nodes (descending in [-1, 1]) and weights summing to 2.
/// Newton iteration on P_n from the asymptotic initial guess.
template <typename Scalar = double>
std::pair<Vector<Scalar>, Vector<Scalar>> gauss_legendre(int n) {
  if (n < 1) throw std::invalid_argument("gauss_legendre: n must be positive");
  constexpr Scalar pi = std::numbers::pi_v<Scalar>;
  constexpr int kMaxIterations = 100;
  const Scalar tolerance = std::max(Scalar(1e-14), 4 * std::numeric_limits<Scalar>::epsilon());
  Vector<Scalar> x(n), w(n);
  const int half = (n + 1) / 2;
  for (int i = 0; i < half; ++i) {
    Scalar z = std::cos(pi * (Scalar(i) + Scalar(0.75)) / (Scalar(n) + Scalar(0.5)));
    Scalar dp = 0;
    bool converged = false;
    for (int it = 0; it < kMaxIterations; ++it) {
      Scalar p0 = 1, p1 = 0;
      for (int j = 1; j <= n; ++j) {
        const Scalar p2 = p1;
        p1 = p0;
        p0 = ((Scalar(2 * j - 1)) * z * p1 - Scalar(j - 1) * p2) / Scalar(j);
      }
      // p0 = P_n(z), p1 = P_{n-1}(z)
      dp = Scalar(n) * (z * p0 - p1) / (z * z - Scalar(1));
      const Scalar step = p0 / dp;
      z -= step;
      if (std::abs(step) <= tolerance) {
        converged = true;
        break;
      }
    }
    if (!converged) throw std::runtime_error("gauss_legendre: Newton iteration did not converge");
    // derivative at the converged node
    Scalar p0 = 1, p1 = 0;
    for (int j = 1; j <= n; ++j) {
      const Scalar p2 = p1;
      p1 = p0;
      p0 = ((Scalar(2 * j - 1)) * z * p1 - Scalar(j - 1) * p2) / Scalar(j);
    }
    dp = Scalar(n) * (z * p0 - p1) / (z * z - Scalar(1));
    const Scalar wi = Scalar(2) / ((Scalar(1) - z * z) * dp * dp);
    x(i) = z;
    x(n - 1 - i) = -z;
    w(i) = wi;
    w(n - 1 - i) = wi;
  }
  if (n % 2 == 1) x(n / 2) = 0;
  return {x, w};
}

template <typename Scalar = double>
SphericalGrid<Scalar> build_gaussian_grid(int nlat, int nlon) {
  if (nlat < 1 || nlon < 2) throw std::invalid_argument("gaussian grid needs nlat >= 1 and nlon >= 2");
  constexpr Scalar pi = std::numbers::pi_v<Scalar>;
  auto [x, w] = gauss_legendre<Scalar>(nlat);
  SphericalGrid<Scalar> g;
  g.shape = {GridFamily::Gaussian, nlat, nlon};
  g.colatitudes.resize(nlat);
  g.weights.resize(nlat);
  for (int i = 0; i < nlat; ++i) {
    g.colatitudes(i) = std::acos(x(i));  // x descends, so colatitude ascends
    g.weights(i) = Scalar(2) * pi / Scalar(nlon) * w(i);
  }
  g.longitudes = detail::uniform_longitudes<Scalar>(nlon);
  return g;
}

template <typename Scalar = double>
SphericalGrid<Scalar> build_grid(GridFamily family, int nlat, int nlon) {
  return family == GridFamily::Equiangular ? build_equiangular_grid<Scalar>(nlat, nlon)
                                           : build_gaussian_grid<Scalar>(nlat, nlon);
}

template <typename Scalar>
SphericalGrid<Scalar> build_grid(const GridShape& shape) {
  return build_grid<Scalar>(shape.family, shape.nlat, shape.nlon);
}

template <typename Scalar>
Eigen::Matrix<Scalar, 3, 1> to_cartesian(Scalar theta, Scalar phi) {
  const Scalar s = std::sin(theta);
  return {s * std::cos(phi), s * std::sin(phi), std::cos(theta)};
}

/// Great-circle distance between (theta, phi) pairs via the haversine formula.
template <typename Scalar>
Scalar geodesic_distance(Scalar theta1, Scalar phi1, Scalar theta2, Scalar phi2) {
  const Scalar sdt = std::sin((theta2 - theta1) / 2);
  const Scalar sdp = std::sin((phi2 - phi1) / 2);
  Scalar a = sdt * sdt + std::sin(theta1) * std::sin(theta2) * sdp * sdp;
  a = std::clamp(a, Scalar(0), Scalar(1));
  return Scalar(2) * std::atan2(std::sqrt(a), std::sqrt(Scalar(1) - a));
}

/// Great-circle distance between unit vectors, atan2(|a x b|, a . b).
template <typename Scalar>
Scalar geodesic_distance(const Eigen::Matrix<Scalar, 3, 1>& a, const Eigen::Matrix<Scalar, 3, 1>& b) {
  return std::atan2(a.cross(b).norm(), a.dot(b));
}

/// Quadrature integral of every (batch, channel): result is channels x batch.
template <typename Scalar>
Matrix<Scalar> integrate(const Field<Scalar>& field, const SphericalGrid<Scalar>& grid) {
  require_same_grid(field, grid.shape, "integrate");
  const Vector<Scalar> w = grid.point_weights();
  Matrix<Scalar> out(field.channels, field.batch);
  for (int b = 0; b < field.batch; ++b) {
    const auto block = field.batch_block(b);
    for (int c = 0; c < field.channels; ++c) {
      const Vector<Scalar> terms = block.row(c).transpose().cwiseProduct(w);
      out(c, b) = pairwise_sum(terms.data(), terms.size());
    }
  }
  return out;
}

}  // namespace s2attn
