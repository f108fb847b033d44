#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "s2attn/field.hpp"
#include "s2attn/grid.hpp"
#include "s2attn/parallel.hpp"

namespace s2attn {

/// Element of SO(3), stored as a unit quaternion.
template <typename Scalar>
class Rotation {
 public:
  using Quaternion = Eigen::Quaternion<Scalar>;
  using Matrix3 = Eigen::Matrix<Scalar, 3, 3>;
  using Vector3 = Eigen::Matrix<Scalar, 3, 1>;

  Rotation() : q_(Quaternion::Identity()) {}
  explicit Rotation(const Quaternion& q) : q_(q.normalized()) {}

  static Rotation identity() { return Rotation(); }

  /// R = Rz(alpha) * Ry(beta) * Rz(gamma).
  static Rotation from_zyz(Scalar alpha, Scalar beta, Scalar gamma) {
    using AA = Eigen::AngleAxis<Scalar>;
    return Rotation(Quaternion(AA(alpha, Vector3::UnitZ()) * AA(beta, Vector3::UnitY()) *
                               AA(gamma, Vector3::UnitZ())));
  }

  static Rotation about_z(Scalar angle) { return from_zyz(angle, 0, 0); }

  /// Haar-uniform random rotation (normalized Gaussian quaternion).
  template <typename Rng>
  static Rotation random(Rng& rng) {
    std::normal_distribution<Scalar> n01(0, 1);
    Quaternion q;
    do {
      q = Quaternion(n01(rng), n01(rng), n01(rng), n01(rng));
    } while (q.norm() < Scalar(1e-8));
    return Rotation(q);
  }

  const Quaternion& quaternion() const { return q_; }
  Matrix3 matrix() const { return q_.toRotationMatrix(); }
  Rotation inverse() const { return Rotation(q_.conjugate()); }
  Vector3 apply(const Vector3& x) const { return q_ * x; }

  friend Rotation operator*(const Rotation& a, const Rotation& b) { return Rotation(a.q_ * b.q_); }

 private:
  Quaternion q_;
};

/// Spherical coordinates of a unit vector, longitude wrapped into [0, 2pi).
template <typename Scalar>
Eigen::Matrix<Scalar, 2, 1> to_spherical(const Eigen::Matrix<Scalar, 3, 1>& x) {
  constexpr Scalar two_pi = 2 * std::numbers::pi_v<Scalar>;
  const Scalar theta = std::atan2(std::hypot(x.x(), x.y()), x.z());
  Scalar phi = std::atan2(x.y(), x.x());
  if (phi < 0) phi += two_pi;
  if (phi >= two_pi) phi = 0;
  return {theta, phi};
}

/// Coordinates of R^{-1} x for every grid point x, in field column order.
template <typename Scalar>
Coordinates<Scalar> rotate_grid_points(const SphericalGrid<Scalar>& grid, const Rotation<Scalar>& rotation) {
  constexpr Scalar two_pi = 2 * std::numbers::pi_v<Scalar>;
  const auto inv = rotation.inverse().matrix();
  Coordinates<Scalar> out(2, grid.points());
  if (inv == Eigen::Matrix<Scalar, 3, 3>::Identity()) {
    for (int i = 0; i < grid.nlat(); ++i)
      for (int j = 0; j < grid.nlon(); ++j) out.col(Index(i) * grid.nlon() + j) << grid.colatitudes(i), grid.longitudes(j);
    return out;
  }
  // Longitude is undefined at the poles; continue it with the azimuth R^{-1}
  // imparts to the x axis, which is exact for rotations about z.
  const Eigen::Matrix<Scalar, 3, 1> ex = inv.col(0);
  const Scalar azimuth = std::atan2(ex.y(), ex.x());
  for (int i = 0; i < grid.nlat(); ++i)
    for (int j = 0; j < grid.nlon(); ++j) {
      const Eigen::Matrix<Scalar, 3, 1> y = inv * to_cartesian(grid.colatitudes(i), grid.longitudes(j));
      auto c = to_spherical<Scalar>(y);
      if (std::hypot(y.x(), y.y()) <= Scalar(1e-14)) {
        Scalar phi = grid.longitudes(j) + azimuth;
        phi -= std::floor(phi / two_pi) * two_pi;
        c(1) = phi >= two_pi ? Scalar(0) : phi;
      }
      out.col(Index(i) * grid.nlon() + j) = c;
    }
  return out;
}

namespace detail {

/// Up to four (column, weight) taps of a bilinear stencil.
template <typename Scalar>
struct Stencil {
  Index column[4];
  Scalar weight[4];
  int taps = 0;

  void add(Index c, Scalar w) {
    if (w == Scalar(0)) return;
    column[taps] = c;
    weight[taps] = w;
    ++taps;
  }
};

// Offsets closer than this (in cell units) to a node snap onto it, so that
// targets which coincide with grid nodes up to round-off reproduce node values.
template <typename Scalar>
constexpr Scalar kSnap = Scalar(1e-9);

template <typename Scalar>
Stencil<Scalar> bilinear_stencil(const SphericalGrid<Scalar>& grid, Scalar theta, Scalar phi) {
  constexpr Scalar two_pi = 2 * std::numbers::pi_v<Scalar>;
  const auto& th = grid.colatitudes;
  const int nlat = grid.nlat(), nlon = grid.nlon();

  int i0 = 0, i1 = 0;
  Scalar t = 0;
  if (theta <= th(0)) {
    i0 = i1 = 0;
  } else if (theta >= th(nlat - 1)) {
    i0 = i1 = nlat - 1;
  } else {
    const Scalar* it = std::upper_bound(th.data(), th.data() + nlat, theta);
    i1 = static_cast<int>(it - th.data());
    i0 = i1 - 1;
    t = (theta - th(i0)) / (th(i1) - th(i0));
    if (t < kSnap<Scalar>) t = 0;
    if (t > 1 - kSnap<Scalar>) {
      i0 = i1;
      t = 0;
    }
  }

  Scalar u = phi / two_pi * Scalar(nlon);
  u -= std::floor(u / Scalar(nlon)) * Scalar(nlon);
  int j0 = static_cast<int>(std::floor(u));
  Scalar f = u - Scalar(j0);
  if (f < kSnap<Scalar>) f = 0;
  if (f > 1 - kSnap<Scalar>) {
    ++j0;
    f = 0;
  }
  j0 = ((j0 % nlon) + nlon) % nlon;
  const int j1 = (j0 + 1) % nlon;

  Stencil<Scalar> s;
  const auto col = [nlon](int i, int j) { return Index(i) * nlon + j; };
  s.add(col(i0, j0), (1 - t) * (1 - f));
  s.add(col(i0, j1), (1 - t) * f);
  if (t != 0) {
    s.add(col(i1, j0), t * (1 - f));
    s.add(col(i1, j1), t * f);
  }
  return s;
}

}  // namespace detail

/// Bilinear interpolation in (colatitude, longitude), periodic in longitude.
/// Targets above the first or below the last latitude row clamp to that row.
/// Result has one column per (batch, target), batch-major.
template <typename Scalar>
Matrix<Scalar> interpolate_bilinear(const Field<Scalar>& field, const SphericalGrid<Scalar>& grid,
                                    const Coordinates<Scalar>& targets) {
  require_same_grid(field, grid.shape, "interpolate_bilinear");
  const Index nt = targets.cols();
  Matrix<Scalar> out(field.channels, Index(field.batch) * nt);
  parallel_chunks(nt, 256, [&](Index begin, Index end) {
    for (Index k = begin; k < end; ++k) {
      const auto s = detail::bilinear_stencil(grid, targets(0, k), targets(1, k));
      for (int b = 0; b < field.batch; ++b) {
        const Index base = Index(b) * field.points();
        auto dst = out.col(Index(b) * nt + k);
        if (s.taps == 1 && s.weight[0] == Scalar(1)) {
          dst = field.values.col(base + s.column[0]);
          continue;
        }
        dst = s.weight[0] * field.values.col(base + s.column[0]);
        for (int tap = 1; tap < s.taps; ++tap) dst += s.weight[tap] * field.values.col(base + s.column[tap]);
      }
    }
  });
  return out;
}

/// out(x) = in(R^{-1} x), resampled bilinearly.
template <typename Scalar>
Field<Scalar> rotate_field(const Field<Scalar>& field, const SphericalGrid<Scalar>& grid,
                           const Rotation<Scalar>& rotation) {
  Field<Scalar> out(field.grid, field.batch, field.channels);
  out.values = interpolate_bilinear(field, grid, rotate_grid_points(grid, rotation));
  return out;
}

}  // namespace s2attn
