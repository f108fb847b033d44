#pragma once

// Measurement helpers shared by the command-line reports and the test suites.

#include <Eigen/Core>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "s2attn/attention.hpp"
#include "s2attn/grid.hpp"
#include "s2attn/harmonics.hpp"
#include "s2attn/neighborhood.hpp"
#include "s2attn/rotation.hpp"
#include "s2attn/transformer.hpp"

namespace s2attn {

/// sqrt(sum over batch and channels of the quadrature integral of f^2).
template <typename Scalar>
Scalar weighted_l2_norm(const Field<Scalar>& f, const SphericalGrid<Scalar>& grid) {
  require_same_grid(f, grid.shape, "weighted_l2_norm");
  const Vector<Scalar> w = grid.point_weights();
  Vector<Scalar> per(Index(f.batch) * f.channels);
  for (int b = 0; b < f.batch; ++b) {
    const Vector<Scalar> s = f.batch_block(b).array().square().matrix() * w;
    per.segment(Index(b) * f.channels, f.channels) = s;
  }
  return std::sqrt(pairwise_sum(per));
}

/// Harmonic coefficients of band-limited q, k, v signals.
template <typename Scalar>
struct SignalCoefficients {
  Matrix<Scalar> q, k, v;

  template <typename Rng>
  static SignalCoefficients random(int channels, int lmax, Rng& rng) {
    SignalCoefficients c;
    c.q = random_harmonic_coefficients<Scalar>(channels, lmax, rng);
    c.k = random_harmonic_coefficients<Scalar>(channels, lmax, rng);
    c.v = random_harmonic_coefficients<Scalar>(channels, lmax, rng);
    return c;
  }
};

/// ||A(R q, R k, R v) - R A(q, k, v)|| / ||R A(q, k, v)|| for each rotation.
///
/// Rotated inputs are synthesized exactly at the back-rotated grid points; the
/// reference output is rotated by bilinear interpolation.
template <typename Scalar>
std::vector<Scalar> equivariance_errors(const SphericalGrid<Scalar>& grid, AttentionMode mode, double theta_cutoff,
                                        const SignalCoefficients<Scalar>& coeffs,
                                        const std::vector<Rotation<Scalar>>& rotations, int heads = 1) {
  const int channels = static_cast<int>(coeffs.q.rows());
  if (coeffs.k.rows() != channels || channels % heads != 0)
    throw ShapeMismatch("equivariance_errors: q/k channels must agree and divide into heads");
  const auto config = AttentionConfig(heads, channels / heads);
  NeighborhoodMap map;
  if (mode == AttentionMode::Neighborhood) map = build_neighborhood(grid, theta_cutoff);

  const auto make = [&](const Matrix<Scalar>& c, const Coordinates<Scalar>& points) {
    Field<Scalar> f(grid.shape, 1, static_cast<int>(c.rows()));
    f.values = synthesize(c, points);
    return f;
  };
  const auto run = [&](const Coordinates<Scalar>& points) {
    const Field<Scalar> q = make(coeffs.q, points), k = make(coeffs.k, points), v = make(coeffs.v, points);
    return mode == AttentionMode::Global ? s2_attention_forward(q, k, v, grid, config)
                                         : neighborhood_attention_forward(q, k, v, map, grid, config);
  };

  const Field<Scalar> y = run(grid_coordinates(grid));
  std::vector<Scalar> errors;
  errors.reserve(rotations.size());
  for (const auto& r : rotations) {
    const Field<Scalar> lhs = run(rotate_grid_points(grid, r));
    Field<Scalar> diff = rotate_field(y, grid, r);
    const Scalar denom = weighted_l2_norm(diff, grid);
    diff.values -= lhs.values;
    errors.push_back(weighted_l2_norm(diff, grid) / denom);
  }
  return errors;
}

template <typename Scalar>
bool strictly_decreasing(const std::vector<Scalar>& xs) {
  for (std::size_t i = 1; i < xs.size(); ++i)
    if (!(xs[i] < xs[i - 1])) return false;
  return true;
}

/// Least-squares slope of log(y) against log(x).
inline double loglog_slope(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw std::invalid_argument("loglog_slope: need two or more matching points");
  Eigen::MatrixXd a(x.size(), 2);
  Eigen::VectorXd b(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!(x[i] > 0 && y[i] > 0)) throw std::invalid_argument("loglog_slope: values must be positive");
    a(Index(i), 0) = std::log(x[i]);
    a(Index(i), 1) = 1.0;
    b(Index(i)) = std::log(y[i]);
  }
  return a.colPivHouseholderQr().solve(b)(0);
}

/// Median wall-clock seconds of `repeats` calls to fn.
template <typename Fn>
double median_seconds(Fn&& fn, int repeats) {
  if (repeats < 1) throw std::invalid_argument("median_seconds: repeats must be positive");
  std::vector<double> t;
  for (int r = 0; r < repeats; ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    fn();
    t.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  }
  std::sort(t.begin(), t.end());
  return t.size() % 2 ? t[t.size() / 2] : 0.5 * (t[t.size() / 2 - 1] + t[t.size() / 2]);
}

}  // namespace s2attn
