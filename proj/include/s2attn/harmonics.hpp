#pragma once

#include <Eigen/Core>

#include <cmath>
#include <numbers>
#include <random>
#include <stdexcept>

#include "s2attn/field.hpp"
#include "s2attn/grid.hpp"
#include "s2attn/parallel.hpp"

namespace s2attn {

struct HarmonicIndex {
  int degree = 0;  // l
  int order = 0;   // m, |m| <= l

  friend bool operator==(const HarmonicIndex&, const HarmonicIndex&) = default;
};

/// Channel k of the spectral embedding: l = floor(sqrt(k)), m = k - l(l+1).
inline HarmonicIndex harmonic_index(long k) {
  if (k < 0) throw std::invalid_argument("harmonic_index: negative channel");
  long l = static_cast<long>(std::sqrt(static_cast<double>(k)));
  while (l * l > k) --l;
  while ((l + 1) * (l + 1) <= k) ++l;
  return {static_cast<int>(l), static_cast<int>(k - l * (l + 1))};
}

inline long harmonic_channel(const HarmonicIndex& idx) {
  return long(idx.degree) * (idx.degree + 1) + idx.order;
}

/// Associated Legendre function P_l^m(x) including the Condon-Shortley phase.
template <typename Scalar>
Scalar associated_legendre(int l, int m, Scalar x) {
  if (m < 0 || l < 0 || m > l) throw std::invalid_argument("associated_legendre: need 0 <= m <= l");
  if (std::abs(x) > Scalar(1)) throw std::invalid_argument("associated_legendre: |x| > 1");
  // P_m^m = (-1)^m (2m-1)!! (1-x^2)^{m/2}
  Scalar pmm = 1;
  const Scalar somx2 = std::sqrt((Scalar(1) - x) * (Scalar(1) + x));
  Scalar fact = 1;
  for (int i = 1; i <= m; ++i) {
    pmm *= -fact * somx2;
    fact += 2;
  }
  if (l == m) return pmm;
  Scalar pmm1 = x * Scalar(2 * m + 1) * pmm;
  for (int ll = m + 2; ll <= l; ++ll) {
    const Scalar pll = (x * Scalar(2 * ll - 1) * pmm1 - Scalar(ll + m - 1) * pmm) / Scalar(ll - m);
    pmm = pmm1;
    pmm1 = pll;
  }
  return pmm1;
}

/// c_l^m = sqrt((2l+1)/(4pi) (l-m)!/(l+m)!), evaluated through log-gamma.
template <typename Scalar>
Scalar harmonic_normalization(int l, int m) {
  using std::lgamma;
  const Scalar log_c = Scalar(0.5) * (std::log(Scalar(2 * l + 1) / (4 * std::numbers::pi_v<Scalar>)) +
                                      lgamma(Scalar(l - m + 1)) - lgamma(Scalar(l + m + 1)));
  return std::exp(log_c);
}

/// Real orthonormal spherical harmonic: sqrt(2) c P cos(m phi) for m > 0,
/// sqrt(2) c P sin(|m| phi) for m < 0, c P for m = 0.
template <typename Scalar>
Scalar real_sph_harmonic(int l, int m, Scalar theta, Scalar phi) {
  if (l < 0 || std::abs(m) > l) throw std::invalid_argument("real_sph_harmonic: need |m| <= l");
  const int am = std::abs(m);
  const Scalar base = harmonic_normalization<Scalar>(l, am) * associated_legendre<Scalar>(l, am, std::cos(theta));
  if (m == 0) return base;
  const Scalar sqrt2 = std::numbers::sqrt2_v<Scalar>;
  return m > 0 ? sqrt2 * base * std::cos(Scalar(m) * phi) : sqrt2 * base * std::sin(Scalar(am) * phi);
}

/// All real harmonics with l <= lmax at one point, in channel order k = l(l+1)+m.
template <typename Scalar>
Vector<Scalar> real_harmonics_upto(int lmax, Scalar theta, Scalar phi) {
  if (lmax < 0) throw std::invalid_argument("real_harmonics_upto: negative lmax");
  const Scalar x = std::cos(theta);
  const Scalar somx2 = std::sqrt((Scalar(1) - x) * (Scalar(1) + x));
  const Scalar sqrt2 = std::numbers::sqrt2_v<Scalar>;
  Vector<Scalar> y(Index(lmax + 1) * (lmax + 1));
  Scalar pmm = 1, fact = 1;
  for (int m = 0; m <= lmax; ++m) {
    if (m > 0) {
      pmm *= -fact * somx2;
      fact += 2;
    }
    const Scalar cm = std::cos(Scalar(m) * phi), sm = std::sin(Scalar(m) * phi);
    Scalar p_prev = 0, p = pmm;
    for (int l = m; l <= lmax; ++l) {
      if (l == m + 1) {
        p_prev = p;
        p = x * Scalar(2 * m + 1) * pmm;
      } else if (l > m + 1) {
        const Scalar next = (x * Scalar(2 * l - 1) * p - Scalar(l + m - 1) * p_prev) / Scalar(l - m);
        p_prev = p;
        p = next;
      }
      const Scalar base = harmonic_normalization<Scalar>(l, m) * p;
      const long k0 = long(l) * (l + 1);
      if (m == 0) {
        y(k0) = base;
      } else {
        y(k0 + m) = sqrt2 * base * cm;
        y(k0 - m) = sqrt2 * base * sm;
      }
    }
  }
  return y;
}

/// Matrix of harmonics sampled at `points`: one row per point, (lmax+1)^2 columns.
template <typename Scalar>
Matrix<Scalar> harmonic_design_matrix(int lmax, const Coordinates<Scalar>& points) {
  Matrix<Scalar> y(points.cols(), Index(lmax + 1) * (lmax + 1));
  parallel_chunks(points.cols(), 512, [&](Index begin, Index end) {
    for (Index p = begin; p < end; ++p) y.row(p) = real_harmonics_upto<Scalar>(lmax, points(0, p), points(1, p)).transpose();
  });
  return y;
}

template <typename Scalar>
Coordinates<Scalar> grid_coordinates(const SphericalGrid<Scalar>& grid) {
  Coordinates<Scalar> c(2, grid.points());
  for (int i = 0; i < grid.nlat(); ++i)
    for (int j = 0; j < grid.nlon(); ++j) c.col(Index(i) * grid.nlon() + j) << grid.colatitudes(i), grid.longitudes(j);
  return c;
}

/// Spectral positional embedding: channel k holds Y_l^m with (l, m) = harmonic_index(k).
/// With `zonal_only`, channels with m != 0 are zeroed (longitude-roll invariant).
template <typename Scalar>
Field<Scalar> spectral_position_embedding(const SphericalGrid<Scalar>& grid, int num_channels,
                                          bool zonal_only = false) {
  if (num_channels < 1) throw std::invalid_argument("spectral_position_embedding: need >= 1 channel");
  const int lmax = harmonic_index(num_channels - 1).degree;
  const Matrix<Scalar> y = harmonic_design_matrix<Scalar>(lmax, grid_coordinates(grid));
  Field<Scalar> out(grid.shape, 1, num_channels);
  out.values = y.leftCols(num_channels).transpose();
  if (zonal_only)
    for (int k = 0; k < num_channels; ++k)
      if (harmonic_index(k).order != 0) out.values.row(k).setZero();
  return out;
}

/// Coefficients for a band-limited random signal: channels x (lmax+1)^2, scaled
/// so that the expected mean square of each channel over the sphere is one.
template <typename Scalar, typename Rng>
Matrix<Scalar> random_harmonic_coefficients(int channels, int lmax, Rng& rng) {
  std::normal_distribution<Scalar> n01(0, 1);
  const Index nh = Index(lmax + 1) * (lmax + 1);
  const Scalar scale = std::sqrt(4 * std::numbers::pi_v<Scalar> / Scalar(nh));
  Matrix<Scalar> c(channels, nh);
  for (Index j = 0; j < nh; ++j)
    for (int i = 0; i < channels; ++i) c(i, j) = scale * n01(rng);
  return c;
}

/// Evaluates sum_k coefficients(c, k) Y_k at `points`; result is channels x points.
template <typename Scalar>
Matrix<Scalar> synthesize(const Matrix<Scalar>& coefficients, const Coordinates<Scalar>& points) {
  const Index nh = coefficients.cols();
  const int lmax = static_cast<int>(std::lround(std::sqrt(double(nh)))) - 1;
  if (Index(lmax + 1) * (lmax + 1) != nh) throw std::invalid_argument("synthesize: coefficient count is not a square");
  return coefficients * harmonic_design_matrix<Scalar>(lmax, points).transpose();
}

}  // namespace s2attn
