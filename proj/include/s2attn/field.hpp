#pragma once

#include <Eigen/Core>

#include <stdexcept>
#include <string>
#include <string_view>

namespace s2attn {

using Index = Eigen::Index;

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

/// Rows hold colatitude (row 0) and longitude (row 1) of a set of points.
template <typename Scalar>
using Coordinates = Eigen::Matrix<Scalar, 2, Eigen::Dynamic>;

/// Raised when two operands live on different grids.
struct GridMismatch : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Raised when channel or batch dimensions disagree.
struct ShapeMismatch : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

enum class GridFamily { Equiangular, Gaussian };

inline std::string to_string(GridFamily family) {
  return family == GridFamily::Equiangular ? "equiangular" : "gaussian";
}

inline GridFamily parse_grid_family(std::string_view name) {
  if (name == "equiangular") return GridFamily::Equiangular;
  if (name == "gaussian") return GridFamily::Gaussian;
  throw std::invalid_argument("unknown grid family '" + std::string(name) + "'");
}

/// Identity of a discretization: enough to decide whether two fields are compatible.
struct GridShape {
  GridFamily family = GridFamily::Equiangular;
  int nlat = 0;
  int nlon = 0;

  Index points() const { return Index(nlat) * nlon; }
  friend bool operator==(const GridShape&, const GridShape&) = default;
};

inline std::string describe(const GridShape& g) {
  return to_string(g.family) + " " + std::to_string(g.nlat) + "x" + std::to_string(g.nlon);
}

/// Batched multi-channel signal on a spherical grid.
///
/// Storage is one column per (batch, point) so that the channel vector of a
/// point is contiguous: column `b * nlat * nlon + lat * nlon + lon`.
template <typename Scalar>
struct Field {
  GridShape grid;
  int batch = 0;
  int channels = 0;
  Matrix<Scalar> values;

  Field() = default;

  Field(const GridShape& g, int nbatch, int nchannels)
      : grid(g),
        batch(nbatch),
        channels(nchannels),
        values(Matrix<Scalar>::Zero(nchannels, Index(nbatch) * g.points())) {
    if (nbatch < 1 || nchannels < 1)
      throw std::invalid_argument("Field: batch and channel counts must be positive");
  }

  Index points() const { return grid.points(); }

  Index column(int b, int lat, int lon) const {
    return Index(b) * points() + Index(lat) * grid.nlon + lon;
  }

  Scalar& operator()(int b, int c, int lat, int lon) { return values(c, column(b, lat, lon)); }
  Scalar operator()(int b, int c, int lat, int lon) const { return values(c, column(b, lat, lon)); }

  auto batch_block(int b) { return values.middleCols(Index(b) * points(), points()); }
  auto batch_block(int b) const { return values.middleCols(Index(b) * points(), points()); }

  bool all_finite() const { return values.allFinite(); }
};

template <typename Scalar>
void require_same_grid(const Field<Scalar>& a, const GridShape& g, const char* what) {
  if (!(a.grid == g))
    throw GridMismatch(std::string(what) + ": field is on " + describe(a.grid) + ", expected " +
                       describe(g));
}

template <typename Scalar>
void require_same_layout(const Field<Scalar>& a, const Field<Scalar>& b, const char* what) {
  if (!(a.grid == b.grid))
    throw GridMismatch(std::string(what) + ": " + describe(a.grid) + " vs " + describe(b.grid));
  if (a.batch != b.batch || a.channels != b.channels)
    throw ShapeMismatch(std::string(what) + ": batch/channel shapes differ");
}

/// Circular shift of every row by `shift` columns: out(lon) = in(lon - shift).
template <typename Scalar>
Field<Scalar> roll_longitude(const Field<Scalar>& in, int shift) {
  Field<Scalar> out = in;
  const int nlon = in.grid.nlon;
  const int s = ((shift % nlon) + nlon) % nlon;
  for (int b = 0; b < in.batch; ++b)
    for (int lat = 0; lat < in.grid.nlat; ++lat)
      for (int lon = 0; lon < nlon; ++lon)
        out.values.col(out.column(b, lat, (lon + s) % nlon)) = in.values.col(in.column(b, lat, lon));
  return out;
}

}  // namespace s2attn
