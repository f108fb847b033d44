#pragma once

#include <Eigen/Core>

#include <cmath>
#include <limits>
#include <numbers>
#include <span>
#include <stdexcept>
#include <vector>

#include "s2attn/attention.hpp"
#include "s2attn/field.hpp"
#include "s2attn/grid.hpp"
#include "s2attn/parallel.hpp"

namespace s2attn {

/// A neighbor of the point (lat, lon) is (entry.lat, lon + entry.lon_offset mod nlon).
/// In the reverse map, entry.lat is the output row and the query column is
/// (source lon - entry.lon_offset) mod nlon.
struct NeighborEntry {
  int lat = 0;
  int lon_offset = 0;

  friend bool operator==(const NeighborEntry&, const NeighborEntry&) = default;
};

/// Sparse geodesic-disk adjacency, stored once per latitude row (CSR).
struct NeighborhoodMap {
  GridShape grid;
  double theta_cutoff = 0;
  std::vector<Index> row_start;  // nlat + 1
  std::vector<NeighborEntry> entries;
  std::vector<Index> reverse_start;  // nlat + 1
  std::vector<NeighborEntry> reverse_entries;

  std::span<const NeighborEntry> neighbors(int lat) const {
    return {entries.data() + row_start[lat], entries.data() + row_start[lat + 1]};
  }
  std::span<const NeighborEntry> sources(int lat) const {
    return {reverse_entries.data() + reverse_start[lat], reverse_entries.data() + reverse_start[lat + 1]};
  }
  Index neighbor_count(int lat) const { return row_start[lat + 1] - row_start[lat]; }

  /// Number of (query, key) pairs over the whole grid.
  Index total_pairs() const { return Index(entries.size()) * grid.nlon; }

  /// Assembles the map from per-row neighbor lists and derives the reverse map.
  static NeighborhoodMap from_rows(const GridShape& shape, double cutoff,
                                   const std::vector<std::vector<NeighborEntry>>& rows) {
    if (static_cast<int>(rows.size()) != shape.nlat) throw std::invalid_argument("NeighborhoodMap: row count mismatch");
    NeighborhoodMap map;
    map.grid = shape;
    map.theta_cutoff = cutoff;
    map.row_start.assign(shape.nlat + 1, 0);
    for (int h = 0; h < shape.nlat; ++h) map.row_start[h + 1] = map.row_start[h] + Index(rows[h].size());
    map.entries.reserve(map.row_start.back());
    std::vector<Index> counts(shape.nlat, 0);
    for (const auto& row : rows)
      for (const auto& e : row) {
        if (e.lat < 0 || e.lat >= shape.nlat || e.lon_offset < 0 || e.lon_offset >= shape.nlon)
          throw std::invalid_argument("NeighborhoodMap: entry out of range");
        map.entries.push_back(e);
        ++counts[e.lat];
      }
    map.reverse_start.assign(shape.nlat + 1, 0);
    for (int h = 0; h < shape.nlat; ++h) map.reverse_start[h + 1] = map.reverse_start[h] + counts[h];
    map.reverse_entries.resize(map.entries.size());
    std::vector<Index> fill(map.reverse_start.begin(), map.reverse_start.end() - 1);
    for (int h = 0; h < shape.nlat; ++h)
      for (const auto& e : rows[h]) map.reverse_entries[fill[e.lat]++] = {h, e.lon_offset};
    return map;
  }
};

/// Cutoff matching a 7x7 planar window at the equator: 7 pi / (sqrt(pi) nlat).
inline double default_theta_cutoff(int nlat) {
  return 7.0 * std::numbers::pi / (std::sqrt(std::numbers::pi) * double(nlat));
}

/// Closed geodesic disks of radius `theta_cutoff` around every grid point.
template <typename Scalar>
NeighborhoodMap build_neighborhood(const SphericalGrid<Scalar>& grid, double theta_cutoff) {
  if (!(theta_cutoff > 0)) throw std::invalid_argument("build_neighborhood: cutoff must be positive");
  const int nlat = grid.nlat(), nlon = grid.nlon();
  std::vector<std::vector<NeighborEntry>> rows(nlat);
  parallel_chunks(nlat, 1, [&](Index begin, Index end) {
    for (Index h = begin; h < end; ++h) {
      const double th = double(grid.colatitudes(h));
      for (int hp = 0; hp < nlat; ++hp) {
        const double thp = double(grid.colatitudes(hp));
        if (std::abs(thp - th) > theta_cutoff) continue;
        for (int dw = 0; dw < nlon; ++dw)
          if (geodesic_distance(th, 0.0, thp, double(grid.longitudes(dw))) <= theta_cutoff)
            rows[h].push_back({hp, dw});
      }
    }
  });
  return NeighborhoodMap::from_rows(grid.shape, theta_cutoff, rows);
}

template <typename Scalar>
struct AttentionGradients {
  Field<Scalar> dq, dk, dv;
};

namespace detail {

/// Per-output-row flag: the disk carries positive total quadrature weight.
/// Disks without weight (equiangular pole row, tiny cutoff) fall back to
/// uniform key weights so the softmax stays defined.
template <typename Scalar>
std::vector<char> weighted_rows(const NeighborhoodMap& map, const SphericalGrid<Scalar>& grid) {
  std::vector<char> out(grid.nlat(), 0);
  for (int h = 0; h < grid.nlat(); ++h)
    for (const auto& e : map.neighbors(h))
      if (grid.weights(e.lat) > Scalar(0)) {
        out[h] = 1;
        break;
      }
  return out;
}

template <typename Scalar>
void validate_neighborhood(const NeighborhoodMap& map, const SphericalGrid<Scalar>& grid, const char* what) {
  if (!(map.grid == grid.shape))
    throw GridMismatch(std::string(what) + ": map built for " + describe(map.grid) + ", grid is " + describe(grid.shape));
  if (static_cast<int>(map.row_start.size()) != grid.nlat() + 1 ||
      static_cast<int>(map.reverse_start.size()) != grid.nlat() + 1)
    throw GridMismatch(std::string(what) + ": malformed neighborhood map");
  require_nonnegative_weights(grid, what);
}

template <typename Scalar>
struct HeadSlices {
  Matrix<Scalar> q, k, v;
};

template <typename Scalar>
HeadSlices<Scalar> head_slices(const Field<Scalar>& q, const Field<Scalar>& k, const Field<Scalar>& v, int b, int h,
                               int d, int e) {
  return {q.batch_block(b).middleRows(h * d, d), k.batch_block(b).middleRows(h * d, d),
          v.batch_block(b).middleRows(h * e, e)};
}

/// Softmax weights p_j (summing to one) of query (lat, lon) over its disk,
/// written into `p`; returns the row maximum and normalizer through out-params.
template <typename Scalar>
void disk_softmax(const NeighborhoodMap& map, const SphericalGrid<Scalar>& grid, const std::vector<char>& weighted,
                  const Matrix<Scalar>& q, const Matrix<Scalar>& k, Scalar scale, int lat, int lon,
                  std::vector<Scalar>& p, std::vector<Index>& cols, Scalar& row_max, Scalar& norm) {
  const int nlon = grid.nlon();
  const auto nbrs = map.neighbors(lat);
  const Index i = Index(lat) * nlon + lon;
  const bool use_w = weighted[lat] != 0;
  p.resize(nbrs.size());
  cols.resize(nbrs.size());
  Scalar m = -std::numeric_limits<Scalar>::infinity();
  for (std::size_t n = 0; n < nbrs.size(); ++n) {
    const Index j = Index(nbrs[n].lat) * nlon + (lon + nbrs[n].lon_offset) % nlon;
    cols[n] = j;
    p[n] = scale * q.col(i).dot(k.col(j));
    if ((!use_w || grid.weights(nbrs[n].lat) > Scalar(0)) && p[n] > m) m = p[n];
  }
  Scalar z = 0;
  for (std::size_t n = 0; n < nbrs.size(); ++n) {
    p[n] = std::exp(p[n] - m) * (use_w ? grid.weights(nbrs[n].lat) : Scalar(1));
    z += p[n];
  }
  for (auto& x : p) x /= z;
  row_max = m;
  norm = z;
}

}  // namespace detail

/// Attention restricted to geodesic disks, keys weighted by quadrature weights.
template <typename Scalar>
Field<Scalar> neighborhood_attention_forward(const Field<Scalar>& q, const Field<Scalar>& k, const Field<Scalar>& v,
                                             const NeighborhoodMap& map, const SphericalGrid<Scalar>& grid,
                                             const AttentionConfig& config) {
  detail::validate_attention_inputs(q, k, v, grid.shape, config, "neighborhood_attention_forward");
  detail::validate_neighborhood(map, grid, "neighborhood_attention_forward");
  const int d = config.head_dim, e = v.channels / config.heads, nlon = grid.nlon();
  const Scalar scale = Scalar(config.scale);
  const auto weighted = detail::weighted_rows(map, grid);
  Field<Scalar> out(grid.shape, q.batch, v.channels);
  for (int b = 0; b < q.batch; ++b)
    for (int h = 0; h < config.heads; ++h) {
      const auto s = detail::head_slices(q, k, v, b, h, d, e);
      Matrix<Scalar> y(e, grid.points());
      parallel_chunks(grid.points(), 64, [&](Index begin, Index end) {
        std::vector<Scalar> p;
        std::vector<Index> cols;
        Scalar m, z;
        for (Index i = begin; i < end; ++i) {
          const int lat = static_cast<int>(i / nlon), lon = static_cast<int>(i % nlon);
          detail::disk_softmax(map, grid, weighted, s.q, s.k, scale, lat, lon, p, cols, m, z);
          auto acc = y.col(i);
          acc.setZero();
          for (std::size_t n = 0; n < p.size(); ++n) acc += p[n] * s.v.col(cols[n]);
        }
      });
      out.batch_block(b).middleRows(h * e, e) = y;
    }
  return out;
}

/// Gradients of sum(dy . y) with respect to q, k and v. Softmax weights are
/// recomputed from stored per-query maxima and normalizers; dk and dv are
/// gathered per source point through the reverse map.
template <typename Scalar>
AttentionGradients<Scalar> neighborhood_attention_backward(const Field<Scalar>& q, const Field<Scalar>& k,
                                                           const Field<Scalar>& v, const Field<Scalar>& dy,
                                                           const NeighborhoodMap& map,
                                                           const SphericalGrid<Scalar>& grid,
                                                           const AttentionConfig& config) {
  detail::validate_attention_inputs(q, k, v, grid.shape, config, "neighborhood_attention_backward");
  detail::validate_neighborhood(map, grid, "neighborhood_attention_backward");
  require_same_layout(dy, v, "neighborhood_attention_backward: dy");
  const int d = config.head_dim, e = v.channels / config.heads, nlon = grid.nlon();
  const Index npts = grid.points();
  const Scalar scale = Scalar(config.scale);
  const auto weighted = detail::weighted_rows(map, grid);

  AttentionGradients<Scalar> g{Field<Scalar>(grid.shape, q.batch, q.channels),
                               Field<Scalar>(grid.shape, q.batch, k.channels),
                               Field<Scalar>(grid.shape, q.batch, v.channels)};
  for (int b = 0; b < q.batch; ++b)
    for (int h = 0; h < config.heads; ++h) {
      const auto s = detail::head_slices(q, k, v, b, h, d, e);
      const Matrix<Scalar> dyh = dy.batch_block(b).middleRows(h * e, e);
      Vector<Scalar> row_max(npts), norm(npts), gbar(npts);
      Matrix<Scalar> dq(d, npts), dk(d, npts), dv(e, npts);

      // queries: softmax statistics and dq
      parallel_chunks(npts, 64, [&](Index begin, Index end) {
        std::vector<Scalar> p;
        std::vector<Index> cols;
        Vector<Scalar> y(e);
        for (Index i = begin; i < end; ++i) {
          const int lat = static_cast<int>(i / nlon), lon = static_cast<int>(i % nlon);
          detail::disk_softmax(map, grid, weighted, s.q, s.k, scale, lat, lon, p, cols, row_max(i), norm(i));
          y.setZero();
          for (std::size_t n = 0; n < p.size(); ++n) y += p[n] * s.v.col(cols[n]);
          const Scalar gb = dyh.col(i).dot(y);
          gbar(i) = gb;
          auto acc = dq.col(i);
          acc.setZero();
          for (std::size_t n = 0; n < p.size(); ++n)
            acc += (p[n] * (dyh.col(i).dot(s.v.col(cols[n])) - gb)) * s.k.col(cols[n]);
          acc *= scale;
        }
      });

      // sources: dk and dv over every query whose disk contains the source
      parallel_chunks(npts, 64, [&](Index begin, Index end) {
        for (Index j = begin; j < end; ++j) {
          const int lat = static_cast<int>(j / nlon), lon = static_cast<int>(j % nlon);
          auto dkj = dk.col(j);
          auto dvj = dv.col(j);
          dkj.setZero();
          dvj.setZero();
          for (const auto& src : map.sources(lat)) {
            const Index i = Index(src.lat) * nlon + (lon - src.lon_offset + nlon) % nlon;
            const Scalar w = weighted[src.lat] ? grid.weights(lat) : Scalar(1);
            if (w == Scalar(0)) continue;
            const Scalar sij = scale * s.q.col(i).dot(s.k.col(j));
            const Scalar p = std::exp(sij - row_max(i)) * w / norm(i);
            dvj += p * dyh.col(i);
            dkj += (p * (dyh.col(i).dot(s.v.col(j)) - gbar(i))) * s.q.col(i);
          }
          dkj *= scale;
        }
      });

      g.dq.batch_block(b).middleRows(h * d, d) = dq;
      g.dk.batch_block(b).middleRows(h * d, d) = dk;
      g.dv.batch_block(b).middleRows(h * e, e) = dv;
    }
  return g;
}

/// Normalized weights A_ij * w_j of one query over its disk, as (column, weight) pairs.
template <typename Scalar>
std::vector<std::pair<Index, Scalar>> neighborhood_attention_weights(const Field<Scalar>& q, const Field<Scalar>& k,
                                                                     const NeighborhoodMap& map,
                                                                     const SphericalGrid<Scalar>& grid,
                                                                     const AttentionConfig& config, int batch, int head,
                                                                     int lat, int lon) {
  detail::validate_neighborhood(map, grid, "neighborhood_attention_weights");
  const int d = config.head_dim;
  const Matrix<Scalar> qh = q.batch_block(batch).middleRows(head * d, d);
  const Matrix<Scalar> kh = k.batch_block(batch).middleRows(head * d, d);
  std::vector<Scalar> p;
  std::vector<Index> cols;
  Scalar m, z;
  detail::disk_softmax(map, grid, detail::weighted_rows(map, grid), qh, kh, Scalar(config.scale), lat, lon, p, cols, m,
                       z);
  std::vector<std::pair<Index, Scalar>> out;
  for (std::size_t n = 0; n < p.size(); ++n) out.emplace_back(cols[n], p[n]);
  return out;
}

}  // namespace s2attn
