#include <doctest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "s2attn/attention.hpp"
#include "s2attn/harmonics.hpp"
#include "s2attn/neighborhood.hpp"
#include "s2attn/oracles.hpp"

using namespace s2attn;
constexpr double kPi = std::numbers::pi;

namespace {

Field<double> randn(const GridShape& g, int batch, int channels, std::mt19937_64& rng, double sigma = 1.0) {
  std::normal_distribution<double> n(0, sigma);
  Field<double> f(g, batch, channels);
  f.values = f.values.unaryExpr([&](double) { return n(rng); });
  return f;
}

struct ThreadGuard {
  ~ThreadGuard() { set_num_threads(0); }
};

// Dense N x N membership reconstructed from the sparse map.
std::vector<char> dense_from_map(const NeighborhoodMap& map) {
  const int nlon = map.grid.nlon;
  const Index n = map.grid.points();
  std::vector<char> m(std::size_t(n) * n, 0);
  for (int h = 0; h < map.grid.nlat; ++h)
    for (int w = 0; w < nlon; ++w)
      for (const auto& e : map.neighbors(h)) m[std::size_t(h * nlon + w) * n + e.lat * nlon + (w + e.lon_offset) % nlon] = 1;
  return m;
}

}  // namespace

TEST_CASE("sparse map equals the brute-force disk membership") {
  for (auto family : {GridFamily::Gaussian, GridFamily::Equiangular})
    for (double cutoff : {0.05, 0.4, 1.0, 2.5, kPi}) {
      const auto g = build_grid<double>(family, 7, 12);
      const auto map = build_neighborhood(g, cutoff);
      CHECK(dense_from_map(map) == oracles::disk_mask(grid_coordinates(g), cutoff));
    }
}

TEST_CASE("reverse map lists every forward pair once") {
  const auto g = build_gaussian_grid<double>(9, 14);
  const auto map = build_neighborhood(g, 0.8);
  CHECK(map.reverse_entries.size() == map.entries.size());
  Index forward = 0, reverse = 0;
  for (int h = 0; h < 9; ++h) {
    forward += map.neighbor_count(h);
    reverse += Index(map.sources(h).size());
    for (const auto& src : map.sources(h)) {
      bool found = false;
      for (const auto& e : map.neighbors(src.lat)) found = found || (e.lat == h && e.lon_offset == src.lon_offset);
      CHECK(found);
    }
  }
  CHECK(forward == reverse);
  CHECK(map.total_pairs() == forward * 14);
}

TEST_CASE("neighbor count near the equator matches a 7x7 window") {
  for (int nlat : {32, 64, 128}) {
    const auto g = build_equiangular_grid<double>(nlat, 2 * nlat);
    const auto map = build_neighborhood(g, default_theta_cutoff(nlat));
    const double count = double(map.neighbor_count(nlat / 2));
    CHECK(count >= 0.8 * 49);
    CHECK(count <= 1.2 * 49);
  }
  CHECK_THROWS(build_neighborhood(build_gaussian_grid<double>(4, 8), 0.0));
}

TEST_CASE("neighborhood attention matches the masked dense oracle") {
  std::mt19937_64 rng(1);
  for (auto family : {GridFamily::Gaussian, GridFamily::Equiangular})
    for (double cutoff : {0.6, 1.3, 2.9}) {
      const auto g = build_grid<double>(family, 6, 10);
      const auto map = build_neighborhood(g, cutoff);
      const auto q = randn(g.shape, 1, 3, rng), k = randn(g.shape, 1, 3, rng), v = randn(g.shape, 1, 2, rng);
      const AttentionConfig cfg(1, 3);
      const auto y = neighborhood_attention_forward(q, k, v, map, g, cfg);
      const auto ref = oracles::dense_reference_attention(q.values, k.values, v.values, g.point_weights(), cfg.scale,
                                                          oracles::disk_mask(grid_coordinates(g), cutoff));
      // equiangular pole queries whose disk holds only the zero-weight row are undefined in the oracle
      for (Index i = 0; i < g.points(); ++i)
        if (ref.col(i).allFinite()) CHECK((y.values.col(i) - ref.col(i)).cwiseAbs().maxCoeff() <= 1e-13);
    }
}

TEST_CASE("full-sphere cutoff reproduces global attention") {
  std::mt19937_64 rng(2);
  for (auto family : {GridFamily::Gaussian, GridFamily::Equiangular}) {
    const auto g = build_grid<double>(family, 16, 32);
    const auto map = build_neighborhood(g, kPi);
    CHECK(map.total_pairs() == g.points() * g.points());
    const auto q = randn(g.shape, 2, 4, rng), k = randn(g.shape, 2, 4, rng), v = randn(g.shape, 2, 4, rng);
    const AttentionConfig cfg(2, 2);
    const auto a = neighborhood_attention_forward(q, k, v, map, g, cfg);
    const auto b = s2_attention_forward(q, k, v, g, cfg);
    CHECK((a.values - b.values).cwiseAbs().maxCoeff() <= 1e-12);
  }
}

TEST_CASE("self-only disks return the values exactly") {
  std::mt19937_64 rng(3);
  const auto g = build_gaussian_grid<double>(6, 12);
  const auto map = build_neighborhood(g, 1e-6);
  CHECK(map.total_pairs() == g.points());
  const auto q = randn(g.shape, 1, 2, rng), k = randn(g.shape, 1, 2, rng), v = randn(g.shape, 1, 3, rng);
  CHECK(neighborhood_attention_forward(q, k, v, map, g, AttentionConfig(1, 2)).values == v.values);
}

TEST_CASE("zero-weight pole disks fall back to uniform weights") {
  std::mt19937_64 rng(4);
  const auto g = build_equiangular_grid<double>(6, 12);
  const auto map = build_neighborhood(g, 1e-6);
  const auto q = randn(g.shape, 1, 2, rng), k = randn(g.shape, 1, 2, rng), v = randn(g.shape, 1, 1, rng);
  const auto y = neighborhood_attention_forward(q, k, v, map, g, AttentionConfig(1, 2));
  CHECK(y.all_finite());
  // the pole point sees all twelve coincident pole samples
  CHECK(map.neighbor_count(0) == 12);
  const auto w = neighborhood_attention_weights(q, k, map, g, AttentionConfig(1, 2), 0, 0, 0, 3);
  CHECK(w.size() == 12);
  double s = 0;
  for (const auto& [col, a] : w) s += a;
  CHECK(std::abs(s - 1) <= 1e-14);
}

TEST_CASE("disk weights form a partition of unity") {
  std::mt19937_64 rng(5);
  for (auto family : {GridFamily::Gaussian, GridFamily::Equiangular}) {
    const auto g = build_grid<double>(family, 16, 32);
    const auto map = build_neighborhood(g, default_theta_cutoff(16));
    const auto q = randn(g.shape, 1, 2, rng, 4.0), k = randn(g.shape, 1, 2, rng, 4.0);
    for (int lat = 0; lat < 16; ++lat) {
      const auto w = neighborhood_attention_weights(q, k, map, g, AttentionConfig(1, 2), 0, 0, lat, lat % 32);
      double s = 0;
      for (const auto& [col, a] : w) {
        CHECK(a >= 0);
        s += a;
      }
      CHECK(std::abs(s - 1) <= 1e-12);
    }
  }
}

TEST_CASE("analytic gradients match central differences") {
  std::mt19937_64 rng(6);
  for (auto family : {GridFamily::Equiangular, GridFamily::Gaussian})
    for (double cutoff : {default_theta_cutoff(6), 0.9, kPi}) {
      const auto g = build_grid<double>(family, 6, 12);
      const auto map = build_neighborhood(g, cutoff);
      const AttentionConfig cfg(1, 3);
      const auto q = randn(g.shape, 1, 3, rng), k = randn(g.shape, 1, 3, rng), v = randn(g.shape, 1, 2, rng),
                 dy = randn(g.shape, 1, 2, rng);
      const auto grads = neighborhood_attention_backward(q, k, v, dy, map, g, cfg);
      const auto loss = [&](const Field<double>& qq, const Field<double>& kk, const Field<double>& vv) {
        return dy.values.cwiseProduct(neighborhood_attention_forward(qq, kk, vv, map, g, cfg).values).sum();
      };
      const auto fq = [&](const Eigen::MatrixXd& m) { Field<double> x = q; x.values = m; return loss(x, k, v); };
      const auto fk = [&](const Eigen::MatrixXd& m) { Field<double> x = k; x.values = m; return loss(q, x, v); };
      const auto fv = [&](const Eigen::MatrixXd& m) { Field<double> x = v; x.values = m; return loss(q, k, x); };
      CHECK(oracles::relative_error(grads.dq.values, oracles::finite_difference_grad(fq, q.values)) <= 1e-6);
      CHECK(oracles::relative_error(grads.dk.values, oracles::finite_difference_grad(fk, k.values)) <= 1e-6);
      CHECK(oracles::relative_error(grads.dv.values, oracles::finite_difference_grad(fv, v.values)) <= 1e-6);
    }
}

TEST_CASE("gradients of a multi-head batch split per head") {
  std::mt19937_64 rng(7);
  const auto g = build_gaussian_grid<double>(5, 10);
  const auto map = build_neighborhood(g, 1.1);
  const auto q = randn(g.shape, 2, 4, rng), k = randn(g.shape, 2, 4, rng), v = randn(g.shape, 2, 6, rng),
             dy = randn(g.shape, 2, 6, rng);
  const auto full = neighborhood_attention_backward(q, k, v, dy, map, g, AttentionConfig(2, 2));
  for (int b = 0; b < 2; ++b)
    for (int h = 0; h < 2; ++h) {
      Field<double> qh(g.shape, 1, 2), kh = qh, vh(g.shape, 1, 3), dyh = vh;
      qh.values = q.batch_block(b).middleRows(2 * h, 2);
      kh.values = k.batch_block(b).middleRows(2 * h, 2);
      vh.values = v.batch_block(b).middleRows(3 * h, 3);
      dyh.values = dy.batch_block(b).middleRows(3 * h, 3);
      const auto part = neighborhood_attention_backward(qh, kh, vh, dyh, map, g, AttentionConfig(1, 2));
      CHECK(full.dq.batch_block(b).middleRows(2 * h, 2) == part.dq.values);
      CHECK(full.dk.batch_block(b).middleRows(2 * h, 2) == part.dk.values);
      CHECK(full.dv.batch_block(b).middleRows(3 * h, 3) == part.dv.values);
    }
}

TEST_CASE("zero upstream gradient gives exactly zero gradients") {
  std::mt19937_64 rng(8);
  const auto g = build_equiangular_grid<double>(6, 12);
  const auto map = build_neighborhood(g, 1.0);
  const auto q = randn(g.shape, 1, 3, rng), k = randn(g.shape, 1, 3, rng), v = randn(g.shape, 1, 2, rng);
  const auto grads = neighborhood_attention_backward(q, k, v, Field<double>(g.shape, 1, 2), map, g, AttentionConfig(1, 3));
  CHECK(grads.dq.values.isZero(0));
  CHECK(grads.dk.values.isZero(0));
  CHECK(grads.dv.values.isZero(0));
}

TEST_CASE("longitude rolls commute with the forward and backward passes") {
  std::mt19937_64 rng(9);
  for (auto family : {GridFamily::Gaussian, GridFamily::Equiangular}) {
    const auto g = build_grid<double>(family, 10, 20);
    const auto map = build_neighborhood(g, default_theta_cutoff(10));
    const AttentionConfig cfg(1, 3);
    const auto q = randn(g.shape, 1, 3, rng), k = randn(g.shape, 1, 3, rng), v = randn(g.shape, 1, 2, rng),
               dy = randn(g.shape, 1, 2, rng);
    const auto y = neighborhood_attention_forward(q, k, v, map, g, cfg);
    const auto gr = neighborhood_attention_backward(q, k, v, dy, map, g, cfg);
    for (int s : {1, 7, 19}) {
      const auto R = [s](const Field<double>& f) { return roll_longitude(f, s); };
      CHECK((neighborhood_attention_forward(R(q), R(k), R(v), map, g, cfg).values - R(y).values).cwiseAbs().maxCoeff() <=
            1e-12);
      const auto gs = neighborhood_attention_backward(R(q), R(k), R(v), R(dy), map, g, cfg);
      CHECK((gs.dq.values - R(gr.dq).values).cwiseAbs().maxCoeff() <= 1e-12);
      CHECK((gs.dk.values - R(gr.dk).values).cwiseAbs().maxCoeff() <= 1e-12);
      CHECK((gs.dv.values - R(gr.dv).values).cwiseAbs().maxCoeff() <= 1e-12);
    }
  }
}

TEST_CASE("map and grid must agree") {
  const auto g = build_gaussian_grid<double>(4, 8);
  const auto map = build_neighborhood(build_equiangular_grid<double>(4, 8), 1.0);
  Field<double> q(g.shape, 1, 2);
  CHECK_THROWS_AS(neighborhood_attention_forward(q, q, q, map, g, AttentionConfig(1, 2)), GridMismatch);
}

TEST_CASE("forward and backward are bitwise stable across thread counts") {
  ThreadGuard guard;
  std::mt19937_64 rng(10);
  const auto g = build_gaussian_grid<double>(24, 48);
  const auto map = build_neighborhood(g, default_theta_cutoff(24));
  const AttentionConfig cfg(2, 2);
  const auto q = randn(g.shape, 1, 4, rng), k = randn(g.shape, 1, 4, rng), v = randn(g.shape, 1, 4, rng),
             dy = randn(g.shape, 1, 4, rng);
  set_num_threads(1);
  const auto y = neighborhood_attention_forward(q, k, v, map, g, cfg);
  const auto gr = neighborhood_attention_backward(q, k, v, dy, map, g, cfg);
  for (int t : {2, 4}) {
    set_num_threads(t);
    CHECK(neighborhood_attention_forward(q, k, v, map, g, cfg).values == y.values);
    const auto gt = neighborhood_attention_backward(q, k, v, dy, map, g, cfg);
    CHECK(gt.dq.values == gr.dq.values);
    CHECK(gt.dk.values == gr.dk.values);
    CHECK(gt.dv.values == gr.dv.values);
    CHECK(build_neighborhood(g, default_theta_cutoff(24)).entries == map.entries);
  }
}
