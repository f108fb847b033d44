#include <doctest.h>

#include <cmath>
#include <numbers>
#include <random>
#include <thread>

#include "s2attn/diagnostics.hpp"

using namespace s2attn;
constexpr double kPi = std::numbers::pi;

TEST_CASE("log-log slope of exact power laws") {
  std::vector<double> x{10, 20, 40, 80, 160}, y1, y2;
  for (double v : x) {
    y1.push_back(3 * v);
    y2.push_back(0.01 * v * v);
  }
  CHECK(std::abs(loglog_slope(x, y1) - 1) <= 1e-12);
  CHECK(std::abs(loglog_slope(x, y2) - 2) <= 1e-12);
  CHECK_THROWS(loglog_slope({1}, {1}));
  CHECK_THROWS(loglog_slope({1, 2}, {1, 0}));
}

TEST_CASE("strict monotonicity") {
  CHECK(strictly_decreasing(std::vector<double>{3, 2, 1}));
  CHECK_FALSE(strictly_decreasing(std::vector<double>{3, 3, 1}));
  CHECK_FALSE(strictly_decreasing(std::vector<double>{1, 2}));
  CHECK(strictly_decreasing(std::vector<double>{1}));
}

TEST_CASE("median timing") {
  int calls = 0;
  const double t = median_seconds([&] {
    ++calls;
    std::this_thread::sleep_for(std::chrono::milliseconds(2));
  }, 3);
  CHECK(calls == 3);
  CHECK(t >= 0.002);
  CHECK_THROWS(median_seconds([] {}, 0));
}

TEST_CASE("weighted norm of a harmonic") {
  const auto g = build_gaussian_grid<double>(8, 16);
  const auto e = spectral_position_embedding(g, 4);
  CHECK(std::abs(weighted_l2_norm(e, g) - 2) <= 1e-13);
}

TEST_CASE("equivariance error is exact for identity and grid-aligned z rotations") {
  std::mt19937_64 rng(1);
  const auto coeffs = SignalCoefficients<double>::random(2, 3, rng);
  for (auto family : {GridFamily::Gaussian, GridFamily::Equiangular})
    for (auto mode : {AttentionMode::Global, AttentionMode::Neighborhood}) {
      const auto g = build_grid<double>(family, 12, 24);
      const auto err = equivariance_errors(g, mode, default_theta_cutoff(12), coeffs,
                                           {Rotation<double>::identity(), Rotation<double>::about_z(2 * kPi * 5 / 24)});
      CHECK(err[0] == 0.0);
      CHECK(err[1] <= 1e-12);
    }
}

TEST_CASE("equivariance error shrinks with resolution") {
  std::mt19937_64 rng(2);
  const auto coeffs = SignalCoefficients<double>::random(2, 3, rng);
  const std::vector<Rotation<double>> rots{Rotation<double>::random(rng), Rotation<double>::random(rng)};
  double prev = 1;
  for (int nlat : {8, 16, 32}) {
    const auto g = build_gaussian_grid<double>(nlat, 2 * nlat);
    const auto err = equivariance_errors(g, AttentionMode::Global, 0.0, coeffs, rots);
    const double mean = 0.5 * (err[0] + err[1]);
    CHECK(mean < prev);
    prev = mean;
  }
}
