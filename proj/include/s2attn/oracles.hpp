#pragma once

// Brute-force references. Nothing here may call into the optimized attention
// code; each routine is a literal transcription of its formula.

#include <Eigen/Core>

#include <cmath>
#include <functional>
#include <stdexcept>
#include <vector>

namespace s2attn::oracles {

using DenseMatrix = Eigen::MatrixXd;
using DenseVector = Eigen::VectorXd;

/// N x N membership matrix (row: query, column: key) of closed geodesic disks,
/// from points given as colatitude/longitude columns.
inline std::vector<char> disk_mask(const Eigen::Matrix<double, 2, Eigen::Dynamic>& points, double cutoff) {
  const Eigen::Index n = points.cols();
  std::vector<Eigen::Vector3d> x(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double t = points(0, i), p = points(1, i);
    x[i] = {std::sin(t) * std::cos(p), std::sin(t) * std::sin(p), std::cos(t)};
  }
  std::vector<char> mask(std::size_t(n) * n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) {
      const double cx = x[i](1) * x[j](2) - x[i](2) * x[j](1);
      const double cy = x[i](2) * x[j](0) - x[i](0) * x[j](2);
      const double cz = x[i](0) * x[j](1) - x[i](1) * x[j](0);
      const double dot = x[i](0) * x[j](0) + x[i](1) * x[j](1) + x[i](2) * x[j](2);
      mask[std::size_t(i) * n + j] = std::atan2(std::sqrt(cx * cx + cy * cy + cz * cz), dot) <= cutoff ? 1 : 0;
    }
  return mask;
}

/// out_i = sum_j [m_ij exp(q_i.k_j * scale) w_j / sum_l m_il exp(q_i.k_l * scale) w_l] v_j
///
/// q, k: d x N; v: e x N; weights: N; mask: empty (all keys) or N x N row-major.
inline DenseMatrix dense_reference_attention(const DenseMatrix& q, const DenseMatrix& k, const DenseMatrix& v,
                                             const DenseVector& weights, double scale,
                                             const std::vector<char>& mask = {}) {
  const Eigen::Index n = k.cols(), nq = q.cols(), d = q.rows(), e = v.rows();
  if (!mask.empty() && mask.size() != std::size_t(nq) * n) throw std::invalid_argument("dense_reference_attention: mask size");
  const auto in = [&](Eigen::Index i, Eigen::Index j) { return mask.empty() || mask[std::size_t(i) * n + j] != 0; };
  DenseMatrix out = DenseMatrix::Zero(e, nq);
  for (Eigen::Index i = 0; i < nq; ++i) {
    double den = 0;
    for (Eigen::Index l = 0; l < n; ++l) {
      if (!in(i, l)) continue;
      double s = 0;
      for (Eigen::Index c = 0; c < d; ++c) s += q(c, i) * k(c, l);
      den += std::exp(s * scale) * weights(l);
    }
    for (Eigen::Index j = 0; j < n; ++j) {
      if (!in(i, j)) continue;
      double s = 0;
      for (Eigen::Index c = 0; c < d; ++c) s += q(c, i) * k(c, j);
      const double a = std::exp(s * scale) * weights(j) / den;
      for (Eigen::Index c = 0; c < e; ++c) out(c, i) += a * v(c, j);
    }
  }
  return out;
}

/// Central differences (f(x + h e_i) - f(x - h e_i)) / 2h for every entry of x.
inline DenseMatrix finite_difference_grad(const std::function<double(const DenseMatrix&)>& f, const DenseMatrix& x,
                                          double step = 1e-5) {
  DenseMatrix g(x.rows(), x.cols());
  DenseMatrix xp = x;
  for (Eigen::Index j = 0; j < x.cols(); ++j)
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      const double orig = xp(i, j);
      xp(i, j) = orig + step;
      const double fp = f(xp);
      xp(i, j) = orig - step;
      const double fm = f(xp);
      xp(i, j) = orig;
      g(i, j) = (fp - fm) / (2 * step);
    }
  return g;
}

/// max |a - b| / max(max |b|, floor)
inline double relative_error(const DenseMatrix& a, const DenseMatrix& b, double floor = 1e-12) {
  const double scale = std::max(b.cwiseAbs().maxCoeff(), floor);
  return (a - b).cwiseAbs().maxCoeff() / scale;
}

}  // namespace s2attn::oracles
