#pragma once

#include <Eigen/Core>

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include "s2attn/field.hpp"
#include "s2attn/grid.hpp"
#include "s2attn/parallel.hpp"

namespace s2attn {

// All losses average over (batch, channel) pairs. `point_weight`, when
// non-empty, multiplies the quadrature weight of every point (field column
// order within one batch), e.g. a latitude band mask.

namespace detail {

template <typename Scalar>
Vector<Scalar> effective_weights(const SphericalGrid<Scalar>& grid, const Vector<Scalar>& point_weight) {
  Vector<Scalar> w = grid.point_weights();
  if (point_weight.size() > 0) {
    if (point_weight.size() != w.size()) throw ShapeMismatch("loss: point weight length does not match the grid");
    w.array() *= point_weight.array();
  }
  return w;
}

template <typename Scalar, typename PointFn>
Scalar mean_integral(const Field<Scalar>& u, const Field<Scalar>& ustar, const SphericalGrid<Scalar>& grid,
                     const Vector<Scalar>& point_weight, PointFn&& fn, const char* what) {
  require_same_layout(u, ustar, what);
  require_same_grid(u, grid.shape, what);
  const Vector<Scalar> w = effective_weights(grid, point_weight);
  const Scalar inv4pi = Scalar(1) / (4 * std::numbers::pi_v<Scalar>);
  std::vector<Scalar> per(std::size_t(u.batch) * u.channels);
  Vector<Scalar> terms(grid.points());
  for (int b = 0; b < u.batch; ++b)
    for (int c = 0; c < u.channels; ++c) {
      const auto a = u.batch_block(b).row(c);
      const auto s = ustar.batch_block(b).row(c);
      for (Index p = 0; p < grid.points(); ++p) terms(p) = fn(a(p) - s(p)) * w(p);
      per[std::size_t(b) * u.channels + c] = inv4pi * pairwise_sum(terms.data(), terms.size());
    }
  return pairwise_sum(per.data(), Index(per.size())) / Scalar(per.size());
}

/// Derivative weights of the three-point Lagrange stencil through x0, x1, x2,
/// evaluated at x.
template <typename Scalar>
Eigen::Matrix<Scalar, 3, 1> three_point_derivative(Scalar x0, Scalar x1, Scalar x2, Scalar x) {
  return {((x - x1) + (x - x2)) / ((x0 - x1) * (x0 - x2)), ((x - x0) + (x - x2)) / ((x1 - x0) * (x1 - x2)),
          ((x - x0) + (x - x1)) / ((x2 - x0) * (x2 - x1))};
}

}  // namespace detail

/// 0/1 multiplier that drops the top and bottom `fraction` of latitude rows.
template <typename Scalar>
Vector<Scalar> latitude_band_mask(const SphericalGrid<Scalar>& grid, double fraction = 0.15) {
  if (fraction < 0 || fraction >= 0.5) throw std::invalid_argument("latitude_band_mask: fraction must be in [0, 0.5)");
  const int cut = static_cast<int>(std::floor(fraction * grid.nlat()));
  Vector<Scalar> m = Vector<Scalar>::Ones(grid.points());
  for (int i = 0; i < grid.nlat(); ++i)
    if (i < cut || i >= grid.nlat() - cut) m.segment(Index(i) * grid.nlon(), grid.nlon()).setZero();
  return m;
}

/// (1/4pi) integral |u - u*|
template <typename Scalar>
Scalar l1_distance(const Field<Scalar>& u, const Field<Scalar>& ustar, const SphericalGrid<Scalar>& grid,
                   const Vector<Scalar>& point_weight = {}) {
  return detail::mean_integral(u, ustar, grid, point_weight, [](Scalar x) { return std::abs(x); }, "l1_distance");
}

/// (1/4pi) integral (u - u*)^2
template <typename Scalar>
Scalar l2_distance_sq(const Field<Scalar>& u, const Field<Scalar>& ustar, const SphericalGrid<Scalar>& grid,
                      const Vector<Scalar>& point_weight = {}) {
  return detail::mean_integral(u, ustar, grid, point_weight, [](Scalar x) { return x * x; }, "l2_distance_sq");
}

/// Gradient components (d/dtheta, (1/sin theta) d/dphi) of a single-channel
/// slice, by second-order finite differences: periodic in longitude, one-sided
/// at the first and last latitude rows. Rows at the poles are left at zero.
template <typename Scalar>
std::pair<Vector<Scalar>, Vector<Scalar>> spherical_gradient(const Eigen::Ref<const Vector<Scalar>>& u,
                                                             const SphericalGrid<Scalar>& grid) {
  const int nlat = grid.nlat(), nlon = grid.nlon();
  const auto& th = grid.colatitudes;
  const Scalar dphi = 2 * std::numbers::pi_v<Scalar> / Scalar(nlon);
  Vector<Scalar> dtheta = Vector<Scalar>::Zero(grid.points()), dphi_s = Vector<Scalar>::Zero(grid.points());
  for (int i = 0; i < nlat; ++i) {
    const Scalar sin_t = std::sin(th(i));
    for (int j = 0; j < nlon; ++j) {
      const Index p = Index(i) * nlon + j;
      if (sin_t > Scalar(0)) {
        const Scalar up = u(Index(i) * nlon + (j + 1) % nlon), um = u(Index(i) * nlon + (j + nlon - 1) % nlon);
        dphi_s(p) = (up - um) / (2 * dphi) / sin_t;
      }
      if (nlat >= 3) {
        const int i0 = i == 0 ? 0 : (i == nlat - 1 ? nlat - 3 : i - 1);
        const auto c = detail::three_point_derivative(th(i0), th(i0 + 1), th(i0 + 2), th(i));
        dtheta(p) = c(0) * u(Index(i0) * nlon + j) + c(1) * u(Index(i0 + 1) * nlon + j) +
                    c(2) * u(Index(i0 + 2) * nlon + j);
      } else if (nlat == 2) {
        dtheta(p) = (u(nlon + j) - u(j)) / (th(1) - th(0));
      }
    }
  }
  return {dtheta, dphi_s};
}

/// (1/4pi) integral |(1/sin theta) d_phi (u-u*)| + |d_theta (u-u*)|.
/// Zero-weight rows (equiangular pole) contribute nothing.
template <typename Scalar>
Scalar sobolev_w11_seminorm(const Field<Scalar>& u, const Field<Scalar>& ustar, const SphericalGrid<Scalar>& grid,
                            const Vector<Scalar>& point_weight = {}) {
  require_same_layout(u, ustar, "sobolev_w11_seminorm");
  require_same_grid(u, grid.shape, "sobolev_w11_seminorm");
  const Vector<Scalar> w = detail::effective_weights(grid, point_weight);
  const Scalar inv4pi = Scalar(1) / (4 * std::numbers::pi_v<Scalar>);
  std::vector<Scalar> per;
  Vector<Scalar> terms(grid.points());
  for (int b = 0; b < u.batch; ++b)
    for (int c = 0; c < u.channels; ++c) {
      const Vector<Scalar> diff = (u.batch_block(b).row(c) - ustar.batch_block(b).row(c)).transpose();
      const auto [dt, dp] = spherical_gradient<Scalar>(diff, grid);
      for (Index p = 0; p < grid.points(); ++p)
        terms(p) = w(p) == Scalar(0) ? Scalar(0) : (std::abs(dp(p)) + std::abs(dt(p))) * w(p);
      per.push_back(inv4pi * pairwise_sum(terms.data(), terms.size()));
    }
  return pairwise_sum(per.data(), Index(per.size())) / Scalar(per.size());
}

/// L1 distance plus lambda times the W^{1,1} semi-norm.
template <typename Scalar>
Scalar depth_loss(const Field<Scalar>& u, const Field<Scalar>& ustar, const SphericalGrid<Scalar>& grid,
                  Scalar lambda = Scalar(0.1), const Vector<Scalar>& point_weight = {}) {
  if (!(lambda >= 0)) throw std::invalid_argument("depth_loss: lambda must be non-negative");
  const Scalar l1 = l1_distance(u, ustar, grid, point_weight);
  if (lambda == Scalar(0)) return l1;
  return l1 + lambda * sobolev_w11_seminorm(u, ustar, grid, point_weight);
}

/// Integer class label per (batch, point).
struct ClassMask {
  GridShape grid;
  int batch = 0;
  int classes = 0;
  std::vector<int> labels;  // batch-major, field column order

  ClassMask() = default;
  ClassMask(const GridShape& g, int nbatch, int nclasses, std::vector<int> values)
      : grid(g), batch(nbatch), classes(nclasses), labels(std::move(values)) {
    if (nclasses < 1) throw std::invalid_argument("ClassMask: need at least one class");
    if (static_cast<Index>(labels.size()) != Index(nbatch) * g.points())
      throw ShapeMismatch("ClassMask: label count does not match the grid");
    for (int l : labels)
      if (l < 0 || l >= nclasses) throw std::out_of_range("ClassMask: label " + std::to_string(l) + " out of range");
  }

  ClassMask(const GridShape& g, int nbatch, int nclasses, int fill)
      : ClassMask(g, nbatch, nclasses, std::vector<int>(std::size_t(nbatch) * g.points(), fill)) {}

  int operator()(int b, Index point) const { return labels[std::size_t(b) * grid.points() + point]; }
};

/// Mask from a one-hot field (channels are classes, each point sums to one).
template <typename Scalar>
ClassMask mask_from_one_hot(const Field<Scalar>& one_hot) {
  std::vector<int> labels;
  labels.reserve(one_hot.values.cols());
  for (Index col = 0; col < one_hot.values.cols(); ++col) {
    Index arg;
    const Scalar top = one_hot.values.col(col).maxCoeff(&arg);
    if (top != Scalar(1) || one_hot.values.col(col).sum() != Scalar(1))
      throw std::invalid_argument("mask_from_one_hot: column is not one-hot");
    labels.push_back(static_cast<int>(arg));
  }
  return ClassMask(one_hot.grid, one_hot.batch, one_hot.channels, std::move(labels));
}

/// Arg-max prediction of a score field.
template <typename Scalar>
ClassMask mask_from_scores(const Field<Scalar>& scores) {
  std::vector<int> labels;
  labels.reserve(scores.values.cols());
  for (Index col = 0; col < scores.values.cols(); ++col) {
    Index arg;
    scores.values.col(col).maxCoeff(&arg);
    labels.push_back(static_cast<int>(arg));
  }
  return ClassMask(scores.grid, scores.batch, scores.channels, std::move(labels));
}

/// Quadrature-weighted mean of softmax cross entropy of raw scores against
/// the target labels, normalized by the total (masked) quadrature weight.
template <typename Scalar>
Scalar cross_entropy(const Field<Scalar>& scores, const ClassMask& target, const SphericalGrid<Scalar>& grid,
                     const Vector<Scalar>& point_weight = {}) {
  require_same_grid(scores, grid.shape, "cross_entropy");
  if (!(target.grid == grid.shape)) throw GridMismatch("cross_entropy: target mask grid differs");
  if (target.classes != scores.channels || target.batch != scores.batch)
    throw ShapeMismatch("cross_entropy: class or batch count mismatch");
  if (scores.channels < 2) throw std::invalid_argument("cross_entropy: need at least two classes");
  const Vector<Scalar> w = detail::effective_weights(grid, point_weight);
  const Scalar wsum = pairwise_sum(w.data(), w.size());
  std::vector<Scalar> per;
  Vector<Scalar> terms(grid.points());
  for (int b = 0; b < scores.batch; ++b) {
    const auto block = scores.batch_block(b);
    for (Index p = 0; p < grid.points(); ++p) {
      const auto s = block.col(p);
      const Scalar m = s.maxCoeff();
      const Scalar lse = m + std::log((s.array() - m).exp().sum());
      terms(p) = (lse - s(target(b, p))) * w(p);
    }
    per.push_back(pairwise_sum(terms.data(), terms.size()) / wsum);
  }
  return pairwise_sum(per.data(), Index(per.size())) / Scalar(per.size());
}

/// Literal probability-input variant: scores are logits(u) = log(u / (1 - u))
/// of per-class probabilities u in (0, 1).
template <typename Scalar>
Scalar cross_entropy_from_probabilities(const Field<Scalar>& probabilities, const ClassMask& target,
                                        const SphericalGrid<Scalar>& grid, const Vector<Scalar>& point_weight = {}) {
  if (((probabilities.values.array() <= Scalar(0)) || (probabilities.values.array() >= Scalar(1))).any())
    throw std::invalid_argument("cross_entropy_from_probabilities: probabilities must lie in (0, 1)");
  Field<Scalar> logits = probabilities;
  logits.values = (probabilities.values.array() / (Scalar(1) - probabilities.values.array())).log().matrix();
  return cross_entropy(logits, target, grid, point_weight);
}

/// Area fractions of one class.
struct ConfusionFractions {
  double true_positive = 0, false_positive = 0, false_negative = 0, true_negative = 0;
};

/// Per-class confusion fractions, normalized by the total quadrature weight so
/// that the four fractions of each class sum to one. Averaged over the batch.
template <typename Scalar>
std::vector<ConfusionFractions> confusion_fractions(const ClassMask& pred, const ClassMask& truth,
                                                    const SphericalGrid<Scalar>& grid) {
  if (pred.classes != truth.classes) throw ShapeMismatch("confusion_fractions: class count mismatch");
  if (!(pred.grid == grid.shape) || !(truth.grid == grid.shape)) throw GridMismatch("confusion_fractions: grid mismatch");
  if (pred.batch != truth.batch) throw ShapeMismatch("confusion_fractions: batch mismatch");
  const int nc = pred.classes;
  const Vector<Scalar> w = grid.point_weights();
  const Scalar wsum = pairwise_sum(w.data(), w.size());
  std::vector<ConfusionFractions> out(nc);
  // columns: tp, fp, fn, tn
  Matrix<Scalar> terms = Matrix<Scalar>::Zero(grid.points(), 4);
  for (int c = 0; c < nc; ++c) {
    Scalar tp = 0, fp = 0, fn = 0, tn = 0;
    for (int b = 0; b < pred.batch; ++b) {
      for (Index p = 0; p < grid.points(); ++p) {
        const bool pc = pred(b, p) == c, tc = truth(b, p) == c;
        terms(p, 0) = (pc && tc) ? w(p) : Scalar(0);
        terms(p, 1) = (pc && !tc) ? w(p) : Scalar(0);
        terms(p, 2) = (!pc && tc) ? w(p) : Scalar(0);
        terms(p, 3) = (!pc && !tc) ? w(p) : Scalar(0);
      }
      tp += pairwise_sum(terms.col(0).data(), grid.points()) / wsum;
      fp += pairwise_sum(terms.col(1).data(), grid.points()) / wsum;
      fn += pairwise_sum(terms.col(2).data(), grid.points()) / wsum;
      tn += pairwise_sum(terms.col(3).data(), grid.points()) / wsum;
    }
    const Scalar nb = Scalar(pred.batch);
    out[c].true_positive = double(tp / nb);
    out[c].false_positive = double(fp / nb);
    out[c].false_negative = double(fn / nb);
    out[c].true_negative = double(tn / nb);
  }
  return out;
}

struct IouResult {
  double value = 0;
  bool degenerate = false;  // empty union; value is 1 when the intersection is empty too
};

/// Micro-averaged IoU: sum_c TP / sum_c (TP + FP + FN).
template <typename Scalar>
IouResult iou_micro(const ClassMask& pred, const ClassMask& truth, const SphericalGrid<Scalar>& grid) {
  const auto f = confusion_fractions(pred, truth, grid);
  double num = 0, den = 0;
  for (const auto& c : f) {
    num += c.true_positive;
    den += c.true_positive + c.false_positive + c.false_negative;
  }
  if (den <= 0) return {num == 0 ? 1.0 : 0.0, true};
  return {num / den, false};
}

/// (1/C) sum_c (TP + TN)
template <typename Scalar>
double accuracy(const ClassMask& pred, const ClassMask& truth, const SphericalGrid<Scalar>& grid) {
  const auto f = confusion_fractions(pred, truth, grid);
  double s = 0;
  for (const auto& c : f) s += c.true_positive + c.true_negative;
  return s / double(f.size());
}

}  // namespace s2attn
