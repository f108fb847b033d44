#pragma once

#include <Eigen/Core>

#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "s2attn/field.hpp"
#include "s2attn/grid.hpp"
#include "s2attn/parallel.hpp"

namespace s2attn {

/// Multi-head layout: q and k carry heads * head_dim channels, v carries
/// heads * e channels; head h owns the h-th contiguous channel slice.
struct AttentionConfig {
  int heads = 1;
  int head_dim = 1;
  double scale = 1.0;

  AttentionConfig() = default;
  AttentionConfig(int nheads, int dim) : heads(nheads), head_dim(dim), scale(1.0 / std::sqrt(double(dim))) {
    if (nheads < 1 || dim < 1) throw std::invalid_argument("AttentionConfig: heads and head_dim must be positive");
  }

  /// Config for an embedding split evenly across heads.
  static AttentionConfig for_embedding(int embed, int nheads) {
    if (nheads < 1 || embed % nheads != 0)
      throw std::invalid_argument("AttentionConfig: embedding dimension not divisible by heads");
    return AttentionConfig(nheads, embed / nheads);
  }
};

namespace detail {

template <typename Scalar>
using ConstRef = Eigen::Ref<const Matrix<Scalar>>;

constexpr Index kQueryBlock = 32;
constexpr Index kKeyChunk = 64;

/// Softmax attention of every query column against all key columns.
///
/// Logits are scale * q.k + bias_j; exponentials are multiplied by
/// key_weight_j before normalization. Either vector may be empty. The row
/// maximum is taken over keys with positive weight, and sums over keys are
/// formed blockwise and combined pairwise.
template <typename Scalar>
Matrix<Scalar> attend(ConstRef<Scalar> q, ConstRef<Scalar> k, ConstRef<Scalar> v, const Vector<Scalar>& key_weight,
                      const Vector<Scalar>& key_bias, Scalar scale) {
  const Index nq = q.cols(), nk = k.cols(), e = v.rows();
  Matrix<Scalar> vext(e + 1, nk);
  vext.topRows(e) = v;
  vext.row(e).setOnes();
  const bool weighted = key_weight.size() > 0;
  const bool biased = key_bias.size() > 0;
  const Index nchunks = (nk + kKeyChunk - 1) / kKeyChunk;
  constexpr Scalar neg_inf = -std::numeric_limits<Scalar>::infinity();

  Matrix<Scalar> out(e, nq);
  parallel_chunks(nq, kQueryBlock, [&](Index begin, Index end) {
    const Index nb = end - begin;
    Matrix<Scalar> s = (k.transpose() * q.middleCols(begin, nb)) * scale;
    if (biased) s.colwise() += key_bias;
    for (Index c = 0; c < nb; ++c) {
      auto col = s.col(c).array();
      const Scalar m = weighted ? (key_weight.array() > Scalar(0)).select(col, neg_inf).maxCoeff() : col.maxCoeff();
      col = (col - m).exp();
      if (weighted) col *= key_weight.array();
    }
    std::vector<Matrix<Scalar>> parts;
    parts.reserve(nchunks);
    for (Index c0 = 0; c0 < nk; c0 += kKeyChunk) {
      const Index len = std::min(kKeyChunk, nk - c0);
      parts.emplace_back(vext.middleCols(c0, len) * s.middleRows(c0, len));
    }
    const Matrix<Scalar> r = pairwise_reduce(parts);
    for (Index c = 0; c < nb; ++c) out.col(begin + c) = r.col(c).head(e) / r(e, c);
  });
  return out;
}

template <typename Scalar>
void validate_attention_inputs(const Field<Scalar>& q, const Field<Scalar>& k, const Field<Scalar>& v,
                               const GridShape& grid, const AttentionConfig& config, const char* what) {
  require_same_grid(q, grid, what);
  require_same_grid(k, grid, what);
  require_same_grid(v, grid, what);
  if (q.batch != k.batch || q.batch != v.batch) throw ShapeMismatch(std::string(what) + ": batch sizes differ");
  const int qk = config.heads * config.head_dim;
  if (q.channels != qk || k.channels != qk)
    throw ShapeMismatch(std::string(what) + ": q/k channels must equal heads * head_dim");
  if (v.channels % config.heads != 0)
    throw ShapeMismatch(std::string(what) + ": v channels not divisible by heads");
}

template <typename Scalar>
void require_nonnegative_weights(const SphericalGrid<Scalar>& grid, const char* what) {
  if ((grid.weights.array() < Scalar(0)).any() || !grid.weights.allFinite())
    throw std::invalid_argument(std::string(what) + ": quadrature weights must be finite and non-negative");
}

}  // namespace detail

/// Plain softmax(q^T k / sqrt(d)) v over token columns; d = q.rows().
template <typename Scalar>
Matrix<Scalar> attention_dense_sequence(const Matrix<Scalar>& q, const Matrix<Scalar>& k, const Matrix<Scalar>& v) {
  if (k.cols() != v.cols()) throw ShapeMismatch("attention_dense_sequence: key and value token counts differ");
  if (q.rows() != k.rows()) throw ShapeMismatch("attention_dense_sequence: query and key dimensions differ");
  if (k.cols() == 0) throw ShapeMismatch("attention_dense_sequence: no tokens");
  const Scalar scale = Scalar(1) / std::sqrt(Scalar(q.rows()));
  return detail::attend<Scalar>(q, k, v, Vector<Scalar>(), Vector<Scalar>(), scale);
}

/// Global spherical attention: keys weighted by their quadrature weights in
/// both the numerator and the normalizer.
template <typename Scalar>
Field<Scalar> s2_attention_forward(const Field<Scalar>& q, const Field<Scalar>& k, const Field<Scalar>& v,
                                   const SphericalGrid<Scalar>& grid, const AttentionConfig& config) {
  detail::validate_attention_inputs(q, k, v, grid.shape, config, "s2_attention_forward");
  detail::require_nonnegative_weights(grid, "s2_attention_forward");
  const int d = config.head_dim, e = v.channels / config.heads;
  const Vector<Scalar> w = grid.point_weights();
  Field<Scalar> out(grid.shape, q.batch, v.channels);
  for (int b = 0; b < q.batch; ++b)
    for (int h = 0; h < config.heads; ++h)
      out.batch_block(b).middleRows(h * e, e) = detail::attend<Scalar>(
          q.batch_block(b).middleRows(h * d, d), k.batch_block(b).middleRows(h * d, d),
          v.batch_block(b).middleRows(h * e, e), w, Vector<Scalar>(), Scalar(config.scale));
  return out;
}

template <typename Scalar>
struct LogMaskResult {
  Field<Scalar> output;
  std::vector<int> excluded_rows;  // latitude rows dropped from the key set (zero weight)
};

/// Same operator as s2_attention_forward, realized as plain softmax over
/// logits shifted by log(weight). Zero-weight rows are removed from the keys.
template <typename Scalar>
LogMaskResult<Scalar> s2_attention_forward_logmask(const Field<Scalar>& q, const Field<Scalar>& k,
                                                   const Field<Scalar>& v, const SphericalGrid<Scalar>& grid,
                                                   const AttentionConfig& config) {
  detail::validate_attention_inputs(q, k, v, grid.shape, config, "s2_attention_forward_logmask");
  detail::require_nonnegative_weights(grid, "s2_attention_forward_logmask");
  LogMaskResult<Scalar> result;
  std::vector<Index> keys;
  for (int i = 0; i < grid.nlat(); ++i) {
    if (grid.weights(i) > Scalar(0)) {
      for (int j = 0; j < grid.nlon(); ++j) keys.push_back(Index(i) * grid.nlon() + j);
    } else {
      result.excluded_rows.push_back(i);
    }
  }
  if (keys.empty()) throw std::invalid_argument("s2_attention_forward_logmask: no key has positive weight");
  const Index nk = static_cast<Index>(keys.size());
  Vector<Scalar> bias(nk);
  for (Index j = 0; j < nk; ++j) bias(j) = std::log(grid.weights(keys[j] / grid.nlon()));

  const int d = config.head_dim, e = v.channels / config.heads;
  result.output = Field<Scalar>(grid.shape, q.batch, v.channels);
  Matrix<Scalar> kc(d, nk), vc(e, nk);
  for (int b = 0; b < q.batch; ++b)
    for (int h = 0; h < config.heads; ++h) {
      const auto kb = k.batch_block(b).middleRows(h * d, d);
      const auto vb = v.batch_block(b).middleRows(h * e, e);
      for (Index j = 0; j < nk; ++j) {
        kc.col(j) = kb.col(keys[j]);
        vc.col(j) = vb.col(keys[j]);
      }
      result.output.batch_block(b).middleRows(h * e, e) = detail::attend<Scalar>(
          q.batch_block(b).middleRows(h * d, d), kc, vc, Vector<Scalar>(), bias, Scalar(config.scale));
    }
  return result;
}

/// Normalized weights A_ij * w_j of one query over all grid points.
template <typename Scalar>
Vector<Scalar> s2_attention_weights(const Field<Scalar>& q, const Field<Scalar>& k, const SphericalGrid<Scalar>& grid,
                                    const AttentionConfig& config, int batch, int head, Index query) {
  const int d = config.head_dim;
  const auto qi = q.batch_block(batch).middleRows(head * d, d).col(query);
  const auto kb = k.batch_block(batch).middleRows(head * d, d);
  const Vector<Scalar> w = grid.point_weights();
  Vector<Scalar> s = (kb.transpose() * qi) * Scalar(config.scale);
  const Scalar m = (w.array() > Scalar(0)).select(s.array(), -std::numeric_limits<Scalar>::infinity()).maxCoeff();
  Vector<Scalar> a = (s.array() - m).exp() * w.array();
  return a / pairwise_sum(a.data(), a.size());
}

}  // namespace s2attn
