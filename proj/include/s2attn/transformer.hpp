#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <stdexcept>
#include <vector>

#include "s2attn/attention.hpp"
#include "s2attn/field.hpp"
#include "s2attn/grid.hpp"
#include "s2attn/neighborhood.hpp"
#include "s2attn/parallel.hpp"

namespace s2attn {

enum class AttentionMode { Global, Neighborhood };

/// Learnable parameters of one pre-norm spherical attention block.
template <typename Scalar>
struct BlockParams {
  int embed = 0;
  int heads = 1;
  Scalar epsilon = Scalar(1e-5);
  AttentionMode mode = AttentionMode::Global;
  double theta_cutoff = 0;  // used when mode == Neighborhood

  Matrix<Scalar> wq, wk, wv, wo;  // embed x embed
  Matrix<Scalar> w1;              // hidden x embed
  Vector<Scalar> b1;              // hidden
  Matrix<Scalar> w2;              // embed x hidden
  Vector<Scalar> b2;              // embed

  int hidden() const { return static_cast<int>(w1.rows()); }

  void validate() const {
    if (embed < 1 || heads < 1 || embed % heads != 0)
      throw std::invalid_argument("BlockParams: embedding dimension must be a positive multiple of heads");
    if (!(epsilon > 0)) throw std::invalid_argument("BlockParams: epsilon must be positive");
    for (const Matrix<Scalar>* m : {&wq, &wk, &wv, &wo})
      if (m->rows() != embed || m->cols() != embed) throw ShapeMismatch("BlockParams: projections must be embed x embed");
    if (w1.cols() != embed || b1.size() != w1.rows() || w2.rows() != embed || w2.cols() != w1.rows() ||
        b2.size() != embed)
      throw ShapeMismatch("BlockParams: inconsistent MLP shapes");
    if (!wq.allFinite() || !wk.allFinite() || !wv.allFinite() || !wo.allFinite() || !w1.allFinite() ||
        !b1.allFinite() || !w2.allFinite() || !b2.allFinite())
      throw std::invalid_argument("BlockParams: non-finite parameter");
    if (mode == AttentionMode::Neighborhood && !(theta_cutoff > 0))
      throw std::invalid_argument("BlockParams: neighborhood mode needs a positive cutoff");
  }

  static BlockParams zeros(int embed, int heads, double mlp_ratio = 4.0) {
    const int hidden = static_cast<int>(std::lround(mlp_ratio * embed));
    if (hidden < 1) throw std::invalid_argument("BlockParams: mlp_ratio yields an empty hidden layer");
    BlockParams p;
    p.embed = embed;
    p.heads = heads;
    p.wq = p.wk = p.wv = p.wo = Matrix<Scalar>::Zero(embed, embed);
    p.w1 = Matrix<Scalar>::Zero(hidden, embed);
    p.b1 = Vector<Scalar>::Zero(hidden);
    p.w2 = Matrix<Scalar>::Zero(embed, hidden);
    p.b2 = Vector<Scalar>::Zero(embed);
    return p;
  }

  /// Uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)] from a seeded generator.
  static BlockParams random(int embed, int heads, std::uint64_t seed, double mlp_ratio = 4.0) {
    BlockParams p = zeros(embed, heads, mlp_ratio);
    std::mt19937_64 rng(seed);
    const auto fill = [&rng](auto& m, int fan_in) {
      const Scalar bound = Scalar(1) / std::sqrt(Scalar(fan_in));
      std::uniform_real_distribution<Scalar> u(-bound, bound);
      for (Index j = 0; j < m.cols(); ++j)
        for (Index i = 0; i < m.rows(); ++i) m(i, j) = u(rng);
    };
    fill(p.wq, embed);
    fill(p.wk, embed);
    fill(p.wv, embed);
    fill(p.wo, embed);
    fill(p.w1, embed);
    fill(p.b1, embed);
    fill(p.w2, p.hidden());
    fill(p.b2, p.hidden());
    return p;
  }
};

/// Per (batch, channel): subtract the quadrature-weighted mean and divide by
/// sqrt(weighted variance + epsilon).
template <typename Scalar>
Field<Scalar> instance_norm(const Field<Scalar>& field, const SphericalGrid<Scalar>& grid, Scalar epsilon) {
  require_same_grid(field, grid.shape, "instance_norm");
  if (!(epsilon > 0)) throw std::invalid_argument("instance_norm: epsilon must be positive");
  const Vector<Scalar> w = grid.point_weights();
  const Scalar wsum = pairwise_sum(w.data(), w.size());
  Field<Scalar> out(field.grid, field.batch, field.channels);
  Vector<Scalar> terms(w.size());
  for (int b = 0; b < field.batch; ++b)
    for (int c = 0; c < field.channels; ++c) {
      const auto x = field.batch_block(b).row(c).transpose();
      terms = x.cwiseProduct(w);
      const Scalar mean = pairwise_sum(terms.data(), terms.size()) / wsum;
      terms = (x.array() - mean).square().matrix().cwiseProduct(w);
      const Scalar var = pairwise_sum(terms.data(), terms.size()) / wsum;
      out.batch_block(b).row(c) = ((x.array() - mean) / std::sqrt(var + epsilon)).matrix().transpose();
    }
  return out;
}

template <typename Derived>
auto gelu(const Eigen::ArrayBase<Derived>& x) {
  using Scalar = typename Derived::Scalar;
  return x.unaryExpr([](Scalar t) { return Scalar(0.5) * t * (Scalar(1) + std::erf(t / std::numbers::sqrt2_v<Scalar>)); });
}

/// Multi-head spherical attention with projections; `x` already normalized.
template <typename Scalar>
Field<Scalar> multi_head_attention(const Field<Scalar>& x, const BlockParams<Scalar>& params,
                                   const SphericalGrid<Scalar>& grid, const NeighborhoodMap* map) {
  const auto config = AttentionConfig::for_embedding(params.embed, params.heads);
  Field<Scalar> q(x.grid, x.batch, params.embed), k = q, v = q;
  q.values.noalias() = params.wq * x.values;
  k.values.noalias() = params.wk * x.values;
  v.values.noalias() = params.wv * x.values;
  Field<Scalar> a = params.mode == AttentionMode::Global ? s2_attention_forward(q, k, v, grid, config)
                                                         : neighborhood_attention_forward(q, k, v, *map, grid, config);
  Field<Scalar> out(x.grid, x.batch, params.embed);
  out.values.noalias() = params.wo * a.values;
  return out;
}

/// y = x + MHA(norm(x) + pos); out = y + MLP(norm(y)).
///
/// `pos` is either empty (no channels) or a single-batch field with `embed`
/// channels broadcast over the batch. `map` must be given exactly when the
/// block runs neighborhood attention.
template <typename Scalar>
Field<Scalar> block_forward(const Field<Scalar>& x, const BlockParams<Scalar>& params, const Field<Scalar>& pos,
                            const SphericalGrid<Scalar>& grid, const NeighborhoodMap* map = nullptr) {
  params.validate();
  require_same_grid(x, grid.shape, "block_forward");
  if (x.channels != params.embed) throw ShapeMismatch("block_forward: input channels differ from embedding dimension");
  const bool local = params.mode == AttentionMode::Neighborhood;
  if (local != (map != nullptr)) throw std::invalid_argument("block_forward: neighborhood map must be given iff mode is neighborhood");
  if (local && !(map->grid == grid.shape)) throw GridMismatch("block_forward: map was built for another grid");

  Field<Scalar> h = instance_norm(x, grid, params.epsilon);
  if (pos.channels > 0) {
    require_same_grid(pos, grid.shape, "block_forward: positional embedding");
    if (pos.channels != params.embed || pos.batch != 1)
      throw ShapeMismatch("block_forward: positional embedding must be 1 x embed");
    for (int b = 0; b < h.batch; ++b) h.batch_block(b) += pos.values;
  }
  Field<Scalar> y = x;
  y.values += multi_head_attention(h, params, grid, map).values;

  const Field<Scalar> n2 = instance_norm(y, grid, params.epsilon);
  Matrix<Scalar> hidden = params.w1 * n2.values;
  hidden.colwise() += params.b1;
  hidden = gelu(hidden.array()).matrix();
  Matrix<Scalar> mlp = params.w2 * hidden;
  mlp.colwise() += params.b2;
  y.values += mlp;
  return y;
}

enum class PositionInjection { EveryBlock, FirstBlock };

/// Stack of blocks sharing one grid (and one map for neighborhood blocks).
template <typename Scalar>
Field<Scalar> transformer_forward(const Field<Scalar>& x, const std::vector<BlockParams<Scalar>>& blocks,
                                  const Field<Scalar>& pos, const SphericalGrid<Scalar>& grid,
                                  const NeighborhoodMap* map = nullptr,
                                  PositionInjection injection = PositionInjection::EveryBlock) {
  Field<Scalar> h = x;
  const Field<Scalar> none;
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const bool use_pos = injection == PositionInjection::EveryBlock || i == 0;
    const NeighborhoodMap* m = blocks[i].mode == AttentionMode::Neighborhood ? map : nullptr;
    h = block_forward(h, blocks[i], use_pos ? pos : none, grid, m);
  }
  return h;
}

}  // namespace s2attn
