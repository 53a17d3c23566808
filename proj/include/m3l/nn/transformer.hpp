#pragma once

#include <cmath>
#include <vector>

#include "m3l/nn/layers.hpp"

namespace m3l::nn {

/// Multi-head self-attention over a batch of equal-length sequences laid out as
/// (batch*seq_len) x dim. No attention mask: every token attends to every token of
/// its own sequence.
template <typename S>
class MultiHeadSelfAttention {
 public:
  struct Cache {
    typename Linear<S>::Cache qkv_in;
    typename Linear<S>::Cache proj_in;
    Matrix<S> qkv;
    std::vector<Matrix<S>> probs;
    Index seq_len = 0;
  };

  MultiHeadSelfAttention() = default;
  MultiHeadSelfAttention(Index dim, Index heads) : qkv_(dim, 3 * dim), proj_(dim, dim), dim_(dim), heads_(heads) {
    if (heads <= 0 || dim % heads != 0) {
      throw std::invalid_argument("attention: dim " + std::to_string(dim) +
                                  " not divisible by heads " + std::to_string(heads));
    }
  }

  void init(Rng& rng, double std) {
    qkv_.init(rng, std);
    proj_.init(rng, std);
  }

  Matrix<S> forward(const Matrix<S>& x, Index seq_len, Cache* cache = nullptr) const {
    if (seq_len <= 0 || x.rows() % seq_len != 0) {
      throw std::invalid_argument("attention: rows not a multiple of sequence length");
    }
    const Index batch = x.rows() / seq_len;
    const Index dh = dim_ / heads_;
    const S scale = S{1} / std::sqrt(static_cast<S>(dh));
    Matrix<S> qkv = qkv_.forward(x, cache ? &cache->qkv_in : nullptr);
    Matrix<S> ctx(x.rows(), dim_);
    if (cache) {
      cache->probs.assign(static_cast<std::size_t>(batch * heads_), Matrix<S>());
      cache->seq_len = seq_len;
    }
    Matrix<S> scores(seq_len, seq_len);
    for (Index b = 0; b < batch; ++b) {
      for (Index h = 0; h < heads_; ++h) {
        const auto q = qkv.block(b * seq_len, h * dh, seq_len, dh);
        const auto k = qkv.block(b * seq_len, dim_ + h * dh, seq_len, dh);
        const auto v = qkv.block(b * seq_len, 2 * dim_ + h * dh, seq_len, dh);
        scores.noalias() = q * k.transpose();
        scores *= scale;
        softmax_rows(scores);
        ctx.block(b * seq_len, h * dh, seq_len, dh).noalias() = scores * v;
        if (cache) cache->probs[static_cast<std::size_t>(b * heads_ + h)] = scores;
      }
    }
    if (cache) cache->qkv = std::move(qkv);
    return proj_.forward(ctx, cache ? &cache->proj_in : nullptr);
  }

  Matrix<S> backward(const Matrix<S>& dy, const Cache& cache) {
    const Index seq_len = cache.seq_len;
    const Index batch = dy.rows() / seq_len;
    const Index dh = dim_ / heads_;
    const S scale = S{1} / std::sqrt(static_cast<S>(dh));
    const Matrix<S> dctx = proj_.backward(dy, cache.proj_in);
    Matrix<S> dqkv(dy.rows(), 3 * dim_);
    Matrix<S> dp(seq_len, seq_len);
    for (Index b = 0; b < batch; ++b) {
      for (Index h = 0; h < heads_; ++h) {
        const Matrix<S>& p = cache.probs[static_cast<std::size_t>(b * heads_ + h)];
        const auto q = cache.qkv.block(b * seq_len, h * dh, seq_len, dh);
        const auto k = cache.qkv.block(b * seq_len, dim_ + h * dh, seq_len, dh);
        const auto v = cache.qkv.block(b * seq_len, 2 * dim_ + h * dh, seq_len, dh);
        const auto dout = dctx.block(b * seq_len, h * dh, seq_len, dh);
        dqkv.block(b * seq_len, 2 * dim_ + h * dh, seq_len, dh).noalias() = p.transpose() * dout;
        dp.noalias() = dout * v.transpose();
        // softmax Jacobian: dS = P * (dP - rowsum(dP * P))
        const Eigen::Matrix<S, Eigen::Dynamic, 1> inner = (dp.array() * p.array()).rowwise().sum();
        dp = (p.array() * (dp.array().colwise() - inner.array())).matrix() * scale;
        dqkv.block(b * seq_len, h * dh, seq_len, dh).noalias() = dp * k;
        dqkv.block(b * seq_len, dim_ + h * dh, seq_len, dh).noalias() = dp.transpose() * q;
      }
    }
    return qkv_.backward(dqkv, cache.qkv_in);
  }

  template <typename V>
  void visit(V&& v, const std::string& prefix) {
    qkv_.visit(v, prefix + "qkv.");
    proj_.visit(v, prefix + "proj.");
  }

  Linear<S>& qkv() { return qkv_; }
  Linear<S>& proj() { return proj_; }

 private:
  static void softmax_rows(Matrix<S>& m) {
    for (Index i = 0; i < m.rows(); ++i) {
      const S mx = m.row(i).maxCoeff();
      m.row(i) = (m.row(i).array() - mx).exp().matrix();
      m.row(i) /= m.row(i).sum();
    }
  }

  Linear<S> qkv_;
  Linear<S> proj_;
  Index dim_ = 0;
  Index heads_ = 1;
};

/// Pre-norm transformer block: x + attn(ln(x)), then x + mlp(ln(x)).
template <typename S>
class TransformerBlock {
 public:
  struct Cache {
    typename LayerNorm<S>::Cache ln1;
    typename MultiHeadSelfAttention<S>::Cache attn;
    typename LayerNorm<S>::Cache ln2;
    typename Linear<S>::Cache fc1;
    typename Gelu<S>::Cache act;
    typename Linear<S>::Cache fc2;
  };

  TransformerBlock() = default;
  TransformerBlock(Index dim, Index heads, Index mlp_hidden)
      : ln1_(dim), attn_(dim, heads), ln2_(dim), fc1_(dim, mlp_hidden), fc2_(mlp_hidden, dim) {}

  void init(Rng& rng, double std = 0.02) {
    attn_.init(rng, std);
    fc1_.init(rng, std);
    fc2_.init(rng, std);
  }

  Matrix<S> forward(const Matrix<S>& x, Index seq_len, Cache* cache = nullptr) const {
    Matrix<S> x1 = x + attn_.forward(ln1_.forward(x, cache ? &cache->ln1 : nullptr), seq_len,
                                     cache ? &cache->attn : nullptr);
    const Matrix<S> hidden = Gelu<S>::forward(
        fc1_.forward(ln2_.forward(x1, cache ? &cache->ln2 : nullptr), cache ? &cache->fc1 : nullptr),
        cache ? &cache->act : nullptr);
    x1 += fc2_.forward(hidden, cache ? &cache->fc2 : nullptr);
    return x1;
  }

  Matrix<S> backward(const Matrix<S>& dy, const Cache& cache) {
    Matrix<S> dx1 = dy;
    dx1 += ln2_.backward(
        fc1_.backward(Gelu<S>::backward(fc2_.backward(dy, cache.fc2), cache.act), cache.fc1), cache.ln2);
    Matrix<S> dx = dx1;
    dx += ln1_.backward(attn_.backward(dx1, cache.attn), cache.ln1);
    return dx;
  }

  template <typename V>
  void visit(V&& v, const std::string& prefix) {
    ln1_.visit(v, prefix + "ln1.");
    attn_.visit(v, prefix + "attn.");
    ln2_.visit(v, prefix + "ln2.");
    fc1_.visit(v, prefix + "fc1.");
    fc2_.visit(v, prefix + "fc2.");
  }

  MultiHeadSelfAttention<S>& attention() { return attn_; }

 private:
  LayerNorm<S> ln1_;
  MultiHeadSelfAttention<S> attn_;
  LayerNorm<S> ln2_;
  Linear<S> fc1_;
  Linear<S> fc2_;
};

/// Mean over each sequence: (batch*seq_len) x dim -> batch x dim.
template <typename S>
Matrix<S> mean_pool(const Matrix<S>& x, Index seq_len) {
  const Index batch = x.rows() / seq_len;
  Matrix<S> out(batch, x.cols());
  for (Index b = 0; b < batch; ++b) out.row(b) = x.block(b * seq_len, 0, seq_len, x.cols()).colwise().mean();
  return out;
}

template <typename S>
Matrix<S> mean_pool_backward(const Matrix<S>& dy, Index seq_len) {
  Matrix<S> dx(dy.rows() * seq_len, dy.cols());
  const S inv = S{1} / static_cast<S>(seq_len);
  for (Index b = 0; b < dy.rows(); ++b) dx.block(b * seq_len, 0, seq_len, dy.cols()).rowwise() = dy.row(b) * inv;
  return dx;
}

}  // namespace m3l::nn
