#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "m3l/nn/transformer.hpp"
#include "m3l/tokenizer/tokenizer.hpp"

namespace m3l::mae {

using nn::Index;
using nn::Matrix;
using nn::Parameter;
using tok::MaskIndices;
using tok::Modality;
using tok::TokenBatch;
using tok::TokenLayout;
using tok::TokenizerConfig;

struct MaeConfig {
  int enc_layers = 4;
  int enc_heads = 4;
  int mlp_ratio = 4;
  int dec_dim = 64;
  int dec_layers = 2;
  int dec_heads = 4;
  double mask_ratio = 0.95;
  double beta_T = 10.0;
  bool loss_on_all_tokens = false;
  double init_std = 0.02;
};

/// Scalar loss components. The PPO slots are filled by the policy module.
struct LossBreakdown {
  double mse_pixels = 0.0;
  double mse_taxels = 0.0;
  double beta_T = 10.0;
  double l_rep = 0.0;
  double l_clip = 0.0;
  double l_critic = 0.0;
  double entropy = 0.0;
  double l_ppo = 0.0;
  double total = 0.0;
};

/// Shared ViT encoder. With masking it sees only each sample's kept tokens, in the
/// order given by the mask.
template <typename S>
class MaeEncoder {
 public:
  struct Cache {
    std::vector<typename nn::TransformerBlock<S>::Cache> blocks;
    typename nn::LayerNorm<S>::Cache norm;
    std::vector<Index> source_rows;  // token row for each encoder row
    Index token_rows = 0;
    Index seq_len = 0;
  };

  MaeEncoder() = default;
  MaeEncoder(int dim, int layers, int heads, int mlp_ratio) : norm_(dim), dim_(dim) {
    for (int i = 0; i < layers; ++i) blocks_.emplace_back(dim, heads, static_cast<Index>(dim) * mlp_ratio);
  }

  void init(Rng& rng, double std) {
    for (auto& b : blocks_) b.init(rng, std);
  }

  Matrix<S> encode(const TokenBatch<S>& batch, bool apply_mask, Cache* cache = nullptr) const {
    if (batch.batch <= 0 || batch.n_tokens() <= 0) throw std::invalid_argument("encode: empty token batch");
    if (batch.tokens.cols() != dim_) throw std::invalid_argument("encode: token width mismatch");
    Matrix<S> x;
    Index seq_len = batch.n_tokens();
    std::vector<Index> rows;
    if (apply_mask) {
      if (batch.masks.empty()) throw std::invalid_argument("encode: apply_mask requested but batch has no masks");
      seq_len = batch.kept_per_sample();
      rows.reserve(static_cast<std::size_t>(batch.batch * seq_len));
      for (Index b = 0; b < batch.batch; ++b) {
        for (int t : batch.masks[static_cast<std::size_t>(b)].keep) rows.push_back(b * batch.n_tokens() + t);
      }
      x.resize(static_cast<Index>(rows.size()), dim_);
      for (std::size_t i = 0; i < rows.size(); ++i) x.row(static_cast<Index>(i)) = batch.tokens.row(rows[i]);
    } else {
      x = batch.tokens;
    }
    if (cache) {
      cache->blocks.resize(blocks_.size());
      cache->source_rows = std::move(rows);
      cache->token_rows = batch.tokens.rows();
      cache->seq_len = seq_len;
    }
    for (std::size_t i = 0; i < blocks_.size(); ++i) x = blocks_[i].forward(x, seq_len, cache ? &cache->blocks[i] : nullptr);
    return norm_.forward(x, cache ? &cache->norm : nullptr);
  }

  /// Returns dL/dtokens in the full token layout (zero rows for masked tokens).
  Matrix<S> backward(const Matrix<S>& dout, const Cache& cache) {
    Matrix<S> dx = norm_.backward(dout, cache.norm);
    for (std::size_t i = blocks_.size(); i-- > 0;) dx = blocks_[i].backward(dx, cache.blocks[i]);
    if (cache.source_rows.empty()) return dx;
    Matrix<S> dtokens = Matrix<S>::Zero(cache.token_rows, dim_);
    for (std::size_t i = 0; i < cache.source_rows.size(); ++i) dtokens.row(cache.source_rows[i]) += dx.row(static_cast<Index>(i));
    return dtokens;
  }

  template <typename V>
  void visit(V&& v, const std::string& prefix) {
    for (std::size_t i = 0; i < blocks_.size(); ++i) blocks_[i].visit(v, prefix + "block" + std::to_string(i) + ".");
    norm_.visit(v, prefix + "norm.");
  }

  std::vector<nn::TransformerBlock<S>>& blocks() { return blocks_; }
  Index dim() const { return dim_; }

 private:
  std::vector<nn::TransformerBlock<S>> blocks_;
  nn::LayerNorm<S> norm_;
  Index dim_ = 0;
};

/// Per-token patch payloads, (py, px, channel) order inside a row. Vision rows are
/// (sample, token); touch rows are (sample, pad, token).
template <typename S>
struct Payloads {
  Matrix<S> vision;
  Matrix<S> touch;
};

/// Cuts an observation batch into the payloads that the decoder heads predict.
template <typename S>
Payloads<S> patchify(const tok::ObsBatch<S>& obs, const TokenizerConfig& cfg, tok::ModalitySet mods) {
  Payloads<S> out;
  const Index c = cfg.in_channels();
  if (mods.vision) {
    const int g = cfg.vision_grid(), s = cfg.vision_stride, size = cfg.image_size;
    out.vision.resize(obs.batch * g * g, s * s * c);
    for (Index b = 0; b < obs.batch; ++b) {
      for (int gy = 0; gy < g; ++gy) {
        for (int gx = 0; gx < g; ++gx) {
          const Index row = (b * g + gy) * g + gx;
          for (int py = 0; py < s; ++py) {
            for (int px = 0; px < s; ++px) {
              const Index src = (b * size + gy * s + py) * size + gx * s + px;
              out.vision.block(row, (py * s + px) * c, 1, c) = obs.image.row(src);
            }
          }
        }
      }
    }
  }
  if (mods.touch) {
    const int g = cfg.touch_grid(), s = cfg.touch_stride, size = cfg.taxel_size;
    out.touch.resize(obs.batch * 2 * g * g, s * s * c);
    for (Index b = 0; b < obs.batch; ++b) {
      for (int pad = 0; pad < 2; ++pad) {
        const Index map = pad * obs.batch + b;
        for (int gy = 0; gy < g; ++gy) {
          for (int gx = 0; gx < g; ++gx) {
            const Index row = ((b * 2 + pad) * g + gy) * g + gx;
            for (int py = 0; py < s; ++py) {
              for (int px = 0; px < s; ++px) {
                const Index src = (map * size + gy * s + py) * size + gx * s + px;
                out.touch.block(row, (py * s + px) * c, 1, c) = obs.touch.row(src);
              }
            }
          }
        }
      }
    }
  }
  return out;
}

/// Inverse of patchify: payloads back to channels-last image and taxel maps.
template <typename S>
tok::ObsBatch<S> unpatchify(const Payloads<S>& p, Index batch, const TokenizerConfig& cfg) {
  tok::ObsBatch<S> out;
  out.batch = batch;
  out.frames = cfg.frames;
  const Index c = cfg.in_channels();
  if (p.vision.size() > 0) {
    const int g = cfg.vision_grid(), s = cfg.vision_stride, size = cfg.image_size;
    out.image.resize(batch * size * size, c);
    for (Index b = 0; b < batch; ++b) {
      for (int gy = 0; gy < g; ++gy) {
        for (int gx = 0; gx < g; ++gx) {
          const Index row = (b * g + gy) * g + gx;
          for (int py = 0; py < s; ++py) {
            for (int px = 0; px < s; ++px) {
              out.image.row((b * size + gy * s + py) * size + gx * s + px) = p.vision.block(row, (py * s + px) * c, 1, c);
            }
          }
        }
      }
    }
  }
  if (p.touch.size() > 0) {
    const int g = cfg.touch_grid(), s = cfg.touch_stride, size = cfg.taxel_size;
    out.touch.resize(2 * batch * size * size, c);
    for (Index b = 0; b < batch; ++b) {
      for (int pad = 0; pad < 2; ++pad) {
        const Index map = pad * batch + b;
        for (int gy = 0; gy < g; ++gy) {
          for (int gx = 0; gx < g; ++gx) {
            const Index row = ((b * 2 + pad) * g + gy) * g + gx;
            for (int py = 0; py < s; ++py) {
              for (int px = 0; px < s; ++px) {
                out.touch.row((map * size + gy * s + py) * size + gx * s + px) = p.touch.block(row, (py * s + px) * c, 1, c);
              }
            }
          }
        }
      }
    }
  }
  return out;
}

/// Maps (sample, token index) to the payload row of its modality.
inline Index payload_row(const TokenLayout& layout, Index sample, int token, Modality* modality = nullptr) {
  Index vision_per = 0, touch_per = 0;
  for (const auto& s : layout.segments) (s.modality == Modality::vision ? vision_per : touch_per) += s.count();
  for (const auto& s : layout.segments) {
    if (token < s.offset || token >= s.offset + s.count()) continue;
    if (modality) *modality = s.modality;
    if (s.modality == Modality::vision) return sample * vision_per + (token - s.offset);
    return sample * touch_per + (s.pad * s.count()) + (token - s.offset);
  }
  throw std::out_of_range("payload_row: token outside layout");
}

/// ViT decoder: projects encoder outputs, fills masked slots with the mask token,
/// re-adds position and modality embeddings and predicts per-token payloads.
template <typename S>
class MaeDecoder {
 public:
  struct Cache {
    typename nn::Linear<S>::Cache embed;
    std::vector<typename nn::TransformerBlock<S>::Cache> blocks;
    typename nn::LayerNorm<S>::Cache norm;
    typename nn::Linear<S>::Cache head_vision;
    typename nn::Linear<S>::Cache head_touch;
    std::vector<Index> kept_rows;  // full-sequence row of each encoder row
    std::vector<Index> mask_rows;
    std::vector<Index> vision_rows;
    std::vector<Index> touch_rows;
    Index seq_len = 0;
  };

  MaeDecoder() = default;
  MaeDecoder(const TokenizerConfig& tok_cfg, int enc_dim, int dec_dim, int layers, int heads, int mlp_ratio)
      : tok_cfg_(tok_cfg),
        embed_(enc_dim, dec_dim),
        mask_token_(1, dec_dim),
        modality_embed_(2, dec_dim),
        norm_(dec_dim),
        head_vision_(dec_dim, tok_cfg.vision_payload()),
        head_touch_(dec_dim, tok_cfg.touch_payload()),
        dec_dim_(dec_dim) {
    for (int i = 0; i < layers; ++i) blocks_.emplace_back(dec_dim, heads, static_cast<Index>(dec_dim) * mlp_ratio);
  }

  void init(Rng& rng, double std) {
    embed_.init(rng, std);
    mask_token_.value.setZero();
    modality_embed_.value.setZero();
    for (auto& b : blocks_) b.init(rng, std);
    head_vision_.init(rng, std);
    head_touch_.init(rng, std);
  }

  Payloads<S> decode(const Matrix<S>& embeddings, const TokenBatch<S>& batch, Cache* cache = nullptr) const {
    const Index n = batch.n_tokens();
    const bool masked = !batch.masks.empty();
    const Index kept = masked ? batch.kept_per_sample() : n;
    if (embeddings.rows() != batch.batch * kept) {
      throw std::invalid_argument("decode: expected " + std::to_string(batch.batch * kept) + " embedding rows, got " +
                                  std::to_string(embeddings.rows()));
    }
    const Matrix<S> y = embed_.forward(embeddings, cache ? &cache->embed : nullptr);
    Matrix<S> x(batch.batch * n, dec_dim_);
    std::vector<Index> kept_rows, mask_rows;
    if (masked) {
      for (Index b = 0; b < batch.batch; ++b) {
        const MaskIndices& m = batch.masks[static_cast<std::size_t>(b)];
        for (std::size_t j = 0; j < m.keep.size(); ++j) {
          kept_rows.push_back(b * n + m.keep[j]);
          x.row(kept_rows.back()) = y.row(b * kept + static_cast<Index>(j));
        }
        for (int t : m.masked) {
          mask_rows.push_back(b * n + t);
          x.row(mask_rows.back()) = mask_token_.value.row(0);
        }
      }
    } else {
      x = y;
    }
    const Matrix<S> pos = tok::layout_pos_embed<S>(tok_cfg_, batch.layout, static_cast<int>(dec_dim_));
    std::vector<Index> vision_rows, touch_rows;
    for (Index b = 0; b < batch.batch; ++b) {
      x.block(b * n, 0, n, dec_dim_) += pos;
      for (int t = 0; t < n; ++t) {
        const Modality m = batch.modality_id[static_cast<std::size_t>(t)];
        x.row(b * n + t) += modality_embed_.value.row(static_cast<Index>(m));
      }
    }
    // payload rows are (sample, vision token) and (sample, pad, touch token), which is
    // exactly the order tokens appear in within each modality
    for (Index b = 0; b < batch.batch; ++b) {
      for (int t = 0; t < n; ++t) {
        (batch.modality_id[static_cast<std::size_t>(t)] == Modality::vision ? vision_rows : touch_rows).push_back(b * n + t);
      }
    }
    if (cache) cache->blocks.resize(blocks_.size());
    for (std::size_t i = 0; i < blocks_.size(); ++i) x = blocks_[i].forward(x, n, cache ? &cache->blocks[i] : nullptr);
    x = norm_.forward(x, cache ? &cache->norm : nullptr);

    Payloads<S> out;
    if (!vision_rows.empty()) out.vision = head_vision_.forward(select_rows(x, vision_rows), cache ? &cache->head_vision : nullptr);
    if (!touch_rows.empty()) out.touch = head_touch_.forward(select_rows(x, touch_rows), cache ? &cache->head_touch : nullptr);
    if (cache) {
      cache->kept_rows = std::move(kept_rows);
      cache->mask_rows = std::move(mask_rows);
      cache->vision_rows = std::move(vision_rows);
      cache->touch_rows = std::move(touch_rows);
      cache->seq_len = n;
    }
    return out;
  }

  /// Returns dL/d(encoder output).
  Matrix<S> backward(const Payloads<S>& dpred, const TokenBatch<S>& batch, const Cache& cache) {
    const Index n = batch.n_tokens();
    Matrix<S> dx = Matrix<S>::Zero(batch.batch * n, dec_dim_);
    if (!cache.vision_rows.empty()) scatter_rows(dx, head_vision_.backward(dpred.vision, cache.head_vision), cache.vision_rows);
    if (!cache.touch_rows.empty()) scatter_rows(dx, head_touch_.backward(dpred.touch, cache.head_touch), cache.touch_rows);
    dx = norm_.backward(dx, cache.norm);
    for (std::size_t i = blocks_.size(); i-- > 0;) dx = blocks_[i].backward(dx, cache.blocks[i]);
    for (Index b = 0; b < batch.batch; ++b) {
      for (int t = 0; t < n; ++t) {
        const Modality m = batch.modality_id[static_cast<std::size_t>(t)];
        modality_embed_.grad.row(static_cast<Index>(m)) += dx.row(b * n + t);
      }
    }
    if (batch.masks.empty()) return embed_.backward(dx, cache.embed);
    for (Index r : cache.mask_rows) mask_token_.grad.row(0) += dx.row(r);
    return embed_.backward(select_rows(dx, cache.kept_rows), cache.embed);
  }

  template <typename V>
  void visit(V&& v, const std::string& prefix) {
    embed_.visit(v, prefix + "embed.");
    v(prefix + "mask_token", mask_token_);
    v(prefix + "modality_embed", modality_embed_);
    for (std::size_t i = 0; i < blocks_.size(); ++i) blocks_[i].visit(v, prefix + "block" + std::to_string(i) + ".");
    norm_.visit(v, prefix + "norm.");
    head_vision_.visit(v, prefix + "head_vision.");
    head_touch_.visit(v, prefix + "head_touch.");
  }

 private:
  static Matrix<S> select_rows(const Matrix<S>& x, const std::vector<Index>& rows) {
    Matrix<S> out(static_cast<Index>(rows.size()), x.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Index>(i)) = x.row(rows[i]);
    return out;
  }
  static void scatter_rows(Matrix<S>& dst, const Matrix<S>& src, const std::vector<Index>& rows) {
    for (std::size_t i = 0; i < rows.size(); ++i) dst.row(rows[i]) += src.row(static_cast<Index>(i));
  }

  TokenizerConfig tok_cfg_;
  nn::Linear<S> embed_;
  Parameter<S> mask_token_;
  Parameter<S> modality_embed_;
  std::vector<nn::TransformerBlock<S>> blocks_;
  nn::LayerNorm<S> norm_;
  nn::Linear<S> head_vision_;
  nn::Linear<S> head_touch_;
  Index dec_dim_ = 0;
};

/// Number of payload rows entering each modality's mean; used as the denominator.
struct LossCounts {
  Index vision_rows = 0;
  Index touch_rows = 0;
};

/// Rows that contribute to the loss: masked tokens, or every token when `all_tokens`.
inline LossCounts loss_counts(const TokenLayout& layout, Index batch, const std::vector<MaskIndices>& masks, bool all_tokens) {
  LossCounts c;
  for (Index b = 0; b < batch; ++b) {
    if (all_tokens || masks.empty()) {
      for (const auto& s : layout.segments) (s.modality == Modality::vision ? c.vision_rows : c.touch_rows) += s.count();
      continue;
    }
    for (int t : masks[static_cast<std::size_t>(b)].masked) {
      Modality m;
      payload_row(layout, b, t, &m);
      (m == Modality::vision ? c.vision_rows : c.touch_rows) += 1;
    }
  }
  return c;
}

/// Per-modality MSE over the selected payload rows; l_rep = mse_pixels + beta_T *
/// mse_taxels. `counts` fixes the denominators, so a minibatch split into chunks adds
/// up to the unsplit loss. When `grad` is given, dl_rep/dpred is written to it.
template <typename S>
LossBreakdown mae_loss(const Payloads<S>& pred, const Payloads<S>& target, const TokenLayout& layout, Index batch,
                       const std::vector<MaskIndices>& masks, double beta_T, bool all_tokens, const LossCounts* counts = nullptr,
                       Payloads<S>* grad = nullptr) {
  if (pred.vision.rows() != target.vision.rows() || pred.vision.cols() != target.vision.cols() ||
      pred.touch.rows() != target.touch.rows() || pred.touch.cols() != target.touch.cols()) {
    throw std::invalid_argument("mae_loss: prediction and target shapes differ");
  }
  if (!pred.vision.allFinite() || !pred.touch.allFinite() || !target.vision.allFinite() || !target.touch.allFinite()) {
    throw std::domain_error("mae_loss: non-finite input");
  }
  const LossCounts own = loss_counts(layout, batch, masks, all_tokens);
  const LossCounts& n = counts ? *counts : own;
  std::vector<char> vision_sel(static_cast<std::size_t>(pred.vision.rows()), all_tokens || masks.empty() ? 1 : 0);
  std::vector<char> touch_sel(static_cast<std::size_t>(pred.touch.rows()), all_tokens || masks.empty() ? 1 : 0);
  if (!all_tokens && !masks.empty()) {
    for (Index b = 0; b < batch; ++b) {
      for (int t : masks[static_cast<std::size_t>(b)].masked) {
        Modality m;
        const Index r = payload_row(layout, b, t, &m);
        (m == Modality::vision ? vision_sel : touch_sel)[static_cast<std::size_t>(r)] = 1;
      }
    }
  }
  if (grad) {
    grad->vision = Matrix<S>::Zero(pred.vision.rows(), pred.vision.cols());
    grad->touch = Matrix<S>::Zero(pred.touch.rows(), pred.touch.cols());
  }
  const auto term = [&](const Matrix<S>& p, const Matrix<S>& t, const std::vector<char>& sel, Index rows, double weight,
                        Matrix<S>* g) {
    if (rows == 0) return 0.0;
    const double denom = static_cast<double>(rows) * static_cast<double>(p.cols());
    double sum = 0.0;
    for (Index r = 0; r < p.rows(); ++r) {
      if (!sel[static_cast<std::size_t>(r)]) continue;
      const auto diff = (p.row(r) - t.row(r)).eval();
      sum += static_cast<double>(diff.squaredNorm());
      if (g) g->row(r) = diff * static_cast<S>(2.0 * weight / denom);
    }
    return sum / denom;
  };
  LossBreakdown out;
  out.beta_T = beta_T;
  out.mse_pixels = term(pred.vision, target.vision, vision_sel, n.vision_rows, 1.0, grad ? &grad->vision : nullptr);
  out.mse_taxels = term(pred.touch, target.touch, touch_sel, n.touch_rows, beta_T, grad ? &grad->touch : nullptr);
  out.l_rep = out.mse_pixels + beta_T * out.mse_taxels;
  out.total = out.l_rep;
  return out;
}

}  // namespace m3l::mae
