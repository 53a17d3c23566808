#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "m3l/core/rng.hpp"
#include "m3l/env/insertion_env.hpp"
#include "m3l/nn/layers.hpp"

namespace m3l::tok {

using nn::Index;
using nn::Matrix;
using nn::Parameter;

enum class Modality : std::uint8_t { vision = 0, touch = 1 };

inline std::string to_string(Modality m) { return m == Modality::vision ? "vision" : "touch"; }

struct ModalitySet {
  bool vision = true;
  bool touch = true;

  bool empty() const { return !vision && !touch; }
  friend bool operator==(const ModalitySet&, const ModalitySet&) = default;

  static ModalitySet both() { return {true, true}; }
  static ModalitySet vision_only() { return {true, false}; }
  static ModalitySet touch_only() { return {false, true}; }
};

inline std::string to_string(ModalitySet m) {
  if (m.vision && m.touch) return "vision+touch";
  if (m.vision) return "vision";
  if (m.touch) return "touch";
  return "none";
}

inline ModalitySet parse_modalities(const std::string& s) {
  if (s == "vision+touch" || s == "both" || s == "vision,touch" || s == "touch,vision") return ModalitySet::both();
  if (s == "vision") return ModalitySet::vision_only();
  if (s == "touch") return ModalitySet::touch_only();
  throw std::invalid_argument("unknown modality set '" + s + "' (expected vision, touch or vision+touch)");
}

struct TokenizerConfig {
  int image_size = env::kImageSize;
  int taxel_size = env::kTaxelSize;
  int frames = 4;
  int vision_stride = 8;
  int touch_stride = 8;
  int dim = 128;
  int conv_hidden = 32;

  int in_channels() const { return 3 * frames; }
  int vision_grid() const { return image_size / vision_stride; }
  int touch_grid() const { return taxel_size / touch_stride; }
  int vision_tokens() const { return vision_grid() * vision_grid(); }
  int touch_tokens_per_pad() const { return touch_grid() * touch_grid(); }
  int token_count(ModalitySet m) const {
    return (m.vision ? vision_tokens() : 0) + (m.touch ? 2 * touch_tokens_per_pad() : 0);
  }
  int vision_payload() const { return vision_stride * vision_stride * in_channels(); }
  int touch_payload() const { return touch_stride * touch_stride * in_channels(); }

  void validate() const {
    const auto need = [](bool ok, const char* what) {
      if (!ok) throw std::invalid_argument(std::string("tokenizer config: ") + what);
    };
    need(frames >= 1, "frames must be >= 1");
    need(dim > 0 && dim % 4 == 0, "dim must be a positive multiple of 4");
    need(conv_hidden > 0, "conv_hidden must be positive");
    need(vision_stride >= 2 && vision_stride % 2 == 0, "vision_stride must be even");
    need(touch_stride >= 2 && touch_stride % 2 == 0, "touch_stride must be even");
    need(image_size > 0 && image_size % vision_stride == 0, "image size not divisible by vision_stride");
    need(taxel_size > 0 && taxel_size % touch_stride == 0, "taxel size not divisible by touch_stride");
  }
};

/// Counts every sample whose taxel arrays were copied into a learning batch or
/// buffer. Vision-only runs must leave it untouched.
inline std::atomic<std::uint64_t>& taxel_reads() {
  static std::atomic<std::uint64_t> counter{0};
  return counter;
}

/// Stacked observations for a batch, channels-last: row = (sample, y, x), column =
/// frame * 3 + channel. Touch rows hold all left pads first, then all right pads.
template <typename S>
struct ObsBatch {
  Index batch = 0;
  int frames = 1;
  Matrix<S> image;
  Matrix<S> touch;

  bool has_vision() const { return image.size() > 0; }
  bool has_touch() const { return touch.size() > 0; }
};

template <typename S>
ObsBatch<S> gather_obs(const std::vector<const env::StackedObs*>& obs, ModalitySet mods) {
  if (obs.empty()) throw std::invalid_argument("gather_obs: empty batch");
  ObsBatch<S> out;
  out.batch = static_cast<Index>(obs.size());
  out.frames = obs.front()->k;
  const Index c = 3 * out.frames;
  const Index px = env::kImageSize * env::kImageSize;
  const Index tx = env::kTaxelSize * env::kTaxelSize;
  if (mods.vision) {
    out.image.resize(out.batch * px, c);
    for (Index b = 0; b < out.batch; ++b) {
      const auto& src = obs[static_cast<std::size_t>(b)]->image_stack;
      if (static_cast<Index>(src.size()) != px * c) throw std::invalid_argument("gather_obs: image stack size mismatch");
      for (Index i = 0; i < px * c; ++i) out.image.data()[b * px * c + i] = static_cast<S>(src[static_cast<std::size_t>(i)]);
    }
  }
  if (mods.touch) {
    out.touch.resize(2 * out.batch * tx, c);
    for (Index b = 0; b < out.batch; ++b) {
      const auto& l = obs[static_cast<std::size_t>(b)]->tactile_left_stack;
      const auto& r = obs[static_cast<std::size_t>(b)]->tactile_right_stack;
      if (static_cast<Index>(l.size()) != tx * c || static_cast<Index>(r.size()) != tx * c) {
        throw std::invalid_argument("gather_obs: taxel stack size mismatch");
      }
      for (Index i = 0; i < tx * c; ++i) {
        out.touch.data()[b * tx * c + i] = static_cast<S>(l[static_cast<std::size_t>(i)]);
        out.touch.data()[(out.batch + b) * tx * c + i] = static_cast<S>(r[static_cast<std::size_t>(i)]);
      }
    }
    taxel_reads() += static_cast<std::uint64_t>(out.batch);
  }
  return out;
}

/// Fixed 2D sine-cosine table, one row per grid cell in row-major order. The first
/// half of each row encodes the column, the second half the row; each half is
/// [sin(p * w_i), cos(p * w_i)] with w_i = 10000^(-i / (D/4)).
template <typename S = double>
Matrix<S> sincos_pos_embed(int h, int w, int dim) {
  if (h <= 0 || w <= 0) throw std::invalid_argument("sincos_pos_embed: grid must be non-empty");
  if (dim <= 0 || dim % 4 != 0) throw std::invalid_argument("sincos_pos_embed: dim must be divisible by 4");
  const int quarter = dim / 4;
  Matrix<S> table(h * w, dim);
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      const Index row = r * w + c;
      for (int i = 0; i < quarter; ++i) {
        const double omega = 1.0 / std::pow(10000.0, static_cast<double>(i) / quarter);
        table(row, i) = static_cast<S>(std::sin(c * omega));
        table(row, quarter + i) = static_cast<S>(std::cos(c * omega));
        table(row, 2 * quarter + i) = static_cast<S>(std::sin(r * omega));
        table(row, 3 * quarter + i) = static_cast<S>(std::cos(r * omega));
      }
    }
  }
  return table;
}

/// Token layout of one sample: a vision grid, then the left and right touch grids.
/// Touch positions come from one h x 2w grid with the left pad in the first w
/// columns, so equal cells on the two pads get different embeddings.
struct Segment {
  Modality modality = Modality::vision;
  int grid_h = 0;
  int grid_w = 0;
  int offset = 0;  // first token index within a sample
  int pad = -1;    // 0 left, 1 right, -1 vision
  int count() const { return grid_h * grid_w; }
};

struct TokenLayout {
  std::vector<Segment> segments;
  int n_tokens = 0;

  std::vector<Modality> modality_ids() const {
    std::vector<Modality> ids;
    for (const Segment& s : segments) ids.insert(ids.end(), static_cast<std::size_t>(s.count()), s.modality);
    return ids;
  }
};

inline TokenLayout token_layout(const TokenizerConfig& cfg, ModalitySet mods) {
  TokenLayout l;
  if (mods.vision) {
    l.segments.push_back({Modality::vision, cfg.vision_grid(), cfg.vision_grid(), l.n_tokens, -1});
    l.n_tokens += cfg.vision_tokens();
  }
  if (mods.touch) {
    for (int pad = 0; pad < 2; ++pad) {
      l.segments.push_back({Modality::touch, cfg.touch_grid(), cfg.touch_grid(), l.n_tokens, pad});
      l.n_tokens += cfg.touch_tokens_per_pad();
    }
  }
  return l;
}

/// Per-token positional rows for a layout at width `dim`.
template <typename S>
Matrix<S> layout_pos_embed(const TokenizerConfig& cfg, const TokenLayout& layout, int dim) {
  Matrix<S> out(layout.n_tokens, dim);
  const Matrix<S> vision = sincos_pos_embed<S>(cfg.vision_grid(), cfg.vision_grid(), dim);
  const int g = cfg.touch_grid();
  const Matrix<S> touch = sincos_pos_embed<S>(g, 2 * g, dim);
  for (const Segment& s : layout.segments) {
    for (int t = 0; t < s.count(); ++t) {
      if (s.modality == Modality::vision) {
        out.row(s.offset + t) = vision.row(t);
      } else {
        const int r = t / g;
        const int c = t % g + s.pad * g;
        out.row(s.offset + t) = touch.row(r * 2 * g + c);
      }
    }
  }
  return out;
}

struct MaskSpec {
  double ratio = 0.95;
  std::uint64_t rng_seed = 0;
};

struct MaskIndices {
  std::vector<int> keep;
  std::vector<int> masked;
};

inline int kept_count(int n_tokens, double ratio) {
  if (n_tokens < 1) throw std::invalid_argument("sample_mask: n_tokens must be >= 1");
  if (!(ratio >= 0.0 && ratio <= 1.0)) throw std::invalid_argument("sample_mask: ratio must lie in [0, 1]");
  return std::max(1, static_cast<int>(std::lround(n_tokens * (1.0 - ratio))));
}

/// Uniform draw of the kept set over all token indices (partial Fisher-Yates). Keep
/// indices come in draw order; masked indices ascending.
inline MaskIndices sample_mask(int n_tokens, double ratio, Rng& rng) {
  const int keep = kept_count(n_tokens, ratio);
  std::vector<int> perm(static_cast<std::size_t>(n_tokens));
  std::iota(perm.begin(), perm.end(), 0);
  for (int i = 0; i < keep; ++i) {
    const int j = i + static_cast<int>(rng.below(static_cast<std::uint64_t>(n_tokens - i)));
    std::swap(perm[static_cast<std::size_t>(i)], perm[static_cast<std::size_t>(j)]);
  }
  MaskIndices m;
  m.keep.assign(perm.begin(), perm.begin() + keep);
  m.masked.assign(perm.begin() + keep, perm.end());
  std::sort(m.masked.begin(), m.masked.end());
  return m;
}

inline MaskIndices sample_mask(int n_tokens, const MaskSpec& spec) {
  Rng rng(spec.rng_seed);
  return sample_mask(n_tokens, spec.ratio, rng);
}

/// Tokens for a batch: row (sample * n_tokens + token). Embeddings are already added.
/// `masks` is empty until apply_masks is called; then it holds one entry per sample.
template <typename S>
struct TokenBatch {
  Index batch = 0;
  TokenLayout layout;
  Matrix<S> tokens;
  Matrix<S> pos_embed;  // n_tokens x D, shared by every sample
  std::vector<Modality> modality_id;
  std::vector<MaskIndices> masks;

  int n_tokens() const { return layout.n_tokens; }
  int kept_per_sample() const { return masks.empty() ? layout.n_tokens : static_cast<int>(masks.front().keep.size()); }
};

/// Attaches per-sample masks; all samples must keep the same number of tokens so the
/// kept sequences form a dense batch.
template <typename S>
void apply_masks(TokenBatch<S>& batch, std::vector<MaskIndices> masks) {
  if (static_cast<Index>(masks.size()) != batch.batch) throw std::invalid_argument("apply_masks: one mask per sample required");
  for (const MaskIndices& m : masks) {
    if (m.keep.size() != masks.front().keep.size()) throw std::invalid_argument("apply_masks: kept counts differ across samples");
    if (static_cast<int>(m.keep.size() + m.masked.size()) != batch.n_tokens()) {
      throw std::invalid_argument("apply_masks: mask does not partition the tokens");
    }
  }
  batch.masks = std::move(masks);
}

template <typename S>
std::vector<MaskIndices> sample_masks(Index batch, int n_tokens, double ratio, Rng& rng) {
  std::vector<MaskIndices> out;
  out.reserve(static_cast<std::size_t>(batch));
  for (Index b = 0; b < batch; ++b) out.push_back(sample_mask(n_tokens, ratio, rng));
  return out;
}

/// Two non-overlapping convolutions: kernel = stride = s/2, GELU, kernel = stride = 2.
template <typename S>
class ConvStem {
 public:
  struct Cache {
    typename nn::Conv2d<S>::Cache c1;
    typename nn::Gelu<S>::Cache act;
    typename nn::Conv2d<S>::Cache c2;
    nn::MapShape mid;
  };

  ConvStem() = default;
  ConvStem(int in_channels, int hidden, int dim, int stride)
      : conv1_(in_channels, hidden, stride / 2, stride / 2), conv2_(hidden, dim, 2, 2) {}

  void init(Rng& rng) {
    conv1_.init(rng, 1.0 / std::sqrt(static_cast<double>(conv1_.fan_in())));
    conv2_.init(rng, 1.0 / std::sqrt(static_cast<double>(conv2_.fan_in())));
  }

  Matrix<S> forward(const Matrix<S>& x, const nn::MapShape& in, Cache* cache = nullptr) const {
    const nn::MapShape mid = conv1_.output_shape(in);
    Matrix<S> h = nn::Gelu<S>::forward(conv1_.forward(x, in, cache ? &cache->c1 : nullptr), cache ? &cache->act : nullptr);
    if (cache) cache->mid = mid;
    return conv2_.forward(h, mid, cache ? &cache->c2 : nullptr);
  }

  Matrix<S> backward(const Matrix<S>& dy, const Cache& cache) {
    return conv1_.backward(nn::Gelu<S>::backward(conv2_.backward(dy, cache.c2), cache.act), cache.c1);
  }

  /// Gradient accumulation without the input gradient (the stem is the first layer).
  void backward_params(const Matrix<S>& dy, const Cache& cache) {
    conv1_.accumulate(nn::Gelu<S>::backward(conv2_.backward(dy, cache.c2), cache.act), cache.c1);
  }

  template <typename V>
  void visit(V&& v, const std::string& prefix) {
    conv1_.visit(v, prefix + "conv1.");
    conv2_.visit(v, prefix + "conv2.");
  }

 private:
  nn::Conv2d<S> conv1_;
  nn::Conv2d<S> conv2_;
};

/// Early convolutions for both streams plus the learned modality embeddings.
template <typename S>
class Tokenizer {
 public:
  struct Cache {
    typename ConvStem<S>::Cache vision;
    typename ConvStem<S>::Cache touch;
    ModalitySet mods;
    Index batch = 0;
  };

  Tokenizer() = default;
  explicit Tokenizer(TokenizerConfig cfg)
      : cfg_((cfg.validate(), cfg)),
        vision_(cfg.in_channels(), cfg.conv_hidden, cfg.dim, cfg.vision_stride),
        touch_(cfg.in_channels(), cfg.conv_hidden, cfg.dim, cfg.touch_stride),
        modality_embed_(2, cfg.dim) {}

  const TokenizerConfig& config() const { return cfg_; }

  void init(Rng& rng) {
    vision_.init(rng);
    touch_.init(rng);
    modality_embed_.value.setZero();
  }

  /// g_v x g_v x D vision features per sample, rows (sample, gy, gx).
  Matrix<S> conv_features_vision(const Matrix<S>& image, Index batch, typename ConvStem<S>::Cache* cache = nullptr) const {
    check_input(image, batch, cfg_.image_size, "vision");
    return vision_.forward(image, {batch, cfg_.image_size, cfg_.image_size}, cache);
  }

  /// Touch features for `pads` stacked pad maps (shared weights across pads).
  Matrix<S> conv_features_touch(const Matrix<S>& taxels, Index pads, typename ConvStem<S>::Cache* cache = nullptr) const {
    check_input(taxels, pads, cfg_.taxel_size, "touch");
    return touch_.forward(taxels, {pads, cfg_.taxel_size, cfg_.taxel_size}, cache);
  }

  /// Flattens the grids into per-sample token sequences and adds positional and
  /// modality embeddings.
  TokenBatch<S> forward(const ObsBatch<S>& obs, ModalitySet mods, Cache* cache = nullptr) const {
    if (mods.empty()) throw std::invalid_argument("tokenizer: empty modality set");
    if (mods.vision && !obs.has_vision()) throw std::invalid_argument("tokenizer: vision requested but batch has no images");
    if (mods.touch && !obs.has_touch()) throw std::invalid_argument("tokenizer: touch requested but batch has no taxels");
    TokenBatch<S> out;
    out.batch = obs.batch;
    out.layout = token_layout(cfg_, mods);
    out.modality_id = out.layout.modality_ids();
    out.pos_embed = layout_pos_embed<S>(cfg_, out.layout, cfg_.dim);
    const Index n = out.layout.n_tokens;
    out.tokens.resize(obs.batch * n, cfg_.dim);
    if (cache) {
      cache->mods = mods;
      cache->batch = obs.batch;
    }
    Matrix<S> vf, tf;
    if (mods.vision) vf = conv_features_vision(obs.image, obs.batch, cache ? &cache->vision : nullptr);
    if (mods.touch) tf = conv_features_touch(obs.touch, 2 * obs.batch, cache ? &cache->touch : nullptr);
    for (const Segment& s : out.layout.segments) {
      const Matrix<S>& src = s.modality == Modality::vision ? vf : tf;
      const Index per = s.count();
      const auto emb = modality_embed_.value.row(static_cast<Index>(s.modality));
      for (Index b = 0; b < obs.batch; ++b) {
        const Index src_row = (s.pad <= 0 ? b : obs.batch + b) * per;
        out.tokens.block(b * n + s.offset, 0, per, cfg_.dim) = src.block(src_row, 0, per, cfg_.dim);
        out.tokens.block(b * n + s.offset, 0, per, cfg_.dim) += out.pos_embed.block(s.offset, 0, per, cfg_.dim);
        out.tokens.block(b * n + s.offset, 0, per, cfg_.dim).rowwise() += emb;
      }
    }
    return out;
  }

  /// Accumulates parameter gradients from dL/dtokens (same layout as tokens).
  void backward(const Matrix<S>& dtokens, const TokenLayout& layout, const Cache& cache) {
    const Index n = layout.n_tokens;
    const Index batch = cache.batch;
    Matrix<S> dv, dt;
    if (cache.mods.vision) dv = Matrix<S>::Zero(batch * cfg_.vision_tokens(), cfg_.dim);
    if (cache.mods.touch) dt = Matrix<S>::Zero(2 * batch * cfg_.touch_tokens_per_pad(), cfg_.dim);
    for (const Segment& s : layout.segments) {
      Matrix<S>& dst = s.modality == Modality::vision ? dv : dt;
      const Index per = s.count();
      for (Index b = 0; b < batch; ++b) {
        const auto g = dtokens.block(b * n + s.offset, 0, per, cfg_.dim);
        dst.block((s.pad <= 0 ? b : batch + b) * per, 0, per, cfg_.dim) = g;
        modality_embed_.grad.row(static_cast<Index>(s.modality)) += g.colwise().sum();
      }
    }
    if (cache.mods.vision) vision_.backward_params(dv, cache.vision);
    if (cache.mods.touch) touch_.backward_params(dt, cache.touch);
  }

  template <typename V>
  void visit(V&& v, const std::string& prefix) {
    vision_.visit(v, prefix + "vision_stem.");
    touch_.visit(v, prefix + "touch_stem.");
    v(prefix + "modality_embed", modality_embed_);
  }

  Parameter<S>& modality_embed() { return modality_embed_; }

 private:
  void check_input(const Matrix<S>& x, Index batch, int size, const char* what) const {
    if (x.rows() != batch * size * size || x.cols() != cfg_.in_channels()) {
      throw std::invalid_argument(std::string("tokenizer: ") + what + " input is " + std::to_string(x.rows()) + "x" +
                                  std::to_string(x.cols()) + ", expected " + std::to_string(batch * size * size) + "x" +
                                  std::to_string(cfg_.in_channels()));
    }
  }

  TokenizerConfig cfg_;
  ConvStem<S> vision_;
  ConvStem<S> touch_;
  Parameter<S> modality_embed_;  // row 0 vision, row 1 touch
};

}  // namespace m3l::tok
