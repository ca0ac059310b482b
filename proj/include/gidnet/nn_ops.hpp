#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "gidnet/common.hpp"
#include "gidnet/tensor.hpp"

namespace gidnet {

/// Weights of one convolution. Stride is always 1 and padding is always
/// (k-1)/2, so spatial extents are preserved by every layer.
struct ConvParams {
  Tensor weight;           // (out_c, in_c/groups, k, k)
  std::vector<float> bias; // out_c
  int groups = 1;
  int padding = 0;

  int out_channels() const { return weight.shape().n; }
  int kernel() const { return weight.shape().h; }
  int in_channels() const { return weight.shape().c * groups; }

  void validate() const {
    const Shape& ws = weight.shape();
    if (ws.h != ws.w) throw ShapeError("conv weight must be square");
    if (groups < 1 || ws.n % groups != 0)
      throw ShapeError("conv out channels " + std::to_string(ws.n) +
                       " not divisible by groups " + std::to_string(groups));
    if (bias.size() != static_cast<std::size_t>(ws.n))
      throw ShapeError("conv bias length mismatch");
    if (padding != (ws.h - 1) / 2)
      throw ShapeError("conv padding must be (k-1)/2");
  }
};

/// Direct convolution, stride 1, zero padding.  Accumulation per output pixel
/// runs in 32-bit float in fixed (in-channel, ky, kx) order within the output
/// channel's group, which makes results bit-identical for any worker count.
inline Tensor conv2d(const Tensor& x, const ConvParams& p) {
  p.validate();
  const Shape& xs = x.shape();
  const Shape& ws = p.weight.shape();
  const int out_c = ws.n, k = ws.h, icpg = ws.c, pad = p.padding;
  if (xs.c != icpg * p.groups)
    throw ShapeError("conv2d: input has " + std::to_string(xs.c) +
                     " channels, weights expect " +
                     std::to_string(icpg * p.groups));
  const int ocpg = out_c / p.groups;
  Tensor out(Shape{xs.n, out_c, xs.h, xs.w});

  const float* in = x.data().data();
  const float* wt = p.weight.data().data();
  float* dst = out.data().data();
  const std::size_t in_plane = static_cast<std::size_t>(xs.h) * xs.w;

  parallel_for(0, static_cast<std::int64_t>(xs.n) * out_c, [&](std::int64_t i) {
    const int n = static_cast<int>(i / out_c);
    const int o = static_cast<int>(i % out_c);
    const int g = o / ocpg;
    const float* in_n = in + (static_cast<std::size_t>(n) * xs.c +
                              static_cast<std::size_t>(g) * icpg) *
                                 in_plane;
    const float* w_o = wt + static_cast<std::size_t>(o) * icpg * k * k;
    float* out_p = dst + (static_cast<std::size_t>(n) * out_c + o) * in_plane;
    for (int y = 0; y < xs.h; ++y) {
      for (int xx = 0; xx < xs.w; ++xx) {
        float acc = p.bias[o];
        for (int ic = 0; ic < icpg; ++ic) {
          const float* in_c = in_n + ic * in_plane;
          const float* w_c = w_o + ic * k * k;
          for (int ky = 0; ky < k; ++ky) {
            const int sy = y + ky - pad;
            if (sy < 0 || sy >= xs.h) continue;
            const float* in_row = in_c + static_cast<std::size_t>(sy) * xs.w;
            const float* w_row = w_c + ky * k;
            for (int kx = 0; kx < k; ++kx) {
              const int sx = xx + kx - pad;
              if (sx < 0 || sx >= xs.w) continue;
              acc += w_row[kx] * in_row[sx];
            }
          }
        }
        out_p[static_cast<std::size_t>(y) * xs.w + xx] = acc;
      }
    }
  });
  require_finite(out, "conv2d");
  return out;
}

struct ConvGrads {
  Tensor x;
  Tensor weight;
  std::vector<float> bias;
};

/// Reverse rule of conv2d. The record of the forward pass is the pair
/// (input, params); gradients come back in the shapes of their primals.
inline ConvGrads conv2d_backward(const Tensor& x, const ConvParams& p,
                                 const Tensor& grad_out) {
  p.validate();
  const Shape& xs = x.shape();
  const Shape& ws = p.weight.shape();
  const int out_c = ws.n, k = ws.h, icpg = ws.c, pad = p.padding;
  const int ocpg = out_c / p.groups;
  if (!(grad_out.shape() == Shape{xs.n, out_c, xs.h, xs.w}))
    throw ShapeError("conv2d_backward: grad shape " +
                     grad_out.shape().str() + " does not match record");

  ConvGrads g{Tensor::zeros(xs), Tensor::zeros(ws),
              std::vector<float>(out_c, 0.0f)};
  const std::size_t plane = static_cast<std::size_t>(xs.h) * xs.w;
  const float* go = grad_out.data().data();
  const float* in = x.data().data();
  const float* wt = p.weight.data().data();

  // grad_bias[o] = sum of grad_out over channel o
  for (int n = 0; n < xs.n; ++n)
    for (int o = 0; o < out_c; ++o) {
      const float* gp = go + (static_cast<std::size_t>(n) * out_c + o) * plane;
      float acc = 0.0f;
      for (std::size_t i = 0; i < plane; ++i) acc += gp[i];
      g.bias[o] += acc;
    }

  // grad_weight(o, ic, ky, kx) = sum over n,y,x of grad_out * shifted input
  float* gw = g.weight.data().data();
  parallel_for(0, out_c, [&](std::int64_t o64) {
    const int o = static_cast<int>(o64);
    const int grp = o / ocpg;
    float* gw_o = gw + static_cast<std::size_t>(o) * icpg * k * k;
    for (int n = 0; n < xs.n; ++n) {
      const float* go_p =
          go + (static_cast<std::size_t>(n) * out_c + o) * plane;
      const float* in_n = in + (static_cast<std::size_t>(n) * xs.c +
                                static_cast<std::size_t>(grp) * icpg) *
                                   plane;
      for (int ic = 0; ic < icpg; ++ic) {
        const float* in_c = in_n + ic * plane;
        for (int ky = 0; ky < k; ++ky)
          for (int kx = 0; kx < k; ++kx) {
            float acc = 0.0f;
            for (int y = 0; y < xs.h; ++y) {
              const int sy = y + ky - pad;
              if (sy < 0 || sy >= xs.h) continue;
              const float* go_row = go_p + static_cast<std::size_t>(y) * xs.w;
              const float* in_row = in_c + static_cast<std::size_t>(sy) * xs.w;
              for (int xx = 0; xx < xs.w; ++xx) {
                const int sx = xx + kx - pad;
                if (sx < 0 || sx >= xs.w) continue;
                acc += go_row[xx] * in_row[sx];
              }
            }
            gw_o[(ic * k + ky) * k + kx] += acc;
          }
      }
    }
  });

  // grad_x: correlate grad_out with the kernel mirrored in both directions
  float* gx = g.x.data().data();
  parallel_for(0, static_cast<std::int64_t>(xs.n) * xs.c, [&](std::int64_t i) {
    const int n = static_cast<int>(i / xs.c);
    const int c = static_cast<int>(i % xs.c);
    const int grp = c / icpg;
    const int ic = c % icpg;
    float* gx_p = gx + (static_cast<std::size_t>(n) * xs.c + c) * plane;
    for (int o = grp * ocpg; o < (grp + 1) * ocpg; ++o) {
      const float* go_p =
          go + (static_cast<std::size_t>(n) * out_c + o) * plane;
      const float* w_oc =
          wt + (static_cast<std::size_t>(o) * icpg + ic) * k * k;
      for (int y = 0; y < xs.h; ++y)
        for (int xx = 0; xx < xs.w; ++xx) {
          float acc = 0.0f;
          for (int ky = 0; ky < k; ++ky) {
            const int oy = y - ky + pad; // output pixel this tap fed
            if (oy < 0 || oy >= xs.h) continue;
            for (int kx = 0; kx < k; ++kx) {
              const int ox = xx - kx + pad;
              if (ox < 0 || ox >= xs.w) continue;
              acc += go_p[static_cast<std::size_t>(oy) * xs.w + ox] *
                     w_oc[ky * k + kx];
            }
          }
          gx_p[static_cast<std::size_t>(y) * xs.w + xx] += acc;
        }
    }
  });
  return g;
}

inline Tensor leaky_relu(const Tensor& x, float slope) {
  if (!(slope > 0.0f && slope < 1.0f))
    throw ShapeError("leaky_relu: slope must lie in (0,1)");
  Tensor out(x.shape());
  auto xv = x.data();
  auto ov = out.data();
  for (std::size_t i = 0; i < ov.size(); ++i)
    ov[i] = xv[i] >= 0.0f ? xv[i] : slope * xv[i];
  require_finite(out, "leaky_relu");
  return out;
}

/// Sign of exactly 0 takes the positive branch.
inline Tensor leaky_relu_backward(const Tensor& x, float slope,
                                  const Tensor& grad_out) {
  if (!(x.shape() == grad_out.shape()))
    throw ShapeError("leaky_relu_backward: shape mismatch");
  Tensor out(x.shape());
  auto xv = x.data();
  auto gv = grad_out.data();
  auto ov = out.data();
  for (std::size_t i = 0; i < ov.size(); ++i)
    ov[i] = xv[i] >= 0.0f ? gv[i] : slope * gv[i];
  return out;
}

inline Tensor relu(const Tensor& x) {
  Tensor out(x.shape());
  auto xv = x.data();
  auto ov = out.data();
  for (std::size_t i = 0; i < ov.size(); ++i)
    ov[i] = xv[i] > 0.0f ? xv[i] : 0.0f;
  require_finite(out, "relu");
  return out;
}

inline Tensor relu_backward(const Tensor& x, const Tensor& grad_out) {
  if (!(x.shape() == grad_out.shape()))
    throw ShapeError("relu_backward: shape mismatch");
  Tensor out(x.shape());
  auto xv = x.data();
  auto gv = grad_out.data();
  auto ov = out.data();
  for (std::size_t i = 0; i < ov.size(); ++i)
    ov[i] = xv[i] >= 0.0f ? gv[i] : 0.0f;
  return out;
}

/// Rearranges r*r channel groups into an r-times larger spatial grid:
/// output[n][c][h*r+i][w*r+j] = input[n][c*r*r + i*r + j][h][w].
inline Tensor depth_to_space(const Tensor& x, int r) {
  if (r < 1) throw ShapeError("depth_to_space: factor must be >= 1");
  const Shape& s = x.shape();
  if (s.c % (r * r) != 0)
    throw ShapeError("depth_to_space: " + std::to_string(s.c) +
                     " channels not divisible by r^2 = " +
                     std::to_string(r * r));
  Tensor out(Shape{s.n, s.c / (r * r), s.h * r, s.w * r});
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < out.shape().c; ++c)
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < r; ++j) {
          const int src_c = c * r * r + i * r + j;
          for (int y = 0; y < s.h; ++y)
            for (int xx = 0; xx < s.w; ++xx)
              out.at(n, c, y * r + i, xx * r + j) = x.at(n, src_c, y, xx);
        }
  return out;
}

/// Exact inverse of depth_to_space with the same factor.
inline Tensor space_to_depth(const Tensor& x, int r) {
  if (r < 1) throw ShapeError("space_to_depth: factor must be >= 1");
  const Shape& s = x.shape();
  if (s.h % r != 0 || s.w % r != 0)
    throw ShapeError("space_to_depth: spatial extents not divisible by r");
  Tensor out(Shape{s.n, s.c * r * r, s.h / r, s.w / r});
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c)
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < r; ++j) {
          const int dst_c = c * r * r + i * r + j;
          for (int y = 0; y < out.shape().h; ++y)
            for (int xx = 0; xx < out.shape().w; ++xx)
              out.at(n, dst_c, y, xx) = x.at(n, c, y * r + i, xx * r + j);
        }
  return out;
}

inline Tensor depth_to_space_backward(const Tensor& grad_out, int r) {
  return space_to_depth(grad_out, r);
}

/// Numerically stable softmax over a flat vector.
inline std::vector<float> softmax(std::span<const float> v) {
  if (v.empty()) return {};
  float mx = v[0];
  for (const float x : v) {
    if (!std::isfinite(x)) throw NumericError("softmax: non-finite input");
    mx = std::max(mx, x);
  }
  std::vector<float> out(v.size());
  float denom = 0.0f;
  for (std::size_t i = 0; i < v.size(); ++i) {
    out[i] = std::exp(v[i] - mx);
    denom += out[i];
  }
  for (float& x : out) x /= denom;
  return out;
}

inline Tensor zero_pad(const Tensor& x, int top, int bottom, int left,
                       int right) {
  if (top < 0 || bottom < 0 || left < 0 || right < 0)
    throw ShapeError("zero_pad: negative amount");
  const Shape& s = x.shape();
  Tensor out(Shape{s.n, s.c, s.h + top + bottom, s.w + left + right});
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c)
      for (int y = 0; y < s.h; ++y)
        for (int xx = 0; xx < s.w; ++xx)
          out.at(n, c, y + top, xx + left) = x.at(n, c, y, xx);
  return out;
}

inline Tensor zero_pad_backward(const Tensor& grad_out, int top, int bottom,
                                int left, int right) {
  const Shape& s = grad_out.shape();
  Tensor out(Shape{s.n, s.c, s.h - top - bottom, s.w - left - right});
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c)
      for (int y = 0; y < out.shape().h; ++y)
        for (int xx = 0; xx < out.shape().w; ++xx)
          out.at(n, c, y, xx) = grad_out.at(n, c, y + top, xx + left);
  return out;
}

/// Self-attention over non-overlapping spatial tiles, residual-added.
/// Within each tile of N positions: A[i][j] = softmax_j(x_i . x_j / sqrt(c))
/// on the raw features, values come from a 1x1 conv, the aggregate goes
/// through a second 1x1 conv, and the input is added back. Border tiles are
/// simply smaller, never padded.
struct NlaParams {
  ConvParams value; // 1x1, c -> c
  ConvParams out;   // 1x1, c -> c
  int tile = 16;
};

namespace detail {

struct TileRange {
  int y0, y1, x0, x1;
  int positions() const { return (y1 - y0) * (x1 - x0); }
};

inline std::vector<TileRange> spatial_tiles(int h, int w, int b) {
  std::vector<TileRange> tiles;
  for (int ty = 0; ty < h; ty += b)
    for (int tx = 0; tx < w; tx += b)
      tiles.push_back({ty, std::min(ty + b, h), tx, std::min(tx + b, w)});
  return tiles;
}

// Row-stochastic affinity of one tile: A[i][j] = softmax_j(x_i . x_j / sqrt(c))
inline std::vector<float> tile_affinity(const Tensor& x, int n,
                                        const TileRange& t) {
  const int c = x.shape().c;
  const int np = t.positions();
  const float inv_sqrt_c = 1.0f / std::sqrt(static_cast<float>(c));
  std::vector<float> scores(static_cast<std::size_t>(np) * np);
  std::vector<std::size_t> pos;
  pos.reserve(np);
  for (int y = t.y0; y < t.y1; ++y)
    for (int xx = t.x0; xx < t.x1; ++xx)
      pos.push_back(x.index(n, 0, y, xx));
  const std::size_t plane =
      static_cast<std::size_t>(x.shape().h) * x.shape().w;
  const float* base = x.data().data();
  for (int i = 0; i < np; ++i)
    for (int j = 0; j < np; ++j) {
      float dot = 0.0f;
      for (int ch = 0; ch < c; ++ch)
        dot += base[pos[i] + ch * plane] * base[pos[j] + ch * plane];
      scores[static_cast<std::size_t>(i) * np + j] = dot * inv_sqrt_c;
    }
  std::vector<float> affinity(scores.size());
  for (int i = 0; i < np; ++i) {
    const auto row = softmax(std::span<const float>(
        scores.data() + static_cast<std::size_t>(i) * np, np));
    std::copy(row.begin(), row.end(),
              affinity.begin() + static_cast<std::size_t>(i) * np);
  }
  return affinity;
}

} // namespace detail

inline void nla_validate(const Tensor& x, const NlaParams& p) {
  const int c = x.shape().c;
  if (p.tile < 1) throw ShapeError("nla: tile size must be >= 1");
  if (p.value.kernel() != 1 || p.out.kernel() != 1)
    throw ShapeError("nla: transforms must be 1x1 convolutions");
  if (p.value.in_channels() != c || p.value.out_channels() != c ||
      p.out.in_channels() != c || p.out.out_channels() != c)
    throw ShapeError("nla: transform channel count must equal input's " +
                     std::to_string(c));
}

inline Tensor nonlocal_attention(const Tensor& x, const NlaParams& p) {
  nla_validate(x, p);
  const Shape& s = x.shape();
  const Tensor v = conv2d(x, p.value);
  Tensor agg(s);
  const std::size_t plane = static_cast<std::size_t>(s.h) * s.w;
  const auto tiles = detail::spatial_tiles(s.h, s.w, p.tile);
  for (int n = 0; n < s.n; ++n) {
    for (const auto& t : tiles) {
      const auto affinity = detail::tile_affinity(x, n, t);
      const int np = t.positions();
      std::vector<std::size_t> pos;
      pos.reserve(np);
      for (int y = t.y0; y < t.y1; ++y)
        for (int xx = t.x0; xx < t.x1; ++xx) pos.push_back(v.index(n, 0, y, xx));
      const float* vb = v.data().data();
      float* ab = agg.data().data();
      for (int i = 0; i < np; ++i)
        for (int ch = 0; ch < s.c; ++ch) {
          float acc = 0.0f;
          const float* arow = affinity.data() + static_cast<std::size_t>(i) * np;
          for (int j = 0; j < np; ++j)
            acc += arow[j] * vb[pos[j] + ch * plane];
          ab[pos[i] + ch * plane] = acc;
        }
    }
  }
  Tensor out = add(conv2d(agg, p.out), x);
  require_finite(out, "nonlocal_attention");
  return out;
}

struct NlaGrads {
  Tensor x;
  ConvGrads value;
  ConvGrads out;
};

inline NlaGrads nonlocal_attention_backward(const Tensor& x,
                                            const NlaParams& p,
                                            const Tensor& grad_out) {
  nla_validate(x, p);
  const Shape& s = x.shape();
  if (!(grad_out.shape() == s))
    throw ShapeError("nla backward: grad shape mismatch");

  // recompute forward intermediates
  const Tensor v = conv2d(x, p.value);
  Tensor agg(s);
  const std::size_t plane = static_cast<std::size_t>(s.h) * s.w;
  const auto tiles = detail::spatial_tiles(s.h, s.w, p.tile);
  std::vector<std::vector<float>> affinities(
      static_cast<std::size_t>(s.n) * tiles.size());
  for (int n = 0; n < s.n; ++n)
    for (std::size_t ti = 0; ti < tiles.size(); ++ti) {
      const auto& t = tiles[ti];
      auto affinity = detail::tile_affinity(x, n, t);
      const int np = t.positions();
      std::vector<std::size_t> pos;
      pos.reserve(np);
      for (int y = t.y0; y < t.y1; ++y)
        for (int xx = t.x0; xx < t.x1; ++xx) pos.push_back(v.index(n, 0, y, xx));
      const float* vb = v.data().data();
      float* ab = agg.data().data();
      for (int i = 0; i < np; ++i)
        for (int ch = 0; ch < s.c; ++ch) {
          float acc = 0.0f;
          const float* arow = affinity.data() + static_cast<std::size_t>(i) * np;
          for (int j = 0; j < np; ++j)
            acc += arow[j] * vb[pos[j] + ch * plane];
          ab[pos[i] + ch * plane] = acc;
        }
      affinities[n * tiles.size() + ti] = std::move(affinity);
    }

  NlaGrads g;
  // residual branch
  g.x = grad_out;
  // output transform
  g.out = conv2d_backward(agg, p.out, grad_out);
  const Tensor& g_agg = g.out.x;

  // attention aggregation: g_affinity[i][j] = g_agg_i . v_j ;
  // g_v_j += sum_i A[i][j] g_agg_i ; then softmax and score rules.
  Tensor g_v = Tensor::zeros(s);
  const float inv_sqrt_c = 1.0f / std::sqrt(static_cast<float>(s.c));
  for (int n = 0; n < s.n; ++n)
    for (std::size_t ti = 0; ti < tiles.size(); ++ti) {
      const auto& t = tiles[ti];
      const auto& affinity = affinities[n * tiles.size() + ti];
      const int np = t.positions();
      std::vector<std::size_t> pos;
      pos.reserve(np);
      for (int y = t.y0; y < t.y1; ++y)
        for (int xx = t.x0; xx < t.x1; ++xx) pos.push_back(x.index(n, 0, y, xx));
      const float* vb = v.data().data();
      const float* gab = g_agg.data().data();
      const float* xb = x.data().data();
      float* gvb = g_v.data().data();
      float* gxb = g.x.data().data();

      std::vector<float> g_aff(static_cast<std::size_t>(np) * np);
      for (int i = 0; i < np; ++i)
        for (int j = 0; j < np; ++j) {
          float dot = 0.0f;
          for (int ch = 0; ch < s.c; ++ch)
            dot += gab[pos[i] + ch * plane] * vb[pos[j] + ch * plane];
          g_aff[static_cast<std::size_t>(i) * np + j] = dot;
        }
      for (int j = 0; j < np; ++j)
        for (int ch = 0; ch < s.c; ++ch) {
          float acc = 0.0f;
          for (int i = 0; i < np; ++i)
            acc += affinity[static_cast<std::size_t>(i) * np + j] *
                   gab[pos[i] + ch * plane];
          gvb[pos[j] + ch * plane] += acc;
        }
      // softmax rows: g_score[i][j] = A[i][j] (g_aff[i][j] - sum_k A[i][k] g_aff[i][k])
      std::vector<float> g_score(static_cast<std::size_t>(np) * np);
      for (int i = 0; i < np; ++i) {
        const float* arow = affinity.data() + static_cast<std::size_t>(i) * np;
        const float* grow = g_aff.data() + static_cast<std::size_t>(i) * np;
        float inner = 0.0f;
        for (int k2 = 0; k2 < np; ++k2) inner += arow[k2] * grow[k2];
        float* srow = g_score.data() + static_cast<std::size_t>(i) * np;
        for (int j = 0; j < np; ++j) srow[j] = arow[j] * (grow[j] - inner);
      }
      // scores s_ij = x_i . x_j / sqrt(c)
      for (int i = 0; i < np; ++i)
        for (int j = 0; j < np; ++j) {
          const float gs =
              g_score[static_cast<std::size_t>(i) * np + j] * inv_sqrt_c;
          if (gs == 0.0f) continue;
          for (int ch = 0; ch < s.c; ++ch) {
            gxb[pos[i] + ch * plane] += gs * xb[pos[j] + ch * plane];
            gxb[pos[j] + ch * plane] += gs * xb[pos[i] + ch * plane];
          }
        }
    }

  // value transform
  g.value = conv2d_backward(x, p.value, g_v);
  detail::accumulate(g.x, g.value.x);
  return g;
}

} // namespace gidnet
