#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <utility>
#include <span>
#include <string>
#include <vector>

#include "gidnet/common.hpp"

namespace gidnet {

/// Extents of a rank-4 tensor in batch/channel/height/width order.
struct Shape {
  int n = 0;
  int c = 0;
  int h = 0;
  int w = 0;

  bool operator==(const Shape&) const = default;

  std::size_t elements() const {
    validate();
    return static_cast<std::size_t>(n) * static_cast<std::size_t>(c) *
           static_cast<std::size_t>(h) * static_cast<std::size_t>(w);
  }

  void validate() const {
    if (n < 1 || c < 1 || h < 1 || w < 1)
      throw ShapeError("shape extents must be positive, got " + str());
    // element count must fit the addressable range
    const std::size_t max = std::numeric_limits<std::size_t>::max();
    std::size_t e = static_cast<std::size_t>(n);
    for (const std::size_t d : {static_cast<std::size_t>(c),
                                static_cast<std::size_t>(h),
                                static_cast<std::size_t>(w)}) {
      if (e > max / d) throw ShapeError("shape extent overflow: " + str());
      e *= d;
    }
  }

  std::string str() const {
    return "(" + std::to_string(n) + "," + std::to_string(c) + "," +
           std::to_string(h) + "," + std::to_string(w) + ")";
  }
};

/// Dense rank-4 float32 tensor. Element (n,c,h,w) lives at flat index
/// ((n*C + c)*H + h)*W + w. Treated as immutable once an operator returns it.
class Tensor {
public:
  Tensor() = default;

  explicit Tensor(const Shape& s) : shape_(s), data_(s.elements(), 0.0f) {}

  Tensor(const Shape& s, std::vector<float> values)
      : shape_(s), data_(std::move(values)) {
    if (data_.size() != shape_.elements())
      throw ShapeError("data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_.str());
  }

  static Tensor full(const Shape& s, float value) {
    Tensor t(s);
    for (float& v : t.data_) v = value;
    return t;
  }

  static Tensor zeros(const Shape& s) { return Tensor(s); }

  const Shape& shape() const { return shape_; }
  bool empty() const { return data_.empty(); }
  std::size_t size() const { return data_.size(); }

  std::span<const float> data() const { return data_; }
  std::span<float> data() { return data_; }

  std::size_t index(int n, int c, int h, int w) const {
    return ((static_cast<std::size_t>(n) * shape_.c + c) * shape_.h + h) *
               shape_.w +
           w;
  }

  float at(int n, int c, int h, int w) const {
    return data_[index(n, c, h, w)];
  }
  float& at(int n, int c, int h, int w) { return data_[index(n, c, h, w)]; }

  bool all_finite() const {
    for (const float v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

private:
  Shape shape_;
  std::vector<float> data_;
};

inline void require_finite(const Tensor& t, std::string_view what) {
  if (!t.all_finite())
    throw NumericError(std::string(what) + ": non-finite value in output");
}

/// First `retained` channels, remaining channels. Concatenating the pair in
/// order reconstructs the input bit-exactly.
inline std::pair<Tensor, Tensor> channel_split(const Tensor& t, int retained) {
  const Shape& s = t.shape();
  if (retained <= 0 || retained >= s.c)
    throw ShapeError("channel_split: retained count " +
                     std::to_string(retained) + " out of range for " +
                     std::to_string(s.c) + " channels");
  Tensor head(Shape{s.n, retained, s.h, s.w});
  Tensor tail(Shape{s.n, s.c - retained, s.h, s.w});
  const std::size_t plane = static_cast<std::size_t>(s.h) * s.w;
  for (int n = 0; n < s.n; ++n) {
    const float* src = t.data().data() + t.index(n, 0, 0, 0);
    float* dh = head.data().data() + head.index(n, 0, 0, 0);
    float* dt = tail.data().data() + tail.index(n, 0, 0, 0);
    std::copy(src, src + retained * plane, dh);
    std::copy(src + retained * plane, src + s.c * plane, dt);
  }
  return {std::move(head), std::move(tail)};
}

inline Tensor channel_concat(std::span<const Tensor* const> parts) {
  if (parts.empty()) throw ShapeError("channel_concat: empty part list");
  const Shape& first = parts.front()->shape();
  int channels = 0;
  for (const Tensor* p : parts) {
    const Shape& s = p->shape();
    if (s.n != first.n || s.h != first.h || s.w != first.w)
      throw ShapeError("channel_concat: part shape " + s.str() +
                       " disagrees with " + first.str() +
                       " on batch or spatial extents");
    channels += s.c;
  }
  Tensor out(Shape{first.n, channels, first.h, first.w});
  const std::size_t plane = static_cast<std::size_t>(first.h) * first.w;
  for (int n = 0; n < first.n; ++n) {
    float* dst = out.data().data() + out.index(n, 0, 0, 0);
    for (const Tensor* p : parts) {
      const float* src = p->data().data() + p->index(n, 0, 0, 0);
      const std::size_t len = static_cast<std::size_t>(p->shape().c) * plane;
      std::copy(src, src + len, dst);
      dst += len;
    }
  }
  return out;
}

inline Tensor channel_concat(std::span<const Tensor> parts) {
  std::vector<const Tensor*> ptrs;
  ptrs.reserve(parts.size());
  for (const Tensor& p : parts) ptrs.push_back(&p);
  return channel_concat(std::span<const Tensor* const>(ptrs));
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  if (!(a.shape() == b.shape()))
    throw ShapeError("add: shape mismatch " + a.shape().str() + " vs " +
                     b.shape().str());
  Tensor out(a.shape());
  auto av = a.data(), bv = b.data();
  auto ov = out.data();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
  require_finite(out, "add");
  return out;
}

namespace detail {

// internal helpers, not part of the op surface
inline Tensor scale(const Tensor& a, float k) {
  Tensor out(a.shape());
  auto av = a.data();
  auto ov = out.data();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * k;
  return out;
}

inline void accumulate(Tensor& into, const Tensor& from) {
  auto iv = into.data();
  auto fv = from.data();
  for (std::size_t i = 0; i < iv.size(); ++i) iv[i] += fv[i];
}

} // namespace detail

} // namespace gidnet
