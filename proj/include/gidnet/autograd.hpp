#pragma once

#include <functional>
#include <optional>
#include <utility>
#include <vector>

#include "gidnet/nn_ops.hpp"
#include "gidnet/tensor.hpp"

namespace gidnet {

/// Reverse-mode tape. Forward wrappers append one record per produced value;
/// backward() walks the records in reverse and accumulates exactly one
/// gradient contribution per use of each value.
class Tape {
public:
  using Id = int;

  Tape() = default;
  Tape(const Tape&) = delete;            // nodes capture `this`
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = delete;
  Tape& operator=(Tape&&) = delete;

  Id input(Tensor value) {
    values_.push_back(std::move(value));
    nodes_.push_back({});
    grads_.emplace_back();
    return static_cast<Id>(values_.size() - 1);
  }

  const Tensor& value(Id id) const { return values_[static_cast<size_t>(id)]; }

  bool has_grad(Id id) const {
    return grads_[static_cast<std::size_t>(id)].has_value();
  }

  /// Accumulated gradient; zeros when the value never influenced the root.
  Tensor grad(Id id) const {
    const auto& g = grads_[static_cast<std::size_t>(id)];
    return g ? *g : Tensor::zeros(value(id).shape());
  }

  /// Seeds d(root)=cotangent and propagates to every recorded value.
  void backward(Id root, Tensor cotangent) {
    if (!(cotangent.shape() == value(root).shape()))
      throw ShapeError("backward: cotangent shape mismatch");
    for (auto& g : grads_) g.reset();
    grads_[static_cast<std::size_t>(root)] = std::move(cotangent);
    for (Id id = root; id >= 0; --id) {
      const auto& node = nodes_[static_cast<std::size_t>(id)];
      if (!node.backward || !grads_[static_cast<std::size_t>(id)]) continue;
      const auto contributions =
          node.backward(*grads_[static_cast<std::size_t>(id)]);
      for (std::size_t k = 0; k < node.inputs.size(); ++k)
        accumulate_grad(node.inputs[k], contributions[k]);
    }
  }

  /// Records an op: output value, the ids it consumed, and a function mapping
  /// the output gradient to per-input gradients (aligned with `inputs`).
  Id record(Tensor out, std::vector<Id> inputs,
            std::function<std::vector<Tensor>(const Tensor&)> backward) {
    values_.push_back(std::move(out));
    nodes_.push_back({std::move(inputs), std::move(backward)});
    grads_.emplace_back();
    return static_cast<Id>(values_.size() - 1);
  }

  std::size_t size() const { return values_.size(); }

private:
  struct Node {
    std::vector<Id> inputs;
    std::function<std::vector<Tensor>(const Tensor&)> backward;
  };

  void accumulate_grad(Id id, const Tensor& g) {
    auto& slot = grads_[static_cast<std::size_t>(id)];
    if (!slot)
      slot = g;
    else
      detail::accumulate(*slot, g);
  }

  std::vector<Tensor> values_;
  std::vector<Node> nodes_;
  std::vector<std::optional<Tensor>> grads_;
};

namespace taped {

/// Bias vectors ride the tape as (1, c, 1, 1) tensors.
inline Tensor bias_to_tensor(std::span<const float> bias) {
  Tensor t(Shape{1, static_cast<int>(bias.size()), 1, 1});
  std::copy(bias.begin(), bias.end(), t.data().begin());
  return t;
}

inline std::vector<float> tensor_to_bias(const Tensor& t) {
  return {t.data().begin(), t.data().end()};
}

inline ConvParams assemble_conv(const Tape& tape, Tape::Id w, Tape::Id b,
                                int groups, int padding) {
  return ConvParams{tape.value(w), tensor_to_bias(tape.value(b)), groups,
                    padding};
}

inline Tape::Id conv2d(Tape& tape, Tape::Id x, Tape::Id w, Tape::Id b,
                       int groups, int padding) {
  Tensor out =
      gidnet::conv2d(tape.value(x), assemble_conv(tape, w, b, groups, padding));
  return tape.record(std::move(out), {x, w, b},
                     [&tape, x, w, b, groups, padding](const Tensor& gout) {
                       const ConvParams p =
                           assemble_conv(tape, w, b, groups, padding);
                       ConvGrads g = conv2d_backward(tape.value(x), p, gout);
                       return std::vector<Tensor>{std::move(g.x),
                                                  std::move(g.weight),
                                                  bias_to_tensor(g.bias)};
                     });
}

inline Tape::Id leaky_relu(Tape& tape, Tape::Id x, float slope) {
  Tensor out = gidnet::leaky_relu(tape.value(x), slope);
  return tape.record(std::move(out), {x}, [&tape, x, slope](const Tensor& g) {
    return std::vector<Tensor>{
        leaky_relu_backward(tape.value(x), slope, g)};
  });
}

inline Tape::Id relu(Tape& tape, Tape::Id x) {
  Tensor out = gidnet::relu(tape.value(x));
  return tape.record(std::move(out), {x}, [&tape, x](const Tensor& g) {
    return std::vector<Tensor>{relu_backward(tape.value(x), g)};
  });
}

inline Tape::Id depth_to_space(Tape& tape, Tape::Id x, int r) {
  Tensor out = gidnet::depth_to_space(tape.value(x), r);
  return tape.record(std::move(out), {x}, [r](const Tensor& g) {
    return std::vector<Tensor>{space_to_depth(g, r)};
  });
}

inline Tape::Id zero_pad(Tape& tape, Tape::Id x, int top, int bottom,
                         int left, int right) {
  Tensor out = gidnet::zero_pad(tape.value(x), top, bottom, left, right);
  return tape.record(std::move(out), {x},
                     [top, bottom, left, right](const Tensor& g) {
                       return std::vector<Tensor>{
                           zero_pad_backward(g, top, bottom, left, right)};
                     });
}

inline Tape::Id add(Tape& tape, Tape::Id a, Tape::Id b) {
  Tensor out = gidnet::add(tape.value(a), tape.value(b));
  return tape.record(std::move(out), {a, b}, [](const Tensor& g) {
    return std::vector<Tensor>{g, g};
  });
}

inline std::pair<Tape::Id, Tape::Id> channel_split(Tape& tape, Tape::Id x,
                                                   int retained) {
  auto [head, tail] = gidnet::channel_split(tape.value(x), retained);
  const Shape xs = tape.value(x).shape();
  const Tape::Id head_id = tape.record(
      std::move(head), {x}, [xs, retained](const Tensor& g) {
        Tensor gx = Tensor::zeros(xs);
        for (int n = 0; n < xs.n; ++n)
          for (int c = 0; c < retained; ++c)
            for (int y = 0; y < xs.h; ++y)
              for (int xx = 0; xx < xs.w; ++xx)
                gx.at(n, c, y, xx) = g.at(n, c, y, xx);
        return std::vector<Tensor>{std::move(gx)};
      });
  const Tape::Id tail_id = tape.record(
      std::move(tail), {x}, [xs, retained](const Tensor& g) {
        Tensor gx = Tensor::zeros(xs);
        for (int n = 0; n < xs.n; ++n)
          for (int c = retained; c < xs.c; ++c)
            for (int y = 0; y < xs.h; ++y)
              for (int xx = 0; xx < xs.w; ++xx)
                gx.at(n, c, y, xx) = g.at(n, c - retained, y, xx);
        return std::vector<Tensor>{std::move(gx)};
      });
  return {head_id, tail_id};
}

inline Tape::Id channel_concat(Tape& tape, std::span<const Tape::Id> parts) {
  std::vector<const Tensor*> ptrs;
  std::vector<int> widths;
  ptrs.reserve(parts.size());
  for (const Tape::Id id : parts) {
    ptrs.push_back(&tape.value(id));
    widths.push_back(tape.value(id).shape().c);
  }
  Tensor out = gidnet::channel_concat(std::span<const Tensor* const>(ptrs));
  return tape.record(std::move(out),
                     std::vector<Tape::Id>(parts.begin(), parts.end()),
                     [widths](const Tensor& g) {
                       std::vector<Tensor> gs;
                       gs.reserve(widths.size());
                       int offset = 0;
                       const Shape& s = g.shape();
                       for (const int wc : widths) {
                         Tensor part(Shape{s.n, wc, s.h, s.w});
                         for (int n = 0; n < s.n; ++n)
                           for (int c = 0; c < wc; ++c)
                             for (int y = 0; y < s.h; ++y)
                               for (int xx = 0; xx < s.w; ++xx)
                                 part.at(n, c, y, xx) =
                                     g.at(n, offset + c, y, xx);
                         offset += wc;
                         gs.push_back(std::move(part));
                       }
                       return gs;
                     });
}

inline Tape::Id nonlocal_attention(Tape& tape, Tape::Id x, Tape::Id vw,
                                   Tape::Id vb, Tape::Id ow, Tape::Id ob,
                                   int tile) {
  NlaParams p{assemble_conv(tape, vw, vb, 1, 0),
              assemble_conv(tape, ow, ob, 1, 0), tile};
  Tensor out = gidnet::nonlocal_attention(tape.value(x), p);
  return tape.record(
      std::move(out), {x, vw, vb, ow, ob},
      [&tape, x, vw, vb, ow, ob, tile](const Tensor& gout) {
        NlaParams p2{assemble_conv(tape, vw, vb, 1, 0),
                     assemble_conv(tape, ow, ob, 1, 0), tile};
        NlaGrads g = nonlocal_attention_backward(tape.value(x), p2, gout);
        return std::vector<Tensor>{
            std::move(g.x), std::move(g.value.weight),
            bias_to_tensor(g.value.bias), std::move(g.out.weight),
            bias_to_tensor(g.out.bias)};
      });
}

} // namespace taped

/// Central finite-difference check of a backward rule.
///
/// forward: inputs -> output tensor. backward: (inputs, cotangent) ->
/// per-input gradients. The probe is sum(output * cotangent) accumulated in
/// double; the reported figure is the largest |analytic - numeric| relative
/// to the gradient's own scale.
struct GradCheckReport {
  double max_rel_err = 0.0;
  int checked = 0;
};

inline GradCheckReport grad_check(
    const std::function<Tensor(const std::vector<Tensor>&)>& forward,
    const std::function<std::vector<Tensor>(const std::vector<Tensor>&,
                                            const Tensor&)>& backward,
    std::vector<Tensor> inputs, float eps, std::uint64_t cotangent_seed) {
  const Tensor out0 = forward(inputs);
  Rng rng(cotangent_seed);
  Tensor cot(out0.shape());
  for (float& v : cot.data()) v = rng.uniform(-1.0f, 1.0f);

  const auto probe = [&](const std::vector<Tensor>& in) {
    const Tensor y = forward(in);
    double acc = 0.0;
    auto yv = y.data();
    auto cv = cot.data();
    for (std::size_t i = 0; i < yv.size(); ++i)
      acc += static_cast<double>(yv[i]) * static_cast<double>(cv[i]);
    return acc;
  };

  const auto analytic = backward(inputs, cot);

  double scale = 0.0;
  GradCheckReport report;
  std::vector<std::pair<std::size_t, std::size_t>> coords; // (input, element)
  for (std::size_t t = 0; t < inputs.size(); ++t)
    for (std::size_t e = 0; e < inputs[t].size(); ++e)
      coords.emplace_back(t, e);

  std::vector<double> numeric(coords.size());
  for (std::size_t k = 0; k < coords.size(); ++k) {
    auto [t, e] = coords[k];
    std::vector<Tensor> shifted = inputs;
    const float orig = shifted[t].data()[e];
    shifted[t].data()[e] = orig + eps;
    const double up = probe(shifted);
    shifted[t].data()[e] = orig - eps;
    const double down = probe(shifted);
    numeric[k] = (up - down) / (2.0 * static_cast<double>(eps));
    scale = std::max({scale, std::abs(numeric[k]),
                      std::abs(static_cast<double>(analytic[t].data()[e]))});
  }
  if (scale < 1e-6) scale = 1e-6;
  for (std::size_t k = 0; k < coords.size(); ++k) {
    auto [t, e] = coords[k];
    const double diff =
        std::abs(static_cast<double>(analytic[t].data()[e]) - numeric[k]);
    report.max_rel_err = std::max(report.max_rel_err, diff / scale);
    ++report.checked;
  }
  return report;
}

} // namespace gidnet
