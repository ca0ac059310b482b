#pragma once

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "gidnet/autograd.hpp"
#include "gidnet/common.hpp"
#include "gidnet/nn_ops.hpp"
#include "gidnet/tensor.hpp"

namespace gidnet {

/// The architecture is fully determined by these knobs. `core` sets every
/// width: trunk 4*core, distilled slice core, continuing (coarse) stream
/// 3*core. The reconstruction tail is fixed at 64 channels for every core.
struct ModelConfig {
  int core = 16;
  bool use_nla = false;
  int scale = 4;
  int nla_tile = 16;
  int in_channels = 3;

  int trunk_width() const { return 4 * core; }   // block output width
  int distill_width() const { return core; }     // retained slice
  int coarse_width() const { return 3 * core; }  // continuing stream

  void validate() const {
    if (core < 4 || core % 4 != 0)
      throw ShapeError("core must be a positive multiple of 4, got " +
                       std::to_string(core));
    if (scale < 1) throw ShapeError("scale must be >= 1");
    if (nla_tile < 1) throw ShapeError("nla tile must be >= 1");
    if (in_channels != 3) throw ShapeError("input must be 3-channel RGB");
  }
};

/// Structural description of one convolution; pure function of ModelConfig.
struct LayerSpec {
  std::string name;
  int in_c = 0;
  int out_c = 0;
  int k = 1;
  int groups = 1;
  bool attention_internal = false;

  std::int64_t param_count() const {
    return static_cast<std::int64_t>(out_c) * (in_c / groups) * k * k + out_c;
  }
};

inline std::vector<LayerSpec> layer_plan(const ModelConfig& cfg) {
  cfg.validate();
  const int C = cfg.trunk_width(), D = cfg.distill_width(),
            R = cfg.coarse_width();
  std::vector<LayerSpec> plan;
  plan.push_back({"head", cfg.in_channels, C, 3, 1});

  const auto group_unit = [&](const std::string& prefix, int in, int out) {
    plan.push_back({prefix + ".grouped", in, out, 3, 4});
    plan.push_back({prefix + ".pointwise", out, out, 1, 1});
  };
  for (int i = 1; i <= 6; ++i) {
    const std::string b = "block" + std::to_string(i);
    const int block_in = (i == 1) ? C : R;
    group_unit(b + ".unit1", block_in, C);
    group_unit(b + ".unit2", R, C);
    group_unit(b + ".unit3", R, C);
    group_unit(b + ".unit4", R, D);
    plan.push_back({b + ".fuse", 4 * D + block_in, C, 1, 1});
    if (cfg.use_nla && (i == 2 || i == 4)) {
      const std::string a = "attn" + std::to_string(i);
      plan.push_back({a + ".value", R, R, 1, 1, true});
      plan.push_back({a + ".out", R, R, 1, 1, true});
    }
  }
  plan.push_back({"tail.fuse", 9 * cfg.core, 64, 1, 1});
  plan.push_back({"tail.conv", 64, 64, 3, 1});
  plan.push_back({"upsample", 64, 3 * cfg.scale * cfg.scale, 1, 1});
  return plan;
}

struct ConvLayer {
  LayerSpec spec;
  ConvParams params;
};

struct Model {
  ModelConfig config;
  std::vector<ConvLayer> layers; // layer_plan order

  int find(std::string_view name) const {
    for (std::size_t i = 0; i < layers.size(); ++i)
      if (layers[i].spec.name == name) return static_cast<int>(i);
    return -1;
  }

  const ConvLayer& layer(std::string_view name) const {
    const int i = find(name);
    if (i < 0) throw ShapeError("no layer named " + std::string(name));
    return layers[static_cast<std::size_t>(i)];
  }

  std::int64_t parameter_count() const {
    std::int64_t total = 0;
    for (const auto& l : layers)
      total += static_cast<std::int64_t>(l.params.weight.size()) +
               static_cast<std::int64_t>(l.params.bias.size());
    return total;
  }
};

/// Fan-in scaled uniform init with the gain for leaky slope 0.05; biases are
/// zero. Each tensor draws from a stream keyed by (seed, layer name), so the
/// result does not depend on build order.
inline Model build_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Model m;
  m.config = cfg;
  constexpr float kLeakySlope = 0.05f;
  const float gain = std::sqrt(2.0f / (1.0f + kLeakySlope * kLeakySlope));
  for (const LayerSpec& spec : layer_plan(cfg)) {
    const int icpg = spec.in_c / spec.groups;
    Tensor w(Shape{spec.out_c, icpg, spec.k, spec.k});
    const float fan_in = static_cast<float>(icpg * spec.k * spec.k);
    const float bound = gain * std::sqrt(3.0f / fan_in);
    Rng rng = Rng::keyed(seed, spec.name);
    for (float& v : w.data()) v = rng.uniform(-bound, bound);
    ConvLayer layer{spec,
                    ConvParams{std::move(w),
                               std::vector<float>(spec.out_c, 0.0f),
                               spec.groups, (spec.k - 1) / 2}};
    m.layers.push_back(std::move(layer));
  }
  return m;
}

namespace detail {

inline Tensor run_conv(const ConvLayer& l, const Tensor& x) {
  try {
    return conv2d(x, l.params);
  } catch (const NumericError& e) {
    throw NumericError(l.spec.name + ": " + e.what());
  }
}

constexpr float kSlope = 0.05f;

// grouped 3x3 + ReLU + 1x1 + LeakyReLU
inline Tensor group_unit_forward(const Model& m, const std::string& prefix,
                                 const Tensor& x) {
  const Tensor a = relu(run_conv(m.layer(prefix + ".grouped"), x));
  return leaky_relu(run_conv(m.layer(prefix + ".pointwise"), a), kSlope);
}

} // namespace detail

/// One distilling block: four group units with progressive channel
/// splitting, then a 1x1 fusion over the retained slices and the block input.
inline Tensor distill_block_forward(const Model& m, int index,
                                    const Tensor& x) {
  const std::string b = "block" + std::to_string(index);
  const int D = m.config.distill_width();
  const Tensor u1 = detail::group_unit_forward(m, b + ".unit1", x);
  auto [s1, d1] = channel_split(u1, D);
  const Tensor u2 = detail::group_unit_forward(m, b + ".unit2", d1);
  auto [s2, d2] = channel_split(u2, D);
  const Tensor u3 = detail::group_unit_forward(m, b + ".unit3", d2);
  auto [s3, d3] = channel_split(u3, D);
  const Tensor s4 = detail::group_unit_forward(m, b + ".unit4", d3);
  const std::vector<const Tensor*> parts{&s1, &s2, &s3, &s4, &x};
  const Tensor fused = channel_concat(std::span<const Tensor* const>(parts));
  return leaky_relu(detail::run_conv(m.layer(b + ".fuse"), fused),
                    detail::kSlope);
}

inline NlaParams attention_params(const Model& m, int block_index) {
  const std::string a = "attn" + std::to_string(block_index);
  return NlaParams{m.layer(a + ".value").params, m.layer(a + ".out").params,
                   m.config.nla_tile};
}

/// Full network: head conv, six distilling blocks under global progressive
/// splitting (attention on the continuing stream after blocks 2 and 4 when
/// enabled), concat of the retained slices, 1x1+3x3 tail, 1x1 to 3*s^2
/// channels, depth-to-space. The long residual from the head applies only
/// when the trunk is 64 channels wide (core 16).
inline Tensor model_forward(const Model& m, const Tensor& lr) {
  if (lr.shape().c != m.config.in_channels)
    throw ShapeError("model_forward: expected " +
                     std::to_string(m.config.in_channels) +
                     "-channel input, got " + std::to_string(lr.shape().c));
  const int D = m.config.distill_width();
  const Tensor f0 = detail::run_conv(m.layer("head"), lr);

  std::vector<Tensor> slices;
  slices.reserve(6);
  Tensor d = f0;
  for (int i = 1; i <= 5; ++i) {
    const Tensor block_out = distill_block_forward(m, i, d);
    auto [s, rest] = channel_split(block_out, D);
    slices.push_back(std::move(s));
    d = std::move(rest);
    if (m.config.use_nla && (i == 2 || i == 4)) {
      try {
        d = nonlocal_attention(d, attention_params(m, i));
      } catch (const NumericError& e) {
        throw NumericError("attn" + std::to_string(i) + ": " + e.what());
      }
    }
  }
  slices.push_back(distill_block_forward(m, 6, d));

  std::vector<const Tensor*> parts;
  for (const Tensor& s : slices) parts.push_back(&s);
  const Tensor f7 = channel_concat(std::span<const Tensor* const>(parts));
  const Tensor f8 =
      leaky_relu(detail::run_conv(m.layer("tail.fuse"), f7), detail::kSlope);
  Tensor f9 =
      leaky_relu(detail::run_conv(m.layer("tail.conv"), f8), detail::kSlope);
  if (m.config.trunk_width() == 64) f9 = add(f9, f0);
  const Tensor up = detail::run_conv(m.layer("upsample"), f9);
  return depth_to_space(up, m.config.scale);
}

// ---------------------------------------------------------------------------
// taped forward for training
// ---------------------------------------------------------------------------

struct TapedForward {
  Tape::Id output = -1;
  // (weight id, bias id) per layer, in model layer order
  std::vector<std::pair<Tape::Id, Tape::Id>> param_ids;
};

namespace detail {

struct TapedLayerTable {
  Tape& tape;
  const Model& model;
  std::vector<std::pair<Tape::Id, Tape::Id>> ids;

  TapedLayerTable(Tape& t, const Model& m) : tape(t), model(m) {
    ids.reserve(m.layers.size());
    for (const auto& l : m.layers)
      ids.emplace_back(tape.input(l.params.weight),
                       tape.input(taped::bias_to_tensor(l.params.bias)));
  }

  Tape::Id conv(std::string_view name, Tape::Id x) const {
    const int i = model.find(name);
    const auto& l = model.layers[static_cast<std::size_t>(i)];
    return taped::conv2d(tape, x, ids[static_cast<std::size_t>(i)].first,
                         ids[static_cast<std::size_t>(i)].second,
                         l.params.groups, l.params.padding);
  }
};

inline Tape::Id taped_group_unit(TapedLayerTable& t, const std::string& prefix,
                                 Tape::Id x) {
  const Tape::Id a = taped::relu(t.tape, t.conv(prefix + ".grouped", x));
  return taped::leaky_relu(t.tape, t.conv(prefix + ".pointwise", a), kSlope);
}

inline Tape::Id taped_distill_block(TapedLayerTable& t, int index,
                                    Tape::Id x) {
  const std::string b = "block" + std::to_string(index);
  const int D = t.model.config.distill_width();
  const Tape::Id u1 = taped_group_unit(t, b + ".unit1", x);
  auto [s1, d1] = taped::channel_split(t.tape, u1, D);
  const Tape::Id u2 = taped_group_unit(t, b + ".unit2", d1);
  auto [s2, d2] = taped::channel_split(t.tape, u2, D);
  const Tape::Id u3 = taped_group_unit(t, b + ".unit3", d2);
  auto [s3, d3] = taped::channel_split(t.tape, u3, D);
  const Tape::Id s4 = taped_group_unit(t, b + ".unit4", d3);
  const std::vector<Tape::Id> parts{s1, s2, s3, s4, x};
  const Tape::Id fused =
      taped::channel_concat(t.tape, std::span<const Tape::Id>(parts));
  return taped::leaky_relu(t.tape, t.conv(b + ".fuse", fused), kSlope);
}

} // namespace detail

inline TapedForward model_forward_taped(Tape& tape, const Model& m,
                                        const Tensor& lr) {
  detail::TapedLayerTable table(tape, m);
  const int D = m.config.distill_width();
  const Tape::Id f0 = table.conv("head", tape.input(lr));

  std::vector<Tape::Id> slices;
  Tape::Id d = f0;
  for (int i = 1; i <= 5; ++i) {
    const Tape::Id block_out = detail::taped_distill_block(table, i, d);
    auto [s, rest] = taped::channel_split(tape, block_out, D);
    slices.push_back(s);
    d = rest;
    if (m.config.use_nla && (i == 2 || i == 4)) {
      const std::string a = "attn" + std::to_string(i);
      const int vi = m.find(a + ".value");
      const int oi = m.find(a + ".out");
      d = taped::nonlocal_attention(
          tape, d, table.ids[static_cast<std::size_t>(vi)].first,
          table.ids[static_cast<std::size_t>(vi)].second,
          table.ids[static_cast<std::size_t>(oi)].first,
          table.ids[static_cast<std::size_t>(oi)].second, m.config.nla_tile);
    }
  }
  slices.push_back(detail::taped_distill_block(table, 6, d));

  const Tape::Id f7 =
      taped::channel_concat(tape, std::span<const Tape::Id>(slices));
  const Tape::Id f8 =
      taped::leaky_relu(tape, table.conv("tail.fuse", f7), detail::kSlope);
  Tape::Id f9 =
      taped::leaky_relu(tape, table.conv("tail.conv", f8), detail::kSlope);
  if (m.config.trunk_width() == 64) f9 = taped::add(tape, f9, f0);
  const Tape::Id up = table.conv("upsample", f9);

  TapedForward out;
  out.output = taped::depth_to_space(tape, up, m.config.scale);
  out.param_ids = std::move(table.ids);
  return out;
}

// ---------------------------------------------------------------------------
// weight archive: magic "GIDW", version u16, count u32, then per entry
// name_len u16 + name bytes, rank u8, dims u32 each, payload f32.
// All integers and floats little-endian.
// ---------------------------------------------------------------------------

namespace archive_detail {

constexpr char kMagic[4] = {'G', 'I', 'D', 'W'};
constexpr std::uint16_t kVersion = 1;

inline void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
}

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i)
    out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_f32(std::string& out, float f) {
  put_u32(out, std::bit_cast<std::uint32_t>(f));
}

class Reader {
public:
  Reader(std::string bytes, std::string origin)
      : bytes_(std::move(bytes)), origin_(std::move(origin)) {}

  std::uint8_t u8(const std::string& what) { return take(1, what)[0]; }

  std::uint16_t u16(const std::string& what) {
    const auto* p = take(2, what);
    return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
  }

  std::uint32_t u32(const std::string& what) {
    const auto* p = take(4, what);
    return static_cast<std::uint32_t>(p[0]) |
           (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) |
           (static_cast<std::uint32_t>(p[3]) << 24);
  }

  float f32(const std::string& what) {
    return std::bit_cast<float>(u32(what));
  }

  std::string str(std::size_t len, const std::string& what) {
    const auto* p = take(len, what);
    return std::string(reinterpret_cast<const char*>(p), len);
  }

  bool exhausted() const { return pos_ == bytes_.size(); }

private:
  const unsigned char* take(std::size_t len, const std::string& what) {
    if (bytes_.size() - pos_ < len)
      throw IoError(origin_ + ": truncated while reading " + what);
    const auto* p =
        reinterpret_cast<const unsigned char*>(bytes_.data()) + pos_;
    pos_ += len;
    return p;
  }

  std::string bytes_;
  std::string origin_;
  std::size_t pos_ = 0;
};

struct Entry {
  std::vector<std::uint32_t> dims;
  std::vector<float> values;
};

inline std::map<std::string, Entry> read_entries(
    const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)),
                    std::istreambuf_iterator<char>());
  Reader r(std::move(bytes), path.filename().string());

  const std::string magic = r.str(4, "magic");
  if (std::string_view(magic) != std::string_view(kMagic, 4))
    throw IoError(path.string() + ": bad magic, not a weight archive");
  const std::uint16_t version = r.u16("version");
  if (version != kVersion)
    throw IoError(path.string() + ": unsupported archive version " +
                  std::to_string(version));
  const std::uint32_t count = r.u32("entry count");

  std::map<std::string, Entry> entries;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint16_t name_len = r.u16("entry name length");
    const std::string name = r.str(name_len, "entry name");
    const std::string ctx = "entry '" + name + "'";
    Entry e;
    const std::uint8_t rank = r.u8(ctx + " rank");
    std::size_t total = 1;
    for (std::uint8_t dk = 0; dk < rank; ++dk) {
      e.dims.push_back(r.u32(ctx + " dims"));
      total *= e.dims.back();
    }
    e.values.resize(total);
    for (std::size_t v = 0; v < total; ++v)
      e.values[v] = r.f32(ctx + " payload");
    if (entries.count(name))
      throw IoError(path.string() + ": duplicate entry '" + name + "'");
    entries.emplace(name, std::move(e));
  }
  if (!r.exhausted())
    throw IoError(path.string() + ": trailing bytes after last entry");
  return entries;
}

} // namespace archive_detail

inline void save_weights(const Model& m, const std::filesystem::path& path) {
  using namespace archive_detail;
  std::string out;
  out.append(kMagic, 4);
  put_u16(out, kVersion);
  put_u32(out, static_cast<std::uint32_t>(m.layers.size() * 2));
  const auto put_entry = [&](const std::string& name,
                             std::span<const std::uint32_t> dims,
                             std::span<const float> values) {
    put_u16(out, static_cast<std::uint16_t>(name.size()));
    out.append(name);
    out.push_back(static_cast<char>(dims.size()));
    for (const std::uint32_t d : dims) put_u32(out, d);
    for (const float v : values) put_f32(out, v);
  };
  for (const auto& l : m.layers) {
    const Shape& ws = l.params.weight.shape();
    const std::uint32_t wdims[4] = {
        static_cast<std::uint32_t>(ws.n), static_cast<std::uint32_t>(ws.c),
        static_cast<std::uint32_t>(ws.h), static_cast<std::uint32_t>(ws.w)};
    put_entry(l.spec.name + ".weight", wdims, l.params.weight.data());
    const std::uint32_t bdims[1] = {
        static_cast<std::uint32_t>(l.params.bias.size())};
    put_entry(l.spec.name + ".bias", bdims, l.params.bias);
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write " + path.string());
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw IoError("short write to " + path.string());
}

namespace archive_detail {

inline Model assemble(const ModelConfig& cfg,
                      std::map<std::string, Entry>& entries,
                      const std::filesystem::path& path) {
  Model m;
  m.config = cfg;
  for (const LayerSpec& spec : layer_plan(cfg)) {
    const std::string wname = spec.name + ".weight";
    const std::string bname = spec.name + ".bias";
    auto wi = entries.find(wname);
    auto bi = entries.find(bname);
    if (wi == entries.end() || bi == entries.end())
      throw IoError(path.string() + ": missing entry '" +
                    (wi == entries.end() ? wname : bname) + "'");
    Entry& we = wi->second;
    Entry& be = bi->second;
    const int icpg = spec.in_c / spec.groups;
    const std::vector<std::uint32_t> expect_w = {
        static_cast<std::uint32_t>(spec.out_c),
        static_cast<std::uint32_t>(icpg), static_cast<std::uint32_t>(spec.k),
        static_cast<std::uint32_t>(spec.k)};
    if (we.dims != expect_w)
      throw IoError(path.string() + ": entry '" + wname +
                    "' shape mismatch against configuration");
    if (be.dims != std::vector<std::uint32_t>{
                       static_cast<std::uint32_t>(spec.out_c)})
      throw IoError(path.string() + ": entry '" + bname +
                    "' shape mismatch against configuration");
    ConvLayer layer{spec,
                    ConvParams{Tensor(Shape{spec.out_c, icpg, spec.k, spec.k},
                                      std::move(we.values)),
                               std::move(be.values), spec.groups,
                               (spec.k - 1) / 2}};
    m.layers.push_back(std::move(layer));
    entries.erase(wi);
    entries.erase(bi);
  }
  if (!entries.empty())
    throw IoError(path.string() + ": unexpected extra entry '" +
                  entries.begin()->first + "'");
  return m;
}

} // namespace archive_detail

inline Model load_weights(const std::filesystem::path& path,
                          const ModelConfig& cfg) {
  auto entries = archive_detail::read_entries(path);
  return archive_detail::assemble(cfg, entries, path);
}

/// Loads an archive, deducing the configuration from its contents: trunk
/// width from the head, attention from attn entries, scale from the
/// upsampler's output channels. The attention tile is a runtime knob.
inline Model load_weights(const std::filesystem::path& path) {
  auto entries = archive_detail::read_entries(path);
  const auto head = entries.find("head.weight");
  if (head == entries.end() || head->second.dims.size() != 4)
    throw IoError(path.string() + ": missing or malformed 'head.weight'");
  const auto up = entries.find("upsample.weight");
  if (up == entries.end() || up->second.dims.size() != 4)
    throw IoError(path.string() + ": missing or malformed 'upsample.weight'");

  ModelConfig cfg;
  const int trunk = static_cast<int>(head->second.dims[0]);
  if (trunk % 4 != 0)
    throw IoError(path.string() + ": head width " + std::to_string(trunk) +
                  " is not a multiple of 4");
  cfg.core = trunk / 4;
  cfg.use_nla = entries.count("attn2.value.weight") > 0;
  const int up_c = static_cast<int>(up->second.dims[0]);
  if (up_c % 3 != 0)
    throw IoError(path.string() + ": upsampler width not a multiple of 3");
  const int s2 = up_c / 3;
  const int s = static_cast<int>(std::lround(std::sqrt(double(s2))));
  if (s * s != s2)
    throw IoError(path.string() + ": upsampler width does not encode a square scale");
  cfg.scale = s;
  return archive_detail::assemble(cfg, entries, path);
}

} // namespace gidnet
