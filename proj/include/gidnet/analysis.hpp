#pragma once

#include <cstdint>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "gidnet/model.hpp"

namespace gidnet {

/// Structural complexity counters. Every convolution runs at the input
/// resolution (stride 1, same padding, upscaling only at the very end), so
/// conv MACs collapse to params * H * W. Attention matrix products are kept
/// out of the MAC and activation totals and reported separately.
struct ComplexityReport {
  struct Row {
    std::string name;
    std::int64_t params = 0;
    int out_c = 0;
    bool attention_internal = false;
  };

  int core = 0;
  bool use_nla = false;
  int input_h = 0;
  int input_w = 0;
  std::int64_t params = 0;
  std::int64_t macs = 0;
  std::int64_t activations = 0;
  int convs = 0;
  std::int64_t attention_macs = 0;
  std::vector<Row> rows;

  std::string text(bool with_breakdown = false) const {
    std::ostringstream os;
    os << "configuration   core=" << core << (use_nla ? " +attention" : "")
       << "\n";
    os << "input size      " << input_h << "x" << input_w << "\n";
    os << "parameters      " << params << "\n";
    os << "conv layers     " << convs << "\n";
    os << "macs            " << macs << "  ("
       << std::fixed << std::setprecision(3) << macs / 1e9 << " G)\n";
    os << "activations     " << activations << "  ("
       << std::fixed << std::setprecision(2) << activations / 1e6 << " M)\n";
    if (use_nla)
      os << "attention macs  " << attention_macs << "  (excluded from macs)\n";
    if (with_breakdown) {
      os << "\n" << std::left << std::setw(20) << "layer" << std::right
         << std::setw(10) << "params" << std::setw(8) << "out_c" << "\n";
      for (const Row& r : rows)
        os << std::left << std::setw(20) << r.name << std::right
           << std::setw(10) << r.params << std::setw(8) << r.out_c << "\n";
    }
    return os.str();
  }

  std::string key_values() const {
    std::ostringstream os;
    os << "core=" << core << "\n"
       << "nla=" << (use_nla ? 1 : 0) << "\n"
       << "input_h=" << input_h << "\n"
       << "input_w=" << input_w << "\n"
       << "params=" << params << "\n"
       << "convs=" << convs << "\n"
       << "macs=" << macs << "\n"
       << "activations=" << activations << "\n"
       << "attention_macs=" << attention_macs << "\n";
    return os.str();
  }
};

inline ComplexityReport analyze(const ModelConfig& cfg, int h, int w) {
  if (h < 1 || w < 1) throw ShapeError("analyze: input extents must be >= 1");
  ComplexityReport rep;
  rep.core = cfg.core;
  rep.use_nla = cfg.use_nla;
  rep.input_h = h;
  rep.input_w = w;
  const std::int64_t pixels = static_cast<std::int64_t>(h) * w;
  for (const LayerSpec& spec : layer_plan(cfg)) {
    const std::int64_t p = spec.param_count();
    rep.rows.push_back({spec.name, p, spec.out_c, spec.attention_internal});
    rep.params += p;
    rep.macs += p * pixels;
    if (!spec.attention_internal)
      rep.activations += static_cast<std::int64_t>(spec.out_c) * pixels;
    ++rep.convs;
  }
  if (cfg.use_nla) {
    // two tiled products per attention block: scores and aggregation,
    // N positions per tile -> 2 * H*W * N * c multiply-accumulates
    const std::int64_t tile_n =
        static_cast<std::int64_t>(std::min(cfg.nla_tile, h)) *
        std::min(cfg.nla_tile, w);
    rep.attention_macs =
        2 * 2 * pixels * tile_n * cfg.coarse_width(); // 2 blocks
  }
  return rep;
}

inline std::int64_t count_parameters(const ModelConfig& cfg) {
  return analyze(cfg, 1, 1).params;
}

inline std::int64_t count_parameters(const Model& m) {
  return m.parameter_count();
}

inline std::int64_t count_macs(const ModelConfig& cfg, int h, int w) {
  return analyze(cfg, h, w).macs;
}

inline std::int64_t count_activations(const ModelConfig& cfg, int h, int w) {
  return analyze(cfg, h, w).activations;
}

inline int count_convs(const ModelConfig& cfg) {
  return analyze(cfg, 1, 1).convs;
}

} // namespace gidnet
