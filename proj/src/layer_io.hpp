#pragma once

#include "qatforge/bytes.hpp"
#include "qatforge/network.hpp"

namespace qatforge::detail {

inline void put_layer_def(ByteWriter& w, const LayerDef& d) {
  w.put(static_cast<std::uint8_t>(d.kind));
  switch (d.kind) {
    case LayerKind::conv2d:
      for (Index v : {d.in_channels, d.out_channels, d.kernel, d.stride, d.padding}) w.put(static_cast<std::uint32_t>(v));
      break;
    case LayerKind::fully_connected:
      w.put(static_cast<std::uint32_t>(d.in_features));
      w.put(static_cast<std::uint32_t>(d.out_features));
      break;
    case LayerKind::maxpool:
      w.put(static_cast<std::uint32_t>(d.kernel));
      w.put(static_cast<std::uint32_t>(d.stride));
      break;
    default:
      break;
  }
}

inline LayerDef get_layer_def(ByteReader& r) {
  const auto tag = r.get<std::uint8_t>();
  auto u32 = [&] { return static_cast<Index>(r.get<std::uint32_t>()); };
  switch (static_cast<LayerKind>(tag)) {
    case LayerKind::conv2d: {
      const Index in = u32(), out = u32(), k = u32(), stride = u32(), pad = u32();
      return LayerDef::conv2d(in, out, k, stride, pad);
    }
    case LayerKind::fully_connected: {
      const Index in = u32(), out = u32();
      return LayerDef::fully_connected(in, out);
    }
    case LayerKind::maxpool: {
      const Index k = u32(), stride = u32();
      return LayerDef::maxpool(k, stride);
    }
    case LayerKind::relu:
      return LayerDef::relu();
    case LayerKind::softmax_cross_entropy:
      return LayerDef::softmax_cross_entropy();
  }
  r.fail("unknown layer tag " + std::to_string(tag));
}

}  // namespace qatforge::detail
