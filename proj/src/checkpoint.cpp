#include "qatforge/checkpoint.hpp"

#include "layer_io.hpp"

#include <algorithm>

namespace qatforge {

namespace {

void put_doubles(ByteWriter& w, const std::vector<double>& v) {
  w.put(static_cast<std::uint32_t>(v.size()));
  for (double x : v) w.put(x);
}

std::vector<double> get_doubles(ByteReader& r) {
  std::vector<double> v(r.get<std::uint32_t>());
  for (double& x : v) x = r.get<double>();
  return v;
}

void put_ints(ByteWriter& w, const std::vector<int>& v) {
  w.put(static_cast<std::uint32_t>(v.size()));
  for (int x : v) w.put(static_cast<std::uint8_t>(x));
}

std::vector<int> get_ints(ByteReader& r) {
  std::vector<int> v(r.get<std::uint32_t>());
  for (int& x : v) x = r.get<std::uint8_t>();
  return v;
}

}  // namespace

Checkpoint make_checkpoint(const Network& net, const TrainConfig& config, const TrainResult& result) {
  Checkpoint c{net, config.mode, std::nullopt, result.bits, result.reg, {}};
  if (config.quantizing()) c.scales = result.scales;
  const bool any_pruned = std::any_of(result.mask.begin(), result.mask.end(), [](const auto& m) {
    return std::any_of(m.begin(), m.end(), [](std::uint8_t v) { return v != 0; });
  });
  if (any_pruned) c.mask = result.mask;
  return c;
}

std::vector<std::uint8_t> write_checkpoint(const Checkpoint& ckpt) {
  ByteWriter w;
  w.put_magic("QATC");
  w.put(kCheckpointVersion);
  w.put(static_cast<std::uint8_t>(ckpt.mode));
  for (Index v : ckpt.net.input_shape()) w.put(static_cast<std::uint32_t>(v));
  w.put(static_cast<std::uint16_t>(ckpt.net.layers().size()));
  for (const LayerDef& d : ckpt.net.layers()) detail::put_layer_def(w, d);
  for (const Parameter& p : ckpt.net.parameters()) {
    for (Index i = 0; i < p.weight.size(); ++i) w.put(p.weight[i]);
    for (Index i = 0; i < p.bias.size(); ++i) w.put(p.bias[i]);
  }
  w.put(static_cast<std::uint8_t>(ckpt.scales ? 1 : 0));
  if (ckpt.scales) {
    put_doubles(w, ckpt.scales->weight);
    put_doubles(w, ckpt.scales->activation);
    w.put(ckpt.scales->input);
  }
  put_ints(w, ckpt.bits.weight);
  put_ints(w, ckpt.bits.activation);
  for (double v : {ckpt.reg.omega, ckpt.reg.gamma1_log, ckpt.reg.gamma2_log, ckpt.reg.alpha, ckpt.reg.zeta,
                   ckpt.reg.beta1, ckpt.reg.beta2}) {
    w.put(v);
  }
  w.put(static_cast<std::uint8_t>(ckpt.pruned() ? 1 : 0));
  if (ckpt.pruned()) {
    for (const auto& m : ckpt.mask) {
      w.put(static_cast<std::uint32_t>(m.size()));
      for (std::uint8_t v : m) w.put(v);
    }
  }
  return std::move(w.bytes());
}

Checkpoint read_checkpoint(const std::vector<std::uint8_t>& bytes) {
  ByteReader r(bytes, "QATC");
  r.expect_magic("QATC");
  const auto version = r.get<std::uint16_t>();
  if (version != kCheckpointVersion) r.fail("unsupported version " + std::to_string(version));
  const auto mode = r.get<std::uint8_t>();
  if (mode > static_cast<std::uint8_t>(TrainMode::prune_then_qat)) r.fail("unknown training mode");
  Shape input;
  for (int i = 0; i < 3; ++i) input.push_back(static_cast<Index>(r.get<std::uint32_t>()));
  std::vector<LayerDef> defs(r.get<std::uint16_t>());
  for (LayerDef& d : defs) d = detail::get_layer_def(r);
  Checkpoint c;
  try {
    c.net = Network(defs, input);
  } catch (const std::exception& e) {
    r.fail(e.what());
  }
  c.mode = static_cast<TrainMode>(mode);
  for (Parameter& p : c.net.parameters()) {
    for (Index i = 0; i < p.weight.size(); ++i) p.weight[i] = r.get<double>();
    for (Index i = 0; i < p.bias.size(); ++i) p.bias[i] = r.get<double>();
  }
  const std::size_t layers = c.net.parameterized_count();
  if (r.get<std::uint8_t>() != 0) {
    ScaleState s;
    s.weight = get_doubles(r);
    s.activation = get_doubles(r);
    s.input = r.get<double>();
    if (s.weight.size() != layers || s.activation.size() + 1 != layers) r.fail("scale count mismatch");
    c.scales = std::move(s);
  }
  c.bits.weight = get_ints(r);
  c.bits.activation = get_ints(r);
  if (c.bits.weight.size() != layers || c.bits.activation.size() + 1 != layers) r.fail("bit-width count mismatch");
  for (double* v : {&c.reg.omega, &c.reg.gamma1_log, &c.reg.gamma2_log, &c.reg.alpha, &c.reg.zeta, &c.reg.beta1,
                    &c.reg.beta2}) {
    *v = r.get<double>();
  }
  if (r.get<std::uint8_t>() != 0) {
    for (std::size_t l = 0; l < layers; ++l) {
      std::vector<std::uint8_t> m(r.get<std::uint32_t>());
      if (static_cast<Index>(m.size()) != c.net.parameter(l).weight.size()) r.fail("mask size mismatch");
      for (auto& v : m) v = r.get<std::uint8_t>();
      c.mask.push_back(std::move(m));
    }
  }
  r.expect_end();
  return c;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  write_bytes(path, write_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return read_checkpoint(read_bytes(path)); }

}  // namespace qatforge
