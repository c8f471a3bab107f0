#pragma once

#include "qatforge/network.hpp"
#include "qatforge/trainer.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace qatforge {

inline constexpr std::uint16_t kCheckpointVersion = 1;

/// Real-valued training state: network, scales, bit-widths, learnable
/// coefficients and the prune mask (empty when unpruned).
struct Checkpoint {
  Network net;
  TrainMode mode = TrainMode::float_baseline;
  std::optional<ScaleState> scales;
  LayerBits bits;
  RegState reg;
  PruneMask mask;

  bool pruned() const { return !mask.empty(); }
  bool quantized() const { return scales.has_value(); }
};

/// Checkpoint of a finished training run.
Checkpoint make_checkpoint(const Network& net, const TrainConfig& config, const TrainResult& result);

std::vector<std::uint8_t> write_checkpoint(const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::vector<std::uint8_t>& bytes);
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace qatforge
