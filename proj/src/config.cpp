#include "qatforge/config.hpp"

#include <fstream>
#include <set>
#include <stdexcept>

namespace qatforge {

namespace {

template <typename T>
void read(const nlohmann::json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("config field '") + key + "': " + e.what());
  }
}

const std::set<std::string>& known_keys() {
  static const std::set<std::string> keys = {
      "model", "mode", "weight_bits", "activation_bits", "quantize_activations", "skip_first_last", "alpha",
      "zeta", "beta1", "beta2", "prune_ratio", "lr_weights", "lr_scales", "lr_omega", "lr_gamma", "decay_at",
      "decay_factor", "batch_size", "epochs", "seed", "pow2_snap_at", "calibration_samples", "histogram_every",
      "eval_every_epochs", "max_iterations_per_epoch", "data_root", "out_dir", "init"};
  return keys;
}

}  // namespace

void ExperimentConfig::validate() const {
  if (model != "lenet5") throw std::invalid_argument("config field 'model': only \"lenet5\" is available");
  train.validate();
  if (out_dir.empty()) throw std::invalid_argument("config field 'out_dir' is empty");
}

ExperimentConfig config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw std::invalid_argument("config must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (!known_keys().contains(key)) throw std::invalid_argument("unknown config field '" + key + "'");
  }
  ExperimentConfig c;
  TrainConfig& t = c.train;
  read(j, "model", c.model);
  std::string mode = train_mode_name(t.mode);
  read(j, "mode", mode);
  t.mode = parse_train_mode(mode);
  read(j, "weight_bits", t.quant.weight_bits);
  read(j, "activation_bits", t.quant.activation_bits);
  t.quant.pow2_scaling = t.mode == TrainMode::qat_pow2;
  read(j, "quantize_activations", t.quantize_activations);
  read(j, "skip_first_last", t.skip_first_last);
  read(j, "alpha", t.alpha);
  read(j, "zeta", t.zeta);
  read(j, "beta1", t.beta1);
  read(j, "beta2", t.beta2);
  read(j, "prune_ratio", t.prune_ratio);
  read(j, "lr_weights", t.optimizer.lr_weights);
  read(j, "lr_scales", t.optimizer.lr_scales);
  read(j, "lr_omega", t.optimizer.lr_omega);
  read(j, "lr_gamma", t.optimizer.lr_gamma);
  read(j, "decay_at", t.optimizer.decay_at);
  read(j, "decay_factor", t.optimizer.decay_factor);
  read(j, "batch_size", t.batch_size);
  read(j, "epochs", t.epochs);
  read(j, "seed", t.seed);
  read(j, "pow2_snap_at", t.pow2_snap_at);
  read(j, "calibration_samples", t.calibration_samples);
  read(j, "histogram_every", t.histogram_every);
  read(j, "eval_every_epochs", t.eval_every_epochs);
  read(j, "max_iterations_per_epoch", t.max_iterations_per_epoch);
  std::string path;
  if (j.contains("data_root")) {
    read(j, "data_root", path);
    c.data_root = path;
  }
  if (j.contains("out_dir")) {
    read(j, "out_dir", path);
    c.out_dir = path;
  }
  if (j.contains("init")) {
    read(j, "init", path);
    c.init = path;
  }
  c.validate();
  return c;
}

nlohmann::json config_to_json(const ExperimentConfig& c) {
  const TrainConfig& t = c.train;
  return {{"model", c.model},
          {"mode", train_mode_name(t.mode)},
          {"weight_bits", t.quant.weight_bits},
          {"activation_bits", t.quant.activation_bits},
          {"quantize_activations", t.quantize_activations},
          {"skip_first_last", t.skip_first_last},
          {"alpha", t.alpha},
          {"zeta", t.zeta},
          {"beta1", t.beta1},
          {"beta2", t.beta2},
          {"prune_ratio", t.prune_ratio},
          {"lr_weights", t.optimizer.lr_weights},
          {"lr_scales", t.optimizer.lr_scales},
          {"lr_omega", t.optimizer.lr_omega},
          {"lr_gamma", t.optimizer.lr_gamma},
          {"decay_at", t.optimizer.decay_at},
          {"decay_factor", t.optimizer.decay_factor},
          {"batch_size", t.batch_size},
          {"epochs", t.epochs},
          {"seed", t.seed},
          {"pow2_snap_at", t.pow2_snap_at},
          {"calibration_samples", t.calibration_samples},
          {"histogram_every", t.histogram_every},
          {"eval_every_epochs", t.eval_every_epochs},
          {"max_iterations_per_epoch", t.max_iterations_per_epoch},
          {"data_root", c.data_root.string()},
          {"out_dir", c.out_dir.string()},
          {"init", c.init.string()}};
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw std::invalid_argument(path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

}  // namespace qatforge
