// qatforge: train, quantize, prune, compress, convert, eval and infer on MNIST.

#include "qatforge/checkpoint.hpp"
#include "qatforge/compression.hpp"
#include "qatforge/config.hpp"
#include "qatforge/fixed_point.hpp"
#include "qatforge/metrics.hpp"
#include "qatforge/mnist.hpp"
#include "qatforge/provenance.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>

using namespace qatforge;
namespace fs = std::filesystem;

namespace {

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<int> bits_w;
  std::optional<int> bits_a;
  bool pow2 = false;
  std::optional<double> prune_ratio;
  bool quantize_all = false;
  bool skip_first_last = false;
  std::optional<int> epochs;
  std::string out;
  std::string init;
  std::string model;
  bool shift = false;
  long index = 0;
};

class StageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

ExperimentConfig resolve(const Options& o) {
  ExperimentConfig c = o.config.empty() ? ExperimentConfig{} : load_config(o.config);
  if (o.seed) c.train.seed = *o.seed;
  if (o.bits_w) c.train.quant.weight_bits = *o.bits_w;
  if (o.bits_a) c.train.quant.activation_bits = *o.bits_a;
  if (o.prune_ratio) c.train.prune_ratio = *o.prune_ratio;
  if (o.quantize_all) c.train.skip_first_last = false;
  if (o.skip_first_last) c.train.skip_first_last = true;
  if (o.epochs) c.train.epochs = *o.epochs;
  if (!o.out.empty()) c.out_dir = o.out;
  if (!o.init.empty()) c.init = o.init;
  if (c.data_root.empty()) c.data_root = data_root_from_env();
  return c;
}

MnistSet load_data(const ExperimentConfig& c) {
  if (c.data_root.empty()) {
    throw StageError("no dataset root: set QATFORGE_DATA or data_root in the config");
  }
  return load_mnist(c.data_root);
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

/// config.json and run_info.json: the exact config, the seed and the content
/// hashes of every input file.
void write_provenance(const ExperimentConfig& c, const std::string& stage, const std::vector<fs::path>& inputs) {
  fs::create_directories(c.out_dir);
  write_text(c.out_dir / "config.json", config_to_json(c).dump(2) + "\n");
  nlohmann::json info{{"stage", stage}, {"seed", c.train.seed}, {"inputs", nlohmann::json::object()}};
  for (const auto& p : inputs) info["inputs"][p.filename().string()] = git_blob_hash_file(p);
  write_text(c.out_dir / "run_info.json", info.dump(2) + "\n");
}

std::vector<fs::path> data_files(const ExperimentConfig& c) {
  std::vector<fs::path> out;
  for (const char* name : {"train-images-idx3-ubyte", "train-labels-idx1-ubyte", "t10k-images-idx3-ubyte",
                           "t10k-labels-idx1-ubyte"}) {
    out.push_back(c.data_root / name);
  }
  return out;
}

Checkpoint require_init(const ExperimentConfig& c, const char* stage) {
  if (c.init.empty()) throw StageError(std::string(stage) + " needs a starting checkpoint: pass --init PATH");
  return load_checkpoint(c.init);
}

void print_progress(int epoch, double acc, const IterationRecord& r) {
  std::printf("epoch %d  loss %.5f  R %.3e  lambda %.3e  test %s\n", epoch + 1, r.task_loss, r.msqe, r.lambda,
              std::isnan(acc) ? "-" : (std::to_string(acc * 100.0) + "%").c_str());
  std::fflush(stdout);
}

void finish_training(const ExperimentConfig& c, const Network& net, const TrainResult& result, const char* stage,
                     std::vector<fs::path> inputs) {
  fs::create_directories(c.out_dir);
  save_checkpoint(make_checkpoint(net, c.train, result), c.out_dir / "checkpoint.qatc");
  emit_curves(result.log, c.out_dir);
  write_provenance(c, stage, inputs);
  std::printf("test accuracy %.2f%%\n", result.test_accuracy * 100.0);
  std::printf("wrote %s\n", (c.out_dir / "checkpoint.qatc").string().c_str());
}

int cmd_train(const Options& o) {
  ExperimentConfig c = resolve(o);
  if (o.pow2) c.train.mode = TrainMode::qat_pow2;
  if (c.train.mode == TrainMode::prune_then_qat) {
    throw StageError("prune_then_qat starts from a pruned checkpoint; use the quantize command");
  }
  c.validate();
  const MnistSet data = load_data(c);
  Network net(lenet5_layers(), mnist_input_shape());
  std::vector<fs::path> inputs = data_files(c);
  if (!c.init.empty()) {
    net = load_checkpoint(c.init).net;
    inputs.push_back(c.init);
  } else {
    std::mt19937_64 rng(c.train.seed);
    net.initialize(rng);
  }
  const TrainResult r = c.train.mode == TrainMode::prune
                            ? train_prune(c.train, net, data.train, &data.test, print_progress)
                            : train(c.train, net, data.train, &data.test, std::nullopt, nullptr, print_progress);
  finish_training(c, net, r, "train", inputs);
  return 0;
}

int cmd_quantize(const Options& o) {
  ExperimentConfig c = resolve(o);
  Checkpoint start = require_init(c, "quantize");
  c.train.mode = o.pow2 ? TrainMode::qat_pow2 : (start.pruned() ? TrainMode::prune_then_qat : TrainMode::qat);
  if (o.pow2 && start.pruned()) throw StageError("power-of-two fine-tuning of a pruned checkpoint is not supported");
  c.validate();
  const MnistSet data = load_data(c);
  Network net = std::move(start.net);
  const TrainResult r = train(c.train, net, data.train, &data.test, std::nullopt,
                              start.pruned() ? &start.mask : nullptr, print_progress);
  auto inputs = data_files(c);
  inputs.push_back(c.init);
  finish_training(c, net, r, "quantize", inputs);
  const auto err = max_quantization_error(net, r.scales, r.bits);
  for (std::size_t l = 0; l < err.size(); ++l) {
    if (r.bits.quantized_weights(l)) std::printf("layer %zu  max |w - Q(w)| = %.3e delta\n", l + 1, err[l]);
  }
  return 0;
}

int cmd_prune(const Options& o) {
  ExperimentConfig c = resolve(o);
  Checkpoint start = require_init(c, "prune");
  if (start.quantized()) throw StageError("prune a float checkpoint, then quantize the pruned result");
  c.train.mode = TrainMode::prune;
  c.validate();
  const MnistSet data = load_data(c);
  Network net = std::move(start.net);
  const TrainResult r = train_prune(c.train, net, data.train, &data.test, print_progress);
  auto inputs = data_files(c);
  inputs.push_back(c.init);
  finish_training(c, net, r, "prune", inputs);
  return 0;
}

Checkpoint require_quantized(const ExperimentConfig& c, const char* stage) {
  Checkpoint ck = require_init(c, stage);
  if (!ck.quantized()) {
    throw StageError(std::string(stage) + " needs a quantized checkpoint; run the quantize command first");
  }
  return ck;
}

int cmd_compress(const Options& o) {
  const ExperimentConfig c = resolve(o);
  const Checkpoint ck = require_quantized(c, "compress");
  const auto archive = encode_model(ck.net, *ck.scales, ck.bits, ck.pruned() ? &ck.mask : nullptr);
  const CompressionReport rep = report(archive, &ck.net);
  fs::create_directories(c.out_dir);
  save_archive(archive, c.out_dir / "model.qzip");
  const nlohmann::json j{{"weights", rep.weights},
                         {"nonzero", rep.nonzero},
                         {"original_bits", rep.original_bits},
                         {"compressed_bits", rep.compressed_bits},
                         {"header_bits", rep.header_bits},
                         {"table_bits", rep.table_bits},
                         {"code_bits", rep.code_bits},
                         {"index_bits", rep.index_bits},
                         {"padding_bits", rep.padding_bits},
                         {"ratio", rep.ratio},
                         {"zero_fraction_before", rep.zero_fraction_before},
                         {"zero_fraction_after", rep.zero_fraction_after},
                         {"code_entropy", rep.code_entropy},
                         {"code_average_length", rep.code_average_length},
                         {"gap_entropy", rep.gap_entropy},
                         {"gap_average_length", rep.gap_average_length}};
  write_text(c.out_dir / "report.json", j.dump(2) + "\n");
  write_provenance(c, "compress", {c.init});
  std::printf("archive %zu bytes, ratio %.1f, zeros %.2f%% -> %.2f%%\n", archive.size(), rep.ratio,
              rep.zero_fraction_before * 100.0, rep.zero_fraction_after * 100.0);
  return 0;
}

int cmd_convert(const Options& o) {
  const ExperimentConfig c = resolve(o);
  const Checkpoint ck = require_quantized(c, "convert");
  const FixedPointModel model = convert(ck.net, *ck.scales, ck.bits);
  fs::create_directories(c.out_dir);
  save_fxpm(model, c.out_dir / "model.fxpm");
  write_provenance(c, "convert", {c.init});
  std::printf("wrote %s (%s rescale)\n", (c.out_dir / "model.fxpm").string().c_str(),
              model.shift_capable() ? "shift" : "multiplier");
  return 0;
}

bool is_fxpm(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  char magic[4] = {};
  in.read(magic, 4);
  return in && std::string(magic, 4) == "FXPM";
}

int cmd_eval(const Options& o) {
  const ExperimentConfig c = resolve(o);
  const fs::path path = o.model.empty() ? c.init : fs::path(o.model);
  if (path.empty()) throw StageError("eval needs --model PATH (a .qatc checkpoint or .fxpm model)");
  const MnistSet data = load_data(c);
  double acc = 0.0;
  if (is_fxpm(path)) {
    acc = evaluate_fixed_point(load_fxpm(path), data.test, o.shift);
  } else {
    Checkpoint ck = load_checkpoint(path);
    acc = ck.quantized() ? evaluate(ck.net, data.test, &*ck.scales, &ck.bits, ck.pruned() ? &ck.mask : nullptr)
                         : evaluate(ck.net, data.test);
  }
  std::printf("%s: top-1 %.2f%% on %lld test images\n", path.string().c_str(), acc * 100.0,
              static_cast<long long>(data.test.count()));
  return 0;
}

int cmd_infer(const Options& o) {
  const ExperimentConfig c = resolve(o);
  if (o.model.empty()) throw StageError("infer needs --model PATH to a converted .fxpm model");
  const FixedPointModel model = load_fxpm(o.model);
  const MnistSet data = load_data(c);
  if (o.index < 0 || o.index >= data.test.count()) throw StageError("--index out of range");
  const std::vector<Index> idx{o.index};
  auto argmax = [](const TensorD& logits) {
    Index best = 0;
    for (Index k = 1; k < logits.dim(1); ++k) {
      if (logits[k] > logits[best]) best = k;
    }
    return best;
  };
  const TensorD fixed = o.shift ? infer_shift(model, data.test.codes(idx)) : infer(model, data.test.codes(idx));
  const TensorD sim = simulate_float(model, data.test.batch(idx, model.input_scale));
  std::printf("image %ld: label %d, fixed-point %lld, simulated %lld\n", o.index, data.test.labels[o.index],
              static_cast<long long>(argmax(fixed)), static_cast<long long>(argmax(sim)));
  return argmax(fixed) == argmax(sim) ? 0 : 1;
}

void add_common(CLI::App* app, Options& o) {
  app->add_option("--config", o.config, "JSON experiment config");
  app->add_option("--seed", o.seed, "Random seed");
  app->add_option("--out", o.out, "Output directory");
  app->add_option("--init", o.init, "Checkpoint to start from");
}

void add_training(CLI::App* app, Options& o) {
  app->add_option("--bits-w", o.bits_w, "Weight bit-width")->check(CLI::Range(1, 16));
  app->add_option("--bits-a", o.bits_a, "Activation bit-width")->check(CLI::Range(1, 16));
  app->add_option("--prune-ratio", o.prune_ratio, "Fraction of weights to prune")->check(CLI::Range(0.0, 0.999999));
  app->add_option("--epochs", o.epochs, "Training epochs")->check(CLI::PositiveNumber);
  auto* all = app->add_flag("--quantize-all", o.quantize_all, "Quantize first and last layers too");
  app->add_flag("--skip-first-last", o.skip_first_last, "Keep first and last layers in full precision")->excludes(all);
  app->add_flag("--pow2", o.pow2, "Learn power-of-two scales");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Quantization-aware training, fixed-point conversion and compression for MNIST"};
  app.require_subcommand(1);
  Options o;

  auto* train_cmd = app.add_subcommand("train", "Train from scratch (mode from the config)");
  auto* quantize_cmd = app.add_subcommand("quantize", "Quantization-aware fine-tuning from a checkpoint");
  auto* prune_cmd = app.add_subcommand("prune", "Partial-L2 pruning from a float checkpoint");
  auto* compress_cmd = app.add_subcommand("compress", "Huffman archive of a quantized checkpoint");
  auto* convert_cmd = app.add_subcommand("convert", "Fixed-point model from a quantized checkpoint");
  auto* eval_cmd = app.add_subcommand("eval", "Test accuracy of a checkpoint or fixed-point model");
  auto* infer_cmd = app.add_subcommand("infer", "Classify one test image with the fixed-point engine");
  for (auto* cmd : {train_cmd, quantize_cmd, prune_cmd, compress_cmd, convert_cmd, eval_cmd, infer_cmd}) {
    add_common(cmd, o);
  }
  for (auto* cmd : {train_cmd, quantize_cmd, prune_cmd}) add_training(cmd, o);
  for (auto* cmd : {eval_cmd, infer_cmd}) {
    cmd->add_option("--model", o.model, "Checkpoint (.qatc) or fixed-point model (.fxpm)");
    cmd->add_flag("--shift", o.shift, "Use shift rescaling (power-of-two models)");
  }
  infer_cmd->add_option("--index", o.index, "Test image index");

  CLI11_PARSE(app, argc, argv);
  try {
    if (*train_cmd) return cmd_train(o);
    if (*quantize_cmd) return cmd_quantize(o);
    if (*prune_cmd) return cmd_prune(o);
    if (*compress_cmd) return cmd_compress(o);
    if (*convert_cmd) return cmd_convert(o);
    if (*eval_cmd) return cmd_eval(o);
    if (*infer_cmd) return cmd_infer(o);
  } catch (const StageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
