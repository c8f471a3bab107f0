#pragma once

#include "qatforge/trainer.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace qatforge {

/// Per-iteration CSV: loss, R, lambda, activation MSQE, cost, theta, gammas,
/// test accuracy (empty when not evaluated) and every scale.
std::string curves_csv(const TrainLog& log);
/// One row per snapshot and layer: iteration, layer, delta, underflow,
/// overflow, then kHistogramBins counts over [-4 delta, 4 delta].
std::string histograms_csv(const TrainLog& log);

/// Writes curves.csv and histograms.csv into `dir`.
void emit_curves(const TrainLog& log, const std::filesystem::path& dir);

/// Centered moving average with the window truncated at the ends.
std::vector<double> moving_average(const std::vector<double>& values, std::size_t window);

/// Shortest decimal text that reads back to the same double.
std::string format_real(double v);

}  // namespace qatforge
