#include "qatforge/metrics.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace qatforge {

std::string format_real(double v) {
  if (std::isnan(v)) return "";
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::string curves_csv(const TrainLog& log) {
  if (log.iterations.empty()) throw std::invalid_argument("training log is empty");
  const auto& first = log.iterations.front();
  std::ostringstream os;
  os << "iteration,epoch,task_loss,msqe,lambda,activation_msqe,cost,theta,gamma1,gamma2,test_accuracy";
  for (std::size_t l = 0; l < first.weight_scales.size(); ++l) os << ",delta_" << l + 1;
  for (std::size_t a = 0; a < first.activation_scales.size(); ++a) os << ",Delta_" << a + 1;
  os << '\n';
  for (const auto& r : log.iterations) {
    os << r.iteration << ',' << r.epoch << ',' << format_real(r.task_loss) << ',' << format_real(r.msqe) << ','
       << format_real(r.lambda) << ',' << format_real(r.activation_msqe) << ',' << format_real(r.cost) << ','
       << format_real(r.theta) << ',' << format_real(r.gamma1) << ',' << format_real(r.gamma2) << ','
       << format_real(r.test_accuracy);
    for (double s : r.weight_scales) os << ',' << format_real(s);
    for (double s : r.activation_scales) os << ',' << format_real(s);
    os << '\n';
  }
  return os.str();
}

std::string histograms_csv(const TrainLog& log) {
  std::ostringstream os;
  os << "iteration,layer,delta,underflow,overflow";
  for (int b = 0; b < kHistogramBins; ++b) os << ",bin_" << b;
  os << '\n';
  for (const auto& h : log.histograms) {
    os << h.iteration << ',' << h.layer + 1 << ',' << format_real(h.delta) << ',' << h.underflow << ',' << h.overflow;
    for (long c : h.counts) os << ',' << c;
    os << '\n';
  }
  return os.str();
}

void emit_curves(const TrainLog& log, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  for (const auto& [name, text] : {std::pair{"curves.csv", curves_csv(log)}, {"histograms.csv", histograms_csv(log)}}) {
    std::ofstream out(dir / name, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + (dir / name).string());
    out << text;
  }
}

std::vector<double> moving_average(const std::vector<double>& values, std::size_t window) {
  if (window == 0) throw std::invalid_argument("window must be positive");
  std::vector<double> prefix(values.size() + 1, 0.0);
  for (std::size_t i = 0; i < values.size(); ++i) prefix[i + 1] = prefix[i] + values[i];
  std::vector<double> out(values.size());
  const std::size_t half = window / 2;
  for (std::size_t i = 0; i < values.size(); ++i) {
    const std::size_t lo = i >= half ? i - half : 0;
    const std::size_t hi = std::min(values.size(), i + (window - half));
    out[i] = (prefix[hi] - prefix[lo]) / static_cast<double>(hi - lo);
  }
  return out;
}

}  // namespace qatforge
