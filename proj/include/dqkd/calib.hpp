#pragma once

#include "dqkd/quantsim.hpp"
#include "dqkd/tensor.hpp"

#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace dqkd {

struct DatasetSpec;
struct DistilledModel;

// Streaming histogram with running min/max. Values outside the current span
// trigger bin-width doubling (adjacent bins merged) until they fit, so
// total_count is preserved exactly. Single-writer.
struct RunningHistogram {
  std::vector<std::uint64_t> counts;
  double lower = 0.0;
  double bin_width = 0.0;  // 0 until the first observation
  double running_min = std::numeric_limits<double>::infinity();
  double running_max = -std::numeric_limits<double>::infinity();
  std::uint64_t total_count = 0;

  explicit RunningHistogram(int bins = 2048) : counts(static_cast<std::size_t>(bins), 0) {
    if (bins < 1) fail("RunningHistogram: bins must be >= 1");
  }
  int bins() const { return static_cast<int>(counts.size()); }
  double upper() const { return lower + bins() * bin_width; }
  double edge(int i) const { return lower + i * bin_width; }
  double center(int i) const { return lower + (i + 0.5) * bin_width; }
};

void observe(RunningHistogram& hist, const Tensor& t);

// (running_min, running_max); degenerate streams widen to (min-0.5, max+0.5).
std::pair<double, double> minmax_calibrate(const RunningHistogram& hist);

// KL-divergence clip search over bin-edge windows. Reference P is the full
// value distribution; Q collapses the window into 2^bits levels (out-of-window
// bins fold into the edge levels) and re-expands level mass uniformly over its
// populated bins. Exhaustive over all windows up to 64 bins; candidate edges
// are subsampled and locally refined above that. Ties break toward the
// smaller span. out_kl, when given, receives the winning divergence.
std::pair<double, double> entropy_calibrate(const RunningHistogram& hist, int bits,
                                            double* out_kl = nullptr);

// Count-weighted squared quantization error search over (min, max) edge pairs,
// simulating 2^bits-level affine quantization of bin centers with out-of-range
// centers clamped. Full grid up to 64 bins; greedy inward shrink with early
// stop (improvement < 1e-12, budget max_iters) above that.
std::pair<double, double> l2_calibrate(const RunningHistogram& hist, int bits,
                                       double* out_err = nullptr, int max_iters = -1);

// Symmetric single-threshold variants for signed weight tensors; return
// (-T, T).
std::pair<double, double> entropy_calibrate_symmetric(const RunningHistogram& hist, int bits);
std::pair<double, double> l2_calibrate_symmetric(const RunningHistogram& hist, int bits);

enum class CalibObjective { entropy, l2, minmax };
const char* calib_objective_name(CalibObjective o);
CalibObjective calib_objective_from_name(const std::string& name);

// Deterministic stream of i.i.d. normal tensors; same seed, same stream.
class RandomNormalStream {
 public:
  RandomNormalStream(double mean, double stddev, int n_batches, std::vector<int> batch_shape,
                     std::uint64_t seed);
  std::optional<Tensor> next();
  void reset();

 private:
  double mean_, stddev_;
  int n_batches_, emitted_ = 0;
  std::vector<int> shape_;
  std::uint64_t seed_;
  std::mt19937_64 rng_;
};

struct CalibrationSource {
  enum class Kind { dataset_samples, random_normal };
  Kind kind = Kind::dataset_samples;
  const DatasetSpec* dataset = nullptr;
  int n_batches = 8;
  double mean = 0.0;
  double stddev = 1.0;
  std::vector<int> batch_shape;
  std::uint64_t seed = 0;

  static CalibrationSource from_dataset(const DatasetSpec& ds, int n_batches);
  static CalibrationSource random_normal(double mean, double stddev, int n_batches,
                                         std::vector<int> batch_shape, std::uint64_t seed);
};

struct PlanEntry {
  std::string site_id;
  bool is_weight = false;
  QuantParams qp;
  std::string objective;
};

struct CalibrationPlan {
  std::vector<PlanEntry> entries;

  const PlanEntry* find(const std::string& site_id) const {
    for (const auto& e : entries)
      if (e.site_id == site_id) return &e;
    return nullptr;
  }
};

std::string plan_to_json(const CalibrationPlan& plan);
CalibrationPlan plan_from_json(const std::string& text);

// Streams source batches through the float student net(s), observing one
// histogram per activation site, then finalizes every site with the chosen
// objective. Weight tensors calibrate from their own value histograms with
// symmetric params. Teacher activations are never quantized.
CalibrationPlan calibrate_model(const DistilledModel& model, const CalibrationSource& source,
                                CalibObjective objective, int bits);

}  // namespace dqkd
