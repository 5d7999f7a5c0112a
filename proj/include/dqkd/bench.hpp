#pragma once

#include "dqkd/dataset.hpp"
#include "dqkd/distill.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace dqkd {

struct ClassEval {
  std::string name;
  double pixel_auroc = 0.0;
  bool pixel_defined = true;
  double image_auroc = 0.0;
  bool image_defined = true;
};

struct SizeBreakdown {
  std::int64_t total = 0;
  std::int64_t teacher = 0;
  std::int64_t student = 0;
};

struct EvalReport {
  std::string scheme;
  std::string precision;        // fp32 | fp16 | ptq-int8 | qat-int8
  std::string calibration;      // train | random-normal | none
  std::string objective;        // entropy | l2 | minmax | none
  std::string mode;             // oneclass | multiclass
  std::vector<ClassEval> classes;
  double mean_pixel_auroc = 0.0;
  double mean_image_auroc = 0.0;
  double avg_inference_ms = 0.0;
  SizeBreakdown size;
  std::vector<std::string> warnings;

  // in-memory only; written as PGM heatmaps by emit_report, never serialized
  std::vector<std::pair<std::string, Tensor>> heatmaps;
};

// Anomaly maps for every test image; pixel AUROC pools all pixels per class,
// image AUROC uses the max-pixel score. Latency is median-of-means over
// 3 x n_timing_runs after 3 warm-up runs (n_timing_runs == 0 skips timing).
// DQ_THREADS caps map-computation parallelism; results are independent of it.
EvalReport evaluate_variant(const DistilledModel& model, const DatasetSpec& dataset,
                            int n_timing_runs, bool keep_heatmaps = false);

std::string report_to_json(const EvalReport& report);
EvalReport report_from_json(const std::string& text);

// Writes reports.json (array), summary.csv (one row per variant) and 8-bit
// PGM heatmaps (min-max scaled per image; flat maps render black).
void emit_report(const std::vector<EvalReport>& reports, const std::string& out_dir);

// --- DQKD model container ---

std::vector<std::uint8_t> serialize_model(const DistilledModel& model);
DistilledModel deserialize_model(const std::vector<std::uint8_t>& bytes);

void save_model(const std::string& path, const DistilledModel& model);
DistilledModel load_model(const std::string& path);

// Serialized byte counts, teacher/student breakdown included.
SizeBreakdown model_size(const DistilledModel& model);

}  // namespace dqkd
