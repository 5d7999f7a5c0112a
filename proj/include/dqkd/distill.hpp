#pragma once

#include "dqkd/autograd.hpp"
#include "dqkd/calib.hpp"
#include "dqkd/model.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace dqkd {

enum class Scheme { stfpm, rd, us };
enum class Precision { fp32, fp16, ptq_int8, qat_int8 };
enum class MapCombine { sum, prod };

const char* scheme_name(Scheme s);
Scheme scheme_from_name(const std::string& name);
const char* precision_name(Precision p);
Precision precision_from_name(const std::string& name);

struct OptimizerSpec {
  enum class Kind { sgd, adam } kind = Kind::adam;
  double momentum = 0.9;  // sgd
  double beta1 = 0.9;     // adam
  double beta2 = 0.999;
};

// Desk-scale analogue of the per-method training hyper-parameters.
struct TrainConfig {
  int batch_size = 8;
  int epochs = 20;
  double learning_rate = 1e-3;
  double weight_decay = 0.0;
  OptimizerSpec optimizer;
  int image_size = 32;
  std::uint64_t seed = 1;
  int n_students = 3;  // us scheme
};

TrainConfig default_train_config(Scheme scheme);

// H x W nonnegative score field.
struct AnomalyMap {
  Tensor scores;
};

struct UsScoreStats {
  double e_mean = 0.0, e_std = 1.0;
  double v_mean = 0.0, v_std = 1.0;
};

// Integer inference state for one student net: quantized conv weights,
// int32 biases at s_in*s_w, and per-conv requantization targets.
struct QuantizedNet {
  std::vector<IntTensor> weights;                    // per conv ordinal
  std::vector<std::vector<std::int32_t>> biases;     // per conv ordinal
  QuantParams input_qp;
  std::vector<QuantParams> conv_out_qp;              // per conv ordinal
};

struct DistilledModel {
  Scheme scheme = Scheme::stfpm;
  ModelDef teacher_def;
  Params teacher_params;  // frozen after construction
  std::vector<ModelDef> student_defs;
  std::vector<Params> student_params;
  Precision precision = Precision::fp32;
  std::optional<CalibrationPlan> plan;  // ptq / qat
  std::vector<QuantizedNet> qnets;      // per student when int8
  UsScoreStats us_stats;
  MapCombine combine = MapCombine::sum;
  double norm_mean = 0.5;
  double norm_std = 0.25;
  int image_size = 32;
  std::string calib_tag = "none";  // train | random-normal | none

  int n_students() const { return static_cast<int>(student_defs.size()); }
};

// --- losses over aligned pyramids ---

template <typename S>
double stfpm_loss(const FeaturePyramidT<S>& teacher, const FeaturePyramidT<S>& student) {
  return detail::loss_head(LossKind::stfpm, teacher, student).loss;
}

template <typename S>
double rd_cosine_loss(const FeaturePyramidT<S>& teacher, const FeaturePyramidT<S>& student) {
  return detail::loss_head(LossKind::rd_cosine, teacher, student).loss;
}

// --- anomaly scoring ---

// Per-layer, per-position half squared distance of channel-normalized
// features; each layer map upsampled to out_size and combined.
AnomalyMap anomaly_map(const FeaturePyramid& teacher, const FeaturePyramid& student, int out_h,
                       int out_w, MapCombine combine = MapCombine::sum);

// Ensemble regression error and predictive variance per pixel, both raw.
void us_raw_scores(const Tensor& teacher_emb, const std::vector<Tensor>& student_embs, Tensor& e,
                   Tensor& v);

// stats == nullptr: raw e + v. Otherwise each component is standardized by
// the stored statistics; the sum is clamped at zero to keep the map
// nonnegative.
AnomalyMap us_score_map(const Tensor& teacher_emb, const std::vector<Tensor>& student_embs,
                        const UsScoreStats* stats = nullptr);

float image_score(const AnomalyMap& map);

// --- toy architectures ---

ModelDef toy_backbone(int in_channels = 1);
ModelDef distill_student_def();
ModelDef rd_student_def();

// Tiny classifier pretraining on the synthetic class labels; returns the
// frozen backbone used as the teacher.
std::pair<ModelDef, Params> pretrain_teacher(const DatasetSpec& dataset, int image_size,
                                             std::uint64_t seed, double norm_mean,
                                             double norm_std, int epochs = 8);

// --- training ---

struct LossLogEntry {
  int epoch;
  int step;
  double loss;
};

DistilledModel train_student(const ModelDef& teacher_def, const Params& teacher_params,
                             Scheme scheme, const DatasetSpec& dataset, const TrainConfig& cfg,
                             std::vector<LossLogEntry>* loss_log = nullptr);

// --- quantization of the student(s); the teacher always stays float ---

// Activation/weight site ids for one student net, matching the integer
// engine's requantization points.
struct SiteLayout {
  std::string input_id;
  std::vector<std::string> weight_ids;      // per conv ordinal
  std::vector<std::string> site_ids;        // per conv ordinal (requant site)
  std::vector<int> placement;               // per conv ordinal: layer whose output is observed
  std::vector<std::string> all_ids() const;
};

SiteLayout student_site_layout(const DistilledModel& model, int student_idx);

DistilledModel ptq_quantize_model(const DistilledModel& model, const CalibrationPlan& plan);

DistilledModel qat_finetune(const DistilledModel& model, const CalibrationPlan& plan,
                            const DatasetSpec& dataset, const TrainConfig& cfg,
                            std::vector<LossLogEntry>* loss_log = nullptr);

DistilledModel to_half_model(const DistilledModel& model);

// --- inference ---

Tensor standardize_image(const DistilledModel& model, const Tensor& raw_image);
FeaturePyramid teacher_pyramid(const DistilledModel& model, const Tensor& std_image);

// Student pyramid under the model's precision (float, half-rounded, or the
// integer path with dequantized taps).
FeaturePyramid run_student(const DistilledModel& model, int student_idx, const Tensor& input);

AnomalyMap infer_anomaly_map(const DistilledModel& model, const Tensor& raw_image);

// Mean distillation loss over a dataset's train split under the model's
// precision path (used for PTQ/QAT comparisons).
double dataset_distill_loss(const DistilledModel& model, const DatasetSpec& dataset);

}  // namespace dqkd
