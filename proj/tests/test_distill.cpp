#include <doctest.h>

#include "dqkd/bench.hpp"
#include "dqkd/calib.hpp"
#include "dqkd/dataset.hpp"
#include "dqkd/distill.hpp"

#include <cstring>

using namespace dqkd;

namespace {

struct Fixture {
  DatasetSpec ds;
  ModelDef teacher_def;
  Params teacher_params;

  explicit Fixture(int classes = 2, int per_class = 8, std::uint64_t seed = 3) {
    ds = generate_synthetic_dataset(classes, per_class, 32, seed);
    auto tp = pretrain_teacher(ds, ds.image_size, seed, 0.5, 0.25, 2);
    teacher_def = std::move(tp.first);
    teacher_params = std::move(tp.second);
  }

  DistilledModel quick_train(Scheme scheme, int epochs, std::uint64_t seed,
                             std::vector<LossLogEntry>* log = nullptr) const {
    TrainConfig cfg = default_train_config(scheme);
    cfg.epochs = epochs;
    cfg.seed = seed;
    return train_student(teacher_def, teacher_params, scheme, ds, cfg, log);
  }
};

bool params_equal(const Params& a, const Params& b) {
  if (a.weights.size() != b.weights.size()) return false;
  for (std::size_t i = 0; i < a.weights.size(); ++i) {
    if (a.weights[i].numel() != b.weights[i].numel()) return false;
    if (std::memcmp(a.weights[i].data(), b.weights[i].data(),
                    static_cast<std::size_t>(a.weights[i].numel()) * sizeof(float)) != 0)
      return false;
    if (a.biases[i].empty() != b.biases[i].empty()) return false;
    if (!a.biases[i].empty() &&
        std::memcmp(a.biases[i].data(), b.biases[i].data(),
                    static_cast<std::size_t>(a.biases[i].numel()) * sizeof(float)) != 0)
      return false;
  }
  return true;
}

}  // namespace

TEST_CASE("us_score_map raw arithmetic") {
  // 1-channel single pixel: teacher 0, students {1, -1, 0}
  Tensor teacher({1, 1, 1}, {0.0f});
  std::vector<Tensor> students{Tensor({1, 1, 1}, {1.0f}), Tensor({1, 1, 1}, {-1.0f}),
                               Tensor({1, 1, 1}, {0.0f})};
  Tensor e, v;
  us_raw_scores(teacher, students, e, v);
  CHECK(e[0] == doctest::Approx(0.0));
  CHECK(v[0] == doctest::Approx(2.0 / 3.0));

  // doubling every embedding scales e and v by 4
  Tensor teacher2({1, 1, 1}, {0.4f});
  std::vector<Tensor> s2{Tensor({1, 1, 1}, {1.2f}), Tensor({1, 1, 1}, {-0.6f})};
  Tensor e1, v1, e2, v2;
  us_raw_scores(teacher2, s2, e1, v1);
  Tensor teacher4({1, 1, 1}, {0.8f});
  std::vector<Tensor> s4{Tensor({1, 1, 1}, {2.4f}), Tensor({1, 1, 1}, {-1.2f})};
  us_raw_scores(teacher4, s4, e2, v2);
  CHECK(e2[0] == doctest::Approx(4.0f * e1[0]));
  CHECK(v2[0] == doctest::Approx(4.0f * v1[0]));

  // identical students and teacher: zero raw map
  std::vector<Tensor> same{teacher, teacher};
  Tensor e0, v0;
  us_raw_scores(teacher, same, e0, v0);
  CHECK(e0[0] == 0.0f);
  CHECK(v0[0] == 0.0f);

  CHECK_THROWS_WITH_AS(us_raw_scores(teacher, {teacher}, e, v), doctest::Contains("2 students"),
                       TensorError);
}

TEST_CASE("anomaly_map: identity, locality, bound") {
  FeaturePyramid t{Tensor::full({4, 4, 4}, 0.5f), Tensor::full({8, 2, 2}, 0.25f)};
  AnomalyMap zero = anomaly_map(t, t, 8, 8);
  CHECK(zero.scores.array().maxCoeff() == 0.0f);

  // a disturbance confined to one cell peaks inside that cell's footprint
  FeaturePyramid s = t;
  s[1](3, 1, 1) = 5.0f;
  AnomalyMap m = anomaly_map(t, s, 8, 8);
  float best = -1.0f;
  int best_r = -1, best_c = -1;
  for (int r = 0; r < 8; ++r)
    for (int c = 0; c < 8; ++c)
      if (m.scores(r, c) > best) {
        best = m.scores(r, c);
        best_r = r;
        best_c = c;
      }
  CHECK(best > 0.0f);
  CHECK(best_r >= 4);  // bottom-right quadrant footprint of cell (1,1) in a 2x2 map
  CHECK(best_c >= 4);

  // unit-norm features bound the combined map by 2 * n_layers
  CHECK(m.scores.array().maxCoeff() <= 2.0f * 2 + 1e-5f);

  // positive rescaling leaves the argmax location unchanged
  FeaturePyramid t_scaled, s_scaled;
  for (const auto& f : t) {
    Tensor g(f.shape());
    g.array() = f.array() * 3.0f;
    t_scaled.push_back(std::move(g));
  }
  for (const auto& f : s) {
    Tensor g(f.shape());
    g.array() = f.array() * 3.0f;
    s_scaled.push_back(std::move(g));
  }
  AnomalyMap m2 = anomaly_map(t_scaled, s_scaled, 8, 8);
  int r2 = -1, c2 = -1;
  float b2 = -1.0f;
  for (int r = 0; r < 8; ++r)
    for (int c = 0; c < 8; ++c)
      if (m2.scores(r, c) > b2) {
        b2 = m2.scores(r, c);
        r2 = r;
        c2 = c;
      }
  CHECK(r2 == best_r);
  CHECK(c2 == best_c);
}

TEST_CASE("image_score") {
  AnomalyMap zero{Tensor({3, 3})};
  CHECK(image_score(zero) == 0.0f);
  Tensor hot({2, 2});
  hot(1, 0) = 3.2f;
  CHECK(image_score(AnomalyMap{hot}) == doctest::Approx(3.2f));
  // permutation invariance
  Tensor perm({2, 2});
  perm(0, 1) = 3.2f;
  CHECK(image_score(AnomalyMap{perm}) == image_score(AnomalyMap{hot}));
}

TEST_CASE("train_student: loss decreases and runs are bit-identical") {
  Fixture fx(1, 16, 11);
  std::vector<LossLogEntry> log;
  TrainConfig cfg = default_train_config(Scheme::stfpm);
  cfg.epochs = 13;  // about 200 steps on 16 images at batch 8
  cfg.seed = 11;
  DistilledModel m1 =
      train_student(fx.teacher_def, fx.teacher_params, Scheme::stfpm, fx.ds, cfg, &log);
  REQUIRE(log.size() >= 20);
  CHECK(log.back().loss < 0.5 * log.front().loss);

  DistilledModel m2 = train_student(fx.teacher_def, fx.teacher_params, Scheme::stfpm, fx.ds, cfg);
  CHECK(params_equal(m1.student_params[0], m2.student_params[0]));
}

TEST_CASE("train_student: student initialized at the teacher is a fixed point") {
  Fixture fx(1, 8, 13);
  // same-architecture student seeded from the teacher weights: loss starts at 0
  DistilledModel model;
  model.scheme = Scheme::stfpm;
  model.teacher_def = fx.teacher_def;
  model.teacher_params = fx.teacher_params;
  model.student_defs = {fx.teacher_def};
  model.student_params = {fx.teacher_params};
  model.image_size = fx.ds.image_size;
  CHECK(dataset_distill_loss(model, fx.ds) == doctest::Approx(0.0));
}

TEST_CASE("rd scheme trains and infers with matching shapes") {
  Fixture fx(2, 6, 17);
  DistilledModel model = fx.quick_train(Scheme::rd, 2, 17);
  AnomalyMap m = infer_anomaly_map(model, fx.ds.classes[0].test[0].image);
  CHECK(m.scores.shape() == std::vector<int>{32, 32});
  CHECK(m.scores.array().minCoeff() >= 0.0f);
  CHECK(m.scores.all_finite());
}

TEST_CASE("us scheme trains, stores stats, and maps are nonnegative") {
  Fixture fx(1, 9, 19);
  TrainConfig cfg = default_train_config(Scheme::us);
  cfg.epochs = 2;
  cfg.seed = 19;
  cfg.n_students = 2;
  DistilledModel model =
      train_student(fx.teacher_def, fx.teacher_params, Scheme::us, fx.ds, cfg);
  CHECK(model.n_students() == 2);
  CHECK(model.us_stats.e_std > 0.0);
  AnomalyMap m = infer_anomaly_map(model, fx.ds.classes[0].test.back().image);
  CHECK(m.scores.array().minCoeff() >= 0.0f);
}

TEST_CASE("ptq: teacher untouched, plan mismatch errors, size shrinks") {
  Fixture fx(1, 8, 23);
  DistilledModel model = fx.quick_train(Scheme::stfpm, 2, 23);
  CalibrationSource src = CalibrationSource::from_dataset(fx.ds, 4);
  CalibrationPlan plan = calibrate_model(model, src, CalibObjective::minmax, 8);

  DistilledModel q = ptq_quantize_model(model, plan);
  CHECK(q.precision == Precision::ptq_int8);
  CHECK(params_equal(q.teacher_params, model.teacher_params));

  const SizeBreakdown fp = model_size(model);
  const SizeBreakdown qs = model_size(q);
  CHECK(qs.student < 0.3 * fp.student);
  CHECK(qs.teacher == fp.teacher);

  // anomaly map within a tolerance band of the float map
  const Tensor& img = fx.ds.classes[0].test[0].image;
  AnomalyMap fm = infer_anomaly_map(model, img);
  AnomalyMap qm = infer_anomaly_map(q, img);
  double max_delta = 0.0;
  for (std::int64_t i = 0; i < fm.scores.numel(); ++i)
    max_delta = std::max(max_delta, std::abs(double(fm.scores[i]) - qm.scores[i]));
  CHECK(max_delta < 0.35);  // bounded by accumulated step errors at 8 bits

  CalibrationPlan broken = plan;
  broken.entries.erase(broken.entries.begin());
  CHECK_THROWS_WITH_AS(ptq_quantize_model(model, broken), doctest::Contains("missing"),
                       TensorError);
  CalibrationPlan extra = plan;
  PlanEntry bogus = plan.entries.front();
  bogus.site_id = "student.actual_nonsense";
  extra.entries.push_back(bogus);
  CHECK_THROWS_WITH_AS(ptq_quantize_model(model, extra), doctest::Contains("unknown"),
                       TensorError);
}

TEST_CASE("qat with zero epochs equals ptq") {
  Fixture fx(1, 8, 29);
  DistilledModel model = fx.quick_train(Scheme::stfpm, 2, 29);
  CalibrationSource src = CalibrationSource::from_dataset(fx.ds, 4);
  CalibrationPlan plan = calibrate_model(model, src, CalibObjective::entropy, 8);

  DistilledModel ptq = ptq_quantize_model(model, plan);
  TrainConfig cfg = default_train_config(Scheme::stfpm);
  cfg.epochs = 0;
  cfg.seed = 29;
  DistilledModel qat0 = qat_finetune(model, plan, fx.ds, cfg);

  REQUIRE(ptq.qnets.size() == qat0.qnets.size());
  for (std::size_t si = 0; si < ptq.qnets.size(); ++si) {
    const auto& a = ptq.qnets[si];
    const auto& b = qat0.qnets[si];
    REQUIRE(a.weights.size() == b.weights.size());
    for (std::size_t k = 0; k < a.weights.size(); ++k) {
      CHECK(a.weights[k].qp.scale == b.weights[k].qp.scale);
      for (std::int64_t i = 0; i < a.weights[k].numel(); ++i)
        CHECK(a.weights[k].q[i] == b.weights[k].q[i]);
      CHECK(a.biases[k] == b.biases[k]);
      CHECK(a.conv_out_qp[k].scale == b.conv_out_qp[k].scale);
      CHECK(a.conv_out_qp[k].zero_point == b.conv_out_qp[k].zero_point);
    }
  }
  // extensionally equal on an image
  const Tensor& img = fx.ds.classes[0].test[0].image;
  AnomalyMap ma = infer_anomaly_map(ptq, img);
  AnomalyMap mb = infer_anomaly_map(qat0, img);
  for (std::int64_t i = 0; i < ma.scores.numel(); ++i) CHECK(ma.scores[i] == mb.scores[i]);
}

TEST_CASE("qat fine-tuning lowers the fake-quant training loss vs ptq") {
  Fixture fx(1, 8, 31);
  DistilledModel model = fx.quick_train(Scheme::stfpm, 3, 31);
  CalibrationSource src = CalibrationSource::from_dataset(fx.ds, 4);
  CalibrationPlan plan = calibrate_model(model, src, CalibObjective::minmax, 8);

  DistilledModel ptq = ptq_quantize_model(model, plan);
  TrainConfig cfg = default_train_config(Scheme::stfpm);
  cfg.epochs = 2;
  cfg.learning_rate = 0.05;
  cfg.seed = 31;
  DistilledModel qat = qat_finetune(model, plan, fx.ds, cfg);
  CHECK(params_equal(qat.teacher_params, model.teacher_params));

  const double ptq_loss = dataset_distill_loss(ptq, fx.ds);
  const double qat_loss = dataset_distill_loss(qat, fx.ds);
  CHECK(qat_loss <= ptq_loss + 1e-9);
}

TEST_CASE("fp16 student conversion keeps the teacher float and shrinks payloads") {
  Fixture fx(1, 6, 37);
  DistilledModel model = fx.quick_train(Scheme::stfpm, 1, 37);
  DistilledModel half = to_half_model(model);
  CHECK(half.precision == Precision::fp16);
  CHECK(params_equal(half.teacher_params, model.teacher_params));
  const SizeBreakdown fp = model_size(model);
  const SizeBreakdown hp = model_size(half);
  CHECK(hp.student < 0.6 * fp.student);
  AnomalyMap m = infer_anomaly_map(half, fx.ds.classes[0].test[0].image);
  CHECK(m.scores.all_finite());
}
