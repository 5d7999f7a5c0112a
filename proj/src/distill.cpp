#include "dqkd/distill.hpp"

#include "dqkd/dataset.hpp"
#include "dqkd/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <random>
#include <set>

namespace dqkd {

namespace {

constexpr double kNormEps = 1e-12;

std::uint64_t mix_seed(std::uint64_t base, std::uint64_t salt) {
  std::uint64_t x = base + 0x9e3779b97f4a7c15ull * (salt + 1);
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

}  // namespace

const char* scheme_name(Scheme s) {
  switch (s) {
    case Scheme::stfpm: return "stfpm";
    case Scheme::rd: return "rd";
    case Scheme::us: return "us";
  }
  return "?";
}

Scheme scheme_from_name(const std::string& name) {
  if (name == "stfpm") return Scheme::stfpm;
  if (name == "rd") return Scheme::rd;
  if (name == "us") return Scheme::us;
  fail("unknown scheme: " + name);
}

const char* precision_name(Precision p) {
  switch (p) {
    case Precision::fp32: return "fp32";
    case Precision::fp16: return "fp16";
    case Precision::ptq_int8: return "ptq-int8";
    case Precision::qat_int8: return "qat-int8";
  }
  return "?";
}

Precision precision_from_name(const std::string& name) {
  if (name == "fp32") return Precision::fp32;
  if (name == "fp16") return Precision::fp16;
  if (name == "ptq-int8" || name == "int8") return Precision::ptq_int8;
  if (name == "qat-int8") return Precision::qat_int8;
  fail("unknown precision: " + name);
}

TrainConfig default_train_config(Scheme scheme) {
  TrainConfig cfg;
  switch (scheme) {
    case Scheme::us:
      cfg.optimizer.kind = OptimizerSpec::Kind::adam;
      cfg.learning_rate = 1e-3;
      cfg.weight_decay = 1e-5;
      cfg.batch_size = 4;
      cfg.epochs = 25;
      break;
    case Scheme::rd:
      cfg.optimizer.kind = OptimizerSpec::Kind::adam;
      cfg.optimizer.beta1 = 0.5;
      cfg.optimizer.beta2 = 0.999;
      cfg.learning_rate = 0.005;
      cfg.weight_decay = 1e-5;
      cfg.batch_size = 8;
      cfg.epochs = 30;
      break;
    case Scheme::stfpm:
      cfg.optimizer.kind = OptimizerSpec::Kind::sgd;
      cfg.optimizer.momentum = 0.9;
      cfg.learning_rate = 0.4;
      cfg.weight_decay = 1e-4;
      cfg.batch_size = 8;
      cfg.epochs = 30;
      break;
  }
  return cfg;
}

// --- toy architectures ---

ModelDef toy_backbone(int in_channels) {
  ModelDef m;
  m.in_channels = in_channels;
  m.layers = {
      LayerDef::make_conv(3, 1, 1, in_channels, 16), LayerDef::make_relu(),
      LayerDef::make_conv(3, 2, 1, 16, 32),          LayerDef::make_relu(),
      LayerDef::make_conv(3, 2, 1, 32, 64),          LayerDef::make_relu(),
  };
  m.tap_points = {1, 3, 5};
  return m;
}

// Students deliberately use a different receptive-field layout than the
// teacher: an identical toy architecture converges to a weight-for-weight
// copy, which reproduces the teacher everywhere (anomalies included) and
// erases the imitation gap the anomaly score relies on.
ModelDef distill_student_def() {
  ModelDef m;
  m.in_channels = 1;
  m.layers = {
      LayerDef::make_conv(5, 1, 2, 1, 16), LayerDef::make_relu(),
      LayerDef::make_conv(5, 2, 2, 16, 32), LayerDef::make_relu(),
      LayerDef::make_conv(5, 2, 2, 32, 64), LayerDef::make_relu(),
  };
  m.tap_points = {1, 3, 5};
  return m;
}

ModelDef rd_student_def() {
  // bottleneck + decoder fed with the teacher's deepest feature map;
  // upsample+conv in place of transposed convolutions
  ModelDef m;
  m.in_channels = 64;
  m.layers = {
      LayerDef::make_conv(1, 1, 0, 64, 32),  LayerDef::make_relu(),
      LayerDef::make_conv(3, 1, 1, 32, 64),  LayerDef::make_relu(),
      LayerDef::make_upsample(2),            LayerDef::make_conv(3, 1, 1, 64, 32),
      LayerDef::make_relu(),                 LayerDef::make_upsample(2),
      LayerDef::make_conv(3, 1, 1, 32, 16),
  };
  m.tap_points = {2, 5, 8};  // shapes mirror the teacher taps in reverse
  return m;
}

// --- anomaly scoring ---

AnomalyMap anomaly_map(const FeaturePyramid& teacher, const FeaturePyramid& student, int out_h,
                       int out_w, MapCombine combine) {
  if (teacher.size() != student.size()) fail("anomaly_map: pyramid depth mismatch");
  if (teacher.empty()) fail("anomaly_map: empty pyramids");
  Tensor acc({out_h, out_w});
  if (combine == MapCombine::prod) acc.array().setConstant(1.0f);
  for (std::size_t l = 0; l < teacher.size(); ++l) {
    const auto& T = teacher[l];
    const auto& S = student[l];
    if (!T.same_shape(S))
      fail("anomaly_map: layer " + std::to_string(l) + " shape mismatch " + T.shape_str() +
           " vs " + S.shape_str());
    const int C = T.dim(0), H = T.dim(1), W = T.dim(2);
    const std::int64_t plane = static_cast<std::int64_t>(H) * W;
    Tensor layer_map({H, W});
    for (std::int64_t p = 0; p < plane; ++p) {
      double tn = 0.0, sn = 0.0;
      for (int c = 0; c < C; ++c) {
        tn += static_cast<double>(T.data()[c * plane + p]) * T.data()[c * plane + p];
        sn += static_cast<double>(S.data()[c * plane + p]) * S.data()[c * plane + p];
      }
      const double rt = std::max(std::sqrt(tn), kNormEps);
      const double rs = std::max(std::sqrt(sn), kNormEps);
      double half_sq = 0.0;
      for (int c = 0; c < C; ++c) {
        const double d = T.data()[c * plane + p] / rt - S.data()[c * plane + p] / rs;
        half_sq += 0.5 * d * d;
      }
      layer_map[p] = static_cast<float>(half_sq);
    }
    Tensor up = bilinear_upsample(layer_map, out_h, out_w);
    if (combine == MapCombine::sum)
      acc.array() += up.array();
    else
      acc.array() *= up.array();
  }
  return AnomalyMap{std::move(acc)};
}

void us_raw_scores(const Tensor& teacher_emb, const std::vector<Tensor>& student_embs, Tensor& e,
                   Tensor& v) {
  if (student_embs.size() < 2) fail("us_score_map: at least 2 students required");
  for (const auto& s : student_embs)
    if (!s.same_shape(teacher_emb))
      fail("us_score_map: student embedding shape " + s.shape_str() + " != teacher " +
           teacher_emb.shape_str());
  const int C = teacher_emb.dim(0), H = teacher_emb.dim(1), W = teacher_emb.dim(2);
  const std::int64_t plane = static_cast<std::int64_t>(H) * W;
  const double inv_n = 1.0 / static_cast<double>(student_embs.size());
  e = Tensor({H, W});
  v = Tensor({H, W});
  for (std::int64_t p = 0; p < plane; ++p) {
    double err = 0.0, var = 0.0;
    for (int c = 0; c < C; ++c) {
      double mean = 0.0;
      for (const auto& s : student_embs) mean += s.data()[c * plane + p];
      mean *= inv_n;
      const double d = mean - teacher_emb.data()[c * plane + p];
      err += d * d;
      for (const auto& s : student_embs) {
        const double dv = s.data()[c * plane + p] - mean;
        var += dv * dv * inv_n;
      }
    }
    e[p] = static_cast<float>(err);
    v[p] = static_cast<float>(var);
  }
}

AnomalyMap us_score_map(const Tensor& teacher_emb, const std::vector<Tensor>& student_embs,
                        const UsScoreStats* stats) {
  Tensor e, v;
  us_raw_scores(teacher_emb, student_embs, e, v);
  Tensor map(e.shape());
  if (!stats) {
    map.array() = e.array() + v.array();
  } else {
    for (std::int64_t i = 0; i < map.numel(); ++i) {
      const double es = (e[i] - stats->e_mean) / std::max(stats->e_std, kNormEps);
      const double vs = (v[i] - stats->v_mean) / std::max(stats->v_std, kNormEps);
      map[i] = static_cast<float>(std::max(0.0, es + vs));
    }
  }
  return AnomalyMap{std::move(map)};
}

float image_score(const AnomalyMap& map) {
  if (map.scores.numel() == 0) fail("image_score: empty map");
  return map.scores.array().maxCoeff();
}

// --- optimizers ---

namespace {

struct OptimizerState {
  std::vector<Tensor> m;  // momentum / first moment
  std::vector<Tensor> v;  // second moment (adam)
  std::int64_t t = 0;
};

OptimizerState make_opt_state(const std::vector<Tensor*>& params, OptimizerSpec::Kind kind) {
  OptimizerState st;
  for (const auto* p : params) {
    st.m.emplace_back(p->shape());
    if (kind == OptimizerSpec::Kind::adam) st.v.emplace_back(p->shape());
  }
  return st;
}

void optimizer_step(const TrainConfig& cfg, std::vector<Tensor*>& params,
                    const std::vector<const Tensor*>& grads, OptimizerState& st) {
  const auto& opt = cfg.optimizer;
  ++st.t;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i]->array();
    auto g0 = grads[i]->array();
    auto m = st.m[i].array();
    if (opt.kind == OptimizerSpec::Kind::sgd) {
      // g = grad + wd*p; buf = mu*buf + g; p -= lr*buf
      m = static_cast<float>(opt.momentum) * m + (g0 + static_cast<float>(cfg.weight_decay) * p);
      p -= static_cast<float>(cfg.learning_rate) * m;
    } else {
      auto v = st.v[i].array();
      const float b1 = static_cast<float>(opt.beta1), b2 = static_cast<float>(opt.beta2);
      Eigen::ArrayXf g = g0 + static_cast<float>(cfg.weight_decay) * p;
      m = b1 * m + (1.0f - b1) * g;
      v = b2 * v + (1.0f - b2) * g.square();
      const double bc1 = 1.0 - std::pow(opt.beta1, static_cast<double>(st.t));
      const double bc2 = 1.0 - std::pow(opt.beta2, static_cast<double>(st.t));
      p -= static_cast<float>(cfg.learning_rate) *
           (m / static_cast<float>(bc1)) /
           ((v / static_cast<float>(bc2)).sqrt() + 1e-8f);
    }
  }
}

}  // namespace

// --- teacher pretraining (tiny classifier, CE on class labels) ---

std::pair<ModelDef, Params> pretrain_teacher(const DatasetSpec& dataset, int image_size,
                                             std::uint64_t seed, double norm_mean,
                                             double norm_std, int epochs) {
  ModelDef def = toy_backbone(1);
  validate_model(def);
  Params params = init_params<float>(def, mix_seed(seed, 11));
  const int n_classes = dataset.n_classes();

  auto imgs = all_train_images(dataset);
  if (imgs.empty()) fail("pretrain_teacher: dataset has no training images");
  std::vector<Tensor> inputs;
  std::vector<int> labels;
  for (const auto& [item, cls] : imgs) {
    Tensor x(item->image.shape());
    x.array() = (item->image.array() - static_cast<float>(norm_mean)) /
                static_cast<float>(norm_std);
    inputs.push_back(std::move(x));
    labels.push_back(cls);
  }
  (void)image_size;

  // linear head on globally averaged deepest features
  const int feat_ch = 64;
  std::mt19937_64 rng(mix_seed(seed, 17));
  std::normal_distribution<double> dist(0.0, 0.05);
  Tensor head_w({n_classes, feat_ch});
  Tensor head_b({n_classes});
  for (std::int64_t i = 0; i < head_w.numel(); ++i)
    head_w[i] = static_cast<float>(dist(rng));

  TrainConfig cfg;
  cfg.optimizer.kind = OptimizerSpec::Kind::adam;
  cfg.learning_rate = 2e-3;
  cfg.batch_size = 8;
  cfg.epochs = epochs;
  cfg.seed = seed;

  std::vector<Tensor*> opt_params;
  for (auto* t : params.flat()) opt_params.push_back(t);
  opt_params.push_back(&head_w);
  opt_params.push_back(&head_b);
  OptimizerState st = make_opt_state(opt_params, cfg.optimizer.kind);

  std::vector<std::size_t> order(inputs.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t pos = 0; pos < order.size(); pos += cfg.batch_size) {
      const std::size_t bend = std::min(order.size(), pos + cfg.batch_size);
      const double inv_b = 1.0 / static_cast<double>(bend - pos);
      Gradients grads = detail::zero_like(params);
      Tensor gw(head_w.shape()), gb(head_b.shape());
      for (std::size_t bi = pos; bi < bend; ++bi) {
        const auto idx = order[bi];
        auto cache = detail::forward_cached<float>(def, params, inputs[idx], nullptr);
        const Tensor& feat = cache.out.back();
        const int C = feat.dim(0);
        const std::int64_t plane = static_cast<std::int64_t>(feat.dim(1)) * feat.dim(2);
        Eigen::VectorXd z(C);
        for (int c = 0; c < C; ++c) {
          double s = 0.0;
          for (std::int64_t p = 0; p < plane; ++p) s += feat.data()[c * plane + p];
          z[c] = s / static_cast<double>(plane);
        }
        Eigen::VectorXd logits(n_classes);
        for (int k = 0; k < n_classes; ++k) {
          double s = head_b[k];
          for (int c = 0; c < C; ++c) s += static_cast<double>(head_w[k * C + c]) * z[c];
          logits[k] = s;
        }
        const double mx = logits.maxCoeff();
        Eigen::VectorXd p = (logits.array() - mx).exp();
        p /= p.sum();
        Eigen::VectorXd dlogits = p;
        dlogits[labels[idx]] -= 1.0;
        dlogits *= inv_b;
        for (int k = 0; k < n_classes; ++k) {
          gb[k] += static_cast<float>(dlogits[k]);
          for (int c = 0; c < C; ++c)
            gw[k * C + c] += static_cast<float>(dlogits[k] * z[c]);
        }
        Tensor dfeat(feat.shape());
        for (int c = 0; c < C; ++c) {
          double dz = 0.0;
          for (int k = 0; k < n_classes; ++k)
            dz += static_cast<double>(head_w[k * C + c]) * dlogits[k];
          const float df = static_cast<float>(dz / static_cast<double>(plane));
          for (std::int64_t pp = 0; pp < plane; ++pp) dfeat.data()[c * plane + pp] = df;
        }
        detail::backward<float>(def, params, cache, {}, &dfeat, nullptr, grads);
      }
      std::vector<const Tensor*> gptrs;
      for (auto* t : grads.flat()) gptrs.push_back(t);
      gptrs.push_back(&gw);
      gptrs.push_back(&gb);
      optimizer_step(cfg, opt_params, gptrs, st);
    }
  }
  return {std::move(def), std::move(params)};
}

// --- training ---

namespace {

FeaturePyramid reversed(FeaturePyramid pyr) {
  std::reverse(pyr.begin(), pyr.end());
  return pyr;
}

struct SchemeData {
  std::vector<TrainExample<float>> examples;
};

// Per-image student input and aligned teacher target.
SchemeData build_examples(const DistilledModel& model, const DatasetSpec& dataset) {
  SchemeData data;
  for (const auto& [item, cls] : all_train_images(dataset)) {
    (void)cls;
    Tensor x = standardize_image(model, item->image);
    FeaturePyramid t_pyr = forward(model.teacher_def, model.teacher_params, x);
    TrainExample<float> ex;
    if (model.scheme == Scheme::rd) {
      ex.input = t_pyr.back();
      ex.target = reversed(std::move(t_pyr));
    } else {
      ex.input = std::move(x);
      ex.target = std::move(t_pyr);
    }
    data.examples.push_back(std::move(ex));
  }
  if (data.examples.empty()) fail("train_student: dataset has no training images");
  return data;
}

LossKind scheme_loss(Scheme s) {
  switch (s) {
    case Scheme::stfpm: return LossKind::stfpm;
    case Scheme::rd: return LossKind::rd_cosine;
    case Scheme::us: return LossKind::us_regression;
  }
  fail("scheme_loss: bad scheme");
}

}  // namespace

DistilledModel train_student(const ModelDef& teacher_def, const Params& teacher_params,
                             Scheme scheme, const DatasetSpec& dataset, const TrainConfig& cfg,
                             std::vector<LossLogEntry>* loss_log) {
  DistilledModel model;
  model.scheme = scheme;
  model.teacher_def = teacher_def;
  model.teacher_params = teacher_params;
  model.image_size = dataset.image_size;

  const int n_students = scheme == Scheme::us ? cfg.n_students : 1;
  if (scheme == Scheme::us && n_students < 2) fail("train_student: us scheme needs >= 2 students");

  for (int j = 0; j < n_students; ++j) {
    ModelDef def = scheme == Scheme::rd ? rd_student_def() : distill_student_def();
    validate_model(def);
    model.student_defs.push_back(def);
    model.student_params.push_back(
        init_params<float>(def, mix_seed(cfg.seed, 100 + static_cast<std::uint64_t>(j))));
  }

  SchemeData data = build_examples(model, dataset);
  const LossKind loss_kind = scheme_loss(scheme);

  // us scheme holds out every 4th image for the score statistics
  std::vector<std::size_t> train_idx, held_out;
  for (std::size_t i = 0; i < data.examples.size(); ++i) {
    if (scheme == Scheme::us && data.examples.size() >= 8 && i % 4 == 3)
      held_out.push_back(i);
    else
      train_idx.push_back(i);
  }

  for (int j = 0; j < n_students; ++j) {
    auto& params = model.student_params[static_cast<std::size_t>(j)];
    const auto& def = model.student_defs[static_cast<std::size_t>(j)];
    std::vector<Tensor*> opt_params = params.flat();
    OptimizerState st = make_opt_state(opt_params, cfg.optimizer.kind);
    std::mt19937_64 rng(mix_seed(cfg.seed, 7000 + static_cast<std::uint64_t>(j)));
    std::vector<std::size_t> order = train_idx;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
      std::shuffle(order.begin(), order.end(), rng);
      int step = 0;
      for (std::size_t pos = 0; pos < order.size(); pos += cfg.batch_size) {
        const std::size_t bend = std::min(order.size(), pos + cfg.batch_size);
        std::vector<const TrainExample<float>*> batch;
        for (std::size_t bi = pos; bi < bend; ++bi) batch.push_back(&data.examples[order[bi]]);
        auto [loss, grads] = loss_gradients_ptrs<float>(def, params, loss_kind, batch, nullptr);
        std::vector<const Tensor*> gptrs;
        for (auto* t : grads.flat()) gptrs.push_back(t);
        optimizer_step(cfg, opt_params, gptrs, st);
        if (loss_log) loss_log->push_back({epoch, step, loss});
        ++step;
      }
    }
  }

  if (scheme == Scheme::us) {
    const auto& stats_idx = held_out.empty() ? train_idx : held_out;
    double se = 0.0, se2 = 0.0, sv = 0.0, sv2 = 0.0;
    std::int64_t n = 0;
    for (std::size_t i : stats_idx) {
      const auto& ex = data.examples[i];
      const Tensor& t_emb = ex.target.back();
      std::vector<Tensor> embs;
      for (int j = 0; j < n_students; ++j)
        embs.push_back(forward(model.student_defs[static_cast<std::size_t>(j)],
                               model.student_params[static_cast<std::size_t>(j)], ex.input)
                           .back());
      Tensor e, v;
      us_raw_scores(t_emb, embs, e, v);
      for (std::int64_t p = 0; p < e.numel(); ++p) {
        se += e[p];
        se2 += static_cast<double>(e[p]) * e[p];
        sv += v[p];
        sv2 += static_cast<double>(v[p]) * v[p];
        ++n;
      }
    }
    const double inv = 1.0 / std::max<std::int64_t>(n, 1);
    model.us_stats.e_mean = se * inv;
    model.us_stats.v_mean = sv * inv;
    model.us_stats.e_std = std::sqrt(std::max(se2 * inv - model.us_stats.e_mean * model.us_stats.e_mean, 1e-12));
    model.us_stats.v_std = std::sqrt(std::max(sv2 * inv - model.us_stats.v_mean * model.us_stats.v_mean, 1e-12));
  }
  return model;
}

// --- quantization ---

std::vector<std::string> SiteLayout::all_ids() const {
  std::vector<std::string> out;
  out.push_back(input_id);
  for (const auto& s : site_ids) out.push_back(s);
  for (const auto& w : weight_ids) out.push_back(w);
  return out;
}

SiteLayout student_site_layout(const DistilledModel& model, int student_idx) {
  if (student_idx < 0 || student_idx >= model.n_students())
    fail("student_site_layout: bad student index");
  const auto& def = model.student_defs[static_cast<std::size_t>(student_idx)];
  const std::string prefix =
      model.scheme == Scheme::us ? "s" + std::to_string(student_idx) + "." : "student.";
  const auto taps = def.effective_taps();
  const std::set<int> tap_set(taps.begin(), taps.end());

  SiteLayout layout;
  layout.input_id = prefix + "input";
  int k = 0;
  for (int i = 0; i < static_cast<int>(def.layers.size()); ++i) {
    if (def.layers[static_cast<std::size_t>(i)].kind != LayerDef::Kind::conv) continue;
    // observe after an immediately following relu unless the conv output
    // itself is a tap (rd decoder taps want the signed pre-relu values)
    int placement = i;
    if (i + 1 < static_cast<int>(def.layers.size()) &&
        def.layers[static_cast<std::size_t>(i + 1)].kind == LayerDef::Kind::relu &&
        tap_set.count(i) == 0)
      placement = i + 1;
    layout.weight_ids.push_back(prefix + "w" + std::to_string(k));
    layout.site_ids.push_back(prefix + "act" + std::to_string(k));
    layout.placement.push_back(placement);
    ++k;
  }
  return layout;
}

namespace {

DistilledModel quantize_students(const DistilledModel& model, const CalibrationPlan& plan,
                                 Precision precision) {
  if (model.precision != Precision::fp32)
    fail("quantize: expects a float model, got " + std::string(precision_name(model.precision)));

  // plan must cover the sites exactly
  std::set<std::string> wanted;
  for (int si = 0; si < model.n_students(); ++si)
    for (const auto& id : student_site_layout(model, si).all_ids()) wanted.insert(id);
  std::set<std::string> have;
  for (const auto& e : plan.entries) have.insert(e.site_id);
  std::string missing, extra;
  for (const auto& id : wanted)
    if (!have.count(id)) missing += (missing.empty() ? "" : ", ") + id;
  for (const auto& id : have)
    if (!wanted.count(id)) extra += (extra.empty() ? "" : ", ") + id;
  if (!missing.empty()) fail("quantize: plan is missing sites: " + missing);
  if (!extra.empty()) fail("quantize: plan has unknown sites: " + extra);

  DistilledModel out = model;
  out.precision = precision;
  out.plan = plan;
  out.qnets.clear();
  for (int si = 0; si < model.n_students(); ++si) {
    const auto layout = student_site_layout(model, si);
    const auto& def = model.student_defs[static_cast<std::size_t>(si)];
    auto& params = out.student_params[static_cast<std::size_t>(si)];
    QuantizedNet qn;
    qn.input_qp = plan.find(layout.input_id)->qp;
    QuantParams cur = qn.input_qp;
    int k = 0;
    for (const auto& layer : def.layers) {
      if (layer.kind != LayerDef::Kind::conv) continue;
      const auto& wqp = plan.find(layout.weight_ids[static_cast<std::size_t>(k)])->qp;
      const auto& aqp = plan.find(layout.site_ids[static_cast<std::size_t>(k)])->qp;
      qn.weights.push_back(quantize(params.weights[static_cast<std::size_t>(k)], wqp));
      std::vector<std::int32_t> bq;
      const auto& bias = params.biases[static_cast<std::size_t>(k)];
      if (!bias.empty()) {
        const double bias_scale = cur.scale * wqp.scale;
        for (std::int64_t i = 0; i < bias.numel(); ++i) {
          const double q = round_half_even(static_cast<double>(bias[i]) / bias_scale);
          if (std::abs(q) > 2147483000.0) fail("quantize: bias overflow in int32");
          bq.push_back(static_cast<std::int32_t>(q));
        }
      }
      qn.biases.push_back(std::move(bq));
      qn.conv_out_qp.push_back(aqp);
      cur = aqp;
      ++k;
    }
    // keep float weights on the dequantized grid for introspection
    for (std::size_t w = 0; w < params.weights.size(); ++w)
      params.weights[w] = dequantize(qn.weights[w]);
    out.qnets.push_back(std::move(qn));
  }
  return out;
}

}  // namespace

DistilledModel ptq_quantize_model(const DistilledModel& model, const CalibrationPlan& plan) {
  return quantize_students(model, plan, Precision::ptq_int8);
}

DistilledModel to_half_model(const DistilledModel& model) {
  if (model.precision != Precision::fp32) fail("to_half_model: expects a float model");
  DistilledModel out = model;
  out.precision = Precision::fp16;
  for (auto& params : out.student_params) {
    for (auto& w : params.weights) w = to_half_precision(w);
    for (auto& b : params.biases)
      if (!b.empty()) b = to_half_precision(b);
  }
  return out;
}

DistilledModel qat_finetune(const DistilledModel& model, const CalibrationPlan& plan,
                            const DatasetSpec& dataset, const TrainConfig& cfg,
                            std::vector<LossLogEntry>* loss_log) {
  if (model.precision != Precision::fp32) fail("qat_finetune: expects a float model");
  DistilledModel work = model;
  const LossKind loss_kind = scheme_loss(model.scheme);
  SchemeData data = build_examples(work, dataset);

  // per-student fake-quant state seeded from the plan
  struct StudentQat {
    SiteLayout layout;
    QatSites sites;
    std::vector<RunningHistogram> act_hists;  // input + per conv site
    int bits = 8;
  };
  std::vector<StudentQat> sq;
  for (int si = 0; si < work.n_students(); ++si) {
    StudentQat s;
    s.layout = student_site_layout(work, si);
    const auto& def = work.student_defs[static_cast<std::size_t>(si)];
    const auto* input_entry = plan.find(s.layout.input_id);
    if (!input_entry) fail("qat_finetune: plan is missing site " + s.layout.input_id);
    s.bits = input_entry->qp.bits;
    s.sites.input = input_entry->qp;
    s.sites.weight.resize(work.student_params[static_cast<std::size_t>(si)].weights.size());
    s.sites.after_layer.resize(def.layers.size());
    for (std::size_t k = 0; k < s.layout.weight_ids.size(); ++k) {
      const auto* we = plan.find(s.layout.weight_ids[k]);
      const auto* ae = plan.find(s.layout.site_ids[k]);
      if (!we || !ae)
        fail("qat_finetune: plan is missing sites for conv " + std::to_string(k));
      s.sites.weight[k] = we->qp;
      s.sites.after_layer[static_cast<std::size_t>(s.layout.placement[k])] = ae->qp;
    }
    s.act_hists.assign(1 + s.layout.site_ids.size(), RunningHistogram());
    sq.push_back(std::move(s));
  }

  for (int si = 0; si < work.n_students(); ++si) {
    auto& params = work.student_params[static_cast<std::size_t>(si)];
    const auto& def = work.student_defs[static_cast<std::size_t>(si)];
    auto& s = sq[static_cast<std::size_t>(si)];
    std::vector<Tensor*> opt_params = params.flat();
    OptimizerState st = make_opt_state(opt_params, cfg.optimizer.kind);
    std::mt19937_64 rng(mix_seed(cfg.seed, 9000 + static_cast<std::uint64_t>(si)));
    std::vector<std::size_t> order(data.examples.size());
    std::iota(order.begin(), order.end(), std::size_t{0});

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
      std::shuffle(order.begin(), order.end(), rng);
      int step = 0;
      for (std::size_t pos = 0; pos < order.size(); pos += cfg.batch_size) {
        const std::size_t bend = std::min(order.size(), pos + cfg.batch_size);
        const double inv_b = 1.0 / static_cast<double>(bend - pos);
        Gradients grads = detail::zero_like(params);
        double loss = 0.0;
        for (std::size_t bi = pos; bi < bend; ++bi) {
          const auto& ex = data.examples[order[bi]];
          auto cache = detail::forward_cached<float>(def, params, ex.input, &s.sites);
          // observers track the pre-fake-quant dynamic ranges
          observe(s.act_hists[0], cache.input_raw);
          for (std::size_t k = 0; k < s.layout.placement.size(); ++k)
            observe(s.act_hists[k + 1],
                    cache.raw[static_cast<std::size_t>(s.layout.placement[k])]);
          FeaturePyramidT<float> taps;
          for (int t : def.effective_taps()) taps.push_back(cache.out[static_cast<std::size_t>(t)]);
          auto lr = detail::loss_head(loss_kind, ex.target, taps);
          if (!std::isfinite(lr.loss))
            fail("qat_finetune: non-finite loss at batch index " + std::to_string(bi - pos));
          loss += lr.loss * inv_b;
          for (auto& d : lr.dtaps) d.array() *= static_cast<float>(inv_b);
          detail::backward<float>(def, params, cache, lr.dtaps, nullptr, &s.sites, grads);
        }
        std::vector<const Tensor*> gptrs;
        for (auto* t : grads.flat()) gptrs.push_back(t);
        optimizer_step(cfg, opt_params, gptrs, st);
        if (loss_log) loss_log->push_back({epoch, step, loss});
        ++step;

        // refresh observers: activations by running min/max, weights by absmax
        auto [a0, b0] = minmax_calibrate(s.act_hists[0]);
        s.sites.input = compute_qparams(a0, b0, s.bits, QuantMode::affine_unsigned);
        for (std::size_t k = 0; k < s.layout.placement.size(); ++k) {
          auto [a, b] = minmax_calibrate(s.act_hists[k + 1]);
          s.sites.after_layer[static_cast<std::size_t>(s.layout.placement[k])] =
              compute_qparams(a, b, s.bits, QuantMode::affine_unsigned);
        }
        for (std::size_t k = 0; k < params.weights.size(); ++k) {
          const float m = params.weights[k].array().abs().maxCoeff();
          const double mm = std::max(static_cast<double>(m), 1e-12);
          s.sites.weight[k] = compute_qparams(-mm, mm, s.bits, QuantMode::symmetric_signed);
        }
      }
    }
  }

  // convert with the fake-quant modules' final parameters
  CalibrationPlan final_plan;
  for (int si = 0; si < work.n_students(); ++si) {
    const auto& s = sq[static_cast<std::size_t>(si)];
    auto push = [&](const std::string& id, bool is_weight, const QuantParams& qp) {
      PlanEntry e;
      e.site_id = id;
      e.is_weight = is_weight;
      e.qp = qp;
      const auto* orig = plan.find(id);
      e.objective = orig ? orig->objective : "minmax";
      final_plan.entries.push_back(std::move(e));
    };
    push(s.layout.input_id, false, *s.sites.input);
    for (std::size_t k = 0; k < s.layout.site_ids.size(); ++k)
      push(s.layout.site_ids[k], false,
           *s.sites.after_layer[static_cast<std::size_t>(s.layout.placement[k])]);
    for (std::size_t k = 0; k < s.layout.weight_ids.size(); ++k)
      push(s.layout.weight_ids[k], true, *s.sites.weight[k]);
  }
  return quantize_students(work, final_plan, Precision::qat_int8);
}

// --- inference ---

Tensor standardize_image(const DistilledModel& model, const Tensor& raw_image) {
  Tensor x(raw_image.shape());
  x.array() = (raw_image.array() - static_cast<float>(model.norm_mean)) /
              static_cast<float>(model.norm_std);
  return x;
}

FeaturePyramid teacher_pyramid(const DistilledModel& model, const Tensor& std_image) {
  return forward(model.teacher_def, model.teacher_params, std_image);
}

namespace {

FeaturePyramid run_student_half(const ModelDef& def, const Params& params, const Tensor& input) {
  // weights already on the binary16 grid; activations re-round per layer
  Tensor x = to_half_precision(input);
  FeaturePyramid taps;
  const auto tap_list = def.effective_taps();
  int k = 0;
  std::vector<Tensor> outs;
  const Tensor* cur = &x;
  for (std::size_t i = 0; i < def.layers.size(); ++i) {
    const auto& layer = def.layers[i];
    const Tensor* w = nullptr;
    const Tensor* b = nullptr;
    if (layer.kind == LayerDef::Kind::conv) {
      w = &params.weights[static_cast<std::size_t>(k)];
      b = &params.biases[static_cast<std::size_t>(k)];
      ++k;
    }
    Tensor y = to_half_precision(apply_layer(layer, *cur, w, b));
    outs.push_back(std::move(y));
    cur = &outs.back();
  }
  for (int t : tap_list) taps.push_back(outs[static_cast<std::size_t>(t)]);
  return taps;
}

FeaturePyramid run_student_int8(const ModelDef& def, const QuantizedNet& qn, const Tensor& input) {
  IntTensor x = quantize(input, qn.input_qp);
  FeaturePyramid taps;
  const auto tap_list = def.effective_taps();
  const std::set<int> tap_set(tap_list.begin(), tap_list.end());
  std::map<int, Tensor> tap_vals;
  int k = 0;
  for (int i = 0; i < static_cast<int>(def.layers.size()); ++i) {
    const auto& layer = def.layers[static_cast<std::size_t>(i)];
    switch (layer.kind) {
      case LayerDef::Kind::conv: {
        x = quantized_conv2d(x, qn.weights[static_cast<std::size_t>(k)],
                             qn.biases[static_cast<std::size_t>(k)],
                             qn.conv_out_qp[static_cast<std::size_t>(k)], layer.conv.stride,
                             layer.conv.pad);
        ++k;
        break;
      }
      case LayerDef::Kind::relu: {
        const std::int32_t z = x.qp.zero_point;
        for (std::int64_t p = 0; p < x.numel(); ++p) x.q[p] = std::max(x.q[p], z);
        break;
      }
      case LayerDef::Kind::maxpool: {
        TensorT<std::int32_t> pooled =
            maxpool2d(x.q, layer.pool_kernel, layer.pool_stride);
        x.q = std::move(pooled);
        break;
      }
      case LayerDef::Kind::upsample: {
        // interpolate in float, re-round onto the same grid
        Tensor f = dequantize(x);
        Tensor up = bilinear_upsample(f, f.dim(1) * layer.up_factor, f.dim(2) * layer.up_factor);
        x = quantize(up, x.qp);
        break;
      }
    }
    if (tap_set.count(i)) tap_vals.emplace(i, dequantize(x));
  }
  for (int t : tap_list) taps.push_back(tap_vals.at(t));
  return taps;
}

}  // namespace

FeaturePyramid run_student(const DistilledModel& model, int student_idx, const Tensor& input) {
  const auto& def = model.student_defs.at(static_cast<std::size_t>(student_idx));
  const auto& params = model.student_params.at(static_cast<std::size_t>(student_idx));
  switch (model.precision) {
    case Precision::fp32: return forward(def, params, input);
    case Precision::fp16: return run_student_half(def, params, input);
    case Precision::ptq_int8:
    case Precision::qat_int8:
      return run_student_int8(def, model.qnets.at(static_cast<std::size_t>(student_idx)), input);
  }
  fail("run_student: bad precision");
}

AnomalyMap infer_anomaly_map(const DistilledModel& model, const Tensor& raw_image) {
  const int H = raw_image.dim(raw_image.rank() - 2);
  const int W = raw_image.dim(raw_image.rank() - 1);
  Tensor x = standardize_image(model, raw_image);
  FeaturePyramid t_pyr = teacher_pyramid(model, x);
  switch (model.scheme) {
    case Scheme::stfpm: {
      FeaturePyramid s_pyr = run_student(model, 0, x);
      return anomaly_map(t_pyr, s_pyr, H, W, model.combine);
    }
    case Scheme::rd: {
      FeaturePyramid s_pyr = run_student(model, 0, t_pyr.back());
      return anomaly_map(reversed(std::move(t_pyr)), s_pyr, H, W, model.combine);
    }
    case Scheme::us: {
      std::vector<Tensor> embs;
      for (int j = 0; j < model.n_students(); ++j)
        embs.push_back(run_student(model, j, x).back());
      AnomalyMap m = us_score_map(t_pyr.back(), embs, &model.us_stats);
      if (m.scores.dim(0) != H || m.scores.dim(1) != W)
        m.scores = bilinear_upsample(m.scores, H, W);
      return m;
    }
  }
  fail("infer_anomaly_map: bad scheme");
}

double dataset_distill_loss(const DistilledModel& model, const DatasetSpec& dataset) {
  const LossKind kind = scheme_loss(model.scheme);
  double total = 0.0;
  std::int64_t n = 0;
  for (const auto& [item, cls] : all_train_images(dataset)) {
    (void)cls;
    Tensor x = standardize_image(model, item->image);
    FeaturePyramid t_pyr = teacher_pyramid(model, x);
    const Tensor& input = model.scheme == Scheme::rd ? t_pyr.back() : x;
    FeaturePyramid target =
        model.scheme == Scheme::rd ? reversed(t_pyr) : t_pyr;
    for (int j = 0; j < model.n_students(); ++j) {
      FeaturePyramid s_pyr = run_student(model, j, input);
      total += detail::loss_head(kind, target, s_pyr).loss;
      ++n;
    }
  }
  return total / static_cast<double>(std::max<std::int64_t>(n, 1));
}

}  // namespace dqkd
