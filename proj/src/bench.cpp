#include "dqkd/bench.hpp"

#include "dqkd/metrics.hpp"

#include <nlohmann/json.hpp>

#include <atomic>
#include <chrono>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <thread>

namespace fs = std::filesystem;

namespace dqkd {

namespace {

int eval_threads() {
  const char* env = std::getenv("DQ_THREADS");
  if (!env) return 1;
  const int v = std::atoi(env);
  if (v < 1) return 1;
  const unsigned hw = std::thread::hardware_concurrency();
  return std::min(v, static_cast<int>(hw ? hw : 1u));
}

}  // namespace

EvalReport evaluate_variant(const DistilledModel& model, const DatasetSpec& dataset,
                            int n_timing_runs, bool keep_heatmaps) {
  if (dataset.classes.empty()) fail("evaluate_variant: empty dataset");
  if (dataset.image_size != model.image_size)
    fail("evaluate_variant: dataset image size " + std::to_string(dataset.image_size) +
         " != model image size " + std::to_string(model.image_size));

  EvalReport report;
  report.scheme = scheme_name(model.scheme);
  report.precision = precision_name(model.precision);
  report.calibration = model.calib_tag;
  report.objective = "none";
  report.mode = dataset.n_classes() > 1 ? "multiclass" : "oneclass";
  if (model.plan && !model.plan->entries.empty())
    report.objective = model.plan->entries.front().objective;
  report.size = model_size(model);

  // deterministic image order: (class, sorted id)
  struct Job {
    int cls;
    const ImageItem* item;
  };
  std::vector<Job> jobs;
  for (int c = 0; c < dataset.n_classes(); ++c) {
    std::vector<const ImageItem*> items;
    for (const auto& it : dataset.classes[static_cast<std::size_t>(c)].test)
      items.push_back(&it);
    std::sort(items.begin(), items.end(),
              [](const ImageItem* a, const ImageItem* b) { return a->id < b->id; });
    for (const auto* it : items) jobs.push_back({c, it});
  }
  if (jobs.empty()) fail("evaluate_variant: dataset has no test images");

  std::vector<Tensor> maps(jobs.size());
  const int threads = eval_threads();
  if (threads <= 1) {
    for (std::size_t i = 0; i < jobs.size(); ++i)
      maps[i] = infer_anomaly_map(model, jobs[i].item->image).scores;
  } else {
    std::vector<std::thread> pool;
    std::atomic<std::size_t> next{0};
    for (int t = 0; t < threads; ++t)
      pool.emplace_back([&]() {
        while (true) {
          const std::size_t i = next.fetch_add(1);
          if (i >= jobs.size()) return;
          maps[i] = infer_anomaly_map(model, jobs[i].item->image).scores;
        }
      });
    for (auto& th : pool) th.join();
  }

  for (int c = 0; c < dataset.n_classes(); ++c) {
    const auto& cd = dataset.classes[static_cast<std::size_t>(c)];
    ClassEval ce;
    ce.name = cd.name;
    std::vector<float> px_scores, im_scores;
    std::vector<int> px_labels, im_labels;
    for (std::size_t i = 0; i < jobs.size(); ++i) {
      if (jobs[i].cls != c) continue;
      const auto& mask = jobs[i].item->mask;
      const auto& map = maps[i];
      for (std::int64_t p = 0; p < map.numel(); ++p) {
        px_scores.push_back(map[p]);
        px_labels.push_back(mask[p] > 0.5f ? 1 : 0);
      }
      im_scores.push_back(map.array().maxCoeff());
      im_labels.push_back(jobs[i].item->anomalous ? 1 : 0);
    }
    const bool has_pos = std::count(px_labels.begin(), px_labels.end(), 1) > 0;
    const bool has_neg = std::count(px_labels.begin(), px_labels.end(), 0) > 0;
    if (has_pos && has_neg) {
      ce.pixel_auroc = auroc(px_scores, px_labels);
    } else {
      ce.pixel_defined = false;
      report.warnings.push_back("class " + cd.name +
                                ": pixel AUROC undefined (single-class pixels), excluded");
    }
    const bool ipos = std::count(im_labels.begin(), im_labels.end(), 1) > 0;
    const bool ineg = std::count(im_labels.begin(), im_labels.end(), 0) > 0;
    if (ipos && ineg) {
      ce.image_auroc = auroc(im_scores, im_labels);
    } else {
      ce.image_defined = false;
      report.warnings.push_back("class " + cd.name +
                                ": image AUROC undefined (single-class labels), excluded");
    }
    report.classes.push_back(std::move(ce));
  }

  double psum = 0.0, isum = 0.0;
  int pn = 0, in = 0;
  for (const auto& ce : report.classes) {
    if (ce.pixel_defined) {
      psum += ce.pixel_auroc;
      ++pn;
    }
    if (ce.image_defined) {
      isum += ce.image_auroc;
      ++in;
    }
  }
  report.mean_pixel_auroc = pn ? psum / pn : 0.0;
  report.mean_image_auroc = in ? isum / in : 0.0;

  if (keep_heatmaps)
    for (std::size_t i = 0; i < jobs.size(); ++i)
      report.heatmaps.emplace_back(jobs[i].item->id, maps[i]);

  if (n_timing_runs > 0) {
    using clock = std::chrono::steady_clock;
    for (int w = 0; w < 3; ++w) infer_anomaly_map(model, jobs[w % jobs.size()].item->image);
    std::vector<double> group_means;
    for (int g = 0; g < 3; ++g) {
      double total = 0.0;
      for (int r = 0; r < n_timing_runs; ++r) {
        const auto& img = jobs[static_cast<std::size_t>(r) % jobs.size()].item->image;
        const auto t0 = clock::now();
        infer_anomaly_map(model, img);
        const auto t1 = clock::now();
        total += std::chrono::duration<double, std::milli>(t1 - t0).count();
      }
      group_means.push_back(total / n_timing_runs);
    }
    std::sort(group_means.begin(), group_means.end());
    report.avg_inference_ms = group_means[1];
  }
  return report;
}

std::string report_to_json(const EvalReport& r) {
  nlohmann::ordered_json o;
  o["scheme"] = r.scheme;
  o["precision"] = r.precision;
  o["calibration"] = r.calibration;
  o["objective"] = r.objective;
  o["mode"] = r.mode;
  nlohmann::ordered_json classes = nlohmann::ordered_json::array();
  for (const auto& ce : r.classes) {
    nlohmann::ordered_json c;
    c["name"] = ce.name;
    if (ce.pixel_defined)
      c["pixel_auroc"] = ce.pixel_auroc;
    else
      c["pixel_auroc"] = nullptr;
    if (ce.image_defined)
      c["image_auroc"] = ce.image_auroc;
    else
      c["image_auroc"] = nullptr;
    classes.push_back(std::move(c));
  }
  o["classes"] = std::move(classes);
  o["mean_pixel_auroc"] = r.mean_pixel_auroc;
  o["mean_image_auroc"] = r.mean_image_auroc;
  o["avg_inference_ms"] = r.avg_inference_ms;
  o["model_size"] = {{"total", r.size.total}, {"teacher", r.size.teacher},
                     {"student", r.size.student}};
  o["warnings"] = r.warnings;
  return o.dump(2) + "\n";
}

EvalReport report_from_json(const std::string& text) {
  nlohmann::json o;
  try {
    o = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    fail(std::string("report: invalid JSON: ") + e.what());
  }
  EvalReport r;
  r.scheme = o.at("scheme").get<std::string>();
  r.precision = o.at("precision").get<std::string>();
  r.calibration = o.value("calibration", "none");
  r.objective = o.value("objective", "none");
  r.mode = o.value("mode", "multiclass");
  for (const auto& c : o.at("classes")) {
    ClassEval ce;
    ce.name = c.at("name").get<std::string>();
    if (c.at("pixel_auroc").is_null())
      ce.pixel_defined = false;
    else
      ce.pixel_auroc = c.at("pixel_auroc").get<double>();
    if (c.at("image_auroc").is_null())
      ce.image_defined = false;
    else
      ce.image_auroc = c.at("image_auroc").get<double>();
    r.classes.push_back(std::move(ce));
  }
  r.mean_pixel_auroc = o.at("mean_pixel_auroc").get<double>();
  r.mean_image_auroc = o.at("mean_image_auroc").get<double>();
  r.avg_inference_ms = o.at("avg_inference_ms").get<double>();
  r.size.total = o.at("model_size").at("total").get<std::int64_t>();
  r.size.teacher = o.at("model_size").at("teacher").get<std::int64_t>();
  r.size.student = o.at("model_size").at("student").get<std::int64_t>();
  if (o.contains("warnings"))
    for (const auto& w : o.at("warnings")) r.warnings.push_back(w.get<std::string>());
  return r;
}

namespace {

std::string csv_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

std::string sanitize_id(std::string id) {
  for (auto& ch : id)
    if (ch == '/' || ch == '\\') ch = '_';
  return id;
}

}  // namespace

void emit_report(const std::vector<EvalReport>& reports, const std::string& out_dir) {
  if (reports.empty()) fail("emit_report: no reports");
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) fail("emit_report: cannot create " + out_dir + ": " + ec.message());

  nlohmann::ordered_json arr = nlohmann::ordered_json::array();
  for (const auto& r : reports) arr.push_back(nlohmann::ordered_json::parse(report_to_json(r)));
  {
    std::ofstream out(fs::path(out_dir) / "reports.json");
    if (!out) fail("emit_report: cannot write reports.json");
    out << arr.dump(2) << "\n";
  }
  {
    std::ofstream out(fs::path(out_dir) / "summary.csv");
    if (!out) fail("emit_report: cannot write summary.csv");
    out << "scheme,precision,calibration,objective,mode,mean_pixel_auroc,mean_image_auroc,"
           "avg_inference_ms,total_bytes,teacher_bytes,student_bytes\n";
    for (const auto& r : reports)
      out << r.scheme << ',' << r.precision << ',' << r.calibration << ',' << r.objective << ','
          << r.mode << ',' << csv_double(r.mean_pixel_auroc) << ','
          << csv_double(r.mean_image_auroc) << ',' << csv_double(r.avg_inference_ms) << ','
          << r.size.total << ',' << r.size.teacher << ',' << r.size.student << "\n";
  }
  for (std::size_t ri = 0; ri < reports.size(); ++ri) {
    if (reports[ri].heatmaps.empty()) continue;
    const fs::path hm_dir = fs::path(out_dir) / "heatmaps" / ("variant" + std::to_string(ri));
    fs::create_directories(hm_dir);
    for (const auto& [id, map] : reports[ri].heatmaps) {
      const float lo = map.array().minCoeff();
      const float hi = map.array().maxCoeff();
      Tensor scaled(map.shape());
      if (hi > lo)
        scaled.array() = (map.array() - lo) / (hi - lo);
      // all-equal maps stay zero (render black)
      write_pgm((hm_dir / (sanitize_id(id) + ".pgm")).string(), scaled);
    }
  }
}

// --- DQKD container ---

namespace {

constexpr char kMagic[4] = {'D', 'Q', 'K', 'D'};
constexpr std::uint32_t kVersion = 1;

enum class Dtype : std::uint8_t { f32 = 0, f16 = 1, i8 = 2 };

struct Writer {
  std::vector<std::uint8_t> bytes;

  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    bytes.insert(bytes.end(), b, b + n);
  }
  void u8(std::uint8_t v) { raw(&v, 1); }
  void u32(std::uint32_t v) { raw(&v, 4); }
  void i32(std::int32_t v) { raw(&v, 4); }
  void i64(std::int64_t v) { raw(&v, 8); }
  void f64(double v) { raw(&v, 8); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    raw(s.data(), s.size());
  }
};

struct Reader {
  const std::vector<std::uint8_t>& bytes;
  std::size_t pos = 0;

  void raw(void* p, std::size_t n) {
    if (pos + n > bytes.size()) fail("model file: truncated");
    std::memcpy(p, bytes.data() + pos, n);
    pos += n;
  }
  std::uint8_t u8() {
    std::uint8_t v;
    raw(&v, 1);
    return v;
  }
  std::uint32_t u32() {
    std::uint32_t v;
    raw(&v, 4);
    return v;
  }
  std::int32_t i32() {
    std::int32_t v;
    raw(&v, 4);
    return v;
  }
  std::int64_t i64() {
    std::int64_t v;
    raw(&v, 8);
    return v;
  }
  double f64() {
    double v;
    raw(&v, 8);
    return v;
  }
  std::string str() {
    const auto n = u32();
    if (pos + n > bytes.size()) fail("model file: truncated string");
    std::string s(reinterpret_cast<const char*>(bytes.data() + pos), n);
    pos += n;
    return s;
  }
};

void write_qparams(Writer& w, const QuantParams& qp) {
  w.f64(qp.scale);
  w.i32(qp.zero_point);
  w.u8(static_cast<std::uint8_t>(qp.bits));
  w.i32(qp.qmin);
  w.i32(qp.qmax);
  w.u8(qp.mode == QuantMode::symmetric_signed ? 1 : 0);
}

QuantParams read_qparams(Reader& r) {
  QuantParams qp;
  qp.scale = r.f64();
  qp.zero_point = r.i32();
  qp.bits = r.u8();
  qp.qmin = r.i32();
  qp.qmax = r.i32();
  qp.mode = r.u8() ? QuantMode::symmetric_signed : QuantMode::affine_unsigned;
  qp.fmin = qp.scale * (qp.qmin - qp.zero_point);
  qp.fmax = qp.scale * (qp.qmax - qp.zero_point);
  return qp;
}

void write_shape(Writer& w, const std::vector<int>& shape) {
  w.u8(static_cast<std::uint8_t>(shape.size()));
  for (int d : shape) w.i32(d);
}

std::vector<int> read_shape(Reader& r) {
  const int rank = r.u8();
  std::vector<int> shape;
  for (int i = 0; i < rank; ++i) shape.push_back(r.i32());
  return shape;
}

void write_f32_tensor(Writer& w, const Tensor& t) {
  w.u8(static_cast<std::uint8_t>(Dtype::f32));
  write_shape(w, t.shape());
  w.raw(t.data(), static_cast<std::size_t>(t.numel()) * 4);
}

void write_f16_tensor(Writer& w, const Tensor& t) {
  w.u8(static_cast<std::uint8_t>(Dtype::f16));
  write_shape(w, t.shape());
  for (std::int64_t i = 0; i < t.numel(); ++i) {
    const std::uint16_t h = float_to_half_bits(t[i]);
    w.raw(&h, 2);
  }
}

void write_i8_tensor(Writer& w, const IntTensor& t) {
  w.u8(static_cast<std::uint8_t>(Dtype::i8));
  write_shape(w, t.q.shape());
  write_qparams(w, t.qp);
  for (std::int64_t i = 0; i < t.numel(); ++i) {
    const auto v = static_cast<std::int8_t>(t.q[i]);
    w.raw(&v, 1);
  }
}

// Reads any tensor record; int8 records come back as dequantized floats with
// the IntTensor preserved in *int_out.
Tensor read_tensor(Reader& r, IntTensor* int_out = nullptr, bool* was_i8 = nullptr) {
  const auto dtype = static_cast<Dtype>(r.u8());
  const auto shape = read_shape(r);
  if (was_i8) *was_i8 = dtype == Dtype::i8;
  if (dtype == Dtype::f32) {
    Tensor t(shape);
    r.raw(t.data(), static_cast<std::size_t>(t.numel()) * 4);
    return t;
  }
  if (dtype == Dtype::f16) {
    Tensor t(shape);
    for (std::int64_t i = 0; i < t.numel(); ++i) {
      std::uint16_t h;
      r.raw(&h, 2);
      t[i] = half_bits_to_float(h);
    }
    return t;
  }
  if (dtype == Dtype::i8) {
    IntTensor it{TensorT<std::int32_t>(shape), read_qparams(r)};
    for (std::int64_t i = 0; i < it.numel(); ++i) {
      std::int8_t v;
      r.raw(&v, 1);
      it.q[i] = v;
    }
    Tensor t = dequantize(it);
    if (int_out) *int_out = std::move(it);
    return t;
  }
  fail("model file: unknown dtype tag");
}

void write_model_def(Writer& w, const ModelDef& def) {
  w.i32(def.in_channels);
  w.u32(static_cast<std::uint32_t>(def.layers.size()));
  for (const auto& l : def.layers) {
    w.u8(static_cast<std::uint8_t>(l.kind));
    switch (l.kind) {
      case LayerDef::Kind::conv:
        w.i32(l.conv.kernel);
        w.i32(l.conv.stride);
        w.i32(l.conv.pad);
        w.i32(l.conv.in_ch);
        w.i32(l.conv.out_ch);
        w.u8(l.conv.has_bias ? 1 : 0);
        break;
      case LayerDef::Kind::relu:
        break;
      case LayerDef::Kind::maxpool:
        w.i32(l.pool_kernel);
        w.i32(l.pool_stride);
        break;
      case LayerDef::Kind::upsample:
        w.i32(l.up_factor);
        break;
    }
  }
  w.u32(static_cast<std::uint32_t>(def.tap_points.size()));
  for (int t : def.tap_points) w.i32(t);
}

ModelDef read_model_def(Reader& r) {
  ModelDef def;
  def.in_channels = r.i32();
  const auto n = r.u32();
  for (std::uint32_t i = 0; i < n; ++i) {
    LayerDef l;
    l.kind = static_cast<LayerDef::Kind>(r.u8());
    switch (l.kind) {
      case LayerDef::Kind::conv:
        l.conv.kernel = r.i32();
        l.conv.stride = r.i32();
        l.conv.pad = r.i32();
        l.conv.in_ch = r.i32();
        l.conv.out_ch = r.i32();
        l.conv.has_bias = r.u8() != 0;
        break;
      case LayerDef::Kind::relu:
        break;
      case LayerDef::Kind::maxpool:
        l.pool_kernel = r.i32();
        l.pool_stride = r.i32();
        break;
      case LayerDef::Kind::upsample:
        l.up_factor = r.i32();
        break;
      default:
        fail("model file: unknown layer kind");
    }
    def.layers.push_back(l);
  }
  const auto nt = r.u32();
  for (std::uint32_t i = 0; i < nt; ++i) def.tap_points.push_back(r.i32());
  return def;
}

void write_params_f32(Writer& w, const Params& p) {
  w.u32(static_cast<std::uint32_t>(p.weights.size()));
  for (std::size_t i = 0; i < p.weights.size(); ++i) {
    write_f32_tensor(w, p.weights[i]);
    w.u8(p.biases[i].empty() ? 0 : 1);
    if (!p.biases[i].empty()) write_f32_tensor(w, p.biases[i]);
  }
}

}  // namespace

namespace {

std::vector<std::uint8_t> serialize_impl(const DistilledModel& m, SizeBreakdown* sizes);

}  // namespace

std::vector<std::uint8_t> serialize_model(const DistilledModel& m) {
  return serialize_impl(m, nullptr);
}

namespace {

std::vector<std::uint8_t> serialize_impl(const DistilledModel& m, SizeBreakdown* sizes) {
  Writer w;
  w.raw(kMagic, 4);
  w.u32(kVersion);
  w.u8(static_cast<std::uint8_t>(m.scheme));
  w.u8(static_cast<std::uint8_t>(m.precision));
  w.u8(m.combine == MapCombine::prod ? 1 : 0);
  w.str(m.calib_tag);
  w.f64(m.norm_mean);
  w.f64(m.norm_std);
  w.i32(m.image_size);
  w.f64(m.us_stats.e_mean);
  w.f64(m.us_stats.e_std);
  w.f64(m.us_stats.v_mean);
  w.f64(m.us_stats.v_std);

  // teacher, always f32
  const std::size_t teacher_begin = w.bytes.size();
  write_model_def(w, m.teacher_def);
  write_params_f32(w, m.teacher_params);
  const std::size_t teacher_end = w.bytes.size();

  w.u32(static_cast<std::uint32_t>(m.n_students()));
  const std::size_t students_begin = w.bytes.size();
  for (int si = 0; si < m.n_students(); ++si) {
    const auto& def = m.student_defs[static_cast<std::size_t>(si)];
    const auto& params = m.student_params[static_cast<std::size_t>(si)];
    write_model_def(w, def);
    const bool int8 = m.precision == Precision::ptq_int8 || m.precision == Precision::qat_int8;
    if (int8) {
      const auto& qn = m.qnets.at(static_cast<std::size_t>(si));
      write_qparams(w, qn.input_qp);
      w.u32(static_cast<std::uint32_t>(qn.weights.size()));
      for (std::size_t k = 0; k < qn.weights.size(); ++k) {
        write_i8_tensor(w, qn.weights[k]);
        write_qparams(w, qn.conv_out_qp[k]);
        w.u8(params.biases[k].empty() ? 0 : 1);
        if (!params.biases[k].empty()) write_f32_tensor(w, params.biases[k]);
      }
    } else if (m.precision == Precision::fp16) {
      w.u32(static_cast<std::uint32_t>(params.weights.size()));
      for (std::size_t k = 0; k < params.weights.size(); ++k) {
        write_f16_tensor(w, params.weights[k]);
        w.u8(params.biases[k].empty() ? 0 : 1);
        if (!params.biases[k].empty()) write_f16_tensor(w, params.biases[k]);
      }
    } else {
      write_params_f32(w, params);
    }
  }
  if (sizes) {
    sizes->total = static_cast<std::int64_t>(w.bytes.size());
    sizes->teacher = static_cast<std::int64_t>(teacher_end - teacher_begin);
    sizes->student = static_cast<std::int64_t>(w.bytes.size() - students_begin);
  }
  return std::move(w.bytes);
}

}  // namespace

DistilledModel deserialize_model(const std::vector<std::uint8_t>& bytes) {
  Reader r{bytes};
  char magic[4];
  r.raw(magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0) fail("model file: bad magic");
  const auto version = r.u32();
  if (version != kVersion) fail("model file: unsupported version " + std::to_string(version));

  DistilledModel m;
  m.scheme = static_cast<Scheme>(r.u8());
  m.precision = static_cast<Precision>(r.u8());
  m.combine = r.u8() ? MapCombine::prod : MapCombine::sum;
  m.calib_tag = r.str();
  m.norm_mean = r.f64();
  m.norm_std = r.f64();
  m.image_size = r.i32();
  m.us_stats.e_mean = r.f64();
  m.us_stats.e_std = r.f64();
  m.us_stats.v_mean = r.f64();
  m.us_stats.v_std = r.f64();

  m.teacher_def = read_model_def(r);
  const auto nt = r.u32();
  for (std::uint32_t k = 0; k < nt; ++k) {
    m.teacher_params.weights.push_back(read_tensor(r));
    if (r.u8())
      m.teacher_params.biases.push_back(read_tensor(r));
    else
      m.teacher_params.biases.emplace_back();
  }

  const auto ns = r.u32();
  const bool int8 = m.precision == Precision::ptq_int8 || m.precision == Precision::qat_int8;
  for (std::uint32_t si = 0; si < ns; ++si) {
    ModelDef def = read_model_def(r);
    Params params;
    QuantizedNet qn;
    if (int8) {
      qn.input_qp = read_qparams(r);
      const auto nk = r.u32();
      for (std::uint32_t k = 0; k < nk; ++k) {
        IntTensor it;
        params.weights.push_back(read_tensor(r, &it));
        qn.weights.push_back(std::move(it));
        qn.conv_out_qp.push_back(read_qparams(r));
        if (r.u8())
          params.biases.push_back(read_tensor(r));
        else
          params.biases.emplace_back();
      }
      // bias requantization replays the conv-chain scale walk
      QuantParams cur = qn.input_qp;
      for (std::uint32_t k = 0; k < nk; ++k) {
        std::vector<std::int32_t> bq;
        if (!params.biases[k].empty()) {
          const double bias_scale = cur.scale * qn.weights[k].qp.scale;
          for (std::int64_t i = 0; i < params.biases[k].numel(); ++i)
            bq.push_back(static_cast<std::int32_t>(
                round_half_even(static_cast<double>(params.biases[k][i]) / bias_scale)));
        }
        qn.biases.push_back(std::move(bq));
        cur = qn.conv_out_qp[k];
      }
    } else {
      const auto nk = r.u32();
      for (std::uint32_t k = 0; k < nk; ++k) {
        params.weights.push_back(read_tensor(r));
        if (r.u8())
          params.biases.push_back(read_tensor(r));
        else
          params.biases.emplace_back();
      }
    }
    m.student_defs.push_back(std::move(def));
    m.student_params.push_back(std::move(params));
    if (int8) m.qnets.push_back(std::move(qn));
  }
  if (r.pos != bytes.size()) fail("model file: trailing bytes");
  return m;
}

void save_model(const std::string& path, const DistilledModel& model) {
  const auto bytes = serialize_model(model);
  std::ofstream out(path, std::ios::binary);
  if (!out) fail("save_model: cannot open " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) fail("save_model: write failed for " + path);
}

DistilledModel load_model(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail("load_model: cannot open " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return deserialize_model(bytes);
}

SizeBreakdown model_size(const DistilledModel& model) {
  SizeBreakdown sz;
  serialize_impl(model, &sz);
  return sz;
}

}  // namespace dqkd
