#include "dqkd/cli.hpp"

#include "dqkd/bench.hpp"
#include "dqkd/calib.hpp"
#include "dqkd/dataset.hpp"
#include "dqkd/distill.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

namespace fs = std::filesystem;

namespace dqkd {

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void require_file(const std::string& path, const std::string& what) {
  if (path.empty() || !fs::exists(path)) throw UsageError(what + " not found: " + path);
}

std::string read_text(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot read " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) fail("cannot write " + path);
  out << text;
}

void log_config(const std::string& sub, const std::vector<std::pair<std::string, std::string>>& kv) {
  std::ostringstream os;
  os << "dq " << sub << ": config {";
  for (std::size_t i = 0; i < kv.size(); ++i)
    os << (i ? ", " : " ") << kv[i].first << "=" << kv[i].second;
  os << " }";
  std::cerr << os.str() << "\n";
}

void write_loss_csv(const std::string& path, const std::vector<LossLogEntry>& log) {
  std::ofstream out(path);
  if (!out) fail("cannot write " + path);
  out << "epoch,step,loss\n";
  for (const auto& e : log) out << e.epoch << ',' << e.step << ',' << e.loss << "\n";
}

TrainConfig config_from_flags(Scheme scheme, int epochs, double lr, int batch_size,
                              double weight_decay, std::uint64_t seed, int n_students) {
  TrainConfig cfg = default_train_config(scheme);
  if (epochs > 0) cfg.epochs = epochs;
  if (lr > 0) cfg.learning_rate = lr;
  if (batch_size > 0) cfg.batch_size = batch_size;
  if (weight_decay >= 0) cfg.weight_decay = weight_decay;
  if (n_students > 0) cfg.n_students = n_students;
  cfg.seed = seed;
  return cfg;
}

CalibrationSource make_source(const std::string& calib, const DatasetSpec& ds,
                              const DistilledModel& model, int n_batches, double mean,
                              double stddev, std::uint64_t seed) {
  if (calib == "train") return CalibrationSource::from_dataset(ds, n_batches);
  if (calib == "random-normal")
    return CalibrationSource::random_normal(mean, stddev, n_batches,
                                            {1, model.image_size, model.image_size}, seed);
  throw UsageError("unknown calibration source: " + calib + " (train | random-normal)");
}

// Aggregate per-class one-class models into a single Table-2-style report
// whose classes[] hold each model's own-class result.
EvalReport aggregate_oneclass(const std::vector<EvalReport>& per_class) {
  EvalReport agg;
  if (per_class.empty()) fail("aggregate_oneclass: no reports");
  agg = per_class.front();
  agg.mode = "oneclass";
  agg.classes.clear();
  agg.warnings.clear();
  agg.heatmaps.clear();
  double psum = 0.0, isum = 0.0;
  int pn = 0, in = 0;
  for (const auto& r : per_class) {
    for (const auto& ce : r.classes) agg.classes.push_back(ce);
    for (const auto& w : r.warnings) agg.warnings.push_back(w);
  }
  for (const auto& ce : agg.classes) {
    if (ce.pixel_defined) {
      psum += ce.pixel_auroc;
      ++pn;
    }
    if (ce.image_defined) {
      isum += ce.image_auroc;
      ++in;
    }
  }
  agg.mean_pixel_auroc = pn ? psum / pn : 0.0;
  agg.mean_image_auroc = in ? isum / in : 0.0;
  return agg;
}

int dispatch(const std::vector<std::string>& args) {
  CLI::App app{"desk-scale knowledge-distillation anomaly detection with quantization"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all");

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset tree");
  int g_classes = 4, g_per_class = 16, g_size = 32;
  std::uint64_t g_seed = 1;
  double g_contrast = 0.25, g_amin = 0.35, g_amax = 0.5;
  int g_test_good = -1, g_test_defect = -1;
  std::string g_out;
  gen->add_option("--classes", g_classes, "number of classes");
  gen->add_option("--per-class", g_per_class, "train images per class");
  gen->add_option("--size", g_size, "image size");
  gen->add_option("--seed", g_seed, "rng seed");
  gen->add_option("--texture-contrast", g_contrast, "texture contrast");
  gen->add_option("--anomaly-min", g_amin, "min anomaly intensity shift");
  gen->add_option("--anomaly-max", g_amax, "max anomaly intensity shift");
  gen->add_option("--test-good", g_test_good, "good test images per class");
  gen->add_option("--test-defect", g_test_defect, "defect test images per class");
  gen->add_option("--out", g_out, "output directory")->required();

  // train
  auto* train = app.add_subcommand("train", "pretrain teacher and train student(s)");
  std::string t_data, t_scheme = "stfpm", t_mode = "multiclass", t_out, t_combine = "sum";
  int t_class_index = 0, t_epochs = -1, t_batch = -1, t_students = -1, t_teacher_epochs = 8;
  double t_lr = -1, t_wd = -1, t_norm_mean = 0.5, t_norm_std = 0.25;
  std::uint64_t t_seed = 1;
  train->add_option("--data", t_data, "dataset directory")->required();
  train->add_option("--scheme", t_scheme, "stfpm | rd | us");
  train->add_option("--mode", t_mode, "oneclass | multiclass");
  train->add_option("--class-index", t_class_index, "class for oneclass mode");
  train->add_option("--epochs", t_epochs, "training epochs");
  train->add_option("--batch-size", t_batch, "batch size");
  train->add_option("--lr", t_lr, "learning rate");
  train->add_option("--weight-decay", t_wd, "weight decay");
  train->add_option("--students", t_students, "ensemble size (us scheme)");
  train->add_option("--teacher-epochs", t_teacher_epochs, "teacher pretraining epochs");
  train->add_option("--combine", t_combine, "per-layer map combination: sum | prod");
  train->add_option("--norm-mean", t_norm_mean, "input standardization mean");
  train->add_option("--norm-std", t_norm_std, "input standardization std");
  train->add_option("--seed", t_seed, "rng seed");
  train->add_option("--out", t_out, "output model file")->required();

  // calibrate
  auto* cal = app.add_subcommand("calibrate", "collect activation statistics, write a plan");
  std::string c_model, c_data, c_calib = "train", c_objective = "entropy", c_out;
  int c_batches = 8, c_bits = 8;
  double c_mean = 0.0, c_std = 1.0;
  std::uint64_t c_seed = 1;
  cal->add_option("--model", c_model, "float model file")->required();
  cal->add_option("--data", c_data, "dataset directory (train source)");
  cal->add_option("--calib", c_calib, "train | random-normal");
  cal->add_option("--objective", c_objective, "entropy | l2 | minmax");
  cal->add_option("--calib-batches", c_batches, "number of calibration batches");
  cal->add_option("--bits", c_bits, "quantization bit-width");
  cal->add_option("--calib-mean", c_mean, "random-normal mean");
  cal->add_option("--calib-std", c_std, "random-normal std");
  cal->add_option("--seed", c_seed, "rng seed");
  cal->add_option("--out", c_out, "output plan JSON")->required();

  // quantize
  auto* qtz = app.add_subcommand("quantize", "post-training quantization of the student(s)");
  std::string q_model, q_plan, q_out, q_precision = "int8", q_tag = "none";
  qtz->add_option("--model", q_model, "float model file")->required();
  qtz->add_option("--plan", q_plan, "calibration plan JSON (int8)");
  qtz->add_option("--precision", q_precision, "int8 | fp16");
  qtz->add_option("--calib-tag", q_tag, "calibration tag recorded in the model");
  qtz->add_option("--out", q_out, "output model file")->required();

  // qat
  auto* qat = app.add_subcommand("qat", "quantization-aware fine-tuning");
  std::string a_model, a_plan, a_data, a_out, a_tag = "none";
  int a_epochs = 3, a_batch = -1;
  double a_lr = -1, a_wd = -1;
  std::uint64_t a_seed = 1;
  qat->add_option("--model", a_model, "float model file")->required();
  qat->add_option("--plan", a_plan, "calibration plan JSON")->required();
  qat->add_option("--data", a_data, "dataset directory")->required();
  qat->add_option("--epochs", a_epochs, "fine-tuning epochs");
  qat->add_option("--batch-size", a_batch, "batch size");
  qat->add_option("--lr", a_lr, "learning rate");
  qat->add_option("--weight-decay", a_wd, "weight decay");
  qat->add_option("--calib-tag", a_tag, "calibration tag recorded in the model");
  qat->add_option("--seed", a_seed, "rng seed");
  qat->add_option("--out", a_out, "output model file")->required();

  // eval
  auto* ev = app.add_subcommand("eval", "evaluate a model on a dataset");
  std::string e_model, e_data, e_out, e_heatmaps;
  int e_timing = 5;
  ev->add_option("--model", e_model, "model file")->required();
  ev->add_option("--data", e_data, "dataset directory")->required();
  ev->add_option("--timing-runs", e_timing, "timing runs (0 disables)");
  ev->add_option("--heatmaps", e_heatmaps, "directory for anomaly heatmap PGMs");
  ev->add_option("--out", e_out, "output report JSON")->required();

  // bench
  auto* bn = app.add_subcommand("bench", "full comparison harness");
  std::string b_data, b_scheme = "stfpm", b_out;
  int b_epochs = -1, b_batches = 8, b_bits = 8, b_timing = 3, b_qat_epochs = 2,
      b_teacher_epochs = 8;
  double b_mean = 0.0, b_std = 1.0;
  std::uint64_t b_seed = 1;
  bool b_skip_oneclass = false;
  bn->add_option("--data", b_data, "dataset directory")->required();
  bn->add_option("--scheme", b_scheme, "stfpm | rd | us");
  bn->add_option("--epochs", b_epochs, "training epochs");
  bn->add_option("--qat-epochs", b_qat_epochs, "QAT fine-tuning epochs");
  bn->add_option("--teacher-epochs", b_teacher_epochs, "teacher pretraining epochs");
  bn->add_option("--calib-batches", b_batches, "calibration batches");
  bn->add_option("--bits", b_bits, "quantization bit-width");
  bn->add_option("--calib-mean", b_mean, "random-normal mean");
  bn->add_option("--calib-std", b_std, "random-normal std");
  bn->add_option("--timing-runs", b_timing, "timing runs per variant");
  bn->add_flag("--skip-oneclass", b_skip_oneclass, "skip the per-class model sweep");
  bn->add_option("--seed", b_seed, "rng seed");
  bn->add_option("--out", b_out, "output directory")->required();

  // report
  auto* rp = app.add_subcommand("report", "render report JSONs to CSV");
  std::vector<std::string> r_inputs;
  std::string r_out;
  rp->add_option("inputs", r_inputs, "report JSON files")->required();
  rp->add_option("--out", r_out, "output directory")->required();

  try {
    std::vector<std::string> rev(args.rbegin(), args.rend());
    app.parse(rev);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  if (*gen) {
    log_config("gen-data", {{"classes", std::to_string(g_classes)},
                            {"per_class", std::to_string(g_per_class)},
                            {"size", std::to_string(g_size)},
                            {"seed", std::to_string(g_seed)},
                            {"out", g_out}});
    SynthOptions opts;
    opts.texture_contrast = g_contrast;
    opts.anomaly_min = g_amin;
    opts.anomaly_max = g_amax;
    opts.test_good = g_test_good;
    opts.test_defect = g_test_defect;
    DatasetSpec ds = generate_synthetic_dataset(g_classes, g_per_class, g_size, g_seed, opts);
    save_dataset_dir(ds, g_out);
    return 0;
  }

  if (*train) {
    require_file(t_data, "dataset directory");
    log_config("train", {{"data", t_data},
                         {"scheme", t_scheme},
                         {"mode", t_mode},
                         {"seed", std::to_string(t_seed)},
                         {"out", t_out}});
    const Scheme scheme = scheme_from_name(t_scheme);
    DatasetSpec ds = load_dataset_dir(t_data);
    auto [teacher_def, teacher_params] =
        pretrain_teacher(ds, ds.image_size, t_seed, t_norm_mean, t_norm_std, t_teacher_epochs);
    TrainConfig cfg = config_from_flags(scheme, t_epochs, t_lr, t_batch, t_wd, t_seed, t_students);
    cfg.image_size = ds.image_size;
    DatasetSpec view = ds;
    if (t_mode == "oneclass")
      view = one_class_view(ds, t_class_index);
    else if (t_mode != "multiclass")
      throw UsageError("unknown mode: " + t_mode);
    std::vector<LossLogEntry> log;
    DistilledModel model = train_student(teacher_def, teacher_params, scheme, view, cfg, &log);
    model.norm_mean = t_norm_mean;
    model.norm_std = t_norm_std;
    if (t_combine == "prod")
      model.combine = MapCombine::prod;
    else if (t_combine != "sum")
      throw UsageError("unknown combine: " + t_combine);
    save_model(t_out, model);
    write_loss_csv(t_out + ".losses.csv", log);
    return 0;
  }

  if (*cal) {
    require_file(c_model, "model file");
    log_config("calibrate", {{"model", c_model},
                             {"calib", c_calib},
                             {"objective", c_objective},
                             {"batches", std::to_string(c_batches)},
                             {"bits", std::to_string(c_bits)},
                             {"seed", std::to_string(c_seed)},
                             {"out", c_out}});
    DistilledModel model = load_model(c_model);
    DatasetSpec ds;
    if (c_calib == "train") {
      require_file(c_data, "dataset directory");
      ds = load_dataset_dir(c_data);
    }
    CalibrationSource src =
        make_source(c_calib, ds, model, c_batches, c_mean, c_std, c_seed);
    CalibrationPlan plan =
        calibrate_model(model, src, calib_objective_from_name(c_objective), c_bits);
    write_text(c_out, plan_to_json(plan));
    return 0;
  }

  if (*qtz) {
    require_file(q_model, "model file");
    log_config("quantize", {{"model", q_model},
                            {"plan", q_plan.empty() ? "<none>" : q_plan},
                            {"precision", q_precision},
                            {"out", q_out}});
    DistilledModel model = load_model(q_model);
    if (q_precision == "fp16") {
      DistilledModel half = to_half_model(model);
      save_model(q_out, half);
      return 0;
    }
    if (q_precision != "int8") throw UsageError("unknown precision: " + q_precision);
    if (q_plan.empty()) throw UsageError("quantize: --plan is required for int8");
    require_file(q_plan, "calibration plan");
    CalibrationPlan plan = plan_from_json(read_text(q_plan));
    DistilledModel quantized = ptq_quantize_model(model, plan);
    quantized.calib_tag = q_tag;
    save_model(q_out, quantized);
    return 0;
  }

  if (*qat) {
    require_file(a_model, "model file");
    require_file(a_plan, "calibration plan");
    require_file(a_data, "dataset directory");
    log_config("qat", {{"model", a_model},
                       {"plan", a_plan},
                       {"data", a_data},
                       {"epochs", std::to_string(a_epochs)},
                       {"seed", std::to_string(a_seed)},
                       {"out", a_out}});
    DistilledModel model = load_model(a_model);
    DatasetSpec ds = load_dataset_dir(a_data);
    CalibrationPlan plan = plan_from_json(read_text(a_plan));
    TrainConfig cfg = config_from_flags(model.scheme, a_epochs, a_lr, a_batch, a_wd, a_seed, -1);
    cfg.epochs = a_epochs;
    cfg.image_size = ds.image_size;
    std::vector<LossLogEntry> log;
    DistilledModel tuned = qat_finetune(model, plan, ds, cfg, &log);
    tuned.calib_tag = a_tag;
    save_model(a_out, tuned);
    write_loss_csv(a_out + ".losses.csv", log);
    return 0;
  }

  if (*ev) {
    require_file(e_model, "model file");
    require_file(e_data, "dataset directory");
    log_config("eval", {{"model", e_model},
                        {"data", e_data},
                        {"timing_runs", std::to_string(e_timing)},
                        {"out", e_out}});
    DistilledModel model = load_model(e_model);
    DatasetSpec ds = load_dataset_dir(e_data);
    EvalReport report = evaluate_variant(model, ds, e_timing, !e_heatmaps.empty());
    if (!e_heatmaps.empty()) {
      std::vector<EvalReport> one{report};
      emit_report(one, e_heatmaps);
    }
    report.heatmaps.clear();
    write_text(e_out, report_to_json(report));
    return 0;
  }

  if (*bn) {
    require_file(b_data, "dataset directory");
    log_config("bench", {{"data", b_data},
                         {"scheme", b_scheme},
                         {"seed", std::to_string(b_seed)},
                         {"out", b_out}});
    const Scheme scheme = scheme_from_name(b_scheme);
    DatasetSpec ds = load_dataset_dir(b_data);
    auto [teacher_def, teacher_params] =
        pretrain_teacher(ds, ds.image_size, b_seed, 0.5, 0.25, b_teacher_epochs);
    TrainConfig cfg = config_from_flags(scheme, b_epochs, -1, -1, -1, b_seed, -1);
    cfg.image_size = ds.image_size;

    std::vector<EvalReport> reports;
    DistilledModel unified = train_student(teacher_def, teacher_params, scheme, ds, cfg);
    reports.push_back(evaluate_variant(unified, ds, b_timing, true));

    if (!b_skip_oneclass && ds.n_classes() > 1) {
      std::vector<EvalReport> per_class;
      for (int c = 0; c < ds.n_classes(); ++c) {
        DatasetSpec view = one_class_view(ds, c);
        DistilledModel oc = train_student(teacher_def, teacher_params, scheme, view, cfg);
        per_class.push_back(evaluate_variant(oc, view, 0));
      }
      reports.push_back(aggregate_oneclass(per_class));
    }

    reports.push_back(evaluate_variant(to_half_model(unified), ds, b_timing));

    TrainConfig qat_cfg = cfg;
    qat_cfg.epochs = b_qat_epochs;
    for (const std::string calib : {"train", "random-normal"}) {
      for (const auto objective : {CalibObjective::entropy, CalibObjective::l2}) {
        CalibrationSource src =
            make_source(calib, ds, unified, b_batches, b_mean, b_std, b_seed);
        CalibrationPlan plan = calibrate_model(unified, src, objective, b_bits);
        DistilledModel ptq = ptq_quantize_model(unified, plan);
        ptq.calib_tag = calib;
        reports.push_back(evaluate_variant(ptq, ds, b_timing));
        if (calib == "random-normal" && objective == CalibObjective::entropy) {
          DistilledModel tuned = qat_finetune(unified, plan, ds, qat_cfg);
          tuned.calib_tag = calib;
          reports.push_back(evaluate_variant(tuned, ds, b_timing));
        }
      }
    }
    emit_report(reports, b_out);
    return 0;
  }

  if (*rp) {
    log_config("report", {{"inputs", std::to_string(r_inputs.size())}, {"out", r_out}});
    std::vector<EvalReport> reports;
    for (const auto& path : r_inputs) {
      require_file(path, "report file");
      const std::string text = read_text(path);
      const auto parsed = nlohmann::json::parse(text, nullptr, false);
      if (parsed.is_array())
        for (const auto& o : parsed) reports.push_back(report_from_json(o.dump()));
      else
        reports.push_back(report_from_json(text));
    }
    emit_report(reports, r_out);
    return 0;
  }

  return 0;
}

}  // namespace

int run_cli(const std::vector<std::string>& args) {
  try {
    return dispatch(args);
  } catch (const UsageError& e) {
    std::cerr << "dq: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "dq: " << e.what() << "\n";
    return 1;
  }
}

int run_cli(int argc, const char* const* argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run_cli(args);
}

}  // namespace dqkd
