#include "dqkd/calib.hpp"

#include "dqkd/dataset.hpp"
#include "dqkd/distill.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <map>

namespace dqkd {

namespace {

void merge_down(RunningHistogram& h) {
  const int n = h.bins();
  std::vector<std::uint64_t> merged(static_cast<std::size_t>(n), 0);
  for (int j = 0; j < n; ++j) merged[static_cast<std::size_t>((j + n) / 2)] += h.counts[j];
  h.lower -= n * h.bin_width;
  h.bin_width *= 2.0;
  h.counts = std::move(merged);
}

void merge_up(RunningHistogram& h) {
  const int n = h.bins();
  std::vector<std::uint64_t> merged(static_cast<std::size_t>(n), 0);
  for (int j = 0; j < n; ++j) merged[static_cast<std::size_t>(j / 2)] += h.counts[j];
  h.bin_width *= 2.0;
  h.counts = std::move(merged);
}

struct PopSpan {
  int lo, hi;  // bin indices, [lo, hi)
};

PopSpan populated_span(const RunningHistogram& h) {
  if (h.total_count == 0) fail("calibrate: empty histogram");
  int lo = 0, hi = h.bins();
  while (h.counts[static_cast<std::size_t>(lo)] == 0) ++lo;
  while (h.counts[static_cast<std::size_t>(hi - 1)] == 0) --hi;
  return {lo, hi};
}

// Clip to the observed value range; a collapsed span widens by 0.5 per side,
// matching the minmax degenerate rule.
std::pair<double, double> finish_span(const RunningHistogram& h, double a, double b) {
  a = std::max(a, h.running_min);
  b = std::min(b, h.running_max);
  if (!(a < b)) return {h.running_min - 0.5, h.running_max + 0.5};
  return {a, b};
}

// KL of the window [i, j). The reference P is the histogram restricted to
// the window with outlier mass folded into the edge bins; Q collapses only
// the unfolded in-window counts into `levels` buckets and re-expands each
// bucket uniformly over its fold-populated bins. The folded mass is present
// in P but missing from Q, which is what penalizes aggressive clipping. An
// eps floor keeps the divergence finite. The oracle tests recompute this
// exact expression.
constexpr double kKlEps = 1e-9;

double window_kl(const RunningHistogram& h, const PopSpan& pop, int i, int j, int levels) {
  const double inv_n = 1.0 / static_cast<double>(h.total_count);
  std::uint64_t below = 0, above = 0;
  for (int k = pop.lo; k < i; ++k) below += h.counts[static_cast<std::size_t>(k)];
  for (int k = j; k < pop.hi; ++k) above += h.counts[static_cast<std::size_t>(k)];

  auto fold = [&](int k) -> std::uint64_t {
    std::uint64_t f = h.counts[static_cast<std::size_t>(k)];
    if (k == i) f += below;
    if (k == j - 1) f += above;
    return f;
  };
  auto level_of = [&](int k) {
    return static_cast<int>(static_cast<std::int64_t>(k - i) * levels / (j - i));
  };

  std::vector<double> mass(static_cast<std::size_t>(levels), 0.0);
  std::vector<int> support(static_cast<std::size_t>(levels), 0);
  for (int k = i; k < j; ++k) {
    const int lev = level_of(k);
    mass[static_cast<std::size_t>(lev)] += static_cast<double>(h.counts[static_cast<std::size_t>(k)]);
    if (fold(k) > 0) support[static_cast<std::size_t>(lev)] += 1;
  }
  double kl = 0.0;
  for (int k = i; k < j; ++k) {
    const std::uint64_t f = fold(k);
    if (!f) continue;
    const int lev = level_of(k);
    const double p = static_cast<double>(f) * inv_n + kKlEps;
    const double q =
        mass[static_cast<std::size_t>(lev)] / support[static_cast<std::size_t>(lev)] * inv_n +
        kKlEps;
    kl += p * std::log(p / q);
  }
  return kl;
}

// Count-weighted squared error of simulating 2^bits-level affine quantization
// of the window [edge(i), edge(j)] over all populated bin centers.
double window_sse(const RunningHistogram& h, const PopSpan& pop, int i, int j, int bits) {
  const double lo = h.edge(i), hi = h.edge(j);
  const double qmax = static_cast<double>((1 << bits) - 1);
  const double s = (hi - lo) / qmax;
  const double z = std::clamp(0.0 - round_half_even(lo / s), 0.0, qmax);
  double err = 0.0;
  for (int k = pop.lo; k < pop.hi; ++k) {
    const auto c = h.counts[static_cast<std::size_t>(k)];
    if (!c) continue;
    const double x = h.center(k);
    const double q = std::clamp(round_half_even(x / s + z), 0.0, qmax);
    const double xh = s * (q - z);
    err += static_cast<double>(c) * (x - xh) * (x - xh);
  }
  return err;
}

struct Best {
  double score = std::numeric_limits<double>::infinity();
  int i = -1, j = -1;

  bool better(double sc, int ii, int jj) const {
    if (sc < score) return true;
    if (sc > score) return false;
    const int w = jj - ii, bw = j - i;
    if (w != bw) return w < bw;
    return ii < i;
  }
  void consider(double sc, int ii, int jj) {
    if (i < 0 || better(sc, ii, jj)) {
      score = sc;
      i = ii;
      j = jj;
    }
  }
};

}  // namespace

void observe(RunningHistogram& hist, const Tensor& t) {
  if (t.numel() == 0) return;
  if (!t.all_finite()) fail("observe: tensor contains non-finite values");
  const double tmin = static_cast<double>(t.array().minCoeff());
  const double tmax = static_cast<double>(t.array().maxCoeff());

  if (hist.bin_width == 0.0) {
    hist.lower = tmin;
    hist.bin_width = tmax > tmin ? (tmax - tmin) / hist.bins()
                                 : std::max(std::abs(tmin), 1.0) * 1e-6;
  } else {
    while (tmin < hist.lower || tmax > hist.upper()) {
      if (tmin < hist.lower)
        merge_down(hist);
      else
        merge_up(hist);
    }
  }

  const double inv_bw = 1.0 / hist.bin_width;
  const int last = hist.bins() - 1;
  for (std::int64_t idx = 0; idx < t.numel(); ++idx) {
    const double v = static_cast<double>(t[idx]);
    int b = static_cast<int>((v - hist.lower) * inv_bw);
    b = std::clamp(b, 0, last);
    ++hist.counts[static_cast<std::size_t>(b)];
  }
  hist.total_count += static_cast<std::uint64_t>(t.numel());
  hist.running_min = std::min(hist.running_min, tmin);
  hist.running_max = std::max(hist.running_max, tmax);
}

std::pair<double, double> minmax_calibrate(const RunningHistogram& hist) {
  if (hist.total_count == 0) fail("minmax_calibrate: empty histogram");
  if (hist.running_min == hist.running_max)
    return {hist.running_min - 0.5, hist.running_max + 0.5};
  return {hist.running_min, hist.running_max};
}

std::pair<double, double> entropy_calibrate(const RunningHistogram& hist, int bits,
                                            double* out_kl) {
  if (bits < 2 || bits > 8) fail("entropy_calibrate: bits must be in [2, 8]");
  const PopSpan pop = populated_span(hist);
  const int levels = 1 << bits;
  const int width = pop.hi - pop.lo;
  const int min_width = std::min(levels, width);

  Best best;
  if (width <= 64) {
    for (int i = pop.lo; i + min_width <= pop.hi; ++i)
      for (int j = i + min_width; j <= pop.hi; ++j)
        best.consider(window_kl(hist, pop, i, j, levels), i, j);
  } else {
    const int stride = std::max(1, width / 96);
    for (int i = pop.lo; i + min_width <= pop.hi; i += stride)
      for (int j = pop.hi; j - min_width >= i; j -= stride)
        best.consider(window_kl(hist, pop, i, j, levels), i, j);
    const Best coarse = best;
    const int ilo = std::max(pop.lo, coarse.i - stride + 1);
    const int ihi = std::min(pop.hi - min_width, coarse.i + stride - 1);
    const int jlo = std::max(pop.lo + min_width, coarse.j - stride + 1);
    const int jhi = std::min(pop.hi, coarse.j + stride - 1);
    for (int i = ilo; i <= ihi; ++i)
      for (int j = std::max(jlo, i + min_width); j <= jhi; ++j)
        best.consider(window_kl(hist, pop, i, j, levels), i, j);
  }
  if (out_kl) *out_kl = best.score;
  return finish_span(hist, hist.edge(best.i), hist.edge(best.j));
}

std::pair<double, double> l2_calibrate(const RunningHistogram& hist, int bits, double* out_err,
                                       int max_iters) {
  if (bits < 2 || bits > 8) fail("l2_calibrate: bits must be in [2, 8]");
  const PopSpan pop = populated_span(hist);
  const int width = pop.hi - pop.lo;
  constexpr double kTol = 1e-12;

  Best best;
  if (width <= 64) {
    for (int i = pop.lo; i < pop.hi; ++i)
      for (int j = i + 1; j <= pop.hi; ++j) best.consider(window_sse(hist, pop, i, j, bits), i, j);
  } else {
    // greedy inward shrink from the full populated span, early-stopped
    int lo = pop.lo, hi = pop.hi;
    double cur = window_sse(hist, pop, lo, hi, bits);
    const int budget = max_iters > 0 ? max_iters : hist.bins();
    for (int it = 0; it < budget && hi - lo > 1; ++it) {
      const double shrink_lo = window_sse(hist, pop, lo + 1, hi, bits);
      const double shrink_hi = window_sse(hist, pop, lo, hi - 1, bits);
      const double cand = std::min(shrink_lo, shrink_hi);
      if (cur - cand < kTol) break;
      if (shrink_lo <= shrink_hi)
        ++lo;
      else
        --hi;
      cur = cand;
    }
    best.consider(cur, lo, hi);
  }
  if (out_err) *out_err = best.score;
  return finish_span(hist, hist.edge(best.i), hist.edge(best.j));
}

std::pair<double, double> entropy_calibrate_symmetric(const RunningHistogram& hist, int bits) {
  const PopSpan pop = populated_span(hist);
  const int levels = 1 << bits;
  std::vector<double> cands;
  for (int k = pop.lo; k <= pop.hi; ++k) {
    const double m = std::abs(hist.edge(k));
    if (m > 0.0) cands.push_back(m);
  }
  std::sort(cands.begin(), cands.end());
  cands.erase(std::unique(cands.begin(), cands.end()), cands.end());
  if (cands.empty()) cands.push_back(std::max(std::abs(hist.running_max), 1e-8));

  const double inv_n = 1.0 / static_cast<double>(hist.total_count);
  double best_kl = std::numeric_limits<double>::infinity();
  double best_t = cands.front();
  for (const double T : cands) {
    // in-window bins by center; outliers fold into the nearest in-window bin
    int wlo = pop.hi, whi = pop.lo;
    for (int k = pop.lo; k < pop.hi; ++k) {
      const double c = hist.center(k);
      if (c >= -T && c <= T) {
        wlo = std::min(wlo, k);
        whi = std::max(whi, k + 1);
      }
    }
    if (wlo >= whi) continue;
    std::uint64_t below = 0, above = 0;
    for (int k = pop.lo; k < wlo; ++k) below += hist.counts[static_cast<std::size_t>(k)];
    for (int k = whi; k < pop.hi; ++k) above += hist.counts[static_cast<std::size_t>(k)];
    auto fold = [&](int k) -> std::uint64_t {
      std::uint64_t f = hist.counts[static_cast<std::size_t>(k)];
      if (k == wlo) f += below;
      if (k == whi - 1) f += above;
      return f;
    };
    auto level_of = [&](int k) {
      const double pos = (hist.center(k) + T) / (2.0 * T);
      return std::clamp(static_cast<int>(std::floor(pos * levels)), 0, levels - 1);
    };
    std::vector<double> mass(static_cast<std::size_t>(levels), 0.0);
    std::vector<int> support(static_cast<std::size_t>(levels), 0);
    for (int k = wlo; k < whi; ++k) {
      const int lev = level_of(k);
      mass[static_cast<std::size_t>(lev)] +=
          static_cast<double>(hist.counts[static_cast<std::size_t>(k)]);
      if (fold(k) > 0) support[static_cast<std::size_t>(lev)] += 1;
    }
    double kl = 0.0;
    for (int k = wlo; k < whi; ++k) {
      const std::uint64_t f = fold(k);
      if (!f) continue;
      const int lev = level_of(k);
      const double p = static_cast<double>(f) * inv_n + kKlEps;
      const double q =
          mass[static_cast<std::size_t>(lev)] / support[static_cast<std::size_t>(lev)] * inv_n +
          kKlEps;
      kl += p * std::log(p / q);
    }
    if (kl < best_kl) {
      best_kl = kl;
      best_t = T;
    }
  }
  return {-best_t, best_t};
}

std::pair<double, double> l2_calibrate_symmetric(const RunningHistogram& hist, int bits) {
  const PopSpan pop = populated_span(hist);
  const double qmax = static_cast<double>((1 << (bits - 1)) - 1);
  std::vector<double> cands;
  for (int k = pop.lo; k <= pop.hi; ++k) {
    const double m = std::abs(hist.edge(k));
    if (m > 0.0) cands.push_back(m);
  }
  std::sort(cands.begin(), cands.end());
  cands.erase(std::unique(cands.begin(), cands.end()), cands.end());
  if (cands.empty()) cands.push_back(std::max(std::abs(hist.running_max), 1e-8));

  double best_err = std::numeric_limits<double>::infinity();
  double best_t = cands.front();
  for (const double T : cands) {
    const double s = T / qmax;
    double err = 0.0;
    for (int k = pop.lo; k < pop.hi; ++k) {
      const auto c = hist.counts[static_cast<std::size_t>(k)];
      if (!c) continue;
      const double x = hist.center(k);
      const double q = std::clamp(round_half_even(x / s), -qmax, qmax);
      const double xh = s * q;
      err += static_cast<double>(c) * (x - xh) * (x - xh);
    }
    if (err < best_err) {
      best_err = err;
      best_t = T;
    }
  }
  return {-best_t, best_t};
}

const char* calib_objective_name(CalibObjective o) {
  switch (o) {
    case CalibObjective::entropy: return "entropy";
    case CalibObjective::l2: return "l2";
    case CalibObjective::minmax: return "minmax";
  }
  return "?";
}

CalibObjective calib_objective_from_name(const std::string& name) {
  if (name == "entropy") return CalibObjective::entropy;
  if (name == "l2") return CalibObjective::l2;
  if (name == "minmax") return CalibObjective::minmax;
  fail("unknown calibration objective: " + name);
}

RandomNormalStream::RandomNormalStream(double mean, double stddev, int n_batches,
                                       std::vector<int> batch_shape, std::uint64_t seed)
    : mean_(mean), stddev_(stddev), n_batches_(n_batches), shape_(std::move(batch_shape)),
      seed_(seed), rng_(seed) {
  if (!(stddev > 0.0)) fail("random_normal_source: std must be positive");
  if (n_batches < 1) fail("random_normal_source: n_batches must be >= 1");
  if (shape_.empty()) fail("random_normal_source: empty batch shape");
}

std::optional<Tensor> RandomNormalStream::next() {
  if (emitted_ >= n_batches_) return std::nullopt;
  ++emitted_;
  Tensor t(shape_);
  std::normal_distribution<double> dist(mean_, stddev_);
  for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<float>(dist(rng_));
  return t;
}

void RandomNormalStream::reset() {
  rng_.seed(seed_);
  emitted_ = 0;
}

CalibrationSource CalibrationSource::from_dataset(const DatasetSpec& ds, int n_batches) {
  CalibrationSource s;
  s.kind = Kind::dataset_samples;
  s.dataset = &ds;
  s.n_batches = n_batches;
  return s;
}

CalibrationSource CalibrationSource::random_normal(double mean, double stddev, int n_batches,
                                                   std::vector<int> batch_shape,
                                                   std::uint64_t seed) {
  CalibrationSource s;
  s.kind = Kind::random_normal;
  s.mean = mean;
  s.stddev = stddev;
  s.n_batches = n_batches;
  s.batch_shape = std::move(batch_shape);
  s.seed = seed;
  return s;
}

std::string plan_to_json(const CalibrationPlan& plan) {
  nlohmann::ordered_json arr = nlohmann::ordered_json::array();
  for (const auto& e : plan.entries) {
    nlohmann::ordered_json o;
    o["site_id"] = e.site_id;
    o["kind"] = e.is_weight ? "weight" : "activation";
    o["scale"] = e.qp.scale;
    o["zero_point"] = e.qp.zero_point;
    o["bits"] = e.qp.bits;
    o["qmin"] = e.qp.qmin;
    o["qmax"] = e.qp.qmax;
    o["objective"] = e.objective;
    arr.push_back(std::move(o));
  }
  return arr.dump(2) + "\n";
}

CalibrationPlan plan_from_json(const std::string& text) {
  nlohmann::json arr;
  try {
    arr = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    fail(std::string("calibration plan: invalid JSON: ") + e.what());
  }
  if (!arr.is_array()) fail("calibration plan: top-level JSON array expected");
  CalibrationPlan plan;
  for (const auto& o : arr) {
    PlanEntry e;
    e.site_id = o.at("site_id").get<std::string>();
    e.is_weight = o.at("kind").get<std::string>() == "weight";
    e.qp.scale = o.at("scale").get<double>();
    e.qp.zero_point = o.at("zero_point").get<std::int32_t>();
    e.qp.bits = o.at("bits").get<int>();
    e.qp.qmin = o.at("qmin").get<std::int32_t>();
    e.qp.qmax = o.at("qmax").get<std::int32_t>();
    e.qp.mode = e.is_weight ? QuantMode::symmetric_signed : QuantMode::affine_unsigned;
    e.qp.fmin = e.qp.scale * (e.qp.qmin - e.qp.zero_point);
    e.qp.fmax = e.qp.scale * (e.qp.qmax - e.qp.zero_point);
    e.objective = o.value("objective", "minmax");
    if (!(e.qp.scale > 0.0)) fail("calibration plan: non-positive scale for " + e.site_id);
    plan.entries.push_back(std::move(e));
  }
  return plan;
}

namespace {

std::pair<double, double> finalize_activation(const RunningHistogram& h, CalibObjective obj,
                                              int bits) {
  switch (obj) {
    case CalibObjective::minmax: return minmax_calibrate(h);
    case CalibObjective::entropy: return entropy_calibrate(h, bits);
    case CalibObjective::l2: return l2_calibrate(h, bits);
  }
  fail("finalize_activation: bad objective");
}

std::pair<double, double> finalize_weight(const RunningHistogram& h, CalibObjective obj,
                                          int bits) {
  switch (obj) {
    case CalibObjective::minmax: {
      if (h.total_count == 0) fail("calibrate: empty weight histogram");
      const double m =
          std::max({std::abs(h.running_min), std::abs(h.running_max), 1e-12});
      return {-m, m};
    }
    case CalibObjective::entropy: return entropy_calibrate_symmetric(h, bits);
    case CalibObjective::l2: return l2_calibrate_symmetric(h, bits);
  }
  fail("finalize_weight: bad objective");
}

}  // namespace

CalibrationPlan calibrate_model(const DistilledModel& model, const CalibrationSource& source,
                                CalibObjective objective, int bits) {
  std::map<std::string, RunningHistogram> hists;
  std::vector<SiteLayout> layouts;
  for (int si = 0; si < model.n_students(); ++si) {
    layouts.push_back(student_site_layout(model, si));
    for (const auto& id : layouts.back().all_ids()) hists.emplace(id, RunningHistogram());
  }

  // weights observed once from their own values
  for (int si = 0; si < model.n_students(); ++si) {
    const auto& layout = layouts[static_cast<std::size_t>(si)];
    const auto& params = model.student_params[static_cast<std::size_t>(si)];
    for (std::size_t k = 0; k < layout.weight_ids.size(); ++k)
      observe(hists.at(layout.weight_ids[k]), params.weights[k]);
  }

  // stream activation batches through the float student(s)
  auto observe_batch = [&](const Tensor& model_input) {
    FeaturePyramid t_pyr;
    if (model.scheme == Scheme::rd) t_pyr = forward(model.teacher_def, model.teacher_params, model_input);
    for (int si = 0; si < model.n_students(); ++si) {
      const auto& layout = layouts[static_cast<std::size_t>(si)];
      const Tensor& input = model.scheme == Scheme::rd ? t_pyr.back() : model_input;
      observe(hists.at(layout.input_id), input);
      auto outs = forward_all(model.student_defs[static_cast<std::size_t>(si)],
                              model.student_params[static_cast<std::size_t>(si)], input);
      for (std::size_t k = 0; k < layout.site_ids.size(); ++k)
        observe(hists.at(layout.site_ids[k]),
                outs[static_cast<std::size_t>(layout.placement[k])]);
    }
  };

  if (source.kind == CalibrationSource::Kind::dataset_samples) {
    if (!source.dataset) fail("calibrate_model: dataset source without dataset");
    auto imgs = all_train_images(*source.dataset);
    if (static_cast<int>(imgs.size()) < source.n_batches)
      fail("calibrate_model: source exhausted after " + std::to_string(imgs.size()) +
           " of " + std::to_string(source.n_batches) + " batches");
    for (int b = 0; b < source.n_batches; ++b)
      observe_batch(standardize_image(model, imgs[static_cast<std::size_t>(b)].first->image));
  } else {
    std::vector<int> shape = source.batch_shape;
    if (shape.empty()) shape = {1, model.image_size, model.image_size};
    RandomNormalStream stream(source.mean, source.stddev, source.n_batches, shape, source.seed);
    while (auto t = stream.next()) observe_batch(*t);
  }

  CalibrationPlan plan;
  for (int si = 0; si < model.n_students(); ++si) {
    const auto& layout = layouts[static_cast<std::size_t>(si)];
    auto add_entry = [&](const std::string& id, bool is_weight) {
      const auto& h = hists.at(id);
      if (h.total_count == 0) fail("calibrate_model: site " + id + " has zero observations");
      const auto [a, b] = is_weight ? finalize_weight(h, objective, bits)
                                    : finalize_activation(h, objective, bits);
      PlanEntry e;
      e.site_id = id;
      e.is_weight = is_weight;
      e.qp = compute_qparams(a, b, bits,
                             is_weight ? QuantMode::symmetric_signed
                                       : QuantMode::affine_unsigned);
      e.objective = calib_objective_name(objective);
      plan.entries.push_back(std::move(e));
    };
    add_entry(layout.input_id, false);
    for (const auto& id : layout.site_ids) add_entry(id, false);
    for (const auto& id : layout.weight_ids) add_entry(id, true);
  }
  return plan;
}

}  // namespace dqkd
