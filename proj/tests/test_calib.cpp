#include <doctest.h>

#include "dqkd/calib.hpp"
#include "dqkd/dataset.hpp"
#include "dqkd/distill.hpp"
#include "oracles.hpp"

#include <cmath>
#include <map>
#include <random>

using namespace dqkd;

TEST_CASE("observe: constant tensor, additivity, counting") {
  RunningHistogram h;
  observe(h, Tensor::full({4, 4}, 5.0f));
  CHECK(h.running_min == 5.0);
  CHECK(h.running_max == 5.0);
  CHECK(h.total_count == 16);
  int populated = 0;
  for (auto c : h.counts) populated += c > 0;
  CHECK(populated == 1);

  // observing the same tensor again doubles every bin
  RunningHistogram h2;
  std::mt19937_64 rng(3);
  Tensor t({64});
  std::uniform_real_distribution<float> d(-2.0f, 7.0f);
  for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = d(rng);
  observe(h2, t);
  const auto snapshot = h2.counts;
  observe(h2, t);
  for (std::size_t i = 0; i < snapshot.size(); ++i) CHECK(h2.counts[i] == 2 * snapshot[i]);

  RunningHistogram h3;
  Tensor ramp({1024});
  for (int i = 0; i < 1024; ++i) ramp[i] = static_cast<float>(i);
  observe(h3, ramp);
  CHECK(h3.total_count == 1024);
  CHECK(h3.running_min == 0.0);
  CHECK(h3.running_max == 1023.0);
  std::uint64_t sum = 0;
  for (auto c : h3.counts) sum += c;
  CHECK(sum == 1024);
}

TEST_CASE("observe: rescaling preserves total_count and covers new values") {
  RunningHistogram h(64);
  observe(h, Tensor::full({8}, 1.0f));
  observe(h, Tensor::full({8}, 2.0f));
  const auto before = h.total_count;
  observe(h, Tensor::full({4}, 1000.0f));  // forces upward doubling
  observe(h, Tensor::full({4}, -500.0f));  // forces downward doubling
  CHECK(h.total_count == before + 8);
  std::uint64_t sum = 0;
  for (auto c : h.counts) sum += c;
  CHECK(sum == h.total_count);
  CHECK(h.lower <= -500.0);
  CHECK(h.upper() >= 1000.0);
  CHECK_THROWS_WITH_AS(observe(h, Tensor({1}, {NAN})), doctest::Contains("non-finite"),
                       TensorError);
}

TEST_CASE("minmax_calibrate") {
  RunningHistogram h;
  CHECK_THROWS_AS(minmax_calibrate(h), TensorError);
  observe(h, Tensor::full({4}, 5.0f));
  auto [a, b] = minmax_calibrate(h);
  CHECK(a == doctest::Approx(4.5));
  CHECK(b == doctest::Approx(5.5));

  RunningHistogram h2;
  observe(h2, Tensor({2}, {-1.0f, 2.0f}));
  auto [a2, b2] = minmax_calibrate(h2);
  CHECK(a2 == -1.0);
  CHECK(b2 == 2.0);
}

TEST_CASE("entropy_calibrate: single populated bin returns that bin's span") {
  auto h = oracles::make_hist(0.0, 0.25, {0, 0, 40, 0, 0, 0, 0, 0});
  auto [a, b] = entropy_calibrate(h, 8);
  CHECK(a == doctest::Approx(0.5));
  CHECK(b == doctest::Approx(0.75));
}

TEST_CASE("entropy_calibrate: uniform 64-bin histogram at 8 bits is lossless") {
  std::vector<std::uint64_t> counts(64, 10);
  auto h = oracles::make_hist(-1.0, 2.0 / 64.0, counts);
  double kl = -1.0;
  auto [a, b] = entropy_calibrate(h, 8, &kl);
  CHECK(a == doctest::Approx(-1.0));
  CHECK(b == doctest::Approx(1.0));
  CHECK(kl == doctest::Approx(0.0));
}

TEST_CASE("entropy_calibrate: far outlier is clipped at 2 bits") {
  std::vector<std::uint64_t> counts(64, 100);
  counts[63] = 1;  // far outlier bin
  auto h = oracles::make_hist(0.0, 1.0, counts);
  auto [a, b] = entropy_calibrate(h, 2);
  CHECK(b <= 63.0);  // excludes the outlier bin
  auto want = oracles::brute_entropy(h, 2);
  CHECK(a == want.alpha);
  CHECK(b == want.beta);
}

TEST_CASE("l2_calibrate: single populated bin returns that bin's span") {
  auto h = oracles::make_hist(-2.0, 0.5, {0, 30, 0, 0});
  auto [a, b] = l2_calibrate(h, 8);
  CHECK(a == doctest::Approx(-1.5));
  CHECK(b == doctest::Approx(-1.0));
}

TEST_CASE("l2_calibrate: symmetric histogram gives a symmetric range") {
  // symmetric mass over exactly representable edges
  std::vector<std::uint64_t> counts(64);
  for (int i = 0; i < 64; ++i) counts[static_cast<std::size_t>(i)] =
      static_cast<std::uint64_t>(100 + 50 * std::min(i, 63 - i));
  counts[0] += 300;  // heavy edges make the full span the unique optimum
  counts[63] += 300;
  auto h = oracles::make_hist(-4.0, 0.125, counts);
  auto [a, b] = l2_calibrate(h, 8);
  CHECK(a == doctest::Approx(-b));
}

TEST_CASE("entropy and l2 match their exhaustive oracles on random histograms") {
  std::mt19937_64 rng(71);
  std::uniform_int_distribution<int> bins_d(2, 64), bits_d(2, 8), mass_d(0, 500);
  std::uniform_real_distribution<double> lower_d(-4.0, 1.0), width_d(0.01, 0.5);
  for (int trial = 0; trial < 200; ++trial) {
    const int nbins = bins_d(rng);
    std::vector<std::uint64_t> counts(static_cast<std::size_t>(nbins));
    std::uint64_t total = 0;
    for (auto& c : counts) {
      c = static_cast<std::uint64_t>(std::max(0, mass_d(rng) - 200));
      total += c;
    }
    if (total == 0) counts[static_cast<std::size_t>(trial % nbins)] = total = 7;
    auto h = oracles::make_hist(lower_d(rng), width_d(rng), counts);
    const int bits = bits_d(rng);

    auto got_e = entropy_calibrate(h, bits);
    auto want_e = oracles::brute_entropy(h, bits);
    CHECK(got_e.first == want_e.alpha);
    CHECK(got_e.second == want_e.beta);

    auto got_l = l2_calibrate(h, bits);
    auto want_l = oracles::brute_l2(h, bits);
    CHECK(got_l.first == want_l.alpha);
    CHECK(got_l.second == want_l.beta);

    // spans stay inside the observed range and are never degenerate
    CHECK(got_e.first >= h.running_min - 0.5);
    CHECK(got_e.second <= h.running_max + 0.5);
    CHECK(got_e.first < got_e.second);
    CHECK(got_l.first < got_l.second);
  }
}

TEST_CASE("fully representable histograms calibrate losslessly to the full span") {
  std::mt19937_64 rng(73);
  for (int trial = 0; trial < 40; ++trial) {
    const int bits = 2 + trial % 7;
    const int populated = 1 + static_cast<int>(rng() % static_cast<std::uint64_t>(1 << bits));
    std::vector<std::uint64_t> counts(static_cast<std::size_t>(populated));
    for (auto& c : counts) c = 1 + rng() % 300;
    auto h = oracles::make_hist(-1.0, 0.03125, counts);
    double kl = -1.0;
    auto [a, b] = entropy_calibrate(h, bits, &kl);
    CHECK(kl == doctest::Approx(0.0));
    CHECK(a == doctest::Approx(h.edge(0)));
    CHECK(b == doctest::Approx(h.edge(populated)));
  }
}

TEST_CASE("random_normal_source: determinism and moments") {
  RandomNormalStream s1(0.0, 1.0, 4, {1, 8, 8}, 7);
  RandomNormalStream s2(0.0, 1.0, 4, {1, 8, 8}, 7);
  int batches = 0;
  while (true) {
    auto a = s1.next();
    auto b = s2.next();
    REQUIRE(a.has_value() == b.has_value());
    if (!a) break;
    ++batches;
    for (std::int64_t i = 0; i < a->numel(); ++i) CHECK((*a)[i] == (*b)[i]);
  }
  CHECK(batches == 4);

  RandomNormalStream big(3.0, 1.0, 16, {1, 250, 250}, 99);
  double sum = 0.0, sq = 0.0;
  std::int64_t n = 0;
  while (auto t = big.next()) {
    for (std::int64_t i = 0; i < t->numel(); ++i) {
      sum += (*t)[i];
      sq += static_cast<double>((*t)[i]) * (*t)[i];
      ++n;
    }
  }
  const double mean = sum / n;
  const double stdev = std::sqrt(sq / n - mean * mean);
  CHECK(std::abs(mean - 3.0) < 0.01);
  CHECK(std::abs(stdev - 1.0) < 0.01);

  CHECK_THROWS_AS(RandomNormalStream(0.0, 0.0, 1, {1}, 1), TensorError);
}

TEST_CASE("plan JSON round-trip") {
  CalibrationPlan plan;
  PlanEntry e;
  e.site_id = "student.input";
  e.is_weight = false;
  e.qp = compute_qparams(-1.25, 3.75, 8, QuantMode::affine_unsigned);
  e.objective = "entropy";
  plan.entries.push_back(e);
  e.site_id = "student.w0";
  e.is_weight = true;
  e.qp = compute_qparams(-0.5, 0.5, 8, QuantMode::symmetric_signed);
  e.objective = "entropy";
  plan.entries.push_back(e);

  const std::string text = plan_to_json(plan);
  CalibrationPlan back = plan_from_json(text);
  REQUIRE(back.entries.size() == plan.entries.size());
  for (std::size_t i = 0; i < plan.entries.size(); ++i) {
    CHECK(back.entries[i].site_id == plan.entries[i].site_id);
    CHECK(back.entries[i].is_weight == plan.entries[i].is_weight);
    CHECK(back.entries[i].qp.scale == plan.entries[i].qp.scale);
    CHECK(back.entries[i].qp.zero_point == plan.entries[i].qp.zero_point);
    CHECK(back.entries[i].qp.qmin == plan.entries[i].qp.qmin);
    CHECK(back.entries[i].qp.qmax == plan.entries[i].qp.qmax);
  }
  CHECK(plan_to_json(back) == text);
  CHECK_THROWS_AS(plan_from_json("{\"not\": \"an array\"}"), TensorError);
}

namespace {

DistilledModel tiny_model(const DatasetSpec& ds, std::uint64_t seed) {
  auto [tdef, tparams] = pretrain_teacher(ds, ds.image_size, seed, 0.5, 0.25, 1);
  TrainConfig cfg = default_train_config(Scheme::stfpm);
  cfg.epochs = 1;
  cfg.seed = seed;
  return train_student(tdef, tparams, Scheme::stfpm, ds, cfg);
}

}  // namespace

TEST_CASE("calibrate_model: coverage, minmax oracle, determinism") {
  DatasetSpec ds = generate_synthetic_dataset(2, 6, 32, 5);
  DistilledModel model = tiny_model(ds, 5);

  CalibrationSource src = CalibrationSource::from_dataset(ds, 8);
  CalibrationPlan plan = calibrate_model(model, src, CalibObjective::minmax, 8);

  // plan covers exactly the site set
  auto layout = student_site_layout(model, 0);
  auto ids = layout.all_ids();
  REQUIRE(plan.entries.size() == ids.size());
  for (const auto& id : ids) CHECK(plan.find(id) != nullptr);

  // instrumented pass recomputes the stream min/max per site
  std::map<std::string, std::pair<double, double>> seen;
  auto imgs = all_train_images(ds);
  for (int b = 0; b < 8; ++b) {
    Tensor x = standardize_image(model, imgs[static_cast<std::size_t>(b)].first->image);
    auto outs = forward_all(model.student_defs[0], model.student_params[0], x);
    auto track = [&](const std::string& id, const Tensor& t) {
      auto [it, fresh] = seen.emplace(id, std::pair<double, double>{t.array().minCoeff(),
                                                                    t.array().maxCoeff()});
      if (!fresh) {
        it->second.first = std::min(it->second.first, double(t.array().minCoeff()));
        it->second.second = std::max(it->second.second, double(t.array().maxCoeff()));
      }
    };
    track(layout.input_id, x);
    for (std::size_t k = 0; k < layout.site_ids.size(); ++k)
      track(layout.site_ids[k], outs[static_cast<std::size_t>(layout.placement[k])]);
  }
  for (const auto& [id, mm] : seen) {
    const auto* entry = plan.find(id);
    REQUIRE(entry != nullptr);
    // minmax params bracket the observed extremes (z-point nudging aside)
    CHECK(entry->qp.fmin <= mm.first + entry->qp.scale);
    CHECK(entry->qp.fmax >= mm.second - entry->qp.scale);
  }

  CalibrationPlan plan2 = calibrate_model(model, src, CalibObjective::minmax, 8);
  CHECK(plan_to_json(plan) == plan_to_json(plan2));

  CalibrationSource rn = CalibrationSource::random_normal(0.0, 1.0, 4, {}, 9);
  CalibrationPlan plan_rn = calibrate_model(model, rn, CalibObjective::entropy, 8);
  CHECK(plan_rn.entries.size() == ids.size());

  CalibrationSource too_many = CalibrationSource::from_dataset(ds, 1000);
  CHECK_THROWS_WITH_AS(calibrate_model(model, too_many, CalibObjective::minmax, 8),
                       doctest::Contains("exhausted"), TensorError);
}

TEST_CASE("calibrate_model: constant input brackets the single activation value") {
  DatasetSpec ds = generate_synthetic_dataset(1, 4, 32, 6);
  DistilledModel model = tiny_model(ds, 6);
  // constant image through the model: every activation site sees one value
  for (auto& cls : ds.classes)
    for (auto& item : cls.train) item.image = Tensor::full({1, 32, 32}, 0.75f);
  CalibrationSource src = CalibrationSource::from_dataset(ds, 2);
  CalibrationPlan plan = calibrate_model(model, src, CalibObjective::minmax, 8);
  Tensor x = standardize_image(model, Tensor::full({1, 32, 32}, 0.75f));
  auto layout = student_site_layout(model, 0);
  auto outs = forward_all(model.student_defs[0], model.student_params[0], x);
  for (std::size_t k = 0; k < layout.site_ids.size(); ++k) {
    const auto* e = plan.find(layout.site_ids[k]);
    const auto& site = outs[static_cast<std::size_t>(layout.placement[k])];
    CHECK(e->qp.fmin <= site.array().minCoeff());
    CHECK(e->qp.fmax >= site.array().maxCoeff());
  }
}
