#include <doctest.h>

#include "dqkd/bench.hpp"
#include "dqkd/cli.hpp"

#include <filesystem>
#include <fstream>

using namespace dqkd;
namespace fs = std::filesystem;

namespace {

fs::path work_dir() {
  static const fs::path dir = [] {
    auto p = fs::temp_directory_path() / "dqkd_test_cli";
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
  }();
  return dir;
}

std::string p(const std::string& name) { return (work_dir() / name).string(); }

}  // namespace

TEST_CASE("cli pipeline: gen-data, train, calibrate, quantize, eval") {
  CHECK(run_cli({"gen-data", "--classes", "2", "--per-class", "6", "--size", "32", "--seed", "1",
                 "--out", p("data")}) == 0);
  REQUIRE(fs::exists(work_dir() / "data" / "class00" / "train" / "good"));

  CHECK(run_cli({"train", "--data", p("data"), "--scheme", "stfpm", "--epochs", "2", "--seed",
                 "1", "--out", p("m.dqkd")}) == 0);
  REQUIRE(fs::exists(p("m.dqkd")));
  REQUIRE(fs::exists(p("m.dqkd") + ".losses.csv"));

  CHECK(run_cli({"calibrate", "--model", p("m.dqkd"), "--data", p("data"), "--calib", "train",
                 "--objective", "entropy", "--calib-batches", "4", "--bits", "8", "--out",
                 p("plan.json")}) == 0);
  REQUIRE(fs::exists(p("plan.json")));

  CHECK(run_cli({"quantize", "--model", p("m.dqkd"), "--plan", p("plan.json"), "--calib-tag",
                 "train", "--out", p("q.dqkd")}) == 0);
  DistilledModel q = load_model(p("q.dqkd"));
  CHECK(q.precision == Precision::ptq_int8);
  CHECK(q.calib_tag == "train");

  CHECK(run_cli({"eval", "--model", p("q.dqkd"), "--data", p("data"), "--timing-runs", "0",
                 "--out", p("report.json")}) == 0);
  std::ifstream in(p("report.json"));
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  EvalReport r = report_from_json(text);
  CHECK(r.precision == "ptq-int8");
  CHECK(r.calibration == "train");
  CHECK(r.classes.size() == 2);

  CHECK(run_cli({"report", p("report.json"), "--out", p("rendered")}) == 0);
  CHECK(fs::exists(work_dir() / "rendered" / "summary.csv"));
}

TEST_CASE("cli error contracts") {
  // quantize without a calibration plan file
  CHECK(run_cli({"quantize", "--model", p("m.dqkd"), "--out", p("q2.dqkd")}) == 2);
  // unknown flag
  CHECK(run_cli({"gen-data", "--does-not-exist", "1", "--out", p("x")}) == 2);
  // unknown subcommand
  CHECK(run_cli({"frobnicate"}) == 2);
  // missing input file
  CHECK(run_cli({"eval", "--model", p("missing.dqkd"), "--data", p("data"), "--out",
                 p("r.json")}) == 2);
}

TEST_CASE("cli fp16 quantize path needs no plan") {
  CHECK(run_cli({"quantize", "--model", p("m.dqkd"), "--precision", "fp16", "--out",
                 p("h.dqkd")}) == 0);
  DistilledModel h = load_model(p("h.dqkd"));
  CHECK(h.precision == Precision::fp16);
}
