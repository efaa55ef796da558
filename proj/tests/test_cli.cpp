#include <doctest.h>

#include <cmath>
#include <sstream>

#include <json.hpp>

#include "ipf/cli.hpp"
#include "ipf/dataset.hpp"
#include "ipf/raster.hpp"
#include "support.hpp"

using namespace ipf;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  int code = 0;
  std::string out;
  std::string err;
};

Outcome run(std::vector<std::string> args) {
  std::ostringstream out;
  std::ostringstream err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

std::vector<std::string> synth_args(const fs::path& out) {
  return {"synth", "--patients", "4", "--slices", "3", "--visits", "4",
          "--image-size", "32", "--seed", "5", "--out", out.string()};
}

}  // namespace

TEST_SUITE("cli") {

TEST_CASE("synth is byte-identical for the same seed and output path") {
  test::TempDir dir("synth");
  REQUIRE(run(synth_args(dir / "d")).code == 0);
  const auto csv = test::slurp(dir / "d" / "clinical.csv");
  const auto manifest = test::slurp(manifest_path(dir / "d", "SYN0000"));
  const auto slice = test::slurp(manifest_path(dir / "d", "SYN0000").parent_path() / "slice_001.pgm");
  REQUIRE(run(synth_args(dir / "d")).code == 0);
  CHECK(test::slurp(dir / "d" / "clinical.csv") == csv);
  CHECK(test::slurp(manifest_path(dir / "d", "SYN0000")) == manifest);
  CHECK(test::slurp(manifest_path(dir / "d", "SYN0000").parent_path() / "slice_001.pgm") == slice);
  CHECK(csv.rfind("# ipf-run {", 0) == 0);
  CHECK(load_dataset(dir / "d").size() == 4);
}

TEST_CASE("a bright slice fails masking unless the fallback is requested") {
  test::TempDir dir("mask");
  RawSlice bright(32, 32);
  for (auto& v : bright.data) v = 1024 + 300;
  write_pgm16(dir / "bright.pgm", bright);

  const auto fail = run({"mask", "--input", (dir / "bright.pgm").string(), "--out", (dir / "m").string()});
  CHECK(fail.code == 2);
  CHECK(fail.err.find("no lung region") != std::string::npos);

  const auto ok = run({"mask", "--input", (dir / "bright.pgm").string(), "--out", (dir / "m").string(),
                       "--fallback-ones"});
  CHECK(ok.code == 0);
  CHECK(ok.err.find("warning") != std::string::npos);
  CHECK(fs::exists(dir / "m" / "bright.mask.pgm"));
}

TEST_CASE("train, eval, predict and distfit run end to end") {
  test::TempDir dir("e2e");
  REQUIRE(run(synth_args(dir / "d")).code == 0);
  const auto train = run({"train", "--data", (dir / "d").string(), "--out", (dir / "t").string(),
                          "--folds", "2", "--epochs", "1", "--batch-size", "4", "--image-size", "16",
                          "--quiet"});
  REQUIRE_MESSAGE(train.code == 0, train.err);
  CHECK(fs::exists(dir / "t" / "fold_0.ckpt"));
  CHECK(fs::exists(dir / "t" / "fold_1.ckpt"));
  CHECK(fs::exists(dir / "t" / "train_log.jsonl"));
  CHECK(fs::exists(dir / "t" / "timing.json"));

  const auto eval = run({"eval", "--checkpoint", (dir / "t" / "fold_0.ckpt").string(),
                         (dir / "t" / "fold_1.ckpt").string(), "--data", (dir / "d").string(),
                         "--out", (dir / "eval.json").string()});
  REQUIRE_MESSAGE(eval.code == 0, eval.err);
  const auto j = nlohmann::json::parse(test::slurp(dir / "eval.json"));
  CHECK(j["folds"].size() == 2);
  CHECK(std::isfinite(j["pooled"]["lll"].get<double>()));
  CHECK(std::isfinite(j["pooled"]["rmse"].get<double>()));
  CHECK(j.contains("run"));

  const auto pred = run({"predict", "--checkpoint", (dir / "t" / "fold_0.ckpt").string(), "--data",
                         (dir / "d").string(), "--out", (dir / "pred.csv").string()});
  REQUIRE_MESSAGE(pred.code == 0, pred.err);
  CHECK(test::slurp(dir / "pred.csv").find("patient_id,weeks,fvc,fvc_pred,slope,sigma") !=
        std::string::npos);

  const auto fit = run({"distfit", "--data", (dir / "d").string(), "--out", (dir / "fit").string()});
  REQUIRE_MESSAGE(fit.code == 0, fit.err);
  CHECK(fs::exists(dir / "fit" / "distfit.svg"));

  const auto dump = run({"dump-features", "--checkpoint", (dir / "t" / "fold_0.ckpt").string(),
                         "--data", (dir / "d").string(), "--patient", "SYN0001", "--out",
                         (dir / "feat").string()});
  REQUIRE_MESSAGE(dump.code == 0, dump.err);
  CHECK(fs::exists(dir / "feat" / "gate_c00.pgm"));
}

TEST_CASE("config files supply defaults and command-line flags win") {
  test::TempDir dir("cfg");
  test::spit(dir / "c.json", R"({"patients": 3, "slices": 2, "visits": 3, "image_size": 32})");
  REQUIRE(run({"synth", "--config", (dir / "c.json").string(), "--patients", "2", "--out",
               (dir / "d").string()})
              .code == 0);
  CHECK(load_dataset(dir / "d").size() == 2);

  test::spit(dir / "bad.json", R"({"patients": 3, "colour": "blue"})");
  const auto bad = run({"synth", "--config", (dir / "bad.json").string(), "--out", (dir / "e").string()});
  CHECK(bad.code == 1);
  CHECK(bad.err.find("colour") != std::string::npos);
}

TEST_CASE("exit codes") {
  test::TempDir dir("codes");
  CHECK(run({"--help"}).code == 0);
  CHECK(run({"train", "--help"}).code == 0);
  CHECK(run({}).code == 1);
  CHECK(run({"frobnicate"}).code == 1);
  CHECK(run({"synth", "--patients", "many", "--out", (dir / "x").string()}).code == 1);
  CHECK(run({"synth", "--patients", "0", "--out", (dir / "x").string()}).code == 1);
  const auto missing = run({"eval", "--checkpoint", (dir / "nope.ckpt").string(), "--data",
                            (dir / "nowhere").string(), "--out", (dir / "e.json").string()});
  CHECK(missing.code == 2);
  CHECK(missing.err.rfind("ipf: ", 0) == 0);
  CHECK(run({"train", "--data", (dir / "nowhere").string(), "--out", (dir / "t").string()}).code == 2);
}

}  // TEST_SUITE
