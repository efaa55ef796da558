#include <doctest.h>

#include <cmath>
#include <set>
#include <stdexcept>

#include "ipf/error.hpp"
#include "ipf/slope.hpp"
#include "ipf/synthetic.hpp"
#include "ipf/training.hpp"
#include "support.hpp"

using namespace ipf;

namespace {

ModelConfig tiny_model() {
  ModelConfig c;
  c.image_size = 16;
  c.gate_channels = 2;
  c.cnn_channels = {3, 4};
  c.vit = {8, 2, 1, 8};
  c.clinical = {1, 4, 4, 1.3};
  c.fusion_hidden_dim = 6;
  return c;
}

TrainConfig tiny_train() {
  TrainConfig t;
  t.folds = 2;
  t.epochs = 2;
  t.batch_size = 4;
  t.learning_rate = 1e-3;
  t.seed = 3;
  t.log_every = 0;
  return t;
}

const std::vector<PatientSample>& small_cohort() {
  static const auto patients = generate_synthetic(SynthSpec{6, 3, 32, 4, 5.0}, 21);
  return patients;
}

double lll_by_hand(double delta, double sigma) {
  return -std::log(std::sqrt(2.0) * sigma) - std::sqrt(2.0) * std::abs(delta) / sigma;
}

}  // namespace

TEST_SUITE("training") {

TEST_CASE("slope target is the least-squares fit over re-zeroed weeks") {
  const FvcSeries s({{-2.0, 2500.0}, {3.0, 2480.0}, {8.0, 2440.0}});
  CHECK(ground_truth_slope(s) == doctest::Approx(-6.0));
}

TEST_CASE("L1 loss is the mean absolute slope error") {
  CHECK(l1_slope_loss(std::vector<double>{1.0, -2.0}, std::vector<double>{0.0, 2.0}) == 2.5);
  CHECK_THROWS_AS(l1_slope_loss(std::vector<double>{}, std::vector<double>{}), UsageError);
  CHECK_THROWS_AS(l1_slope_loss(std::vector<double>{1.0}, std::vector<double>{}), UsageError);
}

TEST_CASE("scoring reconstructs follow-up visits from the baseline") {
  const PatientPrediction p{"P", -4.0, FvcSeries({{0.0, 2500.0}, {5.0, 2470.0}, {10.0, 2450.0}}),
                            std::nullopt};
  CHECK(follow_up_residuals(p) == std::vector<double>{-10.0, -10.0});
  const auto policy = SigmaPolicy::fixed(100.0, ClipPolicy{});
  const auto r = score_predictions(std::vector<PatientPrediction>{p}, 100.0, policy);
  CHECK(r.visits_scored == 2);
  CHECK(r.rmse == doctest::Approx(10.0));
  CHECK(r.lll == doctest::Approx(lll_by_hand(10.0, 100.0)));
  REQUIRE(r.lll_clipped.has_value());
  CHECK(*r.lll_clipped == doctest::Approx(lll_by_hand(10.0, 100.0)));
  CHECK_THROWS_AS(score_predictions(std::vector<PatientPrediction>{}, 100.0, policy), UsageError);
}

TEST_CASE("prepared patients carry resized slices, masks and targets") {
  const auto model = tiny_model();
  std::vector<std::string> warnings;
  const auto prepared = prepare_patients(small_cohort(), model, false, &warnings);
  REQUIRE(prepared.size() == small_cohort().size());
  for (std::size_t i = 0; i < prepared.size(); ++i) {
    const auto& p = prepared[i];
    CHECK(p.id == small_cohort()[i].id());
    REQUIRE(p.slope.has_value());
    CHECK(*p.slope == doctest::Approx(ground_truth_slope(small_cohort()[i].fvc)));
    CHECK(p.images.size() == small_cohort()[i].volume.kept_count());
    CHECK(p.masks.size() == p.images.size());
    CHECK(p.images[0].rows == 16);
  }
  const auto ones = prepare_patients(small_cohort(), model, true, nullptr);
  for (const auto& m : ones[0].masks) {
    for (float v : m.data) CHECK(v == 1.0f);
  }
}

TEST_CASE("a test patient in the training samples is caught") {
  const auto prepared = prepare_patients(small_cohort(), tiny_model(), false, nullptr);
  const auto folds = kfold_split(prepared.size(), 2, 0);
  const auto samples = fold_training_samples(prepared, folds[0]);
  std::set<std::size_t> used;
  for (const auto& s : samples) used.insert(s.patient);
  CHECK(used == std::set<std::size_t>(folds[0].train.begin(), folds[0].train.end()));

  auto leaky = samples;
  leaky.push_back({folds[0].test[0], 0});
  CHECK_THROWS_AS(assert_no_leakage(prepared, leaky, folds[0].test), std::logic_error);
}

TEST_CASE("training is reproducible and checkpoints reproduce predictions") {
  const auto model = tiny_model();
  const auto cfg = tiny_train();
  const auto a = run_training(small_cohort(), model, cfg);
  const auto b = run_training(small_cohort(), model, cfg);
  CHECK(a.log.to_jsonl() == b.log.to_jsonl());
  REQUIRE(a.checkpoints.size() == 2);
  REQUIRE(a.reports.size() == 2);
  CHECK(a.log.epochs.size() == 4);
  for (const auto& r : a.reports) {
    CHECK(std::isfinite(r.rmse));
    CHECK(std::isfinite(r.lll));
  }

  const auto& ckpt = a.checkpoints[0];
  std::set<std::string> train(ckpt.train_ids.begin(), ckpt.train_ids.end());
  for (const auto& id : ckpt.test_ids) CHECK_FALSE(train.contains(id));

  test::TempDir dir("ckpt");
  ckpt.save(dir / "fold_0.ckpt");
  const auto back = Checkpoint::load(dir / "fold_0.ckpt");
  CHECK(back.header() == ckpt.header());
  const auto prepared = prepare_patients(small_cohort(), model, false, nullptr);
  for (const auto& p : prepared) {
    CHECK(predict_patient_slope(back, p) == predict_patient_slope(ckpt, p));
  }

  const auto policy = SigmaPolicy::fixed(200.0);
  const auto report = evaluate_model(back, small_cohort(), policy);
  CHECK(report.sigma == 200.0);
  CHECK(report.patients.size() == small_cohort().size());
  CHECK(std::isfinite(report.lll));
  CHECK_THROWS_AS(evaluate_model(back, std::vector<PatientSample>{}, policy), UsageError);

  auto other = cfg;
  other.seed = 4;
  CHECK(run_training(small_cohort(), model, other).log.to_jsonl() != a.log.to_jsonl());
}

TEST_CASE("checkpoints with a tampered config are rejected") {
  const auto model = tiny_model();
  Checkpoint c;
  c.model = model;
  c.params = HybridModel(model).init_params<float>(1);
  test::TempDir dir("ckpt");
  c.save(dir / "a.ckpt");
  auto text = test::slurp(dir / "a.ckpt");
  const auto at = text.find("\"fusion_hidden_dim\":6");
  REQUIRE(at != std::string::npos);
  text.replace(at, 21, "\"fusion_hidden_dim\":7");
  test::spit(dir / "b.ckpt", text);
  CHECK_THROWS_AS(Checkpoint::load(dir / "b.ckpt"), DataError);
  CHECK_THROWS_AS(Checkpoint::load(dir / "missing.ckpt"), DataError);
}

TEST_CASE("train config validation") {
  auto t = tiny_train();
  t.folds = 1;
  CHECK_THROWS_AS(t.validate(), UsageError);
  t = tiny_train();
  t.epochs = 0;
  CHECK_THROWS_AS(t.validate(), UsageError);
  CHECK(parse_precision("f64") == Precision::f64);
  CHECK_THROWS_AS(parse_precision("f16"), UsageError);
}

}  // TEST_SUITE
