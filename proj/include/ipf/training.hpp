#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "ipf/dataset.hpp"
#include "ipf/lung_mask.hpp"
#include "ipf/metrics.hpp"
#include "ipf/model.hpp"
#include "ipf/nn/adamw.hpp"
#include "ipf/nn/tensor.hpp"

namespace ipf {

enum class Precision { f32, f64 };
std::string_view to_string(Precision p);
Precision parse_precision(const std::string& text);

struct TrainConfig {
  std::size_t folds = 5;
  std::size_t epochs = 50;
  std::size_t batch_size = 8;
  double learning_rate = 2e-4;
  std::uint64_t seed = 0;
  Precision precision = Precision::f32;
  std::size_t log_every = 1;       // progress line cadence (epochs); 0 = silent
  std::size_t validate_every = 1;  // validation cadence (epochs)
  SigmaPolicy sigma_policy;
  // Replace every lung mask with all ones (context-module ablation).
  bool ignore_masks = false;
  // Stop a fold once the epoch loss is at or below this fraction of the
  // epoch-1 loss. 0 disables.
  double stop_loss_ratio = 0.0;
  std::ostream* progress = nullptr;

  void validate() const;
  nn::AdamWHyper adamw() const;
  nlohmann::json to_json() const;
};

// Ground-truth decline rate of one series: least-squares slope over weeks
// re-zeroed at the first visit. Throws SingularDesignError.
double ground_truth_slope(const FvcSeries& fvc);

// Mean absolute slope error over the batch. Throws UsageError when empty.
double l1_slope_loss(std::span<const double> pred, std::span<const double> truth);

// Kept slices of one patient, windowed/resized to the model resolution, with
// their lung masks.
struct PreparedPatient {
  std::string id;
  ClinicalRecord clinical;
  FvcSeries fvc;
  std::optional<double> slope;  // absent for singular series
  std::vector<Grid<float>> images;
  std::vector<Grid<float>> masks;
  std::size_t mask_fallbacks = 0;
};

// Extracts masks (falling back to all-ones on "no lung region"), computes
// slope targets and resamples kept slices. Warnings are appended.
std::vector<PreparedPatient> prepare_patients(std::span<const PatientSample> patients,
                                              const ModelConfig& model, bool ignore_masks,
                                              std::vector<std::string>* warnings);

// One training sample: a kept slice of a patient.
struct SliceRef {
  std::size_t patient = 0;  // index into the prepared list
  std::size_t slice = 0;
};

// Samples for a fold's training partition. Throws std::logic_error if any
// sample belongs to a test patient.
std::vector<SliceRef> fold_training_samples(std::span<const PreparedPatient> patients,
                                            const Fold& fold);
void assert_no_leakage(std::span<const PreparedPatient> patients, std::span<const SliceRef> samples,
                       std::span<const std::size_t> test);

// ---------------------------------------------------------------------------

struct PatientMetrics {
  std::string patient_id;
  std::size_t visits_scored = 0;
  double rmse = 0.0;
  double lll = 0.0;
  std::optional<double> lll_clipped;
  double predicted_slope = 0.0;
  std::optional<double> true_slope;
};

struct MetricsReport {
  std::vector<PatientMetrics> patients;
  std::size_t visits_scored = 0;
  double rmse = 0.0;
  double lll = 0.0;
  std::optional<double> lll_clipped;
  double sigma = 0.0;
  SigmaPolicy policy;
  std::vector<double> residuals;  // truth - prediction, per scored visit

  nlohmann::json to_json() const;
};

struct PatientPrediction {
  std::string patient_id;
  double slope = 0.0;
  FvcSeries fvc;
  std::optional<double> true_slope;
};

// FVC at every follow-up visit reconstructed from the baseline and the
// predicted slope; baseline visits are not scored.
std::vector<double> follow_up_residuals(const PatientPrediction& p);

// RMSE/LLL per patient and pooled over every scored visit. `sigma` is the
// resolved scale; the policy's clip (if any) adds a clipped LLL.
MetricsReport score_predictions(std::span<const PatientPrediction> predictions, double sigma,
                                const SigmaPolicy& policy);

// Trained weights and everything needed to reproduce predictions.
struct Checkpoint {
  ModelConfig model;
  nn::ParamStore<float> params;
  TargetStats target;
  NormStats norm;
  double sigma = 1.0;  // train-residual Laplace estimate of the fold
  std::size_t fold = 0;
  std::size_t best_epoch = 0;
  std::vector<std::string> train_ids;
  std::vector<std::string> test_ids;
  nlohmann::json run;

  nlohmann::json header() const;
  void save(const std::filesystem::path& path) const;
  static Checkpoint load(const std::filesystem::path& path);
};

// Mean of the per-slice predictions over a patient's kept slices.
double predict_patient_slope(const Checkpoint& ckpt, const PreparedPatient& patient,
                             Precision precision = Precision::f32);

MetricsReport evaluate_model(const Checkpoint& ckpt, std::span<const PreparedPatient> patients,
                             const SigmaPolicy& policy, Precision precision = Precision::f32);
MetricsReport evaluate_model(const Checkpoint& ckpt, std::span<const PatientSample> patients,
                             const SigmaPolicy& policy, Precision precision = Precision::f32);

// ---------------------------------------------------------------------------

struct EpochRecord {
  std::size_t fold = 0;
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  std::optional<double> val_rmse;
  std::optional<double> val_lll;
  std::optional<double> sigma;
};

struct FoldRecord {
  std::size_t fold = 0;
  std::size_t best_epoch = 0;
  std::size_t train_patients = 0;
  std::size_t test_patients = 0;
  std::optional<double> rmse;
  std::optional<double> lll;
  double sigma = 0.0;
};

struct TrainLog {
  nlohmann::json header;
  std::vector<std::string> warnings;
  std::vector<EpochRecord> epochs;
  std::vector<FoldRecord> folds;
  double wall_clock_seconds = 0.0;

  // Line-delimited JSON: header, warnings, epochs, folds. Wall-clock time is
  // not included so identical runs serialise identically.
  std::string to_jsonl() const;
};

struct FoldOutcome {
  Checkpoint checkpoint;
  std::optional<MetricsReport> report;  // on the validation partition
};

// Trains one fold from fresh parameters. `validation` may be empty, in which
// case the final epoch is kept.
FoldOutcome train_fold(const HybridModel& model, std::span<const PreparedPatient> patients,
                       const Fold& fold, const TrainConfig& config, std::size_t fold_index,
                       TrainLog& log);

struct TrainResult {
  std::vector<Checkpoint> checkpoints;
  std::vector<MetricsReport> reports;
  TrainLog log;
};

TrainResult run_training(std::span<const PatientSample> dataset, const ModelConfig& model,
                         const TrainConfig& config, const nlohmann::json& run_header = {});

}  // namespace ipf
