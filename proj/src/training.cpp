#include "ipf/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ostream>
#include <set>
#include <sstream>
#include <stdexcept>

#include "ipf/error.hpp"
#include "ipf/nn/checkpoint.hpp"
#include "ipf/parallel.hpp"
#include "ipf/preprocess.hpp"
#include "ipf/random.hpp"
#include "ipf/slope.hpp"

namespace ipf {

using nlohmann::json;
using nn::ParamStore;
using nn::Tape;
using nn::Tensor;
using nn::Var;

std::string_view to_string(Precision p) { return p == Precision::f32 ? "f32" : "f64"; }

Precision parse_precision(const std::string& text) {
  if (text == "f32") return Precision::f32;
  if (text == "f64") return Precision::f64;
  throw UsageError("invalid precision '" + text + "' (expected f32 or f64)");
}

void TrainConfig::validate() const {
  if (folds < 2) throw UsageError("folds must be >= 2");
  if (epochs < 1) throw UsageError("epochs must be >= 1");
  if (batch_size < 1) throw UsageError("batch size must be >= 1");
  if (!(learning_rate >= 0.0)) throw UsageError("learning rate must be non-negative");
  if (validate_every < 1) throw UsageError("validate_every must be >= 1");
  sigma_policy.validate();
}

nn::AdamWHyper TrainConfig::adamw() const {
  nn::AdamWHyper h;
  h.lr = learning_rate;
  return h;
}

json TrainConfig::to_json() const {
  const auto h = adamw();
  return {{"folds", folds},
          {"epochs", epochs},
          {"batch_size", batch_size},
          {"learning_rate", learning_rate},
          {"beta1", h.beta1},
          {"beta2", h.beta2},
          {"eps", h.eps},
          {"weight_decay", h.weight_decay},
          {"seed", seed},
          {"precision", std::string(to_string(precision))},
          {"log_every", log_every},
          {"validate_every", validate_every},
          {"sigma_policy", sigma_policy.to_json()},
          {"ignore_masks", ignore_masks},
          {"stop_loss_ratio", stop_loss_ratio}};
}

double ground_truth_slope(const FvcSeries& fvc) {
  return ols_fit(DesignPair(fvc.rezeroed_weeks(), fvc.values())).slope;
}

double l1_slope_loss(std::span<const double> pred, std::span<const double> truth) {
  if (pred.empty()) throw UsageError("l1_slope_loss: empty batch");
  if (pred.size() != truth.size()) throw UsageError("l1_slope_loss: length mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) acc += std::abs(truth[i] - pred[i]);
  return acc / static_cast<double>(pred.size());
}

// ---------------------------------------------------------------------------

std::vector<PreparedPatient> prepare_patients(std::span<const PatientSample> patients,
                                              const ModelConfig& model, bool ignore_masks,
                                              std::vector<std::string>* warnings) {
  std::vector<PreparedPatient> out(patients.size());
  std::vector<std::string> notes;
  for (std::size_t i = 0; i < patients.size(); ++i) {
    const auto& src = patients[i];
    auto& dst = out[i];
    dst.id = src.id();
    dst.clinical = src.clinical;
    dst.fvc = src.fvc;
    try {
      dst.slope = ground_truth_slope(src.fvc);
    } catch (const SingularDesignError& e) {
      notes.push_back("patient " + dst.id + ": singular FVC series, skipped (" + e.what() + ")");
    }
    src.volume.validate();
    const auto kept = src.volume.kept();
    dst.images.resize(kept.size());
    dst.masks.resize(kept.size());
    std::vector<std::uint8_t> fell_back(kept.size(), 0);
    parallel_for(kept.size(), [&](std::size_t s) {
      const HuImage hu = to_hu(kept[s]);
      BinaryMask mask;
      if (ignore_masks) {
        mask = all_ones_mask(hu.rows, hu.cols);
      } else {
        try {
          mask = extract_lung_mask(hu, MaskParams::for_width(hu.cols));
        } catch (const DataError&) {
          mask = all_ones_mask(hu.rows, hu.cols);
          fell_back[s] = 1;
        }
      }
      dst.images[s] = window_and_resize(hu, model.image_size);
      dst.masks[s] = resize_mask(mask, model.image_size);
    });
    for (std::size_t s = 0; s < kept.size(); ++s) {
      if (fell_back[s]) {
        ++dst.mask_fallbacks;
        notes.push_back("patient " + dst.id + " slice " + std::to_string(src.volume.keep.top + s) +
                        ": no lung region, using all-ones mask");
      }
    }
  }
  if (warnings) warnings->insert(warnings->end(), notes.begin(), notes.end());
  return out;
}

std::vector<SliceRef> fold_training_samples(std::span<const PreparedPatient> patients,
                                            const Fold& fold) {
  std::vector<SliceRef> samples;
  for (std::size_t p : fold.train) {
    if (!patients[p].slope) continue;
    for (std::size_t s = 0; s < patients[p].images.size(); ++s) samples.push_back({p, s});
  }
  assert_no_leakage(patients, samples, fold.test);
  return samples;
}

void assert_no_leakage(std::span<const PreparedPatient> patients, std::span<const SliceRef> samples,
                       std::span<const std::size_t> test) {
  std::set<std::string> test_ids;
  for (std::size_t t : test) test_ids.insert(patients[t].id);
  for (const auto& s : samples) {
    if (test_ids.contains(patients[s.patient].id)) {
      throw std::logic_error("leakage: test patient " + patients[s.patient].id +
                             " contributes a training slice");
    }
  }
}

// ---------------------------------------------------------------------------

json MetricsReport::to_json() const {
  json rows = json::array();
  for (const auto& p : patients) {
    json r = {{"patient_id", p.patient_id},
              {"visits_scored", p.visits_scored},
              {"rmse", p.rmse},
              {"lll", p.lll},
              {"predicted_slope", p.predicted_slope}};
    if (p.lll_clipped) r["lll_clipped"] = *p.lll_clipped;
    if (p.true_slope) r["true_slope"] = *p.true_slope;
    rows.push_back(std::move(r));
  }
  json agg = {{"visits_scored", visits_scored}, {"rmse", rmse}, {"lll", lll}};
  if (lll_clipped) agg["lll_clipped"] = *lll_clipped;
  return {{"patients", rows},
          {"aggregate", agg},
          {"sigma", sigma},
          {"sigma_policy", policy.to_json()},
          {"residuals", residuals}};
}

std::vector<double> follow_up_residuals(const PatientPrediction& p) {
  const auto times = p.fvc.rezeroed_weeks();
  const auto truth = p.fvc.values();
  const auto recon = reconstruct_fvc(p.slope, p.fvc.baseline(), times);
  std::vector<double> out;
  for (std::size_t j = 1; j < truth.size(); ++j) out.push_back(truth[j] - recon[j]);
  return out;
}

MetricsReport score_predictions(std::span<const PatientPrediction> predictions, double sigma,
                                const SigmaPolicy& policy) {
  if (predictions.empty()) throw UsageError("evaluation: empty patient list");
  if (!(sigma > 0.0)) throw NumericalError("evaluation: sigma must be positive");
  MetricsReport report;
  report.sigma = sigma;
  report.policy = policy;
  double sq = 0.0;
  double ll = 0.0;
  double ll_clip = 0.0;
  for (const auto& p : predictions) {
    const auto res = follow_up_residuals(p);
    PatientMetrics m;
    m.patient_id = p.patient_id;
    m.visits_scored = res.size();
    m.predicted_slope = p.slope;
    m.true_slope = p.true_slope;
    double psq = 0.0;
    double pll = 0.0;
    double pll_clip = 0.0;
    for (double r : res) {
      psq += r * r;
      pll += laplace_ll(r, 0.0, sigma);
      if (policy.clip) pll_clip += laplace_ll(r, 0.0, sigma, policy.clip);
      report.residuals.push_back(r);
    }
    const double n = static_cast<double>(res.size());
    m.rmse = std::sqrt(psq / n);
    m.lll = pll / n;
    if (policy.clip) m.lll_clipped = pll_clip / n;
    sq += psq;
    ll += pll;
    ll_clip += pll_clip;
    report.visits_scored += res.size();
    report.patients.push_back(std::move(m));
  }
  const double n = static_cast<double>(report.visits_scored);
  report.rmse = std::sqrt(sq / n);
  report.lll = ll / n;
  if (policy.clip) report.lll_clipped = ll_clip / n;
  return report;
}

// ---------------------------------------------------------------------------

json Checkpoint::header() const {
  const json cfg = model.to_json();
  return {{"kind", "ipf-checkpoint"},
          {"config_hash", nn::config_hash(cfg)},
          {"model_config", cfg},
          {"target", {{"mean", target.mean}, {"sd", target.sd}}},
          {"norm", {{"age_min", norm.age_min}, {"age_max", norm.age_max}}},
          {"sigma", sigma},
          {"fold", fold},
          {"best_epoch", best_epoch},
          {"train_ids", train_ids},
          {"test_ids", test_ids},
          {"run", run}};
}

void Checkpoint::save(const std::filesystem::path& path) const {
  nn::save_archive(path, header(), params);
}

Checkpoint Checkpoint::load(const std::filesystem::path& path) {
  auto archive = nn::load_archive(path);
  const auto& h = archive.header;
  Checkpoint c;
  try {
    c.model = ModelConfig::from_json(h.at("model_config"));
    if (h.at("config_hash").get<std::string>() != nn::config_hash(c.model.to_json())) {
      throw DataError("checkpoint config hash mismatch: " + path.string());
    }
    c.target = {h.at("target").at("mean").get<double>(), h.at("target").at("sd").get<double>()};
    c.norm = {h.at("norm").at("age_min").get<double>(), h.at("norm").at("age_max").get<double>()};
    c.sigma = h.at("sigma").get<double>();
    c.fold = h.value("fold", std::size_t{0});
    c.best_epoch = h.value("best_epoch", std::size_t{0});
    c.train_ids = h.value("train_ids", std::vector<std::string>{});
    c.test_ids = h.value("test_ids", std::vector<std::string>{});
    c.run = h.value("run", json{});
  } catch (const json::exception& e) {
    throw DataError("malformed checkpoint header: " + std::string(e.what()));
  }
  c.params = std::move(archive.params);
  // Every parameter the configuration expects must be present with its shape.
  const auto expected = HybridModel(c.model).init_params<float>(0);
  for (std::size_t i = 0; i < expected.size(); ++i) {
    const auto idx = c.params.find(expected.name(i));
    if (!idx || c.params.value(*idx).shape != expected.value(i).shape) {
      throw DataError("checkpoint does not match model config: " + expected.name(i));
    }
  }
  return c;
}

namespace {

template <typename T>
ModelInput<T> make_input(const PreparedPatient& p, std::size_t slice, const Tensor<T>& clinical) {
  return {grid_tensor<T>(p.images[slice]), grid_tensor<T>(p.masks[slice]), clinical};
}

template <typename T>
double patient_slope(const HybridModel& model, const ParamStore<T>& params,
                     const TargetStats& target, const NormStats& norm, const PreparedPatient& p) {
  if (p.images.empty()) throw DataError("patient " + p.id + " has no kept slices");
  const auto clinical = clinical_tensor<T>(encode_clinical(p.clinical, norm));
  std::vector<double> per(p.images.size());
  parallel_for(p.images.size(), [&](std::size_t s) {
    per[s] = predict_slope(model, params, target, make_input(p, s, clinical)).value;
  });
  double acc = 0.0;
  for (double v : per) acc += v;
  return acc / static_cast<double>(per.size());
}

template <typename T>
std::vector<PatientPrediction> predict_all(const HybridModel& model, const ParamStore<T>& params,
                                           const TargetStats& target, const NormStats& norm,
                                           std::span<const PreparedPatient* const> patients) {
  std::vector<PatientPrediction> out;
  out.reserve(patients.size());
  for (const auto* p : patients) {
    out.push_back({p->id, patient_slope(model, params, target, norm, *p), p->fvc, p->slope});
  }
  return out;
}

double train_residual_sigma(std::span<const PatientPrediction> train_predictions) {
  std::vector<double> residuals;
  for (const auto& p : train_predictions) {
    const auto r = follow_up_residuals(p);
    residuals.insert(residuals.end(), r.begin(), r.end());
  }
  return estimate_sigma(residuals);
}

}  // namespace

double predict_patient_slope(const Checkpoint& ckpt, const PreparedPatient& patient,
                             Precision precision) {
  const HybridModel model(ckpt.model);
  if (precision == Precision::f64) {
    return patient_slope(model, ckpt.params.cast<double>(), ckpt.target, ckpt.norm, patient);
  }
  return patient_slope(model, ckpt.params, ckpt.target, ckpt.norm, patient);
}

MetricsReport evaluate_model(const Checkpoint& ckpt, std::span<const PreparedPatient> patients,
                             const SigmaPolicy& policy, Precision precision) {
  policy.validate();
  if (patients.empty()) throw UsageError("evaluation: empty patient list");
  std::vector<PatientPrediction> preds;
  for (const auto& p : patients) {
    preds.push_back({p.id, predict_patient_slope(ckpt, p, precision), p.fvc, p.slope});
  }
  const double sigma = policy.mode == SigmaMode::fixed ? policy.sigma : ckpt.sigma;
  return score_predictions(preds, sigma, policy);
}

MetricsReport evaluate_model(const Checkpoint& ckpt, std::span<const PatientSample> patients,
                             const SigmaPolicy& policy, Precision precision) {
  const auto prepared = prepare_patients(patients, ckpt.model, false, nullptr);
  return evaluate_model(ckpt, std::span<const PreparedPatient>(prepared), policy, precision);
}

// ---------------------------------------------------------------------------

std::string TrainLog::to_jsonl() const {
  std::ostringstream out;
  json h = header;
  h["type"] = "header";
  out << h.dump() << '\n';
  for (const auto& w : warnings) out << json{{"type", "warning"}, {"message", w}}.dump() << '\n';
  for (const auto& e : epochs) {
    json j = {{"type", "epoch"}, {"fold", e.fold}, {"epoch", e.epoch}, {"train_loss", e.train_loss}};
    if (e.val_rmse) j["val_rmse"] = *e.val_rmse;
    if (e.val_lll) j["val_lll"] = *e.val_lll;
    if (e.sigma) j["sigma"] = *e.sigma;
    out << j.dump() << '\n';
  }
  for (const auto& f : folds) {
    json j = {{"type", "fold"},
              {"fold", f.fold},
              {"best_epoch", f.best_epoch},
              {"train_patients", f.train_patients},
              {"test_patients", f.test_patients},
              {"sigma", f.sigma}};
    if (f.rmse) j["rmse"] = *f.rmse;
    if (f.lll) j["lll"] = *f.lll;
    out << j.dump() << '\n';
  }
  return out.str();
}

namespace {

template <typename T>
FoldOutcome train_fold_impl(const HybridModel& model, std::span<const PreparedPatient> patients,
                            const Fold& fold, const TrainConfig& cfg, std::size_t fold_index,
                            TrainLog& log) {
  const auto samples = fold_training_samples(patients, fold);
  if (samples.empty()) {
    throw DataError("fold " + std::to_string(fold_index) + " has no training samples");
  }

  std::vector<const PreparedPatient*> train;
  std::vector<const PreparedPatient*> test;
  std::vector<ClinicalRecord> records;
  for (std::size_t i : fold.train) {
    if (!patients[i].slope) continue;
    train.push_back(&patients[i]);
    records.push_back(patients[i].clinical);
  }
  for (std::size_t i : fold.test) test.push_back(&patients[i]);

  const NormStats norm = fit_norm_stats(records);
  TargetStats target;
  {
    double mean = 0.0;
    for (const auto* p : train) mean += *p->slope;
    mean /= static_cast<double>(train.size());
    double var = 0.0;
    for (const auto* p : train) var += (*p->slope - mean) * (*p->slope - mean);
    var /= static_cast<double>(train.size());
    target = {mean, var > 1e-12 ? std::sqrt(var) : 1.0};
  }

  std::vector<Tensor<T>> clinical(patients.size());
  std::vector<T> standardized(patients.size(), T{0});
  for (const auto* p : train) {
    const auto idx = static_cast<std::size_t>(p - patients.data());
    clinical[idx] = clinical_tensor<T>(encode_clinical(p->clinical, norm));
    standardized[idx] = static_cast<T>((*p->slope - target.mean) / target.sd);
  }

  ParamStore<T> params = model.init_params<T>(mix_seed(cfg.seed, 1000 + fold_index));
  auto state = nn::AdamWState<T>::init(params, cfg.adamw());

  Checkpoint best;
  best.model = model.config();
  best.target = target;
  best.norm = norm;
  best.fold = fold_index;
  for (const auto* p : train) best.train_ids.push_back(p->id);
  for (const auto* p : test) best.test_ids.push_back(p->id);
  std::optional<double> best_lll;
  std::optional<MetricsReport> best_report;
  ParamStore<T> best_params = params;

  std::vector<SliceRef> order = samples;
  double first_loss = 0.0;
  std::size_t epochs_run = 0;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    Rng rng(mix_seed(cfg.seed, (fold_index << 20) + epoch));
    rng.shuffle(order);
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t B = std::min(cfg.batch_size, order.size() - start);
      std::vector<nn::Gradients<T>> grads(B);
      std::vector<double> losses(B);
      parallel_for(B, [&](std::size_t b) {
        const auto& ref = order[start + b];
        const auto& p = patients[ref.patient];
        Tape<T> tape(&params);
        const auto tr = model.forward(tape, make_input(p, ref.slice, clinical[ref.patient]));
        const Var truth = tape.constant(Tensor<T>({1, 1}, standardized[ref.patient]));
        const Var loss = tape.abs(tape.sub(tr.output, truth));
        tape.backward(loss);
        grads[b] = tape.param_grads();
        losses[b] = static_cast<double>(tape.scalar(loss));
      });
      auto total = std::move(grads[0]);
      for (std::size_t b = 1; b < B; ++b) {
        for (std::size_t k = 0; k < total.size(); ++k) {
          auto& dst = total[k].data;
          const auto& src = grads[b][k].data;
          for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
        }
      }
      const T inv = T(1) / static_cast<T>(B);
      for (auto& t : total) {
        for (auto& v : t.data) v *= inv;
      }
      nn::adamw_step(params, total, state);
      for (double l : losses) loss_sum += l;
    }
    const double epoch_loss = loss_sum / static_cast<double>(order.size());
    if (!std::isfinite(epoch_loss)) {
      throw NumericalError("non-finite training loss in fold " + std::to_string(fold_index));
    }
    if (epoch == 1) first_loss = epoch_loss;
    epochs_run = epoch;

    EpochRecord rec{fold_index, epoch, epoch_loss, {}, {}, {}};
    const bool last = epoch == cfg.epochs ||
                      (cfg.stop_loss_ratio > 0.0 && epoch_loss <= cfg.stop_loss_ratio * first_loss);
    if (!test.empty() && (epoch % cfg.validate_every == 0 || last)) {
      const auto train_pred = predict_all(model, params, target, norm, train);
      const double train_sigma = train_residual_sigma(train_pred);
      const double sigma =
          cfg.sigma_policy.mode == SigmaMode::fixed ? cfg.sigma_policy.sigma : train_sigma;
      const auto report =
          score_predictions(predict_all(model, params, target, norm, test), sigma, cfg.sigma_policy);
      rec.val_rmse = report.rmse;
      rec.val_lll = report.lll;
      rec.sigma = sigma;
      if (!best_lll || report.lll > *best_lll) {
        best_lll = report.lll;
        best_report = report;
        best_params = params;
        best.best_epoch = epoch;
        best.sigma = train_sigma;
      }
    }
    log.epochs.push_back(rec);
    if (cfg.progress && cfg.log_every > 0 && (epoch % cfg.log_every == 0 || last)) {
      *cfg.progress << "fold " << fold_index << " epoch " << epoch << " loss " << epoch_loss;
      if (rec.val_lll) *cfg.progress << " val_lll " << *rec.val_lll << " val_rmse " << *rec.val_rmse;
      *cfg.progress << '\n';
    }
    if (last) break;
  }

  if (test.empty()) {
    best_params = params;
    best.best_epoch = epochs_run;
    best.sigma = train_residual_sigma(predict_all(model, params, target, norm, train));
  }
  best.params = best_params.template cast<float>();

  FoldRecord fr;
  fr.fold = fold_index;
  fr.best_epoch = best.best_epoch;
  fr.train_patients = train.size();
  fr.test_patients = test.size();
  fr.sigma = best.sigma;
  if (best_report) {
    fr.rmse = best_report->rmse;
    fr.lll = best_report->lll;
  }
  log.folds.push_back(fr);
  return {std::move(best), std::move(best_report)};
}

}  // namespace

FoldOutcome train_fold(const HybridModel& model, std::span<const PreparedPatient> patients,
                       const Fold& fold, const TrainConfig& config, std::size_t fold_index,
                       TrainLog& log) {
  if (config.precision == Precision::f64) {
    return train_fold_impl<double>(model, patients, fold, config, fold_index, log);
  }
  return train_fold_impl<float>(model, patients, fold, config, fold_index, log);
}

TrainResult run_training(std::span<const PatientSample> dataset, const ModelConfig& model_config,
                         const TrainConfig& config, const json& run_header) {
  config.validate();
  if (dataset.empty()) throw DataError("training: empty dataset");
  const HybridModel model(model_config);
  const auto t0 = std::chrono::steady_clock::now();

  TrainResult result;
  const auto prepared = prepare_patients(dataset, model_config, config.ignore_masks,
                                         &result.log.warnings);
  const auto folds = kfold_split(prepared.size(), config.folds, config.seed);

  const json cfg = {{"train_config", config.to_json()}, {"model_config", model_config.to_json()}};
  result.log.header = {{"run", run_header},
                       {"train_config", cfg["train_config"]},
                       {"model_config", cfg["model_config"]},
                       {"config_hash", nn::config_hash(cfg)},
                       {"patients", prepared.size()}};

  for (std::size_t f = 0; f < folds.size(); ++f) {
    auto outcome = train_fold(model, prepared, folds[f], config, f, result.log);
    outcome.checkpoint.run = run_header;
    result.checkpoints.push_back(std::move(outcome.checkpoint));
    if (outcome.report) result.reports.push_back(std::move(*outcome.report));
  }
  result.log.wall_clock_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return result;
}

}  // namespace ipf
