#include "ipf/cli.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>

#include "ipf/dataset.hpp"
#include "ipf/error.hpp"
#include "ipf/lung_mask.hpp"
#include "ipf/metrics.hpp"
#include "ipf/model.hpp"
#include "ipf/nn/tape.hpp"
#include "ipf/parallel.hpp"
#include "ipf/preprocess.hpp"
#include "ipf/raster.hpp"
#include "ipf/slope.hpp"
#include "ipf/synthetic.hpp"
#include "ipf/training.hpp"

namespace ipf {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

// Flat JSON config: keys are flag names without dashes, '-' spelled '_'.
// Values given on the command line win.
class ConfigBinder {
 public:
  explicit ConfigBinder(CLI::App* app) : app_(app) {
    app_->add_option("--config", path_, "JSON config file (flat object of flag values)")
        ->check(CLI::ExistingFile);
  }

  template <typename T>
  CLI::Option* option(const std::string& flag, T& target, const std::string& help) {
    auto* opt = app_->add_option(flag, target, help);
    bind(flag, opt, [&target](const json& j) { target = j.get<T>(); });
    return opt;
  }

  CLI::Option* flag(const std::string& flag, bool& target, const std::string& help) {
    auto* opt = app_->add_flag(flag, target, help);
    bind(flag, opt, [&target](const json& j) { target = j.get<bool>(); });
    return opt;
  }

  const std::string& path() const { return path_; }

  void apply() const {
    if (path_.empty()) return;
    std::ifstream in(path_);
    json doc;
    try {
      doc = json::parse(in);
    } catch (const json::exception& e) {
      throw UsageError("config " + path_ + ": " + e.what());
    }
    if (!doc.is_object()) throw UsageError("config " + path_ + ": expected a JSON object");
    for (const auto& [key, value] : doc.items()) {
      auto it = bindings_.find(key);
      if (it == bindings_.end()) throw UsageError("config " + path_ + ": unknown key '" + key + "'");
      if (it->second.option->count() > 0) continue;
      try {
        it->second.assign(value);
      } catch (const json::exception&) {
        throw UsageError("config " + path_ + ": bad value for '" + key + "'");
      }
    }
  }

 private:
  struct Binding {
    CLI::Option* option;
    std::function<void(const json&)> assign;
  };

  void bind(const std::string& flag, CLI::Option* opt, std::function<void(const json&)> assign) {
    std::string key = flag.substr(flag.find_first_not_of('-'));
    std::replace(key.begin(), key.end(), '-', '_');
    bindings_[key] = {opt, std::move(assign)};
  }

  CLI::App* app_;
  std::string path_;
  std::map<std::string, Binding> bindings_;
};

json run_manifest(const std::string& command, const std::string& config,
                  const std::vector<std::string>& inputs, const std::string& out,
                  std::uint64_t seed) {
  return {{"tool", "ipf"},        {"version", std::string(kToolVersion)},
          {"command", command},   {"config", config},
          {"inputs", inputs},     {"out", out},
          {"seed", seed}};
}

std::string comment_line(const json& run) { return "ipf-run " + run.dump(); }

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw DataError("cannot create output directory " + dir.string());
}

std::ofstream open_out(const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  return out;
}

std::optional<ClipPolicy> clip_policy(bool enabled, double sigma_min, double error_max) {
  if (!enabled) return std::nullopt;
  if (!(sigma_min > 0.0) || !(error_max > 0.0)) {
    throw UsageError("clip values must be positive");
  }
  return ClipPolicy{sigma_min, error_max};
}

SigmaPolicy resolve_policy(const std::string& text, const std::optional<ClipPolicy>& clip) {
  auto policy = SigmaPolicy::parse(text);
  policy.clip = clip;
  policy.validate();
  return policy;
}

std::vector<PatientSample> select_patients(std::vector<PatientSample> all,
                                           const std::vector<std::string>& ids) {
  if (ids.empty()) return all;
  std::vector<PatientSample> out;
  for (const auto& id : ids) {
    auto it = std::find_if(all.begin(), all.end(), [&](const auto& p) { return p.id() == id; });
    if (it == all.end()) throw DataError("patient " + id + " not in dataset");
    out.push_back(*it);
  }
  return out;
}

// ---------------------------------------------------------------------------

struct SynthArgs {
  std::size_t patients = 8;
  std::size_t slices = 6;
  std::size_t visits = 6;
  std::size_t image_size = 64;
  double noise_sd = 5.0;
  std::uint64_t seed = 0;
  std::string out;
};

int cmd_synth(const SynthArgs& a, const std::string& config, std::ostream& out) {
  SynthSpec spec;
  spec.patients = a.patients;
  spec.slices = a.slices;
  spec.visits = a.visits;
  spec.image_size = a.image_size;
  spec.fvc_noise_sd = a.noise_sd;
  const auto run = run_manifest("synth", config, {}, a.out, a.seed);
  const auto patients = generate_synthetic(spec, a.seed);

  const fs::path root(a.out);
  ensure_dir(root);
  {
    auto csv = open_out(root / "clinical.csv");
    csv << "# " << comment_line(run) << '\n';
    write_clinical_csv(csv, patients);
  }
  for (const auto& p : patients) {
    write_ct_stack(manifest_path(root, p.id()).parent_path(), p.id(), p.volume, run.dump());
  }
  out << "wrote " << patients.size() << " patients to " << root.string() << '\n';
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct MaskArgs {
  std::string data;
  std::vector<std::string> inputs;
  std::string out;
  double tau = 250.0;
  double radius = -1.0;
  std::vector<long> seed_point;
  bool fallback_ones = false;
  std::uint64_t seed = 0;
};

struct MaskJob {
  RawSlice slice;
  fs::path target;
  std::string label;
};

int cmd_mask(const MaskArgs& a, const std::string& config, std::ostream& out, std::ostream& err) {
  if (a.data.empty() == a.inputs.empty()) throw UsageError("give exactly one of --data or --input");
  if (!a.seed_point.empty() && a.seed_point.size() != 2) {
    throw UsageError("--seed-point takes ROW COL");
  }
  std::vector<std::string> inputs = a.inputs;
  if (!a.data.empty()) inputs = {a.data};
  const auto run = run_manifest("mask", config, inputs, a.out, a.seed);
  const fs::path root(a.out);

  std::vector<MaskJob> jobs;
  if (!a.data.empty()) {
    for (const auto& p : load_dataset(a.data)) {
      for (std::size_t s = 0; s < p.volume.slices.size(); ++s) {
        std::ostringstream name;
        name << "slice_" << std::setw(3) << std::setfill('0') << s << ".mask.pgm";
        jobs.push_back({p.volume.slices[s], root / p.id() / name.str(),
                        p.id() + " slice " + std::to_string(s)});
      }
    }
  } else {
    for (const auto& in : a.inputs) {
      const fs::path path(in);
      jobs.push_back({read_pgm16(path), root / (path.stem().string() + ".mask.pgm"), in});
    }
  }

  std::vector<BinaryMask> masks(jobs.size());
  std::vector<std::string> failures(jobs.size());
  parallel_for(jobs.size(), [&](std::size_t i) {
    const HuImage hu = to_hu(jobs[i].slice);
    auto params = MaskParams::for_width(hu.cols);
    params.tau = a.tau;
    if (a.radius >= 0.0) params.dilation_radius = a.radius;
    try {
      if (a.seed_point.empty()) {
        masks[i] = extract_lung_mask(hu, params);
      } else {
        if (a.seed_point[0] < 0 || a.seed_point[1] < 0) throw UsageError("seed point out of bounds");
        const PixelIndex seed{static_cast<std::size_t>(a.seed_point[0]),
                              static_cast<std::size_t>(a.seed_point[1])};
        masks[i] = extract_lung_mask(hu, params, seed);
      }
    } catch (const DataError& e) {
      failures[i] = e.what();
      masks[i] = all_ones_mask(hu.rows, hu.cols);
    }
  });

  for (std::size_t i = 0; i < jobs.size(); ++i) {
    if (failures[i].empty()) continue;
    if (!a.fallback_ones) throw DataError(jobs[i].label + ": " + failures[i]);
    err << "warning: " << jobs[i].label << ": " << failures[i] << "; using all-ones mask\n";
  }
  for (std::size_t i = 0; i < jobs.size(); ++i) {
    ensure_dir(jobs[i].target.parent_path());
    write_pgm8(jobs[i].target, mask_to_pgm8(masks[i]), comment_line(run));
  }
  out << "wrote " << jobs.size() << " masks to " << root.string() << '\n';
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct ScoringArgs {
  std::string sigma_policy = "train";
  bool clip = false;
  double clip_sigma_min = 70.0;
  double clip_error_max = 1000.0;
  std::string precision = "f32";
};

void add_scoring_options(ConfigBinder& b, ScoringArgs& s) {
  b.option("--sigma-policy", s.sigma_policy, "Laplace scale: 'train' or 'fixed:<mL>'")
      ->capture_default_str();
  b.flag("--clip", s.clip, "Also report the clipped score (sigma floor, error cap)");
  b.option("--clip-sigma-min", s.clip_sigma_min, "Clip: sigma floor in mL")->capture_default_str();
  b.option("--clip-error-max", s.clip_error_max, "Clip: |error| cap in mL")->capture_default_str();
  b.option("--precision", s.precision, "Arithmetic precision")
      ->check(CLI::IsMember({"f32", "f64"}))
      ->capture_default_str();
}

struct TrainArgs {
  std::string data;
  std::string out;
  std::uint64_t seed = 0;
  std::size_t folds = 5;
  std::size_t epochs = 50;
  std::size_t batch_size = 8;
  double lr = 2e-4;
  std::size_t validate_every = 1;
  double stop_ratio = 0.0;
  bool ignore_masks = false;
  bool no_parallel = false;
  bool no_sequential = false;
  bool no_clinical = false;
  std::size_t image_size = 64;
  bool quiet = false;
  ScoringArgs scoring;
};

int cmd_train(const TrainArgs& a, const std::string& config, std::ostream& out) {
  TrainConfig tc;
  tc.folds = a.folds;
  tc.epochs = a.epochs;
  tc.batch_size = a.batch_size;
  tc.learning_rate = a.lr;
  tc.seed = a.seed;
  tc.precision = parse_precision(a.scoring.precision);
  tc.validate_every = a.validate_every;
  tc.stop_loss_ratio = a.stop_ratio;
  tc.ignore_masks = a.ignore_masks;
  tc.sigma_policy = resolve_policy(
      a.scoring.sigma_policy,
      clip_policy(a.scoring.clip, a.scoring.clip_sigma_min, a.scoring.clip_error_max));
  tc.progress = a.quiet ? nullptr : &out;
  tc.validate();

  ModelConfig mc;
  mc.image_size = a.image_size;
  mc.parallel_branch = !a.no_parallel;
  mc.sequential_branch = !a.no_sequential;
  mc.clinical_enrichment = !a.no_clinical;
  try {
    mc.validate();
  } catch (const std::exception& e) {
    throw UsageError(e.what());
  }

  const auto run = run_manifest("train", config, {a.data}, a.out, a.seed);
  const auto dataset = load_dataset(a.data);
  const fs::path root(a.out);
  ensure_dir(root);

  auto result = run_training(dataset, mc, tc, run);
  for (const auto& w : result.log.warnings) out << "warning: " << w << '\n';
  for (std::size_t f = 0; f < result.checkpoints.size(); ++f) {
    result.checkpoints[f].save(root / ("fold_" + std::to_string(f) + ".ckpt"));
  }
  {
    auto log = open_out(root / "train_log.jsonl");
    log << result.log.to_jsonl();
  }
  {
    json reports = json::array();
    for (const auto& r : result.reports) reports.push_back(r.to_json());
    auto cv = open_out(root / "cv_metrics.json");
    cv << json{{"run", run}, {"folds", reports}}.dump(2) << '\n';
  }
  {
    auto timing = open_out(root / "timing.json");
    timing << json{{"run", run}, {"wall_clock_seconds", result.log.wall_clock_seconds}}.dump(2)
           << '\n';
  }
  out << "trained " << result.checkpoints.size() << " folds into " << root.string() << '\n';
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct EvalArgs {
  std::vector<std::string> checkpoints;
  std::string data;
  std::string out;
  std::string patients = "test";
  std::uint64_t seed = 0;
  ScoringArgs scoring;
};

int cmd_eval(const EvalArgs& a, const std::string& config, std::ostream& out) {
  const auto policy = resolve_policy(
      a.scoring.sigma_policy,
      clip_policy(a.scoring.clip, a.scoring.clip_sigma_min, a.scoring.clip_error_max));
  const auto precision = parse_precision(a.scoring.precision);
  std::vector<std::string> inputs = a.checkpoints;
  inputs.push_back(a.data);
  const auto run = run_manifest("eval", config, inputs, a.out, a.seed);
  const auto dataset = load_dataset(a.data);

  json folds = json::array();
  double sq = 0.0;
  double ll = 0.0;
  std::size_t visits = 0;
  for (const auto& path : a.checkpoints) {
    const auto ckpt = Checkpoint::load(path);
    std::vector<std::string> ids;
    if (a.patients == "test") ids = ckpt.test_ids;
    const auto chosen = select_patients(dataset, ids);
    const auto report = evaluate_model(ckpt, std::span<const PatientSample>(chosen), policy,
                                       precision);
    for (const auto& p : report.patients) {
      if (!std::isfinite(p.rmse) || !std::isfinite(p.lll)) {
        throw NumericalError("non-finite metric for patient " + p.patient_id);
      }
    }
    sq += report.rmse * report.rmse * static_cast<double>(report.visits_scored);
    ll += report.lll * static_cast<double>(report.visits_scored);
    visits += report.visits_scored;
    folds.push_back({{"checkpoint", path}, {"fold", ckpt.fold}, {"report", report.to_json()}});
  }
  const double n = static_cast<double>(visits);
  const json doc = {{"run", run},
                    {"folds", folds},
                    {"pooled", {{"visits_scored", visits}, {"rmse", std::sqrt(sq / n)}, {"lll", ll / n}}}};
  if (a.out.empty()) {
    out << doc.dump(2) << '\n';
  } else {
    auto file = open_out(a.out);
    file << doc.dump(2) << '\n';
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct PredictArgs {
  std::string checkpoint;
  std::string data;
  std::string out;
  std::vector<std::string> patients;
  std::string precision = "f32";
  std::uint64_t seed = 0;
};

int cmd_predict(const PredictArgs& a, const std::string& config, std::ostream& out) {
  const auto run = run_manifest("predict", config, {a.checkpoint, a.data}, a.out, a.seed);
  const auto ckpt = Checkpoint::load(a.checkpoint);
  const auto chosen = select_patients(load_dataset(a.data), a.patients);
  const auto prepared = prepare_patients(chosen, ckpt.model, false, nullptr);
  const auto precision = parse_precision(a.precision);

  std::ostringstream csv;
  csv << "# " << comment_line(run) << '\n';
  csv << "patient_id,weeks,fvc,fvc_pred,slope,sigma\n";
  csv << std::setprecision(10);
  for (const auto& p : prepared) {
    const double slope = predict_patient_slope(ckpt, p, precision);
    const auto weeks = p.fvc.weeks();
    const auto values = p.fvc.values();
    const auto recon = reconstruct_fvc(slope, p.fvc.baseline(), p.fvc.rezeroed_weeks());
    for (std::size_t j = 0; j < weeks.size(); ++j) {
      csv << p.id << ',' << weeks[j] << ',' << values[j] << ',' << recon[j] << ',' << slope << ','
          << ckpt.sigma << '\n';
    }
  }
  if (a.out.empty()) {
    out << csv.str();
  } else {
    auto file = open_out(a.out);
    file << csv.str();
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct DistfitArgs {
  std::string data;
  std::string values;
  std::string out;
  std::uint64_t seed = 0;
};

std::vector<double> read_values(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read " + path.string());
  std::vector<double> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty() || line[0] == '#') continue;
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(line, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || line.find_first_not_of(" \t\r", used) != std::string::npos) {
      throw ParseError("non-numeric value, line " + std::to_string(n) + " of " + path.string());
    }
    out.push_back(v);
  }
  return out;
}

std::string distfit_svg(const DistributionFit& fit, std::size_t total, const json& run) {
  constexpr double W = 640.0;
  constexpr double H = 360.0;
  constexpr double pad = 40.0;
  const auto& h = fit.histogram;
  const double lo = h.lo;
  const double hi = h.lo + h.width * static_cast<double>(h.counts.size());
  const double n = static_cast<double>(total);
  double top = 0.0;
  for (auto c : h.counts) top = std::max(top, static_cast<double>(c) / (n * h.width));
  for (std::size_t i = 0; i < h.counts.size(); ++i) {
    top = std::max({top, gaussian_pdf(h.centre(i), fit.gaussian_mean, fit.gaussian_sd),
                    laplace_pdf(h.centre(i), fit.laplace)});
  }
  auto x_at = [&](double x) { return pad + (x - lo) / (hi - lo) * (W - 2 * pad); };
  auto y_at = [&](double d) { return H - pad - d / top * (H - 2 * pad); };

  std::ostringstream svg;
  svg << std::fixed << std::setprecision(2);
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n";
  svg << "<!-- " << comment_line(run) << " -->\n";
  svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  for (std::size_t i = 0; i < h.counts.size(); ++i) {
    const double x0 = x_at(lo + h.width * static_cast<double>(i));
    const double x1 = x_at(lo + h.width * static_cast<double>(i + 1));
    const double y = y_at(static_cast<double>(h.counts[i]) / (n * h.width));
    svg << "<rect x=\"" << x0 << "\" y=\"" << y << "\" width=\"" << (x1 - x0) << "\" height=\""
        << (H - pad - y) << "\" fill=\"#b0c4de\" stroke=\"#708090\"/>\n";
  }
  auto curve = [&](const std::function<double(double)>& pdf, const char* colour) {
    svg << "<polyline fill=\"none\" stroke=\"" << colour << "\" stroke-width=\"2\" points=\"";
    constexpr int steps = 200;
    for (int k = 0; k <= steps; ++k) {
      const double x = lo + (hi - lo) * k / steps;
      svg << x_at(x) << ',' << y_at(pdf(x)) << (k == steps ? "" : " ");
    }
    svg << "\"/>\n";
  };
  curve([&](double x) { return gaussian_pdf(x, fit.gaussian_mean, fit.gaussian_sd); }, "#d62728");
  curve([&](double x) { return laplace_pdf(x, fit.laplace); }, "#2ca02c");
  svg << "<line x1=\"" << pad << "\" y1=\"" << H - pad << "\" x2=\"" << W - pad << "\" y2=\""
      << H - pad << "\" stroke=\"black\"/>\n";
  svg << "<text x=\"" << pad << "\" y=\"" << H - 10 << "\" font-size=\"12\">" << lo << "</text>\n";
  svg << "<text x=\"" << W - pad << "\" y=\"" << H - 10
      << "\" font-size=\"12\" text-anchor=\"end\">" << hi << "</text>\n";
  svg << "<text x=\"" << W - pad << "\" y=\"20\" font-size=\"12\" text-anchor=\"end\">"
      << "red: Gaussian, green: Laplace</text>\n";
  svg << "</svg>\n";
  return svg.str();
}

int cmd_distfit(const DistfitArgs& a, const std::string& config, std::ostream& out) {
  if (a.data.empty() == a.values.empty()) throw UsageError("give exactly one of --data or --values");
  const auto run = run_manifest("distfit", config, {a.data.empty() ? a.values : a.data}, a.out,
                                a.seed);
  std::vector<double> values;
  if (!a.data.empty()) {
    for (const auto& row : parse_clinical_csv(fs::path(a.data) / "clinical.csv")) {
      values.push_back(row.fvc);
    }
  } else {
    values = read_values(a.values);
  }
  const auto fit = fit_distributions(values);
  const fs::path root(a.out);
  ensure_dir(root);

  const auto& h = fit.histogram;
  const double n = static_cast<double>(values.size());
  {
    auto csv = open_out(root / "distfit.csv");
    csv << "# " << comment_line(run) << '\n';
    csv << "bin_lo,bin_hi,count,density,gaussian_pdf,laplace_pdf\n";
    csv << std::setprecision(10);
    for (std::size_t i = 0; i < h.counts.size(); ++i) {
      const double b0 = h.lo + h.width * static_cast<double>(i);
      const double c = h.centre(i);
      csv << b0 << ',' << b0 + h.width << ',' << h.counts[i] << ','
          << static_cast<double>(h.counts[i]) / (n * h.width) << ','
          << gaussian_pdf(c, fit.gaussian_mean, fit.gaussian_sd) << ','
          << laplace_pdf(c, fit.laplace) << '\n';
    }
  }
  {
    auto js = open_out(root / "distfit.json");
    js << json{{"run", run},
               {"samples", values.size()},
               {"gaussian", {{"mean", fit.gaussian_mean}, {"sd", fit.gaussian_sd}}},
               {"laplace", {{"mu", fit.laplace.mu}, {"b", fit.laplace.b}}},
               {"histogram", {{"lo", h.lo}, {"width", h.width}, {"bins", h.counts.size()}}}}
              .dump(2)
       << '\n';
  }
  {
    auto svg = open_out(root / "distfit.svg");
    svg << distfit_svg(fit, values.size(), run);
  }
  out << std::setprecision(6) << "gaussian mean " << fit.gaussian_mean << " sd " << fit.gaussian_sd
      << "; laplace mu " << fit.laplace.mu << " b " << fit.laplace.b << '\n';
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct DumpArgs {
  std::string checkpoint;
  std::string data;
  std::string patient;
  std::size_t slice = 0;
  std::string out;
  std::uint64_t seed = 0;
};

Grid<std::uint8_t> to_gray(std::span<const float> values, std::size_t rows, std::size_t cols,
                           float lo, float hi) {
  Grid<std::uint8_t> g(rows, cols);
  const float span = hi > lo ? hi - lo : 1.0f;
  for (std::size_t i = 0; i < g.data.size(); ++i) {
    const float t = std::clamp((values[i] - lo) / span, 0.0f, 1.0f);
    g.data[i] = static_cast<std::uint8_t>(std::lround(t * 255.0f));
  }
  return g;
}

int cmd_dump(const DumpArgs& a, const std::string& config, std::ostream& out) {
  std::vector<std::string> inputs{a.data};
  if (!a.checkpoint.empty()) inputs.insert(inputs.begin(), a.checkpoint);
  const auto run = run_manifest("dump-features", config, inputs, a.out, a.seed);

  ModelConfig mc;
  nn::ParamStore<float> params;
  if (!a.checkpoint.empty()) {
    auto ckpt = Checkpoint::load(a.checkpoint);
    mc = ckpt.model;
    params = std::move(ckpt.params);
  } else {
    params = HybridModel(mc).init_params<float>(a.seed);
  }
  const HybridModel model(mc);
  const auto chosen = select_patients(load_dataset(a.data), {a.patient});
  const auto prepared = prepare_patients(chosen, mc, false, nullptr);
  const auto& p = prepared.front();
  if (a.slice >= p.images.size()) {
    throw UsageError("--slice " + std::to_string(a.slice) + " out of range (patient has " +
                     std::to_string(p.images.size()) + " kept slices)");
  }

  nn::Tape<float> tape(&params);
  const auto image = tape.constant(grid_tensor<float>(p.images[a.slice]));
  const auto mask = tape.constant(grid_tensor<float>(p.masks[a.slice]));
  const auto gated = model.context_gate(tape, image, mask);
  const auto& g = tape.value(gated);
  const std::size_t C = g.shape[0];
  const std::size_t S = g.shape[1];

  const fs::path root(a.out);
  ensure_dir(root);
  const std::string comment = comment_line(run);
  const auto& img = p.images[a.slice];
  write_pgm8(root / "input.pgm", to_gray(img.data, S, S, 0.0f, 1.0f), comment);
  write_pgm8(root / "mask.pgm", to_gray(p.masks[a.slice].data, S, S, 0.0f, 1.0f), comment);
  json channels = json::array();
  for (std::size_t c = 0; c < C; ++c) {
    const std::span<const float> ch(g.data.data() + c * S * S, S * S);
    const auto [mn, mx] = std::minmax_element(ch.begin(), ch.end());
    std::ostringstream name;
    name << "gate_c" << std::setw(2) << std::setfill('0') << c << ".pgm";
    write_pgm8(root / name.str(), to_gray(ch, S, S, *mn, *mx), comment);
    channels.push_back({{"file", name.str()}, {"min", *mn}, {"max", *mx}});
  }
  {
    auto js = open_out(root / "features.json");
    js << json{{"run", run}, {"patient_id", p.id}, {"slice", a.slice}, {"channels", channels}}
              .dump(2)
       << '\n';
  }
  out << "wrote " << C << " gate channels to " << root.string() << '\n';
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Lung fibrosis progression pipeline: masks, slope targets, hybrid model, metrics",
               "ipf"};
  app.set_version_flag("--version", std::string(kToolVersion));
  app.require_subcommand(1);

  SynthArgs synth;
  auto* s_synth = app.add_subcommand("synth", "Generate a synthetic dataset (CT phantoms + clinical CSV)");
  ConfigBinder b_synth(s_synth);
  b_synth.option("--patients", synth.patients, "Number of patients")->capture_default_str();
  b_synth.option("--slices", synth.slices, "Slices per patient")->capture_default_str();
  b_synth.option("--visits", synth.visits, "FVC visits per patient")->capture_default_str();
  b_synth.option("--image-size", synth.image_size, "Slice width/height in pixels")
      ->capture_default_str();
  b_synth.option("--noise-sd", synth.noise_sd, "FVC noise sd on follow-up visits (mL)")
      ->capture_default_str();
  b_synth.option("--seed", synth.seed, "Random seed")->capture_default_str();
  b_synth.option("--out", synth.out, "Output dataset directory")->required();

  MaskArgs mask;
  auto* s_mask = app.add_subcommand("mask", "Extract lung masks (region growing + circular dilation)");
  ConfigBinder b_mask(s_mask);
  b_mask.option("--data", mask.data, "Dataset directory (masks every slice of every patient)");
  b_mask.option("--input", mask.inputs, "16-bit PGM slice(s)");
  b_mask.option("--out", mask.out, "Output directory for .mask.pgm files")->required();
  b_mask.option("--tau", mask.tau, "Region-growing HU tolerance")->capture_default_str();
  b_mask.option("--radius", mask.radius, "Dilation radius in pixels (default: 2 per 64 px of width)");
  b_mask.option("--seed-point", mask.seed_point, "Manual seed ROW COL")->expected(2);
  b_mask.flag("--fallback-ones", mask.fallback_ones,
              "Write an all-ones mask with a warning when no lung region is found");
  b_mask.option("--seed", mask.seed, "Seed recorded in the run header")->capture_default_str();

  TrainArgs train;
  auto* s_train = app.add_subcommand("train", "Cross-validated training; writes checkpoints and a log");
  ConfigBinder b_train(s_train);
  b_train.option("--data", train.data, "Dataset directory")->required();
  b_train.option("--out", train.out, "Output directory")->required();
  b_train.option("--seed", train.seed, "Random seed")->capture_default_str();
  b_train.option("--folds", train.folds, "Cross-validation folds")->capture_default_str();
  b_train.option("--epochs", train.epochs, "Epochs per fold")->capture_default_str();
  b_train.option("--batch-size", train.batch_size, "Slices per optimiser step")->capture_default_str();
  b_train.option("--lr", train.lr, "AdamW learning rate")->capture_default_str();
  b_train.option("--validate-every", train.validate_every, "Validation cadence in epochs")
      ->capture_default_str();
  b_train.option("--stop-ratio", train.stop_ratio,
                 "Stop a fold once loss <= ratio * epoch-1 loss (0 disables)")
      ->capture_default_str();
  b_train.option("--image-size", train.image_size, "Model input resolution")->capture_default_str();
  b_train.flag("--ignore-masks", train.ignore_masks, "Feed all-ones masks to the context gate");
  b_train.flag("--no-parallel", train.no_parallel, "Drop the parallel CNN branch");
  b_train.flag("--no-sequential", train.no_sequential, "Drop the CNN-to-transformer branch");
  b_train.flag("--no-clinical", train.no_clinical, "Fuse the raw clinical vector without enrichment");
  b_train.flag("--quiet", train.quiet, "No per-epoch progress lines");
  add_scoring_options(b_train, train.scoring);

  EvalArgs eval;
  auto* s_eval = app.add_subcommand("eval", "Score checkpoints (RMSE and Laplace log-likelihood)");
  ConfigBinder b_eval(s_eval);
  b_eval.option("--checkpoint", eval.checkpoints, "Checkpoint file(s)")->required();
  b_eval.option("--data", eval.data, "Dataset directory")->required();
  b_eval.option("--out", eval.out, "Report JSON path (default: stdout)");
  b_eval.option("--patients", eval.patients, "'test' (checkpoint's held-out ids) or 'all'")
      ->check(CLI::IsMember({"test", "all"}))
      ->capture_default_str();
  b_eval.option("--seed", eval.seed, "Seed recorded in the run header")->capture_default_str();
  add_scoring_options(b_eval, eval.scoring);

  PredictArgs predict;
  auto* s_predict = app.add_subcommand("predict", "Per-patient slope and reconstructed FVC as CSV");
  ConfigBinder b_predict(s_predict);
  b_predict.option("--checkpoint", predict.checkpoint, "Checkpoint file")->required();
  b_predict.option("--data", predict.data, "Dataset directory")->required();
  b_predict.option("--out", predict.out, "CSV path (default: stdout)");
  b_predict.option("--patient", predict.patients, "Patient id(s) (default: all)");
  b_predict.option("--precision", predict.precision, "Arithmetic precision")
      ->check(CLI::IsMember({"f32", "f64"}))
      ->capture_default_str();
  b_predict.option("--seed", predict.seed, "Seed recorded in the run header")->capture_default_str();

  DistfitArgs distfit;
  auto* s_distfit = app.add_subcommand("distfit", "Histogram with Gaussian and Laplace fits (CSV, JSON, SVG)");
  ConfigBinder b_distfit(s_distfit);
  b_distfit.option("--data", distfit.data, "Dataset directory (fits every FVC value)");
  b_distfit.option("--values", distfit.values, "Text file with one value per line");
  b_distfit.option("--out", distfit.out, "Output directory")->required();
  b_distfit.option("--seed", distfit.seed, "Seed recorded in the run header")->capture_default_str();

  DumpArgs dump;
  auto* s_dump = app.add_subcommand("dump-features", "Write context-gate output channels as PGM images");
  ConfigBinder b_dump(s_dump);
  b_dump.option("--checkpoint", dump.checkpoint, "Checkpoint file (default: fresh weights from --seed)");
  b_dump.option("--data", dump.data, "Dataset directory")->required();
  b_dump.option("--patient", dump.patient, "Patient id")->required();
  b_dump.option("--slice", dump.slice, "Index among the patient's kept slices")->capture_default_str();
  b_dump.option("--out", dump.out, "Output directory")->required();
  b_dump.option("--seed", dump.seed, "Initialisation seed when no checkpoint is given")
      ->capture_default_str();

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e, out, err);
    err << "ipf: " << e.what() << '\n';
    return kExitUsage;
  }

  try {
    if (s_synth->parsed()) {
      b_synth.apply();
      return cmd_synth(synth, b_synth.path(), out);
    }
    if (s_mask->parsed()) {
      b_mask.apply();
      return cmd_mask(mask, b_mask.path(), out, err);
    }
    if (s_train->parsed()) {
      b_train.apply();
      return cmd_train(train, b_train.path(), out);
    }
    if (s_eval->parsed()) {
      b_eval.apply();
      return cmd_eval(eval, b_eval.path(), out);
    }
    if (s_predict->parsed()) {
      b_predict.apply();
      return cmd_predict(predict, b_predict.path(), out);
    }
    if (s_distfit->parsed()) {
      b_distfit.apply();
      return cmd_distfit(distfit, b_distfit.path(), out);
    }
    b_dump.apply();
    return cmd_dump(dump, b_dump.path(), out);
  } catch (const UsageError& e) {
    err << "ipf: usage error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const DataError& e) {
    err << "ipf: data error: " << e.what() << '\n';
    return kExitData;
  } catch (const fs::filesystem_error& e) {
    err << "ipf: data error: " << e.what() << '\n';
    return kExitData;
  } catch (const NumericalError& e) {
    err << "ipf: numerical error: " << e.what() << '\n';
    return kExitNumerical;
  }
}

}  // namespace ipf
