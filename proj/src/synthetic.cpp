#include "ipf/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>

#include "ipf/error.hpp"

namespace ipf {

PhantomGeometry phantom_geometry(std::size_t size, std::size_t slice_index,
                                 std::size_t slice_count) {
  const double s = static_cast<double>(size);
  const double pos = (static_cast<double>(slice_index) + 0.5) / static_cast<double>(slice_count);
  const double scale = 0.55 + 0.45 * std::sin(std::numbers::pi * pos);
  PhantomGeometry g;
  g.body = {0.5 * s - 0.5, 0.5 * s - 0.5, 0.40 * s, 0.45 * s};
  g.lungs[0] = {0.5 * s - 0.5, 0.31 * s, 0.27 * s * scale, 0.11 * s * scale + 1.0};
  g.lungs[1] = {0.5 * s - 0.5, 0.69 * s - 1.0, 0.27 * s * scale, 0.11 * s * scale + 1.0};
  return g;
}

HuImage render_phantom(const PhantomGeometry& g, std::size_t size, double roughness_hu,
                       Rng& rng) {
  HuImage img(size, size, phantom_hu::kAir);
  for (std::size_t r = 0; r < size; ++r) {
    for (std::size_t c = 0; c < size; ++c) {
      const double y = static_cast<double>(r);
      const double x = static_cast<double>(c);
      float v = phantom_hu::kAir;
      if (g.body.contains(y, x)) {
        v = phantom_hu::kSoftTissue + static_cast<float>(rng.uniform(-20.0, 20.0));
      }
      if (g.lungs[0].contains(y, x) || g.lungs[1].contains(y, x)) {
        v = phantom_hu::kLung + static_cast<float>(rng.uniform(-roughness_hu, roughness_hu));
      }
      img(r, c) = v;
    }
  }
  return img;
}

double roughness_for_slope(double slope) {
  return 20.0 + 130.0 * std::min(std::abs(slope), 15.0) / 15.0;
}

namespace {

double truncated_normal(Rng& rng, double mean, double sd, double lo, double hi) {
  for (;;) {
    const double v = rng.normal(mean, sd);
    if (v >= lo && v <= hi) return v;
  }
}

Smoking draw_smoking(Rng& rng) {
  const double u = rng.uniform();
  if (u < cohort::kCurrentSmokerFraction) return Smoking::currently_smokes;
  if (u < cohort::kCurrentSmokerFraction + cohort::kExSmokerFraction) return Smoking::ex_smoker;
  return Smoking::never_smoked;
}

}  // namespace

std::vector<PatientSample> generate_synthetic(const SynthSpec& spec, std::uint64_t seed) {
  if (spec.patients == 0) throw UsageError("synthetic spec: zero patients");
  if (spec.visits < 2) throw UsageError("synthetic spec: need at least two visits");
  if (spec.slices == 0) throw UsageError("synthetic spec: zero slices");
  if (spec.image_size < 16) throw UsageError("synthetic spec: image size below 16");

  std::vector<PatientSample> out;
  out.reserve(spec.patients);
  for (std::size_t i = 0; i < spec.patients; ++i) {
    Rng rng(mix_seed(seed, i));
    PatientSample p;
    char id[32];
    std::snprintf(id, sizeof id, "SYN%04zu", i);
    p.clinical.patient_id = id;
    p.clinical.age = static_cast<int>(rng.uniform_int(cohort::kAgeMin, cohort::kAgeMax));
    p.clinical.sex = rng.uniform() < cohort::kMaleFraction ? Sex::male : Sex::female;
    p.clinical.smoking = draw_smoking(rng);

    const double baseline =
        std::round(truncated_normal(rng, cohort::kFvcMean, cohort::kFvcSd, cohort::kFvcMin,
                                    cohort::kFvcMax));
    const double slope = std::clamp(rng.normal(cohort::kSlopeMean, cohort::kSlopeSd),
                                    cohort::kSlopeMin, cohort::kSlopeMax);

    // Follow-up spans at most about a year so the series stays positive.
    const double max_gap = std::max(2.0, 52.0 / static_cast<double>(spec.visits - 1));
    const auto gap_hi = static_cast<std::int64_t>(max_gap);
    const auto gap_lo = std::max<std::int64_t>(1, gap_hi / 3);
    std::vector<FvcPoint> points;
    double week = static_cast<double>(rng.uniform_int(-5, 5));
    const double first_week = week;
    for (std::size_t v = 0; v < spec.visits; ++v) {
      if (v > 0) week += static_cast<double>(rng.uniform_int(gap_lo, gap_hi));
      double fvc = baseline + slope * (week - first_week);
      if (v > 0) fvc += rng.normal(0.0, spec.fvc_noise_sd);
      points.push_back({week, std::max(1.0, std::round(fvc))});
    }
    p.fvc = FvcSeries(std::move(points));

    const double roughness = roughness_for_slope(slope);
    for (std::size_t s = 0; s < spec.slices; ++s) {
      const auto g = phantom_geometry(spec.image_size, s, spec.slices);
      p.volume.slices.push_back(from_hu(render_phantom(g, spec.image_size, roughness, rng)));
    }
    const std::size_t margin = spec.slices / 6;
    p.volume.keep = {margin, spec.slices - 1 - margin};
    out.push_back(std::move(p));
  }
  return out;
}

}  // namespace ipf
