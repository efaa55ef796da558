#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <vector>

#include "ipf/dataset.hpp"
#include "ipf/raster.hpp"
#include "ipf/random.hpp"

namespace ipf {

// Cohort marginals used by the generator.
namespace cohort {
inline constexpr int kAgeMin = 49;
inline constexpr int kAgeMax = 88;
inline constexpr double kMaleFraction = 139.0 / 176.0;
inline constexpr double kCurrentSmokerFraction = 9.0 / 176.0;
inline constexpr double kExSmokerFraction = 118.0 / 176.0;
inline constexpr double kFvcMean = 2690.47;
inline constexpr double kFvcSd = 832.77;
inline constexpr double kFvcMin = 827.0;
inline constexpr double kFvcMax = 6399.0;
// Latent decline rate (mL/week): normal(-4, 3) clipped to [-15, 5].
inline constexpr double kSlopeMean = -4.0;
inline constexpr double kSlopeSd = 3.0;
inline constexpr double kSlopeMin = -15.0;
inline constexpr double kSlopeMax = 5.0;
}  // namespace cohort

struct SynthSpec {
  std::size_t patients = 8;
  std::size_t slices = 6;
  std::size_t image_size = 64;
  std::size_t visits = 6;
  double fvc_noise_sd = 5.0;  // mL, applied to follow-up visits only
};

struct Ellipse {
  double cy = 0.0;
  double cx = 0.0;
  double ry = 1.0;
  double rx = 1.0;

  bool contains(double r, double c) const {
    const double dy = (r - cy) / ry;
    const double dx = (c - cx) / rx;
    return dy * dy + dx * dx <= 1.0;
  }
};

struct PhantomGeometry {
  Ellipse body;
  std::array<Ellipse, 2> lungs;
};

namespace phantom_hu {
inline constexpr float kAir = -1000.0f;
inline constexpr float kSoftTissue = 40.0f;
inline constexpr float kLung = -850.0f;
}  // namespace phantom_hu

// Lung ellipses shrink towards the apex and base of the stack.
PhantomGeometry phantom_geometry(std::size_t size, std::size_t slice_index, std::size_t slice_count);

// Air outside the body, soft tissue inside, two dark lungs whose texture
// amplitude is `roughness_hu` (uniform per-pixel noise in +/- roughness).
HuImage render_phantom(const PhantomGeometry& geometry, std::size_t size, double roughness_hu,
                       Rng& rng);

// Texture amplitude grows with the magnitude of the decline rate.
double roughness_for_slope(double slope);

// Deterministic given the seed. Throws UsageError on zero patients/visits.
std::vector<PatientSample> generate_synthetic(const SynthSpec& spec, std::uint64_t seed);

}  // namespace ipf
