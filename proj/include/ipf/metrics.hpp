#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

namespace ipf {

struct LaplaceParams {
  double mu = 0.0;  // mL
  double b = 1.0;   // mL, > 0
};

// Competition-style clipping: sigma <- max(sigma, sigma_min),
// |delta| <- min(|delta|, error_max).
struct ClipPolicy {
  double sigma_min = 70.0;
  double error_max = 1000.0;
};

enum class SigmaMode { fixed, train_residual_laplace };

struct SigmaPolicy {
  SigmaMode mode = SigmaMode::train_residual_laplace;
  double sigma = 0.0;  // used when mode == fixed
  std::optional<ClipPolicy> clip;

  static SigmaPolicy fixed(double sigma, std::optional<ClipPolicy> clip = std::nullopt);
  void validate() const;
  // "train" or "fixed:<sigma>".
  static SigmaPolicy parse(const std::string& text);
  nlohmann::json to_json() const;
};

// Scale floor applied by estimate_sigma (mL).
inline constexpr double kSigmaFloor = 1.0;

double rmse(std::span<const double> pred, std::span<const double> truth);
double mean_absolute_error(std::span<const double> pred, std::span<const double> truth);

// -ln(sqrt(2) sigma) - sqrt(2) |pred - truth| / sigma, after optional clipping.
double laplace_ll(double pred, double truth, double sigma,
                  const std::optional<ClipPolicy>& clip = std::nullopt);
// Mean of laplace_ll over the pairs.
double laplace_ll(std::span<const double> pred, std::span<const double> truth, double sigma,
                  const std::optional<ClipPolicy>& clip = std::nullopt);

enum class ResidualCentre { zero, median };

// Laplace MLE scale b of the residuals (about 0 or about their median);
// returns sigma = max(sqrt(2) b, kSigmaFloor).
double estimate_sigma(std::span<const double> residuals,
                      ResidualCentre centre = ResidualCentre::zero);

double median(std::vector<double> values);
// Linear-interpolated sample quantile, q in [0, 1].
double quantile(std::vector<double> values, double q);

struct Histogram {
  double lo = 0.0;
  double width = 1.0;
  std::vector<std::size_t> counts;

  double centre(std::size_t i) const { return lo + (static_cast<double>(i) + 0.5) * width; }
};

struct DistributionFit {
  double gaussian_mean = 0.0;
  double gaussian_sd = 0.0;  // population (MLE) sd
  LaplaceParams laplace;
  Histogram histogram;
};

// Freedman-Diaconis bin count, clipped to this range.
inline constexpr std::size_t kMinBins = 20;
inline constexpr std::size_t kMaxBins = 100;

// Gaussian and Laplace MLE fits plus a histogram. Throws NumericalError when
// fewer than two distinct values are given.
DistributionFit fit_distributions(std::span<const double> values);

double gaussian_pdf(double x, double mean, double sd);
double laplace_pdf(double x, const LaplaceParams& p);

}  // namespace ipf
