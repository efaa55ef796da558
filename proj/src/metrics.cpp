#include "ipf/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "ipf/error.hpp"

namespace ipf {

SigmaPolicy SigmaPolicy::fixed(double sigma, std::optional<ClipPolicy> clip) {
  SigmaPolicy p{SigmaMode::fixed, sigma, clip};
  p.validate();
  return p;
}

void SigmaPolicy::validate() const {
  if (mode == SigmaMode::fixed && !(sigma > 0.0)) throw UsageError("fixed sigma must be positive");
  if (clip && !(clip->sigma_min > 0.0 && clip->error_max > 0.0)) {
    throw UsageError("clip values must be positive");
  }
}

SigmaPolicy SigmaPolicy::parse(const std::string& text) {
  if (text == "train" || text == "train_residual_laplace") return {};
  const std::string prefix = "fixed:";
  if (text.rfind(prefix, 0) == 0) {
    double v = 0.0;
    try {
      v = std::stod(text.substr(prefix.size()));
    } catch (const std::exception&) {
      throw UsageError("invalid sigma policy: " + text);
    }
    return fixed(v);
  }
  throw UsageError("invalid sigma policy '" + text + "' (expected 'train' or 'fixed:<sigma>')");
}

nlohmann::json SigmaPolicy::to_json() const {
  nlohmann::json j;
  j["mode"] = mode == SigmaMode::fixed ? "fixed" : "train_residual_laplace";
  if (mode == SigmaMode::fixed) j["sigma"] = sigma;
  if (clip) {
    j["clip"] = {{"sigma_min", clip->sigma_min}, {"error_max", clip->error_max}};
  } else {
    j["clip"] = nullptr;
  }
  return j;
}

namespace {

void require_pairs(std::span<const double> pred, std::span<const double> truth, const char* what) {
  if (pred.size() != truth.size()) throw UsageError(std::string(what) + ": length mismatch");
  if (pred.empty()) throw UsageError(std::string(what) + ": empty input");
}

}  // namespace

double rmse(std::span<const double> pred, std::span<const double> truth) {
  require_pairs(pred, truth, "rmse");
  double acc = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = truth[i] - pred[i];
    acc += d * d;
  }
  return std::sqrt(acc / static_cast<double>(pred.size()));
}

double mean_absolute_error(std::span<const double> pred, std::span<const double> truth) {
  require_pairs(pred, truth, "mean_absolute_error");
  double acc = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) acc += std::abs(truth[i] - pred[i]);
  return acc / static_cast<double>(pred.size());
}

double laplace_ll(double pred, double truth, double sigma, const std::optional<ClipPolicy>& clip) {
  if (!(sigma > 0.0)) throw NumericalError("laplace_ll: sigma must be positive");
  double delta = std::abs(pred - truth);
  if (clip) {
    sigma = std::max(sigma, clip->sigma_min);
    delta = std::min(delta, clip->error_max);
  }
  constexpr double sqrt2 = std::numbers::sqrt2;
  return -std::log(sqrt2 * sigma) - sqrt2 * delta / sigma;
}

double laplace_ll(std::span<const double> pred, std::span<const double> truth, double sigma,
                  const std::optional<ClipPolicy>& clip) {
  require_pairs(pred, truth, "laplace_ll");
  double acc = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) acc += laplace_ll(pred[i], truth[i], sigma, clip);
  return acc / static_cast<double>(pred.size());
}

double median(std::vector<double> values) {
  if (values.empty()) throw UsageError("median of empty set");
  const std::size_t n = values.size();
  std::sort(values.begin(), values.end());
  return n % 2 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

double quantile(std::vector<double> values, double q) {
  if (values.empty()) throw UsageError("quantile of empty set");
  std::sort(values.begin(), values.end());
  const double pos = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (pos - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

double estimate_sigma(std::span<const double> residuals, ResidualCentre centre) {
  if (residuals.empty()) throw UsageError("estimate_sigma: no residuals");
  const double mu =
      centre == ResidualCentre::median ? median({residuals.begin(), residuals.end()}) : 0.0;
  double b = 0.0;
  for (double r : residuals) b += std::abs(r - mu);
  b /= static_cast<double>(residuals.size());
  return std::max(std::numbers::sqrt2 * b, kSigmaFloor);
}

DistributionFit fit_distributions(std::span<const double> values) {
  if (values.size() < 2) throw NumericalError("fit_distributions: need at least two values");
  const auto [lo_it, hi_it] = std::minmax_element(values.begin(), values.end());
  const double lo = *lo_it;
  const double hi = *hi_it;
  if (lo == hi) throw NumericalError("fit_distributions: all values identical");

  DistributionFit fit;
  const double n = static_cast<double>(values.size());
  for (double v : values) fit.gaussian_mean += v;
  fit.gaussian_mean /= n;
  double var = 0.0;
  for (double v : values) var += (v - fit.gaussian_mean) * (v - fit.gaussian_mean);
  fit.gaussian_sd = std::sqrt(var / n);

  std::vector<double> copy(values.begin(), values.end());
  fit.laplace.mu = median(copy);
  double mad = 0.0;
  for (double v : values) mad += std::abs(v - fit.laplace.mu);
  fit.laplace.b = mad / n;

  const double iqr = quantile(copy, 0.75) - quantile(copy, 0.25);
  const double fd_width = 2.0 * iqr / std::cbrt(n);
  std::size_t bins = kMaxBins;
  if (fd_width > 0.0) {
    bins = static_cast<std::size_t>(std::ceil((hi - lo) / fd_width));
    bins = std::clamp(bins, kMinBins, kMaxBins);
  }
  fit.histogram.lo = lo;
  fit.histogram.width = (hi - lo) / static_cast<double>(bins);
  fit.histogram.counts.assign(bins, 0);
  for (double v : values) {
    auto idx = static_cast<std::size_t>((v - lo) / fit.histogram.width);
    fit.histogram.counts[std::min(idx, bins - 1)] += 1;
  }
  return fit;
}

double gaussian_pdf(double x, double mean, double sd) {
  const double z = (x - mean) / sd;
  return std::exp(-0.5 * z * z) / (sd * std::sqrt(2.0 * std::numbers::pi));
}

double laplace_pdf(double x, const LaplaceParams& p) {
  return std::exp(-std::abs(x - p.mu) / p.b) / (2.0 * p.b);
}

}  // namespace ipf
