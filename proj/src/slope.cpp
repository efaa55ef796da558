#include "ipf/slope.hpp"

#include <algorithm>
#include <cmath>

#include "ipf/error.hpp"

namespace ipf {

DesignPair::DesignPair(std::vector<double> times, std::vector<double> values)
    : times_(std::move(times)), values_(std::move(values)) {
  if (times_.size() != values_.size()) throw SingularDesignError("design: length mismatch");
  if (times_.size() < 2) throw SingularDesignError("design: fewer than two points");
  const auto [lo, hi] = std::minmax_element(times_.begin(), times_.end());
  if (*lo == *hi) throw SingularDesignError("design: all timestamps equal");
}

LineFit ols_fit(const DesignPair& pair) {
  const auto m = pair.values();
  const std::size_t n = pair.size();
  const double dn = static_cast<double>(n);

  // Times are shifted by their mean before forming X^T X; the slope is shift
  // invariant and the intercept is moved back afterwards.
  double shift = 0.0;
  for (double t : pair.times()) shift += t;
  shift /= dn;
  std::vector<double> x(n);
  for (std::size_t i = 0; i < n; ++i) x[i] = pair.times()[i] - shift;

  double sum_x = 0.0;
  double sum_xx = 0.0;
  for (double v : x) {
    sum_x += v;
    sum_xx += v * v;
  }
  // gamma = det(X^T X); (X^T X)^{-1} X^T has columns (z1_i, z2_i) / gamma.
  const double gamma = dn * sum_xx - sum_x * sum_x;
  if (gamma == 0.0) throw SingularDesignError("design: singular normal matrix");
  double c = 0.0;
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double z1 = sum_xx - x[i] * sum_x;
    const double z2 = dn * x[i] - sum_x;
    c += z1 * m[i];
    s += z2 * m[i];
  }
  c /= gamma;
  s /= gamma;
  return {c - s * shift, s};
}

double slope_closed_form(const DesignPair& pair) {
  const auto t = pair.times();
  const auto m = pair.values();
  const std::size_t n = pair.size();
  double sum_tm = 0.0;
  double cross = 0.0;
  double sum_t = 0.0;
  double sum_tt = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    sum_tm += t[j] * m[j];
    sum_t += t[j];
    sum_tt += t[j] * t[j];
    for (std::size_t l = 0; l < n; ++l) {
      if (l != j) cross += t[l] * m[j];
    }
  }
  const double dn = static_cast<double>(n);
  const double denom = dn * sum_tt - sum_t * sum_t;
  if (denom == 0.0) throw SingularDesignError("closed-form slope: zero denominator");
  return ((dn - 1.0) * sum_tm - cross) / denom;
}

RssGradient rss_and_gradient(const DesignPair& pair, const LineFit& beta) {
  const auto t = pair.times();
  const auto m = pair.values();
  RssGradient out;
  for (std::size_t j = 0; j < pair.size(); ++j) {
    const double r = m[j] - (beta.intercept + beta.slope * t[j]);
    out.rss += r * r;
    out.grad[0] += -2.0 * r;
    out.grad[1] += -2.0 * r * t[j];
  }
  return out;
}

std::vector<double> reconstruct_fvc(double slope, double baseline, std::span<const double> times) {
  std::vector<double> out;
  out.reserve(times.size());
  for (double t : times) out.push_back(baseline + slope * t);
  return out;
}

}  // namespace ipf
