#pragma once

#include <array>
#include <span>
#include <vector>

namespace ipf {

// Intercept c (mL) and slope s (mL/week) of m = c + s * t.
struct LineFit {
  double intercept = 0.0;
  double slope = 0.0;
};

// Paired timestamps and FVC values. Construction checks equal lengths,
// n >= 2 and at least two distinct times; otherwise SingularDesignError.
class DesignPair {
 public:
  DesignPair(std::vector<double> times, std::vector<double> values);

  std::span<const double> times() const noexcept { return times_; }
  std::span<const double> values() const noexcept { return values_; }
  std::size_t size() const noexcept { return times_.size(); }

 private:
  std::vector<double> times_;
  std::vector<double> values_;
};

// Normal-equations solution (X^T X)^{-1} X^T y, evaluated through the
// closed-form 2x2 inverse.
LineFit ols_fit(const DesignPair& pair);

// Slope in the factored double-sum form
//   [(n-1) sum t_j m_j - sum_j sum_{l != j} t_l m_j] / [n sum t^2 - (sum t)^2].
// O(n^2); kept for checking the derivation against ols_fit.
double slope_closed_form(const DesignPair& pair);

struct RssGradient {
  double rss = 0.0;
  std::array<double, 2> grad{};  // d/d(intercept), d/d(slope)
};

// RSS = ||M - tau beta||^2 and its gradient -2 tau^T M + 2 tau^T tau beta.
RssGradient rss_and_gradient(const DesignPair& pair, const LineFit& beta);

// m_j = baseline + slope * t_j.
std::vector<double> reconstruct_fvc(double slope, double baseline, std::span<const double> times);

}  // namespace ipf
