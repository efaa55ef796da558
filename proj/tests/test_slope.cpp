#include <doctest.h>

#include <cmath>

#include "ipf/error.hpp"
#include "ipf/random.hpp"
#include "ipf/slope.hpp"

using namespace ipf;

TEST_SUITE("slope") {

TEST_CASE("exact line is recovered") {
  const DesignPair p({0, 1, 2, 3}, {1, 3, 5, 7});
  const auto fit = ols_fit(p);
  CHECK(fit.slope == doctest::Approx(2.0).epsilon(1e-14));
  CHECK(fit.intercept == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(slope_closed_form(p) == doctest::Approx(2.0).epsilon(1e-14));
}

TEST_CASE("fit agrees with Sxy / Sxx about the means") {
  const std::vector<double> t{0, 4, 10};
  const std::vector<double> m{2500, 2470, 2440};
  const double tb = 14.0 / 3.0;
  const double mb = 2470.0;
  double sxy = 0.0;
  double sxx = 0.0;
  for (int i = 0; i < 3; ++i) {
    sxy += (t[i] - tb) * (m[i] - mb);
    sxx += (t[i] - tb) * (t[i] - tb);
  }
  const auto fit = ols_fit(DesignPair(t, m));
  CHECK(fit.slope == doctest::Approx(sxy / sxx).epsilon(1e-13));
  CHECK(fit.intercept == doctest::Approx(mb - sxy / sxx * tb).epsilon(1e-13));
}

TEST_CASE("two points give the secant") {
  const DesignPair p({-2, 6}, {3000, 2960});
  CHECK(ols_fit(p).slope == doctest::Approx(-5.0));
  CHECK(slope_closed_form(p) == doctest::Approx(-5.0));
}

TEST_CASE("slope is invariant to shifting time") {
  Rng rng(3);
  for (int k = 0; k < 20; ++k) {
    std::vector<double> t;
    std::vector<double> m;
    for (int i = 0; i < 8; ++i) {
      t.push_back(i * 3.0 + rng.uniform(0, 2));
      m.push_back(rng.uniform(1500, 3500));
    }
    auto shifted = t;
    for (auto& v : shifted) v += 37.0;
    CHECK(ols_fit(DesignPair(t, m)).slope ==
          doctest::Approx(ols_fit(DesignPair(shifted, m)).slope).epsilon(1e-10));
  }
}

TEST_CASE("singular designs are rejected") {
  CHECK_THROWS_AS(DesignPair({1}, {2}), SingularDesignError);
  CHECK_THROWS_AS(DesignPair({1, 1, 1}, {2, 3, 4}), SingularDesignError);
  CHECK_THROWS_AS(DesignPair({1, 2}, {2}), SingularDesignError);
}

TEST_CASE("RSS gradient vanishes at the least-squares fit") {
  const DesignPair p({0, 2, 5, 9, 12}, {2810, 2795, 2770, 2755, 2712});
  const auto fit = ols_fit(p);
  const auto g = rss_and_gradient(p, fit);
  CHECK(std::abs(g.grad[0]) < 1e-7);
  CHECK(std::abs(g.grad[1]) < 1e-6);
  const auto off = rss_and_gradient(p, {fit.intercept + 1.0, fit.slope});
  CHECK(off.rss == doctest::Approx(g.rss + 5.0).epsilon(1e-12));
}

TEST_CASE("reconstruction follows the line from the baseline") {
  const auto m = reconstruct_fvc(-4.0, 2500.0, std::vector<double>{0, 5, 10});
  CHECK(m == std::vector<double>{2500.0, 2480.0, 2460.0});
}

}  // TEST_SUITE
