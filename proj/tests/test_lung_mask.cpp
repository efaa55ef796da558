#include <doctest.h>

#include <cmath>
#include <deque>

#include "ipf/error.hpp"
#include "ipf/lung_mask.hpp"
#include "ipf/random.hpp"
#include "ipf/synthetic.hpp"

using namespace ipf;

namespace {

// Reference flood fill written independently of the library.
BinaryMask flood_oracle(const HuImage& img, std::size_t sr, std::size_t sc, double tau, bool eight) {
  double sum = 0.0;
  int n = 0;
  for (int dr = -1; dr <= 1; ++dr) {
    for (int dc = -1; dc <= 1; ++dc) {
      const long r = static_cast<long>(sr) + dr;
      const long c = static_cast<long>(sc) + dc;
      if (r < 0 || c < 0 || r >= static_cast<long>(img.rows) || c >= static_cast<long>(img.cols)) continue;
      sum += img(static_cast<std::size_t>(r), static_cast<std::size_t>(c));
      ++n;
    }
  }
  const double mu = sum / n;
  BinaryMask out(img.rows, img.cols);
  std::deque<std::pair<long, long>> q;
  auto accept = [&](long r, long c) {
    return r >= 0 && c >= 0 && r < static_cast<long>(img.rows) && c < static_cast<long>(img.cols) &&
           !out(static_cast<std::size_t>(r), static_cast<std::size_t>(c)) &&
           std::abs(img(static_cast<std::size_t>(r), static_cast<std::size_t>(c)) - mu) <= tau;
  };
  if (accept(static_cast<long>(sr), static_cast<long>(sc))) {
    out(sr, sc) = 1;
    q.emplace_back(sr, sc);
  }
  while (!q.empty()) {
    auto [r, c] = q.front();
    q.pop_front();
    for (int dr = -1; dr <= 1; ++dr) {
      for (int dc = -1; dc <= 1; ++dc) {
        if ((dr == 0 && dc == 0) || (!eight && dr != 0 && dc != 0)) continue;
        if (accept(r + dr, c + dc)) {
          out(static_cast<std::size_t>(r + dr), static_cast<std::size_t>(c + dc)) = 1;
          q.emplace_back(r + dr, c + dc);
        }
      }
    }
  }
  return out;
}

}  // namespace

TEST_SUITE("lung_mask") {

TEST_CASE("region growing returns exactly a dark block") {
  HuImage img(10, 10, 40.0f);
  for (std::size_t r = 2; r < 6; ++r) {
    for (std::size_t c = 3; c < 7; ++c) img(r, c) = -850.0f;
  }
  const auto m = region_grow(img, {3, 4}, 250.0, Connectivity::four);
  CHECK(count_set(m) == 16);
  CHECK(m(2, 3) == 1);
  CHECK(m(5, 6) == 1);
  CHECK(m(1, 3) == 0);
}

TEST_CASE("region growing matches a reference flood fill on random images") {
  Rng rng(2);
  for (int k = 0; k < 60; ++k) {
    const auto rows = static_cast<std::size_t>(rng.uniform_int(3, 20));
    const auto cols = static_cast<std::size_t>(rng.uniform_int(3, 20));
    HuImage img(rows, cols);
    for (auto& v : img.data) v = static_cast<float>(rng.uniform() < 0.6 ? rng.uniform(-900, -700) : rng.uniform(-100, 100));
    const auto sr = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(rows) - 1));
    const auto sc = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(cols) - 1));
    const bool eight = k % 2 == 0;
    const double tau = rng.uniform(50.0, 400.0);
    CHECK(region_grow(img, {sr, sc}, tau, eight ? Connectivity::eight : Connectivity::four) ==
          flood_oracle(img, sr, sc, tau, eight));
  }
}

TEST_CASE("connectivity matters on diagonals") {
  // Three 2x2 dark blocks meeting at corners. Seed mean over the 3x3 window
  // at (2,2) is (5 * -900 + 4 * 40) / 9 = -482.2, so tau 450 admits only dark.
  HuImage img(6, 6, 40.0f);
  for (std::size_t b = 0; b < 3; ++b) {
    for (std::size_t r = 2 * b; r < 2 * b + 2; ++r) {
      for (std::size_t c = 2 * b; c < 2 * b + 2; ++c) img(r, c) = -900.0f;
    }
  }
  CHECK(count_set(region_grow(img, {2, 2}, 450.0, Connectivity::four)) == 4);
  CHECK(count_set(region_grow(img, {2, 2}, 450.0, Connectivity::eight)) == 12);
}

TEST_CASE("out-of-bounds seed is a usage error") {
  HuImage img(4, 4, 0.0f);
  CHECK_THROWS_AS(region_grow(img, {4, 0}, 10.0, Connectivity::four), UsageError);
}

TEST_CASE("dilation by the unit disc is a plus shape") {
  BinaryMask m(5, 5);
  m(2, 2) = 1;
  const auto d = dilate_circular(m, 1.0);
  CHECK(count_set(d) == 5);
  CHECK(d(1, 2) == 1);
  CHECK(d(2, 1) == 1);
  CHECK(d(1, 1) == 0);
  CHECK(dilate_circular(m, 0.0) == m);
  CHECK(count_set(dilate_circular(m, std::sqrt(2.0))) == 9);
}

TEST_CASE("dilation is monotone and extensive") {
  Rng rng(4);
  BinaryMask m(16, 16);
  for (auto& v : m.data) v = rng.uniform() < 0.05;
  const auto d1 = dilate_circular(m, 1.5);
  const auto d3 = dilate_circular(m, 3.0);
  for (std::size_t i = 0; i < m.data.size(); ++i) {
    CHECK(d1.data[i] >= m.data[i]);
    CHECK(d3.data[i] >= d1.data[i]);
  }
}

TEST_CASE("dilation matches a brute-force pairwise oracle") {
  Rng rng(6);
  for (int k = 0; k < 5; ++k) {
    BinaryMask m(14, 17);
    for (auto& v : m.data) v = rng.uniform() < 0.04;
    const auto d = dilate_circular(m, 3.0);
    BinaryMask oracle(m.rows, m.cols);
    for (std::size_t r = 0; r < m.rows; ++r) {
      for (std::size_t c = 0; c < m.cols; ++c) {
        for (std::size_t qr = 0; qr < m.rows; ++qr) {
          for (std::size_t qc = 0; qc < m.cols; ++qc) {
            const double dr = static_cast<double>(r) - static_cast<double>(qr);
            const double dc = static_cast<double>(c) - static_cast<double>(qc);
            if (m(qr, qc) && dr * dr + dc * dc <= 9.0) oracle(r, c) = 1;
          }
        }
      }
    }
    CHECK(d == oracle);
  }
}

TEST_CASE("a background seed grows the background, not the block") {
  HuImage img(10, 10, 40.0f);
  for (std::size_t r = 2; r < 6; ++r) {
    for (std::size_t c = 3; c < 7; ++c) img(r, c) = -850.0f;
  }
  const auto m = region_grow(img, {0, 0}, 100.0, Connectivity::four);
  CHECK(count_set(m) == 100 - 16);
  CHECK(m(3, 4) == 0);
}

TEST_CASE("components report border contact") {
  BinaryMask m(6, 6);
  m(0, 0) = 1;
  m(3, 3) = m(3, 4) = 1;
  const auto comps = connected_components(m, Connectivity::four, 1);
  REQUIRE(comps.size() == 2);
  std::size_t border = 0;
  for (const auto& c : comps) border += c.touches_border;
  CHECK(border == 1);
}

TEST_CASE("automatic extraction finds both lungs of a phantom") {
  const std::size_t size = 64;
  const auto geom = phantom_geometry(size, 2, 6);
  Rng rng(1);
  const auto img = render_phantom(geom, size, 60.0, rng);
  auto params = MaskParams::for_width(size);
  params.dilation_radius = 0.0;
  const auto m = extract_lung_mask(img, params);
  std::size_t left = 0;
  std::size_t right = 0;
  std::size_t outside = 0;
  for (std::size_t r = 0; r < size; ++r) {
    for (std::size_t c = 0; c < size; ++c) {
      if (!m(r, c)) continue;
      const double y = static_cast<double>(r);
      const double x = static_cast<double>(c);
      if (geom.lungs[0].contains(y, x)) ++left;
      else if (geom.lungs[1].contains(y, x)) ++right;
      else ++outside;
    }
  }
  CHECK(left > 0);
  CHECK(right > 0);
  CHECK(outside == 0);
}

TEST_CASE("bright slice has no lung region") {
  HuImage img(32, 32, 300.0f);
  CHECK_THROWS_WITH_AS(extract_lung_mask(img, MaskParams::for_width(32)),
                       doctest::Contains("no lung region"), DataError);
}

TEST_CASE("dilation radius scales with width") {
  CHECK(MaskParams::for_width(64).dilation_radius == 2.0);
  CHECK(MaskParams::for_width(256).dilation_radius == 8.0);
}

TEST_CASE("mask PGM encoding") {
  BinaryMask m(2, 2);
  m(0, 1) = 1;
  const auto g = mask_to_pgm8(m);
  CHECK(g(0, 1) == 255);
  CHECK(g(0, 0) == 0);
  CHECK(mask_from_pgm8(g) == m);
}

}  // TEST_SUITE
