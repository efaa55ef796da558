#include "ipf/lung_mask.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <limits>

#include "ipf/error.hpp"

namespace ipf {

MaskParams MaskParams::for_width(std::size_t width) {
  MaskParams p;
  p.dilation_radius = std::round(2.0 * static_cast<double>(width) / 64.0);
  return p;
}

void MaskParams::validate() const {
  if (!(tau > 0.0)) throw UsageError("mask tau must be positive");
  if (!(dilation_radius >= 0.0)) throw UsageError("dilation radius must be non-negative");
}

namespace {

template <typename Visit>
void for_neighbours(std::size_t r, std::size_t c, std::size_t rows, std::size_t cols,
                    Connectivity conn, Visit&& visit) {
  for (int dr = -1; dr <= 1; ++dr) {
    for (int dc = -1; dc <= 1; ++dc) {
      if (dr == 0 && dc == 0) continue;
      if (conn == Connectivity::four && dr != 0 && dc != 0) continue;
      const auto nr = static_cast<std::ptrdiff_t>(r) + dr;
      const auto nc = static_cast<std::ptrdiff_t>(c) + dc;
      if (nr < 0 || nc < 0 || nr >= static_cast<std::ptrdiff_t>(rows) ||
          nc >= static_cast<std::ptrdiff_t>(cols)) {
        continue;
      }
      visit(static_cast<std::size_t>(nr), static_cast<std::size_t>(nc));
    }
  }
}

}  // namespace

BinaryMask region_grow(const HuImage& slice, PixelIndex seed, double tau,
                       Connectivity connectivity) {
  if (seed.row >= slice.rows || seed.col >= slice.cols) {
    throw UsageError("region_grow: seed out of bounds");
  }
  double sum = 0.0;
  int n = 0;
  for (std::size_t r = seed.row > 0 ? seed.row - 1 : 0; r <= std::min(seed.row + 1, slice.rows - 1);
       ++r) {
    for (std::size_t c = seed.col > 0 ? seed.col - 1 : 0;
         c <= std::min(seed.col + 1, slice.cols - 1); ++c) {
      sum += slice(r, c);
      ++n;
    }
  }
  const double mu = sum / n;
  auto accept = [&](std::size_t r, std::size_t c) { return std::abs(slice(r, c) - mu) <= tau; };

  BinaryMask mask(slice.rows, slice.cols, 0);
  if (!accept(seed.row, seed.col)) return mask;
  std::deque<PixelIndex> queue{seed};
  mask(seed.row, seed.col) = 1;
  while (!queue.empty()) {
    const auto p = queue.front();
    queue.pop_front();
    for_neighbours(p.row, p.col, slice.rows, slice.cols, connectivity,
                   [&](std::size_t r, std::size_t c) {
                     if (!mask(r, c) && accept(r, c)) {
                       mask(r, c) = 1;
                       queue.push_back({r, c});
                     }
                   });
  }
  return mask;
}

BinaryMask dilate_circular(const BinaryMask& mask, double radius) {
  if (radius < 0.0) throw UsageError("dilation radius must be non-negative");
  const auto reach = static_cast<std::ptrdiff_t>(std::floor(radius));
  std::vector<std::pair<std::ptrdiff_t, std::ptrdiff_t>> disc;
  for (std::ptrdiff_t dr = -reach; dr <= reach; ++dr) {
    for (std::ptrdiff_t dc = -reach; dc <= reach; ++dc) {
      if (static_cast<double>(dr * dr + dc * dc) <= radius * radius) disc.emplace_back(dr, dc);
    }
  }
  BinaryMask out(mask.rows, mask.cols, 0);
  const auto rows = static_cast<std::ptrdiff_t>(mask.rows);
  const auto cols = static_cast<std::ptrdiff_t>(mask.cols);
  for (std::ptrdiff_t r = 0; r < rows; ++r) {
    for (std::ptrdiff_t c = 0; c < cols; ++c) {
      if (!mask(static_cast<std::size_t>(r), static_cast<std::size_t>(c))) continue;
      for (const auto& [dr, dc] : disc) {
        const auto nr = r + dr;
        const auto nc = c + dc;
        if (nr >= 0 && nc >= 0 && nr < rows && nc < cols) {
          out(static_cast<std::size_t>(nr), static_cast<std::size_t>(nc)) = 1;
        }
      }
    }
  }
  return out;
}

std::vector<Component> connected_components(const BinaryMask& mask, Connectivity connectivity,
                                            std::size_t border_margin) {
  std::vector<Component> out;
  BinaryMask seen(mask.rows, mask.cols, 0);
  auto on_border = [&](std::size_t r, std::size_t c) {
    return r < border_margin + 1 || c < border_margin + 1 || r + border_margin + 1 > mask.rows ||
           c + border_margin + 1 > mask.cols;
  };
  for (std::size_t r0 = 0; r0 < mask.rows; ++r0) {
    for (std::size_t c0 = 0; c0 < mask.cols; ++c0) {
      if (!mask(r0, c0) || seen(r0, c0)) continue;
      Component comp;
      std::deque<PixelIndex> queue{{r0, c0}};
      seen(r0, c0) = 1;
      while (!queue.empty()) {
        const auto p = queue.front();
        queue.pop_front();
        comp.pixels.push_back(p);
        comp.centroid_row += static_cast<double>(p.row);
        comp.centroid_col += static_cast<double>(p.col);
        comp.touches_border = comp.touches_border || on_border(p.row, p.col);
        for_neighbours(p.row, p.col, mask.rows, mask.cols, connectivity,
                       [&](std::size_t r, std::size_t c) {
                         if (mask(r, c) && !seen(r, c)) {
                           seen(r, c) = 1;
                           queue.push_back({r, c});
                         }
                       });
      }
      comp.area = comp.pixels.size();
      comp.centroid_row /= static_cast<double>(comp.area);
      comp.centroid_col /= static_cast<double>(comp.area);
      out.push_back(std::move(comp));
    }
  }
  return out;
}

namespace {

// Component pixel nearest to the centroid; the centroid itself when it lies
// inside the component.
PixelIndex seed_for(const Component& comp) {
  PixelIndex best = comp.pixels.front();
  double best_d = std::numeric_limits<double>::infinity();
  for (const auto& p : comp.pixels) {
    const double dy = static_cast<double>(p.row) - comp.centroid_row;
    const double dx = static_cast<double>(p.col) - comp.centroid_col;
    const double d = dy * dy + dx * dx;
    if (d < best_d) {
      best_d = d;
      best = p;
    }
  }
  return best;
}

}  // namespace

BinaryMask extract_lung_mask(const HuImage& slice, const MaskParams& params) {
  params.validate();
  if (slice.empty()) throw DataError("extract_lung_mask: empty slice");
  BinaryMask dark(slice.rows, slice.cols, 0);
  for (std::size_t i = 0; i < slice.size(); ++i) {
    dark.data[i] = slice.data[i] < params.dark_threshold ? 1 : 0;
  }
  auto comps = connected_components(dark, params.connectivity, params.border_margin);
  std::erase_if(comps, [](const Component& c) { return c.touches_border; });
  if (comps.empty()) throw DataError("no lung region");
  // Largest first; ties broken by scan order for determinism.
  std::stable_sort(comps.begin(), comps.end(),
                   [](const Component& a, const Component& b) { return a.area > b.area; });

  BinaryMask grown(slice.rows, slice.cols, 0);
  for (std::size_t k = 0; k < std::min<std::size_t>(2, comps.size()); ++k) {
    const auto region = region_grow(slice, seed_for(comps[k]), params.tau, params.connectivity);
    for (std::size_t i = 0; i < grown.size(); ++i) grown.data[i] |= region.data[i];
  }
  return dilate_circular(grown, params.dilation_radius);
}

BinaryMask extract_lung_mask(const HuImage& slice, const MaskParams& params, PixelIndex seed) {
  params.validate();
  auto grown = region_grow(slice, seed, params.tau, params.connectivity);
  if (count_set(grown) == 0) throw DataError("no lung region");
  return dilate_circular(grown, params.dilation_radius);
}

std::size_t count_set(const BinaryMask& mask) {
  return static_cast<std::size_t>(std::count_if(mask.data.begin(), mask.data.end(),
                                                [](std::uint8_t v) { return v != 0; }));
}

Grid<std::uint8_t> mask_to_pgm8(const BinaryMask& mask) {
  Grid<std::uint8_t> out(mask.rows, mask.cols, 0);
  for (std::size_t i = 0; i < mask.size(); ++i) out.data[i] = mask.data[i] ? 255 : 0;
  return out;
}

BinaryMask mask_from_pgm8(const Grid<std::uint8_t>& pgm) {
  BinaryMask out(pgm.rows, pgm.cols, 0);
  for (std::size_t i = 0; i < pgm.size(); ++i) out.data[i] = pgm.data[i] >= 128 ? 1 : 0;
  return out;
}

}  // namespace ipf
