#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <utility>

#include "ipf/raster.hpp"

namespace ipf {

// 0/1 raster, same shape as its source slice.
using BinaryMask = Grid<std::uint8_t>;

enum class Connectivity { four = 4, eight = 8 };

struct PixelIndex {
  std::size_t row = 0;
  std::size_t col = 0;
};

struct MaskParams {
  double tau = 250.0;  // HU
  Connectivity connectivity = Connectivity::eight;
  double dilation_radius = 2.0;  // pixels
  std::size_t border_margin = 1;
  double dark_threshold = -500.0;  // HU

  // Defaults with the dilation radius scaled from 2 px at 64 px width.
  static MaskParams for_width(std::size_t width);
  void validate() const;
};

// Flood fill from `seed` accepting pixels with |I(p) - mu| <= tau, where mu
// is the mean of the in-bounds 3x3 neighbourhood of the seed.
BinaryMask region_grow(const HuImage& slice, PixelIndex seed, double tau,
                       Connectivity connectivity);

// p is set iff some set q lies within Euclidean distance `radius` of p.
BinaryMask dilate_circular(const BinaryMask& mask, double radius);

// Labelled connected components of the set pixels of `mask`.
struct Component {
  std::size_t area = 0;
  double centroid_row = 0.0;
  double centroid_col = 0.0;
  bool touches_border = false;
  std::vector<PixelIndex> pixels;
};
std::vector<Component> connected_components(const BinaryMask& mask, Connectivity connectivity,
                                            std::size_t border_margin);

// Threshold, discard border-touching components, region-grow from the two
// largest remaining components, union, dilate. Throws DataError
// ("no lung region") when no candidate component exists.
BinaryMask extract_lung_mask(const HuImage& slice, const MaskParams& params);

// Manual-seed variant: region_grow from `seed`, then dilate.
BinaryMask extract_lung_mask(const HuImage& slice, const MaskParams& params, PixelIndex seed);

std::size_t count_set(const BinaryMask& mask);

Grid<std::uint8_t> mask_to_pgm8(const BinaryMask& mask);
BinaryMask mask_from_pgm8(const Grid<std::uint8_t>& pgm);

}  // namespace ipf
