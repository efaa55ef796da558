#pragma once

#include <cstddef>

#include "ipf/dataset.hpp"
#include "ipf/lung_mask.hpp"
#include "ipf/model.hpp"
#include "ipf/raster.hpp"

namespace ipf {

inline constexpr double kWindowLowHu = -1000.0;
inline constexpr double kWindowHighHu = 400.0;

// Area-averaging resample of a float grid to size x size.
Grid<float> resize_area(const Grid<float>& src, std::size_t size);

// HU window [-1000, 400] -> [0, 1], then resize.
Grid<float> window_and_resize(const HuImage& slice, std::size_t size);
// Area-averaged (soft) mask in [0, 1].
Grid<float> resize_mask(const BinaryMask& mask, std::size_t size);

template <typename T>
nn::Tensor<T> grid_tensor(const Grid<float>& grid);

// window_and_resize as a [1, size, size] tensor.
template <typename T>
nn::Tensor<T> image_tensor(const HuImage& slice, std::size_t size);

// Area-averaged (soft) mask, [1, size, size].
template <typename T>
nn::Tensor<T> mask_tensor(const BinaryMask& mask, std::size_t size);

template <typename T>
nn::Tensor<T> clinical_tensor(const ClinicalVector& v);

BinaryMask all_ones_mask(std::size_t rows, std::size_t cols);

}  // namespace ipf
