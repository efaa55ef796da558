#include "ipf/preprocess.hpp"

#include <algorithm>
#include <cmath>

#include "ipf/error.hpp"

namespace ipf {

Grid<float> resize_area(const Grid<float>& src, std::size_t size) {
  if (src.empty() || size == 0) throw ShapeError("resize_area: empty input or target");
  if (src.rows == size && src.cols == size) return src;
  Grid<float> out(size, size);
  const double sy = static_cast<double>(src.rows) / static_cast<double>(size);
  const double sx = static_cast<double>(src.cols) / static_cast<double>(size);
  for (std::size_t r = 0; r < size; ++r) {
    const double y0 = r * sy;
    const double y1 = (r + 1) * sy;
    for (std::size_t c = 0; c < size; ++c) {
      const double x0 = c * sx;
      const double x1 = (c + 1) * sx;
      double acc = 0.0;
      double area = 0.0;
      for (auto yi = static_cast<std::size_t>(std::floor(y0));
           yi < std::min<std::size_t>(src.rows, static_cast<std::size_t>(std::ceil(y1))); ++yi) {
        const double wy = std::min<double>(y1, yi + 1.0) - std::max<double>(y0, yi);
        if (wy <= 0.0) continue;
        for (auto xi = static_cast<std::size_t>(std::floor(x0));
             xi < std::min<std::size_t>(src.cols, static_cast<std::size_t>(std::ceil(x1))); ++xi) {
          const double wx = std::min<double>(x1, xi + 1.0) - std::max<double>(x0, xi);
          if (wx <= 0.0) continue;
          acc += wy * wx * src(yi, xi);
          area += wy * wx;
        }
      }
      out(r, c) = static_cast<float>(acc / area);
    }
  }
  return out;
}

Grid<float> window_and_resize(const HuImage& slice, std::size_t size) {
  Grid<float> windowed(slice.rows, slice.cols);
  for (std::size_t i = 0; i < slice.size(); ++i) {
    const double v = (slice.data[i] - kWindowLowHu) / (kWindowHighHu - kWindowLowHu);
    windowed.data[i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
  }
  return resize_area(windowed, size);
}

Grid<float> resize_mask(const BinaryMask& mask, std::size_t size) {
  Grid<float> f(mask.rows, mask.cols);
  for (std::size_t i = 0; i < mask.size(); ++i) f.data[i] = mask.data[i] ? 1.0f : 0.0f;
  return resize_area(f, size);
}

template <typename T>
nn::Tensor<T> grid_tensor(const Grid<float>& grid) {
  nn::Tensor<T> out({1, grid.rows, grid.cols});
  for (std::size_t i = 0; i < grid.size(); ++i) out.data[i] = static_cast<T>(grid.data[i]);
  return out;
}

template <typename T>
nn::Tensor<T> image_tensor(const HuImage& slice, std::size_t size) {
  return grid_tensor<T>(window_and_resize(slice, size));
}

template <typename T>
nn::Tensor<T> mask_tensor(const BinaryMask& mask, std::size_t size) {
  return grid_tensor<T>(resize_mask(mask, size));
}

template <typename T>
nn::Tensor<T> clinical_tensor(const ClinicalVector& v) {
  nn::Tensor<T> out({1, kClinicalFeatures});
  for (std::size_t i = 0; i < kClinicalFeatures; ++i) out.data[i] = static_cast<T>(v.values[i]);
  return out;
}

BinaryMask all_ones_mask(std::size_t rows, std::size_t cols) { return BinaryMask(rows, cols, 1); }

template nn::Tensor<float> grid_tensor<float>(const Grid<float>&);
template nn::Tensor<double> grid_tensor<double>(const Grid<float>&);
template nn::Tensor<float> image_tensor<float>(const HuImage&, std::size_t);
template nn::Tensor<double> image_tensor<double>(const HuImage&, std::size_t);
template nn::Tensor<float> mask_tensor<float>(const BinaryMask&, std::size_t);
template nn::Tensor<double> mask_tensor<double>(const BinaryMask&, std::size_t);
template nn::Tensor<float> clinical_tensor<float>(const ClinicalVector&);
template nn::Tensor<double> clinical_tensor<double>(const ClinicalVector&);

}  // namespace ipf
