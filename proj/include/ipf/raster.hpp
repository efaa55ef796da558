#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace ipf {

// Row-major 2D grid.
template <typename T>
struct Grid {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<T> data;

  Grid() = default;
  Grid(std::size_t r, std::size_t c, T fill = T{}) : rows(r), cols(c), data(r * c, fill) {}

  T& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

  std::size_t size() const noexcept { return data.size(); }
  bool empty() const noexcept { return data.empty(); }
  template <typename U>
  bool same_shape(const Grid<U>& other) const noexcept {
    return rows == other.rows && cols == other.cols;
  }
  bool operator==(const Grid&) const = default;
};

// Stored CT sample value: HU + 1024, clamped to the 16-bit range.
using RawSlice = Grid<std::uint16_t>;
using HuImage = Grid<float>;

inline constexpr int kHuOffset = 1024;

HuImage to_hu(const RawSlice& raw);
RawSlice from_hu(const HuImage& hu);

// Binary PGM (P5). 16-bit samples are big-endian. `comment` lines are
// written into the header as `# ...`.
RawSlice read_pgm16(const std::filesystem::path& path);
void write_pgm16(const std::filesystem::path& path, const RawSlice& img,
                 const std::string& comment = {});

Grid<std::uint8_t> read_pgm8(const std::filesystem::path& path);
void write_pgm8(const std::filesystem::path& path, const Grid<std::uint8_t>& img,
                const std::string& comment = {});

}  // namespace ipf
