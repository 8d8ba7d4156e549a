#pragma once

#include <array>
#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "gsocc/error.hpp"
#include "gsocc/grid.hpp"

namespace gsocc {

using Rgb = std::array<std::uint8_t, 3>;

/// Fixed class palette; class 0 (empty) is the background. Classes beyond
/// the table reuse it cyclically, skipping the background entry.
inline Rgb class_color(Label l) {
  static constexpr Rgb kPalette[] = {
      {0, 0, 0},       {128, 64, 128}, {0, 0, 230},     {70, 70, 70},   {153, 153, 153}, {107, 142, 35},
      {220, 20, 60},   {255, 158, 0},  {255, 99, 71},   {233, 150, 70}, {47, 79, 79},    {112, 128, 144},
      {0, 207, 191},   {175, 0, 75},   {75, 0, 75},     {222, 184, 135}, {0, 175, 0},    {255, 61, 99},
      {255, 140, 0},
  };
  constexpr std::size_t n = sizeof(kPalette) / sizeof(kPalette[0]);
  if (l < n) return kPalette[l];
  return kPalette[1 + (l - 1) % (n - 1)];
}

struct SliceImage {
  std::int64_t width = 0;
  std::int64_t height = 0;
  std::vector<std::uint8_t> rgb;
};

/// Slice perpendicular to `axis` (0 = x, 1 = y, 2 = z) at `index`. The image
/// spans the two remaining axes in increasing order: the lower axis runs
/// left to right, the higher axis bottom to top.
inline SliceImage slice_image(const VoxelGrid& grid, int axis, std::int64_t index) {
  const auto& res = grid.spec().resolution;
  if (axis < 0 || axis > 2) throw InvalidParameter("slice: axis must be 0, 1 or 2");
  if (index < 0 || index >= res[axis]) throw OutOfRange("slice: index outside the grid");
  const int a = axis == 0 ? 1 : 0;
  const int b = axis == 2 ? 1 : 2;
  SliceImage img;
  img.width = res[a];
  img.height = res[b];
  img.rgb.resize(static_cast<std::size_t>(img.width * img.height * 3));
  for (std::int64_t row = 0; row < img.height; ++row) {
    for (std::int64_t col = 0; col < img.width; ++col) {
      Index3 i{};
      i[axis] = index;
      i[a] = col;
      i[b] = img.height - 1 - row;
      const Rgb c = class_color(grid.at(i));
      const auto o = static_cast<std::size_t>((row * img.width + col) * 3);
      img.rgb[o] = c[0];
      img.rgb[o + 1] = c[1];
      img.rgb[o + 2] = c[2];
    }
  }
  return img;
}

/// Binary PPM (P6).
inline void write_ppm(std::ostream& os, const SliceImage& img) {
  os << "P6\n" << img.width << ' ' << img.height << "\n255\n";
  os.write(reinterpret_cast<const char*>(img.rgb.data()), static_cast<std::streamsize>(img.rgb.size()));
}

}  // namespace gsocc
