#pragma once

// Binary PPM (P6) rendering of flow maps.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "mbf/maps.hpp"

namespace mbf::io {

enum class RenderStyle { Gray, Colour };

struct RenderOptions {
  double lo = 0.0;  // mL/min/mL
  double hi = 4.0;
  RenderStyle style = RenderStyle::Colour;
  int scale = 1;  // pixels per voxel
};

struct Rgb {
  std::uint8_t r = 0, g = 0, b = 0;
  friend bool operator==(const Rgb&, const Rgb&) = default;
};

struct Image {
  int width = 0;
  int height = 0;
  std::vector<Rgb> pixels;  // row-major

  Rgb at(int x, int y) const { return pixels[static_cast<std::size_t>(y) * width + x]; }
  std::string ppm() const;
};

// dark blue -> cyan -> green -> yellow -> red
const std::vector<Rgb>& colour_table();

Rgb map_colour(double value, const RenderOptions& opts);
Image render_map(const MbfMap& map, const RenderOptions& opts);
// Two maps of equal height next to each other, separated by a 2-pixel white bar.
Image render_pair(const MbfMap& left, const MbfMap& right, const RenderOptions& opts);

void write_image(const Image& image, const std::filesystem::path& file);

}  // namespace mbf::io
