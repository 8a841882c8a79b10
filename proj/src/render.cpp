#include "mbf/render.hpp"

#include <algorithm>
#include <array>
#include <cmath>

#include "mbf/error.hpp"
#include "mbf/io.hpp"

namespace mbf::io {

namespace {

constexpr std::array<std::array<double, 3>, 5> kAnchors{{
    {0, 0, 128},    // dark blue
    {0, 255, 255},  // cyan
    {0, 200, 0},    // green
    {255, 255, 0},  // yellow
    {255, 0, 0},    // red
}};

std::uint8_t round_byte(double v) {
  return static_cast<std::uint8_t>(std::clamp(std::floor(v + 0.5), 0.0, 255.0));
}

void check(const RenderOptions& opts) {
  if (!std::isfinite(opts.lo) || !std::isfinite(opts.hi))
    fail(ErrorKind::InvalidArgument, "render bounds must be finite");
  require(opts.lo < opts.hi, "render bounds need lo < hi");
  require(opts.scale >= 1, "render scale must be >= 1");
}

}  // namespace

const std::vector<Rgb>& colour_table() {
  static const std::vector<Rgb> table = [] {
    std::vector<Rgb> t(256);
    const double segments = static_cast<double>(kAnchors.size() - 1);
    for (int i = 0; i < 256; ++i) {
      const double pos = i / 255.0 * segments;
      const auto k = std::min(static_cast<std::size_t>(pos), kAnchors.size() - 2);
      const double f = pos - static_cast<double>(k);
      const auto& a = kAnchors[k];
      const auto& b = kAnchors[k + 1];
      t[static_cast<std::size_t>(i)] = {round_byte(a[0] + f * (b[0] - a[0])),
                                        round_byte(a[1] + f * (b[1] - a[1])),
                                        round_byte(a[2] + f * (b[2] - a[2]))};
    }
    return t;
  }();
  return table;
}

Rgb map_colour(double value, const RenderOptions& opts) {
  if (std::isnan(value)) return {};
  const double u = std::clamp((value - opts.lo) / (opts.hi - opts.lo), 0.0, 1.0);
  const std::uint8_t level = round_byte(u * 255.0);
  if (opts.style == RenderStyle::Gray) return {level, level, level};
  return colour_table()[level];
}

Image render_map(const MbfMap& map, const RenderOptions& opts) {
  check(opts);
  Image img;
  img.width = map.width * opts.scale;
  img.height = map.height * opts.scale;
  img.pixels.resize(static_cast<std::size_t>(img.width) * img.height);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      img.pixels[static_cast<std::size_t>(y) * img.width + x] =
          map_colour(map.at(x / opts.scale, y / opts.scale), opts);
  return img;
}

Image render_pair(const MbfMap& left, const MbfMap& right, const RenderOptions& opts) {
  require(left.height == right.height, "side-by-side maps need equal heights");
  const Image a = render_map(left, opts);
  const Image b = render_map(right, opts);
  constexpr int kDivider = 2;
  Image img;
  img.width = a.width + kDivider + b.width;
  img.height = a.height;
  img.pixels.assign(static_cast<std::size_t>(img.width) * img.height, Rgb{255, 255, 255});
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < a.width; ++x)
      img.pixels[static_cast<std::size_t>(y) * img.width + x] = a.at(x, y);
    for (int x = 0; x < b.width; ++x)
      img.pixels[static_cast<std::size_t>(y) * img.width + a.width + kDivider + x] = b.at(x, y);
  }
  return img;
}

std::string Image::ppm() const {
  std::string out = "P6\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
  out.reserve(out.size() + pixels.size() * 3);
  for (const Rgb& p : pixels) {
    out += static_cast<char>(p.r);
    out += static_cast<char>(p.g);
    out += static_cast<char>(p.b);
  }
  return out;
}

void write_image(const Image& image, const std::filesystem::path& file) {
  write_text(file, image.ppm());
}

}  // namespace mbf::io
