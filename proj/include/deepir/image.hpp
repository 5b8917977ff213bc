#pragma once

#include <filesystem>

#include "deepir/tensor.hpp"

namespace deepir {

// 3 x H x W image with values in [0, 1].
class Image {
 public:
  Image() = default;
  Image(std::size_t height, std::size_t width, double fill = 0.0);
  // Takes a 3 x H x W tensor; throws DimensionError on other shapes.
  explicit Image(Tensor pixels);

  std::size_t height() const noexcept { return pixels_.empty() ? 0 : pixels_.dim(1); }
  std::size_t width() const noexcept { return pixels_.empty() ? 0 : pixels_.dim(2); }
  static constexpr std::size_t channels() noexcept { return 3; }

  double& at(std::size_t c, std::size_t y, std::size_t x) { return pixels_.at(c, y, x); }
  double at(std::size_t c, std::size_t y, std::size_t x) const { return pixels_.at(c, y, x); }

  const Tensor& tensor() const noexcept { return pixels_; }
  Tensor& tensor() noexcept { return pixels_; }

  friend bool operator==(const Image&, const Image&) = default;

 private:
  Tensor pixels_;
};

// Binary PPM (P6, maxval 255). Reading rescales to [0,1].
Image read_ppm(const std::filesystem::path& path);
std::string encode_ppm(const Image& image);
void write_ppm(const std::filesystem::path& path, const Image& image);

// Internal lossless raw format: "IRTN", version u32, H u64, W u64, 3*H*W f64.
Image read_raw_image(const std::filesystem::path& path);
void write_raw_image(const std::filesystem::path& path, const Image& image);

// Dispatches on extension: .ppm or .irt.
Image load_image(const std::filesystem::path& path);

// Bilinear resampling with half-pixel centers.
Image resize_bilinear(const Image& image, std::size_t height, std::size_t width);
// Scales so that max(H, W) == side, aspect ratio preserved (rounded).
Image resize_larger_side(const Image& image, std::size_t side);

// Pixel rectangle [x0, x1) x [y0, y1), clamped to the image.
Image crop(const Image& image, std::size_t x0, std::size_t y0, std::size_t x1, std::size_t y1);

// Counter-clockwise rotation by quarter_turns * 90 degrees.
Image rotate_quarter_turns(const Image& image, int quarter_turns);

}  // namespace deepir
