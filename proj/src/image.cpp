#include "deepir/image.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "deepir/binary_io.hpp"

namespace deepir {

Image::Image(std::size_t height, std::size_t width, double fill)
    : pixels_({3, height, width}, fill) {}

Image::Image(Tensor pixels) : pixels_(std::move(pixels)) {
  if (pixels_.rank() != 3 || pixels_.dim(0) != 3) {
    throw DimensionError("image tensor must be 3 x H x W, got " +
                         shape_to_string(pixels_.shape()));
  }
}

namespace {

void skip_ppm_space(const std::string& s, std::size_t& pos) {
  while (pos < s.size()) {
    if (s[pos] == '#') {
      while (pos < s.size() && s[pos] != '\n') ++pos;
    } else if (std::isspace(static_cast<unsigned char>(s[pos]))) {
      ++pos;
    } else {
      break;
    }
  }
}

std::size_t read_ppm_int(const std::string& s, std::size_t& pos, const std::string& src) {
  skip_ppm_space(s, pos);
  std::size_t start = pos;
  while (pos < s.size() && std::isdigit(static_cast<unsigned char>(s[pos]))) ++pos;
  if (start == pos) throw FormatError(src + ": malformed PPM header");
  return std::stoul(s.substr(start, pos - start));
}

}  // namespace

Image read_ppm(const std::filesystem::path& path) {
  const std::string data = read_file(path);
  const std::string src = path.string();
  if (data.size() < 2 || data[0] != 'P' || data[1] != '6') {
    throw FormatError(src + ": not a binary PPM (P6)");
  }
  std::size_t pos = 2;
  const std::size_t w = read_ppm_int(data, pos, src);
  const std::size_t h = read_ppm_int(data, pos, src);
  const std::size_t maxval = read_ppm_int(data, pos, src);
  if (maxval == 0 || maxval > 255) throw FormatError(src + ": only 8-bit PPM is supported");
  ++pos;  // single whitespace after maxval
  if (data.size() < pos + 3 * w * h) throw FormatError(src + ": truncated PPM data");
  Image img(h, w);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      for (std::size_t c = 0; c < 3; ++c) {
        const auto byte = static_cast<unsigned char>(data[pos + (y * w + x) * 3 + c]);
        img.at(c, y, x) = static_cast<double>(byte) / static_cast<double>(maxval);
      }
    }
  }
  return img;
}

std::string encode_ppm(const Image& image) {
  std::ostringstream head;
  head << "P6\n" << image.width() << ' ' << image.height() << "\n255\n";
  std::string out = head.str();
  out.reserve(out.size() + 3 * image.width() * image.height());
  for (std::size_t y = 0; y < image.height(); ++y) {
    for (std::size_t x = 0; x < image.width(); ++x) {
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = std::clamp(image.at(c, y, x), 0.0, 1.0);
        out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0))));
      }
    }
  }
  return out;
}

void write_ppm(const std::filesystem::path& path, const Image& image) {
  write_file_atomic(path, encode_ppm(image));
}

Image read_raw_image(const std::filesystem::path& path) {
  BinaryReader r(read_file(path), path.string());
  r.expect_magic("IRTN");
  r.expect_version(1);
  const auto h = static_cast<std::size_t>(r.u64());
  const auto w = static_cast<std::size_t>(r.u64());
  Image img(h, w);
  for (double& v : img.tensor().values()) v = r.f64();
  r.expect_end();
  return img;
}

void write_raw_image(const std::filesystem::path& path, const Image& image) {
  BinaryWriter w;
  w.magic("IRTN");
  w.u32(1);
  w.u64(image.height());
  w.u64(image.width());
  for (double v : image.tensor().values()) w.f64(v);
  write_file_atomic(path, w.buffer());
}

Image load_image(const std::filesystem::path& path) {
  const auto ext = path.extension().string();
  if (ext == ".ppm") return read_ppm(path);
  if (ext == ".irt") return read_raw_image(path);
  throw FormatError(path.string() + ": unsupported image extension '" + ext + "'");
}

Image resize_bilinear(const Image& image, std::size_t height, std::size_t width) {
  if (height == 0 || width == 0) throw DimensionError("resize: target size must be positive");
  const std::size_t ih = image.height();
  const std::size_t iw = image.width();
  if (ih == height && iw == width) return image;
  Image out(height, width);
  const double sy = static_cast<double>(ih) / static_cast<double>(height);
  const double sx = static_cast<double>(iw) / static_cast<double>(width);
  for (std::size_t y = 0; y < height; ++y) {
    const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0,
                                 static_cast<double>(ih - 1));
    const auto y0 = static_cast<std::size_t>(fy);
    const std::size_t y1 = std::min(y0 + 1, ih - 1);
    const double wy = fy - static_cast<double>(y0);
    for (std::size_t x = 0; x < width; ++x) {
      const double fx = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0,
                                   static_cast<double>(iw - 1));
      const auto x0 = static_cast<std::size_t>(fx);
      const std::size_t x1 = std::min(x0 + 1, iw - 1);
      const double wx = fx - static_cast<double>(x0);
      for (std::size_t c = 0; c < 3; ++c) {
        const double top = image.at(c, y0, x0) * (1 - wx) + image.at(c, y0, x1) * wx;
        const double bot = image.at(c, y1, x0) * (1 - wx) + image.at(c, y1, x1) * wx;
        out.at(c, y, x) = top * (1 - wy) + bot * wy;
      }
    }
  }
  return out;
}

Image resize_larger_side(const Image& image, std::size_t side) {
  const double h = static_cast<double>(image.height());
  const double w = static_cast<double>(image.width());
  const double scale = static_cast<double>(side) / std::max(h, w);
  const auto nh = static_cast<std::size_t>(std::max(1L, std::lround(h * scale)));
  const auto nw = static_cast<std::size_t>(std::max(1L, std::lround(w * scale)));
  return resize_bilinear(image, nh, nw);
}

Image crop(const Image& image, std::size_t x0, std::size_t y0, std::size_t x1, std::size_t y1) {
  x1 = std::min(x1, image.width());
  y1 = std::min(y1, image.height());
  if (x0 >= x1 || y0 >= y1) {
    throw DimensionError("crop: empty rectangle [" + std::to_string(x0) + "," +
                         std::to_string(x1) + ")x[" + std::to_string(y0) + "," +
                         std::to_string(y1) + ")");
  }
  Image out(y1 - y0, x1 - x0);
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t y = y0; y < y1; ++y) {
      for (std::size_t x = x0; x < x1; ++x) out.at(c, y - y0, x - x0) = image.at(c, y, x);
    }
  }
  return out;
}

Image rotate_quarter_turns(const Image& image, int quarter_turns) {
  const int q = ((quarter_turns % 4) + 4) % 4;
  if (q == 0) return image;
  const std::size_t h = image.height();
  const std::size_t w = image.width();
  Image out = (q == 2) ? Image(h, w) : Image(w, h);
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        const double v = image.at(c, y, x);
        switch (q) {
          case 1: out.at(c, w - 1 - x, y) = v; break;          // 90 deg CCW
          case 2: out.at(c, h - 1 - y, w - 1 - x) = v; break;  // 180
          default: out.at(c, x, h - 1 - y) = v; break;         // 270 CCW
        }
      }
    }
  }
  return out;
}

}  // namespace deepir
