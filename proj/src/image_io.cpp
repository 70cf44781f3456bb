#include "bsm/image_io.hpp"

#include "bsm/errors.hpp"

#include <png.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>

namespace bsm {

namespace {

// Skips whitespace and '#' comments in a netpbm header.
void skip_header_space(std::istream& in) {
  while (true) {
    const int c = in.peek();
    if (c == '#') {
      std::string line;
      std::getline(in, line);
    } else if (std::isspace(c)) {
      in.get();
    } else {
      return;
    }
  }
}

Index read_header_int(std::istream& in, const std::filesystem::path& path) {
  skip_header_space(in);
  Index v = -1;
  if (!(in >> v) || v < 0) throw FormatError("malformed PGM header in " + path.string());
  return v;
}

}  // namespace

GrayImage read_pgm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  char magic[2] = {0, 0};
  in.read(magic, 2);
  if (magic[0] != 'P' || magic[1] != '5') throw FormatError(path.string() + " is not a binary PGM (P5)");
  GrayImage img;
  img.width = read_header_int(in, path);
  img.height = read_header_int(in, path);
  img.maxval = static_cast<int>(read_header_int(in, path));
  if (img.maxval < 1 || img.maxval > 65535 || img.width == 0 || img.height == 0)
    throw FormatError("unsupported PGM geometry in " + path.string());
  in.get();  // single whitespace before the raster
  const Index n = img.width * img.height;
  img.pixels.resize(n);
  if (img.maxval < 256) {
    std::vector<unsigned char> raw(n);
    in.read(reinterpret_cast<char*>(raw.data()), n);
    if (in.gcount() != n) throw FormatError("truncated PGM raster in " + path.string());
    std::copy(raw.begin(), raw.end(), img.pixels.begin());
  } else {
    std::vector<unsigned char> raw(2 * n);
    in.read(reinterpret_cast<char*>(raw.data()), 2 * n);
    if (in.gcount() != 2 * n) throw FormatError("truncated PGM raster in " + path.string());
    for (Index i = 0; i < n; ++i)
      img.pixels[i] = static_cast<std::uint16_t>((raw[2 * i] << 8) | raw[2 * i + 1]);
  }
  for (auto p : img.pixels)
    if (p > img.maxval) throw FormatError("PGM sample exceeds maxval in " + path.string());
  return img;
}

void write_pgm(const std::filesystem::path& path, const GrayImage& image) {
  if (image.maxval < 1 || image.maxval > 65535 ||
      static_cast<Index>(image.pixels.size()) != image.width * image.height)
    throw FormatError("invalid PGM image for " + path.string());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path.string());
  out << "P5\n" << image.width << ' ' << image.height << '\n' << image.maxval << '\n';
  if (image.maxval < 256) {
    for (auto p : image.pixels) out.put(static_cast<char>(p));
  } else {
    for (auto p : image.pixels) {
      out.put(static_cast<char>(p >> 8));
      out.put(static_cast<char>(p & 0xff));
    }
  }
  if (!out) throw FormatError("failed writing " + path.string());
}

Tensor<double> read_png(const std::filesystem::path& path) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str()))
    throw FormatError("undecodable PNG " + path.string() + ": " + image.message);
  image.format = PNG_FORMAT_RGB;
  std::vector<png_byte> buffer(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, buffer.data(), 0, nullptr)) {
    png_image_free(&image);
    throw FormatError("undecodable PNG " + path.string() + ": " + image.message);
  }
  const Index h = image.height, w = image.width;
  Vector<double> data(3 * h * w);
  for (Index y = 0; y < h; ++y)
    for (Index x = 0; x < w; ++x)
      for (Index c = 0; c < 3; ++c) data[(c * h + y) * w + x] = buffer[(y * w + x) * 3 + c] / 255.0;
  return Tensor<double>(Shape{3, h, w}, std::move(data));
}

void write_png(const std::filesystem::path& path, const Tensor<double>& image) {
  if (image.ndim() != 3 || (image.dim(0) != 1 && image.dim(0) != 3))
    throw InputError("write_png expects [1|3, H, W], got " + shape_string(image.shape()));
  const Index c = image.dim(0), h = image.dim(1), w = image.dim(2);
  std::vector<png_byte> buffer(c * h * w);
  const auto& v = image.values();
  for (Index y = 0; y < h; ++y)
    for (Index x = 0; x < w; ++x)
      for (Index k = 0; k < c; ++k) {
        const double s = std::clamp(v[(k * h + y) * w + x], 0.0, 1.0);
        buffer[(y * w + x) * c + k] = static_cast<png_byte>(std::lround(s * 255.0));
      }
  png_image out{};
  out.version = PNG_IMAGE_VERSION;
  out.width = static_cast<png_uint_32>(w);
  out.height = static_cast<png_uint_32>(h);
  out.format = c == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  if (!png_image_write_to_file(&out, path.c_str(), 0, buffer.data(), 0, nullptr))
    throw FormatError("failed writing PNG " + path.string() + ": " + out.message);
}

Tensor<double> quantize_8bit(const Tensor<double>& image) {
  Vector<double> v = image.values().unaryExpr(
      [](double s) { return static_cast<double>(std::lround(std::clamp(s, 0.0, 1.0) * 255.0)) / 255.0; });
  return Tensor<double>(image.shape(), std::move(v));
}

}  // namespace bsm
