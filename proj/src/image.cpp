#include "ftex/image.hpp"

#include <png.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <csetjmp>
#include <cstring>
#include <fstream>
#include <iterator>

#include "ftex/error.hpp"

namespace ftex {

Image::Image(std::size_t height, std::size_t width, float fill)
    : h_(height), w_(width), data_(3 * height * width, fill) {
  if (height == 0 || width == 0) throw ShapeError("image dimensions must be positive");
}

Image::Image(std::size_t height, std::size_t width, std::vector<float> planar)
    : h_(height), w_(width), data_(std::move(planar)) {
  if (height == 0 || width == 0) throw ShapeError("image dimensions must be positive");
  if (data_.size() != 3 * h_ * w_) throw ShapeError("image payload does not match dimensions");
  for (float v : data_)
    if (!(v >= 0.0f && v <= 1.0f)) throw NumericError("image values must lie in [0,1]");
}

Image Image::crop(std::size_t y0, std::size_t x0, std::size_t h, std::size_t w) const {
  if (y0 + h > h_ || x0 + w > w_) throw ShapeError("crop window exceeds image bounds");
  Image out(h, w);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) out.at(c, y, x) = at(c, y0 + y, x0 + x);
  return out;
}

Image image_from_planar(std::size_t height, std::size_t width, const std::vector<double>& planar) {
  if (planar.size() != 3 * height * width) throw ShapeError("planar buffer does not match image dimensions");
  std::vector<float> v(planar.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!std::isfinite(planar[i])) throw NumericError("non-finite pixel value");
    v[i] = static_cast<float>(std::clamp(planar[i], 0.0, 1.0));
  }
  return Image(height, width, std::move(v));
}

std::vector<double> to_planar_double(const Image& img) { return {img.data().begin(), img.data().end()}; }

Image resize_area(const Image& img, std::size_t height, std::size_t width) {
  if (img.height() == height && img.width() == width) return img;
  Image out(height, width);
  for (std::size_t y = 0; y < height; ++y) {
    std::size_t y0 = y * img.height() / height;
    std::size_t y1 = std::max(y0 + 1, (y + 1) * img.height() / height);
    for (std::size_t x = 0; x < width; ++x) {
      std::size_t x0 = x * img.width() / width;
      std::size_t x1 = std::max(x0 + 1, (x + 1) * img.width() / width);
      const double n = static_cast<double>((y1 - y0) * (x1 - x0));
      for (std::size_t c = 0; c < 3; ++c) {
        double acc = 0.0;
        for (std::size_t yy = y0; yy < y1; ++yy)
          for (std::size_t xx = x0; xx < x1; ++xx) acc += img.at(c, yy, xx);
        out.at(c, y, x) = static_cast<float>(acc / n);
      }
    }
  }
  return out;
}

namespace {

struct ReadCursor {
  std::span<const std::uint8_t> bytes;
  std::size_t pos = 0;
};

void png_read_cb(png_structp png, png_bytep dst, png_size_t n) {
  auto* cur = static_cast<ReadCursor*>(png_get_io_ptr(png));
  if (cur->pos + n > cur->bytes.size()) png_error(png, "truncated PNG stream");
  std::memcpy(dst, cur->bytes.data() + cur->pos, n);
  cur->pos += n;
}

void png_write_cb(png_structp png, png_bytep src, png_size_t n) {
  auto* out = static_cast<std::vector<std::uint8_t>*>(png_get_io_ptr(png));
  out->insert(out->end(), src, src + n);
}

void png_flush_cb(png_structp) {}

void png_error_cb(png_structp png, png_const_charp msg) {
  auto* err = static_cast<std::string*>(png_get_error_ptr(png));
  if (err) *err = msg;
  std::longjmp(png_jmpbuf(png), 1);
}

void png_warn_cb(png_structp, png_const_charp) {}

}  // namespace

std::vector<std::uint8_t> encode_png(const Image& img) {
  if (img.empty()) throw ShapeError("cannot encode an empty image");
  std::string err;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &err, png_error_cb, png_warn_cb);
  if (!png) throw Error("png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  std::vector<std::uint8_t> out;
  std::vector<png_byte> rowbuf(img.width() * 3);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw FormatError("PNG encode failed: " + err);
  }
  png_set_write_fn(png, &out, png_write_cb, png_flush_cb);
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width()), static_cast<png_uint_32>(img.height()), 8,
               PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (std::size_t y = 0; y < img.height(); ++y) {
    for (std::size_t x = 0; x < img.width(); ++x)
      for (std::size_t c = 0; c < 3; ++c)
        rowbuf[x * 3 + c] = static_cast<png_byte>(std::lround(std::clamp(img.at(c, y, x), 0.0f, 1.0f) * 255.0f));
    png_write_row(png, rowbuf.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  return out;
}

Image decode_png(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 8 || png_sig_cmp(bytes.data(), 0, 8) != 0) throw FormatError("not a PNG image");
  std::string err;
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &err, png_error_cb, png_warn_cb);
  if (!png) throw Error("png_create_read_struct failed");
  png_infop info = png_create_info_struct(png);
  ReadCursor cur{bytes, 0};
  std::vector<png_byte> pixels;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw FormatError("PNG decode failed: " + err);
  }
  png_set_read_fn(png, &cur, png_read_cb);
  png_read_info(png, info);
  const png_uint_32 w = png_get_image_width(png, info);
  const png_uint_32 h = png_get_image_height(png, info);
  const int color = png_get_color_type(png, info);
  if (png_get_bit_depth(png, info) == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) {
    png_set_expand_gray_1_2_4_to_8(png);
    png_set_gray_to_rgb(png);
  }
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  if (color & PNG_COLOR_MASK_ALPHA || png_get_valid(png, info, PNG_INFO_tRNS)) png_set_strip_alpha(png);
  png_read_update_info(png, info);
  const std::size_t stride = png_get_rowbytes(png, info);
  if (stride != static_cast<std::size_t>(w) * 3) png_error(png, "unsupported PNG pixel layout");
  pixels.resize(stride * h);
  rows.resize(h);
  for (png_uint_32 y = 0; y < h; ++y) rows[y] = pixels.data() + y * stride;
  png_read_image(png, rows.data());
  png_destroy_read_struct(&png, &info, nullptr);

  Image img(h, w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c) img.at(c, y, x) = pixels[y * stride + x * 3 + c] / 255.0f;
  return img;
}

void write_png(const Image& img, const std::filesystem::path& path) {
  const auto bytes = encode_png(img);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

Image read_png(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read image '" + path.string() + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return decode_png(bytes);
  } catch (const FormatError& e) {
    throw FormatError("'" + path.string() + "': " + e.what());
  }
}

namespace {
constexpr char kB64[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
}

std::string base64_encode(std::span<const std::uint8_t> bytes) {
  std::string out;
  out.reserve((bytes.size() + 2) / 3 * 4);
  std::size_t i = 0;
  for (; i + 2 < bytes.size(); i += 3) {
    const std::uint32_t v = (bytes[i] << 16) | (bytes[i + 1] << 8) | bytes[i + 2];
    out += kB64[(v >> 18) & 63];
    out += kB64[(v >> 12) & 63];
    out += kB64[(v >> 6) & 63];
    out += kB64[v & 63];
  }
  if (i + 1 == bytes.size()) {
    const std::uint32_t v = bytes[i] << 16;
    out += kB64[(v >> 18) & 63];
    out += kB64[(v >> 12) & 63];
    out += "==";
  } else if (i + 2 == bytes.size()) {
    const std::uint32_t v = (bytes[i] << 16) | (bytes[i + 1] << 8);
    out += kB64[(v >> 18) & 63];
    out += kB64[(v >> 12) & 63];
    out += kB64[(v >> 6) & 63];
    out += '=';
  }
  return out;
}

std::vector<std::uint8_t> base64_decode(std::string_view text) {
  std::array<int, 256> lut;
  lut.fill(-1);
  for (int i = 0; i < 64; ++i) lut[static_cast<unsigned char>(kB64[i])] = i;
  std::vector<std::uint8_t> out;
  std::uint32_t acc = 0;
  int bits = 0;
  std::size_t pad = 0;
  for (char ch : text) {
    if (ch == '=') {
      ++pad;
      continue;
    }
    if (ch == '\n' || ch == '\r' || ch == ' ') continue;
    const int v = lut[static_cast<unsigned char>(ch)];
    if (v < 0 || pad > 0) throw FormatError("invalid base64 payload");
    acc = (acc << 6) | static_cast<std::uint32_t>(v);
    bits += 6;
    if (bits >= 8) {
      bits -= 8;
      out.push_back(static_cast<std::uint8_t>((acc >> bits) & 0xff));
    }
  }
  if (pad > 2) throw FormatError("invalid base64 padding");
  return out;
}

}  // namespace ftex
