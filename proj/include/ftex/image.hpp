#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace ftex {

// RGB image, values in [0,1], stored planar (channel, row, column).
class Image {
 public:
  Image() = default;
  Image(std::size_t height, std::size_t width, float fill = 0.0f);
  Image(std::size_t height, std::size_t width, std::vector<float> planar);

  std::size_t height() const { return h_; }
  std::size_t width() const { return w_; }
  std::size_t pixels() const { return h_ * w_; }
  bool empty() const { return data_.empty(); }

  float& at(std::size_t c, std::size_t y, std::size_t x) { return data_[(c * h_ + y) * w_ + x]; }
  float at(std::size_t c, std::size_t y, std::size_t x) const { return data_[(c * h_ + y) * w_ + x]; }

  const std::vector<float>& data() const { return data_; }
  std::vector<float>& data() { return data_; }

  bool same_size(const Image& o) const { return h_ == o.h_ && w_ == o.w_; }
  Image crop(std::size_t y0, std::size_t x0, std::size_t h, std::size_t w) const;

  bool operator==(const Image&) const = default;

 private:
  std::size_t h_ = 0;
  std::size_t w_ = 0;
  std::vector<float> data_;
};

// Builds an image from unclamped planar values; values are clamped to [0,1].
Image image_from_planar(std::size_t height, std::size_t width, const std::vector<double>& planar);
std::vector<double> to_planar_double(const Image& img);

// Box-filter resample; each output cell averages the input pixels it covers.
Image resize_area(const Image& img, std::size_t height, std::size_t width);

std::vector<std::uint8_t> encode_png(const Image& img);
Image decode_png(std::span<const std::uint8_t> bytes);
void write_png(const Image& img, const std::filesystem::path& path);
Image read_png(const std::filesystem::path& path);

std::string base64_encode(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> base64_decode(std::string_view text);

}  // namespace ftex
