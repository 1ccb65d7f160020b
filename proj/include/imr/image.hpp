#pragma once

#include <cstdint>
#include <vector>

#include "imr/autodiff.hpp"

namespace imr {

// Row-major real image, channels interleaved.
struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 1;
  std::vector<double> data;

  Image() = default;
  Image(std::size_t h, std::size_t w, std::size_t c, double fill = 0.0) : height(h), width(w), channels(c), data(h * w * c, fill) {}

  double& at(std::size_t row, std::size_t col, std::size_t ch = 0) { return data[(row * width + col) * channels + ch]; }
  double at(std::size_t row, std::size_t col, std::size_t ch = 0) const { return data[(row * width + col) * channels + ch]; }
  bool empty() const { return data.empty(); }

  ad::Tensor tensor() const {
    if (channels == 1) return ad::Tensor({height, width}, data);
    return ad::Tensor({height, width, channels}, data);
  }
  static Image from_tensor(const ad::Tensor& t) {
    Image im;
    im.height = t.size(0);
    im.width = t.size(1);
    im.channels = t.rank() == 3 ? t.size(2) : 1;
    im.data.assign(t.data().begin(), t.data().end());
    return im;
  }
};

// Binary image, 1 = foreground.
struct Mask {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> data;

  Mask() = default;
  Mask(std::size_t h, std::size_t w, std::uint8_t fill = 0) : height(h), width(w), data(h * w, fill) {}

  std::uint8_t& at(std::size_t row, std::size_t col) { return data[row * width + col]; }
  std::uint8_t at(std::size_t row, std::size_t col) const { return data[row * width + col]; }

  std::size_t count() const {
    std::size_t n = 0;
    for (auto v : data) n += v != 0;
    return n;
  }

  ad::Tensor tensor() const {
    std::vector<double> v(data.begin(), data.end());
    return ad::Tensor({height, width}, std::move(v));
  }

  // Pixels with value above `threshold`.
  static Mask from_tensor(const ad::Tensor& t, double threshold = 0.5) {
    Mask m(t.size(0), t.size(1));
    for (std::size_t i = 0; i < m.data.size(); ++i) m.data[i] = t[i] > threshold;
    return m;
  }

  bool operator==(const Mask&) const = default;
};

}  // namespace imr
