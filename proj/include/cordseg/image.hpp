#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <type_traits>
#include <vector>

#include "cordseg/error.hpp"
#include "cordseg/tensor.hpp"

namespace cordseg {

enum Tissue : std::uint8_t { background = 0, gray_matter = 1, white_matter = 2 };
inline constexpr std::size_t kNumTissues = 3;

inline const char* tissue_name(std::size_t label) {
  switch (label) {
    case background: return "BG";
    case gray_matter: return "GM";
    case white_matter: return "WM";
  }
  return "?";
}

struct Spacing {
  double row = 1.0;
  double col = 1.0;
  bool operator==(const Spacing&) const = default;
};

/// Where a slice comes from: subject, scan session (1-based) and slice position (1-based).
struct SliceId {
  int subject = 0;
  int scan = 1;
  int slice = 1;
  bool operator==(const SliceId&) const = default;
  auto operator<=>(const SliceId&) const = default;
};

/// Row-major raster with interleaved channels.
template <class T>
struct Image {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t channels = 1;
  std::vector<T> values;
  Spacing spacing;
  SliceId id;

  Image() = default;
  Image(std::size_t rows_, std::size_t cols_, std::size_t channels_ = 1, T fill = T{})
      : rows(rows_), cols(cols_), channels(channels_), values(rows_ * cols_ * channels_, fill) {}

  std::size_t pixels() const { return rows * cols; }
  T& at(std::size_t r, std::size_t c, std::size_t ch = 0) { return values[(r * cols + c) * channels + ch]; }
  const T& at(std::size_t r, std::size_t c, std::size_t ch = 0) const { return values[(r * cols + c) * channels + ch]; }

  template <class U>
  bool same_extent(const Image<U>& other) const {
    return rows == other.rows && cols == other.cols;
  }

  /// Copy with the same geometry and metadata but a different pixel type or channel count.
  template <class U>
  Image<U> like(std::size_t channels_ = 1, U fill = U{}) const {
    Image<U> out(rows, cols, channels_, fill);
    out.spacing = spacing;
    out.id = id;
    return out;
  }

  void validate() const {
    require(values.size() == rows * cols * channels, ErrorCode::shape_mismatch, "pixel buffer does not match extent");
    require(spacing.row > 0.0 && spacing.col > 0.0, ErrorCode::invalid_argument, "pixel spacing must be positive");
    if constexpr (std::is_floating_point_v<T>)
      for (T v : values) require(std::isfinite(v), ErrorCode::not_finite, "non-finite pixel value");
  }
};

using MultiChannelSlice = Image<float>;
using LabelMap = Image<std::uint8_t>;
using ProbabilityMap = Image<double>;

template <class T>
Tensor to_tensor(const Image<T>& image) {
  std::vector<double> data(image.values.begin(), image.values.end());
  return Tensor({image.rows, image.cols, image.channels}, std::move(data));
}

/// Pixels of one channel.
template <class T>
Image<T> channel(const Image<T>& image, std::size_t ch) {
  require(ch < image.channels, ErrorCode::invalid_argument, "channel index out of range");
  Image<T> out = image.template like<T>(1);
  for (std::size_t i = 0; i < image.pixels(); ++i) out.values[i] = image.values[i * image.channels + ch];
  return out;
}

/// 0/1 mask of pixels carrying `label`.
inline Image<std::uint8_t> binary_mask(const LabelMap& labels, std::uint8_t label) {
  Image<std::uint8_t> out = labels.like<std::uint8_t>(1);
  for (std::size_t i = 0; i < labels.pixels(); ++i) out.values[i] = labels.values[i] == label ? 1 : 0;
  return out;
}

}  // namespace cordseg
