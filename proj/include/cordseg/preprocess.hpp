#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <vector>

#include "cordseg/error.hpp"
#include "cordseg/image.hpp"

namespace cordseg {

inline constexpr int kLanczosLobes = 3;

/// sinc(x) sinc(x / a) on |x| < a.
inline double lanczos_kernel(double x, int a = kLanczosLobes) {
  if (x == 0.0) return 1.0;
  if (std::abs(x) >= a) return 0.0;
  const double px = std::numbers::pi * x;
  return a * std::sin(px) * std::sin(px / a) / (px * px);
}

namespace detail {

// Resamples along one axis. Pixel centers map as src = (dst + 0.5) / factor - 0.5;
// the kernel is widened by 1/factor when shrinking. Taps beyond the border reuse
// the edge pixel and the weights are renormalized.
template <class T>
Image<T> lanczos_axis(const Image<T>& in, double factor, bool along_rows) {
  const std::size_t n_in = along_rows ? in.rows : in.cols;
  const auto n_out = static_cast<std::size_t>(std::llround(static_cast<double>(n_in) * factor));
  require(n_out > 0, ErrorCode::invalid_argument, "resampling factor leaves an empty image");
  const double scale = std::min(1.0, factor);
  const double support = kLanczosLobes / scale;

  struct Taps {
    std::vector<std::size_t> index;
    std::vector<double> weight;
  };
  std::vector<Taps> taps(n_out);
  for (std::size_t j = 0; j < n_out; ++j) {
    const double center = (static_cast<double>(j) + 0.5) / factor - 0.5;
    const auto lo = static_cast<long long>(std::floor(center - support)) + 1;
    const auto hi = static_cast<long long>(std::ceil(center + support)) - 1;
    double total = 0.0;
    for (long long k = lo; k <= hi; ++k) {
      const double w = lanczos_kernel((static_cast<double>(k) - center) * scale);
      if (w == 0.0) continue;
      const long long clamped = std::clamp<long long>(k, 0, static_cast<long long>(n_in) - 1);
      taps[j].index.push_back(static_cast<std::size_t>(clamped));
      taps[j].weight.push_back(w);
      total += w;
    }
    for (double& w : taps[j].weight) w /= total;
  }

  Image<T> out = in.template like<T>(in.channels);
  if (along_rows) {
    out.rows = n_out;
    out.spacing.row = in.spacing.row / factor;
  } else {
    out.cols = n_out;
    out.spacing.col = in.spacing.col / factor;
  }
  out.values.assign(out.rows * out.cols * out.channels, T{});
  for (std::size_t r = 0; r < out.rows; ++r)
    for (std::size_t c = 0; c < out.cols; ++c) {
      const Taps& t = taps[along_rows ? r : c];
      for (std::size_t ch = 0; ch < in.channels; ++ch) {
        double acc = 0.0;
        for (std::size_t k = 0; k < t.index.size(); ++k) {
          const T v = along_rows ? in.at(t.index[k], c, ch) : in.at(r, t.index[k], ch);
          acc += t.weight[k] * static_cast<double>(v);
        }
        out.at(r, c, ch) = static_cast<T>(acc);
      }
    }
  return out;
}

}  // namespace detail

/// Separable Lanczos-3 resampling with independent row and column factors.
template <class T>
Image<T> lanczos_resample(const Image<T>& in, double row_factor, double col_factor) {
  require(row_factor > 0.0 && col_factor > 0.0 && std::isfinite(row_factor) && std::isfinite(col_factor),
          ErrorCode::invalid_argument, "resampling factor must be positive");
  in.validate();
  return detail::lanczos_axis(detail::lanczos_axis(in, row_factor, true), col_factor, false);
}

template <class T>
Image<T> lanczos_resample(const Image<T>& in, double factor) {
  return lanczos_resample(in, factor, factor);
}

template <class T>
Image<T> resample_to_spacing(const Image<T>& in, double target_spacing_mm) {
  require(target_spacing_mm > 0.0, ErrorCode::invalid_argument, "target spacing must be positive");
  return lanczos_resample(in, in.spacing.row / target_spacing_mm, in.spacing.col / target_spacing_mm);
}

/// Nearest-neighbour counterpart for label maps, using the same pixel-center mapping.
inline LabelMap resample_labels(const LabelMap& in, double row_factor, double col_factor) {
  require(row_factor > 0.0 && col_factor > 0.0, ErrorCode::invalid_argument, "resampling factor must be positive");
  const auto rows = static_cast<std::size_t>(std::llround(static_cast<double>(in.rows) * row_factor));
  const auto cols = static_cast<std::size_t>(std::llround(static_cast<double>(in.cols) * col_factor));
  require(rows > 0 && cols > 0, ErrorCode::invalid_argument, "resampling factor leaves an empty image");
  LabelMap out = in.like<std::uint8_t>(in.channels);
  out.rows = rows;
  out.cols = cols;
  out.values.assign(rows * cols * in.channels, 0);
  out.spacing = {in.spacing.row / row_factor, in.spacing.col / col_factor};
  auto source = [](std::size_t j, double f, std::size_t n) {
    const double s = std::floor((static_cast<double>(j) + 0.5) / f);
    return static_cast<std::size_t>(std::clamp(s, 0.0, static_cast<double>(n - 1)));
  };
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c)
      for (std::size_t ch = 0; ch < in.channels; ++ch)
        out.at(r, c, ch) = in.at(source(r, row_factor, in.rows), source(c, col_factor, in.cols), ch);
  return out;
}

inline LabelMap resample_labels_to_spacing(const LabelMap& in, double target_spacing_mm) {
  require(target_spacing_mm > 0.0, ErrorCode::invalid_argument, "target spacing must be positive");
  return resample_labels(in, in.spacing.row / target_spacing_mm, in.spacing.col / target_spacing_mm);
}

namespace detail {

// Leading offset of a centered crop (positive) or pad (negative) along one axis.
inline long long center_offset(std::size_t from, std::size_t to) {
  if (from >= to) return static_cast<long long>((from - to) / 2);
  return -static_cast<long long>((to - from) / 2);
}

}  // namespace detail

/// Centered crop or symmetric pad to rows x cols. A crop keeps floor((H - target) / 2)
/// leading pixels out; a pad puts floor((target - H) / 2) before the image.
template <class T>
Image<T> center_crop_or_pad(const Image<T>& in, std::size_t rows, std::size_t cols, T pad_value = T{}) {
  require(rows > 0 && cols > 0, ErrorCode::invalid_argument, "target extent must be positive");
  Image<T> out = in.template like<T>(in.channels, pad_value);
  out.rows = rows;
  out.cols = cols;
  out.values.assign(rows * cols * in.channels, pad_value);
  const long long dr = detail::center_offset(in.rows, rows);
  const long long dc = detail::center_offset(in.cols, cols);
  for (std::size_t r = 0; r < rows; ++r) {
    const long long sr = static_cast<long long>(r) + dr;
    if (sr < 0 || sr >= static_cast<long long>(in.rows)) continue;
    for (std::size_t c = 0; c < cols; ++c) {
      const long long sc = static_cast<long long>(c) + dc;
      if (sc < 0 || sc >= static_cast<long long>(in.cols)) continue;
      for (std::size_t ch = 0; ch < in.channels; ++ch)
        out.at(r, c, ch) = in.at(static_cast<std::size_t>(sr), static_cast<std::size_t>(sc), ch);
    }
  }
  return out;
}

/// Keeps the central third along each axis (one third trimmed from every side).
template <class T>
Image<T> crop_inner_ninth(const Image<T>& in) {
  return center_crop_or_pad(in, std::max<std::size_t>(1, in.rows / 3), std::max<std::size_t>(1, in.cols / 3));
}

/// Normalized 1D Gaussian taps for offsets -radius..radius, radius = ceil(4 sigma).
inline std::vector<double> gaussian_kernel(double variance) {
  require(variance > 0.0 && std::isfinite(variance), ErrorCode::invalid_argument, "variance must be positive");
  const double sigma = std::sqrt(variance);
  const auto radius = static_cast<long long>(std::ceil(4.0 * sigma));
  std::vector<double> taps(static_cast<std::size_t>(2 * radius + 1));
  double total = 0.0;
  for (long long k = -radius; k <= radius; ++k) {
    const double v = std::exp(-static_cast<double>(k * k) / (2.0 * variance));
    taps[static_cast<std::size_t>(k + radius)] = v;
    total += v;
  }
  for (double& v : taps) v /= total;
  return taps;
}

/// Separable Gaussian blur with edge clamping.
template <class T>
Image<T> gaussian_blur(const Image<T>& in, double variance) {
  const std::vector<double> taps = gaussian_kernel(variance);
  const auto radius = static_cast<long long>(taps.size() / 2);
  std::vector<double> tmp(in.values.size());
  const auto last_row = static_cast<long long>(in.rows) - 1;
  const auto last_col = static_cast<long long>(in.cols) - 1;
  for (std::size_t r = 0; r < in.rows; ++r)
    for (std::size_t c = 0; c < in.cols; ++c)
      for (std::size_t ch = 0; ch < in.channels; ++ch) {
        double acc = 0.0;
        for (long long k = -radius; k <= radius; ++k) {
          const auto sr = std::clamp<long long>(static_cast<long long>(r) + k, 0, last_row);
          acc += taps[static_cast<std::size_t>(k + radius)] * static_cast<double>(in.at(static_cast<std::size_t>(sr), c, ch));
        }
        tmp[(r * in.cols + c) * in.channels + ch] = acc;
      }
  Image<T> out = in.template like<T>(in.channels);
  for (std::size_t r = 0; r < in.rows; ++r)
    for (std::size_t c = 0; c < in.cols; ++c)
      for (std::size_t ch = 0; ch < in.channels; ++ch) {
        double acc = 0.0;
        for (long long k = -radius; k <= radius; ++k) {
          const auto sc = std::clamp<long long>(static_cast<long long>(c) + k, 0, last_col);
          acc += taps[static_cast<std::size_t>(k + radius)] * tmp[(r * in.cols + static_cast<std::size_t>(sc)) * in.channels + ch];
        }
        out.at(r, c, ch) = static_cast<T>(acc);
      }
  return out;
}

/// input - blur(input), per channel. The variance is in squared pixels.
template <class T>
Image<T> gaussian_highpass(const Image<T>& in, double variance) {
  const Image<T> blurred = gaussian_blur(in, variance);
  Image<T> out = in;
  for (std::size_t i = 0; i < out.values.size(); ++i)
    out.values[i] = static_cast<T>(static_cast<double>(in.values[i]) - static_cast<double>(blurred.values[i]));
  return out;
}

/// Label values must belong to the tissue palette and the extent must match the slice.
template <class T>
void validate_labels(const LabelMap& labels, const Image<T>& slice) {
  labels.validate();
  require(labels.channels == 1, ErrorCode::shape_mismatch, "label maps have one channel");
  require(labels.same_extent(slice), ErrorCode::shape_mismatch,
          "label map " + std::to_string(labels.rows) + "x" + std::to_string(labels.cols) + " does not match slice " +
              std::to_string(slice.rows) + "x" + std::to_string(slice.cols));
  for (std::uint8_t v : labels.values)
    require(v < kNumTissues, ErrorCode::invalid_argument, "label value " + std::to_string(v) + " outside {0,1,2}");
}

/// Acquisition-side preparation of a slice and its labels.
struct PreprocessConfig {
  double upsample_factor = 10.0;  // 1 skips upsampling
  bool crop_inner_ninth = true;
  double target_spacing_mm = 0.25;  // <= 0 keeps the spacing
  std::size_t target_extent = 640;  // 0 keeps the extent
};

template <class T>
struct PreparedSlice {
  Image<T> image;
  LabelMap labels;
};

template <class T>
PreparedSlice<T> preprocess(const Image<T>& image, const LabelMap& labels, const PreprocessConfig& config) {
  validate_labels(labels, image);
  PreparedSlice<T> out{image, labels};
  if (config.upsample_factor != 1.0) {
    out.image = lanczos_resample(out.image, config.upsample_factor);
    out.labels = resample_labels(out.labels, config.upsample_factor, config.upsample_factor);
  }
  if (config.crop_inner_ninth) {
    out.image = crop_inner_ninth(out.image);
    out.labels = crop_inner_ninth(out.labels);
  }
  if (config.target_spacing_mm > 0.0 &&
      (out.image.spacing.row != config.target_spacing_mm || out.image.spacing.col != config.target_spacing_mm)) {
    out.image = resample_to_spacing(out.image, config.target_spacing_mm);
    out.labels = resample_labels_to_spacing(out.labels, config.target_spacing_mm);
  }
  if (config.target_extent > 0) {
    out.image = center_crop_or_pad(out.image, config.target_extent, config.target_extent);
    out.labels = center_crop_or_pad<std::uint8_t>(out.labels, config.target_extent, config.target_extent, background);
  }
  return out;
}

}  // namespace cordseg
