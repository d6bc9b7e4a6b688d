#pragma once

// Training-time augmentation. A window pixel is traced back to the source image by
// undoing, in reverse, the forward chain
//
//   deformation -> rotate/scale about the window center -> mirror -> crop
//
// so every channel and the label map share one geometric map.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <vector>

#include "cordseg/error.hpp"
#include "cordseg/image.hpp"
#include "cordseg/rng.hpp"

namespace cordseg {

struct AugmentConfig {
  std::size_t deform_support_points = 4;
  double deform_std = 15.0;       // px, per axis
  double deform_truncate = 45.0;  // px, bound on the displacement norm
  double scale_min = 4.0 / 5.0;
  double scale_max = 5.0 / 4.0;
  double rotation_deg = 10.0;     // symmetric range
  double mirror_prob = 0.5;
  std::size_t safe_margin = 45;   // px
  std::size_t window_rows = 500;
  std::size_t window_cols = 500;

  void validate() const {
    require(deform_support_points == 4, ErrorCode::invalid_argument, "the deformation grid has exactly 4 support points");
    require(deform_std >= 0.0 && std::abs(deform_truncate - 3.0 * deform_std) <= 1e-9 * std::max(1.0, deform_std),
            ErrorCode::invalid_argument, "deform_truncate must equal 3 x deform_std");
    require(scale_min > 0.0 && scale_min <= 1.0 && std::abs(scale_min * scale_max - 1.0) <= 1e-9,
            ErrorCode::invalid_argument, "scale range must be reciprocal-symmetric around 1");
    require(rotation_deg >= 0.0 && rotation_deg < 180.0, ErrorCode::invalid_argument, "rotation range out of bounds");
    require(mirror_prob >= 0.0 && mirror_prob <= 1.0, ErrorCode::invalid_argument, "mirror probability outside [0, 1]");
    require(window_rows > 0 && window_cols > 0, ErrorCode::invalid_argument, "window must be non-empty");
  }

  bool operator==(const AugmentConfig&) const = default;
};

struct Displacement {
  double row = 0.0;
  double col = 0.0;
  double norm() const { return std::hypot(row, col); }
};

/// Displacements at the four window corners (top-left, top-right, bottom-left,
/// bottom-right) blended with zero-slope cubic Hermite weights 3t^2 - 2t^3. The blend
/// is convex, so no dense displacement exceeds the largest support displacement.
struct DeformationField {
  std::size_t rows = 1;
  std::size_t cols = 1;
  std::array<Displacement, 4> support{};

  Displacement at(double r, double c) const {
    auto weight = [](double x, std::size_t n) {
      const double t = n > 1 ? std::clamp(x / static_cast<double>(n - 1), 0.0, 1.0) : 0.0;
      return t * t * (3.0 - 2.0 * t);
    };
    const double v = weight(r, rows), u = weight(c, cols);
    const double w[4] = {(1 - v) * (1 - u), (1 - v) * u, v * (1 - u), v * u};
    Displacement d;
    for (std::size_t i = 0; i < 4; ++i) {
      d.row += w[i] * support[i].row;
      d.col += w[i] * support[i].col;
    }
    return d;
  }

  /// rows x cols x 2 displacement image (row, col).
  Image<double> dense() const {
    Image<double> out(rows, cols, 2);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) {
        const Displacement d = at(static_cast<double>(r), static_cast<double>(c));
        out.at(r, c, 0) = d.row;
        out.at(r, c, 1) = d.col;
      }
    return out;
  }
};

struct Augmentation {
  DeformationField field;
  double scale = 1.0;
  double angle_deg = 0.0;
  bool mirror = false;
  std::size_t origin_row = 0;
  std::size_t origin_col = 0;
  std::size_t window_rows = 0;
  std::size_t window_cols = 0;

  bool operator==(const Augmentation& o) const {
    auto same = [](const Displacement& a, const Displacement& b) { return a.row == b.row && a.col == b.col; };
    for (std::size_t i = 0; i < 4; ++i)
      if (!same(field.support[i], o.field.support[i])) return false;
    return scale == o.scale && angle_deg == o.angle_deg && mirror == o.mirror && origin_row == o.origin_row &&
           origin_col == o.origin_col && window_rows == o.window_rows && window_cols == o.window_cols;
  }

  /// Pure crop at the given origin.
  static Augmentation identity(std::size_t origin_row, std::size_t origin_col, std::size_t rows, std::size_t cols) {
    Augmentation a;
    a.field.rows = rows;
    a.field.cols = cols;
    a.origin_row = origin_row;
    a.origin_col = origin_col;
    a.window_rows = rows;
    a.window_cols = cols;
    return a;
  }
};

inline Augmentation sample_augmentation(Rng& rng, const AugmentConfig& config, std::size_t image_rows,
                                        std::size_t image_cols) {
  config.validate();
  const std::size_t need_rows = config.window_rows + 2 * config.safe_margin;
  const std::size_t need_cols = config.window_cols + 2 * config.safe_margin;
  require(image_rows >= need_rows && image_cols >= need_cols, ErrorCode::invalid_argument,
          "image " + std::to_string(image_rows) + "x" + std::to_string(image_cols) + " is smaller than window plus margins (" +
              std::to_string(need_rows) + "x" + std::to_string(need_cols) + ")");
  Augmentation a;
  a.window_rows = config.window_rows;
  a.window_cols = config.window_cols;
  a.field.rows = config.window_rows;
  a.field.cols = config.window_cols;
  for (auto& d : a.field.support) {
    d.row = rng.normal(0.0, config.deform_std);
    d.col = rng.normal(0.0, config.deform_std);
    const double n = d.norm();
    if (n > config.deform_truncate) {
      const Displacement raw = d;
      double f = config.deform_truncate / n;
      d = {raw.row * f, raw.col * f};
      // rounding can leave the norm an ulp above the bound
      while (d.norm() > config.deform_truncate) {
        f = std::nextafter(f, 0.0);
        d = {raw.row * f, raw.col * f};
      }
    }
  }
  a.scale = rng.uniform(config.scale_min, config.scale_max);
  a.angle_deg = rng.uniform(-config.rotation_deg, config.rotation_deg);
  a.mirror = rng.bernoulli(config.mirror_prob);
  a.origin_row = config.safe_margin + rng.index(image_rows - need_rows + 1);
  a.origin_col = config.safe_margin + rng.index(image_cols - need_cols + 1);
  return a;
}

namespace detail {

struct SourcePoint {
  double row;
  double col;
};

// Source position of window pixel (r, c).
inline SourcePoint trace_back(const Augmentation& a, std::size_t r, std::size_t c) {
  const double wr = static_cast<double>(r);
  const double wc = a.mirror ? static_cast<double>(a.window_cols - 1 - c) : static_cast<double>(c);
  const double cr = 0.5 * static_cast<double>(a.window_rows - 1);
  const double cc = 0.5 * static_cast<double>(a.window_cols - 1);
  const double theta = a.angle_deg * std::numbers::pi / 180.0;
  const double cs = std::cos(theta), sn = std::sin(theta);
  const double dr = wr - cr, dc = wc - cc;
  const double pr = cr + (cs * dr + sn * dc) / a.scale;
  const double pc = cc + (-sn * dr + cs * dc) / a.scale;
  const Displacement d = a.field.at(pr, pc);
  return {static_cast<double>(a.origin_row) + pr + d.row, static_cast<double>(a.origin_col) + pc + d.col};
}

template <class T>
void check_window(const Image<T>& image, const Augmentation& a, std::size_t margin) {
  require(a.window_rows > 0 && a.window_cols > 0, ErrorCode::invalid_argument, "empty augmentation window");
  require(a.origin_row >= margin && a.origin_col >= margin && a.origin_row + a.window_rows + margin <= image.rows &&
              a.origin_col + a.window_cols + margin <= image.cols,
          ErrorCode::invalid_argument, "augmentation window leaves the safe region of the image");
}

}  // namespace detail

/// Bilinear resampling of every channel; samples beyond the border repeat the edge.
template <class T>
Image<T> warp_image(const Image<T>& image, const Augmentation& a, std::size_t margin) {
  detail::check_window(image, a, margin);
  Image<T> out = image.template like<T>(image.channels);
  out.rows = a.window_rows;
  out.cols = a.window_cols;
  out.values.assign(out.rows * out.cols * out.channels, T{});
  const double max_r = static_cast<double>(image.rows - 1), max_c = static_cast<double>(image.cols - 1);
  for (std::size_t r = 0; r < out.rows; ++r)
    for (std::size_t c = 0; c < out.cols; ++c) {
      const auto p = detail::trace_back(a, r, c);
      const double sr = std::clamp(p.row, 0.0, max_r), sc = std::clamp(p.col, 0.0, max_c);
      const auto r0 = static_cast<std::size_t>(std::floor(sr)), c0 = static_cast<std::size_t>(std::floor(sc));
      const std::size_t r1 = std::min(r0 + 1, image.rows - 1), c1 = std::min(c0 + 1, image.cols - 1);
      const double fr = sr - static_cast<double>(r0), fc = sc - static_cast<double>(c0);
      for (std::size_t ch = 0; ch < image.channels; ++ch) {
        const double top = (1 - fc) * static_cast<double>(image.at(r0, c0, ch)) + fc * static_cast<double>(image.at(r0, c1, ch));
        const double bottom =
            (1 - fc) * static_cast<double>(image.at(r1, c0, ch)) + fc * static_cast<double>(image.at(r1, c1, ch));
        out.at(r, c, ch) = static_cast<T>((1 - fr) * top + fr * bottom);
      }
    }
  return out;
}

/// Nearest-neighbour resampling; never produces a value absent from the input.
inline LabelMap warp_labels(const LabelMap& labels, const Augmentation& a, std::size_t margin) {
  detail::check_window(labels, a, margin);
  LabelMap out = labels.like<std::uint8_t>(labels.channels);
  out.rows = a.window_rows;
  out.cols = a.window_cols;
  out.values.assign(out.rows * out.cols * out.channels, 0);
  const double max_r = static_cast<double>(labels.rows - 1), max_c = static_cast<double>(labels.cols - 1);
  for (std::size_t r = 0; r < out.rows; ++r)
    for (std::size_t c = 0; c < out.cols; ++c) {
      const auto p = detail::trace_back(a, r, c);
      const auto sr = static_cast<std::size_t>(std::clamp(std::round(p.row), 0.0, max_r));
      const auto sc = static_cast<std::size_t>(std::clamp(std::round(p.col), 0.0, max_c));
      for (std::size_t ch = 0; ch < labels.channels; ++ch) out.at(r, c, ch) = labels.at(sr, sc, ch);
    }
  return out;
}

template <class T>
struct AugmentedWindow {
  Image<T> image;
  LabelMap labels;
};

template <class T>
AugmentedWindow<T> apply_transform(const Image<T>& image, const LabelMap& labels, const Augmentation& a,
                                   std::size_t margin) {
  require(labels.same_extent(image), ErrorCode::shape_mismatch, "label map and slice differ in extent");
  return {warp_image(image, a, margin), warp_labels(labels, a, margin)};
}

}  // namespace cordseg
