#pragma once

// Synthetic multi-channel spinal cord slices: an elliptical cord (WM) holding a
// butterfly-shaped GM, surrounded by a CSF ring and background tissue. Each of the
// channels is an inversion-recovery magnitude image |1 - 2 exp(-TI / T1)| scaled by
// proton density, averaged over the tissues covering the pixel, plus Gaussian noise.
// Labels record the tissue at the pixel center.

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <string>
#include <vector>

#include "cordseg/error.hpp"
#include "cordseg/image.hpp"
#include "cordseg/io.hpp"
#include "cordseg/manifest.hpp"
#include "cordseg/rng.hpp"

namespace cordseg {

/// Signal tissues; CSF and background tissue are both label 0.
enum class SignalTissue : std::size_t { background = 0, gray_matter = 1, white_matter = 2, csf = 3 };
inline constexpr std::size_t kSignalTissues = 4;

struct TissueSignal {
  double t1_ms = 1000.0;
  double proton_density = 1.0;
};

struct PhantomSpec {
  std::size_t rows = 96;
  std::size_t cols = 96;
  double spacing_mm = 0.25;
  std::vector<double> inversion_times_ms{150, 300, 500, 700, 900, 1200, 1600, 2200};
  std::array<TissueSignal, kSignalTissues> tissues{{{600, 0.6}, {1250, 0.8}, {850, 0.7}, {4000, 1.0}}};
  double intensity_scale = 1000.0;
  double noise_std = 0.06;  // in units of proton density
  // sub-samples per pixel side; boundary pixels mix the tissue signals
  std::size_t partial_volume_samples = 4;

  // cord ellipse semi-axes (px), AP and left-right
  double cord_ap = 14.0;
  double cord_lr = 20.0;
  double csf_scale = 1.45;  // CSF ellipse relative to the cord
  double lobe_scale = 1.0;  // GM horn size relative to the cord
  double waist_half_width = 1.5;  // px, half thickness of the gray commissure

  // inter-subject variation (relative std of the shape parameters, px / deg for pose)
  double subject_shape_std = 0.06;
  double subject_offset_std = 1.5;
  double subject_rotation_std_deg = 4.0;
  // smooth variation along the slice index (relative amplitude)
  double slice_drift = 0.05;
  // scan-rescan jitter; the repositioned scan gets `reposition_factor` times more
  double jitter_translation_px = 0.4;
  double jitter_rotation_deg = 1.0;
  double jitter_slice_shift = 0.15;  // fraction of a slice spacing, through-plane
  int repositioned_scan = 3;
  double reposition_factor = 3.0;

  std::uint64_t seed = 1;

  void validate() const {
    require(rows >= 16 && cols >= 16, ErrorCode::invalid_argument, "phantom extent too small");
    require(spacing_mm > 0.0, ErrorCode::invalid_argument, "spacing must be positive");
    require(!inversion_times_ms.empty(), ErrorCode::invalid_argument, "need at least one inversion time");
    require(noise_std >= 0.0 && intensity_scale > 0.0, ErrorCode::invalid_argument, "invalid intensity parameters");
    require(partial_volume_samples >= 1, ErrorCode::invalid_argument, "need at least one sample per pixel");
    require(cord_ap > 0.0 && cord_lr > 0.0 && lobe_scale > 0.0 && waist_half_width >= 0.0 && csf_scale > 1.0,
            ErrorCode::invalid_argument, "shape parameters must be positive and the CSF ring must enclose the cord");
    for (const auto& t : tissues)
      require(t.t1_ms > 0.0 && t.proton_density > 0.0, ErrorCode::invalid_argument, "tissue T1 and PD must be positive");
    for (std::size_t a = 0; a < kSignalTissues; ++a)
      for (std::size_t b = a + 1; b < kSignalTissues; ++b) {
        double largest = 0.0;
        for (double ti : inversion_times_ms)
          largest = std::max(largest, std::abs(signal(static_cast<SignalTissue>(a), ti) -
                                               signal(static_cast<SignalTissue>(b), ti)));
        require(largest > 1e-6, ErrorCode::invalid_argument, "two tissues share the same signal curve");
      }
  }

  /// Noise-free signal of a tissue at one inversion time, before intensity scaling.
  double signal(SignalTissue t, double ti_ms) const {
    const auto& s = tissues[static_cast<std::size_t>(t)];
    return s.proton_density * std::abs(1.0 - 2.0 * std::exp(-ti_ms / s.t1_ms));
  }
};

/// Shape and pose of one rendered slice.
struct SliceGeometry {
  double center_row = 0.0, center_col = 0.0;
  double rotation_deg = 0.0;
  double cord_ap = 14.0, cord_lr = 20.0;
  double csf_scale = 1.45;
  double lobe_scale = 1.0;
  double waist_half_width = 1.5;

  /// Signal tissue at image position (r, c).
  SignalTissue tissue_at(double r, double c) const {
    const double th = rotation_deg * std::numbers::pi / 180.0;
    const double dr = r - center_row, dc = c - center_col;
    const double v = std::cos(th) * dr + std::sin(th) * dc;   // AP, dorsal is negative
    const double u = -std::sin(th) * dr + std::cos(th) * dc;  // left-right
    const double q = (v / cord_ap) * (v / cord_ap) + (u / cord_lr) * (u / cord_lr);
    if (q <= 1.0)
      return q <= kGrayLimit && in_butterfly(v, std::abs(u)) ? SignalTissue::gray_matter : SignalTissue::white_matter;
    if (q <= csf_scale * csf_scale) return SignalTissue::csf;
    return SignalTissue::background;
  }

 private:
  // GM stays inside this fraction of the squared cord radius, leaving a WM rim.
  static constexpr double kGrayLimit = 0.72;

  static bool in_ellipse(double v, double u, double cv, double cu, double av, double au, double tilt_deg) {
    const double th = tilt_deg * std::numbers::pi / 180.0;
    const double dv = v - cv, du = u - cu;
    const double a = std::cos(th) * dv + std::sin(th) * du;
    const double b = -std::sin(th) * dv + std::cos(th) * du;
    return (a / av) * (a / av) + (b / au) * (b / au) <= 1.0;
  }

  // Mirrored about the median plane, so only |u| matters.
  bool in_butterfly(double v, double u) const {
    const double s = lobe_scale;
    const bool dorsal = in_ellipse(v, u, -0.38 * cord_ap, 0.33 * cord_lr, 0.42 * cord_ap * s, 0.12 * cord_lr * s, -35.0);
    const bool ventral = in_ellipse(v, u, 0.3 * cord_ap, 0.3 * cord_lr, 0.3 * cord_ap * s, 0.19 * cord_lr * s, 10.0);
    const bool waist = std::abs(v) <= waist_half_width && u <= 0.36 * cord_lr;
    return dorsal || ventral || waist;
  }
};

struct PhantomSlice {
  MultiChannelSlice image;
  LabelMap labels;
  SliceGeometry geometry;
};

inline LabelMap render_labels(const SliceGeometry& g, std::size_t rows, std::size_t cols) {
  LabelMap l(rows, cols, 1);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) {
      const auto t = g.tissue_at(static_cast<double>(r), static_cast<double>(c));
      l.at(r, c) = t == SignalTissue::gray_matter ? gray_matter : t == SignalTissue::white_matter ? white_matter : background;
    }
  return l;
}

/// GM strictly inside WM strictly inside the CSF ring strictly inside the image.
inline void check_nesting(const SliceGeometry& g, std::size_t rows, std::size_t cols) {
  auto at = [&](long r, long c) { return g.tissue_at(static_cast<double>(r), static_cast<double>(c)); };
  const long R = static_cast<long>(rows), C = static_cast<long>(cols);
  bool any_gm = false;
  for (long r = 0; r < R; ++r)
    for (long c = 0; c < C; ++c) {
      const SignalTissue t = at(r, c);
      if (t != SignalTissue::background && (r == 0 || c == 0 || r == R - 1 || c == C - 1))
        throw Error(ErrorCode::invalid_argument, "phantom CSF ring touches the image border");
      if (t == SignalTissue::background) continue;
      any_gm = any_gm || t == SignalTissue::gray_matter;
      for (long dr = -1; dr <= 1; ++dr)
        for (long dc = -1; dc <= 1; ++dc) {
          const SignalTissue n = at(r + dr, c + dc);
          if (t == SignalTissue::gray_matter && n != SignalTissue::gray_matter && n != SignalTissue::white_matter)
            throw Error(ErrorCode::invalid_argument, "phantom GM reaches outside the WM");
          if (t == SignalTissue::white_matter && n == SignalTissue::background)
            throw Error(ErrorCode::invalid_argument, "phantom cord is not enclosed by CSF");
        }
    }
  require(any_gm, ErrorCode::invalid_argument, "phantom GM is empty");
}

/// Renders intensities for a geometry. Noise comes from `rng`.
inline MultiChannelSlice render_image(const PhantomSpec& spec, const SliceGeometry& g, Rng& rng) {
  const std::size_t channels = spec.inversion_times_ms.size();
  MultiChannelSlice img(spec.rows, spec.cols, channels);
  img.spacing = {spec.spacing_mm, spec.spacing_mm};
  std::array<std::vector<double>, kSignalTissues> curves;
  for (std::size_t t = 0; t < kSignalTissues; ++t)
    for (double ti : spec.inversion_times_ms) curves[t].push_back(spec.signal(static_cast<SignalTissue>(t), ti));
  for (std::size_t r = 0; r < spec.rows; ++r)
    for (std::size_t c = 0; c < spec.cols; ++c) {
      std::array<double, kSignalTissues> fraction{};
      const std::size_t n = spec.partial_volume_samples;
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          const double sr = static_cast<double>(r) + (static_cast<double>(i) + 0.5) / static_cast<double>(n) - 0.5;
          const double sc = static_cast<double>(c) + (static_cast<double>(j) + 0.5) / static_cast<double>(n) - 0.5;
          fraction[static_cast<std::size_t>(g.tissue_at(sr, sc))] += 1.0 / static_cast<double>(n * n);
        }
      for (std::size_t ch = 0; ch < channels; ++ch) {
        double v = 0.0;
        for (std::size_t t = 0; t < kSignalTissues; ++t) v += fraction[t] * curves[t][ch];
        if (spec.noise_std > 0.0) v += rng.normal(0.0, spec.noise_std);
        img.at(r, c, ch) = static_cast<float>(v * spec.intensity_scale);
      }
    }
  return img;
}

struct SubjectShape {
  double cord_ap, cord_lr, lobe_scale, offset_row, offset_col, rotation_deg, drift_phase;
};

inline SubjectShape sample_subject(const PhantomSpec& spec, int subject) {
  Rng rng(spec.seed, Stream::phantom, static_cast<std::uint64_t>(subject) << 20);
  SubjectShape s;
  s.cord_ap = spec.cord_ap * (1.0 + rng.normal(0.0, spec.subject_shape_std));
  s.cord_lr = spec.cord_lr * (1.0 + rng.normal(0.0, spec.subject_shape_std));
  s.lobe_scale = spec.lobe_scale * (1.0 + rng.normal(0.0, spec.subject_shape_std));
  s.offset_row = rng.normal(0.0, spec.subject_offset_std);
  s.offset_col = rng.normal(0.0, spec.subject_offset_std);
  s.rotation_deg = rng.normal(0.0, spec.subject_rotation_std_deg);
  s.drift_phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
  return s;
}

/// Geometry of (subject, scan, slice). Shape drifts smoothly with the slice position;
/// each scan adds a pose jitter, larger for the repositioned scan.
inline SliceGeometry slice_geometry(const PhantomSpec& spec, const SliceId& id, int slices_per_scan) {
  const SubjectShape s = sample_subject(spec, id.subject);
  Rng jitter(spec.seed, Stream::phantom, (static_cast<std::uint64_t>(id.subject) << 20) | (static_cast<std::uint64_t>(id.scan) << 10));
  const double k = id.scan == spec.repositioned_scan ? spec.reposition_factor : 1.0;
  const double shift_row = jitter.normal(0.0, k * spec.jitter_translation_px);
  const double shift_col = jitter.normal(0.0, k * spec.jitter_translation_px);
  const double turn = jitter.normal(0.0, k * spec.jitter_rotation_deg);
  const double through_plane = jitter.normal(0.0, k * spec.jitter_slice_shift);

  const double z = (static_cast<double>(id.slice - 1) + through_plane) / std::max(1, slices_per_scan);
  const double wave = std::sin(2.0 * std::numbers::pi * z + s.drift_phase);
  const double wave2 = std::cos(2.0 * std::numbers::pi * z + 0.7 * s.drift_phase);
  SliceGeometry g;
  g.center_row = 0.5 * static_cast<double>(spec.rows - 1) + s.offset_row + shift_row;
  g.center_col = 0.5 * static_cast<double>(spec.cols - 1) + s.offset_col + shift_col;
  g.rotation_deg = s.rotation_deg + turn;
  g.cord_ap = s.cord_ap * (1.0 + spec.slice_drift * wave);
  g.cord_lr = s.cord_lr * (1.0 + spec.slice_drift * wave2);
  g.lobe_scale = s.lobe_scale * (1.0 + spec.slice_drift * wave);
  g.csf_scale = spec.csf_scale;
  g.waist_half_width = spec.waist_half_width;
  return g;
}

inline PhantomSlice generate_slice(const PhantomSpec& spec, const SliceId& id, int slices_per_scan) {
  const SliceGeometry g = slice_geometry(spec, id, slices_per_scan);
  check_nesting(g, spec.rows, spec.cols);
  Rng noise(spec.seed, Stream::phantom,
            (static_cast<std::uint64_t>(id.subject) << 20) | (static_cast<std::uint64_t>(id.scan) << 10) |
                static_cast<std::uint64_t>(id.slice));
  PhantomSlice out{render_image(spec, g, noise), render_labels(g, spec.rows, spec.cols), g};
  out.image.id = id;
  out.labels.id = id;
  out.labels.spacing = out.image.spacing;
  return out;
}

/// Simulated rater: each pixel with a 4-neighbour of another class switches, with
/// probability `flip_prob`, to one of those neighbouring classes. Neighbourhoods are
/// read from the original map. Deterministic per (seed, rater).
inline LabelMap perturb_rater(const LabelMap& labels, int rater, double flip_prob, std::uint64_t seed) {
  require(flip_prob >= 0.0 && flip_prob < 0.5, ErrorCode::invalid_argument, "flip probability must lie in [0, 0.5)");
  LabelMap out = labels;
  if (flip_prob == 0.0) return out;
  Rng rng(seed, Stream::rater, static_cast<std::uint64_t>(rater));
  const long R = static_cast<long>(labels.rows), C = static_cast<long>(labels.cols);
  for (long r = 0; r < R; ++r)
    for (long c = 0; c < C; ++c) {
      const std::uint8_t own = labels.at(static_cast<std::size_t>(r), static_cast<std::size_t>(c));
      std::uint8_t others[4];
      std::size_t n = 0;
      const long dr[4] = {-1, 1, 0, 0}, dc[4] = {0, 0, -1, 1};
      for (int k = 0; k < 4; ++k) {
        const long y = r + dr[k], x = c + dc[k];
        if (y < 0 || x < 0 || y >= R || x >= C) continue;
        const std::uint8_t v = labels.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x));
        if (v != own) others[n++] = v;
      }
      if (n == 0) continue;
      const double u = rng.uniform();
      const std::uint64_t pick = rng.index(n);
      if (u < flip_prob) out.at(static_cast<std::size_t>(r), static_cast<std::size_t>(c)) = others[pick];
    }
  return out;
}

struct PhantomLayout {
  int subjects = 8;
  int scans = 3;
  int slices = 6;
  int raters = 1;             // rater 1 is the ground truth, others are perturbed copies
  double rater_flip_prob = 0.1;
  int test_subjects = 2;      // the last subjects are held out
};

inline SplitSpec phantom_split(const PhantomLayout& layout) {
  require(layout.test_subjects >= 1 && layout.test_subjects + 2 <= layout.subjects, ErrorCode::invalid_argument,
          "phantom split needs a test subject, a validation subject and a training subject");
  SplitSpec s;
  s.groups.resize(2);
  for (int i = 1; i <= layout.subjects; ++i) s.groups[i > layout.subjects - layout.test_subjects ? 1 : 0].push_back(i);
  s.test_group = 1;
  return s;
}

/// Writes every slice and label map of the layout to `dir` plus `manifest.txt`.
/// With more than one rater, rater 1 keeps the exact labels.
inline DatasetManifest write_phantom(const std::filesystem::path& dir, const PhantomSpec& spec,
                                     const PhantomLayout& layout) {
  spec.validate();
  require(layout.subjects > 0 && layout.scans > 0 && layout.slices > 0 && layout.raters > 0,
          ErrorCode::invalid_argument, "phantom layout counts must be positive");
  std::filesystem::create_directories(dir);
  for (int s = 1; s <= layout.subjects; ++s)
    for (int sc = 1; sc <= layout.scans; ++sc)
      for (int sl = 1; sl <= layout.slices; ++sl) {
        const SliceId id{s, sc, sl};
        const PhantomSlice p = generate_slice(spec, id, layout.slices);
        save_slice(dir / slice_file_name(id), p.image);
        for (int rater = 1; rater <= layout.raters; ++rater) {
          const std::uint64_t seed = derive_seed(spec.seed, static_cast<std::uint64_t>(Stream::rater),
                                                 (static_cast<std::uint64_t>(s) << 20) | (static_cast<std::uint64_t>(sc) << 10) |
                                                     static_cast<std::uint64_t>(sl));
          const LabelMap l = rater == 1 ? p.labels : perturb_rater(p.labels, rater, layout.rater_flip_prob, seed);
          save_labels(dir / label_file_name(id, rater), l);
        }
      }
  const DatasetManifest m = build_manifest(dir, phantom_split(layout));
  save_manifest(dir / "manifest.txt", m);
  return m;
}

}  // namespace cordseg
