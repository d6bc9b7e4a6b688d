#pragma once

// Overlap, surface-distance, skeleton-distance and area metrics on label maps,
// scan-rescan aggregation and multi-rater majority voting. Distances are in mm.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "cordseg/error.hpp"
#include "cordseg/image.hpp"

namespace cordseg {

/// A metric value, or the reason it is undefined.
struct Metric {
  std::optional<double> value;
  std::string reason;

  static Metric of(double v) { return {v, {}}; }
  static Metric undefined(std::string why) { return {std::nullopt, std::move(why)}; }
  bool defined() const { return value.has_value(); }
  double operator*() const {
    require(value.has_value(), ErrorCode::domain, "metric is undefined: " + reason);
    return *value;
  }
};

inline std::string to_string(const Metric& m) {
  if (!m.defined()) return "NA";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", *m.value);
  return buf;
}

struct ConfusionCounts {
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
  std::size_t total() const { return tp + fp + tn + fn; }
  bool operator==(const ConfusionCounts&) const = default;
};

namespace detail {

inline void check_pair(const LabelMap& a, const LabelMap& b) {
  require(a.rows == b.rows && a.cols == b.cols && a.channels == 1 && b.channels == 1, ErrorCode::shape_mismatch,
          "label maps differ in extent: " + std::to_string(a.rows) + "x" + std::to_string(a.cols) + " vs " +
              std::to_string(b.rows) + "x" + std::to_string(b.cols));
}

}  // namespace detail

inline ConfusionCounts confusion(const LabelMap& automatic, const LabelMap& reference, std::uint8_t label) {
  detail::check_pair(automatic, reference);
  ConfusionCounts c;
  for (std::size_t i = 0; i < automatic.values.size(); ++i) {
    const bool a = automatic.values[i] == label, r = reference.values[i] == label;
    if (a && r)
      ++c.tp;
    else if (a)
      ++c.fp;
    else if (r)
      ++c.fn;
    else
      ++c.tn;
  }
  return c;
}

struct OverlapMetrics {
  Metric dsc, jaccard, conformity, tpr, tnr, precision;
};

/// DSC, J, C and the rates, the last four in percent. Two empty masks agree perfectly.
inline OverlapMetrics overlap_metrics(const ConfusionCounts& c) {
  const auto tp = static_cast<double>(c.tp), fp = static_cast<double>(c.fp);
  const auto tn = static_cast<double>(c.tn), fn = static_cast<double>(c.fn);
  OverlapMetrics m;
  const bool both_empty = c.tp + c.fp + c.fn == 0;
  m.dsc = Metric::of(both_empty ? 1.0 : 2 * tp / (2 * tp + fp + fn));
  m.jaccard = Metric::of(both_empty ? 1.0 : tp / (tp + fp + fn));
  m.conformity = c.tp > 0 ? Metric::of((1.0 - (fp + fn) / tp) * 100.0) : Metric::undefined("no true positives");
  m.tpr = c.tp + c.fn > 0 ? Metric::of(100.0 * tp / (tp + fn)) : Metric::undefined("reference mask is empty");
  m.tnr = c.tn + c.fp > 0 ? Metric::of(100.0 * tn / (tn + fp)) : Metric::undefined("reference covers the image");
  m.precision = c.tp + c.fp > 0 ? Metric::of(100.0 * tp / (tp + fp)) : Metric::undefined("automatic mask is empty");
  return m;
}

inline double dice_coefficient(const LabelMap& a, const LabelMap& b, std::uint8_t label) {
  return *overlap_metrics(confusion(a, b, label)).dsc;
}

struct Point {
  std::size_t row, col;
  bool operator==(const Point&) const = default;
};

/// Foreground pixels with a 4-neighbour in the background; pixels on the image edge count.
inline std::vector<Point> boundary_points(const LabelMap& mask, std::uint8_t label) {
  std::vector<Point> out;
  auto fg = [&](std::size_t r, std::size_t c) { return mask.at(r, c) == label; };
  for (std::size_t r = 0; r < mask.rows; ++r)
    for (std::size_t c = 0; c < mask.cols; ++c) {
      if (!fg(r, c)) continue;
      const bool edge = r == 0 || c == 0 || r + 1 == mask.rows || c + 1 == mask.cols;
      if (edge || !fg(r - 1, c) || !fg(r + 1, c) || !fg(r, c - 1) || !fg(r, c + 1)) out.push_back({r, c});
    }
  return out;
}

inline std::vector<Point> points_of(const LabelMap& mask, std::uint8_t label) {
  std::vector<Point> out;
  for (std::size_t r = 0; r < mask.rows; ++r)
    for (std::size_t c = 0; c < mask.cols; ++c)
      if (mask.at(r, c) == label) out.push_back({r, c});
  return out;
}

/// Nearest-point distances from a point set to a fixed target set on a rows x cols grid.
/// Per column, the closest target row is tabulated; the nearest point is then the best
/// column, which is exact for any row/column spacing.
class NearestDistance {
 public:
  NearestDistance(const std::vector<Point>& targets, std::size_t rows, std::size_t cols, Spacing spacing)
      : rows_(rows), cols_(cols), spacing_(spacing), gap_(rows * cols, kNone) {
    for (const Point& p : targets) gap_[p.row * cols + p.col] = 0;
    for (std::size_t c = 0; c < cols; ++c) {
      std::size_t last = kNone;
      for (std::size_t r = 0; r < rows; ++r) {
        if (gap_[r * cols + c] == 0) last = r;
        gap_[r * cols + c] = last == kNone ? kNone : r - last;
      }
      last = kNone;
      for (std::size_t r = rows; r-- > 0;) {
        if (gap_[r * cols + c] == 0) last = r;
        if (last != kNone) gap_[r * cols + c] = std::min(gap_[r * cols + c], last - r);
      }
    }
    for (std::size_t c = 0; c < cols; ++c)
      if (gap_[c] != kNone) occupied_.push_back(c);
  }

  bool empty() const { return occupied_.empty(); }

  double operator()(const Point& p) const {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t c : occupied_) {
      const double dr = static_cast<double>(gap_[p.row * cols_ + c]) * spacing_.row;
      const double dc = (static_cast<double>(p.col) - static_cast<double>(c)) * spacing_.col;
      best = std::min(best, std::sqrt(dr * dr + dc * dc));
    }
    return best;
  }

 private:
  static constexpr std::size_t kNone = std::numeric_limits<std::size_t>::max();
  std::size_t rows_, cols_;
  Spacing spacing_;
  std::vector<std::size_t> gap_;
  std::vector<std::size_t> occupied_;
};

inline std::vector<double> directed_distances(const std::vector<Point>& from, const std::vector<Point>& to,
                                              std::size_t rows, std::size_t cols, Spacing spacing) {
  const NearestDistance nearest(to, rows, cols, spacing);
  std::vector<double> out;
  out.reserve(from.size());
  for (const Point& p : from) out.push_back(nearest(p));
  return out;
}

struct SurfaceDistances {
  Metric mean, hausdorff;
};

/// MD averages the two directed mean distances; HD is the larger directed maximum.
inline SurfaceDistances surface_distances(const LabelMap& automatic, const LabelMap& reference, std::uint8_t label,
                                          Spacing spacing) {
  detail::check_pair(automatic, reference);
  const auto a = boundary_points(automatic, label), b = boundary_points(reference, label);
  if (a.empty() || b.empty()) {
    const std::string why = a.empty() ? "automatic mask is empty" : "reference mask is empty";
    return {Metric::undefined(why), Metric::undefined(why)};
  }
  const auto ab = directed_distances(a, b, automatic.rows, automatic.cols, spacing);
  const auto ba = directed_distances(b, a, automatic.rows, automatic.cols, spacing);
  auto mean = [](const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
  };
  const double hd = std::max(*std::max_element(ab.begin(), ab.end()), *std::max_element(ba.begin(), ba.end()));
  return {Metric::of(0.5 * (mean(ab) + mean(ba))), Metric::of(hd)};
}

/// Zhang-Suen thinning of the pixels carrying `label`; returns a 0/1 mask.
inline LabelMap skeletonize(const LabelMap& mask, std::uint8_t label) {
  LabelMap img = binary_mask(mask, label);
  const std::size_t rows = img.rows, cols = img.cols;
  auto px = [&](long r, long c) -> int {
    if (r < 0 || c < 0 || r >= static_cast<long>(rows) || c >= static_cast<long>(cols)) return 0;
    return img.at(static_cast<std::size_t>(r), static_cast<std::size_t>(c));
  };
  std::vector<std::size_t> doomed;
  for (bool changed = true; changed;) {
    changed = false;
    for (int pass = 0; pass < 2; ++pass) {
      doomed.clear();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) {
          if (!img.at(r, c)) continue;
          const long y = static_cast<long>(r), x = static_cast<long>(c);
          // P2..P9 clockwise from north
          const int p[8] = {px(y - 1, x),     px(y - 1, x + 1), px(y, x + 1), px(y + 1, x + 1),
                            px(y + 1, x),     px(y + 1, x - 1), px(y, x - 1), px(y - 1, x - 1)};
          int neighbours = 0, transitions = 0;
          for (int i = 0; i < 8; ++i) {
            neighbours += p[i];
            transitions += (p[i] == 0 && p[(i + 1) % 8] == 1);
          }
          if (neighbours < 2 || neighbours > 6 || transitions != 1) continue;
          const bool keep = pass == 0 ? (p[0] * p[2] * p[4] != 0 || p[2] * p[4] * p[6] != 0)
                                      : (p[0] * p[2] * p[6] != 0 || p[0] * p[4] * p[6] != 0);
          if (!keep) doomed.push_back(r * cols + c);
        }
      for (std::size_t i : doomed) img.values[i] = 0;
      changed = changed || !doomed.empty();
    }
  }
  return img;
}

/// Median of a non-empty sample; even counts average the two middle values.
inline double median(std::vector<double> v) {
  require(!v.empty(), ErrorCode::empty_input, "median of an empty sample");
  const std::size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
  const double upper = v[mid];
  if (v.size() % 2 == 1) return upper;
  return 0.5 * (*std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid)) + upper);
}

struct SkeletonDistances {
  Metric hausdorff, median;
};

/// SHD is the Hausdorff distance between the two skeletons; SMD is the median of the
/// pooled nearest-point distances in both directions.
inline SkeletonDistances skeleton_distances(const LabelMap& automatic, const LabelMap& reference, std::uint8_t label,
                                            Spacing spacing) {
  detail::check_pair(automatic, reference);
  const auto a = points_of(skeletonize(automatic, label), 1), b = points_of(skeletonize(reference, label), 1);
  if (a.empty() || b.empty()) {
    const std::string why = a.empty() ? "automatic skeleton is empty" : "reference skeleton is empty";
    return {Metric::undefined(why), Metric::undefined(why)};
  }
  auto pooled = directed_distances(a, b, automatic.rows, automatic.cols, spacing);
  const auto ba = directed_distances(b, a, automatic.rows, automatic.cols, spacing);
  pooled.insert(pooled.end(), ba.begin(), ba.end());
  const double shd = *std::max_element(pooled.begin(), pooled.end());
  return {Metric::of(shd), Metric::of(median(std::move(pooled)))};
}

inline double area_mm2(const LabelMap& mask, std::uint8_t label, Spacing spacing) {
  std::size_t n = 0;
  for (std::uint8_t v : mask.values) n += v == label;
  return static_cast<double>(n) * spacing.row * spacing.col;
}

inline double mean_of(const std::vector<double>& v) {
  require(!v.empty(), ErrorCode::empty_input, "mean of an empty sample");
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

/// Sample standard deviation (n - 1 divisor); zero for a single value.
inline double sample_std(const std::vector<double>& v) {
  const double m = mean_of(v);
  if (v.size() < 2) return 0.0;
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

/// Relative standard deviation (coefficient of variation) in percent.
inline double rsd(const std::vector<double>& values) {
  require(values.size() >= 2, ErrorCode::invalid_argument, "RSD needs at least two values");
  const double m = mean_of(values);
  require(m != 0.0, ErrorCode::domain, "RSD of values with zero mean");
  return 100.0 * sample_std(values) / m;
}

// ---- per-slice reports ------------------------------------------------------------

inline constexpr std::array<std::uint8_t, 2> kEvaluatedTissues = {gray_matter, white_matter};

struct ClassMetrics {
  OverlapMetrics overlap;
  SurfaceDistances surface;
  SkeletonDistances skeleton;
  double area_automatic = 0.0;
  double area_reference = 0.0;
};

/// Metrics of one slice for GM and WM (exclusive classes: WM excludes GM).
struct SliceReport {
  SliceId id;
  std::array<ClassMetrics, 2> tissues;  // GM, WM

  const ClassMetrics& of(std::uint8_t label) const { return tissues[label == gray_matter ? 0 : 1]; }
};

inline ClassMetrics class_metrics(const LabelMap& automatic, const LabelMap& reference, std::uint8_t label,
                                  Spacing spacing) {
  ClassMetrics m;
  m.overlap = overlap_metrics(confusion(automatic, reference, label));
  m.surface = surface_distances(automatic, reference, label, spacing);
  m.skeleton = skeleton_distances(automatic, reference, label, spacing);
  m.area_automatic = area_mm2(automatic, label, spacing);
  m.area_reference = area_mm2(reference, label, spacing);
  return m;
}

inline SliceReport evaluate_slice(const LabelMap& automatic, const LabelMap& reference) {
  detail::check_pair(automatic, reference);
  SliceReport r;
  r.id = reference.id;
  for (std::size_t k = 0; k < 2; ++k)
    r.tissues[k] = class_metrics(automatic, reference, kEvaluatedTissues[k], reference.spacing);
  return r;
}

/// Named metric values of one class, in report order.
inline std::vector<std::pair<std::string, Metric>> named_metrics(const ClassMetrics& m) {
  return {{"DSC", m.overlap.dsc},
          {"J", m.overlap.jaccard},
          {"C", m.overlap.conformity},
          {"TPR", m.overlap.tpr},
          {"TNR", m.overlap.tnr},
          {"P", m.overlap.precision},
          {"MD", m.surface.mean},
          {"HD", m.surface.hausdorff},
          {"SHD", m.skeleton.hausdorff},
          {"SMD", m.skeleton.median},
          {"area_auto", Metric::of(m.area_automatic)},
          {"area_ref", Metric::of(m.area_reference)}};
}

struct Aggregate {
  double mean = std::numeric_limits<double>::quiet_NaN();
  double std = std::numeric_limits<double>::quiet_NaN();
  std::size_t count = 0;      // defined values
  std::size_t undefined = 0;  // skipped values
};

inline Aggregate aggregate(const std::vector<Metric>& values) {
  std::vector<double> v;
  Aggregate a;
  for (const Metric& m : values) {
    if (m.defined())
      v.push_back(*m.value);
    else
      ++a.undefined;
  }
  a.count = v.size();
  if (!v.empty()) {
    a.mean = mean_of(v);
    a.std = sample_std(v);
  }
  return a;
}

inline Aggregate aggregate(const std::vector<double>& values) {
  std::vector<Metric> m;
  for (double v : values) m.push_back(Metric::of(v));
  return aggregate(m);
}

inline std::string format_aggregate(const Aggregate& a, int precision = 2) {
  if (a.count == 0) return "NA";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f ± %.*f", precision, a.mean, precision, a.std);
  return buf;
}

/// Mean and std of every metric over slices, per class.
inline std::map<std::string, Aggregate> summarize(const std::vector<SliceReport>& reports, std::uint8_t label) {
  std::map<std::string, std::vector<Metric>> columns;
  for (auto& [name, m] : named_metrics(ClassMetrics{})) columns[name];  // every name, even with no reports
  for (const auto& r : reports)
    for (auto& [name, m] : named_metrics(r.of(label))) columns[name].push_back(m);
  std::map<std::string, Aggregate> out;
  for (auto& [name, values] : columns) out[name] = aggregate(values);
  return out;
}

// ---- scan-rescan statistics ---------------------------------------------------------

struct PairMeasures {
  int subject = 0, slice = 0, scan_a = 0, scan_b = 0;
  double dsc = 0.0;
  Metric hd;
  double rsd = 0.0;  // of the two areas
};

struct ReproducibilityBlock {
  std::vector<PairMeasures> pairs;
  Aggregate dsc, hd, rsd;
};

struct TissueSessionStats {
  ReproducibilityBlock intra, inter;
};

struct SessionStats {
  std::array<TissueSessionStats, 2> tissues;  // GM, WM
  std::vector<std::string> warnings;
  std::size_t slices_used = 0;
  std::size_t slices_skipped = 0;

  const TissueSessionStats& of(std::uint8_t label) const { return tissues[label == gray_matter ? 0 : 1]; }
};

namespace detail {

inline PairMeasures compare_scans(const LabelMap& a, const LabelMap& b, std::uint8_t label) {
  PairMeasures p;
  p.subject = a.id.subject;
  p.slice = a.id.slice;
  p.scan_a = a.id.scan;
  p.scan_b = b.id.scan;
  p.dsc = dice_coefficient(a, b, label);
  p.hd = surface_distances(a, b, label, a.spacing).hausdorff;
  const double area_a = area_mm2(a, label, a.spacing), area_b = area_mm2(b, label, b.spacing);
  p.rsd = area_a + area_b > 0.0 ? rsd({area_a, area_b}) : 0.0;
  return p;
}

inline void finish_block(ReproducibilityBlock& b) {
  std::vector<double> dsc, rsds;
  std::vector<Metric> hd;
  for (const auto& p : b.pairs) {
    dsc.push_back(p.dsc);
    hd.push_back(p.hd);
    rsds.push_back(p.rsd);
  }
  b.dsc = aggregate(dsc);
  b.hd = aggregate(hd);
  b.rsd = aggregate(rsds);
}

}  // namespace detail

/// Compares segmentations of the same anatomical slice across scans. Pairs of scans
/// without repositioning between them are intra-session; pairs with the repositioned
/// scan are inter-session. Slices missing any scan are skipped with a warning.
inline SessionStats session_stats(const std::vector<LabelMap>& segmentations, int repositioned_scan = 3) {
  std::map<std::pair<int, int>, std::map<int, const LabelMap*>> by_slice;
  std::set<int> scans;
  for (const auto& s : segmentations) {
    auto& slot = by_slice[{s.id.subject, s.id.slice}][s.id.scan];
    require(slot == nullptr, ErrorCode::invalid_argument,
            "two segmentations for subject " + std::to_string(s.id.subject) + " scan " + std::to_string(s.id.scan) +
                " slice " + std::to_string(s.id.slice));
    slot = &s;
    scans.insert(s.id.scan);
  }
  require(scans.size() >= 2, ErrorCode::invalid_argument, "session statistics need at least two scans");

  SessionStats stats;
  for (const auto& [key, per_scan] : by_slice) {
    if (per_scan.size() != scans.size()) {
      stats.warnings.push_back("subject " + std::to_string(key.first) + " slice " + std::to_string(key.second) +
                               ": " + std::to_string(per_scan.size()) + " of " + std::to_string(scans.size()) +
                               " scans present, slice skipped");
      ++stats.slices_skipped;
      continue;
    }
    ++stats.slices_used;
    for (auto i = per_scan.begin(); i != per_scan.end(); ++i)
      for (auto j = std::next(i); j != per_scan.end(); ++j) {
        const bool inter = i->first == repositioned_scan || j->first == repositioned_scan;
        for (std::size_t k = 0; k < 2; ++k) {
          auto& block = inter ? stats.tissues[k].inter : stats.tissues[k].intra;
          block.pairs.push_back(detail::compare_scans(*i->second, *j->second, kEvaluatedTissues[k]));
        }
      }
  }
  for (auto& t : stats.tissues) {
    detail::finish_block(t.intra);
    detail::finish_block(t.inter);
  }
  return stats;
}

// ---- consensus -----------------------------------------------------------------------

/// Per pixel, a foreground class wins when it gets more than `threshold` votes; among
/// several such classes the most voted wins, then the lowest index. Otherwise background.
inline LabelMap majority_vote(const std::vector<LabelMap>& maps, std::size_t threshold) {
  require(!maps.empty(), ErrorCode::empty_input, "majority vote over no label maps");
  for (const auto& m : maps) detail::check_pair(m, maps.front());
  LabelMap out = maps.front().like<std::uint8_t>(1, background);
  std::array<std::size_t, 256> votes{};
  for (std::size_t i = 0; i < out.values.size(); ++i) {
    votes.fill(0);
    for (const auto& m : maps) ++votes[m.values[i]];
    std::size_t best = background, best_votes = 0;
    for (std::size_t label = 1; label < votes.size(); ++label)
      if (votes[label] > threshold && votes[label] > best_votes) {
        best = label;
        best_votes = votes[label];
      }
    out.values[i] = static_cast<std::uint8_t>(best);
  }
  return out;
}

// ---- report output ---------------------------------------------------------------------

inline void write_metrics_csv(std::ostream& out, const std::vector<SliceReport>& reports) {
  out << "subject,scan,slice,class,metric,value,note\n";
  for (const auto& r : reports)
    for (std::uint8_t label : kEvaluatedTissues)
      for (const auto& [name, m] : named_metrics(r.of(label)))
        out << r.id.subject << ',' << r.id.scan << ',' << r.id.slice << ',' << tissue_name(label) << ',' << name << ','
            << to_string(m) << ',' << m.reason << '\n';
}

/// Accuracy / intra-session / inter-session blocks, mean ± std.
inline void write_session_table(std::ostream& out, const std::vector<SliceReport>& accuracy, const SessionStats& s) {
  out << "block,class,DSC,HD_mm,RSD_percent\n";
  for (std::uint8_t label : kEvaluatedTissues) {
    const auto acc = summarize(accuracy, label);
    std::vector<double> area_rsd;
    for (const auto& r : accuracy) {
      const auto& m = r.of(label);
      if (m.area_automatic + m.area_reference > 0) area_rsd.push_back(rsd({m.area_automatic, m.area_reference}));
    }
    out << "accuracy," << tissue_name(label) << ',' << format_aggregate(acc.at("DSC")) << ','
        << format_aggregate(acc.at("HD")) << ',' << format_aggregate(aggregate(area_rsd)) << '\n';
    const auto& t = s.of(label);
    for (const auto* block : {&t.intra, &t.inter})
      out << (block == &t.intra ? "intra-session," : "inter-session,") << tissue_name(label) << ','
          << format_aggregate(block->dsc) << ',' << format_aggregate(block->hd) << ',' << format_aggregate(block->rsd)
          << '\n';
  }
}

/// Challenge-style summary: one row per class with every metric as mean ± std.
inline void write_challenge_table(std::ostream& out, const std::vector<SliceReport>& reports) {
  const char* columns[] = {"DSC", "MD", "HD", "SHD", "SMD", "TPR", "TNR", "P", "J", "C"};
  out << "class";
  for (const char* c : columns) out << ',' << c;
  out << '\n';
  for (std::uint8_t label : kEvaluatedTissues) {
    const auto s = summarize(reports, label);
    out << tissue_name(label);
    for (const char* c : columns) out << ',' << format_aggregate(s.at(c));
    out << '\n';
  }
}

/// Result set of one method for the side-by-side table.
struct MethodResults {
  std::string name;
  std::vector<SliceReport> accuracy;
  SessionStats sessions;
};

/// Methods as rows, grouped by class; accuracy DSC and HD, then DSC, HD and area RSD
/// of the intra- and inter-session blocks.
inline void write_comparison_table(std::ostream& out, const std::vector<MethodResults>& methods) {
  out << "class,method,accuracy_DSC,accuracy_HD_mm,intra_DSC,intra_HD_mm,intra_RSD_percent,inter_DSC,inter_HD_mm,"
         "inter_RSD_percent\n";
  for (std::uint8_t label : kEvaluatedTissues)
    for (const auto& m : methods) {
      const auto acc = summarize(m.accuracy, label);
      const auto& t = m.sessions.of(label);
      out << tissue_name(label) << ',' << m.name << ',' << format_aggregate(acc.at("DSC")) << ','
          << format_aggregate(acc.at("HD"));
      for (const auto* block : {&t.intra, &t.inter})
        out << ',' << format_aggregate(block->dsc) << ',' << format_aggregate(block->hd) << ','
            << format_aggregate(block->rsd);
      out << '\n';
    }
}

/// Aggregates per slice position along the cord: DSC and both areas in mm^2.
inline void write_position_table(std::ostream& out, const std::vector<SliceReport>& reports) {
  std::map<int, std::vector<const SliceReport*>> by_slice;
  for (const auto& r : reports) by_slice[r.id.slice].push_back(&r);
  out << "slice,class,count,DSC,area_automatic_mm2,area_reference_mm2\n";
  for (const auto& [slice, rows] : by_slice)
    for (std::uint8_t label : kEvaluatedTissues) {
      std::vector<Metric> dsc;
      std::vector<double> a, b;
      for (const SliceReport* r : rows) {
        dsc.push_back(r->of(label).overlap.dsc);
        a.push_back(r->of(label).area_automatic);
        b.push_back(r->of(label).area_reference);
      }
      out << slice << ',' << tissue_name(label) << ',' << rows.size() << ',' << format_aggregate(aggregate(dsc)) << ','
          << format_aggregate(aggregate(a)) << ',' << format_aggregate(aggregate(b)) << '\n';
    }
}

}  // namespace cordseg
