#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <sstream>

#include "cordseg/metrics.hpp"
#include "cordseg/rng.hpp"

namespace cordseg {
namespace {

LabelMap from_rows(const std::vector<std::string>& rows) {
  LabelMap l(rows.size(), rows[0].size(), 1);
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t c = 0; c < rows[r].size(); ++c) l.at(r, c) = static_cast<std::uint8_t>(rows[r][c] - '0');
  return l;
}

LabelMap random_blob_mask(Rng& rng, std::size_t n, std::uint8_t label = 1) {
  LabelMap l(n, n, 1);
  const int blobs = 1 + static_cast<int>(rng.index(3));
  for (int b = 0; b < blobs; ++b) {
    const double cr = rng.uniform(4, n - 4.0), cc = rng.uniform(4, n - 4.0);
    const double ar = rng.uniform(2, 9), ac = rng.uniform(2, 9);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < n; ++c)
        if (std::pow((r - cr) / ar, 2) + std::pow((c - cc) / ac, 2) <= 1.0) l.at(r, c) = label;
  }
  // speckle so boundaries are irregular
  for (int k = 0; k < 20; ++k) l.values[rng.index(l.values.size())] = label;
  return l;
}

// All-pairs oracle over boundary pixels found with an explicit neighbour scan.
struct BruteSurface {
  double md, hd;
};

std::vector<std::pair<long, long>> naive_boundary(const LabelMap& m, std::uint8_t label) {
  std::vector<std::pair<long, long>> out;
  const long rows = static_cast<long>(m.rows), cols = static_cast<long>(m.cols);
  for (long r = 0; r < rows; ++r)
    for (long c = 0; c < cols; ++c) {
      if (m.at(r, c) != label) continue;
      bool boundary = false;
      const long dr[4] = {-1, 1, 0, 0}, dc[4] = {0, 0, -1, 1};
      for (int k = 0; k < 4; ++k) {
        const long nr = r + dr[k], nc = c + dc[k];
        if (nr < 0 || nc < 0 || nr >= rows || nc >= cols || m.at(nr, nc) != label) boundary = true;
      }
      if (boundary) out.emplace_back(r, c);
    }
  return out;
}

std::vector<double> brute_directed(const std::vector<std::pair<long, long>>& from,
                                   const std::vector<std::pair<long, long>>& to, Spacing s) {
  std::vector<double> out;
  for (const auto& [r, c] : from) {
    double best = INFINITY;
    for (const auto& [r2, c2] : to) {
      const double dr = static_cast<double>(r - r2) * s.row, dc = static_cast<double>(c - c2) * s.col;
      best = std::min(best, std::sqrt(dr * dr + dc * dc));
    }
    out.push_back(best);
  }
  return out;
}

BruteSurface brute_surface(const LabelMap& a, const LabelMap& b, std::uint8_t label, Spacing s) {
  const auto ab = brute_directed(naive_boundary(a, label), naive_boundary(b, label), s);
  const auto ba = brute_directed(naive_boundary(b, label), naive_boundary(a, label), s);
  double sum_ab = 0, sum_ba = 0, hd = 0;
  for (double d : ab) sum_ab += d, hd = std::max(hd, d);
  for (double d : ba) sum_ba += d, hd = std::max(hd, d);
  return {0.5 * (sum_ab / ab.size() + sum_ba / ba.size()), hd};
}

TEST(Confusion, IdenticalAndComplementary) {
  const auto a = from_rows({"0110", "1100"});
  const auto same = confusion(a, a, 1);
  EXPECT_EQ(same.fp, 0u);
  EXPECT_EQ(same.fn, 0u);
  EXPECT_EQ(same.tp, 4u);
  auto b = a;
  for (auto& v : b.values) v = v ? 0 : 1;
  const auto comp = confusion(a, b, 1);
  EXPECT_EQ(comp.tp, 0u);
  EXPECT_EQ(comp.tn, 0u);
  EXPECT_EQ(comp.total(), 8u);
  EXPECT_THROW(confusion(a, from_rows({"01"}), 1), Error);
}

TEST(Confusion, MatchesPixelLoop) {
  Rng rng(1);
  for (int t = 0; t < 20; ++t) {
    LabelMap a(16, 16, 1), b(16, 16, 1);
    for (auto& v : a.values) v = static_cast<std::uint8_t>(rng.index(3));
    for (auto& v : b.values) v = static_cast<std::uint8_t>(rng.index(3));
    for (std::uint8_t label = 0; label < 3; ++label) {
      ConfusionCounts oracle;
      for (std::size_t r = 0; r < 16; ++r)
        for (std::size_t c = 0; c < 16; ++c) {
          const int x = a.at(r, c) == label, y = b.at(r, c) == label;
          oracle.tp += x && y;
          oracle.fp += x && !y;
          oracle.fn += !x && y;
          oracle.tn += !x && !y;
        }
      EXPECT_EQ(confusion(a, b, label), oracle);
      EXPECT_EQ(confusion(a, b, label).total(), 256u);
    }
  }
}

TEST(Overlap, TwoPixelMasks) {
  const auto a = from_rows({"110"}), b = from_rows({"011"});
  const auto m = overlap_metrics(confusion(a, b, 1));
  EXPECT_DOUBLE_EQ(*m.dsc, 0.5);
  EXPECT_DOUBLE_EQ(*m.jaccard, 1.0 / 3.0);
  EXPECT_DOUBLE_EQ(*m.conformity, -100.0);
  EXPECT_DOUBLE_EQ(*m.tpr, 50.0);
  EXPECT_DOUBLE_EQ(*m.tnr, 0.0);
  EXPECT_DOUBLE_EQ(*m.precision, 50.0);
}

TEST(Overlap, ReportedGrayMatterFigures) {
  // TP 45, FP 5, FN 5 gives DSC 0.90
  const ConfusionCounts c{45, 5, 945, 5};
  const auto m = overlap_metrics(c);
  EXPECT_DOUBLE_EQ(*m.dsc, 0.9);
  EXPECT_NEAR(*m.conformity, 77.78, 0.005);
  EXPECT_NEAR(*m.conformity, 77.46, 0.5);  // published mean of per-slice values
  EXPECT_NEAR(*m.jaccard, 0.8182, 5e-5);
  EXPECT_NEAR(*m.jaccard, 0.82, 0.005);
}

TEST(Overlap, EmptyMasksAndUndefinedConformity) {
  const auto empty = from_rows({"000"}), one = from_rows({"010"});
  const auto both = overlap_metrics(confusion(empty, empty, 1));
  EXPECT_EQ(*both.dsc, 1.0);
  EXPECT_FALSE(both.conformity.defined());
  EXPECT_FALSE(both.tpr.defined());
  EXPECT_THROW(*both.conformity, Error);
  const auto miss = overlap_metrics(confusion(empty, one, 1));
  EXPECT_EQ(*miss.dsc, 0.0);
  EXPECT_FALSE(miss.conformity.defined());
  EXPECT_EQ(to_string(miss.conformity), "NA");
}

TEST(Overlap, IdentityRelations) {
  Rng rng(2);
  for (int t = 0; t < 200; ++t) {
    const auto a = random_blob_mask(rng, 24), b = random_blob_mask(rng, 24);
    const auto m = overlap_metrics(confusion(a, b, 1));
    const double d = *m.dsc;
    EXPECT_NEAR(*m.jaccard, d / (2 - d), 1e-9);
    if (m.conformity.defined()) {
      EXPECT_NEAR(*m.conformity, (3 * d - 2) / d * 100, 1e-6);
    }
    EXPECT_EQ(dice_coefficient(a, b, 1), dice_coefficient(b, a, 1));
  }
}

TEST(SurfaceDistance, IdenticalMasksAreZero) {
  Rng rng(3);
  const auto a = random_blob_mask(rng, 32);
  const auto s = surface_distances(a, a, 1, {0.25, 0.25});
  EXPECT_EQ(*s.mean, 0.0);
  EXPECT_EQ(*s.hausdorff, 0.0);
}

TEST(SurfaceDistance, ShiftedSquare) {
  const auto a = from_rows({"000000", "011110", "011110", "011110", "011110", "000000"});
  const auto b = from_rows({"000000", "001111", "001111", "001111", "001111", "000000"});
  const auto s = surface_distances(a, b, 1, {0.25, 0.25});
  EXPECT_DOUBLE_EQ(*s.hausdorff, 0.25);
  const auto oracle = brute_surface(a, b, 1, {0.25, 0.25});
  EXPECT_EQ(*s.mean, oracle.md);
}

TEST(SurfaceDistance, MatchesAllPairsOracleExactly) {
  Rng rng(4);
  const Spacing spacings[] = {{1.0, 1.0}, {0.25, 0.25}, {0.5, 0.3}};
  for (int t = 0; t < 100; ++t) {
    const auto a = random_blob_mask(rng, 32), b = random_blob_mask(rng, 32);
    const Spacing sp = spacings[t % 3];
    const auto s = surface_distances(a, b, 1, sp);
    const auto oracle = brute_surface(a, b, 1, sp);
    EXPECT_EQ(*s.hausdorff, oracle.hd);
    EXPECT_EQ(*s.mean, oracle.md);
    const auto swapped = surface_distances(b, a, 1, sp);
    EXPECT_EQ(*swapped.hausdorff, *s.hausdorff);
    EXPECT_NEAR(*swapped.mean, *s.mean, 1e-15);
  }
}

TEST(SurfaceDistance, TranslationInvariant) {
  Rng rng(5);
  for (int t = 0; t < 10; ++t) {
    const auto a = random_blob_mask(rng, 32), b = random_blob_mask(rng, 32);
    LabelMap a2(48, 48, 1), b2(48, 48, 1);
    for (std::size_t r = 0; r < 32; ++r)
      for (std::size_t c = 0; c < 32; ++c) {
        a2.at(r + 9, c + 5) = a.at(r, c);
        b2.at(r + 9, c + 5) = b.at(r, c);
      }
    // keep masks off the image edge in both framings so the boundaries agree
    bool touches = false;
    for (std::size_t i = 0; i < 32; ++i)
      for (const auto* m : {&a, &b})
        touches = touches || m->at(0, i) || m->at(31, i) || m->at(i, 0) || m->at(i, 31);
    if (touches) continue;
    const auto s = surface_distances(a, b, 1, {0.25, 0.25}), s2 = surface_distances(a2, b2, 1, {0.25, 0.25});
    EXPECT_EQ(*s.hausdorff, *s2.hausdorff);
    EXPECT_NEAR(*s.mean, *s2.mean, 1e-12);
    const auto k = skeleton_distances(a, b, 1, {0.25, 0.25}), k2 = skeleton_distances(a2, b2, 1, {0.25, 0.25});
    EXPECT_EQ(*k.hausdorff, *k2.hausdorff);
    EXPECT_EQ(*k.median, *k2.median);
    EXPECT_EQ(dice_coefficient(a, b, 1), dice_coefficient(a2, b2, 1));
  }
}

TEST(SurfaceDistance, EmptyMaskIsUndefined) {
  const auto a = from_rows({"0000", "0110"}), empty = from_rows({"0000", "0000"});
  const auto s = surface_distances(a, empty, 1, {1, 1});
  EXPECT_FALSE(s.hausdorff.defined());
  EXPECT_FALSE(s.mean.defined());
  EXPECT_NE(s.mean.reason.find("reference"), std::string::npos);
}

TEST(Skeleton, BarThinsToLine) {
  LabelMap bar(7, 14, 1);
  for (std::size_t r = 2; r < 5; ++r)
    for (std::size_t c = 2; c < 12; ++c) bar.at(r, c) = 1;
  const auto sk = skeletonize(bar, 1);
  const auto pts = points_of(sk, 1);
  ASSERT_GE(pts.size(), 6u);
  for (const auto& p : pts) EXPECT_EQ(p.row, 3u);
  for (std::size_t i = 1; i < pts.size(); ++i) EXPECT_EQ(pts[i].col, pts[i - 1].col + 1);
}

TEST(Skeleton, ThinAndInsideMask) {
  Rng rng(6);
  for (int t = 0; t < 30; ++t) {
    const auto m = random_blob_mask(rng, 32);
    const auto sk = skeletonize(m, 1);
    EXPECT_FALSE(points_of(sk, 1).empty());
    for (std::size_t i = 0; i < sk.values.size(); ++i)
      if (sk.values[i]) {
        EXPECT_EQ(m.values[i], 1);
      }
  }
}

TEST(Skeleton, DistancesOrderedAndZeroOnIdentity) {
  Rng rng(7);
  for (int t = 0; t < 50; ++t) {
    const auto a = random_blob_mask(rng, 32), b = random_blob_mask(rng, 32);
    const auto k = skeleton_distances(a, b, 1, {0.25, 0.25});
    EXPECT_LE(*k.median, *k.hausdorff);
    const auto same = skeleton_distances(a, a, 1, {0.25, 0.25});
    EXPECT_EQ(*same.hausdorff, 0.0);
    EXPECT_EQ(*same.median, 0.0);
  }
  EXPECT_FALSE(skeleton_distances(from_rows({"00"}), from_rows({"01"}), 1, {1, 1}).median.defined());
}

TEST(Median, OddAndEven) {
  EXPECT_EQ(median({3, 1, 2}), 2.0);
  EXPECT_EQ(median({4, 1, 3, 2}), 2.5);
  EXPECT_THROW(median({}), Error);
}

TEST(Area, Arithmetic) {
  LabelMap m(10, 10, 1, 1);
  EXPECT_NEAR(area_mm2(m, 1, {0.067, 0.067}), 0.4489, 1e-12);
  EXPECT_EQ(area_mm2(LabelMap(4, 4, 1), 1, {1, 1}), 0.0);
  LabelMap checker(16, 16, 1);
  for (std::size_t r = 0; r < 16; ++r)
    for (std::size_t c = 0; c < 16; ++c) checker.at(r, c) = (r + c) % 2;
  EXPECT_DOUBLE_EQ(area_mm2(checker, 1, {0.25, 0.5}), 128 * 0.125);
}

TEST(Rsd, ClosedForms) {
  EXPECT_EQ(rsd({100, 100, 100}), 0.0);
  EXPECT_NEAR(rsd({90, 110}), 100 * std::sqrt(200.0) / 100, 1e-12);
  EXPECT_NEAR(rsd({90, 110}), 14.1421, 1e-4);
  Rng rng(8);
  std::vector<double> v(7);
  for (double& x : v) x = rng.uniform(1, 10);
  auto scaled = v;
  for (double& x : scaled) x *= 3.7;
  EXPECT_NEAR(rsd(v), rsd(scaled), 1e-12);
  EXPECT_THROW(rsd({5}), Error);
  EXPECT_THROW(rsd({1, -1}), Error);
}

std::vector<LabelMap> three_scans(Rng& rng, int subjects, int slices) {
  std::vector<LabelMap> out;
  for (int s = 1; s <= subjects; ++s)
    for (int sl = 1; sl <= slices; ++sl) {
      LabelMap base = random_blob_mask(rng, 32, white_matter);
      for (std::size_t i = 0; i < base.values.size(); i += 7)
        if (base.values[i] == white_matter) base.values[i] = gray_matter;
      base.spacing = {0.25, 0.25};
      for (int scan = 1; scan <= 3; ++scan) {
        LabelMap m = base;
        m.id = {s, scan, sl};
        out.push_back(m);
      }
    }
  return out;
}

TEST(SessionStats, IdenticalScans) {
  Rng rng(9);
  const auto stats = session_stats(three_scans(rng, 2, 3));
  EXPECT_EQ(stats.slices_used, 6u);
  for (std::uint8_t label : kEvaluatedTissues) {
    const auto& t = stats.of(label);
    EXPECT_EQ(t.intra.pairs.size(), 6u);
    EXPECT_EQ(t.inter.pairs.size(), 12u);
    EXPECT_EQ(t.intra.dsc.mean, 1.0);
    EXPECT_EQ(t.inter.dsc.mean, 1.0);
    EXPECT_EQ(t.intra.rsd.mean, 0.0);
    EXPECT_EQ(t.inter.rsd.mean, 0.0);
  }
}

TEST(SessionStats, PerturbingRepositionedScanOnlyHitsInter) {
  Rng rng(10);
  auto scans = three_scans(rng, 2, 2);
  for (auto& m : scans)
    if (m.id.scan == 3)
      for (std::size_t r = 0; r < m.rows; ++r)
        for (std::size_t c = m.cols - 1; c > 0; --c) m.at(r, c) = m.at(r, c - 1);
  const auto stats = session_stats(scans);
  const auto& wm = stats.of(white_matter);
  EXPECT_EQ(wm.intra.dsc.mean, 1.0);
  EXPECT_LT(wm.inter.dsc.mean, 1.0);
  EXPECT_GT(wm.inter.hd.mean, 0.0);
  for (const auto& p : wm.inter.pairs) EXPECT_EQ(p.scan_b, 3);
  for (const auto& p : wm.intra.pairs) EXPECT_EQ(p.scan_b, 2);
}

TEST(SessionStats, MatchesPairwiseLoop) {
  Rng rng(11);
  auto scans = three_scans(rng, 2, 2);
  for (auto& m : scans)
    for (int k = 0; k < 15; ++k) m.values[rng.index(m.values.size())] = static_cast<std::uint8_t>(rng.index(3));
  const auto stats = session_stats(scans);
  for (std::uint8_t label : kEvaluatedTissues) {
    std::vector<double> intra, inter, inter_rsd;
    for (const auto& a : scans)
      for (const auto& b : scans) {
        if (a.id.subject != b.id.subject || a.id.slice != b.id.slice || a.id.scan >= b.id.scan) continue;
        double both = 0, total = 0;
        for (std::size_t i = 0; i < a.values.size(); ++i) {
          both += a.values[i] == label && b.values[i] == label;
          total += (a.values[i] == label) + (b.values[i] == label);
        }
        const double d = 2 * both / total;
        const double area_a = area_mm2(a, label, a.spacing), area_b = area_mm2(b, label, b.spacing);
        const double m = (area_a + area_b) / 2;
        const double sd = std::sqrt((area_a - m) * (area_a - m) + (area_b - m) * (area_b - m));
        if (b.id.scan == 3) {
          inter.push_back(d);
          inter_rsd.push_back(100 * sd / m);
        } else {
          intra.push_back(d);
        }
      }
    auto mean = [](const std::vector<double>& v) {
      double s = 0;
      for (double x : v) s += x;
      return s / v.size();
    };
    const auto& t = stats.of(label);
    EXPECT_NEAR(t.intra.dsc.mean, mean(intra), 1e-12);
    EXPECT_NEAR(t.inter.dsc.mean, mean(inter), 1e-12);
    EXPECT_NEAR(t.inter.rsd.mean, mean(inter_rsd), 1e-9);
    EXPECT_EQ(t.inter.dsc.count, inter.size());
  }
}

TEST(SessionStats, MissingScanSkipsSlice) {
  Rng rng(12);
  auto scans = three_scans(rng, 1, 3);
  scans.erase(scans.begin() + 4);  // slice 2, scan 2
  const auto stats = session_stats(scans);
  EXPECT_EQ(stats.slices_used, 2u);
  EXPECT_EQ(stats.slices_skipped, 1u);
  ASSERT_EQ(stats.warnings.size(), 1u);
  EXPECT_NE(stats.warnings[0].find("slice 2"), std::string::npos);
  EXPECT_THROW(session_stats({scans[0]}), Error);
}

TEST(MajorityVote, Thresholds) {
  const auto gm = from_rows({"1"}), bg = from_rows({"0"}), wm = from_rows({"2"});
  EXPECT_EQ(majority_vote({gm, gm, gm, bg}, 2).values[0], gray_matter);
  EXPECT_EQ(majority_vote({gm, gm, bg, bg}, 2).values[0], background);
  EXPECT_EQ(majority_vote({gm, gm, wm, wm}, 1).values[0], gray_matter);  // tie goes to the lower class
  EXPECT_EQ(majority_vote({gm, wm, wm, wm}, 1).values[0], white_matter);
  EXPECT_THROW(majority_vote({}, 2), Error);
  EXPECT_THROW(majority_vote({gm, from_rows({"11"})}, 1), Error);
  Rng rng(13);
  LabelMap m(16, 16, 1);
  for (auto& v : m.values) v = static_cast<std::uint8_t>(rng.index(3));
  EXPECT_EQ(majority_vote({m, m, m, m}, 2).values, m.values);
}

TEST(Reports, CsvAndTables) {
  Rng rng(14);
  const auto scans = three_scans(rng, 1, 2);
  std::vector<SliceReport> reports;
  for (const auto& s : scans) reports.push_back(evaluate_slice(s, s));
  std::ostringstream csv, table, challenge;
  write_metrics_csv(csv, reports);
  EXPECT_NE(csv.str().find("1,2,1,GM,DSC,1,"), std::string::npos);
  write_session_table(table, reports, session_stats(scans));
  EXPECT_NE(table.str().find("inter-session,WM,1.00 ± 0.00"), std::string::npos) << table.str();
  write_challenge_table(challenge, reports);
  EXPECT_NE(challenge.str().find("GM,1.00 ± 0.00,0.00 ± 0.00"), std::string::npos) << challenge.str();
}

TEST(Reports, ComparisonTableRowsPerClassAndMethod) {
  Rng rng(15);
  const auto scans = three_scans(rng, 1, 2);
  std::vector<SliceReport> perfect, shifted;
  for (const auto& s : scans) {
    perfect.push_back(evaluate_slice(s, s));
    LabelMap worse = s;
    for (std::size_t i = 0; i < worse.values.size(); i += 5) worse.values[i] = background;
    shifted.push_back(evaluate_slice(worse, s));
  }
  const SessionStats stats = session_stats(scans);
  std::ostringstream out;
  write_comparison_table(out, {{"a", perfect, stats}, {"b", shifted, stats}, {"manual", {}, stats}});
  std::istringstream in(out.str());
  std::vector<std::string> lines;
  for (std::string line; std::getline(in, line);) lines.push_back(line);
  ASSERT_EQ(lines.size(), 7u);
  EXPECT_EQ(lines[0].rfind("class,method,accuracy_DSC", 0), 0u);
  EXPECT_EQ(lines[1].rfind("GM,a,1.00 ± 0.00,0.00 ± 0.00,1.00 ± 0.00", 0), 0u) << lines[1];
  EXPECT_EQ(lines[2].rfind("GM,b,0.", 0), 0u) << lines[2];
  EXPECT_EQ(lines[3].rfind("GM,manual,NA,NA,1.00 ± 0.00", 0), 0u) << lines[3];
  EXPECT_EQ(lines[4].rfind("WM,a,", 0), 0u);
}

TEST(Reports, PositionTableGroupsBySlice) {
  Rng rng(16);
  const auto scans = three_scans(rng, 2, 2);
  std::vector<SliceReport> reports;
  for (const auto& s : scans) reports.push_back(evaluate_slice(s, s));
  std::ostringstream out;
  write_position_table(out, reports);
  const std::string text = out.str();
  // 2 subjects x 3 scans at each position
  EXPECT_NE(text.find("\n1,GM,6,1.00 ± 0.00,"), std::string::npos) << text;
  EXPECT_NE(text.find("\n2,WM,6,1.00 ± 0.00,"), std::string::npos) << text;
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 5);
}

}  // namespace
}  // namespace cordseg
