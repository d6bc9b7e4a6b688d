#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "cordseg/io.hpp"
#include "cordseg/manifest.hpp"
#include "cordseg/preprocess.hpp"
#include "cordseg/rng.hpp"
#include "test_support.hpp"

namespace cordseg {
namespace {

using testing::TempDir;

MultiChannelSlice random_slice(Rng& rng, std::size_t rows, std::size_t cols, std::size_t channels) {
  MultiChannelSlice s(rows, cols, channels);
  for (float& v : s.values) v = static_cast<float>(rng.normal(0.0, 100.0));
  s.spacing = {0.3125, 0.25};
  s.id = {7, 2, 11};
  return s;
}

template <class T>
Image<T> random_image(Rng& rng, std::size_t rows, std::size_t cols, std::size_t channels) {
  Image<T> s(rows, cols, channels);
  for (T& v : s.values) v = static_cast<T>(rng.uniform(-1.0, 1.0));
  return s;
}

ErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no error raised";
  return ErrorCode::invalid_argument;
}

std::string serialized(const MultiChannelSlice& s) {
  std::ostringstream out;
  write_raster(out, s);
  return out.str();
}

TEST(RasterFile, RoundTripIsBitwise) {
  Rng rng(1);
  TempDir dir("io");
  MultiChannelSlice s = random_slice(rng, 32, 32, 8);
  s.values[5] = -0.0f;
  s.values[6] = 1e-40f;  // subnormal
  save_slice(dir / "a.mcs", s);
  const MultiChannelSlice back = load_slice(dir / "a.mcs");
  EXPECT_EQ(back.rows, 32u);
  EXPECT_EQ(back.cols, 32u);
  EXPECT_EQ(back.channels, 8u);
  EXPECT_EQ(back.spacing, s.spacing);
  EXPECT_EQ(back.id, s.id);
  ASSERT_EQ(back.values.size(), s.values.size());
  EXPECT_EQ(std::memcmp(back.values.data(), s.values.data(), s.values.size() * sizeof(float)), 0);
}

TEST(RasterFile, PayloadIsPlanarLittleEndian) {
  MultiChannelSlice s(1, 2, 2);
  s.values = {1.0f, 2.0f, 3.0f, 4.0f};  // pixel-interleaved
  const std::string text = serialized(s);
  const std::string payload = text.substr(text.size() - 16);
  float planar[4];
  std::memcpy(planar, payload.data(), 16);
  EXPECT_EQ(planar[0], 1.0f);
  EXPECT_EQ(planar[1], 3.0f);
  EXPECT_EQ(planar[2], 2.0f);
  EXPECT_EQ(planar[3], 4.0f);
  EXPECT_EQ(static_cast<unsigned char>(payload[2]), 0x80);  // 1.0f = 00 00 80 3f
  EXPECT_EQ(static_cast<unsigned char>(payload[3]), 0x3f);
}

TEST(RasterFile, LabelMapRoundTrip) {
  TempDir dir("io");
  LabelMap l(3, 4, 1);
  for (std::size_t i = 0; i < l.values.size(); ++i) l.values[i] = static_cast<std::uint8_t>(i % 3);
  l.id = {2, 3, 12};
  save_labels(dir / "l.mcl", l);
  const LabelMap back = load_labels(dir / "l.mcl");
  EXPECT_EQ(back.values, l.values);
  EXPECT_EQ(back.id, l.id);
  EXPECT_EQ(code_of([&] { load_slice(dir / "l.mcl"); }), ErrorCode::format);
}

TEST(RasterFile, TruncatedPayloadNamesByteCounts) {
  Rng rng(2);
  const std::string text = serialized(random_slice(rng, 32, 32, 8));
  std::istringstream in(text.substr(0, text.size() - 100));
  try {
    read_raster<float>(in);
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::format);
    const std::string msg = e.what();
    EXPECT_NE(msg.find("32768"), std::string::npos) << msg;
    EXPECT_NE(msg.find("32668"), std::string::npos) << msg;
  }
}

TEST(RasterFile, ChecksumMismatchIsIntegrityError) {
  Rng rng(3);
  std::string text = serialized(random_slice(rng, 8, 8, 2));
  text[text.size() - 7] ^= 0x01;
  std::istringstream in(text);
  EXPECT_EQ(code_of([&] { read_raster<float>(in); }), ErrorCode::integrity);
}

TEST(RasterFile, MalformedHeaders) {
  Rng rng(4);
  const std::string good = serialized(random_slice(rng, 4, 4, 1));
  auto edited = [&good](const std::string& from, const std::string& to) {
    std::string s = good;
    s.replace(s.find(from), from.size(), to);
    return s;
  };
  for (const std::string& text :
       {edited("CORDSEG-MCS 1", "CORDSEG-MCS 2"), edited("CORDSEG-MCS", "PNGISH-MCS"), edited("rows 4", "rows four"),
        edited("rows 4\n", ""), edited("end\n", "finish\n"), edited("payload_bytes 64", "payload_bytes 60"),
        std::string()}) {
    std::istringstream in(text);
    EXPECT_EQ(code_of([&] { read_raster<float>(in); }), ErrorCode::format) << text.substr(0, 40);
  }
  EXPECT_EQ(code_of([] { load_slice("/nonexistent/x.mcs"); }), ErrorCode::io);
}

TEST(RasterFile, RejectsInvalidSlices) {
  MultiChannelSlice s(2, 2, 1);
  s.values[0] = std::nanf("");
  std::ostringstream out;
  EXPECT_EQ(code_of([&] { write_raster(out, s); }), ErrorCode::not_finite);
  s.values[0] = 0.0f;
  s.spacing.row = 0.0;
  EXPECT_EQ(code_of([&] { write_raster(out, s); }), ErrorCode::invalid_argument);
}

TEST(Png, GrayRoundTripAndOverlaySize) {
  TempDir dir("png");
  Image<std::uint8_t> g(5, 7, 1);
  for (std::size_t i = 0; i < g.values.size(); ++i) g.values[i] = static_cast<std::uint8_t>(i * 7);
  write_png_gray(dir / "g.png", g);
  const auto back = read_png_gray(dir / "g.png");
  EXPECT_EQ(back.rows, 5u);
  EXPECT_EQ(back.cols, 7u);
  EXPECT_EQ(back.values, g.values);
  EXPECT_EQ(code_of([&] { read_png_gray(dir / "missing.png"); }), ErrorCode::format);
}

TEST(Png, DisplayScaling) {
  Image<double> d(1, 3, 1);
  d.values = {-1.0, 0.0, 1.0};
  EXPECT_EQ(to_display(d).values, (std::vector<std::uint8_t>{0, 128, 255}));
}

TEST(Lanczos, KernelValues) {
  EXPECT_EQ(lanczos_kernel(0.0), 1.0);
  EXPECT_NEAR(lanczos_kernel(1.0), 0.0, 1e-15);
  EXPECT_EQ(lanczos_kernel(3.0), 0.0);
  EXPECT_EQ(lanczos_kernel(-4.5), 0.0);
  // sinc(1/2) sinc(1/6) = (2/pi) (6 sin(pi/6) / pi)
  EXPECT_NEAR(lanczos_kernel(0.5), 2.0 / std::numbers::pi * 6.0 * std::sin(std::numbers::pi / 6) / std::numbers::pi,
              1e-15);
}

TEST(Lanczos, FactorOneIsIdentity) {
  Rng rng(5);
  const auto img = random_image<double>(rng, 17, 13, 3);
  const auto out = lanczos_resample(img, 1.0);
  ASSERT_EQ(out.values.size(), img.values.size());
  for (std::size_t i = 0; i < img.values.size(); ++i) EXPECT_NEAR(out.values[i], img.values[i], 1e-12);
  EXPECT_EQ(out.spacing, img.spacing);
}

TEST(Lanczos, ConstantsStayConstant) {
  Image<double> img(6, 5, 2, 3.75);
  img.spacing = {0.5, 0.5};
  const auto up = lanczos_resample(img, 10.0);
  EXPECT_EQ(up.rows, 60u);
  EXPECT_EQ(up.cols, 50u);
  EXPECT_DOUBLE_EQ(up.spacing.row, 0.05);
  for (double v : up.values) EXPECT_NEAR(v, 3.75, 1e-9);
  const auto down = lanczos_resample(img, 0.4);
  for (double v : down.values) EXPECT_NEAR(v, 3.75, 1e-9);
}

// Direct sum of sinc(x) sinc(x/3) taps around each output center, edge samples repeated.
std::vector<long double> windowed_sinc_upsample(const std::vector<double>& x, int factor) {
  const long double pi = std::numbers::pi_v<long double>;
  auto sinc = [pi](long double t) { return t == 0 ? 1.0L : std::sin(pi * t) / (pi * t); };
  const long n = static_cast<long>(x.size());
  std::vector<long double> out(x.size() * static_cast<std::size_t>(factor));
  for (std::size_t j = 0; j < out.size(); ++j) {
    const long double center = (static_cast<long double>(j) + 0.5L) / factor - 0.5L;
    long double num = 0, den = 0;
    for (long k = -n - 4; k < 2 * n + 4; ++k) {
      const long double t = static_cast<long double>(k) - center;
      if (std::abs(t) >= 3) continue;
      const long double w = sinc(t) * sinc(t / 3);
      num += w * x[static_cast<std::size_t>(std::clamp(k, 0L, n - 1))];
      den += w;
    }
    out[j] = num / den;
  }
  return out;
}

TEST(Lanczos, RampMatchesWindowedSincOracle) {
  std::vector<double> ramp(24);
  for (std::size_t i = 0; i < ramp.size(); ++i) ramp[i] = 0.5 * static_cast<double>(i) - 3.0;
  Image<double> img(1, ramp.size(), 1);
  img.values = ramp;
  const auto out = lanczos_resample(img, 1.0, 2.0);
  const auto oracle = windowed_sinc_upsample(ramp, 2);
  ASSERT_EQ(out.values.size(), oracle.size());
  for (std::size_t j = 0; j < oracle.size(); ++j) EXPECT_NEAR(out.values[j], static_cast<double>(oracle[j]), 1e-9);
  // away from the borders the interpolant of a ramp is the ramp
  for (std::size_t j = 8; j + 8 < oracle.size(); ++j)
    EXPECT_NEAR(out.values[j], 0.5 * ((static_cast<double>(j) + 0.5) / 2.0 - 0.5) - 3.0, 1e-2);
}

TEST(Lanczos, CommutesWithChannelPermutation) {
  Rng rng(6);
  const auto img = random_image<double>(rng, 9, 11, 3);
  auto permuted = img;
  const std::size_t perm[3] = {2, 0, 1};
  for (std::size_t p = 0; p < img.pixels(); ++p)
    for (std::size_t ch = 0; ch < 3; ++ch) permuted.values[p * 3 + ch] = img.values[p * 3 + perm[ch]];
  const auto a = lanczos_resample(img, 2.5, 0.7);
  const auto b = lanczos_resample(permuted, 2.5, 0.7);
  for (std::size_t p = 0; p < a.pixels(); ++p)
    for (std::size_t ch = 0; ch < 3; ++ch) EXPECT_EQ(b.values[p * 3 + ch], a.values[p * 3 + perm[ch]]);
}

TEST(Lanczos, RejectsBadFactorsAndSetsSpacing) {
  Image<double> img(4, 4, 1);
  EXPECT_EQ(code_of([&] { lanczos_resample(img, 0.0); }), ErrorCode::invalid_argument);
  EXPECT_EQ(code_of([&] { lanczos_resample(img, -2.0); }), ErrorCode::invalid_argument);
  EXPECT_EQ(code_of([&] { lanczos_resample(img, std::nan("")); }), ErrorCode::invalid_argument);
  img.spacing = {0.5, 1.0};
  const auto out = resample_to_spacing(img, 0.25);
  EXPECT_EQ(out.rows, 8u);
  EXPECT_EQ(out.cols, 16u);
  EXPECT_EQ(out.spacing, (Spacing{0.25, 0.25}));
}

TEST(LabelResample, NearestKeepsPalette) {
  LabelMap l(2, 2, 1);
  l.values = {0, 1, 2, 1};
  const auto up = resample_labels(l, 2.0, 2.0);
  EXPECT_EQ(up.values, (std::vector<std::uint8_t>{0, 0, 1, 1, 0, 0, 1, 1, 2, 2, 1, 1, 2, 2, 1, 1}));
}

TEST(CropOrPad, InnerNinthOfUpsampledSlice) {
  Image<float> img(1950, 1950, 1);
  for (std::size_t r = 0; r < img.rows; ++r)
    for (std::size_t c = 0; c < img.cols; ++c) img.at(r, c) = static_cast<float>(r * 10000 + c);
  const auto out = crop_inner_ninth(img);
  EXPECT_EQ(out.rows, 650u);
  EXPECT_EQ(out.cols, 650u);
  EXPECT_EQ(out.at(0, 0), img.at(650, 650));
  EXPECT_EQ(out.at(649, 649), img.at(1299, 1299));
}

TEST(CropOrPad, IdentityAndIdempotence) {
  Rng rng(7);
  const auto img = random_image<float>(rng, 64, 48, 2);
  EXPECT_EQ(center_crop_or_pad(img, 64, 48).values, img.values);
  const auto once = center_crop_or_pad(img, 40, 50);
  EXPECT_EQ(center_crop_or_pad(once, 40, 50).values, once.values);
  EXPECT_EQ(once.at(0, 1, 1), img.at(12, 0, 1));
  EXPECT_EQ(once.at(0, 0, 0), 0.0f);
}

TEST(CropOrPad, PadIsInvertedByCrop) {
  Rng rng(8);
  for (std::size_t n : {100u, 101u}) {
    const auto img = random_image<float>(rng, n, n, 1);
    const auto padded = center_crop_or_pad(img, 640, 640, -5.0f);
    EXPECT_EQ(padded.at(0, 0), -5.0f);
    EXPECT_EQ(padded.at(639, 639), -5.0f);
    const std::size_t before = (640 - n) / 2;
    EXPECT_EQ(padded.at(before, before), img.at(0, 0));
    EXPECT_EQ(padded.at(before - 1, before), -5.0f);
    EXPECT_EQ(center_crop_or_pad(padded, n, n).values, img.values);
  }
}

TEST(Highpass, ConstantGoesToZero) {
  Image<double> img(30, 30, 2, 42.0);
  const auto hp = gaussian_highpass(img, 10.0);
  for (double v : hp.values) EXPECT_NEAR(v, 0.0, 1e-9);
  for (double v : gaussian_highpass(hp, 10.0).values) EXPECT_NEAR(v, 0.0, 1e-9);
}

TEST(Highpass, ImpulseMatchesKernelOracle) {
  const std::size_t n = 41, mid = 20;
  Image<double> img(n, n, 1);
  img.at(mid, mid) = 1.0;
  const auto hp = gaussian_highpass(img, 10.0);
  // truncation radius ceil(4 sqrt(10)) = 13
  std::vector<long double> g(27);
  long double total = 0;
  for (int k = -13; k <= 13; ++k) total += g[static_cast<std::size_t>(k + 13)] = std::exp(-k * k / 20.0L);
  auto tap = [&](long d) { return std::abs(d) > 13 ? 0.0L : g[static_cast<std::size_t>(d + 13)] / total; };
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < n; ++c) {
      const long double blur = tap(static_cast<long>(r) - 20) * tap(static_cast<long>(c) - 20);
      const long double expected = (r == mid && c == mid ? 1.0L : 0.0L) - blur;
      EXPECT_NEAR(hp.at(r, c), static_cast<double>(expected), 1e-9);
    }
}

TEST(Highpass, RejectsDcOnSmoothInputs) {
  Image<double> img(128, 128, 1);
  for (std::size_t r = 0; r < 128; ++r)
    for (std::size_t c = 0; c < 128; ++c)
      img.at(r, c) = 3.0 * static_cast<double>(r) - 2.0 * static_cast<double>(c) + 50.0 +
                     std::sin(2 * std::numbers::pi * static_cast<double>(c) / 32.0);
  const auto hp = gaussian_highpass(img, 10.0);
  double total = 0.0, energy = 0.0;
  for (std::size_t r = 16; r < 112; ++r)
    for (std::size_t c = 16; c < 112; ++c) {
      total += hp.at(r, c);
      energy += std::abs(img.at(r, c));
    }
  EXPECT_LT(std::abs(total), 1e-9 * energy);
  EXPECT_EQ(code_of([&] { gaussian_highpass(img, 0.0); }), ErrorCode::invalid_argument);
}

TEST(Preprocess, UpsampleCropResamplePad) {
  Rng rng(9);
  auto img = random_image<float>(rng, 9, 9, 2);
  img.spacing = {0.5, 0.5};
  LabelMap labels = img.like<std::uint8_t>(1, gray_matter);
  PreprocessConfig cfg;
  cfg.upsample_factor = 3.0;
  cfg.target_spacing_mm = 0.25;
  cfg.target_extent = 20;
  const auto out = preprocess(img, labels, cfg);
  // 27 px at 1/6 mm, crop to 9 px, resample to 0.25 mm gives 6 px, pad to 20
  EXPECT_EQ(out.image.rows, 20u);
  EXPECT_EQ(out.image.spacing, (Spacing{0.25, 0.25}));
  EXPECT_EQ(out.labels.rows, 20u);
  EXPECT_EQ(out.labels.at(10, 10), gray_matter);
  EXPECT_EQ(out.labels.at(0, 0), background);
  labels.values[3] = 7;
  EXPECT_EQ(code_of([&] { preprocess(img, labels, cfg); }), ErrorCode::invalid_argument);
  EXPECT_EQ(code_of([&] { preprocess(img, LabelMap(9, 8, 1), cfg); }), ErrorCode::shape_mismatch);
}

std::vector<ManifestEntry> synthetic_entries(int subjects, int scans, int slices) {
  std::vector<ManifestEntry> out;
  for (int s = 1; s <= subjects; ++s)
    for (int sc = 1; sc <= scans; ++sc)
      for (int sl = 1; sl <= slices; ++sl) {
        ManifestEntry e;
        e.id = {s, sc, sl};
        e.image = slice_file_name(e.id);
        e.label = label_file_name(e.id, 1);
        out.push_back(e);
      }
  return out;
}

TEST(Manifest, ThreeGroupsOfEight) {
  SplitSpec spec{contiguous_groups(1, 24, 3), 2, std::nullopt};
  ASSERT_EQ(spec.groups.size(), 3u);
  for (const auto& g : spec.groups) EXPECT_EQ(g.size(), 8u);
  const auto m = build_manifest(synthetic_entries(24, 1, 2), spec);
  EXPECT_EQ(m.subjects(Split::test).size(), 8u);
  EXPECT_EQ(m.subjects(Split::validation), (std::set<int>{1}));
  EXPECT_EQ(m.subjects(Split::train).size(), 15u);
  EXPECT_EQ(*m.subjects(Split::test).begin(), 17);
  EXPECT_NO_THROW(check_subject_disjoint(m));
  // deterministic ordering irrespective of input order
  auto shuffled = synthetic_entries(24, 1, 2);
  std::reverse(shuffled.begin(), shuffled.end());
  const auto m2 = build_manifest(shuffled, spec);
  ASSERT_EQ(m2.entries.size(), m.entries.size());
  for (std::size_t i = 0; i < m.entries.size(); ++i) EXPECT_EQ(m2.entries[i].image, m.entries[i].image);
}

TEST(Manifest, Errors) {
  SplitSpec spec{{{1, 2}, {3}}, 1, std::nullopt};
  EXPECT_EQ(code_of([&] { build_manifest(std::vector<ManifestEntry>{}, spec); }), ErrorCode::empty_input);
  auto entries = synthetic_entries(3, 1, 1);
  entries.push_back(entries[0]);
  EXPECT_EQ(code_of([&] { build_manifest(entries, spec); }), ErrorCode::invalid_argument);
  SplitSpec overlapping{{{1, 2}, {2, 3}}, 1, std::nullopt};
  EXPECT_EQ(code_of([&] { build_manifest(synthetic_entries(3, 1, 1), overlapping); }), ErrorCode::split_conflict);
  SplitSpec bad_val{{{1, 2}, {3}}, 1, 3};
  EXPECT_EQ(code_of([&] { build_manifest(synthetic_entries(3, 1, 1), bad_val); }), ErrorCode::split_conflict);
  DatasetManifest mixed{synthetic_entries(1, 2, 1)};
  mixed.entries[1].split = Split::test;
  EXPECT_EQ(code_of([&] { check_subject_disjoint(mixed); }), ErrorCode::split_conflict);
  TempDir dir("manifest");
  EXPECT_EQ(code_of([&] { build_manifest(dir.path(), spec); }), ErrorCode::empty_input);
}

TEST(Manifest, DiscoverSaveLoad) {
  TempDir dir("manifest");
  for (int s = 1; s <= 3; ++s) {
    MultiChannelSlice img(2, 2, 1);
    img.id = {s, 1, 1};
    save_slice(dir / slice_file_name(img.id), img);
    for (int rater = 1; rater <= 2; ++rater) save_labels(dir / label_file_name(img.id, rater), LabelMap(2, 2, 1));
  }
  std::ofstream(dir / "notes.txt") << "ignored";
  const auto m = build_manifest(dir.path(), SplitSpec{{{1, 2}, {3}}, 1, 2});
  EXPECT_EQ(m.entries.size(), 6u);
  EXPECT_EQ(m.raters(), (std::set<int>{1, 2}));
  EXPECT_EQ(m.select(Split::validation, 2).size(), 1u);
  save_manifest(dir / "manifest.txt", m);
  const auto back = load_manifest(dir / "manifest.txt");
  ASSERT_EQ(back.entries.size(), 6u);
  for (std::size_t i = 0; i < 6; ++i) {
    EXPECT_EQ(back.entries[i].split, m.entries[i].split);
    EXPECT_EQ(back.entries[i].id, m.entries[i].id);
    EXPECT_TRUE(std::filesystem::equivalent(back.entries[i].label, m.entries[i].label));
  }
  std::ofstream(dir / "dup.txt") << "# header\ntrain 1 1 1 1 a.mcs a.mcl\n\ntrain 1 1 1 1 a.mcs b.mcl # again\n";
  EXPECT_EQ(code_of([&] { load_manifest(dir / "dup.txt"); }), ErrorCode::invalid_argument);
  std::ofstream(dir / "short.txt") << "train 1 1 1 a.mcs a.mcl\n";
  EXPECT_EQ(code_of([&] { load_manifest(dir / "short.txt"); }), ErrorCode::format);
}

}  // namespace
}  // namespace cordseg
