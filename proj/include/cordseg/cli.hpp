#pragma once

// Command-line front end. `run_cli` parses the arguments, runs one subcommand and
// returns the process exit code: 0 on success, 1 when the work itself fails, 2 for
// usage and configuration errors, which are reported before anything is computed.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <ostream>
#include <regex>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "cordseg/augment.hpp"
#include "cordseg/checkpoint.hpp"
#include "cordseg/config.hpp"
#include "cordseg/error.hpp"
#include "cordseg/io.hpp"
#include "cordseg/manifest.hpp"
#include "cordseg/metrics.hpp"
#include "cordseg/parallel.hpp"
#include "cordseg/phantom.hpp"
#include "cordseg/preprocess.hpp"
#include "cordseg/rng.hpp"
#include "cordseg/train.hpp"

namespace cordseg::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitUsage = 2;

/// Bad flags, a missing or invalid config file: exit code 2.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Flags every subcommand accepts.
struct Globals {
  std::string config;
  std::uint64_t seed = 0;
  bool seed_given = false;
  std::string out;
  std::size_t threads = 1;
};

namespace detail {

namespace fs = std::filesystem;

inline std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  require(static_cast<bool>(in), ErrorCode::io, "cannot open " + p.string());
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

inline void write_text(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(out), ErrorCode::io, "cannot write " + p.string());
  out << text;
  require(static_cast<bool>(out), ErrorCode::io, "failed writing " + p.string());
}

// Library validation errors raised while reading the configuration are usage errors.
template <class F>
auto as_usage(F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const Error& e) {
    throw UsageError(e.what());
  }
}

inline Json load_config(const Globals& g, bool required) {
  if (g.config.empty()) {
    if (required) throw UsageError("--config is required");
    return Json::object();
  }
  if (!fs::is_regular_file(g.config)) throw UsageError("config file " + g.config + " does not exist");
  const std::string text = read_text(g.config);
  Json j = as_usage([&] { return parse_json(text, g.config); });
  if (!j.is_object()) throw UsageError(g.config + ": the top level must be a JSON object");
  return j;
}

inline void check_keys(const Json& j, std::initializer_list<const char*> allowed, const std::string& what) {
  for (auto it = j.begin(); it != j.end(); ++it)
    if (std::none_of(allowed.begin(), allowed.end(), [&](const char* k) { return it.key() == k; }))
      throw UsageError("unknown key '" + it.key() + "' in " + what);
}

template <class T>
T section(const Json& j, const char* key) {
  if (!j.contains(key)) return T{};
  return as_usage([&] {
    try {
      return j.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::invalid_argument, std::string(key) + ": " + e.what());
    }
  });
}

inline fs::path require_out(const Globals& g) {
  if (g.out.empty()) throw UsageError("--out is required");
  return g.out;
}

inline void write_resolved(const fs::path& dir, const std::string& command, Json config) {
  config["command"] = command;
  write_text(dir / "resolved_config.json", config.dump(2) + "\n");
}

inline std::string slice_stem(const SliceId& id) {
  const std::string name = slice_file_name(id);
  return name.substr(0, name.size() - 4);
}

inline std::string describe(const SliceId& id) {
  return "subject " + std::to_string(id.subject) + " scan " + std::to_string(id.scan) + " slice " +
         std::to_string(id.slice);
}

// Label maps of a directory keyed by the slice id in their headers. Files tagged with
// another rater than `rater` are skipped; untagged files are always read.
inline std::map<SliceId, LabelMap> read_label_dir(const fs::path& dir, std::optional<int> rater) {
  require(fs::is_directory(dir), ErrorCode::io, dir.string() + " is not a directory");
  static const std::regex tagged(R"(.*_rater-(\d+)\.mcl)");
  std::vector<fs::path> files;
  for (const auto& f : fs::directory_iterator(dir))
    if (f.path().extension() == ".mcl") files.push_back(f.path());
  std::sort(files.begin(), files.end());
  std::map<SliceId, LabelMap> out;
  std::map<SliceId, fs::path> source;
  for (const auto& p : files) {
    std::smatch m;
    const std::string name = p.filename().string();
    if (rater && std::regex_match(name, m, tagged) && std::stoi(m[1]) != *rater) continue;
    LabelMap l = load_labels(p);
    auto [it, inserted] = source.emplace(l.id, p);
    require(inserted, ErrorCode::invalid_argument,
            dir.string() + " holds two label maps for " + describe(l.id) + ": " + it->second.filename().string() + " and " +
                name);
    out.emplace(l.id, std::move(l));
  }
  return out;
}

// ---- rendering ----------------------------------------------------------------------------

using Rgb = std::array<std::uint8_t, 3>;

inline Image<std::uint8_t> gray_to_rgb(const Image<std::uint8_t>& g) {
  Image<std::uint8_t> out = g.like<std::uint8_t>(3);
  for (std::size_t i = 0; i < g.pixels(); ++i)
    for (std::size_t k = 0; k < 3; ++k) out.values[i * 3 + k] = g.values[i];
  return out;
}

inline LabelMap region(const LabelMap& labels, bool whole_cord) {
  LabelMap m = labels;
  for (auto& v : m.values) v = whole_cord ? v != background : v == gray_matter;
  return m;
}

inline void paint_boundary(Image<std::uint8_t>& rgb, const LabelMap& mask, Rgb color) {
  for (const Point& p : boundary_points(mask, 1))
    for (std::size_t k = 0; k < 3; ++k) rgb.at(p.row, p.col, k) = color[k];
}

/// Slice with the automatic GM (red) and CSF-WM (green) boundaries; a reference, when
/// given, is drawn underneath in blue (GM) and yellow (CSF-WM).
inline Image<std::uint8_t> contour_overlay(const MultiChannelSlice& slice, std::size_t display_channel,
                                           const LabelMap& automatic, const LabelMap* reference) {
  Image<std::uint8_t> rgb = gray_to_rgb(to_display(slice, display_channel));
  if (reference) {
    paint_boundary(rgb, region(*reference, true), {255, 255, 0});
    paint_boundary(rgb, region(*reference, false), {0, 96, 255});
  }
  paint_boundary(rgb, region(automatic, true), {0, 220, 0});
  paint_boundary(rgb, region(automatic, false), {255, 0, 0});
  return rgb;
}

inline Image<std::uint8_t> label_picture(const LabelMap& labels) {
  Image<std::uint8_t> out = labels.like<std::uint8_t>(1);
  for (std::size_t i = 0; i < labels.values.size(); ++i) out.values[i] = static_cast<std::uint8_t>(labels.values[i] * 127);
  return out;
}

// ---- training curves ----------------------------------------------------------------------

struct CurvePoint {
  std::size_t iteration = 0;
  std::size_t runs = 0;
  Aggregate gm, wm, ce, loss;
};

// Validated iterations of the first run, averaged over every run that validated there.
inline std::vector<CurvePoint> curves(const std::vector<std::vector<LogRow>>& runs) {
  std::vector<CurvePoint> out;
  if (runs.empty()) return out;
  for (const LogRow& row : runs[0]) {
    if (!row.validated()) continue;
    std::vector<double> gm, wm, ce, loss;
    for (const auto& log : runs) {
      if (row.iteration > log.size() || !log[row.iteration - 1].validated()) continue;
      const LogRow& r = log[row.iteration - 1];
      gm.push_back(r.val_gm_dsc);
      wm.push_back(r.val_wm_dsc);
      ce.push_back(r.val_ce);
      loss.push_back(r.loss);
    }
    out.push_back({row.iteration, gm.size(), aggregate(gm), aggregate(wm), aggregate(ce), aggregate(loss)});
  }
  return out;
}

inline void write_curves(std::ostream& out, const std::vector<CurvePoint>& points) {
  out << "iteration,runs,gm_dsc_mean,gm_dsc_std,wm_dsc_mean,wm_dsc_std,val_ce_mean,val_ce_std,loss_mean,loss_std\n";
  for (const auto& p : points) {
    out << p.iteration << ',' << p.runs;
    for (const Aggregate* a : {&p.gm, &p.wm, &p.ce, &p.loss})
      out << ',' << cordseg::detail::format_double(a->mean) << ',' << cordseg::detail::format_double(a->std);
    out << '\n';
  }
}

// Two stacked panels: DSC (GM red, WM green) on [0, 1], validation cross-entropy
// (blue) below. Bands are mean ± one standard deviation.
inline Image<std::uint8_t> plot_curves(const std::vector<CurvePoint>& points) {
  constexpr std::size_t W = 640, H = 480, pad = 20, panel = (H - 3 * pad) / 2;
  Image<std::uint8_t> img(H, W, 3);
  std::fill(img.values.begin(), img.values.end(), 255);
  auto put = [&](long r, long c, Rgb col) {
    if (r < 0 || c < 0 || r >= static_cast<long>(H) || c >= static_cast<long>(W)) return;
    for (std::size_t k = 0; k < 3; ++k) img.at(static_cast<std::size_t>(r), static_cast<std::size_t>(c), k) = col[k];
  };
  const std::size_t top[2] = {pad, 2 * pad + panel};
  for (std::size_t p = 0; p < 2; ++p) {
    for (std::size_t c = pad; c < W - pad; ++c) put(static_cast<long>(top[p] + panel), static_cast<long>(c), {0, 0, 0});
    for (std::size_t r = top[p]; r <= top[p] + panel; ++r) put(static_cast<long>(r), pad, {0, 0, 0});
  }
  if (points.empty()) return img;
  const double x_max = static_cast<double>(std::max<std::size_t>(points.back().iteration, 1));
  double ce_max = 0.0;
  for (const auto& p : points) ce_max = std::max(ce_max, p.ce.mean + p.ce.std);
  if (!(ce_max > 0.0)) ce_max = 1.0;
  auto col_of = [&](double it) { return static_cast<double>(pad) + it / x_max * static_cast<double>(W - 2 * pad - 1); };
  auto row_of = [&](std::size_t p, double v, double hi) {
    return static_cast<double>(top[p] + panel) - std::clamp(v / hi, 0.0, 1.0) * static_cast<double>(panel);
  };
  struct Series {
    std::size_t panel;
    const Aggregate CurvePoint::*field;
    double hi;
    Rgb line, band;
  };
  const Series series[] = {{0, &CurvePoint::gm, 1.0, {220, 0, 0}, {250, 200, 200}},
                           {0, &CurvePoint::wm, 1.0, {0, 160, 0}, {200, 240, 200}},
                           {1, &CurvePoint::ce, ce_max, {0, 0, 220}, {200, 200, 250}}};
  for (int pass = 0; pass < 2; ++pass)
    for (const Series& s : series)
      for (std::size_t i = 0; i < points.size(); ++i) {
        const CurvePoint& b = points[i];
        const CurvePoint& a = i == 0 ? b : points[i - 1];
        const double c0 = col_of(static_cast<double>(a.iteration)), c1 = col_of(static_cast<double>(b.iteration));
        const long steps = std::max(1L, static_cast<long>(std::ceil(std::abs(c1 - c0))));
        for (long k = 0; k <= steps; ++k) {
          const double t = static_cast<double>(k) / static_cast<double>(steps);
          const Aggregate& va = a.*s.field;
          const Aggregate& vb = b.*s.field;
          const double m = va.mean + t * (vb.mean - va.mean);
          const double sd = va.std + t * (vb.std - va.std);
          const long c = std::lround(c0 + t * (c1 - c0));
          if (pass == 0) {
            const long r0 = std::lround(row_of(s.panel, m + sd, s.hi)), r1 = std::lround(row_of(s.panel, m - sd, s.hi));
            for (long r = r0; r <= r1; ++r) put(r, c, s.band);
          } else {
            put(std::lround(row_of(s.panel, m, s.hi)), c, s.line);
          }
        }
      }
  return img;
}

// ---- subcommands --------------------------------------------------------------------------

inline int cmd_phantom(const Globals& g, std::ostream& out) {
  const Json cfg = load_config(g, false);
  check_keys(cfg, {"phantom", "layout"}, "the phantom config");
  PhantomSpec spec = section<PhantomSpec>(cfg, "phantom");
  const PhantomLayout layout = section<PhantomLayout>(cfg, "layout");
  if (g.seed_given) spec.seed = g.seed;
  as_usage([&] {
    spec.validate();
    phantom_split(layout);
  });
  const fs::path dir = require_out(g);
  const DatasetManifest m = write_phantom(dir, spec, layout);
  write_resolved(dir, "phantom", Json{{"phantom", spec}, {"layout", layout}});
  out << "wrote " << m.entries.size() << " labelled slices (" << layout.subjects << " subjects, " << layout.scans
      << " scans, " << layout.slices << " slices, " << layout.raters << " raters) to " << dir.string() << '\n';
  return kExitOk;
}

struct TrainFlags {
  std::string manifest;
  int rater = 0;
  CLI::Option* rater_opt = nullptr;
  std::size_t iterations = 0;
  CLI::Option* iterations_opt = nullptr;
  double lambda = 0.0;
  CLI::Option* lambda_opt = nullptr;
  std::string variant;
  std::size_t validation_interval = 0;
  CLI::Option* validation_opt = nullptr;
  std::size_t seeds = 1;
  bool ensemble = false;
  std::string resume;
  std::size_t stop_after = 0;
  bool plot = false;
};

inline void write_run(const fs::path& dir, const TrainResult& result, std::size_t first_iteration, bool plot) {
  save_checkpoint(dir / "checkpoint.ckpt", result.checkpoint);
  std::ostringstream log, timing, curve;
  write_training_log(log, result.checkpoint.log);
  write_text(dir / "train_log.csv", log.str());
  // wall time is kept apart so the log itself is reproducible byte for byte
  timing << "iteration,seconds,elapsed_seconds\n";
  double elapsed = 0.0;
  for (std::size_t i = 0; i < result.wall_seconds.size(); ++i) {
    elapsed += result.wall_seconds[i];
    timing << first_iteration + i << ',' << cordseg::detail::format_double(result.wall_seconds[i]) << ','
           << cordseg::detail::format_double(elapsed) << '\n';
  }
  write_text(dir / "train_timing.csv", timing.str());
  const auto points = curves({result.checkpoint.log});
  write_curves(curve, points);
  write_text(dir / "curves.csv", curve.str());
  if (plot) write_png_rgb(dir / "curves.png", plot_curves(points));
}

inline int cmd_train(const Globals& g, const TrainFlags& f, std::ostream& out) {
  const Json cfg = load_config(g, true);
  check_keys(cfg, {"manifest", "rater", "preprocess", "train"}, "the train config");
  TrainConfig config = section<TrainConfig>(cfg, "train");
  std::optional<PreprocessConfig> prep;
  if (cfg.contains("preprocess")) prep = section<PreprocessConfig>(cfg, "preprocess");
  int rater = 1;
  if (cfg.contains("rater")) rater = as_usage([&] {
      require(cfg.at("rater").is_number_integer(), ErrorCode::invalid_argument, "rater must be an integer");
      return cfg.at("rater").get<int>();
    });
  fs::path manifest_path;
  if (!f.manifest.empty()) {
    manifest_path = f.manifest;
  } else if (cfg.contains("manifest") && cfg.at("manifest").is_string()) {
    manifest_path = cfg.at("manifest").get<std::string>();
    if (manifest_path.is_relative()) manifest_path = fs::path(g.config).parent_path() / manifest_path;
  } else {
    throw UsageError("no manifest: set \"manifest\" in the config or pass --manifest");
  }
  if (f.rater_opt->count()) rater = f.rater;
  if (f.iterations_opt->count()) config.iterations = f.iterations;
  if (f.lambda_opt->count()) config.lambda = f.lambda;
  if (!f.variant.empty()) config.variant = as_usage([&] { return parse_dice_variant(f.variant); });
  if (f.validation_opt->count()) config.validation_interval = f.validation_interval;
  if (g.seed_given) config.seed = g.seed;
  as_usage([&] { config.validate(); });
  if (f.ensemble && f.seeds > 1) throw UsageError("--ensemble and --seeds cannot be combined");
  if (!f.resume.empty() && (f.ensemble || f.seeds > 1)) throw UsageError("--resume continues a single run");
  const fs::path dir = require_out(g);

  const DatasetManifest manifest = load_manifest(manifest_path);
  const PreprocessConfig* prep_ptr = prep ? &*prep : nullptr;
  const bool explicit_channels =
      cfg.contains("train") && cfg.at("train").contains("model") && cfg.at("train").at("model").contains("input_channels");

  auto load = [&](int r) {
    RaterDataset d{load_samples(manifest, Split::train, r, config.features, prep_ptr),
                   load_samples(manifest, Split::validation, r, config.features, prep_ptr)};
    require(!d.training.empty(), ErrorCode::empty_input,
            "manifest " + manifest_path.string() + " has no training slices for rater " + std::to_string(r));
    return d;
  };
  std::vector<int> raters{rater};
  if (f.ensemble) {
    const std::set<int> all = manifest.raters();
    raters.assign(all.begin(), all.end());
  }
  std::vector<RaterDataset> data;
  for (int r : raters) data.push_back(load(r));
  const std::size_t channels = data[0].training[0].features.channels;
  require(!explicit_channels || config.model.input_channels == channels, ErrorCode::shape_mismatch,
          "config sets model.input_channels = " + std::to_string(config.model.input_channels) + " but the data yields " +
              std::to_string(channels) + " feature channels");
  config.model.input_channels = channels;

  Json resolved{{"manifest", fs::absolute(manifest_path).lexically_normal().string()}, {"rater", rater}, {"train", config}};
  if (prep) resolved["preprocess"] = *prep;
  resolved["seeds"] = f.seeds;
  resolved["ensemble"] = f.ensemble;

  TrainRuntime rt;
  rt.threads = g.threads;
  rt.stop_after = f.stop_after;
  const std::size_t total = config.iterations;
  rt.on_row = [&out, total](const LogRow& r) {
    if (!r.validated()) return;
    char buf[160];
    std::snprintf(buf, sizeof buf, "iteration %zu/%zu  loss %.4f  val GM %.4f  WM %.4f  CE %.4f\n", r.iteration, total,
                  r.loss, r.val_gm_dsc, r.val_wm_dsc, r.val_ce);
    out << buf << std::flush;
  };

  if (f.ensemble) {
    const auto results = train_rater_ensemble(data, config, rt);
    for (std::size_t k = 0; k < results.size(); ++k) {
      const fs::path sub = dir / ("rater-" + std::to_string(raters[k]));
      write_run(sub, results[k], 1, f.plot);
      Json one = resolved;
      one["rater"] = raters[k];
      one["train"] = results[k].checkpoint.config;
      write_resolved(sub, "train", one);
    }
    resolved["raters"] = raters;
    write_resolved(dir, "train", resolved);
    out << "trained " << results.size() << " rater models in " << dir.string() << '\n';
    return kExitOk;
  }

  if (f.seeds > 1) {
    std::vector<std::vector<LogRow>> logs;
    for (std::size_t k = 0; k < f.seeds; ++k) {
      TrainConfig c = config;
      c.seed = config.seed + k;
      out << "seed " << c.seed << '\n';
      const fs::path sub = dir / ("seed-" + std::to_string(c.seed));
      const TrainResult r = train(data[0].training, data[0].validation, c, nullptr, rt);
      write_run(sub, r, 1, f.plot);
      Json one = resolved;
      one["train"] = c;
      one["seeds"] = 1;
      write_resolved(sub, "train", one);
      logs.push_back(r.checkpoint.log);
    }
    const auto points = curves(logs);
    std::ostringstream curve;
    write_curves(curve, points);
    write_text(dir / "curves.csv", curve.str());
    if (f.plot) write_png_rgb(dir / "curves.png", plot_curves(points));
    write_resolved(dir, "train", resolved);
    return kExitOk;
  }

  std::optional<Checkpoint> resume;
  if (!f.resume.empty()) resume = load_checkpoint(f.resume);
  const TrainResult r = train(data[0].training, data[0].validation, config, resume ? &*resume : nullptr, rt);
  write_run(dir, r, resume ? resume->iteration + 1 : 1, f.plot);
  write_resolved(dir, "train", resolved);
  const Checkpoint& c = r.checkpoint;
  out << "stopped after " << c.iteration << " of " << c.config.iterations << " iterations";
  if (!c.best_params.empty()) out << "; best validation at iteration " << c.best_iteration << " (score " << c.best_score << ")";
  out << '\n';
  return kExitOk;
}

struct SegmentFlags {
  std::string checkpoint;
  std::vector<std::string> slices;
  std::string manifest;
  std::string split = "test";
  int reference_rater = 0;
  std::string reference_dir;
  bool final_params = false;
  std::size_t display_channel = 0;
};

inline int cmd_segment(const Globals& g, const SegmentFlags& f, std::ostream& out) {
  const Json cfg = load_config(g, false);
  check_keys(cfg, {"preprocess"}, "the segment config");
  std::optional<PreprocessConfig> prep;
  if (cfg.contains("preprocess")) prep = section<PreprocessConfig>(cfg, "preprocess");
  if (f.checkpoint.empty()) throw UsageError("--checkpoint is required");
  if (f.slices.empty() == f.manifest.empty()) throw UsageError("give either slice files or --manifest, not both");
  if (f.reference_rater < 0) throw UsageError("--reference-rater must be positive");
  const Split split = as_usage([&] { return parse_split(f.split); });
  const fs::path dir = require_out(g);

  struct Job {
    fs::path image;
    std::optional<fs::path> reference;
  };
  std::vector<Job> jobs;
  if (!f.manifest.empty()) {
    const DatasetManifest m = load_manifest(f.manifest);
    std::vector<SliceId> seen;
    for (const auto& e : m.select(split)) {
      if (std::find(seen.begin(), seen.end(), e.id) != seen.end()) continue;
      seen.push_back(e.id);
      Job j{e.image, std::nullopt};
      if (f.reference_rater > 0)
        for (const auto& r : m.select(split, f.reference_rater))
          if (r.id == e.id) j.reference = r.label;
      jobs.push_back(j);
    }
    require(!jobs.empty(), ErrorCode::empty_input, "manifest " + f.manifest + " has no " + f.split + " slices");
  } else {
    for (const auto& s : f.slices) jobs.push_back({s, std::nullopt});
  }

  const Checkpoint ckpt = load_checkpoint(f.checkpoint);
  const MdgruModel model = model_from(ckpt, !f.final_params);
  const FeatureConfig features = ckpt.config.features;

  std::vector<std::string> stems(jobs.size());
  parallel_for(jobs.size(), g.threads, [&](std::size_t i) {
    MultiChannelSlice slice = load_slice(jobs[i].image);
    std::optional<LabelMap> reference;
    if (jobs[i].reference) {
      reference = load_labels(*jobs[i].reference);
    } else if (!f.reference_dir.empty()) {
      const fs::path p = fs::path(f.reference_dir) / label_file_name(slice.id, std::max(f.reference_rater, 1));
      if (fs::exists(p)) reference = load_labels(p);
    }
    if (prep) {
      LabelMap blank = reference ? *reference : slice.like<std::uint8_t>(1);
      auto prepared = preprocess(slice, blank, *prep);
      slice = std::move(prepared.image);
      if (reference) reference = std::move(prepared.labels);
    }
    Segmentation s;
    try {
      s = segment(model, features, slice);
    } catch (const Error& e) {
      throw Error(e.code(), jobs[i].image.string() + ": " + e.what());
    }
    const std::string stem = f.manifest.empty() ? jobs[i].image.stem().string() : slice_stem(slice.id);
    stems[i] = stem;
    save_labels(dir / (stem + "_seg.mcl"), s.labels);
    Image<float> prob = s.probabilities.like<float>(s.probabilities.channels);
    for (std::size_t k = 0; k < prob.values.size(); ++k) prob.values[k] = static_cast<float>(s.probabilities.values[k]);
    save_raster(dir / (stem + "_prob.mcs"), prob);
    require(f.display_channel < slice.channels, ErrorCode::invalid_argument,
            "display channel " + std::to_string(f.display_channel) + " does not exist");
    write_png_rgb(dir / (stem + "_overlay.png"),
                  contour_overlay(slice, f.display_channel, s.labels, reference ? &*reference : nullptr));
  });
  std::map<std::string, std::size_t> uses;
  for (const auto& s : stems) require(++uses[s] == 1, ErrorCode::invalid_argument, "two inputs share the name " + s);

  std::ostringstream index;
  index << "index,input,segmentation,probabilities,overlay\n";
  for (std::size_t i = 0; i < jobs.size(); ++i)
    index << i << ',' << jobs[i].image.string() << ',' << stems[i] << "_seg.mcl," << stems[i] << "_prob.mcs," << stems[i]
          << "_overlay.png\n";
  write_text(dir / "segmentations.csv", index.str());
  Json resolved{{"checkpoint", f.checkpoint}, {"parameters", f.final_params ? "final" : "best"}, {"features", features}};
  if (prep) resolved["preprocess"] = *prep;
  if (!f.manifest.empty()) resolved["manifest"] = f.manifest, resolved["split"] = f.split;
  resolved["reference_rater"] = f.reference_rater;
  write_resolved(dir, "segment", resolved);
  out << "segmented " << jobs.size() << " slices into " << dir.string() << '\n';
  return kExitOk;
}

struct EvaluateFlags {
  std::vector<std::string> automatic;
  std::string reference;
  int rater = 1;
  int repositioned_scan = 3;
};

inline int cmd_evaluate(const Globals& g, const EvaluateFlags& f, std::ostream& out, std::ostream& err) {
  const Json cfg = load_config(g, false);
  check_keys(cfg, {}, "the evaluate config");
  if (f.automatic.empty() || f.reference.empty()) throw UsageError("--auto and --reference are required");
  struct Source {
    std::string name;
    fs::path dir;
  };
  std::vector<Source> sources;
  for (const auto& a : f.automatic) {
    const auto eq = a.find('=');
    if (eq == std::string::npos)
      sources.push_back({fs::path(a).lexically_normal().filename().string(), a});
    else
      sources.push_back({a.substr(0, eq), a.substr(eq + 1)});
    if (sources.back().name.empty()) sources.back().name = "auto";
  }
  for (std::size_t i = 0; i < sources.size(); ++i)
    for (std::size_t j = 0; j < i; ++j)
      if (sources[i].name == sources[j].name) throw UsageError("two result sets are named " + sources[i].name);
  const fs::path dir = require_out(g);

  std::vector<std::string> warnings;
  auto sessions_of = [&](const std::string& name, const std::vector<LabelMap>& maps) {
    try {
      SessionStats s = session_stats(maps, f.repositioned_scan);
      for (const auto& w : s.warnings) warnings.push_back(name + ": " + w);
      return s;
    } catch (const Error& e) {
      warnings.push_back(name + ": no session statistics: " + e.what());
      return SessionStats{};
    }
  };

  const auto reference = read_label_dir(f.reference, f.rater);
  require(!reference.empty(), ErrorCode::empty_input, "no reference label maps in " + f.reference);
  std::vector<MethodResults> methods;
  for (const Source& src : sources) {
    const auto automatic = read_label_dir(src.dir, f.rater);
    std::vector<std::pair<const LabelMap*, const LabelMap*>> pairs;
    std::vector<LabelMap> maps;
    for (const auto& [id, l] : automatic) {
      auto it = reference.find(id);
      if (it == reference.end()) {
        warnings.push_back(src.name + ": " + describe(id) + " has no reference");
        continue;
      }
      pairs.emplace_back(&l, &it->second);
      maps.push_back(l);
    }
    for (const auto& [id, l] : reference)
      if (!automatic.count(id)) warnings.push_back(src.name + ": " + describe(id) + " has no automatic segmentation");
    require(!pairs.empty(), ErrorCode::empty_input, src.name + ": no slice matches the reference");
    MethodResults m{src.name, std::vector<SliceReport>(pairs.size()), sessions_of(src.name, maps)};
    parallel_for(pairs.size(), g.threads, [&](std::size_t i) {
      try {
        m.accuracy[i] = evaluate_slice(*pairs[i].first, *pairs[i].second);
      } catch (const Error& e) {
        throw Error(e.code(), src.name + ": " + describe(pairs[i].second->id) + ": " + e.what());
      }
    });
    const fs::path sub = sources.size() == 1 ? dir : dir / src.name;
    std::ostringstream metrics, challenge, sessions, positions;
    write_metrics_csv(metrics, m.accuracy);
    write_challenge_table(challenge, m.accuracy);
    write_session_table(sessions, m.accuracy, m.sessions);
    write_position_table(positions, m.accuracy);
    write_text(sub / "metrics.csv", metrics.str());
    write_text(sub / "summary.csv", challenge.str());
    write_text(sub / "sessions.csv", sessions.str());
    write_text(sub / "positions.csv", positions.str());
    const auto gm = summarize(m.accuracy, gray_matter), wm = summarize(m.accuracy, white_matter);
    out << src.name << ": " << pairs.size() << " slices, GM DSC " << format_aggregate(gm.at("DSC"), 4) << ", WM DSC "
        << format_aggregate(wm.at("DSC"), 4) << '\n';
    methods.push_back(std::move(m));
  }
  std::vector<LabelMap> reference_maps;
  for (const auto& [id, l] : reference) reference_maps.push_back(l);
  methods.push_back({"reference", {}, sessions_of("reference", reference_maps)});
  std::ostringstream comparison;
  write_comparison_table(comparison, methods);
  write_text(dir / "comparison.csv", comparison.str());

  std::ostringstream w;
  for (std::size_t i = 0; i < warnings.size(); ++i) {
    w << warnings[i] << '\n';
    if (i < 5) err << "warning: " << warnings[i] << '\n';
  }
  if (warnings.size() > 5) err << "warning: " << warnings.size() - 5 << " more in warnings.txt\n";
  write_text(dir / "warnings.txt", w.str());
  Json sets = Json::array();
  for (const Source& s : sources) sets.push_back({{"name", s.name}, {"dir", s.dir.string()}});
  write_resolved(dir, "evaluate",
                 Json{{"auto", sets},
                      {"reference", f.reference},
                      {"rater", f.rater},
                      {"repositioned_scan", f.repositioned_scan}});
  return kExitOk;
}

struct VoteFlags {
  std::vector<std::string> inputs;
  std::size_t threshold = 0;
  CLI::Option* threshold_opt = nullptr;
};

inline int cmd_vote(const Globals& g, const VoteFlags& f, std::ostream& out) {
  const Json cfg = load_config(g, false);
  check_keys(cfg, {}, "the vote config");
  if (f.inputs.size() < 2) throw UsageError("vote needs at least two --inputs directories");
  const std::size_t threshold = f.threshold_opt->count() ? f.threshold : f.inputs.size() / 2;
  if (threshold >= f.inputs.size()) throw UsageError("threshold must be below the number of inputs");
  const fs::path dir = require_out(g);

  std::vector<std::map<SliceId, LabelMap>> sets;
  for (const auto& d : f.inputs) sets.push_back(read_label_dir(d, std::nullopt));
  require(!sets[0].empty(), ErrorCode::empty_input, "no label maps in " + f.inputs[0]);
  for (std::size_t k = 1; k < sets.size(); ++k) {
    for (const auto& [id, l] : sets[0])
      require(sets[k].count(id) > 0, ErrorCode::invalid_argument, describe(id) + " is missing from " + f.inputs[k]);
    for (const auto& [id, l] : sets[k])
      require(sets[0].count(id) > 0, ErrorCode::invalid_argument, describe(id) + " is missing from " + f.inputs[0]);
  }
  std::ostringstream index;
  index << "subject,scan,slice,file\n";
  for (const auto& [id, first] : sets[0]) {
    std::vector<LabelMap> maps;
    for (const auto& s : sets) maps.push_back(s.at(id));
    LabelMap consensus;
    try {
      consensus = majority_vote(maps, threshold);
    } catch (const Error& e) {
      throw Error(e.code(), describe(id) + " (" + slice_stem(id) + "): " + e.what());
    }
    consensus.id = id;
    consensus.spacing = first.spacing;
    const std::string name = slice_stem(id) + "_vote.mcl";
    save_labels(dir / name, consensus);
    index << id.subject << ',' << id.scan << ',' << id.slice << ',' << name << '\n';
  }
  write_text(dir / "votes.csv", index.str());
  write_resolved(dir, "vote", Json{{"inputs", f.inputs}, {"threshold", threshold}});
  out << "voted " << sets[0].size() << " slices over " << f.inputs.size() << " inputs (more than " << threshold
      << " votes needed)\n";
  return kExitOk;
}

struct PreviewFlags {
  std::string slice;
  std::string labels;
  std::size_t count = 8;
  std::size_t display_channel = 0;
};

inline int cmd_augment_preview(const Globals& g, const PreviewFlags& f, std::ostream& out) {
  const Json cfg = load_config(g, false);
  check_keys(cfg, {"augmentation"}, "the augment-preview config");
  const AugmentConfig aug = section<AugmentConfig>(cfg, "augmentation");
  as_usage([&] { aug.validate(); });
  if (f.slice.empty()) throw UsageError("--slice is required");
  const std::uint64_t seed = g.seed_given ? g.seed : 1;
  const fs::path dir = require_out(g);

  const MultiChannelSlice slice = load_slice(f.slice);
  std::optional<LabelMap> labels;
  if (!f.labels.empty()) labels = load_labels(f.labels);
  require(f.display_channel < slice.channels, ErrorCode::invalid_argument,
          "display channel " + std::to_string(f.display_channel) + " does not exist");
  std::ostringstream table;
  table << "window,scale,angle_deg,mirror,origin_row,origin_col,max_displacement_px\n";
  for (std::size_t k = 0; k < f.count; ++k) {
    Rng rng(seed, Stream::augment, k);
    const Augmentation a = sample_augmentation(rng, aug, slice.rows, slice.cols);
    char name[32];
    std::snprintf(name, sizeof name, "window-%03zu", k);
    if (labels) {
      const auto w = apply_transform(slice, *labels, a, aug.safe_margin);
      write_png_gray(dir / (std::string(name) + "_image.png"), to_display(w.image, f.display_channel));
      write_png_gray(dir / (std::string(name) + "_labels.png"), label_picture(w.labels));
    } else {
      write_png_gray(dir / (std::string(name) + "_image.png"),
                     to_display(warp_image(slice, a, aug.safe_margin), f.display_channel));
    }
    double longest = 0.0;
    for (const auto& d : a.field.support) longest = std::max(longest, std::hypot(d.row, d.col));
    table << k << ',' << cordseg::detail::format_double(a.scale) << ',' << cordseg::detail::format_double(a.angle_deg)
          << ',' << (a.mirror ? 1 : 0) << ',' << a.origin_row << ',' << a.origin_col << ','
          << cordseg::detail::format_double(longest) << '\n';
  }
  write_text(dir / "augmentations.csv", table.str());
  write_resolved(dir, "augment-preview",
                 Json{{"slice", f.slice}, {"labels", f.labels}, {"count", f.count}, {"seed", seed}, {"augmentation", aug}});
  out << "wrote " << f.count << " windows to " << dir.string() << '\n';
  return kExitOk;
}

struct MetricsFlags {
  std::string automatic;
  std::string reference;
};

inline int cmd_metrics(const Globals& g, const MetricsFlags& f, std::ostream& out) {
  const Json cfg = load_config(g, false);
  check_keys(cfg, {}, "the metrics config");
  const LabelMap a = load_labels(f.automatic);
  const LabelMap b = load_labels(f.reference);
  const SliceReport r = evaluate_slice(a, b);
  std::ostringstream csv;
  csv << "class,metric,value,note\n";
  for (std::uint8_t label : kEvaluatedTissues)
    for (const auto& [name, m] : named_metrics(r.of(label)))
      csv << tissue_name(label) << ',' << name << ',' << to_string(m) << ',' << m.reason << '\n';
  out << csv.str();
  if (!g.out.empty()) {
    write_text(fs::path(g.out) / "metrics.csv", csv.str());
    write_resolved(g.out, "metrics", Json{{"auto", f.automatic}, {"reference", f.reference}});
  }
  return kExitOk;
}

}  // namespace detail

/// Runs the command line given as `args` (without the program name).
inline int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Gray and white matter segmentation of spinal cord MR slices", "cordseg"};
  app.require_subcommand(1);
  Globals g;
  std::vector<CLI::Option*> seed_opts;
  auto globals = [&](CLI::App* sc) {
    sc->add_option("--config", g.config, "JSON configuration file");
    seed_opts.push_back(sc->add_option("--seed", g.seed, "base seed"));
    sc->add_option("--out", g.out, "output directory");
    sc->add_option("--threads", g.threads, "worker threads")->check(CLI::PositiveNumber);
    return sc;
  };

  auto* phantom = globals(app.add_subcommand("phantom", "write a synthetic multi-echo dataset"));

  detail::TrainFlags tf;
  auto* train_cmd = globals(app.add_subcommand("train", "train an MD-GRU segmentation model"));
  train_cmd->add_option("--manifest", tf.manifest, "dataset manifest (overrides the config)");
  tf.rater_opt = train_cmd->add_option("--rater", tf.rater, "rater whose labels are learned");
  tf.iterations_opt = train_cmd->add_option("--iterations", tf.iterations, "training iterations");
  tf.lambda_opt = train_cmd->add_option("--lambda", tf.lambda, "Dice weight in [0, 1]");
  train_cmd->add_option("--variant", tf.variant, "Dice variant: dl, gdl or gm-dl");
  tf.validation_opt = train_cmd->add_option("--validation-interval", tf.validation_interval, "iterations between validations");
  train_cmd->add_option("--seeds", tf.seeds, "independent runs with consecutive seeds")->check(CLI::PositiveNumber);
  train_cmd->add_flag("--ensemble", tf.ensemble, "one model per rater in the manifest");
  train_cmd->add_option("--resume", tf.resume, "checkpoint to continue");
  train_cmd->add_option("--stop-after", tf.stop_after, "halt after this many completed iterations");
  train_cmd->add_flag("--plot", tf.plot, "also render the curves as PNG");

  detail::SegmentFlags sf;
  auto* segment_cmd = globals(app.add_subcommand("segment", "segment slices with a trained model"));
  segment_cmd->add_option("--checkpoint", sf.checkpoint, "trained checkpoint")->required();
  segment_cmd->add_option("slices", sf.slices, "slice files (.mcs)");
  segment_cmd->add_option("--manifest", sf.manifest, "segment a split of this manifest instead");
  segment_cmd->add_option("--split", sf.split, "train, val or test");
  segment_cmd->add_option("--reference-rater", sf.reference_rater, "draw this rater's contours too");
  segment_cmd->add_option("--reference-dir", sf.reference_dir, "directory with reference label maps");
  segment_cmd->add_flag("--final", sf.final_params, "use the final instead of the best parameters");
  segment_cmd->add_option("--display-channel", sf.display_channel, "slice channel shown in overlays");

  detail::EvaluateFlags ef;
  auto* evaluate_cmd = globals(app.add_subcommand("evaluate", "compare segmentations against a reference"));
  evaluate_cmd->add_option("--auto", ef.automatic, "segmentation directory, optionally NAME=DIR; repeatable")->required();
  evaluate_cmd->add_option("--reference", ef.reference, "reference label directory")->required();
  evaluate_cmd->add_option("--rater", ef.rater, "reference rater for files tagged _rater-N");
  evaluate_cmd->add_option("--repositioned-scan", ef.repositioned_scan, "scan acquired after repositioning");

  detail::VoteFlags vf;
  auto* vote_cmd = globals(app.add_subcommand("vote", "majority vote over label directories"));
  vote_cmd->add_option("--inputs", vf.inputs, "label directories")->required();
  vf.threshold_opt = vote_cmd->add_option("--threshold", vf.threshold, "votes a class must exceed (default n/2)");

  detail::PreviewFlags pf;
  auto* preview_cmd = globals(app.add_subcommand("augment-preview", "render augmented training windows"));
  preview_cmd->add_option("--slice", pf.slice, "slice file (.mcs)")->required();
  preview_cmd->add_option("--labels", pf.labels, "label map (.mcl)");
  preview_cmd->add_option("--count", pf.count, "number of windows");
  preview_cmd->add_option("--display-channel", pf.display_channel, "slice channel shown");

  detail::MetricsFlags mf;
  auto* metrics_cmd = globals(app.add_subcommand("metrics", "metrics of one label map against another"));
  metrics_cmd->add_option("auto", mf.automatic, "automatic label map")->required();
  metrics_cmd->add_option("reference", mf.reference, "reference label map")->required();

  std::vector<std::string> argv_store{"cordseg"};
  argv_store.insert(argv_store.end(), args.begin(), args.end());
  std::vector<char*> argv;
  for (auto& a : argv_store) argv.push_back(a.data());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }
  g.seed_given = std::any_of(seed_opts.begin(), seed_opts.end(), [](CLI::Option* o) { return o->count() > 0; });

  try {
    if (phantom->parsed()) return detail::cmd_phantom(g, out);
    if (train_cmd->parsed()) return detail::cmd_train(g, tf, out);
    if (segment_cmd->parsed()) return detail::cmd_segment(g, sf, out);
    if (evaluate_cmd->parsed()) return detail::cmd_evaluate(g, ef, out, err);
    if (vote_cmd->parsed()) return detail::cmd_vote(g, vf, out);
    if (preview_cmd->parsed()) return detail::cmd_augment_preview(g, pf, out);
    if (metrics_cmd->parsed()) return detail::cmd_metrics(g, mf, out);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitUsage;
}

}  // namespace cordseg::cli
