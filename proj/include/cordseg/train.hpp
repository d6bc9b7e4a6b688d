#pragma once

// Windowed training with augmentation, Adadelta and periodic validation, plus
// inference on whole slices.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "cordseg/augment.hpp"
#include "cordseg/error.hpp"
#include "cordseg/features.hpp"
#include "cordseg/image.hpp"
#include "cordseg/io.hpp"
#include "cordseg/losses.hpp"
#include "cordseg/manifest.hpp"
#include "cordseg/metrics.hpp"
#include "cordseg/network.hpp"
#include "cordseg/optimizer.hpp"
#include "cordseg/parallel.hpp"
#include "cordseg/preprocess.hpp"
#include "cordseg/rng.hpp"

namespace cordseg {

struct TrainConfig {
  std::size_t iterations = 30000;
  double lambda = 0.5;
  DiceVariant variant = DiceVariant::generalized;
  AdadeltaConfig optimizer;
  std::size_t validation_interval = 500;
  std::uint64_t seed = 1;
  bool augment = true;  // off: a centered window without any transform
  AugmentConfig augmentation;
  FeatureConfig features;
  MdgruConfig model;

  void validate() const {
    require(iterations > 0, ErrorCode::invalid_argument, "iterations must be positive");
    require(lambda >= 0.0 && lambda <= 1.0, ErrorCode::invalid_argument,
            "lambda must lie in [0, 1], got " + std::to_string(lambda));
    require(validation_interval > 0, ErrorCode::invalid_argument, "validation interval must be positive");
    require(model.num_classes == kNumTissues, ErrorCode::invalid_argument, "the model must predict BG, GM and WM");
    optimizer.validate();
    augmentation.validate();
    features.validate();
    model.validate();
  }

  bool operator==(const TrainConfig&) const = default;
};

/// One training iteration. Validation columns are NaN where no validation ran.
struct LogRow {
  std::size_t iteration = 0;  // 1-based
  double loss = 0.0;
  double dice_term = 0.0;
  double ce_term = 0.0;
  double val_gm_dsc = std::numeric_limits<double>::quiet_NaN();
  double val_wm_dsc = std::numeric_limits<double>::quiet_NaN();
  double val_ce = std::numeric_limits<double>::quiet_NaN();

  bool validated() const { return !std::isnan(val_gm_dsc); }
};

using NamedValues = std::vector<std::pair<std::string, std::vector<double>>>;

/// Complete training state: resuming from it continues the exact trajectory.
struct Checkpoint {
  TrainConfig config;
  std::size_t iteration = 0;  // completed iterations
  NamedValues params;
  OptimizerState optimizer;
  NamedValues best_params;  // empty until the first validation
  double best_score = std::numeric_limits<double>::quiet_NaN();
  std::size_t best_iteration = 0;
  std::vector<LogRow> log;
};

inline NamedValues snapshot(const MdgruModel& model) {
  NamedValues out;
  for (auto& [name, t] : model.named_parameters()) out.emplace_back(name, std::vector<double>(t.data().begin(), t.data().end()));
  return out;
}

inline void restore(MdgruModel& model, const NamedValues& values) {
  auto params = model.named_parameters();
  require(params.size() == values.size(), ErrorCode::shape_mismatch,
          "checkpoint holds " + std::to_string(values.size()) + " tensors, model has " + std::to_string(params.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& [name, t] = params[i];
    require(values[i].first == name, ErrorCode::format, "checkpoint tensor " + values[i].first + " where " + name + " was expected");
    auto dst = t.values();
    require(dst.size() == values[i].second.size(), ErrorCode::shape_mismatch, "checkpoint tensor " + name + " has the wrong size");
    std::copy(values[i].second.begin(), values[i].second.end(), dst.begin());
  }
}

/// Model carrying the best-validation parameters, or the final ones without validation.
inline MdgruModel model_from(const Checkpoint& ckpt, bool best = true) {
  MdgruModel model(ckpt.config.model, ckpt.config.seed);
  restore(model, best && !ckpt.best_params.empty() ? ckpt.best_params : ckpt.params);
  return model;
}

struct TrainingSample {
  Image<double> features;
  LabelMap labels;
};

/// A slice with its labels, turned into network features.
template <class T>
TrainingSample make_sample(const Image<T>& slice, const LabelMap& labels, const FeatureConfig& features) {
  validate_labels(labels, slice);
  TrainingSample s{make_features(slice, features), labels};
  s.labels.id = slice.id;
  return s;
}

/// Samples of one split and rater read from the manifest. With `prep`, every slice is
/// preprocessed before feature extraction.
inline std::vector<TrainingSample> load_samples(const DatasetManifest& manifest, Split split, int rater,
                                                const FeatureConfig& features,
                                                const PreprocessConfig* prep = nullptr) {
  std::vector<TrainingSample> out;
  for (const ManifestEntry& e : manifest.select(split, rater)) {
    MultiChannelSlice image = load_slice(e.image);
    LabelMap labels = load_labels(e.label);
    image.id = labels.id = e.id;
    if (prep) {
      auto p = preprocess(image, labels, *prep);
      image = std::move(p.image);
      labels = std::move(p.labels);
    }
    out.push_back(make_sample(image, labels, features));
  }
  return out;
}

struct Segmentation {
  ProbabilityMap probabilities;  // one channel per class
  LabelMap labels;
};

/// Class with the highest probability; ties go to the lower class index.
inline LabelMap argmax_labels(const ProbabilityMap& p) {
  LabelMap out = p.like<std::uint8_t>(1);
  for (std::size_t i = 0; i < p.pixels(); ++i) {
    std::size_t best = 0;
    for (std::size_t l = 1; l < p.channels; ++l)
      if (p.values[i * p.channels + l] > p.values[i * p.channels + best]) best = l;
    out.values[i] = static_cast<std::uint8_t>(best);
  }
  return out;
}

inline Segmentation segment_features(const MdgruModel& model, const Image<double>& features) {
  require(features.channels == model.config().input_channels, ErrorCode::shape_mismatch,
          "slice yields " + std::to_string(features.channels) + " input channels, the model expects " +
              std::to_string(model.config().input_channels));
  NoGradGuard no_grad;
  const Tensor p = softmax(model.forward(to_tensor(features), false), 2);
  Segmentation s;
  s.probabilities = features.like<double>(model.config().num_classes);
  s.probabilities.values.assign(p.data().begin(), p.data().end());
  s.labels = argmax_labels(s.probabilities);
  return s;
}

/// Whole-slice inference.
template <class T>
Segmentation segment(const MdgruModel& model, const FeatureConfig& features, const Image<T>& slice) {
  require(features.output_channels(slice.channels) == model.config().input_channels, ErrorCode::shape_mismatch,
          "slice has " + std::to_string(slice.channels) + " channels, the model expects " +
              std::to_string(model.config().input_channels) + " input channels after feature extraction");
  return segment_features(model, make_features(slice, features));
}

struct ValidationScores {
  double gm_dsc = 0.0;
  double wm_dsc = 0.0;
  double cross_entropy = 0.0;
};

/// Mean per-slice GM/WM DSC and cross-entropy over whole slices.
inline ValidationScores validate_model(const MdgruModel& model, const std::vector<TrainingSample>& samples,
                                       std::size_t threads = 1) {
  require(!samples.empty(), ErrorCode::empty_input, "no validation slices");
  std::vector<ValidationScores> per(samples.size());
  parallel_for(samples.size(), threads, [&](std::size_t i) {
    const Segmentation s = segment_features(model, samples[i].features);
    NoGradGuard no_grad;
    const Tensor p(Shape{s.probabilities.rows, s.probabilities.cols, s.probabilities.channels}, s.probabilities.values);
    const Tensor r = one_hot(samples[i].labels.values, {samples[i].labels.rows, samples[i].labels.cols},
                             model.config().num_classes);
    per[i] = {dice_coefficient(s.labels, samples[i].labels, gray_matter),
              dice_coefficient(s.labels, samples[i].labels, white_matter), cross_entropy(p, r).item()};
  });
  ValidationScores mean;
  for (const auto& v : per) {
    mean.gm_dsc += v.gm_dsc;
    mean.wm_dsc += v.wm_dsc;
    mean.cross_entropy += v.cross_entropy;
  }
  const auto n = static_cast<double>(per.size());
  return {mean.gm_dsc / n, mean.wm_dsc / n, mean.cross_entropy / n};
}

/// Execution settings that do not change results.
struct TrainRuntime {
  std::size_t threads = 1;
  std::size_t stop_after = 0;  // halt once this many iterations are complete; 0 runs to the end
  std::function<void(const LogRow&)> on_row;
  std::function<void(const Checkpoint&)> on_best;
};

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<double> wall_seconds;  // per iteration run in this call, for timing reports only
};

/// The window and augmentation drawn for iteration `i` (0-based).
inline Augmentation iteration_augmentation(const TrainConfig& config, std::size_t i, std::size_t rows, std::size_t cols) {
  const AugmentConfig& a = config.augmentation;
  if (config.augment) {
    Rng rng(config.seed, Stream::augment, i);
    return sample_augmentation(rng, a, rows, cols);
  }
  require(rows >= a.window_rows && cols >= a.window_cols, ErrorCode::invalid_argument, "window exceeds the slice");
  return Augmentation::identity((rows - a.window_rows) / 2, (cols - a.window_cols) / 2, a.window_rows, a.window_cols);
}

/// Index of the training slice used in iteration `i`.
inline std::size_t iteration_sample(const TrainConfig& config, std::size_t i, std::size_t count) {
  Rng rng(config.seed, Stream::sample, i);
  return static_cast<std::size_t>(rng.index(count));
}

namespace detail {

inline void check_samples(const std::vector<TrainingSample>& samples, std::size_t channels, const char* what) {
  for (const auto& s : samples) {
    require(s.features.channels == channels, ErrorCode::shape_mismatch,
            std::string(what) + " slice has " + std::to_string(s.features.channels) + " feature channels, the model expects " +
                std::to_string(channels));
    require(s.labels.same_extent(s.features), ErrorCode::shape_mismatch, std::string(what) + " labels do not match the slice");
  }
}

}  // namespace detail

/// Trains from scratch, or continues `resume` when given. Validation runs every
/// `validation_interval` iterations and after the last one.
inline TrainResult train(const std::vector<TrainingSample>& training, const std::vector<TrainingSample>& validation,
                         const TrainConfig& config, const Checkpoint* resume = nullptr,
                         const TrainRuntime& runtime = {}) {
  config.validate();
  require(!training.empty(), ErrorCode::empty_input, "no training slices");
  detail::check_samples(training, config.model.input_channels, "training");
  detail::check_samples(validation, config.model.input_channels, "validation");

  MdgruModel model(config.model, config.seed);
  TrainResult result;
  Checkpoint& state = result.checkpoint;
  state.config = config;
  if (resume) {
    TrainConfig stored = resume->config;
    stored.iterations = config.iterations;
    require(stored == config, ErrorCode::invalid_argument, "resume checkpoint was trained with a different configuration");
    require(resume->iteration <= config.iterations, ErrorCode::invalid_argument, "checkpoint is past the iteration budget");
    restore(model, resume->params);
    state.iteration = resume->iteration;
    state.optimizer = resume->optimizer;
    state.best_params = resume->best_params;
    state.best_score = resume->best_score;
    state.best_iteration = resume->best_iteration;
    state.log = resume->log;
  }

  NamedTensors params = model.named_parameters();
  const std::size_t end =
      runtime.stop_after > 0 ? std::min(runtime.stop_after, config.iterations) : config.iterations;
  while (state.iteration < end) {
    const auto started = std::chrono::steady_clock::now();
    const std::size_t i = state.iteration;
    const TrainingSample& sample = training[iteration_sample(config, i, training.size())];
    const Augmentation a = iteration_augmentation(config, i, sample.features.rows, sample.features.cols);
    const auto window = apply_transform(sample.features, sample.labels, a, config.augment ? config.augmentation.safe_margin : 0);

    LogRow row;
    row.iteration = i + 1;
    {
      const Tensor x = to_tensor(window.image);
      const Tensor r = one_hot(window.labels.values, {window.labels.rows, window.labels.cols}, config.model.num_classes);
      const Tensor p = softmax(model.forward(x, true, derive_seed(config.seed, static_cast<std::uint64_t>(Stream::dropout), i)), 2);
      for (double v : p.data())
        require(std::isfinite(v), ErrorCode::not_finite,
                "network output is not finite at iteration " + std::to_string(i + 1));
      const LossTerms terms = combined_loss_terms(p, r, config.lambda, config.variant);
      row.loss = terms.total.item();
      row.dice_term = terms.dice;
      row.ce_term = terms.cross_entropy;
      require(std::isfinite(row.loss), ErrorCode::not_finite, "loss is not finite at iteration " + std::to_string(i + 1));
      model.zero_grad();
      MdgruModel::backward(terms.total);
    }
    adadelta_step(params, state.optimizer, config.optimizer);
    model.zero_grad();
    state.iteration = i + 1;

    if (!validation.empty() && (state.iteration % config.validation_interval == 0 || state.iteration == config.iterations)) {
      const ValidationScores v = validate_model(model, validation, runtime.threads);
      row.val_gm_dsc = v.gm_dsc;
      row.val_wm_dsc = v.wm_dsc;
      row.val_ce = v.cross_entropy;
      const double score = 0.5 * (v.gm_dsc + v.wm_dsc);
      if (state.best_params.empty() || score > state.best_score) {
        state.best_score = score;
        state.best_iteration = state.iteration;
        state.best_params = snapshot(model);
        if (runtime.on_best) runtime.on_best(state);
      }
    }
    state.log.push_back(row);
    result.wall_seconds.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count());
    if (runtime.on_row) runtime.on_row(row);
  }
  state.params = snapshot(model);
  return result;
}

/// Datasets of one rater.
struct RaterDataset {
  std::vector<TrainingSample> training;
  std::vector<TrainingSample> validation;
};

/// One model per rater; rater k (0-based) trains with seed `config.seed + k`.
inline std::vector<TrainResult> train_rater_ensemble(const std::vector<RaterDataset>& raters, const TrainConfig& config,
                                                     const TrainRuntime& runtime = {}) {
  require(!raters.empty(), ErrorCode::empty_input, "no rater datasets");
  auto ids = [](const std::vector<TrainingSample>& s) {
    std::vector<SliceId> out;
    for (const auto& x : s) out.push_back(x.labels.id);
    return out;
  };
  for (std::size_t k = 1; k < raters.size(); ++k) {
    require(ids(raters[k].training) == ids(raters[0].training) && ids(raters[k].validation) == ids(raters[0].validation),
            ErrorCode::invalid_argument, "rater " + std::to_string(k + 1) + " covers a different set of slices");
    for (std::size_t i = 0; i < raters[k].training.size(); ++i)
      require(raters[k].training[i].features.values == raters[0].training[i].features.values, ErrorCode::invalid_argument,
              "rater " + std::to_string(k + 1) + " pairs its labels with different images");
  }
  std::vector<TrainResult> out;
  for (std::size_t k = 0; k < raters.size(); ++k) {
    TrainConfig c = config;
    c.seed = config.seed + k;
    out.push_back(train(raters[k].training, raters[k].validation, c, nullptr, runtime));
  }
  return out;
}

}  // namespace cordseg
