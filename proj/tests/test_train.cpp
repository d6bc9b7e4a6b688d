#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "cordseg/checkpoint.hpp"
#include "cordseg/config.hpp"
#include "cordseg/optimizer.hpp"
#include "cordseg/phantom.hpp"
#include "cordseg/train.hpp"
#include "test_support.hpp"

namespace cordseg {
namespace {

using testing::code_of;

// ---- Adadelta -------------------------------------------------------------------

NamedTensors scalar_params(std::vector<double> values) {
  const std::size_t n = values.size();
  return {{"theta", Tensor({n}, std::move(values), true)}};
}

TEST(Adadelta, FirstStepMatchesClosedForm) {
  NamedTensors p = scalar_params({0.5, -2.0, 3.0});
  sum(p[0].second).backward();  // g = 1 everywhere
  OptimizerState state;
  adadelta_step(p, state, AdadeltaConfig{});
  const double eps = 1e-6, rho = 0.95;
  const double step = -std::sqrt(eps) / std::sqrt((1 - rho) + eps);
  const std::vector<double> start{0.5, -2.0, 3.0};
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_NEAR(p[0].second[i], start[i] + step, 1e-12);
    EXPECT_NEAR(state.mean_sq_grad["theta"][i], 1 - rho, 1e-12);
    EXPECT_NEAR(state.mean_sq_update["theta"][i], (1 - rho) * step * step, 1e-12);
  }
}

TEST(Adadelta, LearningRateScalesTheStep) {
  NamedTensors p = scalar_params({0.0});
  sum(p[0].second).backward();
  OptimizerState state;
  AdadeltaConfig config;
  config.learning_rate = 0.5;
  adadelta_step(p, state, config);
  EXPECT_NEAR(p[0].second[0], -0.5 * std::sqrt(1e-6) / std::sqrt(0.05 + 1e-6), 1e-12);
}

TEST(Adadelta, ZeroGradientDecaysAccumulatorsOnly) {
  NamedTensors p = scalar_params({1.0, 2.0});
  sum(p[0].second * p[0].second).backward();
  OptimizerState state;
  adadelta_step(p, state, AdadeltaConfig{});
  p[0].second.zero_grad();
  const std::vector<double> before(p[0].second.data().begin(), p[0].second.data().end());
  const OptimizerState state_before = state;
  adadelta_step(p, state, AdadeltaConfig{});
  EXPECT_TRUE(testing::bitwise_equal(p[0].second.data(), before));
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(state.mean_sq_grad["theta"][i], 0.95 * state_before.mean_sq_grad.at("theta")[i]);
    EXPECT_EQ(state.mean_sq_update["theta"][i], 0.95 * state_before.mean_sq_update.at("theta")[i]);
  }
}

TEST(Adadelta, DescendsOnAQuadratic) {
  NamedTensors p = scalar_params({1.0});
  OptimizerState state;
  double previous = 1.0;
  for (int step = 0; step < 200; ++step) {
    p[0].second.zero_grad();
    sum(p[0].second * p[0].second).backward();
    adadelta_step(p, state, AdadeltaConfig{});
    const double now = std::abs(p[0].second[0]);
    EXPECT_LT(now, previous);
    previous = now;
  }
  EXPECT_LT(previous, 1.0);
  for (double v : state.mean_sq_grad["theta"]) EXPECT_GE(v, 0.0);
  for (double v : state.mean_sq_update["theta"]) EXPECT_GE(v, 0.0);
}

TEST(Adadelta, NonFiniteGradientAbortsTheStep) {
  NamedTensors p = scalar_params({1.0, 4.0});
  NamedTensors q = scalar_params({-1.0});
  p.push_back({"other", q[0].second});
  sum(p[0].second * std::numeric_limits<double>::quiet_NaN()).backward();
  sum(p[1].second).backward();
  OptimizerState state;
  EXPECT_EQ(code_of([&] { adadelta_step(p, state, AdadeltaConfig{}); }), ErrorCode::not_finite);
  EXPECT_EQ(p[0].second[0], 1.0);
  EXPECT_EQ(p[1].second[0], -1.0);
  EXPECT_TRUE(state.mean_sq_grad.empty());
}

TEST(Adadelta, RejectsBadSettingsAndMismatchedState) {
  NamedTensors p = scalar_params({1.0});
  OptimizerState state;
  AdadeltaConfig bad;
  bad.rho = 1.0;
  EXPECT_EQ(code_of([&] { adadelta_step(p, state, bad); }), ErrorCode::invalid_argument);
  state.mean_sq_grad["theta"] = {0.0, 0.0};
  EXPECT_EQ(code_of([&] { adadelta_step(p, state, AdadeltaConfig{}); }), ErrorCode::shape_mismatch);
}

// ---- features ---------------------------------------------------------------------

TEST(Features, WhitenedChannelsAndAppendedHighPass) {
  Rng rng(3);
  MultiChannelSlice s(20, 24, 3);
  s.spacing = {0.25, 0.25};
  for (float& v : s.values) v = static_cast<float>(rng.uniform(0.0, 500.0));
  const Image<double> f = make_features(s, FeatureConfig{});
  ASSERT_EQ(f.channels, 6u);
  for (std::size_t ch = 0; ch < f.channels; ++ch) {
    double mean = 0.0, sq = 0.0;
    for (std::size_t i = 0; i < f.pixels(); ++i) mean += f.values[i * 6 + ch];
    mean /= static_cast<double>(f.pixels());
    for (std::size_t i = 0; i < f.pixels(); ++i) sq += (f.values[i * 6 + ch] - mean) * (f.values[i * 6 + ch] - mean);
    EXPECT_NEAR(mean, 0.0, 1e-12);
    EXPECT_NEAR(sq / static_cast<double>(f.pixels()), 1.0, 1e-12);
  }
  FeatureConfig raw;
  raw.whiten = false;
  const Image<double> r = make_features(s, raw);
  const MultiChannelSlice hp = gaussian_highpass(s, 10.0);
  for (std::size_t i = 0; i < s.pixels(); ++i)
    for (std::size_t ch = 0; ch < 3; ++ch) {
      EXPECT_EQ(r.values[i * 6 + ch], static_cast<double>(s.values[i * 3 + ch]));
      EXPECT_NEAR(r.values[i * 6 + 3 + ch], static_cast<double>(hp.values[i * 3 + ch]), 1e-3);
    }
}

TEST(Features, ConstantChannelBecomesZero) {
  MultiChannelSlice s(10, 10, 1, 7.0f);
  s.spacing = {1, 1};
  const Image<double> f = make_features(s, FeatureConfig{});
  for (double v : f.values) EXPECT_EQ(v, 0.0);
}

// ---- training -----------------------------------------------------------------------

PhantomSpec small_phantom() {
  PhantomSpec spec;
  spec.rows = spec.cols = 44;
  spec.cord_ap = 9;
  spec.cord_lr = 12;
  spec.csf_scale = 1.3;
  spec.inversion_times_ms = {300, 900, 2200};
  return spec;
}

struct SmallData {
  std::vector<TrainingSample> training, validation;
};

SmallData small_data(const FeatureConfig& features = {}) {
  const PhantomSpec spec = small_phantom();
  SmallData d;
  for (int subject = 1; subject <= 3; ++subject)
    for (int slice = 1; slice <= 2; ++slice) {
      const auto p = generate_slice(spec, {subject, 1, slice}, 2);
      (subject == 1 ? d.validation : d.training).push_back(make_sample(p.image, p.labels, features));
    }
  return d;
}

TrainConfig small_config() {
  TrainConfig c;
  c.iterations = 10;
  c.validation_interval = 4;
  c.seed = 42;
  c.augmentation.deform_std = 1.0;
  c.augmentation.deform_truncate = 3.0;
  c.augmentation.safe_margin = 3;
  c.augmentation.window_rows = c.augmentation.window_cols = 24;
  c.model.input_channels = 6;
  c.model.hidden_channels = {4};
  c.model.kernel_size = 3;
  return c;
}

std::string log_csv(const std::vector<LogRow>& log) {
  std::ostringstream out;
  write_training_log(out, log);
  return out.str();
}

TEST(Train, RunsAreBitwiseReproducible) {
  const SmallData d = small_data();
  const TrainConfig c = small_config();
  const TrainResult a = train(d.training, d.validation, c);
  const TrainResult b = train(d.training, d.validation, c);
  EXPECT_EQ(serialize_checkpoint(a.checkpoint), serialize_checkpoint(b.checkpoint));
  EXPECT_EQ(log_csv(a.checkpoint.log), log_csv(b.checkpoint.log));
  EXPECT_EQ(a.checkpoint.iteration, 10u);
  EXPECT_EQ(a.checkpoint.log.size(), 10u);
  EXPECT_EQ(a.wall_seconds.size(), 10u);
}

TEST(Train, ValidationRunsOnScheduleAndAtTheEnd) {
  const SmallData d = small_data();
  const TrainResult r = train(d.training, d.validation, small_config());
  for (const LogRow& row : r.checkpoint.log)
    EXPECT_EQ(row.validated(), row.iteration == 4 || row.iteration == 8 || row.iteration == 10) << row.iteration;
  ASSERT_FALSE(r.checkpoint.best_params.empty());
  const LogRow& best = r.checkpoint.log[r.checkpoint.best_iteration - 1];
  EXPECT_EQ(r.checkpoint.best_score, 0.5 * (best.val_gm_dsc + best.val_wm_dsc));
  for (const LogRow& row : r.checkpoint.log)
    if (row.validated()) {
      EXPECT_LE(0.5 * (row.val_gm_dsc + row.val_wm_dsc), r.checkpoint.best_score);
    }
}

TEST(Train, ResumeReproducesUninterruptedRun) {
  const SmallData d = small_data();
  const TrainConfig c = small_config();
  const TrainResult whole = train(d.training, d.validation, c);

  TrainRuntime first_leg;
  first_leg.stop_after = 6;
  const TrainResult part = train(d.training, d.validation, c, nullptr, first_leg);
  EXPECT_EQ(part.checkpoint.iteration, 6u);
  testing::TempDir dir("resume");
  save_checkpoint(dir / "part.ckpt", part.checkpoint);
  const Checkpoint loaded = load_checkpoint(dir / "part.ckpt");
  const TrainResult resumed = train(d.training, d.validation, c, &loaded);
  EXPECT_EQ(serialize_checkpoint(resumed.checkpoint), serialize_checkpoint(whole.checkpoint));
  EXPECT_EQ(resumed.wall_seconds.size(), 4u);
}

TEST(Train, ResumeRejectsADifferentConfiguration) {
  const SmallData d = small_data();
  TrainConfig c = small_config();
  TrainRuntime rt;
  rt.stop_after = 2;
  const TrainResult part = train(d.training, d.validation, c, nullptr, rt);
  c.lambda = 0.25;
  EXPECT_EQ(code_of([&] { train(d.training, d.validation, c, &part.checkpoint); }), ErrorCode::invalid_argument);
}

TEST(Train, LossWeightDoesNotChangeTheSampleSequence) {
  const SmallData d = small_data();
  TrainConfig a = small_config();
  TrainConfig b = a;
  a.lambda = 0.0;
  b.lambda = 0.5;
  for (std::size_t i = 0; i < 50; ++i) {
    EXPECT_EQ(iteration_sample(a, i, 7), iteration_sample(b, i, 7));
    EXPECT_EQ(iteration_augmentation(a, i, 44, 44), iteration_augmentation(b, i, 44, 44));
  }
  a.iterations = b.iterations = 1;
  const LogRow ra = train(d.training, {}, a).checkpoint.log.at(0);
  const LogRow rb = train(d.training, {}, b).checkpoint.log.at(0);
  // identical window, weights and dropout masks: the terms agree, only their mix differs
  EXPECT_EQ(ra.dice_term, rb.dice_term);
  EXPECT_EQ(ra.ce_term, rb.ce_term);
  EXPECT_EQ(ra.loss, ra.ce_term);
  EXPECT_EQ(rb.loss, 0.5 * rb.dice_term + 0.5 * rb.ce_term);
}

TEST(Train, FitsASingleFixedSample) {
  const SmallData d = small_data();
  TrainConfig c = small_config();
  c.iterations = 500;
  c.augment = false;
  c.lambda = 0.0;
  c.model.hidden_channels = {8};
  c.augmentation.window_rows = c.augmentation.window_cols = 32;
  const std::vector<TrainingSample> one{d.training.front()};
  const TrainResult r = train(one, {}, c);
  const double first = r.checkpoint.log.front().loss;
  const double last = r.checkpoint.log.back().loss;
  EXPECT_LT(last, 0.1 * first) << "first " << first << " last " << last;
}

TEST(Train, ErrorsForEmptyDataAndMismatchedChannels) {
  const SmallData d = small_data();
  TrainConfig c = small_config();
  EXPECT_EQ(code_of([&] { train({}, d.validation, c); }), ErrorCode::empty_input);
  c.model.input_channels = 5;
  EXPECT_EQ(code_of([&] { train(d.training, d.validation, c); }), ErrorCode::shape_mismatch);
  c = small_config();
  c.lambda = 1.5;
  EXPECT_EQ(code_of([&] { train(d.training, d.validation, c); }), ErrorCode::invalid_argument);
  c = small_config();
  c.augmentation.window_rows = 44;  // no room for the safe margin
  EXPECT_EQ(code_of([&] { train(d.training, d.validation, c); }), ErrorCode::invalid_argument);
}

TEST(Train, NonFiniteLossIsReported) {
  const SmallData d = small_data();
  const TrainConfig c = small_config();
  TrainRuntime rt;
  rt.stop_after = 1;
  Checkpoint broken = train(d.training, {}, c, nullptr, rt).checkpoint;
  for (auto& [name, v] : broken.params)
    if (name == "classifier/b") v[0] = std::numeric_limits<double>::quiet_NaN();
  EXPECT_EQ(code_of([&] { train(d.training, {}, c, &broken); }), ErrorCode::not_finite);
}

// ---- inference --------------------------------------------------------------------

TEST(Segment, ZeroWeightsGiveUniformProbabilities) {
  TrainConfig c = small_config();
  MdgruModel model(c.model, 1);
  for (auto& [name, t] : model.named_parameters())
    for (double& v : t.values()) v = 0.0;
  const auto p = generate_slice(small_phantom(), {1, 1, 1}, 2);
  const Segmentation s = segment(model, c.features, p.image);
  for (double v : s.probabilities.values) EXPECT_EQ(v, 1.0 / 3.0);
  for (auto v : s.labels.values) EXPECT_EQ(v, background);
  EXPECT_EQ(s.labels.id, p.image.id);
  EXPECT_EQ(s.labels.spacing, p.image.spacing);
}

TEST(Segment, IsDeterministicAndChecksChannels) {
  const TrainConfig c = small_config();
  const MdgruModel model(c.model, 5);
  const auto p = generate_slice(small_phantom(), {2, 1, 1}, 2);
  const Segmentation a = segment(model, c.features, p.image);
  const Segmentation b = segment(model, c.features, p.image);
  EXPECT_EQ(a.probabilities.values, b.probabilities.values);
  EXPECT_EQ(a.labels.values, b.labels.values);
  for (std::size_t i = 0; i < a.probabilities.pixels(); ++i) {
    double total = 0.0;
    for (std::size_t l = 0; l < 3; ++l) total += a.probabilities.values[i * 3 + l];
    EXPECT_NEAR(total, 1.0, 1e-12);
  }
  const MultiChannelSlice two = channel(p.image, 0);
  EXPECT_EQ(code_of([&] { segment(model, c.features, two); }), ErrorCode::shape_mismatch);
}

TEST(Segment, ArgmaxTiesGoToTheLowerClass) {
  ProbabilityMap p(1, 3, 3);
  p.values = {0.4, 0.4, 0.2, 0.2, 0.4, 0.4, 0.5, 0.2, 0.3};
  EXPECT_EQ(argmax_labels(p).values, (std::vector<std::uint8_t>{0, 1, 0}));
}

TEST(Segment, ValidationThreadsDoNotChangeScores) {
  const SmallData d = small_data();
  const MdgruModel model(small_config().model, 9);
  const ValidationScores one = validate_model(model, d.training, 1);
  const ValidationScores three = validate_model(model, d.training, 3);
  EXPECT_EQ(one.gm_dsc, three.gm_dsc);
  EXPECT_EQ(one.wm_dsc, three.wm_dsc);
  EXPECT_EQ(one.cross_entropy, three.cross_entropy);
}

// ---- ensembles ----------------------------------------------------------------------

TEST(Ensemble, OneModelPerRater) {
  const SmallData d = small_data();
  TrainConfig c = small_config();
  c.iterations = 3;
  std::vector<RaterDataset> raters(2, RaterDataset{d.training, d.validation});
  for (auto& s : raters[1].training) s.labels = perturb_rater(s.labels, 2, 0.2, 3);
  const auto models = train_rater_ensemble(raters, c);
  ASSERT_EQ(models.size(), 2u);
  EXPECT_NE(serialize_checkpoint(models[0].checkpoint), serialize_checkpoint(models[1].checkpoint));
  EXPECT_EQ(models[1].checkpoint.config.seed, c.seed + 1);
  const auto again = train_rater_ensemble(raters, c);
  for (std::size_t k = 0; k < 2; ++k)
    EXPECT_EQ(serialize_checkpoint(again[k].checkpoint), serialize_checkpoint(models[k].checkpoint));

  const auto single = train_rater_ensemble({raters[0]}, c);
  EXPECT_EQ(serialize_checkpoint(single[0].checkpoint), serialize_checkpoint(train(d.training, d.validation, c).checkpoint));
}

TEST(Ensemble, RejectsInconsistentImageSets) {
  const SmallData d = small_data();
  std::vector<RaterDataset> raters(2, RaterDataset{d.training, d.validation});
  raters[1].training.pop_back();
  EXPECT_EQ(code_of([&] { train_rater_ensemble(raters, small_config()); }), ErrorCode::invalid_argument);
  raters[1] = raters[0];
  raters[1].training[0].features.values[0] += 1.0;
  EXPECT_EQ(code_of([&] { train_rater_ensemble(raters, small_config()); }), ErrorCode::invalid_argument);
  EXPECT_EQ(code_of([&] { train_rater_ensemble({}, small_config()); }), ErrorCode::empty_input);
}

// ---- checkpoint files ---------------------------------------------------------------

TEST(CheckpointFile, RoundTripsAndRestoresTheModel) {
  const SmallData d = small_data();
  const TrainResult r = train(d.training, d.validation, small_config());
  const auto bytes = serialize_checkpoint(r.checkpoint);
  const Checkpoint back = parse_checkpoint(bytes);
  EXPECT_EQ(serialize_checkpoint(back), bytes);
  EXPECT_EQ(back.config, r.checkpoint.config);
  EXPECT_EQ(back.optimizer, r.checkpoint.optimizer);

  const MdgruModel best = model_from(back);
  const MdgruModel last = model_from(back, false);
  const auto sb = snapshot(best), sl = snapshot(last);
  EXPECT_EQ(sb, r.checkpoint.best_params);
  EXPECT_EQ(sl, r.checkpoint.params);
}

TEST(CheckpointFile, DetectsCorruptionAndTruncation) {
  const SmallData d = small_data();
  TrainConfig c = small_config();
  c.iterations = 2;
  auto bytes = serialize_checkpoint(train(d.training, d.validation, c).checkpoint);
  auto flipped = bytes;
  flipped[flipped.size() - 100] ^= 0x10;
  EXPECT_EQ(code_of([&] { parse_checkpoint(flipped); }), ErrorCode::integrity);
  auto cut = bytes;
  cut.resize(cut.size() - 300);
  EXPECT_EQ(code_of([&] { parse_checkpoint(cut); }), ErrorCode::format);
  auto wrong = bytes;
  wrong[0] = 'X';
  EXPECT_EQ(code_of([&] { parse_checkpoint(wrong); }), ErrorCode::format);
  EXPECT_EQ(code_of([&] { load_checkpoint("/nonexistent/x.ckpt"); }), ErrorCode::io);
}

TEST(TrainingLog, CsvLeavesValidationColumnsEmpty) {
  std::vector<LogRow> rows(2);
  rows[0] = {1, 0.5, -0.25, 0.75};
  rows[1] = {2, 0.25, -0.5, 0.5, 0.8, 0.9, 0.1};
  EXPECT_EQ(log_csv(rows),
            "iteration,loss,dice_term,ce_term,val_gm_dsc,val_wm_dsc,val_ce\n"
            "1,0.5,-0.25,0.75,,,\n"
            "2,0.25,-0.5,0.5,0.80000000000000004,0.90000000000000002,0.10000000000000001\n");
}

// ---- configuration ------------------------------------------------------------------

TEST(Config, TrainConfigRoundTripsThroughJson) {
  TrainConfig c = small_config();
  c.variant = DiceVariant::gm_dice;
  c.lambda = 0.1;
  const Json j = c;
  EXPECT_EQ(j.get<TrainConfig>(), c);
  EXPECT_EQ(parse_json(j.dump(), "t").get<TrainConfig>(), c);
}

TEST(Config, PartialObjectsKeepDefaults) {
  const TrainConfig c = parse_json(R"({"iterations": 7, "model": {"kernel_size": 5}})", "t").get<TrainConfig>();
  TrainConfig expected;
  expected.iterations = 7;
  expected.model.kernel_size = 5;
  EXPECT_EQ(c, expected);
}

TEST(Config, UnknownKeysAndBadValuesAreRejected) {
  EXPECT_EQ(code_of([] { parse_json(R"({"iteration": 7})", "t").get<TrainConfig>(); }), ErrorCode::invalid_argument);
  EXPECT_EQ(code_of([] { parse_json(R"({"model": {"kernel": 5}})", "t").get<TrainConfig>(); }), ErrorCode::invalid_argument);
  EXPECT_EQ(code_of([] { parse_json(R"({"lambda": "half"})", "t").get<TrainConfig>(); }), ErrorCode::invalid_argument);
  EXPECT_EQ(code_of([] { parse_json(R"({"variant": "focal"})", "t").get<TrainConfig>(); }), ErrorCode::invalid_argument);
  EXPECT_EQ(code_of([] { parse_json("{", "t"); }), ErrorCode::format);
}

TEST(Config, PhantomSpecRoundTripsThroughJson) {
  PhantomSpec s;
  s.tissues[3].t1_ms = 3900;
  s.inversion_times_ms = {100, 200};
  const PhantomSpec back = Json(s).get<PhantomSpec>();
  EXPECT_EQ(Json(back), Json(s));
  const PhantomSpec partial = parse_json(R"({"tissues": {"csf": {"t1_ms": 3000}}})", "p").get<PhantomSpec>();
  EXPECT_EQ(partial.tissues[3].t1_ms, 3000);
  EXPECT_EQ(partial.tissues[3].proton_density, PhantomSpec{}.tissues[3].proton_density);
  EXPECT_EQ(code_of([] { parse_json(R"({"tissues": {"fat": {}}})", "p").get<PhantomSpec>(); }), ErrorCode::invalid_argument);
}

}  // namespace
}  // namespace cordseg
