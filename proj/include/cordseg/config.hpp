#pragma once

// JSON forms of the configuration structs. Reading is strict: unknown keys and
// mistyped values are errors, absent keys keep their defaults.

#include <set>
#include <string>

#include "json.hpp"

#include "cordseg/augment.hpp"
#include "cordseg/error.hpp"
#include "cordseg/features.hpp"
#include "cordseg/losses.hpp"
#include "cordseg/network.hpp"
#include "cordseg/optimizer.hpp"
#include "cordseg/phantom.hpp"
#include "cordseg/preprocess.hpp"
#include "cordseg/train.hpp"

namespace cordseg {

using Json = nlohmann::json;

namespace detail {

class JsonFields {
 public:
  JsonFields(const Json& j, std::string context) : j_(j), context_(std::move(context)) {
    require(j.is_object(), ErrorCode::invalid_argument, context_ + " must be a JSON object");
  }

  template <class T>
  void get(const char* key, T& out) {
    if (!j_.contains(key)) return;
    used_.insert(key);
    try {
      out = j_.at(key).template get<T>();
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::invalid_argument, context_ + "." + key + ": " + e.what());
    }
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      require(used_.count(it.key()) > 0, ErrorCode::invalid_argument, "unknown key " + context_ + "." + it.key());
  }

 private:
  const Json& j_;
  std::string context_;
  std::set<std::string> used_;
};

}  // namespace detail

inline void to_json(Json& j, const AugmentConfig& c) {
  j = Json{{"deform_support_points", c.deform_support_points},
           {"deform_std", c.deform_std},
           {"deform_truncate", c.deform_truncate},
           {"scale_min", c.scale_min},
           {"scale_max", c.scale_max},
           {"rotation_deg", c.rotation_deg},
           {"mirror_prob", c.mirror_prob},
           {"safe_margin", c.safe_margin},
           {"window_rows", c.window_rows},
           {"window_cols", c.window_cols}};
}

inline void from_json(const Json& j, AugmentConfig& c) {
  detail::JsonFields f(j, "augmentation");
  f.get("deform_support_points", c.deform_support_points);
  f.get("deform_std", c.deform_std);
  f.get("deform_truncate", c.deform_truncate);
  f.get("scale_min", c.scale_min);
  f.get("scale_max", c.scale_max);
  f.get("rotation_deg", c.rotation_deg);
  f.get("mirror_prob", c.mirror_prob);
  f.get("safe_margin", c.safe_margin);
  f.get("window_rows", c.window_rows);
  f.get("window_cols", c.window_cols);
  f.finish();
}

inline void to_json(Json& j, const MdgruConfig& c) {
  j = Json{{"input_channels", c.input_channels},
           {"hidden_channels", c.hidden_channels},
           {"kernel_size", c.kernel_size},
           {"num_classes", c.num_classes},
           {"dropout_rate", c.dropout_rate},
           {"dropconnect_on_state", c.dropconnect_on_state},
           {"residual", c.residual}};
}

inline void from_json(const Json& j, MdgruConfig& c) {
  detail::JsonFields f(j, "model");
  f.get("input_channels", c.input_channels);
  f.get("hidden_channels", c.hidden_channels);
  f.get("kernel_size", c.kernel_size);
  f.get("num_classes", c.num_classes);
  f.get("dropout_rate", c.dropout_rate);
  f.get("dropconnect_on_state", c.dropconnect_on_state);
  f.get("residual", c.residual);
  f.finish();
}

inline void to_json(Json& j, const AdadeltaConfig& c) {
  j = Json{{"learning_rate", c.learning_rate}, {"rho", c.rho}, {"epsilon", c.epsilon}};
}

inline void from_json(const Json& j, AdadeltaConfig& c) {
  detail::JsonFields f(j, "optimizer");
  f.get("learning_rate", c.learning_rate);
  f.get("rho", c.rho);
  f.get("epsilon", c.epsilon);
  f.finish();
}

inline void to_json(Json& j, const FeatureConfig& c) {
  j = Json{{"whiten", c.whiten}, {"append_highpass", c.append_highpass}, {"highpass_variance", c.highpass_variance}};
}

inline void from_json(const Json& j, FeatureConfig& c) {
  detail::JsonFields f(j, "features");
  f.get("whiten", c.whiten);
  f.get("append_highpass", c.append_highpass);
  f.get("highpass_variance", c.highpass_variance);
  f.finish();
}

inline void to_json(Json& j, const PreprocessConfig& c) {
  j = Json{{"upsample_factor", c.upsample_factor},
           {"crop_inner_ninth", c.crop_inner_ninth},
           {"target_spacing_mm", c.target_spacing_mm},
           {"target_extent", c.target_extent}};
}

inline void from_json(const Json& j, PreprocessConfig& c) {
  detail::JsonFields f(j, "preprocess");
  f.get("upsample_factor", c.upsample_factor);
  f.get("crop_inner_ninth", c.crop_inner_ninth);
  f.get("target_spacing_mm", c.target_spacing_mm);
  f.get("target_extent", c.target_extent);
  f.finish();
}

inline void to_json(Json& j, const TrainConfig& c) {
  j = Json{{"iterations", c.iterations},
           {"lambda", c.lambda},
           {"variant", std::string(to_string(c.variant))},
           {"optimizer", c.optimizer},
           {"validation_interval", c.validation_interval},
           {"seed", c.seed},
           {"augment", c.augment},
           {"augmentation", c.augmentation},
           {"features", c.features},
           {"model", c.model}};
}

inline void from_json(const Json& j, TrainConfig& c) {
  detail::JsonFields f(j, "train");
  std::string variant(to_string(c.variant));
  f.get("iterations", c.iterations);
  f.get("lambda", c.lambda);
  f.get("variant", variant);
  f.get("optimizer", c.optimizer);
  f.get("validation_interval", c.validation_interval);
  f.get("seed", c.seed);
  f.get("augment", c.augment);
  f.get("augmentation", c.augmentation);
  f.get("features", c.features);
  f.get("model", c.model);
  f.finish();
  c.variant = parse_dice_variant(variant);
}

inline const char* signal_tissue_key(std::size_t t) {
  static const char* const keys[kSignalTissues] = {"background", "gray_matter", "white_matter", "csf"};
  return keys[t];
}

inline void to_json(Json& j, const PhantomSpec& s) {
  Json tissues = Json::object();
  for (std::size_t t = 0; t < kSignalTissues; ++t)
    tissues[signal_tissue_key(t)] = Json{{"t1_ms", s.tissues[t].t1_ms}, {"proton_density", s.tissues[t].proton_density}};
  j = Json{{"rows", s.rows},
           {"cols", s.cols},
           {"spacing_mm", s.spacing_mm},
           {"inversion_times_ms", s.inversion_times_ms},
           {"tissues", tissues},
           {"intensity_scale", s.intensity_scale},
           {"noise_std", s.noise_std},
           {"partial_volume_samples", s.partial_volume_samples},
           {"cord_ap", s.cord_ap},
           {"cord_lr", s.cord_lr},
           {"csf_scale", s.csf_scale},
           {"lobe_scale", s.lobe_scale},
           {"waist_half_width", s.waist_half_width},
           {"subject_shape_std", s.subject_shape_std},
           {"subject_offset_std", s.subject_offset_std},
           {"subject_rotation_std_deg", s.subject_rotation_std_deg},
           {"slice_drift", s.slice_drift},
           {"jitter_translation_px", s.jitter_translation_px},
           {"jitter_rotation_deg", s.jitter_rotation_deg},
           {"jitter_slice_shift", s.jitter_slice_shift},
           {"repositioned_scan", s.repositioned_scan},
           {"reposition_factor", s.reposition_factor},
           {"seed", s.seed}};
}

inline void from_json(const Json& j, PhantomSpec& s) {
  detail::JsonFields f(j, "phantom");
  f.get("rows", s.rows);
  f.get("cols", s.cols);
  f.get("spacing_mm", s.spacing_mm);
  f.get("inversion_times_ms", s.inversion_times_ms);
  Json tissues = Json::object();
  f.get("tissues", tissues);
  f.get("intensity_scale", s.intensity_scale);
  f.get("noise_std", s.noise_std);
  f.get("partial_volume_samples", s.partial_volume_samples);
  f.get("cord_ap", s.cord_ap);
  f.get("cord_lr", s.cord_lr);
  f.get("csf_scale", s.csf_scale);
  f.get("lobe_scale", s.lobe_scale);
  f.get("waist_half_width", s.waist_half_width);
  f.get("subject_shape_std", s.subject_shape_std);
  f.get("subject_offset_std", s.subject_offset_std);
  f.get("subject_rotation_std_deg", s.subject_rotation_std_deg);
  f.get("slice_drift", s.slice_drift);
  f.get("jitter_translation_px", s.jitter_translation_px);
  f.get("jitter_rotation_deg", s.jitter_rotation_deg);
  f.get("jitter_slice_shift", s.jitter_slice_shift);
  f.get("repositioned_scan", s.repositioned_scan);
  f.get("reposition_factor", s.reposition_factor);
  f.get("seed", s.seed);
  f.finish();
  detail::JsonFields tf(tissues, "phantom.tissues");
  for (std::size_t t = 0; t < kSignalTissues; ++t) {
    Json one = Json::object();
    tf.get(signal_tissue_key(t), one);
    detail::JsonFields of(one, std::string("phantom.tissues.") + signal_tissue_key(t));
    of.get("t1_ms", s.tissues[t].t1_ms);
    of.get("proton_density", s.tissues[t].proton_density);
    of.finish();
  }
  tf.finish();
}

inline void to_json(Json& j, const PhantomLayout& l) {
  j = Json{{"subjects", l.subjects},
           {"scans", l.scans},
           {"slices", l.slices},
           {"raters", l.raters},
           {"rater_flip_prob", l.rater_flip_prob},
           {"test_subjects", l.test_subjects}};
}

inline void from_json(const Json& j, PhantomLayout& l) {
  detail::JsonFields f(j, "layout");
  f.get("subjects", l.subjects);
  f.get("scans", l.scans);
  f.get("slices", l.slices);
  f.get("raters", l.raters);
  f.get("rater_flip_prob", l.rater_flip_prob);
  f.get("test_subjects", l.test_subjects);
  f.finish();
}

/// Parses JSON text, reporting syntax errors as format errors.
inline Json parse_json(const std::string& text, const std::string& what) {
  try {
    return Json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(ErrorCode::format, what + ": " + e.what());
  }
}

}  // namespace cordseg
