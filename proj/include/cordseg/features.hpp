#pragma once

// Network input built from a multi-channel slice: the channels themselves, optionally
// followed by their Gaussian high-pass responses, each channel scaled to zero mean
// and unit variance over the slice.

#include <cmath>
#include <cstddef>

#include "cordseg/error.hpp"
#include "cordseg/image.hpp"
#include "cordseg/preprocess.hpp"

namespace cordseg {

struct FeatureConfig {
  bool whiten = true;
  bool append_highpass = true;
  double highpass_variance = 10.0;  // squared pixels

  void validate() const {
    require(!append_highpass || highpass_variance > 0.0, ErrorCode::invalid_argument,
            "high-pass variance must be positive");
  }

  std::size_t output_channels(std::size_t input_channels) const {
    return append_highpass ? 2 * input_channels : input_channels;
  }

  bool operator==(const FeatureConfig&) const = default;
};

namespace detail {

inline void whiten_channel(Image<double>& img, std::size_t ch) {
  const auto n = static_cast<double>(img.pixels());
  double mean = 0.0;
  for (std::size_t i = 0; i < img.pixels(); ++i) mean += img.values[i * img.channels + ch];
  mean /= n;
  double var = 0.0;
  for (std::size_t i = 0; i < img.pixels(); ++i) {
    const double d = img.values[i * img.channels + ch] - mean;
    var += d * d;
  }
  var /= n;
  // constant channels are only centered
  const double scale = var > 0.0 ? 1.0 / std::sqrt(var) : 1.0;
  for (std::size_t i = 0; i < img.pixels(); ++i) {
    double& v = img.values[i * img.channels + ch];
    v = (v - mean) * scale;
  }
}

}  // namespace detail

template <class T>
Image<double> make_features(const Image<T>& slice, const FeatureConfig& config) {
  config.validate();
  slice.validate();
  const std::size_t c = slice.channels;
  Image<double> out = slice.template like<double>(config.output_channels(c));
  for (std::size_t i = 0; i < slice.pixels(); ++i)
    for (std::size_t ch = 0; ch < c; ++ch) out.values[i * out.channels + ch] = static_cast<double>(slice.values[i * c + ch]);
  if (config.append_highpass) {
    Image<double> source = slice.template like<double>(c);
    for (std::size_t i = 0; i < source.values.size(); ++i) source.values[i] = static_cast<double>(slice.values[i]);
    const Image<double> hp = gaussian_highpass(source, config.highpass_variance);
    for (std::size_t i = 0; i < slice.pixels(); ++i)
      for (std::size_t ch = 0; ch < c; ++ch) out.values[i * out.channels + c + ch] = hp.values[i * c + ch];
  }
  if (config.whiten)
    for (std::size_t ch = 0; ch < out.channels; ++ch) detail::whiten_channel(out, ch);
  return out;
}

}  // namespace cordseg
