#pragma once

// Cross-entropy, Dice and generalized Dice losses over per-pixel class
// probabilities. Tensors are laid out ... x L with the label axis last; every
// other axis belongs to the image domain.

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cordseg/error.hpp"
#include "cordseg/tensor.hpp"

namespace cordseg {

inline constexpr double kLossEpsilon = 1e-12;

enum class DiceVariant { dice, generalized, gm_dice };

inline std::string_view to_string(DiceVariant v) {
  switch (v) {
    case DiceVariant::dice: return "dl";
    case DiceVariant::generalized: return "gdl";
    case DiceVariant::gm_dice: return "gm-dl";
  }
  return "?";
}

inline DiceVariant parse_dice_variant(std::string_view s) {
  if (s == "dl") return DiceVariant::dice;
  if (s == "gdl") return DiceVariant::generalized;
  if (s == "gm-dl") return DiceVariant::gm_dice;
  throw Error(ErrorCode::invalid_argument, "unknown loss variant '" + std::string(s) + "' (dl, gdl, gm-dl)");
}

struct ClassWeights {
  std::vector<double> values;
};

/// One-hot encoding of a label raster into a (size x L) tensor with shape `domain` + {L}.
inline Tensor one_hot(std::span<const std::uint8_t> labels, Shape domain, std::size_t num_classes) {
  require(numel(domain) == labels.size(), ErrorCode::shape_mismatch, "label count does not match domain");
  std::vector<double> data(labels.size() * num_classes, 0.0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    require(labels[i] < num_classes, ErrorCode::invalid_argument,
            "label " + std::to_string(labels[i]) + " outside [0, " + std::to_string(num_classes) + ")");
    data[i * num_classes + labels[i]] = 1.0;
  }
  domain.push_back(num_classes);
  return Tensor(std::move(domain), std::move(data));
}

namespace detail {

inline std::vector<std::size_t> domain_axes(const Tensor& t) {
  std::vector<std::size_t> axes(t.rank() - 1);
  for (std::size_t i = 0; i < axes.size(); ++i) axes[i] = i;
  return axes;
}

inline void check_targets(const Tensor& r) {
  require(r.rank() >= 2, ErrorCode::shape_mismatch, "targets need a domain and a label axis");
  const std::size_t labels = r.shape().back();
  const auto v = r.data();
  for (std::size_t x = 0; x < v.size(); x += labels) {
    double total = 0.0;
    for (std::size_t l = 0; l < labels; ++l) {
      require(v[x + l] == 0.0 || v[x + l] == 1.0, ErrorCode::invalid_argument, "targets must be one-hot");
      total += v[x + l];
    }
    require(total == 1.0, ErrorCode::invalid_argument, "targets must be one-hot");
  }
}

inline void check_inputs(const Tensor& p, const Tensor& r) {
  require(p.shape() == r.shape(), ErrorCode::shape_mismatch,
          "prediction " + shape_string(p.shape()) + " and target " + shape_string(r.shape()) + " differ");
  check_targets(r);
  const std::size_t labels = p.shape().back();
  const auto v = p.data();
  for (std::size_t x = 0; x < v.size(); x += labels) {
    double total = 0.0;
    for (std::size_t l = 0; l < labels; ++l) {
      require(v[x + l] >= 0.0 && v[x + l] <= 1.0, ErrorCode::invalid_argument, "probabilities must lie in [0, 1]");
      total += v[x + l];
    }
    require(std::abs(total - 1.0) <= 1e-9, ErrorCode::invalid_argument, "probabilities must sum to 1 per pixel");
  }
}

/// Weights scaled to sum to one, as a constant tensor.
inline Tensor normalized_weights(const ClassWeights& w, std::size_t labels) {
  require(w.values.size() == labels, ErrorCode::shape_mismatch,
          std::to_string(w.values.size()) + " class weights for " + std::to_string(labels) + " labels");
  double total = 0.0;
  for (double v : w.values) {
    require(v >= 0.0 && std::isfinite(v), ErrorCode::invalid_argument, "class weights must be finite and nonnegative");
    total += v;
  }
  require(total > 0.0, ErrorCode::invalid_argument, "all class weights are zero");
  std::vector<double> out(labels);
  for (std::size_t l = 0; l < labels; ++l) out[l] = w.values[l] / total;
  return Tensor({labels}, std::move(out));
}

/// Per-label intersections sum_x p r and totals sum_x (p + r).
inline std::pair<Tensor, Tensor> overlap_terms(const Tensor& p, const Tensor& r) {
  const auto axes = domain_axes(p);
  const Tensor intersection = sum(p * r, axes);
  const Tensor total = sum(p, axes) + sum(r, axes);
  return {intersection, total};
}

}  // namespace detail

/// Regularized inverse squared volume: w_l = 1 / (1 + (sum_x r_lx)^2).
inline ClassWeights class_weights(const Tensor& r) {
  detail::check_targets(r);
  const std::size_t labels = r.shape().back();
  std::vector<double> volume(labels, 0.0);
  const auto v = r.data();
  for (std::size_t i = 0; i < v.size(); ++i) volume[i % labels] += v[i];
  ClassWeights w;
  for (double n : volume) w.values.push_back(1.0 / (1.0 + n * n));
  return w;
}

/// Weights that keep only the gray-matter Dice term.
inline ClassWeights single_class_weights(std::size_t labels, std::size_t keep) {
  require(keep < labels, ErrorCode::invalid_argument, "class index out of range");
  ClassWeights w{std::vector<double>(labels, 0.0)};
  w.values[keep] = 1.0;
  return w;
}

/// -(1/|X|) sum_x sum_l r_lx log p_lx with p clamped to [eps, 1 - eps].
inline Tensor cross_entropy(const Tensor& p, const Tensor& r) {
  detail::check_inputs(p, r);
  const double pixels = static_cast<double>(p.size() / p.shape().back());
  return -sum(r * log(clamp(p, kLossEpsilon, 1.0 - kLossEpsilon))) / pixels;
}

/// Weighted mean of per-label soft Dice scores, negated.
inline Tensor dice_loss(const Tensor& p, const Tensor& r, const ClassWeights& w) {
  detail::check_inputs(p, r);
  const Tensor weights = detail::normalized_weights(w, p.shape().back());
  const auto [intersection, total] = detail::overlap_terms(p, r);
  return -sum((intersection * 2.0) / (total + kLossEpsilon) * weights);
}

/// Weighted intersections over weighted totals across all labels, negated.
inline Tensor generalized_dice_loss(const Tensor& p, const Tensor& r, const ClassWeights& w) {
  detail::check_inputs(p, r);
  const Tensor weights = detail::normalized_weights(w, p.shape().back());
  const auto [intersection, total] = detail::overlap_terms(p, r);
  return -((sum(intersection * weights) * 2.0) / (sum(total * weights) + kLossEpsilon));
}

struct LossTerms {
  Tensor total;
  double dice = 0.0;
  double cross_entropy = 0.0;
};

/// lambda * L_{D or GD} + (1 - lambda) * L_C with weights computed from `r`.
inline LossTerms combined_loss_terms(const Tensor& p, const Tensor& r, double lambda, DiceVariant variant,
                                     std::size_t gm_label = 1) {
  require(lambda >= 0.0 && lambda <= 1.0, ErrorCode::invalid_argument,
          "lambda must lie in [0, 1], got " + std::to_string(lambda));
  Tensor dice;
  switch (variant) {
    case DiceVariant::dice: dice = dice_loss(p, r, class_weights(r)); break;
    case DiceVariant::generalized: dice = generalized_dice_loss(p, r, class_weights(r)); break;
    case DiceVariant::gm_dice: dice = dice_loss(p, r, single_class_weights(p.shape().back(), gm_label)); break;
  }
  const Tensor ce = cross_entropy(p, r);
  return {dice * lambda + ce * (1.0 - lambda), dice.item(), ce.item()};
}

inline Tensor combined_loss(const Tensor& p, const Tensor& r, double lambda, DiceVariant variant,
                            std::size_t gm_label = 1) {
  return combined_loss_terms(p, r, lambda, variant, gm_label).total;
}

}  // namespace cordseg
