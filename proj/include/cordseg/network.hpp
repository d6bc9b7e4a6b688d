#pragma once

// Multi-dimensional GRU: a forward and a backward convolutional GRU scan along
// each spatial axis, summed, then mapped to per-pixel class logits.

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "cordseg/error.hpp"
#include "cordseg/rng.hpp"
#include "cordseg/tensor.hpp"

namespace cordseg {

enum class ScanAxis { rows, cols };
enum class ScanDirection { forward, backward };

/// Parameters of one convolutional GRU. Kernels span only the non-scanned
/// axis: input kernels 1 x k x Cin x Ch, recurrent kernels 1 x k x Ch x Ch.
struct CgruParams {
  Tensor w_r, w_z, w_h;
  Tensor u_r, u_z, u_h;
  Tensor b_r, b_z, b_h;

  std::size_t kernel_size() const { return w_r.dim(1); }
  std::size_t input_channels() const { return w_r.dim(2); }
  std::size_t hidden_channels() const { return w_r.dim(3); }

  static CgruParams zeros(std::size_t cin, std::size_t ch, std::size_t k, bool requires_grad = true) {
    return {Tensor::zeros({1, k, cin, ch}, requires_grad), Tensor::zeros({1, k, cin, ch}, requires_grad),
            Tensor::zeros({1, k, cin, ch}, requires_grad), Tensor::zeros({1, k, ch, ch}, requires_grad),
            Tensor::zeros({1, k, ch, ch}, requires_grad),  Tensor::zeros({1, k, ch, ch}, requires_grad),
            Tensor::zeros({ch}, requires_grad),            Tensor::zeros({ch}, requires_grad),
            Tensor::zeros({ch}, requires_grad)};
  }

  std::vector<std::pair<std::string, Tensor>> named() const {
    return {{"w_r", w_r}, {"w_z", w_z}, {"w_h", w_h}, {"u_r", u_r}, {"u_z", u_z},
            {"u_h", u_h}, {"b_r", b_r}, {"b_z", b_z}, {"b_h", b_h}};
  }

  void validate() const {
    const std::size_t k = kernel_size(), cin = input_channels(), ch = hidden_channels();
    require(k % 2 == 1, ErrorCode::invalid_argument, "C-GRU kernel extent must be odd");
    for (const Tensor* w : {&w_r, &w_z, &w_h})
      require(w->shape() == Shape{1, k, cin, ch}, ErrorCode::shape_mismatch, "inconsistent C-GRU input kernel");
    for (const Tensor* u : {&u_r, &u_z, &u_h})
      require(u->shape() == Shape{1, k, ch, ch}, ErrorCode::shape_mismatch, "inconsistent C-GRU recurrent kernel");
    for (const Tensor* b : {&b_r, &b_z, &b_h})
      require(b->shape() == Shape{ch}, ErrorCode::shape_mismatch, "inconsistent C-GRU bias");
  }
};

/// One GRU update on a single line of the image.
///   r  = sigmoid(W_r*x + U_r*h + b_r)
///   z  = sigmoid(W_z*x + U_z*h + b_z)
///   h~ = tanh(W_h*x + U_h*(r . h) + b_h)
///   h' = (1 - z) . h + z . h~
inline Tensor cgru_step(const Tensor& x, const Tensor& h_prev, const CgruParams& p) {
  require(x.rank() == 3 && x.dim(0) == 1 && x.dim(2) == p.input_channels(), ErrorCode::shape_mismatch,
          "step input " + shape_string(x.shape()) + " does not match C-GRU input channels");
  require(h_prev.shape() == Shape{1, x.dim(1), p.hidden_channels()}, ErrorCode::shape_mismatch,
          "state " + shape_string(h_prev.shape()) + " does not match step input " + shape_string(x.shape()));
  const Tensor r = sigmoid(conv2d(x, p.w_r, p.b_r) + conv2d(h_prev, p.u_r));
  const Tensor z = sigmoid(conv2d(x, p.w_z, p.b_z) + conv2d(h_prev, p.u_z));
  const Tensor candidate = tanh(conv2d(x, p.w_h, p.b_h) + conv2d(r * h_prev, p.u_h));
  return h_prev + z * (candidate - h_prev);
}

/// Runs one C-GRU along `axis` in `direction` over an H x W x Cin image and
/// returns the H x W x Ch stack of hidden states.
inline Tensor cgru_scan(const Tensor& input, const CgruParams& p, ScanAxis axis, ScanDirection direction) {
  require(input.rank() == 3 && input.dim(2) == p.input_channels(), ErrorCode::shape_mismatch,
          "scan input " + shape_string(input.shape()) + " does not match C-GRU input channels");
  Tensor seq = axis == ScanAxis::rows ? input : transpose01(input);
  if (direction == ScanDirection::backward) seq = flip(seq, 0);

  const std::size_t steps = seq.dim(0), width = seq.dim(1), ch = p.hidden_channels();
  // Input contributions of all steps at once; the 1-row kernel keeps rows independent.
  const Tensor projected = conv2d(seq, concat({p.w_r, p.w_z, p.w_h}, 3), concat({p.b_r, p.b_z, p.b_h}, 0));
  const Tensor u_rz = concat({p.u_r, p.u_z}, 3);

  Tensor h = Tensor::zeros({1, width, ch});
  std::vector<Tensor> states;
  states.reserve(steps);
  for (std::size_t t = 0; t < steps; ++t) {
    const Tensor x = slice(projected, 0, t, t + 1);
    const Tensor rz = conv2d(h, u_rz);
    const Tensor r = sigmoid(slice(x, 2, 0, ch) + slice(rz, 2, 0, ch));
    const Tensor z = sigmoid(slice(x, 2, ch, 2 * ch) + slice(rz, 2, ch, 2 * ch));
    const Tensor candidate = tanh(slice(x, 2, 2 * ch, 3 * ch) + conv2d(r * h, p.u_h));
    h = h + z * (candidate - h);
    states.push_back(h);
  }
  Tensor out = concat(states, 0);
  if (direction == ScanDirection::backward) out = flip(out, 0);
  if (axis == ScanAxis::cols) out = transpose01(out);
  return out;
}

struct MdgruConfig {
  std::size_t input_channels = 8;
  std::vector<std::size_t> hidden_channels{16};
  std::size_t kernel_size = 7;
  std::size_t num_classes = 3;
  double dropout_rate = 0.5;
  bool dropconnect_on_state = true;
  bool residual = true;

  void validate() const {
    require(input_channels > 0, ErrorCode::invalid_argument, "input_channels must be positive");
    require(!hidden_channels.empty(), ErrorCode::invalid_argument, "at least one MD-GRU layer is required");
    for (std::size_t c : hidden_channels) require(c > 0, ErrorCode::invalid_argument, "hidden channels must be positive");
    require(kernel_size % 2 == 1, ErrorCode::invalid_argument, "kernel_size must be odd");
    require(num_classes >= 2, ErrorCode::invalid_argument, "num_classes must be at least 2");
    require(dropout_rate >= 0.0 && dropout_rate < 1.0, ErrorCode::invalid_argument, "dropout_rate must lie in [0, 1)");
  }

  bool operator==(const MdgruConfig&) const = default;
};

/// Scan order inside a layer: rows forward, rows backward, cols forward, cols backward.
inline constexpr std::array<std::pair<ScanAxis, ScanDirection>, 4> kScanOrder{{
    {ScanAxis::rows, ScanDirection::forward},
    {ScanAxis::rows, ScanDirection::backward},
    {ScanAxis::cols, ScanDirection::forward},
    {ScanAxis::cols, ScanDirection::backward},
}};

inline std::string scan_name(std::size_t index) {
  static const std::array<const char*, 4> names{"rows_forward", "rows_backward", "cols_forward", "cols_backward"};
  return names.at(index);
}

struct MdgruLayer {
  std::array<CgruParams, 4> scans;
  Tensor skip_w;  // 1 x 1 x Cin x Ch, residual only
  Tensor skip_b;
};

class MdgruModel {
 public:
  MdgruModel() = default;

  /// Glorot-uniform kernels, zero biases, drawn from `seed`.
  MdgruModel(MdgruConfig config, std::uint64_t seed) : config_(std::move(config)) {
    config_.validate();
    Rng rng(seed, Stream::init);
    auto glorot = [&rng](Shape shape, std::size_t fan_in, std::size_t fan_out) {
      const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
      std::vector<double> data(numel(shape));
      for (double& v : data) v = rng.uniform(-limit, limit);
      return Tensor(std::move(shape), std::move(data), true);
    };
    const std::size_t k = config_.kernel_size;
    std::size_t cin = config_.input_channels;
    for (std::size_t ch : config_.hidden_channels) {
      MdgruLayer layer;
      for (CgruParams& p : layer.scans) {
        p = CgruParams::zeros(cin, ch, k);
        for (Tensor* w : {&p.w_r, &p.w_z, &p.w_h}) *w = glorot({1, k, cin, ch}, k * cin, k * ch);
        for (Tensor* u : {&p.u_r, &p.u_z, &p.u_h}) *u = glorot({1, k, ch, ch}, k * ch, k * ch);
      }
      if (config_.residual) {
        layer.skip_w = glorot({1, 1, cin, ch}, cin, ch);
        layer.skip_b = Tensor::zeros({ch}, true);
      }
      layers_.push_back(std::move(layer));
      cin = ch;
    }
    classifier_w_ = glorot({1, 1, cin, config_.num_classes}, cin, config_.num_classes);
    classifier_b_ = Tensor::zeros({config_.num_classes}, true);
  }

  const MdgruConfig& config() const { return config_; }
  std::vector<MdgruLayer>& layers() { return layers_; }
  const std::vector<MdgruLayer>& layers() const { return layers_; }
  Tensor& classifier_w() { return classifier_w_; }
  Tensor& classifier_b() { return classifier_b_; }

  /// Every trainable tensor under a stable hierarchical name.
  std::vector<std::pair<std::string, Tensor>> named_parameters() const {
    std::vector<std::pair<std::string, Tensor>> out;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      const std::string prefix = "layer" + std::to_string(l) + "/";
      for (std::size_t s = 0; s < 4; ++s)
        for (auto& [name, t] : layers_[l].scans[s].named()) out.emplace_back(prefix + scan_name(s) + "/" + name, t);
      if (layers_[l].skip_w.defined()) {
        out.emplace_back(prefix + "skip/w", layers_[l].skip_w);
        out.emplace_back(prefix + "skip/b", layers_[l].skip_b);
      }
    }
    out.emplace_back("classifier/w", classifier_w_);
    out.emplace_back("classifier/b", classifier_b_);
    return out;
  }

  std::vector<Tensor> parameters() const {
    std::vector<Tensor> out;
    for (auto& [name, t] : named_parameters()) out.push_back(t);
    return out;
  }

  void zero_grad() {
    for (Tensor& t : parameters()) t.zero_grad();
  }

  /// H x W x Cin -> H x W x L logits. With `training`, dropconnect masks on the
  /// recurrent kernels and dropout on the combined scan output are drawn from
  /// `rng_seed`; without it the result depends only on input and parameters.
  Tensor forward(const Tensor& input, bool training = false, std::uint64_t rng_seed = 0) const {
    require(input.rank() == 3, ErrorCode::shape_mismatch, "input must be H x W x C, got " + shape_string(input.shape()));
    require(input.dim(2) == config_.input_channels, ErrorCode::shape_mismatch,
            "input has " + std::to_string(input.dim(2)) + " channels, model expects " +
                std::to_string(config_.input_channels));
    const bool masked = training && config_.dropout_rate > 0.0;
    const double keep = 1.0 - config_.dropout_rate;
    Rng rng(rng_seed);
    auto bernoulli_mask = [&rng, keep](const Shape& shape) {
      std::vector<double> data(numel(shape));
      for (double& v : data) v = rng.bernoulli(keep) ? 1.0 / keep : 0.0;
      return Tensor(shape, std::move(data));
    };

    Tensor x = input;
    for (const MdgruLayer& layer : layers_) {
      Tensor combined;
      for (std::size_t s = 0; s < 4; ++s) {
        CgruParams p = layer.scans[s];
        if (masked && config_.dropconnect_on_state) {
          p.u_r = p.u_r * bernoulli_mask(p.u_r.shape());
          p.u_z = p.u_z * bernoulli_mask(p.u_z.shape());
          p.u_h = p.u_h * bernoulli_mask(p.u_h.shape());
        }
        const Tensor out = cgru_scan(x, p, kScanOrder[s].first, kScanOrder[s].second);
        combined = combined.defined() ? combined + out : out;
      }
      if (masked) combined = combined * bernoulli_mask(combined.shape());
      if (layer.skip_w.defined()) combined = combined + conv2d(x, layer.skip_w, layer.skip_b);
      x = combined;
    }
    return conv2d(x, classifier_w_, classifier_b_);
  }

  /// Back-propagates a scalar loss produced by forward() into the parameters.
  static void backward(const Tensor& loss) {
    require(loss.defined() && loss.requires_grad(), ErrorCode::no_graph,
            "no recorded forward pass behind this loss; run forward() with gradients enabled");
    loss.backward();
  }

 private:
  MdgruConfig config_;
  std::vector<MdgruLayer> layers_;
  Tensor classifier_w_;
  Tensor classifier_b_;
};

}  // namespace cordseg
