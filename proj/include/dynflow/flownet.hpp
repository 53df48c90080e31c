#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "dynflow/errors.hpp"
#include "dynflow/flops.hpp"
#include "dynflow/ops.hpp"
#include "dynflow/params.hpp"
#include "dynflow/tensor.hpp"

namespace dynflow {

// Miniature recurrent flow backbone: a feature/context encoder, a single
// level all-pairs correlation volume, and a GRU update operator that emits
// a residual flow delta. Flow lives on the feature grid (image / downscale).
struct FlowNetConfig {
  std::size_t image_channels = 1;
  std::size_t downscale = 2;
  std::size_t feature_channels = 32;  // matching features and GRU hidden state
  std::size_t context_channels = 16;  // static GRU input from the context encoder
  std::size_t encoder_hidden = 16;
  std::size_t radius = 3;
  std::size_t corr_hidden = 32;
  std::size_t flow_hidden = 16;
  std::size_t motion_channels = 32;  // including the 2 raw flow channels
  std::size_t head_hidden = 48;

  std::size_t lookup_channels() const { return (2 * radius + 1) * (2 * radius + 1); }
  std::size_t gru_input() const { return feature_channels + motion_channels + context_channels; }
};

struct FeatureMaps {
  Tensor phi;      // [N,Cf,h,w] initial hidden state
  Tensor context;  // [N,Cc,h,w]
};

struct CorrVolume {
  Tensor corr;  // [N,h,w,h,w]
};

struct UpdateResult {
  Tensor phi;   // [N,Cf,h,w]
  Tensor flow;  // [N,2,h,w]
};

class FlowNet {
 public:
  FlowNet(const FlowNetConfig& cfg, ParamStore& params) : cfg_(cfg), params_(&params) {}

  static void register_params(ParamStore& params, const FlowNetConfig& c, std::uint64_t seed) {
    auto conv = [&](const std::string& name, std::size_t cout, std::size_t cin, std::size_t k) {
      params.add("flownet." + name + ".weight", {cout, cin, k, k}, cin * k * k, seed);
      params.add("flownet." + name + ".bias", {cout}, cin * k * k, seed);
    };
    conv("fenc1", c.encoder_hidden, c.image_channels, 3);
    conv("fenc2", c.feature_channels, c.encoder_hidden, 3);
    conv("cenc1", c.encoder_hidden, 2 * c.image_channels, 3);
    conv("cenc2", c.feature_channels + c.context_channels, c.encoder_hidden, 3);
    conv("motion_corr", c.corr_hidden, c.lookup_channels(), 1);
    conv("motion_flow", c.flow_hidden, 2, 3);
    conv("motion_mix", c.motion_channels - 2, c.corr_hidden + c.flow_hidden, 1);
    conv("gru_z", c.feature_channels, c.gru_input(), 1);
    conv("gru_r", c.feature_channels, c.gru_input(), 1);
    conv("gru_q", c.feature_channels, c.gru_input(), 1);
    conv("head1", c.head_hidden, c.feature_channels, 3);
    conv("head2", 2, c.head_hidden, 3);
  }

  static bool is_backbone_param(const std::string& name) { return name.rfind("flownet.", 0) == 0; }

  const FlowNetConfig& config() const { return cfg_; }

  void check_image_size(std::size_t height, std::size_t width) const {
    if (height == 0 || width == 0 || height % cfg_.downscale || width % cfg_.downscale) {
      throw ConfigError("image size " + std::to_string(height) + "x" + std::to_string(width) +
                        " is not divisible by downscale factor " +
                        std::to_string(cfg_.downscale));
    }
  }

  // image_pair: [N, 2*Ci, H, W] with the reference frame in the first Ci
  // channels and the target frame in the next Ci.
  std::pair<FeatureMaps, CorrVolume> encode(const Tensor& image_pair) const {
    if (image_pair.rank() != 4 || image_pair.size(1) != 2 * cfg_.image_channels) {
      throw ShapeError("encode: expected [N," + std::to_string(2 * cfg_.image_channels) +
                       ",H,W], got " + shape_str(image_pair.shape()));
    }
    check_image_size(image_pair.size(2), image_pair.size(3));
    const std::size_t ci = cfg_.image_channels, cf = cfg_.feature_channels;
    Tensor f1 = features(slice_channels(image_pair, 0, ci));
    Tensor f2 = features(slice_channels(image_pair, ci, ci));
    CorrVolume corr{corr_volume(f1, f2)};

    Tensor ctx = conv("cenc2", relu(conv("cenc1", image_pair, cfg_.downscale, 1)), 1, 1);
    FeatureMaps maps{dynflow::tanh(slice_channels(ctx, 0, cf)),
                     relu(slice_channels(ctx, cf, cfg_.context_channels))};
    return {std::move(maps), std::move(corr)};
  }

  // Matching features of a single frame, [N,Cf,h,w].
  Tensor features(const Tensor& image) const {
    return conv("fenc2", relu(conv("fenc1", image, cfg_.downscale, 1)), 1, 1);
  }

  // One refinement step from (phi_hat, flow_hat). Returns the new hidden
  // state and flow_hat + delta.
  UpdateResult update(const Tensor& phi_hat, const Tensor& flow_hat, const CorrVolume& corr,
                      const FeatureMaps& maps) const {
    Tensor lookup = corr_lookup(corr.corr, flow_hat, cfg_.radius);
    Tensor c = relu(conv("motion_corr", lookup, 1, 0));
    Tensor f = relu(conv("motion_flow", flow_hat, 1, 1));
    Tensor m = relu(conv("motion_mix", concat_channels({c, f}), 1, 0));
    Tensor x = concat_channels({m, flow_hat, maps.context});

    Tensor hx = concat_channels({phi_hat, x});
    Tensor z = sigmoid(conv("gru_z", hx, 1, 0));
    Tensor r = sigmoid(conv("gru_r", hx, 1, 0));
    Tensor q = dynflow::tanh(conv("gru_q", concat_channels({mul(r, phi_hat), x}), 1, 0));
    Tensor phi = add(phi_hat, mul(z, sub(q, phi_hat)));

    Tensor delta = conv("head2", relu(conv("head1", phi, 1, 1)), 1, 1);
    return {phi, add(flow_hat, delta)};
  }

  // Analytic per-sample layer walk of encode() at image size H x W.
  std::vector<LayerSpec> encoder_layers(std::size_t height, std::size_t width) const {
    const std::size_t h = height / cfg_.downscale, w = width / cfg_.downscale, px = h * w;
    const auto& c = cfg_;
    std::vector<LayerSpec> layers;
    for (const char* frame : {"frame1", "frame2"}) {
      layers.push_back(conv_layer(std::string("fenc1.") + frame, 3, c.image_channels,
                                  c.encoder_hidden, h, w));
      layers.push_back(elementwise_layer(LayerKind::kRelu, "fenc1.relu", c.encoder_hidden * px));
      layers.push_back(conv_layer(std::string("fenc2.") + frame, 3, c.encoder_hidden,
                                  c.feature_channels, h, w));
    }
    LayerSpec corr;
    corr.kind = LayerKind::kCorrVolume;
    corr.name = "corr_volume";
    corr.samples = 1;
    corr.pixels = px;
    corr.channels = c.feature_channels;
    layers.push_back(corr);
    layers.push_back(conv_layer("cenc1", 3, 2 * c.image_channels, c.encoder_hidden, h, w));
    layers.push_back(elementwise_layer(LayerKind::kRelu, "cenc1.relu", c.encoder_hidden * px));
    layers.push_back(conv_layer("cenc2", 3, c.encoder_hidden,
                                c.feature_channels + c.context_channels, h, w));
    layers.push_back(elementwise_layer(LayerKind::kTanh, "phi0.tanh", c.feature_channels * px));
    layers.push_back(elementwise_layer(LayerKind::kRelu, "context.relu", c.context_channels * px));
    return layers;
  }

  // Analytic per-sample layer walk of one update() on an h x w feature grid.
  std::vector<LayerSpec> update_layers(std::size_t h, std::size_t w) const {
    const auto& c = cfg_;
    const std::size_t px = h * w, cf = c.feature_channels;
    std::vector<LayerSpec> L;
    L.push_back(elementwise_layer(LayerKind::kCorrLookup, "lookup", c.lookup_channels() * px));
    L.push_back(conv_layer("motion_corr", 1, c.lookup_channels(), c.corr_hidden, h, w));
    L.push_back(elementwise_layer(LayerKind::kRelu, "motion_corr.relu", c.corr_hidden * px));
    L.push_back(conv_layer("motion_flow", 3, 2, c.flow_hidden, h, w));
    L.push_back(elementwise_layer(LayerKind::kRelu, "motion_flow.relu", c.flow_hidden * px));
    L.push_back(conv_layer("motion_mix", 1, c.corr_hidden + c.flow_hidden, c.motion_channels - 2, h, w));
    L.push_back(elementwise_layer(LayerKind::kRelu, "motion_mix.relu", (c.motion_channels - 2) * px));
    L.push_back(conv_layer("gru_z", 1, c.gru_input(), cf, h, w));
    L.push_back(elementwise_layer(LayerKind::kSigmoid, "gru_z.sigmoid", cf * px));
    L.push_back(conv_layer("gru_r", 1, c.gru_input(), cf, h, w));
    L.push_back(elementwise_layer(LayerKind::kSigmoid, "gru_r.sigmoid", cf * px));
    L.push_back(elementwise_layer(LayerKind::kElementwise, "gru.reset_mul", cf * px));
    L.push_back(conv_layer("gru_q", 1, c.gru_input(), cf, h, w));
    L.push_back(elementwise_layer(LayerKind::kTanh, "gru_q.tanh", cf * px));
    L.push_back(elementwise_layer(LayerKind::kElementwise, "gru.blend", 3 * cf * px));
    L.push_back(conv_layer("head1", 3, cf, c.head_hidden, h, w));
    L.push_back(elementwise_layer(LayerKind::kRelu, "head1.relu", c.head_hidden * px));
    L.push_back(conv_layer("head2", 3, c.head_hidden, 2, h, w));
    L.push_back(elementwise_layer(LayerKind::kElementwise, "flow.residual", 2 * px));
    return L;
  }

 private:
  Tensor conv(const std::string& name, const Tensor& x, std::size_t stride, std::size_t pad) const {
    return conv2d(x, params_->get("flownet." + name + ".weight"),
                  params_->get("flownet." + name + ".bias"), stride, pad);
  }

  FlowNetConfig cfg_;
  ParamStore* params_;
};

// Upsamples a feature-grid flow to image resolution for reporting:
// bilinear resampling by `factor` (align-corners off) with values scaled by
// `factor`.
inline Tensor upsample_flow(const Tensor& flow, std::size_t factor) {
  if (flow.rank() != 4 || flow.size(1) != 2) {
    throw ShapeError("upsample_flow: expected [N,2,h,w], got " + shape_str(flow.shape()));
  }
  const std::size_t n_batch = flow.size(0), h = flow.size(2), w = flow.size(3);
  const std::size_t H = h * factor, W = w * factor;
  std::vector<double> out(n_batch * 2 * H * W);
  const double f = static_cast<double>(factor);
  for (std::size_t nc = 0; nc < n_batch * 2; ++nc) {
    const double* src = flow.data().data() + nc * h * w;
    double* dst = out.data() + nc * H * W;
    for (std::size_t Y = 0; Y < H; ++Y) {
      double sy = (static_cast<double>(Y) + 0.5) / f - 0.5;
      sy = std::clamp(sy, 0.0, static_cast<double>(h - 1));
      const std::size_t y0 = static_cast<std::size_t>(sy);
      const std::size_t y1 = std::min(y0 + 1, h - 1);
      const double ay = sy - static_cast<double>(y0);
      for (std::size_t X = 0; X < W; ++X) {
        double sx = (static_cast<double>(X) + 0.5) / f - 0.5;
        sx = std::clamp(sx, 0.0, static_cast<double>(w - 1));
        const std::size_t x0 = static_cast<std::size_t>(sx);
        const std::size_t x1 = std::min(x0 + 1, w - 1);
        const double ax = sx - static_cast<double>(x0);
        const double v = (1 - ay) * ((1 - ax) * src[y0 * w + x0] + ax * src[y0 * w + x1]) +
                         ay * ((1 - ax) * src[y1 * w + x0] + ax * src[y1 * w + x1]);
        dst[Y * W + X] = v * f;
      }
    }
  }
  return Tensor(Shape{n_batch, 2, H, W}, std::move(out));
}

}  // namespace dynflow
