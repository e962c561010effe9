#pragma once

#include <vector>

#include "vfi/tensor.hpp"

// Differentiable tensor operations. Image-like tensors are NCHW.
namespace vfi {

enum class Activation { relu, leaky_relu, tanh, sigmoid, identity };

const char* activation_name(Activation kind);
Activation parse_activation(const std::string& name);

enum class ResizeDirection { up2, down2 };

enum class BatchNormMode { train, eval };

/// Per-channel running statistics owned by a batch-norm layer.
struct RunningStats {
    std::vector<double> mean;
    std::vector<double> var;
    explicit RunningStats(int channels = 0) : mean(channels, 0.0), var(channels, 1.0) {}
};

inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.9;
inline constexpr double kLeakySlope = 0.2;

// Cross-correlation with zero padding. kernel is [Co,Ci,k,k], bias is [Co].
Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, int stride, int padding);

Tensor activation(const Tensor& input, Activation kind, double slope = kLeakySlope);
inline Tensor relu(const Tensor& x) { return activation(x, Activation::relu); }
inline Tensor tanh(const Tensor& x) { return activation(x, Activation::tanh); }
inline Tensor sigmoid(const Tensor& x) { return activation(x, Activation::sigmoid); }

// down2 averages 2x2 blocks; up2 is half-pixel-centre bilinear with edge clamping.
Tensor bilinear_resize(const Tensor& input, ResizeDirection direction);
Tensor upsample2(const Tensor& input);
Tensor downsample2(const Tensor& input);
Tensor upsample_times(const Tensor& input, int times);
Tensor downsample_times(const Tensor& input, int times);

/// Train mode normalises with (biased) batch statistics and folds them into
/// `stats` with momentum 0.9 (unbiased variance); eval mode uses `stats`.
Tensor batch_norm(const Tensor& input, const Tensor& scale, const Tensor& shift, RunningStats& stats,
                  BatchNormMode mode, double momentum = kBatchNormMomentum, double eps = kBatchNormEps);

// Reductions to a [1] tensor.
Tensor mean_abs_error(const Tensor& a, const Tensor& b);
Tensor mean_squared_error(const Tensor& a, const Tensor& b);
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

// Elementwise arithmetic on equal shapes.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double offset);
/// Natural log; inputs are clamped into [floor, 1 - floor] first when floor > 0.
Tensor log_clamped(const Tensor& x, double floor);
/// Value clamp; gradient passes only where the input was inside the range.
Tensor clamp(const Tensor& x, double lo, double hi);

// Channel plumbing.
Tensor concat_channels(const std::vector<Tensor>& parts);
Tensor slice_channels(const Tensor& x, int begin, int count);

Tensor reflect_pad(const Tensor& x, int top, int bottom, int left, int right);
Tensor crop(const Tensor& x, int top, int left, int height, int width);

/// [N,C,H,W] -> [N,C]
Tensor global_avg_pool(const Tensor& x);
/// [N,F] x weight [O,F] + bias [O] -> [N,O]
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

/// Bilinear resampling of `image` at (x + sign*u*W, y + sign*v*H) where `flow`
/// holds normalised displacements (u, v) as its two channels. Sample positions
/// are clamped to the image border.
Tensor warp(const Tensor& image, const Tensor& flow, double sign = 1.0);

/// weight*a + (1-weight)*b, weight is [N,1,H,W] broadcast over channels.
Tensor blend(const Tensor& a, const Tensor& b, const Tensor& weight);

}  // namespace vfi
