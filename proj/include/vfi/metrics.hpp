#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "vfi/data.hpp"
#include "vfi/layers.hpp"
#include "vfi/synthesis.hpp"

namespace vfi {

inline constexpr double kPsnrCap = 100.0;

/// 10 log10(1 / MSE) for signals with peak 1; zero error returns the 100 dB cap.
double psnr_from_mse(double mse);
double psnr(const Tensor& a, const Tensor& b);
double psnr(const Frame& a, const Frame& b);

/// One convolution as seen by the complexity model. The layer reads its input
/// at (H / input_divisor, W / input_divisor) and writes at that size / stride.
struct LayerDescriptor {
    std::string module;
    int n_in = 0;
    int n_out = 0;
    int kernel = 3;
    int stride = 1;
    int input_divisor = 1;
    bool bias = true;
};

struct ArchitectureSpec {
    std::string name;
    std::vector<LayerDescriptor> layers;
    int levels = 0;
    bool refine = false;
    bool discriminator = false;
    std::size_t extra_params = 0;  // trainable values outside the convolutions (batch-norm affine, dense head)
};

/// Interpolation network: coarse block at 1/2^J, residual blocks at 1/2^j, optional refinement at full size.
ArchitectureSpec describe_model(const ModelConfig& config);
/// Plain CNN predicting the middle frame directly: 6 -> width, (layers-2) x width -> width, width -> 3.
ArchitectureSpec describe_baseline(int width = 32, int layers = 15);
ArchitectureSpec describe_discriminator(const DiscriminatorSpec& spec);
/// "baseline", "ms" or "ms-refine" with the reference block sizes.
ArchitectureSpec describe_named(const std::string& name);

struct ModuleComplexity {
    std::string module;
    double flops = 0.0;
    std::size_t params = 0;
};

struct ComplexityReport {
    std::string architecture;
    int height = 0;
    int width = 0;
    double total_flops = 0.0;
    std::size_t params = 0;
    std::vector<ModuleComplexity> modules;

    std::string to_json() const;
    /// Method | Parameters | FLOPs table.
    std::string to_table() const;
};

/// Sums H_l W_l n_{l+1} (2 n_l k^2 + 2) over all convolutions (resampling and warping excluded).
ComplexityReport count_flops(const ArchitectureSpec& spec, int height, int width);
std::size_t count_params(const ArchitectureSpec& spec);

}  // namespace vfi
