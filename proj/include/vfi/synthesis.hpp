#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "vfi/layers.hpp"

namespace vfi {

// Synthesis features are [N,3,H,W] tensors: channel 0 is the horizontal flow u,
// channel 1 the vertical flow v (both in image-extent units, 1.0 == the full
// width/height) and channel 2 the raw occlusion weight w_raw. All three are
// tanh outputs in [-1,1]; the blending weight is W = (w_raw + 1) / 2.

Tensor flow_channels(const Tensor& features);
Tensor blend_weight(const Tensor& features);

/// W * warp(I0, -flow) + (1 - W) * warp(I1, +flow).
Tensor synthesize(const Tensor& first, const Tensor& last, const Tensor& features);

struct PyramidConfig {
    int levels = 3;  // J; level J is the coarsest, at 1/2^J resolution
};

struct PyramidOutput {
    std::vector<Tensor> level_features;  // [0] is level 1 (finest), back() is level J
    Tensor final_features;               // upsampled level-1 features at input resolution
};

/// Coarse-to-fine estimation. `residual[j-1]` refines level j (j = 1..J-1) from the
/// warped frames at that level and the upsampled features of level j+1:
/// features_j = tanh(U features_{j+1} + residual_j(...)).
PyramidOutput estimate_pyramid(const Tensor& first, const Tensor& last, const ConvBlock& coarse,
                               const std::vector<ConvBlock>& residual, const PyramidConfig& config);

/// Direct prediction of the refined frame from (synthesised, I0, I1).
Tensor refine_synthesis(const Tensor& synthesized, const Tensor& first, const Tensor& last, const ConvBlock& block);

/// Architecture of the interpolation network.
struct ModelConfig {
    int levels = 3;
    int width = 32;
    int depth = 6;
    int kernel = 3;
    bool refine = false;
    Activation hidden_activation = Activation::relu;

    ConvBlockSpec coarse_spec() const;
    ConvBlockSpec residual_spec() const;
    ConvBlockSpec refine_spec() const;
    int size_multiple() const { return 1 << levels; }

    std::string to_text() const;
    static ModelConfig from_text(const std::string& text);
    bool operator==(const ModelConfig&) const = default;
};

/// Human readable list of differing fields, empty when equal.
std::string config_diff(const ModelConfig& expected, const ModelConfig& actual);

struct InterpolationOutput {
    Tensor frame;                      // refined frame if enabled, else the finest synthesis; unclamped
    std::vector<Tensor> scale_frames;  // [j-1] = synthesis from level-j features, all at input resolution
    std::vector<Tensor> level_features;
    Tensor final_features;
    Tensor refined;  // undefined unless refinement is enabled
};

class InterpolationModel {
public:
    explicit InterpolationModel(const ModelConfig& config);
    InterpolationModel(InterpolationModel&&) = default;

    const ModelConfig& config() const { return config_; }
    ParameterStore& parameters() { return store_; }
    const ParameterStore& parameters() const { return store_; }

    const ConvBlock& coarse_block() const { return coarse_; }
    std::vector<ConvBlock>& residual_blocks() { return residual_; }
    const std::vector<ConvBlock>& residual_blocks() const { return residual_; }
    const ConvBlock* refine_block() const { return refine_ ? &*refine_ : nullptr; }

    void init(std::uint64_t seed);

    /// Full forward pass with all intermediates. Inputs whose size is not a
    /// multiple of 2^J are reflection-padded and every full-resolution output
    /// is cropped back; level features stay at the padded resolution.
    InterpolationOutput forward(const Tensor& first, const Tensor& last) const;

    /// Inference: forward without graph recording, output clamped to [0,1].
    Tensor predict(const Tensor& first, const Tensor& last) const;

    void save(const std::string& path) const;
    /// Throws CheckpointError (with a field diff) if the archive's architecture differs.
    static InterpolationModel load(const std::string& path);
    void load_weights(const Archive& archive);

private:
    ModelConfig config_;
    ParameterStore store_;
    ConvBlock coarse_;
    std::vector<ConvBlock> residual_;
    std::optional<ConvBlock> refine_;
};

/// Reads the model section of an architecture text block.
ModelConfig model_config_from_archive(const Archive& archive);

}  // namespace vfi
