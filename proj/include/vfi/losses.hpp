#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "vfi/layers.hpp"
#include "vfi/synthesis.hpp"

namespace vfi {

enum class GanMode { off, minimax, non_saturating };

const char* gan_mode_name(GanMode mode);
GanMode parse_gan_mode(const std::string& name);

/// Fixed random-feature perceptual map: four stride-2 conv + ReLU stages
/// (3 -> 16 -> 32 -> 64 -> 64), orthogonally initialised from a seed and never trained.
class FeatureExtractor {
public:
    explicit FeatureExtractor(std::uint64_t seed = 0x5eed, Activation activation = Activation::relu);

    Tensor operator()(const Tensor& images) const;
    /// Input height and width must be multiples of this.
    int reduction() const { return 16; }
    const ParameterStore& parameters() const { return store_; }
    /// Replace the random weights, e.g. with pretrained ones stored in a checkpoint archive.
    void load(const Archive& archive, const std::string& prefix = "");

private:
    ParameterStore store_;
    std::vector<Conv2d> convs_;
    Activation activation_;
};

struct LossConfig {
    double vgg_weight = 0.001;
    std::vector<double> scale_weights;  // empty: 1 for the finest scale, 0.5 for the others
    double gan_weight = 0.0001;
    GanMode gan_mode = GanMode::off;
    std::shared_ptr<const FeatureExtractor> extractor;

    double scale_weight(int level) const;  // level is 1-based
};

/// l1 distance (per-element mean) plus vgg_weight times the mean squared
/// feature distance; the second term is skipped without an extractor or weight.
Tensor tau(const Tensor& a, const Tensor& b, const LossConfig& config);

struct LossBreakdown {
    std::vector<double> scale_tau;     // tau per scale, finest first
    std::vector<double> scale_weight;  // weights used
    std::optional<double> refine_tau;
    double perceptual = 0.0;  // weighted perceptual share already contained in the taus
    double gan_generator = 0.0;
    double gan_weight = 0.0;
    double gan_discriminator = 0.0;  // filled in by the trainer, not part of total
    double total = 0.0;

    double sum_of_parts() const;
};

struct LossResult {
    Tensor total;
    LossBreakdown breakdown;
};

Tensor multi_scale_loss(const InterpolationOutput& outputs, const Tensor& target, const LossConfig& config);

/// Multi-scale loss, plus tau on the refined frame when present, plus the
/// weighted generator adversarial term when gan_mode is not off (requires `disc`).
LossResult total_loss(const InterpolationOutput& outputs, const Tensor& target, const LossConfig& config,
                      const Discriminator* disc = nullptr);

inline constexpr double kProbabilityClamp = 1e-7;

struct GanLosses {
    Tensor discriminator;
    Tensor generator;
};

/// Discriminator: -mean log d_real - mean log(1 - d_fake). Generator:
/// mean log(1 - d_fake) (minimax) or -mean log d_fake (non-saturating).
GanLosses gan_losses(const Tensor& d_real, const Tensor& d_fake, GanMode mode);

}  // namespace vfi
