#include "vfi/losses.hpp"

#include <cmath>

namespace vfi {

const char* gan_mode_name(GanMode mode)
{
    switch (mode) {
    case GanMode::off: return "off";
    case GanMode::minimax: return "minimax";
    case GanMode::non_saturating: return "non_saturating";
    }
    return "?";
}

GanMode parse_gan_mode(const std::string& name)
{
    for (GanMode m : {GanMode::off, GanMode::minimax, GanMode::non_saturating})
        if (name == gan_mode_name(m)) return m;
    throw std::invalid_argument("unknown gan mode '" + name + "'");
}

FeatureExtractor::FeatureExtractor(std::uint64_t seed, Activation activation) : activation_(activation)
{
    const int widths[] = {3, 16, 32, 64, 64};
    std::mt19937_64 rng(seed);
    for (int i = 0; i < 4; ++i) {
        Conv2d c = make_conv(store_, "perceptual.conv" + std::to_string(i + 1), widths[i], widths[i + 1], 3, 2);
        orthogonal_fill(c.weight.mutable_values(), widths[i + 1], widths[i] * 9, kOrthogonalGain, rng);
        c.weight.set_requires_grad(false);
        c.bias.set_requires_grad(false);
        convs_.push_back(c);
    }
}

Tensor FeatureExtractor::operator()(const Tensor& images) const
{
    if (images.rank() != 4 || images.dim(1) != 3 || images.dim(2) % reduction() != 0 ||
        images.dim(3) % reduction() != 0)
        throw ShapeError("perceptual extractor needs [N,3,H,W] with H,W multiples of 16, got " +
                         shape_str(images.shape()));
    Tensor h = images;
    for (const Conv2d& c : convs_) h = activation(c(h), activation_);
    return h;
}

void FeatureExtractor::load(const Archive& archive, const std::string& prefix)
{
    load_store(archive, store_, prefix);
}

double LossConfig::scale_weight(int level) const
{
    if (!scale_weights.empty()) {
        if (level < 1 || level > static_cast<int>(scale_weights.size()))
            throw std::out_of_range("no scale weight for level " + std::to_string(level));
        return scale_weights[level - 1];
    }
    return level == 1 ? 1.0 : 0.5;
}

namespace {

struct TauParts {
    Tensor value;
    double perceptual = 0.0;  // vgg_weight * feature mse
};

TauParts tau_parts(const Tensor& a, const Tensor& b, const LossConfig& config)
{
    TauParts parts;
    parts.value = mean_abs_error(a, b);
    if (config.vgg_weight > 0.0 && config.extractor) {
        const FeatureExtractor& gamma = *config.extractor;
        const Tensor term = scale(mean_squared_error(gamma(a), gamma(b)), config.vgg_weight);
        parts.perceptual = term.item();
        parts.value = add(parts.value, term);
    }
    return parts;
}

}  // namespace

Tensor tau(const Tensor& a, const Tensor& b, const LossConfig& config) { return tau_parts(a, b, config).value; }

double LossBreakdown::sum_of_parts() const
{
    double s = 0.0;
    for (std::size_t j = 0; j < scale_tau.size(); ++j) s += scale_weight[j] * scale_tau[j];
    if (refine_tau) s += *refine_tau;
    return s + gan_weight * gan_generator;
}

namespace {

Tensor multi_scale_impl(const InterpolationOutput& outputs, const Tensor& target, const LossConfig& config,
                        LossBreakdown& breakdown)
{
    if (outputs.scale_frames.empty()) throw ContractError("multi-scale loss needs at least one scale output");
    Tensor total;
    for (std::size_t j = 0; j < outputs.scale_frames.size(); ++j) {
        const double w = config.scale_weight(static_cast<int>(j) + 1);
        if (w < 0.0) throw std::invalid_argument("negative scale weight");
        const TauParts parts = tau_parts(outputs.scale_frames[j], target, config);
        breakdown.scale_tau.push_back(parts.value.item());
        breakdown.scale_weight.push_back(w);
        breakdown.perceptual += w * parts.perceptual;
        const Tensor term = scale(parts.value, w);
        total = total.defined() ? add(total, term) : term;
    }
    return total;
}

}  // namespace

Tensor multi_scale_loss(const InterpolationOutput& outputs, const Tensor& target, const LossConfig& config)
{
    LossBreakdown unused;
    return multi_scale_impl(outputs, target, config, unused);
}

LossResult total_loss(const InterpolationOutput& outputs, const Tensor& target, const LossConfig& config,
                      const Discriminator* disc)
{
    LossResult result;
    LossBreakdown& bd = result.breakdown;
    Tensor total = multi_scale_impl(outputs, target, config, bd);
    if (outputs.refined.defined()) {
        const TauParts parts = tau_parts(outputs.refined, target, config);
        bd.refine_tau = parts.value.item();
        bd.perceptual += parts.perceptual;
        total = add(total, parts.value);
    }
    if (config.gan_mode != GanMode::off) {
        if (!disc) throw ContractError("adversarial loss requested without a discriminator");
        const Tensor d_fake = disc->forward(outputs.frame, BatchNormMode::train);
        Tensor g = config.gan_mode == GanMode::minimax
                       ? mean(log_clamped(sub(Tensor::full(d_fake.shape(), 1.0), d_fake), kProbabilityClamp))
                       : scale(mean(log_clamped(d_fake, kProbabilityClamp)), -1.0);
        bd.gan_generator = g.item();
        bd.gan_weight = config.gan_weight;
        total = add(total, scale(g, config.gan_weight));
    }
    bd.total = total.item();
    result.total = total;
    return result;
}

GanLosses gan_losses(const Tensor& d_real, const Tensor& d_fake, GanMode mode)
{
    for (const Tensor* t : {&d_real, &d_fake})
        for (double p : t->values())
            if (!(p > 0.0 && p < 1.0))
                throw ContractError("discriminator output " + std::to_string(p) + " is not a probability");
    const Tensor one_minus_fake = sub(Tensor::full(d_fake.shape(), 1.0), d_fake);
    GanLosses out;
    out.discriminator = sub(scale(mean(log_clamped(d_real, kProbabilityClamp)), -1.0),
                            mean(log_clamped(one_minus_fake, kProbabilityClamp)));
    out.generator = mode == GanMode::minimax ? mean(log_clamped(one_minus_fake, kProbabilityClamp))
                                             : scale(mean(log_clamped(d_fake, kProbabilityClamp)), -1.0);
    return out;
}

}  // namespace vfi
