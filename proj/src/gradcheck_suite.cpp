#include <cmath>
#include <random>

#include "vfi/gradcheck.hpp"
#include "vfi/layers.hpp"
#include "vfi/losses.hpp"
#include "vfi/ops.hpp"
#include "vfi/synthesis.hpp"

namespace vfi {

namespace {

using Rng = std::mt19937_64;

constexpr double kGridMargin = 2e-3;

Tensor uniform(const Shape& shape, double lo, double hi, Rng& rng, bool requires_grad = true)
{
    std::uniform_real_distribution<double> dist(lo, hi);
    std::vector<double> v(shape_numel(shape));
    for (double& x : v) x = dist(rng);
    return Tensor::from(shape, std::move(v), requires_grad);
}

// Values with |x| >= margin so that kinks at zero stay outside the difference stencil.
Tensor away_from_zero(const Shape& shape, double margin, double hi, Rng& rng)
{
    std::uniform_real_distribution<double> mag(margin, hi);
    std::bernoulli_distribution neg(0.5);
    std::vector<double> v(shape_numel(shape));
    for (double& x : v) x = neg(rng) ? -mag(rng) : mag(rng);
    return Tensor::from(shape, std::move(v), true);
}

// Smooth random images: a few low-frequency sinusoids per channel, values in (0,1).
Tensor smooth_image(int n, int c, int h, int w, Rng& rng, bool requires_grad = false)
{
    std::uniform_real_distribution<double> phase(0.0, 6.283185307179586), freq(0.2, 0.6), amp(0.05, 0.15);
    std::vector<double> v(static_cast<std::size_t>(n) * c * h * w);
    for (int p = 0; p < n * c; ++p) {
        const double fx = freq(rng), fy = freq(rng), px = phase(rng), py = phase(rng);
        const double a = amp(rng), b = amp(rng);
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                v[(static_cast<std::size_t>(p) * h + y) * w + x] =
                    0.5 + a * std::sin(fx * x + px) + b * std::cos(fy * y + py);
    }
    return Tensor::from({n, c, h, w}, std::move(v), requires_grad);
}

// Per-pixel normalized flow whose pixel displacement has a fractional part in
// [0.1, 0.9] on both axes, so samples never sit on the pixel grid or the border.
Tensor fractional_flow(int n, int h, int w, Rng& rng, bool requires_grad = true)
{
    std::uniform_real_distribution<double> frac(0.1, 0.9);
    std::uniform_int_distribution<int> whole(-1, 1);
    std::vector<double> v(static_cast<std::size_t>(n) * 2 * h * w);
    for (int b = 0; b < n; ++b)
        for (int ch = 0; ch < 2; ++ch) {
            const double extent = ch == 0 ? w : h;
            for (int i = 0; i < h * w; ++i)
                v[(static_cast<std::size_t>(b) * 2 + ch) * h * w + i] = (whole(rng) + frac(rng)) / extent;
        }
    return Tensor::from({n, 2, h, w}, std::move(v), requires_grad);
}

Tensor features_from_flow(const Tensor& flow, Rng& rng)
{
    const Tensor w_raw = uniform({flow.dim(0), 1, flow.dim(2), flow.dim(3)}, -0.9, 0.9, rng, false);
    const int n = flow.dim(0), hw = flow.dim(2) * flow.dim(3);
    std::vector<double> out(static_cast<std::size_t>(n) * 3 * hw);
    for (int b = 0; b < n; ++b) {
        std::copy_n(flow.values().begin() + static_cast<std::ptrdiff_t>(b) * 2 * hw, 2 * hw,
                    out.begin() + static_cast<std::ptrdiff_t>(b) * 3 * hw);
        std::copy_n(w_raw.values().begin() + static_cast<std::ptrdiff_t>(b) * hw, hw,
                    out.begin() + static_cast<std::ptrdiff_t>(b) * 3 * hw + 2 * hw);
    }
    return Tensor::from({n, 3, flow.dim(2), flow.dim(3)}, std::move(out), true);
}

Tensor shifted(const Tensor& t, double offset, bool requires_grad)
{
    Tensor out = add_scalar(t, offset).detach();
    out.set_requires_grad(requires_grad);
    return out;
}

// Small model whose flow heads produce sizeable displacements. Hidden layers
// use tanh so that finite differences of the whole pyramid do not straddle
// ReLU kinks; the ReLU adjoint itself is checked on its own.
InterpolationModel small_model(std::uint64_t seed, bool refine)
{
    ModelConfig cfg;
    cfg.levels = 2;
    cfg.width = 4;
    cfg.depth = 3;
    cfg.refine = refine;
    cfg.hidden_activation = Activation::tanh;
    InterpolationModel model(cfg);
    model.init(seed);
    Rng rng(seed ^ 0xf10eULL);
    std::normal_distribution<double> heavy(0.0, 0.3);
    for (const auto& p : model.parameters().parameters()) {
        Tensor t = p.tensor;
        for (double& x : t.mutable_values()) x += heavy(rng);
    }
    return model;
}

// Smallest distance of any warp sample coordinate x +- u W, y +- v H to the
// pixel grid. Bilinear sampling has a derivative jump there.
double grid_margin(const Tensor& features)
{
    const int n = features.dim(0), h = features.dim(2), w = features.dim(3);
    double margin = 0.5;
    auto dist = [](double p) { return std::abs(p - std::round(p)); };
    for (int b = 0; b < n; ++b)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                const double u = features.at(b, 0, y, x) * w, v = features.at(b, 1, y, x) * h;
                margin = std::min({margin, dist(x + u), dist(x - u), dist(y + v), dist(y - v)});
            }
    return margin;
}

double grid_margin(const std::vector<Tensor>& level_features)
{
    double margin = 0.5;
    const int levels = static_cast<int>(level_features.size());
    for (int j = 1; j <= levels; ++j) {
        const Tensor& f = level_features[j - 1];
        if (j < levels) margin = std::min(margin, grid_margin(upsample2(level_features[j])));
        margin = std::min(margin, grid_margin(upsample_times(f, j)));
    }
    return margin;
}

struct PyramidInstance {
    InterpolationModel model;
    Tensor first, last;
};

// Redraws model and frames until every warp sample stays `margin` pixels
// away from the grid, so the stencil never crosses a bilinear kink.
PyramidInstance draw_pyramid_instance(std::uint64_t seed, bool refine, Rng& rng, double margin)
{
    for (int attempt = 0;; ++attempt) {
        PyramidInstance inst{small_model(seed + 7919ULL * attempt, refine), smooth_image(1, 3, 8, 8, rng),
                             smooth_image(1, 3, 8, 8, rng)};
        NoGradGuard guard;
        const PyramidOutput p = estimate_pyramid(inst.first, inst.last, inst.model.coarse_block(),
                                                 inst.model.residual_blocks(), {inst.model.config().levels});
        if (grid_margin(p.level_features) >= margin || attempt == 1000) return inst;
    }
}

std::vector<Tensor> parameter_tensors(const ParameterStore& store)
{
    std::vector<Tensor> out;
    for (const auto& p : store.parameters()) out.push_back(p.tensor);
    return out;
}

}  // namespace

GradcheckSuiteResult run_gradcheck_suite(std::uint64_t base_seed, int seeds, double eps, double tolerance,
                                         const std::function<void(const CheckReport&)>& on_report)
{
    GradcheckSuiteResult result;
    auto record = [&](const std::string& name, int s, CheckReport r) {
        r.name = name + " [seed " + std::to_string(base_seed + s) + "]";
        if (on_report) on_report(r);
        result.reports.push_back(std::move(r));
    };

    for (int s = 0; s < seeds; ++s) {
        const std::uint64_t seed = base_seed + static_cast<std::uint64_t>(s);
        Rng rng(seed * 0x9e3779b97f4a7c15ULL + 17);
        auto check = [&](const std::string& name, const TensorFn& fn, const std::vector<Tensor>& inputs) {
            record(name, s, finite_diff_check(fn, inputs, eps, tolerance, seed));
        };

        // Convolution, stride 1 and stride 2.
        check("conv2d stride1",
              [](const std::vector<Tensor>& in) { return conv2d(in[0], in[1], in[2], 1, 1); },
              {uniform({2, 2, 5, 5}, -1, 1, rng), uniform({3, 2, 3, 3}, -1, 1, rng), uniform({3}, -1, 1, rng)});
        check("conv2d stride2",
              [](const std::vector<Tensor>& in) { return conv2d(in[0], in[1], in[2], 2, 1); },
              {uniform({1, 2, 6, 6}, -1, 1, rng), uniform({2, 2, 3, 3}, -1, 1, rng), uniform({2}, -1, 1, rng)});

        for (Activation kind : {Activation::relu, Activation::leaky_relu, Activation::tanh, Activation::sigmoid,
                                Activation::identity}) {
            check(std::string("activation ") + activation_name(kind),
                  [kind](const std::vector<Tensor>& in) { return activation(in[0], kind); },
                  {away_from_zero({2, 3, 4, 4}, 0.01, 2.0, rng)});
        }

        {
            auto stats = std::make_shared<RunningStats>(3);
            check("batch_norm train",
                  [stats](const std::vector<Tensor>& in) {
                      return batch_norm(in[0], in[1], in[2], *stats, BatchNormMode::train);
                  },
                  {uniform({2, 3, 3, 3}, -2, 2, rng), uniform({3}, 0.5, 1.5, rng), uniform({3}, -1, 1, rng)});
            const Tensor mean = uniform({3}, -0.5, 0.5, rng, false);
            const Tensor var = uniform({3}, 0.5, 2.0, rng, false);
            stats->mean.assign(mean.values().begin(), mean.values().end());
            stats->var.assign(var.values().begin(), var.values().end());
            check("batch_norm eval",
                  [stats](const std::vector<Tensor>& in) {
                      return batch_norm(in[0], in[1], in[2], *stats, BatchNormMode::eval);
                  },
                  {uniform({2, 3, 3, 3}, -2, 2, rng), uniform({3}, 0.5, 1.5, rng), uniform({3}, -1, 1, rng)});
        }

        check("resize up2", [](const std::vector<Tensor>& in) { return upsample2(in[0]); },
              {uniform({1, 2, 3, 5}, -1, 1, rng)});
        check("resize down2", [](const std::vector<Tensor>& in) { return downsample2(in[0]); },
              {uniform({1, 2, 4, 6}, -1, 1, rng)});

        for (double sign : {1.0, -1.0}) {
            check(sign > 0 ? "warp +flow" : "warp -flow",
                  [sign](const std::vector<Tensor>& in) { return warp(in[0], in[1], sign); },
                  {uniform({2, 2, 6, 7}, 0, 1, rng), fractional_flow(2, 6, 7, rng)});
        }
        check("blend", [](const std::vector<Tensor>& in) { return blend(in[0], in[1], in[2]); },
              {uniform({1, 3, 4, 4}, 0, 1, rng), uniform({1, 3, 4, 4}, 0, 1, rng), uniform({1, 1, 4, 4}, 0, 1, rng)});
        {
            const Tensor flow = fractional_flow(1, 6, 6, rng, false);
            check("synthesize",
                  [](const std::vector<Tensor>& in) { return synthesize(in[0], in[1], in[2]); },
                  {uniform({1, 3, 6, 6}, 0, 1, rng), uniform({1, 3, 6, 6}, 0, 1, rng), features_from_flow(flow, rng)});
        }

        check("concat/slice",
              [](const std::vector<Tensor>& in) {
                  return slice_channels(concat_channels({in[0], in[1]}), 1, 3);
              },
              {uniform({2, 2, 3, 3}, -1, 1, rng), uniform({2, 3, 3, 3}, -1, 1, rng)});
        check("reflect_pad/crop",
              [](const std::vector<Tensor>& in) { return crop(reflect_pad(in[0], 1, 2, 2, 1), 1, 0, 4, 6); },
              {uniform({1, 2, 4, 4}, -1, 1, rng)});
        check("global_avg_pool/linear",
              [](const std::vector<Tensor>& in) { return linear(global_avg_pool(in[0]), in[1], in[2]); },
              {uniform({2, 4, 3, 3}, -1, 1, rng), uniform({2, 4}, -1, 1, rng), uniform({2}, -1, 1, rng)});
        check("mul/add/sub/scale",
              [](const std::vector<Tensor>& in) {
                  return add_scalar(scale(sub(mul(in[0], in[1]), add(in[0], in[1])), 0.7), 0.3);
              },
              {uniform({2, 5}, -1, 1, rng), uniform({2, 5}, -1, 1, rng)});
        check("mean_abs_error",
              [](const std::vector<Tensor>& in) { return mean_abs_error(in[0], in[1]); },
              {away_from_zero({2, 3, 3}, 0.01, 1.0, rng), uniform({2, 3, 3}, -0.001, 0.001, rng)});
        check("mean_squared_error",
              [](const std::vector<Tensor>& in) { return mean_squared_error(in[0], in[1]); },
              {uniform({2, 3, 3}, -1, 1, rng), uniform({2, 3, 3}, -1, 1, rng)});
        check("sum/mean",
              [](const std::vector<Tensor>& in) { return add(sum(in[0]), scale(mean(in[0]), 3.0)); },
              {uniform({3, 4}, -1, 1, rng)});

        // Pyramid: gradients w.r.t. every block parameter and both input frames.
        {
            PyramidInstance inst = draw_pyramid_instance(seed, false, rng, kGridMargin);
            InterpolationModel& model = inst.model;
            const Tensor &a = inst.first, &b = inst.last;
            record("pyramid parameters", s, finite_diff_check_in_place(
                                                [&] {
                                                    const PyramidOutput p = estimate_pyramid(
                                                        a, b, model.coarse_block(), model.residual_blocks(), {2});
                                                    return concat_channels({p.final_features, upsample_times(p.level_features[1], 2)});
                                                },
                                                parameter_tensors(model.parameters()), eps, tolerance, seed));
            check("pyramid inputs",
                  [&](const std::vector<Tensor>& in) {
                      return estimate_pyramid(in[0], in[1], model.coarse_block(), model.residual_blocks(), {2})
                          .final_features;
                  },
                  {shifted(a, 0.0, true), shifted(b, 0.0, true)});
        }

        // Losses.
        {
            LossConfig plain;
            plain.vgg_weight = 0.0;
            check("tau",
                  [plain](const std::vector<Tensor>& in) { return tau(in[0], in[1], plain); },
                  {away_from_zero({1, 3, 4, 4}, 0.01, 0.5, rng), uniform({1, 3, 4, 4}, -0.001, 0.001, rng)});

            LossConfig perceptual;
            perceptual.vgg_weight = 0.5;
            perceptual.extractor = std::make_shared<FeatureExtractor>(seed, Activation::tanh);
            check("tau perceptual",
                  [perceptual](const std::vector<Tensor>& in) { return tau(in[0], in[1], perceptual); },
                  {smooth_image(1, 3, 16, 16, rng, true), shifted(smooth_image(1, 3, 16, 16, rng), 1.0, true)});

            PyramidInstance inst = draw_pyramid_instance(seed + 1000, true, rng, kGridMargin);
            InterpolationModel& model = inst.model;
            const Tensor &a = inst.first, &b = inst.last;
            // Targets sit above every prediction so the l1 terms stay differentiable.
            const Tensor target = shifted(smooth_image(1, 3, 8, 8, rng), 1.5, false);
            record("multi_scale_loss", s, finite_diff_check_in_place(
                                              [&] { return multi_scale_loss(model.forward(a, b), target, plain); },
                                              parameter_tensors(model.parameters()), eps, tolerance, seed));
            record("total_loss", s, finite_diff_check_in_place(
                                        [&] { return total_loss(model.forward(a, b), target, plain).total; },
                                        parameter_tensors(model.parameters()), eps, tolerance, seed));

            for (GanMode mode : {GanMode::minimax, GanMode::non_saturating}) {
                check(std::string("gan_losses ") + gan_mode_name(mode),
                      [mode](const std::vector<Tensor>& in) {
                          const GanLosses g = gan_losses(in[0], in[1], mode);
                          return add(g.discriminator, scale(g.generator, 0.5));
                      },
                      {uniform({4, 1}, 0.05, 0.95, rng), uniform({4, 1}, 0.05, 0.95, rng)});
            }
        }

        // A reduced discriminator: all of its stages in train-mode batch norm.
        {
            DiscriminatorSpec spec;
            spec.initial_filters = 3;
            spec.block_count = 2;
            ParameterStore store;
            Discriminator disc(spec, store);
            Tensor images;
            // Redraw until no leaky ReLU input lies within the stencil's reach of its kink.
            for (int attempt = 0; attempt <= 1000; ++attempt) {
                disc.init(seed + 7919ULL * attempt);
                images = uniform({3, 3, 4, 4}, 0, 1, rng, false);
                NoGradGuard guard;
                std::vector<Tensor> pre;
                disc.logits(images, BatchNormMode::train, &pre);
                double margin = 1.0;
                for (const Tensor& t : pre)
                    for (double v : t.values()) margin = std::min(margin, std::abs(v));
                if (margin >= kGridMargin) break;
            }
            record("discriminator", s, finite_diff_check_in_place(
                                           [&] { return disc.logits(images, BatchNormMode::train); },
                                           parameter_tensors(store), eps, tolerance, seed));
        }
    }
    return result;
}

}  // namespace vfi
