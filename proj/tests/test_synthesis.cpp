#include "helpers.hpp"

#include <algorithm>
#include <cmath>

#include "vfi/data.hpp"
#include "vfi/metrics.hpp"
#include "vfi/synthesis.hpp"
#include "vfi/training.hpp"

using namespace vfi;
using vfi::test::max_abs_diff;
using vfi::test::random_tensor;

namespace {

// Features [N,3,H,W] with constant (u, v, w_raw).
Tensor constant_features(int n, int h, int w, double u, double v, double w_raw)
{
    std::vector<double> values(static_cast<std::size_t>(n) * 3 * h * w);
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    for (int i = 0; i < n; ++i)
        for (int c = 0; c < 3; ++c)
            std::fill_n(values.begin() + (static_cast<std::size_t>(i) * 3 + c) * plane, plane,
                        c == 0 ? u : c == 1 ? v : w_raw);
    return Tensor::from({n, 3, h, w}, std::move(values));
}

// Image [1,C,H,W] whose pixel (x, y) is f(c, x, y).
template <class F>
Tensor image(int c, int h, int w, F f)
{
    std::vector<double> values;
    values.reserve(static_cast<std::size_t>(c) * h * w);
    for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) values.push_back(f(ch, x, y));
    return Tensor::from({1, c, h, w}, std::move(values));
}

ModelConfig small_config(int levels = 3, bool refine = false)
{
    ModelConfig c;
    c.levels = levels;
    c.width = 8;
    c.depth = 3;
    c.refine = refine;
    return c;
}

void perturb(ParameterStore& store, double stddev, std::uint64_t seed)
{
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n(0.0, stddev);
    for (const auto& p : store.parameters())
        for (double& v : Tensor(p.tensor).mutable_values()) v += n(rng);
}

double texture(int c, int x, int y)
{
    return 0.5 + 0.2 * std::sin(0.7 * x + 0.3 * c) * std::cos(0.45 * y - 0.2 * c) + 0.1 * std::sin(0.13 * x * y);
}

}  // namespace

TEST_SUITE("warp") {
    TEST_CASE("zero flow is the identity") {
        const Tensor img = random_tensor({2, 3, 7, 9}, 1);
        const Tensor out = warp(img, Tensor::zeros({2, 2, 7, 9}));
        CHECK(max_abs_diff(out, img) == 0.0);
    }

    TEST_CASE("one pixel flow in x shifts by an integer") {
        const int h = 6, w = 10;
        const Tensor img = random_tensor({1, 3, h, w}, 2);
        const Tensor flow = slice_channels(constant_features(1, h, w, 1.0 / w, 0.0, 0.0), 0, 2);
        const Tensor out = warp(img, flow);
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < h; ++y)
                for (int x = 0; x + 1 < w; ++x) CHECK(out.at(0, c, y, x) == doctest::Approx(img.at(0, c, y, x + 1)));
    }

    TEST_CASE("one pixel flow in y shifts by an integer") {
        const int h = 8, w = 5;
        const Tensor img = random_tensor({1, 2, h, w}, 3);
        const Tensor flow = slice_channels(constant_features(1, h, w, 0.0, -1.0 / h, 0.0), 0, 2);
        const Tensor out = warp(img, flow);
        for (int c = 0; c < 2; ++c)
            for (int y = 1; y < h; ++y)
                for (int x = 0; x < w; ++x) CHECK(out.at(0, c, y, x) == doctest::Approx(img.at(0, c, y - 1, x)));
    }

    TEST_CASE("half pixel flow on a ramp adds one half") {
        const int h = 4, w = 12;
        const Tensor ramp = image(1, h, w, [](int, int x, int) { return static_cast<double>(x); });
        const Tensor flow = slice_channels(constant_features(1, h, w, 0.5 / w, 0.0, 0.0), 0, 2);
        const Tensor out = warp(ramp, flow);
        for (int y = 0; y < h; ++y)
            for (int x = 0; x + 1 < w; ++x) CHECK(out.at(0, 0, y, x) == doctest::Approx(x + 0.5).epsilon(1e-12));
    }

    TEST_CASE("samples beyond the border clamp to the edge") {
        const int h = 3, w = 4;
        const Tensor img = random_tensor({1, 1, h, w}, 4);
        const Tensor flow = slice_channels(constant_features(1, h, w, 1.0, 0.0, 0.0), 0, 2);
        const Tensor out = warp(img, flow);
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) CHECK(out.at(0, 0, y, x) == doctest::Approx(img.at(0, 0, y, w - 1)));
    }

    TEST_CASE("sign argument negates the flow") {
        const Tensor img = random_tensor({1, 3, 6, 6}, 5);
        const Tensor flow = random_tensor({1, 2, 6, 6}, 6, -0.2, 0.2);
        CHECK(max_abs_diff(warp(img, flow, -1.0), warp(img, scale(flow, -1.0))) < 1e-15);
    }
}

TEST_SUITE("synthesize") {
    TEST_CASE("zero features average the frames") {
        const Tensor a = random_tensor({1, 3, 8, 8}, 11), b = random_tensor({1, 3, 8, 8}, 12);
        const Tensor out = synthesize(a, b, Tensor::zeros({1, 3, 8, 8}));
        CHECK(max_abs_diff(out, scale(add(a, b), 0.5)) < 1e-15);
    }

    TEST_CASE("w_raw = +1 selects the backward-warped first frame") {
        const Tensor a = random_tensor({1, 3, 8, 8}, 13), b = random_tensor({1, 3, 8, 8}, 14);
        const Tensor features = constant_features(1, 8, 8, 0.07, -0.03, 1.0);
        const Tensor out = synthesize(a, b, features);
        CHECK(max_abs_diff(out, warp(a, flow_channels(features), -1.0)) == 0.0);
    }

    TEST_CASE("two pixel motion with one pixel flow recovers the midpoint") {
        const int h = 8, w = 16;
        const Tensor i0 = image(3, h, w, [](int c, int x, int y) { return texture(c, x, y); });
        const Tensor i1 = image(3, h, w, [](int c, int x, int y) { return texture(c, x - 2, y); });
        const Tensor mid = image(3, h, w, [](int c, int x, int y) { return texture(c, x - 1, y); });
        const Tensor out = synthesize(i0, i1, constant_features(1, h, w, 1.0 / w, 0.0, 0.0));
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < h; ++y)
                for (int x = 1; x + 1 < w; ++x) CHECK(out.at(0, c, y, x) == doctest::Approx(mid.at(0, c, y, x)));
    }

    TEST_CASE("blend weight maps [-1,1] to [0,1]") {
        const Tensor low = blend_weight(constant_features(1, 2, 2, 0.0, 0.0, -1.0));
        for (double v : low.values()) CHECK(v == 0.0);
        const Tensor mid = blend_weight(constant_features(1, 2, 2, 0.0, 0.0, 0.5));
        for (double v : mid.values()) CHECK(v == 0.75);
    }

    TEST_CASE("output lies between the two warped sources") {
        for (std::uint64_t seed = 0; seed < 10; ++seed) {
            const Tensor a = random_tensor({2, 3, 12, 12}, 20 + seed, 0.0, 1.0);
            const Tensor b = random_tensor({2, 3, 12, 12}, 40 + seed, 0.0, 1.0);
            const Tensor f = random_tensor({2, 3, 12, 12}, 60 + seed, -1.0, 1.0);
            const Tensor out = synthesize(a, b, f);
            const Tensor wa = warp(a, flow_channels(f), -1.0), wb = warp(b, flow_channels(f), 1.0);
            for (std::size_t i = 0; i < out.numel(); ++i) {
                CHECK(out.at(i) >= std::min(wa.at(i), wb.at(i)) - 1e-12);
                CHECK(out.at(i) <= std::max(wa.at(i), wb.at(i)) + 1e-12);
            }
        }
    }

    TEST_CASE("size mismatch is a shape error") {
        CHECK_THROWS_AS(synthesize(Tensor::zeros({1, 3, 4, 4}), Tensor::zeros({1, 3, 4, 6}), Tensor::zeros({1, 3, 4, 4})),
                        ShapeError);
        CHECK_THROWS_AS(synthesize(Tensor::zeros({1, 3, 4, 4}), Tensor::zeros({1, 3, 4, 4}), Tensor::zeros({1, 3, 2, 2})),
                        ShapeError);
    }
}

TEST_SUITE("estimate_pyramid") {
    TEST_CASE("level shapes at 360x640") {
        InterpolationModel model(ModelConfig{});
        model.init(1);
        NoGradGuard guard;
        const auto out = model.forward(Tensor::full({1, 3, 360, 640}, 0.5), Tensor::full({1, 3, 360, 640}, 0.5));
        REQUIRE(out.level_features.size() == 3);
        CHECK(out.level_features[2].shape() == Shape{1, 3, 45, 80});
        CHECK(out.level_features[1].shape() == Shape{1, 3, 90, 160});
        CHECK(out.level_features[0].shape() == Shape{1, 3, 180, 320});
        CHECK(out.final_features.shape() == Shape{1, 3, 360, 640});
        REQUIRE(out.scale_frames.size() == 3);
        for (const Tensor& f : out.scale_frames) CHECK(f.shape() == Shape{1, 3, 360, 640});
    }

    TEST_CASE("zero residual blocks give tanh of the upsampled coarse features") {
        InterpolationModel model(small_config());
        model.init(2);
        perturb(model.parameters(), 0.3, 3);
        for (ConvBlock& block : model.residual_blocks()) {
            Conv2d& last = block.layers().back();
            for (double& v : last.weight.mutable_values()) v = 0.0;
            for (double& v : last.bias.mutable_values()) v = 0.0;
        }
        const Tensor a = random_tensor({1, 3, 32, 32}, 4, 0.0, 1.0), b = random_tensor({1, 3, 32, 32}, 5, 0.0, 1.0);
        const auto out =
            estimate_pyramid(a, b, model.coarse_block(), model.residual_blocks(), PyramidConfig{model.config().levels});
        for (int j = 0; j + 1 < 3; ++j)
            CHECK(max_abs_diff(out.level_features[j], tanh(upsample2(out.level_features[j + 1]))) < 1e-15);
    }

    TEST_CASE("features stay inside [-1,1] at every level") {
        InterpolationModel model(small_config());
        model.init(6);
        perturb(model.parameters(), 1.0, 7);
        const auto out = model.forward(random_tensor({2, 3, 32, 32}, 8, 0.0, 1.0), random_tensor({2, 3, 32, 32}, 9, 0.0, 1.0));
        for (const Tensor& f : out.level_features)
            for (double v : f.values()) CHECK(std::abs(v) <= 1.0);
    }

    TEST_CASE("non-divisible input without padding is a shape error") {
        InterpolationModel model(small_config());
        const Tensor a = Tensor::zeros({1, 3, 30, 32});
        CHECK_THROWS_AS(estimate_pyramid(a, a, model.coarse_block(), model.residual_blocks(), PyramidConfig{3}),
                        ShapeError);
    }

    TEST_CASE("gradients reach the coarsest block") {
        InterpolationModel model(small_config());
        model.init(10);
        const Tensor a = random_tensor({1, 3, 16, 16}, 11, 0.0, 1.0), b = random_tensor({1, 3, 16, 16}, 12, 0.0, 1.0);
        const auto out = model.forward(a, b);
        mean_abs_error(out.frame, random_tensor({1, 3, 16, 16}, 13, 0.0, 1.0)).backward();
        double norm = 0.0;
        for (const Conv2d& c : model.coarse_block().layers())
            for (double g : c.weight.grad()) norm += g * g;
        CHECK(norm > 0.0);
    }

    TEST_CASE("static scene after brief training reproduces the frame above 40 dB") {
        SyntheticSpec spec;
        spec.width = 32;
        spec.height = 32;
        spec.max_motion = 0.0;
        spec.count = 16;
        spec.seed = 21;
        const Dataset data = generate_synthetic(spec).triplets;
        TrainConfig config;
        config.model = small_config();
        config.perceptual = false;
        config.crop = 32;
        config.batch_size = 4;
        config.max_steps = 100;
        config.adam.learning_rate = 1e-3;
        Trainer trainer(config, data, data);
        trainer.run();
        double worst = kPsnrCap;
        for (const FrameTriplet& t : data) {
            const Tensor out = trainer.model().predict(t.first.to_tensor(), t.last.to_tensor());
            worst = std::min(worst, psnr(out, t.first.to_tensor()));
        }
        CHECK(worst > 40.0);
    }
}

TEST_SUITE("refine_synthesis") {
    TEST_CASE("shape and parameter count") {
        ModelConfig config;
        config.refine = true;
        InterpolationModel model(config);
        model.init(1);
        REQUIRE(model.refine_block());
        CHECK(model.refine_block()->parameter_count() == 40483);
        const Tensor a = random_tensor({1, 3, 16, 24}, 2, 0.0, 1.0);
        CHECK(refine_synthesis(a, a, a, *model.refine_block()).shape() == a.shape());
        CHECK_THROWS_AS(refine_synthesis(a, a, Tensor::zeros({1, 3, 16, 16}), *model.refine_block()), ShapeError);
    }
}

TEST_SUITE("interpolate") {
    TEST_CASE("one synthesized frame per level, all at input resolution") {
        for (int levels : {1, 2, 3}) {
            InterpolationModel model(small_config(levels));
            model.init(3);
            NoGradGuard guard;
            const auto out = model.forward(random_tensor({1, 3, 16, 24}, 4, 0.0, 1.0), random_tensor({1, 3, 16, 24}, 5, 0.0, 1.0));
            REQUIRE(out.scale_frames.size() == static_cast<std::size_t>(levels));
            for (const Tensor& f : out.scale_frames) CHECK(f.shape() == Shape{1, 3, 16, 24});
            CHECK(max_abs_diff(out.frame, out.scale_frames[0]) == 0.0);
        }
    }

    TEST_CASE("constant frames give the constant at every scale") {
        for (bool refine : {false, true}) {
            InterpolationModel model(small_config(3, refine));
            model.init(7);
            perturb(model.parameters(), 0.5, 8);
            NoGradGuard guard;
            const Tensor c = Tensor::full({1, 3, 24, 32}, 0.37);
            const auto out = model.forward(c, c);
            for (const Tensor& f : out.scale_frames)
                for (double v : f.values()) CHECK(v == doctest::Approx(0.37).epsilon(1e-12));
        }
    }

    TEST_CASE("final output is clamped to [0,1], training output is not") {
        InterpolationModel model(small_config(2, true));
        model.init(9);
        perturb(model.parameters(), 1.0, 10);
        const Tensor a = random_tensor({1, 3, 16, 16}, 11, 0.0, 1.0), b = random_tensor({1, 3, 16, 16}, 12, 0.0, 1.0);
        Tensor raw;
        {
            NoGradGuard guard;
            raw = model.forward(a, b).frame;
        }
        const auto [lo, hi] = std::minmax_element(raw.values().begin(), raw.values().end());
        REQUIRE((*lo < 0.0 || *hi > 1.0));
        const Tensor shown = model.predict(a, b);
        for (std::size_t i = 0; i < shown.numel(); ++i) CHECK(shown.at(i) == std::clamp(raw.at(i), 0.0, 1.0));
    }

    TEST_CASE("non-divisible sizes are padded and cropped back") {
        InterpolationModel model(small_config(3, true));
        model.init(13);
        NoGradGuard guard;
        const Tensor a = random_tensor({1, 3, 45, 30}, 14, 0.0, 1.0), b = random_tensor({1, 3, 45, 30}, 15, 0.0, 1.0);
        const auto out = model.forward(a, b);
        CHECK(out.frame.shape() == a.shape());
        for (const Tensor& f : out.scale_frames) CHECK(f.shape() == a.shape());
        CHECK(out.refined.shape() == a.shape());
        CHECK(model.predict(a, b).shape() == a.shape());
    }

    TEST_CASE("config text round-trips and diffs name fields") {
        ModelConfig c = small_config(2, true);
        c.hidden_activation = Activation::tanh;
        CHECK(ModelConfig::from_text(c.to_text()) == c);
        ModelConfig d = c;
        d.depth = 5;
        CHECK(config_diff(c, c).empty());
        CHECK(config_diff(c, d).find("depth") != std::string::npos);
    }
}
