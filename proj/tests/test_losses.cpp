#include "helpers.hpp"

#include <cmath>

#include "vfi/losses.hpp"

using namespace vfi;
using vfi::test::bitwise_equal;
using vfi::test::random_tensor;

namespace {

LossConfig plain_config()
{
    LossConfig c;
    c.vgg_weight = 0.0;
    return c;
}

LossConfig perceptual_config()
{
    LossConfig c;
    c.vgg_weight = 0.001;
    c.extractor = std::make_shared<FeatureExtractor>();
    return c;
}

// Outputs whose scale frames are constant images with the given values.
InterpolationOutput constant_scales(const std::vector<double>& values, const Shape& shape)
{
    InterpolationOutput out;
    for (double v : values) out.scale_frames.push_back(Tensor::full(shape, v));
    out.frame = out.scale_frames.front();
    return out;
}

}  // namespace

TEST_SUITE("tau") {
    TEST_CASE("tau(x, x) is zero with and without the perceptual term") {
        const Tensor x = random_tensor({2, 3, 16, 16}, 1, 0.0, 1.0);
        CHECK(tau(x, x, plain_config()).item() == 0.0);
        CHECK(tau(x, x, perceptual_config()).item() == 0.0);
    }

    TEST_CASE("zero perceptual weight is exactly the mean absolute error") {
        const Tensor a = random_tensor({1, 3, 16, 16}, 2, 0.0, 1.0), b = random_tensor({1, 3, 16, 16}, 3, 0.0, 1.0);
        LossConfig c = perceptual_config();
        c.vgg_weight = 0.0;
        CHECK(tau(a, b, c).item() == mean_abs_error(a, b).item());
        CHECK(tau(a, b, plain_config()).item() == mean_abs_error(a, b).item());
    }

    TEST_CASE("uniform 0.1 offset gives 0.1") {
        const Tensor b = random_tensor({1, 3, 8, 8}, 4, 0.0, 0.8);
        const Tensor a = add_scalar(b, 0.1);
        CHECK(tau(a, b, plain_config()).item() == doctest::Approx(0.1).epsilon(1e-12));
    }

    TEST_CASE("perceptual term adds a weighted feature distance") {
        const Tensor a = random_tensor({1, 3, 32, 32}, 5, 0.0, 1.0), b = random_tensor({1, 3, 32, 32}, 6, 0.0, 1.0);
        const LossConfig c = perceptual_config();
        const double expected =
            mean_abs_error(a, b).item() + 0.001 * mean_squared_error((*c.extractor)(a), (*c.extractor)(b)).item();
        CHECK(tau(a, b, c).item() == doctest::Approx(expected).epsilon(1e-12));
        CHECK(tau(a, b, c).item() > mean_abs_error(a, b).item());
    }

    TEST_CASE("symmetric and nonnegative") {
        for (std::uint64_t seed = 0; seed < 10; ++seed) {
            const Tensor a = random_tensor({1, 3, 16, 16}, 10 + seed, 0.0, 1.0);
            const Tensor b = random_tensor({1, 3, 16, 16}, 30 + seed, 0.0, 1.0);
            CHECK(tau(a, b, plain_config()).item() == tau(b, a, plain_config()).item());
            CHECK(tau(a, b, perceptual_config()).item() >= 0.0);
        }
    }

    TEST_CASE("incompatible size for the extractor is a shape error") {
        const Tensor a = random_tensor({1, 3, 20, 20}, 7);
        CHECK_THROWS_AS(tau(a, a, perceptual_config()), ShapeError);
        CHECK_THROWS_AS(tau(a, Tensor::zeros({1, 3, 20, 16}), plain_config()), ShapeError);
    }

    TEST_CASE("extractor is frozen and deterministic") {
        const FeatureExtractor e1, e2;
        const Tensor x = random_tensor({1, 3, 32, 32}, 8, 0.0, 1.0);
        const Tensor f1 = e1(x), f2 = e2(x);
        CHECK(f1.shape() == Shape{1, 64, 2, 2});
        CHECK(bitwise_equal(f1.values(), f2.values()));
        for (const auto& p : e1.parameters().parameters()) CHECK_FALSE(p.tensor.requires_grad());
    }
}

TEST_SUITE("multi_scale_loss") {
    TEST_CASE("perfect outputs give zero") {
        const Tensor target = random_tensor({1, 3, 8, 8}, 1, 0.0, 1.0);
        InterpolationOutput out;
        out.scale_frames = {target, target, target};
        CHECK(multi_scale_loss(out, target, plain_config()).item() == 0.0);
    }

    TEST_CASE("taus 1.0, 0.8, 0.6 with default weights give 1.7") {
        const auto out = constant_scales({1.0, 0.8, 0.6}, {1, 3, 4, 4});
        CHECK(multi_scale_loss(out, Tensor::zeros({1, 3, 4, 4}), plain_config()).item() ==
              doctest::Approx(1.7).epsilon(1e-12));
    }

    TEST_CASE("one level reduces to the single-scale loss") {
        const Tensor target = random_tensor({1, 3, 8, 8}, 2, 0.0, 1.0);
        InterpolationOutput out;
        out.scale_frames = {random_tensor({1, 3, 8, 8}, 3, 0.0, 1.0)};
        CHECK(multi_scale_loss(out, target, plain_config()).item() ==
              tau(out.scale_frames[0], target, plain_config()).item());
    }

    TEST_CASE("scaling one weight scales only that contribution") {
        const auto out = constant_scales({0.3, 0.2, 0.1}, {1, 3, 4, 4});
        const Tensor target = Tensor::zeros({1, 3, 4, 4});
        LossConfig c = plain_config();
        c.scale_weights = {1.0, 0.5, 0.5};
        const double base = multi_scale_loss(out, target, c).item();
        c.scale_weights = {1.0, 1.5, 0.5};
        const double bumped = multi_scale_loss(out, target, c).item();
        CHECK(bumped - base == doctest::Approx(1.0 * 0.2).epsilon(1e-12));
        const auto r = total_loss(out, target, c);
        CHECK(r.breakdown.scale_weight[1] == 1.5);
        CHECK(r.breakdown.scale_tau[1] == doctest::Approx(0.2));
    }

    TEST_CASE("missing scale outputs are an error") {
        CHECK_THROWS(multi_scale_loss(InterpolationOutput{}, Tensor::zeros({1, 3, 4, 4}), plain_config()));
    }
}

TEST_SUITE("total_loss") {
    TEST_CASE("without refinement and gan it equals the multi-scale loss") {
        const auto out = constant_scales({0.4, 0.25, 0.9}, {1, 3, 4, 4});
        const Tensor target = Tensor::full({1, 3, 4, 4}, 0.1);
        const auto r = total_loss(out, target, plain_config());
        CHECK(r.total.item() == multi_scale_loss(out, target, plain_config()).item());
        CHECK_FALSE(r.breakdown.refine_tau.has_value());
    }

    TEST_CASE("perfect outputs everywhere give zero") {
        const Tensor target = random_tensor({1, 3, 32, 32}, 5, 0.0, 1.0);
        InterpolationOutput out;
        out.scale_frames = {target, target, target};
        out.refined = target;
        out.frame = target;
        CHECK(total_loss(out, target, perceptual_config()).total.item() == 0.0);
    }

    TEST_CASE("refinement adds its own tau") {
        auto out = constant_scales({0.5, 0.5, 0.5}, {1, 3, 4, 4});
        out.refined = Tensor::full({1, 3, 4, 4}, 0.3);
        out.frame = out.refined;
        const auto r = total_loss(out, Tensor::zeros({1, 3, 4, 4}), plain_config());
        REQUIRE(r.breakdown.refine_tau.has_value());
        CHECK(*r.breakdown.refine_tau == doctest::Approx(0.3));
        CHECK(r.total.item() == doctest::Approx(0.5 + 0.5 * (0.5 + 0.5) + 0.3));
    }

    TEST_CASE("breakdown sums to the total") {
        ParameterStore store;
        DiscriminatorSpec spec;
        spec.initial_filters = 4;
        spec.block_count = 4;
        Discriminator disc(spec, store);
        disc.init(3);
        for (GanMode mode : {GanMode::off, GanMode::minimax, GanMode::non_saturating}) {
            InterpolationOutput out;
            for (int j = 0; j < 3; ++j) out.scale_frames.push_back(random_tensor({2, 3, 32, 32}, 20 + j, 0.0, 1.0));
            out.refined = random_tensor({2, 3, 32, 32}, 30, 0.0, 1.0);
            out.frame = out.refined;
            LossConfig c = perceptual_config();
            c.gan_mode = mode;
            const auto r = total_loss(out, random_tensor({2, 3, 32, 32}, 31, 0.0, 1.0), c, &disc);
            CHECK(std::abs(r.breakdown.sum_of_parts() - r.total.item()) < 1e-6);
            CHECK(r.breakdown.total == r.total.item());
            CHECK(r.breakdown.perceptual > 0.0);
        }
    }

    TEST_CASE("gan term without a discriminator is a contract error") {
        LossConfig c = plain_config();
        c.gan_mode = GanMode::non_saturating;
        const auto out = constant_scales({0.5}, {1, 3, 16, 16});
        CHECK_THROWS_AS(total_loss(out, Tensor::zeros({1, 3, 16, 16}), c), ContractError);
    }
}

TEST_SUITE("gan_losses") {
    TEST_CASE("uninformative discriminator gives 2 log 2 and log 2") {
        const Tensor half = Tensor::full({4, 1}, 0.5);
        const auto ns = gan_losses(half, half, GanMode::non_saturating);
        CHECK(ns.discriminator.item() == doctest::Approx(2.0 * std::log(2.0)).epsilon(1e-14));
        CHECK(ns.generator.item() == doctest::Approx(std::log(2.0)).epsilon(1e-14));
        const auto mm = gan_losses(half, half, GanMode::minimax);
        CHECK(mm.discriminator.item() == ns.discriminator.item());
        CHECK(mm.generator.item() == doctest::Approx(-std::log(2.0)).epsilon(1e-14));
    }

    TEST_CASE("near-perfect discriminator drives its loss to zero") {
        const double tiny = 1e-12;
        const auto l = gan_losses(Tensor::full({2, 1}, 1.0 - tiny), Tensor::full({2, 1}, tiny), GanMode::non_saturating);
        CHECK(l.discriminator.item() < 1e-6);
        CHECK(l.discriminator.item() >= 0.0);
    }

    TEST_CASE("values outside (0,1) are a contract error") {
        const Tensor half = Tensor::full({2, 1}, 0.5);
        CHECK_THROWS_AS(gan_losses(Tensor::from({2, 1}, {0.5, 1.0}), half, GanMode::minimax), ContractError);
        CHECK_THROWS_AS(gan_losses(half, Tensor::from({2, 1}, {0.0, 0.5}), GanMode::minimax), ContractError);
        CHECK_THROWS_AS(gan_losses(half, Tensor::from({2, 1}, {-0.1, 0.5}), GanMode::non_saturating), ContractError);
        CHECK_THROWS_AS(gan_losses(half, Tensor::from({2, 1}, {std::nan(""), 0.5}), GanMode::non_saturating),
                        ContractError);
    }

    TEST_CASE("mode names round-trip") {
        for (GanMode m : {GanMode::off, GanMode::minimax, GanMode::non_saturating})
            CHECK(parse_gan_mode(gan_mode_name(m)) == m);
        CHECK_THROWS(parse_gan_mode("wasserstein"));
    }
}
