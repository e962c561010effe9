#include "helpers.hpp"

#include <cmath>
#include <limits>

#include "vfi/gradcheck.hpp"
#include "vfi/ops.hpp"
#include "vfi/tensor.hpp"

using namespace vfi;
using vfi::test::bitwise_equal;
using vfi::test::max_abs_diff;
using vfi::test::random_tensor;
using vfi::test::read_golden;

TEST_SUITE("conv2d") {
    TEST_CASE("identity kernel reproduces the input") {
        const Tensor input = Tensor::full({1, 1, 3, 3}, 1.0);
        std::vector<double> k(9, 0.0);
        k[4] = 1.0;
        const Tensor kernel = Tensor::from({1, 1, 3, 3}, k);
        const Tensor out = conv2d(input, kernel, Tensor::zeros({1}), 1, 1);
        CHECK(out.shape() == input.shape());
        CHECK(max_abs_diff(out, input) == 0.0);
    }

    TEST_CASE("all-ones kernel on a 2x2 input matches the golden sums") {
        const auto golden = read_golden("conv2d_ones_2x2.txt");
        const Tensor out = conv2d(golden.input, Tensor::full({1, 1, 3, 3}, 1.0), Tensor::zeros({1}), 1, 1);
        CHECK(max_abs_diff(out, golden.output) == 0.0);
    }

    TEST_CASE("stride 2 halves a 128x128 input") {
        const Tensor input = random_tensor({1, 2, 128, 128}, 3);
        const Tensor out = conv2d(input, random_tensor({4, 2, 3, 3}, 4), Tensor::zeros({4}), 2, 1);
        CHECK(out.shape() == Shape{1, 4, 64, 64});
    }

    TEST_CASE("general output size formula") {
        const Tensor input = random_tensor({2, 1, 7, 9}, 5);
        const Tensor out = conv2d(input, random_tensor({3, 1, 5, 5}, 6), Tensor::zeros({3}), 2, 1);
        CHECK(out.shape() == Shape{2, 3, (7 + 2 - 5) / 2 + 1, (9 + 2 - 5) / 2 + 1});
    }

    TEST_CASE("bias is added per output channel") {
        const Tensor out = conv2d(Tensor::zeros({1, 1, 4, 4}), Tensor::zeros({2, 1, 3, 3}),
                                  Tensor::from({2}, {0.5, -1.5}), 1, 1);
        for (int y = 0; y < 4; ++y)
            for (int x = 0; x < 4; ++x) {
                CHECK(out.at(0, 0, y, x) == 0.5);
                CHECK(out.at(0, 1, y, x) == -1.5);
            }
    }

    TEST_CASE("channel mismatch is a shape error") {
        CHECK_THROWS_AS(conv2d(Tensor::zeros({1, 2, 4, 4}), Tensor::zeros({1, 3, 3, 3}), Tensor::zeros({1}), 1, 1),
                        ShapeError);
    }
}

TEST_SUITE("activation") {
    TEST_CASE("reference values") {
        CHECK(tanh(Tensor::scalar(0.0)).item() == 0.0);
        CHECK(relu(Tensor::scalar(-2.5)).item() == 0.0);
        CHECK(relu(Tensor::scalar(3.0)).item() == 3.0);
        CHECK(activation(Tensor::scalar(-1.0), Activation::leaky_relu, 0.2).item() == doctest::Approx(-0.2));
        CHECK(activation(Tensor::scalar(2.0), Activation::leaky_relu, 0.2).item() == 2.0);
        CHECK(sigmoid(Tensor::scalar(0.0)).item() == 0.5);
        CHECK(activation(Tensor::scalar(-7.25), Activation::identity).item() == -7.25);
    }

    TEST_CASE("tanh stays strictly inside (-1,1) and sigmoid inside (0,1)") {
        const std::vector<double> xs = {-1e308, -1000.0, -40.0, -20.0, -1.0, 0.0, 1.0, 20.0, 40.0, 1000.0, 1e308};
        const Tensor x = Tensor::from({static_cast<int>(xs.size())}, xs);
        const Tensor t = tanh(x), s = sigmoid(x);
        for (double v : t.values()) CHECK(std::abs(v) < 1.0);
        for (double v : s.values()) {
            CHECK(v > 0.0);
            CHECK(v < 1.0);
        }
    }

    TEST_CASE("relu gradient at exactly zero is zero") {
        const Tensor x = Tensor::from({3}, {-1.0, 0.0, 1.0}, true);
        sum(relu(x)).backward();
        CHECK(x.grad()[0] == 0.0);
        CHECK(x.grad()[1] == 0.0);
        CHECK(x.grad()[2] == 1.0);
    }

    TEST_CASE("names round-trip") {
        for (Activation a : {Activation::relu, Activation::leaky_relu, Activation::tanh, Activation::sigmoid,
                             Activation::identity})
            CHECK(parse_activation(activation_name(a)) == a);
        CHECK_THROWS(parse_activation("swish"));
    }
}

TEST_SUITE("bilinear_resize") {
    TEST_CASE("constant image stays constant under up x2") {
        const Tensor up = upsample2(Tensor::full({1, 3, 5, 7}, 0.7));
        CHECK(up.shape() == Shape{1, 3, 10, 14});
        for (double v : up.values()) CHECK(v == doctest::Approx(0.7).epsilon(1e-15));
    }

    TEST_CASE("constant image stays constant under down x2") {
        const Tensor down = downsample2(Tensor::full({2, 1, 6, 8}, 0.3));
        CHECK(down.shape() == Shape{2, 1, 3, 4});
        for (double v : down.values()) CHECK(v == doctest::Approx(0.3).epsilon(1e-15));
    }

    TEST_CASE("down then up restores the 4x4 shape") {
        const Tensor x = random_tensor({1, 1, 4, 4}, 9);
        CHECK(upsample2(downsample2(x)).shape() == Shape{1, 1, 4, 4});
    }

    TEST_CASE("down x2 golden files") {
        for (const char* name : {"down2_block_means.txt", "down2_ramp.txt"}) {
            const auto golden = read_golden(name);
            CHECK(max_abs_diff(bilinear_resize(golden.input, ResizeDirection::down2), golden.output) < 1e-15);
        }
    }

    TEST_CASE("up x2 golden file") {
        const auto golden = read_golden("up2_corners.txt");
        CHECK(max_abs_diff(bilinear_resize(golden.input, ResizeDirection::up2), golden.output) < 1e-15);
    }

    TEST_CASE("odd dimensions on down x2 are a shape error") {
        CHECK_THROWS_AS(downsample2(Tensor::zeros({1, 1, 5, 4})), ShapeError);
        CHECK_THROWS_AS(downsample2(Tensor::zeros({1, 1, 4, 5})), ShapeError);
    }

    TEST_CASE("both directions are linear") {
        for (std::uint64_t seed = 0; seed < 10; ++seed) {
            const Tensor x = random_tensor({2, 3, 6, 8}, 100 + seed);
            const Tensor y = random_tensor({2, 3, 6, 8}, 200 + seed);
            const double a = 0.3 + 0.1 * static_cast<double>(seed), b = -1.7;
            const Tensor combo = add(scale(x, a), scale(y, b));
            for (ResizeDirection dir : {ResizeDirection::up2, ResizeDirection::down2}) {
                const Tensor lhs = bilinear_resize(combo, dir);
                const Tensor rhs = add(scale(bilinear_resize(x, dir), a), scale(bilinear_resize(y, dir), b));
                CHECK(max_abs_diff(lhs, rhs) < 1e-6);
            }
        }
    }

    TEST_CASE("repeated resampling composes") {
        const Tensor x = random_tensor({1, 2, 16, 24}, 11);
        CHECK(downsample_times(x, 3).shape() == Shape{1, 2, 2, 3});
        CHECK(max_abs_diff(upsample_times(x, 2), upsample2(upsample2(x))) == 0.0);
    }
}

TEST_SUITE("batch_norm") {
    // Every channel alternates +1/-1: zero mean and unit (biased) variance.
    Tensor standardized_input()
    {
        std::vector<double> v(2 * 3 * 4 * 4);
        for (std::size_t i = 0; i < v.size(); ++i) v[i] = (i % 2 == 0) ? 1.0 : -1.0;
        return Tensor::from({2, 3, 4, 4}, v);
    }

    TEST_CASE("standardized input passes through") {
        RunningStats stats(3);
        const Tensor x = standardized_input();
        const Tensor out = batch_norm(x, Tensor::full({3}, 1.0), Tensor::zeros({3}), stats, BatchNormMode::train);
        CHECK(max_abs_diff(out, x) < 1e-5);
    }

    TEST_CASE("scale and shift set the output moments") {
        RunningStats stats(2);
        const Tensor x = random_tensor({4, 2, 5, 5}, 21, -3.0, 5.0);
        const Tensor out = batch_norm(x, Tensor::full({2}, 2.0), Tensor::full({2}, 1.0), stats, BatchNormMode::train);
        const int per_channel = 4 * 25;
        for (int c = 0; c < 2; ++c) {
            double m = 0.0, s = 0.0;
            for (int n = 0; n < 4; ++n)
                for (int i = 0; i < 25; ++i) m += out.at(n, c, i / 5, i % 5);
            m /= per_channel;
            for (int n = 0; n < 4; ++n)
                for (int i = 0; i < 25; ++i) s += std::pow(out.at(n, c, i / 5, i % 5) - m, 2);
            CHECK(m == doctest::Approx(1.0).epsilon(1e-9));
            CHECK(std::sqrt(s / per_channel) == doctest::Approx(2.0).epsilon(1e-4));
        }
    }

    TEST_CASE("running statistics use momentum 0.9") {
        RunningStats stats(1);
        const Tensor x = Tensor::from({1, 1, 2, 2}, {1.0, 2.0, 3.0, 4.0});
        batch_norm(x, Tensor::full({1}, 1.0), Tensor::zeros({1}), stats, BatchNormMode::train);
        CHECK(stats.mean[0] == doctest::Approx(0.9 * 0.0 + 0.1 * 2.5));
        CHECK(stats.var[0] == doctest::Approx(0.9 * 1.0 + 0.1 * (5.0 / 3.0)));
    }

    TEST_CASE("eval mode uses running statistics deterministically") {
        RunningStats stats(1);
        stats.mean[0] = 0.5;
        stats.var[0] = 4.0;
        const Tensor x = random_tensor({2, 1, 3, 3}, 22);
        const Tensor a = batch_norm(x, Tensor::full({1}, 1.0), Tensor::zeros({1}), stats, BatchNormMode::eval);
        const Tensor b = batch_norm(x, Tensor::full({1}, 1.0), Tensor::zeros({1}), stats, BatchNormMode::eval);
        CHECK(bitwise_equal(a.values(), b.values()));
        CHECK(a.at(0) == doctest::Approx((x.at(0) - 0.5) / std::sqrt(4.0 + kBatchNormEps)));
        CHECK(stats.mean[0] == 0.5);
    }

    TEST_CASE("a single element per channel is a degenerate variance") {
        RunningStats stats(2);
        CHECK_THROWS_AS(batch_norm(Tensor::zeros({1, 2, 1, 1}), Tensor::full({2}, 1.0), Tensor::zeros({2}), stats,
                                   BatchNormMode::train),
                        ContractError);
    }
}

TEST_SUITE("reduce") {
    TEST_CASE("reference values") {
        const Tensor x = random_tensor({3, 4}, 31);
        CHECK(mean_abs_error(x, x).item() == 0.0);
        CHECK(mean_abs_error(Tensor::zeros({4}), Tensor::full({4}, 1.0)).item() == 1.0);
        CHECK(mean_squared_error(Tensor::from({2}, {0.0, 2.0}), Tensor::from({2}, {2.0, 0.0})).item() == 4.0);
        CHECK(sum(Tensor::from({3}, {1.0, 2.0, 3.5})).item() == 6.5);
        CHECK(mean(Tensor::from({4}, {1.0, 2.0, 3.0, 6.0})).item() == 3.0);
    }

    TEST_CASE("shape mismatch is a shape error") {
        CHECK_THROWS_AS(mean_abs_error(Tensor::zeros({4}), Tensor::zeros({5})), ShapeError);
        CHECK_THROWS_AS(mean_squared_error(Tensor::zeros({2, 2}), Tensor::zeros({4})), ShapeError);
    }

    TEST_CASE("results are scalars") {
        CHECK(sum(Tensor::zeros({2, 3})).numel() == 1);
        CHECK(mean(Tensor::zeros({2, 3})).numel() == 1);
    }
}

TEST_SUITE("backward") {
    TEST_CASE("sum of w*x gives grad w = x") {
        const Tensor x = random_tensor({5}, 41);
        const Tensor w = random_tensor({5}, 42, -1.0, 1.0, true);
        sum(mul(w, x)).backward();
        CHECK(bitwise_equal(w.grad(), x.values()));
    }

    TEST_CASE("mse(w, 0) at w = 3 gives 6") {
        const Tensor w = Tensor::from({1}, {3.0}, true);
        mean_squared_error(w, Tensor::zeros({1})).backward();
        CHECK(w.grad()[0] == 6.0);
    }

    TEST_CASE("repeated backward calls accumulate") {
        Tensor w = Tensor::from({1}, {3.0}, true);
        const Tensor loss = mean_squared_error(w, Tensor::zeros({1}));
        loss.backward();
        loss.backward();
        CHECK(w.grad()[0] == 12.0);
        w.zero_grad();
        CHECK_FALSE(w.has_grad());
    }

    TEST_CASE("non-scalar loss is a contract error") {
        const Tensor w = Tensor::from({2}, {1.0, 2.0}, true);
        CHECK_THROWS_AS(scale(w, 2.0).backward(), ContractError);
    }

    TEST_CASE("every reachable tracked tensor receives a gradient of matching shape") {
        const Tensor a = random_tensor({1, 2, 4, 4}, 43, -1.0, 1.0, true);
        const Tensor k = random_tensor({3, 2, 3, 3}, 44, -1.0, 1.0, true);
        const Tensor b = random_tensor({3}, 45, -1.0, 1.0, true);
        mean(tanh(conv2d(a, k, b, 1, 1))).backward();
        for (const Tensor* t : {&a, &k, &b}) {
            REQUIRE(t->has_grad());
            CHECK(t->grad().size() == t->numel());
        }
    }

    TEST_CASE("the tape visits a shared node once") {
        const Tensor x = Tensor::from({2}, {0.5, -0.25}, true);
        const Tensor h = tanh(x);
        const Tensor root = sum(add(h, mul(h, h)));
        const ComputationTape tape(root);
        std::size_t h_count = 0;
        for (const detail::Node* n : tape.nodes()) h_count += (n == h.node().get());
        CHECK(h_count == 1);
        CHECK(tape.size() == 5);  // x, h, h*h, h + h*h, sum
        root.backward();
        for (int i = 0; i < 2; ++i) {
            const double t = std::tanh(x.at(i));
            CHECK(x.grad()[i] == doctest::Approx((1.0 + 2.0 * t) * (1.0 - t * t)));
        }
    }

    TEST_CASE("no-grad scope records nothing") {
        const Tensor w = Tensor::from({2}, {1.0, 2.0}, true);
        Tensor y;
        {
            NoGradGuard guard;
            y = sum(mul(w, w));
        }
        CHECK_FALSE(y.requires_grad());
        CHECK(grad_mode_enabled());
    }
}

TEST_SUITE("finite_diff_check") {
    TEST_CASE("tanh passes") {
        const auto report = finite_diff_check([](const std::vector<Tensor>& in) { return tanh(in[0]); },
                                              {random_tensor({2, 3, 4}, 51, -2.0, 2.0, true)}, 1e-4, 1e-4);
        CHECK(report.passed);
        CHECK(report.coordinates == 24);
    }

    TEST_CASE("conv2d with a random 3x3 kernel on 1x1x5x5 passes") {
        const auto report = finite_diff_check(
            [](const std::vector<Tensor>& in) { return conv2d(in[0], in[1], in[2], 1, 1); },
            {random_tensor({1, 1, 5, 5}, 52, -1.0, 1.0, true), random_tensor({1, 1, 3, 3}, 53, -1.0, 1.0, true),
             random_tensor({1}, 54, -1.0, 1.0, true)}, 1e-4, 1e-4);
        CHECK(report.passed);
        CHECK(report.max_rel_error < 1e-4);
    }

    TEST_CASE("a wrong adjoint fails") {
        // Squaring op whose adjoint uses 3x instead of 2x.
        const auto broken_square = [](const std::vector<Tensor>& in) {
            const Tensor& x = in[0];
            std::vector<double> v(x.values().begin(), x.values().end());
            for (double& e : v) e *= e;
            return Tensor::make_result(
                x.shape(), std::move(v), {x},
                [](detail::Node& self) {
                    auto& parent = *self.parents[0];
                    auto& g = parent.grad_buffer();
                    for (std::size_t i = 0; i < g.size(); ++i) g[i] += 3.0 * parent.value[i] * self.grad[i];
                },
                "broken_square");
        };
        const auto report = finite_diff_check(broken_square, {random_tensor({6}, 55, 0.5, 1.5, true)}, 1e-4, 1e-4);
        CHECK_FALSE(report.passed);
        CHECK(report.max_rel_error > 0.1);
    }

    TEST_CASE("one seed of the full suite passes") {
        const auto result = run_gradcheck_suite(1, 1, 1e-4, 1e-4, [](const CheckReport& r) {
            CHECK_MESSAGE(r.passed, r.name << " rel " << r.max_rel_error);
        });
        CHECK(result.all_passed());
        CHECK(result.reports.size() > 20);
    }
}

TEST_SUITE("determinism") {
    TEST_CASE("identical inputs give bitwise identical outputs and gradients") {
        auto run = [] {
            const Tensor x = random_tensor({2, 3, 8, 8}, 61, -1.0, 1.0, true);
            const Tensor k = random_tensor({4, 3, 3, 3}, 62, -1.0, 1.0, true);
            const Tensor b = random_tensor({4}, 63, -1.0, 1.0, true);
            const Tensor y = upsample2(tanh(conv2d(x, k, b, 2, 1)));
            mean_squared_error(y, Tensor::zeros(y.shape())).backward();
            std::vector<double> all(y.values().begin(), y.values().end());
            for (const Tensor* t : {&x, &k, &b}) all.insert(all.end(), t->grad().begin(), t->grad().end());
            return all;
        };
        const auto first = run();
        const auto second = run();
        CHECK(bitwise_equal(first, second));
    }
}
