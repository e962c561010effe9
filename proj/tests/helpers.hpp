#pragma once

#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>

#include "vfi/tensor.hpp"

namespace vfi::test {

struct GoldenPair {
    Tensor input;
    Tensor output;
};

// Reads "input n c h w <values> output n c h w <values>" with # comments.
inline GoldenPair read_golden(const std::string& name)
{
    std::ifstream is(std::filesystem::path(VFI_GOLDEN_DIR) / name);
    REQUIRE_MESSAGE(is.good(), "missing golden file " << name);
    std::stringstream clean;
    for (std::string line; std::getline(is, line);) {
        if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        clean << line << '\n';
    }
    auto read_tensor = [&](const char* tag) {
        std::string word;
        clean >> word;
        REQUIRE(word == tag);
        Shape shape(4);
        for (int& d : shape) clean >> d;
        std::vector<double> v(shape_numel(shape));
        for (double& x : v) clean >> x;
        return Tensor::from(shape, v);
    };
    GoldenPair g;
    g.input = read_tensor("input");
    g.output = read_tensor("output");
    return g;
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b)
{
    REQUIRE(a.size() == b.size());
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b)
{
    REQUIRE(a.shape() == b.shape());
    return max_abs_diff(a.values(), b.values());
}

inline Tensor random_tensor(const Shape& shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0,
                            bool requires_grad = false)
{
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> dist(lo, hi);
    std::vector<double> v(shape_numel(shape));
    for (double& x : v) x = dist(rng);
    return Tensor::from(shape, std::move(v), requires_grad);
}

inline bool bitwise_equal(std::span<const double> a, std::span<const double> b)
{
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i)
        if (std::memcmp(&a[i], &b[i], sizeof(double)) != 0) return false;
    return true;
}

// Fresh scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name)
{
    const auto dir = std::filesystem::temp_directory_path() / ("vfi_test_" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

}  // namespace vfi::test
