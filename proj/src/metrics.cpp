#include "vfi/metrics.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <cstdio>
#include <sstream>

namespace vfi {

double psnr_from_mse(double mse)
{
    if (mse < 0.0 || std::isnan(mse)) throw std::invalid_argument("mse must be non-negative");
    if (mse == 0.0) return kPsnrCap;
    return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

double psnr(const Tensor& a, const Tensor& b)
{
    if (a.shape() != b.shape())
        throw ShapeError("psnr: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const auto av = a.values();
    const auto bv = b.values();
    double s = 0.0;
    for (std::size_t i = 0; i < av.size(); ++i) s += (av[i] - bv[i]) * (av[i] - bv[i]);
    return psnr_from_mse(s / static_cast<double>(av.size()));
}

double psnr(const Frame& a, const Frame& b) { return psnr_from_mse(frame_mse(a, b)); }

namespace {

void append_block(ArchitectureSpec& spec, const std::string& module, const ConvBlockSpec& block, int divisor)
{
    for (int l = 0; l < block.depth; ++l) {
        LayerDescriptor d;
        d.module = module;
        d.n_in = l == 0 ? block.n_in : block.width;
        d.n_out = l == block.depth - 1 ? block.n_out : block.width;
        d.kernel = block.kernel;
        d.input_divisor = divisor;
        spec.layers.push_back(d);
    }
}

}  // namespace

ArchitectureSpec describe_model(const ModelConfig& config)
{
    ArchitectureSpec spec;
    spec.name = config.refine ? "ms-refine" : "ms";
    spec.levels = config.levels;
    spec.refine = config.refine;
    append_block(spec, "flow_coarse", config.coarse_spec(), 1 << config.levels);
    for (int j = config.levels - 1; j >= 1; --j)
        append_block(spec, "flow_residual" + std::to_string(j), config.residual_spec(), 1 << j);
    if (config.refine) append_block(spec, "synthesis_refine", config.refine_spec(), 1);
    return spec;
}

ArchitectureSpec describe_baseline(int width, int layers)
{
    ArchitectureSpec spec;
    spec.name = "baseline";
    append_block(spec, "baseline_cnn", {6, 3, width, layers, 3, Activation::identity}, 1);
    return spec;
}

ArchitectureSpec describe_discriminator(const DiscriminatorSpec& d)
{
    ArchitectureSpec spec;
    spec.name = "discriminator";
    spec.discriminator = true;
    spec.layers.push_back({"disc_stem", d.in_channels, d.initial_filters, d.kernel, 1, 1, true});
    const auto strides = d.strides();
    const auto features = d.features();
    int in = d.initial_filters, divisor = 1;
    for (int i = 0; i < d.block_count; ++i) {
        spec.layers.push_back({"disc_block" + std::to_string(i + 1), in, features[i], d.kernel, strides[i], divisor, true});
        divisor *= strides[i];
        in = features[i];
        spec.extra_params += 2 * static_cast<std::size_t>(features[i]);
    }
    spec.extra_params += static_cast<std::size_t>(in) + 1;
    return spec;
}

ArchitectureSpec describe_named(const std::string& name)
{
    if (name == "baseline") return describe_baseline();
    ModelConfig c;
    if (name == "ms") return describe_model(c);
    if (name == "ms-refine") {
        c.refine = true;
        return describe_model(c);
    }
    throw std::invalid_argument("unknown architecture '" + name + "' (expected baseline, ms or ms-refine)");
}

ComplexityReport count_flops(const ArchitectureSpec& spec, int height, int width)
{
    if (height <= 0 || width <= 0) throw std::invalid_argument("frame size must be positive");
    ComplexityReport report;
    report.architecture = spec.name;
    report.height = height;
    report.width = width;
    const LayerDescriptor* prev = nullptr;
    for (const LayerDescriptor& l : spec.layers) {
        if (l.input_divisor < 1 || l.stride < 1 || height % l.input_divisor != 0 || width % l.input_divisor != 0)
            throw std::invalid_argument("layer of " + l.module + " cannot operate at 1/" +
                                        std::to_string(l.input_divisor) + " of " + std::to_string(height) + "x" +
                                        std::to_string(width));
        if (prev && prev->module == l.module && prev->n_out != l.n_in)
            throw std::invalid_argument("inconsistent channel chain in " + l.module);
        const double h = static_cast<double>(height / l.input_divisor) / l.stride;
        const double w = static_cast<double>(width / l.input_divisor) / l.stride;
        const double flops = std::ceil(h) * std::ceil(w) * l.n_out * (2.0 * l.n_in * l.kernel * l.kernel + 2.0);
        const std::size_t params =
            static_cast<std::size_t>(l.n_out) * l.n_in * l.kernel * l.kernel + (l.bias ? l.n_out : 0);
        if (report.modules.empty() || report.modules.back().module != l.module) report.modules.push_back({l.module});
        report.modules.back().flops += flops;
        report.modules.back().params += params;
        report.total_flops += flops;
        report.params += params;
        prev = &l;
    }
    if (spec.extra_params > 0) {
        report.modules.push_back({"other", 0.0, spec.extra_params});
        report.params += spec.extra_params;
    }
    return report;
}

std::size_t count_params(const ArchitectureSpec& spec)
{
    std::size_t n = spec.extra_params;
    for (const LayerDescriptor& l : spec.layers)
        n += static_cast<std::size_t>(l.n_out) * l.n_in * l.kernel * l.kernel + (l.bias ? l.n_out : 0);
    return n;
}

std::string ComplexityReport::to_json() const
{
    nlohmann::json j;
    j["architecture"] = architecture;
    j["height"] = height;
    j["width"] = width;
    j["total_flops"] = total_flops;
    j["params"] = params;
    j["modules"] = nlohmann::json::array();
    for (const auto& m : modules) j["modules"].push_back({{"module", m.module}, {"flops", m.flops}, {"params", m.params}});
    return j.dump(2);
}

std::string ComplexityReport::to_table() const
{
    std::ostringstream os;
    char line[160];
    std::snprintf(line, sizeof line, "%-20s | %12s | %10s\n", "Module", "Parameters", "FLOPs (G)");
    os << line << std::string(48, '-') << '\n';
    for (const auto& m : modules) {
        std::snprintf(line, sizeof line, "%-20s | %12zu | %10.3f\n", m.module.c_str(), m.params, m.flops / 1e9);
        os << line;
    }
    os << std::string(48, '-') << '\n';
    std::snprintf(line, sizeof line, "%-20s | %12zu | %10.3f\n", (architecture + " total").c_str(), params,
                  total_flops / 1e9);
    os << line;
    std::snprintf(line, sizeof line, "frame %dx%d (W x H): %.1fk parameters, %.1fG FLOPs\n", width, height,
                  params / 1e3, total_flops / 1e9);
    os << line;
    return os.str();
}

}  // namespace vfi
