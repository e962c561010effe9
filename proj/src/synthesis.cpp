#include "vfi/synthesis.hpp"

#include <map>
#include <sstream>

namespace vfi {

Tensor flow_channels(const Tensor& features) { return slice_channels(features, 0, 2); }

Tensor blend_weight(const Tensor& features)
{
    return scale(add_scalar(slice_channels(features, 2, 1), 1.0), 0.5);
}

Tensor synthesize(const Tensor& first, const Tensor& last, const Tensor& features)
{
    if (first.shape() != last.shape())
        throw ShapeError("synthesize: frames differ " + shape_str(first.shape()) + " vs " + shape_str(last.shape()));
    if (features.rank() != 4 || features.dim(1) != 3 || features.dim(2) != first.dim(2) ||
        features.dim(3) != first.dim(3) || features.dim(0) != first.dim(0))
        throw ShapeError("synthesize: features " + shape_str(features.shape()) + " do not match frames " +
                         shape_str(first.shape()));
    const Tensor flow = flow_channels(features);
    return blend(warp(first, flow, -1.0), warp(last, flow, 1.0), blend_weight(features));
}

PyramidOutput estimate_pyramid(const Tensor& first, const Tensor& last, const ConvBlock& coarse,
                               const std::vector<ConvBlock>& residual, const PyramidConfig& config)
{
    const int levels = config.levels;
    if (levels < 1) throw std::invalid_argument("pyramid needs at least one level");
    if (static_cast<int>(residual.size()) != levels - 1)
        throw std::invalid_argument("pyramid with " + std::to_string(levels) + " levels needs " +
                                    std::to_string(levels - 1) + " residual blocks");
    const int multiple = 1 << levels;
    if (first.rank() != 4 || first.dim(2) % multiple != 0 || first.dim(3) % multiple != 0)
        throw ShapeError("pyramid input " + shape_str(first.shape()) + " not divisible by " + std::to_string(multiple));
    if (first.shape() != last.shape()) throw ShapeError("pyramid frames differ in shape");

    // down[j] holds both frames at 1/2^j resolution.
    std::vector<Tensor> down0(levels + 1), down1(levels + 1);
    down0[0] = first;
    down1[0] = last;
    for (int j = 1; j <= levels; ++j) {
        down0[j] = downsample2(down0[j - 1]);
        down1[j] = downsample2(down1[j - 1]);
    }

    PyramidOutput out;
    out.level_features.resize(levels);
    out.level_features[levels - 1] = coarse(concat_channels({down0[levels], down1[levels]}));
    for (int j = levels - 1; j >= 1; --j) {
        const Tensor up = upsample2(out.level_features[j]);
        const Tensor flow = flow_channels(up);
        const Tensor warped0 = warp(down0[j], flow, -1.0);
        const Tensor warped1 = warp(down1[j], flow, 1.0);
        const Tensor res = residual[j - 1](concat_channels({warped0, warped1, up}));
        out.level_features[j - 1] = tanh(add(up, res));
    }
    out.final_features = upsample2(out.level_features[0]);
    return out;
}

Tensor refine_synthesis(const Tensor& synthesized, const Tensor& first, const Tensor& last, const ConvBlock& block)
{
    if (synthesized.shape() != first.shape() || first.shape() != last.shape())
        throw ShapeError("refine_synthesis: frame shapes differ");
    return block(concat_channels({synthesized, first, last}));
}

ConvBlockSpec ModelConfig::coarse_spec() const
{
    return {6, 3, width, depth, kernel, Activation::tanh, hidden_activation};
}

ConvBlockSpec ModelConfig::residual_spec() const
{
    return {9, 3, width, depth, kernel, Activation::tanh, hidden_activation};
}

ConvBlockSpec ModelConfig::refine_spec() const
{
    return {9, 3, width, depth, kernel, Activation::identity, hidden_activation};
}

std::string ModelConfig::to_text() const
{
    std::ostringstream os;
    os << "model.levels=" << levels << '\n'
       << "model.width=" << width << '\n'
       << "model.depth=" << depth << '\n'
       << "model.kernel=" << kernel << '\n'
       << "model.refine=" << (refine ? 1 : 0) << '\n'
       << "model.hidden_activation=" << activation_name(hidden_activation) << '\n';
    return os.str();
}

ModelConfig ModelConfig::from_text(const std::string& text)
{
    std::map<std::string, std::string> kv;
    std::istringstream is(text);
    for (std::string line; std::getline(is, line);) {
        const auto eq = line.find('=');
        if (eq == std::string::npos) continue;
        kv[line.substr(0, eq)] = line.substr(eq + 1);
    }
    auto get = [&](const std::string& key) {
        auto it = kv.find("model." + key);
        if (it == kv.end()) throw CheckpointError("architecture lacks 'model." + key + "'");
        return std::stoi(it->second);
    };
    ModelConfig c;
    c.levels = get("levels");
    c.width = get("width");
    c.depth = get("depth");
    c.kernel = get("kernel");
    c.refine = get("refine") != 0;
    if (auto it = kv.find("model.hidden_activation"); it != kv.end()) c.hidden_activation = parse_activation(it->second);
    return c;
}

std::string config_diff(const ModelConfig& expected, const ModelConfig& actual)
{
    std::ostringstream os;
    auto field = [&](const char* name, int a, int b) {
        if (a != b) os << "  " << name << ": expected " << a << ", found " << b << '\n';
    };
    field("levels", expected.levels, actual.levels);
    field("width", expected.width, actual.width);
    field("depth", expected.depth, actual.depth);
    field("kernel", expected.kernel, actual.kernel);
    field("refine", expected.refine, actual.refine);
    if (expected.hidden_activation != actual.hidden_activation)
        os << "  hidden_activation: expected " << activation_name(expected.hidden_activation) << ", found "
           << activation_name(actual.hidden_activation) << '\n';
    return os.str();
}

namespace {

std::vector<ConvBlock> make_residuals(const ModelConfig& config, ParameterStore& store)
{
    std::vector<ConvBlock> blocks;
    for (int j = 1; j < config.levels; ++j)
        blocks.emplace_back(config.residual_spec(), store, "flow_residual" + std::to_string(j));
    return blocks;
}

}  // namespace

InterpolationModel::InterpolationModel(const ModelConfig& config)
    : config_(config),
      coarse_(config.coarse_spec(), store_, "flow_coarse"),
      residual_(make_residuals(config, store_))
{
    if (config.levels < 1) throw std::invalid_argument("model needs at least one pyramid level");
    if (config.refine) refine_.emplace(config.refine_spec(), store_, "synthesis_refine");
}

void InterpolationModel::init(std::uint64_t seed)
{
    std::mt19937_64 rng(seed);
    init_conv_block(coarse_, rng);
    for (ConvBlock& b : residual_) init_conv_block(b, rng);
    if (refine_) init_conv_block(*refine_, rng);
}

InterpolationOutput InterpolationModel::forward(const Tensor& first, const Tensor& last) const
{
    if (first.rank() != 4 || first.dim(1) != 3) throw ShapeError("frames must be [N,3,H,W], got " + shape_str(first.shape()));
    if (first.shape() != last.shape()) throw ShapeError("input frames differ in shape");
    const int h = first.dim(2), w = first.dim(3);
    const int m = config_.size_multiple();
    const int pad_h = (m - h % m) % m, pad_w = (m - w % m) % m;
    const bool padded = pad_h || pad_w;
    const Tensor a = padded ? reflect_pad(first, 0, pad_h, 0, pad_w) : first;
    const Tensor b = padded ? reflect_pad(last, 0, pad_h, 0, pad_w) : last;
    auto unpad = [&](const Tensor& t) { return padded ? crop(t, 0, 0, h, w) : t; };

    PyramidOutput pyr = estimate_pyramid(a, b, coarse_, residual_, {config_.levels});
    InterpolationOutput out;
    for (int j = 1; j <= config_.levels; ++j) {
        const Tensor features = j == 1 ? pyr.final_features : upsample_times(pyr.level_features[j - 1], j);
        out.scale_frames.push_back(unpad(synthesize(a, b, features)));
    }
    out.level_features = std::move(pyr.level_features);
    out.final_features = unpad(pyr.final_features);
    out.frame = out.scale_frames.front();
    if (refine_) {
        out.refined = refine_synthesis(out.frame, first, last, *refine_);
        out.frame = out.refined;
    }
    return out;
}

Tensor InterpolationModel::predict(const Tensor& first, const Tensor& last) const
{
    NoGradGuard guard;
    return clamp(forward(first, last).frame, 0.0, 1.0);
}

void InterpolationModel::save(const std::string& path) const
{
    Archive a;
    a.architecture = config_.to_text();
    append_store(a, store_);
    save_archive(path, a);
}

ModelConfig model_config_from_archive(const Archive& archive) { return ModelConfig::from_text(archive.architecture); }

void InterpolationModel::load_weights(const Archive& archive)
{
    const ModelConfig stored = model_config_from_archive(archive);
    if (!(stored == config_))
        throw CheckpointError("checkpoint architecture differs from model:\n" + config_diff(config_, stored));
    load_store(archive, store_);
}

InterpolationModel InterpolationModel::load(const std::string& path)
{
    const Archive archive = load_archive(path);
    InterpolationModel model(model_config_from_archive(archive));
    model.load_weights(archive);
    return model;
}

}  // namespace vfi
