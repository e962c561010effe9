#include "vfi/layers.hpp"

#include <Eigen/Dense>

#include <bit>
#include <fstream>
#include <iterator>

namespace vfi {

Tensor ParameterStore::add(const std::string& name, Tensor tensor)
{
    if (index_.count(name)) throw std::invalid_argument("duplicate parameter '" + name + "'");
    tensor.set_requires_grad(true);
    index_[name] = params_.size();
    params_.push_back({name, tensor});
    return tensor;
}

RunningStats& ParameterStore::add_running_stats(const std::string& name, int channels)
{
    for (const auto& s : stats_)
        if (s.name == name) throw std::invalid_argument("duplicate running stats '" + name + "'");
    stats_.push_back({name, std::make_unique<RunningStats>(channels)});
    return *stats_.back().stats;
}

const Tensor& ParameterStore::get(const std::string& name) const
{
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("no parameter named '" + name + "'");
    return params_[it->second].tensor;
}

bool ParameterStore::contains(const std::string& name) const { return index_.count(name) != 0; }

std::size_t ParameterStore::parameter_count() const
{
    std::size_t n = 0;
    for (const auto& p : params_) n += p.tensor.numel();
    return n;
}

void ParameterStore::zero_grad()
{
    for (auto& p : params_) p.tensor.zero_grad();
}

ParameterStore::Snapshot ParameterStore::snapshot() const
{
    Snapshot snap;
    for (const auto& p : params_) snap[p.name].assign(p.tensor.values().begin(), p.tensor.values().end());
    for (const auto& s : stats_) {
        snap[s.name + ".running_mean"] = s.stats->mean;
        snap[s.name + ".running_var"] = s.stats->var;
    }
    return snap;
}

void ParameterStore::restore(const Snapshot& snap)
{
    auto fetch = [&](const std::string& name, std::size_t size) -> const std::vector<double>& {
        auto it = snap.find(name);
        if (it == snap.end()) throw std::out_of_range("snapshot lacks '" + name + "'");
        if (it->second.size() != size) throw ShapeError("snapshot size mismatch for '" + name + "'");
        return it->second;
    };
    for (auto& p : params_) {
        const auto& v = fetch(p.name, p.tensor.numel());
        std::copy(v.begin(), v.end(), p.tensor.mutable_values().begin());
    }
    for (auto& s : stats_) {
        s.stats->mean = fetch(s.name + ".running_mean", s.stats->mean.size());
        s.stats->var = fetch(s.name + ".running_var", s.stats->var.size());
    }
}

Conv2d make_conv(ParameterStore& store, const std::string& name, int n_in, int n_out, int kernel, int stride)
{
    if (kernel % 2 == 0) throw std::invalid_argument("conv kernel must be odd");
    Conv2d conv;
    conv.weight = store.add(name + ".weight", Tensor::zeros({n_out, n_in, kernel, kernel}));
    conv.bias = store.add(name + ".bias", Tensor::zeros({n_out}));
    conv.stride = stride;
    conv.padding = (kernel - 1) / 2;
    return conv;
}

ConvBlock::ConvBlock(const ConvBlockSpec& spec, ParameterStore& store, const std::string& prefix) : spec_(spec)
{
    if (spec.depth < 2) throw std::invalid_argument("conv block needs at least two layers");
    for (int l = 0; l < spec.depth; ++l) {
        const int in = l == 0 ? spec.n_in : spec.width;
        const int out = l == spec.depth - 1 ? spec.n_out : spec.width;
        layers_.push_back(make_conv(store, prefix + ".conv" + std::to_string(l + 1), in, out, spec.kernel, 1));
    }
}

Tensor ConvBlock::forward(const Tensor& x) const
{
    Tensor h = x;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
        h = layers_[l](h);
        h = activation(h, l + 1 == layers_.size() ? spec_.final_activation : spec_.hidden_activation);
    }
    return h;
}

std::size_t ConvBlock::parameter_count() const
{
    std::size_t n = 0;
    for (const auto& l : layers_) n += l.weight.numel() + l.bias.numel();
    return n;
}

ConvBlock build_conv_block(const ConvBlockSpec& spec, ParameterStore& store, const std::string& prefix)
{
    return ConvBlock(spec, store, prefix);
}

void orthogonal_fill(std::span<double> matrix, int rows, int cols, double gain, std::mt19937_64& rng)
{
    if (matrix.size() != static_cast<std::size_t>(rows) * cols) throw ShapeError("orthogonal_fill: size mismatch");
    const bool wide = rows <= cols;
    const int big = wide ? cols : rows;
    const int small = wide ? rows : cols;
    std::normal_distribution<double> normal(0.0, 1.0);
    Eigen::MatrixXd a(big, small);
    for (int j = 0; j < small; ++j)
        for (int i = 0; i < big; ++i) a(i, j) = normal(rng);
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(a);
    Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(big, small);
    // Sign fix makes the draw uniform over the orthogonal group.
    const Eigen::MatrixXd r = qr.matrixQR().topLeftCorner(small, small);
    for (int j = 0; j < small; ++j)
        if (r(j, j) < 0.0) q.col(j) *= -1.0;
    for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j)
            matrix[static_cast<std::size_t>(i) * cols + j] = gain * (wide ? q(j, i) : q(i, j));
}

void normal_fill(std::span<double> values, double stddev, std::mt19937_64& rng)
{
    std::normal_distribution<double> normal(0.0, stddev);
    for (double& v : values) v = normal(rng);
}

void init_conv_block(ConvBlock& block, std::mt19937_64& rng)
{
    auto& layers = block.layers();
    for (std::size_t l = 0; l < layers.size(); ++l) {
        Conv2d& conv = layers[l];
        const int rows = conv.out_channels();
        const int cols = conv.in_channels() * conv.kernel() * conv.kernel();
        if (l + 1 == layers.size())
            normal_fill(conv.weight.mutable_values(), kFinalLayerStd, rng);
        else
            orthogonal_fill(conv.weight.mutable_values(), rows, cols, kOrthogonalGain, rng);
        std::fill(conv.bias.mutable_values().begin(), conv.bias.mutable_values().end(), 0.0);
    }
}

std::vector<int> DiscriminatorSpec::strides() const
{
    std::vector<int> s(block_count);
    for (int i = 0; i < block_count; ++i) s[i] = i % 2 == 0 ? 2 : 1;
    return s;
}

std::vector<int> DiscriminatorSpec::features() const
{
    std::vector<int> f(block_count);
    int width = initial_filters;
    const auto s = strides();
    for (int i = 0; i < block_count; ++i) {
        if (s[i] == 2) width *= 2;
        f[i] = width;
    }
    return f;
}

int DiscriminatorSpec::reduction() const
{
    int r = 1;
    for (int s : strides()) r *= s;
    return r;
}

Discriminator::Discriminator(const DiscriminatorSpec& spec, ParameterStore& store, const std::string& prefix)
    : spec_(spec)
{
    stem_ = make_conv(store, prefix + ".stem", spec.in_channels, spec.initial_filters, spec.kernel, 1);
    const auto strides = spec.strides();
    const auto features = spec.features();
    int in = spec.initial_filters;
    for (int i = 0; i < spec.block_count; ++i) {
        const std::string name = prefix + ".block" + std::to_string(i + 1);
        Block b;
        b.conv = make_conv(store, name + ".conv", in, features[i], spec.kernel, strides[i]);
        b.bn_scale = store.add(name + ".bn.scale", Tensor::full({features[i]}, 1.0));
        b.bn_shift = store.add(name + ".bn.shift", Tensor::zeros({features[i]}));
        b.stats = &store.add_running_stats(name + ".bn", features[i]);
        blocks_.push_back(b);
        in = features[i];
    }
    head_weight_ = store.add(prefix + ".head.weight", Tensor::zeros({1, in}));
    head_bias_ = store.add(prefix + ".head.bias", Tensor::zeros({1}));
}

Tensor Discriminator::logits(const Tensor& images, BatchNormMode mode, std::vector<Tensor>* preactivations) const
{
    if (images.rank() != 4 || images.dim(1) != spec_.in_channels)
        throw ShapeError("discriminator input " + shape_str(images.shape()));
    const int r = spec_.reduction();
    if (images.dim(2) % r != 0 || images.dim(3) % r != 0)
        throw ShapeError("discriminator input size must be divisible by " + std::to_string(r) + ", got " +
                         shape_str(images.shape()));
    auto leaky = [&](const Tensor& x) {
        if (preactivations) preactivations->push_back(x);
        return activation(x, Activation::leaky_relu, spec_.leaky_slope);
    };
    Tensor h = leaky(stem_(images));
    for (const Block& b : blocks_) {
        h = b.conv(h);
        h = leaky(batch_norm(h, b.bn_scale, b.bn_shift, *b.stats, mode));
    }
    return linear(global_avg_pool(h), head_weight_, head_bias_);
}

Tensor Discriminator::forward(const Tensor& images, BatchNormMode mode) const
{
    return sigmoid(logits(images, mode));
}

void Discriminator::init(std::uint64_t seed)
{
    std::mt19937_64 rng(seed);
    auto init_conv = [&](const Conv2d& c) {
        Tensor w = c.weight;
        Tensor b = c.bias;
        orthogonal_fill(w.mutable_values(), c.out_channels(), c.in_channels() * c.kernel() * c.kernel(),
                        kOrthogonalGain, rng);
        std::fill(b.mutable_values().begin(), b.mutable_values().end(), 0.0);
    };
    init_conv(stem_);
    for (Block& b : blocks_) {
        init_conv(b.conv);
        std::fill(b.bn_scale.mutable_values().begin(), b.bn_scale.mutable_values().end(), 1.0);
        std::fill(b.bn_shift.mutable_values().begin(), b.bn_shift.mutable_values().end(), 0.0);
        *b.stats = RunningStats(static_cast<int>(b.stats->mean.size()));
    }
    normal_fill(head_weight_.mutable_values(), kFinalLayerStd, rng);
    head_bias_.mutable_values()[0] = 0.0;
}

// ---------------------------------------------------------------------------
// Archive I/O

namespace {

constexpr char kMagic[8] = {'V', 'F', 'I', 'C', 'K', 'P', 'T', '\n'};

void put_u32(std::ostream& os, std::uint32_t v)
{
    for (int i = 0; i < 4; ++i) os.put(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f64(std::ostream& os, double d)
{
    const auto v = std::bit_cast<std::uint64_t>(d);
    for (int i = 0; i < 8; ++i) os.put(static_cast<char>((v >> (8 * i)) & 0xff));
}

class Reader {
public:
    explicit Reader(std::vector<char> bytes) : bytes_(std::move(bytes)) {}

    std::uint64_t uint(int width)
    {
        need(width);
        std::uint64_t v = 0;
        for (int i = 0; i < width; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
        pos_ += width;
        return v;
    }
    std::uint32_t u32() { return static_cast<std::uint32_t>(uint(4)); }
    double f64() { return std::bit_cast<double>(uint(8)); }
    std::string str(std::size_t len)
    {
        need(len);
        std::string s(bytes_.begin() + pos_, bytes_.begin() + pos_ + len);
        pos_ += len;
        return s;
    }
    bool done() const { return pos_ == bytes_.size(); }

private:
    void need(std::size_t n) const
    {
        if (pos_ + n > bytes_.size()) throw CheckpointError("truncated checkpoint");
    }
    std::vector<char> bytes_;
    std::size_t pos_ = 0;
};

}  // namespace

const ArchiveEntry* Archive::find(const std::string& name) const
{
    for (const auto& e : entries)
        if (e.name == name) return &e;
    return nullptr;
}

void save_archive(const std::string& path, const Archive& archive)
{
    std::ofstream os(path, std::ios::binary);
    if (!os) throw CheckpointError("cannot open '" + path + "' for writing");
    os.write(kMagic, sizeof kMagic);
    put_u32(os, archive.version);
    put_u32(os, static_cast<std::uint32_t>(archive.architecture.size()));
    os.write(archive.architecture.data(), static_cast<std::streamsize>(archive.architecture.size()));
    put_u32(os, static_cast<std::uint32_t>(archive.entries.size()));
    for (const auto& e : archive.entries) {
        if (shape_numel(e.shape) != e.values.size()) throw CheckpointError("entry '" + e.name + "' inconsistent");
        put_u32(os, static_cast<std::uint32_t>(e.name.size()));
        os.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
        put_u32(os, static_cast<std::uint32_t>(e.shape.size()));
        for (int d : e.shape) put_u32(os, static_cast<std::uint32_t>(d));
        for (double v : e.values) put_f64(os, v);
    }
    if (!os) throw CheckpointError("write to '" + path + "' failed");
}

Archive load_archive(const std::string& path)
{
    std::ifstream is(path, std::ios::binary);
    if (!is) throw CheckpointError("cannot open checkpoint '" + path + "'");
    Reader r(std::vector<char>(std::istreambuf_iterator<char>(is), {}));
    if (r.str(sizeof kMagic) != std::string(kMagic, sizeof kMagic)) throw CheckpointError("not a checkpoint: " + path);
    Archive a;
    a.version = r.u32();
    if (a.version != kCheckpointVersion)
        throw CheckpointError("unsupported checkpoint version " + std::to_string(a.version));
    a.architecture = r.str(r.u32());
    const std::uint32_t count = r.u32();
    for (std::uint32_t i = 0; i < count; ++i) {
        ArchiveEntry e;
        e.name = r.str(r.u32());
        const std::uint32_t rank = r.u32();
        for (std::uint32_t d = 0; d < rank; ++d) e.shape.push_back(static_cast<int>(r.u32()));
        e.values.resize(shape_numel(e.shape));
        for (double& v : e.values) v = r.f64();
        a.entries.push_back(std::move(e));
    }
    if (!r.done()) throw CheckpointError("trailing bytes in checkpoint");
    return a;
}

void append_store(Archive& archive, const ParameterStore& store, const std::string& prefix)
{
    for (const auto& p : store.parameters())
        archive.entries.push_back(
            {prefix + p.name, p.tensor.shape(), {p.tensor.values().begin(), p.tensor.values().end()}});
    for (const auto& s : store.running_stats()) {
        const int c = static_cast<int>(s.stats->mean.size());
        archive.entries.push_back({prefix + s.name + ".running_mean", {c}, s.stats->mean});
        archive.entries.push_back({prefix + s.name + ".running_var", {c}, s.stats->var});
    }
}

void load_store(const Archive& archive, ParameterStore& store, const std::string& prefix)
{
    auto fetch = [&](const std::string& name, const Shape& shape) -> const ArchiveEntry& {
        const ArchiveEntry* e = archive.find(prefix + name);
        if (!e) throw CheckpointError("checkpoint lacks entry '" + prefix + name + "'");
        if (e->shape != shape)
            throw CheckpointError("entry '" + prefix + name + "' has shape " + shape_str(e->shape) + ", model expects " +
                                  shape_str(shape));
        return *e;
    };
    for (const auto& p : store.parameters()) {
        const ArchiveEntry& e = fetch(p.name, p.tensor.shape());
        Tensor t = p.tensor;
        std::copy(e.values.begin(), e.values.end(), t.mutable_values().begin());
    }
    for (const auto& s : store.running_stats()) {
        const Shape shape{static_cast<int>(s.stats->mean.size())};
        s.stats->mean = fetch(s.name + ".running_mean", shape).values;
        s.stats->var = fetch(s.name + ".running_var", shape).values;
    }
}

}  // namespace vfi
