#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "vfi/ops.hpp"
#include "vfi/tensor.hpp"

namespace vfi {

struct NamedTensor {
    std::string name;
    Tensor tensor;
};

/// Named, ordered collection of trainable tensors plus batch-norm running
/// statistics. Layers keep handles into it, so the store must outlive them.
class ParameterStore {
public:
    ParameterStore() = default;
    ParameterStore(const ParameterStore&) = delete;
    ParameterStore& operator=(const ParameterStore&) = delete;
    ParameterStore(ParameterStore&&) = default;
    ParameterStore& operator=(ParameterStore&&) = default;

    Tensor add(const std::string& name, Tensor tensor);
    RunningStats& add_running_stats(const std::string& name, int channels);

    const std::vector<NamedTensor>& parameters() const { return params_; }
    const Tensor& get(const std::string& name) const;
    bool contains(const std::string& name) const;

    std::size_t parameter_count() const;
    void zero_grad();

    struct StatsEntry {
        std::string name;
        std::unique_ptr<RunningStats> stats;
    };
    const std::vector<StatsEntry>& running_stats() const { return stats_; }

    /// Flat copy of every value (parameters and running statistics), keyed by name.
    using Snapshot = std::map<std::string, std::vector<double>>;
    Snapshot snapshot() const;
    void restore(const Snapshot& snapshot);

private:
    std::vector<NamedTensor> params_;
    std::map<std::string, std::size_t> index_;
    std::vector<StatsEntry> stats_;
};

struct Conv2d {
    Tensor weight;  // [Co,Ci,k,k]
    Tensor bias;    // [Co]
    int stride = 1;
    int padding = 1;

    Tensor operator()(const Tensor& x) const { return conv2d(x, weight, bias, stride, padding); }
    int in_channels() const { return weight.dim(1); }
    int out_channels() const { return weight.dim(0); }
    int kernel() const { return weight.dim(2); }
};

Conv2d make_conv(ParameterStore& store, const std::string& name, int n_in, int n_out, int kernel, int stride);

/// Plain stack of stride-1 convolutions: n_in -> width, (depth-2) x width -> width,
/// width -> n_out. Hidden layers use ReLU, the last one `final_activation`.
struct ConvBlockSpec {
    int n_in = 6;
    int n_out = 3;
    int width = 32;
    int depth = 6;
    int kernel = 3;
    Activation final_activation = Activation::tanh;
    Activation hidden_activation = Activation::relu;
};

class ConvBlock {
public:
    ConvBlock(const ConvBlockSpec& spec, ParameterStore& store, const std::string& prefix);

    Tensor forward(const Tensor& x) const;
    Tensor operator()(const Tensor& x) const { return forward(x); }

    const ConvBlockSpec& spec() const { return spec_; }
    const std::vector<Conv2d>& layers() const { return layers_; }
    std::vector<Conv2d>& layers() { return layers_; }
    std::size_t parameter_count() const;

private:
    ConvBlockSpec spec_;
    std::vector<Conv2d> layers_;
};

ConvBlock build_conv_block(const ConvBlockSpec& spec, ParameterStore& store, const std::string& prefix);

/// Fills a [rows x cols] row-major matrix with a (semi-)orthogonal matrix times
/// `gain`: orthonormal rows when rows <= cols, orthonormal columns otherwise.
void orthogonal_fill(std::span<double> matrix, int rows, int cols, double gain, std::mt19937_64& rng);
void normal_fill(std::span<double> values, double stddev, std::mt19937_64& rng);

inline constexpr double kOrthogonalGain = 1.4142135623730951;
inline constexpr double kFinalLayerStd = 0.01;

/// Orthogonal (gain sqrt 2) hidden layers, Normal(0, 0.01^2) final layer, zero biases.
void init_conv_block(ConvBlock& block, std::mt19937_64& rng);

struct DiscriminatorSpec {
    int in_channels = 3;
    int initial_filters = 32;
    int block_count = 8;
    int kernel = 3;
    double leaky_slope = kLeakySlope;

    /// Stride per block: 2, 1, 2, 1, ...
    std::vector<int> strides() const;
    /// Output features per block, doubling at every stride-2 block.
    std::vector<int> features() const;
    /// Spatial reduction factor, i.e. 2^(number of stride-2 blocks).
    int reduction() const;
};

/// Initial conv + leaky ReLU, then blocks of conv, batch norm and leaky ReLU,
/// then global average pooling, an affine map to one logit and a sigmoid.
class Discriminator {
public:
    Discriminator(const DiscriminatorSpec& spec, ParameterStore& store, const std::string& prefix = "disc");

    /// Probabilities [N,1] in (0,1).
    Tensor forward(const Tensor& images, BatchNormMode mode) const;
    /// Pre-sigmoid logits [N,1]. When `preactivations` is given, the input of
    /// every leaky ReLU is appended to it.
    Tensor logits(const Tensor& images, BatchNormMode mode, std::vector<Tensor>* preactivations = nullptr) const;

    const DiscriminatorSpec& spec() const { return spec_; }
    void init(std::uint64_t seed);

private:
    struct Block {
        Conv2d conv;
        Tensor bn_scale, bn_shift;
        RunningStats* stats;
    };
    DiscriminatorSpec spec_;
    Conv2d stem_;
    std::vector<Block> blocks_;
    Tensor head_weight_, head_bias_;
};

// Checkpoint archive: "VFICKPT\n", u32 version, u32 + bytes of architecture
// text, u32 entry count, then per entry u32 + bytes of name, u32 rank, rank x
// u32 dims and the values as little-endian IEEE-754 binary64. Integers are
// little-endian.
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct ArchiveEntry {
    std::string name;
    Shape shape;
    std::vector<double> values;
};

struct Archive {
    std::uint32_t version = kCheckpointVersion;
    std::string architecture;
    std::vector<ArchiveEntry> entries;

    const ArchiveEntry* find(const std::string& name) const;
};

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

void save_archive(const std::string& path, const Archive& archive);
Archive load_archive(const std::string& path);

/// Parameters as "<name>", running stats as "<name>.running_mean" / ".running_var";
/// `prefix` is prepended to every entry name.
void append_store(Archive& archive, const ParameterStore& store, const std::string& prefix = "");
/// Loads every store entry from the archive; missing entries or shape mismatches throw.
void load_store(const Archive& archive, ParameterStore& store, const std::string& prefix = "");

}  // namespace vfi
