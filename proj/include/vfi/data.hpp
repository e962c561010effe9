#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "vfi/tensor.hpp"

namespace vfi {

/// Planar RGB image with values nominally in [0,1].
struct Frame {
    int height = 0;
    int width = 0;
    std::vector<double> data;  // [3][height][width]

    static Frame zeros(int height, int width);
    static Frame filled(int height, int width, double value);
    static Frame from_tensor(const Tensor& t, int index = 0);

    double& at(int c, int y, int x) { return data[(static_cast<std::size_t>(c) * height + y) * width + x]; }
    double at(int c, int y, int x) const { return data[(static_cast<std::size_t>(c) * height + y) * width + x]; }
    std::size_t plane() const { return static_cast<std::size_t>(height) * width; }
    bool same_size(const Frame& o) const { return height == o.height && width == o.width; }

    /// [1,3,H,W]
    Tensor to_tensor() const;
    Frame crop(int top, int left, int h, int w) const;
};

/// Stacks equally sized frames into [N,3,H,W].
Tensor stack_frames(const std::vector<const Frame*>& frames);

double frame_mse(const Frame& a, const Frame& b);

class FrameIoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// 8-bit binary PPM (P6, maxval 255). Values are normalised to [0,1] on read;
/// on write they are clamped and quantised with round-half-up.
Frame read_frame(const std::filesystem::path& path);
void write_frame(const Frame& frame, const std::filesystem::path& path);
std::uint8_t quantize_unit(double value);

struct FrameTriplet {
    Frame first;
    Frame middle;
    Frame last;
    std::string source;
    std::array<int, 3> indices{0, 1, 2};
};

using Dataset = std::vector<FrameTriplet>;

struct TripletDecision {
    std::array<std::string, 3> files;
    bool kept = false;
    double mse_first_middle = 0.0;
    double mse_middle_last = 0.0;
    std::string reason;
};

struct ExtractionResult {
    Dataset triplets;
    std::vector<TripletDecision> decisions;
    std::vector<std::string> warnings;
};

inline constexpr double kDefaultDedupThreshold = 1e-4;

/// Sliding window over the lexicographically sorted frames of a directory.
/// A triplet is dropped when either consecutive pair has MSE below the
/// threshold; unreadable frames or mismatched sizes skip the triplet with a warning.
ExtractionResult extract_triplets(const std::filesystem::path& frame_dir, double dedup_threshold = kDefaultDedupThreshold,
                                  int stride = 1);
/// Same rule applied to frames already in memory (names used as identifiers).
ExtractionResult extract_triplets(const std::vector<Frame>& frames, const std::vector<std::string>& names,
                                  double dedup_threshold = kDefaultDedupThreshold, int stride = 1);

enum class TextureKind { blobs, ramps, checker, mixed };
const char* texture_name(TextureKind kind);
TextureKind parse_texture(const std::string& name);

struct SyntheticSpec {
    int width = 64;
    int height = 64;
    TextureKind texture = TextureKind::blobs;
    double max_motion = 4.0;  // pixels, magnitude of the I0 -> I1 translation
    int count = 100;
    std::uint64_t seed = 1;
};

struct SyntheticDataset {
    Dataset triplets;
    std::vector<std::array<double, 2>> motion;  // (dx, dy) pixels from I0 to I1

    /// Ground-truth synthesis flow of triplet i, [2,H,W] in image-extent units:
    /// half the motion divided by the frame width/height.
    Tensor flow_field(std::size_t i) const;
};

/// Renders a texture at offsets p, p + d/2 and p + d with bilinear sampling.
SyntheticDataset generate_synthetic(const SyntheticSpec& spec);
/// Bilinear sample of a texture canvas translated by (dx, dy); exposed for oracles.
Frame render_translated(const Frame& canvas, int height, int width, int margin, double dx, double dy);

// Dataset directory layout: triplet_%06d/{a,b,gt}.ppm plus manifest.json.
void save_dataset(const std::filesystem::path& dir, const Dataset& dataset,
                  const std::vector<TripletDecision>& decisions = {});
void save_synthetic(const std::filesystem::path& dir, const SyntheticDataset& data);
Dataset load_dataset(const std::filesystem::path& dir);

// Flow file: "VFIFLOW\n", u32 height, u32 width, u32 channels (2), then per
// pixel little-endian float32 (u, v) pairs in row-major order.
void save_flow(const std::filesystem::path& path, const Tensor& flow);
Tensor load_flow(const std::filesystem::path& path);

struct Batch {
    Tensor first, middle, last;  // [N,3,h,w]
    std::vector<std::size_t> indices;
};

struct CropPlan {
    std::size_t triplet;
    int top;
    int left;
};

/// Deterministic epoch of crop batches: order and crop positions depend only
/// on (seed, epoch). crop <= 0 means full frames. The stream refers to
/// `dataset`, which must outlive it.
class BatchStream {
public:
    BatchStream(const Dataset& dataset, int crop, int batch_size, std::uint64_t seed, int epoch);

    std::size_t size() const { return plan_.size(); }
    const std::vector<std::vector<CropPlan>>& plan() const { return plan_; }
    Batch batch(std::size_t i) const;

private:
    const Dataset* dataset_;
    int crop_h_ = 0, crop_w_ = 0;
    std::vector<std::vector<CropPlan>> plan_;
};

BatchStream make_batches(const Dataset& dataset, int crop, int batch_size, std::uint64_t seed, int epoch);

}  // namespace vfi
