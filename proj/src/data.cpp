#include "vfi/data.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <numbers>
#include <random>

namespace fs = std::filesystem;

namespace vfi {

Frame Frame::zeros(int height, int width) { return filled(height, width, 0.0); }

Frame Frame::filled(int height, int width, double value)
{
    if (height <= 0 || width <= 0) throw ShapeError("frame dimensions must be positive");
    Frame f;
    f.height = height;
    f.width = width;
    f.data.assign(3 * f.plane(), value);
    return f;
}

Frame Frame::from_tensor(const Tensor& t, int index)
{
    if (t.rank() != 4 || t.dim(1) != 3) throw ShapeError("frame tensor must be [N,3,H,W], got " + shape_str(t.shape()));
    if (index < 0 || index >= t.dim(0)) throw ShapeError("frame index out of range");
    Frame f;
    f.height = t.dim(2);
    f.width = t.dim(3);
    const auto v = t.values();
    const std::size_t len = 3 * f.plane();
    f.data.assign(v.begin() + index * len, v.begin() + (index + 1) * len);
    return f;
}

Tensor Frame::to_tensor() const { return Tensor::from({1, 3, height, width}, data); }

Frame Frame::crop(int top, int left, int h, int w) const
{
    if (top < 0 || left < 0 || h <= 0 || w <= 0 || top + h > height || left + w > width)
        throw ShapeError("crop window outside frame");
    Frame out = zeros(h, w);
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) out.at(c, y, x) = at(c, top + y, left + x);
    return out;
}

Tensor stack_frames(const std::vector<const Frame*>& frames)
{
    if (frames.empty()) throw ShapeError("stack_frames: no frames");
    const int h = frames[0]->height, w = frames[0]->width;
    std::vector<double> values;
    values.reserve(frames.size() * 3 * frames[0]->plane());
    for (const Frame* f : frames) {
        if (f->height != h || f->width != w) throw ShapeError("stack_frames: frames differ in size");
        values.insert(values.end(), f->data.begin(), f->data.end());
    }
    return Tensor::from({static_cast<int>(frames.size()), 3, h, w}, std::move(values));
}

double frame_mse(const Frame& a, const Frame& b)
{
    if (!a.same_size(b)) throw ShapeError("frame_mse: size mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) s += (a.data[i] - b.data[i]) * (a.data[i] - b.data[i]);
    return s / static_cast<double>(a.data.size());
}

std::uint8_t quantize_unit(double value)
{
    const double v = std::clamp(std::isnan(value) ? 0.0 : value, 0.0, 1.0);
    return static_cast<std::uint8_t>(std::floor(v * 255.0 + 0.5));
}

namespace {

// Reads the next header token of a PNM file, skipping whitespace and comments.
std::string pnm_token(std::istream& is)
{
    std::string tok;
    int ch;
    while ((ch = is.get()) != EOF) {
        if (ch == '#') {
            while ((ch = is.get()) != EOF && ch != '\n') {
            }
            continue;
        }
        if (std::isspace(ch)) {
            if (!tok.empty()) break;
            continue;
        }
        tok.push_back(static_cast<char>(ch));
    }
    return tok;
}

}  // namespace

Frame read_frame(const fs::path& path)
{
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FrameIoError("cannot open frame '" + path.string() + "'");
    if (pnm_token(is) != "P6") throw FrameIoError("unsupported format (expected binary PPM P6): " + path.string());
    int w = 0, h = 0, maxval = 0;
    try {
        w = std::stoi(pnm_token(is));
        h = std::stoi(pnm_token(is));
        maxval = std::stoi(pnm_token(is));
    } catch (const std::exception&) {
        throw FrameIoError("malformed PPM header: " + path.string());
    }
    if (w <= 0 || h <= 0) throw FrameIoError("invalid PPM dimensions: " + path.string());
    if (maxval != 255) throw FrameIoError("only 8-bit PPM is supported: " + path.string());
    std::vector<unsigned char> bytes(static_cast<std::size_t>(w) * h * 3);
    is.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (is.gcount() != static_cast<std::streamsize>(bytes.size())) throw FrameIoError("truncated PPM: " + path.string());
    Frame f = Frame::zeros(h, w);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c) f.at(c, y, x) = bytes[(static_cast<std::size_t>(y) * w + x) * 3 + c] / 255.0;
    return f;
}

void write_frame(const Frame& frame, const fs::path& path)
{
    std::ofstream os(path, std::ios::binary);
    if (!os) throw FrameIoError("cannot write frame '" + path.string() + "'");
    os << "P6\n" << frame.width << ' ' << frame.height << "\n255\n";
    std::vector<char> bytes(frame.plane() * 3);
    for (int y = 0; y < frame.height; ++y)
        for (int x = 0; x < frame.width; ++x)
            for (int c = 0; c < 3; ++c)
                bytes[(static_cast<std::size_t>(y) * frame.width + x) * 3 + c] =
                    static_cast<char>(quantize_unit(frame.at(c, y, x)));
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw FrameIoError("write failed: " + path.string());
}

// ---------------------------------------------------------------------------
// Triplet extraction

namespace {

ExtractionResult extract_impl(const std::vector<const Frame*>& frames, const std::vector<std::string>& names,
                              const std::vector<std::string>& load_errors, double threshold, int stride,
                              const std::string& source)
{
    if (stride < 1) throw std::invalid_argument("triplet stride must be >= 1");
    ExtractionResult result;
    for (std::size_t i = 0; i + 2 < frames.size(); i += static_cast<std::size_t>(stride)) {
        TripletDecision d;
        d.files = {names[i], names[i + 1], names[i + 2]};
        bool readable = true;
        for (std::size_t k = i; k < i + 3; ++k)
            if (!frames[k]) {
                readable = false;
                d.reason = "unreadable: " + load_errors[k];
            }
        if (readable && !(frames[i]->same_size(*frames[i + 1]) && frames[i + 1]->same_size(*frames[i + 2]))) {
            readable = false;
            d.reason = "frame sizes differ";
        }
        if (!readable) {
            result.warnings.push_back("skipping triplet starting at " + names[i] + ": " + d.reason);
            result.decisions.push_back(d);
            continue;
        }
        d.mse_first_middle = frame_mse(*frames[i], *frames[i + 1]);
        d.mse_middle_last = frame_mse(*frames[i + 1], *frames[i + 2]);
        if (d.mse_first_middle < threshold || d.mse_middle_last < threshold) {
            d.reason = "near-duplicate";
        } else {
            d.kept = true;
            d.reason = "kept";
            result.triplets.push_back({*frames[i], *frames[i + 1], *frames[i + 2], source,
                                       {static_cast<int>(i), static_cast<int>(i + 1), static_cast<int>(i + 2)}});
        }
        result.decisions.push_back(d);
    }
    return result;
}

bool is_frame_file(const fs::path& p)
{
    std::string ext = p.extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    return ext == ".ppm" || ext == ".pnm";
}

}  // namespace

ExtractionResult extract_triplets(const fs::path& frame_dir, double threshold, int stride)
{
    if (!fs::is_directory(frame_dir)) throw FrameIoError("not a directory: " + frame_dir.string());
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(frame_dir))
        if (entry.is_regular_file() && is_frame_file(entry.path())) files.push_back(entry.path());
    std::sort(files.begin(), files.end());

    std::vector<Frame> loaded(files.size());
    std::vector<const Frame*> frames(files.size(), nullptr);
    std::vector<std::string> names, errors(files.size());
    std::vector<std::string> warnings;
    for (std::size_t i = 0; i < files.size(); ++i) {
        names.push_back(files[i].filename().string());
        try {
            loaded[i] = read_frame(files[i]);
            frames[i] = &loaded[i];
        } catch (const FrameIoError& e) {
            errors[i] = e.what();
            warnings.push_back(std::string("cannot read ") + names[i] + ": " + e.what());
        }
    }
    ExtractionResult r = extract_impl(frames, names, errors, threshold, stride, frame_dir.filename().string());
    r.warnings.insert(r.warnings.begin(), warnings.begin(), warnings.end());
    return r;
}

ExtractionResult extract_triplets(const std::vector<Frame>& frames, const std::vector<std::string>& names,
                                  double threshold, int stride)
{
    if (frames.size() != names.size()) throw std::invalid_argument("frames and names differ in length");
    std::vector<const Frame*> ptrs;
    for (const Frame& f : frames) ptrs.push_back(&f);
    return extract_impl(ptrs, names, std::vector<std::string>(frames.size()), threshold, stride, "memory");
}

// ---------------------------------------------------------------------------
// Synthetic motion

const char* texture_name(TextureKind kind)
{
    switch (kind) {
    case TextureKind::blobs: return "blobs";
    case TextureKind::ramps: return "ramps";
    case TextureKind::checker: return "checker";
    case TextureKind::mixed: return "mixed";
    }
    return "?";
}

TextureKind parse_texture(const std::string& name)
{
    for (TextureKind k : {TextureKind::blobs, TextureKind::ramps, TextureKind::checker, TextureKind::mixed})
        if (name == texture_name(k)) return k;
    throw std::invalid_argument("unknown texture '" + name + "'");
}

namespace {

Frame texture_blobs(int h, int w, std::mt19937_64& rng)
{
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    Frame f = Frame::zeros(h, w);
    std::array<double, 3> base{};
    for (double& b : base) b = 0.3 + 0.4 * unit(rng);
    for (int c = 0; c < 3; ++c)
        for (std::size_t i = 0; i < f.plane(); ++i) f.data[c * f.plane() + i] = base[c];
    // Antialiased disks with a one-pixel soft rim, painted over each other.
    const int count = 8 + (h * w) / 80;
    for (int b = 0; b < count; ++b) {
        const double cx = unit(rng) * w, cy = unit(rng) * h;
        const double radius = 1.5 + 5.0 * unit(rng);
        std::array<double, 3> color{};
        for (double& c : color) c = unit(rng);
        const int reach = static_cast<int>(std::ceil(radius + 1.0));
        for (int y = std::max(0, static_cast<int>(cy) - reach); y < std::min(h, static_cast<int>(cy) + reach + 1); ++y)
            for (int x = std::max(0, static_cast<int>(cx) - reach); x < std::min(w, static_cast<int>(cx) + reach + 1); ++x) {
                const double r = std::hypot(x - cx, y - cy);
                const double cover = std::clamp(radius - r + 0.5, 0.0, 1.0);
                for (int c = 0; c < 3; ++c) f.at(c, y, x) = (1.0 - cover) * f.at(c, y, x) + cover * color[c];
            }
    }
    return f;
}

Frame texture_ramps(int h, int w, std::mt19937_64& rng)
{
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    Frame f = Frame::zeros(h, w);
    for (int c = 0; c < 3; ++c) {
        const double angle = 2.0 * std::numbers::pi * unit(rng);
        const double fx = 0.15 + 0.35 * unit(rng), fy = 0.15 + 0.35 * unit(rng);
        const double px = 2.0 * std::numbers::pi * unit(rng), py = 2.0 * std::numbers::pi * unit(rng);
        const double scale = 0.4 / std::max(h, w);
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                const double ramp = (std::cos(angle) * x + std::sin(angle) * y) * scale;
                f.at(c, y, x) = std::clamp(0.5 + ramp + 0.15 * std::sin(fx * x + px) * std::sin(fy * y + py), 0.0, 1.0);
            }
    }
    return f;
}

Frame texture_checker(int h, int w, std::mt19937_64& rng)
{
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::uniform_int_distribution<int> cell_dist(4, 10);
    const int cell = cell_dist(rng);
    std::array<double, 3> a{}, b{};
    for (int c = 0; c < 3; ++c) {
        a[c] = 0.1 + 0.35 * unit(rng);
        b[c] = 0.55 + 0.35 * unit(rng);
    }
    Frame f = Frame::zeros(h, w);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const bool odd = ((x / cell) + (y / cell)) % 2 != 0;
            for (int c = 0; c < 3; ++c) f.at(c, y, x) = odd ? a[c] : b[c];
        }
    return f;
}

}  // namespace

Frame render_translated(const Frame& canvas, int height, int width, int margin, double dx, double dy)
{
    Frame out = Frame::zeros(height, width);
    for (int y = 0; y < height; ++y) {
        const double sy = y + margin - dy;
        const int y0 = std::clamp(static_cast<int>(std::floor(sy)), 0, canvas.height - 2);
        const double fy = sy - y0;
        for (int x = 0; x < width; ++x) {
            const double sx = x + margin - dx;
            const int x0 = std::clamp(static_cast<int>(std::floor(sx)), 0, canvas.width - 2);
            const double fx = sx - x0;
            for (int c = 0; c < 3; ++c) {
                const double top = (1.0 - fx) * canvas.at(c, y0, x0) + fx * canvas.at(c, y0, x0 + 1);
                const double bot = (1.0 - fx) * canvas.at(c, y0 + 1, x0) + fx * canvas.at(c, y0 + 1, x0 + 1);
                out.at(c, y, x) = (1.0 - fy) * top + fy * bot;
            }
        }
    }
    return out;
}

SyntheticDataset generate_synthetic(const SyntheticSpec& spec)
{
    if (spec.width < 4 || spec.height < 4) throw std::invalid_argument("synthetic canvas too small");
    if (spec.max_motion < 0.0 || spec.max_motion > std::min(spec.width, spec.height) / 4.0)
        throw std::invalid_argument("motion magnitude " + std::to_string(spec.max_motion) +
                                    " too large for a " + std::to_string(spec.width) + "x" +
                                    std::to_string(spec.height) + " canvas");
    if (spec.count < 0) throw std::invalid_argument("negative synthetic count");
    const int margin = static_cast<int>(std::ceil(spec.max_motion)) + 2;
    const int ch = spec.height + 2 * margin, cw = spec.width + 2 * margin;

    std::mt19937_64 rng(spec.seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    SyntheticDataset out;
    for (int i = 0; i < spec.count; ++i) {
        TextureKind kind = spec.texture;
        if (kind == TextureKind::mixed) kind = static_cast<TextureKind>(i % 3);
        Frame canvas = kind == TextureKind::blobs  ? texture_blobs(ch, cw, rng)
                       : kind == TextureKind::ramps ? texture_ramps(ch, cw, rng)
                                                    : texture_checker(ch, cw, rng);
        const double angle = 2.0 * std::numbers::pi * unit(rng);
        const double magnitude = spec.max_motion * unit(rng);
        const double dx = magnitude * std::cos(angle), dy = magnitude * std::sin(angle);
        FrameTriplet t;
        t.first = render_translated(canvas, spec.height, spec.width, margin, 0.0, 0.0);
        t.middle = render_translated(canvas, spec.height, spec.width, margin, 0.5 * dx, 0.5 * dy);
        t.last = render_translated(canvas, spec.height, spec.width, margin, dx, dy);
        t.source = std::string("synthetic-") + texture_name(kind) + "-" + std::to_string(i);
        t.indices = {0, 1, 2};
        out.triplets.push_back(std::move(t));
        out.motion.push_back({dx, dy});
    }
    return out;
}

Tensor SyntheticDataset::flow_field(std::size_t i) const
{
    const Frame& f = triplets.at(i).first;
    std::vector<double> v(2 * f.plane());
    const double u = 0.5 * motion[i][0] / f.width, w = 0.5 * motion[i][1] / f.height;
    std::fill(v.begin(), v.begin() + f.plane(), u);
    std::fill(v.begin() + f.plane(), v.end(), w);
    return Tensor::from({2, f.height, f.width}, std::move(v));
}

// ---------------------------------------------------------------------------
// Dataset directories

namespace {

std::string triplet_dir_name(std::size_t i)
{
    char buf[32];
    std::snprintf(buf, sizeof buf, "triplet_%06zu", i);
    return buf;
}

nlohmann::json decisions_json(const std::vector<TripletDecision>& decisions)
{
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& d : decisions)
        arr.push_back({{"files", d.files},
                       {"kept", d.kept},
                       {"mse_first_middle", d.mse_first_middle},
                       {"mse_middle_last", d.mse_middle_last},
                       {"reason", d.reason}});
    return arr;
}

nlohmann::json write_triplets(const fs::path& dir, const Dataset& dataset)
{
    fs::create_directories(dir);
    nlohmann::json arr = nlohmann::json::array();
    for (std::size_t i = 0; i < dataset.size(); ++i) {
        const fs::path sub = dir / triplet_dir_name(i);
        fs::create_directories(sub);
        write_frame(dataset[i].first, sub / "a.ppm");
        write_frame(dataset[i].last, sub / "b.ppm");
        write_frame(dataset[i].middle, sub / "gt.ppm");
        arr.push_back({{"dir", triplet_dir_name(i)}, {"source", dataset[i].source}, {"indices", dataset[i].indices}});
    }
    return arr;
}

void write_manifest(const fs::path& dir, const nlohmann::json& manifest)
{
    std::ofstream os(dir / "manifest.json");
    if (!os) throw FrameIoError("cannot write manifest in " + dir.string());
    os << manifest.dump(2) << '\n';
}

}  // namespace

void save_dataset(const fs::path& dir, const Dataset& dataset, const std::vector<TripletDecision>& decisions)
{
    nlohmann::json manifest;
    manifest["version"] = 1;
    manifest["triplets"] = write_triplets(dir, dataset);
    manifest["decisions"] = decisions_json(decisions);
    write_manifest(dir, manifest);
}

void save_synthetic(const fs::path& dir, const SyntheticDataset& data)
{
    nlohmann::json manifest;
    manifest["version"] = 1;
    manifest["triplets"] = write_triplets(dir, data.triplets);
    for (std::size_t i = 0; i < data.triplets.size(); ++i) {
        save_flow(dir / triplet_dir_name(i) / "flow.bin", data.flow_field(i));
        manifest["triplets"][i]["motion_px"] = data.motion[i];
    }
    manifest["decisions"] = nlohmann::json::array();
    write_manifest(dir, manifest);
}

Dataset load_dataset(const fs::path& dir)
{
    if (!fs::is_directory(dir)) throw FrameIoError("dataset directory not found: " + dir.string());
    std::vector<std::string> subdirs;
    std::vector<std::string> sources;
    std::vector<std::array<int, 3>> indices;
    const fs::path manifest_path = dir / "manifest.json";
    if (fs::exists(manifest_path)) {
        std::ifstream is(manifest_path);
        nlohmann::json m;
        try {
            m = nlohmann::json::parse(is);
        } catch (const nlohmann::json::exception& e) {
            throw FrameIoError("malformed manifest " + manifest_path.string() + ": " + e.what());
        }
        for (const auto& t : m.at("triplets")) {
            subdirs.push_back(t.at("dir").get<std::string>());
            sources.push_back(t.value("source", std::string()));
            indices.push_back(t.value("indices", std::array<int, 3>{0, 1, 2}));
        }
    } else {
        for (const auto& entry : fs::directory_iterator(dir))
            if (entry.is_directory() && entry.path().filename().string().rfind("triplet_", 0) == 0)
                subdirs.push_back(entry.path().filename().string());
        std::sort(subdirs.begin(), subdirs.end());
        sources.assign(subdirs.size(), dir.filename().string());
        indices.assign(subdirs.size(), {0, 1, 2});
    }
    Dataset out;
    for (std::size_t i = 0; i < subdirs.size(); ++i) {
        const fs::path sub = dir / subdirs[i];
        FrameTriplet t;
        t.first = read_frame(sub / "a.ppm");
        t.last = read_frame(sub / "b.ppm");
        t.middle = read_frame(sub / "gt.ppm");
        if (!t.first.same_size(t.last) || !t.first.same_size(t.middle))
            throw FrameIoError("frames of " + sub.string() + " differ in size");
        t.source = sources[i];
        t.indices = indices[i];
        out.push_back(std::move(t));
    }
    return out;
}

namespace {

constexpr char kFlowMagic[8] = {'V', 'F', 'I', 'F', 'L', 'O', 'W', '\n'};

void put_le(std::ostream& os, std::uint32_t v)
{
    for (int i = 0; i < 4; ++i) os.put(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint32_t get_le(const std::vector<char>& b, std::size_t pos)
{
    if (pos + 4 > b.size()) throw FrameIoError("truncated flow file");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(b[pos + i])) << (8 * i);
    return v;
}

}  // namespace

void save_flow(const fs::path& path, const Tensor& flow)
{
    if (flow.rank() != 3 || flow.dim(0) != 2) throw ShapeError("flow must be [2,H,W], got " + shape_str(flow.shape()));
    const int h = flow.dim(1), w = flow.dim(2);
    std::ofstream os(path, std::ios::binary);
    if (!os) throw FrameIoError("cannot write flow '" + path.string() + "'");
    os.write(kFlowMagic, sizeof kFlowMagic);
    put_le(os, static_cast<std::uint32_t>(h));
    put_le(os, static_cast<std::uint32_t>(w));
    put_le(os, 2);
    const auto v = flow.values();
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    for (std::size_t p = 0; p < plane; ++p)
        for (int c = 0; c < 2; ++c) put_le(os, std::bit_cast<std::uint32_t>(static_cast<float>(v[c * plane + p])));
}

Tensor load_flow(const fs::path& path)
{
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FrameIoError("cannot open flow '" + path.string() + "'");
    const std::vector<char> b(std::istreambuf_iterator<char>(is), {});
    if (b.size() < 20 || !std::equal(kFlowMagic, kFlowMagic + 8, b.begin())) throw FrameIoError("not a flow file");
    const int h = static_cast<int>(get_le(b, 8)), w = static_cast<int>(get_le(b, 12));
    if (get_le(b, 16) != 2) throw FrameIoError("flow file must have two channels");
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    if (b.size() != 20 + plane * 8) throw FrameIoError("flow file size mismatch");
    std::vector<double> v(2 * plane);
    for (std::size_t p = 0; p < plane; ++p)
        for (int c = 0; c < 2; ++c) v[c * plane + p] = std::bit_cast<float>(get_le(b, 20 + (p * 2 + c) * 4));
    return Tensor::from({2, h, w}, std::move(v));
}

// ---------------------------------------------------------------------------
// Batching

BatchStream::BatchStream(const Dataset& dataset, int crop, int batch_size, std::uint64_t seed, int epoch)
    : dataset_(&dataset)
{
    if (dataset.empty()) throw std::invalid_argument("cannot batch an empty dataset");
    if (batch_size < 1) throw std::invalid_argument("batch size must be positive");
    const Frame& ref = dataset.front().first;
    crop_h_ = crop > 0 ? crop : ref.height;
    crop_w_ = crop > 0 ? crop : ref.width;
    for (const auto& t : dataset) {
        if (crop_h_ > t.first.height || crop_w_ > t.first.width)
            throw ShapeError("crop " + std::to_string(crop_h_) + "x" + std::to_string(crop_w_) + " larger than frame " +
                             std::to_string(t.first.height) + "x" + std::to_string(t.first.width));
        if (crop <= 0 && !t.first.same_size(ref)) throw ShapeError("full-frame batches need equally sized frames");
    }

    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(epoch), 0x62617463u};
    std::mt19937_64 rng(seq);
    std::vector<std::size_t> order(dataset.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::shuffle(order.begin(), order.end(), rng);

    std::vector<CropPlan> current;
    for (std::size_t idx : order) {
        const Frame& f = dataset[idx].first;
        std::uniform_int_distribution<int> top(0, f.height - crop_h_), left(0, f.width - crop_w_);
        const int t = top(rng);
        const int l = left(rng);
        current.push_back({idx, t, l});
        if (static_cast<int>(current.size()) == batch_size) {
            plan_.push_back(std::move(current));
            current.clear();
        }
    }
    if (!current.empty()) plan_.push_back(std::move(current));
}

Batch BatchStream::batch(std::size_t i) const
{
    const auto& entries = plan_.at(i);
    std::vector<Frame> firsts, middles, lasts;
    Batch b;
    for (const CropPlan& p : entries) {
        const FrameTriplet& t = (*dataset_)[p.triplet];
        firsts.push_back(t.first.crop(p.top, p.left, crop_h_, crop_w_));
        middles.push_back(t.middle.crop(p.top, p.left, crop_h_, crop_w_));
        lasts.push_back(t.last.crop(p.top, p.left, crop_h_, crop_w_));
        b.indices.push_back(p.triplet);
    }
    auto stack = [](const std::vector<Frame>& v) {
        std::vector<const Frame*> ptrs;
        for (const Frame& f : v) ptrs.push_back(&f);
        return stack_frames(ptrs);
    };
    b.first = stack(firsts);
    b.middle = stack(middles);
    b.last = stack(lasts);
    return b;
}

BatchStream make_batches(const Dataset& dataset, int crop, int batch_size, std::uint64_t seed, int epoch)
{
    return BatchStream(dataset, crop, batch_size, seed, epoch);
}

}  // namespace vfi
