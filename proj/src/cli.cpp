#include "vfi/cli.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "vfi/data.hpp"
#include "vfi/gradcheck.hpp"
#include "vfi/metrics.hpp"
#include "vfi/training.hpp"

namespace vfi {

namespace fs = std::filesystem;

namespace {

// Raised for bad user input discovered after flag parsing (config keys, values).
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

std::string read_text(const fs::path& path)
{
    std::ifstream is(path);
    if (!is) throw UsageError("cannot read " + path.string());
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

void write_text(const fs::path& path, const std::string& text)
{
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    os << text;
}

TrainConfig build_config(const std::string& config_path, const std::vector<std::string>& overrides)
{
    TrainConfig cfg;
    try {
        if (!config_path.empty()) apply_config_text(cfg, read_text(config_path));
        for (const std::string& kv : overrides) {
            const auto eq = kv.find('=');
            if (eq == std::string::npos) throw std::invalid_argument("--set expects key=value, got '" + kv + "'");
            apply_config_value(cfg, kv.substr(0, eq), kv.substr(eq + 1));
        }
        cfg.validate();
    } catch (const std::invalid_argument& e) {
        throw UsageError(std::string("invalid configuration: ") + e.what());
    }
    return cfg;
}

Dataset require_dataset(const std::string& dir, const char* what)
{
    if (!fs::is_directory(dir)) throw UsageError(std::string(what) + " directory not found: " + dir);
    Dataset d = load_dataset(dir);
    if (d.empty()) throw std::runtime_error(std::string(what) + " dataset is empty: " + dir);
    return d;
}

struct TrainArgs {
    std::string config, data, val, out;
    bool resume = false;
    std::int64_t seed = -1;
    std::vector<std::string> set;
};

int cmd_train(const TrainArgs& a, std::ostream& out, std::ostream& err)
{
    TrainConfig cfg = build_config(a.config, a.set);
    if (a.seed >= 0) cfg.seed = static_cast<std::uint64_t>(a.seed);
    const Dataset train_set = require_dataset(a.data, "training");
    const Dataset val_set = require_dataset(a.val, "validation");
    const fs::path dir(a.out);
    fs::create_directories(dir);
    if (cfg.dump_dir.empty()) cfg.dump_dir = (dir / "divergence").string();

    Trainer trainer(cfg, train_set, val_set);
    const fs::path state_path = dir / "state.vfi";
    const bool resuming = a.resume && fs::exists(state_path);
    if (resuming) {
        trainer.load_state(state_path.string());
        err << "resuming at step " << trainer.step() << '\n';
    }

    std::ofstream steps(dir / "steps.jsonl", resuming ? std::ios::app : std::ios::trunc);
    std::ofstream history(dir / "history.jsonl", std::ios::trunc);
    for (const EpochRecord& e : trainer.history().epochs) history << e.to_json() << '\n';
    history.flush();
    write_text(dir / "config.txt", trainer.config().to_text());

    trainer.on_step([&](const StepRecord& s) { steps << s.to_json() << '\n'; });
    trainer.on_epoch([&](const EpochRecord& e) {
        history << e.to_json() << '\n';
        history.flush();
        steps.flush();
        trainer.save_state(state_path.string());
        err << "epoch " << e.epoch << " step " << e.step << " loss " << e.train_total << " val_psnr " << e.val_psnr
            << (e.improved ? " *" : "") << '\n';
    });

    const double baseline = frame_average_psnr(val_set);
    const TrainHistory h = trainer.run();
    trainer.model().save((dir / "checkpoint.vfi").string());

    const ComplexityReport report = count_flops(describe_model(cfg.model), 360, 640);
    write_text(dir / "complexity.json", report.to_json() + "\n");
    write_text(dir / "complexity.txt", report.to_table());

    nlohmann::ordered_json summary;
    summary["stop_reason"] = h.stop_reason;
    summary["best_epoch"] = h.best_epoch;
    summary["best_val_psnr"] = h.best_psnr;
    summary["frame_average_psnr"] = baseline;
    summary["steps"] = trainer.step();
    write_text(dir / "summary.json", summary.dump(2) + "\n");
    out << "trained " << trainer.step() << " steps (" << h.stop_reason << "), best epoch " << h.best_epoch
        << " val PSNR " << h.best_psnr << " dB, frame average " << baseline << " dB\n";
    return kExitOk;
}

Frame features_visual(const Tensor& features)
{
    Frame f = Frame::from_tensor(features);
    for (double& v : f.data) v = 0.5 * (v + 1.0);
    return f;
}

struct InterpolateArgs {
    std::string checkpoint, a, b, out, dump_flow, dump_scales, config;
    std::vector<std::string> set;
};

int cmd_interpolate(const InterpolateArgs& args, std::ostream& out)
{
    const Archive archive = load_archive(args.checkpoint);
    const ModelConfig stored = model_config_from_archive(archive);
    if (!args.config.empty() || !args.set.empty()) {
        const ModelConfig expected = build_config(args.config, args.set).model;
        if (!(expected == stored))
            throw CheckpointError("checkpoint architecture does not match the configuration:\n" +
                                  config_diff(expected, stored));
    }
    InterpolationModel model(stored);
    model.load_weights(archive);

    const Frame a = read_frame(args.a), b = read_frame(args.b);
    if (!a.same_size(b)) throw UsageError("input frames differ in size");
    InterpolationOutput result;
    {
        NoGradGuard guard;
        result = model.forward(a.to_tensor(), b.to_tensor());
    }
    write_frame(Frame::from_tensor(clamp(result.frame, 0.0, 1.0)), args.out);
    if (!args.dump_flow.empty()) {
        const fs::path stem(args.dump_flow);
        if (stem.has_parent_path()) fs::create_directories(stem.parent_path());
        Tensor flow = slice_channels(result.final_features, 0, 2);
        save_flow(stem.string() + ".flo", Tensor::from({2, flow.dim(2), flow.dim(3)},
                                                        std::vector<double>(flow.values().begin(), flow.values().end())));
        write_frame(features_visual(result.final_features), stem.string() + ".ppm");
    }
    if (!args.dump_scales.empty()) {
        fs::create_directories(args.dump_scales);
        for (std::size_t j = 0; j < result.scale_frames.size(); ++j)
            write_frame(Frame::from_tensor(clamp(result.scale_frames[j], 0.0, 1.0)),
                        fs::path(args.dump_scales) / ("scale_x" + std::to_string(1 << j) + ".ppm"));
        for (std::size_t j = 0; j < result.level_features.size(); ++j)
            write_frame(features_visual(result.level_features[j]),
                        fs::path(args.dump_scales) / ("features_x" + std::to_string(2 << j) + ".ppm"));
        if (result.refined.node())
            write_frame(Frame::from_tensor(clamp(result.refined, 0.0, 1.0)), fs::path(args.dump_scales) / "refined.ppm");
    }
    out << "wrote " << args.out << " (" << a.width << "x" << a.height << ")\n";
    return kExitOk;
}

int cmd_eval(const std::string& checkpoint, const std::string& data, const std::string& report_path, std::ostream& out)
{
    const InterpolationModel model = InterpolationModel::load(checkpoint);
    const Dataset set = require_dataset(data, "evaluation");
    nlohmann::ordered_json report;
    report["checkpoint"] = checkpoint;
    report["count"] = set.size();
    report["triplets"] = nlohmann::json::array();
    double sum_model = 0.0, sum_base = 0.0;
    char line[160];
    std::snprintf(line, sizeof line, "%-8s %-28s %12s %14s\n", "index", "source", "model (dB)", "average (dB)");
    out << line;
    for (std::size_t i = 0; i < set.size(); ++i) {
        const FrameTriplet& t = set[i];
        const double pm = psnr(Frame::from_tensor(model.predict(t.first.to_tensor(), t.last.to_tensor())), t.middle);
        const double pb = psnr(frame_average(t.first, t.last), t.middle);
        sum_model += pm;
        sum_base += pb;
        nlohmann::ordered_json r;
        r["index"] = i;
        r["source"] = t.source;
        r["psnr"] = pm;
        r["frame_average_psnr"] = pb;
        report["triplets"].push_back(r);
        std::snprintf(line, sizeof line, "%-8zu %-28s %12.4f %14.4f\n", i, t.source.c_str(), pm, pb);
        out << line;
    }
    const double n = static_cast<double>(set.size());
    report["mean_psnr"] = sum_model / n;
    report["mean_frame_average_psnr"] = sum_base / n;
    std::snprintf(line, sizeof line, "%-37s %12.4f %14.4f\n", "mean", sum_model / n, sum_base / n);
    out << line;
    if (!report_path.empty()) write_text(report_path, report.dump(2) + "\n");
    return kExitOk;
}

int cmd_flops(const std::string& arch, int width, int height, bool json, std::ostream& out)
{
    ArchitectureSpec spec;
    try {
        spec = describe_named(arch);
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    }
    const ComplexityReport r = count_flops(spec, height, width);
    out << (json ? r.to_json() + "\n" : r.to_table());
    return kExitOk;
}

int cmd_gradcheck(std::uint64_t seed, int seeds, double eps, double tolerance, bool verbose, std::ostream& out)
{
    int failures = 0;
    const GradcheckSuiteResult r = run_gradcheck_suite(seed, seeds, eps, tolerance, [&](const CheckReport& c) {
        if (!c.passed) ++failures;
        if (verbose || !c.passed) {
            char line[200];
            std::snprintf(line, sizeof line, "%-4s %-40s coords %6zu  max rel %.3e  max abs %.3e\n",
                          c.passed ? "ok" : "FAIL", c.name.c_str(), c.coordinates, c.max_rel_error, c.max_abs_error);
            out << line;
        }
    });
    out << r.reports.size() - failures << "/" << r.reports.size() << " checks passed at tolerance " << tolerance
        << " (eps " << eps << ", " << seeds << " seeds)\n";
    return r.all_passed() ? kExitOk : kExitFailure;
}

int cmd_synth(const SyntheticSpec& spec, const std::string& dir, std::ostream& out)
{
    SyntheticDataset data;
    try {
        data = generate_synthetic(spec);
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    }
    save_synthetic(dir, data);
    out << "wrote " << data.triplets.size() << " triplets to " << dir << '\n';
    return kExitOk;
}

int cmd_extract(const std::string& frames, const std::string& dir, double threshold, int stride, std::ostream& out,
                std::ostream& err)
{
    if (!fs::is_directory(frames)) throw UsageError("frame directory not found: " + frames);
    const ExtractionResult r = extract_triplets(frames, threshold, stride);
    for (const std::string& w : r.warnings) err << "warning: " << w << '\n';
    save_dataset(dir, r.triplets, r.decisions);
    out << "kept " << r.triplets.size() << " of " << r.decisions.size() << " candidate triplets\n";
    return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err)
{
    CLI::App app{"Multi-scale frame interpolation"};
    app.require_subcommand(1);
    app.set_help_all_flag("--help-all");

    TrainArgs train;
    auto* train_cmd = app.add_subcommand("train", "Train an interpolation network");
    train_cmd->add_option("--config", train.config, "key=value configuration file")->check(CLI::ExistingFile);
    train_cmd->add_option("--data", train.data, "Training dataset directory")->required();
    train_cmd->add_option("--val", train.val, "Validation dataset directory")->required();
    train_cmd->add_option("--out", train.out, "Output directory")->required();
    train_cmd->add_flag("--resume", train.resume, "Continue from <out>/state.vfi when present");
    train_cmd->add_option("--seed", train.seed, "Seed for initialisation and batching")->check(CLI::NonNegativeNumber);
    train_cmd->add_option("--set", train.set, "Configuration override key=value (repeatable)");

    InterpolateArgs interp;
    auto* interp_cmd = app.add_subcommand("interpolate", "Synthesise the middle frame of two frames");
    interp_cmd->add_option("--checkpoint", interp.checkpoint)->required()->check(CLI::ExistingFile);
    interp_cmd->add_option("--a", interp.a, "First frame")->required()->check(CLI::ExistingFile);
    interp_cmd->add_option("--b", interp.b, "Last frame")->required()->check(CLI::ExistingFile);
    interp_cmd->add_option("--out", interp.out, "Output frame")->required();
    interp_cmd->add_option("--dump-flow", interp.dump_flow, "Path stem for <stem>.flo and <stem>.ppm");
    interp_cmd->add_option("--dump-scales", interp.dump_scales, "Directory for per-scale syntheses");
    interp_cmd->add_option("--config", interp.config, "Expected architecture")->check(CLI::ExistingFile);
    interp_cmd->add_option("--set", interp.set, "Expected architecture override key=value");
    std::int64_t unused_seed = 0;
    interp_cmd->add_option("--seed", unused_seed, "Accepted for uniformity; inference is deterministic");

    std::string eval_ckpt, eval_data, eval_report;
    auto* eval_cmd = app.add_subcommand("eval", "PSNR of a checkpoint on a dataset");
    eval_cmd->add_option("--checkpoint", eval_ckpt)->required()->check(CLI::ExistingFile);
    eval_cmd->add_option("--data", eval_data)->required();
    eval_cmd->add_option("--report", eval_report, "JSON report path");
    eval_cmd->add_option("--seed", unused_seed);

    std::string arch;
    int width = 640, height = 360;
    bool json = false;
    auto* flops_cmd = app.add_subcommand("flops", "Analytic FLOPs and parameter counts");
    flops_cmd->add_option("--arch", arch)->required()->check(CLI::IsMember({"baseline", "ms", "ms-refine"}));
    flops_cmd->add_option("--width", width)->check(CLI::PositiveNumber);
    flops_cmd->add_option("--height", height)->check(CLI::PositiveNumber);
    flops_cmd->add_flag("--json", json);

    std::uint64_t gc_seed = 1;
    int gc_seeds = 10;
    double gc_tol = 1e-4, gc_eps = 1e-4;
    bool gc_verbose = false;
    auto* gc_cmd = app.add_subcommand("gradcheck", "Finite-difference gradient suite");
    gc_cmd->add_option("--seed", gc_seed);
    gc_cmd->add_option("--seeds", gc_seeds, "Random instances per op")->check(CLI::PositiveNumber);
    gc_cmd->add_option("--tolerance", gc_tol)->check(CLI::PositiveNumber);
    gc_cmd->add_option("--eps", gc_eps)->check(CLI::PositiveNumber);
    gc_cmd->add_flag("--verbose", gc_verbose);

    SyntheticSpec synth;
    std::string synth_out, texture = "blobs";
    auto* synth_cmd = app.add_subcommand("synth", "Generate a synthetic translation dataset");
    synth_cmd->add_option("--out", synth_out)->required();
    synth_cmd->add_option("--count", synth.count)->check(CLI::PositiveNumber);
    synth_cmd->add_option("--width", synth.width)->check(CLI::PositiveNumber);
    synth_cmd->add_option("--height", synth.height)->check(CLI::PositiveNumber);
    synth_cmd->add_option("--max-motion", synth.max_motion)->check(CLI::NonNegativeNumber);
    synth_cmd->add_option("--texture", texture)->check(CLI::IsMember({"blobs", "ramps", "checker", "mixed"}));
    synth_cmd->add_option("--seed", synth.seed);

    std::string frames_dir, extract_out;
    double threshold = kDefaultDedupThreshold;
    int stride = 1;
    auto* extract_cmd = app.add_subcommand("extract", "Build triplets from a directory of frames");
    extract_cmd->add_option("--frames", frames_dir)->required();
    extract_cmd->add_option("--out", extract_out)->required();
    extract_cmd->add_option("--threshold", threshold)->check(CLI::NonNegativeNumber);
    extract_cmd->add_option("--stride", stride)->check(CLI::PositiveNumber);

    std::vector<std::string> argv(args.rbegin(), args.rend());
    try {
        app.parse(argv);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return kExitOk;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << '\n';
        err << "run with --help for usage\n";
        return kExitUsage;
    }

    try {
        if (*train_cmd) return cmd_train(train, out, err);
        if (*interp_cmd) return cmd_interpolate(interp, out);
        if (*eval_cmd) return cmd_eval(eval_ckpt, eval_data, eval_report, out);
        if (*flops_cmd) return cmd_flops(arch, width, height, json, out);
        if (*gc_cmd) return cmd_gradcheck(gc_seed, gc_seeds, gc_eps, gc_tol, gc_verbose, out);
        if (*synth_cmd) {
            synth.texture = parse_texture(texture);
            return cmd_synth(synth, synth_out, out);
        }
        if (*extract_cmd) return cmd_extract(frames_dir, extract_out, threshold, stride, out, err);
    } catch (const UsageError& e) {
        err << "error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return kExitFailure;
    }
    return kExitUsage;
}

}  // namespace vfi
