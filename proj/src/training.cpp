#include "vfi/training.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "vfi/metrics.hpp"

namespace vfi {

void adam_step(ParameterStore& store, OptimizerState& state, const AdamConfig& config)
{
    for (const auto& p : store.parameters())
        if (!p.tensor.has_grad()) throw ContractError("parameter '" + p.name + "' has no gradient");
    ++state.step;
    const double t = static_cast<double>(state.step);
    const double correction1 = 1.0 - std::pow(config.beta1, t);
    const double correction2 = 1.0 - std::pow(config.beta2, t);
    for (const auto& p : store.parameters()) {
        Tensor param = p.tensor;
        const auto grad = param.grad();
        auto& m = state.first_moment[p.name];
        auto& v = state.second_moment[p.name];
        if (m.empty()) {
            m.assign(grad.size(), 0.0);
            v.assign(grad.size(), 0.0);
        }
        auto values = param.mutable_values();
        for (std::size_t i = 0; i < values.size(); ++i) {
            m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * grad[i];
            v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * grad[i] * grad[i];
            const double m_hat = m[i] / correction1;
            const double v_hat = v[i] / correction2;
            values[i] -= config.learning_rate * m_hat / (std::sqrt(v_hat) + config.eps);
        }
    }
}

EarlyStopping::EarlyStopping(int patience) : patience_(patience)
{
    if (patience < 1) throw std::invalid_argument("patience must be >= 1");
}

bool EarlyStopping::update(int epoch, double metric)
{
    improved_ = best_epoch_ < 0 || metric > best_;
    if (improved_) {
        best_ = metric;
        best_epoch_ = epoch;
        stale_ = 0;
    } else {
        ++stale_;
    }
    return stale_ >= patience_;
}

void EarlyStopping::restore(int best_epoch, double best, int stale)
{
    best_epoch_ = best_epoch;
    best_ = best;
    stale_ = stale;
    improved_ = false;
}

// ---------------------------------------------------------------------------
// Configuration

void TrainConfig::validate() const
{
    if (patience < 1) throw std::invalid_argument("train.patience must be >= 1");
    if (batch_size < 1) throw std::invalid_argument("train.batch_size must be >= 1");
    if (max_epochs < 1) throw std::invalid_argument("train.max_epochs must be >= 1");
    if (max_steps < 0) throw std::invalid_argument("train.max_steps must be >= 0");
    if (model.levels < 1 || model.width < 1 || model.depth < 2 || model.kernel % 2 == 0)
        throw std::invalid_argument("invalid model architecture");
    if (crop > 0 && crop % model.size_multiple() != 0)
        throw std::invalid_argument("train.crop must be divisible by " + std::to_string(model.size_multiple()));
    if (loss.gan_mode != GanMode::off && crop > 0 && crop % discriminator.reduction() != 0)
        throw std::invalid_argument("train.crop must be divisible by " + std::to_string(discriminator.reduction()) +
                                    " for adversarial training");
    if (perceptual && loss.vgg_weight > 0.0 && crop > 0 && crop % 16 != 0)
        throw std::invalid_argument("train.crop must be divisible by 16 for the perceptual term");
    if (!(adam.learning_rate > 0.0)) throw std::invalid_argument("adam.learning_rate must be positive");
    if (loss.vgg_weight < 0.0 || loss.gan_weight < 0.0) throw std::invalid_argument("loss weights must be >= 0");
    for (double w : loss.scale_weights)
        if (w < 0.0) throw std::invalid_argument("loss.scale_weights must be >= 0");
    if (!loss.scale_weights.empty() && static_cast<int>(loss.scale_weights.size()) != model.levels)
        throw std::invalid_argument("loss.scale_weights needs one weight per pyramid level");
}

namespace {

std::string trim(const std::string& s)
{
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

template <class T>
T parse_number(const std::string& key, const std::string& value)
{
    std::istringstream is(value);
    T out{};
    is >> out;
    if (!is || !is.eof()) throw std::invalid_argument("invalid value '" + value + "' for " + key);
    return out;
}

bool parse_bool(const std::string& key, const std::string& value)
{
    if (value == "1" || value == "true" || value == "yes") return true;
    if (value == "0" || value == "false" || value == "no") return false;
    throw std::invalid_argument("invalid boolean '" + value + "' for " + key);
}

std::string format_double(double v)
{
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

}  // namespace

void apply_config_value(TrainConfig& c, const std::string& key, const std::string& value)
{
    if (key == "model.levels") c.model.levels = parse_number<int>(key, value);
    else if (key == "model.width") c.model.width = parse_number<int>(key, value);
    else if (key == "model.depth") c.model.depth = parse_number<int>(key, value);
    else if (key == "model.kernel") c.model.kernel = parse_number<int>(key, value);
    else if (key == "model.refine") c.model.refine = parse_bool(key, value);
    else if (key == "model.hidden_activation") c.model.hidden_activation = parse_activation(value);
    else if (key == "loss.vgg_weight") c.loss.vgg_weight = parse_number<double>(key, value);
    else if (key == "loss.perceptual") c.perceptual = parse_bool(key, value);
    else if (key == "loss.perceptual_seed") c.perceptual_seed = parse_number<std::uint64_t>(key, value);
    else if (key == "loss.scale_weights") {
        c.loss.scale_weights.clear();
        std::istringstream is(value);
        for (std::string item; std::getline(is, item, ',');)
            if (!trim(item).empty()) c.loss.scale_weights.push_back(parse_number<double>(key, trim(item)));
    }
    else if (key == "loss.gan_mode") c.loss.gan_mode = parse_gan_mode(value);
    else if (key == "loss.gan_weight") c.loss.gan_weight = parse_number<double>(key, value);
    else if (key == "adam.learning_rate" || key == "train.learning_rate")
        c.adam.learning_rate = parse_number<double>(key, value);
    else if (key == "adam.beta1") c.adam.beta1 = parse_number<double>(key, value);
    else if (key == "adam.beta2") c.adam.beta2 = parse_number<double>(key, value);
    else if (key == "adam.eps") c.adam.eps = parse_number<double>(key, value);
    else if (key == "train.batch_size") c.batch_size = parse_number<int>(key, value);
    else if (key == "train.crop") c.crop = parse_number<int>(key, value);
    else if (key == "train.patience") c.patience = parse_number<int>(key, value);
    else if (key == "train.max_epochs") c.max_epochs = parse_number<int>(key, value);
    else if (key == "train.max_steps") c.max_steps = parse_number<std::int64_t>(key, value);
    else if (key == "train.seed") c.seed = parse_number<std::uint64_t>(key, value);
    else if (key == "train.dump_dir") c.dump_dir = value;
    else if (key == "disc.initial_filters") c.discriminator.initial_filters = parse_number<int>(key, value);
    else if (key == "disc.block_count") c.discriminator.block_count = parse_number<int>(key, value);
    else if (key == "disc.leaky_slope") c.discriminator.leaky_slope = parse_number<double>(key, value);
    else throw std::invalid_argument("unknown configuration key '" + key + "'");
}

void apply_config_text(TrainConfig& config, const std::string& text)
{
    std::istringstream is(text);
    int line_no = 0;
    for (std::string line; std::getline(is, line);) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw std::invalid_argument("line " + std::to_string(line_no) + ": expected key=value");
        apply_config_value(config, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
}

std::string TrainConfig::to_text() const
{
    std::ostringstream os;
    os << model.to_text();
    os << "loss.vgg_weight=" << format_double(loss.vgg_weight) << '\n'
       << "loss.perceptual=" << (perceptual ? 1 : 0) << '\n'
       << "loss.perceptual_seed=" << perceptual_seed << '\n'
       << "loss.scale_weights=";
    for (int j = 1; j <= model.levels; ++j) os << (j > 1 ? "," : "") << format_double(loss.scale_weight(j));
    os << '\n'
       << "loss.gan_mode=" << gan_mode_name(loss.gan_mode) << '\n'
       << "loss.gan_weight=" << format_double(loss.gan_weight) << '\n'
       << "adam.learning_rate=" << format_double(adam.learning_rate) << '\n'
       << "adam.beta1=" << format_double(adam.beta1) << '\n'
       << "adam.beta2=" << format_double(adam.beta2) << '\n'
       << "adam.eps=" << format_double(adam.eps) << '\n'
       << "train.batch_size=" << batch_size << '\n'
       << "train.crop=" << crop << '\n'
       << "train.patience=" << patience << '\n'
       << "train.max_epochs=" << max_epochs << '\n'
       << "train.max_steps=" << max_steps << '\n'
       << "train.seed=" << seed << '\n'
       << "disc.initial_filters=" << discriminator.initial_filters << '\n'
       << "disc.block_count=" << discriminator.block_count << '\n'
       << "disc.leaky_slope=" << format_double(discriminator.leaky_slope) << '\n';
    return os.str();
}

std::string StepRecord::to_json() const
{
    nlohmann::ordered_json j;
    j["step"] = step;
    j["epoch"] = epoch;
    for (std::size_t s = 0; s < loss.scale_tau.size(); ++s) j["l_x" + std::to_string(1 << s)] = loss.scale_tau[s];
    j["l_refine"] = loss.refine_tau ? nlohmann::ordered_json(*loss.refine_tau) : nlohmann::ordered_json(nullptr);
    j["l_vgg"] = loss.perceptual;
    j["l_gan_g"] = loss.gan_generator;
    j["l_gan_d"] = loss.gan_discriminator;
    j["total"] = loss.total;
    return j.dump();
}

std::string EpochRecord::to_json() const
{
    nlohmann::ordered_json j;
    j["epoch"] = epoch;
    j["step"] = step;
    j["train_total"] = train_total;
    j["train_scale_tau"] = train_scale_tau;
    j["train_refine"] = train_refine;
    j["train_gan_d"] = train_gan_d;
    j["val_psnr"] = val_psnr;
    j["improved"] = improved;
    return j.dump();
}

namespace {

EpochRecord epoch_from_json(const nlohmann::json& j)
{
    EpochRecord r;
    r.epoch = j.at("epoch");
    r.step = j.at("step");
    r.train_total = j.at("train_total");
    r.train_scale_tau = j.at("train_scale_tau").get<std::vector<double>>();
    r.train_refine = j.at("train_refine");
    r.train_gan_d = j.at("train_gan_d");
    r.val_psnr = j.at("val_psnr");
    r.improved = j.at("improved");
    return r;
}

}  // namespace

// ---------------------------------------------------------------------------
// Validation

Frame frame_average(const Frame& first, const Frame& last)
{
    if (!first.same_size(last)) throw ShapeError("frame_average: size mismatch");
    Frame out = first;
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = 0.5 * (first.data[i] + last.data[i]);
    return out;
}

double validate(const Predictor& predictor, const Dataset& val_set)
{
    if (val_set.empty()) return 0.0;
    double total = 0.0;
    for (const FrameTriplet& t : val_set) total += psnr(predictor(t.first, t.last), t.middle);
    return total / static_cast<double>(val_set.size());
}

double validate(const InterpolationModel& model, const Dataset& val_set)
{
    return validate(
        [&](const Frame& a, const Frame& b) {
            return Frame::from_tensor(model.predict(a.to_tensor(), b.to_tensor()));
        },
        val_set);
}

double frame_average_psnr(const Dataset& val_set) { return validate(frame_average, val_set); }

// ---------------------------------------------------------------------------
// Trainer

Trainer::Trainer(TrainConfig config, const Dataset& train_set, const Dataset& val_set)
    : config_(std::move(config)),
      train_(&train_set),
      val_(&val_set),
      model_(config_.model),
      stopper_(config_.patience)
{
    config_.validate();
    if (train_set.empty()) throw std::invalid_argument("training set is empty");
    if (val_set.empty()) throw std::invalid_argument("validation set is empty");
    model_.init(config_.seed);
    if (config_.perceptual && config_.loss.vgg_weight > 0.0 && !config_.loss.extractor)
        config_.loss.extractor = std::make_shared<FeatureExtractor>(config_.perceptual_seed);
    if (config_.loss.gan_mode != GanMode::off) {
        disc_store_ = std::make_unique<ParameterStore>();
        disc_.emplace(config_.discriminator, *disc_store_);
        disc_->init(config_.seed ^ 0xd15c0ULL);
    }
}

StepRecord Trainer::train_step(const Batch& batch)
{
    StepRecord record;
    record.step = step_ + 1;
    const InterpolationOutput out = model_.forward(batch.first, batch.last);

    double gan_d = 0.0;
    if (disc_) {
        disc_store_->zero_grad();
        const Tensor fake = out.frame.detach();
        const Tensor d_real = disc_->forward(batch.middle, BatchNormMode::train);
        const Tensor d_fake = disc_->forward(fake, BatchNormMode::train);
        const GanLosses gl = gan_losses(d_real, d_fake, config_.loss.gan_mode);
        gan_d = gl.discriminator.item();
        if (!std::isfinite(gan_d)) {
            LossBreakdown bd;
            bd.gan_discriminator = gan_d;
            dump_divergence(batch, bd);
        }
        gl.discriminator.backward();
        adam_step(*disc_store_, disc_opt_, config_.adam);
    }

    model_.parameters().zero_grad();
    LossResult loss = total_loss(out, batch.middle, config_.loss, disc_ ? &*disc_ : nullptr);
    loss.breakdown.gan_discriminator = gan_d;
    if (!std::isfinite(loss.breakdown.total)) dump_divergence(batch, loss.breakdown);
    loss.total.backward();
    adam_step(model_.parameters(), gen_opt_, config_.adam);

    ++step_;
    record.loss = loss.breakdown;
    return record;
}

void Trainer::dump_divergence(const Batch& batch, const LossBreakdown& loss) const
{
    std::ostringstream msg;
    msg << "training diverged at step " << step_ + 1 << " (loss total " << loss.total << ", discriminator "
        << loss.gan_discriminator << "); batch triplets:";
    for (std::size_t i : batch.indices) msg << ' ' << i;
    if (!config_.dump_dir.empty()) {
        namespace fs = std::filesystem;
        const fs::path dir(config_.dump_dir);
        fs::create_directories(dir);
        for (int n = 0; n < batch.first.dim(0); ++n) {
            const std::string tag = "sample" + std::to_string(n);
            write_frame(Frame::from_tensor(batch.first, n), dir / (tag + "_a.ppm"));
            write_frame(Frame::from_tensor(batch.last, n), dir / (tag + "_b.ppm"));
            write_frame(Frame::from_tensor(batch.middle, n), dir / (tag + "_gt.ppm"));
        }
        StepRecord r;
        r.step = step_ + 1;
        r.loss = loss;
        std::ofstream(dir / "divergence.json") << r.to_json() << '\n';
        msg << "; diagnostics written to " << dir.string();
    }
    throw DivergenceError(msg.str());
}

TrainHistory Trainer::run()
{
    bool step_limit = false;
    bool stopped = false;
    for (int epoch = next_epoch_; epoch < config_.max_epochs; ++epoch) {
        const BatchStream stream = make_batches(*train_, config_.crop, config_.batch_size, config_.seed, epoch);
        EpochRecord rec;
        rec.epoch = epoch;
        std::size_t batches = 0;
        for (std::size_t i = 0; i < stream.size(); ++i) {
            if (config_.max_steps > 0 && step_ >= config_.max_steps) {
                step_limit = true;
                break;
            }
            StepRecord s = train_step(stream.batch(i));
            s.epoch = epoch;
            if (on_step_) on_step_(s);
            rec.train_total += s.loss.total;
            rec.train_scale_tau.resize(s.loss.scale_tau.size(), 0.0);
            for (std::size_t j = 0; j < s.loss.scale_tau.size(); ++j) rec.train_scale_tau[j] += s.loss.scale_tau[j];
            rec.train_refine += s.loss.refine_tau.value_or(0.0);
            rec.train_gan_d += s.loss.gan_discriminator;
            ++batches;
        }
        if (config_.max_steps > 0 && step_ >= config_.max_steps) step_limit = true;
        if (batches == 0) break;
        const double inv = 1.0 / static_cast<double>(batches);
        rec.train_total *= inv;
        for (double& v : rec.train_scale_tau) v *= inv;
        rec.train_refine *= inv;
        rec.train_gan_d *= inv;
        rec.step = step_;
        rec.val_psnr = validate(model_, *val_);
        stopped = stopper_.update(epoch, rec.val_psnr);
        rec.improved = stopper_.improved();
        if (rec.improved) best_ = model_.parameters().snapshot();
        history_.epochs.push_back(rec);
        history_.best_epoch = stopper_.best_epoch();
        history_.best_psnr = stopper_.best();
        next_epoch_ = epoch + 1;
        if (on_epoch_) on_epoch_(rec);
        if (stopped || step_limit) break;
    }
    history_.stop_reason = stopped ? "early_stopping" : step_limit ? "max_steps" : "max_epochs";
    if (!best_.empty()) model_.parameters().restore(best_);
    return history_;
}

void Trainer::save_state(const std::string& path) const
{
    Archive a;
    nlohmann::json state;
    state["next_epoch"] = next_epoch_;
    state["step"] = step_;
    state["gen_opt_step"] = gen_opt_.step;
    state["disc_opt_step"] = disc_opt_.step;
    state["best_epoch"] = stopper_.best_epoch();
    state["best_psnr"] = stopper_.best();
    state["stale"] = stopper_.stale_epochs();
    state["history"] = nlohmann::json::array();
    for (const auto& e : history_.epochs) state["history"].push_back(nlohmann::json::parse(e.to_json()));
    a.architecture = config_.to_text() + "state=" + state.dump() + "\n";

    append_store(a, model_.parameters(), "gen/");
    if (disc_store_) append_store(a, *disc_store_, "disc/");
    for (const auto& [name, values] : best_) a.entries.push_back({"best/" + name, {static_cast<int>(values.size())}, values});
    auto moments = [&](const OptimizerState& s, const std::string& tag) {
        for (const auto& [name, m] : s.first_moment)
            a.entries.push_back({"adam." + tag + ".m/" + name, {static_cast<int>(m.size())}, m});
        for (const auto& [name, v] : s.second_moment)
            a.entries.push_back({"adam." + tag + ".v/" + name, {static_cast<int>(v.size())}, v});
    };
    moments(gen_opt_, "gen");
    moments(disc_opt_, "disc");
    save_archive(path, a);
}

void Trainer::load_state(const std::string& path)
{
    const Archive a = load_archive(path);
    const ModelConfig stored = model_config_from_archive(a);
    if (!(stored == config_.model))
        throw CheckpointError("training state architecture differs:\n" + config_diff(config_.model, stored));
    const auto pos = a.architecture.find("state=");
    if (pos == std::string::npos) throw CheckpointError("file has no training progress: " + path);
    const nlohmann::json state = nlohmann::json::parse(a.architecture.substr(pos + 6));

    load_store(a, model_.parameters(), "gen/");
    if (disc_store_) load_store(a, *disc_store_, "disc/");
    best_.clear();
    auto restore_moments = [&](OptimizerState& s, const std::string& tag) {
        s.first_moment.clear();
        s.second_moment.clear();
        for (const auto& e : a.entries) {
            const std::string m = "adam." + tag + ".m/", v = "adam." + tag + ".v/";
            if (e.name.rfind(m, 0) == 0) s.first_moment[e.name.substr(m.size())] = e.values;
            if (e.name.rfind(v, 0) == 0) s.second_moment[e.name.substr(v.size())] = e.values;
        }
    };
    for (const auto& e : a.entries)
        if (e.name.rfind("best/", 0) == 0) best_[e.name.substr(5)] = e.values;
    restore_moments(gen_opt_, "gen");
    restore_moments(disc_opt_, "disc");
    gen_opt_.step = state.at("gen_opt_step");
    disc_opt_.step = state.at("disc_opt_step");
    next_epoch_ = state.at("next_epoch");
    step_ = state.at("step");
    stopper_.restore(state.at("best_epoch"), state.at("best_psnr"), state.at("stale"));
    history_ = TrainHistory{};
    for (const auto& e : state.at("history")) history_.epochs.push_back(epoch_from_json(e));
    history_.best_epoch = stopper_.best_epoch();
    history_.best_psnr = stopper_.best();
}

}  // namespace vfi
