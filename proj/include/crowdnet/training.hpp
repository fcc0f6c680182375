#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "crowdnet/groundtruth.hpp"
#include "crowdnet/model.hpp"

namespace crowdnet {

/// Everything a training run needs. Parsed from / written to the `key = value` config format.
struct TrainConfig {
    ModelConfig model;
    double learning_rate = 5e-4;
    std::size_t batch_size = 8;
    std::size_t crop_h = 400;
    std::size_t crop_w = 400;
    std::size_t epochs = 100;
    double loss_alpha = 0.1;
    std::size_t lookahead_k = 5;
    double lookahead_alpha = 0.5;
    double sigma = 5.0;
    std::uint64_t seed = 0;

    // Not part of the file format; the crop size above overrides the augment crop.
    AugmentConfig augment;

    void validate() const {
        if (!(learning_rate >= 0.0)) throw UsageError("learning_rate must be non-negative");
        if (batch_size == 0) throw UsageError("batch_size must be >= 1");
        if (lookahead_k == 0) throw UsageError("lookahead_k must be >= 1");
        if (!(lookahead_alpha > 0.0 && lookahead_alpha <= 1.0)) throw UsageError("lookahead_alpha must lie in (0, 1]");
        if (!(sigma > 0.0)) throw UsageError("sigma must be positive");
        if (!(loss_alpha >= 0.0)) throw UsageError("loss_alpha must be non-negative");
        if ((crop_h == 0) != (crop_w == 0)) throw UsageError("crop_h and crop_w must both be 0 (full image) or both set");
        if (crop_h % 16 != 0 || crop_w % 16 != 0) throw UsageError("crop dims must be multiples of 16");
        if (!(model.width_multiplier > 0.0 && model.width_multiplier <= 1.0)) {
            throw UsageError("width_multiplier must lie in (0, 1]");
        }
    }

    AugmentConfig augment_config() const {
        AugmentConfig a = augment;
        a.crop_h = crop_h;
        a.crop_w = crop_w;
        return a;
    }
};

namespace detail {

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

inline double parse_real(const std::string& key, const std::string& v) {
    try {
        const auto slash = v.find('/');
        std::size_t used = 0;
        if (slash != std::string::npos) {
            const double num = std::stod(v.substr(0, slash), &used);
            if (used != slash) throw std::invalid_argument(v);
            const std::string den_s = v.substr(slash + 1);
            const double den = std::stod(den_s, &used);
            if (used != den_s.size() || den == 0.0) throw std::invalid_argument(v);
            return num / den;
        }
        const double x = std::stod(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::logic_error&) {
        throw UsageError("config key '" + key + "': expected a number, got '" + v + "'");
    }
}

inline std::uint64_t parse_uint(const std::string& key, const std::string& v) {
    std::uint64_t x = 0;
    auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), x);
    if (ec != std::errc() || ptr != v.data() + v.size() || v.empty()) {
        throw UsageError("config key '" + key + "': expected a non-negative integer, got '" + v + "'");
    }
    return x;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw UsageError("config key '" + key + "': expected true/false, got '" + v + "'");
}

inline std::string format_real(double v) {
    char buf[64];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, ptr);
}

}  // namespace detail

/// Parses `key = value` lines; '#' starts a comment. Unknown or repeated keys are rejected.
inline TrainConfig parse_train_config(std::istream& in) {
    TrainConfig cfg;
    std::map<std::string, std::string> seen;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw UsageError("config line " + std::to_string(lineno) + ": expected 'key = value'");
        const std::string key = detail::trim(line.substr(0, eq));
        const std::string val = detail::trim(line.substr(eq + 1));
        if (!seen.emplace(key, val).second) throw UsageError("config key '" + key + "' given twice");

        if (key == "variant") cfg.model.variant = parse_variant(val);
        else if (key == "width_multiplier") cfg.model.width_multiplier = detail::parse_real(key, val);
        else if (key == "use_can") cfg.model.use_can = detail::parse_bool(key, val);
        else if (key == "use_aspp") cfg.model.use_aspp = detail::parse_bool(key, val);
        else if (key == "use_skip") cfg.model.use_skip = detail::parse_bool(key, val);
        else if (key == "learning_rate") cfg.learning_rate = detail::parse_real(key, val);
        else if (key == "batch_size") cfg.batch_size = detail::parse_uint(key, val);
        else if (key == "crop_h") cfg.crop_h = detail::parse_uint(key, val);
        else if (key == "crop_w") cfg.crop_w = detail::parse_uint(key, val);
        else if (key == "epochs") cfg.epochs = detail::parse_uint(key, val);
        else if (key == "loss_alpha") cfg.loss_alpha = detail::parse_real(key, val);
        else if (key == "lookahead_k") cfg.lookahead_k = detail::parse_uint(key, val);
        else if (key == "lookahead_alpha") cfg.lookahead_alpha = detail::parse_real(key, val);
        else if (key == "sigma") cfg.sigma = detail::parse_real(key, val);
        else if (key == "seed") cfg.seed = detail::parse_uint(key, val);
        else throw UsageError("unknown config key '" + key + "'");
    }
    cfg.model.seed = cfg.seed;
    cfg.validate();
    return cfg;
}

inline TrainConfig load_train_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open config '" + path + "'");
    return parse_train_config(in);
}

inline std::string format_train_config(const TrainConfig& c) {
    std::ostringstream os;
    auto b = [](bool v) { return v ? "true" : "false"; };
    os << "variant = " << to_string(c.model.variant) << "\n"
       << "width_multiplier = " << detail::format_real(c.model.width_multiplier) << "\n"
       << "use_can = " << b(c.model.use_can) << "\n"
       << "use_aspp = " << b(c.model.use_aspp) << "\n"
       << "use_skip = " << b(c.model.use_skip) << "\n"
       << "learning_rate = " << detail::format_real(c.learning_rate) << "\n"
       << "batch_size = " << c.batch_size << "\n"
       << "crop_h = " << c.crop_h << "\n"
       << "crop_w = " << c.crop_w << "\n"
       << "epochs = " << c.epochs << "\n"
       << "loss_alpha = " << detail::format_real(c.loss_alpha) << "\n"
       << "lookahead_k = " << c.lookahead_k << "\n"
       << "lookahead_alpha = " << detail::format_real(c.lookahead_alpha) << "\n"
       << "sigma = " << detail::format_real(c.sigma) << "\n"
       << "seed = " << c.seed << "\n";
    return os.str();
}

// ---------------------------------------------------------------------------------------------
// Loss

template <typename T>
struct LossTerms {
    Tensor<T> total;
    T density = 0;
    T attention = 0;
};

/// mean squared density error + alpha * mean binary cross-entropy of the attention map.
template <typename T>
LossTerms<T> multitask_loss(const NetworkOutputs<T>& out, const Tensor<T>& density_gt, const Tensor<T>& attention_gt,
                            T alpha) {
    if (out.density.shape() != density_gt.shape() || out.attention.shape() != attention_gt.shape()) {
        throw UsageError("multitask_loss: prediction " + out.density.shape().str() + " / " +
                         out.attention.shape().str() + " vs targets " + density_gt.shape().str() + " / " +
                         attention_gt.shape().str());
    }
    Tensor<T> l_den = mse_loss(out.density, density_gt);
    Tensor<T> l_att = bce_loss(out.attention, attention_gt);
    return {add(l_den, scale(l_att, alpha)), l_den.item(), l_att.item()};
}

// ---------------------------------------------------------------------------------------------
// Optimizer

struct AdamOptions {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Adam moments, the step counter and Lookahead's slow weights, keyed by parameter name.
template <typename T>
struct OptimizerState {
    struct Slot {
        std::vector<T> m, v, slow;
    };
    std::map<std::string, Slot> slots;
    std::uint64_t step = 0;

    /// Allocates zero moments and snapshots the current weights as the slow copy.
    static OptimizerState init(const ParamStore<T>& params) {
        OptimizerState s;
        for (const auto& [name, t] : params) {
            if (!t.requires_grad()) continue;
            s.slots[name] = Slot{std::vector<T>(t.numel(), T(0)), std::vector<T>(t.numel(), T(0)), t.values()};
        }
        return s;
    }

    ParamStore<T> to_store() const {
        ParamStore<T> out;
        for (const auto& [name, slot] : slots) {
            const Shape s{slot.m.size(), 1, 1, 1};
            out.add("adam_m." + name, Tensor<T>(s, slot.m));
            out.add("adam_v." + name, Tensor<T>(s, slot.v));
            out.add("slow." + name, Tensor<T>(s, slot.slow));
        }
        // Split the counter into two exactly representable halves.
        out.add("step", Tensor<T>(Shape{2, 1, 1, 1}, std::vector<T>{static_cast<T>(step >> 20),
                                                                      static_cast<T>(step & 0xFFFFF)}));
        return out;
    }

    static OptimizerState from_store(const ParamStore<float>& store) {
        OptimizerState s;
        for (const auto& [name, t] : store) {
            auto copy = [&t] { return std::vector<T>(t.values().begin(), t.values().end()); };
            if (name.rfind("adam_m.", 0) == 0) s.slots[name.substr(7)].m = copy();
            else if (name.rfind("adam_v.", 0) == 0) s.slots[name.substr(7)].v = copy();
            else if (name.rfind("slow.", 0) == 0) s.slots[name.substr(5)].slow = copy();
            else if (name == "step" && t.numel() == 2) {
                s.step = (static_cast<std::uint64_t>(t.values()[0]) << 20) + static_cast<std::uint64_t>(t.values()[1]);
            } else {
                throw DataError("unexpected entry '" + name + "' in optimizer state");
            }
        }
        return s;
    }
};

/// One bias-corrected Adam update of every trainable parameter.
template <typename T>
void adam_step(ParamStore<T>& params, OptimizerState<T>& state, double lr, const AdamOptions& opt = {}) {
    for (const auto& [name, t] : params) {
        if (t.requires_grad() && !t.has_grad()) throw UsageError("adam_step: parameter '" + name + "' has no gradient");
    }
    ++state.step;
    const T b1 = static_cast<T>(opt.beta1), b2 = static_cast<T>(opt.beta2);
    const T corr1 = static_cast<T>(1.0 - std::pow(opt.beta1, static_cast<double>(state.step)));
    const T corr2 = static_cast<T>(1.0 - std::pow(opt.beta2, static_cast<double>(state.step)));
    const T eps = static_cast<T>(opt.eps);
    const T rate = static_cast<T>(lr);
    for (auto& [name, t] : params) {
        if (!t.requires_grad()) continue;
        auto it = state.slots.find(name);
        if (it == state.slots.end()) throw UsageError("adam_step: no optimizer slot for '" + name + "'");
        auto& slot = it->second;
        auto w = t.values().data();
        const auto g = t.grad();
        for (std::size_t i = 0; i < t.numel(); ++i) {
            slot.m[i] = b1 * slot.m[i] + (T(1) - b1) * g[i];
            slot.v[i] = b2 * slot.v[i] + (T(1) - b2) * g[i] * g[i];
            const T m_hat = slot.m[i] / corr1;
            const T v_hat = slot.v[i] / corr2;
            w[i] -= rate * m_hat / (std::sqrt(v_hat) + eps);
        }
    }
}

/// Every k inner steps: slow <- (1 - alpha) slow + alpha fast, then fast <- slow.
/// With alpha = 1 this reproduces the inner trajectory exactly.
template <typename T>
void lookahead_sync(ParamStore<T>& params, OptimizerState<T>& state, std::size_t k, double alpha) {
    if (k == 0 || state.step % k != 0) return;
    const T a = static_cast<T>(alpha);
    for (auto& [name, t] : params) {
        if (!t.requires_grad()) continue;
        auto& slow = state.slots.at(name).slow;
        auto w = t.values().data();
        for (std::size_t i = 0; i < t.numel(); ++i) {
            slow[i] = (T(1) - a) * slow[i] + a * w[i];
            w[i] = slow[i];
        }
    }
}

// ---------------------------------------------------------------------------------------------
// Training loop

template <typename T>
Tensor<T> images_to_tensor(const std::vector<const Image*>& images) {
    if (images.empty()) throw UsageError("images_to_tensor: empty batch");
    const std::size_t h = images.front()->h, w = images.front()->w;
    Tensor<T> x(Shape{images.size(), 3, h, w});
    for (std::size_t n = 0; n < images.size(); ++n) {
        if (images[n]->h != h || images[n]->w != w) throw UsageError("images_to_tensor: images differ in size");
        std::copy(images[n]->rgb.begin(), images[n]->rgb.end(), x.values().begin() + n * 3 * h * w);
    }
    return x;
}

template <typename T>
Tensor<T> grids_to_tensor(const std::vector<const Grid*>& grids) {
    const std::size_t h = grids.front()->h, w = grids.front()->w;
    Tensor<T> x(Shape{grids.size(), 1, h, w});
    for (std::size_t n = 0; n < grids.size(); ++n) {
        if (grids[n]->h != h || grids[n]->w != w) throw UsageError("grids_to_tensor: grids differ in size");
        std::copy(grids[n]->v.begin(), grids[n]->v.end(), x.values().begin() + n * h * w);
    }
    return x;
}

struct StepRecord {
    std::uint64_t step = 0;  // 1-based
    double loss = 0, loss_density = 0, loss_attention = 0;
};

struct EpochRecord {
    std::size_t epoch = 0;
    double train_mae = 0;
};

template <typename T>
struct TrainLog {
    std::vector<StepRecord> steps;
    std::vector<EpochRecord> epochs;
    std::optional<std::size_t> best_epoch;
    ParamStore<T> best_weights;
};

template <typename T>
struct FitHooks {
    std::function<void(const StepRecord&)> on_step;
    std::function<void(const EpochRecord&)> on_epoch;
    // Global step (1-based) to resume after; 0 starts fresh. The caller restores weights and state.
    std::uint64_t start_step = 0;
    // Stop once this many steps have run in total (0 = run all epochs).
    std::uint64_t stop_step = 0;
    OptimizerState<T>* state = nullptr;  // supply to resume or to inspect afterwards
};

namespace detail {

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(a >> 32), static_cast<std::uint32_t>(b),
                      static_cast<std::uint32_t>(b >> 32)};
    std::uint64_t out[1];
    std::uint32_t words[2];
    seq.generate(words, words + 2);
    out[0] = (static_cast<std::uint64_t>(words[0]) << 32) | words[1];
    return out[0];
}

inline std::string format_loss(const StepRecord& r) {
    return "loss=" + format_real(r.loss) + " density=" + format_real(r.loss_density) +
           " attention=" + format_real(r.loss_attention);
}

}  // namespace detail

/// Shuffled minibatch training: augment -> forward -> loss -> backward -> Adam -> Lookahead.
/// Randomness is derived from (seed, epoch, position) so any step can be resumed exactly.
template <typename T>
TrainLog<T> fit(Model<T>& model, const std::vector<SceneAnnotation>& scenes, const TrainConfig& cfg,
                FitHooks<T> hooks = {}) {
    cfg.validate();
    if (scenes.empty()) throw UsageError("fit: dataset is empty");
    const std::size_t n = scenes.size();
    const std::size_t batch = std::min(cfg.batch_size, n);
    const std::size_t per_epoch = (n + batch - 1) / batch;
    const bool full_image = cfg.crop_h == 0;
    if (full_image) {
        for (const auto& s : scenes) {
            if (s.image.h != scenes.front().image.h || s.image.w != scenes.front().image.w) {
                throw UsageError("fit: full-image training needs equally sized images");
            }
        }
    }

    OptimizerState<T> local_state;
    OptimizerState<T>& state = hooks.state ? *hooks.state : local_state;
    if (state.slots.empty()) state = OptimizerState<T>::init(model.params());

    TrainLog<T> log;
    double best_mae = std::numeric_limits<double>::infinity();
    model.set_training(true);

    std::uint64_t global = 0;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        if (hooks.stop_step && global >= hooks.stop_step) break;
        std::vector<std::size_t> order(n);
        std::iota(order.begin(), order.end(), 0);
        std::mt19937_64 shuffle_rng(detail::mix_seed(cfg.seed, epoch));
        std::shuffle(order.begin(), order.end(), shuffle_rng);

        double abs_err_sum = 0.0;
        std::size_t counted = 0;
        for (std::size_t b = 0; b < per_epoch; ++b) {
            ++global;
            if (global <= hooks.start_step) continue;
            if (hooks.stop_step && global > hooks.stop_step) break;

            std::vector<AugmentedSample> samples;
            for (std::size_t i = b * batch; i < std::min(n, (b + 1) * batch); ++i) {
                const SceneAnnotation& scene = scenes[order[i]];
                AugmentConfig aug = cfg.augment_config();
                if (!full_image) {
                    // Lift the resize range so the crop always fits this scene.
                    const double need = std::max(static_cast<double>(aug.crop_h) / scene.image.h,
                                                 static_cast<double>(aug.crop_w) / scene.image.w);
                    aug.resize_lo = std::max(aug.resize_lo, need);
                    aug.resize_hi = std::max(aug.resize_hi, aug.resize_lo);
                }
                std::mt19937_64 rng(detail::mix_seed(cfg.seed, epoch, order[i] + 1));
                samples.push_back(augment(scene, aug, cfg.sigma, rng));
            }
            std::vector<const Image*> imgs;
            std::vector<const Grid*> dens, atts;
            for (const auto& s : samples) {
                imgs.push_back(&s.image);
                dens.push_back(&s.targets.density.grid);
                atts.push_back(&s.targets.attention.grid);
            }

            StepRecord rec;
            rec.step = global;
            try {
                model.params().zero_grad();
                NetworkOutputs<T> out = model.forward(images_to_tensor<T>(imgs));
                LossTerms<T> loss =
                    multitask_loss(out, grids_to_tensor<T>(dens), grids_to_tensor<T>(atts), static_cast<T>(cfg.loss_alpha));
                rec.loss = loss.total.item();
                rec.loss_density = loss.density;
                rec.loss_attention = loss.attention;
                if (!std::isfinite(rec.loss)) throw NumericError("non-finite loss");
                loss.total.backward();
                adam_step(model.params(), state, cfg.learning_rate);
                lookahead_sync(model.params(), state, cfg.lookahead_k, cfg.lookahead_alpha);

                const std::size_t plane = out.density.shape().plane();
                for (std::size_t s = 0; s < samples.size(); ++s) {
                    double pred = 0.0;
                    for (std::size_t i = 0; i < plane; ++i) pred += out.density.values()[s * plane + i];
                    abs_err_sum += std::abs(pred - static_cast<double>(samples[s].points.size()));
                    ++counted;
                }
            } catch (const NumericError& e) {
                throw NumericError("training aborted at step " + std::to_string(global) + ": " + e.what() + " (" +
                                   detail::format_loss(rec) + ")");
            }
            log.steps.push_back(rec);
            if (hooks.on_step) hooks.on_step(rec);
        }
        if (counted == n) {
            EpochRecord er{epoch + 1, abs_err_sum / static_cast<double>(n)};
            log.epochs.push_back(er);
            if (hooks.on_epoch) hooks.on_epoch(er);
            if (er.train_mae < best_mae) {
                best_mae = er.train_mae;
                log.best_epoch = er.epoch;
                log.best_weights = model.params().clone();
            }
        }
    }
    if (!log.best_epoch) log.best_weights = model.params().clone();
    return log;
}

inline std::string steps_to_csv(const std::vector<StepRecord>& steps) {
    std::string out = "step,loss,loss_density,loss_attention\n";
    for (const auto& s : steps) {
        out += std::to_string(s.step) + "," + detail::format_real(s.loss) + "," + detail::format_real(s.loss_density) +
               "," + detail::format_real(s.loss_attention) + "\n";
    }
    return out;
}

}  // namespace crowdnet
