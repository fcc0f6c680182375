#pragma once

// Pipeline commands behind the `crowdnet` executable. Each takes a resolved option struct and
// writes human-readable output to one stream.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "crowdnet/evaluation.hpp"
#include "crowdnet/training.hpp"

namespace crowdnet::cli {

namespace fs = std::filesystem;

enum ExitCode : int { kOk = 0, kUsage = 1, kData = 2, kNumeric = 3 };

struct Size2 {
    std::size_t h = 0, w = 0;
};

inline Size2 parse_size(const std::string& s) {
    const auto x = s.find_first_of("xX");
    if (x == std::string::npos) throw UsageError("size must look like HxW, got '" + s + "'");
    Size2 out;
    out.h = static_cast<std::size_t>(detail::parse_uint("size", s.substr(0, x)));
    out.w = static_cast<std::size_t>(detail::parse_uint("size", s.substr(x + 1)));
    if (out.h == 0 || out.w == 0) throw UsageError("size must be positive, got '" + s + "'");
    return out;
}

inline std::string scene_stem(std::size_t i) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "img_%04zu", i);
    return buf;
}

inline constexpr const char* kManifestName = "manifest.csv";

/// Pairs every `<stem>.ppm` with `<stem>.csv` in a directory, ignoring the synth manifest. Orphans on
/// either side are an error.
inline std::vector<SceneAnnotation> load_dataset(const std::string& dir) {
    if (!fs::is_directory(dir)) throw DataError("data directory '" + dir + "' does not exist");
    std::set<std::string> images, annotations;
    for (const auto& e : fs::directory_iterator(dir)) {
        if (!e.is_regular_file() || e.path().filename() == kManifestName) continue;
        const auto ext = e.path().extension().string();
        if (ext == ".ppm") images.insert(e.path().stem().string());
        if (ext == ".csv") annotations.insert(e.path().stem().string());
    }
    std::vector<std::string> orphans;
    for (const auto& s : images) {
        if (!annotations.count(s)) orphans.push_back(s + ".ppm");
    }
    for (const auto& s : annotations) {
        if (!images.count(s)) orphans.push_back(s + ".csv");
    }
    if (!orphans.empty()) {
        std::string msg = "unpaired files in '" + dir + "':";
        for (const auto& o : orphans) msg += " " + o;
        throw DataError(msg);
    }
    std::vector<SceneAnnotation> scenes;
    for (const auto& stem : images) {
        SceneAnnotation s;
        s.name = stem;
        s.image = read_ppm((fs::path(dir) / (stem + ".ppm")).string());
        s.points = read_annotations((fs::path(dir) / (stem + ".csv")).string());
        check_points(s.points, s.image.h, s.image.w);
        scenes.push_back(std::move(s));
    }
    return scenes;
}

inline void ensure_dir(const std::string& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec || !fs::is_directory(dir)) throw DataError("cannot create directory '" + dir + "'");
}

// ---------------------------------------------------------------------------------------------

struct SynthOptions {
    std::string out;
    std::size_t scenes = 8;
    std::size_t heads_min = 5;
    std::size_t heads_max = 20;
    Size2 size{128, 128};
    std::uint64_t seed = 0;
};

inline int cmd_synth(const SynthOptions& o, std::ostream& log) {
    if (o.heads_max < o.heads_min) throw UsageError("--heads-max must be >= --heads-min");
    log << "synth out=" << o.out << " scenes=" << o.scenes << " heads=[" << o.heads_min << "," << o.heads_max
        << "] size=" << o.size.h << "x" << o.size.w << " seed=" << o.seed << "\n";
    ensure_dir(o.out);
    std::string manifest = "image,annotations,heads,style\n";
    for (std::size_t i = 0; i < o.scenes; ++i) {
        std::mt19937_64 rng(detail::mix_seed(o.seed, i));
        std::uniform_int_distribution<std::size_t> heads(o.heads_min, o.heads_max);
        const std::size_t n = heads(rng);
        const SceneStyle style = i % 2 == 0 ? SceneStyle::uniform : SceneStyle::perspective;
        const SceneAnnotation s = synth_scene(rng, n, o.size.h, o.size.w, style);
        const std::string stem = scene_stem(i);
        write_ppm((fs::path(o.out) / (stem + ".ppm")).string(), s.image);
        write_annotations((fs::path(o.out) / (stem + ".csv")).string(), s.points);
        manifest += stem + ".ppm," + stem + ".csv," + std::to_string(n) + "," +
                    (style == SceneStyle::uniform ? "uniform" : "perspective") + "\n";
    }
    detail::write_file((fs::path(o.out) / kManifestName).string(), manifest);
    log << "wrote " << o.scenes << " scenes\n";
    return kOk;
}

// ---------------------------------------------------------------------------------------------

struct GengtOptions {
    std::string data;
    double sigma = 5.0;
    std::string out;
};

inline int cmd_gengt(const GengtOptions& o, std::ostream& log) {
    if (!(o.sigma > 0.0)) throw UsageError("--sigma must be positive");
    const std::size_t threads = worker_count();
    log << "gengt data=" << o.data << " sigma=" << detail::format_real(o.sigma) << " out=" << o.out
        << " threads=" << threads << "\n";
    const auto scenes = load_dataset(o.data);
    ensure_dir(o.out);
    std::vector<double> mass(scenes.size());
    parallel_for(scenes.size(), threads, [&](std::size_t i) {
        const auto& s = scenes[i];
        const TargetPair t = target_pair(s.points, s.image.h, s.image.w, o.sigma);
        const fs::path base = fs::path(o.out) / s.name;
        write_dmap(base.string() + ".dmap", t.density.grid);
        write_pgm(base.string() + "_density.pgm", normalize_for_display(t.density.grid));
        write_pgm(base.string() + "_attention.pgm", t.attention.grid);
        mass[i] = t.density.grid.sum();
    });
    for (std::size_t i = 0; i < scenes.size(); ++i) {
        log << scenes[i].name << " heads=" << scenes[i].points.size() << " mass=" << std::fixed << std::setprecision(4)
            << mass[i] << std::defaultfloat << "\n";
    }
    return kOk;
}

// ---------------------------------------------------------------------------------------------

inline std::string config_path(const std::string& ckpt) { return ckpt + ".cfg"; }
inline std::string log_path(const std::string& ckpt) { return ckpt + ".log.csv"; }
inline std::string state_path(const std::string& ckpt) { return ckpt + ".opt"; }

/// Rebuilds a model from `<ckpt>.cfg` and loads `<ckpt>` into it, in eval mode.
inline Model<float> load_checkpoint(const std::string& ckpt) {
    ParamStore<float> weights = load_weights(ckpt);
    const TrainConfig cfg = load_train_config(config_path(ckpt));
    Model<float> m(cfg.model);
    m.params().assign_from(weights);
    m.set_training(false);
    return m;
}

struct TrainOptions {
    std::string config;
    std::string data;
    std::string out;
};

inline int cmd_train(const TrainOptions& o, std::ostream& log) {
    const TrainConfig cfg = load_train_config(o.config);
    log << "train config=" << o.config << " data=" << o.data << " out=" << o.out << "\n" << format_train_config(cfg);
    const auto scenes = load_dataset(o.data);
    Model<float> model(cfg.model);
    log << "parameters " << model.count_params() << "\n";

    OptimizerState<float> state;
    FitHooks<float> hooks;
    hooks.state = &state;
    hooks.on_epoch = [&log, &cfg](const EpochRecord& e) {
        if (e.epoch == 1 || e.epoch == cfg.epochs || e.epoch % 10 == 0) {
            log << "epoch " << e.epoch << " train_mae " << detail::format_real(e.train_mae) << "\n";
        }
    };
    const TrainLog<float> result = fit(model, scenes, cfg, hooks);

    const fs::path parent = fs::path(o.out).parent_path();
    if (!parent.empty()) ensure_dir(parent.string());
    save_weights(result.best_weights, o.out);
    save_weights(state.to_store(), state_path(o.out));
    detail::write_file(config_path(o.out), format_train_config(cfg));
    detail::write_file(log_path(o.out), steps_to_csv(result.steps));
    log << "best epoch " << (result.best_epoch ? std::to_string(*result.best_epoch) : "-") << ", wrote " << o.out
        << "\n";
    return kOk;
}

// ---------------------------------------------------------------------------------------------

struct InferOptions {
    std::string model;
    std::string image;
    std::string out;
    std::optional<std::string> viz;
    bool count = false;
};

inline int cmd_infer(const InferOptions& o, std::ostream& log, std::ostream& err) {
    log << "infer model=" << o.model << " image=" << o.image << " out=" << o.out << " viz=" << o.viz.value_or("-")
        << " count=" << (o.count ? "true" : "false") << "\n";
    Model<float> model = load_checkpoint(o.model);
    const Image img = read_ppm(o.image);
    const Prediction<float> p = predict(model, img);
    if (p.padded) {
        err << "padded " << img.h << "x" << img.w << " to " << p.padded_h << "x" << p.padded_w
            << " by edge replication; output cropped to " << p.density.grid.h << "x" << p.density.grid.w << "\n";
    }
    write_dmap(o.out, p.density.grid);
    if (o.viz) write_pgm(*o.viz, normalize_for_display(p.density.grid));
    if (o.count) log << "count " << std::fixed << std::setprecision(4) << count_from_density(p.density) << "\n";
    return kOk;
}

// ---------------------------------------------------------------------------------------------

struct EvalOptions {
    std::string model;
    std::optional<std::string> model2;
    std::string data;
    double sigma = 5.0;
    std::optional<std::string> roi;
    unsigned game = 3;
};

inline int cmd_eval(const EvalOptions& o, std::ostream& log) {
    if (o.game > 3) throw UsageError("--game must be in 0..3");
    const std::size_t threads = worker_count();
    log << "eval model=" << o.model << " model2=" << o.model2.value_or("-") << " data=" << o.data
        << " sigma=" << detail::format_real(o.sigma) << " roi=" << o.roi.value_or("-") << " game=" << o.game
        << " threads=" << threads << "\n";
    std::vector<Model<float>> models;
    models.push_back(load_checkpoint(o.model));
    if (o.model2) models.push_back(load_checkpoint(*o.model2));
    std::vector<Model<float>*> ptrs;
    for (auto& m : models) ptrs.push_back(&m);
    std::optional<Grid> roi;
    if (o.roi) roi = read_pgm(*o.roi);
    const auto scenes = load_dataset(o.data);
    if (roi) {
        for (const auto& s : scenes) {
            if (roi->h != s.image.h || roi->w != s.image.w) {
                throw DataError("ROI is " + std::to_string(roi->h) + "x" + std::to_string(roi->w) + " but scene '" +
                                s.name + "' is " + std::to_string(s.image.h) + "x" + std::to_string(s.image.w));
            }
        }
    }
    const MetricsReport rep = evaluate_dataset<float>(ptrs, scenes, o.sigma, o.game, roi, threads);
    log << report_csv(rep) << report_table(rep);
    return kOk;
}

// ---------------------------------------------------------------------------------------------

struct BenchOptions {
    Variant variant = Variant::msfanet;
    double width = 1.0;
    Size2 size{224, 224};
    std::size_t runs = 100;
    std::size_t warmup = 5;
};

struct BenchResult {
    std::uint64_t params = 0;
    std::uint64_t macs = 0;
    double mean_seconds = 0;
};

inline BenchResult run_bench(const BenchOptions& o) {
    ModelConfig mc;
    mc.variant = o.variant;
    mc.width_multiplier = o.width;
    Model<float> model(mc);
    model.check_input(Shape{1, 3, o.size.h, o.size.w});
    model.set_training(false);
    BenchResult r;
    r.params = model.count_params();
    r.macs = model.count_macs(o.size.h, o.size.w);
    if (o.runs > 0) {
        Tensor<float> x(Shape{1, 3, o.size.h, o.size.w}, 0.5f);
        NoGradGuard guard;
        for (std::size_t i = 0; i < o.warmup; ++i) model.forward(x);
        const auto t0 = std::chrono::steady_clock::now();
        for (std::size_t i = 0; i < o.runs; ++i) model.forward(x);
        r.mean_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() /
                         static_cast<double>(o.runs);
    }
    return r;
}

inline int cmd_bench(const BenchOptions& o, std::ostream& log) {
    if (!(o.width > 0.0 && o.width <= 1.0)) throw UsageError("--width must lie in (0, 1]");
    log << "bench variant=" << to_string(o.variant) << " width=" << detail::format_real(o.width)
        << " size=" << o.size.h << "x" << o.size.w << " runs=" << o.runs << " warmup=" << o.warmup << "\n";
    const BenchResult r = run_bench(o);
    log << std::fixed << std::setprecision(3) << "params " << r.params << " (" << r.params / 1e6 << " M)\n"
        << "macs " << r.macs << " (" << r.macs / 1e9 << " G)\n"
        << "latency_ms " << r.mean_seconds * 1e3 << "\n"
        << std::defaultfloat;
    return kOk;
}

}  // namespace crowdnet::cli
