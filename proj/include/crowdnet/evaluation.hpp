#pragma once

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "crowdnet/groundtruth.hpp"
#include "crowdnet/model.hpp"

namespace crowdnet {

/// Worker count: CROWDNET_THREADS if set, else hardware parallelism.
inline std::size_t worker_count() {
    if (const char* env = std::getenv("CROWDNET_THREADS")) {
        char* end = nullptr;
        const long v = std::strtol(env, &end, 10);
        if (end != env && *end == '\0' && v >= 1) return static_cast<std::size_t>(v);
        throw UsageError(std::string("CROWDNET_THREADS must be a positive integer, got '") + env + "'");
    }
    return std::max<std::size_t>(1, std::thread::hardware_concurrency());
}

/// Runs fn(i) for i in [0, n) on up to `threads` workers. The first exception is rethrown.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn&& fn) {
    threads = std::max<std::size_t>(1, std::min(threads, n));
    if (threads <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr error;
    std::mutex error_mu;
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) {
        pool.emplace_back([&] {
            for (std::size_t i = next++; i < n; i = next++) {
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard lock(error_mu);
                    if (!error) error = std::current_exception();
                    next = n;
                }
            }
        });
    }
    for (auto& th : pool) th.join();
    if (error) std::rethrow_exception(error);
}

/// Nearest-neighbour reduction of a full-resolution mask onto a grid that is an integer factor smaller.
inline Grid roi_to_grid(const Grid& roi, std::size_t h, std::size_t w) {
    if (roi.h == h && roi.w == w) return roi;
    if (h == 0 || w == 0 || roi.h % h != 0 || roi.w % w != 0 || roi.h / h != roi.w / w) {
        throw DataError("ROI of size " + std::to_string(roi.h) + "x" + std::to_string(roi.w) +
                        " does not reduce to the " + std::to_string(h) + "x" + std::to_string(w) + " density grid");
    }
    const double f = static_cast<double>(roi.h / h);
    Grid out(h, w);
    for (std::size_t r = 0; r < h; ++r) {
        const auto sr = static_cast<std::size_t>(std::floor((r + 0.5) * f));
        for (std::size_t c = 0; c < w; ++c) {
            const auto sc = static_cast<std::size_t>(std::floor((c + 0.5) * f));
            out(r, c) = roi(sr, sc) > 0.5f ? 1.0f : 0.0f;
        }
    }
    return out;
}

namespace detail {

/// Exact sum of floats in fixed point (bit 0 of limb 0 weighs 2^-176, enough for denormals; the top
/// limb carries the sign). value() rounds once to nearest, so it is monotone in the exact sum.
class ExactSum {
public:
    void add(float x) {
        if (x == 0.0f) return;
        if (!std::isfinite(x)) throw NumericError("non-finite value in density map");
        int e = 0;
        const float m = std::frexp(std::abs(x), &e);
        const auto mant = static_cast<std::uint64_t>(std::ldexp(m, 24));
        const int pos = e - 24 + kOffset;
        const std::uint64_t v = mant << (pos % 32);
        const auto idx = static_cast<std::size_t>(pos / 32);
        const auto lo = static_cast<std::int64_t>(v & 0xFFFFFFFFu), hi = static_cast<std::int64_t>(v >> 32);
        limb_[idx] += x < 0 ? -lo : lo;
        limb_[idx + 1] += x < 0 ? -hi : hi;
        normalize(idx, idx + 2);
    }

    void add(const ExactSum& o, bool negate = false) {
        for (std::size_t i = 0; i < kLimbs; ++i) limb_[i] += negate ? -o.limb_[i] : o.limb_[i];
        normalize(0, kLimbs);
    }

    bool negative() const { return limb_[kLimbs - 1] < 0; }

    ExactSum abs() const {
        if (!negative()) return *this;
        ExactSum out;
        out.add(*this, true);
        return out;
    }

    double value() const {
        if (negative()) return -abs().value();
        std::size_t top = kLimbs;
        while (top > 0 && limb_[top - 1] == 0) --top;
        if (top == 0) return 0.0;
        const std::size_t i = top - 1;
        auto limb = [this](std::size_t k, std::size_t back) -> unsigned __int128 {
            return k >= back ? static_cast<std::uint64_t>(limb_[k - back]) : 0u;
        };
        unsigned __int128 w = (limb(i, 0) << 64) | (limb(i, 1) << 32) | limb(i, 2);
        bool sticky = false;
        for (std::size_t k = 0; k + 2 < i; ++k) sticky = sticky || limb_[k] != 0;
        int lz = 0;
        while (!(w >> 127)) w <<= 1, ++lz;
        std::uint64_t head = static_cast<std::uint64_t>(w >> 64);
        if (sticky || static_cast<std::uint64_t>(w) != 0) head |= 1u;
        const int low_exp = 32 * static_cast<int>(i) - 64 - kOffset;
        return std::ldexp(static_cast<double>(head), low_exp + 64 - lz);
    }

private:
    static constexpr std::size_t kLimbs = 11;
    static constexpr int kOffset = 176;
    std::array<std::int64_t, kLimbs> limb_{};

    // Brings limbs [from, kLimbs - 1) back into [0, 2^32); carries past `dirty` stop once they vanish.
    void normalize(std::size_t from, std::size_t dirty) {
        for (std::size_t i = from; i + 1 < kLimbs; ++i) {
            const std::int64_t low = limb_[i] & 0xFFFFFFFF;
            const std::int64_t carry = (limb_[i] - low) / (std::int64_t{1} << 32);
            limb_[i] = low;
            limb_[i + 1] += carry;
            if (carry == 0 && i + 1 >= dirty) break;
        }
    }
};

inline ExactSum region_sum(const Grid& g, const Grid* mask, std::size_t r0, std::size_t r1, std::size_t c0,
                           std::size_t c1) {
    ExactSum s;
    for (std::size_t r = r0; r < r1; ++r) {
        for (std::size_t c = c0; c < c1; ++c) {
            if (!mask || (*mask)(r, c) > 0.5f) s.add(g(r, c));
        }
    }
    return s;
}

inline std::optional<Grid> reduced_roi(const std::optional<Grid>& roi, const Grid& g) {
    if (!roi) return std::nullopt;
    return roi_to_grid(*roi, g.h, g.w);
}

}  // namespace detail

/// Integral of the density map, restricted to the ROI when given.
inline double count_from_density(const DensityMap& d, const std::optional<Grid>& roi = std::nullopt) {
    const auto mask = detail::reduced_roi(roi, d.grid);
    return detail::region_sum(d.grid, mask ? &*mask : nullptr, 0, d.grid.h, 0, d.grid.w).value();
}

inline void check_same_length(const std::vector<double>& preds, const std::vector<double>& gts) {
    if (preds.empty()) throw UsageError("metrics need at least one image");
    if (preds.size() != gts.size()) {
        throw UsageError("metrics: " + std::to_string(preds.size()) + " predictions vs " + std::to_string(gts.size()) +
                         " ground truths");
    }
}

inline double mae(const std::vector<double>& preds, const std::vector<double>& gts) {
    check_same_length(preds, gts);
    double s = 0.0;
    for (std::size_t i = 0; i < preds.size(); ++i) s += std::abs(preds[i] - gts[i]);
    return s / static_cast<double>(preds.size());
}

inline double rmse(const std::vector<double>& preds, const std::vector<double>& gts) {
    check_same_length(preds, gts);
    double s = 0.0;
    for (std::size_t i = 0; i < preds.size(); ++i) s += (preds[i] - gts[i]) * (preds[i] - gts[i]);
    return std::sqrt(s / static_cast<double>(preds.size()));
}

/// Sum of absolute sub-count errors over a 2^L x 2^L partition with floor boundaries. The sum is
/// exact before the final rounding, so GAME is non-decreasing in L bit for bit.
inline double game(const DensityMap& pred, const DensityMap& gt, unsigned level,
                   const std::optional<Grid>& roi = std::nullopt) {
    const Grid& p = pred.grid;
    const Grid& g = gt.grid;
    if (p.h != g.h || p.w != g.w) {
        throw UsageError("game: grids differ (" + std::to_string(p.h) + "x" + std::to_string(p.w) + " vs " +
                         std::to_string(g.h) + "x" + std::to_string(g.w) + ")");
    }
    if (level > 8) throw UsageError("game: level must be <= 8");
    const std::size_t cells = std::size_t{1} << level;
    if (p.h < cells || p.w < cells) {
        throw UsageError("game: " + std::to_string(p.h) + "x" + std::to_string(p.w) + " grid is too small for level " +
                         std::to_string(level));
    }
    const auto mask = detail::reduced_roi(roi, p);
    const Grid* m = mask ? &*mask : nullptr;
    detail::ExactSum total;
    for (std::size_t i = 0; i < cells; ++i) {
        const std::size_t r0 = i * p.h / cells, r1 = (i + 1) * p.h / cells;
        for (std::size_t j = 0; j < cells; ++j) {
            const std::size_t c0 = j * p.w / cells, c1 = (j + 1) * p.w / cells;
            detail::ExactSum d = detail::region_sum(p, m, r0, r1, c0, c1);
            d.add(detail::region_sum(g, m, r0, r1, c0, c1), true);
            total.add(d.abs());
        }
    }
    return total.value();
}

inline DensityMap ensemble_average(const DensityMap& a, const DensityMap& b) {
    if (a.grid.h != b.grid.h || a.grid.w != b.grid.w) throw UsageError("ensemble_average: grids differ in size");
    DensityMap out = a;
    for (std::size_t i = 0; i < out.grid.v.size(); ++i) out.grid.v[i] = 0.5f * (a.grid.v[i] + b.grid.v[i]);
    return out;
}

struct ImageRecord {
    std::string name;
    double pred_count = 0;
    double gt_count = 0;
    std::vector<double> game;  // index L; game[0] is the absolute error
};

struct MetricsReport {
    std::size_t n_images = 0;
    double mae = 0;
    double rmse = 0;
    std::map<unsigned, double> game;
    std::vector<ImageRecord> records;  // sorted by name
};

struct EvalItem {
    std::string name;
    DensityMap pred;
    DensityMap gt;
    std::optional<Grid> roi;  // overrides the dataset-wide ROI
};

/// Per-image metrics followed by a reduction in name order.
inline MetricsReport evaluate_maps(const std::vector<EvalItem>& items, unsigned game_max_level,
                                   const std::optional<Grid>& roi = std::nullopt) {
    if (items.empty()) throw UsageError("evaluation needs at least one scene");
    std::vector<ImageRecord> recs;
    for (const auto& it : items) {
        ImageRecord r;
        r.name = it.name;
        const std::optional<Grid>& mask = it.roi ? it.roi : roi;
        r.pred_count = count_from_density(it.pred, mask);
        r.gt_count = count_from_density(it.gt, mask);
        for (unsigned l = 0; l <= game_max_level; ++l) r.game.push_back(game(it.pred, it.gt, l, mask));
        recs.push_back(std::move(r));
    }
    std::sort(recs.begin(), recs.end(), [](const ImageRecord& a, const ImageRecord& b) { return a.name < b.name; });

    MetricsReport rep;
    rep.n_images = recs.size();
    const double n = static_cast<double>(recs.size());
    double sq = 0.0;
    for (unsigned l = 0; l <= game_max_level; ++l) {
        double s = 0.0;
        for (const auto& r : recs) s += r.game[l];
        rep.game[l] = s / n;
    }
    for (const auto& r : recs) sq += r.game[0] * r.game[0];
    rep.mae = rep.game[0];
    rep.rmse = std::max(std::sqrt(sq / n), rep.mae);
    rep.records = std::move(recs);
    return rep;
}

// ---------------------------------------------------------------------------------------------
// Inference

template <typename T>
struct Prediction {
    DensityMap density;  // ceil(h/2) x ceil(w/2)
    bool padded = false;
    std::size_t padded_h = 0, padded_w = 0;
};

/// Forward pass in eval mode. Images whose sides are not multiples of 16 are padded by edge
/// replication and the output is cropped back.
template <typename T>
Prediction<T> predict(Model<T>& model, const Image& img) {
    constexpr std::size_t kAlign = 16;
    if (model.training()) throw UsageError("predict: switch the model to eval mode first");
    const std::size_t ph = (img.h + kAlign - 1) / kAlign * kAlign;
    const std::size_t pw = (img.w + kAlign - 1) / kAlign * kAlign;
    Tensor<T> x(Shape{1, 3, ph, pw});
    for (std::size_t ch = 0; ch < 3; ++ch) {
        for (std::size_t r = 0; r < ph; ++r) {
            const std::size_t sr = std::min(r, img.h - 1);
            for (std::size_t c = 0; c < pw; ++c) x.at(0, ch, r, c) = img.at(ch, sr, std::min(c, img.w - 1));
        }
    }
    NoGradGuard guard;
    NetworkOutputs<T> out = model.forward(x);
    Prediction<T> p;
    p.padded = ph != img.h || pw != img.w;
    p.padded_h = ph;
    p.padded_w = pw;
    const std::size_t oh = (img.h + 1) / 2, ow = (img.w + 1) / 2;
    p.density = DensityMap{Grid(oh, ow), 0.5};
    for (std::size_t r = 0; r < oh; ++r) {
        for (std::size_t c = 0; c < ow; ++c) p.density.grid(r, c) = static_cast<float>(out.density.at(0, 0, r, c));
    }
    return p;
}

/// Predicts every scene (ensemble-averaged over the given models) and scores against rendered
/// ground truth. Scenes are processed in parallel; the reduction is order-free.
template <typename T>
MetricsReport evaluate_dataset(const std::vector<Model<T>*>& models, const std::vector<SceneAnnotation>& scenes,
                               double sigma, unsigned game_max_level, const std::optional<Grid>& roi = std::nullopt,
                               std::size_t threads = 1) {
    if (models.empty() || models.size() > 2) throw UsageError("evaluate_dataset takes one or two models");
    if (scenes.empty()) throw UsageError("evaluation needs at least one scene");
    for (const auto* m : models) {
        if (m->training()) throw UsageError("evaluate_dataset: models must be in eval mode");
    }
    std::vector<EvalItem> items(scenes.size());
    parallel_for(scenes.size(), threads, [&](std::size_t i) {
        const SceneAnnotation& s = scenes[i];
        if (s.image.h % 2 != 0 || s.image.w % 2 != 0) {
            throw DataError("scene '" + s.name + "': image dims must be even to score at half resolution");
        }
        DensityMap pred = predict(*models[0], s.image).density;
        if (models.size() == 2) pred = ensemble_average(pred, predict(*models[1], s.image).density);
        const TargetPair gt = target_pair(s.points, s.image.h, s.image.w, sigma);
        items[i] = EvalItem{s.name, std::move(pred), gt.density, s.roi};
    });
    return evaluate_maps(items, game_max_level, roi);
}

inline std::string report_csv(const MetricsReport& rep) {
    auto f = [](double v) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%.6f", v);
        return std::string(buf);
    };
    auto g = [&f](const std::vector<double>& v, std::size_t l) { return l < v.size() ? f(v[l]) : std::string(); };
    auto gm = [&f, &rep](unsigned l) { return rep.game.count(l) ? f(rep.game.at(l)) : std::string(); };
    std::string out = "image,pred_count,gt_count,abs_err,game1,game2,game3\n";
    double sp = 0, sg = 0;
    for (const auto& r : rep.records) {
        out += r.name + "," + f(r.pred_count) + "," + f(r.gt_count) + "," + f(r.game[0]) + "," + g(r.game, 1) + "," +
               g(r.game, 2) + "," + g(r.game, 3) + "\n";
        sp += r.pred_count;
        sg += r.gt_count;
    }
    const double n = static_cast<double>(std::max<std::size_t>(rep.n_images, 1));
    out += "MEAN," + f(sp / n) + "," + f(sg / n) + "," + f(rep.mae) + "," + gm(1) + "," + gm(2) + "," + gm(3) + "\n";
    return out;
}

inline std::string report_table(const MetricsReport& rep) {
    std::ostringstream os;
    char buf[96];
    os << "images  " << rep.n_images << "\n";
    std::snprintf(buf, sizeof(buf), "MAE     %.4f\nRMSE    %.4f\n", rep.mae, rep.rmse);
    os << buf;
    for (const auto& [l, v] : rep.game) {
        std::snprintf(buf, sizeof(buf), "GAME(%u) %.4f\n", l, v);
        os << buf;
    }
    return os.str();
}

}  // namespace crowdnet
