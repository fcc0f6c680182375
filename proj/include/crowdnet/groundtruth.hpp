#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "crowdnet/errors.hpp"
#include "crowdnet/image_io.hpp"

namespace crowdnet {

/// An image with its head annotations and an optional evaluation mask (full resolution, 0/1).
struct SceneAnnotation {
    std::string name;
    Image image;
    std::vector<Point> points;
    std::optional<Grid> roi;

    std::size_t head_count() const { return points.size(); }
};

/// Crowd density; `scale` is the grid resolution relative to the image (1 or 0.5).
struct DensityMap {
    Grid grid;
    double scale = 1.0;
};

/// Binary crowd-region mask derived from a density map.
struct AttentionMap {
    Grid grid;
};

inline constexpr float kAttentionThreshold = 0.001f;

/// Gaussian widths of the dataset presets.
inline double sigma_preset(const std::string& dataset) {
    if (dataset == "sha" || dataset == "shb" || dataset == "shanghaitech") return 5.0;
    if (dataset == "ucf50" || dataset == "ucf_cc_50") return 4.0;
    if (dataset == "we" || dataset == "worldexpo") return 4.0;
    if (dataset == "trancos") return 10.0;
    if (dataset == "brt") return 5.0;
    throw UsageError("unknown dataset preset '" + dataset + "'");
}

inline void check_points(const std::vector<Point>& points, std::size_t h, std::size_t w) {
    for (std::size_t i = 0; i < points.size(); ++i) {
        const auto& p = points[i];
        if (!(p.x >= 0.0 && p.x < static_cast<double>(w) && p.y >= 0.0 && p.y < static_cast<double>(h))) {
            throw DataError("point " + std::to_string(i) + " at (" + format_coord(p.x) + ", " + format_coord(p.y) +
                            ") lies outside the " + std::to_string(h) + "x" + std::to_string(w) + " image");
        }
    }
}

/// Sum of per-head Gaussians. Each kernel spans (2*ceil(3 sigma)+1)^2 pixels around the head, is
/// clipped to the image, and is renormalized so every head contributes exactly one unit of mass.
inline DensityMap render_density(const std::vector<Point>& points, std::size_t h, std::size_t w, double sigma) {
    if (!(sigma > 0.0)) throw UsageError("render_density: sigma must be positive");
    check_points(points, h, w);
    const long radius = static_cast<long>(std::ceil(3.0 * sigma));
    std::vector<double> acc(h * w, 0.0);
    std::vector<double> kernel;
    for (const auto& p : points) {
        const long cx = std::clamp(static_cast<long>(std::floor(p.x + 0.5)), 0L, static_cast<long>(w) - 1);
        const long cy = std::clamp(static_cast<long>(std::floor(p.y + 0.5)), 0L, static_cast<long>(h) - 1);
        const long r0 = std::max(0L, cy - radius), r1 = std::min(static_cast<long>(h) - 1, cy + radius);
        const long c0 = std::max(0L, cx - radius), c1 = std::min(static_cast<long>(w) - 1, cx + radius);
        kernel.assign(static_cast<std::size_t>((r1 - r0 + 1) * (c1 - c0 + 1)), 0.0);
        double total = 0.0;
        std::size_t k = 0;
        for (long r = r0; r <= r1; ++r) {
            for (long c = c0; c <= c1; ++c) {
                const double dx = static_cast<double>(c) - p.x;
                const double dy = static_cast<double>(r) - p.y;
                kernel[k] = std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
                total += kernel[k++];
            }
        }
        k = 0;
        for (long r = r0; r <= r1; ++r) {
            for (long c = c0; c <= c1; ++c) acc[static_cast<std::size_t>(r) * w + static_cast<std::size_t>(c)] += kernel[k++] / total;
        }
    }
    DensityMap d{Grid(h, w), 1.0};
    for (std::size_t i = 0; i < acc.size(); ++i) d.grid.v[i] = static_cast<float>(acc[i]);
    return d;
}

/// 1 where density >= 0.001, else 0.
inline AttentionMap render_attention(const DensityMap& d) {
    if (d.scale != 1.0) throw UsageError("render_attention expects a full-resolution density map");
    AttentionMap a{Grid(d.grid.h, d.grid.w)};
    for (std::size_t i = 0; i < d.grid.v.size(); ++i) a.grid.v[i] = d.grid.v[i] >= kAttentionThreshold ? 1.0f : 0.0f;
    return a;
}

/// Window-sum downsampling by 2 (mass preserving).
inline Grid sum_pool2x2(const Grid& g) {
    if (g.h % 2 != 0 || g.w % 2 != 0) throw UsageError("sum_pool2x2: grid dims must be even");
    Grid out(g.h / 2, g.w / 2);
    for (std::size_t r = 0; r < out.h; ++r) {
        for (std::size_t c = 0; c < out.w; ++c) {
            out(r, c) = (g(2 * r, 2 * c) + g(2 * r, 2 * c + 1)) + (g(2 * r + 1, 2 * c) + g(2 * r + 1, 2 * c + 1));
        }
    }
    return out;
}

inline Grid max_pool2x2(const Grid& g) {
    if (g.h % 2 != 0 || g.w % 2 != 0) throw UsageError("max_pool2x2: grid dims must be even");
    Grid out(g.h / 2, g.w / 2);
    for (std::size_t r = 0; r < out.h; ++r) {
        for (std::size_t c = 0; c < out.w; ++c) {
            out(r, c) = std::max(std::max(g(2 * r, 2 * c), g(2 * r, 2 * c + 1)),
                                 std::max(g(2 * r + 1, 2 * c), g(2 * r + 1, 2 * c + 1)));
        }
    }
    return out;
}

struct TargetPair {
    DensityMap density;      // 1/2 scale
    AttentionMap attention;  // 1/2 scale
};

/// Training targets on the half-resolution prediction grid. The threshold is applied at full
/// resolution and then max-pooled.
inline TargetPair target_pair(const std::vector<Point>& points, std::size_t h, std::size_t w, double sigma) {
    if (h % 2 != 0 || w % 2 != 0) {
        throw UsageError("target_pair: image dims " + std::to_string(h) + "x" + std::to_string(w) + " must be even");
    }
    const DensityMap full = render_density(points, h, w, sigma);
    const AttentionMap mask = render_attention(full);
    return {DensityMap{sum_pool2x2(full.grid), 0.5}, AttentionMap{max_pool2x2(mask.grid)}};
}

enum class SceneStyle { uniform, perspective };

/// Synthetic crowd: textured background plus one shaded head blob per point. With the perspective
/// style heads cluster toward the bottom rows and grow with the row index.
inline SceneAnnotation synth_scene(std::mt19937_64& rng, std::size_t n_heads, std::size_t h, std::size_t w,
                                   SceneStyle style) {
    if (h < 32 || w < 32) throw UsageError("synth_scene: image must be at least 32x32");
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    SceneAnnotation scene;
    scene.image = Image(h, w);

    // Background: a colour gradient plus a few low-frequency waves and per-pixel grain.
    double base[3], tilt[3];
    for (int c = 0; c < 3; ++c) {
        base[c] = 0.45 + 0.25 * unit(rng);
        tilt[c] = 0.2 * (unit(rng) - 0.5);
    }
    struct Wave {
        double fx, fy, phase, amp;
    };
    std::vector<Wave> waves(3);
    for (auto& wv : waves) wv = {0.02 + 0.1 * unit(rng), 0.02 + 0.1 * unit(rng), 6.283 * unit(rng), 0.04 * unit(rng)};
    for (std::size_t r = 0; r < h; ++r) {
        for (std::size_t c = 0; c < w; ++c) {
            double tex = 0.0;
            for (const auto& wv : waves) tex += wv.amp * std::sin(wv.fx * c + wv.fy * r + wv.phase);
            const double grain = 0.03 * (unit(rng) - 0.5);
            for (std::size_t ch = 0; ch < 3; ++ch) {
                const double v = base[ch] + tilt[ch] * (static_cast<double>(r) / h) + tex + grain;
                scene.image.at(ch, r, c) = static_cast<float>(std::clamp(v, 0.0, 1.0));
            }
        }
    }

    for (std::size_t i = 0; i < n_heads; ++i) {
        double x = unit(rng) * w;
        double y;
        if (style == SceneStyle::perspective) {
            y = std::sqrt(unit(rng)) * h;  // density grows linearly with the row index
        } else {
            y = unit(rng) * h;
        }
        x = std::min(x, std::nextafter(static_cast<double>(w), 0.0));
        y = std::min(y, std::nextafter(static_cast<double>(h), 0.0));
        scene.points.push_back({x, y});
    }

    for (const auto& p : scene.points) {
        const double radius = style == SceneStyle::perspective ? 2.0 + 3.0 * (p.y / h) : 3.0;
        const double shade = 0.05 + 0.15 * unit(rng);
        const double rim = radius * 1.8;
        const long r0 = std::max(0L, static_cast<long>(p.y - rim)), r1 = std::min<long>(h - 1, static_cast<long>(p.y + rim));
        const long c0 = std::max(0L, static_cast<long>(p.x - rim)), c1 = std::min<long>(w - 1, static_cast<long>(p.x + rim));
        for (long r = r0; r <= r1; ++r) {
            for (long c = c0; c <= c1; ++c) {
                const double dx = c - p.x, dy = r - p.y;
                const double alpha = std::exp(-(dx * dx + dy * dy) / (2.0 * radius * radius));
                for (std::size_t ch = 0; ch < 3; ++ch) {
                    float& px = scene.image.at(ch, static_cast<std::size_t>(r), static_cast<std::size_t>(c));
                    px = static_cast<float>((1.0 - alpha) * px + alpha * shade);
                }
            }
        }
    }
    return scene;
}

/// Random geometric and photometric augmentation. crop_h/crop_w of 0 mean "full image" (no resize,
/// no crop).
struct AugmentConfig {
    std::size_t crop_h = 0;
    std::size_t crop_w = 0;
    double resize_lo = 0.9;
    double resize_hi = 1.1;
    double flip_prob = 0.5;
    double gamma_lo = 0.8;
    double gamma_hi = 1.25;
    double gamma_prob = 0.3;

    void validate() const {
        if (resize_lo > resize_hi || !(resize_lo > 0.0)) throw UsageError("augment: bad resize range");
        if (gamma_lo > gamma_hi || !(gamma_lo > 0.0)) throw UsageError("augment: bad gamma range");
        if (flip_prob < 0.0 || flip_prob > 1.0 || gamma_prob < 0.0 || gamma_prob > 1.0) {
            throw UsageError("augment: probabilities must lie in [0, 1]");
        }
        if (crop_h % 16 != 0 || crop_w % 16 != 0) throw UsageError("augment: crop dims must be multiples of 16");
    }
};

struct AugmentedSample {
    Image image;
    std::vector<Point> points;
    TargetPair targets;
};

/// Bilinear image resize with half-pixel centers.
inline Image resize_image(const Image& img, std::size_t out_h, std::size_t out_w) {
    Image out(out_h, out_w);
    auto taps = [](std::size_t in, std::size_t out_len) {
        std::vector<std::pair<std::size_t, double>> t(out_len);
        const double ratio = static_cast<double>(in) / out_len;
        for (std::size_t d = 0; d < out_len; ++d) {
            const double src = std::clamp((d + 0.5) * ratio - 0.5, 0.0, static_cast<double>(in - 1));
            const auto i0 = static_cast<std::size_t>(std::floor(src));
            t[d] = {i0, src - i0};
        }
        return t;
    };
    const auto ty = taps(img.h, out_h);
    const auto tx = taps(img.w, out_w);
    for (std::size_t ch = 0; ch < 3; ++ch) {
        for (std::size_t r = 0; r < out_h; ++r) {
            const auto [y0, fy] = ty[r];
            const std::size_t y1 = std::min(y0 + 1, img.h - 1);
            for (std::size_t c = 0; c < out_w; ++c) {
                const auto [x0, fx] = tx[c];
                const std::size_t x1 = std::min(x0 + 1, img.w - 1);
                const double v = (1 - fy) * ((1 - fx) * img.at(ch, y0, x0) + fx * img.at(ch, y0, x1)) +
                                 fy * ((1 - fx) * img.at(ch, y1, x0) + fx * img.at(ch, y1, x1));
                out.at(ch, r, c) = static_cast<float>(v);
            }
        }
    }
    return out;
}

inline Image flip_horizontal(const Image& img) {
    Image out(img.h, img.w);
    for (std::size_t ch = 0; ch < 3; ++ch) {
        for (std::size_t r = 0; r < img.h; ++r) {
            for (std::size_t c = 0; c < img.w; ++c) out.at(ch, r, c) = img.at(ch, r, img.w - 1 - c);
        }
    }
    return out;
}

inline std::vector<Point> flip_points(const std::vector<Point>& points, std::size_t w) {
    std::vector<Point> out;
    for (const auto& p : points) {
        // Mirror about the image centre line; keep the result strictly inside [0, w).
        const double x = std::clamp(static_cast<double>(w) - 1.0 - p.x, 0.0, std::nextafter(static_cast<double>(w), 0.0));
        out.push_back({x, p.y});
    }
    return out;
}

inline Image adjust_gamma(const Image& img, double gamma) {
    Image out = img;
    for (auto& v : out.rgb) v = static_cast<float>(std::pow(static_cast<double>(v), gamma));
    return out;
}

/// Resize, crop, flip and gamma-adjust a scene. Targets are rendered from the transformed head list,
/// so the density mass equals the number of heads whose centres fall inside the crop.
inline AugmentedSample augment(const SceneAnnotation& scene, const AugmentConfig& cfg, double sigma,
                               std::mt19937_64& rng) {
    cfg.validate();
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const bool full_image = cfg.crop_h == 0 || cfg.crop_w == 0;

    Image img = scene.image;
    std::vector<Point> points = scene.points;

    if (!full_image) {
        const double u = cfg.resize_lo + (cfg.resize_hi - cfg.resize_lo) * unit(rng);
        const auto rh = static_cast<std::size_t>(std::lround(img.h * u));
        const auto rw = static_cast<std::size_t>(std::lround(img.w * u));
        if (cfg.crop_h > rh || cfg.crop_w > rw) {
            throw UsageError("augment: crop " + std::to_string(cfg.crop_h) + "x" + std::to_string(cfg.crop_w) +
                             " larger than resized image " + std::to_string(rh) + "x" + std::to_string(rw));
        }
        if (rh != img.h || rw != img.w) {
            const double sy = static_cast<double>(rh) / img.h, sx = static_cast<double>(rw) / img.w;
            for (auto& p : points) {
                p.x = std::clamp((p.x + 0.5) * sx - 0.5, 0.0, std::nextafter(static_cast<double>(rw), 0.0));
                p.y = std::clamp((p.y + 0.5) * sy - 0.5, 0.0, std::nextafter(static_cast<double>(rh), 0.0));
            }
            img = resize_image(img, rh, rw);
        }
        std::uniform_int_distribution<std::size_t> top_d(0, rh - cfg.crop_h), left_d(0, rw - cfg.crop_w);
        const std::size_t top = top_d(rng), left = left_d(rng);
        Image crop(cfg.crop_h, cfg.crop_w);
        for (std::size_t ch = 0; ch < 3; ++ch) {
            for (std::size_t r = 0; r < cfg.crop_h; ++r) {
                for (std::size_t c = 0; c < cfg.crop_w; ++c) crop.at(ch, r, c) = img.at(ch, top + r, left + c);
            }
        }
        std::vector<Point> kept;
        for (const auto& p : points) {
            const double x = p.x - static_cast<double>(left), y = p.y - static_cast<double>(top);
            if (x >= 0.0 && x < static_cast<double>(cfg.crop_w) && y >= 0.0 && y < static_cast<double>(cfg.crop_h)) {
                kept.push_back({x, y});
            }
        }
        img = std::move(crop);
        points = std::move(kept);
    }

    if (unit(rng) < cfg.flip_prob) {
        img = flip_horizontal(img);
        points = flip_points(points, img.w);
    }
    const double gamma_draw = cfg.gamma_lo + (cfg.gamma_hi - cfg.gamma_lo) * unit(rng);
    if (unit(rng) < cfg.gamma_prob) img = adjust_gamma(img, gamma_draw);

    AugmentedSample out;
    out.targets = target_pair(points, img.h, img.w, sigma);
    out.image = std::move(img);
    out.points = std::move(points);
    return out;
}

}  // namespace crowdnet
