#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "crowdnet/crowdnet.hpp"

namespace testing_support {

using crowdnet::Shape;
using crowdnet::Tensor;

inline Tensor<double> random_tensor(Shape s, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0,
                                    bool grad = true) {
    std::uniform_real_distribution<double> u(lo, hi);
    Tensor<double> t(s);
    for (auto& v : t.values()) v = u(rng);
    t.set_requires_grad(grad);
    return t;
}

/// Weighted sum of a tensor with fixed random weights: a generic scalar probe for gradient checks.
inline Tensor<double> probe(const Tensor<double>& y, std::uint64_t seed = 99) {
    std::mt19937_64 rng(seed);
    Tensor<double> r = random_tensor(y.shape(), rng, -1.0, 1.0, false);
    return crowdnet::sum(crowdnet::mul(y, r));
}

struct GradCheckResult {
    std::size_t checked = 0;
    std::size_t passed = 0;
    std::size_t kinks = 0;
    double worst = 0.0;
    std::string worst_where;
    struct Failure {
        std::size_t input, index;
        double analytic, numeric;
    };
    std::vector<Failure> failures;

    double pass_rate() const { return checked ? static_cast<double>(passed) / static_cast<double>(checked) : 1.0; }
};

/// Central differences on up to `samples` randomly chosen entries of each input, compared with the
/// reverse-mode gradient. An entry passes when |a - n| / max(|a|, |n|, floor) <= tol, or when |a - n| is
/// below the central-difference roundoff bound 64 |L| eps / h.
/// When the one-sided slopes disagree (a ReLU or max-pool switch inside the stencil) the step is
/// shrunk by 4x, up to `refinements` times; such entries are counted in `kinks`.
inline GradCheckResult grad_check(const std::function<Tensor<double>()>& loss_fn, std::vector<Tensor<double>> inputs,
                                  std::size_t samples = 24, double tol = 1e-3, double h = 1e-6,
                                  double floor = 1e-6, std::uint64_t seed = 5, int refinements = 3) {
    for (auto& in : inputs) in.zero_grad();
    Tensor<double> loss = loss_fn();
    loss.backward();
    const double base = loss.item();
    std::vector<std::vector<double>> analytic;
    for (auto& in : inputs) {
        analytic.emplace_back(in.has_grad() ? std::vector<double>(in.grad().begin(), in.grad().end())
                                            : std::vector<double>(in.numel(), 0.0));
    }

    std::mt19937_64 rng(seed);
    GradCheckResult res;
    crowdnet::NoGradGuard guard;
    const double eps = std::numeric_limits<double>::epsilon();
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        auto& vals = inputs[k].values();
        std::vector<std::size_t> idx(vals.size());
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
        std::shuffle(idx.begin(), idx.end(), rng);
        idx.resize(std::min(samples, idx.size()));
        for (const std::size_t i : idx) {
            const double orig = vals[i];
            const double a = analytic[k][i];
            double step = h;
            double err = 0.0;
            double numeric = 0.0;
            for (int r = 0;; ++r) {
                vals[i] = orig + step;
                const double up = loss_fn().item();
                vals[i] = orig - step;
                const double down = loss_fn().item();
                vals[i] = orig;
                numeric = (up - down) / (2.0 * step);
                const double noise = 64.0 * std::abs(base) * eps / step;
                const double scale = std::max({std::abs(a), std::abs(numeric), floor});
                err = std::abs(a - numeric) <= noise ? 0.0 : std::abs(a - numeric) / scale;
                const double fwd = (up - base) / step;
                const double bwd = (base - down) / step;
                const bool kink = std::abs(fwd - bwd) > tol * scale + 4.0 * noise;
                if (err <= tol || !kink || r == refinements) break;
                if (r == 0) ++res.kinks;
                step /= 4.0;
            }
            ++res.checked;
            if (err <= tol) ++res.passed;
            else res.failures.push_back({k, i, a, numeric});
            if (err > res.worst) {
                res.worst = err;
                res.worst_where = "input " + std::to_string(k) + " index " + std::to_string(i);
            }
        }
    }
    return res;
}

/// Fresh empty directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        static std::mt19937_64 rng(std::random_device{}());
        path_ = std::filesystem::temp_directory_path() / ("crowdnet_" + tag + "_" + std::to_string(rng()));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    std::string str() const { return path_.string(); }
    std::string operator/(const std::string& name) const { return (path_ / name).string(); }

private:
    std::filesystem::path path_;
};

inline std::vector<crowdnet::SceneAnnotation> synth_scenes(std::size_t count, std::size_t h, std::size_t w,
                                                           std::uint64_t seed, std::size_t heads_min = 5,
                                                           std::size_t heads_max = 20) {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::size_t> heads(heads_min, heads_max);
    std::vector<crowdnet::SceneAnnotation> out;
    for (std::size_t i = 0; i < count; ++i) {
        const auto style = i % 2 == 0 ? crowdnet::SceneStyle::uniform : crowdnet::SceneStyle::perspective;
        auto s = crowdnet::synth_scene(rng, heads(rng), h, w, style);
        s.name = "scene" + std::to_string(i);
        out.push_back(std::move(s));
    }
    return out;
}

}  // namespace testing_support
