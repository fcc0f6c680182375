#pragma once

// Differentiable NCHW operators. Every op validates shapes up front, computes its forward values in
// a fixed loop order, and records a backward closure through make_result().

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "crowdnet/tensor.hpp"

namespace crowdnet {

/// Argmax positions recorded by max_pool2x2: one flat spatial index (h * W + w of the pre-pool
/// plane) per pooled output cell.
struct PoolIndices {
    Shape shape;
    std::size_t in_h = 0;
    std::size_t in_w = 0;
    std::vector<std::uint32_t> flat_index;
};

/// Tallies conv multiply-accumulates while alive (per thread). Used to cross-check the analytic
/// MAC counter against an actual forward pass.
class MacTally {
public:
    MacTally() : previous_(current()) { current() = &count_; }
    ~MacTally() { current() = previous_; }
    MacTally(const MacTally&) = delete;
    MacTally& operator=(const MacTally&) = delete;

    std::uint64_t count() const { return count_; }

    static void add(std::uint64_t macs) {
        if (current() != nullptr) *current() += macs;
    }

private:
    static std::uint64_t*& current() {
        thread_local std::uint64_t* ptr = nullptr;
        return ptr;
    }
    std::uint64_t count_ = 0;
    std::uint64_t* previous_;
};

namespace detail {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMatrix<T>>;

inline void require(bool ok, const std::string& msg) {
    if (!ok) throw UsageError(msg);
}

struct ConvGeometry {
    std::size_t c_in, h, w, k, stride, pad, dil, h_out, w_out;
    bool pointwise() const { return k == 1 && stride == 1 && pad == 0; }
};

// cols: (c_in*k*k) x (h_out*w_out), row = (ci, ky, kx)
template <typename T>
void im2col(const T* x, const ConvGeometry& g, T* cols) {
    const std::size_t p = g.h_out * g.w_out;
    for (std::size_t ci = 0; ci < g.c_in; ++ci) {
        const T* plane = x + ci * g.h * g.w;
        for (std::size_t ky = 0; ky < g.k; ++ky) {
            for (std::size_t kx = 0; kx < g.k; ++kx) {
                T* row = cols + ((ci * g.k + ky) * g.k + kx) * p;
                const long off_y = static_cast<long>(ky * g.dil) - static_cast<long>(g.pad);
                const long off_x = static_cast<long>(kx * g.dil) - static_cast<long>(g.pad);
                for (std::size_t oy = 0; oy < g.h_out; ++oy) {
                    const long iy = static_cast<long>(oy * g.stride) + off_y;
                    T* dst = row + oy * g.w_out;
                    if (iy < 0 || iy >= static_cast<long>(g.h)) {
                        std::fill(dst, dst + g.w_out, T(0));
                        continue;
                    }
                    const T* src = plane + static_cast<std::size_t>(iy) * g.w;
                    for (std::size_t ox = 0; ox < g.w_out; ++ox) {
                        const long ix = static_cast<long>(ox * g.stride) + off_x;
                        dst[ox] = (ix < 0 || ix >= static_cast<long>(g.w)) ? T(0)
                                                                            : src[static_cast<std::size_t>(ix)];
                    }
                }
            }
        }
    }
}

template <typename T>
void col2im(const T* cols, const ConvGeometry& g, T* dx) {
    const std::size_t p = g.h_out * g.w_out;
    for (std::size_t ci = 0; ci < g.c_in; ++ci) {
        T* plane = dx + ci * g.h * g.w;
        for (std::size_t ky = 0; ky < g.k; ++ky) {
            for (std::size_t kx = 0; kx < g.k; ++kx) {
                const T* row = cols + ((ci * g.k + ky) * g.k + kx) * p;
                const long off_y = static_cast<long>(ky * g.dil) - static_cast<long>(g.pad);
                const long off_x = static_cast<long>(kx * g.dil) - static_cast<long>(g.pad);
                for (std::size_t oy = 0; oy < g.h_out; ++oy) {
                    const long iy = static_cast<long>(oy * g.stride) + off_y;
                    if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
                    T* dst = plane + static_cast<std::size_t>(iy) * g.w;
                    const T* src = row + oy * g.w_out;
                    for (std::size_t ox = 0; ox < g.w_out; ++ox) {
                        const long ix = static_cast<long>(ox * g.stride) + off_x;
                        if (ix >= 0 && ix < static_cast<long>(g.w)) dst[static_cast<std::size_t>(ix)] += src[ox];
                    }
                }
            }
        }
    }
}

}  // namespace detail

/// 2-D cross-correlation with stride, zero padding and dilation. `w` is (c_out, c_in, k, k);
/// `b`, when given, holds c_out values.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const std::optional<Tensor<T>>& b,
                 std::size_t stride = 1, std::size_t padding = 0, std::size_t dilation = 1) {
    using detail::require;
    const Shape xs = x.shape();
    const Shape ws = w.shape();
    require(ws.h == ws.w, "conv2d: kernel must be square, got " + ws.str());
    require(xs.c == ws.c, "conv2d: input has " + std::to_string(xs.c) + " channels but weight expects c_in=" +
                              std::to_string(ws.c) + " (weight shape " + ws.str() + ")");
    require(stride >= 1, "conv2d: stride must be >= 1");
    require(dilation >= 1, "conv2d: dilation must be >= 1");
    const std::size_t k = ws.h;
    const long span = static_cast<long>(dilation * (k - 1) + 1);
    const long eff_h = static_cast<long>(xs.h + 2 * padding) - span;
    const long eff_w = static_cast<long>(xs.w + 2 * padding) - span;
    require(eff_h >= 0 && eff_w >= 0,
            "conv2d: non-positive output size for input " + xs.str() + " with kernel " + std::to_string(k) +
                ", padding " + std::to_string(padding) + ", dilation " + std::to_string(dilation));
    if (b) {
        require(b->numel() == ws.n, "conv2d: bias has " + std::to_string(b->numel()) + " values, expected c_out=" +
                                        std::to_string(ws.n));
    }

    const detail::ConvGeometry g{xs.c, xs.h, xs.w, k, stride, padding, dilation,
                                 static_cast<std::size_t>(eff_h) / stride + 1,
                                 static_cast<std::size_t>(eff_w) / stride + 1};
    const std::size_t c_out = ws.n;
    const std::size_t kdim = g.c_in * k * k;
    const std::size_t p = g.h_out * g.w_out;
    const Shape ys{xs.n, c_out, g.h_out, g.w_out};
    MacTally::add(static_cast<std::uint64_t>(xs.n) * c_out * kdim * p);

    std::vector<T> y(ys.numel());
    std::vector<T> cols(g.pointwise() ? 0 : kdim * p);
    detail::ConstMatMap<T> wm(w.values().data(), c_out, kdim);
    for (std::size_t n = 0; n < xs.n; ++n) {
        const T* xin = x.values().data() + n * xs.c * xs.plane();
        const T* src = xin;
        if (!g.pointwise()) {
            detail::im2col(xin, g, cols.data());
            src = cols.data();
        }
        detail::MatMap<T> out(y.data() + n * c_out * p, c_out, p);
        out.noalias() = wm * detail::ConstMatMap<T>(src, kdim, p);
        if (b) {
            for (std::size_t co = 0; co < c_out; ++co) out.row(co).array() += b->values()[co];
        }
    }

    std::vector<Tensor<T>> inputs{x, w};
    if (b) inputs.push_back(*b);
    const bool has_bias = b.has_value();
    return make_result<T>("conv2d", ys, std::move(y), std::move(inputs), [g, c_out, has_bias](auto& self) {
        auto& xn = *self.parents[0];
        auto& wn = *self.parents[1];
        const std::size_t kdim = g.c_in * g.k * g.k;
        const std::size_t p = g.h_out * g.w_out;
        const std::size_t batch = xn.shape.n;
        const std::size_t in_stride = g.c_in * g.h * g.w;
        std::vector<T> cols(g.pointwise() ? 0 : kdim * p);
        detail::ConstMatMap<T> wm(wn.data.data(), c_out, kdim);
        for (std::size_t n = 0; n < batch; ++n) {
            detail::ConstMatMap<T> dy(self.grad.data() + n * c_out * p, c_out, p);
            if (wn.requires_grad) {
                const T* src = xn.data.data() + n * in_stride;
                if (!g.pointwise()) {
                    detail::im2col(src, g, cols.data());
                    src = cols.data();
                }
                detail::MatMap<T> dw(wn.grad.data(), c_out, kdim);
                dw.noalias() += dy * detail::ConstMatMap<T>(src, kdim, p).transpose();
            }
            if (has_bias && self.parents[2]->requires_grad) {
                auto& bg = self.parents[2]->grad;
                for (std::size_t co = 0; co < c_out; ++co) bg[co] += dy.row(co).sum();
            }
            if (xn.requires_grad) {
                if (g.pointwise()) {
                    detail::MatMap<T> dx(xn.grad.data() + n * in_stride, kdim, p);
                    dx.noalias() += wm.transpose() * dy;
                } else {
                    detail::MatMap<T> dcols(cols.data(), kdim, p);
                    dcols.noalias() = wm.transpose() * dy;
                    detail::col2im(cols.data(), g, xn.grad.data() + n * in_stride);
                }
            }
        }
    });
}

enum class NormMode { train, eval };

/// Per-channel batch normalization. In train mode the batch statistics over (n, h, w) normalize the
/// input and the running buffers are updated in place (momentum-weighted, unbiased variance).
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, Tensor<T>& running_mean,
                     Tensor<T>& running_var, NormMode mode, T momentum = T(0.1), T eps = T(1e-5)) {
    using detail::require;
    const Shape xs = x.shape();
    const std::size_t c = xs.c;
    for (const Tensor<T>* t : {&gamma, &beta, static_cast<const Tensor<T>*>(&running_mean),
                                static_cast<const Tensor<T>*>(&running_var)}) {
        require(t->numel() == c, "batch_norm: per-channel parameter has " + std::to_string(t->numel()) +
                                     " values but input has " + std::to_string(c) + " channels");
    }
    require(eps >= T(0), "batch_norm: eps must be non-negative");
    const std::size_t plane = xs.plane();
    const std::size_t count = xs.n * plane;
    require(count > 0, "batch_norm: empty input");

    std::vector<T> mean(c), inv_std(c);
    if (mode == NormMode::train) {
        for (std::size_t ch = 0; ch < c; ++ch) {
            T sum = 0;
            for (std::size_t n = 0; n < xs.n; ++n) {
                const T* src = x.values().data() + (n * c + ch) * plane;
                for (std::size_t i = 0; i < plane; ++i) sum += src[i];
            }
            const T mu = sum / static_cast<T>(count);
            T sq = 0;
            for (std::size_t n = 0; n < xs.n; ++n) {
                const T* src = x.values().data() + (n * c + ch) * plane;
                for (std::size_t i = 0; i < plane; ++i) sq += (src[i] - mu) * (src[i] - mu);
            }
            const T var = sq / static_cast<T>(count);
            mean[ch] = mu;
            inv_std[ch] = T(1) / std::sqrt(var + eps);
            const T unbiased = count > 1 ? sq / static_cast<T>(count - 1) : var;
            running_mean.values()[ch] = (T(1) - momentum) * running_mean.values()[ch] + momentum * mu;
            running_var.values()[ch] = (T(1) - momentum) * running_var.values()[ch] + momentum * unbiased;
        }
    } else {
        for (std::size_t ch = 0; ch < c; ++ch) {
            mean[ch] = running_mean.values()[ch];
            inv_std[ch] = T(1) / std::sqrt(running_var.values()[ch] + eps);
        }
    }

    std::vector<T> y(xs.numel());
    std::vector<T> xhat(xs.numel());
    for (std::size_t n = 0; n < xs.n; ++n) {
        for (std::size_t ch = 0; ch < c; ++ch) {
            const std::size_t base = (n * c + ch) * plane;
            const T g = gamma.values()[ch];
            const T bt = beta.values()[ch];
            for (std::size_t i = 0; i < plane; ++i) {
                const T v = (x.values()[base + i] - mean[ch]) * inv_std[ch];
                xhat[base + i] = v;
                y[base + i] = g * v + bt;
            }
        }
    }

    const bool train = mode == NormMode::train;
    return make_result<T>(
        "batch_norm", xs, std::move(y), {x, gamma, beta},
        [xhat = std::move(xhat), inv_std = std::move(inv_std), xs, train](auto& self) {
            auto& xn = *self.parents[0];
            auto& gn = *self.parents[1];
            auto& bn = *self.parents[2];
            const std::size_t c = xs.c;
            const std::size_t plane = xs.plane();
            const T count = static_cast<T>(xs.n * plane);
            for (std::size_t ch = 0; ch < c; ++ch) {
                T sum_dy = 0, sum_dy_xhat = 0;
                for (std::size_t n = 0; n < xs.n; ++n) {
                    const std::size_t base = (n * c + ch) * plane;
                    for (std::size_t i = 0; i < plane; ++i) {
                        sum_dy += self.grad[base + i];
                        sum_dy_xhat += self.grad[base + i] * xhat[base + i];
                    }
                }
                if (gn.requires_grad) gn.grad[ch] += sum_dy_xhat;
                if (bn.requires_grad) bn.grad[ch] += sum_dy;
                if (!xn.requires_grad) continue;
                const T scale = gn.data[ch] * inv_std[ch];
                for (std::size_t n = 0; n < xs.n; ++n) {
                    const std::size_t base = (n * c + ch) * plane;
                    for (std::size_t i = 0; i < plane; ++i) {
                        const T dy = self.grad[base + i];
                        xn.grad[base + i] +=
                            train ? scale * (dy - sum_dy / count - xhat[base + i] * sum_dy_xhat / count)
                                  : scale * dy;
                    }
                }
            }
        });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
    std::vector<T> y(x.values());
    for (auto& v : y) v = v > T(0) ? v : T(0);
    return make_result<T>("relu", x.shape(), std::move(y), {x}, [](auto& self) {
        auto& xn = *self.parents[0];
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            if (xn.data[i] > T(0)) xn.grad[i] += self.grad[i];
        }
    });
}

/// Logistic function. Outputs are clamped to [eps, 1 - eps] so they stay strictly inside (0, 1)
/// under saturation.
template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
    constexpr T lo = std::numeric_limits<T>::epsilon();
    constexpr T hi = T(1) - std::numeric_limits<T>::epsilon();
    std::vector<T> y(x.values());
    for (auto& v : y) {
        const T s = v >= T(0) ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v));
        v = std::clamp(s, lo, hi);
    }
    return make_result<T>("sigmoid", x.shape(), std::move(y), {x}, [](auto& self) {
        auto& xn = *self.parents[0];
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            const T s = self.data[i];
            xn.grad[i] += self.grad[i] * s * (T(1) - s);
        }
    });
}

/// 2x2 max pooling with stride 2. Ties resolve to the smallest flat index of the window.
template <typename T>
std::pair<Tensor<T>, PoolIndices> max_pool2x2(const Tensor<T>& x) {
    const Shape xs = x.shape();
    detail::require(xs.h % 2 == 0 && xs.w % 2 == 0,
                    "max_pool2x2: spatial dims must be even, got " + std::to_string(xs.h) + "x" +
                        std::to_string(xs.w) + "; pad or crop the input first");
    const Shape ys{xs.n, xs.c, xs.h / 2, xs.w / 2};
    PoolIndices idx{ys, xs.h, xs.w, std::vector<std::uint32_t>(ys.numel())};
    std::vector<T> y(ys.numel());
    for (std::size_t nc = 0; nc < xs.n * xs.c; ++nc) {
        const T* src = x.values().data() + nc * xs.plane();
        for (std::size_t oy = 0; oy < ys.h; ++oy) {
            for (std::size_t ox = 0; ox < ys.w; ++ox) {
                std::size_t best = (2 * oy) * xs.w + 2 * ox;
                for (const std::size_t cand : {best + 1, best + xs.w, best + xs.w + 1}) {
                    if (src[cand] > src[best]) best = cand;
                }
                const std::size_t o = nc * ys.plane() + oy * ys.w + ox;
                y[o] = src[best];
                idx.flat_index[o] = static_cast<std::uint32_t>(best);
            }
        }
    }
    auto routed = idx.flat_index;
    Tensor<T> out = make_result<T>("max_pool2x2", ys, std::move(y), {x},
                                   [routed = std::move(routed), xs, ys](auto& self) {
                                       auto& xn = *self.parents[0];
                                       for (std::size_t o = 0; o < ys.numel(); ++o) {
                                           const std::size_t nc = o / ys.plane();
                                           xn.grad[nc * xs.plane() + routed[o]] += self.grad[o];
                                       }
                                   });
    return {std::move(out), std::move(idx)};
}

/// Scatters x back to the argmax positions of a previous max_pool2x2; all other cells are zero.
template <typename T>
Tensor<T> max_unpool2x2(const Tensor<T>& x, const PoolIndices& idx, std::size_t out_h, std::size_t out_w) {
    const Shape xs = x.shape();
    detail::require(xs == idx.shape,
                    "max_unpool2x2: input shape " + xs.str() + " does not match indices shape " + idx.shape.str());
    detail::require(out_h == 2 * xs.h && out_w == 2 * xs.w && idx.in_h == out_h && idx.in_w == out_w,
                    "max_unpool2x2: output size " + std::to_string(out_h) + "x" + std::to_string(out_w) +
                        " must be twice the input spatial size " + std::to_string(xs.h) + "x" +
                        std::to_string(xs.w));
    const Shape ys{xs.n, xs.c, out_h, out_w};
    std::vector<T> y(ys.numel(), T(0));
    for (std::size_t o = 0; o < xs.numel(); ++o) {
        const std::size_t nc = o / xs.plane();
        y[nc * ys.plane() + idx.flat_index[o]] = x.values()[o];
    }
    return make_result<T>("max_unpool2x2", ys, std::move(y), {x}, [idx, xs, ys](auto& self) {
        auto& xn = *self.parents[0];
        for (std::size_t o = 0; o < xs.numel(); ++o) {
            const std::size_t nc = o / xs.plane();
            xn.grad[o] += self.grad[nc * ys.plane() + idx.flat_index[o]];
        }
    });
}

namespace detail {

struct LinearTap {
    std::size_t i0, i1;
    double w1;  // weight of i1; i0 gets 1 - w1
};

// Half-pixel-center source coordinate, clamped to the valid range.
inline std::vector<LinearTap> bilinear_taps(std::size_t in, std::size_t out) {
    std::vector<LinearTap> taps(out);
    const double ratio = static_cast<double>(in) / static_cast<double>(out);
    for (std::size_t d = 0; d < out; ++d) {
        double src = (static_cast<double>(d) + 0.5) * ratio - 0.5;
        src = std::clamp(src, 0.0, static_cast<double>(in - 1));
        const auto i0 = static_cast<std::size_t>(std::floor(src));
        const std::size_t i1 = std::min(i0 + 1, in - 1);
        taps[d] = {i0, i1, src - static_cast<double>(i0)};
    }
    return taps;
}

}  // namespace detail

/// Bilinear resize to an arbitrary (out_h, out_w) with half-pixel centers.
template <typename T>
Tensor<T> resize_bilinear(const Tensor<T>& x, std::size_t out_h, std::size_t out_w) {
    const Shape xs = x.shape();
    detail::require(out_h > 0 && out_w > 0 && xs.h > 0 && xs.w > 0, "resize_bilinear: empty spatial extent");
    const auto ty = detail::bilinear_taps(xs.h, out_h);
    const auto tx = detail::bilinear_taps(xs.w, out_w);
    const Shape ys{xs.n, xs.c, out_h, out_w};
    std::vector<T> y(ys.numel());
    for (std::size_t nc = 0; nc < xs.n * xs.c; ++nc) {
        const T* src = x.values().data() + nc * xs.plane();
        T* dst = y.data() + nc * ys.plane();
        for (std::size_t oy = 0; oy < out_h; ++oy) {
            const auto& a = ty[oy];
            const T wy1 = static_cast<T>(a.w1);
            for (std::size_t ox = 0; ox < out_w; ++ox) {
                const auto& b = tx[ox];
                const T wx1 = static_cast<T>(b.w1);
                // Lerp form reproduces constant fields exactly.
                const T v00 = src[a.i0 * xs.w + b.i0], v01 = src[a.i0 * xs.w + b.i1];
                const T v10 = src[a.i1 * xs.w + b.i0], v11 = src[a.i1 * xs.w + b.i1];
                const T top = v00 + wx1 * (v01 - v00);
                const T bottom = v10 + wx1 * (v11 - v10);
                dst[oy * out_w + ox] = top + wy1 * (bottom - top);
            }
        }
    }
    return make_result<T>("resize_bilinear", ys, std::move(y), {x}, [ty, tx, xs, ys](auto& self) {
        auto& xn = *self.parents[0];
        for (std::size_t nc = 0; nc < xs.n * xs.c; ++nc) {
            T* dx = xn.grad.data() + nc * xs.plane();
            const T* dy = self.grad.data() + nc * ys.plane();
            for (std::size_t oy = 0; oy < ys.h; ++oy) {
                const auto& a = ty[oy];
                const T wy1 = static_cast<T>(a.w1), wy0 = T(1) - wy1;
                for (std::size_t ox = 0; ox < ys.w; ++ox) {
                    const auto& b = tx[ox];
                    const T wx1 = static_cast<T>(b.w1), wx0 = T(1) - wx1;
                    const T g = dy[oy * ys.w + ox];
                    dx[a.i0 * xs.w + b.i0] += g * wy0 * wx0;
                    dx[a.i0 * xs.w + b.i1] += g * wy0 * wx1;
                    dx[a.i1 * xs.w + b.i0] += g * wy1 * wx0;
                    dx[a.i1 * xs.w + b.i1] += g * wy1 * wx1;
                }
            }
        }
    });
}

template <typename T>
Tensor<T> upsample_bilinear(const Tensor<T>& x, std::size_t scale) {
    detail::require(scale == 2 || scale == 4, "upsample_bilinear: scale must be 2 or 4, got " + std::to_string(scale));
    return resize_bilinear(x, x.shape().h * scale, x.shape().w * scale);
}

/// Adaptive average pooling to (s, s). Cell (i, j) averages rows floor(i*h/s) .. ceil((i+1)*h/s)-1
/// (likewise columns). When s exceeds a spatial dim the windows overlap and repeat.
template <typename T>
Tensor<T> adaptive_avg_pool(const Tensor<T>& x, std::size_t s) {
    const Shape xs = x.shape();
    detail::require(s >= 1, "adaptive_avg_pool: output size must be >= 1");
    detail::require(xs.h >= 1 && xs.w >= 1, "adaptive_avg_pool: empty input");
    auto bounds = [s](std::size_t len) {
        std::vector<std::pair<std::size_t, std::size_t>> r(s);
        for (std::size_t i = 0; i < s; ++i) r[i] = {i * len / s, ((i + 1) * len + s - 1) / s};
        return r;
    };
    const auto rows = bounds(xs.h);
    const auto cols = bounds(xs.w);
    const Shape ys{xs.n, xs.c, s, s};
    std::vector<T> y(ys.numel());
    for (std::size_t nc = 0; nc < xs.n * xs.c; ++nc) {
        const T* src = x.values().data() + nc * xs.plane();
        for (std::size_t i = 0; i < s; ++i) {
            for (std::size_t j = 0; j < s; ++j) {
                T acc = 0;
                for (std::size_t r = rows[i].first; r < rows[i].second; ++r) {
                    for (std::size_t c = cols[j].first; c < cols[j].second; ++c) acc += src[r * xs.w + c];
                }
                const auto area = (rows[i].second - rows[i].first) * (cols[j].second - cols[j].first);
                y[nc * s * s + i * s + j] = acc / static_cast<T>(area);
            }
        }
    }
    return make_result<T>("adaptive_avg_pool", ys, std::move(y), {x}, [rows, cols, xs, s](auto& self) {
        auto& xn = *self.parents[0];
        for (std::size_t nc = 0; nc < xs.n * xs.c; ++nc) {
            T* dx = xn.grad.data() + nc * xs.plane();
            for (std::size_t i = 0; i < s; ++i) {
                for (std::size_t j = 0; j < s; ++j) {
                    const auto area = (rows[i].second - rows[i].first) * (cols[j].second - cols[j].first);
                    const T g = self.grad[nc * s * s + i * s + j] / static_cast<T>(area);
                    for (std::size_t r = rows[i].first; r < rows[i].second; ++r) {
                        for (std::size_t c = cols[j].first; c < cols[j].second; ++c) dx[r * xs.w + c] += g;
                    }
                }
            }
        }
    });
}

template <typename T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& parts) {
    detail::require(!parts.empty(), "concat_channels: no inputs");
    const Shape first = parts.front().shape();
    std::size_t channels = 0;
    for (std::size_t i = 0; i < parts.size(); ++i) {
        const Shape s = parts[i].shape();
        detail::require(s.n == first.n && s.h == first.h && s.w == first.w,
                        "concat_channels: part " + std::to_string(i) + " has shape " + s.str() +
                            ", incompatible with part 0 shape " + first.str());
        channels += s.c;
    }
    const Shape ys{first.n, channels, first.h, first.w};
    const std::size_t plane = first.plane();
    std::vector<T> y(ys.numel());
    std::vector<std::size_t> offsets;
    std::size_t off = 0;
    for (const auto& part : parts) {
        offsets.push_back(off);
        const std::size_t pc = part.shape().c;
        for (std::size_t n = 0; n < first.n; ++n) {
            std::copy_n(part.values().data() + n * pc * plane, pc * plane, y.data() + (n * channels + off) * plane);
        }
        off += pc;
    }
    return make_result<T>("concat_channels", ys, std::move(y), parts, [offsets, ys](auto& self) {
        for (std::size_t i = 0; i < self.parents.size(); ++i) {
            auto& pn = *self.parents[i];
            if (!pn.requires_grad) continue;
            const std::size_t pc = pn.shape.c;
            const std::size_t plane = ys.plane();
            for (std::size_t n = 0; n < ys.n; ++n) {
                const T* src = self.grad.data() + (n * ys.c + offsets[i]) * plane;
                T* dst = pn.grad.data() + n * pc * plane;
                for (std::size_t k = 0; k < pc * plane; ++k) dst[k] += src[k];
            }
        }
    });
}

/// x (n,c,h,w) scaled per pixel by a (n,1,h,w).
template <typename T>
Tensor<T> mul_broadcast(const Tensor<T>& x, const Tensor<T>& a) {
    const Shape xs = x.shape();
    const Shape as = a.shape();
    detail::require(as.c == 1 && as.n == xs.n && as.h == xs.h && as.w == xs.w,
                    "mul_broadcast: gate shape " + as.str() + " must be (n,1,h,w) for input " + xs.str());
    const std::size_t plane = xs.plane();
    std::vector<T> y(xs.numel());
    for (std::size_t n = 0; n < xs.n; ++n) {
        const T* gate = a.values().data() + n * plane;
        for (std::size_t c = 0; c < xs.c; ++c) {
            const std::size_t base = (n * xs.c + c) * plane;
            for (std::size_t i = 0; i < plane; ++i) y[base + i] = x.values()[base + i] * gate[i];
        }
    }
    return make_result<T>("mul_broadcast", xs, std::move(y), {x, a}, [xs](auto& self) {
        auto& xn = *self.parents[0];
        auto& an = *self.parents[1];
        const std::size_t plane = xs.plane();
        for (std::size_t n = 0; n < xs.n; ++n) {
            for (std::size_t c = 0; c < xs.c; ++c) {
                const std::size_t base = (n * xs.c + c) * plane;
                for (std::size_t i = 0; i < plane; ++i) {
                    const T g = self.grad[base + i];
                    if (xn.requires_grad) xn.grad[base + i] += g * an.data[n * plane + i];
                    if (an.requires_grad) an.grad[n * plane + i] += g * xn.data[base + i];
                }
            }
        }
    });
}

/// Each output cell is the sum of its 2x2 input window.
template <typename T>
Tensor<T> sum_pool2x2(const Tensor<T>& x) {
    const Shape xs = x.shape();
    detail::require(xs.h % 2 == 0 && xs.w % 2 == 0,
                    "sum_pool2x2: spatial dims must be even, got " + std::to_string(xs.h) + "x" +
                        std::to_string(xs.w));
    const Shape ys{xs.n, xs.c, xs.h / 2, xs.w / 2};
    std::vector<T> y(ys.numel());
    for (std::size_t nc = 0; nc < xs.n * xs.c; ++nc) {
        const T* src = x.values().data() + nc * xs.plane();
        for (std::size_t oy = 0; oy < ys.h; ++oy) {
            for (std::size_t ox = 0; ox < ys.w; ++ox) {
                const std::size_t i = 2 * oy * xs.w + 2 * ox;
                y[nc * ys.plane() + oy * ys.w + ox] = (src[i] + src[i + 1]) + (src[i + xs.w] + src[i + xs.w + 1]);
            }
        }
    }
    return make_result<T>("sum_pool2x2", ys, std::move(y), {x}, [xs, ys](auto& self) {
        auto& xn = *self.parents[0];
        for (std::size_t nc = 0; nc < xs.n * xs.c; ++nc) {
            T* dx = xn.grad.data() + nc * xs.plane();
            for (std::size_t oy = 0; oy < ys.h; ++oy) {
                for (std::size_t ox = 0; ox < ys.w; ++ox) {
                    const T g = self.grad[nc * ys.plane() + oy * ys.w + ox];
                    const std::size_t i = 2 * oy * xs.w + 2 * ox;
                    dx[i] += g;
                    dx[i + 1] += g;
                    dx[i + xs.w] += g;
                    dx[i + xs.w + 1] += g;
                }
            }
        }
    });
}

// Elementwise arithmetic on equal shapes.

namespace detail {

template <typename T, typename Fwd, typename Bwd>
Tensor<T> binary_op(const char* name, const Tensor<T>& a, const Tensor<T>& b, Fwd fwd, Bwd bwd) {
    require(a.shape() == b.shape(),
            std::string(name) + ": shape mismatch " + a.shape().str() + " vs " + b.shape().str());
    std::vector<T> y(a.numel());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = fwd(a.values()[i], b.values()[i]);
    return make_result<T>(name, a.shape(), std::move(y), {a, b}, [bwd](auto& self) {
        auto& an = *self.parents[0];
        auto& bn = *self.parents[1];
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            const auto [da, db] = bwd(an.data[i], bn.data[i], self.data[i], self.grad[i]);
            if (an.requires_grad) an.grad[i] += da;
            if (bn.requires_grad) bn.grad[i] += db;
        }
    });
}

}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary_op<T>(
        "add", a, b, [](T x, T y) { return x + y; },
        [](T, T, T, T g) { return std::pair<T, T>{g, g}; });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary_op<T>(
        "sub", a, b, [](T x, T y) { return x - y; },
        [](T, T, T, T g) { return std::pair<T, T>{g, -g}; });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary_op<T>(
        "mul", a, b, [](T x, T y) { return x * y; },
        [](T x, T y, T, T g) { return std::pair<T, T>{g * y, g * x}; });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary_op<T>(
        "div", a, b, [](T x, T y) { return x / y; },
        [](T, T y, T out, T g) { return std::pair<T, T>{g / y, -g * out / y}; });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
    std::vector<T> y(x.values());
    for (auto& v : y) v *= factor;
    return make_result<T>("scale", x.shape(), std::move(y), {x}, [factor](auto& self) {
        auto& xn = *self.parents[0];
        for (std::size_t i = 0; i < self.grad.size(); ++i) xn.grad[i] += self.grad[i] * factor;
    });
}

/// Sum of all elements as a (1,1,1,1) tensor.
template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
    T acc = 0;
    for (const T v : x.values()) acc += v;
    return make_result<T>("sum", Shape{1, 1, 1, 1}, std::vector<T>{acc}, {x}, [](auto& self) {
        auto& xn = *self.parents[0];
        for (auto& g : xn.grad) g += self.grad[0];
    });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
    return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

/// mean((pred - target)^2); the target receives no gradient.
template <typename T>
Tensor<T> mse_loss(const Tensor<T>& pred, const Tensor<T>& target) {
    detail::require(pred.shape() == target.shape(),
                    "mse_loss: shape mismatch " + pred.shape().str() + " vs " + target.shape().str());
    const T inv = T(1) / static_cast<T>(pred.numel());
    T acc = 0;
    for (std::size_t i = 0; i < pred.numel(); ++i) {
        const T d = pred.values()[i] - target.values()[i];
        acc += d * d;
    }
    return make_result<T>("mse_loss", Shape{1, 1, 1, 1}, std::vector<T>{acc * inv}, {pred},
                          [target, inv](auto& self) {
                              auto& pn = *self.parents[0];
                              const T g = self.grad[0] * T(2) * inv;
                              for (std::size_t i = 0; i < pn.data.size(); ++i) {
                                  pn.grad[i] += g * (pn.data[i] - target.values()[i]);
                              }
                          });
}

/// Mean binary cross-entropy of probabilities p against targets in [0, 1]; p is clamped to
/// [1e-7, 1 - 1e-7] (the gradient is zero where the clamp is active).
template <typename T>
Tensor<T> bce_loss(const Tensor<T>& p, const Tensor<T>& target) {
    detail::require(p.shape() == target.shape(),
                    "bce_loss: shape mismatch " + p.shape().str() + " vs " + target.shape().str());
    constexpr T lo = T(1e-7);
    constexpr T hi = T(1) - T(1e-7);
    const T inv = T(1) / static_cast<T>(p.numel());
    T acc = 0;
    for (std::size_t i = 0; i < p.numel(); ++i) {
        const T q = std::clamp(p.values()[i], lo, hi);
        const T a = target.values()[i];
        acc -= a * std::log(q) + (T(1) - a) * std::log(T(1) - q);
    }
    return make_result<T>("bce_loss", Shape{1, 1, 1, 1}, std::vector<T>{acc * inv}, {p},
                          [target, inv](auto& self) {
                              auto& pn = *self.parents[0];
                              const T g = self.grad[0] * inv;
                              for (std::size_t i = 0; i < pn.data.size(); ++i) {
                                  const T raw = pn.data[i];
                                  if (raw < lo || raw > hi) continue;
                                  const T a = target.values()[i];
                                  pn.grad[i] += g * (-a / raw + (T(1) - a) / (T(1) - raw));
                              }
                          });
}

}  // namespace crowdnet
