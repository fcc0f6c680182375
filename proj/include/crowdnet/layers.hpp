#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>

#include "crowdnet/ops.hpp"
#include "crowdnet/param_store.hpp"

namespace crowdnet {

template <typename T>
class Conv2d {
public:
    Conv2d() = default;

    /// Registers `<name>.weight` (and `<name>.bias`) in the store with normal weights (He scaling unless
    /// `init_std` is given) and zero bias. 3x3 kernels pad by their dilation so spatial size is
    /// preserved; 1x1 kernels do not pad.
    Conv2d(ParamStore<T>& store, std::mt19937_64& rng, const std::string& name, std::size_t c_in, std::size_t c_out,
           std::size_t k, std::size_t dilation = 1, bool bias = true, std::optional<double> init_std = std::nullopt)
        : k_(k), dilation_(dilation), padding_(k == 1 ? 0 : dilation * (k - 1) / 2) {
        const double std_dev = init_std.value_or(std::sqrt(2.0 / static_cast<double>(c_in * k * k)));
        std::normal_distribution<double> normal(0.0, std_dev);
        Tensor<T> w(Shape{c_out, c_in, k, k});
        for (auto& v : w.values()) v = static_cast<T>(normal(rng));
        weight_ = store.add(name + ".weight", w.set_requires_grad(true));
        if (bias) {
            Tensor<T> b(Shape{c_out, 1, 1, 1});
            bias_ = store.add(name + ".bias", b.set_requires_grad(true));
        }
    }

    Tensor<T> operator()(const Tensor<T>& x) const {
        return conv2d(x, weight_, bias_, 1, padding_, dilation_);
    }

    const Tensor<T>& weight() const { return weight_; }
    std::size_t in_channels() const { return weight_.shape().c; }
    std::size_t out_channels() const { return weight_.shape().n; }

private:
    Tensor<T> weight_;
    std::optional<Tensor<T>> bias_;
    std::size_t k_ = 1;
    std::size_t dilation_ = 1;
    std::size_t padding_ = 0;
};

template <typename T>
class BatchNorm2d {
public:
    BatchNorm2d() = default;

    BatchNorm2d(ParamStore<T>& store, const std::string& name, std::size_t channels) {
        const Shape s{channels, 1, 1, 1};
        gamma_ = store.add(name + ".gamma", Tensor<T>(s, T(1)).set_requires_grad(true));
        beta_ = store.add(name + ".beta", Tensor<T>(s, T(0)).set_requires_grad(true));
        running_mean_ = store.add(name + ".running_mean", Tensor<T>(s, T(0)));
        running_var_ = store.add(name + ".running_var", Tensor<T>(s, T(1)));
    }

    Tensor<T> operator()(const Tensor<T>& x, NormMode mode) {
        return batch_norm(x, gamma_, beta_, running_mean_, running_var_, mode);
    }

private:
    Tensor<T> gamma_, beta_, running_mean_, running_var_;
};

/// conv -> batch norm -> ReLU, the unit every hidden layer of both networks is built from.
template <typename T>
class ConvBnRelu {
public:
    ConvBnRelu() = default;

    ConvBnRelu(ParamStore<T>& store, std::mt19937_64& rng, const std::string& name, std::size_t c_in,
               std::size_t c_out, std::size_t k, std::size_t dilation = 1)
        : conv_(store, rng, name, c_in, c_out, k, dilation), bn_(store, name + ".bn", c_out) {}

    Tensor<T> operator()(const Tensor<T>& x, NormMode mode) { return relu(bn_(conv_(x), mode)); }

    const Conv2d<T>& conv() const { return conv_; }

private:
    Conv2d<T> conv_;
    BatchNorm2d<T> bn_;
};

}  // namespace crowdnet
