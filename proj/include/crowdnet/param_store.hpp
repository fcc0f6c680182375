#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "crowdnet/errors.hpp"
#include "crowdnet/tensor.hpp"

namespace crowdnet {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

/// Named tensors in lexicographic order. Trainable entries have requires_grad set; buffers (batch-norm
/// running statistics) do not.
template <typename T>
class ParamStore {
public:
    using Map = std::map<std::string, Tensor<T>>;

    Tensor<T>& add(const std::string& name, Tensor<T> t) {
        auto [it, inserted] = entries_.emplace(name, std::move(t));
        if (!inserted) throw UsageError("duplicate tensor name '" + name + "'");
        return it->second;
    }

    bool contains(const std::string& name) const { return entries_.count(name) != 0; }

    Tensor<T>& at(const std::string& name) {
        auto it = entries_.find(name);
        if (it == entries_.end()) throw UsageError("no tensor named '" + name + "'");
        return it->second;
    }
    const Tensor<T>& at(const std::string& name) const {
        auto it = entries_.find(name);
        if (it == entries_.end()) throw UsageError("no tensor named '" + name + "'");
        return it->second;
    }

    std::size_t size() const { return entries_.size(); }
    auto begin() { return entries_.begin(); }
    auto end() { return entries_.end(); }
    auto begin() const { return entries_.begin(); }
    auto end() const { return entries_.end(); }

    std::vector<std::string> names() const {
        std::vector<std::string> out;
        for (const auto& [name, _] : entries_) out.push_back(name);
        return out;
    }

    std::vector<std::string> trainable_names() const {
        std::vector<std::string> out;
        for (const auto& [name, t] : entries_) {
            if (t.requires_grad()) out.push_back(name);
        }
        return out;
    }

    void zero_grad() {
        for (auto& [_, t] : entries_) t.zero_grad();
    }

    /// Deep copy of all values (no graph, grads dropped, flags kept).
    ParamStore clone() const {
        ParamStore out;
        for (const auto& [name, t] : entries_) {
            Tensor<T> copy = t.detach();
            copy.set_requires_grad(t.requires_grad());
            out.add(name, std::move(copy));
        }
        return out;
    }

    /// Overwrites values in place from `src`. Names and shapes must match exactly.
    template <typename U>
    void assign_from(const ParamStore<U>& src) {
        std::vector<std::string> missing, unexpected;
        for (const auto& [name, _] : entries_) {
            if (!src.contains(name)) missing.push_back(name);
        }
        for (const auto& [name, _] : src) {
            if (!contains(name)) unexpected.push_back(name);
        }
        if (!missing.empty() || !unexpected.empty()) {
            std::ostringstream msg;
            msg << "parameter set mismatch";
            if (!missing.empty()) {
                msg << "; missing:";
                for (const auto& n : missing) msg << ' ' << n;
            }
            if (!unexpected.empty()) {
                msg << "; unexpected:";
                for (const auto& n : unexpected) msg << ' ' << n;
            }
            throw DataError(msg.str());
        }
        for (auto& [name, t] : entries_) {
            const auto& s = src.at(name);
            if (s.numel() != t.numel()) {
                throw DataError("shape mismatch for '" + name + "': expected " + t.shape().str() + ", got " +
                                s.shape().str());
            }
            for (std::size_t i = 0; i < t.numel(); ++i) t.values()[i] = static_cast<T>(s.values()[i]);
        }
    }

private:
    Map entries_;
};

/// Failure modes of the weight-file reader.
class WeightFileError : public DataError {
public:
    enum class Kind { io, bad_magic, bad_version, truncated, duplicate_name, bad_rank };

    WeightFileError(Kind kind, const std::string& msg) : DataError(msg), kind_(kind) {}
    Kind kind() const { return kind_; }

private:
    Kind kind_;
};

namespace detail {

inline constexpr char kWeightMagic[4] = {'M', 'S', 'F', 'W'};
inline constexpr std::uint32_t kWeightVersion = 1;

template <typename V>
void put(std::ostream& os, V v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <typename V>
V get(std::istream& is, const std::string& what) {
    V v{};
    if (!is.read(reinterpret_cast<char*>(&v), sizeof(V))) {
        throw WeightFileError(WeightFileError::Kind::truncated, "weight file truncated while reading " + what);
    }
    return v;
}

}  // namespace detail

// Layout (little-endian): "MSFW", u32 version, u32 count, then per tensor in name order:
// u16 name length, name bytes, u8 rank, u64 dims[rank], f32 values.
template <typename T>
void write_weights(const ParamStore<T>& store, std::ostream& os) {
    os.write(detail::kWeightMagic, 4);
    detail::put<std::uint32_t>(os, detail::kWeightVersion);
    detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(store.size()));
    for (const auto& [name, t] : store) {
        detail::put<std::uint16_t>(os, static_cast<std::uint16_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        detail::put<std::uint8_t>(os, 4);
        const Shape s = t.shape();
        for (const std::size_t d : {s.n, s.c, s.h, s.w}) detail::put<std::uint64_t>(os, d);
        std::vector<float> buf(t.values().begin(), t.values().end());
        os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
    }
}

template <typename T>
void save_weights(const ParamStore<T>& store, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw WeightFileError(WeightFileError::Kind::io, "cannot open '" + path + "' for writing");
    write_weights(store, os);
    if (!os) throw WeightFileError(WeightFileError::Kind::io, "write failed for '" + path + "'");
}

/// Reads a weight stream. Loaded tensors are leaves without requires_grad.
inline ParamStore<float> read_weights(std::istream& is) {
    char magic[4] = {};
    if (!is.read(magic, 4)) throw WeightFileError(WeightFileError::Kind::truncated, "weight file truncated in header");
    if (std::memcmp(magic, detail::kWeightMagic, 4) != 0) {
        throw WeightFileError(WeightFileError::Kind::bad_magic, "not a weight file (bad magic)");
    }
    const auto version = detail::get<std::uint32_t>(is, "version");
    if (version != detail::kWeightVersion) {
        throw WeightFileError(WeightFileError::Kind::bad_version,
                              "unsupported weight file version " + std::to_string(version));
    }
    const auto count = detail::get<std::uint32_t>(is, "tensor count");
    ParamStore<float> store;
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto len = detail::get<std::uint16_t>(is, "name length");
        std::string name(len, '\0');
        if (!is.read(name.data(), len)) {
            throw WeightFileError(WeightFileError::Kind::truncated, "weight file truncated in tensor name");
        }
        const auto rank = detail::get<std::uint8_t>(is, "rank of '" + name + "'");
        if (rank > 4) {
            throw WeightFileError(WeightFileError::Kind::bad_rank,
                                  "tensor '" + name + "' has rank " + std::to_string(rank) + " (max 4)");
        }
        std::size_t dims[4] = {1, 1, 1, 1};
        for (std::uint8_t d = 0; d < rank; ++d) {
            dims[4 - rank + d] = detail::get<std::uint64_t>(is, "dims of '" + name + "'");
        }
        const Shape shape{dims[0], dims[1], dims[2], dims[3]};
        std::vector<float> values(shape.numel());
        if (!is.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(values.size() * 4))) {
            throw WeightFileError(WeightFileError::Kind::truncated, "weight file truncated in values of '" + name + "'");
        }
        if (store.contains(name)) {
            throw WeightFileError(WeightFileError::Kind::duplicate_name, "duplicate tensor name '" + name + "'");
        }
        store.add(name, Tensor<float>(shape, std::move(values)));
    }
    return store;
}

inline ParamStore<float> load_weights(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw WeightFileError(WeightFileError::Kind::io, "cannot open '" + path + "'");
    return read_weights(is);
}

}  // namespace crowdnet
