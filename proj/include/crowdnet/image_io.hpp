#pragma once

// Binary netpbm (P6 colour, P5 grey, maxval 255), the DMAP density-map container, and the
// "x,y" head annotation CSV.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "crowdnet/errors.hpp"

namespace crowdnet {

/// Single-channel row-major float field (density maps, masks, visualizations).
struct Grid {
    std::size_t h = 0;
    std::size_t w = 0;
    std::vector<float> v;

    Grid() = default;
    Grid(std::size_t rows, std::size_t cols, float fill = 0.0f) : h(rows), w(cols), v(rows * cols, fill) {}

    float& operator()(std::size_t r, std::size_t c) { return v[r * w + c]; }
    float operator()(std::size_t r, std::size_t c) const { return v[r * w + c]; }
    bool operator==(const Grid&) const = default;

    double sum() const {
        double s = 0.0;
        for (const float x : v) s += x;
        return s;
    }
};

/// Planar RGB image with channel values in [0, 1].
struct Image {
    std::size_t h = 0;
    std::size_t w = 0;
    std::vector<float> rgb;  // 3 planes of h*w

    Image() = default;
    Image(std::size_t rows, std::size_t cols, float fill = 0.0f) : h(rows), w(cols), rgb(3 * rows * cols, fill) {}

    float& at(std::size_t c, std::size_t r, std::size_t col) { return rgb[(c * h + r) * w + col]; }
    float at(std::size_t c, std::size_t r, std::size_t col) const { return rgb[(c * h + r) * w + col]; }
    bool operator==(const Image&) const = default;
};

struct Point {
    double x = 0.0;  // column
    double y = 0.0;  // row
    bool operator==(const Point&) const = default;
};

namespace detail {

inline std::uint8_t quantize(float v) {
    return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

inline std::string read_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open '" + path + "'");
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

inline void write_file(const std::string& path, const std::string& bytes) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot open '" + path + "' for writing");
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw DataError("write failed for '" + path + "'");
}

struct PnmHeader {
    std::string magic;
    std::size_t w = 0, h = 0, maxval = 0;
    std::size_t data_offset = 0;
};

inline PnmHeader parse_pnm_header(const std::string& bytes, const std::string& path) {
    PnmHeader hdr;
    std::size_t pos = 0;
    auto skip_space = [&] {
        while (pos < bytes.size()) {
            if (bytes[pos] == '#') {
                while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
            } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
                ++pos;
            } else {
                break;
            }
        }
    };
    auto token = [&] {
        skip_space();
        const std::size_t start = pos;
        while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
        return bytes.substr(start, pos - start);
    };
    auto number = [&](const char* what) {
        const std::string t = token();
        std::size_t value = 0;
        auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), value);
        if (ec != std::errc() || ptr != t.data() + t.size() || t.empty()) {
            throw DataError("'" + path + "': bad netpbm " + what + " '" + t + "'");
        }
        return value;
    };
    hdr.magic = token();
    hdr.w = number("width");
    hdr.h = number("height");
    hdr.maxval = number("maxval");
    if (pos >= bytes.size()) throw DataError("'" + path + "': truncated netpbm header");
    hdr.data_offset = pos + 1;  // single whitespace byte after maxval
    return hdr;
}

}  // namespace detail

inline Image read_ppm(const std::string& path) {
    const std::string bytes = detail::read_file(path);
    const auto hdr = detail::parse_pnm_header(bytes, path);
    if (hdr.magic != "P6") throw DataError("'" + path + "': expected binary PPM (P6), got '" + hdr.magic + "'");
    if (hdr.maxval != 255) throw DataError("'" + path + "': only maxval 255 is supported");
    if (bytes.size() < hdr.data_offset + 3 * hdr.w * hdr.h) throw DataError("'" + path + "': truncated pixel data");
    Image img(hdr.h, hdr.w);
    const auto* px = reinterpret_cast<const std::uint8_t*>(bytes.data() + hdr.data_offset);
    for (std::size_t r = 0; r < hdr.h; ++r) {
        for (std::size_t c = 0; c < hdr.w; ++c) {
            for (std::size_t ch = 0; ch < 3; ++ch) {
                img.at(ch, r, c) = static_cast<float>(px[(r * hdr.w + c) * 3 + ch]) / 255.0f;
            }
        }
    }
    return img;
}

inline void write_ppm(const std::string& path, const Image& img) {
    std::string out = "P6\n" + std::to_string(img.w) + " " + std::to_string(img.h) + "\n255\n";
    const std::size_t header = out.size();
    out.resize(header + 3 * img.w * img.h);
    for (std::size_t r = 0; r < img.h; ++r) {
        for (std::size_t c = 0; c < img.w; ++c) {
            for (std::size_t ch = 0; ch < 3; ++ch) {
                out[header + (r * img.w + c) * 3 + ch] = static_cast<char>(detail::quantize(img.at(ch, r, c)));
            }
        }
    }
    detail::write_file(path, out);
}

/// Grey PGM as a Grid of values in [0, 1].
inline Grid read_pgm(const std::string& path) {
    const std::string bytes = detail::read_file(path);
    const auto hdr = detail::parse_pnm_header(bytes, path);
    if (hdr.magic != "P5") throw DataError("'" + path + "': expected binary PGM (P5), got '" + hdr.magic + "'");
    if (hdr.maxval != 255) throw DataError("'" + path + "': only maxval 255 is supported");
    if (bytes.size() < hdr.data_offset + hdr.w * hdr.h) throw DataError("'" + path + "': truncated pixel data");
    Grid g(hdr.h, hdr.w);
    const auto* px = reinterpret_cast<const std::uint8_t*>(bytes.data() + hdr.data_offset);
    for (std::size_t i = 0; i < g.v.size(); ++i) g.v[i] = static_cast<float>(px[i]) / 255.0f;
    return g;
}

inline void write_pgm(const std::string& path, const Grid& g) {
    std::string out = "P5\n" + std::to_string(g.w) + " " + std::to_string(g.h) + "\n255\n";
    const std::size_t header = out.size();
    out.resize(header + g.v.size());
    for (std::size_t i = 0; i < g.v.size(); ++i) out[header + i] = static_cast<char>(detail::quantize(g.v[i]));
    detail::write_file(path, out);
}

/// Max-normalized copy for visualization (all-zero grids stay zero).
inline Grid normalize_for_display(const Grid& g) {
    Grid out = g;
    float peak = 0.0f;
    for (const float x : g.v) peak = std::max(peak, x);
    if (peak > 0.0f) {
        for (auto& x : out.v) x = std::max(0.0f, x) / peak;
    } else {
        std::fill(out.v.begin(), out.v.end(), 0.0f);
    }
    return out;
}

// DMAP: "DMAP", u32 version = 1, u32 h, u32 w, f32[h*w] little-endian row-major.
inline void write_dmap(const std::string& path, const Grid& g) {
    std::string out = "DMAP";
    auto put_u32 = [&out](std::uint32_t v) { out.append(reinterpret_cast<const char*>(&v), 4); };
    put_u32(1);
    put_u32(static_cast<std::uint32_t>(g.h));
    put_u32(static_cast<std::uint32_t>(g.w));
    out.append(reinterpret_cast<const char*>(g.v.data()), g.v.size() * sizeof(float));
    detail::write_file(path, out);
}

inline Grid read_dmap(const std::string& path) {
    const std::string bytes = detail::read_file(path);
    if (bytes.size() < 16 || std::memcmp(bytes.data(), "DMAP", 4) != 0) {
        throw DataError("'" + path + "': not a DMAP file");
    }
    std::uint32_t version = 0, h = 0, w = 0;
    std::memcpy(&version, bytes.data() + 4, 4);
    std::memcpy(&h, bytes.data() + 8, 4);
    std::memcpy(&w, bytes.data() + 12, 4);
    if (version != 1) throw DataError("'" + path + "': unsupported DMAP version " + std::to_string(version));
    const std::size_t need = 16 + static_cast<std::size_t>(h) * w * sizeof(float);
    if (bytes.size() < need) throw DataError("'" + path + "': truncated DMAP payload");
    Grid g(h, w);
    std::memcpy(g.v.data(), bytes.data() + 16, g.v.size() * sizeof(float));
    return g;
}

inline std::string format_coord(double v) {
    char buf[32];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, ptr);
}

inline void write_annotations(const std::string& path, const std::vector<Point>& points) {
    std::string out = "x,y\n";
    for (const auto& p : points) out += format_coord(p.x) + "," + format_coord(p.y) + "\n";
    detail::write_file(path, out);
}

inline std::vector<Point> read_annotations(const std::string& path) {
    std::istringstream in(detail::read_file(path));
    std::string line;
    if (!std::getline(in, line) || line != "x,y") {
        throw DataError("'" + path + "': annotation CSV must start with header 'x,y'");
    }
    std::vector<Point> points;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        const auto comma = line.find(',');
        Point p;
        bool ok = comma != std::string::npos;
        if (ok) {
            auto rx = std::from_chars(line.data(), line.data() + comma, p.x);
            auto ry = std::from_chars(line.data() + comma + 1, line.data() + line.size(), p.y);
            ok = rx.ec == std::errc() && rx.ptr == line.data() + comma && ry.ec == std::errc() &&
                 ry.ptr == line.data() + line.size();
        }
        if (!ok) throw DataError("'" + path + "' line " + std::to_string(lineno) + ": expected 'x,y', got '" + line + "'");
        points.push_back(p);
    }
    return points;
}

}  // namespace crowdnet
