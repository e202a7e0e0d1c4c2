#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "rdpm/record.hpp"
#include "rdpm/rng.hpp"

namespace rdpm {

// ----------------------------------------------------------- synthetic data

struct SyntheticSpec {
    int num_classes = 4;
    int images_per_class = 50;
    int size = 32;
    std::uint64_t seed = 0;
};

struct LabeledImage {
    int height = 0;
    int width = 0;
    std::vector<double> pixels;  // H*W*3 row-major, values in [0,1]
    int label = 0;
};

namespace detail {

// Per-class base color; patterns repeat with a channel rotation past class 3
// so any class count stays distinguishable.
inline std::array<double, 3> class_color(int cls, Rng& rng) {
    std::array<double, 3> c{};
    switch (cls % 4) {
        case 0: c = {0.75 + 0.25 * rng.uniform(), 0.15 * rng.uniform(), 0.15 * rng.uniform()}; break;
        case 1: c = {0.15 * rng.uniform(), 0.75 + 0.25 * rng.uniform(), 0.15 * rng.uniform()}; break;
        case 2: c = {0.15 * rng.uniform(), 0.15 * rng.uniform(), 0.75 + 0.25 * rng.uniform()}; break;
        case 3: c = {0.7 + 0.3 * rng.uniform(), 0.7 + 0.3 * rng.uniform(), 0.1 * rng.uniform()}; break;
    }
    int rot = (cls / 4) % 3;
    std::rotate(c.begin(), c.begin() + rot, c.end());
    return c;
}

}  // namespace detail

// Procedural class grammars: 0 = filled circle, 1 = horizontal stripes,
// 2 = checkerboard, 3 = vertical gradient. Position/scale/phase/brightness
// vary per item; the dominant color stays per-class so a pixel-space
// centroid probe separates classes.
inline LabeledImage make_synthetic_image(const SyntheticSpec& spec, int cls, int item) {
    int s = spec.size;
    Rng rng = Rng(spec.seed).derive(static_cast<std::uint64_t>(cls) * 1000003u +
                                    static_cast<std::uint64_t>(item));
    LabeledImage img;
    img.height = s;
    img.width = s;
    img.label = cls;
    img.pixels.assign(static_cast<std::size_t>(s) * s * 3, 0.0);
    auto color = detail::class_color(cls, rng);
    double bg = 0.05 + 0.1 * rng.uniform();
    auto set = [&](int y, int x, double r, double g, double b) {
        std::size_t off = (static_cast<std::size_t>(y) * s + x) * 3;
        img.pixels[off] = r;
        img.pixels[off + 1] = g;
        img.pixels[off + 2] = b;
    };
    for (int y = 0; y < s; ++y)
        for (int x = 0; x < s; ++x) set(y, x, bg, bg, bg);

    switch (cls % 4) {
        case 0: {  // filled circle
            double cx = s / 2.0 + (rng.uniform() - 0.5) * s / 4.0;
            double cy = s / 2.0 + (rng.uniform() - 0.5) * s / 4.0;
            double rad = s / 4.0 + (rng.uniform() - 0.5) * s / 5.0;
            for (int y = 0; y < s; ++y)
                for (int x = 0; x < s; ++x) {
                    double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
                    if (dx * dx + dy * dy <= rad * rad)
                        set(y, x, color[0], color[1], color[2]);
                }
            break;
        }
        case 1: {  // horizontal stripes, fixed period
            int period = 4;
            int phase = static_cast<int>(rng.next_index(static_cast<std::uint64_t>(period)));
            for (int y = 0; y < s; ++y)
                if (((y + phase) / (period / 2)) % 2 == 0)
                    for (int x = 0; x < s; ++x) set(y, x, color[0], color[1], color[2]);
            break;
        }
        case 2: {  // checkerboard
            int cell = 4;
            int ox = static_cast<int>(rng.next_index(2));
            int oy = static_cast<int>(rng.next_index(2));
            for (int y = 0; y < s; ++y)
                for (int x = 0; x < s; ++x)
                    if (((x / cell + ox) + (y / cell + oy)) % 2 == 0)
                        set(y, x, color[0], color[1], color[2]);
            break;
        }
        case 3: {  // vertical gradient
            double lo = 0.1 * rng.uniform();
            for (int y = 0; y < s; ++y) {
                double f = lo + (1.0 - lo) * (static_cast<double>(y) / (s - 1));
                for (int x = 0; x < s; ++x)
                    set(y, x, f * color[0], f * color[1], f * color[2]);
            }
            break;
        }
    }
    return img;
}

inline std::vector<LabeledImage> generate_synthetic(const SyntheticSpec& spec) {
    if (spec.num_classes < 2)
        throw std::invalid_argument("generate_synthetic: need at least 2 classes");
    if (spec.size < 8)
        throw std::invalid_argument("generate_synthetic: size must be >= 8");
    std::vector<LabeledImage> out;
    out.reserve(static_cast<std::size_t>(spec.num_classes) * spec.images_per_class);
    for (int c = 0; c < spec.num_classes; ++c)
        for (int i = 0; i < spec.images_per_class; ++i)
            out.push_back(make_synthetic_image(spec, c, i));
    return out;
}

// ----------------------------------------------- nearest-centroid pixel probe

struct CentroidProbe {
    int num_classes = 0;
    std::vector<std::vector<double>> centroids;  // per class, H*W*3

    static CentroidProbe fit(const std::vector<LabeledImage>& images, int num_classes) {
        CentroidProbe p;
        p.num_classes = num_classes;
        if (images.empty()) throw std::invalid_argument("CentroidProbe: empty set");
        std::size_t n = images.front().pixels.size();
        p.centroids.assign(static_cast<std::size_t>(num_classes), std::vector<double>(n, 0.0));
        std::vector<int> counts(static_cast<std::size_t>(num_classes), 0);
        for (const auto& im : images) {
            auto& c = p.centroids.at(static_cast<std::size_t>(im.label));
            for (std::size_t i = 0; i < n; ++i) c[i] += im.pixels[i];
            ++counts[static_cast<std::size_t>(im.label)];
        }
        for (int k = 0; k < num_classes; ++k)
            if (counts[static_cast<std::size_t>(k)] > 0)
                for (auto& v : p.centroids[static_cast<std::size_t>(k)])
                    v /= counts[static_cast<std::size_t>(k)];
        return p;
    }

    int classify(const std::vector<double>& pixels) const {
        int best = 0;
        double best_d = 0.0;
        for (int k = 0; k < num_classes; ++k) {
            const auto& c = centroids[static_cast<std::size_t>(k)];
            double d = 0.0;
            for (std::size_t i = 0; i < pixels.size(); ++i) {
                double diff = pixels[i] - c[i];
                d += diff * diff;
            }
            if (k == 0 || d < best_d) {
                best_d = d;
                best = k;
            }
        }
        return best;
    }
};

// ------------------------------------------------------------------ P6 files

inline void write_ppm(const std::string& path, const std::vector<double>& pixels,
                      int height, int width) {
    if (static_cast<std::size_t>(height) * width * 3 != pixels.size())
        throw IoError("write_ppm: pixel buffer does not match " +
                      std::to_string(width) + "x" + std::to_string(height));
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("write_ppm: cannot open " + path);
    os << "P6\n" << width << " " << height << "\n255\n";
    for (double v : pixels) {
        double c = std::min(1.0, std::max(0.0, v));
        os.put(static_cast<char>(static_cast<int>(std::lround(c * 255.0))));
    }
    if (!os) throw IoError("write_ppm: write failed for " + path);
}

namespace detail {

inline int ppm_int(std::istream& is, std::size_t& offset, const std::string& path) {
    // skips whitespace and '#' comments, then reads a decimal integer
    int ch = is.get();
    ++offset;
    while (is && (std::isspace(ch) || ch == '#')) {
        if (ch == '#')
            while (is && is.get() != '\n') ++offset;
        ch = is.get();
        ++offset;
    }
    if (!is || !std::isdigit(ch))
        throw IoError("read_ppm: " + path + ": malformed header at byte offset " +
                      std::to_string(offset - 1));
    int v = 0;
    while (is && std::isdigit(ch)) {
        v = v * 10 + (ch - '0');
        ch = is.get();
        ++offset;
    }
    if (is) is.unget(), --offset;
    return v;
}

}  // namespace detail

inline LabeledImage read_ppm(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("read_ppm: cannot open " + path);
    std::size_t offset = 0;
    char m0 = static_cast<char>(is.get());
    char m1 = static_cast<char>(is.get());
    offset += 2;
    if (!is || m0 != 'P' || m1 != '6')
        throw IoError("read_ppm: " + path + ": malformed header at byte offset 0 (not P6)");
    int w = detail::ppm_int(is, offset, path);
    int h = detail::ppm_int(is, offset, path);
    int maxval = detail::ppm_int(is, offset, path);
    if (maxval != 255)
        throw IoError("read_ppm: " + path + ": unsupported maxval " +
                      std::to_string(maxval) + " at byte offset " + std::to_string(offset));
    is.get();  // single whitespace byte after maxval
    ++offset;
    LabeledImage img;
    img.height = h;
    img.width = w;
    img.pixels.resize(static_cast<std::size_t>(h) * w * 3);
    std::vector<unsigned char> raw(img.pixels.size());
    is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (is.gcount() != static_cast<std::streamsize>(raw.size()))
        throw IoError("read_ppm: " + path + ": truncated pixel data at byte offset " +
                      std::to_string(offset + static_cast<std::size_t>(is.gcount())));
    for (std::size_t i = 0; i < raw.size(); ++i)
        img.pixels[i] = raw[i] / 255.0;
    return img;
}

}  // namespace rdpm
