#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include "pdarts/rng.hpp"
#include "pdarts/supernet.hpp"
#include "pdarts/tensor.hpp"

namespace pdarts {

struct ParseError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Labeled u8 image set, image-major then channel-major, scaled to [0,1] when
// materialized as tensors.
struct Dataset {
    int classes = 0;
    int height = 0;
    int width = 0;
    int channels = 0;
    std::vector<std::uint8_t> labels;
    std::vector<std::uint8_t> pixels;

    std::int64_t count() const { return static_cast<std::int64_t>(labels.size()); }
    std::int64_t image_bytes() const {
        return static_cast<std::int64_t>(channels) * height * width;
    }

    Tensor batch(const std::vector<int>& idx) const {
        const std::int64_t ib = image_bytes();
        Tensor t({static_cast<int>(idx.size()), channels, height, width}, false);
        for (std::size_t i = 0; i < idx.size(); ++i) {
            const std::uint8_t* src = pixels.data() + static_cast<std::int64_t>(idx[i]) * ib;
            double* dst = t.data->data() + static_cast<std::int64_t>(i) * ib;
            for (std::int64_t p = 0; p < ib; ++p) dst[p] = src[p] / 255.0;
        }
        return t;
    }

    std::vector<int> batch_labels(const std::vector<int>& idx) const {
        std::vector<int> out(idx.size());
        for (std::size_t i = 0; i < idx.size(); ++i) out[i] = labels[idx[i]];
        return out;
    }

    double pixel_mean() const {
        double acc = 0.0;
        for (auto p : pixels) acc += p / 255.0;
        return pixels.empty() ? 0.0 : acc / pixels.size();
    }

    double pixel_std() const {
        const double m = pixel_mean();
        double acc = 0.0;
        for (auto p : pixels) {
            const double d = p / 255.0 - m;
            acc += d * d;
        }
        return pixels.empty() ? 0.0 : std::sqrt(acc / pixels.size());
    }
};

// ---------------------------------------------------------------------------
// PDTS binary format:
//   magic "PDTS" | u16 LE version | u32 LE images, classes, height, width,
//   channels | u8 labels[images] | u8 pixels[images*channels*height*width]
// ---------------------------------------------------------------------------

inline constexpr std::uint16_t kPdtsVersion = 1;

inline void save_pdts(const std::string& path, const Dataset& ds) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw ParseError("save_pdts: cannot open " + path);
    f.write("PDTS", 4);
    auto put16 = [&](std::uint16_t v) {
        char b[2] = {static_cast<char>(v & 0xff), static_cast<char>(v >> 8)};
        f.write(b, 2);
    };
    auto put32 = [&](std::uint32_t v) {
        char b[4];
        for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
        f.write(b, 4);
    };
    put16(kPdtsVersion);
    put32(static_cast<std::uint32_t>(ds.count()));
    put32(static_cast<std::uint32_t>(ds.classes));
    put32(static_cast<std::uint32_t>(ds.height));
    put32(static_cast<std::uint32_t>(ds.width));
    put32(static_cast<std::uint32_t>(ds.channels));
    f.write(reinterpret_cast<const char*>(ds.labels.data()),
            static_cast<std::streamsize>(ds.labels.size()));
    f.write(reinterpret_cast<const char*>(ds.pixels.data()),
            static_cast<std::streamsize>(ds.pixels.size()));
    if (!f) throw ParseError("save_pdts: write failed for " + path);
}

inline Dataset load_pdts(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ParseError("load_pdts: cannot open " + path);
    std::vector<char> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    std::size_t off = 0;
    auto need = [&](std::size_t n, const char* what) {
        if (off + n > bytes.size())
            throw ParseError(std::string("load_pdts: truncated ") + what + " at byte offset " +
                             std::to_string(off) + " (file has " + std::to_string(bytes.size()) +
                             " bytes)");
    };
    need(4, "magic");
    if (std::memcmp(bytes.data(), "PDTS", 4) != 0)
        throw ParseError("load_pdts: bad magic at byte offset 0");
    off = 4;
    auto get16 = [&]() {
        need(2, "u16 field");
        std::uint16_t v = static_cast<std::uint8_t>(bytes[off]) |
                          (static_cast<std::uint16_t>(static_cast<std::uint8_t>(bytes[off + 1])) << 8);
        off += 2;
        return v;
    };
    auto get32 = [&]() {
        need(4, "u32 field");
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i)
            v |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(bytes[off + i])) << (8 * i);
        off += 4;
        return v;
    };
    const std::uint16_t version = get16();
    if (version != kPdtsVersion)
        throw ParseError("load_pdts: unsupported format version " + std::to_string(version));
    Dataset ds;
    const std::uint32_t images = get32();
    ds.classes = static_cast<int>(get32());
    ds.height = static_cast<int>(get32());
    ds.width = static_cast<int>(get32());
    ds.channels = static_cast<int>(get32());
    need(images, "label array");
    ds.labels.resize(images);
    std::memcpy(ds.labels.data(), bytes.data() + off, images);
    for (std::uint32_t i = 0; i < images; ++i)
        if (ds.labels[i] >= ds.classes)
            throw ParseError("load_pdts: label " + std::to_string(ds.labels[i]) + " at index " +
                             std::to_string(i) + " (byte offset " + std::to_string(off + i) +
                             ") >= classes " + std::to_string(ds.classes));
    off += images;
    const std::size_t px = static_cast<std::size_t>(images) * ds.channels * ds.height * ds.width;
    need(px, "pixel array");
    ds.pixels.resize(px);
    std::memcpy(ds.pixels.data(), bytes.data() + off, px);
    off += px;
    if (off != bytes.size())
        throw ParseError("load_pdts: " + std::to_string(bytes.size() - off) +
                         " trailing bytes at offset " + std::to_string(off));
    return ds;
}

// ---------------------------------------------------------------------------
// Synthetic generators
// ---------------------------------------------------------------------------

struct DatasetSpec {
    std::string source = "synthetic";  // synthetic | file
    std::string generator = "shapes";  // shapes | shortcut
    std::string path;                  // for source == file
    int classes = 4;
    int image_size = 16;
    int channels = 1;
    int train_count = 512;
    int test_count = 128;
    std::uint64_t seed = 1;
    std::uint64_t split_seed = 1;
};

namespace detail_data {

inline std::uint8_t clamp_u8(double v) {
    return static_cast<std::uint8_t>(v < 0.0 ? 0.0 : (v > 255.0 ? 255.0 : v));
}

// Class = geometric figure, position-jittered, with pixel noise.
inline void draw_shape(std::vector<std::uint8_t>& img, int n, int channels, int cls, Rng& rng) {
    const double noise = 25.0;
    for (auto& p : img) p = clamp_u8(30.0 + rng.normal(0.0, noise));
    const int cx = n / 2 + static_cast<int>(rng.index(5)) - 2;
    const int cy = n / 2 + static_cast<int>(rng.index(5)) - 2;
    const int r = n / 4 + static_cast<int>(rng.index(3)) - 1;
    auto set = [&](int y, int x) {
        if (y < 0 || y >= n || x < 0 || x >= n) return;
        for (int c = 0; c < channels; ++c)
            img[(static_cast<std::size_t>(c) * n + y) * n + x] =
                clamp_u8(220.0 + rng.normal(0.0, 10.0));
    };
    switch (cls) {
        case 0:  // hollow square
            for (int d = -r; d <= r; ++d) {
                set(cy - r, cx + d);
                set(cy + r, cx + d);
                set(cy + d, cx - r);
                set(cy + d, cx + r);
            }
            break;
        case 1:  // filled disc
            for (int dy = -r; dy <= r; ++dy)
                for (int dx = -r; dx <= r; ++dx)
                    if (dx * dx + dy * dy <= r * r) set(cy + dy, cx + dx);
            break;
        case 2:  // cross
            for (int d = -r; d <= r; ++d) {
                set(cy + d, cx);
                set(cy, cx + d);
            }
            break;
        case 3:  // diagonal pair
            for (int d = -r; d <= r; ++d) {
                set(cy + d, cx + d);
                set(cy + d, cx - d);
            }
            break;
        case 4:  // horizontal stripes
            for (int y = cy - r; y <= cy + r; y += 2)
                for (int d = -r; d <= r; ++d) set(y, cx + d);
            break;
        case 5:  // corner dots
            for (int dy : {-r, r})
                for (int dx : {-r, r})
                    for (int ey = -1; ey <= 1; ++ey)
                        for (int ex = -1; ex <= 1; ++ex) set(cy + dy + ey, cx + dx + ex);
            break;
        default:
            break;
    }
}

// Class decodable from the global brightness: a linear (even mean-threshold)
// readout suffices, which makes identity-heavy architectures fit fastest.
inline void draw_shortcut(std::vector<std::uint8_t>& img, int /*n*/, int /*channels*/, int cls,
                          int classes, Rng& rng) {
    const double base = 40.0 + (170.0 / classes) * cls;
    for (auto& p : img) p = clamp_u8(base + rng.uniform(-18.0, 18.0));
}

}  // namespace detail_data

inline int generator_capacity(const std::string& name) {
    if (name == "shapes") return 6;
    if (name == "shortcut") return 12;
    return 0;
}

inline Dataset generate_synthetic(const DatasetSpec& spec, std::uint64_t seed, int count) {
    const int cap = generator_capacity(spec.generator);
    if (cap == 0) throw ConfigError("generate_synthetic: unknown generator '" + spec.generator + "'");
    if (spec.classes > cap)
        throw ConfigError("generate_synthetic: generator '" + spec.generator + "' supports at most " +
                          std::to_string(cap) + " classes, asked for " + std::to_string(spec.classes));
    if (spec.classes < 2) throw ConfigError("generate_synthetic: need at least 2 classes");
    Dataset ds;
    ds.classes = spec.classes;
    ds.height = ds.width = spec.image_size;
    ds.channels = spec.channels;
    Rng rng(derive_seed(seed, "synthetic/" + spec.generator));
    const std::int64_t ib = ds.image_bytes();
    std::vector<std::uint8_t> img(ib);
    for (int i = 0; i < count; ++i) {
        const int cls = i % spec.classes;  // balanced within +-1 by construction
        if (spec.generator == "shapes")
            detail_data::draw_shape(img, spec.image_size, spec.channels, cls, rng);
        else
            detail_data::draw_shortcut(img, spec.image_size, spec.channels, cls, spec.classes, rng);
        ds.labels.push_back(static_cast<std::uint8_t>(cls));
        ds.pixels.insert(ds.pixels.end(), img.begin(), img.end());
    }
    return ds;
}

inline Dataset make_dataset(const DatasetSpec& spec, bool train) {
    if (spec.source == "file") return load_pdts(spec.path);
    return generate_synthetic(spec, derive_seed(spec.seed, train ? "train" : "test"),
                              train ? spec.train_count : spec.test_count);
}

// 50/50 search split: disjoint, exhaustive, per-class balanced within one
// sample. Returns (weight half, alpha half).
inline std::pair<std::vector<int>, std::vector<int>> split_search(const Dataset& ds,
                                                                  std::uint64_t split_seed) {
    std::vector<std::vector<int>> per_class(ds.classes);
    for (int i = 0; i < ds.count(); ++i) per_class[ds.labels[i]].push_back(i);
    Rng rng(derive_seed(split_seed, "search_split"));
    std::vector<int> a, b;
    for (auto& idx : per_class) {
        rng.shuffle(idx);
        for (std::size_t i = 0; i < idx.size(); ++i) (i % 2 == 0 ? a : b).push_back(idx[i]);
    }
    return {a, b};
}

// Deterministic epoch mini-batching over an index subset.
inline std::vector<std::vector<int>> make_batches(std::vector<int> indices, int batch_size,
                                                  Rng& rng) {
    rng.shuffle(indices);
    std::vector<std::vector<int>> batches;
    for (std::size_t i = 0; i < indices.size(); i += batch_size) {
        const std::size_t end = std::min(indices.size(), i + batch_size);
        if (end - i < 2) break;  // batch norm needs more than one sample
        batches.emplace_back(indices.begin() + i, indices.begin() + end);
    }
    return batches;
}

}  // namespace pdarts
