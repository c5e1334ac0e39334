#pragma once

// Synthetic sparse/noisy image benchmark, pixel masking, pixel graphs and the
// SNT1 on-disk tensor format.

#include "darlc/common.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

namespace darlc {

/// N x C x H x W grid of non-negative float32 intensities, row-major (image, channel, row, col).
class ImageTensor {
public:
    ImageTensor() = default;
    ImageTensor(Index n, Index c, Index h, Index w)
        : n_(n), c_(c), h_(h), w_(w), values_(static_cast<std::size_t>(n * c * h * w), 0.0f) {
        require(n >= 0 && c >= 1 && h >= 1 && w >= 1, "data_synth", "image tensor dimensions must be positive");
    }

    Index count() const { return n_; }
    Index channels() const { return c_; }
    Index height() const { return h_; }
    Index width() const { return w_; }
    Index pixels() const { return h_ * w_; }
    Index image_size() const { return c_ * h_ * w_; }

    float& at(Index i, Index c, Index y, Index x) { return values_[offset(i, c, y, x)]; }
    float at(Index i, Index c, Index y, Index x) const { return values_[offset(i, c, y, x)]; }

    std::vector<float>& values() { return values_; }
    const std::vector<float>& values() const { return values_; }

    /// Pixels as rows, channels as columns (the GAT node-feature layout).
    Matrix pixel_matrix(Index i) const {
        Matrix m(pixels(), c_);
        for (Index c = 0; c < c_; ++c)
            for (Index p = 0; p < pixels(); ++p)
                m(p, c) = values_[static_cast<std::size_t>((i * c_ + c) * pixels() + p)];
        return m;
    }

    void set_pixel_matrix(Index i, const Matrix& m) {
        require(m.rows() == pixels() && m.cols() == c_, "data_synth", "pixel matrix shape mismatch");
        for (Index c = 0; c < c_; ++c)
            for (Index p = 0; p < pixels(); ++p)
                values_[static_cast<std::size_t>((i * c_ + c) * pixels() + p)] = static_cast<float>(m(p, c));
    }

    /// Image i flattened in (channel, row, col) order.
    RowVector flat(Index i) const {
        RowVector v(image_size());
        const auto base = static_cast<std::size_t>(i * image_size());
        for (Index k = 0; k < image_size(); ++k) v(k) = values_[base + static_cast<std::size_t>(k)];
        return v;
    }

    /// All images flattened, one per row.
    Matrix flat_matrix() const {
        Matrix m(n_, image_size());
        for (Index i = 0; i < n_; ++i) m.row(i) = flat(i);
        return m;
    }

    ImageTensor subset(const std::vector<Index>& idx) const {
        ImageTensor out(static_cast<Index>(idx.size()), c_, h_, w_);
        for (std::size_t j = 0; j < idx.size(); ++j)
            std::copy_n(values_.begin() + idx[j] * image_size(), image_size(),
                        out.values_.begin() + static_cast<Index>(j) * image_size());
        return out;
    }

    bool valid() const {
        return std::all_of(values_.begin(), values_.end(), [](float v) { return std::isfinite(v) && v >= 0.0f; });
    }

    bool operator==(const ImageTensor&) const = default;

private:
    std::size_t offset(Index i, Index c, Index y, Index x) const {
        return static_cast<std::size_t>(((i * c_ + c) * h_ + y) * w_ + x);
    }

    Index n_ = 0, c_ = 1, h_ = 1, w_ = 1;
    std::vector<float> values_;
};

struct SynthConfig {
    Index n_images = 300;
    Index height = 16;
    Index width = 16;
    Index channels = 1;
    Index n_patterns = 3;
    double sparsity = 0.9;
    double noise_std = 0.2;
    std::uint64_t seed = 0;

    void validate() const {
        require(n_images >= 1, "data_synth", "n_images must be >= 1", ErrorKind::config);
        require(height >= 1 && width >= 1 && channels >= 1, "data_synth", "image dimensions must be >= 1",
                ErrorKind::config);
        require(n_patterns >= 1, "data_synth", "n_patterns must be >= 1", ErrorKind::config);
        require(sparsity >= 0.0 && sparsity < 1.0, "data_synth", "sparsity must lie in [0, 1)", ErrorKind::config);
        require(noise_std >= 0.0, "data_synth", "noise_std must be >= 0", ErrorKind::config);
    }
};

struct SynthDataset {
    ImageTensor images;
    std::vector<int> labels;
};

/// Base patterns (H x W, amplitude 1). With K >= 2 patterns, K-1 are Gaussian bumps with
/// distinct centers on a ring around the image center and the last is a layered stripe
/// pattern; a single pattern is one centered bump.
inline std::vector<Matrix> base_patterns(Index K, Index H, Index W) {
    std::vector<Matrix> out;
    const double side = static_cast<double>(std::min(H, W));
    const double sigma = 0.16 * side;
    const double ring = K > 2 ? 0.28 * side : 0.25 * side;
    const double cy = (static_cast<double>(H) - 1.0) / 2.0, cx = (static_cast<double>(W) - 1.0) / 2.0;
    const Index bumps = K >= 2 ? K - 1 : 1;
    for (Index k = 0; k < bumps; ++k) {
        double by = cy, bx = cx;
        if (K >= 2 && bumps > 1) {
            const double angle = std::numbers::pi / 4.0 + 2.0 * std::numbers::pi * static_cast<double>(k) /
                                                              static_cast<double>(bumps);
            by = cy + ring * std::sin(angle);
            bx = cx + ring * std::cos(angle);
        }
        Matrix p(H, W);
        for (Index y = 0; y < H; ++y)
            for (Index x = 0; x < W; ++x) {
                const double dy = static_cast<double>(y) - by, dx = static_cast<double>(x) - bx;
                p(y, x) = std::exp(-(dy * dy + dx * dx) / (2.0 * sigma * sigma));
            }
        out.push_back(std::move(p));
    }
    if (K >= 2) {
        // Horizontal cortical-like layers: smooth bands with period H/2.
        Matrix p(H, W);
        const double period = std::max(2.0, static_cast<double>(H) / 2.0);
        for (Index y = 0; y < H; ++y)
            for (Index x = 0; x < W; ++x)
                p(y, x) = 0.5 * (1.0 + std::cos(2.0 * std::numbers::pi * static_cast<double>(y) / period));
        out.push_back(std::move(p));
    }
    return out;
}

/// Zeroes round(fraction * H * W) uniformly chosen pixel sites per image (all channels jointly).
/// Image i draws its sites from a stream derived from (seed, i).
inline ImageTensor sparsify(const ImageTensor& img, double mask_fraction, std::uint64_t seed) {
    require(mask_fraction >= 0.0 && mask_fraction < 1.0, "data_synth", "mask fraction must lie in [0, 1)");
    ImageTensor out = img;
    const Index P = img.pixels();
    const auto n_mask = static_cast<Index>(std::llround(mask_fraction * static_cast<double>(P)));
    if (n_mask == 0) return out;
    std::vector<Index> sites(static_cast<std::size_t>(P));
    for (Index i = 0; i < img.count(); ++i) {
        std::iota(sites.begin(), sites.end(), Index{0});
        std::mt19937_64 rng(split_seed(seed, static_cast<std::uint64_t>(i)));
        for (Index k = 0; k < n_mask; ++k) {
            std::uniform_int_distribution<Index> pick(k, P - 1);
            std::swap(sites[static_cast<std::size_t>(k)], sites[static_cast<std::size_t>(pick(rng))]);
            const Index s = sites[static_cast<std::size_t>(k)];
            for (Index c = 0; c < img.channels(); ++c) out.at(i, c, s / img.width(), s % img.width()) = 0.0f;
        }
    }
    return out;
}

/// Each image is one base pattern plus half-normal noise |N(0, noise_std)|, then sparsified.
/// Labels are balanced (i mod K) and shuffled.
inline SynthDataset synth_dataset(const SynthConfig& cfg) {
    cfg.validate();
    const auto patterns = base_patterns(cfg.n_patterns, cfg.height, cfg.width);
    SynthDataset ds;
    ds.labels.resize(static_cast<std::size_t>(cfg.n_images));
    for (Index i = 0; i < cfg.n_images; ++i) ds.labels[static_cast<std::size_t>(i)] = static_cast<int>(i % cfg.n_patterns);
    std::mt19937_64 label_rng(split_seed(cfg.seed, "synth.labels"));
    std::shuffle(ds.labels.begin(), ds.labels.end(), label_rng);

    ImageTensor clean(cfg.n_images, cfg.channels, cfg.height, cfg.width);
    std::mt19937_64 noise_rng(split_seed(cfg.seed, "synth.noise"));
    std::normal_distribution<double> noise(0.0, 1.0);
    for (Index i = 0; i < cfg.n_images; ++i) {
        const Matrix& p = patterns[static_cast<std::size_t>(ds.labels[static_cast<std::size_t>(i)])];
        for (Index c = 0; c < cfg.channels; ++c)
            for (Index y = 0; y < cfg.height; ++y)
                for (Index x = 0; x < cfg.width; ++x) {
                    const double n = cfg.noise_std > 0 ? std::abs(noise(noise_rng)) * cfg.noise_std : 0.0;
                    clean.at(i, c, y, x) = static_cast<float>(p(y, x) + n);
                }
    }
    ds.images = sparsify(clean, cfg.sparsity, split_seed(cfg.seed, "synth.mask"));
    return ds;
}

/// Zero-pads height and width up to the next multiple of `multiple`.
inline ImageTensor pad_to_multiple(const ImageTensor& img, Index multiple) {
    require(multiple >= 1, "data_synth", "padding multiple must be >= 1");
    const Index H = (img.height() + multiple - 1) / multiple * multiple;
    const Index W = (img.width() + multiple - 1) / multiple * multiple;
    if (H == img.height() && W == img.width()) return img;
    ImageTensor out(img.count(), img.channels(), H, W);
    for (Index i = 0; i < img.count(); ++i)
        for (Index c = 0; c < img.channels(); ++c)
            for (Index y = 0; y < img.height(); ++y)
                for (Index x = 0; x < img.width(); ++x) out.at(i, c, y, x) = img.at(i, c, y, x);
    return out;
}

// ---------------------------------------------------------------------------
// Pixel graph
// ---------------------------------------------------------------------------

/// Undirected, unweighted pixel adjacency in CSR form. Every pixel lists itself.
struct PixelGraph {
    Index height = 0;
    Index width = 0;
    double radius = 0;
    std::vector<Index> offsets;    // size P + 1
    std::vector<Index> neighbors;  // ascending per pixel

    Index pixels() const { return height * width; }
    Index edges() const { return static_cast<Index>(neighbors.size()); }
    Index degree(Index p) const { return offsets[static_cast<std::size_t>(p + 1)] - offsets[static_cast<std::size_t>(p)]; }

    bool connected(Index p, Index q) const {
        auto first = neighbors.begin() + offsets[static_cast<std::size_t>(p)];
        auto last = neighbors.begin() + offsets[static_cast<std::size_t>(p + 1)];
        return std::binary_search(first, last, q);
    }
};

/// Connects every pixel to all pixels within Euclidean grid distance <= radius, itself included.
inline PixelGraph build_pixel_graph(Index H, Index W, double radius) {
    require(H >= 1 && W >= 1, "data_synth", "graph dimensions must be positive");
    require(radius >= 1.0, "data_synth", "graph radius must be >= 1");
    PixelGraph g;
    g.height = H;
    g.width = W;
    g.radius = radius;
    g.offsets.reserve(static_cast<std::size_t>(H * W + 1));
    g.offsets.push_back(0);
    const auto reach = static_cast<Index>(std::floor(radius));
    const double r2 = radius * radius + 1e-9;
    for (Index y = 0; y < H; ++y)
        for (Index x = 0; x < W; ++x) {
            for (Index yy = std::max<Index>(0, y - reach); yy <= std::min(H - 1, y + reach); ++yy)
                for (Index xx = std::max<Index>(0, x - reach); xx <= std::min(W - 1, x + reach); ++xx) {
                    const double dy = static_cast<double>(yy - y), dx = static_cast<double>(xx - x);
                    if (dy * dy + dx * dx <= r2) g.neighbors.push_back(yy * W + xx);
                }
            g.offsets.push_back(static_cast<Index>(g.neighbors.size()));
        }
    return g;
}

// ---------------------------------------------------------------------------
// SNT1 format: ASCII header line "SNT1 N C H W\n", then N*C*H*W float32 little-endian.
// ---------------------------------------------------------------------------

namespace detail {
inline void put_u32_le(std::ostream& os, std::uint32_t v) {
    char b[4];
    for (int k = 0; k < 4; ++k) b[k] = static_cast<char>((v >> (8 * k)) & 0xffu);
    os.write(b, 4);
}
inline std::uint32_t get_u32_le(const unsigned char* b) {
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}
}  // namespace detail

inline void write_snt(std::ostream& os, const ImageTensor& t) {
    os << "SNT1 " << t.count() << ' ' << t.channels() << ' ' << t.height() << ' ' << t.width() << '\n';
    for (float v : t.values()) detail::put_u32_le(os, std::bit_cast<std::uint32_t>(v));
}

inline void write_snt(const std::string& path, const ImageTensor& t) {
    std::ofstream os(path, std::ios::binary);
    require(static_cast<bool>(os), "data_synth", "cannot open '" + path + "' for writing", ErrorKind::io);
    write_snt(os, t);
    require(static_cast<bool>(os), "data_synth", "write failed for '" + path + "'", ErrorKind::io);
}

inline ImageTensor read_snt(std::istream& is, const std::string& origin = "<stream>") {
    std::string line;
    require(static_cast<bool>(std::getline(is, line)), "data_synth", origin + ": missing SNT1 header", ErrorKind::io);
    std::istringstream hs(line);
    std::string magic;
    Index n = -1, c = -1, h = -1, w = -1;
    hs >> magic >> n >> c >> h >> w;
    require(magic == "SNT1" && hs && n >= 0 && c >= 1 && h >= 1 && w >= 1, "data_synth",
            origin + ": malformed SNT1 header", ErrorKind::io);
    ImageTensor t(n, c, h, w);
    std::vector<unsigned char> buf(t.values().size() * 4);
    is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    require(static_cast<std::size_t>(is.gcount()) == buf.size(), "data_synth", origin + ": truncated SNT1 payload",
            ErrorKind::io);
    for (std::size_t k = 0; k < t.values().size(); ++k)
        t.values()[k] = std::bit_cast<float>(detail::get_u32_le(&buf[4 * k]));
    return t;
}

inline ImageTensor read_snt(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    require(static_cast<bool>(is), "data_synth", "cannot open '" + path + "'", ErrorKind::io);
    return read_snt(is, path);
}

inline void write_labels(const std::string& path, const std::vector<int>& labels) {
    std::ofstream os(path, std::ios::binary);
    require(static_cast<bool>(os), "data_synth", "cannot open '" + path + "' for writing", ErrorKind::io);
    for (int l : labels) os << l << '\n';
}

inline std::vector<int> read_labels(const std::string& path) {
    std::ifstream is(path);
    require(static_cast<bool>(is), "data_synth", "cannot open '" + path + "'", ErrorKind::io);
    std::vector<int> out;
    std::string tok;
    while (is >> tok) {
        std::size_t used = 0;
        int v = 0;
        try {
            v = std::stoi(tok, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        require(used == tok.size(), "data_synth", path + ": bad label '" + tok + "'", ErrorKind::io);
        out.push_back(v);
    }
    return out;
}

}  // namespace darlc
