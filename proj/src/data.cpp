#include "cgp/data.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "cgp/binary_io.hpp"
#include "cgp/errors.hpp"

namespace cgp::data {

namespace {

constexpr Rgb kBasePalette0{0.86, 0.70, 0.78};
constexpr Rgb kBasePalette1{0.70, 0.76, 0.88};
constexpr Rgb kForeground{0.36, 0.16, 0.46};

// Per-domain stain-like colour offsets; domain 3 is never seen in training.
constexpr std::array<Rgb, 5> kDomainShift{{
    {0.00, 0.00, 0.00},
    {0.04, -0.03, 0.00},
    {-0.03, 0.03, -0.03},
    {0.05, 0.04, -0.04},
    {-0.04, 0.00, 0.04},
}};

Rgb shifted(const Rgb& c, const Rgb& d) { return {c.r + d.r, c.g + d.g, c.b + d.b}; }

struct Placement {
    double cx, cy, cos_t, sin_t;
    double a, b;  // ellipse semi-axes, or cross half-length and half-thickness
};

bool inside_shape(int label, const Placement& p, double x, double y) {
    const double dx = x - p.cx, dy = y - p.cy;
    const double u = dx * p.cos_t + dy * p.sin_t;
    const double v = -dx * p.sin_t + dy * p.cos_t;
    if (label == 0) return (u * u) / (p.a * p.a) + (v * v) / (p.b * p.b) <= 1.0;
    const bool bar1 = std::abs(u) <= p.a && std::abs(v) <= p.b;
    const bool bar2 = std::abs(v) <= p.a && std::abs(u) <= p.b;
    return bar1 || bar2;
}

void render_sample(int label, const Rgb& background, Rng& rng, Dataset& ds) {
    const std::size_t h = ds.height, w = ds.width;
    const double size = static_cast<double>(std::min(h, w));
    Placement p{};
    const double theta = rng.uniform(0.0, std::numbers::pi);
    p.cos_t = std::cos(theta);
    p.sin_t = std::sin(theta);
    p.cx = rng.uniform(0.35, 0.65) * size;
    p.cy = rng.uniform(0.35, 0.65) * size;
    if (label == 0) {
        p.a = rng.uniform(0.16, 0.25) * size;
        p.b = rng.uniform(0.10, 0.15) * size;
    } else {
        p.a = rng.uniform(0.16, 0.25) * size;
        p.b = rng.uniform(0.035, 0.055) * size;
    }
    const double fg_jitter = rng.uniform(-0.05, 0.05);
    const Rgb fg{kForeground.r + fg_jitter, kForeground.g + fg_jitter, kForeground.b + fg_jitter};
    const double bg_jitter = rng.uniform(-0.03, 0.03);

    const std::size_t base = ds.pixels.size();
    ds.pixels.resize(base + ds.image_size());
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            // 2×2 supersampled coverage for soft edges
            int hits = 0;
            for (int sy = 0; sy < 2; ++sy)
                for (int sx = 0; sx < 2; ++sx)
                    hits += inside_shape(label, p, static_cast<double>(x) + 0.25 + 0.5 * sx,
                                         static_cast<double>(y) + 0.25 + 0.5 * sy);
            const double alpha = hits / 4.0;
            const std::array<double, 3> bg{background.r + bg_jitter, background.g + bg_jitter,
                                           background.b + bg_jitter};
            const std::array<double, 3> fgc{fg.r, fg.g, fg.b};
            for (std::size_t c = 0; c < 3; ++c) {
                double v = alpha * fgc[c] + (1.0 - alpha) * bg[c] + rng.normal(0.0, 0.04);
                ds.pixels[base + (c * h + y) * w + x] = static_cast<float>(std::clamp(v, 0.0, 1.0));
            }
        }
    }
}

}  // namespace

std::vector<DomainSpec> default_domains(std::size_t per_domain, double rho_train, double rho_ood) {
    std::vector<DomainSpec> out;
    for (std::uint8_t d = 0; d < 5; ++d) {
        DomainSpec s;
        s.domain_id = d;
        s.rho = d == kOodTestDomain ? rho_ood : rho_train;
        s.palette0 = shifted(kBasePalette0, kDomainShift[d]);
        s.palette1 = shifted(kBasePalette1, kDomainShift[d]);
        s.sample_count = per_domain;
        out.push_back(s);
    }
    return out;
}

std::vector<std::size_t> Dataset::indices_of_domain(int domain) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < size(); ++i)
        if (domains[i] == domain) out.push_back(i);
    return out;
}

std::vector<std::size_t> Dataset::train_indices() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < size(); ++i)
        if (is_train_domain(domains[i])) out.push_back(i);
    return out;
}

Dataset generate(const std::vector<DomainSpec>& specs, std::uint64_t seed) {
    if (specs.empty()) throw ConfigError("generate: at least one domain is required");
    for (const auto& s : specs) {
        if (!(s.rho >= 0.0 && s.rho <= 1.0)) {
            throw ConfigError("generate: rho " + std::to_string(s.rho) + " for domain " +
                              std::to_string(s.domain_id) + " outside [0, 1]");
        }
    }
    Rng rng = Rng::stream(seed, "data");
    Dataset ds;
    std::size_t total = 0;
    for (const auto& s : specs) total += s.sample_count;
    ds.pixels.reserve(total * ds.image_size());
    for (const auto& s : specs) {
        for (std::size_t i = 0; i < s.sample_count; ++i) {
            const int label = static_cast<int>(i % 2);
            const bool agrees = rng.bernoulli(s.rho);
            const int palette = agrees ? label : 1 - label;
            render_sample(label, palette == 0 ? s.palette0 : s.palette1, rng, ds);
            ds.labels.push_back(static_cast<std::uint8_t>(label));
            ds.domains.push_back(s.domain_id);
        }
    }
    return ds;
}

std::vector<std::uint8_t> encode_dataset(const Dataset& ds) {
    io::ByteWriter w;
    w.reserve(24 + ds.size() * (2 + 4 * ds.image_size()));
    w.raw("CGPD");
    w.u32(kDatasetVersion);
    w.u32(static_cast<std::uint32_t>(ds.size()));
    w.u32(static_cast<std::uint32_t>(ds.channels));
    w.u32(static_cast<std::uint32_t>(ds.height));
    w.u32(static_cast<std::uint32_t>(ds.width));
    for (std::size_t i = 0; i < ds.size(); ++i) {
        w.u8(ds.labels[i]);
        w.u8(ds.domains[i]);
        for (float v : ds.image(i)) w.f32(v);
    }
    return w.bytes();
}

Dataset decode_dataset(const std::vector<std::uint8_t>& bytes, const std::string& source) {
    io::ByteReader r(bytes, source);
    if (r.raw(4) != "CGPD") {
        throw FormatError(source + ": bad magic (expected CGPD) at byte offset 0");
    }
    const auto version = r.u32();
    if (version != kDatasetVersion) {
        throw FormatError(source + ": unsupported dataset version " + std::to_string(version) +
                          " at byte offset 4");
    }
    Dataset ds;
    const std::size_t n = r.u32();
    ds.channels = r.u32();
    ds.height = r.u32();
    ds.width = r.u32();
    const std::size_t expected = 24 + n * (2 + 4 * ds.image_size());
    if (bytes.size() != expected) {
        throw FormatError(source + ": expected " + std::to_string(expected) + " bytes for " + std::to_string(n) +
                          " samples, file has " + std::to_string(bytes.size()) + " (mismatch at byte offset " +
                          std::to_string(std::min(expected, bytes.size())) + ")");
    }
    ds.labels.reserve(n);
    ds.domains.reserve(n);
    ds.pixels.resize(n * ds.image_size());
    for (std::size_t i = 0; i < n; ++i) {
        ds.labels.push_back(r.u8());
        ds.domains.push_back(r.u8());
        for (std::size_t j = 0; j < ds.image_size(); ++j) ds.pixels[i * ds.image_size() + j] = r.f32();
    }
    return ds;
}

void write_dataset(const Dataset& ds, const std::string& path) { io::write_file(path, encode_dataset(ds)); }

Dataset read_dataset(const std::string& path) { return decode_dataset(io::read_file(path), path); }

Batch make_batch(const Dataset& ds, std::span<const std::size_t> indices) {
    Batch b;
    b.channels = ds.channels;
    b.height = ds.height;
    b.width = ds.width;
    b.images.reserve(indices.size() * ds.image_size());
    for (auto i : indices) {
        const auto img = ds.image(i);
        b.images.insert(b.images.end(), img.begin(), img.end());
        b.labels.push_back(ds.labels[i]);
        b.domains.push_back(ds.domains[i]);
    }
    return b;
}

std::vector<std::vector<std::size_t>> shuffled_batches(std::vector<std::size_t> indices, std::size_t batch_size,
                                                       Rng& rng) {
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    // Fisher–Yates with the platform-independent integer draw.
    for (std::size_t i = indices.size(); i > 1; --i) std::swap(indices[i - 1], indices[rng.uniform_int(i)]);
    std::vector<std::vector<std::size_t>> out;
    for (std::size_t start = 0; start < indices.size(); start += batch_size) {
        const std::size_t end = std::min(indices.size(), start + batch_size);
        out.emplace_back(indices.begin() + static_cast<std::ptrdiff_t>(start),
                         indices.begin() + static_cast<std::ptrdiff_t>(end));
    }
    return out;
}

void rotate90(std::span<float> image, std::size_t channels, std::size_t size, int k) {
    k = ((k % 4) + 4) % 4;
    if (k == 0) return;
    std::vector<float> tmp(image.begin(), image.end());
    for (std::size_t c = 0; c < channels; ++c) {
        const float* src = tmp.data() + c * size * size;
        float* dst = image.data() + c * size * size;
        for (std::size_t y = 0; y < size; ++y) {
            for (std::size_t x = 0; x < size; ++x) {
                std::size_t sy = y, sx = x;
                // destination (y, x) reads the source pixel it came from
                switch (k) {
                    case 1: sy = x; sx = size - 1 - y; break;
                    case 2: sy = size - 1 - y; sx = size - 1 - x; break;
                    case 3: sy = size - 1 - x; sx = y; break;
                }
                dst[y * size + x] = src[sy * size + sx];
            }
        }
    }
}

void hflip(std::span<float> image, std::size_t channels, std::size_t height, std::size_t width) {
    for (std::size_t c = 0; c < channels; ++c)
        for (std::size_t y = 0; y < height; ++y) {
            float* row = image.data() + (c * height + y) * width;
            std::reverse(row, row + width);
        }
}

void augment(Batch& batch, Rng& rng) {
    for (std::size_t i = 0; i < batch.size(); ++i) {
        auto img = batch.image(i);
        const int k = static_cast<int>(rng.uniform_int(4));
        const bool flip = rng.bernoulli(0.5);
        if (batch.height == batch.width) rotate90(img, batch.channels, batch.height, k);
        if (flip) hflip(img, batch.channels, batch.height, batch.width);
    }
}

void normalize(Batch& batch) {
    const std::size_t plane = batch.height * batch.width;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        auto img = batch.image(i);
        for (std::size_t c = 0; c < batch.channels; ++c)
            for (std::size_t j = 0; j < plane; ++j) img[c * plane + j] = (img[c * plane + j] - kImageNetMean[c]) / kImageNetStd[c];
    }
}

void denormalize(Batch& batch) {
    const std::size_t plane = batch.height * batch.width;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        auto img = batch.image(i);
        for (std::size_t c = 0; c < batch.channels; ++c)
            for (std::size_t j = 0; j < plane; ++j) img[c * plane + j] = img[c * plane + j] * kImageNetStd[c] + kImageNetMean[c];
    }
}

}  // namespace cgp::data
