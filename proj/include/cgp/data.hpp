#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "cgp/rng.hpp"
#include "cgp/tensor.hpp"

// Synthetic five-domain dataset. The foreground shape (ellipse = 0,
// cross = 1) always determines the label; the background palette agrees with
// the label with probability rho and is the opposite palette otherwise.
// Domains 0-2 train, 3 is the in-distribution validation split, 4 the OOD test.
namespace cgp::data {

inline constexpr std::array<float, 3> kImageNetMean{0.485f, 0.456f, 0.406f};
inline constexpr std::array<float, 3> kImageNetStd{0.229f, 0.224f, 0.225f};

inline constexpr int kIdValidationDomain = 3;
inline constexpr int kOodTestDomain = 4;

inline bool is_train_domain(int d) { return d >= 0 && d < kIdValidationDomain; }

struct Rgb {
    double r = 0, g = 0, b = 0;
};

struct DomainSpec {
    std::uint8_t domain_id = 0;
    double rho = 0.9;
    Rgb palette0;  // background associated with label 0
    Rgb palette1;  // background associated with label 1
    std::size_t sample_count = 500;
};

// Domains 0-2 at rho_train with distinct palettes, domain 3 at rho_train with
// an unseen palette, domain 4 at rho_ood.
std::vector<DomainSpec> default_domains(std::size_t per_domain = 500, double rho_train = 0.9,
                                        double rho_ood = 0.1);

struct Dataset {
    std::size_t channels = 3;
    std::size_t height = 32;
    std::size_t width = 32;
    std::vector<float> pixels;  // per sample, row-major CHW, in [0,1]
    std::vector<std::uint8_t> labels;
    std::vector<std::uint8_t> domains;

    std::size_t size() const { return labels.size(); }
    std::size_t image_size() const { return channels * height * width; }
    std::span<const float> image(std::size_t i) const {
        return std::span<const float>(pixels).subspan(i * image_size(), image_size());
    }
    std::vector<std::size_t> indices_of_domain(int domain) const;
    std::vector<std::size_t> train_indices() const;
};

// Throws ConfigError for an empty spec list or rho outside [0,1].
Dataset generate(const std::vector<DomainSpec>& specs, std::uint64_t seed);

// ---- Dataset file ("CGPD") ----
// magic "CGPD", version u32, N u32, C u32, H u32, W u32, then per sample:
// label u8, domain u8, C·H·W f32 (CHW). Little-endian throughout.
inline constexpr std::uint32_t kDatasetVersion = 1;

std::vector<std::uint8_t> encode_dataset(const Dataset& ds);
// Throws FormatError naming the byte offset on bad magic, version or length.
Dataset decode_dataset(const std::vector<std::uint8_t>& bytes, const std::string& source = "dataset");
void write_dataset(const Dataset& ds, const std::string& path);
Dataset read_dataset(const std::string& path);

struct Batch {
    std::size_t channels = 3, height = 32, width = 32;
    std::vector<float> images;  // N·C·H·W
    std::vector<int> labels;
    std::vector<int> domains;

    std::size_t size() const { return labels.size(); }
    std::size_t image_size() const { return channels * height * width; }
    std::span<float> image(std::size_t i) { return std::span<float>(images).subspan(i * image_size(), image_size()); }
};

Batch make_batch(const Dataset& ds, std::span<const std::size_t> indices);

// Seeded shuffle of `indices` cut into consecutive batches (last may be short).
std::vector<std::vector<std::size_t>> shuffled_batches(std::vector<std::size_t> indices, std::size_t batch_size,
                                                       Rng& rng);

// Counter-clockwise rotation by k·90° of a square CHW image, in place.
void rotate90(std::span<float> image, std::size_t channels, std::size_t size, int k);
void hflip(std::span<float> image, std::size_t channels, std::size_t height, std::size_t width);

// Random k·90° rotation (k uniform in 0..3) and a horizontal flip with
// probability 0.5, independently per image. Labels are untouched.
void augment(Batch& batch, Rng& rng);

// Per-channel (p - mean) / std with the ImageNet constants, and its inverse.
void normalize(Batch& batch);
void denormalize(Batch& batch);

template <typename T>
Tensor<T> to_tensor(const Batch& batch) {
    std::vector<T> v(batch.images.begin(), batch.images.end());
    return Tensor<T>({batch.size(), batch.channels, batch.height, batch.width}, std::move(v));
}

}  // namespace cgp::data
