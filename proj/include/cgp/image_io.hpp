#pragma once

#include <cstdint>
#include <string>
#include <vector>

// Binary PGM ("P5") and PPM ("P6") with maxval 255. Values in [0,1] are
// quantised as floor(255·v + 0.5) after clamping.
namespace cgp::io {

struct Image {
    std::size_t width = 0;
    std::size_t height = 0;
    std::size_t channels = 1;  // 1 for PGM, 3 for PPM
    std::vector<std::uint8_t> pixels;  // interleaved, row-major
};

std::uint8_t quantize(double v);

Image gray_image(const std::vector<double>& values, std::size_t height, std::size_t width);
// Planar CHW floats in [0,1] (3 channels) to an interleaved RGB image.
Image rgb_image(const std::vector<float>& chw, std::size_t height, std::size_t width);

std::vector<std::uint8_t> encode_pnm(const Image& img);
// Throws FormatError on anything but 8-bit binary P5/P6.
Image decode_pnm(const std::vector<std::uint8_t>& bytes, const std::string& source = "image");

void write_pnm(const std::string& path, const Image& img);
Image read_pnm(const std::string& path);

// Back to [0,1]: per pixel for PGM, planar CHW for PPM.
std::vector<double> gray_values(const Image& img);
std::vector<float> planar_rgb(const Image& img);

}  // namespace cgp::io
