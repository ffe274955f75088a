#include "cgp/image_io.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>

#include "cgp/binary_io.hpp"
#include "cgp/errors.hpp"

namespace cgp::io {

std::uint8_t quantize(double v) {
    const double c = std::clamp(std::isnan(v) ? 0.0 : v, 0.0, 1.0);
    return static_cast<std::uint8_t>(std::floor(255.0 * c + 0.5));
}

Image gray_image(const std::vector<double>& values, std::size_t height, std::size_t width) {
    if (values.size() != height * width) {
        throw DimensionError("gray_image: " + std::to_string(values.size()) + " values for " +
                             std::to_string(height) + "x" + std::to_string(width));
    }
    Image img{width, height, 1, {}};
    img.pixels.reserve(values.size());
    for (double v : values) img.pixels.push_back(quantize(v));
    return img;
}

Image rgb_image(const std::vector<float>& chw, std::size_t height, std::size_t width) {
    const std::size_t plane = height * width;
    if (chw.size() != 3 * plane) {
        throw DimensionError("rgb_image: " + std::to_string(chw.size()) + " values for 3x" + std::to_string(height) +
                             "x" + std::to_string(width));
    }
    Image img{width, height, 3, std::vector<std::uint8_t>(3 * plane)};
    for (std::size_t p = 0; p < plane; ++p)
        for (std::size_t c = 0; c < 3; ++c) img.pixels[p * 3 + c] = quantize(chw[c * plane + p]);
    return img;
}

std::vector<std::uint8_t> encode_pnm(const Image& img) {
    if (img.channels != 1 && img.channels != 3) throw DimensionError("encode_pnm: channels must be 1 or 3");
    const std::string header = std::string(img.channels == 1 ? "P5" : "P6") + "\n" + std::to_string(img.width) +
                               " " + std::to_string(img.height) + "\n255\n";
    std::vector<std::uint8_t> out(header.begin(), header.end());
    out.insert(out.end(), img.pixels.begin(), img.pixels.end());
    return out;
}

namespace {

// Header tokens are separated by whitespace; '#' starts a comment line.
class HeaderParser {
public:
    HeaderParser(const std::vector<std::uint8_t>& bytes, const std::string& source) : b_(bytes), src_(source) {}

    std::string token() {
        skip();
        std::string t;
        while (pos_ < b_.size() && !std::isspace(b_[pos_])) t.push_back(static_cast<char>(b_[pos_++]));
        if (t.empty()) fail("truncated header");
        return t;
    }

    std::size_t number() {
        const auto t = token();
        if (!std::all_of(t.begin(), t.end(), [](char c) { return std::isdigit(static_cast<unsigned char>(c)); })) {
            fail("expected a number, got '" + t + "'");
        }
        return std::stoul(t);
    }

    // Exactly one whitespace byte separates maxval from the raster.
    std::size_t raster_start() {
        if (pos_ >= b_.size()) fail("truncated header");
        return pos_ + 1;
    }

    [[noreturn]] void fail(const std::string& what) const {
        throw FormatError(src_ + ": " + what + " at byte offset " + std::to_string(pos_));
    }

private:
    void skip() {
        while (pos_ < b_.size()) {
            if (std::isspace(b_[pos_])) {
                ++pos_;
            } else if (b_[pos_] == '#') {
                while (pos_ < b_.size() && b_[pos_] != '\n') ++pos_;
            } else {
                break;
            }
        }
    }

    const std::vector<std::uint8_t>& b_;
    const std::string& src_;
    std::size_t pos_ = 0;
};

}  // namespace

Image decode_pnm(const std::vector<std::uint8_t>& bytes, const std::string& source) {
    HeaderParser p(bytes, source);
    const auto magic = p.token();
    if (magic != "P5" && magic != "P6") p.fail("unsupported magic '" + magic + "' (expected P5 or P6)");
    Image img;
    img.channels = magic == "P5" ? 1 : 3;
    img.width = p.number();
    img.height = p.number();
    const auto maxval = p.number();
    if (maxval != 255) p.fail("only maxval 255 is supported, got " + std::to_string(maxval));
    const std::size_t start = p.raster_start();
    const std::size_t need = img.width * img.height * img.channels;
    if (bytes.size() - std::min(start, bytes.size()) < need) {
        throw FormatError(source + ": expected " + std::to_string(start + need) + " bytes, file has " +
                          std::to_string(bytes.size()) + " (truncated raster at byte offset " +
                          std::to_string(bytes.size()) + ")");
    }
    img.pixels.assign(bytes.begin() + static_cast<std::ptrdiff_t>(start),
                      bytes.begin() + static_cast<std::ptrdiff_t>(start + need));
    return img;
}

void write_pnm(const std::string& path, const Image& img) { write_file(path, encode_pnm(img)); }

Image read_pnm(const std::string& path) { return decode_pnm(read_file(path), path); }

std::vector<double> gray_values(const Image& img) {
    if (img.channels != 1) throw DimensionError("gray_values: image has " + std::to_string(img.channels) + " channels");
    std::vector<double> out;
    out.reserve(img.pixels.size());
    for (auto v : img.pixels) out.push_back(v / 255.0);
    return out;
}

std::vector<float> planar_rgb(const Image& img) {
    if (img.channels != 3) throw DimensionError("planar_rgb: image has " + std::to_string(img.channels) + " channels");
    const std::size_t plane = img.width * img.height;
    std::vector<float> out(3 * plane);
    for (std::size_t p = 0; p < plane; ++p)
        for (std::size_t c = 0; c < 3; ++c) out[c * plane + p] = img.pixels[p * 3 + c] / 255.0f;
    return out;
}

}  // namespace cgp::io
