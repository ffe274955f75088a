#include <stdexcept>

#include "cgp/binary_io.hpp"
#include "cgp/nn.hpp"

namespace cgp::nn {

void write_checkpoint(const std::string& path, const std::vector<CheckpointRecord>& records) {
    io::ByteWriter w;
    w.raw("CGPW");
    w.u32(kCheckpointVersion);
    w.u32(static_cast<std::uint32_t>(records.size()));
    for (const auto& r : records) {
        if (r.name.size() > UINT16_MAX) throw std::invalid_argument("parameter name too long: " + r.name);
        if (r.dims.size() > UINT8_MAX) throw std::invalid_argument("parameter rank too large: " + r.name);
        w.u16(static_cast<std::uint16_t>(r.name.size()));
        w.raw(r.name);
        w.u8(static_cast<std::uint8_t>(r.dims.size()));
        for (auto d : r.dims) w.u32(d);
        for (float v : r.values) w.f32(v);
    }
    io::write_file(path, w.bytes());
}

std::vector<CheckpointRecord> read_checkpoint(const std::string& path) {
    std::vector<std::uint8_t> bytes;
    try {
        bytes = io::read_file(path);
    } catch (const std::runtime_error& e) {
        throw LoadError(e.what());
    }
    io::ByteReader r(bytes, path);
    try {
        if (r.raw(4) != "CGPW") r.fail("bad magic (expected CGPW)");
        const auto version = r.u32();
        if (version != kCheckpointVersion) r.fail("unsupported checkpoint version " + std::to_string(version));
        const auto count = r.u32();
        std::vector<CheckpointRecord> out;
        out.reserve(count);
        for (std::uint32_t i = 0; i < count; ++i) {
            CheckpointRecord rec;
            rec.name = r.raw(r.u16());
            const auto rank = r.u8();
            std::size_t n = 1;
            for (std::uint8_t d = 0; d < rank; ++d) {
                rec.dims.push_back(r.u32());
                n *= rec.dims.back();
            }
            if (n * 4 > r.remaining()) r.fail("truncated values for parameter '" + rec.name + "'");
            rec.values.resize(n);
            for (auto& v : rec.values) v = r.f32();
            out.push_back(std::move(rec));
        }
        if (r.remaining() != 0) r.fail("trailing bytes after last parameter");
        return out;
    } catch (const FormatError& e) {
        throw LoadError(e.what());
    }
}

}  // namespace cgp::nn
