#pragma once

// Binary netpbm I/O: P6 (RGB frames) and P5 (label maps). Chosen for
// dependency-free, byte-exact round trips. Headers are written in the
// canonical form `P6\n<w> <h>\n255\n`.

#include <cstdint>
#include <string>
#include <vector>

namespace jf {

struct ImageU8 {
    int height = 0;
    int width = 0;
    int channels = 0;  // 3 for frames, 1 for label maps
    std::vector<std::uint8_t> v;  // row-major, interleaved channels

    std::uint8_t at(int y, int x, int c = 0) const {
        return v[(static_cast<std::size_t>(y) * width + x) * channels + c];
    }
    std::uint8_t& at(int y, int x, int c = 0) {
        return v[(static_cast<std::size_t>(y) * width + x) * channels + c];
    }
};

ImageU8 read_ppm(const std::string& path);   // P6, maxval 255
ImageU8 read_pgm(const std::string& path);   // P5, maxval 255
void write_ppm(const std::string& path, const ImageU8& img);
void write_pgm(const std::string& path, const ImageU8& img);

// In-memory variants used by tests and checkpoint-free tooling.
ImageU8 decode_pnm(const std::vector<std::uint8_t>& bytes, const std::string& origin);
std::vector<std::uint8_t> encode_pnm(const ImageU8& img);

}  // namespace jf
