#include "jf/netpbm.hpp"

#include <cstdio>
#include <fstream>

#include "jf/common.hpp"

namespace jf {

namespace {

struct ByteCursor {
    const std::vector<std::uint8_t>& bytes;
    std::size_t pos = 0;
    const std::string& origin;

    [[noreturn]] void fail(const std::string& what) const {
        throw IoError(origin + ": " + what + " at byte " + std::to_string(pos));
    }

    int get() {
        if (pos >= bytes.size()) fail("unexpected end of file");
        return bytes[pos++];
    }

    void skip_space() {
        // whitespace and '#' comments between header fields
        for (;;) {
            if (pos >= bytes.size()) fail("unexpected end of header");
            const int c = bytes[pos];
            if (c == '#') {
                while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
            } else if (c == ' ' || c == '\t' || c == '\r' || c == '\n') {
                ++pos;
            } else {
                return;
            }
        }
    }

    int read_int() {
        skip_space();
        if (pos >= bytes.size() || bytes[pos] < '0' || bytes[pos] > '9') fail("expected integer");
        long v = 0;
        while (pos < bytes.size() && bytes[pos] >= '0' && bytes[pos] <= '9') {
            v = v * 10 + (bytes[pos] - '0');
            if (v > 1 << 20) fail("integer out of range");
            ++pos;
        }
        return static_cast<int>(v);
    }
};

std::vector<std::uint8_t> slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError(path + ": cannot open for reading");
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return bytes;
}

void spill(const std::string& path, const std::vector<std::uint8_t>& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError(path + ": cannot open for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError(path + ": write failed");
}

}  // namespace

ImageU8 decode_pnm(const std::vector<std::uint8_t>& bytes, const std::string& origin) {
    ByteCursor cur{bytes, 0, origin};
    const int magic0 = cur.get();
    const int magic1 = cur.get();
    if (magic0 != 'P' || (magic1 != '5' && magic1 != '6')) {
        cur.pos = 0;
        cur.fail("not a P5/P6 netpbm file");
    }
    ImageU8 img;
    img.channels = (magic1 == '6') ? 3 : 1;
    img.width = cur.read_int();
    img.height = cur.read_int();
    const int maxval = cur.read_int();
    if (maxval != 255) cur.fail("unsupported maxval " + std::to_string(maxval));
    if (img.width < 1 || img.height < 1) cur.fail("degenerate image size");
    // single whitespace byte separates header from raster
    const int sep = cur.get();
    if (sep != '\n' && sep != ' ' && sep != '\t' && sep != '\r') cur.fail("missing raster separator");
    const std::size_t want = static_cast<std::size_t>(img.width) * img.height * img.channels;
    if (bytes.size() - cur.pos < want) cur.fail("raster truncated");
    img.v.assign(bytes.begin() + static_cast<std::ptrdiff_t>(cur.pos),
                 bytes.begin() + static_cast<std::ptrdiff_t>(cur.pos + want));
    return img;
}

std::vector<std::uint8_t> encode_pnm(const ImageU8& img) {
    if (img.channels != 1 && img.channels != 3) throw IoError("encode_pnm: channels must be 1 or 3");
    if (img.v.size() != static_cast<std::size_t>(img.width) * img.height * img.channels) {
        throw IoError("encode_pnm: buffer does not match declared size");
    }
    char header[64];
    const int n = std::snprintf(header, sizeof(header), "P%c\n%d %d\n255\n", img.channels == 3 ? '6' : '5',
                                img.width, img.height);
    std::vector<std::uint8_t> bytes(header, header + n);
    bytes.insert(bytes.end(), img.v.begin(), img.v.end());
    return bytes;
}

ImageU8 read_ppm(const std::string& path) {
    ImageU8 img = decode_pnm(slurp(path), path);
    if (img.channels != 3) throw IoError(path + ": expected P6 (RGB)");
    return img;
}

ImageU8 read_pgm(const std::string& path) {
    ImageU8 img = decode_pnm(slurp(path), path);
    if (img.channels != 1) throw IoError(path + ": expected P5 (grayscale)");
    return img;
}

void write_ppm(const std::string& path, const ImageU8& img) {
    if (img.channels != 3) throw IoError(path + ": write_ppm needs 3 channels");
    spill(path, encode_pnm(img));
}

void write_pgm(const std::string& path, const ImageU8& img) {
    if (img.channels != 1) throw IoError(path + ": write_pgm needs 1 channel");
    spill(path, encode_pnm(img));
}

}  // namespace jf
