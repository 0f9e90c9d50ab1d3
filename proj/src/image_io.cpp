#include "patchforge/image_io.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace patchforge {

std::vector<unsigned char> quantize_u8(const Tensor& image) {
    std::vector<unsigned char> out(image.size());
    for (std::size_t i = 0; i < image.size(); ++i) {
        const float v = std::clamp(image[i], 0.0f, 1.0f);
        out[i] = static_cast<unsigned char>(std::floor(v * 255.0f + 0.5f));
    }
    return out;
}

namespace {

void put_u32_be(std::vector<unsigned char>& v, std::uint32_t x) {
    v.push_back(static_cast<unsigned char>(x >> 24));
    v.push_back(static_cast<unsigned char>(x >> 16));
    v.push_back(static_cast<unsigned char>(x >> 8));
    v.push_back(static_cast<unsigned char>(x));
}

std::uint32_t get_u32_be(const unsigned char* p) {
    return (static_cast<std::uint32_t>(p[0]) << 24) | (static_cast<std::uint32_t>(p[1]) << 16) |
           (static_cast<std::uint32_t>(p[2]) << 8) | static_cast<std::uint32_t>(p[3]);
}

void write_chunk(std::ofstream& os, const char type[4], const std::vector<unsigned char>& payload) {
    std::vector<unsigned char> head;
    put_u32_be(head, static_cast<std::uint32_t>(payload.size()));
    os.write(reinterpret_cast<const char*>(head.data()), 4);
    os.write(type, 4);
    if (!payload.empty()) os.write(reinterpret_cast<const char*>(payload.data()), static_cast<std::streamsize>(payload.size()));
    uLong crc = crc32(0L, reinterpret_cast<const Bytef*>(type), 4);
    if (!payload.empty()) crc = crc32(crc, payload.data(), static_cast<uInt>(payload.size()));
    std::vector<unsigned char> tail;
    put_u32_be(tail, static_cast<std::uint32_t>(crc));
    os.write(reinterpret_cast<const char*>(tail.data()), 4);
}

constexpr unsigned char kPngSig[8] = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};

int paeth(int a, int b, int c) {
    const int p = a + b - c;
    const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
    if (pa <= pb && pa <= pc) return a;
    if (pb <= pc) return b;
    return c;
}

}  // namespace

void write_png(const std::string& path, const Tensor& image) {
    if (image.rank() != 3 || (image.dim(0) != 3 && image.dim(0) != 1))
        throw std::invalid_argument("write_png expects [3,H,W] or [1,H,W]");
    const int ch = image.dim(0), h = image.dim(1), w = image.dim(2);
    const std::vector<unsigned char> q = quantize_u8(image);

    // interleave + prepend filter byte 0 per scanline
    std::vector<unsigned char> raw(static_cast<std::size_t>(h) * (1 + static_cast<std::size_t>(w) * ch));
    std::size_t pos = 0;
    for (int y = 0; y < h; ++y) {
        raw[pos++] = 0;
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < ch; ++c)
                raw[pos++] = q[(static_cast<std::size_t>(c) * h + y) * w + x];
    }

    uLongf comp_len = compressBound(static_cast<uLong>(raw.size()));
    std::vector<unsigned char> comp(comp_len);
    if (compress2(comp.data(), &comp_len, raw.data(), static_cast<uLong>(raw.size()), 6) != Z_OK)
        throw std::runtime_error("png deflate failed");
    comp.resize(comp_len);

    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open " + path + " for writing");
    os.write(reinterpret_cast<const char*>(kPngSig), 8);
    std::vector<unsigned char> ihdr;
    put_u32_be(ihdr, static_cast<std::uint32_t>(w));
    put_u32_be(ihdr, static_cast<std::uint32_t>(h));
    ihdr.push_back(8);                                    // bit depth
    ihdr.push_back(ch == 3 ? 2 : 0);                      // color type
    ihdr.push_back(0);                                    // compression
    ihdr.push_back(0);                                    // filter
    ihdr.push_back(0);                                    // interlace
    write_chunk(os, "IHDR", ihdr);
    write_chunk(os, "IDAT", comp);
    write_chunk(os, "IEND", {});
    if (!os) throw std::runtime_error("write failed for " + path);
}

Tensor read_png(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open " + path);
    std::vector<unsigned char> file((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    if (file.size() < 8 || std::memcmp(file.data(), kPngSig, 8) != 0) throw std::runtime_error("not a png: " + path);

    int w = 0, h = 0, ch = 0;
    std::vector<unsigned char> idat;
    std::size_t pos = 8;
    while (pos + 12 <= file.size()) {
        const std::uint32_t len = get_u32_be(&file[pos]);
        const char* type = reinterpret_cast<const char*>(&file[pos + 4]);
        const unsigned char* payload = &file[pos + 8];
        if (pos + 12 + len > file.size()) throw std::runtime_error("truncated png chunk");
        if (std::memcmp(type, "IHDR", 4) == 0) {
            w = static_cast<int>(get_u32_be(payload));
            h = static_cast<int>(get_u32_be(payload + 4));
            const int depth = payload[8], color = payload[9], interlace = payload[12];
            if (depth != 8 || (color != 2 && color != 0) || interlace != 0)
                throw std::runtime_error("unsupported png variant (need 8-bit gray/rgb, non-interlaced)");
            ch = color == 2 ? 3 : 1;
        } else if (std::memcmp(type, "IDAT", 4) == 0) {
            idat.insert(idat.end(), payload, payload + len);
        } else if (std::memcmp(type, "IEND", 4) == 0) {
            break;
        }
        pos += 12 + len;
    }
    if (w <= 0 || h <= 0 || idat.empty()) throw std::runtime_error("malformed png: " + path);

    const std::size_t stride = static_cast<std::size_t>(w) * ch;
    std::vector<unsigned char> raw(static_cast<std::size_t>(h) * (stride + 1));
    uLongf raw_len = static_cast<uLongf>(raw.size());
    if (uncompress(raw.data(), &raw_len, idat.data(), static_cast<uLong>(idat.size())) != Z_OK || raw_len != raw.size())
        throw std::runtime_error("png inflate failed: " + path);

    // undo per-scanline filtering
    std::vector<unsigned char> pix(static_cast<std::size_t>(h) * stride);
    for (int y = 0; y < h; ++y) {
        const unsigned char filter = raw[static_cast<std::size_t>(y) * (stride + 1)];
        const unsigned char* src = &raw[static_cast<std::size_t>(y) * (stride + 1) + 1];
        unsigned char* dst = &pix[static_cast<std::size_t>(y) * stride];
        const unsigned char* up = y > 0 ? &pix[static_cast<std::size_t>(y - 1) * stride] : nullptr;
        for (std::size_t i = 0; i < stride; ++i) {
            const int a = i >= static_cast<std::size_t>(ch) ? dst[i - ch] : 0;
            const int b = up ? up[i] : 0;
            const int c = (up && i >= static_cast<std::size_t>(ch)) ? up[i - ch] : 0;
            int v = src[i];
            switch (filter) {
                case 0: break;
                case 1: v += a; break;
                case 2: v += b; break;
                case 3: v += (a + b) / 2; break;
                case 4: v += paeth(a, b, c); break;
                default: throw std::runtime_error("bad png filter");
            }
            dst[i] = static_cast<unsigned char>(v & 0xff);
        }
    }

    Tensor out({3, h, w});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c) {
                const unsigned char v = pix[static_cast<std::size_t>(y) * stride + static_cast<std::size_t>(x) * ch + (ch == 3 ? c : 0)];
                out.at3(c, y, x) = static_cast<float>(v) / 255.0f;
            }
    return out;
}

Tensor upscale_nearest(const Tensor& image, int factor) {
    const int ch = image.dim(0), h = image.dim(1), w = image.dim(2);
    Tensor out({ch, h * factor, w * factor});
    for (int c = 0; c < ch; ++c)
        for (int y = 0; y < h * factor; ++y)
            for (int x = 0; x < w * factor; ++x) out.at3(c, y, x) = image.at3(c, y / factor, x / factor);
    return out;
}

}  // namespace patchforge
