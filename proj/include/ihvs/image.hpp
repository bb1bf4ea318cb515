#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <zlib.h>

#include "ihvs/common.hpp"

namespace ihvs {

/// Fixed-layout RGB raster, row-major [y][x][c], values in [0,1].
struct Image {
    int width = 0;
    int height = 0;
    std::vector<float> pixels;

    static constexpr int kChannels = 3;

    Image() = default;
    Image(int w, int h) : width(w), height(h), pixels(static_cast<std::size_t>(w) * h * kChannels, 0.0f) {}

    std::size_t size() const { return pixels.size(); }

    float& at(int y, int x, int c) {
        return pixels[(static_cast<std::size_t>(y) * width + x) * kChannels + c];
    }
    float at(int y, int x, int c) const {
        return pixels[(static_cast<std::size_t>(y) * width + x) * kChannels + c];
    }

    bool same_bits(const Image& o) const {
        return width == o.width && height == o.height &&
               std::memcmp(pixels.data(), o.pixels.data(), pixels.size() * sizeof(float)) == 0;
    }

    void validate() const {
        if (pixels.size() != static_cast<std::size_t>(width) * height * kChannels)
            throw DimensionError("image: pixel buffer does not match width*height*3");
        for (float v : pixels)
            if (!(v >= 0.0f && v <= 1.0f)) throw FormatError("image: pixel value outside [0,1]");
    }
};

struct CropWindow {
    int x0 = 0, y0 = 0, w = 0, h = 0;
};

inline Image crop_pixels(const Image& src, const CropWindow& win) {
    if (win.w <= 0 || win.h <= 0 || win.x0 < 0 || win.y0 < 0 || win.x0 + win.w > src.width ||
        win.y0 + win.h > src.height)
        throw DimensionError("crop window out of bounds");
    Image out(win.w, win.h);
    for (int y = 0; y < win.h; ++y) {
        const float* s = &src.pixels[(static_cast<std::size_t>(win.y0 + y) * src.width + win.x0) * Image::kChannels];
        float* d = &out.pixels[static_cast<std::size_t>(y) * win.w * Image::kChannels];
        std::memcpy(d, s, static_cast<std::size_t>(win.w) * Image::kChannels * sizeof(float));
    }
    return out;
}

/// Bilinear resampling with half-pixel centers: output pixel o samples source
/// coordinate (o + 0.5) * (src / out) - 0.5, edge-clamped. This kernel is part
/// of the observation contract; training and control must share it.
inline Image resize_bilinear(const Image& src, int out_w, int out_h) {
    if (out_w <= 0 || out_h <= 0) throw DimensionError("resize: output size must be positive");
    Image out(out_w, out_h);
    const double sx = static_cast<double>(src.width) / out_w;
    const double sy = static_cast<double>(src.height) / out_h;
    for (int oy = 0; oy < out_h; ++oy) {
        double fy = (oy + 0.5) * sy - 0.5;
        if (fy < 0.0) fy = 0.0;
        if (fy > src.height - 1.0) fy = src.height - 1.0;
        const int y0 = static_cast<int>(fy);
        const int y1 = y0 + 1 < src.height ? y0 + 1 : y0;
        const double wy = fy - y0;
        for (int ox = 0; ox < out_w; ++ox) {
            double fx = (ox + 0.5) * sx - 0.5;
            if (fx < 0.0) fx = 0.0;
            if (fx > src.width - 1.0) fx = src.width - 1.0;
            const int x0 = static_cast<int>(fx);
            const int x1 = x0 + 1 < src.width ? x0 + 1 : x0;
            const double wx = fx - x0;
            for (int c = 0; c < Image::kChannels; ++c) {
                const double top = (1.0 - wx) * src.at(y0, x0, c) + wx * src.at(y0, x1, c);
                const double bot = (1.0 - wx) * src.at(y1, x0, c) + wx * src.at(y1, x1, c);
                out.at(oy, ox, c) = static_cast<float>((1.0 - wy) * top + wy * bot);
            }
        }
    }
    return out;
}

namespace detail {

inline void png_chunk(std::ofstream& f, const char type[4], const std::vector<std::uint8_t>& data) {
    auto be32 = [&](std::uint32_t v) {
        std::uint8_t b[4] = {static_cast<std::uint8_t>(v >> 24), static_cast<std::uint8_t>(v >> 16),
                             static_cast<std::uint8_t>(v >> 8), static_cast<std::uint8_t>(v)};
        f.write(reinterpret_cast<const char*>(b), 4);
    };
    be32(static_cast<std::uint32_t>(data.size()));
    f.write(type, 4);
    if (!data.empty()) f.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
    std::uint32_t crc = static_cast<std::uint32_t>(crc32(0, reinterpret_cast<const Bytef*>(type), 4));
    if (!data.empty())
        crc = static_cast<std::uint32_t>(
            crc32(crc, reinterpret_cast<const Bytef*>(data.data()), static_cast<uInt>(data.size())));
    auto be32v = [&](std::uint32_t v) {
        std::uint8_t b[4] = {static_cast<std::uint8_t>(v >> 24), static_cast<std::uint8_t>(v >> 16),
                             static_cast<std::uint8_t>(v >> 8), static_cast<std::uint8_t>(v)};
        f.write(reinterpret_cast<const char*>(b), 4);
    };
    be32v(crc);
}

}  // namespace detail

/// 8-bit RGB PNG export for inspection. Quantization rounds half to even.
inline void write_png(const Image& img, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw FormatError("png: cannot open " + path);
    static const std::uint8_t sig[8] = {0x89, 'P', 'N', 'G', 0x0D, 0x0A, 0x1A, 0x0A};
    f.write(reinterpret_cast<const char*>(sig), 8);

    std::vector<std::uint8_t> ihdr(13);
    auto put32 = [](std::uint8_t* p, std::uint32_t v) {
        p[0] = static_cast<std::uint8_t>(v >> 24);
        p[1] = static_cast<std::uint8_t>(v >> 16);
        p[2] = static_cast<std::uint8_t>(v >> 8);
        p[3] = static_cast<std::uint8_t>(v);
    };
    put32(&ihdr[0], static_cast<std::uint32_t>(img.width));
    put32(&ihdr[4], static_cast<std::uint32_t>(img.height));
    ihdr[8] = 8;   // bit depth
    ihdr[9] = 2;   // truecolor
    ihdr[10] = ihdr[11] = ihdr[12] = 0;
    detail::png_chunk(f, "IHDR", ihdr);

    std::vector<std::uint8_t> raw;
    raw.reserve(static_cast<std::size_t>(img.height) * (1 + static_cast<std::size_t>(img.width) * 3));
    for (int y = 0; y < img.height; ++y) {
        raw.push_back(0);  // filter type 0
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < 3; ++c) {
                double v = img.at(y, x, c) * 255.0;
                if (v < 0.0) v = 0.0;
                if (v > 255.0) v = 255.0;
                raw.push_back(static_cast<std::uint8_t>(std::nearbyint(v)));
            }
    }
    uLongf bound = compressBound(static_cast<uLong>(raw.size()));
    std::vector<std::uint8_t> idat(bound);
    if (compress2(idat.data(), &bound, raw.data(), static_cast<uLong>(raw.size()), 9) != Z_OK)
        throw FormatError("png: deflate failed");
    idat.resize(bound);
    detail::png_chunk(f, "IDAT", idat);
    detail::png_chunk(f, "IEND", {});
    if (!f) throw FormatError("png: write failed for " + path);
}

}  // namespace ihvs
