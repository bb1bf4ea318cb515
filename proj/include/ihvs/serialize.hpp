#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <zlib.h>

#include "ihvs/common.hpp"

namespace ihvs {

static_assert(std::endian::native == std::endian::little,
              "file formats are little-endian; big-endian hosts are unsupported");

/// Shared on-disk container: magic(4) | u32 version | u64 json_len | json |
/// u32 crc(json) | blobs, each blob being u64 len | bytes | u32 crc(bytes).
/// All integers little-endian. Used by both the dataset (.ihvs) and the
/// checkpoint (.ihvsm) formats.
class BlobWriter {
public:
    BlobWriter(const std::string& path, const char magic[4], std::uint32_t version,
               const std::string& header_json)
        : f_(path, std::ios::binary) {
        if (!f_) throw FormatError("container: cannot open " + path + " for writing");
        f_.write(magic, 4);
        write_u32(version);
        write_u64(header_json.size());
        f_.write(header_json.data(), static_cast<std::streamsize>(header_json.size()));
        write_u32(crc_of(header_json.data(), header_json.size()));
    }

    void write_blob(const void* data, std::size_t n) {
        write_u64(n);
        f_.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
        write_u32(crc_of(data, n));
    }

    void close() {
        f_.close();
        if (!f_) throw FormatError("container: write failed on close");
    }

private:
    static std::uint32_t crc_of(const void* data, std::size_t n) {
        return static_cast<std::uint32_t>(
            crc32(0, static_cast<const Bytef*>(data), static_cast<uInt>(n)));
    }
    void write_u32(std::uint32_t v) { f_.write(reinterpret_cast<const char*>(&v), 4); }
    void write_u64(std::uint64_t v) { f_.write(reinterpret_cast<const char*>(&v), 8); }

    std::ofstream f_;
};

class BlobReader {
public:
    BlobReader(const std::string& path, const char magic[4], std::uint32_t expected_version)
        : f_(path, std::ios::binary) {
        if (!f_) throw FormatError("container: cannot open " + path);
        char m[4];
        if (!f_.read(m, 4) || std::memcmp(m, magic, 4) != 0)
            throw FormatError("container: bad magic in " + path);
        std::uint32_t version = read_u32("version");
        if (version != expected_version)
            throw FormatError("container: unsupported version " + std::to_string(version) +
                              " (expected " + std::to_string(expected_version) + ")");
        std::uint64_t n = read_u64("header length");
        header_.resize(n);
        if (n && !f_.read(header_.data(), static_cast<std::streamsize>(n)))
            throw FormatError("container: truncated header");
        std::uint32_t crc = read_u32("header checksum");
        if (crc != crc_of(header_.data(), header_.size()))
            throw FormatError("container: header checksum mismatch");
    }

    const std::string& header_json() const { return header_; }

    std::vector<std::uint8_t> read_blob() {
        const std::string sect = "blob " + std::to_string(blob_index_);
        std::uint64_t n = read_u64(sect + " length");
        std::vector<std::uint8_t> out(n);
        if (n && !f_.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(n)))
            throw FormatError("container: truncated " + sect);
        std::uint32_t crc = read_u32(sect + " checksum");
        if (crc != crc_of(out.data(), out.size()))
            throw FormatError("container: checksum mismatch in " + sect);
        ++blob_index_;
        return out;
    }

private:
    static std::uint32_t crc_of(const void* data, std::size_t n) {
        return static_cast<std::uint32_t>(
            crc32(0, static_cast<const Bytef*>(data), static_cast<uInt>(n)));
    }
    std::uint32_t read_u32(const std::string& what) {
        std::uint32_t v;
        if (!f_.read(reinterpret_cast<char*>(&v), 4))
            throw FormatError("container: truncated " + what);
        return v;
    }
    std::uint64_t read_u64(const std::string& what) {
        std::uint64_t v;
        if (!f_.read(reinterpret_cast<char*>(&v), 8))
            throw FormatError("container: truncated " + what);
        return v;
    }

    std::ifstream f_;
    std::string header_;
    int blob_index_ = 0;
};

inline void append_f32(std::vector<std::uint8_t>& buf, const float* p, std::size_t n) {
    const std::size_t off = buf.size();
    buf.resize(off + n * sizeof(float));
    std::memcpy(buf.data() + off, p, n * sizeof(float));
}

inline void append_f64(std::vector<std::uint8_t>& buf, const double* p, std::size_t n) {
    const std::size_t off = buf.size();
    buf.resize(off + n * sizeof(double));
    std::memcpy(buf.data() + off, p, n * sizeof(double));
}

}  // namespace ihvs
