#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace ihvs {

inline constexpr const char* kAppVersion = "1.0.0";

/// Bumped whenever the renderer or world kinematics change behaviour.
/// Datasets remember the value they were produced with; replay verification
/// refuses to certify a dataset against a different simulator revision.
inline constexpr const char* kSimRevision = "ihvs-sim-r1";

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ConfigError : Error {
    using Error::Error;
};
struct StateError : Error {
    using Error::Error;
};
struct DimensionError : Error {
    using Error::Error;
};
struct FormatError : Error {
    using Error::Error;
};
struct InputError : Error {
    using Error::Error;
};

struct Vec2 {
    double x = 0.0;
    double y = 0.0;

    Vec2 operator+(const Vec2& o) const { return {x + o.x, y + o.y}; }
    Vec2 operator-(const Vec2& o) const { return {x - o.x, y - o.y}; }
    Vec2 operator*(double s) const { return {x * s, y * s}; }
    bool operator==(const Vec2& o) const { return x == o.x && y == o.y; }
    double norm() const { return std::hypot(x, y); }
};

inline Vec2 operator*(double s, const Vec2& v) { return v * s; }

struct Rgb {
    double r = 0.0, g = 0.0, b = 0.0;
    bool operator==(const Rgb& o) const { return r == o.r && g == o.g && b == o.b; }
};

/// FNV-1a, used for architecture/config fingerprints.
inline std::uint64_t fnv1a(const std::string& s) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

inline int env_thread_cap(int hardware_default) {
    if (const char* v = std::getenv("IHVS_THREADS")) {
        int n = std::atoi(v);
        if (n >= 1) return n;
    }
    return hardware_default < 1 ? 1 : hardware_default;
}

}  // namespace ihvs
