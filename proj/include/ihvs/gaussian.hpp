#pragma once

#include <Eigen/Dense>
#include <cmath>

#include "ihvs/common.hpp"
#include "ihvs/image.hpp"
#include "ihvs/rng.hpp"

namespace ihvs {

inline constexpr double kTwoPi = 6.283185307179586476925286766559;

/// Carrier of every latent distribution in the model (x_t, z, x_g).
struct DiagonalGaussian {
    Eigen::VectorXd mean;
    Eigen::VectorXd log_std;

    int dim() const { return static_cast<int>(mean.size()); }

    void validate() const {
        if (mean.size() != log_std.size())
            throw DimensionError("DiagonalGaussian: mean/log_std length mismatch");
        if (!mean.allFinite() || !log_std.allFinite())
            throw DimensionError("DiagonalGaussian: non-finite parameters");
    }
};

/// Reparameterized draw: mean + exp(log_std) * eps, eps ~ N(0, I). One
/// gaussian per dimension, drawn in index order; losses depend on this order.
inline Eigen::VectorXd sample(const DiagonalGaussian& g, RngStream& rng) {
    Eigen::VectorXd out(g.mean.size());
    for (Eigen::Index i = 0; i < out.size(); ++i)
        out[i] = g.mean[i] + std::exp(g.log_std[i]) * rng.gaussian();
    return out;
}

/// KL(q || p) for diagonal Gaussians, summed over dimensions:
/// log(sp/sq) + (sq^2 + (mq-mp)^2) / (2 sp^2) - 1/2 per dimension.
inline double kl_diag_gaussian(const DiagonalGaussian& q, const DiagonalGaussian& p) {
    if (q.mean.size() != p.mean.size())
        throw DimensionError("kl_diag_gaussian: dimension mismatch");
    double acc = 0.0;
    for (Eigen::Index i = 0; i < q.mean.size(); ++i) {
        const double dm = q.mean[i] - p.mean[i];
        acc += (p.log_std[i] - q.log_std[i]) +
               (std::exp(2.0 * q.log_std[i]) + dm * dm) * std::exp(-2.0 * p.log_std[i]) * 0.5 - 0.5;
    }
    return acc;
}

namespace detail {

/// Neumaier-compensated accumulator; keeps big reductions accurate enough
/// that finite differences of the loss stay meaningful in double precision.
struct CompensatedSum {
    double s = 0.0, c = 0.0;
    void add(double v) {
        double t = s + v;
        if (std::abs(s) >= std::abs(v))
            c += (s - t) + v;
        else
            c += (v - t) + s;
        s = t;
    }
    double value() const { return s + c; }
};

}  // namespace detail

/// Sum over pixels of log N(pixel | mean, std^2).
inline double gaussian_image_loglik(const Image& image, const Image& mean_image, double std_dev) {
    if (image.width != mean_image.width || image.height != mean_image.height)
        throw DimensionError("gaussian_image_loglik: image dimensions differ");
    const double inv2var = 1.0 / (2.0 * std_dev * std_dev);
    detail::CompensatedSum quad;
    for (std::size_t i = 0; i < image.pixels.size(); ++i) {
        const double d = static_cast<double>(image.pixels[i]) - static_cast<double>(mean_image.pixels[i]);
        quad.add(d * d);
    }
    const double n = static_cast<double>(image.pixels.size());
    return -0.5 * n * std::log(kTwoPi * std_dev * std_dev) - quad.value() * inv2var;
}

inline Eigen::Vector2d velocity_from_positions(const Eigen::Vector2d& x_t,
                                               const Eigen::Vector2d& x_prev, double dt) {
    if (!(dt > 0.0)) throw ConfigError("velocity_from_positions: dt must be > 0");
    return (x_t - x_prev) / dt;
}

}  // namespace ihvs
