#pragma once

#include <cmath>
#include <vector>

#include "ihvs/gaussian.hpp"
#include "ihvs/image.hpp"
#include "ihvs/model.hpp"
#include "ihvs/nn.hpp"
#include "ihvs/rng.hpp"

// The three training objectives. Each has a forward value used by the public
// ops and tests, and a fused forward/backward used by the trainer. Gradients
// are hand-derived against the fixed graph; grad_check (train.hpp) is the
// contract that keeps them honest.
namespace ihvs::train {

using model::DecCache;
using model::EncCache;
using model::MlpCache;
using model::ModelParams;
using model::Scratch;

struct LossWeights {
    double x = 1.0, z = 1.0, reg = 1.0;
};

/// Test hooks. `posterior_equals_prior` forces every KL's left argument equal
/// to its right one (the KL contributes exactly zero);
/// `decoder_mean_equals_target` forces each reconstruction mean to its target
/// image (the quadratic term vanishes, leaving the normalization constant).
struct LossHooks {
    bool posterior_equals_prior = false;
    bool decoder_mean_equals_target = false;
};

/// Consecutive transitions (t-1, t, t+1) of one episode. u_t is the action
/// commanded at I_t; u_next is carried for completeness, the losses do not
/// use it.
struct TransitionTriple {
    const Image* I_prev = nullptr;
    const Image* I_t = nullptr;
    Vec2 u_t;
    const Image* I_next = nullptr;
    Vec2 u_next;
};

struct GoalPair {
    const Image* I_z = nullptr;
    const Image* I_g = nullptr;
};

struct ElementTerms {
    double loss_x = 0.0, loss_z = 0.0, loss_reg = 0.0;
    double weighted_total(const LossWeights& w) const {
        return w.x * loss_x + w.z * loss_z + w.reg * loss_reg;
    }
};

/// Reusable per-worker buffers for one element's forward/backward.
template <class T>
struct ElementWork {
    Scratch<T> scratch;
    EncCache<T> enc_prev, enc_t, enc_next, enc_ig, enc_iz;
    DecCache<T> dec_x, dec_iz, dec_ig;
    MlpCache<T> goal_head, newton;
    nn::AVec<T> target, dout;
};

namespace detail {

/// -log N(target | mean, std^2) summed over pixels, both CHW buffers;
/// compensated summation keeps the value finite-difference friendly.
template <class T>
double recon_nll(const nn::AVec<T>& mean, const nn::AVec<T>& target, double std_dev) {
    ihvs::detail::CompensatedSum quad;
    for (std::size_t i = 0; i < mean.size(); ++i) {
        const double d = static_cast<double>(mean[i]) - static_cast<double>(target[i]);
        quad.add(d * d);
    }
    const double n = static_cast<double>(mean.size());
    return 0.5 * n * std::log(kTwoPi * std_dev * std_dev) +
           quad.value() / (2.0 * std_dev * std_dev);
}

/// KL between diagonal Gaussians given as (mean, log-std) arrays.
inline double kl_terms(const double* mq, const double* lsq, const double* mp, const double* lsp,
                       int d) {
    double acc = 0.0;
    for (int i = 0; i < d; ++i) {
        const double dm = mq[i] - mp[i];
        acc += (lsp[i] - lsq[i]) +
               (std::exp(2.0 * lsq[i]) + dm * dm) * std::exp(-2.0 * lsp[i]) * 0.5 - 0.5;
    }
    return acc;
}

template <class T>
void load_chw(const Image& img, nn::AVec<T>& buf) {
    model::image_to_chw(img, buf);
}

}  // namespace detail

/// One-sample estimate of L_x for a transition triple, with gradients when
/// `grads` is non-null. Draw order from `rng`: (Newtonian only: eps_prev),
/// eps_t, eps_trans -- one gaussian per latent dimension each.
template <class T>
double loss_x_fwbw(const ModelParams<T>& m, const TransitionTriple& tri, RngStream& rng,
                   double weight, nn::ParamStore<T>* grads, ElementWork<T>& wk,
                   nn::PatternHash* pat = nullptr, const LossHooks& hooks = {}) {
    const int d = m.hyper.latent_dim;
    const bool newtonian = m.hyper.variant == model::TransitionVariant::Newtonian;
    const double dt = m.hyper.dt;
    const double sx = m.hyper.sigma_x;

    std::vector<double> eps_prev(d), eps_t(d), eps_trans(d);
    std::vector<double> x_prev(d), x_t(d), v_t(d), v_next(d), prior_mean(d), x_p(d);
    std::vector<double> A(d), B(d), C(d);

    if (newtonian) {
        detail::load_chw(*tri.I_prev, wk.enc_prev.x0);
        m.hand_encoder.forward(m.store, wk.enc_prev, wk.scratch, pat);
        for (int i = 0; i < d; ++i) eps_prev[i] = rng.gaussian();
    }
    detail::load_chw(*tri.I_t, wk.enc_t.x0);
    m.hand_encoder.forward(m.store, wk.enc_t, wk.scratch, pat);
    for (int i = 0; i < d; ++i) eps_t[i] = rng.gaussian();
    for (int i = 0; i < d; ++i)
        x_t[i] = static_cast<double>(wk.enc_t.mean[i]) +
                 std::exp(static_cast<double>(wk.enc_t.ls[i])) * eps_t[i];

    const double u[2] = {tri.u_t.x, tri.u_t.y};
    if (newtonian) {
        for (int i = 0; i < d; ++i)
            x_prev[i] = static_cast<double>(wk.enc_prev.mean[i]) +
                        std::exp(static_cast<double>(wk.enc_prev.ls[i])) * eps_prev[i];
        for (int i = 0; i < d; ++i) v_t[i] = (x_t[i] - x_prev[i]) / dt;
        wk.newton.x.resize(3 * d);
        for (int i = 0; i < d; ++i) {
            wk.newton.x[i] = static_cast<T>(x_t[i]);
            wk.newton.x[d + i] = static_cast<T>(v_t[i]);
            wk.newton.x[2 * d + i] = static_cast<T>(u[i]);
        }
        m.newton_f.forward(m.store, wk.newton, pat);
        for (int i = 0; i < d; ++i) {
            A[i] = static_cast<double>(wk.newton.out[i]);
            B[i] = -std::exp(static_cast<double>(wk.newton.out[d + i]));
            C[i] = std::exp(static_cast<double>(wk.newton.out[2 * d + i]));
        }
        for (int i = 0; i < d; ++i) v_next[i] = v_t[i] + dt * (A[i] * x_t[i] + B[i] * v_t[i] + C[i] * u[i]);
        for (int i = 0; i < d; ++i) prior_mean[i] = x_t[i] + dt * v_next[i];
    } else {
        for (int i = 0; i < d; ++i) prior_mean[i] = x_t[i] + dt * u[i];
    }

    for (int i = 0; i < d; ++i) eps_trans[i] = rng.gaussian();
    for (int i = 0; i < d; ++i) x_p[i] = prior_mean[i] + sx * eps_trans[i];

    // reconstruction of I_next through the transition-predicted latent
    wk.dec_x.z.resize(d);
    for (int i = 0; i < d; ++i) wk.dec_x.z[i] = static_cast<T>(x_p[i]);
    m.hand_decoder.forward(m.store, wk.dec_x, wk.scratch, pat);
    detail::load_chw(*tri.I_next, wk.target);
    double l_rec;
    if (hooks.decoder_mean_equals_target)
        l_rec = detail::recon_nll(wk.target, wk.target, m.hyper.decoder_std);
    else
        l_rec = detail::recon_nll(wk.dec_x.out, wk.target, m.hyper.decoder_std);

    detail::load_chw(*tri.I_next, wk.enc_next.x0);
    m.hand_encoder.forward(m.store, wk.enc_next, wk.scratch, pat);
    std::vector<double> qn_mean(d), qn_ls(d), pr_ls(d);
    for (int i = 0; i < d; ++i) {
        qn_mean[i] = static_cast<double>(wk.enc_next.mean[i]);
        qn_ls[i] = static_cast<double>(wk.enc_next.ls[i]);
        pr_ls[i] = std::log(sx);
    }
    double l_kl;
    if (hooks.posterior_equals_prior)
        l_kl = 0.0;
    else
        l_kl = detail::kl_terms(qn_mean.data(), qn_ls.data(), prior_mean.data(), pr_ls.data(), d);

    if (grads) {
        const double sd2 = m.hyper.decoder_std * m.hyper.decoder_std;
        std::vector<double> d_prior_mean(d, 0.0);

        if (!hooks.decoder_mean_equals_target) {
            wk.dout.resize(wk.dec_x.out.size());
            for (std::size_t i = 0; i < wk.dout.size(); ++i)
                wk.dout[i] = static_cast<T>(weight *
                                            (static_cast<double>(wk.dec_x.out[i]) -
                                             static_cast<double>(wk.target[i])) /
                                            sd2);
            nn::AVec<T> dz(d, T(0));
            m.hand_decoder.backward(m.store, wk.dec_x, wk.dout, dz.data(), *grads, wk.scratch);
            for (int i = 0; i < d; ++i) d_prior_mean[i] += static_cast<double>(dz[i]);
        }

        if (!hooks.posterior_equals_prior) {
            nn::AVec<T> dqn_mean(d), dqn_ls(d);
            for (int i = 0; i < d; ++i) {
                const double dm = qn_mean[i] - prior_mean[i];
                dqn_mean[i] = static_cast<T>(weight * dm / (sx * sx));
                dqn_ls[i] = static_cast<T>(weight * (std::exp(2.0 * qn_ls[i]) / (sx * sx) - 1.0));
                d_prior_mean[i] += weight * (-dm / (sx * sx));
            }
            m.hand_encoder.backward(m.store, wk.enc_next, dqn_mean.data(), dqn_ls.data(), *grads, wk.scratch);
        }

        std::vector<double> dx_t(d, 0.0);
        if (newtonian) {
            std::vector<double> dv_next(d), dv_t(d, 0.0);
            for (int i = 0; i < d; ++i) {
                dx_t[i] += d_prior_mean[i];
                dv_next[i] = d_prior_mean[i] * dt;
            }
            nn::AVec<T> df(3 * d);
            for (int i = 0; i < d; ++i) {
                const double g = dv_next[i] * dt;
                df[i] = static_cast<T>(g * x_t[i]);              // dA
                df[d + i] = static_cast<T>(g * v_t[i] * B[i]);   // d log(-B): dB/dlog = B
                df[2 * d + i] = static_cast<T>(g * u[i] * C[i]); // d log C
                dx_t[i] += dv_next[i] * dt * A[i];
                dv_t[i] += dv_next[i] * (1.0 + dt * B[i]);
            }
            nn::AVec<T> dnf_in(3 * d, T(0));
            m.newton_f.backward(m.store, wk.newton, df.data(), dnf_in.data(), *grads);
            for (int i = 0; i < d; ++i) {
                dx_t[i] += static_cast<double>(dnf_in[i]);
                dv_t[i] += static_cast<double>(dnf_in[d + i]);
            }
            nn::AVec<T> dqp_mean(d), dqp_ls(d);
            for (int i = 0; i < d; ++i) {
                dx_t[i] += dv_t[i] / dt;
                const double dx_prev = -dv_t[i] / dt;
                dqp_mean[i] = static_cast<T>(dx_prev);
                dqp_ls[i] = static_cast<T>(dx_prev *
                                           std::exp(static_cast<double>(wk.enc_prev.ls[i])) * eps_prev[i]);
            }
            m.hand_encoder.backward(m.store, wk.enc_prev, dqp_mean.data(), dqp_ls.data(), *grads, wk.scratch);
        } else {
            for (int i = 0; i < d; ++i) dx_t[i] += d_prior_mean[i];
        }

        nn::AVec<T> dqt_mean(d), dqt_ls(d);
        for (int i = 0; i < d; ++i) {
            dqt_mean[i] = static_cast<T>(dx_t[i]);
            dqt_ls[i] = static_cast<T>(dx_t[i] * std::exp(static_cast<double>(wk.enc_t.ls[i])) * eps_t[i]);
        }
        m.hand_encoder.backward(m.store, wk.enc_t, dqt_mean.data(), dqt_ls.data(), *grads, wk.scratch);
    }

    return l_rec + l_kl;
}

struct ZRegTerms {
    double loss_z = 0.0, loss_reg = 0.0;
};

/// One-sample estimate of L_z and the sigma_g regularizer for an (I_z, I_g)
/// pair, with gradients when `grads` is non-null. The two share the z draw:
/// draw order from `rng` is eps_z then eps_g. When `want_recon` is false the
/// reconstruction terms (and their decoders) are skipped and loss_z is
/// reported without them.
template <class T>
ZRegTerms loss_zr_fwbw(const ModelParams<T>& m, const GoalPair& pair, RngStream& rng,
                       double weight_z, double weight_reg, nn::ParamStore<T>* grads,
                       ElementWork<T>& wk, nn::PatternHash* pat = nullptr,
                       const LossHooks& hooks = {}, bool want_recon = true) {
    const int d = m.hyper.latent_dim;
    const double sd = m.hyper.decoder_std;
    const double sg = m.hyper.sigma_g;

    detail::load_chw(*pair.I_z, wk.enc_iz.x0);
    m.inhand_encoder.forward(m.store, wk.enc_iz, wk.scratch, pat);
    std::vector<double> eps_z(d), z(d);
    for (int i = 0; i < d; ++i) eps_z[i] = rng.gaussian();
    for (int i = 0; i < d; ++i)
        z[i] = static_cast<double>(wk.enc_iz.mean[i]) +
               std::exp(static_cast<double>(wk.enc_iz.ls[i])) * eps_z[i];

    wk.goal_head.x.resize(d);
    for (int i = 0; i < d; ++i) wk.goal_head.x[i] = static_cast<T>(z[i]);
    m.goal_head.forward(m.store, wk.goal_head, pat);
    std::vector<double> g_mean(d), g_ls(d);
    for (int i = 0; i < d; ++i) {
        g_mean[i] = static_cast<double>(wk.goal_head.out[i]);
        g_ls[i] = static_cast<double>(wk.goal_head.out[d + i]);
    }

    std::vector<double> eps_g(d), x_g(d);
    for (int i = 0; i < d; ++i) eps_g[i] = rng.gaussian();
    for (int i = 0; i < d; ++i) x_g[i] = g_mean[i] + std::exp(g_ls[i]) * eps_g[i];

    detail::load_chw(*pair.I_g, wk.enc_ig.x0);
    m.hand_encoder.forward(m.store, wk.enc_ig, wk.scratch, pat);
    std::vector<double> q_mean(d), q_ls(d);
    for (int i = 0; i < d; ++i) {
        q_mean[i] = static_cast<double>(wk.enc_ig.mean[i]);
        q_ls[i] = static_cast<double>(wk.enc_ig.ls[i]);
    }

    ZRegTerms out;
    double l_rec_z = 0.0, l_rec_g = 0.0;
    if (want_recon) {
        wk.dec_iz.z.resize(d);
        for (int i = 0; i < d; ++i) wk.dec_iz.z[i] = static_cast<T>(z[i]);
        m.inhand_decoder.forward(m.store, wk.dec_iz, wk.scratch, pat);
        detail::load_chw(*pair.I_z, wk.target);
        l_rec_z = hooks.decoder_mean_equals_target
                      ? detail::recon_nll(wk.target, wk.target, sd)
                      : detail::recon_nll(wk.dec_iz.out, wk.target, sd);

        wk.dec_ig.z.resize(d);
        for (int i = 0; i < d; ++i) wk.dec_ig.z[i] = static_cast<T>(x_g[i]);
        m.goal_decoder.forward(m.store, wk.dec_ig, wk.scratch, pat);
        detail::load_chw(*pair.I_g, wk.target);
        l_rec_g = hooks.decoder_mean_equals_target
                      ? detail::recon_nll(wk.target, wk.target, sd)
                      : detail::recon_nll(wk.dec_ig.out, wk.target, sd);
    }

    std::vector<double> n0_mean(d, 0.0), n0_ls(d, std::log(sg));
    double l_kl_zg, l_reg_q, l_reg_p;
    if (hooks.posterior_equals_prior) {
        l_kl_zg = l_reg_q = l_reg_p = 0.0;
    } else {
        l_kl_zg = detail::kl_terms(q_mean.data(), q_ls.data(), g_mean.data(), g_ls.data(), d);
        l_reg_q = detail::kl_terms(q_mean.data(), q_ls.data(), n0_mean.data(), n0_ls.data(), d);
        l_reg_p = detail::kl_terms(g_mean.data(), g_ls.data(), n0_mean.data(), n0_ls.data(), d);
    }
    out.loss_z = l_rec_z + l_rec_g + l_kl_zg;
    out.loss_reg = l_reg_q + l_reg_p;

    if (grads) {
        const double sd2 = sd * sd;
        std::vector<double> dz(d, 0.0), dg_mean(d, 0.0), dg_ls(d, 0.0);
        std::vector<double> dq_mean(d, 0.0), dq_ls(d, 0.0), dx_g(d, 0.0);

        if (want_recon && !hooks.decoder_mean_equals_target) {
            detail::load_chw(*pair.I_z, wk.target);
            wk.dout.resize(wk.dec_iz.out.size());
            for (std::size_t i = 0; i < wk.dout.size(); ++i)
                wk.dout[i] = static_cast<T>(weight_z *
                                            (static_cast<double>(wk.dec_iz.out[i]) -
                                             static_cast<double>(wk.target[i])) /
                                            sd2);
            nn::AVec<T> dz_t(d, T(0));
            m.inhand_decoder.backward(m.store, wk.dec_iz, wk.dout, dz_t.data(), *grads, wk.scratch);
            for (int i = 0; i < d; ++i) dz[i] += static_cast<double>(dz_t[i]);

            detail::load_chw(*pair.I_g, wk.target);
            wk.dout.resize(wk.dec_ig.out.size());
            for (std::size_t i = 0; i < wk.dout.size(); ++i)
                wk.dout[i] = static_cast<T>(weight_z *
                                            (static_cast<double>(wk.dec_ig.out[i]) -
                                             static_cast<double>(wk.target[i])) /
                                            sd2);
            nn::AVec<T> dxg_t(d, T(0));
            m.goal_decoder.backward(m.store, wk.dec_ig, wk.dout, dxg_t.data(), *grads, wk.scratch);
            for (int i = 0; i < d; ++i) dx_g[i] += static_cast<double>(dxg_t[i]);
        }

        if (!hooks.posterior_equals_prior) {
            for (int i = 0; i < d; ++i) {
                const double dm = q_mean[i] - g_mean[i];
                const double inv_vg = std::exp(-2.0 * g_ls[i]);
                dq_mean[i] += weight_z * dm * inv_vg;
                dq_ls[i] += weight_z * (std::exp(2.0 * q_ls[i]) * inv_vg - 1.0);
                dg_mean[i] += weight_z * (-dm * inv_vg);
                dg_ls[i] += weight_z * (1.0 - (std::exp(2.0 * q_ls[i]) + dm * dm) * inv_vg);

                dq_mean[i] += weight_reg * q_mean[i] / (sg * sg);
                dq_ls[i] += weight_reg * (std::exp(2.0 * q_ls[i]) / (sg * sg) - 1.0);
                dg_mean[i] += weight_reg * g_mean[i] / (sg * sg);
                dg_ls[i] += weight_reg * (std::exp(2.0 * g_ls[i]) / (sg * sg) - 1.0);
            }
        }

        // x_g = g_mean + exp(g_ls) eps_g
        for (int i = 0; i < d; ++i) {
            dg_mean[i] += dx_g[i];
            dg_ls[i] += dx_g[i] * std::exp(g_ls[i]) * eps_g[i];
        }

        nn::AVec<T> dq_mean_t(d), dq_ls_t(d);
        for (int i = 0; i < d; ++i) {
            dq_mean_t[i] = static_cast<T>(dq_mean[i]);
            dq_ls_t[i] = static_cast<T>(dq_ls[i]);
        }
        m.hand_encoder.backward(m.store, wk.enc_ig, dq_mean_t.data(), dq_ls_t.data(), *grads, wk.scratch);

        nn::AVec<T> dgh(2 * d), dz_from_head(d, T(0));
        for (int i = 0; i < d; ++i) {
            dgh[i] = static_cast<T>(dg_mean[i]);
            dgh[d + i] = static_cast<T>(dg_ls[i]);
        }
        m.goal_head.backward(m.store, wk.goal_head, dgh.data(), dz_from_head.data(), *grads);
        for (int i = 0; i < d; ++i) dz[i] += static_cast<double>(dz_from_head[i]);

        nn::AVec<T> dqz_mean(d), dqz_ls(d);
        for (int i = 0; i < d; ++i) {
            dqz_mean[i] = static_cast<T>(dz[i]);
            dqz_ls[i] = static_cast<T>(dz[i] * std::exp(static_cast<double>(wk.enc_iz.ls[i])) * eps_z[i]);
        }
        m.inhand_encoder.backward(m.store, wk.enc_iz, dqz_mean.data(), dqz_ls.data(), *grads, wk.scratch);
    }

    return out;
}

// --- public per-operation entry points ---------------------------------------

template <class T>
double loss_x(const ModelParams<T>& m, const TransitionTriple& tri, RngStream& rng,
              const LossHooks& hooks = {}) {
    ElementWork<T> wk;
    return loss_x_fwbw<T>(m, tri, rng, 1.0, nullptr, wk, nullptr, hooks);
}

template <class T>
double loss_z(const ModelParams<T>& m, const GoalPair& pair, RngStream& rng,
              const LossHooks& hooks = {}) {
    ElementWork<T> wk;
    return loss_zr_fwbw<T>(m, pair, rng, 1.0, 0.0, nullptr, wk, nullptr, hooks).loss_z;
}

template <class T>
double loss_reg(const ModelParams<T>& m, const GoalPair& pair, RngStream& rng,
                const LossHooks& hooks = {}) {
    ElementWork<T> wk;
    return loss_zr_fwbw<T>(m, pair, rng, 0.0, 1.0, nullptr, wk, nullptr, hooks, false).loss_reg;
}

/// Training / gradient-check element: x-part then z-part, each on its own
/// derived sub-stream (ids 1 and 2 of `element_seed`).
template <class T>
ElementTerms element_fwbw(const ModelParams<T>& m, const TransitionTriple& tri,
                          const GoalPair& pair, std::uint64_t element_seed, const LossWeights& w,
                          nn::ParamStore<T>* grads, ElementWork<T>& wk,
                          nn::PatternHash* pat = nullptr) {
    ElementTerms t;
    RngStream rng_x(RngStream::derive(element_seed, 1));
    RngStream rng_z(RngStream::derive(element_seed, 2));
    t.loss_x = loss_x_fwbw<T>(m, tri, rng_x, w.x, grads, wk, pat);
    ZRegTerms zr = loss_zr_fwbw<T>(m, pair, rng_z, w.z, w.reg, grads, wk, pat);
    t.loss_z = zr.loss_z;
    t.loss_reg = zr.loss_reg;
    return t;
}

}  // namespace ihvs::train
