#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "ihvs/dataset.hpp"
#include "ihvs/loss.hpp"
#include "ihvs/model.hpp"
#include "ihvs/rng.hpp"

namespace ihvs::train {

// Stream purpose ids under the training seed; see RngStream::derive.
inline constexpr std::uint64_t kStreamBatch = 0xB001;
inline constexpr std::uint64_t kStreamElement = 0xB002;

struct TrainConfig {
    double learning_rate = 3e-4;
    double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
    int batch_size = 32;
    int epochs = 90;  // one epoch = floor(pool / batch) steps; ~3000 steps on the default dataset
    std::uint64_t seed = 0;
    model::TransitionVariant variant = model::TransitionVariant::Simplified;
    LossWeights weights;
    int threads = 0;  // 0: IHVS_THREADS, falling back to the hardware count

    void validate() const {
        if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be > 0");
        if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
        if (epochs < 1) throw ConfigError("epochs must be >= 1");
    }
};

struct EpochRecord {
    int epoch = 0;
    double loss_x = 0.0, loss_z = 0.0, loss_reg = 0.0, total = 0.0;
};

struct TrainReport {
    std::vector<EpochRecord> records;
    std::uint64_t seed = 0;
    std::uint64_t steps = 0;
    double wall_seconds = 0.0;
    std::string checkpoint_path;
};

inline void write_train_report_csv(const TrainReport& r, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw FormatError("cannot open " + path + " for writing");
    f << "epoch,loss_x,loss_z,loss_reg,total\n";
    f.precision(10);
    for (const auto& e : r.records)
        f << e.epoch << "," << e.loss_x << "," << e.loss_z << "," << e.loss_reg << "," << e.total << "\n";
}

namespace detail {

struct PoolEntry {
    int episode = 0;
    int center = 0;  // index t with valid (t-1, t, t+1)
};

inline std::vector<PoolEntry> triple_pool(const data::Dataset& ds) {
    std::vector<PoolEntry> pool;
    for (std::size_t e = 0; e < ds.episodes.size(); ++e)
        for (int c = 1; c + 1 < static_cast<int>(ds.episodes[e].steps.size()); ++c)
            pool.push_back({static_cast<int>(e), c});
    if (pool.empty()) throw ConfigError("dataset has no transition triples (horizon too short?)");
    return pool;
}

inline TransitionTriple make_triple(const data::Episode& ep, int c) {
    return {&ep.steps[c - 1].obs, &ep.steps[c].obs, ep.steps[c].action, &ep.steps[c + 1].obs,
            ep.steps[c + 1].action};
}

inline GoalPair make_pair(const data::Episode& ep) { return {&ep.inhand_image, &ep.goal_image}; }

template <class T>
struct Adam {
    std::vector<T> m, v;
    std::int64_t t = 0;

    explicit Adam(std::size_t n) : m(n, T(0)), v(n, T(0)) {}

    void step(nn::AVec<T>& p, const nn::AVec<T>& g, const TrainConfig& c) {
        ++t;
        const T b1 = static_cast<T>(c.beta1), b2 = static_cast<T>(c.beta2);
        const T corr1 = static_cast<T>(1.0 / (1.0 - std::pow(c.beta1, static_cast<double>(t))));
        const T corr2 = static_cast<T>(1.0 / (1.0 - std::pow(c.beta2, static_cast<double>(t))));
        const T lr = static_cast<T>(c.learning_rate), eps = static_cast<T>(c.adam_eps);
        for (std::size_t i = 0; i < p.size(); ++i) {
            m[i] = b1 * m[i] + (T(1) - b1) * g[i];
            v[i] = b2 * v[i] + (T(1) - b2) * g[i] * g[i];
            p[i] -= lr * (m[i] * corr1) / (std::sqrt(v[i] * corr2) + eps);
        }
    }
};

}  // namespace detail

/// Minimizes the batch mean of lambda_x L_x + lambda_z L_z + lambda_reg L_reg
/// with Adam. Batch elements are drawn uniformly with replacement; each
/// element's noise comes from a stream derived from (seed, step, index), and
/// per-element gradients are reduced in index order, so the result depends
/// only on the seed -- not on the number of worker threads.
inline std::pair<model::ModelParams<float>, TrainReport> train(const data::Dataset& ds,
                                                               model::ModelHyper hyper,
                                                               const TrainConfig& cfg) {
    cfg.validate();
    if (ds.episodes.empty()) throw ConfigError("train: dataset is empty");
    if (hyper.dt != ds.params.dt)
        throw ConfigError("train: model dt does not match the dataset collection dt");
    hyper.variant = cfg.variant;

    const auto t_start = std::chrono::steady_clock::now();
    model::ModelParams<float> params = model::init_model<float>(hyper, cfg.seed);
    const std::size_t P = params.store.data().size();

    const auto pool = detail::triple_pool(ds);
    const int steps_per_epoch = std::max<int>(1, static_cast<int>(pool.size()) / cfg.batch_size);
    const int total_steps = steps_per_epoch * cfg.epochs;
    const int B = cfg.batch_size;

    int n_threads = cfg.threads > 0
                        ? cfg.threads
                        : env_thread_cap(static_cast<int>(std::thread::hardware_concurrency()));
    n_threads = std::min(n_threads, B);

    std::vector<nn::ParamStore<float>> grad_bufs(B);
    for (auto& g : grad_bufs) {
        for (const auto& t : params.store.tensors()) g.add(t.name, t.rows, t.cols);
        g.allocate();
    }
    std::vector<ElementWork<float>> work(n_threads);
    std::vector<ElementTerms> terms(B);
    nn::AVec<float> grad(P);
    detail::Adam<float> adam(P);

    RngStream batch_rng(RngStream::derive(cfg.seed, kStreamBatch));
    const std::uint64_t elem_base = RngStream::derive(cfg.seed, kStreamElement);

    TrainReport report;
    report.seed = cfg.seed;
    report.steps = static_cast<std::uint64_t>(total_steps);

    double ex = 0.0, ez = 0.0, er = 0.0;
    int epoch_steps = 0, epoch = 0;

    for (int step = 0; step < total_steps; ++step) {
        std::vector<detail::PoolEntry> batch(B);
        for (int i = 0; i < B; ++i) batch[i] = pool[batch_rng.next_u64() % pool.size()];

        auto run_range = [&](int tid, int lo, int hi) {
            for (int i = lo; i < hi; ++i) {
                auto& g = grad_bufs[i];
                std::fill(g.data().begin(), g.data().end(), 0.0f);
                const data::Episode& ep = ds.episodes[batch[i].episode];
                const std::uint64_t es =
                    RngStream::derive(elem_base, static_cast<std::uint64_t>(step) * B + i);
                terms[i] = element_fwbw<float>(params, detail::make_triple(ep, batch[i].center),
                                               detail::make_pair(ep), es, cfg.weights, &g, work[tid]);
            }
        };
        if (n_threads == 1) {
            run_range(0, 0, B);
        } else {
            std::vector<std::thread> ts;
            const int chunk = (B + n_threads - 1) / n_threads;
            for (int t = 1; t < n_threads; ++t) {
                const int lo = t * chunk, hi = std::min(B, lo + chunk);
                if (lo < hi) ts.emplace_back(run_range, t, lo, hi);
            }
            run_range(0, 0, std::min(B, chunk));
            for (auto& t : ts) t.join();
        }

        double sx = 0.0, sz = 0.0, sr = 0.0;
        for (int i = 0; i < B; ++i) {
            sx += terms[i].loss_x;
            sz += terms[i].loss_z;
            sr += terms[i].loss_reg;
        }
        if (!std::isfinite(sx) || !std::isfinite(sz) || !std::isfinite(sr)) {
            std::string diag;
            for (int i = 0; i < B; ++i)
                if (!std::isfinite(terms[i].loss_x) || !std::isfinite(terms[i].loss_z) ||
                    !std::isfinite(terms[i].loss_reg))
                    diag += " element " + std::to_string(i) + " (episode " +
                            std::to_string(batch[i].episode) + "): loss_x=" +
                            std::to_string(terms[i].loss_x) + " loss_z=" + std::to_string(terms[i].loss_z) +
                            " loss_reg=" + std::to_string(terms[i].loss_reg) + ";";
            throw Error("training aborted: non-finite loss at step " + std::to_string(step) + ":" + diag);
        }

        // ordered reduction over elements keeps the update thread-count independent
        const float inv_b = 1.0f / static_cast<float>(B);
        auto reduce_range = [&](std::size_t lo, std::size_t hi) {
            for (std::size_t j = lo; j < hi; ++j) {
                float acc = 0.0f;
                for (int i = 0; i < B; ++i) acc += grad_bufs[i].data()[j];
                grad[j] = acc * inv_b;
            }
        };
        if (n_threads == 1) {
            reduce_range(0, P);
        } else {
            std::vector<std::thread> ts;
            const std::size_t chunk = (P + n_threads - 1) / n_threads;
            for (int t = 1; t < n_threads; ++t)
                ts.emplace_back(reduce_range, t * chunk, std::min(P, (t + 1) * chunk));
            reduce_range(0, std::min(P, chunk));
            for (auto& t : ts) t.join();
        }

        adam.step(params.store.data(), grad, cfg);

        ex += sx / B;
        ez += sz / B;
        er += sr / B;
        ++epoch_steps;
        if (epoch_steps == steps_per_epoch) {
            EpochRecord rec;
            rec.epoch = epoch++;
            rec.loss_x = ex / epoch_steps;
            rec.loss_z = ez / epoch_steps;
            rec.loss_reg = er / epoch_steps;
            rec.total = cfg.weights.x * rec.loss_x + cfg.weights.z * rec.loss_z +
                        cfg.weights.reg * rec.loss_reg;
            report.records.push_back(rec);
            ex = ez = er = 0.0;
            epoch_steps = 0;
        }
    }

    report.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    return {std::move(params), std::move(report)};
}

// --- gradient verification -----------------------------------------------------

struct GradCheckElement {
    TransitionTriple triple;
    GoalPair pair;
    std::uint64_t seed = 0;
};

struct GroupCheck {
    std::string name;
    double max_rel_err = 0.0;
    int checked = 0;
    int kinked = 0;  // probes whose FD interval crossed an activation kink
};

struct GradCheckReport {
    std::vector<GroupCheck> groups;
    double max_rel_err = 0.0;
    double epsilon = 0.0;
    int per_group = 0;
};

/// Shared discrepancy metric: |fd - g| relative to the larger magnitude, with
/// an absolute floor so noise on near-zero gradients is judged against the
/// parameter scale of the model rather than against itself.
inline double grad_rel_err(double fd, double g) {
    return std::abs(fd - g) / std::max(std::abs(fd) + std::abs(g), 1e-2);
}

/// Compares analytic gradients of the batch-mean total loss against central
/// finite differences, in double precision with the per-element noise fixed
/// across perturbations. A probe whose two evaluations disagree in activation
/// pattern straddles a LeakyReLU or clamp kink, where the finite difference
/// is not a derivative estimate; such probes are replaced by fresh parameter
/// draws while candidates remain, and counted in `kinked`.
inline GradCheckReport grad_check(const model::ModelParams<double>& m0,
                                  const std::vector<GradCheckElement>& batch, double epsilon,
                                  int per_group, std::uint64_t select_seed,
                                  const LossWeights& w = {}) {
    if (batch.empty()) throw ConfigError("grad_check: empty batch");
    const double inv_n = 1.0 / static_cast<double>(batch.size());

    // analytic gradient of the batch mean
    nn::ParamStore<double> grads;
    for (const auto& t : m0.store.tensors()) grads.add(t.name, t.rows, t.cols);
    grads.allocate();
    {
        ElementWork<double> wk;
        LossWeights wm = w;
        wm.x *= inv_n;
        wm.z *= inv_n;
        wm.reg *= inv_n;
        for (const auto& el : batch) element_fwbw<double>(m0, el.triple, el.pair, el.seed, wm, &grads, wk);
    }

    auto eval = [&](model::ModelParams<double>& m, ElementWork<double>& wk, std::uint64_t* pattern) {
        double acc = 0.0;
        for (const auto& el : batch) {
            nn::PatternHash pat;
            ElementTerms t = element_fwbw<double>(m, el.triple, el.pair, el.seed, w, nullptr, wk, &pat);
            acc += t.weighted_total(w);
            if (pattern) {
                *pattern ^= pat.h + 0x9E3779B97F4A7C15ULL + (*pattern << 6) + (*pattern >> 2);
            }
        }
        return acc * inv_n;
    };

    GradCheckReport report;
    report.epsilon = epsilon;
    report.per_group = per_group;

    struct Probe {
        std::size_t index;
        int group;
    };
    std::vector<Probe> probes;
    RngStream sel(RngStream::derive(select_seed, 0xD001));
    for (std::size_t gi = 0; gi < m0.groups.size(); ++gi) {
        const auto& g = m0.groups[gi];
        const std::size_t span = g.end - g.begin;
        const int want = static_cast<int>(std::min<std::size_t>(3 * per_group, span));
        std::set<std::size_t> picked;
        while (static_cast<int>(picked.size()) < want)
            picked.insert(g.begin + sel.next_u64() % span);
        for (auto idx : picked) probes.push_back({idx, static_cast<int>(gi)});
        report.groups.push_back({g.name, 0.0, 0, 0});
    }

    struct ProbeResult {
        double rel = 0.0;
        bool kinked = false;
    };
    std::vector<ProbeResult> results(probes.size());

    const int n_threads = std::max(1, env_thread_cap(static_cast<int>(std::thread::hardware_concurrency())));
    auto run_probes = [&](std::size_t lo, std::size_t hi) {
        model::ModelParams<double> m = m0;
        ElementWork<double> wk;
        for (std::size_t k = lo; k < hi; ++k) {
            const std::size_t i = probes[k].index;
            const double p0 = m.store.data()[i];
            auto probe_at = [&](double eps) {
                std::uint64_t hp = 0, hm = 0;
                m.store.data()[i] = p0 + eps;
                const double fp = eval(m, wk, &hp);
                m.store.data()[i] = p0 - eps;
                const double fm = eval(m, wk, &hm);
                m.store.data()[i] = p0;
                return std::tuple<double, bool>((fp - fm) / (2.0 * eps), hp != hm);
            };
            const double eps_i = epsilon * std::max(1.0, std::abs(p0));
            auto [fd, kink] = probe_at(eps_i);
            double rel = grad_rel_err(fd, grads.data()[i]);
            if (!kink && rel > 1e-5) {
                // the loss has 1/sigma_x^2-scale curvature, so a single step
                // size cannot sit in every parameter's FD sweet spot; a
                // truncation-limited probe improves with smaller eps, a
                // noise-limited one with larger. All are valid central
                // differences of the same derivative; accept the best.
                for (double scale : {0.125, 0.015625, 32.0}) {
                    auto [fd2, kink2] = probe_at(eps_i * scale);
                    if (!kink2) rel = std::min(rel, grad_rel_err(fd2, grads.data()[i]));
                    if (rel < 1e-5) break;
                }
            }
            results[k] = {rel, kink};
        }
    };
    if (n_threads == 1 || probes.size() < 8) {
        run_probes(0, probes.size());
    } else {
        std::vector<std::thread> ts;
        const std::size_t chunk = (probes.size() + n_threads - 1) / n_threads;
        for (int t = 1; t < n_threads; ++t)
            ts.emplace_back(run_probes, t * chunk, std::min(probes.size(), (t + 1) * chunk));
        run_probes(0, std::min(probes.size(), chunk));
        for (auto& t : ts) t.join();
    }

    // fill each group's quota with clean probes first; kinked probes are used
    // only when the clean ones cannot reach per_group
    for (int pass = 0; pass < 2; ++pass) {
        for (std::size_t k = 0; k < probes.size(); ++k) {
            GroupCheck& g = report.groups[probes[k].group];
            if (g.checked >= per_group) continue;
            const bool clean = !results[k].kinked;
            if (pass == 0 && !clean) continue;
            if (pass == 1 && clean) continue;
            ++g.checked;
            if (!clean) ++g.kinked;
            g.max_rel_err = std::max(g.max_rel_err, results[k].rel);
        }
    }
    for (const auto& g : report.groups) report.max_rel_err = std::max(report.max_rel_err, g.max_rel_err);
    return report;
}

}  // namespace ihvs::train
