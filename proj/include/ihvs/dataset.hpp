#pragma once

#include <cstring>
#include <string>
#include <vector>

#include <json.hpp>

#include "ihvs/common.hpp"
#include "ihvs/image.hpp"
#include "ihvs/rng.hpp"
#include "ihvs/serialize.hpp"
#include "ihvs/sim.hpp"

namespace ihvs::data {

struct EpisodeStep {
    Image obs;    // hand-camera observation I_t (model input size)
    Vec2 action;  // commanded velocity u_t, recorded before any clamping
};

/// Evaluation-only bookkeeping; never fed to the model.
struct EpisodeMeta {
    double delta_true = 0.0;
    Vec2 pick_tcp;
    int stage = 1;
    std::uint64_t seed = 0;
};

struct Episode {
    Image inhand_image;  // I_z at the pick pose
    Image goal_image;    // I_g = I_0
    std::vector<EpisodeStep> steps;
    EpisodeMeta meta;
};

struct CollectionParams {
    int n_episodes = 60;
    int horizon = 20;  // T
    double dt = 0.5;
    std::uint64_t seed = 0;
    bool stage_cycle = false;  // ablation: cycle the collection stage per episode
};

struct Dataset {
    std::vector<Episode> episodes;
    sim::SimConfig config;
    CollectionParams params;
    std::string sim_revision = kSimRevision;

    std::size_t transitions() const {
        std::size_t n = 0;
        for (const auto& e : episodes) n += e.steps.size();
        return n;
    }
};

/// One annotation-free episode: pick with a random vacuum offset at the slot
/// the object will later occupy, record I_z and I_0 = I_g there, then random
/// walk for `horizon` steps recording (I_t, u_t).
/// Draw order from the episode stream: delta, then (u_x, u_y) per step.
inline Episode collect_episode(const sim::SimConfig& cfg, int stage, int horizon,
                               std::uint64_t episode_seed) {
    if (stage < 1 || stage > cfg.n_slots - 1)
        throw ConfigError("collect_episode: stage must be in [1, n_slots-1]");
    if (horizon < 1) throw ConfigError("collect_episode: horizon must be >= 1");
    RngStream rng(episode_seed);

    sim::WorldState s = sim::new_world(cfg, stage);
    const double delta = rng.uniform(-cfg.delta_range, cfg.delta_range);
    s = sim::move_to(cfg, s, sim::slot_center(cfg, stage) - Vec2{delta, 0.0});
    s = sim::pick(cfg, s, delta);

    Episode ep;
    ep.meta = {delta, s.tcp, stage, episode_seed};
    ep.inhand_image = sim::render(cfg, s, sim::Camera::InHand);
    ep.goal_image = sim::render(cfg, s, sim::Camera::Hand);

    ep.steps.reserve(horizon);
    for (int t = 0; t < horizon; ++t) {
        EpisodeStep st;
        st.obs = (t == 0) ? ep.goal_image : sim::render(cfg, s, sim::Camera::Hand);
        st.action = {rng.uniform(-cfg.u_max, cfg.u_max), rng.uniform(-cfg.u_max, cfg.u_max)};
        s = sim::step(cfg, s, st.action, cfg.dt);
        ep.steps.push_back(std::move(st));
    }
    return ep;
}

/// Episode i uses the derived stream RngStream::derive(seed, i); episodes are
/// therefore independent of collection order and worker layout.
inline Dataset collect_dataset(const sim::SimConfig& cfg, const CollectionParams& params) {
    if (params.n_episodes < 1) throw ConfigError("collect_dataset: n_episodes must be >= 1");
    Dataset ds;
    ds.config = cfg;
    ds.params = params;
    ds.params.dt = cfg.dt;
    ds.episodes.reserve(params.n_episodes);
    for (int i = 0; i < params.n_episodes; ++i) {
        const int stage = params.stage_cycle ? 1 + (i % (cfg.n_slots - 1)) : 1;
        ds.episodes.push_back(
            collect_episode(cfg, stage, params.horizon, RngStream::derive(params.seed, i)));
    }
    return ds;
}

// --- on-disk format -----------------------------------------------------------
// Container framing from serialize.hpp (magic "IHVS", version 1). Per episode
// two blobs: all images as raw float32 (inhand, goal, obs[0..T)), then the
// action array as float64 (T x 2). Layout details in docs/formats.md.

inline constexpr char kDatasetMagic[5] = "IHVS";
inline constexpr std::uint32_t kDatasetVersion = 1;

inline void write_dataset(const Dataset& ds, const std::string& path) {
    nlohmann::json episodes = nlohmann::json::array();
    for (const auto& e : ds.episodes)
        episodes.push_back({{"stage", e.meta.stage},
                            {"delta_true", e.meta.delta_true},
                            {"pick_tcp", {e.meta.pick_tcp.x, e.meta.pick_tcp.y}},
                            {"seed", e.meta.seed}});
    nlohmann::json header = {
        {"sim_revision", ds.sim_revision},
        {"config", sim::sim_config_to_json(ds.config)},
        {"collection_params",
         {{"n_episodes", ds.params.n_episodes},
          {"horizon", ds.params.horizon},
          {"dt", ds.params.dt},
          {"seed", ds.params.seed},
          {"stage_cycle", ds.params.stage_cycle}}},
        {"episodes", episodes}};

    BlobWriter w(path, kDatasetMagic, kDatasetVersion, header.dump());
    std::vector<std::uint8_t> buf;
    for (const auto& e : ds.episodes) {
        buf.clear();
        append_f32(buf, e.inhand_image.pixels.data(), e.inhand_image.pixels.size());
        append_f32(buf, e.goal_image.pixels.data(), e.goal_image.pixels.size());
        for (const auto& st : e.steps) append_f32(buf, st.obs.pixels.data(), st.obs.pixels.size());
        w.write_blob(buf.data(), buf.size());

        buf.clear();
        for (const auto& st : e.steps) {
            append_f64(buf, &st.action.x, 1);
            append_f64(buf, &st.action.y, 1);
        }
        w.write_blob(buf.data(), buf.size());
    }
    w.close();
}

inline Dataset read_dataset(const std::string& path) {
    BlobReader r(path, kDatasetMagic, kDatasetVersion);
    nlohmann::json header = nlohmann::json::parse(r.header_json());
    Dataset ds;
    ds.sim_revision = header.at("sim_revision").get<std::string>();
    ds.config = sim::sim_config_from_json(header.at("config"));
    const auto& cp = header.at("collection_params");
    ds.params.n_episodes = cp.at("n_episodes").get<int>();
    ds.params.horizon = cp.at("horizon").get<int>();
    ds.params.dt = cp.at("dt").get<double>();
    ds.params.seed = cp.at("seed").get<std::uint64_t>();
    ds.params.stage_cycle = cp.at("stage_cycle").get<bool>();

    const int hw = ds.config.hand_cam.out_w, hh = ds.config.hand_cam.out_h;
    const int iw = ds.config.inhand_cam.out_w, ih = ds.config.inhand_cam.out_h;
    const std::size_t hand_px = static_cast<std::size_t>(hw) * hh * 3;
    const std::size_t inhand_px = static_cast<std::size_t>(iw) * ih * 3;
    const int T = ds.params.horizon;

    for (const auto& em : header.at("episodes")) {
        Episode e;
        e.meta.stage = em.at("stage").get<int>();
        e.meta.delta_true = em.at("delta_true").get<double>();
        e.meta.pick_tcp = {em.at("pick_tcp")[0].get<double>(), em.at("pick_tcp")[1].get<double>()};
        e.meta.seed = em.at("seed").get<std::uint64_t>();

        auto img_blob = r.read_blob();
        const std::size_t expect = (inhand_px + hand_px + static_cast<std::size_t>(T) * hand_px) * sizeof(float);
        if (img_blob.size() != expect)
            throw FormatError("dataset: image blob size mismatch in episode " +
                              std::to_string(ds.episodes.size()));
        const float* p = reinterpret_cast<const float*>(img_blob.data());
        e.inhand_image = Image(iw, ih);
        std::memcpy(e.inhand_image.pixels.data(), p, inhand_px * sizeof(float));
        p += inhand_px;
        e.goal_image = Image(hw, hh);
        std::memcpy(e.goal_image.pixels.data(), p, hand_px * sizeof(float));
        p += hand_px;
        e.steps.resize(T);
        for (int t = 0; t < T; ++t) {
            e.steps[t].obs = Image(hw, hh);
            std::memcpy(e.steps[t].obs.pixels.data(), p, hand_px * sizeof(float));
            p += hand_px;
        }

        auto act_blob = r.read_blob();
        if (act_blob.size() != static_cast<std::size_t>(T) * 2 * sizeof(double))
            throw FormatError("dataset: action blob size mismatch in episode " +
                              std::to_string(ds.episodes.size()));
        const double* a = reinterpret_cast<const double*>(act_blob.data());
        for (int t = 0; t < T; ++t) e.steps[t].action = {a[2 * t], a[2 * t + 1]};
        ds.episodes.push_back(std::move(e));
    }
    return ds;
}

inline bool dataset_equal(const Dataset& a, const Dataset& b) {
    if (sim::sim_config_to_json(a.config) != sim::sim_config_to_json(b.config)) return false;
    if (a.params.n_episodes != b.params.n_episodes || a.params.horizon != b.params.horizon ||
        a.params.dt != b.params.dt || a.params.seed != b.params.seed ||
        a.sim_revision != b.sim_revision)
        return false;
    if (a.episodes.size() != b.episodes.size()) return false;
    for (std::size_t i = 0; i < a.episodes.size(); ++i) {
        const Episode& x = a.episodes[i];
        const Episode& y = b.episodes[i];
        if (x.meta.delta_true != y.meta.delta_true || !(x.meta.pick_tcp == y.meta.pick_tcp) ||
            x.meta.stage != y.meta.stage || x.meta.seed != y.meta.seed)
            return false;
        if (!x.inhand_image.same_bits(y.inhand_image) || !x.goal_image.same_bits(y.goal_image))
            return false;
        if (x.steps.size() != y.steps.size()) return false;
        for (std::size_t t = 0; t < x.steps.size(); ++t)
            if (!(x.steps[t].action == y.steps[t].action) ||
                !x.steps[t].obs.same_bits(y.steps[t].obs))
                return false;
    }
    return true;
}

/// Self-certification: replays every episode's stored actions through the
/// simulator from the recorded pick state and demands bit-exact observation
/// reproduction. Returns the number of verified transitions.
inline std::size_t verify_dataset(const Dataset& ds) {
    if (ds.sim_revision != kSimRevision)
        throw FormatError("dataset: simulator revision mismatch (file " + ds.sim_revision +
                          ", current " + std::string(kSimRevision) + ")");
    std::size_t transitions = 0;
    for (std::size_t i = 0; i < ds.episodes.size(); ++i) {
        const Episode& e = ds.episodes[i];
        sim::WorldState s = sim::new_world(ds.config, e.meta.stage);
        s = sim::move_to(ds.config, s, e.meta.pick_tcp);
        s = sim::pick(ds.config, s, e.meta.delta_true);
        if (!sim::render(ds.config, s, sim::Camera::InHand).same_bits(e.inhand_image))
            throw FormatError("dataset: in-hand image replay mismatch in episode " + std::to_string(i));
        if (!sim::render(ds.config, s, sim::Camera::Hand).same_bits(e.goal_image))
            throw FormatError("dataset: goal image replay mismatch in episode " + std::to_string(i));
        for (std::size_t t = 0; t < e.steps.size(); ++t) {
            const Image obs = t == 0 ? e.goal_image : sim::render(ds.config, s, sim::Camera::Hand);
            if (!obs.same_bits(e.steps[t].obs))
                throw FormatError("dataset: observation replay mismatch at episode " +
                                  std::to_string(i) + " step " + std::to_string(t));
            s = sim::step(ds.config, s, e.steps[t].action, ds.params.dt);
            ++transitions;
        }
    }
    return transitions;
}

}  // namespace ihvs::data
