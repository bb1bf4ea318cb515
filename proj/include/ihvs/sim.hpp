#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "ihvs/common.hpp"
#include "ihvs/image.hpp"

namespace ihvs::sim {

struct CameraSpec {
    Vec2 offset_from_tcp;         // camera centre relative to the TCP, metres
    Vec2 footprint;               // physical extent imaged (w, h), metres
    int res_w = 0, res_h = 0;     // capture raster, px
    CropWindow crop_window;       // sub-rectangle of the capture raster
    int out_w = 64, out_h = 64;   // model input size after resize

    double px_w() const { return footprint.x / res_w; }
    double px_h() const { return footprint.y / res_h; }
};

/// All default lengths are dyadic rationals (exact in binary floating point).
/// That makes the world geometry of two consecutive packing stages an *exact*
/// translation of one another, so the cropped hand-camera views agree
/// bit-for-bit -- the property the whole single-model sequential scheme
/// rests on.
struct SimConfig {
    int n_slots = 5;
    double slot_pitch = 0.109375;       // 7/64 m
    double object_w = 0.1015625;        // 13/128 m, long axis along +x
    double object_h = 0.05078125;       // 13/256 m
    double clearance = 0.00390625;      // per-side placement tolerance
    double box_inner_w = 0.5546875;     // n_slots*pitch + 2*wall margin
    double box_inner_h = 0.05859375;
    double wall_thickness = 0.0078125;
    double workspace_margin = 0.05;     // beyond the outer box, clamping bound
    double walk_half_x = 0.0234375;     // random-walk / evaluation region
    double walk_half_y = 0.015625;
    double dt = 0.5;
    double u_max = 0.01;
    double delta_range = 0.01;          // vacuum-offset half-range
    Rgb background_color{0.15, 0.15, 0.17};
    Rgb object_color{0.88, 0.82, 0.30};
    Rgb box_color{0.55, 0.44, 0.30};
    CameraSpec hand_cam{{-0.046875, 0.0},
                        {0.146484375, 0.05859375},  // 2^-11 m per px
                        300,
                        120,
                        {66, 0, 128, 120},
                        64,
                        64};
    CameraSpec inhand_cam{{0.0, 0.0},
                          {0.3515625, 0.29296875},  // 2^-10 m per px
                          360,
                          300,
                          {116, 118, 128, 64},
                          64,
                          64};

    double wall_margin_x() const { return (box_inner_w - n_slots * slot_pitch) / 2.0; }

    void validate() const;
};

enum class Camera { Hand, InHand };

struct Held {
    double delta = 0.0;  // longitudinal vacuum offset, object centre = tcp + (delta, 0)
};

/// Immutable ground-truth world state. Every operation returns a new value.
struct WorldState {
    Vec2 tcp;
    std::optional<Held> held;
    std::vector<Vec2> placed;     // successfully placed object centres, slot order
    std::vector<Vec2> failed;     // failed placements left where they landed
    int stage = 0;                // == placed.size()
    std::uint64_t config_ref = 0;
};

struct StepFlags {
    bool clamped_x = false;
    bool clamped_y = false;
};

struct PlaceResult {
    bool success = false;
    bool collision = false;  // overlapped a wall or another object
    Vec2 landing;
    Vec2 miss;               // landing - slot_center(stage)
};

struct Workspace {
    double x_lo, x_hi, y_lo, y_hi;
};

// --- config plumbing -------------------------------------------------------

inline nlohmann::json camera_to_json(const CameraSpec& c) {
    return {{"offset_from_tcp", {c.offset_from_tcp.x, c.offset_from_tcp.y}},
            {"footprint", {c.footprint.x, c.footprint.y}},
            {"resolution", {c.res_w, c.res_h}},
            {"crop_window", {c.crop_window.x0, c.crop_window.y0, c.crop_window.w, c.crop_window.h}},
            {"output_size", {c.out_w, c.out_h}}};
}

inline nlohmann::json sim_config_to_json(const SimConfig& c) {
    return {{"n_slots", c.n_slots},
            {"slot_pitch", c.slot_pitch},
            {"object_w", c.object_w},
            {"object_h", c.object_h},
            {"clearance", c.clearance},
            {"box_inner_w", c.box_inner_w},
            {"box_inner_h", c.box_inner_h},
            {"wall_thickness", c.wall_thickness},
            {"workspace_margin", c.workspace_margin},
            {"walk_half_x", c.walk_half_x},
            {"walk_half_y", c.walk_half_y},
            {"dt", c.dt},
            {"u_max", c.u_max},
            {"delta_range", c.delta_range},
            {"background_color", {c.background_color.r, c.background_color.g, c.background_color.b}},
            {"object_color", {c.object_color.r, c.object_color.g, c.object_color.b}},
            {"box_color", {c.box_color.r, c.box_color.g, c.box_color.b}},
            {"hand_cam", camera_to_json(c.hand_cam)},
            {"inhand_cam", camera_to_json(c.inhand_cam)}};
}

namespace detail {

inline void reject_unknown_keys(const nlohmann::json& j, const nlohmann::json& reference,
                                const std::string& scope) {
    for (auto it = j.begin(); it != j.end(); ++it)
        if (!reference.contains(it.key()))
            throw ConfigError("unknown config key \"" + (scope.empty() ? it.key() : scope + "." + it.key()) + "\"");
}

inline Rgb rgb_from_json(const nlohmann::json& a, const std::string& key) {
    if (!a.is_array() || a.size() != 3) throw ConfigError("config key \"" + key + "\" must be [r,g,b]");
    return {a[0].get<double>(), a[1].get<double>(), a[2].get<double>()};
}

inline void camera_from_json(const nlohmann::json& j, CameraSpec& c, const std::string& scope) {
    reject_unknown_keys(j, camera_to_json(c), scope);
    if (j.contains("offset_from_tcp"))
        c.offset_from_tcp = {j["offset_from_tcp"][0].get<double>(), j["offset_from_tcp"][1].get<double>()};
    if (j.contains("footprint"))
        c.footprint = {j["footprint"][0].get<double>(), j["footprint"][1].get<double>()};
    if (j.contains("resolution")) {
        c.res_w = j["resolution"][0].get<int>();
        c.res_h = j["resolution"][1].get<int>();
    }
    if (j.contains("crop_window"))
        c.crop_window = {j["crop_window"][0].get<int>(), j["crop_window"][1].get<int>(),
                         j["crop_window"][2].get<int>(), j["crop_window"][3].get<int>()};
    if (j.contains("output_size")) {
        c.out_w = j["output_size"][0].get<int>();
        c.out_h = j["output_size"][1].get<int>();
    }
}

}  // namespace detail

/// Applies a (possibly partial) JSON document on top of `base`. Unknown keys
/// are rejected by name; absent keys keep their defaults.
inline SimConfig sim_config_from_json(const nlohmann::json& j, SimConfig base = SimConfig{}) {
    detail::reject_unknown_keys(j, sim_config_to_json(base), "");
    SimConfig c = base;
    auto get = [&](const char* k, auto& field) {
        if (j.contains(k)) field = j[k].template get<std::decay_t<decltype(field)>>();
    };
    get("n_slots", c.n_slots);
    get("slot_pitch", c.slot_pitch);
    get("object_w", c.object_w);
    get("object_h", c.object_h);
    get("clearance", c.clearance);
    get("box_inner_w", c.box_inner_w);
    get("box_inner_h", c.box_inner_h);
    get("wall_thickness", c.wall_thickness);
    get("workspace_margin", c.workspace_margin);
    get("walk_half_x", c.walk_half_x);
    get("walk_half_y", c.walk_half_y);
    get("dt", c.dt);
    get("u_max", c.u_max);
    get("delta_range", c.delta_range);
    if (j.contains("background_color")) c.background_color = detail::rgb_from_json(j["background_color"], "background_color");
    if (j.contains("object_color")) c.object_color = detail::rgb_from_json(j["object_color"], "object_color");
    if (j.contains("box_color")) c.box_color = detail::rgb_from_json(j["box_color"], "box_color");
    if (j.contains("hand_cam")) detail::camera_from_json(j["hand_cam"], c.hand_cam, "hand_cam");
    if (j.contains("inhand_cam")) detail::camera_from_json(j["inhand_cam"], c.inhand_cam, "inhand_cam");
    c.validate();
    return c;
}

/// "wide" is the default geometry. "tight" narrows the slot pitch so the
/// per-side placement tolerance shrinks from ~3.9 mm to ~2 mm.
inline SimConfig preset(const std::string& name) {
    SimConfig c;
    if (name == "wide") return c;
    if (name == "tight") {
        c.slot_pitch = 0.10546875;      // 27/256 m
        c.clearance = 0.001953125;      // (pitch - object_w) / 2
        c.box_inner_w = 0.53125;        // 5*pitch + 2*margin
        c.box_inner_h = 0.0546875;      // object_h + 2*margin
        return c;
    }
    throw ConfigError("unknown preset \"" + name + "\" (expected wide|tight)");
}

inline std::uint64_t config_fingerprint(const SimConfig& c) {
    return fnv1a(sim_config_to_json(c).dump());
}

inline void SimConfig::validate() const {
    if (n_slots < 1) throw ConfigError("n_slots must be >= 1");
    if (!(dt > 0.0)) throw ConfigError("dt must be > 0");
    if (!(u_max > 0.0)) throw ConfigError("u_max must be > 0");
    if (delta_range < 0.0) throw ConfigError("delta_range must be >= 0");
    if (slot_pitch < object_w) throw ConfigError("slot_pitch must be >= object_w");
    if (n_slots * slot_pitch > box_inner_w + 1e-12)
        throw ConfigError("box_inner_w too small for n_slots * slot_pitch");
    if (box_inner_h < object_h) throw ConfigError("box_inner_h must be >= object_h");
    if (!(clearance > 0.0)) throw ConfigError("clearance must be > 0");
    if (clearance > (slot_pitch - object_w) / 2.0 + 1e-12)
        throw ConfigError("clearance exceeds the per-side slot margin");
    if (clearance > (box_inner_h - object_h) / 2.0 + 1e-12)
        throw ConfigError("clearance exceeds the per-side lateral margin");
    if (walk_half_x <= 0.0 || walk_half_y <= 0.0) throw ConfigError("walk region must be positive");
    for (const CameraSpec* cam : {&hand_cam, &inhand_cam}) {
        if (cam->res_w <= 0 || cam->res_h <= 0) throw ConfigError("camera resolution must be positive");
        if (cam->footprint.x <= 0.0 || cam->footprint.y <= 0.0)
            throw ConfigError("camera footprint must be positive");
        if (cam->out_w <= 0 || cam->out_h <= 0) throw ConfigError("camera output_size must be positive");
        const CropWindow& w = cam->crop_window;
        if (w.w <= 0 || w.h <= 0 || w.x0 < 0 || w.y0 < 0 || w.x0 + w.w > cam->res_w ||
            w.y0 + w.h > cam->res_h)
            throw ConfigError("camera crop_window must lie inside the capture raster");
    }
}

// --- geometry ---------------------------------------------------------------

/// Slots fill along +x from the low-x wall; slot k is centred at
/// margin + (k + 1/2) * pitch on the box midline.
inline Vec2 slot_center(const SimConfig& c, int k) {
    if (k < 0 || k >= c.n_slots) throw StateError("slot index out of range");
    return {c.wall_margin_x() + (k + 0.5) * c.slot_pitch, 0.0};
}

inline Workspace workspace(const SimConfig& c) {
    const double m = c.wall_thickness + c.workspace_margin;
    return {-m, c.box_inner_w + m, -c.box_inner_h / 2.0 - m, c.box_inner_h / 2.0 + m};
}

/// Object feeder, outside the box on the +y side; where pack_sequence picks.
inline Vec2 pick_station(const SimConfig& c) {
    return {c.box_inner_w / 2.0, c.box_inner_h / 2.0 + c.wall_thickness + 0.03125};
}

// --- state operations -------------------------------------------------------

inline WorldState new_world(const SimConfig& c, int initial_stage) {
    if (initial_stage < 1 || initial_stage > c.n_slots)
        throw ConfigError("initial_stage must be in [1, n_slots]; a worker places the first object");
    WorldState s;
    s.config_ref = config_fingerprint(c);
    for (int k = 0; k < initial_stage; ++k) s.placed.push_back(slot_center(c, k));
    s.stage = initial_stage;
    s.tcp = initial_stage < c.n_slots ? slot_center(c, initial_stage) : pick_station(c);
    return s;
}

/// Canonical state used by evaluation and the aliasing tests: `stage` objects
/// exactly at their slot centres, TCP at slot_center(stage) + offset. With
/// dyadic configs and offsets every coordinate below is exact.
inline WorldState make_canonical(const SimConfig& c, int stage, Vec2 offset,
                                 std::optional<double> delta = std::nullopt) {
    if (stage < 1 || stage >= c.n_slots) throw StateError("canonical stage must be in [1, n_slots)");
    WorldState s;
    s.config_ref = config_fingerprint(c);
    for (int k = 0; k < stage; ++k) s.placed.push_back(slot_center(c, k));
    s.stage = stage;
    s.tcp = slot_center(c, stage) + offset;
    if (delta) s.held = Held{*delta};
    return s;
}

inline WorldState step(const SimConfig& c, const WorldState& s, Vec2 u, double dt,
                       StepFlags* flags = nullptr) {
    WorldState n = s;
    n.tcp = s.tcp + u * dt;
    const Workspace w = workspace(c);
    StepFlags f;
    if (n.tcp.x < w.x_lo) { n.tcp.x = w.x_lo; f.clamped_x = true; }
    if (n.tcp.x > w.x_hi) { n.tcp.x = w.x_hi; f.clamped_x = true; }
    if (n.tcp.y < w.y_lo) { n.tcp.y = w.y_lo; f.clamped_y = true; }
    if (n.tcp.y > w.y_hi) { n.tcp.y = w.y_hi; f.clamped_y = true; }
    if (flags) *flags = f;
    return n;
}

/// Coarse point-to-point motion used by the outer packing loop (the real
/// system does these with position control, not the learned controller).
inline WorldState move_to(const SimConfig& c, const WorldState& s, Vec2 p) {
    WorldState n = s;
    n.tcp = p;
    const Workspace w = workspace(c);
    n.tcp.x = std::clamp(n.tcp.x, w.x_lo, w.x_hi);
    n.tcp.y = std::clamp(n.tcp.y, w.y_lo, w.y_hi);
    return n;
}

inline WorldState pick(const SimConfig& c, const WorldState& s, double delta) {
    if (s.held) throw StateError("pick: already holding an object");
    if (std::abs(delta) > c.delta_range) throw StateError("pick: |delta| exceeds delta_range");
    WorldState n = s;
    n.held = Held{delta};
    return n;
}

namespace detail {

inline bool rects_overlap(Vec2 ca, Vec2 cb, double w, double h) {
    return std::abs(ca.x - cb.x) < w && std::abs(ca.y - cb.y) < h;
}

}  // namespace detail

inline std::pair<WorldState, PlaceResult> place(const SimConfig& c, const WorldState& s) {
    if (!s.held) throw StateError("place: nothing held");
    if (s.stage >= c.n_slots) throw StateError("place: box is full");
    PlaceResult r;
    r.landing = s.tcp + Vec2{s.held->delta, 0.0};
    const Vec2 target = slot_center(c, s.stage);
    r.miss = r.landing - target;

    const double hw = c.object_w / 2.0, hh = c.object_h / 2.0;
    bool inside = r.landing.x - hw >= 0.0 && r.landing.x + hw <= c.box_inner_w &&
                  r.landing.y - hh >= -c.box_inner_h / 2.0 && r.landing.y + hh <= c.box_inner_h / 2.0;
    bool overlap = false;
    for (const auto& p : s.placed)
        overlap = overlap || detail::rects_overlap(r.landing, p, c.object_w, c.object_h);
    for (const auto& p : s.failed)
        overlap = overlap || detail::rects_overlap(r.landing, p, c.object_w, c.object_h);
    r.collision = overlap || !inside;
    r.success = std::abs(r.miss.x) <= c.clearance && std::abs(r.miss.y) <= c.clearance && !r.collision;

    WorldState n = s;
    n.held.reset();
    if (r.success) {
        n.placed.push_back(r.landing);
        n.stage += 1;
    } else {
        n.failed.push_back(r.landing);
    }
    return {n, r};
}

/// Evaluation oracle only -- the model never sees this.
inline Vec2 ground_truth_goal(const SimConfig& c, const WorldState& s) {
    if (!s.held) throw StateError("ground_truth_goal: nothing held");
    if (s.stage >= c.n_slots) throw StateError("ground_truth_goal: box is full");
    return slot_center(c, s.stage) - Vec2{s.held->delta, 0.0};
}

// --- rendering --------------------------------------------------------------

namespace detail {

struct RelRect {
    Vec2 center;  // camera-relative
    Vec2 half;
    Rgb color;
};

/// Coverage-weighted flat shading of axis-aligned rectangles, painter's
/// order. Coverage is the exact area overlap of the rectangle with each pixel
/// cell, so sub-pixel motion changes the image smoothly; for identical
/// camera-relative inputs the output is bit-identical.
inline void paint(std::vector<double>& buf, const CameraSpec& cam, const RelRect& rect) {
    const double pw = cam.px_w(), ph = cam.px_h();
    const double half_w = cam.footprint.x / 2.0, half_h = cam.footprint.y / 2.0;
    const double rx_lo = rect.center.x - rect.half.x, rx_hi = rect.center.x + rect.half.x;
    const double ry_lo = rect.center.y - rect.half.y, ry_hi = rect.center.y + rect.half.y;

    int ix_lo = static_cast<int>(std::floor((rx_lo + half_w) / pw));
    int ix_hi = static_cast<int>(std::ceil((rx_hi + half_w) / pw));
    // image row 0 is the top of the frame (+y)
    int iy_lo = static_cast<int>(std::floor((half_h - ry_hi) / ph));
    int iy_hi = static_cast<int>(std::ceil((half_h - ry_lo) / ph));
    ix_lo = std::max(ix_lo, 0);
    iy_lo = std::max(iy_lo, 0);
    ix_hi = std::min(ix_hi, cam.res_w - 1);
    iy_hi = std::min(iy_hi, cam.res_h - 1);

    for (int iy = iy_lo; iy <= iy_hi; ++iy) {
        const double py_hi = half_h - iy * ph;
        const double py_lo = py_hi - ph;
        const double oy = std::max(0.0, std::min(ry_hi, py_hi) - std::max(ry_lo, py_lo)) / ph;
        if (oy <= 0.0) continue;
        for (int ix = ix_lo; ix <= ix_hi; ++ix) {
            const double px_lo = -half_w + ix * pw;
            const double px_hi = px_lo + pw;
            const double ox = std::max(0.0, std::min(rx_hi, px_hi) - std::max(rx_lo, px_lo)) / pw;
            if (ox <= 0.0) continue;
            const double cov = ox * oy;
            double* p = &buf[(static_cast<std::size_t>(iy) * cam.res_w + ix) * 3];
            p[0] += cov * (rect.color.r - p[0]);
            p[1] += cov * (rect.color.g - p[1]);
            p[2] += cov * (rect.color.b - p[2]);
        }
    }
}

}  // namespace detail

/// Raw capture at the camera's native resolution, before crop and resize.
inline Image render_capture(const SimConfig& c, const WorldState& s, Camera which) {
    const CameraSpec& cam = which == Camera::Hand ? c.hand_cam : c.inhand_cam;
    std::vector<double> buf(static_cast<std::size_t>(cam.res_w) * cam.res_h * 3);
    for (std::size_t i = 0; i < buf.size(); i += 3) {
        buf[i] = c.background_color.r;
        buf[i + 1] = c.background_color.g;
        buf[i + 2] = c.background_color.b;
    }

    std::vector<detail::RelRect> rects;
    if (which == Camera::Hand) {
        // The hand camera images the box interior below the tool; the held
        // object rides above its view plane and is never drawn.
        const Vec2 cc = s.tcp + cam.offset_from_tcp;
        const double iw = c.box_inner_w, ih = c.box_inner_h, th = c.wall_thickness;
        const double oh = ih / 2.0 + th;
        rects.push_back({Vec2{-th / 2.0, 0.0} - cc, {th / 2.0, oh}, c.box_color});
        rects.push_back({Vec2{iw + th / 2.0, 0.0} - cc, {th / 2.0, oh}, c.box_color});
        rects.push_back({Vec2{iw / 2.0, -(ih + th) / 2.0} - cc, {iw / 2.0 + th, th / 2.0}, c.box_color});
        rects.push_back({Vec2{iw / 2.0, (ih + th) / 2.0} - cc, {iw / 2.0 + th, th / 2.0}, c.box_color});
        const Vec2 ohalf{c.object_w / 2.0, c.object_h / 2.0};
        for (const auto& p : s.placed) rects.push_back({p - cc, ohalf, c.object_color});
        for (const auto& p : s.failed) rects.push_back({p - cc, ohalf, c.object_color});
    } else {
        // The in-hand view is rigid to the TCP: it depends only on the vacuum
        // offset of the held object, never on where the arm is.
        if (s.held)
            rects.push_back({{s.held->delta, 0.0},
                             {c.object_w / 2.0, c.object_h / 2.0},
                             c.object_color});
    }
    for (const auto& r : rects) detail::paint(buf, cam, r);

    Image img(cam.res_w, cam.res_h);
    for (std::size_t i = 0; i < buf.size(); ++i) img.pixels[i] = static_cast<float>(buf[i]);
    return img;
}

/// Full observation path: capture, crop to the camera's window, resize to the
/// model input size. Pure function of (config, state, camera).
inline Image render(const SimConfig& c, const WorldState& s, Camera which) {
    const CameraSpec& cam = which == Camera::Hand ? c.hand_cam : c.inhand_cam;
    Image capture = render_capture(c, s, which);
    return resize_bilinear(crop_pixels(capture, cam.crop_window), cam.out_w, cam.out_h);
}

}  // namespace ihvs::sim
