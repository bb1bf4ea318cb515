#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "ihvs/rng.hpp"
#include "ihvs/sim.hpp"

using namespace ihvs;
using namespace ihvs::sim;

namespace {
const SimConfig kWide = preset("wide");
const SimConfig kTight = preset("tight");
}  // namespace

TEST_CASE("config: presets validate and geometry is consistent") {
    REQUIRE_NOTHROW(kWide.validate());
    REQUIRE_NOTHROW(kTight.validate());
    REQUIRE(kWide.n_slots * kWide.slot_pitch <= kWide.box_inner_w);
    REQUIRE(kWide.clearance == Catch::Approx((kWide.slot_pitch - kWide.object_w) / 2.0));
    REQUIRE(kTight.clearance < kWide.clearance);
    REQUIRE_THROWS_AS(preset("narrow"), ConfigError);

    SimConfig bad = kWide;
    bad.dt = 0.0;
    REQUIRE_THROWS_AS(bad.validate(), ConfigError);
    bad = kWide;
    bad.slot_pitch = bad.object_w - 0.01;
    REQUIRE_THROWS_AS(bad.validate(), ConfigError);
    bad = kWide;
    bad.hand_cam.crop_window.w = 1000;
    REQUIRE_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("config: json load fills defaults, applies overrides, rejects unknown keys") {
    SimConfig c = sim_config_from_json(nlohmann::json::object());
    REQUIRE(c.dt == kWide.dt);
    c = sim_config_from_json(nlohmann::json{{"dt", 0.25}});
    REQUIRE(c.dt == 0.25);
    REQUIRE_THROWS_WITH(sim_config_from_json(nlohmann::json{{"dts", 0.25}}),
                        Catch::Matchers::ContainsSubstring("dts"));
    REQUIRE_THROWS_WITH(
        sim_config_from_json(nlohmann::json{{"hand_cam", {{"resolutoin", {1, 2}}}}}),
        Catch::Matchers::ContainsSubstring("hand_cam.resolutoin"));
    // round trip through json is lossless
    SimConfig again = sim_config_from_json(sim_config_to_json(kTight));
    REQUIRE(sim_config_to_json(again) == sim_config_to_json(kTight));
}

TEST_CASE("new_world: pre-placed objects at slot centers") {
    WorldState s = new_world(kWide, 1);
    REQUIRE(s.stage == 1);
    REQUIRE(s.placed.size() == 1);
    REQUIRE(s.placed[0] == slot_center(kWide, 0));
    REQUIRE(!s.held.has_value());
    REQUIRE(s.tcp == slot_center(kWide, 1));

    WorldState full = new_world(kWide, 5);
    REQUIRE(full.stage == 5);
    REQUIRE(full.placed.size() == 5);

    REQUIRE_THROWS_AS(new_world(kWide, 0), ConfigError);
    REQUIRE_THROWS_AS(new_world(kWide, 6), ConfigError);
}

TEST_CASE("step: Euler update, zero-action identity, boundary clamp") {
    WorldState s = new_world(kWide, 1);
    s.tcp = {0.0, 0.0};
    WorldState n = step(kWide, s, {0.01, 0.0}, 0.5);
    REQUIRE(n.tcp.x == Catch::Approx(0.005).margin(1e-15));
    REQUIRE(n.tcp.y == 0.0);

    s.tcp = {0.1, 0.02};
    n = step(kWide, s, {0.0, 0.0}, 0.5);
    REQUIRE(n.tcp == Vec2{0.1, 0.02});

    const Workspace w = workspace(kWide);
    s.tcp = {w.x_hi, 0.0};
    StepFlags f;
    n = step(kWide, s, {0.01, 0.0}, 0.5, &f);
    REQUIRE(n.tcp.x == w.x_hi);
    REQUIRE(f.clamped_x);
    REQUIRE(!f.clamped_y);
}

TEST_CASE("step: translation order does not matter away from the boundary") {
    RngStream r(5);
    for (int i = 0; i < 100; ++i) {
        WorldState s = new_world(kWide, 1);
        s.tcp = {r.uniform(0.1, 0.4), r.uniform(-0.02, 0.02)};
        Vec2 u1{r.uniform(-0.01, 0.01), r.uniform(-0.01, 0.01)};
        Vec2 u2{r.uniform(-0.01, 0.01), r.uniform(-0.01, 0.01)};
        Vec2 a = step(kWide, step(kWide, s, u1, 0.5), u2, 0.5).tcp;
        Vec2 b = step(kWide, step(kWide, s, u2, 0.5), u1, 0.5).tcp;
        REQUIRE(a.x == Catch::Approx(b.x).margin(1e-15));
        REQUIRE(a.y == Catch::Approx(b.y).margin(1e-15));
    }
}

TEST_CASE("pick: attaches at tcp + delta, rejects double pick and big offsets") {
    WorldState s = new_world(kWide, 1);
    WorldState h0 = pick(kWide, s, 0.0);
    REQUIRE(h0.held->delta == 0.0);
    WorldState h1 = pick(kWide, s, 0.01);
    REQUIRE(h1.held->delta == 0.01);
    REQUIRE_THROWS_AS(pick(kWide, h1, 0.0), StateError);
    REQUIRE_THROWS_AS(pick(kWide, s, 0.02), StateError);
}

TEST_CASE("place: perfect compensation succeeds, just-outside misses") {
    const double delta = 0.004;
    WorldState s = pick(kWide, new_world(kWide, 1), delta);
    s = move_to(kWide, s, slot_center(kWide, 1) - Vec2{delta, 0.0});
    auto [n, r] = place(kWide, s);
    REQUIRE(r.success);
    REQUIRE(!r.collision);
    REQUIRE(n.stage == 2);
    REQUIRE(n.placed.size() == 2);
    REQUIRE(!n.held.has_value());

    WorldState s2 = pick(kWide, new_world(kWide, 1), delta);
    s2 = move_to(kWide, s2,
                 slot_center(kWide, 1) - Vec2{delta, 0.0} + Vec2{kWide.clearance + 1e-6, 0.0});
    auto [n2, r2] = place(kWide, s2);
    REQUIRE(!r2.success);
    REQUIRE(n2.stage == 1);
    REQUIRE(n2.failed.size() == 1);

    REQUIRE_THROWS_AS(place(kWide, new_world(kWide, 1)), StateError);
}

TEST_CASE("place: collision with the previous object is flagged") {
    // land the object on top of placed object 0; oracle: axis-interval overlap
    WorldState s = pick(kWide, new_world(kWide, 1), 0.0);
    const Vec2 target = slot_center(kWide, 0) + Vec2{0.03, 0.0};
    s = move_to(kWide, s, target);
    const Vec2 prev = s.placed[0];
    const bool oracle_overlap = std::abs(target.x - prev.x) < kWide.object_w &&
                                std::abs(target.y - prev.y) < kWide.object_h;
    REQUIRE(oracle_overlap);
    auto [n, r] = place(kWide, s);
    REQUIRE(!r.success);
    REQUIRE(r.collision);
    REQUIRE(n.stage == 1);
}

TEST_CASE("place-pick round trip succeeds across the vacuum offset range") {
    for (const SimConfig* cfg : {&kWide, &kTight}) {
        for (int i = 0; i <= 20; ++i) {
            const double delta = -cfg->delta_range + i * (2.0 * cfg->delta_range / 20.0);
            WorldState s = pick(*cfg, new_world(*cfg, 1), delta);
            s = move_to(*cfg, s, ground_truth_goal(*cfg, s));
            auto [n, r] = place(*cfg, s);
            INFO("delta=" << delta);
            REQUIRE(r.success);
            REQUIRE(r.miss.norm() < 1e-12);
            (void)n;
        }
    }
}

TEST_CASE("ground_truth_goal compensates the vacuum offset") {
    WorldState s = pick(kWide, new_world(kWide, 1), 0.0);
    REQUIRE(ground_truth_goal(kWide, s) == slot_center(kWide, 1));
    WorldState s2 = pick(kWide, new_world(kWide, 1), 0.01);
    REQUIRE(ground_truth_goal(kWide, s2) == slot_center(kWide, 1) - Vec2{0.01, 0.0});

    WorldState full = new_world(kWide, 5);
    full.held = Held{0.0};
    REQUIRE_THROWS_AS(ground_truth_goal(kWide, full), StateError);
}

TEST_CASE("render: empty footprint gives a uniform background image") {
    WorldState s;
    s.tcp = {kWide.box_inner_w / 2.0, 0.0};
    Image img = render(kWide, s, Camera::Hand);
    for (std::size_t i = 0; i < img.pixels.size(); i += 3) {
        REQUIRE(img.pixels[i] == Catch::Approx(kWide.background_color.r).margin(1e-7));
        REQUIRE(img.pixels[i + 1] == Catch::Approx(kWide.background_color.g).margin(1e-7));
    }
}

TEST_CASE("render: deterministic for identical states") {
    WorldState s = make_canonical(kWide, 1, {0.004, -0.002}, 0.003);
    REQUIRE(render(kWide, s, Camera::Hand).same_bits(render(kWide, s, Camera::Hand)));
    REQUIRE(render(kWide, s, Camera::InHand).same_bits(render(kWide, s, Camera::InHand)));
}

TEST_CASE("render: one-pixel TCP shift moves the capture by one pixel") {
    const double px = kWide.hand_cam.px_w();
    REQUIRE(px == 0.00048828125);  // dyadic by construction
    WorldState a = make_canonical(kWide, 1, {0.0, 0.0});
    WorldState b = make_canonical(kWide, 1, {px, 0.0});
    Image ca = render_capture(kWide, a, Camera::Hand);
    Image cb = render_capture(kWide, b, Camera::Hand);
    for (int y = 0; y < ca.height; ++y)
        for (int x = 1; x < ca.width; ++x)
            for (int c = 0; c < 3; ++c) {
                INFO("y=" << y << " x=" << x << " c=" << c);
                REQUIRE(cb.at(y, x - 1, c) == ca.at(y, x, c));
            }
}

TEST_CASE("render: in-hand view depends only on the vacuum offset") {
    WorldState a = make_canonical(kWide, 1, {0.01, -0.005}, 0.007);
    WorldState b = make_canonical(kWide, 2, {-0.02, 0.003}, 0.007);
    REQUIRE(render(kWide, a, Camera::InHand).same_bits(render(kWide, b, Camera::InHand)));

    WorldState c = make_canonical(kWide, 1, {0.01, -0.005}, -0.007);
    REQUIRE(!render(kWide, a, Camera::InHand).same_bits(render(kWide, c, Camera::InHand)));

    WorldState empty = make_canonical(kWide, 1, {0.0, 0.0});
    Image img = render(kWide, empty, Camera::InHand);
    for (std::size_t i = 0; i < img.pixels.size(); i += 3)
        REQUIRE(img.pixels[i] == Catch::Approx(kWide.background_color.r).margin(1e-7));
}

TEST_CASE("render: stage aliasing is bit-exact for canonical states") {
    for (const SimConfig* cfg : {&kWide, &kTight}) {
        for (const Vec2 off : {Vec2{0.0, 0.0}, Vec2{0.015625, -0.0078125}, Vec2{-0.0234375, 0.015625}}) {
            for (int n = 1; n + 1 < cfg->n_slots; ++n) {
                WorldState sn = make_canonical(*cfg, n, off, 0.0078125);
                WorldState sn1 = make_canonical(*cfg, n + 1, off, 0.0078125);
                Image a = render(*cfg, sn, Camera::Hand);
                Image b = render(*cfg, sn1, Camera::Hand);
                INFO("preset offset (" << off.x << "," << off.y << ") stage " << n);
                REQUIRE(a.same_bits(b));
            }
        }
    }
}

TEST_CASE("render: the hand camera sees the previous object, not the stage count") {
    // sanity of the geometry: at every canonical stage the previous object's
    // right edge lands inside the cropped view, so the observation carries
    // position information
    WorldState s1 = make_canonical(kWide, 1, {0.0, 0.0});
    WorldState s0 = s1;
    s0.placed.clear();
    s0.stage = 0;
    Image with_obj = render(kWide, s1, Camera::Hand);
    Image without = render(kWide, s0, Camera::Hand);
    REQUIRE(!with_obj.same_bits(without));
}
