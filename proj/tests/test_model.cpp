#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "ihvs/gaussian.hpp"
#include "ihvs/model.hpp"
#include "ihvs/rng.hpp"
#include "ihvs/sim.hpp"

using namespace ihvs;
using namespace ihvs::model;

namespace {

DiagonalGaussian make_g(std::initializer_list<double> mean, std::initializer_list<double> ls) {
    DiagonalGaussian g;
    g.mean = Eigen::Map<const Eigen::VectorXd>(mean.begin(), static_cast<Eigen::Index>(mean.size()));
    g.log_std = Eigen::Map<const Eigen::VectorXd>(ls.begin(), static_cast<Eigen::Index>(ls.size()));
    return g;
}

/// Monte-Carlo KL estimate: E_q[log q - log p].
double kl_mc(const DiagonalGaussian& q, const DiagonalGaussian& p, int n, std::uint64_t seed) {
    RngStream rng(seed);
    double acc = 0.0;
    for (int k = 0; k < n; ++k) {
        double lq = 0.0, lp = 0.0;
        for (int i = 0; i < q.dim(); ++i) {
            const double sq = std::exp(q.log_std[i]), sp = std::exp(p.log_std[i]);
            const double x = q.mean[i] + sq * rng.gaussian();
            lq += -0.5 * std::log(kTwoPi * sq * sq) - (x - q.mean[i]) * (x - q.mean[i]) / (2 * sq * sq);
            lp += -0.5 * std::log(kTwoPi * sp * sp) - (x - p.mean[i]) * (x - p.mean[i]) / (2 * sp * sp);
        }
        acc += lq - lp;
    }
    return acc / n;
}

}  // namespace

TEST_CASE("kl: identity, mean shift, variance ratio against the closed form") {
    auto q = make_g({0.3, -0.7}, {0.1, -0.5});
    REQUIRE(kl_diag_gaussian(q, q) == Catch::Approx(0.0).margin(1e-15));

    REQUIRE(kl_diag_gaussian(make_g({1.0}, {0.0}), make_g({0.0}, {0.0})) == Catch::Approx(0.5).margin(1e-12));

    // N(0, 2^2) vs N(0, 1): log(1/2) + 4/2 - 1/2 = 0.806853...
    const double expected = std::log(0.5) + 2.0 - 0.5;
    REQUIRE(expected == Catch::Approx(0.80685).margin(5e-6));
    REQUIRE(kl_diag_gaussian(make_g({0.0}, {std::log(2.0)}), make_g({0.0}, {0.0})) ==
            Catch::Approx(expected).margin(1e-12));
}

TEST_CASE("kl: closed form matches Monte-Carlo on random pairs") {
    RngStream r(7);
    for (int rep = 0; rep < 3; ++rep) {
        auto q = make_g({r.uniform(-1, 1), r.uniform(-1, 1)}, {r.uniform(-0.7, 0.3), r.uniform(-0.7, 0.3)});
        auto p = make_g({r.uniform(-1, 1), r.uniform(-1, 1)}, {r.uniform(-0.7, 0.3), r.uniform(-0.7, 0.3)});
        const double cf = kl_diag_gaussian(q, p);
        const double mc = kl_mc(q, p, 200000, 1000 + rep);
        REQUIRE(mc == Catch::Approx(cf).margin(std::max(0.02, 0.02 * std::abs(cf))));
    }
}

TEST_CASE("kl: non-negative over random pairs, zero only at equality") {
    RngStream r(8);
    for (int rep = 0; rep < 10000; ++rep) {
        auto q = make_g({r.uniform(-2, 2), r.uniform(-2, 2)}, {r.uniform(-2, 1), r.uniform(-2, 1)});
        auto p = make_g({r.uniform(-2, 2), r.uniform(-2, 2)}, {r.uniform(-2, 1), r.uniform(-2, 1)});
        const double kl = kl_diag_gaussian(q, p);
        REQUIRE(kl >= -1e-12);
        const double dist = (q.mean - p.mean).norm() + (q.log_std - p.log_std).norm();
        if (kl < 1e-12) REQUIRE(dist < 1e-5);
    }
}

TEST_CASE("sample: degenerate std, reproducibility, Monte-Carlo moments") {
    auto tight = make_g({0.4, -0.2}, {-30.0, -30.0});
    RngStream r(3);
    auto s = sample(tight, r);
    REQUIRE(s[0] == Catch::Approx(0.4).margin(1e-12));
    REQUIRE(s[1] == Catch::Approx(-0.2).margin(1e-12));

    RngStream r1(5), r2(5);
    auto g = make_g({0.0, 0.0}, {0.0, 0.0});
    REQUIRE(sample(g, r1) == sample(g, r2));

    RngStream r3(11);
    double mean = 0.0, var = 0.0;
    const int n = 100000;
    for (int i = 0; i < n; ++i) {
        auto v = sample(make_g({0.0}, {0.0}), r3);
        mean += v[0];
        var += v[0] * v[0];
    }
    REQUIRE(std::abs(mean / n) < 0.02);
    REQUIRE(std::abs(var / n - 1.0) < 0.02);
}

TEST_CASE("sample: reparameterization passes unit gradient in the mean") {
    // d/dmu of a sample with frozen noise is exactly 1
    const double h = 1e-3;
    RngStream ra(21), rb(21);
    auto up = sample(make_g({0.5 + h}, {-0.3}), ra);
    auto dn = sample(make_g({0.5 - h}, {-0.3}), rb);
    REQUIRE((up[0] - dn[0]) / (2 * h) == Catch::Approx(1.0).margin(1e-12));
}

TEST_CASE("gaussian_image_loglik: analytic anchors and loop oracle") {
    Image a(16, 16), b(16, 16);
    RngStream r(9);
    for (std::size_t i = 0; i < a.pixels.size(); ++i) a.pixels[i] = static_cast<float>(r.uniform01());
    b = a;
    const double P = static_cast<double>(a.pixels.size());
    REQUIRE(gaussian_image_loglik(a, b, 1.0) == Catch::Approx(-P / 2.0 * std::log(kTwoPi)).margin(1e-9));

    // one pixel off by exactly std drops the log-likelihood by 1/2
    Image c = a;
    c.pixels[37] += 0.25f;
    const double base = gaussian_image_loglik(a, a, 0.25);
    REQUIRE(gaussian_image_loglik(a, c, 0.25) == Catch::Approx(base - 0.5).margin(1e-6));

    // random pair vs an independent per-pixel summation in reversed order
    Image d(16, 16);
    for (std::size_t i = 0; i < d.pixels.size(); ++i) d.pixels[i] = static_cast<float>(r.uniform01());
    const double sd = 0.1;
    double quad = 0.0;
    for (std::size_t i = d.pixels.size(); i-- > 0;) {
        const double diff = static_cast<double>(a.pixels[i]) - static_cast<double>(d.pixels[i]);
        quad += diff * diff;
    }
    const double oracle = -P / 2.0 * std::log(kTwoPi * sd * sd) - quad / (2 * sd * sd);
    const double got = gaussian_image_loglik(a, d, sd);
    REQUIRE(std::abs(got - oracle) / std::abs(oracle) < 1e-9);

    Image e(8, 8);
    REQUIRE_THROWS_AS(gaussian_image_loglik(a, e, 1.0), DimensionError);
}

TEST_CASE("velocity_from_positions") {
    Eigen::Vector2d v = velocity_from_positions({1.0, 0.0}, {0.0, 0.0}, 0.5);
    REQUIRE(v[0] == 2.0);
    REQUIRE(v[1] == 0.0);
    REQUIRE(velocity_from_positions({0.3, 0.2}, {0.3, 0.2}, 0.5).norm() == 0.0);
    // linearity
    Eigen::Vector2d a{0.2, -0.1}, b{0.05, 0.3};
    Eigen::Vector2d lhs = velocity_from_positions(3.0 * a, 3.0 * b, 0.5);
    Eigen::Vector2d rhs = 3.0 * velocity_from_positions(a, b, 0.5);
    REQUIRE((lhs - rhs).norm() < 1e-15);
}

TEST_CASE("transition_simplified") {
    Eigen::Vector2d x{0.1, 0.2}, u{0.01, -0.01};
    auto g = transition_simplified(x, u, 0.5, 0.001);
    REQUIRE(g.mean[0] == Catch::Approx(0.105).margin(1e-15));
    REQUIRE(g.mean[1] == Catch::Approx(0.195).margin(1e-15));
    REQUIRE(g.log_std[0] == Catch::Approx(std::log(0.001)).margin(1e-15));

    auto id = transition_simplified(x, Eigen::Vector2d::Zero(), 0.5, 0.001);
    REQUIRE(id.mean == x);
}

TEST_CASE("transition_newtonian: forced coefficients reduce to the double integrator") {
    Eigen::Vector2d x{0.3, -0.2}, v{0.0, 0.0}, u{0.01, 0.0};
    Eigen::Vector2d A = Eigen::Vector2d::Zero(), B = Eigen::Vector2d::Zero(), C = Eigen::Vector2d::Ones();
    auto st = newtonian_integrate(x, v, u, A, B, C, 0.5, 0.001);
    REQUIRE(st.v_next[0] == Catch::Approx(0.005).margin(1e-15));
    REQUIRE(st.v_next[1] == 0.0);
    REQUIRE(st.x_next.mean[0] == Catch::Approx(0.3 + 0.0025).margin(1e-15));

    // equilibrium: u = 0, v = 0, A = 0
    auto eq = newtonian_integrate(x, Eigen::Vector2d::Zero(), Eigen::Vector2d::Zero(), A, B, C, 0.5, 0.001);
    REQUIRE(eq.v_next.norm() == 0.0);
    REQUIRE(eq.x_next.mean == x);
}

TEST_CASE("transition_newtonian: (0,0,1) equals simplified composed with velocity integration") {
    RngStream r(13);
    for (int rep = 0; rep < 100; ++rep) {
        Eigen::Vector2d x{r.uniform(-1, 1), r.uniform(-1, 1)};
        Eigen::Vector2d v{r.uniform(-0.1, 0.1), r.uniform(-0.1, 0.1)};
        Eigen::Vector2d u{r.uniform(-0.01, 0.01), r.uniform(-0.01, 0.01)};
        const double dt = 0.5, sx = 0.001;
        auto st = newtonian_integrate(x, v, u, Eigen::Vector2d::Zero(), Eigen::Vector2d::Zero(),
                                      Eigen::Vector2d::Ones(), dt, sx);
        // hand-composed: v' = v + dt u; x' mean = x + dt v'
        Eigen::Vector2d v_ref = v + dt * u;
        auto ref = transition_simplified(x, v_ref, dt, sx);  // x + dt * v'
        REQUIRE((st.v_next - v_ref).norm() < 1e-12);
        REQUIRE((st.x_next.mean - ref.mean).norm() < 1e-12);
        REQUIRE((st.x_next.log_std - ref.log_std).norm() < 1e-12);
    }
}

TEST_CASE("transition_newtonian: learned parameterization forces B < 0 < C") {
    auto m = init_model<float>(ModelHyper{}, 31);
    RngStream r(14);
    for (int rep = 0; rep < 50; ++rep) {
        Eigen::Vector2d x{r.uniform(-1, 1), r.uniform(-1, 1)};
        Eigen::Vector2d v{r.uniform(-1, 1), r.uniform(-1, 1)};
        Eigen::Vector2d u{r.uniform(-1, 1), r.uniform(-1, 1)};
        MlpCache<float> c;
        c.x.resize(6);
        for (int i = 0; i < 2; ++i) {
            c.x[i] = static_cast<float>(x[i]);
            c.x[2 + i] = static_cast<float>(v[i]);
            c.x[4 + i] = static_cast<float>(u[i]);
        }
        m.newton_f.forward(m.store, c);
        for (int i = 0; i < 2; ++i) {
            REQUIRE(-std::exp(static_cast<double>(c.out[2 + i])) < 0.0);
            REQUIRE(std::exp(static_cast<double>(c.out[4 + i])) > 0.0);
        }
    }
}

TEST_CASE("encode: deterministic, finite, and rejects wrong shapes") {
    auto m = init_model<float>(ModelHyper{}, 1);
    sim::SimConfig cfg = sim::preset("wide");
    auto s = sim::make_canonical(cfg, 1, {0.002, -0.001}, 0.004);
    Image img = sim::render(cfg, s, sim::Camera::Hand);

    auto a = encode(m, img, Head::Hand);
    auto b = encode(m, img, Head::Hand);
    REQUIRE(a.mean == b.mean);
    REQUIRE(a.log_std == b.log_std);
    REQUIRE(a.mean.allFinite());
    REQUIRE(a.log_std.allFinite());
    REQUIRE(a.log_std.maxCoeff() <= 2.0);
    REQUIRE(a.log_std.minCoeff() >= -6.0);

    Image bad(32, 32);
    REQUIRE_THROWS_AS(encode(m, bad, Head::Hand), DimensionError);
}

TEST_CASE("encode: output difference bounded by the layer-norm Lipschitz product") {
    auto m = init_model<double>(ModelHyper{}, 2);
    RngStream r(15);
    Image img(64, 64);
    for (auto& v : img.pixels) v = static_cast<float>(r.uniform01());
    Image img2 = img;
    img2.pixels[1000] += 1.0f / 255.0f;

    // bound: product of ||W||_F per layer; stride-2 k4 convs replicate each
    // input at most 4 times, giving an extra factor 2 per conv layer
    double bound = 1.0;
    for (const auto& t : m.store.tensors()) {
        if (t.name.rfind("hand_encoder.", 0) != 0 || t.name.find(".w") == std::string::npos) continue;
        double fro = 0.0;
        const double* p = m.store.data().data() + t.offset;
        for (std::size_t i = 0; i < t.size(); ++i) fro += p[i] * p[i];
        fro = std::sqrt(fro);
        bound *= t.name.find("conv") != std::string::npos ? 2.0 * fro : fro;
    }
    // the two heads act in parallel on the same features; combine in quadrature
    auto head_fro = [&](const char* n) {
        for (const auto& t : m.store.tensors())
            if (t.name == n) {
                double fro = 0.0;
                const double* p = m.store.data().data() + t.offset;
                for (std::size_t i = 0; i < t.size(); ++i) fro += p[i] * p[i];
                return std::sqrt(fro);
            }
        return 0.0;
    };
    const double wm = head_fro("hand_encoder.mean.w"), ws = head_fro("hand_encoder.logstd.w");
    // bound currently includes both head norms multiplied; rebuild: drop them
    bound /= (wm * ws);
    bound *= std::sqrt(wm * wm + ws * ws);

    auto a = encode(m, img, Head::Hand);
    auto b = encode(m, img2, Head::Hand);
    const double dout = std::sqrt((a.mean - b.mean).squaredNorm() + (a.log_std - b.log_std).squaredNorm());
    REQUIRE(dout <= bound * (1.0 / 255.0) + 1e-12);
}

TEST_CASE("decode: deterministic with outputs inside [0,1]") {
    auto m = init_model<float>(ModelHyper{}, 4);
    RngStream r(16);
    for (int rep = 0; rep < 5; ++rep) {
        Eigen::VectorXd z(2);
        z << 3.0 * r.gaussian(), 3.0 * r.gaussian();
        Image img = decode(m, z, Head::Hand);
        Image img2 = decode(m, z, Head::Hand);
        REQUIRE(img.same_bits(img2));
        for (float v : img.pixels) {
            REQUIRE(v >= 0.0f);
            REQUIRE(v <= 1.0f);
        }
    }
    REQUIRE_THROWS_AS(decode(m, Eigen::VectorXd::Zero(3), Head::Hand), DimensionError);
}

TEST_CASE("goal_from_inhand: deterministic given the rng seed, finite at init") {
    auto m = init_model<float>(ModelHyper{}, 6);
    sim::SimConfig cfg = sim::preset("wide");
    auto s = sim::make_canonical(cfg, 1, {0.0, 0.0}, 0.006);
    Image iz = sim::render(cfg, s, sim::Camera::InHand);

    RngStream r1(77), r2(77);
    auto [z1, g1] = goal_from_inhand(m, iz, r1);
    auto [z2, g2] = goal_from_inhand(m, iz, r2);
    REQUIRE(z1 == z2);
    REQUIRE(g1.mean == g2.mean);
    REQUIRE(g1.log_std == g2.log_std);
    REQUIRE(g1.mean.allFinite());

    auto [zm, gm] = goal_mean_from_inhand(m, iz);
    REQUIRE(zm.allFinite());
    REQUIRE(gm.mean.allFinite());
}

TEST_CASE("checkpoint: round trip preserves every weight bit, hash mismatch rejected") {
    auto m = init_model<float>(ModelHyper{}, 123);
    auto path = std::filesystem::temp_directory_path() / "ihvs_ckpt_test.ihvsm";
    save_checkpoint(m, 42, path.string());
    auto [loaded, step] = load_checkpoint(path.string());
    REQUIRE(step == 42);
    REQUIRE(loaded.store.data() == m.store.data());
    REQUIRE(arch_hash(loaded.hyper) == arch_hash(m.hyper));

    // craft a header with a wrong hash
    nlohmann::json header = {{"arch_hash", arch_hash(m.hyper) + 1},
                             {"hyper", hyper_to_json(m.hyper)},
                             {"training_step", 0},
                             {"tensors", nlohmann::json::array()}};
    auto bad = std::filesystem::temp_directory_path() / "ihvs_ckpt_bad.ihvsm";
    {
        BlobWriter w(bad.string(), kCheckpointMagic, kCheckpointVersion, header.dump());
        w.write_blob(m.store.data().data(), m.store.data().size() * sizeof(float));
        w.close();
    }
    REQUIRE_THROWS_WITH(load_checkpoint(bad.string()), Catch::Matchers::ContainsSubstring("hash"));
    std::filesystem::remove(path);
    std::filesystem::remove(bad);
}
