#pragma once

#include <Eigen/Dense>
#include <array>
#include <cmath>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "ihvs/common.hpp"
#include "ihvs/gaussian.hpp"
#include "ihvs/image.hpp"
#include "ihvs/nn.hpp"
#include "ihvs/rng.hpp"
#include "ihvs/serialize.hpp"

namespace ihvs::model {

enum class Head { Hand, InHand, Goal };
enum class TransitionVariant { Simplified, Newtonian };

inline constexpr double kLogStdLo = -6.0;
inline constexpr double kLogStdHi = 2.0;

/// Fixed scales and structural constants of the model. These are not
/// trainable; they live in the checkpoint header.
struct ModelHyper {
    int latent_dim = 2;       // equals the action dimension
    int image_hw = 64;
    double sigma_x = 0.001;   // transition std, metres
    double sigma_g = 0.05;    // goal-position regularization std, metres
    double decoder_std = 0.1; // fixed pixel-likelihood std
    double dt = 0.5;
    TransitionVariant variant = TransitionVariant::Simplified;
};

inline const char* variant_name(TransitionVariant v) {
    return v == TransitionVariant::Simplified ? "simplified" : "newtonian";
}

inline TransitionVariant variant_from_name(const std::string& s) {
    if (s == "simplified") return TransitionVariant::Simplified;
    if (s == "newtonian") return TransitionVariant::Newtonian;
    throw ConfigError("unknown transition_variant \"" + s + "\"");
}

namespace arch {
inline constexpr std::array<int, 5> kChannels = {3, 16, 32, 64, 128};
inline constexpr int kHidden = 16;
inline constexpr int kFlat = 128 * 4 * 4;
}  // namespace arch

template <class T>
struct Scratch {
    nn::AVec<T> col, dcol, da, db_buf;
};

template <class T>
void image_to_chw(const Image& img, nn::AVec<T>& out) {
    const int hw = img.width;
    out.resize(static_cast<std::size_t>(3) * hw * hw);
    for (int y = 0; y < hw; ++y)
        for (int x = 0; x < hw; ++x)
            for (int c = 0; c < 3; ++c)
                out[(static_cast<std::size_t>(c) * hw + y) * hw + x] = static_cast<T>(img.at(y, x, c));
}

template <class T>
Image chw_to_image(const nn::AVec<T>& chw, int hw) {
    Image img(hw, hw);
    for (int y = 0; y < hw; ++y)
        for (int x = 0; x < hw; ++x)
            for (int c = 0; c < 3; ++c) {
                double v = static_cast<double>(chw[(static_cast<std::size_t>(c) * hw + y) * hw + x]);
                img.at(y, x, c) = static_cast<float>(std::clamp(v, 0.0, 1.0));
            }
    return img;
}

// --- encoder -----------------------------------------------------------------

template <class T>
struct EncCache {
    nn::AVec<T> x0;
    nn::AVec<T> pre1, act1, pre2, act2, pre3, act3, pre4, act4;
    nn::AVec<T> pre_f1, act_f1, pre_f2, act_f2;
    nn::AVec<T> mean, ls_raw, ls;
};

/// Conv stack (stride 2, LeakyReLU) -> two 16-unit hidden layers -> mean and
/// clamped log-std heads.
template <class T>
struct Encoder {
    int w1, b1, w2, b2, w3, b3, w4, b4;
    int wf1, bf1, wf2, bf2, wm, bm, ws, bs;
    int latent = 2;

    void register_params(nn::ParamStore<T>& ps, const std::string& g, int latent_dim) {
        using namespace arch;
        latent = latent_dim;
        w1 = ps.add(g + ".conv1.w", kChannels[1], kChannels[0] * 16);
        b1 = ps.add(g + ".conv1.b", 1, kChannels[1]);
        w2 = ps.add(g + ".conv2.w", kChannels[2], kChannels[1] * 16);
        b2 = ps.add(g + ".conv2.b", 1, kChannels[2]);
        w3 = ps.add(g + ".conv3.w", kChannels[3], kChannels[2] * 16);
        b3 = ps.add(g + ".conv3.b", 1, kChannels[3]);
        w4 = ps.add(g + ".conv4.w", kChannels[4], kChannels[3] * 16);
        b4 = ps.add(g + ".conv4.b", 1, kChannels[4]);
        wf1 = ps.add(g + ".fc1.w", kHidden, kFlat);
        bf1 = ps.add(g + ".fc1.b", 1, kHidden);
        wf2 = ps.add(g + ".fc2.w", kHidden, kHidden);
        bf2 = ps.add(g + ".fc2.b", 1, kHidden);
        wm = ps.add(g + ".mean.w", latent, kHidden);
        bm = ps.add(g + ".mean.b", 1, latent);
        ws = ps.add(g + ".logstd.w", latent, kHidden);
        bs = ps.add(g + ".logstd.b", 1, latent);
    }

    /// c.x0 must hold the CHW input; fills mean/ls (log-std after clamping).
    void forward(const nn::ParamStore<T>& ps, EncCache<T>& c, Scratch<T>& s,
                 nn::PatternHash* pat = nullptr) const {
        using namespace arch;
        nn::conv2d_fw(c.x0.data(), kChannels[0], 64, 64, ps.mat(w1), ps.ptr(b1), kChannels[1], c.pre1, s.col);
        nn::leaky_relu_fw(c.pre1, c.act1, pat);
        nn::conv2d_fw(c.act1.data(), kChannels[1], 32, 32, ps.mat(w2), ps.ptr(b2), kChannels[2], c.pre2, s.col);
        nn::leaky_relu_fw(c.pre2, c.act2, pat);
        nn::conv2d_fw(c.act2.data(), kChannels[2], 16, 16, ps.mat(w3), ps.ptr(b3), kChannels[3], c.pre3, s.col);
        nn::leaky_relu_fw(c.pre3, c.act3, pat);
        nn::conv2d_fw(c.act3.data(), kChannels[3], 8, 8, ps.mat(w4), ps.ptr(b4), kChannels[4], c.pre4, s.col);
        nn::leaky_relu_fw(c.pre4, c.act4, pat);
        c.pre_f1.resize(kHidden);
        nn::dense_fw(c.act4.data(), kFlat, ps.mat(wf1), ps.ptr(bf1), kHidden, c.pre_f1.data());
        nn::leaky_relu_fw(c.pre_f1, c.act_f1, pat);
        c.pre_f2.resize(kHidden);
        nn::dense_fw(c.act_f1.data(), kHidden, ps.mat(wf2), ps.ptr(bf2), kHidden, c.pre_f2.data());
        nn::leaky_relu_fw(c.pre_f2, c.act_f2, pat);
        c.mean.resize(latent);
        c.ls_raw.resize(latent);
        c.ls.resize(latent);
        nn::dense_fw(c.act_f2.data(), kHidden, ps.mat(wm), ps.ptr(bm), latent, c.mean.data());
        nn::dense_fw(c.act_f2.data(), kHidden, ps.mat(ws), ps.ptr(bs), latent, c.ls_raw.data());
        for (int i = 0; i < latent; ++i) {
            const bool lo = c.ls_raw[i] < T(kLogStdLo), hi = c.ls_raw[i] > T(kLogStdHi);
            c.ls[i] = lo ? T(kLogStdLo) : (hi ? T(kLogStdHi) : c.ls_raw[i]);
            if (pat) {
                pat->fold(lo);
                pat->fold(hi);
            }
        }
    }

    void backward(const nn::ParamStore<T>& ps, const EncCache<T>& c, const T* dmean, const T* dls,
                  nn::ParamStore<T>& gr, Scratch<T>& s) const {
        using namespace arch;
        nn::AVec<T> dls_raw(latent);
        for (int i = 0; i < latent; ++i)
            dls_raw[i] = (c.ls_raw[i] < T(kLogStdLo) || c.ls_raw[i] > T(kLogStdHi)) ? T(0) : dls[i];

        nn::AVec<T> d_actf2(kHidden, T(0));
        nn::dense_bw(c.act_f2.data(), kHidden, ps.mat(wm), latent, dmean, gr.mat(wm), gr.ptr(bm), d_actf2.data());
        nn::dense_bw(c.act_f2.data(), kHidden, ps.mat(ws), latent, dls_raw.data(), gr.mat(ws), gr.ptr(bs), d_actf2.data());
        nn::AVec<T> d_pref2;
        nn::leaky_relu_bw(c.pre_f2, d_actf2, d_pref2);
        nn::AVec<T> d_actf1(kHidden, T(0));
        nn::dense_bw(c.act_f1.data(), kHidden, ps.mat(wf2), kHidden, d_pref2.data(), gr.mat(wf2), gr.ptr(bf2), d_actf1.data());
        nn::AVec<T> d_pref1;
        nn::leaky_relu_bw(c.pre_f1, d_actf1, d_pref1);
        nn::AVec<T> d_act4(kFlat, T(0));
        nn::dense_bw(c.act4.data(), kFlat, ps.mat(wf1), kHidden, d_pref1.data(), gr.mat(wf1), gr.ptr(bf1), d_act4.data());

        nn::AVec<T> d_pre4;
        nn::leaky_relu_bw(c.pre4, d_act4, d_pre4);
        nn::AVec<T> d_act3(c.act3.size(), T(0));
        nn::conv2d_bw(c.act3.data(), kChannels[3], 8, 8, ps.mat(w4), kChannels[4], d_pre4, gr.mat(w4), gr.ptr(b4), d_act3.data(), s.col, s.dcol);
        nn::AVec<T> d_pre3;
        nn::leaky_relu_bw(c.pre3, d_act3, d_pre3);
        nn::AVec<T> d_act2(c.act2.size(), T(0));
        nn::conv2d_bw(c.act2.data(), kChannels[2], 16, 16, ps.mat(w3), kChannels[3], d_pre3, gr.mat(w3), gr.ptr(b3), d_act2.data(), s.col, s.dcol);
        nn::AVec<T> d_pre2;
        nn::leaky_relu_bw(c.pre2, d_act2, d_pre2);
        nn::AVec<T> d_act1(c.act1.size(), T(0));
        nn::conv2d_bw(c.act1.data(), kChannels[1], 32, 32, ps.mat(w2), kChannels[2], d_pre2, gr.mat(w2), gr.ptr(b2), d_act1.data(), s.col, s.dcol);
        nn::AVec<T> d_pre1;
        nn::leaky_relu_bw(c.pre1, d_act1, d_pre1);
        nn::conv2d_bw(c.x0.data(), kChannels[0], 64, 64, ps.mat(w1), kChannels[1], d_pre1, gr.mat(w1), gr.ptr(b1), static_cast<T*>(nullptr), s.col, s.dcol);
    }
};

// --- decoder -----------------------------------------------------------------

template <class T>
struct DecCache {
    nn::AVec<T> z;
    nn::AVec<T> pre_d1, act_d1, pre_d2, act_d2;
    nn::AVec<T> pre1, act1, pre2, act2, pre3, act3, pre4, out;
};

/// Mirror of the encoder: dense expansion, transposed convs, sigmoid output.
template <class T>
struct Decoder {
    int wd1, bd1, wd2, bd2;
    int w1, b1, w2, b2, w3, b3, w4, b4;
    int latent = 2;

    void register_params(nn::ParamStore<T>& ps, const std::string& g, int latent_dim) {
        using namespace arch;
        latent = latent_dim;
        wd1 = ps.add(g + ".fc1.w", kHidden, latent);
        bd1 = ps.add(g + ".fc1.b", 1, kHidden);
        wd2 = ps.add(g + ".fc2.w", kFlat, kHidden);
        bd2 = ps.add(g + ".fc2.b", 1, kFlat);
        w1 = ps.add(g + ".deconv1.w", kChannels[4], kChannels[3] * 16);
        b1 = ps.add(g + ".deconv1.b", 1, kChannels[3]);
        w2 = ps.add(g + ".deconv2.w", kChannels[3], kChannels[2] * 16);
        b2 = ps.add(g + ".deconv2.b", 1, kChannels[2]);
        w3 = ps.add(g + ".deconv3.w", kChannels[2], kChannels[1] * 16);
        b3 = ps.add(g + ".deconv3.b", 1, kChannels[1]);
        w4 = ps.add(g + ".deconv4.w", kChannels[1], kChannels[0] * 16);
        b4 = ps.add(g + ".deconv4.b", 1, kChannels[0]);
    }

    void forward(const nn::ParamStore<T>& ps, DecCache<T>& c, Scratch<T>& s,
                 nn::PatternHash* pat = nullptr) const {
        using namespace arch;
        c.pre_d1.resize(kHidden);
        nn::dense_fw(c.z.data(), latent, ps.mat(wd1), ps.ptr(bd1), kHidden, c.pre_d1.data());
        nn::leaky_relu_fw(c.pre_d1, c.act_d1, pat);
        c.pre_d2.resize(kFlat);
        nn::dense_fw(c.act_d1.data(), kHidden, ps.mat(wd2), ps.ptr(bd2), kFlat, c.pre_d2.data());
        nn::leaky_relu_fw(c.pre_d2, c.act_d2, pat);
        nn::deconv2d_fw(c.act_d2.data(), kChannels[4], 4, 4, ps.mat(w1), ps.ptr(b1), kChannels[3], c.pre1, s.col);
        nn::leaky_relu_fw(c.pre1, c.act1, pat);
        nn::deconv2d_fw(c.act1.data(), kChannels[3], 8, 8, ps.mat(w2), ps.ptr(b2), kChannels[2], c.pre2, s.col);
        nn::leaky_relu_fw(c.pre2, c.act2, pat);
        nn::deconv2d_fw(c.act2.data(), kChannels[2], 16, 16, ps.mat(w3), ps.ptr(b3), kChannels[1], c.pre3, s.col);
        nn::leaky_relu_fw(c.pre3, c.act3, pat);
        nn::deconv2d_fw(c.act3.data(), kChannels[1], 32, 32, ps.mat(w4), ps.ptr(b4), kChannels[0], c.pre4, s.col);
        nn::sigmoid_fw(c.pre4, c.out);
    }

    /// dout is d(total)/d(sigmoid output); returns d(total)/d(z) in dz (+=).
    void backward(const nn::ParamStore<T>& ps, const DecCache<T>& c, const nn::AVec<T>& dout,
                  T* dz, nn::ParamStore<T>& gr, Scratch<T>& s) const {
        using namespace arch;
        nn::AVec<T> d_pre4;
        nn::sigmoid_bw(c.out, dout, d_pre4);
        nn::AVec<T> d_act3(c.act3.size(), T(0));
        nn::deconv2d_bw(c.act3.data(), kChannels[1], 32, 32, ps.mat(w4), kChannels[0], d_pre4, gr.mat(w4), gr.ptr(b4), d_act3.data(), s.dcol);
        nn::AVec<T> d_pre3;
        nn::leaky_relu_bw(c.pre3, d_act3, d_pre3);
        nn::AVec<T> d_act2(c.act2.size(), T(0));
        nn::deconv2d_bw(c.act2.data(), kChannels[2], 16, 16, ps.mat(w3), kChannels[1], d_pre3, gr.mat(w3), gr.ptr(b3), d_act2.data(), s.dcol);
        nn::AVec<T> d_pre2;
        nn::leaky_relu_bw(c.pre2, d_act2, d_pre2);
        nn::AVec<T> d_act1(c.act1.size(), T(0));
        nn::deconv2d_bw(c.act1.data(), kChannels[3], 8, 8, ps.mat(w2), kChannels[2], d_pre2, gr.mat(w2), gr.ptr(b2), d_act1.data(), s.dcol);
        nn::AVec<T> d_pre1;
        nn::leaky_relu_bw(c.pre1, d_act1, d_pre1);
        nn::AVec<T> d_actd2(kFlat, T(0));
        nn::deconv2d_bw(c.act_d2.data(), kChannels[4], 4, 4, ps.mat(w1), kChannels[3], d_pre1, gr.mat(w1), gr.ptr(b1), d_actd2.data(), s.dcol);
        nn::AVec<T> d_pred2;
        nn::leaky_relu_bw(c.pre_d2, d_actd2, d_pred2);
        nn::AVec<T> d_actd1(kHidden, T(0));
        nn::dense_bw(c.act_d1.data(), kHidden, ps.mat(wd2), kFlat, d_pred2.data(), gr.mat(wd2), gr.ptr(bd2), d_actd1.data());
        nn::AVec<T> d_pred1;
        nn::leaky_relu_bw(c.pre_d1, d_actd1, d_pred1);
        nn::dense_bw(c.z.data(), latent, ps.mat(wd1), kHidden, d_pred1.data(), gr.mat(wd1), gr.ptr(bd1), dz);
    }
};

// --- small MLPs ---------------------------------------------------------------

template <class T>
struct MlpCache {
    nn::AVec<T> x, pre1, act1, pre2, act2, out_raw, out;
};

/// Two 16-unit LeakyReLU hidden layers and a linear output; when
/// `gaussian_out` the output is split into mean and clamped log-std halves.
template <class T>
struct Mlp {
    int w1, b1, w2, b2, wo, bo;
    int in = 0, out = 0;
    bool gaussian_out = false;

    void register_params(nn::ParamStore<T>& ps, const std::string& g, int in_dim, int out_dim,
                         bool gaussian) {
        using namespace arch;
        in = in_dim;
        out = out_dim;
        gaussian_out = gaussian;
        w1 = ps.add(g + ".fc1.w", kHidden, in);
        b1 = ps.add(g + ".fc1.b", 1, kHidden);
        w2 = ps.add(g + ".fc2.w", kHidden, kHidden);
        b2 = ps.add(g + ".fc2.b", 1, kHidden);
        wo = ps.add(g + ".out.w", out, kHidden);
        bo = ps.add(g + ".out.b", 1, out);
    }

    void forward(const nn::ParamStore<T>& ps, MlpCache<T>& c, nn::PatternHash* pat = nullptr) const {
        using namespace arch;
        c.pre1.resize(kHidden);
        nn::dense_fw(c.x.data(), in, ps.mat(w1), ps.ptr(b1), kHidden, c.pre1.data());
        nn::leaky_relu_fw(c.pre1, c.act1, pat);
        c.pre2.resize(kHidden);
        nn::dense_fw(c.act1.data(), kHidden, ps.mat(w2), ps.ptr(b2), kHidden, c.pre2.data());
        nn::leaky_relu_fw(c.pre2, c.act2, pat);
        c.out_raw.resize(out);
        nn::dense_fw(c.act2.data(), kHidden, ps.mat(wo), ps.ptr(bo), out, c.out_raw.data());
        c.out = c.out_raw;
        if (gaussian_out) {
            const int d = out / 2;
            for (int i = d; i < out; ++i) {
                const bool lo = c.out_raw[i] < T(kLogStdLo), hi = c.out_raw[i] > T(kLogStdHi);
                c.out[i] = lo ? T(kLogStdLo) : (hi ? T(kLogStdHi) : c.out_raw[i]);
                if (pat) {
                    pat->fold(lo);
                    pat->fold(hi);
                }
            }
        }
    }

    void backward(const nn::ParamStore<T>& ps, const MlpCache<T>& c, const T* dout, T* dx,
                  nn::ParamStore<T>& gr) const {
        using namespace arch;
        nn::AVec<T> dor(dout, dout + out);
        if (gaussian_out)
            for (int i = out / 2; i < out; ++i)
                if (c.out_raw[i] < T(kLogStdLo) || c.out_raw[i] > T(kLogStdHi)) dor[i] = T(0);
        nn::AVec<T> d_act2(kHidden, T(0));
        nn::dense_bw(c.act2.data(), kHidden, ps.mat(wo), out, dor.data(), gr.mat(wo), gr.ptr(bo), d_act2.data());
        nn::AVec<T> d_pre2;
        nn::leaky_relu_bw(c.pre2, d_act2, d_pre2);
        nn::AVec<T> d_act1(kHidden, T(0));
        nn::dense_bw(c.act1.data(), kHidden, ps.mat(w2), kHidden, d_pre2.data(), gr.mat(w2), gr.ptr(b2), d_act1.data());
        nn::AVec<T> d_pre1;
        nn::leaky_relu_bw(c.pre1, d_act1, d_pre1);
        nn::dense_bw(c.x.data(), in, ps.mat(w1), kHidden, d_pre1.data(), gr.mat(w1), gr.ptr(b1), dx);
    }
};

// --- the whole model -----------------------------------------------------------

struct GroupRange {
    std::string name;
    std::size_t begin = 0, end = 0;
};

template <class T = float>
struct ModelParams {
    ModelHyper hyper;
    nn::ParamStore<T> store;
    Encoder<T> hand_encoder, inhand_encoder;
    Decoder<T> hand_decoder, inhand_decoder, goal_decoder;
    Mlp<T> goal_head, newton_f;
    std::vector<GroupRange> groups;

    template <class U>
    ModelParams<U> cast() const {
        ModelParams<U> out;
        out.hyper = hyper;
        out.build_layout();
        for (std::size_t i = 0; i < store.data().size(); ++i)
            out.store.data()[i] = static_cast<U>(store.data()[i]);
        return out;
    }

    void build_layout() {
        const int d = hyper.latent_dim;
        auto group = [&](const std::string& name, auto&& reg) {
            std::size_t begin = store.size();
            reg();
            groups.push_back({name, begin, store.size()});
        };
        group("hand_encoder", [&] { hand_encoder.register_params(store, "hand_encoder", d); });
        group("inhand_encoder", [&] { inhand_encoder.register_params(store, "inhand_encoder", d); });
        group("hand_decoder", [&] { hand_decoder.register_params(store, "hand_decoder", d); });
        group("inhand_decoder", [&] { inhand_decoder.register_params(store, "inhand_decoder", d); });
        group("goal_decoder", [&] { goal_decoder.register_params(store, "goal_decoder", d); });
        group("goal_head", [&] { goal_head.register_params(store, "goal_head", d, 2 * d, true); });
        group("newton_f", [&] { newton_f.register_params(store, "newton_f", 3 * d, 3 * d, false); });
        store.allocate();
    }
};

inline std::string arch_descriptor(const ModelHyper& h) {
    std::ostringstream os;
    os << "ihvs-arch-v1|latent=" << h.latent_dim << "|img=" << h.image_hw << "|conv=16,32,64,128|hidden=16";
    return os.str();
}

inline std::uint64_t arch_hash(const ModelHyper& h) { return fnv1a(arch_descriptor(h)); }

/// Fan-in scaled uniform init, drawn tensor-by-tensor in registration order.
template <class T>
ModelParams<T> init_model(const ModelHyper& hyper, std::uint64_t seed) {
    if (hyper.latent_dim != 2) throw ConfigError("latent_dim is fixed at 2 (the action dimension)");
    if (hyper.image_hw != 64) throw ConfigError("the encoder stack expects 64x64 inputs");
    if (!(hyper.sigma_x > 0.0) || !(hyper.sigma_g > 0.0) || !(hyper.decoder_std > 0.0))
        throw ConfigError("sigma_x, sigma_g and decoder_std must be > 0");
    ModelParams<T> m;
    m.hyper = hyper;
    m.build_layout();
    RngStream rng(RngStream::derive(seed, 0xA001));
    for (const auto& info : m.store.tensors()) {
        const bool is_bias = info.rows == 1 && info.name.find(".b") != std::string::npos;
        if (is_bias) continue;  // biases start at zero
        int fan_in = info.cols;
        if (info.name.find("deconv") != std::string::npos)
            fan_in = info.rows * 4;  // each output pixel sees Cin * (k/stride)^2 inputs
        const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
        T* p = m.store.data().data() + info.offset;
        for (std::size_t i = 0; i < info.size(); ++i) p[i] = static_cast<T>(rng.uniform(-bound, bound));
    }
    return m;
}

// --- public operations ----------------------------------------------------------

template <class T>
const Encoder<T>& encoder_for(const ModelParams<T>& m, Head head) {
    if (head == Head::Hand) return m.hand_encoder;
    if (head == Head::InHand) return m.inhand_encoder;
    throw DimensionError("encode: no encoder for the Goal head");
}

template <class T>
const Decoder<T>& decoder_for(const ModelParams<T>& m, Head head) {
    switch (head) {
        case Head::Hand: return m.hand_decoder;
        case Head::InHand: return m.inhand_decoder;
        case Head::Goal: return m.goal_decoder;
    }
    throw DimensionError("decode: bad head");
}

template <class T>
DiagonalGaussian encode(const ModelParams<T>& m, const Image& image, Head head) {
    if (image.width != m.hyper.image_hw || image.height != m.hyper.image_hw)
        throw DimensionError("encode: image size does not match the model input size");
    EncCache<T> cache;
    Scratch<T> scratch;
    image_to_chw(image, cache.x0);
    encoder_for(m, head).forward(m.store, cache, scratch);
    DiagonalGaussian g;
    g.mean.resize(m.hyper.latent_dim);
    g.log_std.resize(m.hyper.latent_dim);
    for (int i = 0; i < m.hyper.latent_dim; ++i) {
        g.mean[i] = static_cast<double>(cache.mean[i]);
        g.log_std[i] = static_cast<double>(cache.ls[i]);
    }
    return g;
}

template <class T>
Image decode(const ModelParams<T>& m, const Eigen::VectorXd& latent, Head head) {
    if (latent.size() != m.hyper.latent_dim) throw DimensionError("decode: wrong latent dimension");
    DecCache<T> cache;
    Scratch<T> scratch;
    cache.z.resize(latent.size());
    for (Eigen::Index i = 0; i < latent.size(); ++i) cache.z[i] = static_cast<T>(latent[i]);
    decoder_for(m, head).forward(m.store, cache, scratch);
    return chw_to_image(cache.out, m.hyper.image_hw);
}

/// p(x_g | z) parameters from the goal head.
template <class T>
DiagonalGaussian goal_head_eval(const ModelParams<T>& m, const Eigen::VectorXd& z) {
    MlpCache<T> c;
    c.x.resize(z.size());
    for (Eigen::Index i = 0; i < z.size(); ++i) c.x[i] = static_cast<T>(z[i]);
    m.goal_head.forward(m.store, c);
    const int d = m.hyper.latent_dim;
    DiagonalGaussian g;
    g.mean.resize(d);
    g.log_std.resize(d);
    for (int i = 0; i < d; ++i) {
        g.mean[i] = static_cast<double>(c.out[i]);
        g.log_std[i] = static_cast<double>(c.out[d + i]);
    }
    return g;
}

/// Algorithm path: z ~ q(z|I_z), x_g = p(x_g|z).
template <class T>
std::pair<Eigen::VectorXd, DiagonalGaussian> goal_from_inhand(const ModelParams<T>& m,
                                                              const Image& inhand, RngStream& rng) {
    DiagonalGaussian qz = encode(m, inhand, Head::InHand);
    Eigen::VectorXd z = sample(qz, rng);
    return {z, goal_head_eval(m, z)};
}

/// Control path: posterior means, no sampling.
template <class T>
std::pair<Eigen::VectorXd, DiagonalGaussian> goal_mean_from_inhand(const ModelParams<T>& m,
                                                                   const Image& inhand) {
    DiagonalGaussian qz = encode(m, inhand, Head::InHand);
    return {qz.mean, goal_head_eval(m, qz.mean)};
}

inline DiagonalGaussian transition_simplified(const Eigen::VectorXd& x, const Eigen::VectorXd& u,
                                              double dt, double sigma_x) {
    if (x.size() != u.size()) throw DimensionError("transition_simplified: dimension mismatch");
    DiagonalGaussian g;
    g.mean = x + dt * u;
    g.log_std = Eigen::VectorXd::Constant(x.size(), std::log(sigma_x));
    return g;
}

struct NewtonianStep {
    DiagonalGaussian x_next;
    Eigen::VectorXd v_next;
};

/// Core integration shared by the learned and the forced-coefficient paths:
/// v' = v + dt (A x + B v + C u); x' ~ N(x + dt v', sigma_x^2).
inline NewtonianStep newtonian_integrate(const Eigen::VectorXd& x, const Eigen::VectorXd& v,
                                         const Eigen::VectorXd& u, const Eigen::VectorXd& A,
                                         const Eigen::VectorXd& B, const Eigen::VectorXd& C,
                                         double dt, double sigma_x) {
    NewtonianStep out;
    out.v_next = v + dt * (A.cwiseProduct(x) + B.cwiseProduct(v) + C.cwiseProduct(u));
    out.x_next.mean = x + dt * out.v_next;
    out.x_next.log_std = Eigen::VectorXd::Constant(x.size(), std::log(sigma_x));
    return out;
}

/// [A, log(-B), log C] = diag(f(x, v, u)); the parameterization forces B < 0
/// and C > 0.
template <class T>
NewtonianStep transition_newtonian(const ModelParams<T>& m, const Eigen::VectorXd& x,
                                   const Eigen::VectorXd& v, const Eigen::VectorXd& u, double dt) {
    const int d = m.hyper.latent_dim;
    if (x.size() != d || v.size() != d || u.size() != d)
        throw DimensionError("transition_newtonian: dimension mismatch");
    MlpCache<T> c;
    c.x.resize(3 * d);
    for (int i = 0; i < d; ++i) {
        c.x[i] = static_cast<T>(x[i]);
        c.x[d + i] = static_cast<T>(v[i]);
        c.x[2 * d + i] = static_cast<T>(u[i]);
    }
    m.newton_f.forward(m.store, c);
    Eigen::VectorXd A(d), B(d), C(d);
    for (int i = 0; i < d; ++i) {
        A[i] = static_cast<double>(c.out[i]);
        B[i] = -std::exp(static_cast<double>(c.out[d + i]));
        C[i] = std::exp(static_cast<double>(c.out[2 * d + i]));
    }
    return newtonian_integrate(x, v, u, A, B, C, dt, m.hyper.sigma_x);
}

// --- checkpoint io -----------------------------------------------------------

inline constexpr char kCheckpointMagic[5] = "IHVM";
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline nlohmann::json hyper_to_json(const ModelHyper& h) {
    return {{"latent_dim", h.latent_dim}, {"image_hw", h.image_hw},   {"sigma_x", h.sigma_x},
            {"sigma_g", h.sigma_g},       {"decoder_std", h.decoder_std}, {"dt", h.dt},
            {"transition_variant", variant_name(h.variant)}};
}

inline ModelHyper hyper_from_json(const nlohmann::json& j) {
    ModelHyper h;
    h.latent_dim = j.at("latent_dim").get<int>();
    h.image_hw = j.at("image_hw").get<int>();
    h.sigma_x = j.at("sigma_x").get<double>();
    h.sigma_g = j.at("sigma_g").get<double>();
    h.decoder_std = j.at("decoder_std").get<double>();
    h.dt = j.at("dt").get<double>();
    h.variant = variant_from_name(j.at("transition_variant").get<std::string>());
    return h;
}

inline void save_checkpoint(const ModelParams<float>& m, std::uint64_t training_step,
                            const std::string& path) {
    nlohmann::json tensors = nlohmann::json::array();
    for (const auto& t : m.store.tensors())
        tensors.push_back({{"name", t.name}, {"rows", t.rows}, {"cols", t.cols}});
    nlohmann::json header = {{"arch_hash", arch_hash(m.hyper)},
                             {"hyper", hyper_to_json(m.hyper)},
                             {"training_step", training_step},
                             {"tensors", tensors}};
    BlobWriter w(path, kCheckpointMagic, kCheckpointVersion, header.dump());
    w.write_blob(m.store.data().data(), m.store.data().size() * sizeof(float));
    w.close();
}

inline std::pair<ModelParams<float>, std::uint64_t> load_checkpoint(const std::string& path) {
    BlobReader r(path, kCheckpointMagic, kCheckpointVersion);
    nlohmann::json header = nlohmann::json::parse(r.header_json());
    ModelHyper hyper = hyper_from_json(header.at("hyper"));
    if (header.at("arch_hash").get<std::uint64_t>() != arch_hash(hyper))
        throw FormatError("checkpoint: architecture hash mismatch");
    ModelParams<float> m;
    m.hyper = hyper;
    m.build_layout();
    auto blob = r.read_blob();
    if (blob.size() != m.store.data().size() * sizeof(float))
        throw FormatError("checkpoint: weight blob size mismatch");
    std::memcpy(m.store.data().data(), blob.data(), blob.size());
    return {std::move(m), header.at("training_step").get<std::uint64_t>()};
}

}  // namespace ihvs::model
