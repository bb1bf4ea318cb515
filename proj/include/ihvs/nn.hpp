#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "ihvs/common.hpp"

// Minimal static-graph layer kit: convolutions as im2col + GEMM, explicit
// hand-derived backward passes. No tapes, no dynamic graphs -- every network
// in the model is a fixed stack, so plain forward/backward pairs are enough
// and keep the gradient path auditable (and checkable, see train.hpp).
namespace ihvs::nn {

/// All buffers that Eigen kernels touch are 64-byte aligned. Vectorized
/// kernels split loops according to the runtime pointer alignment, so letting
/// the allocator choose would make results depend on heap layout; fixed
/// alignment keeps every run of the same build bit-identical.
template <class T, std::size_t Align = 64>
struct AlignedAllocator {
    using value_type = T;
    AlignedAllocator() = default;
    template <class U>
    AlignedAllocator(const AlignedAllocator<U, Align>&) {}
    T* allocate(std::size_t n) {
        const std::size_t bytes = ((n * sizeof(T) + Align - 1) / Align) * Align;
        void* p = std::aligned_alloc(Align, bytes);
        if (!p) throw std::bad_alloc();
        return static_cast<T*>(p);
    }
    void deallocate(T* p, std::size_t) { std::free(p); }
    template <class U>
    struct rebind {
        using other = AlignedAllocator<U, Align>;
    };
    bool operator==(const AlignedAllocator&) const { return true; }
    bool operator!=(const AlignedAllocator&) const { return false; }
};

template <class T>
using AVec = std::vector<T, AlignedAllocator<T>>;

template <class T>
using MatX = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapM = Eigen::Map<MatX<T>>;
template <class T>
using CMapM = Eigen::Map<const MatX<T>>;

struct TensorInfo {
    std::string name;   // "group.tensor"
    std::size_t offset = 0;
    int rows = 0, cols = 0;
    std::size_t size() const { return static_cast<std::size_t>(rows) * cols; }
};

/// Flat parameter vector with named tensor views. Tensors of one group are
/// registered contiguously, which the optimizer and the gradient checker rely
/// on. The same layout (same registration order) is used for gradients.
template <class T>
class ParamStore {
public:
    int add(const std::string& name, int rows, int cols) {
        TensorInfo info{name, total_, rows, cols};
        infos_.push_back(info);
        total_ += info.size();
        return static_cast<int>(infos_.size()) - 1;
    }

    void allocate() { data_.assign(total_, T(0)); }

    std::size_t size() const { return total_; }
    const std::vector<TensorInfo>& tensors() const { return infos_; }
    AVec<T>& data() { return data_; }
    const AVec<T>& data() const { return data_; }

    MapM<T> mat(int id) {
        const TensorInfo& t = infos_[id];
        return MapM<T>(data_.data() + t.offset, t.rows, t.cols);
    }
    CMapM<T> mat(int id) const {
        const TensorInfo& t = infos_[id];
        return CMapM<T>(data_.data() + t.offset, t.rows, t.cols);
    }
    T* ptr(int id) { return data_.data() + infos_[id].offset; }
    const T* ptr(int id) const { return data_.data() + infos_[id].offset; }

    template <class U>
    ParamStore<U> cast() const {
        ParamStore<U> out;
        for (const auto& t : infos_) out.add(t.name, t.rows, t.cols);
        out.allocate();
        for (std::size_t i = 0; i < data_.size(); ++i) out.data()[i] = static_cast<U>(data_[i]);
        return out;
    }

private:
    std::vector<TensorInfo> infos_;
    AVec<T> data_;
    std::size_t total_ = 0;
};

/// Optional activation-pattern fingerprint. The gradient checker compares the
/// fingerprint of the two perturbed evaluations: if they differ, the finite
/// difference straddled a LeakyReLU/clamp kink and is not a valid derivative
/// estimate there.
struct PatternHash {
    std::uint64_t h = 1469598103934665603ULL;
    void fold(bool bit) {
        h ^= static_cast<std::uint64_t>(bit) + 0x9E3779B97F4A7C15ULL;
        h *= 1099511628211ULL;
    }
};

// --- elementwise ------------------------------------------------------------

inline constexpr double kLeakySlope = 0.2;

template <class T>
void leaky_relu_fw(const AVec<T>& x, AVec<T>& y, PatternHash* pat) {
    y.resize(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const bool pos = x[i] > T(0);
        y[i] = pos ? x[i] : T(kLeakySlope) * x[i];
        if (pat) pat->fold(pos);
    }
}

template <class T>
void leaky_relu_bw(const AVec<T>& x, const AVec<T>& dy, AVec<T>& dx) {
    dx.resize(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) dx[i] = x[i] > T(0) ? dy[i] : T(kLeakySlope) * dy[i];
}

template <class T>
void sigmoid_fw(const AVec<T>& x, AVec<T>& y) {
    y.resize(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = T(1) / (T(1) + std::exp(-x[i]));
}

template <class T>
void sigmoid_bw(const AVec<T>& y, const AVec<T>& dy, AVec<T>& dx) {
    dx.resize(y.size());
    for (std::size_t i = 0; i < y.size(); ++i) dx[i] = dy[i] * y[i] * (T(1) - y[i]);
}

// --- convolution, kernel 4, stride 2, pad 1 ---------------------------------
// The only geometry used by the model: halves (conv) or doubles (transposed
// conv) each spatial dimension.

inline constexpr int kK = 4;

/// Gather: big [C, 2Hs, 2Ws] -> col [C*16, Hs*Ws].
template <class T>
void im2col(const T* big, int C, int Hs, int Ws, AVec<T>& col) {
    const int Hb = 2 * Hs, Wb = 2 * Ws;
    const int N = Hs * Ws;
    col.assign(static_cast<std::size_t>(C) * kK * kK * N, T(0));
    for (int c = 0; c < C; ++c) {
        const T* src = big + static_cast<std::size_t>(c) * Hb * Wb;
        for (int ky = 0; ky < kK; ++ky) {
            for (int kx = 0; kx < kK; ++kx) {
                T* dst = col.data() + (static_cast<std::size_t>(c) * kK * kK + ky * kK + kx) * N;
                for (int oy = 0; oy < Hs; ++oy) {
                    const int iy = 2 * oy - 1 + ky;
                    if (iy < 0 || iy >= Hb) continue;
                    const int x_begin = (kx == 0) ? 1 : 0;           // ix = 2*ox - 1 + kx
                    const int x_end = (2 * (Ws - 1) - 1 + kx < Wb) ? Ws : Ws - 1;
                    const T* s = src + static_cast<std::size_t>(iy) * Wb;
                    T* d = dst + static_cast<std::size_t>(oy) * Ws;
                    for (int ox = x_begin; ox < x_end; ++ox) d[ox] = s[2 * ox - 1 + kx];
                }
            }
        }
    }
}

/// Scatter-add: col [C*16, Hs*Ws] -> big [C, 2Hs, 2Ws]. Adjoint of im2col.
template <class T>
void col2im_add(const AVec<T>& col, int C, int Hs, int Ws, T* big) {
    const int Hb = 2 * Hs, Wb = 2 * Ws;
    const int N = Hs * Ws;
    for (int c = 0; c < C; ++c) {
        T* dst = big + static_cast<std::size_t>(c) * Hb * Wb;
        for (int ky = 0; ky < kK; ++ky) {
            for (int kx = 0; kx < kK; ++kx) {
                const T* src = col.data() + (static_cast<std::size_t>(c) * kK * kK + ky * kK + kx) * N;
                for (int oy = 0; oy < Hs; ++oy) {
                    const int iy = 2 * oy - 1 + ky;
                    if (iy < 0 || iy >= Hb) continue;
                    const int x_begin = (kx == 0) ? 1 : 0;
                    const int x_end = (2 * (Ws - 1) - 1 + kx < Wb) ? Ws : Ws - 1;
                    T* d = dst + static_cast<std::size_t>(iy) * Wb;
                    const T* s = src + static_cast<std::size_t>(oy) * Ws;
                    for (int ox = x_begin; ox < x_end; ++ox) d[2 * ox - 1 + kx] += s[ox];
                }
            }
        }
    }
}

/// y [Cout, H/2, W/2] = conv(x [Cin, H, W]); w [Cout, Cin*16], b [Cout].
template <class T>
void conv2d_fw(const T* x, int Cin, int H, int W, CMapM<T> w, const T* b, int Cout,
               AVec<T>& y, AVec<T>& col) {
    const int Hs = H / 2, Ws = W / 2, N = Hs * Ws;
    im2col(x, Cin, Hs, Ws, col);
    y.resize(static_cast<std::size_t>(Cout) * N);
    MapM<T> ym(y.data(), Cout, N);
    CMapM<T> cm(col.data(), Cin * kK * kK, N);
    ym.noalias() = w * cm;
    for (int c = 0; c < Cout; ++c) ym.row(c).array() += b[c];
}

/// Gradients for conv2d_fw; dw/db/dx are accumulated with +=.
template <class T>
void conv2d_bw(const T* x, int Cin, int H, int W, CMapM<T> w, int Cout, const AVec<T>& dy,
               MapM<T> dw, T* db, T* dx, AVec<T>& col, AVec<T>& dcol) {
    const int Hs = H / 2, Ws = W / 2, N = Hs * Ws;
    CMapM<T> dym(dy.data(), Cout, N);
    im2col(x, Cin, Hs, Ws, col);
    CMapM<T> cm(col.data(), Cin * kK * kK, N);
    dw.noalias() += dym * cm.transpose();
    for (int c = 0; c < Cout; ++c) db[c] += dym.row(c).sum();
    if (dx) {
        dcol.resize(static_cast<std::size_t>(Cin) * kK * kK * N);
        MapM<T> dcm(dcol.data(), Cin * kK * kK, N);
        dcm.noalias() = w.transpose() * dym;
        col2im_add(dcol, Cin, Hs, Ws, dx);  // caller zero-initializes dx
    }
}

/// y [Cout, 2H, 2W] = deconv(x [Cin, H, W]); w [Cin, Cout*16], b [Cout].
template <class T>
void deconv2d_fw(const T* x, int Cin, int H, int W, CMapM<T> w, const T* b, int Cout,
                 AVec<T>& y, AVec<T>& cols) {
    const int N = H * W;
    cols.resize(static_cast<std::size_t>(Cout) * kK * kK * N);
    MapM<T> colm(cols.data(), Cout * kK * kK, N);
    CMapM<T> xm(x, Cin, N);
    colm.noalias() = w.transpose() * xm;
    y.assign(static_cast<std::size_t>(Cout) * 4 * N, T(0));
    col2im_add(cols, Cout, H, W, y.data());
    MapM<T> ym(y.data(), Cout, 4 * N);
    for (int c = 0; c < Cout; ++c) ym.row(c).array() += b[c];
}

template <class T>
void deconv2d_bw(const T* x, int Cin, int H, int W, CMapM<T> w, int Cout, const AVec<T>& dy,
                 MapM<T> dw, T* db, T* dx, AVec<T>& dcols) {
    const int N = H * W;
    im2col(dy.data(), Cout, H, W, dcols);
    CMapM<T> dcolm(dcols.data(), Cout * kK * kK, N);
    CMapM<T> xm(x, Cin, N);
    dw.noalias() += xm * dcolm.transpose();
    CMapM<T> dym(dy.data(), Cout, 4 * N);
    for (int c = 0; c < Cout; ++c) db[c] += dym.row(c).sum();
    if (dx) {
        MapM<T> dxm(dx, Cin, N);
        dxm.noalias() += w * dcolm;
    }
}

/// y [out] = W [out,in] x + b.
template <class T>
void dense_fw(const T* x, int in, CMapM<T> w, const T* b, int out, T* y) {
    Eigen::Map<const Eigen::Vector<T, Eigen::Dynamic>> xv(x, in);
    Eigen::Map<Eigen::Vector<T, Eigen::Dynamic>> yv(y, out);
    yv.noalias() = w * xv;
    for (int i = 0; i < out; ++i) y[i] += b[i];
}

template <class T>
void dense_bw(const T* x, int in, CMapM<T> w, int out, const T* dy, MapM<T> dw, T* db, T* dx) {
    Eigen::Map<const Eigen::Vector<T, Eigen::Dynamic>> xv(x, in);
    Eigen::Map<const Eigen::Vector<T, Eigen::Dynamic>> dyv(dy, out);
    dw.noalias() += dyv * xv.transpose();
    for (int i = 0; i < out; ++i) db[i] += dy[i];
    if (dx) {
        Eigen::Map<Eigen::Vector<T, Eigen::Dynamic>> dxv(dx, in);
        dxv.noalias() += w.transpose() * dyv;
    }
}

}  // namespace ihvs::nn
