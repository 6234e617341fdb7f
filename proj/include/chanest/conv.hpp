#pragma once

// Low-level 2-D 'same' convolution kernels on single images.
//
// Feature maps are stored channel-major as [C][W][H] with H (the subcarrier
// axis) contiguous. A layer with a kh x kw kernel first copies its input into
// a zero-padded buffer [C][Wp][Hp], Wp = W + kw - 1, Hp = H + kh - 1. Output
// position (w, h) is then computed at raw index q = w*Hp + h, and kernel tap
// (b along H, a along W) reads padded input at q + a*Hp + b. Every tap is a
// constant shift of one contiguous range, so the inner loops are plain
// vectorisable streams. Raw indices with h >= H are junk and get discarded.

#include <algorithm>
#include <cstddef>
#include <cstring>
#include <span>
#include <vector>

namespace chanest::conv {

// Extra zeroed doubles at the end of padded buffers so the blocked kernels
// may read past the last real element.
inline constexpr std::size_t kSlack = 128;

struct Geometry {
    std::size_t h = 0, w = 0;    // image extent (H contiguous)
    std::size_t kh = 1, kw = 1;  // kernel extent along H and W

    std::size_t hp() const noexcept { return h + kh - 1; }
    std::size_t wp() const noexcept { return w + kw - 1; }
    std::size_t padded_plane() const noexcept { return hp() * wp(); }
    std::size_t raw_len() const noexcept { return (w - 1) * hp() + h; }
    std::size_t image() const noexcept { return h * w; }
};

// [C][W][H] -> zero-padded [C][Wp][Hp] (+ slack).
inline void pad_into(std::span<const double> src, std::size_t channels, const Geometry& g, std::vector<double>& dst) {
    const std::size_t plane = g.padded_plane();
    dst.assign(channels * plane + kSlack, 0.0);
    const std::size_t ph = g.kh / 2, pw = g.kw / 2;
    for (std::size_t c = 0; c < channels; ++c)
        for (std::size_t x = 0; x < g.w; ++x)
            std::copy_n(src.data() + (c * g.w + x) * g.h, g.h, dst.data() + c * plane + (x + pw) * g.hp() + ph);
}

// Weight layout expected by correlate(): [cin][a][b][cout].
// Source layout is [cout][cin][kh][kw] (b indexes kh, a indexes kw).
inline std::vector<double> pack_forward(std::span<const double> w, std::size_t cout, std::size_t cin, std::size_t kh,
                                        std::size_t kw) {
    std::vector<double> p(w.size() + kSlack, 0.0);
    for (std::size_t o = 0; o < cout; ++o)
        for (std::size_t c = 0; c < cin; ++c)
            for (std::size_t b = 0; b < kh; ++b)
                for (std::size_t a = 0; a < kw; ++a)
                    p[((c * kw + a) * kh + b) * cout + o] = w[((o * cin + c) * kh + b) * kw + a];
    return p;
}

// Same as pack_forward for the transposed, spatially flipped kernel used to
// push gradients back to the layer input (roles of cin and cout swap).
inline std::vector<double> pack_backward(std::span<const double> w, std::size_t cout, std::size_t cin, std::size_t kh,
                                         std::size_t kw) {
    std::vector<double> p(w.size() + kSlack, 0.0);
    for (std::size_t o = 0; o < cout; ++o)
        for (std::size_t c = 0; c < cin; ++c)
            for (std::size_t b = 0; b < kh; ++b)
                for (std::size_t a = 0; a < kw; ++a)
                    p[((o * kw + (kw - 1 - a)) * kh + (kh - 1 - b)) * cin + c] = w[((o * cin + c) * kh + b) * kw + a];
    return p;
}

// The vec8 helpers are inline-only, so the vector-argument ABI note that GCC
// emits without AVX-512 enabled does not apply.
#if defined(__GNUC__) && !defined(__clang__)
#pragma GCC diagnostic push
#pragma GCC diagnostic ignored "-Wpsabi"
#endif

namespace detail {

// 8 doubles; one AVX-512 register, or two AVX registers. Kernels keep
// accumulators in small arrays but avoid arrays of loaded operands, which
// make GCC spill the accumulators on every iteration.
using vec8 = double __attribute__((vector_size(64)));
using vec8u = double __attribute__((vector_size(64), aligned(8), may_alias));

inline vec8 load8(const double* p) { return *reinterpret_cast<const vec8u*>(p); }

inline void store8(double* p, vec8 v) { *reinterpret_cast<vec8u*>(p) = v; }

// OB output channels x NV*8 consecutive raw positions, held in registers,
// over input channels [c0, c1). Adds to `out` unless `first`.
template <std::size_t OB, std::size_t NV>
inline void correlate_block(const double* in, std::size_t plane, std::size_t c0, std::size_t c1, const double* wpack,
                            std::size_t cout, std::size_t o0, const Geometry& g, std::size_t q0, double* out,
                            std::size_t out_stride, bool first) {
    vec8 acc[OB][NV] = {};
    if (!first)
        for (std::size_t o = 0; o < OB; ++o)
            for (std::size_t j = 0; j < NV; ++j) acc[o][j] = load8(out + (o0 + o) * out_stride + q0 + 8 * j);
    const std::size_t hp = g.hp();
    for (std::size_t c = c0; c < c1; ++c) {
        for (std::size_t a = 0; a < g.kw; ++a) {
            const double* row = in + c * plane + q0 + a * hp;
            const double* wrow = wpack + (c * g.kw + a) * g.kh * cout + o0;
            for (std::size_t b = 0; b < g.kh; ++b) {
                const double* wv = wrow + b * cout;
                for (std::size_t o = 0; o < OB; ++o) {
                    const double wo = wv[o];
                    for (std::size_t j = 0; j < NV; ++j) acc[o][j] += wo * load8(row + b + 8 * j);
                }
            }
        }
    }
    for (std::size_t o = 0; o < OB; ++o)
        for (std::size_t j = 0; j < NV; ++j) store8(out + (o0 + o) * out_stride + q0 + 8 * j, acc[o][j]);
}

template <std::size_t OB, std::size_t NV>
inline void correlate_rows(const double* in, std::size_t plane, std::size_t c0, std::size_t c1, const double* wpack,
                           std::size_t cout, std::size_t o0, const Geometry& g, double* out, std::size_t out_stride) {
    const std::size_t raw = g.raw_len();
    for (std::size_t q0 = 0; q0 < raw; q0 += 8 * NV)
        correlate_block<OB, NV>(in, plane, c0, c1, wpack, cout, o0, g, q0, out, out_stride, c0 == 0);
}

// Input channels per pass; keeps the rows touched by one block within L1.
inline constexpr std::size_t kChannelChunk = 8;

}  // namespace detail

// Raw output stride for correlate(): raw_len rounded up to the block size.
inline std::size_t raw_stride(const Geometry& g) { return (g.raw_len() + 95) / 96 * 96; }

// out[o][q] = sum_{c,a,b} wpack[c][a][b][o] * in[c][q + a*Hp + b]
// for q < raw_len; `in` is a padded buffer from pad_into(). `out` must hold
// cout * raw_stride(g) doubles.
inline void correlate(std::span<const double> in, std::size_t cin, std::span<const double> wpack, std::size_t cout,
                      const Geometry& g, std::span<double> out) {
    const std::size_t plane = g.padded_plane();
    const std::size_t stride = raw_stride(g);
    for (std::size_t c0 = 0; c0 < cin; c0 += detail::kChannelChunk) {
        const std::size_t c1 = std::min(cin, c0 + detail::kChannelChunk);
        std::size_t o0 = 0;
        for (; o0 + 8 <= cout; o0 += 8)
            detail::correlate_rows<8, 3>(in.data(), plane, c0, c1, wpack.data(), cout, o0, g, out.data(), stride);
        for (; o0 + 4 <= cout; o0 += 4)
            detail::correlate_rows<4, 4>(in.data(), plane, c0, c1, wpack.data(), cout, o0, g, out.data(), stride);
        for (; o0 < cout; ++o0)
            detail::correlate_rows<1, 4>(in.data(), plane, c0, c1, wpack.data(), cout, o0, g, out.data(), stride);
    }
}

namespace detail {

// Accumulates dw for output block [o0, o0+OB), input channel c, column tap a
// over raw positions [q_begin, q_end). The range length must be a multiple
// of 8; dz is zero past raw_len so rounding up is harmless.
template <std::size_t OB, std::size_t KH>
inline void weight_grad_block(const double* dz, std::size_t dz_stride, const double* in, std::size_t plane,
                              std::size_t c, std::size_t a, std::size_t o0, const Geometry& g, std::size_t cin,
                              std::size_t q_begin, std::size_t q_end, double* dw) {
    vec8 acc[OB][KH] = {};
    const double* src0 = in + c * plane + a * g.hp();
    for (std::size_t q = q_begin; q < q_end; q += 8) {
        for (std::size_t b = 0; b < KH; ++b) {
            const vec8 x = load8(src0 + q + b);
            for (std::size_t o = 0; o < OB; ++o) acc[o][b] += load8(dz + (o0 + o) * dz_stride + q) * x;
        }
    }
    double lanes[OB][KH][8];
    std::memcpy(lanes, acc, sizeof acc);
    for (std::size_t o = 0; o < OB; ++o)
        for (std::size_t b = 0; b < KH; ++b) {
            double s = 0.0;
            for (double v : lanes[o][b]) s += v;
            dw[(((o0 + o) * cin + c) * KH + b) * g.kw + a] += s;
        }
}

inline void weight_grad_generic(const double* dz, std::size_t dz_stride, const double* in, std::size_t plane,
                                std::size_t cin, std::size_t cout, const Geometry& g, double* dw) {
    const std::size_t raw = g.raw_len();
    for (std::size_t o = 0; o < cout; ++o)
        for (std::size_t c = 0; c < cin; ++c)
            for (std::size_t b = 0; b < g.kh; ++b)
                for (std::size_t a = 0; a < g.kw; ++a) {
                    const double* src = in + c * plane + a * g.hp() + b;
                    const double* d = dz + o * dz_stride;
                    double s = 0.0;
                    for (std::size_t q = 0; q < raw; ++q) s += d[q] * src[q];
                    dw[((o * cin + c) * g.kh + b) * g.kw + a] += s;
                }
}

template <std::size_t KH, std::size_t OB>
inline void weight_grad_fixed(const double* dz, std::size_t dz_stride, const double* in, std::size_t plane,
                              std::size_t cin, std::size_t cout, const Geometry& g, double* dw) {
    constexpr std::size_t kChunk = 512;
    const std::size_t raw = g.raw_len();
    auto run = [&]<std::size_t B>(std::size_t o0) {
        for (std::size_t q0 = 0; q0 < raw; q0 += kChunk) {
            const std::size_t q1 = std::min((raw + 7) / 8 * 8, q0 + kChunk);
            for (std::size_t c = 0; c < cin; ++c)
                for (std::size_t a = 0; a < g.kw; ++a)
                    weight_grad_block<B, KH>(dz, dz_stride, in, plane, c, a, o0, g, cin, q0, q1, dw);
        }
    };
    std::size_t o0 = 0;
    for (; o0 + OB <= cout; o0 += OB) run.template operator()<OB>(o0);
    for (; o0 < cout; ++o0) run.template operator()<1>(o0);
}

}  // namespace detail

// dw[o][c][b][a] += sum_q dz[o][q] * in[c][q + a*Hp + b], with dz on the raw
// grid (stride raw_stride(g)) and zero at junk positions.
inline void weight_grad(std::span<const double> dz, std::span<const double> in, std::size_t cin, std::size_t cout,
                        const Geometry& g, std::span<double> dw) {
    const std::size_t plane = g.padded_plane();
    const std::size_t stride = raw_stride(g);
    if (g.kh == 9)
        detail::weight_grad_fixed<9, 2>(dz.data(), stride, in.data(), plane, cin, cout, g, dw.data());
    else if (g.kh == 5)
        detail::weight_grad_fixed<5, 4>(dz.data(), stride, in.data(), plane, cin, cout, g, dw.data());
    else
        detail::weight_grad_generic(dz.data(), stride, in.data(), plane, cin, cout, g, dw.data());
}

}  // namespace chanest::conv

#if defined(__GNUC__) && !defined(__clang__)
#pragma GCC diagnostic pop
#endif
