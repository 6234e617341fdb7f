#pragma once

// Fixed-architecture convolutional channel estimator: forward pass,
// reverse-mode gradients, momentum SGD training and CEMW checkpoints.
//
// A sample is a RealGrid of shape n_sub x n_sym x 2. The real and imaginary
// planes go through the same single-channel conv stack independently, so
// the stack maps 1 -> ... -> 1 channels per plane.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>


#include "chanest/conv.hpp"
#include "chanest/error.hpp"
#include "chanest/grid.hpp"
#include "chanest/parallel.hpp"
#include "chanest/rng.hpp"

namespace chanest {

enum class Activation : std::uint8_t { selu = 0, softplus = 1, linear = 2 };
enum class ArchTag : std::uint8_t { undefended = 0, teacher = 1, student = 2 };

inline std::string_view arch_name(ArchTag a) {
    switch (a) {
        case ArchTag::undefended: return "undefended";
        case ArchTag::teacher: return "teacher";
        case ArchTag::student: return "student";
    }
    return "?";
}

inline ArchTag parse_arch(std::string_view s) {
    if (s == "undefended") return ArchTag::undefended;
    if (s == "teacher") return ArchTag::teacher;
    if (s == "student") return ArchTag::student;
    throw ConfigError("unknown architecture '" + std::string(s) + "' (expected undefended, teacher or student)");
}

inline constexpr double kSeluLambda = 1.0507009873554805;
inline constexpr double kSeluAlpha = 1.6732632423543772;

inline double activate(Activation act, double z) {
    switch (act) {
        case Activation::selu: return z > 0.0 ? kSeluLambda * z : kSeluLambda * kSeluAlpha * std::expm1(z);
        case Activation::softplus: return z > 30.0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
        case Activation::linear: return z;
    }
    return z;
}

inline double activate_grad(Activation act, double z) {
    switch (act) {
        case Activation::selu: return z > 0.0 ? kSeluLambda : kSeluLambda * kSeluAlpha * std::exp(z);
        case Activation::softplus: return z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
        case Activation::linear: return 1.0;
    }
    return 1.0;
}

// Whole feature maps: a = act(z). Scalar, so results do not depend on
// buffer alignment.
inline void activate_array(Activation act, std::span<const double> z, std::span<double> a) {
    for (std::size_t i = 0; i < z.size(); ++i) a[i] = activate(act, z[i]);
}

// d *= act'(z), given z and a = act(z).
inline void scale_by_activation_grad(Activation act, std::span<const double> z, std::span<const double> a,
                                     std::span<double> d) {
    const std::size_t n = z.size();
    switch (act) {
        // selu'(z) = lambda*alpha*e^z = a + lambda*alpha for z <= 0
        case Activation::selu:
            for (std::size_t i = 0; i < n; ++i) d[i] *= z[i] > 0.0 ? kSeluLambda : a[i] + kSeluLambda * kSeluAlpha;
            return;
        // softplus'(z) = sigmoid(z) = exp(z - softplus(z))
        case Activation::softplus:
            for (std::size_t i = 0; i < n; ++i) d[i] *= std::exp(z[i] - a[i]);
            return;
        case Activation::linear: return;
    }
}

struct ConvLayer {
    std::size_t out_ch = 1, in_ch = 1, kh = 1, kw = 1;
    Activation activation = Activation::linear;
    std::vector<double> weights;  // [out_ch][in_ch][kh][kw]
    std::vector<double> bias;     // [out_ch]

    ConvLayer() = default;
    ConvLayer(std::size_t out, std::size_t in, std::size_t kh_, std::size_t kw_, Activation act)
        : out_ch(out), in_ch(in), kh(kh_), kw(kw_), activation(act), weights(out * in * kh_ * kw_, 0.0), bias(out, 0.0) {
        validate();
    }

    std::size_t weight_count() const noexcept { return out_ch * in_ch * kh * kw; }
    std::size_t param_count() const noexcept { return weight_count() + out_ch; }

    double& w(std::size_t o, std::size_t i, std::size_t b, std::size_t a) { return weights[((o * in_ch + i) * kh + b) * kw + a]; }

    void validate() const {
        if (out_ch == 0 || in_ch == 0) throw ShapeError("ConvLayer: zero channels");
        if (kh % 2 == 0 || kw % 2 == 0) throw ShapeError("ConvLayer: kernel dimensions must be odd");
        if (weights.size() != weight_count() || bias.size() != out_ch) throw ShapeError("ConvLayer: parameter size mismatch");
    }

    friend bool operator==(const ConvLayer&, const ConvLayer&) = default;
};

class EstimatorModel {
public:
    EstimatorModel() = default;
    EstimatorModel(ArchTag tag, std::vector<ConvLayer> layers) : arch_(tag), layers_(std::move(layers)) { validate(); }

    ArchTag arch() const noexcept { return arch_; }
    const std::vector<ConvLayer>& layers() const noexcept { return layers_; }
    std::vector<ConvLayer>& layers() noexcept { return layers_; }

    std::size_t param_count() const {
        return std::accumulate(layers_.begin(), layers_.end(), std::size_t{0},
                               [](std::size_t s, const ConvLayer& l) { return s + l.param_count(); });
    }

    // Flattened parameters: per layer, weights then bias.
    std::vector<double> parameters() const {
        std::vector<double> p;
        p.reserve(param_count());
        for (const auto& l : layers_) {
            p.insert(p.end(), l.weights.begin(), l.weights.end());
            p.insert(p.end(), l.bias.begin(), l.bias.end());
        }
        return p;
    }

    void set_parameters(std::span<const double> p) {
        if (p.size() != param_count()) throw ShapeError("set_parameters: size mismatch");
        std::size_t off = 0;
        for (auto& l : layers_) {
            std::copy_n(p.begin() + static_cast<std::ptrdiff_t>(off), l.weights.size(), l.weights.begin());
            off += l.weights.size();
            std::copy_n(p.begin() + static_cast<std::ptrdiff_t>(off), l.bias.size(), l.bias.begin());
            off += l.bias.size();
        }
    }

    void validate() const {
        if (layers_.empty()) throw ShapeError("EstimatorModel: no layers");
        for (const auto& l : layers_) l.validate();
        if (layers_.front().in_ch != 1 || layers_.back().out_ch != 1)
            throw ShapeError("EstimatorModel: stack must map 1 channel to 1 channel per plane");
        for (std::size_t i = 1; i < layers_.size(); ++i)
            if (layers_[i].in_ch != layers_[i - 1].out_ch) throw ShapeError("EstimatorModel: channel chain broken");
    }

    friend bool operator==(const EstimatorModel&, const EstimatorModel&) = default;

private:
    ArchTag arch_ = ArchTag::undefended;
    std::vector<ConvLayer> layers_;
};

// Layer list for each architecture, weights zeroed.
inline EstimatorModel make_architecture(ArchTag tag) {
    const std::size_t c1 = tag == ArchTag::teacher ? 48 : 24;
    const std::size_t c2 = tag == ArchTag::teacher ? 16 : 8;
    std::vector<ConvLayer> layers;
    layers.emplace_back(c1, 1, 9, 9, Activation::selu);
    layers.emplace_back(c2, c1, 5, 5, Activation::softplus);
    layers.emplace_back(1, c2, 5, 5, Activation::selu);
    return EstimatorModel(tag, std::move(layers));
}

inline EstimatorModel init_glorot(ArchTag tag, std::uint64_t seed) {
    EstimatorModel m = make_architecture(tag);
    Rng rng = make_rng(seed);
    for (auto& l : m.layers()) {
        const double receptive = static_cast<double>(l.kh * l.kw);
        const double limit = std::sqrt(6.0 / (receptive * static_cast<double>(l.in_ch + l.out_ch)));
        std::uniform_real_distribution<double> u(-limit, limit);
        for (double& w : l.weights) w = u(rng);
        std::fill(l.bias.begin(), l.bias.end(), 0.0);
    }
    return m;
}

inline double glorot_limit(const ConvLayer& l) {
    return std::sqrt(6.0 / (static_cast<double>(l.kh * l.kw) * static_cast<double>(l.in_ch + l.out_ch)));
}

// ---------------------------------------------------------------------------
// Single-layer forward on a [C][W][H] feature map.

inline conv::Geometry layer_geometry(const ConvLayer& l, std::size_t h, std::size_t w) { return {h, w, l.kh, l.kw}; }

// Per-thread scratch for raw-grid buffers. Reusing capacity avoids the
// page-fault cost of mapping fresh multi-megabyte blocks on every call.
inline std::vector<double>& scratch(std::size_t slot) {
    thread_local std::vector<double> bufs[4];
    return bufs[slot];
}

// Pre-activation output [out_ch][W][H] into z; `padded` receives the padded input.
inline void conv_preactivation(const ConvLayer& layer, std::span<const double> x, std::size_t h, std::size_t w,
                               std::vector<double>& padded, std::vector<double>& z) {
    const conv::Geometry g = layer_geometry(layer, h, w);
    if (x.size() != layer.in_ch * g.image()) throw ShapeError("conv2d: input channel count does not match layer");
    conv::pad_into(x, layer.in_ch, g, padded);
    const auto wpack = conv::pack_forward(layer.weights, layer.out_ch, layer.in_ch, layer.kh, layer.kw);
    const std::size_t stride = conv::raw_stride(g);
    std::vector<double>& raw = scratch(0);
    raw.resize(layer.out_ch * stride);
    conv::correlate(padded, layer.in_ch, wpack, layer.out_ch, g, raw);
    z.resize(layer.out_ch * g.image());
    for (std::size_t o = 0; o < layer.out_ch; ++o)
        for (std::size_t c = 0; c < w; ++c)
            for (std::size_t r = 0; r < h; ++r)
                z[(o * w + c) * h + r] = raw[o * stride + c * g.hp() + r] + layer.bias[o];
}

// 'same'-padded stride-1 cross-correlation plus bias, then activation.
// x is [in_ch][w][h]; returns [out_ch][w][h].
inline std::vector<double> conv2d_forward(std::span<const double> x, std::size_t h, std::size_t w, const ConvLayer& layer) {
    std::vector<double> padded, z;
    conv_preactivation(layer, x, h, w, padded, z);
    activate_array(layer.activation, z, z);
    return z;
}

// ---------------------------------------------------------------------------
// Whole-stack forward/backward on one plane.

struct LayerCache {
    std::vector<double> padded_input;  // padded [in_ch][Wp][Hp] (+slack)
    std::vector<double> z;             // pre-activation [out_ch][W][H]
    std::vector<double> a;             // post-activation [out_ch][W][H]
};

struct PlaneCache {
    std::size_t h = 0, w = 0;
    std::vector<LayerCache> layers;

    std::span<const double> output() const { return layers.back().a; }
};

// Forward pass writing into `cache`, reusing its buffers.
inline void forward_plane(const EstimatorModel& m, std::span<const double> plane, std::size_t h, std::size_t w,
                          PlaneCache& cache) {
    cache.h = h;
    cache.w = w;
    cache.layers.resize(m.layers().size());
    std::span<const double> x = plane;
    for (std::size_t i = 0; i < m.layers().size(); ++i) {
        const ConvLayer& l = m.layers()[i];
        LayerCache& lc = cache.layers[i];
        conv_preactivation(l, x, h, w, lc.padded_input, lc.z);
        lc.a.resize(lc.z.size());
        activate_array(l.activation, lc.z, lc.a);
        x = lc.a;
    }
}

inline PlaneCache forward_plane(const EstimatorModel& m, std::span<const double> plane, std::size_t h, std::size_t w) {
    PlaneCache cache;
    forward_plane(m, plane, h, w, cache);
    return cache;
}

// Extra gradient injected at an intermediate layer (used by the distillation
// variants that match hidden features). `on_preactivation` selects whether
// `grad` is w.r.t. z or a of layer `layer`.
struct HiddenGrad {
    std::size_t layer = 0;
    bool on_preactivation = false;
    std::span<const double> grad;
};

// Reverse pass for one plane. d_out is dLoss/d(output) [W][H]. Parameter
// gradients accumulate into d_params (flattened like parameters()) when
// non-empty; the input gradient [W][H] is returned when want_input is set.
inline std::vector<double> backward_plane(const EstimatorModel& m, const PlaneCache& cache, std::span<const double> d_out,
                                          std::span<double> d_params, bool want_input,
                                          std::span<const HiddenGrad> hidden = {}) {
    const std::size_t h = cache.h, w = cache.w;
    const auto& layers = m.layers();
    const std::size_t n_layers = layers.size();

    std::vector<std::size_t> offsets(n_layers, 0);
    for (std::size_t i = 1; i < n_layers; ++i) offsets[i] = offsets[i - 1] + layers[i - 1].param_count();

    std::vector<double>* da_buf = &scratch(2);
    std::vector<double>* dx_buf = &scratch(3);
    da_buf->assign(d_out.begin(), d_out.end());
    if (da_buf->size() != layers.back().out_ch * h * w) throw ShapeError("backward: output gradient size mismatch");

    for (std::size_t li = n_layers; li-- > 0;) {
        const ConvLayer& l = layers[li];
        const LayerCache& lc = cache.layers[li];
        const conv::Geometry g = layer_geometry(l, h, w);
        std::vector<double>& da = *da_buf;

        for (const auto& hg : hidden)
            if (hg.layer == li && !hg.on_preactivation)
                for (std::size_t j = 0; j < da.size(); ++j) da[j] += hg.grad[j];

        // dz = da * act'(z)
        std::vector<double>& dz = da;
        scale_by_activation_grad(l.activation, lc.z, lc.a, dz);
        for (const auto& hg : hidden)
            if (hg.layer == li && hg.on_preactivation)
                for (std::size_t j = 0; j < dz.size(); ++j) dz[j] += hg.grad[j];

        const bool need_input_grad = li > 0 || want_input;
        if (!d_params.empty()) {
            // dz on the raw grid (junk columns zero).
            const std::size_t stride = conv::raw_stride(g);
            std::vector<double>& dz_raw = scratch(1);
            dz_raw.assign(l.out_ch * stride + conv::kSlack, 0.0);
            for (std::size_t o = 0; o < l.out_ch; ++o)
                for (std::size_t c = 0; c < w; ++c)
                    std::copy_n(dz.data() + (o * w + c) * h, h, dz_raw.data() + o * stride + c * g.hp());
            double* dparams = d_params.data() + offsets[li];
            conv::weight_grad(dz_raw, lc.padded_input, l.in_ch, l.out_ch, g, std::span<double>(dparams, l.weight_count()));
            double* dbias = dparams + l.weight_count();
            for (std::size_t o = 0; o < l.out_ch; ++o) {
                double s = 0.0;
                for (std::size_t j = 0; j < h * w; ++j) s += dz[o * h * w + j];
                dbias[o] += s;
            }
        }
        if (!need_input_grad) break;

        std::vector<double>& dz_padded = scratch(1);
        conv::pad_into(dz, l.out_ch, g, dz_padded);
        const auto wpack = conv::pack_backward(l.weights, l.out_ch, l.in_ch, l.kh, l.kw);
        const std::size_t stride = conv::raw_stride(g);
        std::vector<double>& raw = scratch(0);
        raw.resize(l.in_ch * stride);
        conv::correlate(dz_padded, l.out_ch, wpack, l.in_ch, g, raw);
        std::vector<double>& dx = *dx_buf;
        dx.resize(l.in_ch * h * w);
        for (std::size_t c = 0; c < l.in_ch; ++c)
            for (std::size_t x = 0; x < w; ++x) std::copy_n(raw.data() + c * stride + x * g.hp(), h, dx.data() + (c * w + x) * h);
        std::swap(da_buf, dx_buf);
    }
    if (!want_input) return {};
    return *da_buf;
}

// ---------------------------------------------------------------------------
// RealGrid <-> per-plane image conversion. Plane c holds channel c laid out
// as [symbol][subcarrier].

inline std::vector<double> extract_plane(const RealGrid& g, std::size_t c) {
    const std::size_t h = g.n_sub(), w = g.n_sym(), nc = g.n_chan();
    auto v = g.values();
    std::vector<double> p(h * w);
    for (std::size_t k = 0; k < h; ++k)
        for (std::size_t n = 0; n < w; ++n) p[n * h + k] = v[(k * w + n) * nc + c];
    return p;
}

inline void scatter_plane(std::span<const double> p, std::size_t c, std::size_t h, std::size_t w, std::size_t nc,
                          std::vector<double>& out) {
    for (std::size_t k = 0; k < h; ++k)
        for (std::size_t n = 0; n < w; ++n) out[(k * w + n) * nc + c] = p[n * h + k];
}

// Forward caches for both planes of one sample.
struct SampleCache {
    std::vector<PlaneCache> planes;
    std::size_t n_sub = 0, n_sym = 0;

    RealGrid output() const {
        std::vector<double> out(n_sub * n_sym * planes.size());
        for (std::size_t c = 0; c < planes.size(); ++c) scatter_plane(planes[c].output(), c, n_sub, n_sym, planes.size(), out);
        return RealGrid(n_sub, n_sym, planes.size(), std::move(out));
    }
};

// Forward pass writing into `sc`, reusing its buffers.
inline void forward_cached(const EstimatorModel& m, const RealGrid& x, SampleCache& sc) {
    if (x.n_chan() != kPlanes) throw ShapeError("forward: input must have 2 channels");
    sc.n_sub = x.n_sub();
    sc.n_sym = x.n_sym();
    sc.planes.resize(x.n_chan());
    for (std::size_t c = 0; c < x.n_chan(); ++c) forward_plane(m, extract_plane(x, c), x.n_sub(), x.n_sym(), sc.planes[c]);
}

inline SampleCache forward_cached(const EstimatorModel& m, const RealGrid& x) {
    SampleCache sc;
    forward_cached(m, x, sc);
    return sc;
}

inline RealGrid forward(const EstimatorModel& m, const RealGrid& x) {
    thread_local SampleCache sc;
    forward_cached(m, x, sc);
    return sc.output();
}

inline double mse_loss(const RealGrid& pred, const RealGrid& label) {
    if (!pred.same_shape(label)) throw ShapeError("mse_loss: shape mismatch");
    auto p = pred.values();
    auto y = label.values();
    double s = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double d = p[i] - y[i];
        s += d * d;
    }
    return s / static_cast<double>(p.size());
}

struct GradientBundle {
    std::vector<double> d_params;  // same layout as EstimatorModel::parameters()
    RealGrid d_input;
};

// Reverse pass for a whole sample given dLoss/d(prediction) in RealGrid
// layout. Either output may be skipped.
inline GradientBundle backward_from(const EstimatorModel& m, const SampleCache& sc, std::span<const double> d_pred,
                                    bool want_params, bool want_input,
                                    const std::function<std::vector<HiddenGrad>(std::size_t plane)>& hidden = {}) {
    GradientBundle gb;
    if (want_params) gb.d_params.assign(m.param_count(), 0.0);
    std::vector<double> d_in(want_input ? sc.n_sub * sc.n_sym * sc.planes.size() : 0);
    for (std::size_t c = 0; c < sc.planes.size(); ++c) {
        std::vector<double> d_out(sc.n_sub * sc.n_sym);
        for (std::size_t k = 0; k < sc.n_sub; ++k)
            for (std::size_t n = 0; n < sc.n_sym; ++n) d_out[n * sc.n_sub + k] = d_pred[(k * sc.n_sym + n) * sc.planes.size() + c];
        std::vector<HiddenGrad> extra;
        if (hidden) extra = hidden(c);
        auto dx = backward_plane(m, sc.planes[c], d_out, gb.d_params, want_input, extra);
        if (want_input) scatter_plane(dx, c, sc.n_sub, sc.n_sym, sc.planes.size(), d_in);
    }
    if (want_input) gb.d_input = RealGrid(sc.n_sub, sc.n_sym, sc.planes.size(), std::move(d_in));
    return gb;
}

// Gradient of mse_loss(pred, label) w.r.t. pred.
inline std::vector<double> mse_grad(const RealGrid& pred, const RealGrid& label) {
    if (!pred.same_shape(label)) throw ShapeError("mse_grad: shape mismatch");
    auto p = pred.values();
    auto y = label.values();
    const double scale = 2.0 / static_cast<double>(p.size());
    std::vector<double> g(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) g[i] = scale * (p[i] - y[i]);
    return g;
}

// Exact gradients of mse_loss(forward(m, x), label) w.r.t. every parameter
// and every input element.
inline GradientBundle backward(const EstimatorModel& m, const RealGrid& x, const RealGrid& label, bool want_params = true,
                               bool want_input = true) {
    if (!x.same_shape(label)) throw ShapeError("backward: input and label shapes differ");
    thread_local SampleCache sc;
    forward_cached(m, x, sc);
    const RealGrid pred = sc.output();
    return backward_from(m, sc, mse_grad(pred, label), want_params, want_input);
}

// Input gradient only (the attack path).
inline RealGrid input_gradient(const EstimatorModel& m, const RealGrid& x, const RealGrid& label) {
    return backward(m, x, label, false, true).d_input;
}

// ---------------------------------------------------------------------------
// Training.

struct TrainConfig {
    double learning_rate = 0.001;
    double momentum = 0.9;
    std::size_t epochs = 100;
    std::size_t batch_size = 256;
    std::uint64_t seed = 0;
    // Optional progress callback: (epoch index, mean train loss, validation MSE or NaN).
    std::function<void(std::size_t, double, double)> on_epoch;

    void validate() const {
        if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) throw ConfigError("train: learning_rate must be >= 0");
        if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("train: momentum must lie in [0, 1)");
        if (epochs == 0) throw ConfigError("train: epochs must be >= 1");
        if (batch_size == 0) throw ConfigError("train: batch_size must be >= 1");
    }
};

struct LossHistory {
    std::vector<double> train_loss;  // mean batch loss seen during each epoch
    std::vector<double> val_mse;     // benign MSE on the validation set after each epoch (empty without one)
};

struct TrainResult {
    EstimatorModel model;
    LossHistory history;
};

// Per-sample objective: given the sample index and its forward cache, return
// the loss and fill dLoss/d(prediction) (RealGrid layout). Hidden-layer
// gradient terms may be added through `hidden`.
struct SampleObjective {
    std::function<double(std::size_t, const SampleCache&, std::vector<double>& d_pred,
                         std::vector<std::vector<double>>& hidden_grads)>
        loss;
    // Layer and kind for hidden_grads[plane] when non-empty.
    std::optional<HiddenGrad> hidden_target;
};

inline double evaluate_mse(const EstimatorModel& m, const Dataset& data) {
    if (data.empty()) throw EmptyDatasetError("evaluate: dataset is empty");
    std::vector<double> per(data.size());
    parallel_for(data.size(), [&](std::size_t i) { per[i] = mse_loss(forward(m, data.inputs[i]), data.labels[i]); });
    double s = 0.0;
    for (double v : per) s += v;
    return s / static_cast<double>(per.size());
}

// Hook invoked with each batch gradient before the update; lets a caller
// train auxiliary parameters (e.g. a projection head) alongside the model.
using BatchHook = std::function<void(std::span<const std::size_t> batch)>;

inline TrainResult train_with_objective(EstimatorModel m, const Dataset& data, const TrainConfig& cfg,
                                        const SampleObjective& objective, const Dataset* validation = nullptr,
                                        const BatchHook& after_batch = {}) {
    cfg.validate();
    if (data.empty()) throw EmptyDatasetError("train: dataset is empty");
    data.validate();
    const std::size_t n = data.size();
    const std::size_t n_params = m.param_count();
    std::vector<double> params = m.parameters();
    std::vector<double> velocity(n_params, 0.0);
    TrainResult result;

    std::vector<std::size_t> order(n);
    std::vector<std::vector<double>> sample_grads;
    std::vector<double> sample_loss;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        Rng rng = make_rng(derive_seed(cfg.seed, epoch));
        for (std::size_t i = n - 1; i > 0; --i) std::swap(order[i], order[static_cast<std::size_t>(rng() % (i + 1))]);

        double epoch_loss = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < n; start += cfg.batch_size) {
            const std::size_t end = std::min(n, start + cfg.batch_size);
            const std::size_t bs = end - start;
            std::span<const std::size_t> batch(order.data() + start, bs);
            sample_grads.assign(bs, {});
            sample_loss.assign(bs, 0.0);
            parallel_for(bs, [&](std::size_t j) {
                const std::size_t idx = batch[j];
                thread_local SampleCache sc;
                forward_cached(m, data.inputs[idx], sc);
                std::vector<double> d_pred;
                std::vector<std::vector<double>> hidden;
                sample_loss[j] = objective.loss(idx, sc, d_pred, hidden);
                std::function<std::vector<HiddenGrad>(std::size_t)> hook;
                if (!hidden.empty() && objective.hidden_target) {
                    hook = [&](std::size_t plane) {
                        HiddenGrad hg = *objective.hidden_target;
                        hg.grad = hidden[plane];
                        return std::vector<HiddenGrad>{hg};
                    };
                }
                sample_grads[j] = backward_from(m, sc, d_pred, true, false, hook).d_params;
            });
            // Fixed-order reduction keeps results independent of threading.
            std::vector<double> grad(n_params, 0.0);
            double batch_loss = 0.0;
            for (std::size_t j = 0; j < bs; ++j) {
                for (std::size_t p = 0; p < n_params; ++p) grad[p] += sample_grads[j][p];
                batch_loss += sample_loss[j];
            }
            const double inv = 1.0 / static_cast<double>(bs);
            for (std::size_t p = 0; p < n_params; ++p) {
                velocity[p] = cfg.momentum * velocity[p] - cfg.learning_rate * (grad[p] * inv);
                params[p] += velocity[p];
            }
            for (double v : params)
                if (!std::isfinite(v)) throw NumericError("train: parameters diverged to a non-finite value");
            m.set_parameters(params);
            if (after_batch) after_batch(batch);
            epoch_loss += batch_loss * inv;
            ++batches;
        }
        result.history.train_loss.push_back(epoch_loss / static_cast<double>(batches));
        if (validation && !validation->empty()) result.history.val_mse.push_back(evaluate_mse(m, *validation));
        if (cfg.on_epoch)
            cfg.on_epoch(epoch, result.history.train_loss.back(),
                         result.history.val_mse.empty() ? std::nan("") : result.history.val_mse.back());
    }
    result.model = std::move(m);
    return result;
}

// Plain supervised training on mse_loss with classic momentum SGD
// (v <- mu*v - lr*g; w <- w + v).
inline TrainResult train(EstimatorModel m, const Dataset& data, const TrainConfig& cfg, const Dataset* validation = nullptr) {
    SampleObjective obj;
    obj.loss = [&data](std::size_t idx, const SampleCache& sc, std::vector<double>& d_pred,
                       std::vector<std::vector<double>>&) {
        const RealGrid pred = sc.output();
        d_pred = mse_grad(pred, data.labels[idx]);
        return mse_loss(pred, data.labels[idx]);
    };
    return train_with_objective(std::move(m), data, cfg, obj, validation);
}

// ---------------------------------------------------------------------------
// CEMW checkpoint (little-endian):
//   "CEMW" | u32 version=1 | u8 arch_tag | u32 layer_count
//   | per layer: u32 out_ch, in_ch, kh, kw | u8 activation | f64 weights | f64 biases

inline constexpr char kCemwMagic[4] = {'C', 'E', 'M', 'W'};
inline constexpr std::uint32_t kCemwVersion = 1;

inline void save_model(const EstimatorModel& m, const std::filesystem::path& path) {
    m.validate();
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open '" + path.string() + "' for writing");
    os.write(kCemwMagic, 4);
    detail::write_pod(os, kCemwVersion);
    detail::write_pod(os, static_cast<std::uint8_t>(m.arch()));
    detail::write_pod(os, static_cast<std::uint32_t>(m.layers().size()));
    for (const auto& l : m.layers()) {
        detail::write_pod(os, static_cast<std::uint32_t>(l.out_ch));
        detail::write_pod(os, static_cast<std::uint32_t>(l.in_ch));
        detail::write_pod(os, static_cast<std::uint32_t>(l.kh));
        detail::write_pod(os, static_cast<std::uint32_t>(l.kw));
        detail::write_pod(os, static_cast<std::uint8_t>(l.activation));
        os.write(reinterpret_cast<const char*>(l.weights.data()), static_cast<std::streamsize>(l.weights.size() * sizeof(double)));
        os.write(reinterpret_cast<const char*>(l.bias.data()), static_cast<std::streamsize>(l.bias.size() * sizeof(double)));
    }
    if (!os) throw IoError("write failed for '" + path.string() + "'");
}

inline EstimatorModel load_model(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open '" + path.string() + "'");
    char magic[4]{};
    is.read(magic, 4);
    if (is.gcount() != 4 || std::memcmp(magic, kCemwMagic, 4) != 0) throw FormatError("bad magic, not a CEMW file");
    const auto version = detail::read_pod<std::uint32_t>(is, "version");
    if (version != kCemwVersion) throw FormatError("unsupported CEMW version " + std::to_string(version));
    const auto tag = detail::read_pod<std::uint8_t>(is, "arch_tag");
    if (tag > static_cast<std::uint8_t>(ArchTag::student)) throw FormatError("unknown arch tag in CEMW file");
    const auto n_layers = detail::read_pod<std::uint32_t>(is, "layer_count");
    if (n_layers == 0 || n_layers > 64) throw FormatError("implausible CEMW layer count");
    std::vector<ConvLayer> layers;
    for (std::uint32_t i = 0; i < n_layers; ++i) {
        ConvLayer l;
        l.out_ch = detail::read_pod<std::uint32_t>(is, "out_ch");
        l.in_ch = detail::read_pod<std::uint32_t>(is, "in_ch");
        l.kh = detail::read_pod<std::uint32_t>(is, "kh");
        l.kw = detail::read_pod<std::uint32_t>(is, "kw");
        const auto act = detail::read_pod<std::uint8_t>(is, "activation");
        if (act > static_cast<std::uint8_t>(Activation::linear)) throw FormatError("unknown activation in CEMW file");
        l.activation = static_cast<Activation>(act);
        if (l.out_ch == 0 || l.in_ch == 0 || l.kh == 0 || l.kw == 0 || l.weight_count() > (1u << 26))
            throw FormatError("implausible CEMW layer shape");
        l.weights.resize(l.weight_count());
        l.bias.resize(l.out_ch);
        auto slurp = [&](std::vector<double>& v) {
            is.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
            if (is.gcount() != static_cast<std::streamsize>(v.size() * sizeof(double))) throw FormatError("truncated CEMW file");
        };
        slurp(l.weights);
        slurp(l.bias);
        layers.push_back(std::move(l));
    }
    if (is.peek() != std::char_traits<char>::eof()) throw FormatError("trailing bytes after CEMW payload");
    try {
        return EstimatorModel(static_cast<ArchTag>(tag), std::move(layers));
    } catch (const ShapeError& e) {
        throw FormatError(std::string("inconsistent CEMW layers: ") + e.what());
    }
}

}  // namespace chanest
