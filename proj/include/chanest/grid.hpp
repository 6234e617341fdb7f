#pragma once

// Resource-grid value types, the dataset container and the CEGD file format.

#include <algorithm>
#include <bit>
#include <cmath>
#include <complex>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "chanest/error.hpp"
#include "chanest/rng.hpp"
#include "chanest/scenario.hpp"

namespace chanest {

inline constexpr std::size_t kDefaultSubcarriers = 612;
inline constexpr std::size_t kDefaultSymbols = 14;
inline constexpr std::size_t kPlanes = 2;  // real, imaginary

using cplx = std::complex<double>;

namespace detail {

inline bool all_finite(std::span<const double> v) {
    return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

inline bool all_finite(std::span<const cplx> v) {
    return std::all_of(v.begin(), v.end(),
                       [](const cplx& z) { return std::isfinite(z.real()) && std::isfinite(z.imag()); });
}

}  // namespace detail

// Subcarrier x symbol matrix of complex values, subcarrier-major.
class ComplexGrid {
public:
    ComplexGrid() = default;

    ComplexGrid(std::size_t n_sub, std::size_t n_sym, cplx fill = {})
        : n_sub_(n_sub), n_sym_(n_sym), data_(n_sub * n_sym, fill) {
        if (n_sub == 0 || n_sym == 0) throw ShapeError("ComplexGrid: empty shape");
        if (!std::isfinite(fill.real()) || !std::isfinite(fill.imag()))
            throw NumericError("ComplexGrid: non-finite fill value");
    }

    ComplexGrid(std::size_t n_sub, std::size_t n_sym, std::vector<cplx> data)
        : n_sub_(n_sub), n_sym_(n_sym), data_(std::move(data)) {
        if (n_sub == 0 || n_sym == 0) throw ShapeError("ComplexGrid: empty shape");
        if (data_.size() != n_sub * n_sym) throw ShapeError("ComplexGrid: data size does not match shape");
        if (!detail::all_finite(std::span<const cplx>(data_))) throw NumericError("ComplexGrid: non-finite value");
    }

    std::size_t n_sub() const noexcept { return n_sub_; }
    std::size_t n_sym() const noexcept { return n_sym_; }
    std::size_t size() const noexcept { return data_.size(); }

    const cplx& at(std::size_t k, std::size_t n) const { return data_[index(k, n)]; }

    void set(std::size_t k, std::size_t n, cplx v) {
        if (!std::isfinite(v.real()) || !std::isfinite(v.imag()))
            throw NumericError("ComplexGrid: non-finite value");
        data_[index(k, n)] = v;
    }

    std::span<const cplx> values() const noexcept { return data_; }

    bool same_shape(const ComplexGrid& o) const noexcept { return n_sub_ == o.n_sub_ && n_sym_ == o.n_sym_; }

    friend bool operator==(const ComplexGrid&, const ComplexGrid&) = default;

private:
    std::size_t index(std::size_t k, std::size_t n) const {
        if (k >= n_sub_ || n >= n_sym_) throw ShapeError("ComplexGrid: index out of range");
        return k * n_sym_ + n;
    }

    std::size_t n_sub_ = 0;
    std::size_t n_sym_ = 0;
    std::vector<cplx> data_;
};

// Real-valued n_sub x n_sym x n_chan tensor; channel 0 holds the real part,
// channel 1 the imaginary part. Layout is subcarrier, then symbol, then channel.
class RealGrid {
public:
    RealGrid() = default;

    RealGrid(std::size_t n_sub, std::size_t n_sym, std::size_t n_chan = kPlanes)
        : n_sub_(n_sub), n_sym_(n_sym), n_chan_(n_chan), data_(n_sub * n_sym * n_chan, 0.0) {
        if (n_sub == 0 || n_sym == 0 || n_chan == 0) throw ShapeError("RealGrid: empty shape");
    }

    RealGrid(std::size_t n_sub, std::size_t n_sym, std::size_t n_chan, std::vector<double> data)
        : n_sub_(n_sub), n_sym_(n_sym), n_chan_(n_chan), data_(std::move(data)) {
        if (n_sub == 0 || n_sym == 0 || n_chan == 0) throw ShapeError("RealGrid: empty shape");
        if (data_.size() != n_sub * n_sym * n_chan) throw ShapeError("RealGrid: data size does not match shape");
        if (!detail::all_finite(std::span<const double>(data_))) throw NumericError("RealGrid: non-finite value");
    }

    std::size_t n_sub() const noexcept { return n_sub_; }
    std::size_t n_sym() const noexcept { return n_sym_; }
    std::size_t n_chan() const noexcept { return n_chan_; }
    std::size_t size() const noexcept { return data_.size(); }

    double at(std::size_t k, std::size_t n, std::size_t c) const { return data_[index(k, n, c)]; }

    void set(std::size_t k, std::size_t n, std::size_t c, double v) {
        if (!std::isfinite(v)) throw NumericError("RealGrid: non-finite value");
        data_[index(k, n, c)] = v;
    }

    std::span<const double> values() const noexcept { return data_; }

    bool same_shape(const RealGrid& o) const noexcept {
        return n_sub_ == o.n_sub_ && n_sym_ == o.n_sym_ && n_chan_ == o.n_chan_;
    }

    friend bool operator==(const RealGrid&, const RealGrid&) = default;

private:
    std::size_t index(std::size_t k, std::size_t n, std::size_t c) const {
        if (k >= n_sub_ || n >= n_sym_ || c >= n_chan_) throw ShapeError("RealGrid: index out of range");
        return (k * n_sym_ + n) * n_chan_ + c;
    }

    std::size_t n_sub_ = 0;
    std::size_t n_sym_ = 0;
    std::size_t n_chan_ = 0;
    std::vector<double> data_;
};

inline RealGrid to_real(const ComplexGrid& g) {
    std::vector<double> out;
    out.reserve(g.size() * kPlanes);
    for (const cplx& z : g.values()) {
        out.push_back(z.real());
        out.push_back(z.imag());
    }
    return RealGrid(g.n_sub(), g.n_sym(), kPlanes, std::move(out));
}

inline ComplexGrid to_complex(const RealGrid& g) {
    if (g.n_chan() != kPlanes) throw ShapeError("to_complex: expected 2 channels, got " + std::to_string(g.n_chan()));
    std::vector<cplx> out(g.n_sub() * g.n_sym());
    auto v = g.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = {v[2 * i], v[2 * i + 1]};
    return ComplexGrid(g.n_sub(), g.n_sym(), std::move(out));
}

enum class SplitTag : std::uint8_t { all, train, test };

struct Dataset {
    std::vector<RealGrid> inputs;
    std::vector<RealGrid> labels;
    std::vector<ChannelScenario> scenarios;
    SplitTag split_tag = SplitTag::all;

    std::size_t size() const noexcept { return inputs.size(); }
    bool empty() const noexcept { return inputs.empty(); }

    // Throws ShapeError unless the parallel arrays agree and share one shape.
    void validate() const {
        if (inputs.size() != labels.size() || inputs.size() != scenarios.size())
            throw ShapeError("Dataset: inputs/labels/scenarios length mismatch");
        for (std::size_t i = 0; i < inputs.size(); ++i) {
            if (!inputs[i].same_shape(inputs[0]) || !labels[i].same_shape(inputs[0]))
                throw ShapeError("Dataset: grids differ in shape at sample " + std::to_string(i));
        }
    }

    Dataset subset(std::span<const std::size_t> idx, SplitTag tag) const {
        Dataset d;
        d.split_tag = tag;
        d.inputs.reserve(idx.size());
        d.labels.reserve(idx.size());
        d.scenarios.reserve(idx.size());
        for (std::size_t i : idx) {
            d.inputs.push_back(inputs.at(i));
            d.labels.push_back(labels.at(i));
            d.scenarios.push_back(scenarios.at(i));
        }
        return d;
    }

    friend bool operator==(const Dataset&, const Dataset&) = default;
};

// Index permutation used by split_dataset; exposed so the partition itself
// can be inspected.
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_indices(std::size_t n,
                                                                                   double train_fraction,
                                                                                   std::uint64_t seed) {
    if (!(train_fraction > 0.0 && train_fraction < 1.0))
        throw ConfigError("split: train_fraction must lie strictly between 0 and 1");
    if (n == 0) throw EmptyDatasetError("split: dataset is empty");
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    // Fisher-Yates with an explicit draw so the permutation does not depend
    // on the standard library's shuffle implementation.
    Rng rng = make_rng(seed);
    for (std::size_t i = n - 1; i > 0; --i) {
        std::size_t j = static_cast<std::size_t>(rng() % (i + 1));
        std::swap(perm[i], perm[j]);
    }
    auto n_train = static_cast<std::size_t>(std::floor(train_fraction * static_cast<double>(n)));
    std::vector<std::size_t> train(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_train));
    std::vector<std::size_t> test(perm.begin() + static_cast<std::ptrdiff_t>(n_train), perm.end());
    return {std::move(train), std::move(test)};
}

inline std::pair<Dataset, Dataset> split_dataset(const Dataset& d, double train_fraction, std::uint64_t seed) {
    d.validate();
    auto [train, test] = split_indices(d.size(), train_fraction, seed);
    return {d.subset(train, SplitTag::train), d.subset(test, SplitTag::test)};
}

// 64-bit FNV-1a hash over shapes and values of inputs and labels; identifies
// the data a report was computed on.
inline std::uint64_t dataset_fingerprint(const Dataset& d) {
    std::uint64_t h = 1469598103934665603ULL;
    auto mix = [&h](const void* p, std::size_t n) {
        const auto* b = static_cast<const unsigned char*>(p);
        for (std::size_t i = 0; i < n; ++i) {
            h ^= b[i];
            h *= 1099511628211ULL;
        }
    };
    const std::uint64_t n = d.size();
    mix(&n, sizeof n);
    for (const auto* grids : {&d.inputs, &d.labels})
        for (const auto& g : *grids) {
            const std::uint64_t shape[3] = {g.n_sub(), g.n_sym(), g.n_chan()};
            mix(shape, sizeof shape);
            mix(g.values().data(), g.values().size() * sizeof(double));
        }
    return h;
}

// ---------------------------------------------------------------------------
// CEGD binary format (little-endian):
//   "CEGD" | u32 version=1 | u32 n_samples | u32 n_sub | u32 n_sym | u32 n_chan
//   | f32 inputs[n_samples*n_sub*n_sym*n_chan] | f32 labels[same]
// Scenarios live in the JSON sidecar "<file>.meta.json".

inline constexpr char kCegdMagic[4] = {'C', 'E', 'G', 'D'};
inline constexpr std::uint32_t kCegdVersion = 1;

namespace detail {

static_assert(std::endian::native == std::endian::little, "CEGD/CEMW I/O assumes a little-endian host");

template <typename T>
void write_pod(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is, const char* what) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (is.gcount() != static_cast<std::streamsize>(sizeof(T)))
        throw FormatError(std::string("truncated file while reading ") + what);
    return v;
}

inline std::string sidecar_path(const std::filesystem::path& p, const char* suffix) {
    return p.string() + suffix;
}

}  // namespace detail

inline void save_dataset(const Dataset& d, const std::filesystem::path& path) {
    d.validate();
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open '" + path.string() + "' for writing");
    const std::uint32_t n = static_cast<std::uint32_t>(d.size());
    const std::uint32_t n_sub = d.empty() ? 0 : static_cast<std::uint32_t>(d.inputs[0].n_sub());
    const std::uint32_t n_sym = d.empty() ? 0 : static_cast<std::uint32_t>(d.inputs[0].n_sym());
    const std::uint32_t n_chan = d.empty() ? 0 : static_cast<std::uint32_t>(d.inputs[0].n_chan());
    os.write(kCegdMagic, 4);
    detail::write_pod(os, kCegdVersion);
    detail::write_pod(os, n);
    detail::write_pod(os, n_sub);
    detail::write_pod(os, n_sym);
    detail::write_pod(os, n_chan);
    std::vector<float> buf;
    auto dump = [&](const std::vector<RealGrid>& grids) {
        for (const auto& g : grids) {
            auto v = g.values();
            buf.assign(v.begin(), v.end());
            os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
        }
    };
    dump(d.inputs);
    dump(d.labels);
    if (!os) throw IoError("write failed for '" + path.string() + "'");

    std::ofstream meta(detail::sidecar_path(path, ".meta.json"), std::ios::trunc);
    if (!meta) throw IoError("cannot write sidecar for '" + path.string() + "'");
    meta << nlohmann::json(d.scenarios).dump(1) << '\n';
    if (!meta) throw IoError("write failed for sidecar of '" + path.string() + "'");
}

inline Dataset load_dataset(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open '" + path.string() + "'");
    char magic[4]{};
    is.read(magic, 4);
    if (is.gcount() != 4 || std::memcmp(magic, kCegdMagic, 4) != 0) throw FormatError("bad magic, not a CEGD file");
    const auto version = detail::read_pod<std::uint32_t>(is, "version");
    if (version != kCegdVersion) throw FormatError("unsupported CEGD version " + std::to_string(version));
    const auto n = detail::read_pod<std::uint32_t>(is, "n_samples");
    const auto n_sub = detail::read_pod<std::uint32_t>(is, "n_sub");
    const auto n_sym = detail::read_pod<std::uint32_t>(is, "n_sym");
    const auto n_chan = detail::read_pod<std::uint32_t>(is, "n_chan");
    if (n > 0 && (n_sub == 0 || n_sym == 0 || n_chan == 0)) throw FormatError("CEGD header has an empty grid shape");

    const std::size_t per = std::size_t{n_sub} * n_sym * n_chan;
    Dataset d;
    std::vector<float> buf(per);
    auto slurp = [&](std::vector<RealGrid>& grids, const char* what) {
        grids.reserve(n);
        for (std::uint32_t i = 0; i < n; ++i) {
            is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(per * sizeof(float)));
            if (is.gcount() != static_cast<std::streamsize>(per * sizeof(float)))
                throw FormatError(std::string("truncated CEGD payload in ") + what);
            std::vector<double> v(buf.begin(), buf.end());
            try {
                grids.emplace_back(n_sub, n_sym, n_chan, std::move(v));
            } catch (const NumericError&) {
                throw FormatError(std::string("non-finite value in CEGD ") + what);
            }
        }
    };
    slurp(d.inputs, "inputs");
    slurp(d.labels, "labels");
    if (is.peek() != std::char_traits<char>::eof()) throw FormatError("trailing bytes after CEGD payload");

    const auto meta_path = detail::sidecar_path(path, ".meta.json");
    std::ifstream meta(meta_path);
    if (meta) {
        try {
            d.scenarios = nlohmann::json::parse(meta).get<std::vector<ChannelScenario>>();
        } catch (const nlohmann::json::exception& e) {
            throw FormatError("bad sidecar '" + meta_path + "': " + e.what());
        }
        if (d.scenarios.size() != n) throw FormatError("sidecar scenario count does not match CEGD sample count");
    } else {
        d.scenarios.assign(n, ChannelScenario{});
    }
    return d;
}

}  // namespace chanest
