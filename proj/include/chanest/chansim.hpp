#pragma once

// Synthetic OFDM channel-estimation data: TDL fading channels, pilot grids,
// LS-interpolated estimates (model inputs) and perfect channel labels.

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <numbers>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "chanest/error.hpp"
#include "chanest/grid.hpp"
#include "chanest/parallel.hpp"
#include "chanest/rng.hpp"
#include "chanest/scenario.hpp"

namespace chanest {

// Tapped-delay-line description of one channel draw.
struct TapSet {
    std::vector<double> delays;  // seconds, nondecreasing, delays[0] == 0
    std::vector<double> powers;  // linear, sums to 1
    double rician_k = 0.0;       // linear K-factor of tap 0 (0 for NLOS profiles)

    std::size_t size() const noexcept { return delays.size(); }
};

// Per-tap, per-OFDM-symbol complex gains; coeffs[l][t].
struct FadingProcess {
    std::vector<std::vector<cplx>> coeffs;
    double symbol_period = 0.0;

    std::size_t n_taps() const noexcept { return coeffs.size(); }
    std::size_t n_sym() const noexcept { return coeffs.empty() ? 0 : coeffs.front().size(); }
};

enum class Modulation : std::uint8_t { QAM16 };

struct OfdmConfig {
    std::size_t n_sub = kDefaultSubcarriers;
    std::size_t n_sym = kDefaultSymbols;
    std::size_t nfft = 1024;
    double sample_rate = 30'720'000.0;
    std::size_t cp_len = 72;  // normal cyclic prefix, samples
    std::vector<std::size_t> pilot_symbol_indices{2, 11};
    std::size_t pilot_subcarrier_stride = 2;
    Modulation data_modulation = Modulation::QAM16;

    double subcarrier_spacing() const noexcept { return sample_rate / static_cast<double>(nfft); }
    double symbol_period() const noexcept { return static_cast<double>(nfft + cp_len) / sample_rate; }

    void validate() const {
        if (n_sub == 0 || n_sym == 0) throw ConfigError("ofdm: empty grid");
        if (n_sub > nfft) throw ConfigError("ofdm: n_sub exceeds nfft");
        if (!(sample_rate > 0.0)) throw ConfigError("ofdm: sample_rate must be positive");
        if (pilot_subcarrier_stride == 0) throw ConfigError("ofdm: pilot_stride must be >= 1");
        for (auto s : pilot_symbol_indices)
            if (s >= n_sym) throw ConfigError("ofdm: pilot symbol index out of range");
    }
};

// Ranges that sample_scenario draws from.
struct ScenarioRanges {
    std::vector<TdlProfile> profiles{kAllProfiles.begin(), kAllProfiles.end()};
    double delay_spread_min = 1e-9, delay_spread_max = 300e-9;  // seconds
    double doppler_min = 5.0, doppler_max = 400.0;              // Hz
    double snr_min_db = 0.0, snr_max_db = 10.0;
};

// Everything generate_dataset needs.
struct GeneratorConfig {
    OfdmConfig ofdm;
    ScenarioRanges ranges;
    bool simple_pdp = false;  // exponential 8-tap PDP instead of the TDL tables
};

// ---------------------------------------------------------------------------
// Scenario config JSON.

namespace detail {

inline const nlohmann::json& require(const nlohmann::json& j, const char* key) {
    if (!j.is_object() || !j.contains(key)) throw ConfigError(std::string("missing config field '") + key + "'");
    return j.at(key);
}

template <typename T>
T require_as(const nlohmann::json& j, const char* key) {
    try {
        return require(j, key).get<T>();
    } catch (const nlohmann::json::exception&) {
        throw ConfigError(std::string("config field '") + key + "' has the wrong type");
    }
}

inline std::pair<double, double> require_range(const nlohmann::json& j, const char* key) {
    auto v = require_as<std::vector<double>>(j, key);
    if (v.size() != 2 || !(v[0] <= v[1])) throw ConfigError(std::string("config field '") + key + "' must be [lo, hi]");
    return {v[0], v[1]};
}

}  // namespace detail

inline GeneratorConfig generator_config_from_json(const nlohmann::json& j) {
    using detail::require_as;
    using detail::require_range;
    GeneratorConfig g;
    g.ofdm.n_sub = require_as<std::size_t>(j, "n_sub");
    g.ofdm.n_sym = require_as<std::size_t>(j, "n_sym");
    g.ofdm.nfft = require_as<std::size_t>(j, "nfft");
    g.ofdm.sample_rate = require_as<double>(j, "sample_rate");
    g.ofdm.pilot_symbol_indices = require_as<std::vector<std::size_t>>(j, "pilot_symbols");
    g.ofdm.pilot_subcarrier_stride = require_as<std::size_t>(j, "pilot_stride");
    g.ranges.profiles.clear();
    for (const auto& p : require_as<std::vector<std::string>>(j, "profiles")) g.ranges.profiles.push_back(parse_profile(p));
    if (g.ranges.profiles.empty()) throw ConfigError("config field 'profiles' is empty");
    auto [ds_lo, ds_hi] = require_range(j, "delay_spread_ns");
    g.ranges.delay_spread_min = ds_lo * 1e-9;
    g.ranges.delay_spread_max = ds_hi * 1e-9;
    std::tie(g.ranges.doppler_min, g.ranges.doppler_max) = require_range(j, "doppler_hz");
    std::tie(g.ranges.snr_min_db, g.ranges.snr_max_db) = require_range(j, "snr_db");
    if (j.contains("simple_pdp")) g.simple_pdp = require_as<bool>(j, "simple_pdp");
    g.ofdm.validate();
    return g;
}

inline nlohmann::json generator_config_to_json(const GeneratorConfig& g) {
    std::vector<std::string> profiles;
    for (auto p : g.ranges.profiles) profiles.emplace_back(1, static_cast<char>('A' + static_cast<int>(p)));
    return {{"n_sub", g.ofdm.n_sub},
            {"n_sym", g.ofdm.n_sym},
            {"nfft", g.ofdm.nfft},
            {"sample_rate", g.ofdm.sample_rate},
            {"profiles", profiles},
            {"delay_spread_ns", {g.ranges.delay_spread_min * 1e9, g.ranges.delay_spread_max * 1e9}},
            {"doppler_hz", {g.ranges.doppler_min, g.ranges.doppler_max}},
            {"snr_db", {g.ranges.snr_min_db, g.ranges.snr_max_db}},
            {"pilot_symbols", g.ofdm.pilot_symbol_indices},
            {"pilot_stride", g.ofdm.pilot_subcarrier_stride},
            {"simple_pdp", g.simple_pdp},
            // Recorded for reference; a single-slot grid does not use them.
            {"slots_per_subframe", 2},
            {"slots_per_frame", 20}};
}

// ---------------------------------------------------------------------------
// Scenarios and tap tables.

inline ChannelScenario sample_scenario(std::uint64_t rng_seed, const ScenarioRanges& r = {}) {
    if (r.profiles.empty()) throw ConfigError("sample_scenario: no profiles to draw from");
    Rng rng = make_rng(rng_seed);
    std::uniform_int_distribution<std::size_t> pick(0, r.profiles.size() - 1);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    ChannelScenario s;
    s.profile = r.profiles[pick(rng)];
    s.delay_spread = r.delay_spread_min + (r.delay_spread_max - r.delay_spread_min) * unit(rng);
    s.max_doppler = r.doppler_min + (r.doppler_max - r.doppler_min) * unit(rng);
    s.snr_db = r.snr_min_db + (r.snr_max_db - r.snr_min_db) * unit(rng);
    s.seed = rng();
    return s;
}

namespace detail {

struct TdlRow {
    double norm_delay;
    double power_db;
};

// First 12 taps (table order) of the 3GPP TR 38.901 TDL-A..E power-delay
// profiles. For the LOS profiles the first row carries the combined LOS and
// Rayleigh power of tap 1; the K-factor is kept separately.
inline constexpr TdlRow kTdlA[12] = {{0.0000, -13.4}, {0.3819, 0.0},  {0.4025, -2.2}, {0.5868, -4.0},
                                     {0.4610, -6.0},  {0.5375, -8.2}, {0.6708, -9.9}, {0.5750, -10.5},
                                     {0.7618, -7.5},  {1.5375, -15.9}, {1.8978, -6.6}, {2.2242, -16.7}};
inline constexpr TdlRow kTdlB[12] = {{0.0000, 0.0},  {0.1072, -2.2}, {0.2155, -4.0}, {0.2095, -3.2},
                                     {0.2870, -9.8}, {0.2986, -1.2}, {0.3752, -3.4}, {0.5055, -5.2},
                                     {0.3681, -7.6}, {0.3697, -3.0}, {0.5700, -8.9}, {0.5283, -9.0}};
inline constexpr TdlRow kTdlC[12] = {{0.0000, -4.4}, {0.2099, -1.2}, {0.2219, -3.5}, {0.2329, -5.2},
                                     {0.2176, -2.5}, {0.6366, 0.0},  {0.6448, -2.2}, {0.6560, -3.9},
                                     {0.6584, -7.4}, {0.7935, -7.1}, {0.8213, -10.7}, {0.9336, -11.1}};
// Tap 1: LOS -0.2 dB plus Rayleigh -13.5 dB; K = 13.3 dB.
inline constexpr TdlRow kTdlD[12] = {{0.000, -0.0015}, {0.035, -18.8}, {0.612, -21.0}, {1.363, -22.8},
                                     {1.405, -17.9},   {1.804, -20.1}, {2.596, -21.9}, {1.775, -22.9},
                                     {4.042, -27.8},   {7.937, -23.6}, {9.424, -24.8}, {9.708, -30.0}};
// Tap 1: LOS -0.03 dB plus Rayleigh -22.03 dB; K = 22 dB.
inline constexpr TdlRow kTdlE[12] = {{0.0000, -0.0027}, {0.5133, -15.8}, {0.5440, -18.1}, {0.5630, -19.8},
                                     {0.5440, -22.9},   {0.7112, -22.4}, {1.9092, -18.6}, {1.9293, -20.8},
                                     {1.9589, -22.6},   {2.6426, -22.3}, {3.7136, -25.6}, {5.4524, -20.2}};

inline double db_to_linear(double db) { return std::pow(10.0, db / 10.0); }

}  // namespace detail

inline TapSet make_tapset(TdlProfile profile, double delay_spread, bool simple_pdp = false) {
    if (!(delay_spread >= 0.0) || !std::isfinite(delay_spread)) throw ConfigError("make_tapset: invalid delay spread");
    TapSet t;
    if (simple_pdp) {
        // Exponential PDP, 8 taps at half-delay-spread spacing.
        for (int l = 0; l < 8; ++l) {
            t.delays.push_back(0.5 * l * delay_spread);
            t.powers.push_back(std::exp(-0.5 * l));
        }
    } else {
        std::span<const detail::TdlRow> rows;
        switch (profile) {
            case TdlProfile::A: rows = detail::kTdlA; break;
            case TdlProfile::B: rows = detail::kTdlB; break;
            case TdlProfile::C: rows = detail::kTdlC; break;
            case TdlProfile::D: rows = detail::kTdlD; t.rician_k = detail::db_to_linear(13.3); break;
            case TdlProfile::E: rows = detail::kTdlE; t.rician_k = detail::db_to_linear(22.0); break;
        }
        std::vector<std::size_t> order(rows.size());
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::stable_sort(order.begin(), order.end(),
                         [&](std::size_t a, std::size_t b) { return rows[a].norm_delay < rows[b].norm_delay; });
        for (std::size_t i : order) {
            t.delays.push_back(rows[i].norm_delay * delay_spread);
            t.powers.push_back(detail::db_to_linear(rows[i].power_db));
        }
    }
    const double total = std::accumulate(t.powers.begin(), t.powers.end(), 0.0);
    for (double& p : t.powers) p /= total;
    return t;
}

// ---------------------------------------------------------------------------
// Time variation: Clarke sum-of-sinusoids per tap, block-constant per symbol.

inline constexpr int kSinusoidsPerTap = 16;

inline FadingProcess evolve_fading(const TapSet& taps, const ChannelScenario& scenario, std::size_t n_sym,
                                   double symbol_period) {
    if (n_sym == 0) throw ConfigError("evolve_fading: n_sym must be >= 1");
    Rng rng = make_rng(derive_seed(scenario.seed, 1));
    std::uniform_real_distribution<double> angle(-std::numbers::pi, std::numbers::pi);
    const double two_pi_fd = 2.0 * std::numbers::pi * scenario.max_doppler;

    FadingProcess proc;
    proc.symbol_period = symbol_period;
    proc.coeffs.assign(taps.size(), std::vector<cplx>(n_sym));
    for (std::size_t l = 0; l < taps.size(); ++l) {
        const double k = (l == 0) ? taps.rician_k : 0.0;
        const double diffuse_amp = std::sqrt(taps.powers[l] / (1.0 + k) / kSinusoidsPerTap);
        double doppler[kSinusoidsPerTap];
        double phase[kSinusoidsPerTap];
        for (int m = 0; m < kSinusoidsPerTap; ++m) {
            doppler[m] = two_pi_fd * std::cos(angle(rng));
            phase[m] = angle(rng);
        }
        const double los_phase = angle(rng);
        const double los_amp = std::sqrt(taps.powers[l] * k / (1.0 + k));
        for (std::size_t t = 0; t < n_sym; ++t) {
            const double time = static_cast<double>(t) * symbol_period;
            cplx h{};
            for (int m = 0; m < kSinusoidsPerTap; ++m) h += std::polar(diffuse_amp, doppler[m] * time + phase[m]);
            // LOS ray arrives along the direction of travel.
            if (k > 0.0) h += std::polar(los_amp, two_pi_fd * time + los_phase);
            proc.coeffs[l][t] = h;
        }
    }
    return proc;
}

// Baseband frequency of subcarrier k, centred on DC.
inline double subcarrier_frequency(std::size_t k, const OfdmConfig& cfg) {
    return (static_cast<double>(k) - static_cast<double>(cfg.n_sub / 2)) * cfg.subcarrier_spacing();
}

inline ComplexGrid frequency_response(const FadingProcess& proc, const TapSet& taps, const OfdmConfig& cfg) {
    if (proc.n_taps() != taps.size()) throw ShapeError("frequency_response: tap count mismatch");
    if (proc.n_sym() != cfg.n_sym) throw ShapeError("frequency_response: symbol count mismatch");
    std::vector<cplx> out(cfg.n_sub * cfg.n_sym);
    for (std::size_t l = 0; l < taps.size(); ++l) {
        for (std::size_t k = 0; k < cfg.n_sub; ++k) {
            const cplx rot = std::polar(1.0, -2.0 * std::numbers::pi * subcarrier_frequency(k, cfg) * taps.delays[l]);
            for (std::size_t t = 0; t < cfg.n_sym; ++t) out[k * cfg.n_sym + t] += proc.coeffs[l][t] * rot;
        }
    }
    return ComplexGrid(cfg.n_sub, cfg.n_sym, std::move(out));
}

// ---------------------------------------------------------------------------
// Pilots, transmission and LS estimation.

// Separable pilot lattice: every listed subcarrier on every listed symbol.
struct PilotPattern {
    std::vector<std::size_t> symbols;
    std::vector<std::size_t> subcarriers;

    std::size_t count() const noexcept { return symbols.size() * subcarriers.size(); }

    bool contains(std::size_t k, std::size_t t) const {
        return std::binary_search(symbols.begin(), symbols.end(), t) &&
               std::binary_search(subcarriers.begin(), subcarriers.end(), k);
    }
};

inline PilotPattern pilot_pattern(const OfdmConfig& cfg) {
    PilotPattern p;
    p.symbols = cfg.pilot_symbol_indices;
    std::sort(p.symbols.begin(), p.symbols.end());
    p.symbols.erase(std::unique(p.symbols.begin(), p.symbols.end()), p.symbols.end());
    for (std::size_t k = 0; k < cfg.n_sub; k += cfg.pilot_subcarrier_stride) p.subcarriers.push_back(k);
    return p;
}

inline ComplexGrid build_pilot_grid(const OfdmConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    const PilotPattern pat = pilot_pattern(cfg);
    Rng rng = make_rng(seed);
    std::uniform_int_distribution<int> qam_level(0, 3);
    std::uniform_int_distribution<int> bit(0, 1);
    const double qam_scale = 1.0 / std::sqrt(10.0);
    const double qpsk_scale = 1.0 / std::sqrt(2.0);
    std::vector<cplx> x(cfg.n_sub * cfg.n_sym);
    for (std::size_t k = 0; k < cfg.n_sub; ++k) {
        for (std::size_t t = 0; t < cfg.n_sym; ++t) {
            cplx v;
            if (pat.contains(k, t)) {
                v = {qpsk_scale * (bit(rng) ? 1.0 : -1.0), qpsk_scale * (bit(rng) ? 1.0 : -1.0)};
            } else {
                v = {qam_scale * (2 * qam_level(rng) - 3), qam_scale * (2 * qam_level(rng) - 3)};
            }
            x[k * cfg.n_sym + t] = v;
        }
    }
    return ComplexGrid(cfg.n_sub, cfg.n_sym, std::move(x));
}

// Y = H.X + W with W scaled to the requested SNR against the realised signal
// power. snr_db = +infinity disables the noise.
inline ComplexGrid transmit(const ComplexGrid& tx, const ComplexGrid& h, double snr_db, std::uint64_t seed) {
    if (!tx.same_shape(h)) throw ShapeError("transmit: tx and channel grids differ in shape");
    auto xv = tx.values();
    auto hv = h.values();
    std::vector<cplx> y(xv.size());
    double signal_power = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) {
        y[i] = hv[i] * xv[i];
        signal_power += std::norm(y[i]);
    }
    signal_power /= static_cast<double>(y.size());
    if (!(std::isinf(snr_db) && snr_db > 0)) {
        const double noise_var = signal_power / std::pow(10.0, snr_db / 10.0);
        Rng rng = make_rng(seed);
        std::normal_distribution<double> gauss(0.0, std::sqrt(noise_var / 2.0));
        for (auto& v : y) {
            const double re = gauss(rng);
            const double im = gauss(rng);
            v += cplx{re, im};
        }
    }
    return ComplexGrid(tx.n_sub(), tx.n_sym(), std::move(y));
}

namespace detail {

// Linear interpolation of knot values onto [0, n); constant beyond the
// outermost knots. Knots must be sorted and unique.
inline void interpolate_axis(std::span<const std::size_t> knots, std::span<const cplx> knot_values,
                             std::span<cplx> out) {
    std::size_t seg = 0;
    for (std::size_t i = 0; i < out.size(); ++i) {
        if (i <= knots.front()) {
            out[i] = knot_values.front();
        } else if (i >= knots.back()) {
            out[i] = knot_values.back();
        } else {
            while (knots[seg + 1] < i) ++seg;
            if (knots[seg + 1] == i) {
                out[i] = knot_values[seg + 1];
            } else {
                const double w = static_cast<double>(i - knots[seg]) / static_cast<double>(knots[seg + 1] - knots[seg]);
                out[i] = (1.0 - w) * knot_values[seg] + w * knot_values[seg + 1];
            }
        }
    }
}

}  // namespace detail

inline ComplexGrid ls_interpolate(const ComplexGrid& rx, const ComplexGrid& tx, const PilotPattern& pilots) {
    if (!rx.same_shape(tx)) throw ShapeError("ls_interpolate: rx and tx grids differ in shape");
    if (pilots.symbols.size() < 2 || pilots.subcarriers.size() < 2)
        throw DegenerateMaskError("ls_interpolate: need at least 2 pilot symbols and 2 pilot subcarriers");
    if (!std::is_sorted(pilots.symbols.begin(), pilots.symbols.end()) ||
        std::adjacent_find(pilots.symbols.begin(), pilots.symbols.end()) != pilots.symbols.end() ||
        !std::is_sorted(pilots.subcarriers.begin(), pilots.subcarriers.end()) ||
        std::adjacent_find(pilots.subcarriers.begin(), pilots.subcarriers.end()) != pilots.subcarriers.end())
        throw DegenerateMaskError("ls_interpolate: pilot indices must be sorted and unique");
    if (pilots.symbols.back() >= rx.n_sym() || pilots.subcarriers.back() >= rx.n_sub())
        throw DegenerateMaskError("ls_interpolate: pilot index outside the grid");

    const std::size_t n_sub = rx.n_sub();
    const std::size_t n_sym = rx.n_sym();
    const std::size_t n_ps = pilots.symbols.size();

    // Frequency interpolation on each pilot symbol: freq[s][k].
    std::vector<std::vector<cplx>> freq(n_ps, std::vector<cplx>(n_sub));
    std::vector<cplx> knot_values(pilots.subcarriers.size());
    for (std::size_t s = 0; s < n_ps; ++s) {
        const std::size_t t = pilots.symbols[s];
        for (std::size_t p = 0; p < pilots.subcarriers.size(); ++p) {
            const std::size_t k = pilots.subcarriers[p];
            const cplx x = tx.at(k, t);
            if (x == cplx{}) throw DegenerateMaskError("ls_interpolate: zero pilot symbol");
            knot_values[p] = rx.at(k, t) / x;
        }
        detail::interpolate_axis(pilots.subcarriers, knot_values, freq[s]);
    }

    // Time interpolation across pilot symbols for each subcarrier.
    std::vector<cplx> out(n_sub * n_sym);
    std::vector<cplx> col_knots(n_ps);
    std::vector<cplx> col(n_sym);
    for (std::size_t k = 0; k < n_sub; ++k) {
        for (std::size_t s = 0; s < n_ps; ++s) col_knots[s] = freq[s][k];
        detail::interpolate_axis(pilots.symbols, col_knots, col);
        std::copy(col.begin(), col.end(), out.begin() + static_cast<std::ptrdiff_t>(k * n_sym));
    }
    return ComplexGrid(n_sub, n_sym, std::move(out));
}

// ---------------------------------------------------------------------------
// Dataset generation.

struct Sample {
    RealGrid input;
    RealGrid label;
};

inline Sample generate_sample(const ChannelScenario& scenario, const GeneratorConfig& cfg) {
    const OfdmConfig& ofdm = cfg.ofdm;
    const TapSet taps = make_tapset(scenario.profile, scenario.delay_spread, cfg.simple_pdp);
    const FadingProcess proc = evolve_fading(taps, scenario, ofdm.n_sym, ofdm.symbol_period());
    const ComplexGrid h = frequency_response(proc, taps, ofdm);
    const ComplexGrid tx = build_pilot_grid(ofdm, derive_seed(scenario.seed, 2));
    const ComplexGrid rx = transmit(tx, h, scenario.snr_db, derive_seed(scenario.seed, 3));
    const ComplexGrid est = ls_interpolate(rx, tx, pilot_pattern(ofdm));
    return {to_real(est), to_real(h)};
}

inline Dataset generate_dataset(std::size_t n_samples, const GeneratorConfig& cfg, std::uint64_t master_seed) {
    if (n_samples == 0) throw ConfigError("generate_dataset: n_samples must be >= 1");
    cfg.ofdm.validate();
    Dataset d;
    d.scenarios.resize(n_samples);
    d.inputs.resize(n_samples);
    d.labels.resize(n_samples);
    parallel_for(n_samples, [&](std::size_t i) {
        d.scenarios[i] = sample_scenario(derive_seed(master_seed, i), cfg.ranges);
        Sample s = generate_sample(d.scenarios[i], cfg);
        d.inputs[i] = std::move(s.input);
        d.labels[i] = std::move(s.label);
    });
    return d;
}

}  // namespace chanest
