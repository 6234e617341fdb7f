#pragma once

// Gradient-based adversarial attacks on a trained estimator. Each attack
// perturbs the real-valued input grid to increase mse(forward(m, x), y).
//
// The iterative recurrences follow the original listings literally: BIM
// steps by epsilon without projection, PGD and MIM add uniform noise to the
// gradient before the sign step. Projection onto the epsilon ball, a
// random start and a momentum-driven MIM step are available as opt-in flags.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "chanest/error.hpp"
#include "chanest/grid.hpp"
#include "chanest/neuralnet.hpp"
#include "chanest/parallel.hpp"
#include "chanest/rng.hpp"

namespace chanest {

enum class AttackKind : std::uint8_t { fgsm, bim, pgd, mim, cw };

inline constexpr AttackKind kAllAttacks[] = {AttackKind::fgsm, AttackKind::bim, AttackKind::pgd, AttackKind::mim,
                                             AttackKind::cw};

inline std::string_view attack_name(AttackKind k) {
    switch (k) {
        case AttackKind::fgsm: return "fgsm";
        case AttackKind::bim: return "bim";
        case AttackKind::pgd: return "pgd";
        case AttackKind::mim: return "mim";
        case AttackKind::cw: return "cw";
    }
    return "?";
}

inline AttackKind parse_attack(std::string_view s) {
    std::string lower(s);
    std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char c) { return std::tolower(c); });
    if (lower == "c&w") lower = "cw";
    for (AttackKind k : kAllAttacks)
        if (lower == attack_name(k)) return k;
    throw ConfigError("unknown attack '" + std::string(s) + "' (valid: fgsm, bim, pgd, mim, cw)");
}

inline bool is_iterative(AttackKind k) { return k == AttackKind::bim || k == AttackKind::pgd || k == AttackKind::mim; }

struct AttackConfig {
    AttackKind kind = AttackKind::fgsm;
    double epsilon = 0.1;
    std::size_t iterations = 10;
    std::optional<double> step_size;    // alpha; defaults to 2*epsilon/iterations
    double momentum_rate = 1.0;         // eta (MIM)
    double cw_constant = 1.0;           // c (C&W)
    double cw_lr = 0.01;                // C&W gradient-descent rate
    std::optional<double> noise_scale;  // PGD/MIM gradient noise half-width; defaults to epsilon*1e-2
    std::uint64_t seed = 0;
    bool clip_to_ball = false;          // project onto the epsilon ball after each step (BIM/PGD/MIM)
    bool random_start = false;          // PGD: start from a uniform point in the epsilon ball
    bool momentum_sign = false;         // MIM: sign step on mu + noise instead of the noisy raw gradient

    double alpha() const { return step_size ? *step_size : 2.0 * epsilon / static_cast<double>(iterations); }
    double noise() const { return noise_scale ? *noise_scale : epsilon * 1e-2; }

    void validate() const {
        if (!(epsilon >= 0.0) || !std::isfinite(epsilon)) throw ConfigError("attack: epsilon must be >= 0");
        if (iterations == 0) throw ConfigError("attack: iterations must be >= 1");
        if (step_size && !(*step_size > 0.0 && std::isfinite(*step_size)))
            throw ConfigError("attack: step_size must be > 0");
        if (noise_scale && !(*noise_scale >= 0.0 && std::isfinite(*noise_scale)))
            throw ConfigError("attack: noise_scale must be >= 0");
        if (!std::isfinite(momentum_rate)) throw ConfigError("attack: momentum_rate must be finite");
        if (!(cw_constant >= 0.0) || !std::isfinite(cw_constant)) throw ConfigError("attack: cw_constant must be >= 0");
        if (!(cw_lr > 0.0) || !std::isfinite(cw_lr)) throw ConfigError("attack: cw_lr must be > 0");
    }
};

inline void to_json(nlohmann::json& j, const AttackConfig& c) {
    j = nlohmann::json{{"kind", attack_name(c.kind)},
                       {"epsilon", c.epsilon},
                       {"iterations", c.iterations},
                       {"step_size", c.alpha()},
                       {"momentum_rate", c.momentum_rate},
                       {"cw_constant", c.cw_constant},
                       {"cw_lr", c.cw_lr},
                       {"noise_scale", c.noise()},
                       {"seed", c.seed},
                       {"clip_to_ball", c.clip_to_ball},
                       {"random_start", c.random_start},
                       {"momentum_sign", c.momentum_sign}};
}

inline void from_json(const nlohmann::json& j, AttackConfig& c) {
    c = AttackConfig{};
    c.kind = parse_attack(j.at("kind").get<std::string>());
    c.epsilon = j.at("epsilon").get<double>();
    if (j.contains("iterations")) c.iterations = j.at("iterations").get<std::size_t>();
    if (j.contains("step_size")) c.step_size = j.at("step_size").get<double>();
    if (j.contains("momentum_rate")) c.momentum_rate = j.at("momentum_rate").get<double>();
    if (j.contains("cw_constant")) c.cw_constant = j.at("cw_constant").get<double>();
    if (j.contains("cw_lr")) c.cw_lr = j.at("cw_lr").get<double>();
    if (j.contains("noise_scale")) c.noise_scale = j.at("noise_scale").get<double>();
    if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("clip_to_ball")) c.clip_to_ball = j.at("clip_to_ball").get<bool>();
    if (j.contains("random_start")) c.random_start = j.at("random_start").get<bool>();
    if (j.contains("momentum_sign")) c.momentum_sign = j.at("momentum_sign").get<bool>();
}

namespace detail {

inline double sign(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

inline void check_pair(const RealGrid& x, const RealGrid& y) {
    if (!x.same_shape(y)) throw ShapeError("attack: input and label shapes differ");
}

inline std::vector<double> copy_values(const RealGrid& g) { return {g.values().begin(), g.values().end()}; }

inline RealGrid make_like(const RealGrid& g, std::vector<double> v) {
    return RealGrid(g.n_sub(), g.n_sym(), g.n_chan(), std::move(v));
}

inline std::vector<double> grad_at(const EstimatorModel& m, const RealGrid& like, const std::vector<double>& x,
                                   const RealGrid& y) {
    const RealGrid g = input_gradient(m, make_like(like, x), y);
    return copy_values(g);
}

inline void add_uniform(std::vector<double>& v, double half_width, Rng& rng) {
    if (half_width == 0.0) return;
    std::uniform_real_distribution<double> u(-half_width, half_width);
    for (double& e : v) e += u(rng);
}

inline void project(std::vector<double>& xa, const RealGrid& x, double eps) {
    auto x0 = x.values();
    for (std::size_t i = 0; i < xa.size(); ++i) xa[i] = std::clamp(xa[i], x0[i] - eps, x0[i] + eps);
}

}  // namespace detail

// x + epsilon * sign(grad_x mse).
inline RealGrid fgsm(const EstimatorModel& m, const RealGrid& x, const RealGrid& y, const AttackConfig& cfg) {
    cfg.validate();
    detail::check_pair(x, y);
    const RealGrid g = input_gradient(m, x, y);
    std::vector<double> xa = detail::copy_values(x);
    auto gv = g.values();
    for (std::size_t i = 0; i < xa.size(); ++i) xa[i] += cfg.epsilon * detail::sign(gv[i]);
    return detail::make_like(x, std::move(xa));
}

// N sign steps of size epsilon.
inline RealGrid bim(const EstimatorModel& m, const RealGrid& x, const RealGrid& y, const AttackConfig& cfg) {
    cfg.validate();
    detail::check_pair(x, y);
    std::vector<double> xa = detail::copy_values(x);
    for (std::size_t it = 0; it < cfg.iterations; ++it) {
        const auto g = detail::grad_at(m, x, xa, y);
        for (std::size_t i = 0; i < xa.size(); ++i) xa[i] += cfg.epsilon * detail::sign(g[i]);
        if (cfg.clip_to_ball) detail::project(xa, x, cfg.epsilon);
    }
    return detail::make_like(x, std::move(xa));
}

// N sign steps of size alpha on the gradient plus Uniform(+-noise) noise.
inline RealGrid pgd(const EstimatorModel& m, const RealGrid& x, const RealGrid& y, const AttackConfig& cfg) {
    cfg.validate();
    detail::check_pair(x, y);
    Rng rng = make_rng(cfg.seed);
    std::vector<double> xa = detail::copy_values(x);
    if (cfg.random_start) detail::add_uniform(xa, cfg.epsilon, rng);
    const double alpha = cfg.alpha(), noise = cfg.noise();
    for (std::size_t it = 0; it < cfg.iterations; ++it) {
        auto g = detail::grad_at(m, x, xa, y);
        detail::add_uniform(g, noise, rng);
        for (std::size_t i = 0; i < xa.size(); ++i) xa[i] += alpha * detail::sign(g[i]);
        if (cfg.clip_to_ball) detail::project(xa, x, cfg.epsilon);
    }
    return detail::make_like(x, std::move(xa));
}

// mu += (eta/epsilon) * grad; step alpha * sign(grad + Uniform(+-noise)),
// or alpha * sign(mu + Uniform(+-noise)) with momentum_sign.
inline RealGrid mim(const EstimatorModel& m, const RealGrid& x, const RealGrid& y, const AttackConfig& cfg) {
    cfg.validate();
    detail::check_pair(x, y);
    if (cfg.epsilon == 0.0) throw BudgetError("mim: epsilon must be > 0 (momentum update divides by epsilon)");
    Rng rng = make_rng(cfg.seed);
    std::vector<double> xa = detail::copy_values(x);
    std::vector<double> mu(xa.size(), 0.0);
    const double alpha = cfg.alpha(), noise = cfg.noise(), scale = cfg.momentum_rate / cfg.epsilon;
    for (std::size_t it = 0; it < cfg.iterations; ++it) {
        const auto g = detail::grad_at(m, x, xa, y);
        for (std::size_t i = 0; i < mu.size(); ++i) mu[i] += scale * g[i];
        std::vector<double> gh = cfg.momentum_sign ? mu : g;
        detail::add_uniform(gh, noise, rng);
        for (std::size_t i = 0; i < xa.size(); ++i) xa[i] += alpha * detail::sign(gh[i]);
        if (cfg.clip_to_ball) detail::project(xa, x, cfg.epsilon);
    }
    return detail::make_like(x, std::move(xa));
}

// Minimises |delta|^2 - c * mse(forward(m, x + delta), y) by gradient
// descent for iterations*10 steps; no epsilon constraint.
inline RealGrid cw(const EstimatorModel& m, const RealGrid& x, const RealGrid& y, const AttackConfig& cfg) {
    cfg.validate();
    detail::check_pair(x, y);
    std::vector<double> delta(x.size(), 0.0);
    std::vector<double> xa = detail::copy_values(x);
    auto x0 = x.values();
    const std::size_t steps = cfg.iterations * 10;
    for (std::size_t s = 0; s < steps; ++s) {
        std::vector<double> g(delta.size(), 0.0);
        if (cfg.cw_constant != 0.0) g = detail::grad_at(m, x, xa, y);
        for (std::size_t i = 0; i < delta.size(); ++i) {
            delta[i] -= cfg.cw_lr * (2.0 * delta[i] - cfg.cw_constant * g[i]);
            xa[i] = x0[i] + delta[i];
        }
    }
    return detail::make_like(x, std::move(xa));
}

inline RealGrid run_attack(const EstimatorModel& m, const RealGrid& x, const RealGrid& y, const AttackConfig& cfg) {
    switch (cfg.kind) {
        case AttackKind::fgsm: return fgsm(m, x, y, cfg);
        case AttackKind::bim: return bim(m, x, y, cfg);
        case AttackKind::pgd: return pgd(m, x, y, cfg);
        case AttackKind::mim: return mim(m, x, y, cfg);
        case AttackKind::cw: return cw(m, x, y, cfg);
    }
    throw ConfigError("attack: unknown kind");
}

struct AdversarialBatch {
    std::vector<RealGrid> originals;
    std::vector<RealGrid> perturbed;
    std::vector<RealGrid> labels;
    std::vector<double> linf;  // per-sample max |perturbed - original|
    AttackConfig config;

    std::size_t size() const noexcept { return perturbed.size(); }
};

inline double linf_distance(const RealGrid& a, const RealGrid& b) {
    if (!a.same_shape(b)) throw ShapeError("linf_distance: shape mismatch");
    double d = 0.0;
    auto av = a.values(), bv = b.values();
    for (std::size_t i = 0; i < av.size(); ++i) d = std::max(d, std::abs(av[i] - bv[i]));
    return d;
}

// Attacks every sample; sample i uses seed derive_seed(cfg.seed, i).
inline AdversarialBatch attack_batch(const EstimatorModel& m, const Dataset& data, const AttackConfig& cfg) {
    cfg.validate();
    if (data.empty()) throw EmptyDatasetError("attack_batch: dataset is empty");
    data.validate();
    if (cfg.kind == AttackKind::mim && cfg.epsilon == 0.0)
        throw BudgetError("mim: epsilon must be > 0 (momentum update divides by epsilon)");
    AdversarialBatch out;
    out.config = cfg;
    out.originals = data.inputs;
    out.labels = data.labels;
    out.perturbed.resize(data.size());
    out.linf.resize(data.size());
    parallel_for(data.size(), [&](std::size_t i) {
        AttackConfig c = cfg;
        c.seed = derive_seed(cfg.seed, i);
        out.perturbed[i] = run_attack(m, data.inputs[i], data.labels[i], c);
        out.linf[i] = linf_distance(out.perturbed[i], data.inputs[i]);
    });
    return out;
}

// Writes the perturbed inputs and labels as CEGD plus "<file>.attack.json".
inline void save_adversarial(const AdversarialBatch& b, const std::vector<ChannelScenario>& scenarios,
                             const std::filesystem::path& path) {
    Dataset d;
    d.inputs = b.perturbed;
    d.labels = b.labels;
    d.scenarios = scenarios;
    d.split_tag = SplitTag::test;
    save_dataset(d, path);
    nlohmann::json j;
    j["config"] = b.config;
    j["samples"] = b.size();
    j["linf"] = b.linf;
    std::ofstream os(detail::sidecar_path(path, ".attack.json"), std::ios::trunc);
    if (!os) throw IoError("cannot write attack sidecar for '" + path.string() + "'");
    os << j.dump(1) << '\n';
    if (!os) throw IoError("write failed for attack sidecar of '" + path.string() + "'");
}

}  // namespace chanest
