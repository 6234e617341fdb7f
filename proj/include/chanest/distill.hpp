#pragma once

// Defensive distillation for the regression estimator: a teacher trained on
// ground truth, then a smaller student trained to imitate the teacher while
// also fitting the labels. The teacher is never modified.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>
#include <json.hpp>

#include "chanest/error.hpp"
#include "chanest/grid.hpp"
#include "chanest/neuralnet.hpp"
#include "chanest/rng.hpp"

namespace chanest {

// output_mse imitates the teacher's prediction; activation_mse and
// representation_mse imitate post- or pre-activation feature maps of
// matched_layer instead.
enum class DistillLoss : std::uint8_t { output_mse, activation_mse, representation_mse };

inline std::string_view distill_loss_name(DistillLoss v) {
    switch (v) {
        case DistillLoss::output_mse: return "output_mse";
        case DistillLoss::activation_mse: return "activation_mse";
        case DistillLoss::representation_mse: return "representation_mse";
    }
    return "?";
}

inline DistillLoss parse_distill_loss(std::string_view s) {
    for (DistillLoss v : {DistillLoss::output_mse, DistillLoss::activation_mse, DistillLoss::representation_mse})
        if (s == distill_loss_name(v)) return v;
    throw ConfigError("unknown distillation loss '" + std::string(s) +
                      "' (valid: output_mse, activation_mse, representation_mse)");
}

struct DistillConfig {
    double alpha = 0.5;  // weight of the teacher-imitation term
    DistillLoss loss_variant = DistillLoss::output_mse;
    std::size_t matched_layer = 0;
    TrainConfig train;

    void validate() const {
        if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("distill: alpha must lie in [0, 1]");
        train.validate();
    }

    void validate(const EstimatorModel& teacher, const EstimatorModel& student) const {
        validate();
        if (loss_variant != DistillLoss::output_mse &&
            (matched_layer >= teacher.layers().size() || matched_layer >= student.layers().size()))
            throw ConfigError("distill: matched_layer out of range for teacher or student");
    }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = nlohmann::json{{"learning_rate", c.learning_rate},
                       {"momentum", c.momentum},
                       {"epochs", c.epochs},
                       {"batch_size", c.batch_size},
                       {"seed", c.seed}};
}

inline void to_json(nlohmann::json& j, const DistillConfig& c) {
    j = nlohmann::json{{"alpha", c.alpha},
                       {"loss_variant", distill_loss_name(c.loss_variant)},
                       {"matched_layer", c.matched_layer},
                       {"train", c.train}};
}

// alpha * mse(student, teacher) + (1 - alpha) * mse(student, label).
inline double distill_loss(const RealGrid& student_out, const RealGrid& teacher_out, const RealGrid& label,
                           double alpha) {
    if (!student_out.same_shape(teacher_out) || !student_out.same_shape(label))
        throw ShapeError("distill_loss: shape mismatch");
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("distill_loss: alpha must lie in [0, 1]");
    if (alpha == 0.0) return mse_loss(student_out, label);
    return alpha * mse_loss(student_out, teacher_out) + (1.0 - alpha) * mse_loss(student_out, label);
}

inline double distill_loss(const RealGrid& student_out, const RealGrid& teacher_out, const RealGrid& label,
                           const DistillConfig& cfg) {
    return distill_loss(student_out, teacher_out, label, cfg.alpha);
}

// Imitation term on feature maps: mse(P * fs, ft) over both planes, where
// fs is [cs][n] and ft is [ct][n] per plane and P is a ct x cs 1x1
// projection (identity when the channel counts agree).
struct FeatureProjection {
    std::size_t rows = 0, cols = 0;  // teacher, student channels
    std::vector<double> weights;     // [rows][cols]; empty means identity

    bool identity() const noexcept { return weights.empty(); }
};

inline FeatureProjection make_projection(std::size_t teacher_ch, std::size_t student_ch, std::uint64_t seed) {
    FeatureProjection p;
    p.rows = teacher_ch;
    p.cols = student_ch;
    if (teacher_ch == student_ch) return p;
    const double limit = std::sqrt(6.0 / static_cast<double>(teacher_ch + student_ch));
    Rng rng = make_rng(seed);
    std::uniform_real_distribution<double> u(-limit, limit);
    p.weights.resize(teacher_ch * student_ch);
    for (double& w : p.weights) w = u(rng);
    return p;
}

// Returns the per-plane imitation loss contribution (already divided by
// n_total) and writes d(loss)/d(fs) into d_fs and adds d(loss)/dP into d_proj.
inline double feature_mse(const FeatureProjection& p, std::span<const double> fs, std::span<const double> ft,
                          std::size_t n, double n_total, std::vector<double>& d_fs, std::span<double> d_proj) {
    using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    const auto rows = static_cast<Eigen::Index>(p.rows), cols = static_cast<Eigen::Index>(p.cols),
               len = static_cast<Eigen::Index>(n);
    // Eigen-owned copies are always aligned, so vectorised kernels take the
    // same path on every call and results do not depend on caller buffers.
    const Mat S = Eigen::Map<const Mat>(fs.data(), cols, len), T = Eigen::Map<const Mat>(ft.data(), rows, len);
    Mat P;
    if (!p.identity()) P = Eigen::Map<const Mat>(p.weights.data(), rows, cols);
    Mat diff = p.identity() ? Mat(S - T) : Mat(P * S - T);
    const double loss = diff.squaredNorm() / n_total;
    diff *= 2.0 / n_total;
    const Mat dS = p.identity() ? diff : Mat(P.transpose() * diff);
    d_fs.assign(dS.data(), dS.data() + dS.size());
    if (!p.identity()) {
        const Mat dP = diff * S.transpose();
        for (Eigen::Index i = 0; i < dP.size(); ++i) d_proj[static_cast<std::size_t>(i)] += dP.data()[i];
    }
    return loss;
}

struct DistillResult {
    EstimatorModel student;
    LossHistory history;
    FeatureProjection projection;
};

inline TrainResult train_teacher(const Dataset& data, TrainConfig cfg, std::uint64_t seed,
                                 const Dataset* validation = nullptr) {
    cfg.seed = seed;
    return train(init_glorot(ArchTag::teacher, seed), data, cfg, validation);
}

// Trains a student (initialised with init_glorot(student, cfg.train.seed))
// against the frozen teacher. With alpha == 0 this is exactly
// train(init_glorot(student, seed), data, cfg.train).
inline DistillResult train_student(const EstimatorModel& teacher, const Dataset& data, const DistillConfig& cfg,
                                   const Dataset* validation = nullptr) {
    EstimatorModel student = init_glorot(ArchTag::student, cfg.train.seed);
    cfg.validate(teacher, student);
    teacher.validate();
    if (data.empty()) throw EmptyDatasetError("train_student: dataset is empty");
    data.validate();

    DistillResult out;
    if (cfg.alpha == 0.0) {
        TrainResult r = train(std::move(student), data, cfg.train, validation);
        out.student = std::move(r.model);
        out.history = std::move(r.history);
        return out;
    }

    const double alpha = cfg.alpha;
    SampleObjective obj;
    if (cfg.loss_variant == DistillLoss::output_mse) {
        // The teacher is frozen, so its predictions are computed once.
        std::vector<RealGrid> teacher_out(data.size());
        parallel_for(data.size(), [&](std::size_t i) { teacher_out[i] = forward(teacher, data.inputs[i]); });
        obj.loss = [&data, alpha, t = std::move(teacher_out)](std::size_t idx, const SampleCache& sc,
                                                               std::vector<double>& d_pred,
                                                               std::vector<std::vector<double>>&) {
            const RealGrid pred = sc.output();
            const auto gt = mse_grad(pred, t[idx]);
            d_pred = mse_grad(pred, data.labels[idx]);
            for (std::size_t i = 0; i < d_pred.size(); ++i) d_pred[i] = (1.0 - alpha) * d_pred[i] + alpha * gt[i];
            return distill_loss(pred, t[idx], data.labels[idx], alpha);
        };
        TrainResult r = train_with_objective(std::move(student), data, cfg.train, obj, validation);
        out.student = std::move(r.model);
        out.history = std::move(r.history);
        return out;
    }

    const std::size_t layer = cfg.matched_layer;
    const bool pre = cfg.loss_variant == DistillLoss::representation_mse;
    const std::size_t ct = teacher.layers()[layer].out_ch, cs = student.layers()[layer].out_ch;
    FeatureProjection proj = make_projection(ct, cs, derive_seed(cfg.train.seed, 0x70726f6aULL));
    std::vector<std::vector<double>> proj_grads(data.size());
    std::vector<double> proj_velocity(proj.weights.size(), 0.0);

    obj.hidden_target = HiddenGrad{layer, pre, {}};
    obj.loss = [&](std::size_t idx, const SampleCache& sc, std::vector<double>& d_pred,
                   std::vector<std::vector<double>>& hidden) {
        const RealGrid pred = sc.output();
        d_pred = mse_grad(pred, data.labels[idx]);
        for (double& g : d_pred) g *= 1.0 - alpha;
        double loss = (1.0 - alpha) * mse_loss(pred, data.labels[idx]);

        const std::size_t n = sc.n_sub * sc.n_sym;
        const double n_total = static_cast<double>(ct * n * sc.planes.size());
        std::vector<double>& dp = proj_grads[idx];
        dp.assign(proj.weights.size(), 0.0);
        hidden.resize(sc.planes.size());
        PlaneCache tc;
        for (std::size_t c = 0; c < sc.planes.size(); ++c) {
            forward_plane(teacher, extract_plane(data.inputs[idx], c), sc.n_sub, sc.n_sym, tc);
            const auto& tl = tc.layers[layer];
            const auto& sl = sc.planes[c].layers[layer];
            loss += alpha * feature_mse(proj, pre ? sl.z : sl.a, pre ? tl.z : tl.a, n, n_total, hidden[c], dp);
            for (double& g : hidden[c]) g *= alpha;
        }
        for (double& g : dp) g *= alpha;
        return loss;
    };
    // Momentum SGD on the projection with the student's hyper-parameters,
    // reducing per-sample gradients in batch order.
    BatchHook hook = [&](std::span<const std::size_t> batch) {
        if (proj.identity()) return;
        std::vector<double> g(proj.weights.size(), 0.0);
        for (std::size_t idx : batch)
            for (std::size_t k = 0; k < g.size(); ++k) g[k] += proj_grads[idx][k];
        const double inv = 1.0 / static_cast<double>(batch.size());
        for (std::size_t k = 0; k < g.size(); ++k) {
            proj_velocity[k] = cfg.train.momentum * proj_velocity[k] - cfg.train.learning_rate * g[k] * inv;
            proj.weights[k] += proj_velocity[k];
        }
    };
    TrainResult r = train_with_objective(std::move(student), data, cfg.train, obj, validation, hook);
    out.student = std::move(r.model);
    out.history = std::move(r.history);
    out.projection = std::move(proj);
    return out;
}

struct PipelineConfig {
    double train_fraction = 0.8;
    std::uint64_t split_seed = 0;
    std::uint64_t seed = 0;  // initialisation and shuffling
    TrainConfig teacher_train;
    DistillConfig distill;
};

struct DistillReport {
    nlohmann::json config;
    std::uint64_t seed = 0;
    std::uint64_t dataset_fingerprint = 0;
    std::size_t train_samples = 0, test_samples = 0;
    double teacher_mse = 0.0;  // benign test MSE
    double student_mse = 0.0;
    LossHistory teacher_history, student_history;
};

struct PipelineResult {
    EstimatorModel teacher;
    EstimatorModel student;
    DistillReport report;
};

// Splits data, trains the teacher on the training part, distils the student
// and measures both on the test part.
inline PipelineResult defend_pipeline(const Dataset& data, PipelineConfig cfg) {
    auto [train_set, test_set] = split_dataset(data, cfg.train_fraction, cfg.split_seed);
    cfg.teacher_train.seed = cfg.seed;
    cfg.distill.train.seed = cfg.seed;
    cfg.distill.validate();

    PipelineResult out;
    TrainResult t = train_teacher(train_set, cfg.teacher_train, cfg.seed, &test_set);
    out.teacher = std::move(t.model);
    DistillResult s = train_student(out.teacher, train_set, cfg.distill, &test_set);
    out.student = std::move(s.student);

    DistillReport& r = out.report;
    r.config = {{"train_fraction", cfg.train_fraction},
                {"split_seed", cfg.split_seed},
                {"teacher_train", cfg.teacher_train},
                {"distill", cfg.distill}};
    r.seed = cfg.seed;
    r.dataset_fingerprint = dataset_fingerprint(data);
    r.train_samples = train_set.size();
    r.test_samples = test_set.size();
    r.teacher_mse = evaluate_mse(out.teacher, test_set);
    r.student_mse = evaluate_mse(out.student, test_set);
    r.teacher_history = std::move(t.history);
    r.student_history = std::move(s.history);
    return out;
}

inline void to_json(nlohmann::json& j, const DistillReport& r) {
    char fp[17];
    std::snprintf(fp, sizeof fp, "%016llx", static_cast<unsigned long long>(r.dataset_fingerprint));
    j = nlohmann::json{{"config", r.config},
                       {"seed", r.seed},
                       {"dataset_fingerprint", fp},
                       {"train_samples", r.train_samples},
                       {"test_samples", r.test_samples},
                       {"benign_mse", {{"teacher", r.teacher_mse}, {"student", r.student_mse}}},
                       {"teacher_val_mse", r.teacher_history.val_mse},
                       {"student_val_mse", r.student_history.val_mse}};
}

inline void write_distill_report(const DistillReport& r, const std::filesystem::path& path) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("cannot open '" + path.string() + "' for writing");
    os << nlohmann::json(r).dump(2) << '\n';
    if (!os) throw IoError("write failed for '" + path.string() + "'");
}

}  // namespace chanest
