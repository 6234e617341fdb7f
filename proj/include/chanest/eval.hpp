#pragma once

// Benign and adversarial metrics, attack sweeps and report output.
//
// ASR for a batch is the per-sample mean of (mse_adv - mse_benign) / mse_adv,
// with both MSEs taken between the model's prediction and the label.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "chanest/attacks.hpp"
#include "chanest/error.hpp"
#include "chanest/grid.hpp"
#include "chanest/neuralnet.hpp"
#include "chanest/parallel.hpp"
#include "chanest/rng.hpp"

namespace chanest {

inline constexpr double kDefaultEpsilons[] = {0.1, 0.5, 1.0, 2.0, 3.0};

// Mean benign MSE over a dataset.
inline double evaluate_model(const EstimatorModel& m, const Dataset& test) { return evaluate_mse(m, test); }

// Per-sample MSE of forward(m, x_i) against y_i.
inline std::vector<double> per_sample_mse(const EstimatorModel& m, const std::vector<RealGrid>& xs,
                                          const std::vector<RealGrid>& ys) {
    if (xs.size() != ys.size()) throw ShapeError("per_sample_mse: length mismatch");
    std::vector<double> out(xs.size());
    parallel_for(xs.size(), [&](std::size_t i) { out[i] = mse_loss(forward(m, xs[i]), ys[i]); });
    return out;
}

inline double asr_from_mse(const std::vector<double>& benign, const std::vector<double>& adversarial) {
    if (benign.empty()) throw EmptyDatasetError("asr: empty batch");
    if (benign.size() != adversarial.size()) throw ShapeError("asr: length mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < benign.size(); ++i) {
        if (adversarial[i] == 0.0)
            throw DivisionByZeroError("asr: adversarial MSE of sample " + std::to_string(i) + " is zero");
        s += (adversarial[i] - benign[i]) / adversarial[i];
    }
    return s / static_cast<double>(benign.size());
}

inline double asr(const EstimatorModel& m, const std::vector<RealGrid>& originals,
                  const std::vector<RealGrid>& perturbed, const std::vector<RealGrid>& labels) {
    if (originals.empty()) throw EmptyDatasetError("asr: empty batch");
    if (originals.size() != perturbed.size() || originals.size() != labels.size())
        throw ShapeError("asr: originals, perturbed and labels differ in length");
    return asr_from_mse(per_sample_mse(m, originals, labels), per_sample_mse(m, perturbed, labels));
}

inline double asr(const EstimatorModel& m, const AdversarialBatch& b) {
    return asr(m, b.originals, b.perturbed, b.labels);
}

struct EvalRow {
    std::string model_tag;
    AttackKind attack = AttackKind::fgsm;
    std::optional<double> epsilon;  // empty for C&W
    double mse_benign = 0.0;
    double mse_malicious = 0.0;
    double asr = 0.0;

    friend bool operator==(const EvalRow&, const EvalRow&) = default;
};

struct EvalReport {
    std::vector<EvalRow> rows;
    std::uint64_t dataset_fingerprint = 0;
    std::uint64_t seed = 0;
};

struct NamedModel {
    std::string tag;
    EstimatorModel model;
};

// Seed for one sweep cell; independent of which models are evaluated so
// every model faces the same attack randomness.
inline std::uint64_t sweep_cell_seed(std::uint64_t seed, AttackKind k, std::size_t eps_index) {
    return derive_seed(derive_seed(seed, static_cast<std::uint64_t>(k) + 1), eps_index);
}

// Every model x attack x epsilon (C&W once per model, epsilon ignored).
// `base` supplies the non-epsilon attack parameters.
inline EvalReport run_sweep(const std::vector<NamedModel>& models, const std::vector<AttackKind>& attacks,
                            const std::vector<double>& eps_list, const Dataset& test, std::uint64_t seed,
                            const AttackConfig& base = {}) {
    if (models.empty() || attacks.empty()) throw ConfigError("sweep: models and attacks must be nonempty");
    const bool needs_eps = std::any_of(attacks.begin(), attacks.end(), [](AttackKind k) { return k != AttackKind::cw; });
    if (needs_eps && eps_list.empty()) throw ConfigError("sweep: epsilon list must be nonempty");
    if (test.empty()) throw EmptyDatasetError("sweep: test set is empty");
    test.validate();

    EvalReport r;
    r.seed = seed;
    r.dataset_fingerprint = dataset_fingerprint(test);
    for (const auto& nm : models) {
        const auto benign = per_sample_mse(nm.model, test.inputs, test.labels);
        double benign_mean = 0.0;
        for (double v : benign) benign_mean += v;
        benign_mean /= static_cast<double>(benign.size());
        for (AttackKind k : attacks) {
            const std::size_t cells = k == AttackKind::cw ? 1 : eps_list.size();
            for (std::size_t e = 0; e < cells; ++e) {
                AttackConfig cfg = base;
                cfg.kind = k;
                cfg.epsilon = k == AttackKind::cw ? 0.0 : eps_list[e];
                cfg.seed = sweep_cell_seed(seed, k, e);
                const AdversarialBatch b = attack_batch(nm.model, test, cfg);
                const auto adv = per_sample_mse(nm.model, b.perturbed, b.labels);
                double adv_mean = 0.0;
                for (double v : adv) adv_mean += v;
                adv_mean /= static_cast<double>(adv.size());
                EvalRow row;
                row.model_tag = nm.tag;
                row.attack = k;
                if (k != AttackKind::cw) row.epsilon = eps_list[e];
                row.mse_benign = benign_mean;
                row.mse_malicious = adv_mean;
                row.asr = asr_from_mse(benign, adv);
                r.rows.push_back(std::move(row));
            }
        }
    }
    return r;
}

inline void sort_rows(std::vector<EvalRow>& rows) {
    std::stable_sort(rows.begin(), rows.end(), [](const EvalRow& a, const EvalRow& b) {
        if (a.model_tag != b.model_tag) return a.model_tag < b.model_tag;
        if (a.attack != b.attack) return attack_name(a.attack) < attack_name(b.attack);
        const double ea = a.epsilon.value_or(-1.0), eb = b.epsilon.value_or(-1.0);
        return ea < eb;
    });
}

inline constexpr const char* kCsvHeader = "model,attack,epsilon,mse_benign,mse_malicious,asr";

namespace detail {

inline std::string fmt_num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
}

inline std::string fmt_eps(const std::optional<double>& e) { return e ? fmt_num(*e) : "-"; }

inline std::string xml_escape(const std::string& s) {
    std::string o;
    for (char c : s) {
        switch (c) {
            case '&': o += "&amp;"; break;
            case '<': o += "&lt;"; break;
            case '>': o += "&gt;"; break;
            case '"': o += "&quot;"; break;
            default: o += c;
        }
    }
    return o;
}

}  // namespace detail

inline std::string report_csv(const EvalReport& r) {
    std::vector<EvalRow> rows = r.rows;
    sort_rows(rows);
    std::string out = std::string(kCsvHeader) + "\n";
    for (const auto& row : rows) {
        out += row.model_tag + "," + std::string(attack_name(row.attack)) + "," + detail::fmt_eps(row.epsilon) + "," +
               detail::fmt_num(row.mse_benign) + "," + detail::fmt_num(row.mse_malicious) + "," +
               detail::fmt_num(row.asr) + "\n";
    }
    return out;
}

// Fixed-width text table with the CSV's columns.
inline std::string report_table(const EvalReport& r) {
    std::vector<EvalRow> rows = r.rows;
    sort_rows(rows);
    std::ostringstream os;
    char line[160];
    std::snprintf(line, sizeof line, "%-12s %-7s %8s %14s %14s %10s\n", "model", "attack", "epsilon", "mse_benign",
                  "mse_malicious", "asr");
    os << line;
    for (const auto& row : rows) {
        std::snprintf(line, sizeof line, "%-12s %-7s %8s %14.6f %14.6f %10.6f\n", row.model_tag.c_str(),
                      std::string(attack_name(row.attack)).c_str(), detail::fmt_eps(row.epsilon).c_str(),
                      row.mse_benign, row.mse_malicious, row.asr);
        os << line;
    }
    return os.str();
}

// One panel per attack plotting malicious MSE against epsilon, one polyline
// per model. C&W has no epsilon and is drawn as a single point at x = 0.
inline std::string report_svg(const EvalReport& r) {
    std::vector<EvalRow> rows = r.rows;
    sort_rows(rows);
    std::vector<AttackKind> attacks;
    std::vector<std::string> models;
    for (const auto& row : rows) {
        if (std::find(attacks.begin(), attacks.end(), row.attack) == attacks.end()) attacks.push_back(row.attack);
        if (std::find(models.begin(), models.end(), row.model_tag) == models.end()) models.push_back(row.model_tag);
    }
    double x_max = 0.0, y_max = 0.0;
    for (const auto& row : rows) {
        x_max = std::max(x_max, row.epsilon.value_or(0.0));
        y_max = std::max(y_max, row.mse_malicious);
    }
    if (x_max <= 0.0) x_max = 1.0;
    if (y_max <= 0.0) y_max = 1.0;

    const double pw = 260, ph = 200, margin = 50;
    const double width = margin + attacks.size() * (pw + margin), height = ph + 2 * margin + 20 * models.size();
    static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};
    auto num = detail::fmt_num;

    std::ostringstream os;
    os << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"" << num(width) << "\" height=\""
       << num(height) << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
    os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    for (std::size_t a = 0; a < attacks.size(); ++a) {
        const double x0 = margin + a * (pw + margin), y0 = margin;
        os << "<g>\n";
        os << "<text x=\"" << num(x0 + pw / 2) << "\" y=\"" << num(y0 - 10) << "\" text-anchor=\"middle\">"
           << attack_name(attacks[a]) << "</text>\n";
        os << "<line x1=\"" << num(x0) << "\" y1=\"" << num(y0 + ph) << "\" x2=\"" << num(x0 + pw) << "\" y2=\""
           << num(y0 + ph) << "\" stroke=\"black\"/>\n";
        os << "<line x1=\"" << num(x0) << "\" y1=\"" << num(y0) << "\" x2=\"" << num(x0) << "\" y2=\"" << num(y0 + ph)
           << "\" stroke=\"black\"/>\n";
        os << "<text x=\"" << num(x0 + pw / 2) << "\" y=\"" << num(y0 + ph + 28) << "\" text-anchor=\"middle\">epsilon (0 to "
           << num(x_max) << ")</text>\n";
        os << "<text x=\"" << num(x0 - 8) << "\" y=\"" << num(y0 + 4) << "\" text-anchor=\"end\">" << num(y_max)
           << "</text>\n";
        os << "<text x=\"" << num(x0 - 8) << "\" y=\"" << num(y0 + ph) << "\" text-anchor=\"end\">0</text>\n";
        for (std::size_t mi = 0; mi < models.size(); ++mi) {
            std::string pts;
            for (const auto& row : rows) {
                if (row.attack != attacks[a] || row.model_tag != models[mi]) continue;
                const double px = x0 + pw * row.epsilon.value_or(0.0) / x_max;
                const double py = y0 + ph - ph * row.mse_malicious / y_max;
                if (!pts.empty()) pts += ' ';
                pts += num(px) + "," + num(py);
            }
            if (pts.empty()) continue;
            os << "<polyline fill=\"none\" stroke=\"" << colors[mi % 6] << "\" stroke-width=\"2\" points=\"" << pts
               << "\"><title>" << detail::xml_escape(models[mi]) << " " << attack_name(attacks[a])
               << "</title></polyline>\n";
        }
        os << "</g>\n";
    }
    for (std::size_t mi = 0; mi < models.size(); ++mi) {
        const double ly = margin + ph + 50 + 20 * mi;
        os << "<line x1=\"" << num(margin) << "\" y1=\"" << num(ly) << "\" x2=\"" << num(margin + 30) << "\" y2=\""
           << num(ly) << "\" stroke=\"" << colors[mi % 6] << "\" stroke-width=\"2\"/>\n";
        os << "<text x=\"" << num(margin + 36) << "\" y=\"" << num(ly + 4) << "\">" << detail::xml_escape(models[mi])
           << " (malicious MSE)</text>\n";
    }
    os << "</svg>\n";
    return os.str();
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open '" + path.string() + "' for writing");
    os << text;
    if (!os) throw IoError("write failed for '" + path.string() + "'");
}

inline void emit_report(const EvalReport& r, const std::filesystem::path& csv_path,
                        const std::optional<std::filesystem::path>& svg_path = std::nullopt) {
    if (r.rows.empty()) throw ConfigError("emit_report: report has no rows");
    write_text_file(csv_path, report_csv(r));
    if (svg_path) write_text_file(*svg_path, report_svg(r));
}

}  // namespace chanest
