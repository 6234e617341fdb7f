// chanest: dataset generation, training, attacks, distillation and sweeps.
//
// Exit codes: 0 ok, 2 usage or configuration error, 3 I/O or file format
// error, 4 numeric failure.

#include <chanest/attacks.hpp>
#include <chanest/chansim.hpp>
#include <chanest/distill.hpp>
#include <chanest/eval.hpp>
#include <chanest/neuralnet.hpp>

#include <CLI11.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace chanest;

namespace {

enum class LogLevel { error = 0, warn = 1, info = 2, debug = 3 };

struct Globals {
    std::string log_level = "info";
    std::string out_dir;
    LogLevel level = LogLevel::info;
};

Globals g_opts;

void log(LogLevel lvl, const std::string& msg) {
    static const char* names[] = {"error", "warn", "info", "debug"};
    if (lvl <= g_opts.level) std::cerr << "[" << names[static_cast<int>(lvl)] << "] " << msg << '\n';
}

fs::path output_path(const std::string& p) {
    fs::path path(p);
    if (!g_opts.out_dir.empty() && path.is_relative()) path = fs::path(g_opts.out_dir) / path;
    return path;
}

void require_input(const fs::path& p) {
    if (!fs::is_regular_file(p)) throw IoError("input file '" + p.string() + "' does not exist");
}

void require_output(const fs::path& p) {
    const fs::path dir = p.has_parent_path() ? p.parent_path() : fs::path(".");
    if (!fs::is_directory(dir)) throw IoError("output directory '" + dir.string() + "' does not exist");
}

std::string fmt(double v, const char* f = "%.6g") {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ','))
        if (!item.empty()) out.push_back(item);
    return out;
}

std::vector<double> parse_eps_list(const std::string& s) {
    std::vector<double> out;
    for (const auto& tok : split_list(s)) {
        std::size_t used = 0;
        double v = 0.0;
        try {
            v = std::stod(tok, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        if (used != tok.size() || !(v >= 0.0)) throw ConfigError("invalid epsilon '" + tok + "' in --eps-list");
        out.push_back(v);
    }
    if (out.empty()) throw ConfigError("--eps-list is empty");
    return out;
}

std::vector<AttackKind> parse_attack_list(const std::string& s) {
    if (s == "all") return {std::begin(kAllAttacks), std::end(kAllAttacks)};
    std::vector<AttackKind> out;
    for (const auto& tok : split_list(s)) out.push_back(parse_attack(tok));
    if (out.empty()) throw ConfigError("--attacks is empty");
    return out;
}

void epoch_logger(TrainConfig& cfg, const std::string& what) {
    cfg.on_epoch = [what, total = cfg.epochs](std::size_t e, double loss, double val) {
        std::string msg = what + " epoch " + std::to_string(e + 1) + "/" + std::to_string(total) + " loss " + fmt(loss);
        if (!std::isnan(val)) msg += " val_mse " + fmt(val);
        log(LogLevel::debug, msg);
        if (e + 1 == total || (e + 1) % 10 == 0) log(LogLevel::info, msg);
    };
}

void write_loss_csv(const LossHistory& h, const fs::path& path) {
    std::string out = "epoch,train_loss,val_mse\n";
    for (std::size_t e = 0; e < h.train_loss.size(); ++e) {
        out += std::to_string(e + 1) + "," + fmt(h.train_loss[e], "%.9g") + ",";
        out += e < h.val_mse.size() ? fmt(h.val_mse[e], "%.9g") : std::string();
        out += "\n";
    }
    write_text_file(path, out);
}

// ---------------------------------------------------------------------------

struct GenerateOpts {
    std::string config;
    std::size_t samples = 256;
    std::uint64_t seed = 42;
    std::string out;
};

int cmd_generate(const GenerateOpts& o) {
    GeneratorConfig cfg;
    if (!o.config.empty()) {
        require_input(o.config);
        std::ifstream is(o.config);
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(is);
        } catch (const nlohmann::json::parse_error& e) {
            throw ConfigError(std::string("config is not valid JSON: ") + e.what());
        }
        cfg = generator_config_from_json(j);
    }
    if (o.samples == 0) throw ConfigError("--samples must be >= 1");
    const fs::path out = output_path(o.out);
    require_output(out);
    Dataset d = generate_dataset(o.samples, cfg, o.seed);
    save_dataset(d, out);
    std::map<std::string, std::size_t> per_profile;
    for (const auto& s : d.scenarios) ++per_profile[std::string(profile_name(s.profile))];
    std::cout << "wrote " << d.size() << " samples of shape " << d.inputs[0].n_sub() << "x" << d.inputs[0].n_sym() << "x"
              << d.inputs[0].n_chan() << " to " << out.string() << "\n";
    for (const auto& [name, count] : per_profile) std::cout << "  " << name << ": " << count << "\n";
    return 0;
}

struct TrainOpts {
    std::string data, arch = "undefended", out, loss_csv;
    std::size_t epochs = 100, batch = 256;
    double lr = 0.001, momentum = 0.9, train_fraction = 0.8;
    std::uint64_t seed = 0, split_seed = 0;
};

int cmd_train(const TrainOpts& o) {
    const ArchTag arch = parse_arch(o.arch);
    require_input(o.data);
    const fs::path out = output_path(o.out);
    const fs::path loss_csv = o.loss_csv.empty() ? fs::path(out.string() + ".loss.csv") : output_path(o.loss_csv);
    require_output(out);
    require_output(loss_csv);
    TrainConfig cfg;
    cfg.epochs = o.epochs;
    cfg.batch_size = o.batch;
    cfg.learning_rate = o.lr;
    cfg.momentum = o.momentum;
    cfg.seed = o.seed;
    cfg.validate();

    const Dataset data = load_dataset(o.data);
    auto [train_set, test_set] = split_dataset(data, o.train_fraction, o.split_seed);
    EstimatorModel m = init_glorot(arch, o.seed);
    log(LogLevel::info, std::string(arch_name(arch)) + ": " + std::to_string(m.param_count()) + " parameters, " +
                            std::to_string(train_set.size()) + " train / " + std::to_string(test_set.size()) + " test samples");
    epoch_logger(cfg, std::string(arch_name(arch)));
    TrainResult r = train(std::move(m), train_set, cfg, &test_set);
    save_model(r.model, out);
    write_loss_csv(r.history, loss_csv);
    std::cout << arch_name(arch) << " parameters " << r.model.param_count() << " test_mse "
              << fmt(r.history.val_mse.back(), "%.9g") << "\n";
    return 0;
}

struct AttackOpts {
    std::string model, data, attack, out;
    double eps = 0.1;
    std::size_t iters = 10;
    std::optional<double> step_size, noise_scale;
    double momentum_rate = 1.0, cw_c = 1.0, cw_lr = 0.01;
    bool clip = false, random_start = false, momentum_sign = false;
    std::uint64_t seed = 0;
};

int cmd_attack(const AttackOpts& o, bool eps_given) {
    AttackConfig cfg;
    cfg.kind = parse_attack(o.attack);
    cfg.epsilon = o.eps;
    cfg.iterations = o.iters;
    cfg.step_size = o.step_size;
    cfg.noise_scale = o.noise_scale;
    cfg.momentum_rate = o.momentum_rate;
    cfg.cw_constant = o.cw_c;
    cfg.cw_lr = o.cw_lr;
    cfg.clip_to_ball = o.clip;
    cfg.random_start = o.random_start;
    cfg.momentum_sign = o.momentum_sign;
    cfg.seed = o.seed;
    if (cfg.kind == AttackKind::cw) {
        if (eps_given) log(LogLevel::warn, "--eps is ignored by the cw attack");
        cfg.epsilon = 0.0;
    }
    cfg.validate();
    require_input(o.model);
    require_input(o.data);
    const fs::path out = output_path(o.out);
    require_output(out);

    const EstimatorModel m = load_model(o.model);
    const Dataset data = load_dataset(o.data);
    const AdversarialBatch b = attack_batch(m, data, cfg);
    save_adversarial(b, data.scenarios, out);
    std::cout << attack_name(cfg.kind) << " on " << b.size() << " samples: asr " << fmt(asr(m, b), "%.9g") << "\n";
    return 0;
}

struct DistillOpts {
    std::string data, teacher_out, student_out, report, loss_variant = "output_mse";
    double alpha = 0.5, lr = 0.001, momentum = 0.9, train_fraction = 0.8;
    std::size_t epochs = 100, batch = 256, matched_layer = 0;
    std::uint64_t seed = 0, split_seed = 0;
};

int cmd_distill(const DistillOpts& o) {
    require_input(o.data);
    const fs::path teacher_out = output_path(o.teacher_out), student_out = output_path(o.student_out);
    const fs::path report = o.report.empty() ? student_out.parent_path() / "distill_report.json" : output_path(o.report);
    for (const auto& p : {teacher_out, student_out, report}) require_output(p);

    PipelineConfig cfg;
    cfg.train_fraction = o.train_fraction;
    cfg.split_seed = o.split_seed;
    cfg.seed = o.seed;
    cfg.teacher_train.epochs = o.epochs;
    cfg.teacher_train.batch_size = o.batch;
    cfg.teacher_train.learning_rate = o.lr;
    cfg.teacher_train.momentum = o.momentum;
    cfg.distill.alpha = o.alpha;
    cfg.distill.loss_variant = parse_distill_loss(o.loss_variant);
    cfg.distill.matched_layer = o.matched_layer;
    cfg.distill.train = cfg.teacher_train;
    cfg.distill.validate(make_architecture(ArchTag::teacher), make_architecture(ArchTag::student));
    epoch_logger(cfg.teacher_train, "teacher");
    epoch_logger(cfg.distill.train, "student");

    const Dataset data = load_dataset(o.data);
    PipelineResult r = defend_pipeline(data, cfg);
    save_model(r.teacher, teacher_out);
    save_model(r.student, student_out);
    write_distill_report(r.report, report);
    std::cout << "teacher test_mse " << fmt(r.report.teacher_mse, "%.9g") << "\nstudent test_mse "
              << fmt(r.report.student_mse, "%.9g") << "\n";
    return 0;
}

struct SweepOpts {
    std::vector<std::string> models;
    std::string data, eps_list = "0.1,0.5,1.0,2.0,3.0", attacks = "all", out, svg, subset = "test";
    std::size_t iters = 10;
    double train_fraction = 0.8;
    std::uint64_t seed = 0, split_seed = 0;
};

// "tag=path" or a bare path whose file stem becomes the tag.
NamedModel load_named(const std::string& spec) {
    const auto eq = spec.find('=');
    const std::string tag = eq == std::string::npos ? fs::path(spec).stem().string() : spec.substr(0, eq);
    const std::string path = eq == std::string::npos ? spec : spec.substr(eq + 1);
    require_input(path);
    return {tag, load_model(path)};
}

int cmd_sweep(const SweepOpts& o) {
    const auto eps = parse_eps_list(o.eps_list);
    const auto attacks = parse_attack_list(o.attacks);
    if (o.models.empty()) throw ConfigError("--models is empty");
    if (o.subset != "test" && o.subset != "all") throw ConfigError("--subset must be 'test' or 'all'");
    for (const auto& spec : o.models) {
        const auto eq = spec.find('=');
        require_input(eq == std::string::npos ? spec : spec.substr(eq + 1));
    }
    require_input(o.data);
    const fs::path out = output_path(o.out);
    require_output(out);
    std::optional<fs::path> svg;
    if (!o.svg.empty()) {
        svg = output_path(o.svg);
        require_output(*svg);
    }

    std::vector<NamedModel> models;
    for (const auto& spec : o.models) models.push_back(load_named(spec));
    const Dataset data = load_dataset(o.data);
    const Dataset test = o.subset == "all" ? data : split_dataset(data, o.train_fraction, o.split_seed).second;
    AttackConfig base;
    base.iterations = o.iters;
    const EvalReport r = run_sweep(models, attacks, eps, test, o.seed, base);
    emit_report(r, out, svg);
    std::cout << report_table(r);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"chanest: adversarial attacks and defensive distillation for CNN channel estimation"};
    app.require_subcommand(1);
    app.option_defaults()->always_capture_default();
    app.add_option("--log-level", g_opts.log_level, "Log verbosity: error, warn, info or debug")
        ->check(CLI::IsMember({"error", "warn", "info", "debug"}));
    app.add_option("--out-dir", g_opts.out_dir, "Directory that relative output paths are resolved against");

    GenerateOpts gen;
    auto* c_gen = app.add_subcommand("generate", "Simulate a dataset of LS estimates and true channel grids");
    c_gen->add_option("--config", gen.config, "Generator config JSON (defaults to the built-in 5G NR setup)");
    c_gen->add_option("--samples", gen.samples, "Number of samples");
    c_gen->add_option("--seed", gen.seed, "Master seed");
    c_gen->add_option("--out", gen.out, "Output CEGD file")->required();

    TrainOpts tr;
    auto* c_train = app.add_subcommand("train", "Train an estimator on the training split");
    c_train->add_option("--data", tr.data, "Input CEGD dataset")->required();
    c_train->add_option("--arch", tr.arch, "Architecture: undefended, teacher or student");
    c_train->add_option("--epochs", tr.epochs, "Training epochs");
    c_train->add_option("--lr", tr.lr, "SGD learning rate");
    c_train->add_option("--momentum", tr.momentum, "SGD momentum");
    c_train->add_option("--batch", tr.batch, "Batch size");
    c_train->add_option("--seed", tr.seed, "Initialisation and shuffling seed");
    c_train->add_option("--split-seed", tr.split_seed, "Seed of the train/test split");
    c_train->add_option("--train-fraction", tr.train_fraction, "Fraction of samples used for training");
    c_train->add_option("--out", tr.out, "Output CEMW checkpoint")->required();
    c_train->add_option("--loss-csv", tr.loss_csv, "Loss history CSV (default: <out>.loss.csv)");

    AttackOpts at;
    auto* c_attack = app.add_subcommand("attack", "Generate adversarial inputs against a trained model");
    c_attack->add_option("--model", at.model, "CEMW checkpoint")->required();
    c_attack->add_option("--data", at.data, "CEGD dataset to perturb (every sample)")->required();
    c_attack->add_option("--attack", at.attack, "Attack: fgsm, bim, pgd, mim or cw")->required();
    auto* eps_opt = c_attack->add_option("--eps", at.eps, "Budget epsilon (ignored by cw)");
    c_attack->add_option("--iters", at.iters, "Iterations N (cw runs 10*N descent steps)");
    c_attack->add_option("--step-size", at.step_size, "Step size alpha for pgd/mim (default 2*eps/N)");
    c_attack->add_option("--noise-scale", at.noise_scale, "Gradient-noise half-width for pgd/mim (default eps*1e-2)");
    c_attack->add_option("--momentum-rate", at.momentum_rate, "Momentum rate eta for mim");
    c_attack->add_option("--cw-c", at.cw_c, "C&W trade-off constant c");
    c_attack->add_option("--cw-lr", at.cw_lr, "C&W learning rate");
    c_attack->add_flag("--clip-to-ball", at.clip, "Project onto the epsilon ball after each step (bim/pgd/mim)");
    c_attack->add_flag("--random-start", at.random_start, "Start pgd from a random point in the epsilon ball");
    c_attack->add_flag("--momentum-sign", at.momentum_sign, "Take the mim sign step on the momentum instead of the noisy gradient");
    c_attack->add_option("--seed", at.seed, "Attack seed");
    c_attack->add_option("--out", at.out, "Output CEGD file (with .attack.json sidecar)")->required();

    DistillOpts di;
    auto* c_distill = app.add_subcommand("distill", "Train a teacher, then distil it into a student");
    c_distill->add_option("--data", di.data, "Input CEGD dataset")->required();
    c_distill->add_option("--teacher-out", di.teacher_out, "Teacher CEMW output")->required();
    c_distill->add_option("--student-out", di.student_out, "Student CEMW output")->required();
    c_distill->add_option("--report", di.report, "Report JSON (default: distill_report.json beside the student)");
    c_distill->add_option("--alpha", di.alpha, "Weight of the teacher-imitation loss term");
    c_distill->add_option("--loss-variant", di.loss_variant, "output_mse, activation_mse or representation_mse");
    c_distill->add_option("--matched-layer", di.matched_layer, "Layer matched by the feature loss variants");
    c_distill->add_option("--epochs", di.epochs, "Training epochs (teacher and student)");
    c_distill->add_option("--lr", di.lr, "SGD learning rate");
    c_distill->add_option("--momentum", di.momentum, "SGD momentum");
    c_distill->add_option("--batch", di.batch, "Batch size");
    c_distill->add_option("--seed", di.seed, "Initialisation and shuffling seed");
    c_distill->add_option("--split-seed", di.split_seed, "Seed of the train/test split");
    c_distill->add_option("--train-fraction", di.train_fraction, "Fraction of samples used for training");

    SweepOpts sw;
    auto* c_sweep = app.add_subcommand("sweep", "Evaluate models under every attack and budget");
    c_sweep->add_option("--models", sw.models, "Checkpoints as tag=path or path (comma separated)")
        ->required()
        ->delimiter(',');
    c_sweep->add_option("--data", sw.data, "CEGD dataset")->required();
    c_sweep->add_option("--eps-list", sw.eps_list, "Comma-separated budgets");
    c_sweep->add_option("--attacks", sw.attacks, "Comma-separated attacks, or all (fgsm,bim,pgd,mim,cw)");
    c_sweep->add_option("--iters", sw.iters, "Iterations N for the iterative attacks");
    c_sweep->add_option("--subset", sw.subset, "Evaluate on the test split or on all samples");
    c_sweep->add_option("--split-seed", sw.split_seed, "Seed of the train/test split");
    c_sweep->add_option("--train-fraction", sw.train_fraction, "Fraction of samples in the training split");
    c_sweep->add_option("--seed", sw.seed, "Attack seed");
    c_sweep->add_option("--out", sw.out, "Report CSV")->required();
    c_sweep->add_option("--svg", sw.svg, "Optional SVG chart");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }
    g_opts.level = g_opts.log_level == "error"  ? LogLevel::error
                   : g_opts.log_level == "warn" ? LogLevel::warn
                   : g_opts.log_level == "debug" ? LogLevel::debug
                                                 : LogLevel::info;

    try {
        if (*c_gen) return cmd_generate(gen);
        if (*c_train) return cmd_train(tr);
        if (*c_attack) return cmd_attack(at, eps_opt->count() > 0);
        if (*c_distill) return cmd_distill(di);
        if (*c_sweep) return cmd_sweep(sw);
    } catch (const ConfigError& e) {
        log(LogLevel::error, e.what());
        return 2;
    } catch (const ShapeError& e) {
        log(LogLevel::error, e.what());
        return 2;
    } catch (const BudgetError& e) {
        log(LogLevel::error, e.what());
        return 2;
    } catch (const EmptyDatasetError& e) {
        log(LogLevel::error, e.what());
        return 2;
    } catch (const DegenerateMaskError& e) {
        log(LogLevel::error, e.what());
        return 2;
    } catch (const IoError& e) {
        log(LogLevel::error, e.what());
        return 3;
    } catch (const FormatError& e) {
        log(LogLevel::error, e.what());
        return 3;
    } catch (const NumericError& e) {
        log(LogLevel::error, e.what());
        return 4;
    } catch (const DivisionByZeroError& e) {
        log(LogLevel::error, e.what());
        return 4;
    } catch (const std::exception& e) {
        log(LogLevel::error, e.what());
        return 1;
    }
    return 2;
}
