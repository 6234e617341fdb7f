#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <random>

#include "chanest/neuralnet.hpp"
#include "support.hpp"

using namespace chanest;
using chanest::test::random_grid;
using chanest::test::TempDir;

namespace {

// Direct 'same' cross-correlation on [C][W][H] maps, no activation.
std::vector<double> naive_conv(const std::vector<double>& x, std::size_t h, std::size_t w, const ConvLayer& l) {
    std::vector<double> out(l.out_ch * w * h, 0.0);
    const long ph = static_cast<long>(l.kh / 2), pw = static_cast<long>(l.kw / 2);
    for (std::size_t o = 0; o < l.out_ch; ++o)
        for (std::size_t c = 0; c < w; ++c)
            for (std::size_t r = 0; r < h; ++r) {
                double s = l.bias[o];
                for (std::size_t i = 0; i < l.in_ch; ++i)
                    for (std::size_t u = 0; u < l.kh; ++u)
                        for (std::size_t v = 0; v < l.kw; ++v) {
                            const long rr = static_cast<long>(r + u) - ph, cc = static_cast<long>(c + v) - pw;
                            if (rr < 0 || cc < 0 || rr >= static_cast<long>(h) || cc >= static_cast<long>(w)) continue;
                            s += l.weights[((o * l.in_ch + i) * l.kh + u) * l.kw + v] *
                                 x[(i * w + static_cast<std::size_t>(cc)) * h + static_cast<std::size_t>(rr)];
                        }
                out[(o * w + c) * h + r] = s;
            }
    return out;
}

ConvLayer random_layer(std::size_t out, std::size_t in, std::size_t kh, std::size_t kw, std::uint64_t seed) {
    ConvLayer l(out, in, kh, kw, Activation::linear);
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (double& v : l.weights) v = u(rng);
    for (double& v : l.bias) v = u(rng);
    return l;
}

std::vector<double> random_vec(std::size_t n, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    std::vector<double> v(n);
    for (double& x : v) x = u(rng);
    return v;
}

double loss_at(const EstimatorModel& m, const RealGrid& x, const RealGrid& y) { return mse_loss(forward(m, x), y); }

double rel_err(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8}); }

}  // namespace

TEST(Conv, ScalarKernelDoubles) {
    ConvLayer l(1, 1, 1, 1, Activation::linear);
    l.weights[0] = 2.0;
    const auto x = random_vec(7 * 5, 1);
    const auto y = conv2d_forward(x, 7, 5, l);
    for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(y[i], 2.0 * x[i]);
}

TEST(Conv, IdentityKernel) {
    ConvLayer l(1, 1, 3, 3, Activation::linear);
    l.weights[4] = 1.0;
    const auto x = random_vec(9 * 4, 2);
    EXPECT_EQ(conv2d_forward(x, 9, 4, l), x);
}

TEST(Conv, MatchesNaiveLoopSingleChannel) {
    const ConvLayer l = random_layer(1, 1, 3, 3, 3);
    const auto x = random_vec(25, 4);
    const auto got = conv2d_forward(x, 5, 5, l);
    const auto ref = naive_conv(x, 5, 5, l);
    for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(got[i], ref[i], 1e-12);
}

TEST(Conv, MatchesNaiveLoopMultiChannel) {
    struct Case {
        std::size_t out, in, kh, kw, h, w;
    };
    for (const Case c : {Case{4, 3, 5, 5, 13, 7}, Case{24, 1, 9, 9, 37, 14}, Case{8, 24, 5, 5, 20, 9},
                         Case{3, 16, 5, 3, 11, 6}, Case{16, 48, 5, 5, 17, 5}}) {
        const ConvLayer l = random_layer(c.out, c.in, c.kh, c.kw, c.out * 31 + c.in);
        const auto x = random_vec(c.in * c.h * c.w, c.h);
        const auto got = conv2d_forward(x, c.h, c.w, l);
        const auto ref = naive_conv(x, c.h, c.w, l);
        ASSERT_EQ(got.size(), ref.size());
        for (std::size_t i = 0; i < ref.size(); ++i) ASSERT_NEAR(got[i], ref[i], 1e-12) << "case " << c.out << "x" << c.in;
    }
}

TEST(Conv, ChannelMismatchIsShapeError) {
    const ConvLayer l = random_layer(2, 3, 3, 3, 1);
    EXPECT_THROW(conv2d_forward(random_vec(2 * 5 * 5, 1), 5, 5, l), ShapeError);
    EXPECT_THROW(ConvLayer(1, 1, 2, 3, Activation::linear), ShapeError);
}

TEST(Activation, ConstantsAndStability) {
    EXPECT_EQ(activate(Activation::selu, 0.0), 0.0);
    EXPECT_NEAR(activate(Activation::selu, 1.0), 1.0507009873554805, 1e-15);
    EXPECT_NEAR(activate(Activation::selu, -1.0), 1.0507009873554805 * 1.6732632423543772 * (std::exp(-1.0) - 1.0), 1e-15);
    EXPECT_NEAR(activate(Activation::softplus, 0.0), std::log(2.0), 1e-15);
    EXPECT_EQ(activate(Activation::softplus, 1000.0), 1000.0);
    EXPECT_GE(activate(Activation::softplus, -1000.0), 0.0);
    EXPECT_TRUE(std::isfinite(activate_grad(Activation::softplus, -1000.0)));
}

TEST(Activation, ArrayMatchesScalar) {
    auto z = random_vec(1001, 5);
    for (double& v : z) v *= 40.0;
    for (Activation act : {Activation::selu, Activation::softplus, Activation::linear}) {
        std::vector<double> a(z.size()), d(z.size(), 1.0);
        activate_array(act, z, a);
        scale_by_activation_grad(act, z, a, d);
        for (std::size_t i = 0; i < z.size(); ++i) {
            EXPECT_NEAR(a[i], activate(act, z[i]), 1e-12 * std::max(1.0, std::abs(z[i])));
            EXPECT_NEAR(d[i], activate_grad(act, z[i]), 1e-12);
        }
    }
}

TEST(Model, ParameterCountsFollowLayerShapes) {
    auto expected = [](std::size_t c1, std::size_t c2) { return c1 * 81 + c1 + c2 * c1 * 25 + c2 + c2 * 25 + 1; };
    EXPECT_EQ(make_architecture(ArchTag::undefended).param_count(), 6977u);
    EXPECT_EQ(make_architecture(ArchTag::student).param_count(), 6977u);
    // 48x(9,9), 16x(5,5), 1x(5,5) per plane gives 23553.
    EXPECT_EQ(make_architecture(ArchTag::teacher).param_count(), expected(48, 16));
    EXPECT_EQ(expected(24, 8), 6977u);
}

TEST(Model, ArchitectureLayout) {
    const EstimatorModel t = make_architecture(ArchTag::teacher);
    ASSERT_EQ(t.layers().size(), 3u);
    EXPECT_EQ(t.layers()[0].out_ch, 48u);
    EXPECT_EQ(t.layers()[0].kh, 9u);
    EXPECT_EQ(t.layers()[0].activation, Activation::selu);
    EXPECT_EQ(t.layers()[1].out_ch, 16u);
    EXPECT_EQ(t.layers()[1].activation, Activation::softplus);
    EXPECT_EQ(t.layers()[2].activation, Activation::selu);
}

TEST(Model, GlorotBoundsAndDeterminism) {
    for (ArchTag a : {ArchTag::undefended, ArchTag::teacher, ArchTag::student}) {
        const EstimatorModel m = init_glorot(a, 7);
        for (const auto& l : m.layers()) {
            const double lim = std::sqrt(6.0 / static_cast<double>(l.kh * l.kw * (l.in_ch + l.out_ch)));
            for (double w : l.weights) EXPECT_LE(std::abs(w), lim);
            for (double b : l.bias) EXPECT_EQ(b, 0.0);
        }
        EXPECT_EQ(init_glorot(a, 7), m);
        EXPECT_NE(init_glorot(a, 8), m);
    }
}

TEST(Forward, ZeroNetworkGivesZeroOutput) {
    const EstimatorModel m = make_architecture(ArchTag::student);
    const RealGrid y = forward(m, random_grid(612, 14, 3));
    for (double v : y.values()) EXPECT_EQ(v, 0.0);
}

TEST(Forward, ShapePreservedAndDeterministic) {
    const RealGrid x = random_grid(612, 14, 4);
    for (ArchTag a : {ArchTag::undefended, ArchTag::teacher, ArchTag::student}) {
        const EstimatorModel m = init_glorot(a, 1);
        const RealGrid y1 = forward(m, x);
        EXPECT_TRUE(y1.same_shape(x));
        EXPECT_EQ(forward(m, x), y1);
    }
    EXPECT_THROW(forward(init_glorot(ArchTag::student, 1), RealGrid(10, 4, 3)), ShapeError);
}

TEST(Forward, PlanesAreIndependent) {
    const EstimatorModel m = init_glorot(ArchTag::student, 2);
    RealGrid x = random_grid(20, 6, 5);
    const RealGrid y = forward(m, x);
    // Perturbing the imaginary plane leaves the real output untouched.
    x.set(3, 2, 1, x.at(3, 2, 1) + 1.0);
    const RealGrid y2 = forward(m, x);
    for (std::size_t k = 0; k < 20; ++k)
        for (std::size_t n = 0; n < 6; ++n) EXPECT_EQ(y.at(k, n, 0), y2.at(k, n, 0));
}

TEST(Mse, ToyAndOracle) {
    EXPECT_EQ(mse_loss(RealGrid(1, 1, 2, {1.0, 2.0}), RealGrid(1, 1, 2, {0.0, 0.0})), 2.5);
    const RealGrid a = random_grid(30, 7, 1), b = random_grid(30, 7, 2);
    EXPECT_EQ(mse_loss(a, a), 0.0);
    double s = 0.0;
    for (std::size_t k = 0; k < 30; ++k)
        for (std::size_t n = 0; n < 7; ++n)
            for (std::size_t c = 0; c < 2; ++c) s += std::pow(a.at(k, n, c) - b.at(k, n, c), 2);
    EXPECT_NEAR(mse_loss(a, b), s / (30 * 7 * 2), 1e-12);
    EXPECT_THROW(mse_loss(a, RealGrid(30, 6)), ShapeError);
}

TEST(Backward, ZeroResidualGivesZeroGradients) {
    const EstimatorModel m = make_architecture(ArchTag::student);
    const RealGrid x = random_grid(16, 6, 1);
    const GradientBundle g = backward(m, x, RealGrid(16, 6));
    for (double v : g.d_input.values()) EXPECT_EQ(v, 0.0);
    for (double v : g.d_params) EXPECT_EQ(v, 0.0);
}

TEST(Backward, ShapesMirrorTargets) {
    const EstimatorModel m = init_glorot(ArchTag::teacher, 3);
    const RealGrid x = random_grid(16, 6, 1);
    const GradientBundle g = backward(m, x, random_grid(16, 6, 2));
    EXPECT_EQ(g.d_params.size(), m.param_count());
    EXPECT_TRUE(g.d_input.same_shape(x));
}

class FiniteDifference : public ::testing::TestWithParam<ArchTag> {};

TEST_P(FiniteDifference, ParametersAndInputs) {
    const ArchTag arch = GetParam();
    const EstimatorModel m = init_glorot(arch, 11);
    const RealGrid x = random_grid(18, 7, 21, 1.5);
    const RealGrid y = random_grid(18, 7, 22, 1.5);
    const GradientBundle g = backward(m, x, y);
    const double h = 1e-5;
    std::mt19937_64 rng(static_cast<std::uint64_t>(arch) + 100);

    const std::vector<double> p0 = m.parameters();
    std::uniform_int_distribution<std::size_t> pick_p(0, p0.size() - 1);
    for (int n = 0; n < 50; ++n) {
        const std::size_t i = pick_p(rng);
        EstimatorModel mp = m, mm = m;
        std::vector<double> p = p0;
        p[i] += h;
        mp.set_parameters(p);
        p[i] = p0[i] - h;
        mm.set_parameters(p);
        const double fd = (loss_at(mp, x, y) - loss_at(mm, x, y)) / (2 * h);
        EXPECT_LE(rel_err(g.d_params[i], fd), 1e-4) << "param " << i << " analytic " << g.d_params[i] << " fd " << fd;
    }

    std::uniform_int_distribution<std::size_t> pick_x(0, x.size() - 1);
    const std::vector<double> x0(x.values().begin(), x.values().end());
    for (int n = 0; n < 50; ++n) {
        const std::size_t i = pick_x(rng);
        std::vector<double> xp = x0, xm = x0;
        xp[i] += h;
        xm[i] -= h;
        const double fd = (loss_at(m, RealGrid(18, 7, 2, xp), y) - loss_at(m, RealGrid(18, 7, 2, xm), y)) / (2 * h);
        EXPECT_LE(rel_err(g.d_input.values()[i], fd), 1e-4)
            << "input " << i << " analytic " << g.d_input.values()[i] << " fd " << fd;
    }
}

INSTANTIATE_TEST_SUITE_P(AllArchitectures, FiniteDifference,
                         ::testing::Values(ArchTag::undefended, ArchTag::teacher, ArchTag::student),
                         [](const auto& info) { return std::string(arch_name(info.param)); });

TEST(Train, ZeroLearningRateLeavesParameters) {
    const Dataset d = chanest::test::small_dataset(4, 1);
    TrainConfig cfg;
    cfg.learning_rate = 0.0;
    cfg.epochs = 3;
    const EstimatorModel m = init_glorot(ArchTag::student, 2);
    const TrainResult r = train(m, d, cfg);
    EXPECT_EQ(r.model, m);
    EXPECT_EQ(r.history.train_loss.size(), 3u);
}

TEST(Train, OverfitsFourSamples) {
    // A 6 x 4 grid is small enough for the shared-weight stack to memorise.
    GeneratorConfig g = chanest::test::small_config();
    g.ofdm.n_sub = 6;
    g.ofdm.n_sym = 4;
    g.ofdm.nfft = 64;
    g.ofdm.pilot_symbol_indices = {0, 3};
    const Dataset d = generate_dataset(4, g, 3);
    TrainConfig cfg;
    cfg.epochs = 500;
    cfg.learning_rate = 0.05;
    cfg.batch_size = 4;
    cfg.seed = 1;
    const TrainResult r = train(init_glorot(ArchTag::undefended, 4), d, cfg);
    ASSERT_EQ(r.history.train_loss.size(), 500u);
    EXPECT_LT(r.history.train_loss[199], r.history.train_loss[0]);
    EXPECT_LT(evaluate_mse(r.model, d), 1e-3);
}

TEST(Train, DeterministicAndValidated) {
    const Dataset d = chanest::test::small_dataset(6, 5);
    TrainConfig cfg;
    cfg.epochs = 4;
    cfg.batch_size = 4;
    cfg.seed = 9;
    const Dataset val = chanest::test::small_dataset(2, 6);
    const TrainResult a = train(init_glorot(ArchTag::student, 1), d, cfg, &val);
    const TrainResult b = train(init_glorot(ArchTag::student, 1), d, cfg, &val);
    EXPECT_EQ(a.model, b.model);
    EXPECT_EQ(a.history.train_loss, b.history.train_loss);
    EXPECT_EQ(a.history.val_mse.size(), 4u);
    EXPECT_DOUBLE_EQ(a.history.val_mse.back(), evaluate_mse(a.model, val));
}

TEST(Train, MomentumUpdateRule) {
    // Two full-batch steps against a hand-rolled v <- mu*v - lr*g; w <- w + v.
    const Dataset d = chanest::test::small_dataset(3, 8);
    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.learning_rate = 0.05;
    cfg.momentum = 0.9;
    const EstimatorModel m0 = init_glorot(ArchTag::student, 3);
    auto batch_grad = [&](const EstimatorModel& m) {
        std::vector<double> g(m.param_count(), 0.0);
        for (std::size_t i = 0; i < d.size(); ++i) {
            const auto gi = backward(m, d.inputs[i], d.labels[i]).d_params;
            for (std::size_t p = 0; p < g.size(); ++p) g[p] += gi[p];
        }
        for (double& v : g) v /= static_cast<double>(d.size());
        return g;
    };
    std::vector<double> w = m0.parameters(), v(w.size(), 0.0);
    EstimatorModel m = m0;
    for (int step = 0; step < 2; ++step) {
        const auto g = batch_grad(m);
        for (std::size_t p = 0; p < w.size(); ++p) {
            v[p] = 0.9 * v[p] - 0.05 * g[p];
            w[p] += v[p];
        }
        m.set_parameters(w);
    }
    const auto got = train(m0, d, cfg).model.parameters();
    for (std::size_t p = 0; p < w.size(); ++p) EXPECT_NEAR(got[p], w[p], 1e-12);
}

TEST(Train, Errors) {
    TrainConfig cfg;
    EXPECT_THROW(train(init_glorot(ArchTag::student, 1), Dataset{}, cfg), EmptyDatasetError);
    cfg.momentum = 1.0;
    EXPECT_THROW(train(init_glorot(ArchTag::student, 1), chanest::test::small_dataset(1, 1), cfg), ConfigError);
}

TEST(Checkpoint, RoundTripIsBitExact) {
    TempDir dir("nn");
    const EstimatorModel m = init_glorot(ArchTag::teacher, 5);
    save_model(m, dir / "t.cemw");
    const EstimatorModel back = load_model(dir / "t.cemw");
    EXPECT_EQ(back, m);
    const RealGrid x = random_grid(40, 14, 3);
    EXPECT_EQ(forward(back, x), forward(m, x));
    EXPECT_EQ(std::filesystem::file_size(dir / "t.cemw"),
              4 + 4 + 1 + 4 + 3 * (16 + 1) + m.param_count() * sizeof(double));
}

TEST(Checkpoint, Errors) {
    TempDir dir("nn");
    const EstimatorModel m = init_glorot(ArchTag::student, 5);
    save_model(m, dir / "s.cemw");
    {
        std::fstream f(dir / "s.cemw", std::ios::binary | std::ios::in | std::ios::out);
        f.seekp(4);
        const std::uint32_t v = 7;
        f.write(reinterpret_cast<const char*>(&v), 4);
    }
    EXPECT_THROW(load_model(dir / "s.cemw"), FormatError);

    save_model(m, dir / "m.cemw");
    {
        std::fstream f(dir / "m.cemw", std::ios::binary | std::ios::in | std::ios::out);
        f.write("CEMX", 4);
    }
    EXPECT_THROW(load_model(dir / "m.cemw"), FormatError);

    save_model(m, dir / "t.cemw");
    std::filesystem::resize_file(dir / "t.cemw", std::filesystem::file_size(dir / "t.cemw") - 8);
    EXPECT_THROW(load_model(dir / "t.cemw"), FormatError);

    EXPECT_THROW(load_model(dir / "missing.cemw"), IoError);
}
