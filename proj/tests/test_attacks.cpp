#include <gtest/gtest.h>

#include <cmath>
#include <fstream>

#include "chanest/attacks.hpp"
#include "chanest/eval.hpp"
#include "support.hpp"

using namespace chanest;
using chanest::test::TempDir;

namespace {

double mean(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}

AttackConfig make_cfg(AttackKind k, double eps, std::size_t iters = 10) {
    AttackConfig c;
    c.kind = k;
    c.epsilon = eps;
    c.iterations = iters;
    c.seed = 17;
    return c;
}

}  // namespace

// A small estimator trained on 16 x 6 grids, shared by the suite.
class Attacks : public ::testing::Test {
protected:
    static void SetUpTestSuite() {
        data_ = new Dataset(chanest::test::small_dataset(48, 21));
        TrainConfig cfg;
        cfg.epochs = 60;
        cfg.learning_rate = 0.01;
        cfg.batch_size = 16;
        cfg.seed = 2;
        model_ = new EstimatorModel(train(init_glorot(ArchTag::undefended, 3), *data_, cfg).model);
    }
    static void TearDownTestSuite() {
        delete data_;
        delete model_;
    }

    static const Dataset& data() { return *data_; }
    static const EstimatorModel& model() { return *model_; }
    static const RealGrid& x() { return data_->inputs[0]; }
    static const RealGrid& y() { return data_->labels[0]; }

    static Dataset* data_;
    static EstimatorModel* model_;
};

Dataset* Attacks::data_ = nullptr;
EstimatorModel* Attacks::model_ = nullptr;

TEST_F(Attacks, FgsmIsSignStepOfInputGradient) {
    const AttackConfig c = make_cfg(AttackKind::fgsm, 0.3);
    const RealGrid adv = fgsm(model(), x(), y(), c);
    const RealGrid g = input_gradient(model(), x(), y());
    for (std::size_t i = 0; i < adv.size(); ++i) {
        const double gi = g.values()[i];
        const double s = gi > 0 ? 1.0 : (gi < 0 ? -1.0 : 0.0);
        EXPECT_EQ(adv.values()[i], x().values()[i] + 0.3 * s);
    }
    EXPECT_LE(linf_distance(adv, x()), 0.3 + 1e-12);
}

TEST_F(Attacks, ZeroBudgetLeavesInputUnchanged) {
    for (AttackKind k : {AttackKind::fgsm, AttackKind::bim, AttackKind::pgd})
        EXPECT_EQ(run_attack(model(), x(), y(), make_cfg(k, 0.0)), x()) << attack_name(k);
}

TEST_F(Attacks, SignOfZeroIsZero) {
    // Zero weights give a zero input gradient, so nothing moves.
    const EstimatorModel zero = make_architecture(ArchTag::undefended);
    for (AttackKind k : {AttackKind::fgsm, AttackKind::bim}) EXPECT_EQ(run_attack(zero, x(), y(), make_cfg(k, 1.0)), x());
    EXPECT_EQ(detail::sign(0.0), 0.0);
    EXPECT_EQ(detail::sign(-0.0), 0.0);
}

TEST_F(Attacks, SingleIterationReductionsEqualFgsm) {
    for (double eps : {0.05, 0.5, 2.0}) {
        const RealGrid ref = fgsm(model(), x(), y(), make_cfg(AttackKind::fgsm, eps));
        EXPECT_EQ(bim(model(), x(), y(), make_cfg(AttackKind::bim, eps, 1)), ref);
        for (AttackKind k : {AttackKind::pgd, AttackKind::mim}) {
            AttackConfig c = make_cfg(k, eps, 1);
            c.noise_scale = 0.0;
            c.step_size = eps;
            EXPECT_EQ(run_attack(model(), x(), y(), c), ref) << attack_name(k);
            c.momentum_sign = true;
            EXPECT_EQ(run_attack(model(), x(), y(), c), ref) << attack_name(k) << " momentum_sign";
        }
    }
}

TEST_F(Attacks, BudgetBounds) {
    const double eps = 0.2;
    const std::size_t n = 6;
    EXPECT_LE(linf_distance(bim(model(), x(), y(), make_cfg(AttackKind::bim, eps, n)), x()), n * eps + 1e-12);
    AttackConfig clipped = make_cfg(AttackKind::bim, eps, n);
    clipped.clip_to_ball = true;
    EXPECT_LE(linf_distance(bim(model(), x(), y(), clipped), x()), eps + 1e-12);
    for (AttackKind k : {AttackKind::pgd, AttackKind::mim}) {
        const AttackConfig c = make_cfg(k, eps, n);
        EXPECT_LE(linf_distance(run_attack(model(), x(), y(), c), x()), n * c.alpha() + 1e-12) << attack_name(k);
        AttackConfig cc = c;
        cc.clip_to_ball = true;
        EXPECT_LE(linf_distance(run_attack(model(), x(), y(), cc), x()), eps + 1e-12) << attack_name(k);
    }
}

TEST_F(Attacks, DefaultsFollowDeclaredRules) {
    const AttackConfig c = make_cfg(AttackKind::pgd, 0.5);
    EXPECT_EQ(c.iterations, 10u);
    EXPECT_DOUBLE_EQ(c.alpha(), 2 * 0.5 / 10);
    EXPECT_DOUBLE_EQ(c.noise(), 0.5e-2);
    EXPECT_EQ(c.momentum_rate, 1.0);
    EXPECT_EQ(c.cw_constant, 1.0);
    EXPECT_EQ(c.cw_lr, 0.01);
    EXPECT_FALSE(c.clip_to_ball);
    EXPECT_FALSE(c.random_start);
}

TEST_F(Attacks, StochasticAttacksAreSeeded) {
    for (AttackKind k : {AttackKind::pgd, AttackKind::mim}) {
        AttackConfig c = make_cfg(k, 1.0, 4);
        c.noise_scale = 1.0;  // large enough to flip signs
        const RealGrid a = run_attack(model(), x(), y(), c);
        EXPECT_EQ(run_attack(model(), x(), y(), c), a);
        c.seed = 18;
        EXPECT_NE(run_attack(model(), x(), y(), c), a) << attack_name(k);
    }
}

TEST_F(Attacks, RandomStartStaysInBall) {
    AttackConfig c = make_cfg(AttackKind::pgd, 0.3, 3);
    c.random_start = true;
    c.clip_to_ball = true;
    const RealGrid a = pgd(model(), x(), y(), c);
    EXPECT_LE(linf_distance(a, x()), 0.3 + 1e-12);
    c.random_start = false;
    EXPECT_NE(pgd(model(), x(), y(), c), a);
}

TEST_F(Attacks, MimNeedsPositiveBudget) {
    EXPECT_THROW(mim(model(), x(), y(), make_cfg(AttackKind::mim, 0.0)), BudgetError);
    EXPECT_THROW(attack_batch(model(), data(), make_cfg(AttackKind::mim, 0.0)), BudgetError);
}

TEST_F(Attacks, MimPerturbsWhenGradientIsNonzero) {
    const RealGrid g = input_gradient(model(), x(), y());
    bool any = false;
    for (double v : g.values()) any = any || v != 0.0;
    ASSERT_TRUE(any);
    EXPECT_GT(linf_distance(mim(model(), x(), y(), make_cfg(AttackKind::mim, 0.1)), x()), 0.0);
}

TEST_F(Attacks, CwWithZeroConstantStaysPut) {
    AttackConfig c = make_cfg(AttackKind::cw, 0.0);
    c.cw_constant = 0.0;
    EXPECT_EQ(cw(model(), x(), y(), c), x());
}

TEST_F(Attacks, CwRaisesErrorOnAverage) {
    AttackConfig c = make_cfg(AttackKind::cw, 0.0);
    c.cw_constant = 50.0;
    const AdversarialBatch b = attack_batch(model(), data(), c);
    const auto benign = per_sample_mse(model(), b.originals, b.labels);
    const auto adv = per_sample_mse(model(), b.perturbed, b.labels);
    EXPECT_GE(mean(adv), mean(benign));
}

TEST_F(Attacks, FgsmIncreasesError) {
    for (double eps : {0.1, 1.0}) {
        const AdversarialBatch b = attack_batch(model(), data(), make_cfg(AttackKind::fgsm, eps));
        EXPECT_GT(mean(per_sample_mse(model(), b.perturbed, b.labels)), mean(per_sample_mse(model(), b.originals, b.labels)));
    }
}

TEST_F(Attacks, BatchPreservesOrderAndIsDeterministic) {
    const AttackConfig c = make_cfg(AttackKind::pgd, 0.5, 3);
    const AdversarialBatch a = attack_batch(model(), data(), c);
    ASSERT_EQ(a.size(), data().size());
    EXPECT_EQ(a.originals, data().inputs);
    EXPECT_EQ(a.labels, data().labels);
    for (std::size_t i = 0; i < a.size(); ++i) {
        AttackConfig ci = c;
        ci.seed = derive_seed(c.seed, i);
        EXPECT_EQ(a.perturbed[i], pgd(model(), data().inputs[i], data().labels[i], ci));
        EXPECT_EQ(a.linf[i], linf_distance(a.perturbed[i], a.originals[i]));
    }
    EXPECT_EQ(attack_batch(model(), data(), c).perturbed, a.perturbed);
}

TEST_F(Attacks, ShapeMismatch) {
    EXPECT_THROW(fgsm(model(), x(), RealGrid(16, 5), make_cfg(AttackKind::fgsm, 0.1)), ShapeError);
}

TEST(AttackConfig, ParseAndValidate) {
    EXPECT_EQ(parse_attack("PGD"), AttackKind::pgd);
    EXPECT_EQ(parse_attack("C&W"), AttackKind::cw);
    try {
        parse_attack("deepfool");
        FAIL();
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("fgsm, bim, pgd, mim, cw"), std::string::npos);
    }
    AttackConfig c;
    c.epsilon = -1.0;
    EXPECT_THROW(c.validate(), ConfigError);
    c = AttackConfig{};
    c.iterations = 0;
    EXPECT_THROW(c.validate(), ConfigError);
    c = AttackConfig{};
    c.step_size = 0.0;
    EXPECT_THROW(c.validate(), ConfigError);
}

TEST(AttackConfig, JsonRoundTrip) {
    AttackConfig c;
    c.kind = AttackKind::mim;
    c.epsilon = 2.0;
    c.iterations = 7;
    c.momentum_rate = 0.5;
    c.seed = 99;
    c.clip_to_ball = true;
    const AttackConfig back = nlohmann::json(c).get<AttackConfig>();
    EXPECT_EQ(back.kind, AttackKind::mim);
    EXPECT_EQ(back.iterations, 7u);
    EXPECT_DOUBLE_EQ(back.alpha(), c.alpha());
    EXPECT_DOUBLE_EQ(back.noise(), c.noise());
    EXPECT_EQ(back.seed, 99u);
    EXPECT_TRUE(back.clip_to_ball);
}

TEST_F(Attacks, SaveAdversarialWritesSidecar) {
    TempDir dir("atk");
    Dataset few = data();
    few.inputs.resize(3);
    few.labels.resize(3);
    few.scenarios.resize(3);
    const AdversarialBatch b = attack_batch(model(), few, make_cfg(AttackKind::bim, 0.1, 2));
    save_adversarial(b, few.scenarios, dir / "adv.cegd");
    const Dataset back = load_dataset(dir / "adv.cegd");
    EXPECT_EQ(back.size(), 3u);
    std::ifstream is(dir / "adv.cegd.attack.json");
    const auto j = nlohmann::json::parse(is);
    EXPECT_EQ(j.at("config").at("kind"), "bim");
    EXPECT_EQ(j.at("config").at("iterations"), 2);
    EXPECT_EQ(j.at("linf").size(), 3u);
}
