#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>
#include <fstream>
#include <sstream>

#include "bitta/checkpoint.hpp"
#include "bitta/losses.hpp"
#include "bitta/policy.hpp"
#include "support.hpp"

using namespace bitta;
using bitta::test::random_inputs;
using bitta::test::tiny_model;

TEST_CASE("zero-rate dropout is the identity") {
    const Model m = tiny_model(1, 0.0);
    const MatrixXd x = random_inputs(5, 4, 2);
    CHECK(forward(m, x, ForwardMode::dropout(123)) == forward(m, x, ForwardMode::deterministic()));
}

TEST_CASE("zero logits give a uniform two-class softmax") {
    Architecture a;
    a.input_dim = 3;
    a.hidden = {4};
    a.n_classes = 2;
    Model m(a, 0.0, 9);
    m.mutable_parameters().dense.back().weight.setZero();
    const MatrixXd p = forward(m, random_inputs(3, 3, 1), ForwardMode::deterministic());
    for (Eigen::Index r = 0; r < p.rows(); ++r) {
        CHECK(p(r, 0) == doctest::Approx(0.5));
        CHECK(p(r, 1) == doctest::Approx(0.5));
    }
}

TEST_CASE("seeded dropout passes repeat exactly") {
    const Model m = tiny_model(3);
    const MatrixXd x = random_inputs(6, 4, 4);
    const MatrixXd a = forward(m, x, ForwardMode::dropout(7));
    const MatrixXd b = forward(m, x, ForwardMode::dropout(7));
    CHECK(a == b);
    CHECK(a != forward(m, x, ForwardMode::dropout(8)));
}

TEST_CASE("dropout masks do not depend on the other rows") {
    const Model m = tiny_model(3);
    const MatrixXd x = random_inputs(6, 4, 4);
    const MatrixXd all = forward(m, x, ForwardMode::dropout(7));
    const MatrixXd top = forward(m, MatrixXd(x.topRows(3)), ForwardMode::dropout(7));
    CHECK(all.topRows(3) == top);
}

TEST_CASE("outputs stay on the simplex in every mode") {
    for (std::uint64_t seed = 0; seed < 25; ++seed) {
        Model m = tiny_model(seed);
        const MatrixXd x = random_inputs(7, 4, seed + 100) * (1.0 + static_cast<double>(seed));
        for (const auto& mode : {ForwardMode::deterministic(), ForwardMode::dropout(seed),
                                 ForwardMode::deterministic(BnUsage::UseBatch),
                                 ForwardMode::dropout(seed, BnUsage::UseBatch)}) {
            const MatrixXd p = forward(m, x, mode);
            CHECK(p.minCoeff() >= 0.0);
            CHECK((p.rowwise().sum().array() - 1.0).abs().maxCoeff() <= 1e-6);
        }
    }
}

TEST_CASE("forward rejects malformed input") {
    const Model m = tiny_model(1);
    CHECK_THROWS_AS(forward(m, random_inputs(3, 5, 1), ForwardMode::deterministic()), std::invalid_argument);
    MatrixXd bad = random_inputs(3, 4, 1);
    bad(1, 2) = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(forward(m, bad, ForwardMode::deterministic()), std::invalid_argument);
    CHECK_THROWS_AS(forward(m, random_inputs(1, 4, 1), ForwardMode::deterministic(BnUsage::UseBatch)),
                    std::invalid_argument);
}

TEST_CASE("BN update follows the stated momentum convention") {
    Model m = tiny_model(5);
    m.set_norm_stats(0, VectorXd::Zero(8), VectorXd::Ones(8));
    auto& first = m.mutable_parameters().dense.front();
    first.weight.setZero();
    first.bias.setOnes();
    update_bn_stats(m, random_inputs(10, 4, 6), 0.3);
    CHECK(m.norm_stats()[0].mean(0) == doctest::Approx(0.3));
    CHECK(m.bn_frozen());
}

TEST_CASE("BN update matches an independent batch-statistics computation") {
    const MatrixXd x = random_inputs(12, 4, 8);
    for (double momentum : {0.0, 0.3, 1.0}) {
        Model m = tiny_model(6);
        const Model before = m;
        update_bn_stats(m, x, momentum);
        // Layer 0 statistics from first principles.
        const auto& d = before.parameters().dense[0];
        const MatrixXd z = (x * d.weight.transpose()).rowwise() + d.bias.transpose();
        const VectorXd mean = z.colwise().mean().transpose();
        const VectorXd var = ((z.rowwise() - mean.transpose()).array().square().colwise().sum() / 11.0).transpose();
        const auto& old = before.norm_stats()[0];
        const VectorXd expect_mean = (1.0 - momentum) * old.mean + momentum * mean;
        const VectorXd expect_var = (1.0 - momentum) * old.var + momentum * var;
        CHECK((m.norm_stats()[0].mean - expect_mean).cwiseAbs().maxCoeff() <= 1e-12);
        CHECK((m.norm_stats()[0].var - expect_var).cwiseAbs().maxCoeff() <= 1e-12);
        if (momentum == 0.0) {
            CHECK(m.norm_stats()[1].mean == before.norm_stats()[1].mean);
            CHECK(m.norm_stats()[1].var == before.norm_stats()[1].var);
        }
    }
}

TEST_CASE("frozen BN statistics survive any forward calls") {
    Model m = tiny_model(2);
    update_bn_stats(m, random_inputs(8, 4, 3), 0.3);
    const auto stats = m.norm_stats();
    for (int i = 0; i < 5; ++i) {
        forward(m, random_inputs(8, 4, 10 + i), ForwardMode::dropout(i, BnUsage::UseBatch));
        forward(m, random_inputs(8, 4, 20 + i), ForwardMode::deterministic(BnUsage::UseBatch));
    }
    for (std::size_t l = 0; l < stats.size(); ++l) {
        CHECK(m.norm_stats()[l].mean == stats[l].mean);
        CHECK(m.norm_stats()[l].var == stats[l].var);
    }
    // Once frozen, batch-statistics requests fall back to the running statistics.
    const MatrixXd x = random_inputs(8, 4, 30);
    CHECK(forward(m, x, ForwardMode::deterministic(BnUsage::UseBatch)) == forward(m, x, ForwardMode::deterministic()));
}

TEST_CASE("BN update rejects bad momentum and single rows") {
    Model m = tiny_model(2);
    CHECK_THROWS_AS(update_bn_stats(m, random_inputs(4, 4, 1), 1.5), std::invalid_argument);
    CHECK_THROWS_AS(update_bn_stats(m, random_inputs(4, 4, 1), -0.1), std::invalid_argument);
    CHECK_THROWS_AS(update_bn_stats(m, random_inputs(1, 4, 1), 0.3), std::invalid_argument);
}

TEST_CASE("cross-entropy examples") {
    CHECK(cross_entropy(Eigen::RowVector2d(0.5, 0.5), 0) == doctest::Approx(0.693147).epsilon(1e-6));
    CHECK(cross_entropy(Eigen::RowVector2d(1.0, 0.0), 0) <= 1e-5);
    CHECK(cross_entropy(Eigen::RowVector2d(0.25, 0.75), 1) == doctest::Approx(0.287682).epsilon(1e-6));
    CHECK_THROWS_AS(cross_entropy(Eigen::RowVector2d(0.5, 0.5), 2), std::out_of_range);
    CHECK_THROWS_AS(cross_entropy(Eigen::RowVector2d(0.5, 0.5), -1), std::out_of_range);
}

TEST_CASE("complementary cross-entropy examples") {
    CHECK(complementary_cross_entropy(Eigen::RowVector2d(0.5, 0.5), 0) == doctest::Approx(0.693147).epsilon(1e-6));
    CHECK(complementary_cross_entropy(Eigen::RowVector2d(0.9, 0.1), 0) == doctest::Approx(2.302585).epsilon(1e-6));
    CHECK(complementary_cross_entropy(Eigen::RowVector2d(0.0, 1.0), 0) <= 1e-5);
    CHECK_THROWS_AS(complementary_cross_entropy(Eigen::RowVector2d(0.5, 0.5), 3), std::out_of_range);
}

TEST_CASE("bias gradient at a uniform softmax is p minus one-hot") {
    Model m = tiny_model(4, 0.0);
    m.mutable_parameters().dense.back().weight.setZero();
    m.mutable_parameters().dense.back().bias.setZero();
    const MatrixXd x = random_inputs(1, 4, 5);
    const auto lg = loss_gradient<double>(m, x, {ForwardMode::deterministic()}, weighted_nll<double>({2}, {1.0}));
    const VectorXd g = lg.grad.dense.back().bias;
    CHECK(g(0) == doctest::Approx(1.0 / 3.0));
    CHECK(g(1) == doctest::Approx(1.0 / 3.0));
    CHECK(g(2) == doctest::Approx(1.0 / 3.0 - 1.0));
}

TEST_CASE("blocks the loss cannot see get zero gradient") {
    Model m = tiny_model(4, 0.0);
    m.mutable_parameters().dense.back().weight.setZero();
    const auto lg = loss_gradient<double>(m, random_inputs(5, 4, 6), {ForwardMode::deterministic()},
                                          weighted_nll<double>({0, 1, 2, 0, 1}, std::vector<double>(5, 0.2)));
    for (std::size_t l = 0; l + 1 < lg.grad.dense.size(); ++l) {
        CHECK(lg.grad.dense[l].weight.cwiseAbs().maxCoeff() == 0.0);
        CHECK(lg.grad.norm[l].gamma.cwiseAbs().maxCoeff() == 0.0);
    }
}

TEST_CASE("loss gradient rejects non-finite losses") {
    const Model m = tiny_model(1);
    const ProbLossFn<double> nan_loss = [](const MatrixXd& p) {
        return ProbLoss<double>{std::numeric_limits<double>::quiet_NaN(), MatrixXd::Zero(p.rows(), p.cols())};
    };
    CHECK_THROWS_AS(loss_gradient<double>(m, random_inputs(3, 4, 1), {ForwardMode::deterministic()}, nan_loss),
                    std::domain_error);
}

TEST_CASE("gradient check: combined feedback loss over MC-dropout passes") {
    const Model m = tiny_model(11);
    const MatrixXd x = random_inputs(9, 4, 12);
    ReplayMemory correct, incorrect;
    for (int i = 0; i < 3; ++i) correct.insert({SampleId(i), x.row(i), i % 3, kFeedbackCorrect});
    for (int i = 3; i < 5; ++i) incorrect.insert({SampleId(i), x.row(i), (i + 1) % 3, kFeedbackIncorrect});
    const MatrixXd aba = x.bottomRows(4);
    const std::vector<int> aba_labels{0, 2, 1, 1};
    AdaptConfig cfg;
    cfg.alpha = 2.0;
    cfg.beta = 1.0;
    const auto full = bitta_loss(m, correct, incorrect, aba, aba_labels, cfg, 77, true);
    REQUIRE(full);
    REQUIRE(full->grad);
    const auto check = test::finite_difference_check(m, *full->grad, [&](const Model& probe) {
        return bitta_loss(probe, correct, incorrect, aba, aba_labels, cfg, 77, false)->terms.total;
    });
    CHECK(check.checked >= 100);
    CHECK(check.max_relative_error <= 1e-4);
}

TEST_CASE("gradient check: entropy baseline loss") {
    Model m = tiny_model(13);
    const MatrixXd x = random_inputs(10, 4, 14);
    const auto labels = predict(m, x);
    const auto loss = entropy_feedback_loss<double>(labels, {0, 3}, {5, 7, 8});
    const auto lg = loss_gradient<double>(m, x, {ForwardMode::deterministic()}, loss);
    const auto check = test::finite_difference_check(m, lg.grad, [&](const Model& probe) {
        return loss(forward(probe, x, ForwardMode::deterministic())).value;
    });
    CHECK(check.checked >= 100);
    CHECK(check.max_relative_error <= 1e-4);
}

TEST_CASE("gradient check: batch-statistics training pass") {
    Model m = tiny_model(15);
    m.set_bn_frozen(false);
    const MatrixXd x = random_inputs(12, 4, 16);
    const std::vector<int> y{0, 1, 2, 0, 1, 2, 0, 1, 2, 0, 1, 2};
    const auto loss = weighted_nll<double>(y, std::vector<double>(12, 1.0 / 12));
    const auto mode = ForwardMode::dropout(5, BnUsage::UseBatch);
    const auto lg = loss_gradient<double>(m, x, {mode}, loss);
    const auto check = test::finite_difference_check(
        m, lg.grad, [&](const Model& probe) { return loss(forward(probe, x, mode)).value; });
    CHECK(check.checked >= 100);
    CHECK(check.max_relative_error <= 1e-4);
}

TEST_CASE("sgd step examples") {
    Model m = tiny_model(1);
    parameter_coeff(m.mutable_parameters(), 0) = 1.0;
    auto grad = zeros_like(m.parameters());

    SUBCASE("zero gradient leaves the model unchanged") {
        const Model before = m;
        sgd_step(m, grad, 0.1, 0.0);
        CHECK(test::same_parameters(m, before));
    }
    SUBCASE("plain step") {
        parameter_coeff(grad, 0) = 0.5;
        sgd_step(m, grad, 0.1, 0.0);
        CHECK(parameter_coeff(m.mutable_parameters(), 0) == doctest::Approx(0.95));
    }
    SUBCASE("weight decay only") {
        sgd_step(m, grad, 0.1, 0.05);
        CHECK(parameter_coeff(m.mutable_parameters(), 0) == doctest::Approx(0.995));
    }
    SUBCASE("running statistics are not parameters") {
        const auto stats = m.norm_stats();
        parameter_coeff(grad, 3) = 1.0;
        sgd_step(m, grad, 0.1, 0.05);
        CHECK(m.norm_stats()[0].mean == stats[0].mean);
        CHECK(m.norm_stats()[1].var == stats[1].var);
    }
    SUBCASE("invalid steps are rejected") {
        CHECK_THROWS_AS(sgd_step(m, grad, 0.0, 0.0), std::invalid_argument);
        CHECK_THROWS_AS(sgd_step(m, grad, 0.1, -1.0), std::invalid_argument);
        parameter_coeff(grad, 2) = std::numeric_limits<double>::infinity();
        CHECK_THROWS_AS(sgd_step(m, grad, 0.1, 0.0), std::domain_error);
    }
}

TEST_CASE("norm-affine subset leaves dense layers alone") {
    Model m = tiny_model(1);
    const Model before = m;
    auto grad = zeros_like(m.parameters());
    visit_tensors(grad, [](auto& t) { t.setOnes(); });
    sgd_step(m, grad, 0.1, 0.0, ParameterSubset::NormAffine);
    CHECK(m.parameters().dense[0].weight == before.parameters().dense[0].weight);
    CHECK(m.parameters().norm[0].gamma != before.parameters().norm[0].gamma);
}

TEST_CASE("checkpoints round-trip exactly") {
    const Model m = tiny_model(21);
    const auto path = std::filesystem::temp_directory_path() / "bitta_test_ckpt.json";
    save_checkpoint(m, path);
    const Model back = load_checkpoint(path);
    CHECK(test::same_parameters(m, back));
    CHECK(back.dropout_rates() == m.dropout_rates());
    CHECK(back.bn_frozen() == m.bn_frozen());
    const MatrixXd x = random_inputs(6, 4, 22);
    CHECK(forward(back, x, ForwardMode::dropout(3)) == forward(m, x, ForwardMode::dropout(3)));
    CHECK(model_to_json(back).dump() == model_to_json(m).dump());
    std::filesystem::remove(path);
}

TEST_CASE("checkpoint loading rejects other formats") {
    auto j = model_to_json(tiny_model(1));
    j["format"] = "something-else";
    CHECK_THROWS(model_from_json<double>(j));
}

TEST_CASE("float models run the same code path") {
    ModelState<float> m(test::tiny_architecture(), 0.3, 5);
    const Matrix<float> x = random_inputs(4, 4, 1).cast<float>();
    const Matrix<float> p = forward(m, x, ForwardMode::dropout(2));
    CHECK((p.rowwise().sum().array() - 1.0f).abs().maxCoeff() <= 1e-5f);
}
