#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <random>
#include <set>

#include "bitta/policy.hpp"
#include "support.hpp"

using namespace bitta;
using bitta::test::random_inputs;
using bitta::test::tiny_model;

namespace {

PolicyEstimate estimate_from_confidence(std::vector<double> conf) {
    PolicyEstimate est;
    const auto n = static_cast<Eigen::Index>(conf.size());
    est.mc_probs = MatrixXd::Zero(n, 2);
    est.det_probs = est.mc_probs;
    est.confidence = Eigen::Map<VectorXd>(conf.data(), n);
    est.det_pred.assign(conf.size(), 0);
    est.mc_pred.assign(conf.size(), 0);
    est.n_passes = 1;
    return est;
}

// Binned ECE written directly from the definition: bin b holds (b/B, (b+1)/B],
// with confidence 0 in the first bin.
double ece_oracle(const std::vector<double>& conf, const std::vector<bool>& hit, int bins) {
    double total = 0.0;
    for (int b = 0; b < bins; ++b) {
        const double lo = static_cast<double>(b) / bins;
        const double hi = static_cast<double>(b + 1) / bins;
        double c = 0.0, a = 0.0, m = 0.0;
        for (std::size_t i = 0; i < conf.size(); ++i) {
            const bool in = (conf[i] > lo && conf[i] <= hi) || (b == 0 && conf[i] == 0.0);
            if (!in) continue;
            c += conf[i];
            a += hit[i] ? 1.0 : 0.0;
            m += 1.0;
        }
        if (m > 0) total += m / static_cast<double>(conf.size()) * std::abs(a / m - c / m);
    }
    return total;
}

}  // namespace

TEST_CASE("zero dropout makes the MC policy the deterministic one") {
    const Model m = tiny_model(2, 0.0);
    const MatrixXd x = random_inputs(10, 4, 3);
    const auto est = estimate_policy(m, x, 4, 99);
    CHECK(est.mc_probs == est.det_probs);
    CHECK(est.mc_pred == est.det_pred);
    CHECK(agreement_set(est, {}).size() == 10);
}

TEST_CASE("MC policy is the arithmetic mean of the passes") {
    MatrixXd a(1, 2), b(1, 2);
    a << 0.6, 0.4;
    b << 0.2, 0.8;
    const std::vector<MatrixXd> passes{a, b};
    const auto est = combine_passes(a, passes);
    CHECK(est.mc_probs(0, 0) == doctest::Approx(0.4));
    CHECK(est.mc_probs(0, 1) == doctest::Approx(0.6));
    CHECK(est.det_pred[0] == 0);
    CHECK(est.confidence(0) == doctest::Approx(0.4));
}

TEST_CASE("policy estimates are deterministic and seed-sensitive") {
    const Model m = tiny_model(4);
    const MatrixXd x = random_inputs(12, 4, 5);
    const auto a = estimate_policy(m, x, 4, 17);
    const auto b = estimate_policy(m, x, 4, 17);
    CHECK(a.mc_probs == b.mc_probs);
    CHECK(a.pass_seeds == b.pass_seeds);
    CHECK(a.mc_probs != estimate_policy(m, x, 4, 18).mc_probs);
    CHECK_THROWS_AS(estimate_policy(m, x, 0, 1), std::invalid_argument);
}

TEST_CASE("policy estimate invariants hold on random models") {
    for (std::uint64_t seed = 0; seed < 30; ++seed) {
        const Model m = tiny_model(seed);
        const MatrixXd x = random_inputs(9, 4, seed + 50) * 2.0;
        const int n = 1 + static_cast<int>(seed % 5);
        const auto est = estimate_policy(m, x, n, seed);
        CHECK(est.n_passes == n);
        CHECK(est.pass_seeds.size() == static_cast<std::size_t>(n));
        CHECK(est.mc_probs.minCoeff() >= 0.0);
        CHECK((est.mc_probs.rowwise().sum().array() - 1.0).abs().maxCoeff() <= 1e-9);
        for (Eigen::Index r = 0; r < est.size(); ++r)
            CHECK(est.confidence(r) == est.mc_probs(r, est.det_pred[static_cast<std::size_t>(r)]));
    }
}

TEST_CASE("least-confidence selection examples") {
    CHECK(select_bfa(estimate_from_confidence({0.9, 0.2, 0.5, 0.7}), 2, SelectionStrategy::least_confidence()) ==
          std::vector<int>{1, 2});
    CHECK(select_bfa(estimate_from_confidence({0.9, 0.2, 0.5, 0.7}), 0, SelectionStrategy::least_confidence())
              .empty());
    CHECK(select_bfa(estimate_from_confidence({0.3, 0.3, 0.9}), 1, SelectionStrategy::least_confidence()) ==
          std::vector<int>{0});
    CHECK(select_bfa(estimate_from_confidence({0.3, 0.1}), 5, SelectionStrategy::least_confidence()) ==
          std::vector<int>{1, 0});
    CHECK_THROWS_AS(select_bfa(estimate_from_confidence({0.3}), -1, SelectionStrategy::least_confidence()),
                    std::invalid_argument);
}

TEST_CASE("agreement set examples") {
    auto est = estimate_from_confidence({0.5, 0.5, 0.5, 0.5});
    est.det_pred = {0, 1, 2, 1};
    est.mc_pred = {0, 2, 2, 1};
    CHECK(agreement_set(est, std::vector<int>{3}) == std::vector<int>{0, 2});
    CHECK(agreement_set(est, std::vector<int>{0, 1, 2, 3}).empty());
    CHECK_THROWS_AS(agreement_set(est, std::vector<int>{4}), std::out_of_range);
}

TEST_CASE("random selection draws distinct indices under its seed") {
    const auto est = estimate_from_confidence(std::vector<double>(20, 0.5));
    const auto a = select_bfa(est, 6, SelectionStrategy::random(3));
    CHECK(a == select_bfa(est, 6, SelectionStrategy::random(3)));
    CHECK(a != select_bfa(est, 6, SelectionStrategy::random(4)));
    CHECK(std::set<int>(a.begin(), a.end()).size() == 6);
}

TEST_CASE("random selection is uniform over the batch") {
    const auto est = estimate_from_confidence(std::vector<double>(8, 0.5));
    std::vector<int> hits(8, 0);
    const int trials = 8000;
    for (int t = 0; t < trials; ++t)
        for (int i : select_bfa(est, 2, SelectionStrategy::random(static_cast<std::uint64_t>(t)))) ++hits[i];
    // Each index is chosen with probability 1/4; allow 4 standard deviations.
    const double expected = trials * 0.25;
    const double sd = std::sqrt(trials * 0.25 * 0.75);
    for (int h : hits) CHECK(std::abs(h - expected) <= 4.0 * sd);
}

TEST_CASE("selection properties over random confidences") {
    std::mt19937_64 rng(7);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int trial = 0; trial < 200; ++trial) {
        const int n = 1 + trial % 17;
        const int k = trial % 7;
        std::vector<double> conf(static_cast<std::size_t>(n));
        for (auto& c : conf) c = std::round(u(rng) * 10.0) / 10.0;  // coarse grid forces ties
        auto est = estimate_from_confidence(conf);
        for (int i = 0; i < n; ++i) {
            est.det_pred[static_cast<std::size_t>(i)] = static_cast<int>(rng() % 2);
            est.mc_pred[static_cast<std::size_t>(i)] = static_cast<int>(rng() % 2);
        }
        for (auto strategy : {SelectionStrategy::least_confidence(), SelectionStrategy::random(trial)}) {
            const auto sel = select_samples(est, k, strategy);
            CHECK(sel.bfa_indices.size() == static_cast<std::size_t>(std::min(k, n)));
            const std::set<int> bfa(sel.bfa_indices.begin(), sel.bfa_indices.end());
            CHECK(bfa.size() == sel.bfa_indices.size());
            for (int i : sel.aba_indices) {
                CHECK(bfa.count(i) == 0);
                CHECK(est.det_pred[static_cast<std::size_t>(i)] == est.mc_pred[static_cast<std::size_t>(i)]);
            }
        }
        // Least-confidence picks are no more confident than anything left out.
        const auto lc = select_bfa(est, k, SelectionStrategy::least_confidence());
        const std::set<int> picked(lc.begin(), lc.end());
        for (int i : lc)
            for (int j = 0; j < n; ++j)
                if (!picked.count(j)) {
                    CHECK(conf[static_cast<std::size_t>(i)] <= conf[static_cast<std::size_t>(j)]);
                    if (conf[static_cast<std::size_t>(i)] == conf[static_cast<std::size_t>(j)]) CHECK(i < j);
                }
        // Lowering one sample below every selected confidence forces it in.
        if (k > 0 && n > k) {
            const int target = static_cast<int>(rng() % static_cast<std::uint64_t>(n));
            auto lowered = conf;
            lowered[static_cast<std::size_t>(target)] = -1.0;
            const auto again = select_bfa(estimate_from_confidence(lowered), k, SelectionStrategy::least_confidence());
            CHECK(std::find(again.begin(), again.end(), target) != again.end());
        }
    }
}

TEST_CASE("ECE examples") {
    const std::vector<double> conf{0.9, 0.6, 0.8, 0.55};
    const std::vector<bool> hit{true, false, true, true};
    // Values frozen from ece_oracle.
    CHECK(ece_oracle(conf, hit, 2) == doctest::Approx(0.0375));
    CHECK(ece_oracle(conf, hit, 4) == doctest::Approx(0.1125));
    CHECK(expected_calibration_error(conf, hit, 2) == doctest::Approx(0.0375));
    CHECK(expected_calibration_error(conf, hit, 4) == doctest::Approx(0.1125));

    CHECK(expected_calibration_error(std::vector<double>{1.0, 1.0, 1.0, 1.0}, {true, false, true, false}, 15) ==
          doctest::Approx(0.5));
    CHECK(expected_calibration_error(std::vector<double>{0.75, 0.75, 0.75, 0.75}, {true, true, true, false}, 10) ==
          doctest::Approx(0.0));
    CHECK(expected_calibration_error(std::vector<double>{0.0}, {false}, 3) == doctest::Approx(0.0));
    CHECK_THROWS_AS(expected_calibration_error(std::vector<double>{0.5}, {true, false}, 3), std::invalid_argument);
    CHECK_THROWS_AS(expected_calibration_error(std::vector<double>{0.5}, {true}, 0), std::invalid_argument);
    CHECK_THROWS_AS(expected_calibration_error(std::vector<double>{1.5}, {true}, 3), std::invalid_argument);
}

TEST_CASE("ECE matches the oracle and stays in [0, 1]") {
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t n = 1 + static_cast<std::size_t>(trial % 40);
        std::vector<double> conf(n);
        std::vector<bool> hit(n);
        for (std::size_t i = 0; i < n; ++i) {
            conf[i] = u(rng);
            hit[i] = u(rng) < 0.6;
        }
        const int bins = 1 + trial % 20;
        const double ece = expected_calibration_error(conf, hit, bins);
        CHECK(ece >= 0.0);
        CHECK(ece <= 1.0);
        CHECK(ece == doctest::Approx(ece_oracle(conf, hit, bins)).epsilon(1e-12));
    }
}

TEST_CASE("ECE of a constant predictor is |confidence - accuracy|") {
    for (double c : {0.05, 0.33, 0.5, 0.8, 1.0})
        for (int correct = 0; correct <= 10; ++correct) {
            std::vector<bool> hit(10, false);
            for (int i = 0; i < correct; ++i) hit[static_cast<std::size_t>(i)] = true;
            const double ece = expected_calibration_error(std::vector<double>(10, c), hit, 15);
            CHECK(ece == doctest::Approx(std::abs(c - correct / 10.0)));
        }
}
