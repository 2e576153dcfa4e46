#include "bitta/policy.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>

#include "bitta/random.hpp"

namespace bitta {

std::vector<ForwardMode> mc_dropout_passes(int n_passes, std::uint64_t base_seed) {
    if (n_passes < 1) throw std::invalid_argument("MC-dropout needs at least one pass");
    std::vector<ForwardMode> passes;
    passes.reserve(static_cast<std::size_t>(n_passes));
    for (int i = 0; i < n_passes; ++i)
        passes.push_back(ForwardMode::dropout(derive_seed(base_seed, {static_cast<std::uint64_t>(i)})));
    return passes;
}

PolicyEstimate combine_passes(MatrixXd det_probs, std::span<const MatrixXd> pass_probs) {
    if (pass_probs.empty()) throw std::invalid_argument("MC-dropout needs at least one pass");
    PolicyEstimate est;
    est.mc_probs = pass_probs.front();
    for (std::size_t i = 1; i < pass_probs.size(); ++i) {
        if (pass_probs[i].rows() != est.mc_probs.rows() || pass_probs[i].cols() != est.mc_probs.cols())
            throw std::invalid_argument("MC passes disagree in shape");
        est.mc_probs += pass_probs[i];
    }
    est.mc_probs /= static_cast<double>(pass_probs.size());
    if (det_probs.rows() != est.mc_probs.rows() || det_probs.cols() != est.mc_probs.cols())
        throw std::invalid_argument("deterministic and MC outputs disagree in shape");
    est.det_probs = std::move(det_probs);
    est.det_pred = argmax_rows(est.det_probs);
    est.mc_pred = argmax_rows(est.mc_probs);
    est.confidence.resize(est.mc_probs.rows());
    for (Eigen::Index r = 0; r < est.mc_probs.rows(); ++r)
        est.confidence(r) = est.mc_probs(r, est.det_pred[static_cast<std::size_t>(r)]);
    est.n_passes = static_cast<int>(pass_probs.size());
    return est;
}

PolicyEstimate estimate_policy(const Model& model, const MatrixXd& batch, int n_passes, std::uint64_t base_seed) {
    const auto passes = mc_dropout_passes(n_passes, base_seed);
    std::vector<MatrixXd> outputs;
    outputs.reserve(passes.size());
    std::vector<std::uint64_t> seeds;
    for (const auto& mode : passes) {
        outputs.push_back(forward(model, batch, mode));
        seeds.push_back(*mode.dropout_seed);
    }
    auto est = combine_passes(forward(model, batch, ForwardMode::deterministic()), outputs);
    est.pass_seeds = std::move(seeds);
    return est;
}

std::vector<int> select_bfa(const PolicyEstimate& estimate, int k, SelectionStrategy strategy) {
    if (k < 0) throw std::invalid_argument("feedback budget k must be non-negative");
    const int n = static_cast<int>(estimate.confidence.size());
    const int take = std::min(k, n);
    std::vector<int> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    if (strategy.kind == SelectionStrategy::Kind::LeastConfidence) {
        std::stable_sort(order.begin(), order.end(),
                         [&](int a, int b) { return estimate.confidence(a) < estimate.confidence(b); });
    } else {
        std::mt19937_64 rng(strategy.seed);
        std::shuffle(order.begin(), order.end(), rng);
    }
    order.resize(static_cast<std::size_t>(take));
    return order;
}

std::vector<int> agreement_set(const PolicyEstimate& estimate, std::span<const int> bfa_indices) {
    const auto n = estimate.det_pred.size();
    std::vector<bool> excluded(n, false);
    for (int i : bfa_indices) {
        if (i < 0 || static_cast<std::size_t>(i) >= n) throw std::out_of_range("BFA index outside the batch");
        excluded[static_cast<std::size_t>(i)] = true;
    }
    std::vector<int> out;
    for (std::size_t i = 0; i < n; ++i)
        if (!excluded[i] && estimate.det_pred[i] == estimate.mc_pred[i]) out.push_back(static_cast<int>(i));
    return out;
}

SelectionResult select_samples(const PolicyEstimate& estimate, int k, SelectionStrategy strategy) {
    SelectionResult r;
    r.bfa_indices = select_bfa(estimate, k, strategy);
    r.aba_indices = agreement_set(estimate, r.bfa_indices);
    return r;
}

double expected_calibration_error(std::span<const double> confidences, const std::vector<bool>& correct,
                                  int n_bins) {
    if (confidences.size() != correct.size()) throw std::invalid_argument("confidences and correctness differ in length");
    if (n_bins < 1) throw std::invalid_argument("ECE needs at least one bin");
    if (confidences.empty()) return 0.0;
    std::vector<double> conf_sum(static_cast<std::size_t>(n_bins), 0.0);
    std::vector<double> hit_sum(static_cast<std::size_t>(n_bins), 0.0);
    std::vector<std::size_t> count(static_cast<std::size_t>(n_bins), 0);
    for (std::size_t i = 0; i < confidences.size(); ++i) {
        const double c = confidences[i];
        if (!(c >= 0.0 && c <= 1.0)) throw std::invalid_argument("confidence outside [0, 1]");
        const int bin = std::clamp(static_cast<int>(std::ceil(c * n_bins)) - 1, 0, n_bins - 1);
        conf_sum[static_cast<std::size_t>(bin)] += c;
        hit_sum[static_cast<std::size_t>(bin)] += correct[i] ? 1.0 : 0.0;
        ++count[static_cast<std::size_t>(bin)];
    }
    const auto total = static_cast<double>(confidences.size());
    double ece = 0.0;
    for (std::size_t b = 0; b < count.size(); ++b) {
        if (count[b] == 0) continue;
        const auto m = static_cast<double>(count[b]);
        ece += (m / total) * std::abs(hit_sum[b] / m - conf_sum[b] / m);
    }
    return ece;
}

}  // namespace bitta
