#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "bitta/nn.hpp"

namespace bitta {

// MC-dropout view of one batch: pi(y|x) averaged over dropout passes, the
// deterministic prediction y*, and the confidence pi(y*|x).
struct PolicyEstimate {
    MatrixXd mc_probs;
    MatrixXd det_probs;
    std::vector<int> det_pred;
    std::vector<int> mc_pred;
    VectorXd confidence;
    int n_passes = 0;
    std::vector<std::uint64_t> pass_seeds;

    Eigen::Index size() const { return mc_probs.rows(); }
};

struct SelectionStrategy {
    enum class Kind { LeastConfidence, Random };
    Kind kind = Kind::LeastConfidence;
    std::uint64_t seed = 0;

    static SelectionStrategy least_confidence() { return {}; }
    static SelectionStrategy random(std::uint64_t seed) { return {Kind::Random, seed}; }
};

struct SelectionResult {
    std::vector<int> bfa_indices;
    std::vector<int> aba_indices;
};

// Dropout forward modes for n passes; pass i uses derive_seed(base_seed, {i}).
std::vector<ForwardMode> mc_dropout_passes(int n_passes, std::uint64_t base_seed);

// Builds an estimate from already computed deterministic and per-pass outputs.
PolicyEstimate combine_passes(MatrixXd det_probs, std::span<const MatrixXd> pass_probs);

// Always evaluates with running BN statistics.
PolicyEstimate estimate_policy(const Model& model, const MatrixXd& batch, int n_passes, std::uint64_t base_seed);

// Least-confidence: the min(k, n) smallest confidences, ascending, ties to
// the lower batch index. Random: min(k, n) distinct indices in draw order.
std::vector<int> select_bfa(const PolicyEstimate& estimate, int k, SelectionStrategy strategy);

// Non-BFA indices whose deterministic and MC-dropout argmax coincide.
std::vector<int> agreement_set(const PolicyEstimate& estimate, std::span<const int> bfa_indices);

SelectionResult select_samples(const PolicyEstimate& estimate, int k, SelectionStrategy strategy);

// Equal-width, right-closed bins over (0, 1]; confidence 0 goes to the first bin.
double expected_calibration_error(std::span<const double> confidences, const std::vector<bool>& correct,
                                  int n_bins = 15);

}  // namespace bitta
