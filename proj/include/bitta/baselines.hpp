#pragma once

#include <cstdint>
#include <string>

#include "bitta/engine.hpp"

namespace bitta {

enum class BaselineKind { SrcValid, BnStats, EntropyMinBinary };

std::string to_string(BaselineKind kind);

// Evaluation only; the model is not touched.
double srcvalid_step(const Model& model, const StreamBatch& batch);

// Scores the batch with the incoming model, then refreshes and freezes the BN
// statistics on it. Only BN statistics change.
double bnstats_step(Model& model, const StreamBatch& batch, double momentum);

struct EntropyMinOptions {
    double bn_momentum = 0.3;
    double weight_decay = 0.0;
    double clip_eps = 1e-6;
    std::uint64_t selection_seed = 0;
};

struct EntropyMinResult {
    double accuracy = 0.0;  // of the predictions made before the update
    double loss = 0.0;
    double entropy = 0.0;
    std::size_t n_correct_feedback = 0;
    std::size_t n_incorrect_feedback = 0;
};

// TENT-style entropy minimization with binary feedback: scores the batch,
// queries k uniformly random samples, refreshes BN statistics, then takes one
// SGD step on BN affine parameters for
//   mean entropy + mean CE(correct feedback) + mean CCE(incorrect feedback)
// over deterministic softmax outputs.
EntropyMinResult entropy_min_binary_step(Model& model, const StreamBatch& batch, FeedbackOracle& oracle, int k,
                                         double lr, const EntropyMinOptions& options = {});

// Adapter form used by the experiment harness; reports match the engine's.
class BaselineAdapter : public StreamAdapter {
public:
    BaselineAdapter(BaselineKind kind, Model model, AdaptConfig config, FeedbackSchedule schedule = {});

    AdaptReport step(const StreamBatch& batch, FeedbackOracle& oracle) override;
    const Model& model() const override { return model_; }

private:
    BaselineKind kind_;
    Model model_;
    AdaptConfig config_;
    FeedbackSchedule schedule_;
};

}  // namespace bitta
