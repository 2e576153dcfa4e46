#pragma once

#include <cstdint>
#include <deque>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "bitta/nn.hpp"
#include "bitta/oracle.hpp"
#include "bitta/policy.hpp"
#include "bitta/streams.hpp"

namespace bitta {

struct FeedbackRecord {
    SampleId sample_id = 0;
    Eigen::RowVectorXd features;
    int predicted_label = 0;
    int feedback = kFeedbackCorrect;  // +1 or -1
};

// Bounded FIFO pool; inserting into a full pool evicts the oldest record.
class ReplayMemory {
public:
    explicit ReplayMemory(std::size_t capacity = 64) : capacity_(capacity) {}

    void insert(FeedbackRecord record);

    const std::deque<FeedbackRecord>& records() const noexcept { return records_; }
    std::size_t size() const noexcept { return records_.size(); }
    std::size_t capacity() const noexcept { return capacity_; }
    bool empty() const noexcept { return records_.empty(); }

    MatrixXd features() const;
    std::vector<int> labels() const;

private:
    std::size_t capacity_;
    std::deque<FeedbackRecord> records_;
};

ReplayMemory memory_insert(ReplayMemory memory, FeedbackRecord record);

// Which loss paths the engine computes at all. Both is the full method; the
// other two remove a path entirely instead of zero-weighting it.
enum class LossPaths { Both, BfaOnly, AbaOnly };

struct AdaptConfig {
    int k = 3;
    int epochs = 3;
    double lr = 1e-3;
    double alpha = 2.0;
    double beta = 1.0;
    int n_passes = 4;
    double dropout_rate = 0.3;
    double bn_momentum = 0.3;
    double weight_decay = 0.0;
    SelectionStrategy::Kind selection = SelectionStrategy::Kind::LeastConfidence;
    double clip_eps = 1e-6;
    std::uint64_t seed = 0;
    std::size_t memory_capacity = 64;
    LossPaths paths = LossPaths::Both;

    void validate() const;
};

// Labels every `skip_period`-th batch; feedback obtained at batch t enters
// the memories at batch t + delay, as the stored (x, y*) pair from query time.
struct FeedbackSchedule {
    int skip_period = 1;
    int delay = 0;

    bool labeled(int batch_index) const { return batch_index % skip_period == 0; }
    void validate() const;
};

double reward_bfa(int feedback);
double reward_aba(bool in_agreement);

struct LossTerms {
    double total = 0.0;
    double bfa_correct = 0.0;    // mean -log pi over the correct memory
    double bfa_incorrect = 0.0;  // mean +log pi over the incorrect memory
    double aba = 0.0;            // mean -log pi over the agreement set
    std::size_t n_correct = 0;
    std::size_t n_incorrect = 0;
    std::size_t n_aba = 0;
};

struct BittaLoss {
    LossTerms terms;
    bool active = false;  // some row carries a non-zero weight
    std::optional<GradientVector<double>> grad;
};

// alpha * mean_{M_C}(-log pi) + alpha * mean_{M_I}(+log pi) + beta * mean_{S_ABA}(-log pi)
// with pi the clipped MC-dropout policy. Empty sets contribute 0; nullopt
// means all three sets are empty.
std::optional<BittaLoss> bitta_loss(const Model& model, const ReplayMemory& correct, const ReplayMemory& incorrect,
                                    const MatrixXd& aba_features, std::span<const int> aba_labels,
                                    const AdaptConfig& config, std::uint64_t mc_seed, bool with_gradient = false);

struct QueryRequest {
    SampleId sample_id = 0;
    int row = 0;
    int predicted_label = 0;
    double confidence = 0.0;
};

struct BatchPlan {
    int batch_index = 0;
    bool labeled = false;
    PolicyEstimate estimate;
    std::vector<int> bfa_indices;
    std::vector<QueryRequest> queries;
};

struct AdaptReport {
    int batch_index = 0;
    int segment_id = 0;
    std::size_t n_samples = 0;
    std::size_t n_correct_pre = 0;
    double pre_accuracy = 0.0;
    double post_accuracy = 0.0;
    std::size_t n_bfa = 0;
    std::size_t n_aba = 0;  // agreement set size in the last epoch
    std::size_t memory_correct = 0;
    std::size_t memory_incorrect = 0;
    LossTerms loss;
    int rewards_positive = 0;
    int rewards_negative = 0;
    double mean_confidence = 0.0;
    double agreement_rate = 0.0;  // before adaptation, over the non-BFA samples
    int sgd_steps = 0;
    bool labeled = false;
    bool aborted = false;
    std::string error;
};

// One online adaptation strategy over a stream. Implementations own their
// model exclusively and process batches strictly in order.
class StreamAdapter {
public:
    virtual ~StreamAdapter() = default;
    virtual AdaptReport step(const StreamBatch& batch, FeedbackOracle& oracle) = 0;
    virtual const Model& model() const = 0;
};

class AdaptationEngine : public StreamAdapter {
public:
    AdaptationEngine(Model model, AdaptConfig config, FeedbackSchedule schedule = {});

    // Deterministic predictions, MC-dropout confidences and the feedback queries.
    BatchPlan plan_batch(const StreamBatch& batch) const;

    // Routes answers (one per query, +1/-1) into the memories, refreshes and
    // freezes BN statistics, then runs the epoch loop. Commits atomically.
    AdaptReport complete_batch(const StreamBatch& batch, const BatchPlan& plan, std::span<const int> answers);

    // plan + oracle + complete. Throws OracleFailure with no state change.
    AdaptReport adapt_batch(const StreamBatch& batch, FeedbackOracle& oracle);

    // Like adapt_batch, but an oracle failure yields an aborted report.
    AdaptReport step(const StreamBatch& batch, FeedbackOracle& oracle) override;

    // Report for a batch whose feedback could not be collected.
    AdaptReport aborted_report(const StreamBatch& batch, const BatchPlan& plan, std::string reason) const;

    const Model& model() const override { return model_; }
    const ReplayMemory& correct_memory() const noexcept { return correct_; }
    const ReplayMemory& incorrect_memory() const noexcept { return incorrect_; }
    const AdaptConfig& config() const noexcept { return config_; }
    const FeedbackSchedule& schedule() const noexcept { return schedule_; }
    std::size_t pending_feedback() const noexcept { return pending_.size(); }

    nlohmann::json snapshot() const;
    static AdaptationEngine restore(const nlohmann::json& snapshot);

private:
    struct Pending {
        FeedbackRecord record;
        int release_batch = 0;
    };

    Model model_;
    AdaptConfig config_;
    FeedbackSchedule schedule_;
    ReplayMemory correct_;
    ReplayMemory incorrect_;
    std::deque<Pending> pending_;
};

std::pair<Model, std::vector<AdaptReport>> adapt_stream(Model model, const Stream& stream, FeedbackOracle& oracle,
                                                        const AdaptConfig& config, FeedbackSchedule schedule = {});

nlohmann::json adapt_config_to_json(const AdaptConfig& config);
AdaptConfig adapt_config_from_json(const nlohmann::json& j, AdaptConfig defaults = {});
std::string to_string(LossPaths paths);
std::string to_string(SelectionStrategy::Kind kind);
SelectionStrategy::Kind selection_kind_from_string(const std::string& s);

}  // namespace bitta
