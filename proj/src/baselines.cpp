#include "bitta/baselines.hpp"

#include <stdexcept>

#include "bitta/losses.hpp"
#include "bitta/random.hpp"

namespace bitta {

namespace {

constexpr std::uint64_t kSelectTag = 0x73656c;
constexpr std::uint64_t kRandomTag = 0x726e64;

struct EntropyStep {
    EntropyMinResult result;
    std::vector<int> predictions;
    std::size_t n_queried = 0;
};

EntropyStep entropy_step(Model& model, const StreamBatch& batch, FeedbackOracle& oracle, int k, double lr,
                         const EntropyMinOptions& options) {
    if (k < 0) throw std::invalid_argument("feedback budget k must be non-negative");
    EntropyStep out;
    out.predictions = predict(model, batch.features);
    out.result.accuracy = Metrics::accuracy(batch, out.predictions);

    // Only the batch size matters for random selection.
    PolicyEstimate shape;
    shape.confidence = VectorXd::Zero(batch.size());
    const auto chosen = select_bfa(shape, k, SelectionStrategy::random(options.selection_seed));
    std::vector<int> correct_rows;
    std::vector<int> incorrect_rows;
    for (int row : chosen) {
        const auto r = static_cast<std::size_t>(row);
        const int answer = oracle.query(batch.ids.at(r), batch.features.row(row), out.predictions[r]);
        reward_bfa(answer);
        (answer == kFeedbackCorrect ? correct_rows : incorrect_rows).push_back(row);
    }
    out.n_queried = chosen.size();
    out.result.n_correct_feedback = correct_rows.size();
    out.result.n_incorrect_feedback = incorrect_rows.size();

    if (batch.size() >= 2) update_bn_stats(model, batch.features, options.bn_momentum);

    const auto lg = loss_gradient<double>(
        model, batch.features, {ForwardMode::deterministic()},
        entropy_feedback_loss<double>(out.predictions, correct_rows, incorrect_rows, options.clip_eps));
    out.result.loss = lg.loss;
    double h = 0.0;
    for (Eigen::Index r = 0; r < lg.probs.rows(); ++r) h += entropy(lg.probs.row(r));
    out.result.entropy = h / static_cast<double>(lg.probs.rows());
    sgd_step(model, lg.grad, lr, options.weight_decay, ParameterSubset::NormAffine);
    return out;
}

}  // namespace

std::string to_string(BaselineKind kind) {
    switch (kind) {
        case BaselineKind::SrcValid: return "SrcValid";
        case BaselineKind::BnStats: return "BnStats";
        case BaselineKind::EntropyMinBinary: return "EntropyMinBinary";
    }
    return "?";
}

double srcvalid_step(const Model& model, const StreamBatch& batch) {
    return Metrics::accuracy(batch, predict(model, batch.features));
}

double bnstats_step(Model& model, const StreamBatch& batch, double momentum) {
    const double acc = Metrics::accuracy(batch, predict(model, batch.features));
    if (batch.size() >= 2) update_bn_stats(model, batch.features, momentum);
    return acc;
}

EntropyMinResult entropy_min_binary_step(Model& model, const StreamBatch& batch, FeedbackOracle& oracle, int k,
                                         double lr, const EntropyMinOptions& options) {
    Model work = model;
    auto step = entropy_step(work, batch, oracle, k, lr, options);
    model = std::move(work);
    return step.result;
}

BaselineAdapter::BaselineAdapter(BaselineKind kind, Model model, AdaptConfig config, FeedbackSchedule schedule)
    : kind_(kind), model_(std::move(model)), config_(config), schedule_(schedule) {
    config_.validate();
    schedule_.validate();
    model_.set_dropout_rate(config_.dropout_rate);
}

AdaptReport BaselineAdapter::step(const StreamBatch& batch, FeedbackOracle& oracle) {
    const auto index = static_cast<std::uint64_t>(batch.batch_index);
    const auto estimate =
        estimate_policy(model_, batch.features, config_.n_passes, derive_seed(config_.seed, {index, kSelectTag}));
    AdaptReport rep;
    rep.batch_index = batch.batch_index;
    rep.segment_id = batch.segment_id;
    rep.n_samples = static_cast<std::size_t>(batch.size());
    rep.n_correct_pre = Metrics::count_correct(batch, estimate.det_pred);
    rep.pre_accuracy = static_cast<double>(rep.n_correct_pre) / static_cast<double>(rep.n_samples);
    rep.mean_confidence = estimate.confidence.mean();
    rep.agreement_rate = static_cast<double>(agreement_set(estimate, {}).size()) / static_cast<double>(rep.n_samples);

    switch (kind_) {
        case BaselineKind::SrcValid:
            break;
        case BaselineKind::BnStats:
            bnstats_step(model_, batch, config_.bn_momentum);
            break;
        case BaselineKind::EntropyMinBinary: {
            rep.labeled = schedule_.labeled(batch.batch_index);
            const EntropyMinOptions options{config_.bn_momentum, config_.weight_decay, config_.clip_eps,
                                            derive_seed(config_.seed, {index, kRandomTag})};
            Model work = model_;
            try {
                const auto s = entropy_step(work, batch, oracle, rep.labeled ? config_.k : 0, config_.lr, options);
                rep.n_bfa = s.n_queried;
                rep.rewards_positive = static_cast<int>(s.result.n_correct_feedback);
                rep.rewards_negative = static_cast<int>(s.result.n_incorrect_feedback);
                rep.loss.total = s.result.loss;
                rep.sgd_steps = 1;
            } catch (const OracleFailure& e) {
                rep.aborted = true;
                rep.error = e.what();
                rep.post_accuracy = rep.pre_accuracy;
                return rep;
            }
            model_ = std::move(work);
            break;
        }
    }
    rep.post_accuracy = Metrics::accuracy(batch, predict(model_, batch.features));
    return rep;
}

}  // namespace bitta
