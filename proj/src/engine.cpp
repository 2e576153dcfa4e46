#include "bitta/engine.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>

#include "bitta/checkpoint.hpp"
#include "bitta/losses.hpp"
#include "bitta/random.hpp"

namespace bitta {

namespace {

constexpr std::uint64_t kSelectTag = 0x73656c;
constexpr std::uint64_t kRandomTag = 0x726e64;
constexpr std::uint64_t kAgreeTag = 0x616772;
constexpr std::uint64_t kLossTag = 0x6c6f73;

MatrixXd gather_rows(const MatrixXd& x, std::span<const int> rows) {
    MatrixXd out(static_cast<Eigen::Index>(rows.size()), x.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = x.row(rows[i]);
    return out;
}

nlohmann::json record_to_json(const FeedbackRecord& r) {
    return {{"sample_id", r.sample_id},
            {"features", std::vector<double>(r.features.begin(), r.features.end())},
            {"predicted_label", r.predicted_label},
            {"feedback", r.feedback}};
}

FeedbackRecord record_from_json(const nlohmann::json& j) {
    FeedbackRecord r;
    r.sample_id = j.at("sample_id").get<SampleId>();
    const auto f = j.at("features").get<std::vector<double>>();
    r.features = Eigen::Map<const Eigen::RowVectorXd>(f.data(), static_cast<Eigen::Index>(f.size()));
    r.predicted_label = j.at("predicted_label").get<int>();
    r.feedback = j.at("feedback").get<int>();
    return r;
}

}  // namespace

void ReplayMemory::insert(FeedbackRecord record) {
    if (record.feedback != kFeedbackCorrect && record.feedback != kFeedbackIncorrect)
        throw std::invalid_argument("feedback must be +1 or -1");
    if (capacity_ == 0) return;
    records_.push_back(std::move(record));
    while (records_.size() > capacity_) records_.pop_front();
}

MatrixXd ReplayMemory::features() const {
    if (records_.empty()) return {};
    MatrixXd x(static_cast<Eigen::Index>(records_.size()), records_.front().features.size());
    for (std::size_t i = 0; i < records_.size(); ++i) x.row(static_cast<Eigen::Index>(i)) = records_[i].features;
    return x;
}

std::vector<int> ReplayMemory::labels() const {
    std::vector<int> y;
    y.reserve(records_.size());
    for (const auto& r : records_) y.push_back(r.predicted_label);
    return y;
}

ReplayMemory memory_insert(ReplayMemory memory, FeedbackRecord record) {
    memory.insert(std::move(record));
    return memory;
}

void AdaptConfig::validate() const {
    if (k < 0) throw std::invalid_argument("k must be non-negative");
    if (epochs < 1) throw std::invalid_argument("epochs must be at least 1");
    if (!(lr > 0.0)) throw std::invalid_argument("learning rate must be positive");
    if (!(alpha >= 0.0) || !(beta >= 0.0)) throw std::invalid_argument("alpha and beta must be non-negative");
    if (n_passes < 1) throw std::invalid_argument("n_passes must be at least 1");
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) throw std::invalid_argument("dropout rate must lie in [0, 1)");
    if (!(bn_momentum >= 0.0 && bn_momentum <= 1.0)) throw std::invalid_argument("BN momentum must lie in [0, 1]");
    if (!(weight_decay >= 0.0)) throw std::invalid_argument("weight decay must be non-negative");
    if (!(clip_eps > 0.0 && clip_eps < 0.5)) throw std::invalid_argument("clip epsilon must lie in (0, 0.5)");
}

void FeedbackSchedule::validate() const {
    if (skip_period < 1) throw std::invalid_argument("skip period must be at least 1");
    if (delay < 0) throw std::invalid_argument("feedback delay must be non-negative");
}

double reward_bfa(int feedback) {
    if (feedback == kFeedbackCorrect) return 1.0;
    if (feedback == kFeedbackIncorrect) return -1.0;
    throw std::invalid_argument("binary feedback must be +1 or -1, got " + std::to_string(feedback));
}

double reward_aba(bool in_agreement) { return in_agreement ? 1.0 : 0.0; }

std::optional<BittaLoss> bitta_loss(const Model& model, const ReplayMemory& correct, const ReplayMemory& incorrect,
                                    const MatrixXd& aba_features, std::span<const int> aba_labels,
                                    const AdaptConfig& config, std::uint64_t mc_seed, bool with_gradient) {
    if (static_cast<std::size_t>(aba_features.rows()) != aba_labels.size())
        throw std::invalid_argument("ABA features and labels differ in length");
    if (correct.empty() && incorrect.empty() && aba_labels.empty()) return std::nullopt;

    // Row weight = coefficient * reward / |set|, so that the weighted
    // -log pi sum is the REINFORCE surrogate. Zero-weight groups are left out.
    struct Group {
        MatrixXd x;
        std::vector<int> y;
        double weight = 0.0;
        double* term = nullptr;
        double sign = 1.0;
    };
    BittaLoss out;
    out.terms.n_correct = correct.size();
    out.terms.n_incorrect = incorrect.size();
    out.terms.n_aba = aba_labels.size();
    std::vector<Group> groups;
    auto add = [&](MatrixXd x, std::vector<int> y, double coefficient, double reward, double* term) {
        if (y.empty()) return;
        const double w = coefficient * reward / static_cast<double>(y.size());
        if (w == 0.0) return;
        groups.push_back({std::move(x), std::move(y), w, term, reward >= 0.0 ? 1.0 : -1.0});
    };
    add(correct.features(), correct.labels(), config.alpha, reward_bfa(kFeedbackCorrect), &out.terms.bfa_correct);
    add(incorrect.features(), incorrect.labels(), config.alpha, reward_bfa(kFeedbackIncorrect), &out.terms.bfa_incorrect);
    add(aba_features, std::vector<int>(aba_labels.begin(), aba_labels.end()), config.beta, reward_aba(true),
        &out.terms.aba);
    if (groups.empty()) return out;

    Eigen::Index rows = 0;
    for (const auto& g : groups) rows += g.x.rows();
    MatrixXd x(rows, model.architecture().input_dim);
    std::vector<int> labels;
    std::vector<double> weights;
    Eigen::Index at = 0;
    for (const auto& g : groups) {
        x.middleRows(at, g.x.rows()) = g.x;
        at += g.x.rows();
        labels.insert(labels.end(), g.y.begin(), g.y.end());
        weights.insert(weights.end(), g.y.size(), g.weight);
    }

    const auto passes = mc_dropout_passes(config.n_passes, mc_seed);
    MatrixXd pi;
    if (with_gradient) {
        auto lg = loss_gradient<double>(model, x, passes, weighted_nll<double>(labels, weights, config.clip_eps));
        pi = std::move(lg.probs);
        out.grad = std::move(lg.grad);
    } else {
        pi = forward(model, x, passes.front());
        for (std::size_t i = 1; i < passes.size(); ++i) pi += forward(model, x, passes[i]);
        pi /= static_cast<double>(passes.size());
    }

    at = 0;
    for (const auto& g : groups) {
        double sum = 0.0;
        for (std::size_t i = 0; i < g.y.size(); ++i)
            sum += cross_entropy(pi.row(at + static_cast<Eigen::Index>(i)), g.y[i], config.clip_eps);
        *g.term = g.sign * sum / static_cast<double>(g.y.size());
        at += g.x.rows();
    }
    out.terms.total = config.alpha * out.terms.bfa_correct + config.alpha * out.terms.bfa_incorrect +
                      config.beta * out.terms.aba;
    out.active = true;
    return out;
}

AdaptationEngine::AdaptationEngine(Model model, AdaptConfig config, FeedbackSchedule schedule)
    : model_(std::move(model)),
      config_(config),
      schedule_(schedule),
      correct_(config.memory_capacity),
      incorrect_(config.memory_capacity) {
    config_.validate();
    schedule_.validate();
    model_.set_dropout_rate(config_.dropout_rate);
}

BatchPlan AdaptationEngine::plan_batch(const StreamBatch& batch) const {
    BatchPlan plan;
    plan.batch_index = batch.batch_index;
    const auto index = static_cast<std::uint64_t>(batch.batch_index);
    plan.estimate = estimate_policy(model_, batch.features, config_.n_passes, derive_seed(config_.seed, {index, kSelectTag}));
    plan.labeled = schedule_.labeled(batch.batch_index) && config_.paths != LossPaths::AbaOnly;
    if (!plan.labeled) return plan;
    const SelectionStrategy strategy = config_.selection == SelectionStrategy::Kind::Random
                                           ? SelectionStrategy::random(derive_seed(config_.seed, {index, kRandomTag}))
                                           : SelectionStrategy::least_confidence();
    plan.bfa_indices = select_bfa(plan.estimate, config_.k, strategy);
    for (int row : plan.bfa_indices) {
        const auto r = static_cast<std::size_t>(row);
        plan.queries.push_back({batch.ids.at(r), row, plan.estimate.det_pred[r], plan.estimate.confidence(row)});
    }
    return plan;
}

AdaptReport AdaptationEngine::aborted_report(const StreamBatch& batch, const BatchPlan& plan, std::string reason) const {
    AdaptReport rep;
    rep.batch_index = batch.batch_index;
    rep.segment_id = batch.segment_id;
    rep.n_samples = static_cast<std::size_t>(batch.size());
    rep.n_correct_pre = Metrics::count_correct(batch, plan.estimate.det_pred);
    rep.pre_accuracy = static_cast<double>(rep.n_correct_pre) / static_cast<double>(rep.n_samples);
    rep.post_accuracy = rep.pre_accuracy;
    rep.memory_correct = correct_.size();
    rep.memory_incorrect = incorrect_.size();
    rep.mean_confidence = plan.estimate.confidence.mean();
    rep.labeled = plan.labeled;
    rep.aborted = true;
    rep.error = std::move(reason);
    return rep;
}

AdaptReport AdaptationEngine::complete_batch(const StreamBatch& batch, const BatchPlan& plan, std::span<const int> answers) {
    if (plan.batch_index != batch.batch_index) throw std::invalid_argument("plan belongs to a different batch");
    if (answers.size() != plan.queries.size()) throw std::invalid_argument("need exactly one answer per query");
    for (int a : answers) reward_bfa(a);

    Model model = model_;
    ReplayMemory correct = correct_;
    ReplayMemory incorrect = incorrect_;
    std::deque<Pending> pending = pending_;
    AdaptReport rep;

    auto route = [&](FeedbackRecord record) {
        (record.feedback == kFeedbackCorrect ? correct : incorrect).insert(std::move(record));
    };
    while (!pending.empty() && pending.front().release_batch <= batch.batch_index) {
        route(std::move(pending.front().record));
        pending.pop_front();
    }
    for (std::size_t q = 0; q < plan.queries.size(); ++q) {
        const auto& query = plan.queries[q];
        FeedbackRecord record{query.sample_id, batch.features.row(query.row), query.predicted_label, answers[q]};
        (answers[q] == kFeedbackCorrect ? rep.rewards_positive : rep.rewards_negative) += 1;
        if (schedule_.delay == 0) route(std::move(record));
        else pending.push_back({std::move(record), batch.batch_index + schedule_.delay});
    }

    // A single row has no variance; such batches keep their statistics.
    if (batch.size() >= 2) update_bn_stats(model, batch.features, config_.bn_momentum);

    const auto index = static_cast<std::uint64_t>(batch.batch_index);
    const ReplayMemory no_memory(0);
    for (int epoch = 0; epoch < config_.epochs; ++epoch) {
        const auto e = static_cast<std::uint64_t>(epoch);
        std::vector<int> aba;
        std::vector<int> aba_labels;
        if (config_.paths != LossPaths::BfaOnly) {
            const auto est = estimate_policy(model, batch.features, config_.n_passes,
                                             derive_seed(config_.seed, {index, e, kAgreeTag}));
            aba = agreement_set(est, plan.bfa_indices);
            for (int i : aba) aba_labels.push_back(est.det_pred[static_cast<std::size_t>(i)]);
        }
        const bool use_memory = config_.paths != LossPaths::AbaOnly;
        const auto loss = bitta_loss(model, use_memory ? correct : no_memory, use_memory ? incorrect : no_memory,
                                     gather_rows(batch.features, aba), aba_labels, config_,
                                     derive_seed(config_.seed, {index, e, kLossTag}), true);
        rep.n_aba = aba.size();
        if (!loss) continue;
        rep.loss = loss->terms;
        if (loss->active) {
            sgd_step(model, *loss->grad, config_.lr, config_.weight_decay);
            ++rep.sgd_steps;
        }
    }

    rep.batch_index = batch.batch_index;
    rep.segment_id = batch.segment_id;
    rep.n_samples = static_cast<std::size_t>(batch.size());
    rep.n_correct_pre = Metrics::count_correct(batch, plan.estimate.det_pred);
    rep.pre_accuracy = static_cast<double>(rep.n_correct_pre) / static_cast<double>(rep.n_samples);
    rep.post_accuracy = Metrics::accuracy(batch, predict(model, batch.features));
    rep.n_bfa = plan.bfa_indices.size();
    rep.memory_correct = correct.size();
    rep.memory_incorrect = incorrect.size();
    rep.mean_confidence = plan.estimate.confidence.mean();
    const auto unlabeled = static_cast<double>(batch.size()) - static_cast<double>(plan.bfa_indices.size());
    rep.agreement_rate =
        unlabeled > 0 ? static_cast<double>(agreement_set(plan.estimate, plan.bfa_indices).size()) / unlabeled : 0.0;
    rep.labeled = plan.labeled;

    model_ = std::move(model);
    correct_ = std::move(correct);
    incorrect_ = std::move(incorrect);
    pending_ = std::move(pending);
    return rep;
}

AdaptReport AdaptationEngine::adapt_batch(const StreamBatch& batch, FeedbackOracle& oracle) {
    const BatchPlan plan = plan_batch(batch);
    std::vector<int> answers;
    answers.reserve(plan.queries.size());
    for (const auto& q : plan.queries)
        answers.push_back(oracle.query(q.sample_id, batch.features.row(q.row), q.predicted_label));
    return complete_batch(batch, plan, answers);
}

AdaptReport AdaptationEngine::step(const StreamBatch& batch, FeedbackOracle& oracle) {
    const BatchPlan plan = plan_batch(batch);
    std::vector<int> answers;
    try {
        for (const auto& q : plan.queries)
            answers.push_back(oracle.query(q.sample_id, batch.features.row(q.row), q.predicted_label));
    } catch (const OracleFailure& e) {
        return aborted_report(batch, plan, e.what());
    }
    return complete_batch(batch, plan, answers);
}

nlohmann::json AdaptationEngine::snapshot() const {
    auto memory_json = [](const ReplayMemory& m) {
        nlohmann::json records = nlohmann::json::array();
        for (const auto& r : m.records()) records.push_back(record_to_json(r));
        return nlohmann::json{{"capacity", m.capacity()}, {"records", std::move(records)}};
    };
    nlohmann::json pending = nlohmann::json::array();
    for (const auto& p : pending_) pending.push_back({{"record", record_to_json(p.record)}, {"release_batch", p.release_batch}});
    return {{"model", model_to_json(model_)},
            {"config", adapt_config_to_json(config_)},
            {"schedule", {{"skip_period", schedule_.skip_period}, {"delay", schedule_.delay}}},
            {"correct", memory_json(correct_)},
            {"incorrect", memory_json(incorrect_)},
            {"pending", std::move(pending)}};
}

AdaptationEngine AdaptationEngine::restore(const nlohmann::json& j) {
    FeedbackSchedule schedule{j.at("schedule").at("skip_period").get<int>(), j.at("schedule").at("delay").get<int>()};
    AdaptationEngine engine(model_from_json<double>(j.at("model")), adapt_config_from_json(j.at("config")), schedule);
    auto load = [](const nlohmann::json& m) {
        ReplayMemory memory(m.at("capacity").get<std::size_t>());
        for (const auto& r : m.at("records")) memory.insert(record_from_json(r));
        return memory;
    };
    engine.correct_ = load(j.at("correct"));
    engine.incorrect_ = load(j.at("incorrect"));
    for (const auto& p : j.at("pending"))
        engine.pending_.push_back({record_from_json(p.at("record")), p.at("release_batch").get<int>()});
    return engine;
}

std::pair<Model, std::vector<AdaptReport>> adapt_stream(Model model, const Stream& stream, FeedbackOracle& oracle,
                                                        const AdaptConfig& config, FeedbackSchedule schedule) {
    if (stream.empty()) return {std::move(model), {}};
    AdaptationEngine engine(std::move(model), config, schedule);
    std::vector<AdaptReport> reports;
    reports.reserve(stream.size());
    for (const auto& batch : stream) reports.push_back(engine.step(batch, oracle));
    return {engine.model(), std::move(reports)};
}

std::string to_string(LossPaths paths) {
    switch (paths) {
        case LossPaths::Both: return "both";
        case LossPaths::BfaOnly: return "bfa_only";
        case LossPaths::AbaOnly: return "aba_only";
    }
    return "?";
}

std::string to_string(SelectionStrategy::Kind kind) {
    return kind == SelectionStrategy::Kind::Random ? "random" : "least_confidence";
}

SelectionStrategy::Kind selection_kind_from_string(const std::string& s) {
    if (s == "random") return SelectionStrategy::Kind::Random;
    if (s == "least_confidence") return SelectionStrategy::Kind::LeastConfidence;
    throw std::invalid_argument("unknown selection strategy '" + s + "'");
}

nlohmann::json adapt_config_to_json(const AdaptConfig& c) {
    return {{"k", c.k},
            {"epochs", c.epochs},
            {"lr", c.lr},
            {"alpha", c.alpha},
            {"beta", c.beta},
            {"n_passes", c.n_passes},
            {"dropout_rate", c.dropout_rate},
            {"bn_momentum", c.bn_momentum},
            {"weight_decay", c.weight_decay},
            {"selection", to_string(c.selection)},
            {"clip_eps", c.clip_eps},
            {"seed", c.seed},
            {"memory_capacity", c.memory_capacity},
            {"paths", to_string(c.paths)}};
}

AdaptConfig adapt_config_from_json(const nlohmann::json& j, AdaptConfig c) {
    c.k = j.value("k", c.k);
    c.epochs = j.value("epochs", c.epochs);
    c.lr = j.value("lr", c.lr);
    c.alpha = j.value("alpha", c.alpha);
    c.beta = j.value("beta", c.beta);
    c.n_passes = j.value("n_passes", c.n_passes);
    c.dropout_rate = j.value("dropout_rate", c.dropout_rate);
    c.bn_momentum = j.value("bn_momentum", c.bn_momentum);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.selection = selection_kind_from_string(j.value("selection", to_string(c.selection)));
    c.clip_eps = j.value("clip_eps", c.clip_eps);
    c.seed = j.value("seed", c.seed);
    c.memory_capacity = j.value("memory_capacity", c.memory_capacity);
    const auto paths = j.value("paths", to_string(c.paths));
    if (paths == "both") c.paths = LossPaths::Both;
    else if (paths == "bfa_only") c.paths = LossPaths::BfaOnly;
    else if (paths == "aba_only") c.paths = LossPaths::AbaOnly;
    else throw std::invalid_argument("unknown loss paths '" + paths + "'");
    c.validate();
    return c;
}

}  // namespace bitta
