#include "bitta/session.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <condition_variable>
#include <fstream>
#include <mutex>
#include <random>
#include <thread>

#include <Eigen/QR>

#include "httplib.h"

#include "bitta/random.hpp"

namespace bitta {

namespace {

constexpr std::uint64_t kProjectionTag = 0x70726f6a;

bool engine_method(Method m) { return m == Method::BiTTA || m == Method::BFAOnly || m == Method::ABAOnly; }

Eigen::Matrix<double, 2, Eigen::Dynamic> fixed_projection(int dim, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal;
    MatrixXd g(dim, 2);
    for (Eigen::Index i = 0; i < g.size(); ++i) g.data()[i] = normal(rng);
    const MatrixXd q = Eigen::HouseholderQR<MatrixXd>(g).householderQ() * MatrixXd::Identity(dim, 2);
    return q.transpose();
}

nlohmann::json error_reply(const std::string& what) { return {{"type", "error"}, {"error", what}}; }

nlohmann::json row_to_json(const MetricsRow& r) {
    return {{"batch_index", r.batch_index}, {"segment_id", r.segment_id}, {"n_samples", r.n_samples},
            {"n_correct", r.n_correct}, {"pre_accuracy", r.pre_accuracy}, {"post_accuracy", r.post_accuracy},
            {"cumulative_accuracy", r.cumulative_accuracy}, {"n_bfa", r.n_bfa}, {"n_aba", r.n_aba},
            {"loss_total", r.loss_total}, {"loss_bfa_correct", r.loss_bfa_correct},
            {"loss_bfa_incorrect", r.loss_bfa_incorrect}, {"loss_aba", r.loss_aba},
            {"mean_confidence", r.mean_confidence}, {"agreement_rate", r.agreement_rate}, {"aborted", r.aborted}};
}

MetricsRow row_from_json(const nlohmann::json& j, std::uint64_t seed, Method method) {
    MetricsRow r;
    r.seed = seed;
    r.method = method;
    r.batch_index = j.at("batch_index");
    r.segment_id = j.at("segment_id");
    r.n_samples = j.at("n_samples");
    r.n_correct = j.at("n_correct");
    r.pre_accuracy = j.at("pre_accuracy");
    r.post_accuracy = j.at("post_accuracy");
    r.cumulative_accuracy = j.at("cumulative_accuracy");
    r.n_bfa = j.at("n_bfa");
    r.n_aba = j.at("n_aba");
    r.loss_total = j.at("loss_total");
    r.loss_bfa_correct = j.at("loss_bfa_correct");
    r.loss_bfa_incorrect = j.at("loss_bfa_incorrect");
    r.loss_aba = j.at("loss_aba");
    r.mean_confidence = j.at("mean_confidence");
    r.agreement_rate = j.at("agreement_rate");
    r.aborted = j.at("aborted");
    return r;
}

}  // namespace

std::int64_t steady_clock_ms() {
    using namespace std::chrono;
    return duration_cast<milliseconds>(steady_clock::now().time_since_epoch()).count();
}

LiveSession::LiveSession(const ExperimentConfig& config, const Model& source, SessionOptions options,
                         SessionClock clock)
    : config_(config), options_(options), clock_(std::move(clock)) {
    config_.validate();
    if (!engine_method(config_.method))
        throw std::invalid_argument("live sessions need an adapting method, got " + to_string(config_.method));
    if (options_.deadline_ms < 0 || options_.idle_timeout_ms <= 0)
        throw std::invalid_argument("deadline must be >= 0 and idle timeout > 0");

    const auto seed = options_.seed;
    stream_ = make_shift_stream(config_.stream, run_stream_seed(seed));
    OracleSpec oracle = config_.oracle;
    oracle.seed = run_oracle_seed(config_, seed);
    fallback_ = std::make_unique<SimulatedOracle>(oracle, stream_);
    AdaptConfig adapt = method_adapt_config(config_.method, config_.adapt);
    adapt.seed = run_adapt_seed(config_, seed);
    engine_ = std::make_unique<AdaptationEngine>(source, adapt, config_.schedule);
    projection_ = fixed_projection(config_.stream.feature_dim, derive_seed(seed, {kProjectionTag}));
    last_activity_ = clock_();

    const MatrixXd prototypes_2d = class_prototypes(config_.stream) * projection_.transpose();
    nlohmann::json class_names = nlohmann::json::array();
    nlohmann::json landmarks = nlohmann::json::array();
    for (int c = 0; c < config_.stream.n_classes; ++c) {
        class_names.push_back("class " + std::to_string(c));
        landmarks.push_back({{"x", prototypes_2d(c, 0)}, {"y", prototypes_2d(c, 1)}});
    }
    nlohmann::json projection = nlohmann::json::array();
    for (int r = 0; r < 2; ++r) {
        std::vector<double> row(static_cast<std::size_t>(projection_.cols()));
        for (int c = 0; c < projection_.cols(); ++c) row[static_cast<std::size_t>(c)] = projection_(r, c);
        projection.push_back(row);
    }
    hello_ = {{"type", "session_hello"},
              {"spec",
               {{"n_classes", config_.stream.n_classes},
                {"feature_dim", config_.stream.feature_dim},
                {"n_segments", config_.stream.segments.size()},
                {"n_batches", stream_.size()},
                {"n_samples", stream_sample_count(stream_)},
                {"ordering", to_string(config_.stream.ordering)},
                {"method", to_string(config_.method)},
                {"k", adapt.k},
                {"deadline_ms", options_.deadline_ms}}},
              {"class_names", std::move(class_names)},
              {"projection", std::move(projection)},
              {"prototypes", std::move(landmarks)}};
    emit(hello_);
}

void LiveSession::emit(nlohmann::json message) {
    message["seq"] = events_.size();
    events_.push_back(std::move(message));
}

std::vector<nlohmann::json> LiveSession::events(std::size_t since) const {
    if (since >= events_.size()) return {};
    return {events_.begin() + static_cast<std::ptrdiff_t>(since), events_.end()};
}

void LiveSession::touch() {
    last_activity_ = clock_();
    pause_at_boundary_ = false;
    if (idle_paused_) {
        idle_paused_ = false;
        paused_ = false;
        emit({{"type", "resumed"}, {"reason", "client returned"}});
    }
}

nlohmann::json LiveSession::render(const StreamBatch& batch, const QueryRequest& query) const {
    const Eigen::RowVectorXd x = batch.features.row(query.row);
    const Eigen::Vector2d xy = projection_ * x.transpose();
    std::vector<double> glyph(static_cast<std::size_t>(x.size()));
    for (Eigen::Index i = 0; i < x.size(); ++i) glyph[static_cast<std::size_t>(i)] = x(i);
    return {{"x", xy(0)}, {"y", xy(1)}, {"glyph", std::move(glyph)}};
}

void LiveSession::open_next_batch() {
    const StreamBatch& batch = stream_[next_batch_];
    OpenBatch open;
    open.plan = engine_->plan_batch(batch);
    open.position = next_batch_;
    open.deadline = clock_() + options_.deadline_ms;
    nlohmann::json queries = nlohmann::json::array();
    for (const auto& q : open.plan.queries) {
        const std::string id = std::to_string(q.sample_id);
        open.answers.emplace(id, std::nullopt);
        queries.push_back({{"sample_id", id},
                           {"rendering", render(batch, q)},
                           {"predicted_label", q.predicted_label},
                           {"confidence", q.confidence}});
    }
    emit({{"type", "query_batch"},
          {"batch_index", batch.batch_index},
          {"queries", std::move(queries)},
          {"deadline_ms", options_.deadline_ms}});
    open_ = std::move(open);
    ++next_batch_;
}

void LiveSession::close_open_batch() {
    const StreamBatch& batch = stream_[open_->position];
    std::vector<int> answers;
    std::size_t fallbacks = 0;
    for (const auto& q : open_->plan.queries) {
        const auto& given = open_->answers.at(std::to_string(q.sample_id));
        if (given) {
            answers.push_back(*given);
        } else {
            answers.push_back(fallback_->query(q.sample_id, batch.features.row(q.row), q.predicted_label));
            ++fallbacks;
        }
    }
    const AdaptReport rep = engine_->complete_batch(batch, open_->plan, answers);
    seen_ += rep.n_samples;
    hits_ += rep.n_correct_pre;
    const double cumulative = static_cast<double>(hits_) / static_cast<double>(seen_);
    rows_.push_back(make_metrics_row(rep, options_.seed, config_.method, cumulative));
    fallbacks_per_batch_.push_back(fallbacks);
    fallback_answers_ += fallbacks;
    emit({{"type", "batch_result"},
          {"batch_index", rep.batch_index},
          {"pre_acc", rep.pre_accuracy},
          {"post_acc", rep.post_accuracy},
          {"cumulative_acc", cumulative},
          {"agreement_rate", rep.agreement_rate},
          {"fallback_answers", fallbacks}});
    open_.reset();
    if (finished()) emit({{"type", "session_end"}, {"cumulative_acc", cumulative}});
}

bool LiveSession::tick() {
    if (paused_ || finished()) return false;
    const auto now = clock_();
    if (now - last_activity_ >= options_.idle_timeout_ms) pause_at_boundary_ = true;
    if (open_) {
        const bool complete = std::all_of(open_->answers.begin(), open_->answers.end(),
                                          [](const auto& kv) { return kv.second.has_value(); });
        if (!complete && now < open_->deadline) return false;
        close_open_batch();
        return true;
    }
    if (pause_at_boundary_) {
        paused_ = true;
        idle_paused_ = true;
        pause_at_boundary_ = false;
        emit({{"type", "paused"}, {"reason", "client idle"}, {"next_batch", next_batch_}});
        return true;
    }
    open_next_batch();
    return true;
}

nlohmann::json LiveSession::handle(const nlohmann::json& message) {
    if (!message.is_object() || !message.contains("type") || !message.at("type").is_string())
        return error_reply("message must be an object with a string 'type'");
    touch();
    const std::string type = message.at("type");
    if (type == "feedback") {
        const auto id = message.find("sample_id");
        const auto correct = message.find("correct");
        if (id == message.end() || !id->is_string()) return error_reply("feedback needs a string sample_id");
        if (correct == message.end() || !correct->is_boolean()) return error_reply("feedback needs a boolean 'correct'");
        if (!open_) return error_reply("no batch is awaiting feedback");
        const auto slot = open_->answers.find(id->get<std::string>());
        if (slot == open_->answers.end()) return error_reply("sample " + id->get<std::string>() + " was not queried");
        if (slot->second) return error_reply("sample " + id->get<std::string>() + " already answered");
        slot->second = correct->get<bool>() ? kFeedbackCorrect : kFeedbackIncorrect;
        ++human_answers_;
        return {{"type", "ack"}, {"sample_id", slot->first}};
    }
    if (type == "pause") {
        if (!paused_) {
            paused_ = true;
            idle_paused_ = false;
            if (open_) paused_remaining_ms_ = std::max<std::int64_t>(0, open_->deadline - clock_());
            emit({{"type", "paused"}, {"reason", "client request"}, {"next_batch", next_batch_}});
        }
        return {{"type", "ack"}};
    }
    if (type == "resume") {
        if (paused_) {
            paused_ = false;
            idle_paused_ = false;
            if (open_) open_->deadline = clock_() + paused_remaining_ms_;
            emit({{"type", "resumed"}, {"reason", "client request"}});
        }
        return {{"type", "ack"}};
    }
    if (type == "snapshot_request") return {{"type", "snapshot"}, {"snapshot", snapshot()}};
    return error_reply("unknown message type '" + type + "'");
}

nlohmann::json LiveSession::snapshot() const {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& r : rows_) rows.push_back(row_to_json(r));
    nlohmann::json open = nullptr;
    if (open_) {
        nlohmann::json answers = nlohmann::json::object();
        for (const auto& [id, a] : open_->answers) answers[id] = a ? nlohmann::json(*a) : nlohmann::json(nullptr);
        open = {{"position", open_->position}, {"answers", std::move(answers)}};
    }
    return {{"format", "bitta-session"},
            {"version", 1},
            {"seed", options_.seed},
            {"engine", engine_->snapshot()},
            {"next_batch", next_batch_},
            {"seen", seen_},
            {"hits", hits_},
            {"fallback_answers", fallback_answers_},
            {"human_answers", human_answers_},
            {"fallbacks_per_batch", fallbacks_per_batch_},
            {"paused", paused_},
            {"rows", std::move(rows)},
            {"open", std::move(open)},
            {"events", events_}};
}

std::unique_ptr<LiveSession> LiveSession::restore(const ExperimentConfig& config, const Model& source,
                                                  const nlohmann::json& j, SessionOptions options, SessionClock clock) {
    if (j.value("format", std::string{}) != "bitta-session") throw std::invalid_argument("not a session snapshot");
    options.seed = j.at("seed");
    auto s = std::make_unique<LiveSession>(config, source, options, std::move(clock));
    s->engine_ = std::make_unique<AdaptationEngine>(AdaptationEngine::restore(j.at("engine")));
    s->seen_ = j.at("seen");
    s->hits_ = j.at("hits");
    s->fallback_answers_ = j.at("fallback_answers");
    s->human_answers_ = j.at("human_answers");
    s->fallbacks_per_batch_ = j.at("fallbacks_per_batch").get<std::vector<std::size_t>>();
    s->paused_ = j.at("paused");
    s->rows_.clear();
    for (const auto& r : j.at("rows")) s->rows_.push_back(row_from_json(r, options.seed, config.method));
    s->events_ = j.at("events").get<std::vector<nlohmann::json>>();
    const auto& open = j.at("open");
    if (open.is_null()) {
        s->next_batch_ = j.at("next_batch");
    } else {
        s->next_batch_ = open.at("position");
        s->open_next_batch();
        s->events_.pop_back();  // already in the restored transcript
        for (const auto& [id, a] : open.at("answers").items()) {
            auto slot = s->open_->answers.find(id);
            if (slot == s->open_->answers.end()) throw std::invalid_argument("snapshot answers do not match the plan");
            if (!a.is_null()) slot->second = a.get<int>();
        }
        if (s->paused_) s->paused_remaining_ms_ = options.deadline_ms;
    }
    if (s->next_batch_ != j.at("next_batch").get<std::size_t>()) throw std::invalid_argument("inconsistent snapshot");
    return s;
}

struct SessionServer::Impl {
    std::unique_ptr<LiveSession> session;
    std::int64_t tick_ms;
    mutable std::mutex mutex;
    std::condition_variable wake;
    bool stopping = false;
    httplib::Server http;
    std::thread http_thread;
    std::thread driver;
};

SessionServer::SessionServer(std::unique_ptr<LiveSession> session, std::int64_t tick_ms)
    : impl_(std::make_unique<Impl>()) {
    if (!session) throw std::invalid_argument("server needs a session");
    impl_->session = std::move(session);
    impl_->tick_ms = tick_ms;

    auto& impl = *impl_;
    impl.http.Get("/hello", [&impl](const httplib::Request&, httplib::Response& res) {
        std::lock_guard lock(impl.mutex);
        impl.session->touch();
        res.set_content(impl.session->hello().dump(), "application/json");
    });
    impl.http.Get("/events", [&impl](const httplib::Request& req, httplib::Response& res) {
        std::size_t since = 0;
        if (req.has_param("since")) {
            try {
                since = std::stoull(req.get_param_value("since"));
            } catch (const std::exception&) {
                res.status = 400;
                res.set_content(error_reply("since must be a non-negative integer").dump(), "application/json");
                return;
            }
        }
        std::lock_guard lock(impl.mutex);
        impl.session->touch();
        res.set_content(nlohmann::json(impl.session->events(since)).dump(), "application/json");
    });
    impl.http.Post("/message", [&impl](const httplib::Request& req, httplib::Response& res) {
        nlohmann::json reply;
        const auto message = nlohmann::json::parse(req.body, nullptr, false);
        if (message.is_discarded()) {
            reply = error_reply("body is not JSON");
        } else {
            std::lock_guard lock(impl.mutex);
            reply = impl.session->handle(message);
        }
        if (reply.at("type") == "error") res.status = 400;
        res.set_content(reply.dump(), "application/json");
        impl.wake.notify_all();
    });
}

SessionServer::~SessionServer() { stop(); }

int SessionServer::start(const std::string& host, int port) {
    auto& impl = *impl_;
    const int bound = port == 0 ? impl.http.bind_to_any_port(host) : (impl.http.bind_to_port(host, port) ? port : -1);
    if (bound < 0) throw std::runtime_error("cannot bind " + host + ":" + std::to_string(port));
    impl.http_thread = std::thread([&impl] { impl.http.listen_after_bind(); });
    impl.driver = std::thread([&impl] {
        std::unique_lock lock(impl.mutex);
        while (!impl.stopping) {
            while (impl.session->tick()) {
            }
            impl.wake.wait_for(lock, std::chrono::milliseconds(impl.tick_ms));
        }
    });
    return bound;
}

void SessionServer::stop() {
    if (!impl_) return;
    {
        std::lock_guard lock(impl_->mutex);
        impl_->stopping = true;
    }
    impl_->wake.notify_all();
    impl_->http.stop();
    if (impl_->http_thread.joinable()) impl_->http_thread.join();
    if (impl_->driver.joinable()) impl_->driver.join();
}

bool SessionServer::finished() const {
    std::lock_guard lock(impl_->mutex);
    return impl_->session->finished();
}

void SessionServer::with_session(const std::function<void(LiveSession&)>& fn) {
    {
        std::lock_guard lock(impl_->mutex);
        fn(*impl_->session);
    }
    impl_->wake.notify_all();
}

void serve_session(const ExperimentConfig& config, const Model& source, const std::string& host, int port,
                   SessionOptions options) {
    SessionServer server(std::make_unique<LiveSession>(config, source, options));
    const int bound = server.start(host, port);
    std::fprintf(stderr, "serving session on %s:%d\n", host.c_str(), bound);
    while (!server.finished()) std::this_thread::sleep_for(std::chrono::milliseconds(100));

    if (config.output_dir.empty()) return;
    const std::filesystem::path dir(config.output_dir);
    std::filesystem::create_directories(dir);
    server.with_session([&](LiveSession& s) {
        std::ofstream(dir / "config.json") << experiment_config_to_json(config).dump(2) << "\n";
        std::ofstream metrics(dir / "metrics.csv");
        write_metrics_csv(metrics, s.rows());
        ExperimentSummary summary;
        summary.method = config.method;
        SeedRun run;
        run.seed = options.seed;
        run.rows = s.rows();
        run.cumulative_accuracy = run.rows.empty() ? 0.0 : run.rows.back().cumulative_accuracy;
        summary.runs.push_back(run);
        summary.mean_accuracy = run.cumulative_accuracy;
        auto j = summary_to_json(summary);
        j["fallback_answers"] = s.fallback_answers();
        j["human_answers"] = s.human_answers();
        j["fallbacks_per_batch"] = s.fallbacks_per_batch();
        std::ofstream(dir / "summary.json") << j.dump(2) << "\n";
    });
}

}  // namespace bitta
