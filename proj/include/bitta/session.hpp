#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "bitta/engine.hpp"
#include "bitta/harness.hpp"

namespace bitta {

// Milliseconds on some monotonic time line.
using SessionClock = std::function<std::int64_t()>;

std::int64_t steady_clock_ms();

struct SessionOptions {
    std::int64_t deadline_ms = 30000;  // per query batch, then simulated answers
    std::int64_t idle_timeout_ms = 60000;  // no client traffic: pause at the next batch boundary
    std::uint64_t seed = 0;  // run seed, as in ExperimentConfig::seeds
};

// One human-in-the-loop adaptation run. Transport-free: messages in and out
// are JSON objects, time comes from the injected clock, and tick() advances
// the loop. Not thread-safe; the server serializes access.
class LiveSession {
public:
    LiveSession(const ExperimentConfig& config, const Model& source, SessionOptions options,
                SessionClock clock = steady_clock_ms);

    const nlohmann::json& hello() const noexcept { return hello_; }

    // Handles one client message and returns the reply. Protocol errors come
    // back as {"type": "error"} and leave the session untouched.
    nlohmann::json handle(const nlohmann::json& message);

    // Opens the next batch or closes the open one when all answers are in or
    // the deadline has passed. Returns true when something happened.
    bool tick();

    // Server messages with seq >= since.
    std::vector<nlohmann::json> events(std::size_t since = 0) const;
    std::size_t event_count() const noexcept { return events_.size(); }

    // Counts as client activity for the idle timeout.
    void touch();

    bool paused() const noexcept { return paused_; }
    bool finished() const noexcept { return next_batch_ >= stream_.size() && !open_; }
    std::size_t fallback_answers() const noexcept { return fallback_answers_; }
    std::size_t human_answers() const noexcept { return human_answers_; }
    const std::vector<MetricsRow>& rows() const noexcept { return rows_; }
    const std::vector<std::size_t>& fallbacks_per_batch() const noexcept { return fallbacks_per_batch_; }
    const AdaptationEngine& engine() const noexcept { return *engine_; }
    const Eigen::Matrix<double, 2, Eigen::Dynamic>& projection() const noexcept { return projection_; }

    nlohmann::json snapshot() const;
    // A session continuing exactly where `snapshot` was taken. The open batch,
    // if any, gets a fresh deadline.
    static std::unique_ptr<LiveSession> restore(const ExperimentConfig& config, const Model& source,
                                                const nlohmann::json& snapshot, SessionOptions options,
                                                SessionClock clock = steady_clock_ms);

private:
    struct OpenBatch {
        BatchPlan plan;
        std::size_t position = 0;
        std::map<std::string, std::optional<int>> answers;
        std::int64_t deadline = 0;
    };

    void open_next_batch();
    void close_open_batch();
    void emit(nlohmann::json message);
    nlohmann::json render(const StreamBatch& batch, const QueryRequest& query) const;

    ExperimentConfig config_;
    SessionOptions options_;
    SessionClock clock_;
    Stream stream_;
    std::unique_ptr<SimulatedOracle> fallback_;
    std::unique_ptr<AdaptationEngine> engine_;
    Eigen::Matrix<double, 2, Eigen::Dynamic> projection_;
    nlohmann::json hello_;

    std::vector<nlohmann::json> events_;
    std::vector<MetricsRow> rows_;
    std::vector<std::size_t> fallbacks_per_batch_;
    std::optional<OpenBatch> open_;
    std::size_t next_batch_ = 0;
    std::size_t seen_ = 0;
    std::size_t hits_ = 0;
    std::size_t fallback_answers_ = 0;
    std::size_t human_answers_ = 0;
    bool paused_ = false;
    bool pause_at_boundary_ = false;
    bool idle_paused_ = false;
    std::int64_t paused_remaining_ms_ = 0;
    std::int64_t last_activity_ = 0;
};

// HTTP front end for one LiveSession:
//   GET  /hello            session_hello
//   GET  /events?since=N   server messages from seq N on, as a JSON array
//   POST /message          one client message; the reply is the response body
// A driver thread ticks the session every `tick_ms`.
class SessionServer {
public:
    SessionServer(std::unique_ptr<LiveSession> session, std::int64_t tick_ms = 5);
    ~SessionServer();
    SessionServer(const SessionServer&) = delete;
    SessionServer& operator=(const SessionServer&) = delete;

    // Binds and serves in background threads; port 0 picks a free port.
    int start(const std::string& host, int port);
    void stop();
    bool finished() const;

    // Runs `fn` with exclusive access to the session.
    void with_session(const std::function<void(LiveSession&)>& fn);

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

// Blocking service for the CLI: serves until the stream is exhausted, then
// writes config.json, metrics.csv and summary.json into config.output_dir.
void serve_session(const ExperimentConfig& config, const Model& source, const std::string& host, int port,
                   SessionOptions options);

}  // namespace bitta
