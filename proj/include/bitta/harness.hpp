#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "bitta/baselines.hpp"
#include "bitta/engine.hpp"
#include "bitta/streams.hpp"

namespace bitta {

enum class Method { BiTTA, BFAOnly, ABAOnly, SrcValid, BnStats, EntropyMinBinary };

std::string to_string(Method method);
Method method_from_string(const std::string& s);

struct PretrainConfig {
    std::vector<int> hidden{64, 64};
    int n_train = 8000;
    int n_holdout = 2000;
    int epochs = 20;
    int batch_size = 64;
    double lr = 0.05;
    double weight_decay = 1e-4;
    double dropout_rate = 0.3;
    std::uint64_t seed = 1;
    double min_holdout_accuracy = 0.90;
};

class PretrainFailure : public std::runtime_error {
public:
    PretrainFailure(const std::string& what, double achieved) : std::runtime_error(what), achieved_accuracy(achieved) {}
    double achieved_accuracy;
};

struct PretrainResult {
    Model model;
    double train_accuracy = 0.0;
    double holdout_accuracy = 0.0;
};

// Mini-batch SGD on the clean source distribution with batch-statistics BN
// and dropout, then running statistics set to the full training set's.
// Throws PretrainFailure below config.min_holdout_accuracy.
PretrainResult pretrain(const StreamSpec& spec, const PretrainConfig& config);

struct ExperimentConfig {
    StreamSpec stream = default_desk_spec();
    Method method = Method::BiTTA;
    AdaptConfig adapt;
    OracleSpec oracle;
    std::vector<std::uint64_t> seeds{0, 1, 2};
    FeedbackSchedule schedule;
    PretrainConfig pretrain;
    std::string checkpoint;  // empty: pretrain in-process
    std::string output_dir;  // empty: no files

    void validate() const;
};

nlohmann::json experiment_config_to_json(const ExperimentConfig& config);
ExperimentConfig experiment_config_from_json(const nlohmann::json& j);

// The adaptation settings a method actually runs with; BFAOnly and ABAOnly
// are presets of the full method.
AdaptConfig method_adapt_config(Method method, AdaptConfig base);

struct MetricsRow {
    std::uint64_t seed = 0;
    Method method = Method::BiTTA;
    int batch_index = 0;
    int segment_id = 0;
    std::size_t n_samples = 0;
    std::size_t n_correct = 0;  // predictions made before this batch's update
    double pre_accuracy = 0.0;
    double post_accuracy = 0.0;
    double cumulative_accuracy = 0.0;
    std::size_t n_bfa = 0;
    std::size_t n_aba = 0;
    double loss_total = 0.0;
    double loss_bfa_correct = 0.0;
    double loss_bfa_incorrect = 0.0;
    double loss_aba = 0.0;
    double mean_confidence = 0.0;
    double agreement_rate = 0.0;
    bool aborted = false;
};

MetricsRow make_metrics_row(const AdaptReport& report, std::uint64_t seed, Method method, double cumulative_accuracy);

struct SeedRun {
    std::uint64_t seed = 0;
    std::vector<MetricsRow> rows;
    double cumulative_accuracy = 0.0;
    bool failed = false;
    std::string error;
};

struct SegmentSummary {
    int segment_id = 0;
    double mean_accuracy = 0.0;
    double std_accuracy = 0.0;
};

struct ExperimentSummary {
    Method method = Method::BiTTA;
    std::vector<SeedRun> runs;
    double mean_accuracy = 0.0;  // final cumulative accuracy, mean over seeds
    double std_accuracy = 0.0;
    std::vector<SegmentSummary> segments;
};

// Per-seed derived seeds; a run with seed s uses stream seed stream_seed(s), etc.
std::uint64_t run_stream_seed(std::uint64_t seed);
std::uint64_t run_adapt_seed(const ExperimentConfig& config, std::uint64_t seed);
std::uint64_t run_oracle_seed(const ExperimentConfig& config, std::uint64_t seed);

std::unique_ptr<StreamAdapter> make_adapter(const ExperimentConfig& config, const Model& source, std::uint64_t seed);

SeedRun run_seed(const ExperimentConfig& config, const Model& source, std::uint64_t seed);

ExperimentSummary run_experiment(const ExperimentConfig& config, const Model& source);

// Loads config.checkpoint, or pretrains when it is empty.
ExperimentSummary run_experiment(const ExperimentConfig& config);

Model resolve_source_model(const ExperimentConfig& config);

// Cumulative accuracy recomputed from n_correct / n_samples columns.
std::vector<double> replay_cumulative_accuracy(const std::vector<MetricsRow>& rows);

void write_metrics_csv(std::ostream& out, const std::vector<MetricsRow>& rows);
std::vector<MetricsRow> read_metrics_csv(std::istream& in);
nlohmann::json summary_to_json(const ExperimentSummary& summary);

enum class GridAxis { K, ErrorRate, Beta, NPasses, Selection };

std::string to_string(GridAxis axis);
GridAxis grid_axis_from_string(const std::string& s);

// Config with one axis overridden by a value written as text.
ExperimentConfig apply_axis(ExperimentConfig config, GridAxis axis, const std::string& value);

struct GridCell {
    std::string value;
    ExperimentSummary summary;
    std::string error;
};

std::vector<GridCell> ablation_grid(const ExperimentConfig& base, GridAxis axis, const std::vector<std::string>& values,
                                    const Model& source);

}  // namespace bitta
