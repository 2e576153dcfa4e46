#include "bitta/harness.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <istream>
#include <map>
#include <numeric>
#include <ostream>
#include <random>
#include <sstream>

#include "bitta/checkpoint.hpp"
#include "bitta/losses.hpp"
#include "bitta/random.hpp"

namespace bitta {

namespace {

constexpr std::uint64_t kStreamTag = 0x737472;
constexpr std::uint64_t kOracleTag = 0x6f7263;
constexpr std::uint64_t kAdaptTag = 0x616470;

std::pair<double, double> mean_std(const std::vector<double>& v) {
    if (v.empty()) return {0.0, 0.0};
    const double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    if (v.size() < 2) return {mean, 0.0};
    double ss = 0.0;
    for (double x : v) ss += (x - mean) * (x - mean);
    return {mean, std::sqrt(ss / static_cast<double>(v.size() - 1))};
}

double dataset_accuracy(const Model& model, const LabeledDataset& data) {
    const auto pred = predict(model, data.features);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == data.labels[i] ? 1 : 0;
    return static_cast<double>(hits) / static_cast<double>(pred.size());
}

void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << text;
}

}  // namespace

std::string to_string(Method method) {
    switch (method) {
        case Method::BiTTA: return "BiTTA";
        case Method::BFAOnly: return "BFAOnly";
        case Method::ABAOnly: return "ABAOnly";
        case Method::SrcValid: return "SrcValid";
        case Method::BnStats: return "BnStats";
        case Method::EntropyMinBinary: return "EntropyMinBinary";
    }
    return "?";
}

Method method_from_string(const std::string& s) {
    for (auto m : {Method::BiTTA, Method::BFAOnly, Method::ABAOnly, Method::SrcValid, Method::BnStats,
                   Method::EntropyMinBinary})
        if (to_string(m) == s) return m;
    throw std::invalid_argument("unknown method '" + s + "'");
}

PretrainResult pretrain(const StreamSpec& spec, const PretrainConfig& config) {
    if (config.epochs < 1 || config.batch_size < 2) throw std::invalid_argument("pretraining needs epochs >= 1, batch >= 2");
    const auto train = make_source_dataset(spec, config.n_train, derive_seed(config.seed, {1}));
    const auto holdout = make_source_dataset(spec, config.n_holdout, derive_seed(config.seed, {2}));
    Architecture arch;
    arch.input_dim = spec.feature_dim;
    arch.hidden = config.hidden;
    arch.n_classes = spec.n_classes;
    Model model(arch, config.dropout_rate, derive_seed(config.seed, {3}));

    std::mt19937_64 rng(derive_seed(config.seed, {4}));
    std::vector<int> order(static_cast<std::size_t>(config.n_train));
    std::iota(order.begin(), order.end(), 0);
    std::uint64_t step = 0;
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        // Cosine-annealed learning rate.
        const double lr = config.lr * 0.5 * (1.0 + std::cos(M_PI * epoch / config.epochs));
        for (std::size_t start = 0; start + static_cast<std::size_t>(config.batch_size) <= order.size();
             start += static_cast<std::size_t>(config.batch_size)) {
            const auto n = static_cast<Eigen::Index>(config.batch_size);
            MatrixXd x(n, arch.input_dim);
            std::vector<int> y(static_cast<std::size_t>(n));
            for (Eigen::Index i = 0; i < n; ++i) {
                const int src = order[start + static_cast<std::size_t>(i)];
                x.row(i) = train.features.row(src);
                y[static_cast<std::size_t>(i)] = train.labels[static_cast<std::size_t>(src)];
            }
            const auto lg = loss_gradient<double>(
                model, x, {ForwardMode::dropout(derive_seed(config.seed, {5, step++}), BnUsage::UseBatch)},
                weighted_nll<double>(y, std::vector<double>(y.size(), 1.0 / static_cast<double>(n))));
            sgd_step(model, lg.grad, lr, config.weight_decay);
        }
    }
    update_bn_stats(model, train.features, 1.0);
    model.set_bn_frozen(false);

    PretrainResult result{model, dataset_accuracy(model, train), dataset_accuracy(model, holdout)};
    if (result.holdout_accuracy < config.min_holdout_accuracy) {
        std::ostringstream msg;
        msg << "pretraining reached holdout accuracy " << result.holdout_accuracy << ", below the required "
            << config.min_holdout_accuracy;
        throw PretrainFailure(msg.str(), result.holdout_accuracy);
    }
    return result;
}

void ExperimentConfig::validate() const {
    if (seeds.empty()) throw std::invalid_argument("experiment needs at least one seed");
    adapt.validate();
    schedule.validate();
    if (!(oracle.error_rate >= 0.0 && oracle.error_rate <= 1.0)) throw std::invalid_argument("error rate must lie in [0, 1]");
}

nlohmann::json experiment_config_to_json(const ExperimentConfig& c) {
    const auto& p = c.pretrain;
    return {{"stream", stream_spec_to_json(c.stream)},
            {"method", to_string(c.method)},
            {"adapt", adapt_config_to_json(c.adapt)},
            {"oracle", {{"error_rate", c.oracle.error_rate}, {"seed", c.oracle.seed}}},
            {"seeds", c.seeds},
            {"schedule", {{"skip_period", c.schedule.skip_period}, {"delay", c.schedule.delay}}},
            {"pretrain",
             {{"hidden", p.hidden},
              {"n_train", p.n_train},
              {"n_holdout", p.n_holdout},
              {"epochs", p.epochs},
              {"batch_size", p.batch_size},
              {"lr", p.lr},
              {"weight_decay", p.weight_decay},
              {"dropout_rate", p.dropout_rate},
              {"seed", p.seed},
              {"min_holdout_accuracy", p.min_holdout_accuracy}}},
            {"checkpoint", c.checkpoint},
            {"output_dir", c.output_dir}};
}

ExperimentConfig experiment_config_from_json(const nlohmann::json& j) {
    ExperimentConfig c;
    if (j.contains("stream")) c.stream = stream_spec_from_json(j.at("stream"));
    c.method = method_from_string(j.value("method", to_string(c.method)));
    if (j.contains("adapt")) c.adapt = adapt_config_from_json(j.at("adapt"));
    if (j.contains("oracle")) {
        c.oracle.error_rate = j.at("oracle").value("error_rate", 0.0);
        c.oracle.seed = j.at("oracle").value("seed", std::uint64_t{0});
    }
    c.seeds = j.value("seeds", c.seeds);
    if (j.contains("schedule")) {
        c.schedule.skip_period = j.at("schedule").value("skip_period", 1);
        c.schedule.delay = j.at("schedule").value("delay", 0);
    }
    if (j.contains("pretrain")) {
        const auto& p = j.at("pretrain");
        auto& t = c.pretrain;
        t.hidden = p.value("hidden", t.hidden);
        t.n_train = p.value("n_train", t.n_train);
        t.n_holdout = p.value("n_holdout", t.n_holdout);
        t.epochs = p.value("epochs", t.epochs);
        t.batch_size = p.value("batch_size", t.batch_size);
        t.lr = p.value("lr", t.lr);
        t.weight_decay = p.value("weight_decay", t.weight_decay);
        t.dropout_rate = p.value("dropout_rate", t.dropout_rate);
        t.seed = p.value("seed", t.seed);
        t.min_holdout_accuracy = p.value("min_holdout_accuracy", t.min_holdout_accuracy);
    }
    c.checkpoint = j.value("checkpoint", std::string{});
    c.output_dir = j.value("output_dir", std::string{});
    c.validate();
    return c;
}

AdaptConfig method_adapt_config(Method method, AdaptConfig base) {
    switch (method) {
        case Method::BFAOnly:
            base.beta = 0.0;
            break;
        case Method::ABAOnly:
            base.k = 0;
            base.alpha = 0.0;
            break;
        default:
            break;
    }
    return base;
}

std::uint64_t run_stream_seed(std::uint64_t seed) { return derive_seed(seed, {kStreamTag}); }

std::uint64_t run_adapt_seed(const ExperimentConfig& config, std::uint64_t seed) {
    return derive_seed(config.adapt.seed, {kAdaptTag, seed});
}

std::uint64_t run_oracle_seed(const ExperimentConfig& config, std::uint64_t seed) {
    return derive_seed(config.oracle.seed, {kOracleTag, seed});
}

std::unique_ptr<StreamAdapter> make_adapter(const ExperimentConfig& config, const Model& source, std::uint64_t seed) {
    AdaptConfig adapt = method_adapt_config(config.method, config.adapt);
    adapt.seed = run_adapt_seed(config, seed);
    switch (config.method) {
        case Method::BiTTA:
        case Method::BFAOnly:
        case Method::ABAOnly:
            return std::make_unique<AdaptationEngine>(source, adapt, config.schedule);
        case Method::SrcValid:
            return std::make_unique<BaselineAdapter>(BaselineKind::SrcValid, source, adapt, config.schedule);
        case Method::BnStats:
            return std::make_unique<BaselineAdapter>(BaselineKind::BnStats, source, adapt, config.schedule);
        case Method::EntropyMinBinary:
            return std::make_unique<BaselineAdapter>(BaselineKind::EntropyMinBinary, source, adapt, config.schedule);
    }
    throw std::logic_error("unhandled method");
}

MetricsRow make_metrics_row(const AdaptReport& rep, std::uint64_t seed, Method method, double cumulative_accuracy) {
    MetricsRow row;
    row.seed = seed;
    row.method = method;
    row.batch_index = rep.batch_index;
    row.segment_id = rep.segment_id;
    row.n_samples = rep.n_samples;
    row.n_correct = rep.n_correct_pre;
    row.pre_accuracy = rep.pre_accuracy;
    row.post_accuracy = rep.post_accuracy;
    row.cumulative_accuracy = cumulative_accuracy;
    row.n_bfa = rep.n_bfa;
    row.n_aba = rep.n_aba;
    row.loss_total = rep.loss.total;
    row.loss_bfa_correct = rep.loss.bfa_correct;
    row.loss_bfa_incorrect = rep.loss.bfa_incorrect;
    row.loss_aba = rep.loss.aba;
    row.mean_confidence = rep.mean_confidence;
    row.agreement_rate = rep.agreement_rate;
    row.aborted = rep.aborted;
    return row;
}

SeedRun run_seed(const ExperimentConfig& config, const Model& source, std::uint64_t seed) {
    SeedRun run;
    run.seed = seed;
    const Stream stream = make_shift_stream(config.stream, run_stream_seed(seed));
    OracleSpec oracle_spec = config.oracle;
    oracle_spec.seed = run_oracle_seed(config, seed);
    SimulatedOracle oracle(oracle_spec, stream);
    auto adapter = make_adapter(config, source, seed);
    std::size_t seen = 0;
    std::size_t hits = 0;
    for (const auto& batch : stream) {
        const AdaptReport rep = adapter->step(batch, oracle);
        seen += rep.n_samples;
        hits += rep.n_correct_pre;
        run.rows.push_back(make_metrics_row(rep, seed, config.method,
                                            static_cast<double>(hits) / static_cast<double>(seen)));
    }
    run.cumulative_accuracy = run.rows.empty() ? 0.0 : run.rows.back().cumulative_accuracy;
    return run;
}

ExperimentSummary run_experiment(const ExperimentConfig& config, const Model& source) {
    config.validate();
    ExperimentSummary summary;
    summary.method = config.method;
    for (auto seed : config.seeds) {
        try {
            summary.runs.push_back(run_seed(config, source, seed));
        } catch (const std::exception& e) {
            SeedRun failed;
            failed.seed = seed;
            failed.failed = true;
            failed.error = e.what();
            summary.runs.push_back(std::move(failed));
        }
    }
    std::vector<double> finals;
    std::map<int, std::vector<double>> per_segment;  // segment -> per-seed accuracy
    for (const auto& run : summary.runs) {
        if (run.failed) continue;
        finals.push_back(run.cumulative_accuracy);
        std::map<int, std::pair<std::size_t, std::size_t>> counts;
        for (const auto& row : run.rows) {
            auto& c = counts[row.segment_id];
            c.first += row.n_correct;
            c.second += row.n_samples;
        }
        for (const auto& [segment, c] : counts)
            per_segment[segment].push_back(static_cast<double>(c.first) / static_cast<double>(c.second));
    }
    std::tie(summary.mean_accuracy, summary.std_accuracy) = mean_std(finals);
    for (const auto& [segment, values] : per_segment) {
        const auto [m, s] = mean_std(values);
        summary.segments.push_back({segment, m, s});
    }

    if (!config.output_dir.empty()) {
        const std::filesystem::path dir(config.output_dir);
        std::filesystem::create_directories(dir);
        write_text(dir / "config.json", experiment_config_to_json(config).dump(2) + "\n");
        std::ofstream metrics(dir / "metrics.csv", std::ios::binary);
        std::vector<MetricsRow> rows;
        for (const auto& run : summary.runs) rows.insert(rows.end(), run.rows.begin(), run.rows.end());
        write_metrics_csv(metrics, rows);
        write_text(dir / "summary.json", summary_to_json(summary).dump(2) + "\n");
    }
    return summary;
}

Model resolve_source_model(const ExperimentConfig& config) {
    if (!config.checkpoint.empty()) return load_checkpoint(config.checkpoint);
    return pretrain(config.stream, config.pretrain).model;
}

ExperimentSummary run_experiment(const ExperimentConfig& config) {
    return run_experiment(config, resolve_source_model(config));
}

std::vector<double> replay_cumulative_accuracy(const std::vector<MetricsRow>& rows) {
    std::vector<double> out;
    std::map<std::pair<std::uint64_t, Method>, std::pair<std::size_t, std::size_t>> running;
    for (const auto& row : rows) {
        auto& c = running[{row.seed, row.method}];
        c.first += row.n_correct;
        c.second += row.n_samples;
        out.push_back(static_cast<double>(c.first) / static_cast<double>(c.second));
    }
    return out;
}

void write_metrics_csv(std::ostream& out, const std::vector<MetricsRow>& rows) {
    out << "seed,method,batch_index,segment_id,n_samples,n_correct,pre_accuracy,post_accuracy,cumulative_accuracy,"
           "n_bfa,n_aba,loss_total,loss_bfa_correct,loss_bfa_incorrect,loss_aba,mean_confidence,agreement_rate,aborted\n";
    out << std::setprecision(17);
    for (const auto& r : rows)
        out << r.seed << ',' << to_string(r.method) << ',' << r.batch_index << ',' << r.segment_id << ',' << r.n_samples
            << ',' << r.n_correct << ',' << r.pre_accuracy << ',' << r.post_accuracy << ',' << r.cumulative_accuracy << ','
            << r.n_bfa << ',' << r.n_aba << ',' << r.loss_total << ',' << r.loss_bfa_correct << ','
            << r.loss_bfa_incorrect << ',' << r.loss_aba << ',' << r.mean_confidence << ',' << r.agreement_rate << ','
            << (r.aborted ? 1 : 0) << '\n';
}

std::vector<MetricsRow> read_metrics_csv(std::istream& in) {
    std::string line;
    std::getline(in, line);
    std::vector<MetricsRow> rows;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::vector<std::string> f;
        std::stringstream ss(line);
        for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
        if (f.size() != 18) throw std::runtime_error("metrics row has " + std::to_string(f.size()) + " fields");
        MetricsRow r;
        r.seed = std::stoull(f[0]);
        r.method = method_from_string(f[1]);
        r.batch_index = std::stoi(f[2]);
        r.segment_id = std::stoi(f[3]);
        r.n_samples = std::stoull(f[4]);
        r.n_correct = std::stoull(f[5]);
        r.pre_accuracy = std::stod(f[6]);
        r.post_accuracy = std::stod(f[7]);
        r.cumulative_accuracy = std::stod(f[8]);
        r.n_bfa = std::stoull(f[9]);
        r.n_aba = std::stoull(f[10]);
        r.loss_total = std::stod(f[11]);
        r.loss_bfa_correct = std::stod(f[12]);
        r.loss_bfa_incorrect = std::stod(f[13]);
        r.loss_aba = std::stod(f[14]);
        r.mean_confidence = std::stod(f[15]);
        r.agreement_rate = std::stod(f[16]);
        r.aborted = f[17] == "1";
        rows.push_back(r);
    }
    return rows;
}

nlohmann::json summary_to_json(const ExperimentSummary& s) {
    nlohmann::json runs = nlohmann::json::array();
    for (const auto& r : s.runs) {
        nlohmann::json j = {{"seed", r.seed}, {"cumulative_accuracy", r.cumulative_accuracy}, {"failed", r.failed}};
        if (r.failed) j["error"] = r.error;
        runs.push_back(std::move(j));
    }
    nlohmann::json segments = nlohmann::json::array();
    for (const auto& seg : s.segments)
        segments.push_back({{"segment_id", seg.segment_id}, {"mean_accuracy", seg.mean_accuracy}, {"std_accuracy", seg.std_accuracy}});
    return {{"method", to_string(s.method)},
            {"mean_accuracy", s.mean_accuracy},
            {"std_accuracy", s.std_accuracy},
            {"runs", std::move(runs)},
            {"segments", std::move(segments)}};
}

std::string to_string(GridAxis axis) {
    switch (axis) {
        case GridAxis::K: return "k";
        case GridAxis::ErrorRate: return "error_rate";
        case GridAxis::Beta: return "beta";
        case GridAxis::NPasses: return "n_passes";
        case GridAxis::Selection: return "selection";
    }
    return "?";
}

GridAxis grid_axis_from_string(const std::string& s) {
    for (auto a : {GridAxis::K, GridAxis::ErrorRate, GridAxis::Beta, GridAxis::NPasses, GridAxis::Selection})
        if (to_string(a) == s) return a;
    throw std::invalid_argument("unknown grid axis '" + s + "'");
}

ExperimentConfig apply_axis(ExperimentConfig config, GridAxis axis, const std::string& value) {
    auto whole = [&](auto parse) {
        const auto bad = [&] { return std::invalid_argument("bad value '" + value + "' for axis " + to_string(axis)); };
        std::size_t used = 0;
        decltype(parse(value, &used)) v{};
        try {
            v = parse(value, &used);
        } catch (const std::logic_error&) {
            throw bad();
        }
        if (used != value.size()) throw bad();
        return v;
    };
    auto as_int = [&] { return whole([](const std::string& s, std::size_t* n) { return std::stoi(s, n); }); };
    auto as_real = [&] { return whole([](const std::string& s, std::size_t* n) { return std::stod(s, n); }); };
    switch (axis) {
        case GridAxis::K: config.adapt.k = as_int(); break;
        case GridAxis::ErrorRate: config.oracle.error_rate = as_real(); break;
        case GridAxis::Beta: config.adapt.beta = as_real(); break;
        case GridAxis::NPasses: config.adapt.n_passes = as_int(); break;
        case GridAxis::Selection: config.adapt.selection = selection_kind_from_string(value); break;
    }
    config.validate();
    return config;
}

std::vector<GridCell> ablation_grid(const ExperimentConfig& base, GridAxis axis, const std::vector<std::string>& values,
                                    const Model& source) {
    std::vector<GridCell> cells;
    for (const auto& value : values) {
        GridCell cell;
        cell.value = value;
        try {
            ExperimentConfig config = apply_axis(base, axis, value);
            if (!base.output_dir.empty())
                config.output_dir = (std::filesystem::path(base.output_dir) / (to_string(axis) + "=" + value)).string();
            cell.summary = run_experiment(config, source);
        } catch (const std::exception& e) {
            cell.error = e.what();
        }
        cells.push_back(std::move(cell));
    }
    if (!base.output_dir.empty()) {
        nlohmann::json table = nlohmann::json::array();
        for (const auto& c : cells) {
            nlohmann::json row = {{"value", c.value}, {"mean_accuracy", c.summary.mean_accuracy},
                                  {"std_accuracy", c.summary.std_accuracy}};
            if (!c.error.empty()) row["error"] = c.error;
            table.push_back(std::move(row));
        }
        std::filesystem::create_directories(base.output_dir);
        write_text(std::filesystem::path(base.output_dir) / "grid.json",
                   nlohmann::json{{"axis", to_string(axis)}, {"cells", std::move(table)}}.dump(2) + "\n");
    }
    return cells;
}

}  // namespace bitta
