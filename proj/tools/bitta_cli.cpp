#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "bitta/checkpoint.hpp"
#include "bitta/harness.hpp"
#include "bitta/session.hpp"

namespace {

using namespace bitta;

// Flags that override fields of the loaded (or default) ExperimentConfig.
struct Overrides {
    std::string config_file;
    std::optional<std::string> method;
    std::optional<std::vector<std::uint64_t>> seeds;
    std::optional<int> k;
    std::optional<int> epochs;
    std::optional<int> n_passes;
    std::optional<double> lr;
    std::optional<double> alpha;
    std::optional<double> beta;
    std::optional<double> error_rate;
    std::optional<std::string> selection;
    std::optional<std::string> ordering;
    std::optional<int> skip;
    std::optional<int> delay;
    std::optional<std::string> checkpoint;
    std::optional<std::string> output_dir;

    void attach(CLI::App& app) {
        app.add_option("--config", config_file, "JSON experiment config")->check(CLI::ExistingFile);
        app.add_option("--method", method, "BiTTA, BFAOnly, ABAOnly, SrcValid, BnStats or EntropyMinBinary");
        app.add_option("--seeds", seeds, "Run seeds");
        app.add_option("--k", k, "Binary-feedback samples per batch");
        app.add_option("--epochs", epochs, "Adaptation epochs per batch");
        app.add_option("--n-passes", n_passes, "MC-dropout passes");
        app.add_option("--lr", lr, "Adaptation learning rate");
        app.add_option("--alpha", alpha, "Weight of the feedback term");
        app.add_option("--beta", beta, "Weight of the agreement term");
        app.add_option("--error-rate", error_rate, "Simulated feedback flip probability");
        app.add_option("--selection", selection, "least_confidence or random");
        app.add_option("--ordering", ordering, "Stream ordering: continual, mixed, non_iid, single_sample");
        app.add_option("--skip", skip, "Label every n-th batch");
        app.add_option("--delay", delay, "Feedback delay in batches");
        app.add_option("--checkpoint", checkpoint, "Source checkpoint; pretrains when omitted");
        app.add_option("--output-dir", output_dir, "Run directory");
    }

    ExperimentConfig resolve(const std::string& default_name) const {
        ExperimentConfig c;
        if (!config_file.empty()) {
            std::ifstream in(config_file);
            c = experiment_config_from_json(nlohmann::json::parse(in));
        }
        if (method) c.method = method_from_string(*method);
        if (seeds) c.seeds = *seeds;
        if (k) c.adapt.k = *k;
        if (epochs) c.adapt.epochs = *epochs;
        if (n_passes) c.adapt.n_passes = *n_passes;
        if (lr) c.adapt.lr = *lr;
        if (alpha) c.adapt.alpha = *alpha;
        if (beta) c.adapt.beta = *beta;
        if (error_rate) c.oracle.error_rate = *error_rate;
        if (selection) c.adapt.selection = selection_kind_from_string(*selection);
        if (ordering) c.stream.ordering = stream_ordering_from_string(*ordering);
        if (skip) c.schedule.skip_period = *skip;
        if (delay) c.schedule.delay = *delay;
        if (checkpoint) c.checkpoint = *checkpoint;
        if (output_dir) c.output_dir = *output_dir;
        if (c.output_dir.empty()) c.output_dir = (output_root() / default_name).string();
        c.validate();
        return c;
    }

    static std::filesystem::path output_root() {
        const char* root = std::getenv("BITTA_OUTPUT_ROOT");
        return root && *root ? std::filesystem::path(root) : std::filesystem::path("runs");
    }
};

void print_summary(const ExperimentSummary& s) {
    std::cout << to_string(s.method) << ": cumulative accuracy " << 100.0 * s.mean_accuracy << " +/- "
              << 100.0 * s.std_accuracy << " over " << s.runs.size() << " seed(s)\n";
    for (const auto& run : s.runs)
        if (run.failed) std::cout << "  seed " << run.seed << " failed: " << run.error << "\n";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Test-time adaptation with binary feedback on synthetic shift streams"};
    app.require_subcommand(1);

    Overrides pre_opts;
    std::string pre_out;
    auto* pre = app.add_subcommand("pretrain", "Train the source model and write a checkpoint");
    pre_opts.attach(*pre);
    pre->add_option("--out", pre_out, "Checkpoint path (default: <output root>/source.json)");

    Overrides run_opts;
    auto* run = app.add_subcommand("run", "Adapt over the stream for every seed and write metrics");
    run_opts.attach(*run);

    Overrides grid_opts;
    std::string axis;
    std::vector<std::string> values;
    auto* grid = app.add_subcommand("grid", "One run per value of an ablation axis");
    grid_opts.attach(*grid);
    grid->add_option("--axis", axis, "k, error_rate, beta, n_passes or selection")->required();
    grid->add_option("--values", values, "Axis values")->required();

    Overrides serve_opts;
    std::string host = "127.0.0.1";
    int port = 8080;
    SessionOptions session;
    auto* serve = app.add_subcommand("serve", "Live session driven by human feedback over HTTP");
    serve_opts.attach(*serve);
    serve->add_option("--host", host);
    serve->add_option("--port", port);
    serve->add_option("--deadline-ms", session.deadline_ms, "Time to answer a query batch");
    serve->add_option("--idle-timeout-ms", session.idle_timeout_ms, "Pause after this long without client traffic");
    serve->add_option("--seed", session.seed, "Run seed");

    Overrides dump_opts;
    std::uint64_t dump_seed = 0;
    std::string dump_out;
    auto* dump = app.add_subcommand("dump-stream", "Write a generated stream as JSON lines");
    dump_opts.attach(*dump);
    dump->add_option("--seed", dump_seed, "Run seed");
    dump->add_option("--out", dump_out, "Output file (default: stdout)");

    CLI11_PARSE(app, argc, argv);

    try {
        if (pre->parsed()) {
            const auto config = pre_opts.resolve("pretrain");
            const auto result = pretrain(config.stream, config.pretrain);
            const std::filesystem::path out =
                pre_out.empty() ? Overrides::output_root() / "source.json" : std::filesystem::path(pre_out);
            if (out.has_parent_path()) std::filesystem::create_directories(out.parent_path());
            save_checkpoint(result.model, out.string());
            std::cout << "train accuracy " << result.train_accuracy << ", holdout accuracy " << result.holdout_accuracy
                      << "\nwrote " << out.string() << "\n";
        } else if (run->parsed()) {
            const auto config = run_opts.resolve(run_opts.method.value_or("run"));
            print_summary(run_experiment(config));
            std::cout << "wrote " << config.output_dir << "\n";
        } else if (grid->parsed()) {
            const auto config = grid_opts.resolve("grid-" + axis);
            const auto cells = ablation_grid(config, grid_axis_from_string(axis), values, resolve_source_model(config));
            for (const auto& cell : cells) {
                std::cout << axis << "=" << cell.value << "  ";
                if (cell.error.empty()) print_summary(cell.summary);
                else std::cout << "failed: " << cell.error << "\n";
            }
        } else if (serve->parsed()) {
            const auto config = serve_opts.resolve("session");
            serve_session(config, resolve_source_model(config), host, port, session);
        } else if (dump->parsed()) {
            const auto config = dump_opts.resolve("stream");
            const Stream stream = make_shift_stream(config.stream, run_stream_seed(dump_seed));
            if (dump_out.empty()) {
                StreamDump::write(std::cout, config.stream, dump_seed, stream);
            } else {
                std::ofstream out(dump_out, std::ios::binary);
                StreamDump::write(out, config.stream, dump_seed, stream);
            }
        }
    } catch (const PretrainFailure& e) {
        std::cerr << "pretraining failed: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
