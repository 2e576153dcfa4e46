#pragma once

// Synthetic source data and continual-shift test streams. Test labels travel
// with each batch but can only be read through HiddenLabels::Key, which only
// the simulated oracle, the metrics reporter and the stream dump can mint.

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"

#include "bitta/nn.hpp"
#include "bitta/oracle.hpp"

namespace bitta {

enum class CorruptionKind { Rotation, GaussianNoise, Scaling, MeanShift };
enum class StreamOrdering { Continual, Mixed, NonIID, SingleSample };

struct Corruption {
    CorruptionKind kind = CorruptionKind::GaussianNoise;
    double severity = 0.0;
    int variant = 0;  // selects one of several independent maps of the same kind

    friend bool operator==(const Corruption&, const Corruption&) = default;
};

// One segment is a composition of corruptions applied in order.
using SegmentCorruptions = std::vector<Corruption>;

struct StreamSpec {
    int n_classes = 8;
    int feature_dim = 16;
    std::uint64_t geometry_seed = 7;
    double prototype_scale = 1.0;
    double class_noise = 0.8;
    std::vector<SegmentCorruptions> segments;
    int batch_size = 64;
    int batches_per_segment = 20;
    StreamOrdering ordering = StreamOrdering::Continual;
    // NonIID only: 1 sorts each segment by label, 0 leaves it i.i.d. A
    // stand-in for the Dirichlet-style correlation used in the literature.
    double temporal_correlation = 1.0;

    friend bool operator==(const StreamSpec&, const StreamSpec&) = default;
};

// 8 classes, 16 features, 15 segments x 20 batches x 64 samples.
StreamSpec default_desk_spec();

struct LabeledDataset {
    MatrixXd features;
    std::vector<int> labels;
};

class SimulatedOracle;
struct Metrics;
struct StreamDump;

class HiddenLabels {
public:
    class Key {
        Key() = default;
        friend class SimulatedOracle;
        friend struct Metrics;
        friend struct StreamDump;
    };

    HiddenLabels() = default;
    explicit HiddenLabels(std::vector<int> labels) : labels_(std::move(labels)) {}

    std::size_t size() const noexcept { return labels_.size(); }
    const std::vector<int>& reveal(Key) const noexcept { return labels_; }

private:
    std::vector<int> labels_;
};

struct StreamBatch {
    std::vector<SampleId> ids;
    MatrixXd features;
    HiddenLabels labels;
    int segment_id = 0;  // -1 when the batch mixes segments
    int batch_index = 0;
    std::vector<int> sample_segments;

    Eigen::Index size() const { return features.rows(); }
};

using Stream = std::vector<StreamBatch>;

// Prototype geometry shared by the source data and every test stream.
MatrixXd class_prototypes(const StreamSpec& spec);

// Balanced, label-shuffled draws from the clean class-conditional Gaussians.
LabeledDataset make_source_dataset(const StreamSpec& spec, int n_samples, std::uint64_t seed);

// Applies one corruption in place. The map of each (kind, variant) is fixed
// by geometry_seed, with severity moving along it; noise draws come from `noise_seed`.
void apply_corruption(const StreamSpec& spec, const Corruption& corruption, MatrixXd& features,
                      std::uint64_t noise_seed);

// Clean draws with the given corruptions applied in order.
LabeledDataset make_corrupted_dataset(const StreamSpec& spec, const SegmentCorruptions& corruptions,
                                      int n_samples, std::uint64_t seed);

Stream make_shift_stream(const StreamSpec& spec, std::uint64_t seed);

std::size_t stream_sample_count(const Stream& stream);

struct OracleSpec {
    double error_rate = 0.0;
    std::uint64_t seed = 0;

    friend bool operator==(const OracleSpec&, const OracleSpec&) = default;
};

// +1 iff predicted == hidden, flipped with probability error_rate using a
// draw keyed on (seed, sample_id) only.
int oracle_answer(const OracleSpec& spec, int hidden_label, int predicted_label, SampleId sample_id);

class SimulatedOracle : public FeedbackOracle {
public:
    SimulatedOracle(OracleSpec spec, const Stream& stream);

    int query(SampleId sample_id, const Eigen::Ref<const Eigen::RowVectorXd>& features, int predicted_label) override;

    std::size_t queries() const noexcept { return queries_; }
    std::size_t flips() const noexcept { return flips_; }

private:
    OracleSpec spec_;
    std::unordered_map<SampleId, int> labels_;
    std::size_t queries_ = 0;
    std::size_t flips_ = 0;
};

// The metrics reporter: the only non-oracle reader of hidden labels.
struct Metrics {
    static std::vector<bool> correctness(const StreamBatch& batch, std::span<const int> predictions);
    static std::size_t count_correct(const StreamBatch& batch, std::span<const int> predictions);
    static double accuracy(const StreamBatch& batch, std::span<const int> predictions);
};

// Line-oriented JSON: a header line with spec and seed, then one line per batch.
struct StreamDump {
    static void write(std::ostream& out, const StreamSpec& spec, std::uint64_t seed, const Stream& stream);
    static Stream read(std::istream& in, StreamSpec* spec = nullptr, std::uint64_t* seed = nullptr);
};

nlohmann::json stream_spec_to_json(const StreamSpec& spec);
StreamSpec stream_spec_from_json(const nlohmann::json& j);
std::string to_string(CorruptionKind kind);
CorruptionKind corruption_kind_from_string(const std::string& s);
std::string to_string(StreamOrdering ordering);
StreamOrdering stream_ordering_from_string(const std::string& s);

}  // namespace bitta
