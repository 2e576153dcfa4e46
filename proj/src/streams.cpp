#include "bitta/streams.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <numbers>
#include <numeric>
#include <ostream>
#include <random>
#include <stdexcept>

#include "bitta/random.hpp"

namespace bitta {

namespace {

constexpr std::uint64_t kProtoTag = 0x70726f746f;
constexpr std::uint64_t kCorruptTag = 0x636f7272;

void validate(const StreamSpec& spec) {
    if (spec.n_classes < 2) throw std::invalid_argument("stream needs at least 2 classes");
    if (spec.feature_dim < 1) throw std::invalid_argument("stream needs at least 1 feature");
    if (spec.batch_size < 1 || spec.batches_per_segment < 1) throw std::invalid_argument("batch geometry must be positive");
    if (!(spec.class_noise > 0.0) || !(spec.prototype_scale > 0.0)) throw std::invalid_argument("scales must be positive");
    if (!(spec.temporal_correlation >= 0.0 && spec.temporal_correlation <= 1.0))
        throw std::invalid_argument("temporal correlation must lie in [0, 1]");
    for (const auto& seg : spec.segments)
        for (const auto& c : seg) {
            if (!(c.severity >= 0.0)) throw std::invalid_argument("corruption severity must be non-negative");
            if (c.variant < 0) throw std::invalid_argument("corruption variant must be non-negative");
        }
}

MatrixXd gaussian_matrix(std::mt19937_64& rng, Eigen::Index rows, Eigen::Index cols, double stddev) {
    std::normal_distribution<double> dist(0.0, stddev);
    MatrixXd m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r)
        for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = dist(rng);
    return m;
}

// Balanced labels (counts differ by at most one), shuffled.
std::vector<int> balanced_labels(int n, int n_classes, std::mt19937_64& rng) {
    std::vector<int> labels(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) labels[static_cast<std::size_t>(i)] = i % n_classes;
    std::shuffle(labels.begin(), labels.end(), rng);
    return labels;
}

MatrixXd draw_features(const StreamSpec& spec, const MatrixXd& prototypes, const std::vector<int>& labels,
                       std::mt19937_64& rng) {
    MatrixXd x = gaussian_matrix(rng, static_cast<Eigen::Index>(labels.size()), spec.feature_dim, spec.class_noise);
    for (std::size_t i = 0; i < labels.size(); ++i) x.row(static_cast<Eigen::Index>(i)) += prototypes.row(labels[i]);
    return x;
}

StreamBatch make_batch(const std::vector<SampleId>& ids, const MatrixXd& features, const std::vector<int>& labels,
                       const std::vector<int>& segments, std::span<const std::size_t> rows, int batch_index) {
    StreamBatch b;
    b.batch_index = batch_index;
    b.features.resize(static_cast<Eigen::Index>(rows.size()), features.cols());
    std::vector<int> hidden;
    for (std::size_t i = 0; i < rows.size(); ++i) {
        b.features.row(static_cast<Eigen::Index>(i)) = features.row(static_cast<Eigen::Index>(rows[i]));
        b.ids.push_back(ids[rows[i]]);
        hidden.push_back(labels[rows[i]]);
        b.sample_segments.push_back(segments[rows[i]]);
    }
    b.labels = HiddenLabels(std::move(hidden));
    const bool uniform = std::all_of(b.sample_segments.begin(), b.sample_segments.end(),
                                     [&](int s) { return s == b.sample_segments.front(); });
    b.segment_id = uniform ? b.sample_segments.front() : -1;
    return b;
}

}  // namespace

StreamSpec default_desk_spec() {
    using K = CorruptionKind;
    StreamSpec spec;
    spec.segments = {
        {{K::Rotation, 0.45}, {K::GaussianNoise, 0.6}},
        {{K::Rotation, 0.45}, {K::Scaling, 0.6}},
        {{K::Rotation, 0.45}, {K::MeanShift, 2.0}},
        {{K::Rotation, 0.525}},
        {{K::Rotation, 0.45}, {K::GaussianNoise, 0.8}},
        {{K::Rotation, 0.45}, {K::Scaling, 0.8}, {K::MeanShift, 1.0}},
        {{K::Rotation, 0.488}, {K::MeanShift, 3.0}},
        {{K::Rotation, 0.45}, {K::GaussianNoise, 0.5}, {K::Scaling, 0.5}},
        {{K::Rotation, 0.525}, {K::MeanShift, 1.5}},
        {{K::Rotation, 0.45}, {K::Scaling, 1.0}},
        {{K::Rotation, 0.488}, {K::GaussianNoise, 0.7}},
        {{K::Rotation, 0.45}, {K::MeanShift, 2.5}, {K::GaussianNoise, 0.5}},
        {{K::Rotation, 0.525}, {K::Scaling, 0.6}},
        {{K::Rotation, 0.45}, {K::GaussianNoise, 1.0}},
        {{K::Rotation, 0.488}, {K::MeanShift, 2.0}, {K::Scaling, 0.6}},
    };
    return spec;
}

MatrixXd class_prototypes(const StreamSpec& spec) {
    validate(spec);
    std::mt19937_64 rng(derive_seed(spec.geometry_seed, {kProtoTag}));
    return gaussian_matrix(rng, spec.n_classes, spec.feature_dim, spec.prototype_scale);
}

LabeledDataset make_source_dataset(const StreamSpec& spec, int n_samples, std::uint64_t seed) {
    validate(spec);
    if (n_samples < spec.n_classes) throw std::invalid_argument("need at least one sample per class");
    const MatrixXd protos = class_prototypes(spec);
    std::mt19937_64 rng(seed);
    LabeledDataset d;
    d.labels = balanced_labels(n_samples, spec.n_classes, rng);
    d.features = draw_features(spec, protos, d.labels, rng);
    return d;
}

void apply_corruption(const StreamSpec& spec, const Corruption& c, MatrixXd& x, std::uint64_t noise_seed) {
    if (!(c.severity >= 0.0)) throw std::invalid_argument("corruption severity must be non-negative");
    const Eigen::Index d = x.cols();
    if (c.variant < 0) throw std::invalid_argument("corruption variant must be non-negative");
    std::mt19937_64 rng(derive_seed(spec.geometry_seed, {kCorruptTag, static_cast<std::uint64_t>(c.kind),
                                                         static_cast<std::uint64_t>(c.variant)}));
    const double s = c.severity;
    switch (c.kind) {
        case CorruptionKind::Rotation: {
            // Geodesic path from identity: rotate d/2 random planes by s * angle.
            const Eigen::HouseholderQR<MatrixXd> qr(gaussian_matrix(rng, d, d, 1.0));
            const MatrixXd basis = qr.householderQ();
            std::uniform_real_distribution<double> angle(0.5 * std::numbers::pi / 2, std::numbers::pi / 2);
            MatrixXd block = MatrixXd::Identity(d, d);
            for (Eigen::Index p = 0; p + 1 < d; p += 2) {
                const double a = s * angle(rng);
                block(p, p) = std::cos(a);
                block(p, p + 1) = -std::sin(a);
                block(p + 1, p) = std::sin(a);
                block(p + 1, p + 1) = std::cos(a);
            }
            const MatrixXd rotation = basis * block * basis.transpose();
            x = x * rotation.transpose();
            break;
        }
        case CorruptionKind::GaussianNoise: {
            std::mt19937_64 noise(noise_seed);
            x += gaussian_matrix(noise, x.rows(), d, s * spec.prototype_scale);
            break;
        }
        case CorruptionKind::Scaling: {
            const MatrixXd log_scale = gaussian_matrix(rng, 1, d, 1.0);
            x.array().rowwise() *= (s * log_scale.row(0)).array().exp();
            break;
        }
        case CorruptionKind::MeanShift: {
            const MatrixXd offset = gaussian_matrix(rng, 1, d, spec.prototype_scale);
            x.rowwise() += s * offset.row(0);
            break;
        }
    }
}

LabeledDataset make_corrupted_dataset(const StreamSpec& spec, const SegmentCorruptions& corruptions,
                                      int n_samples, std::uint64_t seed) {
    LabeledDataset d = make_source_dataset(spec, n_samples, seed);
    for (std::size_t i = 0; i < corruptions.size(); ++i)
        apply_corruption(spec, corruptions[i], d.features, derive_seed(seed, {kCorruptTag, i}));
    return d;
}

Stream make_shift_stream(const StreamSpec& spec, std::uint64_t seed) {
    validate(spec);
    const MatrixXd protos = class_prototypes(spec);
    const int per_segment = spec.batch_size * spec.batches_per_segment;
    const auto n_segments = static_cast<int>(spec.segments.size());
    const auto total = static_cast<std::size_t>(per_segment) * spec.segments.size();

    MatrixXd features(static_cast<Eigen::Index>(total), spec.feature_dim);
    std::vector<int> labels;
    std::vector<int> segments;
    std::vector<SampleId> ids(total);
    std::iota(ids.begin(), ids.end(), SampleId{0});
    for (int s = 0; s < n_segments; ++s) {
        std::mt19937_64 rng(derive_seed(seed, {static_cast<std::uint64_t>(s)}));
        const auto seg_labels = balanced_labels(per_segment, spec.n_classes, rng);
        MatrixXd x = draw_features(spec, protos, seg_labels, rng);
        const auto& corruptions = spec.segments[static_cast<std::size_t>(s)];
        for (std::size_t i = 0; i < corruptions.size(); ++i)
            apply_corruption(spec, corruptions[i], x,
                             derive_seed(seed, {static_cast<std::uint64_t>(s), kCorruptTag, i}));
        features.middleRows(static_cast<Eigen::Index>(s) * per_segment, per_segment) = x;
        labels.insert(labels.end(), seg_labels.begin(), seg_labels.end());
        segments.insert(segments.end(), static_cast<std::size_t>(per_segment), s);
    }

    std::vector<std::size_t> order(total);
    std::iota(order.begin(), order.end(), std::size_t{0});
    int chunk = spec.batch_size;
    switch (spec.ordering) {
        case StreamOrdering::Continual:
            break;
        case StreamOrdering::SingleSample:
            chunk = 1;
            break;
        case StreamOrdering::Mixed: {
            std::mt19937_64 rng(derive_seed(seed, {0x6d6978}));
            std::shuffle(order.begin(), order.end(), rng);
            break;
        }
        case StreamOrdering::NonIID: {
            std::mt19937_64 rng(derive_seed(seed, {0x6e6f6e}));
            std::uniform_real_distribution<double> jitter(0.0, static_cast<double>(spec.n_classes));
            const double rho = spec.temporal_correlation;
            std::vector<double> key(total);
            for (std::size_t i = 0; i < total; ++i) key[i] = rho * labels[i] + (1.0 - rho) * jitter(rng);
            for (int s = 0; s < n_segments; ++s) {
                auto first = order.begin() + static_cast<std::ptrdiff_t>(s) * per_segment;
                std::stable_sort(first, first + per_segment, [&](std::size_t a, std::size_t b) { return key[a] < key[b]; });
            }
            break;
        }
    }

    Stream stream;
    for (std::size_t start = 0; start < total; start += static_cast<std::size_t>(chunk)) {
        const std::size_t len = std::min(static_cast<std::size_t>(chunk), total - start);
        stream.push_back(make_batch(ids, features, labels, segments,
                                    std::span<const std::size_t>(order).subspan(start, len),
                                    static_cast<int>(stream.size())));
    }
    return stream;
}

std::size_t stream_sample_count(const Stream& stream) {
    std::size_t n = 0;
    for (const auto& b : stream) n += static_cast<std::size_t>(b.size());
    return n;
}

int oracle_answer(const OracleSpec& spec, int hidden_label, int predicted_label, SampleId sample_id) {
    if (!(spec.error_rate >= 0.0 && spec.error_rate <= 1.0)) throw std::invalid_argument("error rate must lie in [0, 1]");
    const int base = hidden_label == predicted_label ? kFeedbackCorrect : kFeedbackIncorrect;
    const bool flip = unit_uniform(derive_seed(spec.seed, {0x6f7261636c65, sample_id})) < spec.error_rate;
    return flip ? -base : base;
}

SimulatedOracle::SimulatedOracle(OracleSpec spec, const Stream& stream) : spec_(spec) {
    if (!(spec.error_rate >= 0.0 && spec.error_rate <= 1.0)) throw std::invalid_argument("error rate must lie in [0, 1]");
    for (const auto& batch : stream) {
        const auto& hidden = batch.labels.reveal({});
        for (std::size_t i = 0; i < batch.ids.size(); ++i) labels_[batch.ids[i]] = hidden[i];
    }
}

int SimulatedOracle::query(SampleId sample_id, const Eigen::Ref<const Eigen::RowVectorXd>&, int predicted_label) {
    const auto it = labels_.find(sample_id);
    if (it == labels_.end()) throw OracleFailure("no ground truth for sample " + std::to_string(sample_id));
    ++queries_;
    const int answer = oracle_answer(spec_, it->second, predicted_label, sample_id);
    if (answer != (it->second == predicted_label ? kFeedbackCorrect : kFeedbackIncorrect)) ++flips_;
    return answer;
}

std::vector<bool> Metrics::correctness(const StreamBatch& batch, std::span<const int> predictions) {
    const auto& hidden = batch.labels.reveal({});
    if (predictions.size() != hidden.size()) throw std::invalid_argument("prediction count differs from batch size");
    std::vector<bool> out(hidden.size());
    for (std::size_t i = 0; i < hidden.size(); ++i) out[i] = predictions[i] == hidden[i];
    return out;
}

std::size_t Metrics::count_correct(const StreamBatch& batch, std::span<const int> predictions) {
    const auto c = correctness(batch, predictions);
    return static_cast<std::size_t>(std::count(c.begin(), c.end(), true));
}

double Metrics::accuracy(const StreamBatch& batch, std::span<const int> predictions) {
    if (predictions.empty()) return 0.0;
    return static_cast<double>(count_correct(batch, predictions)) / static_cast<double>(predictions.size());
}

std::string to_string(CorruptionKind kind) {
    switch (kind) {
        case CorruptionKind::Rotation: return "rotation";
        case CorruptionKind::GaussianNoise: return "gaussian_noise";
        case CorruptionKind::Scaling: return "scaling";
        case CorruptionKind::MeanShift: return "mean_shift";
    }
    return "?";
}

CorruptionKind corruption_kind_from_string(const std::string& s) {
    for (auto k : {CorruptionKind::Rotation, CorruptionKind::GaussianNoise, CorruptionKind::Scaling,
                   CorruptionKind::MeanShift})
        if (to_string(k) == s) return k;
    throw std::invalid_argument("unknown corruption kind '" + s + "'");
}

std::string to_string(StreamOrdering ordering) {
    switch (ordering) {
        case StreamOrdering::Continual: return "continual";
        case StreamOrdering::Mixed: return "mixed";
        case StreamOrdering::NonIID: return "non_iid";
        case StreamOrdering::SingleSample: return "single_sample";
    }
    return "?";
}

StreamOrdering stream_ordering_from_string(const std::string& s) {
    for (auto o : {StreamOrdering::Continual, StreamOrdering::Mixed, StreamOrdering::NonIID, StreamOrdering::SingleSample})
        if (to_string(o) == s) return o;
    throw std::invalid_argument("unknown stream ordering '" + s + "'");
}

nlohmann::json stream_spec_to_json(const StreamSpec& spec) {
    nlohmann::json segs = nlohmann::json::array();
    for (const auto& seg : spec.segments) {
        nlohmann::json list = nlohmann::json::array();
        for (const auto& c : seg)
            list.push_back({{"kind", to_string(c.kind)}, {"severity", c.severity}, {"variant", c.variant}});
        segs.push_back(std::move(list));
    }
    return {{"n_classes", spec.n_classes},
            {"feature_dim", spec.feature_dim},
            {"geometry_seed", spec.geometry_seed},
            {"prototype_scale", spec.prototype_scale},
            {"class_noise", spec.class_noise},
            {"segments", std::move(segs)},
            {"batch_size", spec.batch_size},
            {"batches_per_segment", spec.batches_per_segment},
            {"ordering", to_string(spec.ordering)},
            {"temporal_correlation", spec.temporal_correlation}};
}

StreamSpec stream_spec_from_json(const nlohmann::json& j) {
    StreamSpec spec;
    spec.n_classes = j.value("n_classes", spec.n_classes);
    spec.feature_dim = j.value("feature_dim", spec.feature_dim);
    spec.geometry_seed = j.value("geometry_seed", spec.geometry_seed);
    spec.prototype_scale = j.value("prototype_scale", spec.prototype_scale);
    spec.class_noise = j.value("class_noise", spec.class_noise);
    spec.batch_size = j.value("batch_size", spec.batch_size);
    spec.batches_per_segment = j.value("batches_per_segment", spec.batches_per_segment);
    spec.ordering = stream_ordering_from_string(j.value("ordering", to_string(spec.ordering)));
    spec.temporal_correlation = j.value("temporal_correlation", spec.temporal_correlation);
    if (j.contains("segments")) {
        for (const auto& seg : j.at("segments")) {
            SegmentCorruptions list;
            for (const auto& c : seg)
                list.push_back({corruption_kind_from_string(c.at("kind").get<std::string>()), c.at("severity").get<double>(),
                                c.value("variant", 0)});
            spec.segments.push_back(std::move(list));
        }
    } else {
        spec.segments = default_desk_spec().segments;
    }
    validate(spec);
    return spec;
}

void StreamDump::write(std::ostream& out, const StreamSpec& spec, std::uint64_t seed, const Stream& stream) {
    out << nlohmann::json{{"format", "bitta-stream"}, {"version", 1}, {"spec", stream_spec_to_json(spec)}, {"seed", seed},
                          {"batches", stream.size()}}
               .dump()
        << '\n';
    for (const auto& b : stream) {
        nlohmann::json rows = nlohmann::json::array();
        for (Eigen::Index r = 0; r < b.features.rows(); ++r) {
            std::vector<double> row(b.features.row(r).begin(), b.features.row(r).end());
            rows.push_back(std::move(row));
        }
        out << nlohmann::json{{"batch_index", b.batch_index},
                              {"segment_id", b.segment_id},
                              {"ids", b.ids},
                              {"sample_segments", b.sample_segments},
                              {"labels", b.labels.reveal({})},
                              {"features", std::move(rows)}}
                   .dump()
            << '\n';
    }
}

Stream StreamDump::read(std::istream& in, StreamSpec* spec, std::uint64_t* seed) {
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error("stream dump is empty");
    const auto header = nlohmann::json::parse(line);
    if (header.at("format").get<std::string>() != "bitta-stream") throw std::runtime_error("not a stream dump");
    if (spec) *spec = stream_spec_from_json(header.at("spec"));
    if (seed) *seed = header.at("seed").get<std::uint64_t>();
    Stream stream;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto j = nlohmann::json::parse(line);
        StreamBatch b;
        b.batch_index = j.at("batch_index").get<int>();
        b.segment_id = j.at("segment_id").get<int>();
        b.ids = j.at("ids").get<std::vector<SampleId>>();
        b.sample_segments = j.at("sample_segments").get<std::vector<int>>();
        b.labels = HiddenLabels(j.at("labels").get<std::vector<int>>());
        const auto& rows = j.at("features");
        const auto dim = rows.empty() ? Eigen::Index{0} : static_cast<Eigen::Index>(rows.front().size());
        b.features.resize(static_cast<Eigen::Index>(rows.size()), dim);
        for (std::size_t r = 0; r < rows.size(); ++r) {
            const auto v = rows[r].get<std::vector<double>>();
            if (static_cast<Eigen::Index>(v.size()) != dim) throw std::runtime_error("ragged feature rows in stream dump");
            for (Eigen::Index c = 0; c < dim; ++c) b.features(static_cast<Eigen::Index>(r), c) = v[static_cast<std::size_t>(c)];
        }
        stream.push_back(std::move(b));
    }
    if (stream.size() != header.at("batches").get<std::size_t>()) throw std::runtime_error("stream dump is truncated");
    return stream;
}

}  // namespace bitta
