#pragma once

// Small feed-forward classifier: dense -> batch norm -> ELU -> dropout per
// hidden layer, dense output, row-wise softmax. Backpropagation is written out
// by hand for exactly this topology.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "bitta/random.hpp"

namespace bitta {

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
template <typename Scalar>
using RowVector = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

struct Architecture {
    int input_dim = 16;
    std::vector<int> hidden{64, 64};
    int n_classes = 8;
    double bn_eps = 1e-5;

    friend bool operator==(const Architecture&, const Architecture&) = default;
};

template <typename Scalar>
struct DenseParams {
    Matrix<Scalar> weight;  // out x in
    Vector<Scalar> bias;
};

template <typename Scalar>
struct NormAffine {
    Vector<Scalar> gamma;
    Vector<Scalar> beta;
};

template <typename Scalar>
struct Parameters {
    std::vector<DenseParams<Scalar>> dense;  // hidden layers, then the output layer
    std::vector<NormAffine<Scalar>> norm;    // one per hidden layer
};

// A gradient has exactly the layout of the parameters it differentiates.
template <typename Scalar>
using GradientVector = Parameters<Scalar>;

template <typename Scalar>
struct NormStats {
    Vector<Scalar> mean;
    Vector<Scalar> var;
};

enum class BnUsage { UseRunning, UseBatch };

struct ForwardMode {
    std::optional<std::uint64_t> dropout_seed;
    BnUsage bn = BnUsage::UseRunning;

    static ForwardMode deterministic(BnUsage bn = BnUsage::UseRunning) { return {std::nullopt, bn}; }
    static ForwardMode dropout(std::uint64_t seed, BnUsage bn = BnUsage::UseRunning) { return {seed, bn}; }
};

enum class ParameterSubset { All, NormAffine };

// Visits every tensor in a fixed order: dense weights/biases, then BN gamma/beta.
template <typename P, typename F>
void visit_tensors(P& params, F&& f) {
    for (auto& d : params.dense) {
        f(d.weight);
        f(d.bias);
    }
    for (auto& n : params.norm) {
        f(n.gamma);
        f(n.beta);
    }
}

template <typename Scalar, typename F>
void visit_tensor_pairs(Parameters<Scalar>& a, const Parameters<Scalar>& b, ParameterSubset subset, F&& f) {
    if (a.dense.size() != b.dense.size() || a.norm.size() != b.norm.size())
        throw std::invalid_argument("parameter layouts differ in layer count");
    auto check = [](const auto& x, const auto& y) {
        if (x.rows() != y.rows() || x.cols() != y.cols())
            throw std::invalid_argument("parameter tensor shapes differ");
    };
    if (subset == ParameterSubset::All) {
        for (std::size_t i = 0; i < a.dense.size(); ++i) {
            check(a.dense[i].weight, b.dense[i].weight);
            check(a.dense[i].bias, b.dense[i].bias);
            f(a.dense[i].weight, b.dense[i].weight);
            f(a.dense[i].bias, b.dense[i].bias);
        }
    }
    for (std::size_t i = 0; i < a.norm.size(); ++i) {
        check(a.norm[i].gamma, b.norm[i].gamma);
        check(a.norm[i].beta, b.norm[i].beta);
        f(a.norm[i].gamma, b.norm[i].gamma);
        f(a.norm[i].beta, b.norm[i].beta);
    }
}

template <typename Scalar>
std::size_t parameter_count(const Parameters<Scalar>& params) {
    std::size_t n = 0;
    visit_tensors(params, [&](const auto& t) { n += static_cast<std::size_t>(t.size()); });
    return n;
}

// Flat indexing in visit_tensors order.
template <typename Scalar>
Scalar& parameter_coeff(Parameters<Scalar>& params, std::size_t index) {
    Scalar* found = nullptr;
    visit_tensors(params, [&](auto& t) {
        const auto size = static_cast<std::size_t>(t.size());
        if (!found && index < size) found = t.data() + index;
        else if (!found) index -= size;
    });
    if (!found) throw std::out_of_range("parameter index out of range");
    return *found;
}

template <typename Scalar>
Parameters<Scalar> zeros_like(const Parameters<Scalar>& params) {
    Parameters<Scalar> z = params;
    visit_tensors(z, [](auto& t) { t.setZero(); });
    return z;
}

template <typename Scalar>
bool all_finite(const Parameters<Scalar>& params) {
    bool ok = true;
    visit_tensors(params, [&](const auto& t) { ok = ok && t.allFinite(); });
    return ok;
}

template <typename Scalar>
class ModelState {
public:
    // He-normal dense weights, zero biases, identity BN.
    ModelState(Architecture arch, double dropout_rate, std::uint64_t init_seed) : arch_(std::move(arch)) {
        validate_architecture(arch_);
        std::mt19937_64 rng(init_seed);
        int fan_in = arch_.input_dim;
        auto add_dense = [&](int out) {
            std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
            DenseParams<Scalar> d;
            d.weight.resize(out, fan_in);
            for (Eigen::Index c = 0; c < d.weight.cols(); ++c)
                for (Eigen::Index r = 0; r < d.weight.rows(); ++r) d.weight(r, c) = static_cast<Scalar>(dist(rng));
            d.bias = Vector<Scalar>::Zero(out);
            params_.dense.push_back(std::move(d));
            fan_in = out;
        };
        for (int width : arch_.hidden) {
            add_dense(width);
            params_.norm.push_back({Vector<Scalar>::Ones(width), Vector<Scalar>::Zero(width)});
            stats_.push_back({Vector<Scalar>::Zero(width), Vector<Scalar>::Ones(width)});
            dropout_rates_.push_back(dropout_rate);
        }
        add_dense(arch_.n_classes);
        validate();
    }

    ModelState(Architecture arch, Parameters<Scalar> params, std::vector<NormStats<Scalar>> stats,
               std::vector<double> dropout_rates, bool frozen)
        : arch_(std::move(arch)),
          params_(std::move(params)),
          stats_(std::move(stats)),
          dropout_rates_(std::move(dropout_rates)),
          frozen_(frozen) {
        validate_architecture(arch_);
        validate();
    }

    const Architecture& architecture() const noexcept { return arch_; }
    const Parameters<Scalar>& parameters() const noexcept { return params_; }
    // Callers must preserve tensor shapes.
    Parameters<Scalar>& mutable_parameters() noexcept { return params_; }
    const std::vector<NormStats<Scalar>>& norm_stats() const noexcept { return stats_; }
    const std::vector<double>& dropout_rates() const noexcept { return dropout_rates_; }
    bool bn_frozen() const noexcept { return frozen_; }
    std::size_t parameter_count() const { return bitta::parameter_count(params_); }

    void set_bn_frozen(bool frozen) noexcept { frozen_ = frozen; }

    void set_dropout_rate(double rate) {
        check_rate(rate);
        for (auto& r : dropout_rates_) r = rate;
    }

    void set_norm_stats(std::size_t layer, Vector<Scalar> mean, Vector<Scalar> var) {
        auto& s = stats_.at(layer);
        if (mean.size() != s.mean.size() || var.size() != s.var.size())
            throw std::invalid_argument("BN statistics shape mismatch");
        if (!(var.array() > Scalar(0)).all()) throw std::invalid_argument("BN running variance must be positive");
        s.mean = std::move(mean);
        s.var = std::move(var);
    }

private:
    static void check_rate(double rate) {
        if (!(rate >= 0.0 && rate < 1.0)) throw std::invalid_argument("dropout rate must lie in [0, 1)");
    }

    static void validate_architecture(const Architecture& a) {
        if (a.input_dim < 1 || a.n_classes < 2) throw std::invalid_argument("architecture needs input_dim >= 1, n_classes >= 2");
        for (int w : a.hidden)
            if (w < 1) throw std::invalid_argument("hidden widths must be positive");
        if (!(a.bn_eps > 0.0)) throw std::invalid_argument("bn_eps must be positive");
    }

    void validate() const {
        const std::size_t depth = arch_.hidden.size();
        if (params_.dense.size() != depth + 1 || params_.norm.size() != depth || stats_.size() != depth ||
            dropout_rates_.size() != depth)
            throw std::invalid_argument("parameter layout does not match architecture");
        int fan_in = arch_.input_dim;
        for (std::size_t l = 0; l <= depth; ++l) {
            const int out = l < depth ? arch_.hidden[l] : arch_.n_classes;
            const auto& d = params_.dense[l];
            if (d.weight.rows() != out || d.weight.cols() != fan_in || d.bias.size() != out)
                throw std::invalid_argument("dense layer " + std::to_string(l) + " has the wrong shape");
            if (l < depth) {
                const auto& n = params_.norm[l];
                const auto& s = stats_[l];
                if (n.gamma.size() != out || n.beta.size() != out || s.mean.size() != out || s.var.size() != out)
                    throw std::invalid_argument("BN layer " + std::to_string(l) + " has the wrong shape");
                if (!(s.var.array() > Scalar(0)).all()) throw std::invalid_argument("BN running variance must be positive");
                check_rate(dropout_rates_[l]);
            }
            fan_in = out;
        }
    }

    Architecture arch_;
    Parameters<Scalar> params_;
    std::vector<NormStats<Scalar>> stats_;
    std::vector<double> dropout_rates_;
    bool frozen_ = false;
};

template <typename Scalar>
struct HiddenCache {
    Matrix<Scalar> input;
    Matrix<Scalar> normalized;      // xhat
    Matrix<Scalar> pre_activation;  // gamma * xhat + beta
    Matrix<Scalar> mask;            // inverted-dropout multipliers; empty when no dropout
    Vector<Scalar> inv_std;
    bool batch_stats = false;
};

template <typename Scalar>
struct ForwardCache {
    std::vector<HiddenCache<Scalar>> hidden;
    Matrix<Scalar> output_input;
    Matrix<Scalar> probs;
};

namespace detail {

template <typename Scalar>
Matrix<Scalar> softmax_rows(const Matrix<Scalar>& logits) {
    Matrix<Scalar> p = (logits.colwise() - logits.rowwise().maxCoeff()).array().exp().matrix();
    const Vector<Scalar> sums = p.rowwise().sum();
    p.array().colwise() /= sums.array();
    return p;
}

template <typename Scalar>
Matrix<Scalar> dropout_mask(std::uint64_t seed, std::size_t site, Eigen::Index rows, Eigen::Index cols, double rate) {
    const std::uint64_t site_seed = derive_seed(seed, {static_cast<std::uint64_t>(site)});
    const Scalar scale = Scalar(1) / Scalar(1.0 - rate);
    Matrix<Scalar> mask(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r)
        for (Eigen::Index c = 0; c < cols; ++c) {
            const auto cell = static_cast<std::uint64_t>(r) * static_cast<std::uint64_t>(cols) + static_cast<std::uint64_t>(c);
            mask(r, c) = unit_uniform(mix64(site_seed ^ mix64(cell))) >= rate ? scale : Scalar(0);
        }
    return mask;
}

template <typename Scalar>
void check_input(const ModelState<Scalar>& model, const Matrix<Scalar>& inputs) {
    if (inputs.cols() != model.architecture().input_dim)
        throw std::invalid_argument("input has " + std::to_string(inputs.cols()) + " features, model expects " +
                                    std::to_string(model.architecture().input_dim));
    if (inputs.rows() < 1) throw std::invalid_argument("input batch is empty");
    if (!inputs.allFinite()) throw std::invalid_argument("input contains non-finite values");
}

}  // namespace detail

template <typename Scalar>
ForwardCache<Scalar> forward_cached(const ModelState<Scalar>& model, const Matrix<Scalar>& inputs, ForwardMode mode) {
    detail::check_input(model, inputs);
    const bool use_batch = mode.bn == BnUsage::UseBatch && !model.bn_frozen();
    const Eigen::Index n = inputs.rows();
    if (use_batch && n < 2) throw std::invalid_argument("batch-statistics normalization needs at least 2 rows");
    const auto& params = model.parameters();
    const auto eps = static_cast<Scalar>(model.architecture().bn_eps);

    ForwardCache<Scalar> cache;
    cache.hidden.resize(model.architecture().hidden.size());
    Matrix<Scalar> x = inputs;
    for (std::size_t l = 0; l < cache.hidden.size(); ++l) {
        auto& h = cache.hidden[l];
        const auto& dense = params.dense[l];
        const auto& affine = params.norm[l];
        Matrix<Scalar> z = (x * dense.weight.transpose()).rowwise() + dense.bias.transpose();
        h.input = std::move(x);
        RowVector<Scalar> mean;
        if (use_batch) {
            mean = z.colwise().mean();
            const RowVector<Scalar> var = (z.rowwise() - mean).array().square().colwise().mean().matrix();
            h.inv_std = (var.array() + eps).rsqrt().transpose();
        } else {
            const auto& s = model.norm_stats()[l];
            mean = s.mean.transpose();
            h.inv_std = (s.var.array() + eps).rsqrt();
        }
        h.batch_stats = use_batch;
        h.normalized = ((z.rowwise() - mean).array().rowwise() * h.inv_std.transpose().array()).matrix();
        h.pre_activation = ((h.normalized.array().rowwise() * affine.gamma.transpose().array()).rowwise() +
                            affine.beta.transpose().array())
                               .matrix();
        Matrix<Scalar> a = h.pre_activation.unaryExpr([](Scalar v) { return v > Scalar(0) ? v : std::expm1(v); });
        const double rate = model.dropout_rates()[l];
        if (mode.dropout_seed && rate > 0.0) {
            h.mask = detail::dropout_mask<Scalar>(*mode.dropout_seed, l, a.rows(), a.cols(), rate);
            a.array() *= h.mask.array();
        }
        x = std::move(a);
    }
    const auto& out = params.dense.back();
    const Matrix<Scalar> logits = (x * out.weight.transpose()).rowwise() + out.bias.transpose();
    cache.output_input = std::move(x);
    cache.probs = detail::softmax_rows(logits);
    return cache;
}

template <typename Scalar>
Matrix<Scalar> forward(const ModelState<Scalar>& model, const Matrix<Scalar>& inputs, ForwardMode mode) {
    return forward_cached(model, inputs, mode).probs;
}

// Row-wise argmax, ties to the lowest class index.
template <typename Derived>
std::vector<int> argmax_rows(const Eigen::MatrixBase<Derived>& probs) {
    std::vector<int> out(static_cast<std::size_t>(probs.rows()));
    for (Eigen::Index r = 0; r < probs.rows(); ++r) {
        Eigen::Index best = 0;
        for (Eigen::Index c = 1; c < probs.cols(); ++c)
            if (probs(r, c) > probs(r, best)) best = c;
        out[static_cast<std::size_t>(r)] = static_cast<int>(best);
    }
    return out;
}

template <typename Scalar>
std::vector<int> predict(const ModelState<Scalar>& model, const Matrix<Scalar>& inputs) {
    return argmax_rows(forward(model, inputs, ForwardMode::deterministic()));
}

// Gradient of a loss L(probs) given dL/dprobs for one cached pass.
template <typename Scalar>
GradientVector<Scalar> backward(const ModelState<Scalar>& model, const ForwardCache<Scalar>& cache,
                                const Matrix<Scalar>& dprobs) {
    const auto& params = model.parameters();
    const auto& p = cache.probs;
    if (dprobs.rows() != p.rows() || dprobs.cols() != p.cols()) throw std::invalid_argument("dprobs shape mismatch");
    GradientVector<Scalar> g;
    g.dense.resize(params.dense.size());
    g.norm.resize(params.norm.size());

    const Vector<Scalar> inner = (dprobs.array() * p.array()).rowwise().sum();
    Matrix<Scalar> dlogits = (p.array() * (dprobs.colwise() - inner).array()).matrix();
    g.dense.back().weight = dlogits.transpose() * cache.output_input;
    g.dense.back().bias = dlogits.colwise().sum().transpose();
    Matrix<Scalar> dx = dlogits * params.dense.back().weight;

    for (std::size_t li = cache.hidden.size(); li-- > 0;) {
        const auto& h = cache.hidden[li];
        const auto& affine = params.norm[li];
        if (h.mask.size() > 0) dx.array() *= h.mask.array();
        // ELU'(v) = 1 for v > 0, exp(v) otherwise.
        const Matrix<Scalar> dact =
            h.pre_activation.unaryExpr([](Scalar v) { return v > Scalar(0) ? Scalar(1) : std::exp(v); });
        const Matrix<Scalar> dpre = (dx.array() * dact.array()).matrix();
        g.norm[li].gamma = (dpre.array() * h.normalized.array()).colwise().sum().transpose();
        g.norm[li].beta = dpre.colwise().sum().transpose();
        const Matrix<Scalar> dxhat = (dpre.array().rowwise() * affine.gamma.transpose().array()).matrix();
        Matrix<Scalar> dz;
        if (h.batch_stats) {
            const auto n = static_cast<Scalar>(dxhat.rows());
            const RowVector<Scalar> sum_dxhat = dxhat.colwise().sum();
            const RowVector<Scalar> sum_dxhat_xhat = (dxhat.array() * h.normalized.array()).colwise().sum().matrix();
            const Matrix<Scalar> centered =
                ((dxhat * n).rowwise() - sum_dxhat).array() - h.normalized.array().rowwise() * sum_dxhat_xhat.array();
            dz = (centered.array().rowwise() * (h.inv_std.transpose().array() / n)).matrix();
        } else {
            dz = (dxhat.array().rowwise() * h.inv_std.transpose().array()).matrix();
        }
        g.dense[li].weight = dz.transpose() * h.input;
        g.dense[li].bias = dz.colwise().sum().transpose();
        if (li > 0) dx = dz * params.dense[li].weight;
    }
    return g;
}

// A scalar loss over a probability matrix, with its gradient.
template <typename Scalar>
struct ProbLoss {
    Scalar value{};
    Matrix<Scalar> dprobs;
};

template <typename Scalar>
using ProbLossFn = std::function<ProbLoss<Scalar>(const Matrix<Scalar>&)>;

template <typename Scalar>
struct LossGradient {
    Scalar loss{};
    Matrix<Scalar> probs;  // mean over passes
    GradientVector<Scalar> grad;
};

// Evaluates loss(mean_p softmax_p(inputs)) over the given passes and its
// gradient with respect to every parameter. One deterministic pass gives f;
// several dropout passes give the MC-dropout policy.
template <typename Scalar>
LossGradient<Scalar> loss_gradient(const ModelState<Scalar>& model, const Matrix<Scalar>& inputs,
                                   const std::vector<ForwardMode>& passes, const ProbLossFn<Scalar>& loss_fn) {
    if (passes.empty()) throw std::invalid_argument("need at least one forward pass");
    std::vector<ForwardCache<Scalar>> caches;
    caches.reserve(passes.size());
    for (const auto& mode : passes) caches.push_back(forward_cached(model, inputs, mode));
    Matrix<Scalar> mean = caches.front().probs;
    for (std::size_t i = 1; i < caches.size(); ++i) mean += caches[i].probs;
    mean /= static_cast<Scalar>(caches.size());

    ProbLoss<Scalar> loss = loss_fn(mean);
    if (!std::isfinite(static_cast<double>(loss.value))) throw std::domain_error("loss is not finite");
    if (loss.dprobs.rows() != mean.rows() || loss.dprobs.cols() != mean.cols() || !loss.dprobs.allFinite())
        throw std::domain_error("loss gradient is malformed or not finite");
    const Matrix<Scalar> per_pass = loss.dprobs / static_cast<Scalar>(caches.size());

    LossGradient<Scalar> out{loss.value, std::move(mean), backward(model, caches.front(), per_pass)};
    for (std::size_t i = 1; i < caches.size(); ++i) {
        const auto g = backward(model, caches[i], per_pass);
        visit_tensor_pairs(out.grad, g, ParameterSubset::All, [](auto& acc, const auto& x) { acc += x; });
    }
    return out;
}

// running <- (1 - momentum) * running + momentum * batch, per BN layer, using
// the unbiased batch variance. Leaves the model with frozen statistics.
template <typename Scalar>
void update_bn_stats(ModelState<Scalar>& model, const Matrix<Scalar>& batch, double momentum) {
    if (!(momentum >= 0.0 && momentum <= 1.0)) throw std::invalid_argument("BN momentum must lie in [0, 1]");
    detail::check_input(model, batch);
    if (batch.rows() < 2) throw std::invalid_argument("BN statistics need a batch of at least 2 rows");
    ModelState<Scalar> probe = model;
    probe.set_bn_frozen(false);
    const auto cache = forward_cached(probe, batch, ForwardMode::deterministic(BnUsage::UseBatch));
    const auto m = static_cast<Scalar>(momentum);
    const auto n = static_cast<Scalar>(batch.rows());
    const auto& params = model.parameters();
    for (std::size_t l = 0; l < cache.hidden.size(); ++l) {
        const auto& dense = params.dense[l];
        const Matrix<Scalar> z = (cache.hidden[l].input * dense.weight.transpose()).rowwise() + dense.bias.transpose();
        const Vector<Scalar> mean = z.colwise().mean().transpose();
        const Vector<Scalar> var =
            ((z.rowwise() - mean.transpose()).array().square().colwise().sum() / (n - Scalar(1))).matrix().transpose();
        const auto& old = model.norm_stats()[l];
        Vector<Scalar> new_mean = (Scalar(1) - m) * old.mean + m * mean;
        Vector<Scalar> new_var = ((Scalar(1) - m) * old.var + m * var)
                                     .cwiseMax(std::numeric_limits<Scalar>::min());
        model.set_norm_stats(l, std::move(new_mean), std::move(new_var));
    }
    model.set_bn_frozen(true);
}

// theta <- theta - lr * (grad + weight_decay * theta). BN running statistics
// are not parameters and are never touched.
template <typename Scalar>
void sgd_step(ModelState<Scalar>& model, const GradientVector<Scalar>& grad, double lr, double weight_decay,
              ParameterSubset subset = ParameterSubset::All) {
    if (!(lr > 0.0)) throw std::invalid_argument("learning rate must be positive");
    if (!(weight_decay >= 0.0)) throw std::invalid_argument("weight decay must be non-negative");
    if (!all_finite(grad)) throw std::domain_error("gradient has non-finite entries");
    const auto eta = static_cast<Scalar>(lr);
    const auto wd = static_cast<Scalar>(weight_decay);
    visit_tensor_pairs(model.mutable_parameters(), grad, subset,
                       [&](auto& p, const auto& g) { p -= eta * (g + wd * p); });
}

using Model = ModelState<double>;
using MatrixXd = Matrix<double>;
using VectorXd = Vector<double>;

}  // namespace bitta
