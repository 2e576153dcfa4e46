#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "bitta/engine.hpp"
#include "bitta/nn.hpp"
#include "bitta/oracle.hpp"

namespace bitta::test {

inline Architecture tiny_architecture() {
    Architecture a;
    a.input_dim = 4;
    a.hidden = {8, 8};
    a.n_classes = 3;
    return a;
}

// Tiny model with non-trivial BN affine parameters and running statistics.
inline Model tiny_model(std::uint64_t seed, double dropout_rate = 0.3) {
    Model m(tiny_architecture(), dropout_rate, seed);
    std::mt19937_64 rng(seed ^ 0x5eedULL);
    std::uniform_real_distribution<double> u(0.5, 1.5);
    std::normal_distribution<double> n(0.0, 0.2);
    for (auto& norm : m.mutable_parameters().norm) {
        for (Eigen::Index i = 0; i < norm.gamma.size(); ++i) {
            norm.gamma(i) = u(rng);
            norm.beta(i) = n(rng);
        }
    }
    for (std::size_t l = 0; l < m.norm_stats().size(); ++l) {
        const auto width = m.norm_stats()[l].mean.size();
        VectorXd mean(width), var(width);
        for (Eigen::Index i = 0; i < width; ++i) {
            mean(i) = n(rng);
            var(i) = u(rng);
        }
        m.set_norm_stats(l, mean, var);
    }
    return m;
}

inline MatrixXd random_inputs(Eigen::Index rows, Eigen::Index cols, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n;
    MatrixXd x(rows, cols);
    for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = n(rng);
    return x;
}

struct GradientCheck {
    std::size_t checked = 0;
    double max_relative_error = 0.0;
};

// Central differences with step h on every parameter coefficient (or the
// first `limit`). Relative error uses max(|analytic|, |numeric|, floor) in
// the denominator so that exactly-zero gradients compare on absolute terms.
inline GradientCheck finite_difference_check(const Model& model, const GradientVector<double>& analytic,
                                             const std::function<double(const Model&)>& loss, double h = 1e-4,
                                             double floor = 1e-6) {
    GradientCheck out;
    Model probe = model;
    auto grad = analytic;
    const std::size_t n = parameter_count(probe.parameters());
    for (std::size_t i = 0; i < n; ++i) {
        double& p = parameter_coeff(probe.mutable_parameters(), i);
        const double saved = p;
        p = saved + h;
        const double up = loss(probe);
        p = saved - h;
        const double down = loss(probe);
        p = saved;
        const double numeric = (up - down) / (2.0 * h);
        const double a = parameter_coeff(grad, i);
        const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
        out.max_relative_error = std::max(out.max_relative_error, rel);
        ++out.checked;
    }
    return out;
}

// Answers from a fixed table keyed by sample id; fails on anything else.
class TableOracle : public FeedbackOracle {
public:
    explicit TableOracle(std::function<int(SampleId, int)> answer) : answer_(std::move(answer)) {}
    int query(SampleId id, const Eigen::Ref<const Eigen::RowVectorXd>&, int predicted) override {
        ++queries;
        return answer_(id, predicted);
    }
    std::size_t queries = 0;

private:
    std::function<int(SampleId, int)> answer_;
};

class FailingOracle : public FeedbackOracle {
public:
    explicit FailingOracle(std::size_t fail_at) : fail_at_(fail_at) {}
    int query(SampleId, const Eigen::Ref<const Eigen::RowVectorXd>&, int) override {
        if (calls_++ == fail_at_) throw OracleFailure("annotator unavailable");
        return kFeedbackCorrect;
    }

private:
    std::size_t fail_at_;
    std::size_t calls_ = 0;
};

inline bool same_parameters(const Model& a, const Model& b) {
    const auto& pa = a.parameters();
    const auto& pb = b.parameters();
    if (parameter_count(pa) != parameter_count(pb)) return false;
    auto ca = pa;
    auto cb = pb;
    for (std::size_t i = 0; i < parameter_count(pa); ++i)
        if (parameter_coeff(ca, i) != parameter_coeff(cb, i)) return false;
    for (std::size_t l = 0; l < a.norm_stats().size(); ++l)
        if (a.norm_stats()[l].mean != b.norm_stats()[l].mean || a.norm_stats()[l].var != b.norm_stats()[l].var)
            return false;
    return true;
}

}  // namespace bitta::test
