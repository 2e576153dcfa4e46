#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

#include "bitta/nn.hpp"

namespace bitta {

inline constexpr double kDefaultProbClip = 1e-6;

namespace detail {

template <typename Derived>
void check_label(const Eigen::MatrixBase<Derived>& probs, int label) {
    if (label < 0 || label >= static_cast<int>(probs.size()))
        throw std::out_of_range("label " + std::to_string(label) + " outside [0, " + std::to_string(probs.size()) + ")");
}

template <typename Scalar>
Scalar clip_prob(Scalar p, double eps) {
    return std::clamp(p, static_cast<Scalar>(eps), static_cast<Scalar>(1.0 - eps));
}

// d/dp log(clip(p)); zero where the clip is active.
template <typename Scalar>
Scalar dlog_clip(Scalar p, double eps) {
    return (p > static_cast<Scalar>(eps) && p < static_cast<Scalar>(1.0 - eps)) ? Scalar(1) / p : Scalar(0);
}

}  // namespace detail

// -log(clip(p[label]))
template <typename Derived>
typename Derived::Scalar cross_entropy(const Eigen::MatrixBase<Derived>& probs, int label,
                                       double eps = kDefaultProbClip) {
    detail::check_label(probs, label);
    return -std::log(detail::clip_prob(probs(label), eps));
}

// -log(clip(1 - p[label])); used on samples whose predicted label is known wrong.
template <typename Derived>
typename Derived::Scalar complementary_cross_entropy(const Eigen::MatrixBase<Derived>& probs, int label,
                                                     double eps = kDefaultProbClip) {
    detail::check_label(probs, label);
    using Scalar = typename Derived::Scalar;
    return -std::log(detail::clip_prob(Scalar(1) - probs(label), eps));
}

// Shannon entropy in nats; 0 * log 0 taken as 0.
template <typename Derived>
typename Derived::Scalar entropy(const Eigen::MatrixBase<Derived>& probs) {
    using Scalar = typename Derived::Scalar;
    Scalar h = 0;
    for (Eigen::Index i = 0; i < probs.size(); ++i)
        if (probs(i) > Scalar(0)) h -= probs(i) * std::log(probs(i));
    return h;
}

// sum_i weight_i * -log(clip(p_i[label_i])). A negative weight turns the row
// into a +log term, which is how negative rewards enter.
template <typename Scalar>
ProbLossFn<Scalar> weighted_nll(std::vector<int> labels, std::vector<Scalar> weights, double eps = kDefaultProbClip) {
    if (labels.size() != weights.size()) throw std::invalid_argument("labels and weights differ in length");
    return [labels = std::move(labels), weights = std::move(weights), eps](const Matrix<Scalar>& probs) {
        if (static_cast<std::size_t>(probs.rows()) != labels.size())
            throw std::invalid_argument("probability rows and labels differ in length");
        ProbLoss<Scalar> out{Scalar(0), Matrix<Scalar>::Zero(probs.rows(), probs.cols())};
        for (Eigen::Index r = 0; r < probs.rows(); ++r) {
            const auto i = static_cast<std::size_t>(r);
            const auto row = probs.row(r);
            out.value += weights[i] * cross_entropy(row, labels[i], eps);
            out.dprobs(r, labels[i]) = -weights[i] * detail::dlog_clip(probs(r, labels[i]), eps);
        }
        return out;
    };
}

// Mean entropy over rows + mean CE over `correct_rows` + mean CCE over
// `incorrect_rows`, with `labels` the predicted classes. Empty groups add 0.
template <typename Scalar>
ProbLossFn<Scalar> entropy_feedback_loss(std::vector<int> labels, std::vector<int> correct_rows,
                                         std::vector<int> incorrect_rows, double eps = kDefaultProbClip) {
    return [=](const Matrix<Scalar>& probs) {
        const Eigen::Index n = probs.rows();
        ProbLoss<Scalar> out{Scalar(0), Matrix<Scalar>::Zero(n, probs.cols())};
        const Scalar tiny = std::numeric_limits<Scalar>::min();
        for (Eigen::Index r = 0; r < n; ++r) {
            out.value += entropy(probs.row(r)) / Scalar(n);
            for (Eigen::Index c = 0; c < probs.cols(); ++c)
                out.dprobs(r, c) -= (std::log(std::max(probs(r, c), tiny)) + Scalar(1)) / Scalar(n);
        }
        for (int r : correct_rows) {
            const auto scale = Scalar(1) / Scalar(correct_rows.size());
            const int y = labels.at(static_cast<std::size_t>(r));
            out.value += scale * cross_entropy(probs.row(r), y, eps);
            out.dprobs(r, y) -= scale * detail::dlog_clip(probs(r, y), eps);
        }
        for (int r : incorrect_rows) {
            const auto scale = Scalar(1) / Scalar(incorrect_rows.size());
            const int y = labels.at(static_cast<std::size_t>(r));
            out.value += scale * complementary_cross_entropy(probs.row(r), y, eps);
            // d/dp -log(clip(1 - p)) = +1/(1 - p) inside the clip range
            out.dprobs(r, y) += scale * detail::dlog_clip(Scalar(1) - probs(r, y), eps);
        }
        return out;
    };
}

}  // namespace bitta
