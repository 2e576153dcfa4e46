#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

#include <Eigen/Core>

namespace bitta {

using SampleId = std::uint64_t;

inline constexpr int kFeedbackCorrect = 1;
inline constexpr int kFeedbackIncorrect = -1;

class OracleFailure : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Answers whether `predicted_label` is the right class for a sample:
// +1 correct, -1 incorrect. Throws OracleFailure when it cannot answer.
class FeedbackOracle {
public:
    virtual ~FeedbackOracle() = default;
    virtual int query(SampleId sample_id, const Eigen::Ref<const Eigen::RowVectorXd>& features,
                      int predicted_label) = 0;
};

}  // namespace bitta
