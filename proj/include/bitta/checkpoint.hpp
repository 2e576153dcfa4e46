#pragma once

// Versioned JSON checkpoints. Doubles are written in shortest round-trip
// form, so save -> load reproduces every parameter bit for bit.

#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "bitta/nn.hpp"

namespace bitta {

inline constexpr const char* kCheckpointFormat = "bitta-checkpoint";
inline constexpr int kCheckpointVersion = 1;

namespace detail {

template <typename Derived>
nlohmann::json tensor_to_json(const Eigen::MatrixBase<Derived>& t) {
    std::vector<double> data;
    data.reserve(static_cast<std::size_t>(t.size()));
    for (Eigen::Index c = 0; c < t.cols(); ++c)
        for (Eigen::Index r = 0; r < t.rows(); ++r) data.push_back(static_cast<double>(t(r, c)));
    return {{"rows", t.rows()}, {"cols", t.cols()}, {"data", std::move(data)}};
}

template <typename Scalar, int Cols>
Eigen::Matrix<Scalar, Eigen::Dynamic, Cols> tensor_from_json(const nlohmann::json& j) {
    const auto rows = j.at("rows").get<Eigen::Index>();
    const auto cols = j.at("cols").get<Eigen::Index>();
    const auto& data = j.at("data");
    if (rows < 0 || cols < 0 || static_cast<Eigen::Index>(data.size()) != rows * cols)
        throw std::runtime_error("checkpoint tensor has inconsistent shape");
    if (Cols == 1 && cols != 1) throw std::runtime_error("checkpoint vector has more than one column");
    Eigen::Matrix<Scalar, Eigen::Dynamic, Cols> t(rows, cols);
    std::size_t k = 0;
    for (Eigen::Index c = 0; c < cols; ++c)
        for (Eigen::Index r = 0; r < rows; ++r) t(r, c) = static_cast<Scalar>(data[k++].get<double>());
    return t;
}

}  // namespace detail

inline nlohmann::json architecture_to_json(const Architecture& a) {
    return {{"input_dim", a.input_dim}, {"hidden", a.hidden}, {"n_classes", a.n_classes}, {"bn_eps", a.bn_eps}};
}

inline Architecture architecture_from_json(const nlohmann::json& j) {
    Architecture a;
    a.input_dim = j.at("input_dim").get<int>();
    a.hidden = j.at("hidden").get<std::vector<int>>();
    a.n_classes = j.at("n_classes").get<int>();
    a.bn_eps = j.at("bn_eps").get<double>();
    return a;
}

template <typename Scalar>
nlohmann::json model_to_json(const ModelState<Scalar>& model) {
    nlohmann::json dense = nlohmann::json::array();
    for (const auto& d : model.parameters().dense)
        dense.push_back({{"weight", detail::tensor_to_json(d.weight)}, {"bias", detail::tensor_to_json(d.bias)}});
    nlohmann::json norm = nlohmann::json::array();
    for (std::size_t l = 0; l < model.parameters().norm.size(); ++l) {
        const auto& a = model.parameters().norm[l];
        const auto& s = model.norm_stats()[l];
        norm.push_back({{"gamma", detail::tensor_to_json(a.gamma)},
                        {"beta", detail::tensor_to_json(a.beta)},
                        {"running_mean", detail::tensor_to_json(s.mean)},
                        {"running_var", detail::tensor_to_json(s.var)}});
    }
    return {{"format", kCheckpointFormat},
            {"version", kCheckpointVersion},
            {"architecture", architecture_to_json(model.architecture())},
            {"dropout_rates", model.dropout_rates()},
            {"bn_frozen", model.bn_frozen()},
            {"dense", std::move(dense)},
            {"norm", std::move(norm)}};
}

template <typename Scalar>
ModelState<Scalar> model_from_json(const nlohmann::json& j) {
    if (j.at("format").get<std::string>() != kCheckpointFormat) throw std::runtime_error("not a bitta checkpoint");
    if (const int v = j.at("version").get<int>(); v != kCheckpointVersion)
        throw std::runtime_error("unsupported checkpoint version " + std::to_string(v));
    Parameters<Scalar> params;
    std::vector<NormStats<Scalar>> stats;
    for (const auto& d : j.at("dense"))
        params.dense.push_back({detail::tensor_from_json<Scalar, Eigen::Dynamic>(d.at("weight")),
                                detail::tensor_from_json<Scalar, 1>(d.at("bias"))});
    for (const auto& n : j.at("norm")) {
        params.norm.push_back(
            {detail::tensor_from_json<Scalar, 1>(n.at("gamma")), detail::tensor_from_json<Scalar, 1>(n.at("beta"))});
        stats.push_back({detail::tensor_from_json<Scalar, 1>(n.at("running_mean")),
                         detail::tensor_from_json<Scalar, 1>(n.at("running_var"))});
    }
    return ModelState<Scalar>(architecture_from_json(j.at("architecture")), std::move(params), std::move(stats),
                              j.at("dropout_rates").get<std::vector<double>>(), j.at("bn_frozen").get<bool>());
}

template <typename Scalar>
void save_checkpoint(const ModelState<Scalar>& model, const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
    out << model_to_json(model).dump() << '\n';
}

template <typename Scalar = double>
ModelState<Scalar> load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read checkpoint " + path.string());
    return model_from_json<Scalar>(nlohmann::json::parse(in));
}

}  // namespace bitta
