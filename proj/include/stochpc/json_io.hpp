#pragma once

#include <json.hpp>

#include "stochpc/numkit.hpp"

namespace stochpc::json_io {

using json = nlohmann::json;

/// {"rows": r, "cols": c, "data": [row-major entries]}
inline json mat_to_json(const Mat& M) {
    json data = json::array();
    for (Eigen::Index i = 0; i < M.rows(); ++i)
        for (Eigen::Index j = 0; j < M.cols(); ++j) data.push_back(M(i, j));
    return {{"rows", M.rows()}, {"cols", M.cols()}, {"data", std::move(data)}};
}

inline Mat mat_from_json(const json& j) {
    const auto r = j.at("rows").get<Eigen::Index>(), c = j.at("cols").get<Eigen::Index>();
    const auto& data = j.at("data");
    if (r < 0 || c < 0 || static_cast<Eigen::Index>(data.size()) != r * c)
        throw InputError("matrix JSON: data length does not match rows x cols");
    Mat M(r, c);
    for (Eigen::Index i = 0; i < r; ++i)
        for (Eigen::Index j2 = 0; j2 < c; ++j2) M(i, j2) = data[static_cast<std::size_t>(i * c + j2)].get<double>();
    return M;
}

/// Nested row arrays [[...], [...]]; a bare number is read as 1x1 and a flat
/// array as a column vector.
inline Mat mat_from_rows(const json& j) {
    if (j.is_number()) return Mat::Constant(1, 1, j.get<double>());
    if (!j.is_array()) throw InputError("expected a matrix as nested arrays");
    if (j.empty()) return Mat(0, 0);
    if (!j.front().is_array()) {
        Mat v(static_cast<Eigen::Index>(j.size()), 1);
        for (std::size_t i = 0; i < j.size(); ++i) v(static_cast<Eigen::Index>(i), 0) = j[i].get<double>();
        return v;
    }
    const auto r = static_cast<Eigen::Index>(j.size());
    const auto c = static_cast<Eigen::Index>(j.front().size());
    Mat M(r, c);
    for (Eigen::Index i = 0; i < r; ++i) {
        const auto& row = j[static_cast<std::size_t>(i)];
        if (!row.is_array() || static_cast<Eigen::Index>(row.size()) != c)
            throw InputError("matrix rows must all have the same length");
        for (Eigen::Index k = 0; k < c; ++k) M(i, k) = row[static_cast<std::size_t>(k)].get<double>();
    }
    return M;
}

inline json mat_to_rows(const Mat& M) {
    json out = json::array();
    for (Eigen::Index i = 0; i < M.rows(); ++i) {
        json row = json::array();
        for (Eigen::Index j = 0; j < M.cols(); ++j) row.push_back(M(i, j));
        out.push_back(std::move(row));
    }
    return out;
}

} // namespace stochpc::json_io
