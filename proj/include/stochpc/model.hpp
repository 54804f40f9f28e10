#pragma once

#include "stochpc/numkit.hpp"
#include "stochpc/plant.hpp"

namespace stochpc {

/// Noisy state-space model x+ = A x + B u + w, y = C x + D u + v with
/// Var[w] = Sw and Var[v] = Sv. Both the true plant and the data-built
/// auxiliary realization are carried in this shape.
struct StateSpaceModel {
    Mat A, B, C, D, Sw, Sv;

    Eigen::Index s() const { return A.rows(); }
    Eigen::Index m() const { return B.cols(); }
    Eigen::Index p() const { return C.rows(); }

    void validate() const {
        const auto n = s();
        if (A.cols() != n || B.rows() != n || C.cols() != n || D.rows() != p() || D.cols() != m() ||
            Sw.rows() != n || Sw.cols() != n || Sv.rows() != p() || Sv.cols() != p())
            throw DimensionError("StateSpaceModel: inconsistent dimensions");
        if (!A.allFinite() || !B.allFinite() || !C.allFinite() || !D.allFinite() || !Sw.allFinite() ||
            !Sv.allFinite())
            throw InputError("StateSpaceModel: non-finite entries");
        Eigen::LLT<Mat> pd(numkit::symmetrize(Sv));
        if (pd.info() != Eigen::Success) throw InputError("StateSpaceModel: Sv must be positive definite");
    }

    static StateSpaceModel from_plant(const plant::LTISystem& sys, Mat Sw, Mat Sv) {
        return {sys.A, sys.B, sys.C, sys.D, std::move(Sw), std::move(Sv)};
    }
};

} // namespace stochpc
