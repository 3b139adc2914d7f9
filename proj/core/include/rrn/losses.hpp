#pragma once

#include "rrn/tape.hpp"
#include "rrn/tensor.hpp"

#include <vector>

namespace rrn::loss {

constexpr double kLccEps = 1e-5;
constexpr double kTvDelta = 1e-6;

struct LossValue {
    double total = 0.0;
    double lcc = 0.0;  ///< mean per-voxel squared correlation coefficient
    double tv = 0.0;
    double lambda = 0.0;
};

/// Per-voxel squared Pearson coefficient over the (border-clipped) cubic window
/// centred at each voxel: cross^2 / (var_f * var_w + eps).
template <typename T>
std::vector<double> lcc_map(const Tensor<T>& fixed, const Tensor<T>& warped, int window);

/// Sum of lcc_map over the grid.
template <typename T>
double lcc(const Tensor<T>& fixed, const Tensor<T>& warped, int window);

/// Adds d(scale * lcc)/d(warped) to `gw`.
template <typename T>
void lcc_backward(const Tensor<T>& fixed, const Tensor<T>& warped, int window, double scale, Tensor<T>& gw);

/// Mean smoothed absolute forward difference over voxels, axes and channels.
/// Differences across the far boundary are omitted but still counted in the 1/(9|grid|) factor.
template <typename T>
double tv(const Tensor<T>& d);
template <typename T>
void tv_backward(const Tensor<T>& d, double scale, Tensor<T>& gd);

/// total = -lcc/|grid| + lambda * tv.
template <typename T>
LossValue total_loss(const Tensor<T>& fixed, const Tensor<T>& warped, const Tensor<T>& dvf, double lambda, int window);

/// Recorded variants. `fixed` is treated as a constant.
template <typename T>
diff::Var lcc_mean(diff::Tape<T>& tape, diff::Var fixed, diff::Var warped, int window);
template <typename T>
diff::Var tv(diff::Tape<T>& tape, diff::Var d);

template <typename T>
struct RecordedLoss {
    diff::Var total;
    LossValue value;
};

template <typename T>
RecordedLoss<T> total_loss(diff::Tape<T>& tape, diff::Var fixed, diff::Var warped, diff::Var dvf, double lambda,
                           int window);

}  // namespace rrn::loss
