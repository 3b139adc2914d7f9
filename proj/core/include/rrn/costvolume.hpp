#pragma once

#include "rrn/tape.hpp"
#include "rrn/tensor.hpp"

#include <string>
#include <vector>

namespace rrn::cost {

/// Shape of the displacement neighbourhood searched by the cost volume.
enum class Neighborhood { l1, linf };
/// Scope of the mean/std used to standardize features before correlation.
enum class NormStats { per_map, per_channel };

std::string to_string(Neighborhood n);
Neighborhood parse_neighborhood(const std::string& s);
std::string to_string(NormStats n);
NormStats parse_norm_stats(const std::string& s);

struct Offset {
    int dz = 0;
    int dy = 0;
    int dx = 0;
    friend bool operator==(const Offset&, const Offset&) = default;
};

/// Integer offsets with |i|_1 <= r (or |i|_inf <= r), lexicographic in (dz, dy, dx).
std::vector<Offset> neighborhood_offsets(int radius, Neighborhood norm);

template <typename T>
struct CostVolume {
    Tensor<T> data;  ///< (K, z, y, x)
    std::vector<Offset> offsets;
    int radius = 0;
    Neighborhood norm = Neighborhood::l1;
};

constexpr double kNormEps = 1e-6;

/// (f - mean) / (std + eps); population statistics.
template <typename T>
Tensor<T> normalize_features(const Tensor<T>& f, NormStats stats = NormStats::per_map);
template <typename T>
void normalize_features_backward(const Tensor<T>& f, const Tensor<T>& gout, NormStats stats, Tensor<T>& gf);

/// C(x, i) = <f_warped(x), f_fix(x + i)> / channels; out-of-bounds neighbours contribute 0.
template <typename T>
CostVolume<T> correlate(const Tensor<T>& f_warped, const Tensor<T>& f_fix, int radius, Neighborhood norm);

/// Reference version of correlate: plain per-voxel loops, no row blocking.
template <typename T>
CostVolume<T> correlate_naive(const Tensor<T>& f_warped, const Tensor<T>& f_fix, int radius, Neighborhood norm);

template <typename T>
void correlate_backward(const Tensor<T>& f_warped, const Tensor<T>& f_fix, const std::vector<Offset>& offsets,
                        const Tensor<T>& gout, Tensor<T>* g_warped, Tensor<T>* g_fix);

template <typename T>
diff::Var normalize(diff::Tape<T>& tape, diff::Var f, NormStats stats);
template <typename T>
diff::Var correlate(diff::Tape<T>& tape, diff::Var f_warped, diff::Var f_fix, int radius, Neighborhood norm);

}  // namespace rrn::cost
