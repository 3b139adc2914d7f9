#pragma once

#include "rrn/costvolume.hpp"
#include "rrn/ops.hpp"

#include <array>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace rrn::net {

enum class Mode { cost_volume, feature_concat };
std::string to_string(Mode m);
Mode parse_mode(const std::string& s);

inline constexpr int kLevels = 4;
inline constexpr std::array<int, 4> kPyramidChannels{16, 32, 64, 96};
inline constexpr std::array<int, 5> kDenseChannels{128, 128, 96, 64, 32};
inline constexpr std::array<int, 7> kFinalChannels{128, 128, 128, 96, 64, 32, 3};
inline constexpr std::array<int, 7> kFinalDilations{1, 2, 4, 8, 16, 1, 1};
inline constexpr int kContextChannels = 32;

/// Architecture switches that change parameter shapes or the forward graph.
struct ArchConfig {
    int radius = 2;
    cost::Neighborhood neighborhood = cost::Neighborhood::l1;
    Mode mode = Mode::cost_volume;
    cost::NormStats norm_stats = cost::NormStats::per_map;
    double slope = 0.1;
    diff::Padding padding = diff::Padding::zeros;

    /// Number of matching channels fed to an estimator at a level with `feat` feature channels.
    [[nodiscard]] int matching_channels(int feat) const;
    /// Estimator input channels at pyramid level 1..4.
    [[nodiscard]] int estimator_input(int level) const;
};

struct ParamInfo {
    std::string name;
    std::vector<int> shape;
    [[nodiscard]] std::size_t count() const;
};

/// All learnable weights. The pyramid is one weight set shared by both
/// images; every estimator owns its weights.
template <typename T>
struct ModelParams {
    ArchConfig arch;
    /// [level-1][layer]: stride-2 conv then two stride-1 convs per level.
    std::array<std::array<diff::ConvWeights<T>, 3>, kLevels> pyramid;
    /// Estimators for levels 4, 3, 2 (index 0, 1, 2): five dense layers then
    /// the 3-channel prediction layer.
    std::array<std::array<diff::ConvWeights<T>, 6>, 3> estimators;
    std::array<diff::ConvWeights<T>, 7> final_estimator;

    /// Allocates zero weights with the shapes implied by `arch`.
    static ModelParams zeros(const ArchConfig& arch);

    [[nodiscard]] std::vector<ParamInfo> manifest() const;
    /// Visits every weight and bias buffer in manifest order.
    void for_each(const std::function<void(const std::string&, std::span<T>)>& fn);
    void for_each(const std::function<void(const std::string&, std::span<const T>)>& fn) const;
    [[nodiscard]] std::size_t parameter_count() const;

    template <typename U>
    [[nodiscard]] ModelParams<U> cast() const;
};

/// Estimator array slot for pyramid level 4, 3 or 2.
inline int estimator_slot(int level) { return kLevels - level; }

/// Fan-in scaled uniform init from a counter-based stream; output layers that
/// emit displacements start at zero unless `zero_output` is false.
template <typename T>
ModelParams<T> init_params(std::uint64_t seed, const ArchConfig& arch, bool zero_output = true);

/// Deterministic uniform [0,1) stream independent of the standard library.
class SplitMix64 {
  public:
    explicit SplitMix64(std::uint64_t seed) : state_(seed) {}
    std::uint64_t next();
    double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }
    double normal();

  private:
    std::uint64_t state_;
};

}  // namespace rrn::net
