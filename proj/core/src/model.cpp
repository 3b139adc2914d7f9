#include "rrn/model.hpp"

#include <cmath>
#include <numbers>

namespace rrn::net {

std::string to_string(Mode m) { return m == Mode::cost_volume ? "cost_volume" : "feature_concat"; }

Mode parse_mode(const std::string& s) {
    if (s == "cost_volume") return Mode::cost_volume;
    if (s == "feature_concat") return Mode::feature_concat;
    throw ValidationError("unknown mode `" + s + "` (expected cost_volume or feature_concat)");
}

int ArchConfig::matching_channels(int feat) const {
    if (mode == Mode::feature_concat) return 2 * feat;
    return static_cast<int>(cost::neighborhood_offsets(radius, neighborhood).size());
}

int ArchConfig::estimator_input(int level) const {
    const int feat = kPyramidChannels[level - 1];
    const int base = matching_channels(feat) + feat;
    return level == kLevels ? base : base + 3 + kContextChannels;
}

std::size_t ParamInfo::count() const {
    std::size_t n = 1;
    for (int s : shape) n *= static_cast<std::size_t>(s);
    return n;
}

template <typename T>
ModelParams<T> ModelParams<T>::zeros(const ArchConfig& arch) {
    ModelParams p;
    p.arch = arch;
    int cin = 1;
    for (int l = 0; l < kLevels; ++l) {
        const int c = kPyramidChannels[l];
        p.pyramid[l][0] = diff::ConvWeights<T>(cin, c, 2, 1);
        p.pyramid[l][1] = diff::ConvWeights<T>(c, c, 1, 1);
        p.pyramid[l][2] = diff::ConvWeights<T>(c, c, 1, 1);
        cin = c;
    }
    for (int level = kLevels; level >= 2; --level) {
        auto& est = p.estimators[estimator_slot(level)];
        const int in = arch.estimator_input(level);
        int acc = in;
        for (int i = 0; i < 5; ++i) {
            est[i] = diff::ConvWeights<T>(acc, kDenseChannels[i], 1, 1);
            acc += kDenseChannels[i];
        }
        est[5] = diff::ConvWeights<T>(kDenseChannels[4], 3, 1, 1);
    }
    int fin = arch.estimator_input(1);
    for (int i = 0; i < 7; ++i) {
        p.final_estimator[i] = diff::ConvWeights<T>(fin, kFinalChannels[i], 1, kFinalDilations[i]);
        fin = kFinalChannels[i];
    }
    return p;
}

namespace {

template <typename P, typename Fn>
void visit_convs(P& p, Fn&& fn) {
    for (int l = 0; l < kLevels; ++l)
        for (int i = 0; i < 3; ++i) fn("pyramid.l" + std::to_string(l + 1) + ".conv" + std::to_string(i), p.pyramid[l][i]);
    for (int level = kLevels; level >= 2; --level) {
        auto& est = p.estimators[estimator_slot(level)];
        const std::string prefix = "estimator.l" + std::to_string(level) + ".";
        for (int i = 0; i < 5; ++i) fn(prefix + "dense" + std::to_string(i), est[i]);
        fn(prefix + "predict", est[5]);
    }
    for (int i = 0; i < 7; ++i) fn("final.conv" + std::to_string(i), p.final_estimator[i]);
}

}  // namespace

template <typename T>
std::vector<ParamInfo> ModelParams<T>::manifest() const {
    std::vector<ParamInfo> out;
    visit_convs(*this, [&](const std::string& name, const diff::ConvWeights<T>& c) {
        out.push_back({name + ".weight", {c.cout, c.cin, 3, 3, 3}});
        out.push_back({name + ".bias", {c.cout}});
    });
    return out;
}

template <typename T>
void ModelParams<T>::for_each(const std::function<void(const std::string&, std::span<T>)>& fn) {
    visit_convs(*this, [&](const std::string& name, diff::ConvWeights<T>& c) {
        fn(name + ".weight", std::span<T>(c.weight));
        fn(name + ".bias", std::span<T>(c.bias));
    });
}

template <typename T>
void ModelParams<T>::for_each(const std::function<void(const std::string&, std::span<const T>)>& fn) const {
    visit_convs(*this, [&](const std::string& name, const diff::ConvWeights<T>& c) {
        fn(name + ".weight", std::span<const T>(c.weight));
        fn(name + ".bias", std::span<const T>(c.bias));
    });
}

template <typename T>
std::size_t ModelParams<T>::parameter_count() const {
    std::size_t n = 0;
    for (const auto& info : manifest()) n += info.count();
    return n;
}

template <typename T>
template <typename U>
ModelParams<U> ModelParams<T>::cast() const {
    auto out = ModelParams<U>::zeros(arch);
    std::vector<std::span<const T>> src;
    for_each([&](const std::string&, std::span<const T> s) { src.push_back(s); });
    std::size_t k = 0;
    out.for_each([&](const std::string&, std::span<U> dst) {
        const auto s = src[k++];
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<U>(s[i]);
    });
    return out;
}

std::uint64_t SplitMix64::next() {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ull);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

double SplitMix64::normal() {
    // Box-Muller; uniform() may return 0, so shift into (0, 1].
    const double u1 = 1.0 - uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

template <typename T>
ModelParams<T> init_params(std::uint64_t seed, const ArchConfig& arch, bool zero_output) {
    auto p = ModelParams<T>::zeros(arch);
    SplitMix64 rng(seed);
    const double gain = std::sqrt(6.0 / (1.0 + arch.slope * arch.slope));
    auto fill = [&](diff::ConvWeights<T>& c) {
        const double bound = gain / std::sqrt(static_cast<double>(c.fan_in()));
        for (auto& w : c.weight) w = static_cast<T>((2.0 * rng.uniform() - 1.0) * bound);
    };
    for (auto& level : p.pyramid)
        for (auto& c : level) fill(c);
    for (auto& est : p.estimators)
        for (auto& c : est) fill(c);
    for (auto& c : p.final_estimator) fill(c);
    if (zero_output) {
        for (auto& est : p.estimators) {
            std::fill(est[5].weight.begin(), est[5].weight.end(), T(0));
            std::fill(est[5].bias.begin(), est[5].bias.end(), T(0));
        }
        auto& last = p.final_estimator[6];
        std::fill(last.weight.begin(), last.weight.end(), T(0));
        std::fill(last.bias.begin(), last.bias.end(), T(0));
    }
    return p;
}

template struct ModelParams<float>;
template struct ModelParams<double>;
template ModelParams<double> ModelParams<float>::cast<double>() const;
template ModelParams<float> ModelParams<double>::cast<float>() const;
template ModelParams<float> ModelParams<float>::cast<float>() const;
template ModelParams<double> ModelParams<double>::cast<double>() const;
template ModelParams<float> init_params(std::uint64_t, const ArchConfig&, bool);
template ModelParams<double> init_params(std::uint64_t, const ArchConfig&, bool);

}  // namespace rrn::net
