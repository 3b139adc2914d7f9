#pragma once

#include "rrn/model.hpp"
#include "rrn/tape.hpp"
#include "rrn/voldata.hpp"

#include <array>
#include <string>
#include <utility>
#include <vector>

namespace rrn::net {

/// Optional record of every intermediate tensor shape, for conformance checks.
struct ShapeTrace {
    struct Entry {
        std::string name;
        int channels;
        Grid3 dims;
    };
    std::vector<Entry> entries;

    void add(std::string name, const Tensor<float>& t) { entries.push_back({std::move(name), t.channels(), t.dims()}); }
    void add(std::string name, const Tensor<double>& t) { entries.push_back({std::move(name), t.channels(), t.dims()}); }
    [[nodiscard]] const Entry* find(const std::string& name) const;
};

/// Graph handles produced by one forward pass.
struct ForwardVars {
    diff::Var dvf_full;
    diff::Var warped;
    /// Level-4, 3, 2, 1 fields in that order.
    std::array<diff::Var, 4> level_dvfs;
};

/// Gradient sink for the parameters; null for inference.
template <typename T>
using ParamGrads = ModelParams<T>*;

/// Levels 1..4 (index 0..3) of features from the shared extractor.
template <typename T>
std::array<diff::Var, 4> extract_pyramid(diff::Tape<T>& tape, const ModelParams<T>& p, ParamGrads<T> g, diff::Var image,
                                         ShapeTrace* trace = nullptr, const std::string& tag = "");

/// Returns (level-4 DVF, context).
template <typename T>
std::pair<diff::Var, diff::Var> estimate_initial(diff::Tape<T>& tape, const ModelParams<T>& p, ParamGrads<T> g,
                                                 diff::Var matching, diff::Var f_fix, ShapeTrace* trace = nullptr);

/// Level 3 or 2: dense block over [matching, f_fix, up_dvf, up_ctx]; returns (absolute DVF, context).
template <typename T>
std::pair<diff::Var, diff::Var> estimate_intermediate(diff::Tape<T>& tape, const ModelParams<T>& p, ParamGrads<T> g,
                                                      int level, diff::Var matching, diff::Var f_fix, diff::Var up_dvf,
                                                      diff::Var up_ctx, ShapeTrace* trace = nullptr);

/// Level 1: dilated stack whose 3-channel output is added to up_dvf.
template <typename T>
diff::Var estimate_final(diff::Tape<T>& tape, const ModelParams<T>& p, ParamGrads<T> g, diff::Var matching,
                         diff::Var f_fix, diff::Var up_dvf, diff::Var up_ctx, ShapeTrace* trace = nullptr);

/// Matching signal between warped-moving and fixed features: the normalized
/// cost volume, or their concatenation in feature_concat mode.
template <typename T>
diff::Var match(diff::Tape<T>& tape, const ArchConfig& arch, diff::Var f_warped, diff::Var f_fix);

/// Whole coarse-to-fine pipeline on single-channel images `mov`, `fix`.
template <typename T>
ForwardVars forward(diff::Tape<T>& tape, const ModelParams<T>& p, ParamGrads<T> g, diff::Var mov, diff::Var fix,
                    ShapeTrace* trace = nullptr);

/// Input dims must agree and be divisible by 16 per axis.
void check_input_dims(Grid3 mov, Grid3 fix);

struct RegistrationResult {
    Tensor<float> dvf_full;
    /// phi^4 ... phi^1
    std::vector<Tensor<float>> per_level_dvfs;
    Volume warped_moving;
};

/// Inference without gradient recording.
RegistrationResult register_pair(const ModelParams<float>& p, const Volume& mov, const Volume& fix, Mode mode);

/// Feature maps of one image, levels 1..4.
std::array<Tensor<float>, 4> extract_features(const ModelParams<float>& p, const Volume& v);

}  // namespace rrn::net
