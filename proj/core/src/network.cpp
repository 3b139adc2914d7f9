#include "rrn/network.hpp"

#include "rrn/costvolume.hpp"

namespace rrn::net {

using diff::Tape;
using diff::Var;

const ShapeTrace::Entry* ShapeTrace::find(const std::string& name) const {
    for (const auto& e : entries) {
        if (e.name == name) return &e;
    }
    return nullptr;
}

namespace {

template <typename T>
void trace_var(ShapeTrace* trace, const std::string& name, Tape<T>& tape, Var v) {
    if (trace != nullptr) trace->add(name, tape.value(v));
}

/// conv followed by Leaky ReLU unless `activate` is false.
template <typename T>
Var conv_layer(Tape<T>& tape, Var x, const diff::ConvWeights<T>& w, diff::ConvWeights<T>* gw, double slope,
               bool activate = true) {
    Var y = diff::conv3(tape, x, w, gw);
    return activate ? diff::leaky_relu(tape, y, static_cast<T>(slope)) : y;
}

}  // namespace

void check_input_dims(Grid3 mov, Grid3 fix) {
    if (!(mov == fix)) throw ValidationError("moving dims " + mov.str() + " differ from fixed dims " + fix.str());
    for (int a = 0; a < 3; ++a) {
        if (mov[a] < 16 || mov[a] % 16 != 0) {
            throw ValidationError("input dims " + mov.str() + " must be multiples of 16 (at least 16) per axis");
        }
    }
}

template <typename T>
std::array<Var, 4> extract_pyramid(Tape<T>& tape, const ModelParams<T>& p, ParamGrads<T> g, Var image,
                                   ShapeTrace* trace, const std::string& tag) {
    const auto dims = tape.value(image).dims();
    for (int a = 0; a < 3; ++a) {
        if (dims[a] < 16) throw ValidationError("feature pyramid needs at least 16 voxels per axis, got " + dims.str());
    }
    std::array<Var, 4> levels;
    Var x = image;
    for (int l = 0; l < kLevels; ++l) {
        for (int i = 0; i < 3; ++i) {
            x = conv_layer(tape, x, p.pyramid[l][i], g ? &g->pyramid[l][i] : nullptr, p.arch.slope);
        }
        levels[l] = x;
        trace_var(trace, tag + "pyramid.l" + std::to_string(l + 1), tape, x);
    }
    return levels;
}

template <typename T>
Var match(Tape<T>& tape, const ArchConfig& arch, Var f_warped, Var f_fix) {
    const Var a = cost::normalize(tape, f_warped, arch.norm_stats);
    const Var b = cost::normalize(tape, f_fix, arch.norm_stats);
    if (arch.mode == Mode::feature_concat) return diff::concat(tape, {a, b});
    return cost::correlate(tape, a, b, arch.radius, arch.neighborhood);
}

namespace {

/// Dense block shared by the initial and intermediate estimators.
template <typename T>
std::pair<Var, Var> dense_estimator(Tape<T>& tape, const ModelParams<T>& p, ParamGrads<T> g, int level, Var input,
                                    ShapeTrace* trace) {
    const int slot = estimator_slot(level);
    const auto& est = p.estimators[slot];
    auto* gest = g ? &g->estimators[slot] : nullptr;
    const std::string prefix = "estimator.l" + std::to_string(level) + ".";
    trace_var(trace, prefix + "input", tape, input);
    std::vector<Var> feats{input};
    Var last = input;
    for (int i = 0; i < 5; ++i) {
        const Var in = i == 0 ? input : diff::concat(tape, feats);
        last = conv_layer(tape, in, est[i], gest ? &(*gest)[i] : nullptr, p.arch.slope);
        trace_var(trace, prefix + "dense" + std::to_string(i), tape, last);
        feats.push_back(last);
    }
    const Var dvf = conv_layer(tape, last, est[5], gest ? &(*gest)[5] : nullptr, p.arch.slope, false);
    trace_var(trace, prefix + "dvf", tape, dvf);
    return {dvf, last};
}

}  // namespace

template <typename T>
std::pair<Var, Var> estimate_initial(Tape<T>& tape, const ModelParams<T>& p, ParamGrads<T> g, Var matching, Var f_fix,
                                     ShapeTrace* trace) {
    const int expected = p.arch.estimator_input(kLevels);
    const Var input = diff::concat(tape, {matching, f_fix});
    if (tape.value(input).channels() != expected) {
        throw ValidationError("initial estimator expects level-4 inputs with " + std::to_string(expected) + " channels");
    }
    return dense_estimator(tape, p, g, kLevels, input, trace);
}

template <typename T>
std::pair<Var, Var> estimate_intermediate(Tape<T>& tape, const ModelParams<T>& p, ParamGrads<T> g, int level,
                                          Var matching, Var f_fix, Var up_dvf, Var up_ctx, ShapeTrace* trace) {
    if (level != 3 && level != 2) throw ValidationError("intermediate estimators exist for levels 3 and 2 only");
    const Var input = diff::concat(tape, {matching, f_fix, up_dvf, up_ctx});
    if (tape.value(input).channels() != p.arch.estimator_input(level)) {
        throw ValidationError("estimator at level " + std::to_string(level) + " got inputs from the wrong level");
    }
    return dense_estimator(tape, p, g, level, input, trace);
}

template <typename T>
Var estimate_final(Tape<T>& tape, const ModelParams<T>& p, ParamGrads<T> g, Var matching, Var f_fix, Var up_dvf,
                   Var up_ctx, ShapeTrace* trace) {
    const Var input = diff::concat(tape, {matching, f_fix, up_dvf, up_ctx});
    if (tape.value(input).channels() != p.arch.estimator_input(1)) {
        throw ValidationError("final estimator got inputs from the wrong level");
    }
    trace_var(trace, "final.input", tape, input);
    Var x = input;
    for (int i = 0; i < 7; ++i) {
        x = conv_layer(tape, x, p.final_estimator[i], g ? &g->final_estimator[i] : nullptr, p.arch.slope, i < 6);
        trace_var(trace, "final.conv" + std::to_string(i), tape, x);
    }
    return diff::add(tape, up_dvf, x);
}

template <typename T>
ForwardVars forward(Tape<T>& tape, const ModelParams<T>& p, ParamGrads<T> g, Var mov, Var fix, ShapeTrace* trace) {
    check_input_dims(tape.value(mov).dims(), tape.value(fix).dims());
    const auto fm = extract_pyramid(tape, p, g, mov, trace, "mov.");
    const auto ff = extract_pyramid(tape, p, g, fix, trace, "fix.");
    ForwardVars out;

    auto [dvf, ctx] = estimate_initial(tape, p, g, match(tape, p.arch, fm[3], ff[3]), ff[3], trace);
    out.level_dvfs[0] = dvf;
    for (int level = 3; level >= 1; --level) {
        const Var up_dvf = diff::upsample2x(tape, dvf, true);
        const Var up_ctx = diff::upsample2x(tape, ctx, false);
        trace_var(trace, "up_dvf.l" + std::to_string(level), tape, up_dvf);
        const Var warped = diff::warp(tape, fm[level - 1], up_dvf, p.arch.padding);
        const Var m = match(tape, p.arch, warped, ff[level - 1]);
        trace_var(trace, "match.l" + std::to_string(level), tape, m);
        if (level > 1) {
            std::tie(dvf, ctx) = estimate_intermediate(tape, p, g, level, m, ff[level - 1], up_dvf, up_ctx, trace);
        } else {
            dvf = estimate_final(tape, p, g, m, ff[0], up_dvf, up_ctx, trace);
        }
        out.level_dvfs[kLevels - level] = dvf;
    }
    out.dvf_full = diff::upsample2x(tape, dvf, true);
    out.warped = diff::warp(tape, mov, out.dvf_full, p.arch.padding);
    trace_var(trace, "dvf_full", tape, out.dvf_full);
    return out;
}

RegistrationResult register_pair(const ModelParams<float>& p, const Volume& mov, const Volume& fix, Mode mode) {
    if (mode != p.arch.mode) {
        throw ValidationError("parameters were built for mode " + to_string(p.arch.mode) + ", not " + to_string(mode));
    }
    check_input_dims(mov.dims(), fix.dims());
    Tape<float> tape(false);
    const Var vm = tape.constant(mov.as_tensor<float>());
    const Var vf = tape.constant(fix.as_tensor<float>());
    const auto fw = forward<float>(tape, p, nullptr, vm, vf);
    RegistrationResult r;
    r.dvf_full = tape.value(fw.dvf_full);
    for (auto v : fw.level_dvfs) r.per_level_dvfs.push_back(tape.value(v));
    r.warped_moving = Volume::from_tensor(tape.value(fw.warped), mov);
    return r;
}

std::array<Tensor<float>, 4> extract_features(const ModelParams<float>& p, const Volume& v) {
    Tape<float> tape(false);
    const auto levels = extract_pyramid<float>(tape, p, nullptr, tape.constant(v.as_tensor<float>()));
    return {tape.value(levels[0]), tape.value(levels[1]), tape.value(levels[2]), tape.value(levels[3])};
}

#define RRN_INSTANTIATE_NET(T)                                                                                        \
    template std::array<Var, 4> extract_pyramid(Tape<T>&, const ModelParams<T>&, ParamGrads<T>, Var, ShapeTrace*,    \
                                                const std::string&);                                                  \
    template std::pair<Var, Var> estimate_initial(Tape<T>&, const ModelParams<T>&, ParamGrads<T>, Var, Var,           \
                                                  ShapeTrace*);                                                       \
    template std::pair<Var, Var> estimate_intermediate(Tape<T>&, const ModelParams<T>&, ParamGrads<T>, int, Var, Var, \
                                                       Var, Var, ShapeTrace*);                                        \
    template Var estimate_final(Tape<T>&, const ModelParams<T>&, ParamGrads<T>, Var, Var, Var, Var, ShapeTrace*);     \
    template Var match(Tape<T>&, const ArchConfig&, Var, Var);                                                        \
    template ForwardVars forward(Tape<T>&, const ModelParams<T>&, ParamGrads<T>, Var, Var, ShapeTrace*);

RRN_INSTANTIATE_NET(float)
RRN_INSTANTIATE_NET(double)

}  // namespace rrn::net
