#include "rrn/tape.hpp"

namespace rrn::diff {

template <typename T>
Var conv3(Tape<T>& tape, Var x, const ConvWeights<T>& p, ConvWeights<T>* gp) {
    auto out = conv3_forward(tape.value(x), p);
    const bool rg = tape.requires_grad(x) || gp != nullptr;
    return tape.record(std::move(out), rg, [x, &p, gp](Tape<T>& t, const Tensor<T>& g) {
        Tensor<T>* gx = t.requires_grad(x) ? &t.grad(x) : nullptr;
        conv3_backward(t.value(x), p, g, gx, gp);
    });
}

template <typename T>
Var leaky_relu(Tape<T>& tape, Var x, T slope) {
    auto out = leaky_relu_forward(tape.value(x), slope);
    return tape.record(std::move(out), tape.requires_grad(x), [x, slope](Tape<T>& t, const Tensor<T>& g) {
        leaky_relu_backward(t.value(x), slope, g, t.grad(x));
    });
}

template <typename T>
Var upsample2x(Tape<T>& tape, Var x, bool scale_values) {
    auto out = upsample2x_forward(tape.value(x), scale_values);
    return tape.record(std::move(out), tape.requires_grad(x), [x, scale_values](Tape<T>& t, const Tensor<T>& g) {
        upsample2x_backward(g, scale_values, t.grad(x));
    });
}

template <typename T>
Var warp(Tape<T>& tape, Var x, Var d, Padding pad) {
    auto out = warp_forward(tape.value(x), tape.value(d), pad);
    const bool rg = tape.requires_grad(x) || tape.requires_grad(d);
    return tape.record(std::move(out), rg, [x, d, pad](Tape<T>& t, const Tensor<T>& g) {
        Tensor<T>* gx = t.requires_grad(x) ? &t.grad(x) : nullptr;
        Tensor<T>* gd = t.requires_grad(d) ? &t.grad(d) : nullptr;
        warp_backward(t.value(x), t.value(d), g, pad, gx, gd);
    });
}

template <typename T>
Var concat(Tape<T>& tape, const std::vector<Var>& parts) {
    std::vector<const Tensor<T>*> ptrs;
    bool rg = false;
    for (auto v : parts) {
        ptrs.push_back(&tape.value(v));
        rg = rg || tape.requires_grad(v);
    }
    auto out = concat_forward<T>(ptrs);
    return tape.record(std::move(out), rg, [parts](Tape<T>& t, const Tensor<T>& g) {
        std::size_t offset = 0;
        for (auto v : parts) {
            const std::size_t n = t.value(v).size();
            if (t.requires_grad(v)) {
                auto& gv = t.grad(v);
                for (std::size_t i = 0; i < n; ++i) gv[i] += g[offset + i];
            }
            offset += n;
        }
    });
}

template <typename T>
Var add(Tape<T>& tape, Var a, Var b) {
    return linear_combination<T>(tape, {{a, T(1)}, {b, T(1)}});
}

template <typename T>
Var linear_combination(Tape<T>& tape, const std::vector<std::pair<Var, T>>& terms) {
    if (terms.empty()) throw ValidationError("linear_combination: no terms");
    const auto& first = tape.value(terms[0].first);
    Tensor<T> out(first.channels(), first.dims(), first.level());
    bool rg = false;
    for (const auto& [v, w] : terms) {
        const auto& x = tape.value(v);
        if (!x.same_shape(out)) throw ValidationError("linear_combination: shape mismatch");
        for (std::size_t i = 0; i < x.size(); ++i) out[i] += w * x[i];
        rg = rg || tape.requires_grad(v);
    }
    return tape.record(std::move(out), rg, [terms](Tape<T>& t, const Tensor<T>& g) {
        for (const auto& [v, w] : terms) {
            if (!t.requires_grad(v)) continue;
            auto& gv = t.grad(v);
            for (std::size_t i = 0; i < g.size(); ++i) gv[i] += w * g[i];
        }
    });
}

template <typename T>
Var dot_const(Tape<T>& tape, Var x, const Tensor<T>& r) {
    const auto& xv = tape.value(x);
    if (!xv.same_shape(r)) throw ValidationError("dot_const: shape mismatch");
    Tensor<T> out(1, Grid3{1, 1, 1});
    double acc = 0.0;
    for (std::size_t i = 0; i < xv.size(); ++i) acc += static_cast<double>(xv[i]) * static_cast<double>(r[i]);
    out[0] = static_cast<T>(acc);
    return tape.record(std::move(out), tape.requires_grad(x), [x, r](Tape<T>& t, const Tensor<T>& g) {
        auto& gx = t.grad(x);
        for (std::size_t i = 0; i < r.size(); ++i) gx[i] += g[0] * r[i];
    });
}

#define RRN_INSTANTIATE_TAPE(T)                                                                     \
    template Var conv3(Tape<T>&, Var, const ConvWeights<T>&, ConvWeights<T>*);                      \
    template Var leaky_relu(Tape<T>&, Var, T);                                                      \
    template Var upsample2x(Tape<T>&, Var, bool);                                                   \
    template Var warp(Tape<T>&, Var, Var, Padding);                                                 \
    template Var concat(Tape<T>&, const std::vector<Var>&);                                         \
    template Var add(Tape<T>&, Var, Var);                                                           \
    template Var linear_combination(Tape<T>&, const std::vector<std::pair<Var, T>>&);               \
    template Var dot_const(Tape<T>&, Var, const Tensor<T>&);

RRN_INSTANTIATE_TAPE(float)
RRN_INSTANTIATE_TAPE(double)

}  // namespace rrn::diff
