#include "rrn/losses.hpp"

#include <cmath>
#include <string>

namespace rrn::loss {

namespace {

void check_window(int window) {
    if (window < 3 || window % 2 == 0) throw ValidationError("lcc window must be odd and >= 3, got " + std::to_string(window));
}

void check_pair(const Grid3& a, const Grid3& b) {
    if (!(a == b)) throw ValidationError("lcc: image dims differ (" + a.str() + " vs " + b.str() + ")");
}

/// Sums over the clipped cube of half-width `half` around every voxel, one
/// separable prefix-sum pass per axis.
std::vector<double> box_sum(const std::vector<double>& in, Grid3 g, int half) {
    std::vector<double> cur = in;
    std::vector<double> next(in.size());
    const std::size_t stride[3] = {static_cast<std::size_t>(g.h) * g.w, static_cast<std::size_t>(g.w), 1};
    std::vector<double> prefix;
    for (int axis = 0; axis < 3; ++axis) {
        const int n = g[axis];
        prefix.assign(static_cast<std::size_t>(n) + 1, 0.0);
        const std::size_t lines = in.size() / n;
        for (std::size_t l = 0; l < lines; ++l) {
            // Decompose the line index into the base offset of that line.
            std::size_t base;
            if (axis == 0) base = l;
            else if (axis == 1) base = (l / g.w) * stride[0] + (l % g.w);
            else base = l * g.w;
            for (int i = 0; i < n; ++i) prefix[i + 1] = prefix[i] + cur[base + i * stride[axis]];
            for (int i = 0; i < n; ++i) {
                const int lo = std::max(0, i - half);
                const int hi = std::min(n, i + half + 1);
                next[base + i * stride[axis]] = prefix[hi] - prefix[lo];
            }
        }
        std::swap(cur, next);
    }
    return cur;
}

std::vector<double> window_counts(Grid3 g, int half) {
    std::vector<double> ones(g.voxels(), 1.0);
    return box_sum(ones, g, half);
}

struct LocalStats {
    std::vector<double> n, mean_f, mean_w, cross, var_f, var_w;
};

template <typename T>
LocalStats local_stats(const Tensor<T>& f, const Tensor<T>& w, int window) {
    const Grid3 g = f.dims();
    const std::size_t n = g.voxels();
    const int half = window / 2;
    std::vector<double> I(n), J(n), II(n), JJ(n), IJ(n);
    for (std::size_t i = 0; i < n; ++i) {
        I[i] = static_cast<double>(f[i]);
        J[i] = static_cast<double>(w[i]);
        II[i] = I[i] * I[i];
        JJ[i] = J[i] * J[i];
        IJ[i] = I[i] * J[i];
    }
    LocalStats s;
    s.n = window_counts(g, half);
    const auto sI = box_sum(I, g, half), sJ = box_sum(J, g, half);
    const auto sII = box_sum(II, g, half), sJJ = box_sum(JJ, g, half), sIJ = box_sum(IJ, g, half);
    s.mean_f.resize(n);
    s.mean_w.resize(n);
    s.cross.resize(n);
    s.var_f.resize(n);
    s.var_w.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double cnt = s.n[i];
        s.mean_f[i] = sI[i] / cnt;
        s.mean_w[i] = sJ[i] / cnt;
        s.cross[i] = sIJ[i] - sI[i] * sJ[i] / cnt;
        s.var_f[i] = std::max(0.0, sII[i] - sI[i] * sI[i] / cnt);
        s.var_w[i] = std::max(0.0, sJJ[i] - sJ[i] * sJ[i] / cnt);
    }
    return s;
}

}  // namespace

template <typename T>
std::vector<double> lcc_map(const Tensor<T>& fixed, const Tensor<T>& warped, int window) {
    check_window(window);
    check_pair(fixed.dims(), warped.dims());
    const auto s = local_stats(fixed, warped, window);
    std::vector<double> cc(s.n.size());
    for (std::size_t i = 0; i < cc.size(); ++i) {
        cc[i] = s.cross[i] * s.cross[i] / (s.var_f[i] * s.var_w[i] + kLccEps);
    }
    return cc;
}

template <typename T>
double lcc(const Tensor<T>& fixed, const Tensor<T>& warped, int window) {
    double acc = 0.0;
    for (double v : lcc_map(fixed, warped, window)) acc += v;
    return acc;
}

template <typename T>
void lcc_backward(const Tensor<T>& fixed, const Tensor<T>& warped, int window, double scale, Tensor<T>& gw) {
    check_window(window);
    check_pair(fixed.dims(), warped.dims());
    const Grid3 g = fixed.dims();
    const std::size_t n = g.voxels();
    const auto s = local_stats(fixed, warped, window);
    // d cc_v / d cross_v and d cc_v / d var_w,v
    std::vector<double> alpha(n), beta(n), alpha_mf(n), beta_mw(n);
    for (std::size_t v = 0; v < n; ++v) {
        const double den = s.var_f[v] * s.var_w[v] + kLccEps;
        alpha[v] = scale * 2.0 * s.cross[v] / den;
        beta[v] = -scale * s.cross[v] * s.cross[v] * s.var_f[v] / (den * den);
        alpha_mf[v] = alpha[v] * s.mean_f[v];
        beta_mw[v] = beta[v] * s.mean_w[v];
    }
    const int half = window / 2;
    const auto sa = box_sum(alpha, g, half), sam = box_sum(alpha_mf, g, half);
    const auto sb = box_sum(beta, g, half), sbm = box_sum(beta_mw, g, half);
    for (std::size_t u = 0; u < n; ++u) {
        const double I = static_cast<double>(fixed[u]);
        const double J = static_cast<double>(warped[u]);
        gw[u] += static_cast<T>(I * sa[u] - sam[u] + 2.0 * (J * sb[u] - sbm[u]));
    }
}

template <typename T>
double tv(const Tensor<T>& d) {
    const Grid3 g = d.dims();
    const std::size_t step[3] = {static_cast<std::size_t>(g.h) * g.w, static_cast<std::size_t>(g.w), 1};
    double acc = 0.0;
    for (int c = 0; c < d.channels(); ++c) {
        const T* f = d.channel(c);
        for (int axis = 0; axis < 3; ++axis) {
            for (int z = 0; z < g.d; ++z)
                for (int y = 0; y < g.h; ++y)
                    for (int x = 0; x < g.w; ++x) {
                        const int pos[3] = {z, y, x};
                        if (pos[axis] + 1 >= g[axis]) continue;
                        const std::size_t i = (static_cast<std::size_t>(z) * g.h + y) * g.w + x;
                        const double t = static_cast<double>(f[i + step[axis]]) - static_cast<double>(f[i]);
                        acc += std::sqrt(t * t + kTvDelta * kTvDelta) - kTvDelta;
                    }
        }
    }
    return acc / (3.0 * d.channels() * static_cast<double>(g.voxels()));
}

template <typename T>
void tv_backward(const Tensor<T>& d, double scale, Tensor<T>& gd) {
    const Grid3 g = d.dims();
    const std::size_t step[3] = {static_cast<std::size_t>(g.h) * g.w, static_cast<std::size_t>(g.w), 1};
    const double k = scale / (3.0 * d.channels() * static_cast<double>(g.voxels()));
    for (int c = 0; c < d.channels(); ++c) {
        const T* f = d.channel(c);
        T* gf = gd.channel(c);
        for (int axis = 0; axis < 3; ++axis) {
            for (int z = 0; z < g.d; ++z)
                for (int y = 0; y < g.h; ++y)
                    for (int x = 0; x < g.w; ++x) {
                        const int pos[3] = {z, y, x};
                        if (pos[axis] + 1 >= g[axis]) continue;
                        const std::size_t i = (static_cast<std::size_t>(z) * g.h + y) * g.w + x;
                        const double t = static_cast<double>(f[i + step[axis]]) - static_cast<double>(f[i]);
                        const double dt = k * t / std::sqrt(t * t + kTvDelta * kTvDelta);
                        gf[i + step[axis]] += static_cast<T>(dt);
                        gf[i] -= static_cast<T>(dt);
                    }
        }
    }
}

template <typename T>
LossValue total_loss(const Tensor<T>& fixed, const Tensor<T>& warped, const Tensor<T>& dvf, double lambda, int window) {
    if (!(dvf.dims() == fixed.dims())) throw ValidationError("total_loss: DVF must be at input resolution");
    LossValue v;
    v.lambda = lambda;
    v.lcc = lcc(fixed, warped, window) / static_cast<double>(fixed.plane());
    v.tv = tv(dvf);
    v.total = -v.lcc + lambda * v.tv;
    return v;
}

template <typename T>
diff::Var lcc_mean(diff::Tape<T>& tape, diff::Var fixed, diff::Var warped, int window) {
    const auto& f = tape.value(fixed);
    Tensor<T> out(1, Grid3{1, 1, 1});
    out[0] = static_cast<T>(lcc(f, tape.value(warped), window) / static_cast<double>(f.plane()));
    return tape.record(std::move(out), tape.requires_grad(warped),
                       [fixed, warped, window](diff::Tape<T>& t, const Tensor<T>& g) {
                           const auto& fv = t.value(fixed);
                           const double scale = static_cast<double>(g[0]) / static_cast<double>(fv.plane());
                           lcc_backward(fv, t.value(warped), window, scale, t.grad(warped));
                       });
}

template <typename T>
diff::Var tv(diff::Tape<T>& tape, diff::Var d) {
    Tensor<T> out(1, Grid3{1, 1, 1});
    out[0] = static_cast<T>(tv(tape.value(d)));
    return tape.record(std::move(out), tape.requires_grad(d), [d](diff::Tape<T>& t, const Tensor<T>& g) {
        tv_backward(t.value(d), static_cast<double>(g[0]), t.grad(d));
    });
}

template <typename T>
RecordedLoss<T> total_loss(diff::Tape<T>& tape, diff::Var fixed, diff::Var warped, diff::Var dvf, double lambda,
                           int window) {
    if (!(tape.value(dvf).dims() == tape.value(fixed).dims())) {
        throw ValidationError("total_loss: DVF must be at input resolution");
    }
    const auto l = lcc_mean(tape, fixed, warped, window);
    const auto r = tv(tape, dvf);
    RecordedLoss<T> out;
    out.total = diff::linear_combination<T>(tape, {{l, T(-1)}, {r, static_cast<T>(lambda)}});
    out.value.lambda = lambda;
    out.value.lcc = static_cast<double>(tape.value(l)[0]);
    out.value.tv = static_cast<double>(tape.value(r)[0]);
    out.value.total = static_cast<double>(tape.value(out.total)[0]);
    return out;
}

#define RRN_INSTANTIATE_LOSS(T)                                                                              \
    template std::vector<double> lcc_map(const Tensor<T>&, const Tensor<T>&, int);                           \
    template double lcc(const Tensor<T>&, const Tensor<T>&, int);                                            \
    template void lcc_backward(const Tensor<T>&, const Tensor<T>&, int, double, Tensor<T>&);                 \
    template double tv(const Tensor<T>&);                                                                    \
    template void tv_backward(const Tensor<T>&, double, Tensor<T>&);                                         \
    template LossValue total_loss(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, double, int);        \
    template diff::Var lcc_mean(diff::Tape<T>&, diff::Var, diff::Var, int);                                  \
    template diff::Var tv(diff::Tape<T>&, diff::Var);                                                        \
    template RecordedLoss<T> total_loss(diff::Tape<T>&, diff::Var, diff::Var, diff::Var, double, int);

RRN_INSTANTIATE_LOSS(float)
RRN_INSTANTIATE_LOSS(double)

}  // namespace rrn::loss
