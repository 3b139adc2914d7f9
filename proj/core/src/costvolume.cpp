#include "rrn/costvolume.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>

namespace rrn::cost {

std::string to_string(Neighborhood n) { return n == Neighborhood::l1 ? "l1" : "linf"; }

Neighborhood parse_neighborhood(const std::string& s) {
    if (s == "l1") return Neighborhood::l1;
    if (s == "linf") return Neighborhood::linf;
    throw ValidationError("unknown neighborhood norm `" + s + "` (expected l1 or linf)");
}

std::string to_string(NormStats n) { return n == NormStats::per_map ? "per_map" : "per_channel"; }

NormStats parse_norm_stats(const std::string& s) {
    if (s == "per_map") return NormStats::per_map;
    if (s == "per_channel") return NormStats::per_channel;
    throw ValidationError("unknown feature normalization `" + s + "` (expected per_map or per_channel)");
}

std::vector<Offset> neighborhood_offsets(int radius, Neighborhood norm) {
    if (radius < 1) throw ValidationError("cost volume radius must be >= 1");
    std::vector<Offset> out;
    for (int dz = -radius; dz <= radius; ++dz)
        for (int dy = -radius; dy <= radius; ++dy)
            for (int dx = -radius; dx <= radius; ++dx) {
                const int l1 = std::abs(dz) + std::abs(dy) + std::abs(dx);
                if (norm == Neighborhood::l1 && l1 > radius) continue;
                out.push_back({dz, dy, dx});
            }
    return out;
}

namespace {

struct Stats {
    double mean;
    double std;
};

template <typename T>
Stats stats_of(const T* p, std::size_t n) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += static_cast<double>(p[i]);
    const double mean = s / static_cast<double>(n);
    double ss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double d = static_cast<double>(p[i]) - mean;
        ss += d * d;
    }
    return {mean, std::sqrt(ss / static_cast<double>(n))};
}

/// Groups of contiguous elements sharing one statistic.
template <typename T>
std::pair<int, std::size_t> groups(const Tensor<T>& f, NormStats stats) {
    if (stats == NormStats::per_map) return {1, f.size()};
    return {f.channels(), f.plane()};
}

void check_pair(Grid3 a, int ca, Grid3 b, int cb) {
    if (!(a == b) || ca != cb) {
        throw ValidationError("correlate: feature shapes differ (" + std::to_string(ca) + "x" + a.str() + " vs " +
                              std::to_string(cb) + "x" + b.str() + ")");
    }
}

/// Valid index range [lo, hi) of v such that v + off stays inside [0, n).
inline std::pair<int, int> valid_range(int n, int off) { return {std::max(0, -off), std::min(n, n - off)}; }

}  // namespace

template <typename T>
Tensor<T> normalize_features(const Tensor<T>& f, NormStats stats) {
    Tensor<T> out(f.channels(), f.dims(), f.level());
    const auto [count, len] = groups(f, stats);
    for (int gi = 0; gi < count; ++gi) {
        const T* src = f.data() + gi * len;
        T* dst = out.data() + gi * len;
        const Stats st = stats_of(src, len);
        const double inv = 1.0 / (st.std + kNormEps);
        for (std::size_t i = 0; i < len; ++i) dst[i] = static_cast<T>((static_cast<double>(src[i]) - st.mean) * inv);
    }
    return out;
}

template <typename T>
void normalize_features_backward(const Tensor<T>& f, const Tensor<T>& gout, NormStats stats, Tensor<T>& gf) {
    const auto [count, len] = groups(f, stats);
    const double n = static_cast<double>(len);
    for (int gi = 0; gi < count; ++gi) {
        const T* x = f.data() + gi * len;
        const T* g = gout.data() + gi * len;
        T* gx = gf.data() + gi * len;
        const Stats st = stats_of(x, len);
        const double s = st.std + kNormEps;
        double gsum = 0.0, gdot = 0.0;
        for (std::size_t i = 0; i < len; ++i) {
            gsum += static_cast<double>(g[i]);
            gdot += static_cast<double>(g[i]) * (static_cast<double>(x[i]) - st.mean);
        }
        const double gmean = gsum / n;
        // d std / d x_j = (x_j - mean) / (n std); vanishes for constant groups.
        const double k = st.std > 0.0 ? gdot / (n * st.std * s * s) : 0.0;
        for (std::size_t i = 0; i < len; ++i) {
            const double xc = static_cast<double>(x[i]) - st.mean;
            gx[i] += static_cast<T>((static_cast<double>(g[i]) - gmean) / s - xc * k);
        }
    }
}

template <typename T>
CostVolume<T> correlate(const Tensor<T>& fw, const Tensor<T>& ff, int radius, Neighborhood norm) {
    check_pair(fw.dims(), fw.channels(), ff.dims(), ff.channels());
    CostVolume<T> cv;
    cv.offsets = neighborhood_offsets(radius, norm);
    cv.radius = radius;
    cv.norm = norm;
    const Grid3 g = fw.dims();
    cv.data = Tensor<T>(static_cast<int>(cv.offsets.size()), g, fw.level());
    const T inv_c = T(1) / static_cast<T>(fw.channels());
    for (std::size_t k = 0; k < cv.offsets.size(); ++k) {
        const auto o = cv.offsets[k];
        const auto [z0, z1] = valid_range(g.d, o.dz);
        const auto [y0, y1] = valid_range(g.h, o.dy);
        const auto [x0, x1] = valid_range(g.w, o.dx);
        T* out = cv.data.channel(static_cast<int>(k));
        for (int c = 0; c < fw.channels(); ++c) {
            const T* a = fw.channel(c);
            const T* b = ff.channel(c);
            for (int z = z0; z < z1; ++z)
                for (int y = y0; y < y1; ++y) {
                    const std::size_t row = (static_cast<std::size_t>(z) * g.h + y) * g.w;
                    const std::size_t nrow = (static_cast<std::size_t>(z + o.dz) * g.h + (y + o.dy)) * g.w + o.dx;
                    for (int x = x0; x < x1; ++x) out[row + x] += a[row + x] * b[nrow + x];
                }
        }
        for (std::size_t i = 0; i < cv.data.plane(); ++i) out[i] *= inv_c;
    }
    return cv;
}

template <typename T>
CostVolume<T> correlate_naive(const Tensor<T>& fw, const Tensor<T>& ff, int radius, Neighborhood norm) {
    check_pair(fw.dims(), fw.channels(), ff.dims(), ff.channels());
    CostVolume<T> cv;
    cv.offsets = neighborhood_offsets(radius, norm);
    cv.radius = radius;
    cv.norm = norm;
    const Grid3 g = fw.dims();
    cv.data = Tensor<T>(static_cast<int>(cv.offsets.size()), g, fw.level());
    for (int z = 0; z < g.d; ++z)
        for (int y = 0; y < g.h; ++y)
            for (int x = 0; x < g.w; ++x)
                for (std::size_t k = 0; k < cv.offsets.size(); ++k) {
                    const auto o = cv.offsets[k];
                    const int nz = z + o.dz, ny = y + o.dy, nx = x + o.dx;
                    T acc = 0;
                    if (nz >= 0 && ny >= 0 && nx >= 0 && nz < g.d && ny < g.h && nx < g.w) {
                        for (int c = 0; c < fw.channels(); ++c) acc += fw.at(c, z, y, x) * ff.at(c, nz, ny, nx);
                    }
                    cv.data.at(static_cast<int>(k), z, y, x) = acc / static_cast<T>(fw.channels());
                }
    return cv;
}

template <typename T>
void correlate_backward(const Tensor<T>& fw, const Tensor<T>& ff, const std::vector<Offset>& offsets,
                        const Tensor<T>& gout, Tensor<T>* gw, Tensor<T>* gf) {
    const Grid3 g = fw.dims();
    const T inv_c = T(1) / static_cast<T>(fw.channels());
    for (std::size_t k = 0; k < offsets.size(); ++k) {
        const auto o = offsets[k];
        const auto [z0, z1] = valid_range(g.d, o.dz);
        const auto [y0, y1] = valid_range(g.h, o.dy);
        const auto [x0, x1] = valid_range(g.w, o.dx);
        const T* go = gout.channel(static_cast<int>(k));
        for (int c = 0; c < fw.channels(); ++c) {
            const T* a = fw.channel(c);
            const T* b = ff.channel(c);
            T* ga = gw ? gw->channel(c) : nullptr;
            T* gb = gf ? gf->channel(c) : nullptr;
            for (int z = z0; z < z1; ++z)
                for (int y = y0; y < y1; ++y) {
                    const std::size_t row = (static_cast<std::size_t>(z) * g.h + y) * g.w;
                    const std::size_t nrow = (static_cast<std::size_t>(z + o.dz) * g.h + (y + o.dy)) * g.w + o.dx;
                    for (int x = x0; x < x1; ++x) {
                        const T s = go[row + x] * inv_c;
                        if (ga) ga[row + x] += s * b[nrow + x];
                        if (gb) gb[nrow + x] += s * a[row + x];
                    }
                }
        }
    }
}

template <typename T>
diff::Var normalize(diff::Tape<T>& tape, diff::Var f, NormStats stats) {
    auto out = normalize_features(tape.value(f), stats);
    return tape.record(std::move(out), tape.requires_grad(f), [f, stats](diff::Tape<T>& t, const Tensor<T>& g) {
        normalize_features_backward(t.value(f), g, stats, t.grad(f));
    });
}

template <typename T>
diff::Var correlate(diff::Tape<T>& tape, diff::Var fw, diff::Var ff, int radius, Neighborhood norm) {
    auto cv = correlate(tape.value(fw), tape.value(ff), radius, norm);
    const bool rg = tape.requires_grad(fw) || tape.requires_grad(ff);
    return tape.record(std::move(cv.data), rg,
                       [fw, ff, offsets = std::move(cv.offsets)](diff::Tape<T>& t, const Tensor<T>& g) {
                           Tensor<T>* gw = t.requires_grad(fw) ? &t.grad(fw) : nullptr;
                           Tensor<T>* gf = t.requires_grad(ff) ? &t.grad(ff) : nullptr;
                           correlate_backward(t.value(fw), t.value(ff), offsets, g, gw, gf);
                       });
}

#define RRN_INSTANTIATE_COST(T)                                                                                  \
    template Tensor<T> normalize_features(const Tensor<T>&, NormStats);                                          \
    template void normalize_features_backward(const Tensor<T>&, const Tensor<T>&, NormStats, Tensor<T>&);        \
    template CostVolume<T> correlate(const Tensor<T>&, const Tensor<T>&, int, Neighborhood);                     \
    template CostVolume<T> correlate_naive(const Tensor<T>&, const Tensor<T>&, int, Neighborhood);               \
    template void correlate_backward(const Tensor<T>&, const Tensor<T>&, const std::vector<Offset>&,             \
                                     const Tensor<T>&, Tensor<T>*, Tensor<T>*);                                  \
    template diff::Var normalize(diff::Tape<T>&, diff::Var, NormStats);                                          \
    template diff::Var correlate(diff::Tape<T>&, diff::Var, diff::Var, int, Neighborhood);

RRN_INSTANTIATE_COST(float)
RRN_INSTANTIATE_COST(double)

}  // namespace rrn::cost
