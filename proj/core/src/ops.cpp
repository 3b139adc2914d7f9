#include "rrn/ops.hpp"

#include <Eigen/Core>
#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <string>

namespace rrn::diff {

namespace {

// Keeps the im2col buffer around 16 MB regardless of layer width.
constexpr std::size_t kColBudget = std::size_t{1} << 22;

void gemm(CBLAS_TRANSPOSE ta, CBLAS_TRANSPOSE tb, int m, int n, int k, float alpha, const float* a, int lda,
          const float* b, int ldb, float beta, float* c, int ldc) {
    cblas_sgemm(CblasRowMajor, ta, tb, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
}
// Double products go through Eigen: the DGEMM kernels of the OpenBLAS 0.3.20
// build picked on AVX-512 parts return wrong results for many shapes.
void gemm(CBLAS_TRANSPOSE ta, CBLAS_TRANSPOSE tb, int m, int n, int k, double alpha, const double* a, int lda,
          const double* b, int ldb, double beta, double* c, int ldc) {
    using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    using Map = Eigen::Map<const Mat, 0, Eigen::OuterStride<>>;
    Eigen::Map<Mat, 0, Eigen::OuterStride<>> cm(c, m, n, Eigen::OuterStride<>(ldc));
    if (beta == 0.0) cm.setZero();
    else if (beta != 1.0) cm *= beta;
    const bool at = ta != CblasNoTrans;
    const bool bt = tb != CblasNoTrans;
    const Map am(a, at ? k : m, at ? m : k, Eigen::OuterStride<>(lda));
    const Map bm(b, bt ? n : k, bt ? k : n, Eigen::OuterStride<>(ldb));
    if (!at && !bt) cm.noalias() += alpha * am * bm;
    else if (!at && bt) cm.noalias() += alpha * am * bm.transpose();
    else if (at && !bt) cm.noalias() += alpha * am.transpose() * bm;
    else cm.noalias() += alpha * am.transpose() * bm.transpose();
}

struct ConvGeometry {
    Grid3 in;
    Grid3 out;
    int stride;
    int dilation;
    int pad;
    int cin;

    [[nodiscard]] int rows() const { return out.d * out.h; }
};

/// Gathers input taps for output rows [r0, r1) into col (cin*27, n).
template <typename T>
void im2col(const ConvGeometry& g, const T* x, int r0, int r1, T* col) {
    const int n = (r1 - r0) * g.out.w;
    const std::size_t plane = g.in.voxels();
    for (int ci = 0; ci < g.cin; ++ci) {
        const T* xc = x + ci * plane;
        for (int k = 0; k < 27; ++k) {
            const int kz = k / 9, ky = (k / 3) % 3, kx = k % 3;
            T* dst = col + static_cast<std::size_t>(ci * 27 + k) * n;
            for (int r = r0; r < r1; ++r) {
                const int oz = r / g.out.h, oy = r % g.out.h;
                const int iz = oz * g.stride - g.pad + kz * g.dilation;
                const int iy = oy * g.stride - g.pad + ky * g.dilation;
                T* row = dst + static_cast<std::size_t>(r - r0) * g.out.w;
                if (iz < 0 || iz >= g.in.d || iy < 0 || iy >= g.in.h) {
                    std::fill(row, row + g.out.w, T(0));
                    continue;
                }
                const T* src = xc + (static_cast<std::size_t>(iz) * g.in.h + iy) * g.in.w;
                const int xoff = kx * g.dilation - g.pad;
                if (g.stride == 1) {
                    const int lo = std::min(g.out.w, std::max(0, -xoff));
                    const int hi = std::max(lo, std::min(g.out.w, g.in.w - xoff));
                    std::fill(row, row + lo, T(0));
                    if (hi > lo) std::memcpy(row + lo, src + lo + xoff, sizeof(T) * (hi - lo));
                    std::fill(row + hi, row + g.out.w, T(0));
                } else {
                    for (int ox = 0; ox < g.out.w; ++ox) {
                        const int ix = ox * g.stride + xoff;
                        row[ox] = (ix >= 0 && ix < g.in.w) ? src[ix] : T(0);
                    }
                }
            }
        }
    }
}

/// Scatter-adds col (cin*27, n) back onto the input gradient.
template <typename T>
void col2im(const ConvGeometry& g, const T* col, int r0, int r1, T* gx) {
    const int n = (r1 - r0) * g.out.w;
    const std::size_t plane = g.in.voxels();
    for (int ci = 0; ci < g.cin; ++ci) {
        T* gc = gx + ci * plane;
        for (int k = 0; k < 27; ++k) {
            const int kz = k / 9, ky = (k / 3) % 3, kx = k % 3;
            const T* src = col + static_cast<std::size_t>(ci * 27 + k) * n;
            for (int r = r0; r < r1; ++r) {
                const int oz = r / g.out.h, oy = r % g.out.h;
                const int iz = oz * g.stride - g.pad + kz * g.dilation;
                const int iy = oy * g.stride - g.pad + ky * g.dilation;
                if (iz < 0 || iz >= g.in.d || iy < 0 || iy >= g.in.h) continue;
                const T* row = src + static_cast<std::size_t>(r - r0) * g.out.w;
                T* dst = gc + (static_cast<std::size_t>(iz) * g.in.h + iy) * g.in.w;
                const int xoff = kx * g.dilation - g.pad;
                if (g.stride == 1) {
                    const int lo = std::max(0, -xoff);
                    const int hi = std::min(g.out.w, g.in.w - xoff);
                    for (int ox = lo; ox < hi; ++ox) dst[ox + xoff] += row[ox];
                } else {
                    for (int ox = 0; ox < g.out.w; ++ox) {
                        const int ix = ox * g.stride + xoff;
                        if (ix >= 0 && ix < g.in.w) dst[ix] += row[ox];
                    }
                }
            }
        }
    }
}

int rows_per_chunk(const ConvGeometry& g) {
    const std::size_t per_row = static_cast<std::size_t>(g.cin) * 27 * g.out.w;
    return static_cast<int>(std::clamp<std::size_t>(kColBudget / std::max<std::size_t>(per_row, 1), 1,
                                                    static_cast<std::size_t>(g.rows())));
}

/// Per-axis linear taps for upsample2x.
struct UpTap {
    int i0, i1;
    double w1;
};

std::vector<UpTap> up_taps(int n) {
    std::vector<UpTap> t(static_cast<std::size_t>(2 * n));
    for (int p = 0; p < 2 * n; ++p) {
        const int k = p / 2;
        if (p % 2 == 0) t[p] = {k, k, 0.0};
        else t[p] = {k, std::min(k + 1, n - 1), 0.5};
    }
    return t;
}

}  // namespace

Grid3 conv_output_dims(Grid3 in, int stride) {
    auto f = [stride](int n) { return (n + stride - 1) / stride; };
    return {f(in.d), f(in.h), f(in.w)};
}

void validate_conv(int cin_actual, int cin, int stride, int dilation) {
    if (cin_actual != cin) {
        throw ValidationError("conv3: input has " + std::to_string(cin_actual) + " channels, weights expect " +
                              std::to_string(cin));
    }
    if (stride != 1 && stride != 2) throw ValidationError("conv3: unsupported stride " + std::to_string(stride));
    if (dilation != 1 && dilation != 2 && dilation != 4 && dilation != 8 && dilation != 16) {
        throw ValidationError("conv3: unsupported dilation " + std::to_string(dilation));
    }
}

template <typename T>
Tensor<T> conv3_forward(const Tensor<T>& x, const ConvWeights<T>& p) {
    validate_conv(x.channels(), p.cin, p.stride, p.dilation);
    const ConvGeometry g{x.dims(), conv_output_dims(x.dims(), p.stride), p.stride, p.dilation, p.dilation, p.cin};
    Tensor<T> out(p.cout, g.out, x.level());
    const int total = static_cast<int>(g.out.voxels());
    const int kdim = p.cin * 27;
    const int chunk = rows_per_chunk(g);
    std::vector<T> col(static_cast<std::size_t>(kdim) * chunk * g.out.w);
    for (int r0 = 0; r0 < g.rows(); r0 += chunk) {
        const int r1 = std::min(g.rows(), r0 + chunk);
        const int n = (r1 - r0) * g.out.w;
        im2col(g, x.data(), r0, r1, col.data());
        gemm(CblasNoTrans, CblasNoTrans, p.cout, n, kdim, T(1), p.weight.data(), kdim, col.data(), n, T(0),
             out.data() + static_cast<std::size_t>(r0) * g.out.w, total);
    }
    for (int co = 0; co < p.cout; ++co) {
        T* o = out.channel(co);
        const T b = p.bias[co];
        for (int i = 0; i < total; ++i) o[i] += b;
    }
    return out;
}

template <typename T>
void conv3_backward(const Tensor<T>& x, const ConvWeights<T>& p, const Tensor<T>& gout, Tensor<T>* gx,
                    ConvWeights<T>* gp) {
    const ConvGeometry g{x.dims(), conv_output_dims(x.dims(), p.stride), p.stride, p.dilation, p.dilation, p.cin};
    const int total = static_cast<int>(g.out.voxels());
    const int kdim = p.cin * 27;
    if (gp != nullptr) {
        for (int co = 0; co < p.cout; ++co) {
            const T* go = gout.channel(co);
            T s = 0;
            for (int i = 0; i < total; ++i) s += go[i];
            gp->bias[co] += s;
        }
    }
    if (gx == nullptr && gp == nullptr) return;
    const int chunk = rows_per_chunk(g);
    std::vector<T> col(static_cast<std::size_t>(kdim) * chunk * g.out.w);
    std::vector<T> gcol(gx != nullptr ? col.size() : 0);
    for (int r0 = 0; r0 < g.rows(); r0 += chunk) {
        const int r1 = std::min(g.rows(), r0 + chunk);
        const int n = (r1 - r0) * g.out.w;
        const T* go = gout.data() + static_cast<std::size_t>(r0) * g.out.w;
        if (gp != nullptr) {
            im2col(g, x.data(), r0, r1, col.data());
            gemm(CblasNoTrans, CblasTrans, p.cout, kdim, n, T(1), go, total, col.data(), n, T(1), gp->weight.data(),
                 kdim);
        }
        if (gx != nullptr) {
            gemm(CblasTrans, CblasNoTrans, kdim, n, p.cout, T(1), p.weight.data(), kdim, go, total, T(0), gcol.data(),
                 n);
            col2im(g, gcol.data(), r0, r1, gx->data());
        }
    }
}

template <typename T>
Tensor<T> leaky_relu_forward(const Tensor<T>& x, T slope) {
    Tensor<T> out(x.channels(), x.dims(), x.level());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] >= T(0) ? x[i] : slope * x[i];
    return out;
}

template <typename T>
void leaky_relu_backward(const Tensor<T>& x, T slope, const Tensor<T>& gout, Tensor<T>& gx) {
    for (std::size_t i = 0; i < x.size(); ++i) gx[i] += x[i] >= T(0) ? gout[i] : slope * gout[i];
}

template <typename T>
Tensor<T> upsample2x_forward(const Tensor<T>& x, bool scale_values) {
    const Grid3 in = x.dims();
    const Grid3 out_dims = doubled(in);
    Tensor<T> out(x.channels(), out_dims, std::max(0, x.level() - 1));
    const auto tz = up_taps(in.d), ty = up_taps(in.h), tx = up_taps(in.w);
    const double s = scale_values ? 2.0 : 1.0;
    for (int c = 0; c < x.channels(); ++c) {
        const T* src = x.channel(c);
        T* dst = out.channel(c);
        auto at = [&](int z, int y, int xx) { return static_cast<double>(src[(static_cast<std::size_t>(z) * in.h + y) * in.w + xx]); };
        std::size_t i = 0;
        for (int z = 0; z < out_dims.d; ++z)
            for (int y = 0; y < out_dims.h; ++y)
                for (int xx = 0; xx < out_dims.w; ++xx, ++i) {
                    const auto& a = tz[z];
                    const auto& b = ty[y];
                    const auto& e = tx[xx];
                    auto lx = [&](int zz, int yy) { return (1.0 - e.w1) * at(zz, yy, e.i0) + e.w1 * at(zz, yy, e.i1); };
                    const double v0 = (1.0 - b.w1) * lx(a.i0, b.i0) + b.w1 * lx(a.i0, b.i1);
                    const double v1 = (1.0 - b.w1) * lx(a.i1, b.i0) + b.w1 * lx(a.i1, b.i1);
                    dst[i] = static_cast<T>(s * ((1.0 - a.w1) * v0 + a.w1 * v1));
                }
    }
    return out;
}

template <typename T>
void upsample2x_backward(const Tensor<T>& gout, bool scale_values, Tensor<T>& gx) {
    const Grid3 in = gx.dims();
    const Grid3 out_dims = gout.dims();
    const auto tz = up_taps(in.d), ty = up_taps(in.h), tx = up_taps(in.w);
    const double s = scale_values ? 2.0 : 1.0;
    for (int c = 0; c < gx.channels(); ++c) {
        const T* g = gout.channel(c);
        T* dst = gx.channel(c);
        auto add = [&](int z, int y, int xx, double v) {
            dst[(static_cast<std::size_t>(z) * in.h + y) * in.w + xx] += static_cast<T>(v);
        };
        std::size_t i = 0;
        for (int z = 0; z < out_dims.d; ++z)
            for (int y = 0; y < out_dims.h; ++y)
                for (int xx = 0; xx < out_dims.w; ++xx, ++i) {
                    const double v = s * static_cast<double>(g[i]);
                    const auto& a = tz[z];
                    const auto& b = ty[y];
                    const auto& e = tx[xx];
                    const double wz[2] = {1.0 - a.w1, a.w1};
                    const double wy[2] = {1.0 - b.w1, b.w1};
                    const double wx[2] = {1.0 - e.w1, e.w1};
                    const int iz[2] = {a.i0, a.i1};
                    const int iy[2] = {b.i0, b.i1};
                    const int ix[2] = {e.i0, e.i1};
                    for (int p = 0; p < 2; ++p)
                        for (int q = 0; q < 2; ++q)
                            for (int r = 0; r < 2; ++r) {
                                const double w = wz[p] * wy[q] * wx[r];
                                if (w != 0.0) add(iz[p], iy[q], ix[r], w * v);
                            }
                }
    }
}

namespace {

struct Sample {
    int base[3];
    double frac[3];
    bool clamped[3];
};

Sample locate(double pz, double py, double px, Grid3 g, Padding pad) {
    Sample s{};
    const double p[3] = {pz, py, px};
    for (int a = 0; a < 3; ++a) {
        double q = p[a];
        s.clamped[a] = false;
        if (pad == Padding::border) {
            const double hi = g[a] - 1;
            if (q < 0.0 || q > hi) {
                q = std::clamp(q, 0.0, hi);
                s.clamped[a] = true;
            }
        }
        if (std::isnan(q)) {
            // keep the NaN flowing into the sample instead of into an index
            s.base[a] = 0;
            s.frac[a] = q;
            continue;
        }
        // Beyond one cell outside the grid every tap reads padding.
        q = std::clamp(q, -2.0, static_cast<double>(g[a]) + 1.0);
        const double f = std::floor(q);
        s.base[a] = static_cast<int>(f);
        s.frac[a] = q - f;
    }
    return s;
}

template <typename T>
inline double fetch(const T* src, Grid3 g, int z, int y, int x, Padding pad) {
    if (pad == Padding::border) {
        z = std::clamp(z, 0, g.d - 1);
        y = std::clamp(y, 0, g.h - 1);
        x = std::clamp(x, 0, g.w - 1);
    } else if (z < 0 || y < 0 || x < 0 || z >= g.d || y >= g.h || x >= g.w) {
        return 0.0;
    }
    return static_cast<double>(src[(static_cast<std::size_t>(z) * g.h + y) * g.w + x]);
}

void check_warp_shapes(Grid3 x, Grid3 d, int dch) {
    if (dch != 3) throw ValidationError("warp: displacement field must have 3 channels");
    if (!(x == d)) throw ValidationError("warp: field dims " + d.str() + " differ from input dims " + x.str());
}

}  // namespace

template <typename T>
T trilinear_at(const Tensor<T>& x, int channel, double z, double y, double x_pos) {
    const Sample s = locate(z, y, x_pos, x.dims(), Padding::zeros);
    const T* src = x.channel(channel);
    double acc = 0.0;
    for (int p = 0; p < 2; ++p)
        for (int q = 0; q < 2; ++q)
            for (int r = 0; r < 2; ++r) {
                const double w = (p ? s.frac[0] : 1.0 - s.frac[0]) * (q ? s.frac[1] : 1.0 - s.frac[1]) *
                                 (r ? s.frac[2] : 1.0 - s.frac[2]);
                if (w == 0.0) continue;
                acc += w * fetch(src, x.dims(), s.base[0] + p, s.base[1] + q, s.base[2] + r, Padding::zeros);
            }
    return static_cast<T>(acc);
}

template <typename T>
Tensor<T> warp_forward(const Tensor<T>& x, const Tensor<T>& d, Padding pad) {
    check_warp_shapes(x.dims(), d.dims(), d.channels());
    const Grid3 g = x.dims();
    Tensor<T> out(x.channels(), g, x.level());
    const T* dz = d.channel(0);
    const T* dy = d.channel(1);
    const T* dx = d.channel(2);
    std::size_t i = 0;
    for (int z = 0; z < g.d; ++z)
        for (int y = 0; y < g.h; ++y)
            for (int xx = 0; xx < g.w; ++xx, ++i) {
                if (dz[i] == T(0) && dy[i] == T(0) && dx[i] == T(0)) {
                    for (int c = 0; c < x.channels(); ++c) out.channel(c)[i] = x.channel(c)[i];
                    continue;
                }
                const Sample s = locate(z + static_cast<double>(dz[i]), y + static_cast<double>(dy[i]),
                                        xx + static_cast<double>(dx[i]), g, pad);
                double w[8];
                for (int k = 0; k < 8; ++k) {
                    const int p = k >> 2, q = (k >> 1) & 1, r = k & 1;
                    w[k] = (p ? s.frac[0] : 1.0 - s.frac[0]) * (q ? s.frac[1] : 1.0 - s.frac[1]) *
                           (r ? s.frac[2] : 1.0 - s.frac[2]);
                }
                for (int c = 0; c < x.channels(); ++c) {
                    const T* src = x.channel(c);
                    double acc = 0.0;
                    for (int k = 0; k < 8; ++k) {
                        if (w[k] == 0.0) continue;
                        acc += w[k] * fetch(src, g, s.base[0] + (k >> 2), s.base[1] + ((k >> 1) & 1), s.base[2] + (k & 1), pad);
                    }
                    out.channel(c)[i] = static_cast<T>(acc);
                }
            }
    return out;
}

template <typename T>
void warp_backward(const Tensor<T>& x, const Tensor<T>& d, const Tensor<T>& gout, Padding pad, Tensor<T>* gx,
                   Tensor<T>* gd) {
    const Grid3 g = x.dims();
    const T* dz = d.channel(0);
    const T* dy = d.channel(1);
    const T* dx = d.channel(2);
    std::size_t i = 0;
    for (int z = 0; z < g.d; ++z)
        for (int y = 0; y < g.h; ++y)
            for (int xx = 0; xx < g.w; ++xx, ++i) {
                const Sample s = locate(z + static_cast<double>(dz[i]), y + static_cast<double>(dy[i]),
                                        xx + static_cast<double>(dx[i]), g, pad);
                double grad_p[3] = {0.0, 0.0, 0.0};
                for (int k = 0; k < 8; ++k) {
                    const int p = k >> 2, q = (k >> 1) & 1, r = k & 1;
                    const double wz = p ? s.frac[0] : 1.0 - s.frac[0];
                    const double wy = q ? s.frac[1] : 1.0 - s.frac[1];
                    const double wx = r ? s.frac[2] : 1.0 - s.frac[2];
                    const double w = wz * wy * wx;
                    int cz = s.base[0] + p, cy = s.base[1] + q, cx = s.base[2] + r;
                    const bool inside = cz >= 0 && cy >= 0 && cx >= 0 && cz < g.d && cy < g.h && cx < g.w;
                    if (pad == Padding::zeros && !inside) continue;
                    if (pad == Padding::border) {
                        cz = std::clamp(cz, 0, g.d - 1);
                        cy = std::clamp(cy, 0, g.h - 1);
                        cx = std::clamp(cx, 0, g.w - 1);
                    }
                    const std::size_t ci = (static_cast<std::size_t>(cz) * g.h + cy) * g.w + cx;
                    const double sz = p ? 1.0 : -1.0, sy = q ? 1.0 : -1.0, sx = r ? 1.0 : -1.0;
                    for (int c = 0; c < x.channels(); ++c) {
                        const double go = static_cast<double>(gout.channel(c)[i]);
                        if (go == 0.0) continue;
                        if (gx != nullptr && w != 0.0) gx->channel(c)[ci] += static_cast<T>(w * go);
                        if (gd != nullptr) {
                            const double v = static_cast<double>(x.channel(c)[ci]) * go;
                            grad_p[0] += v * sz * wy * wx;
                            grad_p[1] += v * wz * sy * wx;
                            grad_p[2] += v * wz * wy * sx;
                        }
                    }
                }
                if (gd != nullptr) {
                    for (int a = 0; a < 3; ++a) {
                        if (!s.clamped[a]) gd->channel(a)[i] += static_cast<T>(grad_p[a]);
                    }
                }
            }
}

template <typename T>
Tensor<T> concat_forward(std::span<const Tensor<T>* const> parts) {
    if (parts.empty()) throw ValidationError("concat: no inputs");
    const Grid3 g = parts[0]->dims();
    int channels = 0;
    for (const auto* p : parts) {
        if (!(p->dims() == g)) throw ValidationError("concat: spatial dims " + p->dims().str() + " vs " + g.str());
        channels += p->channels();
    }
    Tensor<T> out(channels, g, parts[0]->level());
    T* dst = out.data();
    for (const auto* p : parts) {
        std::copy(p->data(), p->data() + p->size(), dst);
        dst += p->size();
    }
    return out;
}

#define RRN_INSTANTIATE_OPS(T)                                                                                   \
    template Tensor<T> conv3_forward(const Tensor<T>&, const ConvWeights<T>&);                                   \
    template void conv3_backward(const Tensor<T>&, const ConvWeights<T>&, const Tensor<T>&, Tensor<T>*,          \
                                 ConvWeights<T>*);                                                               \
    template Tensor<T> leaky_relu_forward(const Tensor<T>&, T);                                                  \
    template void leaky_relu_backward(const Tensor<T>&, T, const Tensor<T>&, Tensor<T>&);                        \
    template Tensor<T> upsample2x_forward(const Tensor<T>&, bool);                                               \
    template void upsample2x_backward(const Tensor<T>&, bool, Tensor<T>&);                                       \
    template Tensor<T> warp_forward(const Tensor<T>&, const Tensor<T>&, Padding);                                \
    template void warp_backward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, Padding, Tensor<T>*,       \
                                Tensor<T>*);                                                                     \
    template Tensor<T> concat_forward(std::span<const Tensor<T>* const>);                                        \
    template T trilinear_at(const Tensor<T>&, int, double, double, double);

RRN_INSTANTIATE_OPS(float)
RRN_INSTANTIATE_OPS(double)

void set_num_threads(int n) {
    if (n < 1) throw ValidationError("thread count must be >= 1");
    openblas_set_num_threads(n);
}

int num_threads() { return openblas_get_num_threads(); }

}  // namespace rrn::diff
