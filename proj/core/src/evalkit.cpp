#include "rrn/evalkit.hpp"

#include "rrn/model.hpp"
#include "rrn/ops.hpp"
#include "rrn/textio.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>

namespace rrn::eval {

TreReport TreReport::from_errors(std::string case_id, std::string mode, std::vector<double> errors) {
    TreReport r;
    r.case_id = std::move(case_id);
    r.mode = std::move(mode);
    r.errors = std::move(errors);
    if (!r.errors.empty()) {
        double s = 0.0;
        for (double e : r.errors) s += e;
        r.mean = s / static_cast<double>(r.errors.size());
        double v = 0.0;
        for (double e : r.errors) v += (e - r.mean) * (e - r.mean);
        r.std = std::sqrt(v / static_cast<double>(r.errors.size()));
    }
    return r;
}

TreReport tre(const LandmarkSet& lms, const Dvf& d, const Vec3& spacing, std::string case_id, std::string mode) {
    if (!d.grid_tag.empty() && d.grid_tag != lms.grid_tag) {
        throw ValidationError("landmarks live on grid `" + lms.grid_tag + "`, the DVF on `" + d.grid_tag + "`");
    }
    if (d.field.channels() != 3) throw ValidationError("tre: the DVF must have 3 channels");
    const auto g = d.field.dims();
    if (!(g == lms.dims)) {
        throw ValidationError("tre: landmark grid " + lms.dims.str() + " differs from DVF grid " + g.str());
    }
    std::vector<double> errors;
    errors.reserve(lms.pairs.size());
    for (std::size_t i = 0; i < lms.pairs.size(); ++i) {
        const auto& pr = lms.pairs[i];
        for (int a = 0; a < 3; ++a) {
            if (!(pr.fixed[a] >= 0.0 && pr.fixed[a] <= g[a] - 1)) {
                throw ValidationError("tre: fixed landmark " + std::to_string(i + 1) + " lies outside the DVF grid");
            }
        }
        double sq = 0.0;
        for (int a = 0; a < 3; ++a) {
            const double u = diff::trilinear_at(d.field, a, pr.fixed[0], pr.fixed[1], pr.fixed[2]);
            const double diffmm = (pr.fixed[a] + u - pr.moving[a]) * spacing[a];
            sq += diffmm * diffmm;
        }
        errors.push_back(std::sqrt(sq));
    }
    return TreReport::from_errors(std::move(case_id), std::move(mode), std::move(errors));
}

TreReport tre(const LandmarkSet& lms, const Dvf& d, std::string case_id, std::string mode) {
    return tre(lms, d, lms.spacing, std::move(case_id), std::move(mode));
}

TreReport tre_identity(const LandmarkSet& lms, const Vec3& spacing, std::string case_id, std::string mode) {
    std::vector<double> errors;
    errors.reserve(lms.pairs.size());
    for (const auto& pr : lms.pairs) {
        double sq = 0.0;
        for (int a = 0; a < 3; ++a) {
            const double e = (pr.fixed[a] - pr.moving[a]) * spacing[a];
            sq += e * e;
        }
        errors.push_back(std::sqrt(sq));
    }
    return TreReport::from_errors(std::move(case_id), std::move(mode), std::move(errors));
}

// --- synthetic cases -----------------------------------------------------------------

namespace {

/// In-place separable Gaussian blur of one channel, clamped at the border.
void blur(std::vector<double>& f, Grid3 g, double sigma) {
    const int rad = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
    std::vector<double> k(2 * rad + 1);
    double ks = 0.0;
    for (int i = -rad; i <= rad; ++i) ks += k[i + rad] = std::exp(-0.5 * i * i / (sigma * sigma));
    for (auto& v : k) v /= ks;
    const std::array<int, 3> n{g.d, g.h, g.w};
    const std::array<std::size_t, 3> stride{static_cast<std::size_t>(g.h) * g.w, static_cast<std::size_t>(g.w), 1};
    std::vector<double> line;
    for (int axis = 0; axis < 3; ++axis) {
        const int len = n[axis];
        line.resize(len);
        const int o1 = axis == 0 ? 1 : 0;
        const int o2 = axis == 2 ? 1 : 2;
        for (int a = 0; a < n[o1]; ++a) {
            for (int b = 0; b < n[o2]; ++b) {
                const std::size_t base = a * stride[o1] + b * stride[o2];
                for (int i = 0; i < len; ++i) line[i] = f[base + i * stride[axis]];
                for (int i = 0; i < len; ++i) {
                    double s = 0.0;
                    for (int j = -rad; j <= rad; ++j) s += k[j + rad] * line[std::clamp(i + j, 0, len - 1)];
                    f[base + i * stride[axis]] = s;
                }
            }
        }
    }
}

double taper(int i, int n, double width) {
    const double dist = std::min(i, n - 1 - i);
    if (dist >= width) return 1.0;
    return 0.5 - 0.5 * std::cos(std::numbers::pi * dist / width);
}

}  // namespace

SyntheticCase make_synthetic_case(Grid3 dims, double amplitude, double smoothness, std::uint64_t seed) {
    const int smallest = std::min({dims.d, dims.h, dims.w});
    if (smallest < 8) throw ValidationError("synthetic case needs at least 8 voxels per axis");
    if (!(amplitude >= 0.0) || !(amplitude < smallest / 4.0)) {
        throw ValidationError("amplitude must lie in [0, min(dims)/4), got " + io::fmt_real(amplitude));
    }
    if (!(smoothness > 0.0)) throw ValidationError("smoothness must be > 0");
    net::SplitMix64 rng(seed);
    const std::size_t nvox = dims.voxels();

    // Phantom: random Gaussian blobs plus faint noise, rescaled to [0, 1].
    std::vector<double> ph(nvox, 0.0);
    const int blobs = std::max(8, static_cast<int>(nvox / 200));
    for (int b = 0; b < blobs; ++b) {
        const double c[3] = {rng.uniform() * (dims.d - 1), rng.uniform() * (dims.h - 1), rng.uniform() * (dims.w - 1)};
        const double s = 1.5 + 2.5 * rng.uniform();
        const double amp = 2.0 * rng.uniform() - 1.0;
        const int r = static_cast<int>(std::ceil(3.0 * s));
        const int lo[3] = {std::max(0, static_cast<int>(c[0]) - r), std::max(0, static_cast<int>(c[1]) - r),
                           std::max(0, static_cast<int>(c[2]) - r)};
        const int hi[3] = {std::min(dims.d - 1, static_cast<int>(c[0]) + r + 1),
                           std::min(dims.h - 1, static_cast<int>(c[1]) + r + 1),
                           std::min(dims.w - 1, static_cast<int>(c[2]) + r + 1)};
        for (int z = lo[0]; z <= hi[0]; ++z)
            for (int y = lo[1]; y <= hi[1]; ++y)
                for (int x = lo[2]; x <= hi[2]; ++x) {
                    const double q = (z - c[0]) * (z - c[0]) + (y - c[1]) * (y - c[1]) + (x - c[2]) * (x - c[2]);
                    ph[(static_cast<std::size_t>(z) * dims.h + y) * dims.w + x] += amp * std::exp(-0.5 * q / (s * s));
                }
    }
    for (auto& v : ph) v += 0.02 * (2.0 * rng.uniform() - 1.0);
    const auto [mn, mx] = std::minmax_element(ph.begin(), ph.end());
    const double lo = *mn, span = std::max(*mx - *mn, 1e-12);
    std::vector<float> pf(nvox);
    for (std::size_t i = 0; i < nvox; ++i) pf[i] = static_cast<float>((ph[i] - lo) / span);

    // Ground truth: smoothed white noise, tapered, rescaled to the amplitude.
    std::array<std::vector<double>, 3> comp;
    for (auto& c : comp) {
        c.resize(nvox);
        for (auto& v : c) v = rng.normal();
        blur(c, dims, smoothness);
    }
    const double width = std::max(4.0, smoothness);
    double peak = 0.0;
    for (int z = 0; z < dims.d; ++z)
        for (int y = 0; y < dims.h; ++y)
            for (int x = 0; x < dims.w; ++x) {
                const double w = taper(z, dims.d, width) * taper(y, dims.h, width) * taper(x, dims.w, width);
                const std::size_t i = (static_cast<std::size_t>(z) * dims.h + y) * dims.w + x;
                double n2 = 0.0;
                for (auto& c : comp) {
                    c[i] *= w;
                    n2 += c[i] * c[i];
                }
                peak = std::max(peak, std::sqrt(n2));
            }

    SyntheticCase sc;
    sc.seed = seed;
    sc.amplitude = amplitude;
    sc.moving = Volume(dims, {1.0, 1.0, 1.0}, {0.0, 0.0, 0.0}, Units::normalized, std::move(pf));
    sc.gt.field = Tensor<float>(3, dims);
    sc.gt.grid_tag = "synthetic";
    const double k = peak > 0.0 ? amplitude / peak : 0.0;
    for (int a = 0; a < 3; ++a) {
        float* dst = sc.gt.field.channel(a);
        for (std::size_t i = 0; i < nvox; ++i) dst[i] = static_cast<float>(comp[a][i] * k);
    }
    const auto warped = diff::warp_forward(sc.moving.as_tensor<float>(), sc.gt.field);
    sc.fixed = Volume::from_tensor(warped, sc.moving);
    return sc;
}

// --- endpoint error ------------------------------------------------------------------

EpeStats epe(const Tensor<float>& pred, const Tensor<float>& gt, int shell) {
    if (!pred.same_shape(gt) || pred.channels() != 3) {
        throw ValidationError("epe: fields must share a 3-channel grid");
    }
    const auto g = pred.dims();
    EpeStats s;
    double sum = 0.0;
    for (int z = 0; z < g.d; ++z)
        for (int y = 0; y < g.h; ++y)
            for (int x = 0; x < g.w; ++x) {
                if (!interior(g, shell, z, y, x)) continue;
                double n2 = 0.0;
                for (int c = 0; c < 3; ++c) {
                    const double e = static_cast<double>(pred.at(c, z, y, x)) - gt.at(c, z, y, x);
                    n2 += e * e;
                }
                const double e = std::sqrt(n2);
                sum += e;
                s.max = std::max(s.max, e);
                ++s.voxels;
            }
    if (s.voxels == 0) throw ValidationError("epe: the interior mask is empty for grid " + g.str());
    s.mean = sum / static_cast<double>(s.voxels);
    return s;
}

EpeStats magnitude(const Tensor<float>& d, int shell) {
    const Tensor<float> zero(3, d.dims());
    return epe(d, zero, shell);
}

// --- tables ---------------------------------------------------------------------

Table build_table(const std::vector<TreReport>& reports) {
    if (reports.empty()) throw ValidationError("report table needs at least one report");
    Table t;
    std::vector<std::vector<std::pair<bool, double>>> cells;
    auto case_col = [&](const std::string& id) {
        const auto it = std::find(t.cases.begin(), t.cases.end(), id);
        if (it != t.cases.end()) return static_cast<std::size_t>(it - t.cases.begin());
        t.cases.push_back(id);
        for (auto& row : cells) row.emplace_back(false, 0.0);
        return t.cases.size() - 1;
    };
    for (const auto& r : reports) {
        const std::size_t col = case_col(r.case_id);
        auto it = std::find_if(t.rows.begin(), t.rows.end(), [&](const TableRow& row) { return row.mode == r.mode; });
        std::size_t ri;
        if (it == t.rows.end()) {
            t.rows.push_back({r.mode, {}, 0.0, 0.0});
            cells.emplace_back(t.cases.size(), std::pair<bool, double>{false, 0.0});
            ri = t.rows.size() - 1;
        } else {
            ri = static_cast<std::size_t>(it - t.rows.begin());
        }
        if (cells[ri][col].first) throw ValidationError("duplicate report for case `" + r.case_id + "` in mode `" + r.mode + "`");
        cells[ri][col] = {true, r.mean};
    }
    for (std::size_t ri = 0; ri < t.rows.size(); ++ri) {
        auto& row = t.rows[ri];
        std::vector<double> present;
        for (const auto& [has, v] : cells[ri]) {
            row.cells.push_back(has ? v : std::nan(""));
            if (has) present.push_back(v);
        }
        const auto summary = TreReport::from_errors("", "", present);
        row.mean = summary.mean;
        row.std = summary.std;
    }
    return t;
}

namespace {

std::string cell(double v) {
    if (std::isnan(v)) return "-";
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.2f", v);
    return buf;
}

}  // namespace

std::string render_text(const Table& t) {
    std::vector<std::vector<std::string>> grid;
    std::vector<std::string> head{"mode"};
    for (const auto& c : t.cases) head.push_back(c);
    head.push_back("mean");
    head.push_back("std");
    grid.push_back(head);
    for (const auto& r : t.rows) {
        std::vector<std::string> line{r.mode};
        for (double v : r.cells) line.push_back(cell(v));
        line.push_back(cell(r.mean));
        line.push_back(cell(r.std));
        grid.push_back(line);
    }
    std::vector<std::size_t> width(head.size(), 0);
    for (const auto& line : grid)
        for (std::size_t i = 0; i < line.size(); ++i) width[i] = std::max(width[i], line[i].size());
    std::string out;
    for (const auto& line : grid) {
        for (std::size_t i = 0; i < line.size(); ++i) {
            if (i == 0) {
                out += line[i] + std::string(width[i] - line[i].size(), ' ');
            } else {
                out += "  " + std::string(width[i] - line[i].size(), ' ') + line[i];
            }
        }
        out += '\n';
    }
    return out;
}

std::string render_csv(const Table& t) {
    std::string out = "mode";
    for (const auto& c : t.cases) out += "," + c;
    out += ",mean,std\n";
    for (const auto& r : t.rows) {
        out += r.mode;
        for (double v : r.cells) out += "," + (std::isnan(v) ? std::string() : io::fmt_real(v));
        out += "," + io::fmt_real(r.mean) + "," + io::fmt_real(r.std) + "\n";
    }
    return out;
}

std::optional<DirLabGrid> dirlab_copd_grid(const std::string& case_id) {
    struct Row {
        const char* id;
        int slices;
        double inplane;
    };
    static constexpr Row kCases[] = {{"copd1", 121, 0.625}, {"copd2", 102, 0.645}, {"copd3", 126, 0.652},
                                     {"copd4", 126, 0.590}, {"copd5", 131, 0.647}, {"copd6", 119, 0.633},
                                     {"copd7", 112, 0.625}, {"copd8", 115, 0.586}, {"copd9", 116, 0.664},
                                     {"copd10", 135, 0.742}};
    for (const auto& r : kCases) {
        if (case_id == r.id) return DirLabGrid{{r.slices, 512, 512}, {2.5, r.inplane, r.inplane}};
    }
    return std::nullopt;
}

std::string per_landmark_lines(const TreReport& r) {
    std::string out;
    for (double e : r.errors) out += io::fmt_real(e) + "\n";
    return out;
}

}  // namespace rrn::eval
