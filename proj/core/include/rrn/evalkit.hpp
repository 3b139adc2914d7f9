#pragma once

#include "rrn/voldata.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace rrn::eval {

struct TreReport {
    std::string case_id;
    std::string mode;
    /// mm, one per landmark pair in input order
    std::vector<double> errors;
    double mean = 0.0;
    /// population standard deviation
    double std = 0.0;

    static TreReport from_errors(std::string case_id, std::string mode, std::vector<double> errors);
};

/// Pull-back TRE: each fixed landmark is moved by the field sampled (trilinear)
/// at its position and compared with its moving partner, in mm of `spacing`.
TreReport tre(const LandmarkSet& lms, const Dvf& d, const Vec3& spacing, std::string case_id = "",
              std::string mode = "");
/// Same, with the landmark set's own spacing.
TreReport tre(const LandmarkSet& lms, const Dvf& d, std::string case_id = "", std::string mode = "");

/// TRE of the zero field, without materializing it.
TreReport tre_identity(const LandmarkSet& lms, const Vec3& spacing, std::string case_id = "", std::string mode = "");

struct SyntheticCase {
    Volume moving;
    Volume fixed;
    Dvf gt;
    std::uint64_t seed = 0;
    double amplitude = 0.0;
};

/// Blob phantom warped by a smooth random field whose largest vector has
/// length `amplitude` voxels and which fades to zero at the grid boundary.
SyntheticCase make_synthetic_case(Grid3 dims, double amplitude, double smoothness, std::uint64_t seed);

/// Voxels at least `shell` voxels away from every face.
inline bool interior(Grid3 dims, int shell, int z, int y, int x) {
    return z >= shell && y >= shell && x >= shell && z < dims.d - shell && y < dims.h - shell && x < dims.w - shell;
}

struct EpeStats {
    double mean = 0.0;
    double max = 0.0;
    std::size_t voxels = 0;
};

inline constexpr int kEpeShell = 4;

/// Endpoint error over the interior mask.
EpeStats epe(const Tensor<float>& pred, const Tensor<float>& gt, int shell = kEpeShell);

/// Mean and max displacement length over the interior mask.
EpeStats magnitude(const Tensor<float>& d, int shell = kEpeShell);

struct TableRow {
    std::string mode;
    std::vector<double> cells;
    double mean = 0.0;
    double std = 0.0;
};

struct Table {
    std::vector<std::string> cases;
    std::vector<TableRow> rows;
};

/// One row per mode, one column per case (mean TRE of that case), plus the
/// mean and population std of the row. Rows and columns keep first-seen order.
Table build_table(const std::vector<TreReport>& reports);
std::string render_text(const Table& t);
std::string render_csv(const Table& t);

/// Grid of a DirLab COPDGene case (`copd1` ... `copd10`), in (z, y, x) order.
struct DirLabGrid {
    Grid3 dims;
    Vec3 spacing;
};
std::optional<DirLabGrid> dirlab_copd_grid(const std::string& case_id);

/// One error per line, for plotting.
std::string per_landmark_lines(const TreReport& r);

}  // namespace rrn::eval
