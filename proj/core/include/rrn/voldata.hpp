#pragma once

#include "rrn/tensor.hpp"

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace rrn {

/// Per-axis triple in (z, y, x) order.
using Vec3 = std::array<double, 3>;

enum class Units { hu, normalized };
enum class DType { i16, f32 };

std::string to_string(Units u);
std::string to_string(DType t);

/// Scalar image on a regular grid. Values are kept in float regardless of the
/// on-disk type.
class Volume {
  public:
    Volume() = default;
    Volume(Grid3 dims, Vec3 spacing, Vec3 origin, Units units, std::vector<float> data);
    /// Zero-filled volume with unit spacing.
    explicit Volume(Grid3 dims, Units units = Units::normalized);

    [[nodiscard]] Grid3 dims() const { return dims_; }
    [[nodiscard]] const Vec3& spacing() const { return spacing_; }
    [[nodiscard]] const Vec3& origin() const { return origin_; }
    [[nodiscard]] Units units() const { return units_; }
    [[nodiscard]] const std::vector<float>& data() const { return data_; }
    [[nodiscard]] std::vector<float>& data() { return data_; }

    [[nodiscard]] float at(int z, int y, int x) const { return data_[index(z, y, x)]; }
    float& at(int z, int y, int x) { return data_[index(z, y, x)]; }
    [[nodiscard]] std::size_t index(int z, int y, int x) const {
        return (static_cast<std::size_t>(z) * dims_.h + y) * dims_.w + x;
    }

    /// Single-channel tensor view of the intensities.
    template <typename T>
    [[nodiscard]] Tensor<T> as_tensor() const {
        Tensor<T> t(1, dims_);
        for (std::size_t i = 0; i < data_.size(); ++i) t[i] = static_cast<T>(data_[i]);
        return t;
    }
    /// Volume with the geometry of `like` and the values of channel 0 of `t`.
    template <typename T>
    static Volume from_tensor(const Tensor<T>& t, const Volume& like) {
        std::vector<float> v(t.plane());
        for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<float>(t[i]);
        return Volume(t.dims(), like.spacing_, like.origin_, like.units_, std::move(v));
    }

  private:
    void validate() const;

    Grid3 dims_{};
    Vec3 spacing_{1.0, 1.0, 1.0};
    Vec3 origin_{0.0, 0.0, 0.0};
    Units units_ = Units::hu;
    std::vector<float> data_;
};

/// Half-open voxel box [lo, hi).
struct CropBox {
    std::array<int, 3> lo{};
    std::array<int, 3> hi{};

    [[nodiscard]] Grid3 extent() const { return {hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]}; }
    void validate(Grid3 within) const;
    static CropBox full(Grid3 dims) { return {{0, 0, 0}, {dims.d, dims.h, dims.w}}; }
};

/// Affine per-axis point map p' = (p - offset) * scale between two named grids.
struct GridTransform {
    std::string source_tag;
    std::string target_tag;
    Grid3 source_dims{};
    Grid3 target_dims{};
    CropBox crop{};
    Vec3 offset{0.0, 0.0, 0.0};
    Vec3 scale{1.0, 1.0, 1.0};

    /// Crop followed by corner-aligned resampling of the cropped extent to `target`.
    static GridTransform crop_resample(std::string source_tag, Grid3 source, const CropBox& crop,
                                       std::string target_tag, Grid3 target);
    static GridTransform identity(std::string tag, Grid3 dims);

    [[nodiscard]] Vec3 apply(const Vec3& p) const;
    [[nodiscard]] GridTransform inverse() const;
    [[nodiscard]] std::string render() const;
    static GridTransform parse(const std::string& text);
};

struct LandmarkPair {
    Vec3 moving{};
    Vec3 fixed{};
};

/// Paired points in continuous 0-based voxel coordinates (z, y, x) of the grid
/// named by `grid_tag`.
struct LandmarkSet {
    std::vector<LandmarkPair> pairs;
    std::string grid_tag;
    Grid3 dims{};
    Vec3 spacing{1.0, 1.0, 1.0};

    [[nodiscard]] bool inside(const Vec3& p) const;
};

struct MappedLandmarks {
    LandmarkSet set;
    /// Indices of pairs with at least one point outside the target grid.
    std::vector<std::size_t> outside;
};

/// Displacement field with the physical spacing of its grid.
struct Dvf {
    Tensor<float> field;
    Vec3 spacing{1.0, 1.0, 1.0};
    std::string grid_tag;
};

// --- files -----------------------------------------------------------------

enum class VolumeFormat { native, metaimage };

/// Reads a native `.vhdr` header (or a MetaImage `.mhd`) plus its raw payload.
Volume load_volume(const std::filesystem::path& header, VolumeFormat format);
/// Picks the format from the extension (`.mhd` -> MetaImage, otherwise native).
Volume load_volume(const std::filesystem::path& header);
/// Headerless slab, e.g. the DirLab `.img` distribution.
Volume load_raw_volume(const std::filesystem::path& payload, Grid3 dims, Vec3 spacing, DType dtype);
/// Writes `<header>` and the payload `<header stem>.raw` next to it.
void save_volume(const Volume& v, const std::filesystem::path& header, DType dtype = DType::f32);

/// DirLab landmark files: one point per line, `x y z`, 1-based voxel indices.
LandmarkSet load_landmarks(const std::filesystem::path& moving, const std::filesystem::path& fixed,
                           std::string grid_tag, Grid3 dims, Vec3 spacing);
/// Writes 1-based `x y z` lines for either side of the set.
void save_landmarks(const LandmarkSet& lms, const std::filesystem::path& moving, const std::filesystem::path& fixed);
MappedLandmarks map_landmarks(const LandmarkSet& lms, const GridTransform& t);

/// Payload at `path` (f32 little-endian, channel-major 3xDxHxW) with a text
/// sidecar at `path + ".hdr"`.
void save_dvf(const Dvf& d, const std::filesystem::path& path);
Dvf load_dvf(const std::filesystem::path& path);

// --- preprocessing -----------------------------------------------------------

Volume clip_intensities(const Volume& v, float lo, float hi);
/// Linear map of [lo, hi] onto [0, 1]; output units are `normalized`.
Volume rescale_unit(const Volume& v, float lo, float hi);
Volume crop(const Volume& v, const CropBox& box);
/// Trilinear, corner-aligned resampling. Physical extent (n - 1) * spacing is preserved.
Volume resample(const Volume& v, Grid3 target);

/// Bounding box of the largest connected region below `threshold` that does not
/// touch the volume border, padded by `pad` voxels. Returns nullopt when no
/// such region exists.
std::optional<CropBox> auto_lung_box(const Volume& v, float threshold = -320.0f, int pad = 5);

}  // namespace rrn
