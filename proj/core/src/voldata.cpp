#include "rrn/voldata.hpp"

#include "rrn/textio.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <deque>
#include <fstream>
#include <sstream>

namespace rrn {

static_assert(std::endian::native == std::endian::little, "payload I/O assumes a little-endian host");

namespace fs = std::filesystem;

std::string Grid3::str() const { return std::to_string(d) + "x" + std::to_string(h) + "x" + std::to_string(w); }

template <typename T>
void require_finite(const Tensor<T>& t, const std::string& what) {
    for (std::size_t i = 0; i < t.size(); ++i) {
        if (!std::isfinite(static_cast<double>(t[i]))) throw ValidationError(what + ": non-finite value at index " + std::to_string(i));
    }
}
template void require_finite(const Tensor<float>&, const std::string&);
template void require_finite(const Tensor<double>&, const std::string&);

std::string to_string(Units u) { return u == Units::hu ? "hu" : "normalized"; }
std::string to_string(DType t) { return t == DType::i16 ? "i16" : "f32"; }

static Units parse_units(const std::string& s) {
    if (s == "hu") return Units::hu;
    if (s == "normalized") return Units::normalized;
    throw ValidationError("unknown units `" + s + "`");
}

static DType parse_dtype(const std::string& s) {
    if (s == "i16") return DType::i16;
    if (s == "f32") return DType::f32;
    throw ValidationError("unsupported dtype `" + s + "` (expected i16 or f32)");
}

// --- Volume ------------------------------------------------------------------

Volume::Volume(Grid3 dims, Vec3 spacing, Vec3 origin, Units units, std::vector<float> data)
    : dims_(dims), spacing_(spacing), origin_(origin), units_(units), data_(std::move(data)) {
    validate();
}

Volume::Volume(Grid3 dims, Units units) : dims_(dims), units_(units), data_(dims.voxels(), 0.0f) { validate(); }

void Volume::validate() const {
    if (dims_.d < 1 || dims_.h < 1 || dims_.w < 1) throw ValidationError("volume dims must be >= 1, got " + dims_.str());
    for (double s : spacing_) {
        if (!(s > 0.0) || !std::isfinite(s)) throw ValidationError("volume spacing must be positive and finite");
    }
    for (double o : origin_) {
        if (!std::isfinite(o)) throw ValidationError("volume origin must be finite");
    }
    if (data_.size() != dims_.voxels()) {
        throw ValidationError("volume payload has " + std::to_string(data_.size()) + " voxels, dims " + dims_.str() +
                              " require " + std::to_string(dims_.voxels()));
    }
    for (std::size_t i = 0; i < data_.size(); ++i) {
        if (!std::isfinite(data_[i])) throw ValidationError("volume contains a non-finite value at index " + std::to_string(i));
    }
}

// --- geometry ------------------------------------------------------------------

void CropBox::validate(Grid3 within) const {
    for (int a = 0; a < 3; ++a) {
        if (lo[a] < 0 || hi[a] > within[a] || lo[a] >= hi[a]) {
            throw ValidationError("crop box axis " + std::to_string(a) + " [" + std::to_string(lo[a]) + ", " +
                                  std::to_string(hi[a]) + ") is empty or outside dims " + within.str());
        }
    }
}

GridTransform GridTransform::crop_resample(std::string source_tag, Grid3 source, const CropBox& box,
                                           std::string target_tag, Grid3 target) {
    box.validate(source);
    GridTransform t;
    t.source_tag = std::move(source_tag);
    t.target_tag = std::move(target_tag);
    t.source_dims = source;
    t.target_dims = target;
    t.crop = box;
    const Grid3 ext = box.extent();
    for (int a = 0; a < 3; ++a) {
        t.offset[a] = box.lo[a];
        t.scale[a] = ext[a] > 1 ? static_cast<double>(target[a] - 1) / static_cast<double>(ext[a] - 1) : 1.0;
    }
    return t;
}

GridTransform GridTransform::identity(std::string tag, Grid3 dims) {
    return crop_resample(tag, dims, CropBox::full(dims), tag, dims);
}

Vec3 GridTransform::apply(const Vec3& p) const {
    return {(p[0] - offset[0]) * scale[0], (p[1] - offset[1]) * scale[1], (p[2] - offset[2]) * scale[2]};
}

GridTransform GridTransform::inverse() const {
    GridTransform inv;
    inv.source_tag = target_tag;
    inv.target_tag = source_tag;
    inv.source_dims = target_dims;
    inv.target_dims = source_dims;
    inv.crop = CropBox::full(target_dims);
    for (int a = 0; a < 3; ++a) {
        inv.scale[a] = 1.0 / scale[a];
        inv.offset[a] = -offset[a] * scale[a];
    }
    return inv;
}

std::string GridTransform::render() const {
    io::KeyValues kv;
    auto triple = [](const auto& v) {
        return io::fmt_real(v[0]) + " " + io::fmt_real(v[1]) + " " + io::fmt_real(v[2]);
    };
    kv.set("source_tag", source_tag);
    kv.set("target_tag", target_tag);
    kv.set("source_dims", triple(source_dims.as_array()));
    kv.set("target_dims", triple(target_dims.as_array()));
    kv.set("crop_lo", triple(crop.lo));
    kv.set("crop_hi", triple(crop.hi));
    kv.set("offset", triple(offset));
    kv.set("scale", triple(scale));
    return kv.render();
}

GridTransform GridTransform::parse(const std::string& text) {
    auto kv = io::KeyValues::parse(text, "grid transform");
    GridTransform t;
    t.source_tag = kv.get("source_tag");
    t.target_tag = kv.get("target_tag");
    auto grid = [&](const char* key) {
        auto v = io::parse_ints(kv.get(key), 3, key);
        return Grid3{v[0], v[1], v[2]};
    };
    t.source_dims = grid("source_dims");
    t.target_dims = grid("target_dims");
    auto lo = io::parse_ints(kv.get("crop_lo"), 3, "crop_lo");
    auto hi = io::parse_ints(kv.get("crop_hi"), 3, "crop_hi");
    std::copy(lo.begin(), lo.end(), t.crop.lo.begin());
    std::copy(hi.begin(), hi.end(), t.crop.hi.begin());
    auto off = io::parse_reals(kv.get("offset"), 3, "offset");
    auto sc = io::parse_reals(kv.get("scale"), 3, "scale");
    std::copy(off.begin(), off.end(), t.offset.begin());
    std::copy(sc.begin(), sc.end(), t.scale.begin());
    return t;
}

bool LandmarkSet::inside(const Vec3& p) const {
    for (int a = 0; a < 3; ++a) {
        if (!(p[a] >= 0.0 && p[a] <= dims[a] - 1)) return false;
    }
    return true;
}

// --- volume files ----------------------------------------------------------------

static std::string triple_str(const Vec3& v) {
    return io::fmt_real(v[0]) + " " + io::fmt_real(v[1]) + " " + io::fmt_real(v[2]);
}

static std::vector<float> decode_payload(const std::string& bytes, DType dtype, std::size_t voxels,
                                         const std::string& what) {
    const std::size_t width = dtype == DType::i16 ? 2 : 4;
    if (bytes.size() != voxels * width) {
        throw ValidationError(what + ": payload has " + std::to_string(bytes.size()) + " bytes, header implies " +
                              std::to_string(voxels * width));
    }
    std::vector<float> out(voxels);
    if (dtype == DType::f32) {
        std::memcpy(out.data(), bytes.data(), bytes.size());
    } else {
        for (std::size_t i = 0; i < voxels; ++i) {
            std::int16_t s;
            std::memcpy(&s, bytes.data() + 2 * i, 2);
            out[i] = static_cast<float>(s);
        }
    }
    return out;
}

static Volume load_native(const fs::path& header) {
    const auto kv = io::KeyValues::parse(io::read_file(header), header.string());
    const auto d = io::parse_ints(kv.get("dims"), 3, "dims");
    const auto sp = io::parse_reals(kv.get("spacing_mm"), 3, "spacing_mm");
    const auto org = io::parse_reals(kv.get_or("origin_mm", "0 0 0"), 3, "origin_mm");
    if (kv.get_or("order", "zyx") != "zyx") throw ValidationError(header.string() + ": only order=zyx is supported");
    const DType dtype = parse_dtype(kv.get("dtype"));
    const Units units = parse_units(kv.get_or("units", "hu"));
    if (d[0] < 1 || d[1] < 1 || d[2] < 1) throw ValidationError(header.string() + ": dims must be positive");
    const Grid3 dims{d[0], d[1], d[2]};
    fs::path payload = kv.get("data_file");
    if (payload.is_relative()) payload = header.parent_path() / payload;
    auto data = decode_payload(io::read_file(payload), dtype, dims.voxels(), payload.string());
    return Volume(dims, {sp[0], sp[1], sp[2]}, {org[0], org[1], org[2]}, units, std::move(data));
}

static Volume load_metaimage(const fs::path& header) {
    const auto kv = io::KeyValues::parse(io::read_file(header), header.string());
    if (kv.get_or("NDims", "3") != "3") throw ValidationError(header.string() + ": only 3D MetaImage is supported");
    if (kv.get_or("CompressedData", "False") == "True") throw ValidationError(header.string() + ": compressed MetaImage is not supported");
    const auto msb = kv.get_or("BinaryDataByteOrderMSB", kv.get_or("ElementByteOrderMSB", "False"));
    if (msb == "True") throw ValidationError(header.string() + ": big-endian payloads are not supported");
    // MetaImage lists axes x y z; storage is x-fastest, which is our zyx layout.
    const auto d = io::parse_ints(kv.get("DimSize"), 3, "DimSize");
    const auto sp = io::parse_reals(kv.get_or("ElementSpacing", kv.get_or("ElementSize", "1 1 1")), 3, "ElementSpacing");
    const auto org = io::parse_reals(kv.get_or("Offset", kv.get_or("Origin", "0 0 0")), 3, "Offset");
    const auto& type = kv.get("ElementType");
    DType dtype;
    if (type == "MET_SHORT") dtype = DType::i16;
    else if (type == "MET_FLOAT") dtype = DType::f32;
    else throw ValidationError(header.string() + ": unsupported ElementType " + type);
    const Grid3 dims{d[2], d[1], d[0]};
    fs::path payload = kv.get("ElementDataFile");
    if (payload == "LOCAL") throw ValidationError(header.string() + ": inline MetaImage payloads are not supported");
    if (payload.is_relative()) payload = header.parent_path() / payload;
    auto data = decode_payload(io::read_file(payload), dtype, dims.voxels(), payload.string());
    return Volume(dims, {sp[2], sp[1], sp[0]}, {org[2], org[1], org[0]}, Units::hu, std::move(data));
}

Volume load_volume(const fs::path& header, VolumeFormat format) {
    if (!fs::exists(header)) throw ValidationError("volume header not found: " + header.string());
    return format == VolumeFormat::metaimage ? load_metaimage(header) : load_native(header);
}

Volume load_volume(const fs::path& header) {
    return load_volume(header, header.extension() == ".mhd" ? VolumeFormat::metaimage : VolumeFormat::native);
}

Volume load_raw_volume(const fs::path& payload, Grid3 dims, Vec3 spacing, DType dtype) {
    auto data = decode_payload(io::read_file(payload), dtype, dims.voxels(), payload.string());
    return Volume(dims, spacing, {0.0, 0.0, 0.0}, Units::hu, std::move(data));
}

void save_volume(const Volume& v, const fs::path& header, DType dtype) {
    fs::path payload = header;
    payload.replace_extension(".raw");
    std::string bytes;
    if (dtype == DType::f32) {
        bytes.resize(v.data().size() * 4);
        std::memcpy(bytes.data(), v.data().data(), bytes.size());
    } else {
        bytes.resize(v.data().size() * 2);
        for (std::size_t i = 0; i < v.data().size(); ++i) {
            const float x = std::nearbyint(v.data()[i]);
            if (x < -32768.0f || x > 32767.0f) throw ValidationError("value out of i16 range at index " + std::to_string(i));
            const auto s = static_cast<std::int16_t>(x);
            std::memcpy(bytes.data() + 2 * i, &s, 2);
        }
    }
    io::KeyValues kv;
    const auto g = v.dims();
    kv.set("dims", std::to_string(g.d) + " " + std::to_string(g.h) + " " + std::to_string(g.w));
    kv.set("spacing_mm", triple_str(v.spacing()));
    kv.set("origin_mm", triple_str(v.origin()));
    kv.set("dtype", to_string(dtype));
    kv.set("order", "zyx");
    kv.set("units", to_string(v.units()));
    kv.set("data_file", payload.filename().string());
    io::atomic_write(payload, bytes);
    io::atomic_write(header, kv.render());
}

// --- landmarks ---------------------------------------------------------------

static std::vector<Vec3> read_points(const fs::path& path) {
    std::istringstream in(io::read_file(path));
    std::vector<Vec3> pts;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (io::trim(line).empty()) continue;
        const auto v = io::parse_reals(line, 3, path.string() + ":" + std::to_string(lineno));
        // file order x y z, 1-based
        pts.push_back({v[2] - 1.0, v[1] - 1.0, v[0] - 1.0});
    }
    return pts;
}

LandmarkSet load_landmarks(const fs::path& moving, const fs::path& fixed, std::string grid_tag, Grid3 dims,
                           Vec3 spacing) {
    const auto mov = read_points(moving);
    const auto fix = read_points(fixed);
    if (mov.size() != fix.size()) {
        throw ValidationError("landmark count mismatch: " + std::to_string(mov.size()) + " moving vs " +
                              std::to_string(fix.size()) + " fixed");
    }
    LandmarkSet set;
    set.grid_tag = std::move(grid_tag);
    set.dims = dims;
    set.spacing = spacing;
    for (std::size_t i = 0; i < mov.size(); ++i) {
        if (!set.inside(mov[i]) || !set.inside(fix[i])) {
            throw ValidationError("landmark pair " + std::to_string(i + 1) + " lies outside grid " + dims.str());
        }
        set.pairs.push_back({mov[i], fix[i]});
    }
    return set;
}

void save_landmarks(const LandmarkSet& lms, const fs::path& moving, const fs::path& fixed) {
    std::string m, f;
    auto line = [](const Vec3& p) {
        return io::fmt_real(p[2] + 1.0) + " " + io::fmt_real(p[1] + 1.0) + " " + io::fmt_real(p[0] + 1.0) + "\n";
    };
    for (const auto& pr : lms.pairs) {
        m += line(pr.moving);
        f += line(pr.fixed);
    }
    io::atomic_write(moving, m);
    io::atomic_write(fixed, f);
}

MappedLandmarks map_landmarks(const LandmarkSet& lms, const GridTransform& t) {
    if (lms.grid_tag != t.source_tag) {
        throw ValidationError("landmarks live on grid `" + lms.grid_tag + "`, transform expects `" + t.source_tag + "`");
    }
    MappedLandmarks out;
    out.set.grid_tag = t.target_tag;
    out.set.dims = t.target_dims;
    for (int a = 0; a < 3; ++a) out.set.spacing[a] = lms.spacing[a] / t.scale[a];
    for (std::size_t i = 0; i < lms.pairs.size(); ++i) {
        LandmarkPair p{t.apply(lms.pairs[i].moving), t.apply(lms.pairs[i].fixed)};
        if (!out.set.inside(p.moving) || !out.set.inside(p.fixed)) out.outside.push_back(i);
        out.set.pairs.push_back(p);
    }
    return out;
}

// --- DVF files -----------------------------------------------------------------

static fs::path sidecar_of(const fs::path& path) {
    fs::path s = path;
    s += ".hdr";
    return s;
}

void save_dvf(const Dvf& d, const fs::path& path) {
    const auto& f = d.field;
    if (f.channels() != 3) throw ValidationError("a DVF must have 3 channels, got " + std::to_string(f.channels()));
    std::string bytes(f.size() * 4, '\0');
    std::memcpy(bytes.data(), f.data(), bytes.size());
    io::KeyValues kv;
    const auto g = f.dims();
    kv.set("dims", std::to_string(g.d) + " " + std::to_string(g.h) + " " + std::to_string(g.w));
    kv.set("channels", "3");
    kv.set("units", "voxels");
    kv.set("level", std::to_string(f.level()));
    kv.set("spacing_mm", triple_str(d.spacing));
    if (!d.grid_tag.empty()) kv.set("grid", d.grid_tag);
    io::atomic_write(path, bytes);
    io::atomic_write(sidecar_of(path), kv.render());
}

Dvf load_dvf(const fs::path& path) {
    const auto side = sidecar_of(path);
    const auto kv = io::KeyValues::parse(io::read_file(side), side.string());
    const auto d = io::parse_ints(kv.get("dims"), 3, "dims");
    if (kv.get("channels") != "3") throw ValidationError(side.string() + ": channels must be 3");
    if (kv.get_or("units", "voxels") != "voxels") throw ValidationError(side.string() + ": units must be voxels");
    const auto level = io::parse_ints(kv.get_or("level", "0"), 1, "level");
    const auto sp = io::parse_reals(kv.get_or("spacing_mm", "1 1 1"), 3, "spacing_mm");
    Dvf out{Tensor<float>(3, Grid3{d[0], d[1], d[2]}, level[0]), {sp[0], sp[1], sp[2]}, kv.get_or("grid", "")};
    const auto bytes = io::read_file(path);
    if (bytes.size() != out.field.size() * 4) {
        throw ValidationError(path.string() + ": payload has " + std::to_string(bytes.size()) + " bytes, sidecar implies " +
                              std::to_string(out.field.size() * 4));
    }
    std::memcpy(out.field.data(), bytes.data(), bytes.size());
    require_finite(out.field, path.string());
    return out;
}

// --- preprocessing ------------------------------------------------------------------

Volume clip_intensities(const Volume& v, float lo, float hi) {
    if (!(lo < hi)) throw ValidationError("clip bounds must satisfy lo < hi");
    auto data = v.data();
    for (auto& x : data) x = std::clamp(x, lo, hi);
    return Volume(v.dims(), v.spacing(), v.origin(), v.units(), std::move(data));
}

Volume rescale_unit(const Volume& v, float lo, float hi) {
    if (!(lo < hi)) throw ValidationError("rescale bounds must satisfy lo < hi");
    auto data = v.data();
    const float inv = 1.0f / (hi - lo);
    for (auto& x : data) x = (x - lo) * inv;
    return Volume(v.dims(), v.spacing(), v.origin(), Units::normalized, std::move(data));
}

Volume crop(const Volume& v, const CropBox& box) {
    box.validate(v.dims());
    const Grid3 ext = box.extent();
    std::vector<float> data(ext.voxels());
    std::size_t i = 0;
    for (int z = box.lo[0]; z < box.hi[0]; ++z)
        for (int y = box.lo[1]; y < box.hi[1]; ++y)
            for (int x = box.lo[2]; x < box.hi[2]; ++x) data[i++] = v.at(z, y, x);
    Vec3 origin = v.origin();
    for (int a = 0; a < 3; ++a) origin[a] += box.lo[a] * v.spacing()[a];
    return Volume(ext, v.spacing(), origin, v.units(), std::move(data));
}

Volume resample(const Volume& v, Grid3 target) {
    if (target.d < 2 || target.h < 2 || target.w < 2) throw ValidationError("resample target dims must be >= 2 per axis");
    const Grid3 src = v.dims();
    Vec3 ratio{};
    Vec3 spacing{};
    for (int a = 0; a < 3; ++a) {
        ratio[a] = src[a] > 1 ? static_cast<double>(src[a] - 1) / (target[a] - 1) : 0.0;
        spacing[a] = src[a] > 1 ? v.spacing()[a] * ratio[a] : v.spacing()[a];
    }
    // Per-axis lower index and weight, precomputed once.
    struct Tap {
        int i0, i1;
        double w1;
    };
    auto taps = [&](int axis) {
        std::vector<Tap> t(target[axis]);
        for (int p = 0; p < target[axis]; ++p) {
            const double s = p * ratio[axis];
            int i0 = std::min(static_cast<int>(std::floor(s)), src[axis] - 1);
            const int i1 = std::min(i0 + 1, src[axis] - 1);
            t[p] = {i0, i1, s - i0};
        }
        return t;
    };
    const auto tz = taps(0), ty = taps(1), tx = taps(2);
    std::vector<float> out(target.voxels());
    std::size_t i = 0;
    for (int z = 0; z < target.d; ++z)
        for (int y = 0; y < target.h; ++y)
            for (int x = 0; x < target.w; ++x) {
                const auto& a = tz[z];
                const auto& b = ty[y];
                const auto& c = tx[x];
                auto lerp_x = [&](int zz, int yy) {
                    return (1.0 - c.w1) * v.at(zz, yy, c.i0) + c.w1 * v.at(zz, yy, c.i1);
                };
                const double c0 = (1.0 - b.w1) * lerp_x(a.i0, b.i0) + b.w1 * lerp_x(a.i0, b.i1);
                const double c1 = (1.0 - b.w1) * lerp_x(a.i1, b.i0) + b.w1 * lerp_x(a.i1, b.i1);
                out[i++] = static_cast<float>((1.0 - a.w1) * c0 + a.w1 * c1);
            }
    return Volume(target, spacing, v.origin(), v.units(), std::move(out));
}

std::optional<CropBox> auto_lung_box(const Volume& v, float threshold, int pad) {
    const Grid3 g = v.dims();
    std::vector<int> label(g.voxels(), -1);
    std::size_t best_size = 0;
    CropBox best{};
    int next = 0;
    std::deque<std::array<int, 3>> queue;
    for (int z = 0; z < g.d; ++z)
        for (int y = 0; y < g.h; ++y)
            for (int x = 0; x < g.w; ++x) {
                const auto idx = v.index(z, y, x);
                if (label[idx] >= 0 || v.data()[idx] >= threshold) continue;
                const int id = next++;
                label[idx] = id;
                queue.push_back({z, y, x});
                std::size_t size = 0;
                bool border = false;
                CropBox box{{z, y, x}, {z + 1, y + 1, x + 1}};
                while (!queue.empty()) {
                    const auto p = queue.front();
                    queue.pop_front();
                    ++size;
                    for (int a = 0; a < 3; ++a) {
                        box.lo[a] = std::min(box.lo[a], p[a]);
                        box.hi[a] = std::max(box.hi[a], p[a] + 1);
                        if (p[a] == 0 || p[a] == g[a] - 1) border = true;
                    }
                    static constexpr int nb[6][3] = {{1, 0, 0}, {-1, 0, 0}, {0, 1, 0}, {0, -1, 0}, {0, 0, 1}, {0, 0, -1}};
                    for (const auto& o : nb) {
                        const int q[3] = {p[0] + o[0], p[1] + o[1], p[2] + o[2]};
                        if (q[0] < 0 || q[1] < 0 || q[2] < 0 || q[0] >= g.d || q[1] >= g.h || q[2] >= g.w) continue;
                        const auto qi = v.index(q[0], q[1], q[2]);
                        if (label[qi] >= 0 || v.data()[qi] >= threshold) continue;
                        label[qi] = id;
                        queue.push_back({q[0], q[1], q[2]});
                    }
                }
                // Air outside the body touches the border; lungs do not.
                if (!border && size > best_size) {
                    best_size = size;
                    best = box;
                }
            }
    if (best_size == 0) return std::nullopt;
    for (int a = 0; a < 3; ++a) {
        best.lo[a] = std::max(0, best.lo[a] - pad);
        best.hi[a] = std::min(g[a], best.hi[a] + pad);
    }
    return best;
}

}  // namespace rrn
