#pragma once

#include <algorithm>
#include <array>
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace rrn {

/// Thrown for contract violations on user-supplied data (shapes, files, configs).
class ValidationError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

/// Thrown when a computation produces non-finite values.
class NumericalError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

/// Spatial extent of a 3D grid, axis order (z, y, x).
struct Grid3 {
    int d = 0;
    int h = 0;
    int w = 0;

    [[nodiscard]] std::size_t voxels() const {
        return static_cast<std::size_t>(d) * static_cast<std::size_t>(h) * static_cast<std::size_t>(w);
    }
    [[nodiscard]] int operator[](int axis) const { return axis == 0 ? d : (axis == 1 ? h : w); }
    [[nodiscard]] std::array<int, 3> as_array() const { return {d, h, w}; }
    [[nodiscard]] std::string str() const;

    friend bool operator==(const Grid3&, const Grid3&) = default;
};

/// Level 0 is the input resolution; level l is downsampled by 2^l.
inline Grid3 half_ceil(Grid3 g) { return {(g.d + 1) / 2, (g.h + 1) / 2, (g.w + 1) / 2}; }
inline Grid3 doubled(Grid3 g) { return {2 * g.d, 2 * g.h, 2 * g.w}; }

/// Dense channel-major (c, z, y, x) tensor. Doubles as FeatureMap and as DVF
/// storage (3 channels, displacement along axis k in channel k, voxel units).
template <typename T>
class Tensor {
  public:
    Tensor() = default;
    Tensor(int channels, Grid3 dims, int level = 0)
        : channels_(channels), dims_(dims), level_(level), data_(static_cast<std::size_t>(channels) * dims.voxels(), T(0)) {
        if (channels < 1 || dims.d < 1 || dims.h < 1 || dims.w < 1) {
            throw ValidationError("tensor shape must be positive, got " + std::to_string(channels) + "x" + dims.str());
        }
    }

    [[nodiscard]] int channels() const { return channels_; }
    [[nodiscard]] Grid3 dims() const { return dims_; }
    [[nodiscard]] int level() const { return level_; }
    void set_level(int level) { level_ = level; }
    [[nodiscard]] std::size_t size() const { return data_.size(); }
    [[nodiscard]] std::size_t plane() const { return dims_.voxels(); }
    [[nodiscard]] bool empty() const { return data_.empty(); }

    [[nodiscard]] T* data() { return data_.data(); }
    [[nodiscard]] const T* data() const { return data_.data(); }
    [[nodiscard]] std::vector<T>& values() { return data_; }
    [[nodiscard]] const std::vector<T>& values() const { return data_; }
    [[nodiscard]] T* channel(int c) { return data_.data() + static_cast<std::size_t>(c) * plane(); }
    [[nodiscard]] const T* channel(int c) const { return data_.data() + static_cast<std::size_t>(c) * plane(); }

    [[nodiscard]] std::size_t index(int c, int z, int y, int x) const {
        return ((static_cast<std::size_t>(c) * dims_.d + z) * dims_.h + y) * dims_.w + x;
    }
    T& at(int c, int z, int y, int x) { return data_[index(c, z, y, x)]; }
    const T& at(int c, int z, int y, int x) const { return data_[index(c, z, y, x)]; }
    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }

    [[nodiscard]] bool same_shape(const Tensor& o) const { return channels_ == o.channels_ && dims_ == o.dims_; }
    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    template <typename U>
    [[nodiscard]] Tensor<U> cast() const {
        Tensor<U> out(channels_, dims_, level_);
        for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
        return out;
    }

  private:
    int channels_ = 0;
    Grid3 dims_{};
    int level_ = 0;
    std::vector<T> data_;
};

template <typename T>
using FeatureMap = Tensor<T>;

/// Throws ValidationError if any element is NaN or infinite.
template <typename T>
void require_finite(const Tensor<T>& t, const std::string& what);

}  // namespace rrn
