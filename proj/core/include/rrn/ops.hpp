#pragma once

#include "rrn/tensor.hpp"

#include <span>
#include <vector>

/// Volumetric operator kernels. Each forward has a matching backward that
/// accumulates (+=) into caller-provided gradient buffers.
namespace rrn::diff {

/// 3x3x3 convolution weights, layout (cout, cin, 3, 3, 3), plus bias (cout).
template <typename T>
struct ConvWeights {
    int cin = 0;
    int cout = 0;
    int stride = 1;
    int dilation = 1;
    std::vector<T> weight;
    std::vector<T> bias;

    ConvWeights() = default;
    ConvWeights(int cin_, int cout_, int stride_ = 1, int dilation_ = 1)
        : cin(cin_), cout(cout_), stride(stride_), dilation(dilation_),
          weight(static_cast<std::size_t>(cout_) * cin_ * 27, T(0)), bias(static_cast<std::size_t>(cout_), T(0)) {}

    [[nodiscard]] std::size_t fan_in() const { return static_cast<std::size_t>(cin) * 27; }
};

/// Output grid of a zero-padded 3x3x3 convolution: ceil(n / stride) per axis.
Grid3 conv_output_dims(Grid3 in, int stride);
void validate_conv(int cin_actual, int cin, int stride, int dilation);

template <typename T>
Tensor<T> conv3_forward(const Tensor<T>& x, const ConvWeights<T>& p);

/// Any of `gx`, `gp` may be null.
template <typename T>
void conv3_backward(const Tensor<T>& x, const ConvWeights<T>& p, const Tensor<T>& gout, Tensor<T>* gx,
                    ConvWeights<T>* gp);

template <typename T>
Tensor<T> leaky_relu_forward(const Tensor<T>& x, T slope);
template <typename T>
void leaky_relu_backward(const Tensor<T>& x, T slope, const Tensor<T>& gout, Tensor<T>& gx);

/// Doubles every spatial axis. Coarse voxel k sits on fine voxel 2k; odd fine
/// voxels interpolate their two coarse neighbours and the last one replicates
/// the border. With `scale_values` every value is also doubled (DVF units).
template <typename T>
Tensor<T> upsample2x_forward(const Tensor<T>& x, bool scale_values);
template <typename T>
void upsample2x_backward(const Tensor<T>& gout, bool scale_values, Tensor<T>& gx);

enum class Padding { zeros, border };

/// out(c, v) = trilinear sample of x(c, .) at v + d(v).
template <typename T>
Tensor<T> warp_forward(const Tensor<T>& x, const Tensor<T>& d, Padding pad = Padding::zeros);
template <typename T>
void warp_backward(const Tensor<T>& x, const Tensor<T>& d, const Tensor<T>& gout, Padding pad, Tensor<T>* gx,
                   Tensor<T>* gd);

template <typename T>
Tensor<T> concat_forward(std::span<const Tensor<T>* const> parts);

/// Sampling of a field at a continuous position (z, y, x) with zero padding.
template <typename T>
T trilinear_at(const Tensor<T>& x, int channel, double z, double y, double x_pos);

/// Worker threads used by the matrix kernels.
void set_num_threads(int n);
int num_threads();

}  // namespace rrn::diff
