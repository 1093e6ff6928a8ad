#pragma once

#include <Eigen/Core>

namespace fruitform {

/// Dense (C, H, W) activation block. Storage is position-major: row y*width+x,
/// one column per channel, so a channel plane is a contiguous column and
/// im2col feeds straight into a GEMM.
template <typename Scalar>
struct Tensor3 {
    using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

    int channels = 0;
    int height = 0;
    int width = 0;
    Matrix data; // (height*width, channels)

    Tensor3() = default;
    Tensor3(int c, int h, int w) : channels(c), height(h), width(w), data(Matrix::Zero(h * w, c)) {}

    Scalar& at(int c, int y, int x) { return data(y * width + x, c); }
    Scalar at(int c, int y, int x) const { return data(y * width + x, c); }

    template <typename Other>
    Tensor3<Other> cast() const {
        Tensor3<Other> out;
        out.channels = channels;
        out.height = height;
        out.width = width;
        out.data = data.template cast<Other>();
        return out;
    }
};

using Tensor3f = Tensor3<float>;
using Tensor3d = Tensor3<double>;

} // namespace fruitform
